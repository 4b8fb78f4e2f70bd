import logging

from tqdm import tqdm

LEVEL_COLORS = {
    logging.DEBUG: "\x1b[38;21m",
    logging.INFO: "\x1b[38;5;39m",
    logging.WARNING: "\x1b[38;5;226m",
    logging.ERROR: "\x1b[38;5;196m",
    logging.CRITICAL: "\x1b[31;1m",
}
RESET = "\x1b[0m"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class CustomFormatter(logging.Formatter):
    """Colors the whole line by level."""

    def format(self, record: logging.LogRecord) -> str:
        line = super().format(record)
        color = LEVEL_COLORS.get(record.levelno)
        return f"{color}{line}{RESET}" if color else line


class TqdmHandler(logging.StreamHandler):
    """Writes through `tqdm.write` so log lines do not break an active progress bar."""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            tqdm.write(self.format(record), file=self.stream)
        except Exception:  # pylint: disable=broad-except
            self.handleError(record)


def set_verbosity(verbose: bool) -> None:
    ch.setLevel(logging.DEBUG if verbose else logging.INFO)


LOGGER = logging.getLogger(__package__)
LOGGER.setLevel(logging.DEBUG)

ch = TqdmHandler()
ch.setLevel(logging.INFO)
ch.setFormatter(CustomFormatter(LOG_FORMAT))

LOGGER.addHandler(ch)

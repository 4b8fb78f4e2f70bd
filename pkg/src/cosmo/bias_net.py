import torch
import torch.nn as nn

from cosmo.exceptions import ShapeMismatchError

DEFAULT_HIDDEN_WIDTH = 32


class BiasNet(nn.Module):
    """
    Domain-specific bias network: maps an image feature v (d_v) to a bias
    token beta (d_t) added to every prompt context position.

    Two affine layers with a rectifier in between and a linear output. The
    output layer starts at zero, so training begins from beta = 0, i.e. from
    plain unbiased prompts.
    """

    def __init__(
        self,
        feature_dim: int,
        token_dim: int,
        hidden_width: int = DEFAULT_HIDDEN_WIDTH,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        self.feature_dim = feature_dim
        self.token_dim = token_dim
        self.hidden_width = hidden_width
        bound = feature_dim**-0.5
        self.W1 = nn.Parameter(
            (torch.rand(feature_dim, hidden_width, generator=generator, dtype=dtype) * 2 - 1) * bound
        )
        self.b1 = nn.Parameter(torch.zeros(hidden_width, dtype=dtype))
        self.W2 = nn.Parameter(torch.zeros(hidden_width, token_dim, dtype=dtype))
        self.b2 = nn.Parameter(torch.zeros(token_dim, dtype=dtype))

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return compute_bias(v, self)


def compute_bias(v: torch.Tensor, params: BiasNet) -> torch.Tensor:
    """beta = W2^T relu(W1^T v + b1) + b2, for a single feature (d_v,) or a batch (B, d_v).

    Raises:
        ShapeMismatchError: if v does not have dimension d_v
    """
    if v.shape[-1] != params.W1.shape[0]:
        raise ShapeMismatchError(
            f"Bias network expects features of dimension {params.W1.shape[0]}, got {v.shape[-1]}."
        )
    hidden = torch.relu(v @ params.W1 + params.b1)
    return hidden @ params.W2 + params.b2


def count_trainable_params(m: int, d_v: int, d_t: int, h: int = DEFAULT_HIDDEN_WIDTH) -> int:
    """Known context + unknown context + bias network parameters.

    Examples:
        >>> count_trainable_params(4, 512, 512, 32)
        37408
    """
    if min(m, d_v, d_t, h) < 1:
        raise ValueError(f"All sizes should be positive, got m={m}, d_v={d_v}, d_t={d_t}, h={h}.")
    return 2 * m * d_t + (d_v * h + h) + (h * d_t + d_t)


def count_model_params(
    m: int,
    d_v: int,
    d_t: int,
    h: int = DEFAULT_HIDDEN_WIDTH,
    separate_prompts: bool = True,
    use_bias_net: bool = True,
) -> int:
    """Parameters actually trained under the ablation switches."""
    total = (2 if separate_prompts else 1) * m * d_t
    if use_bias_net:
        total += (d_v * h + h) + (h * d_t + d_t)
    return total


def format_param_count(count: int) -> str:
    """37408 -> '37,408 (37.4K)'"""
    return f"{count:,} ({count / 1000:.1f}K)"

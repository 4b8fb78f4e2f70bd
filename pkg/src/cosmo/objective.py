from dataclasses import dataclass

import torch
from torch.distributions import Categorical

from cosmo.exceptions import LabelSpaceError, NotNormalizedError, ShapeMismatchError

NORM_TOLERANCE = 1e-4
DISCARD = -1


@dataclass
class ProbVector:
    """
    Predictive distribution over the known classes then the unknown slot.

    Kept as log-probabilities so the losses stay finite for very confident
    predictions; `probs` is derived from them.
    """

    log_probs: torch.Tensor  # (*batch, |C_k|+1)
    temperature: float

    @property
    def probs(self) -> torch.Tensor:
        return self.log_probs.exp()

    @property
    def unknown_index(self) -> int:
        return self.log_probs.shape[-1] - 1

    def __len__(self) -> int:
        return self.log_probs.shape[0] if self.log_probs.dim() > 1 else 1

    def select(self, mask: torch.Tensor) -> "ProbVector":
        return ProbVector(self.log_probs[mask], self.temperature)


@dataclass(frozen=True)
class PseudoLabelDecision:
    outcome: str  # "known", "unknown" or "discard"
    label: int | None
    confidence: float


@dataclass
class PseudoLabels:
    """
    Batch of pseudo-label decisions. `labels` holds a known class index,
    the unknown index, or -1 for discarded instances.
    """

    labels: torch.Tensor
    confidence: torch.Tensor
    unknown_index: int

    @property
    def retained(self) -> torch.Tensor:
        return self.labels != DISCARD

    def counts(self) -> dict[str, int]:
        unknown = int((self.labels == self.unknown_index).sum())
        discarded = int((self.labels == DISCARD).sum())
        return {"known": len(self.labels) - unknown - discarded, "unknown": unknown, "discarded": discarded}

    def decisions(self) -> list[PseudoLabelDecision]:
        decisions = []
        for label, confidence in zip(self.labels.tolist(), self.confidence.tolist()):
            if label == DISCARD:
                decisions.append(PseudoLabelDecision("discard", None, confidence))
            elif label == self.unknown_index:
                decisions.append(PseudoLabelDecision("unknown", label, confidence))
            else:
                decisions.append(PseudoLabelDecision("known", label, confidence))
        return decisions


def _as_probs(p: ProbVector | torch.Tensor) -> torch.Tensor:
    return p.probs if isinstance(p, ProbVector) else p


def class_probabilities(v: torch.Tensor, W: torch.Tensor, temperature: float) -> ProbVector:
    """Softmax of cosine similarities scaled by 1 / temperature.

    Args:
        v (torch.Tensor): unit-norm image features, (d_v,) or (B, d_v)
        W (torch.Tensor): unit-norm text features, shared (|C_k|+1, d_v) or
            one matrix per image (B, |C_k|+1, d_v)
        temperature (float): eta > 0

    Raises:
        NotNormalizedError: if an input row is not unit norm within 1e-4
        ShapeMismatchError: if feature dimensions differ

    Returns:
        ProbVector: probabilities over |C_k|+1 slots for every image
    """
    if temperature <= 0:
        raise ValueError(f"Temperature should be positive, got {temperature}.")
    if v.shape[-1] != W.shape[-1]:
        raise ShapeMismatchError(f"Image features have dimension {v.shape[-1]}, text features {W.shape[-1]}.")
    for name, tensor in (("image", v), ("text", W)):
        deviation = float((tensor.detach().norm(dim=-1) - 1).abs().max())
        if deviation > NORM_TOLERANCE:
            raise NotNormalizedError(f"{name} features deviate from unit norm by {deviation:.2e}.")
    similarities = (W @ v.unsqueeze(-1)).squeeze(-1) if W.dim() == v.dim() + 1 else v @ W.T
    return ProbVector(torch.log_softmax(similarities / temperature, dim=-1), temperature)


def entropy(p: ProbVector | torch.Tensor) -> torch.Tensor:
    """-sum_c p_c log p_c over the last axis, with 0 log 0 = 0.

    A ProbVector goes through its log-probabilities, so the gradient stays
    finite when some probabilities underflow to 0.
    """
    if isinstance(p, ProbVector):
        return Categorical(logits=p.log_probs, validate_args=False).entropy()
    return -torch.special.xlogy(p, p).sum(dim=-1)


def _cross_entropy_plus_entropy(
    probs: ProbVector, labels: torch.Tensor, entropy_weight: float
) -> torch.Tensor:
    nll = -probs.log_probs.gather(-1, labels[:, None]).squeeze(-1)
    return nll.mean() + entropy_weight * entropy(probs).mean()


def source_loss(probs: ProbVector, labels: torch.Tensor, entropy_weight: float) -> torch.Tensor:
    """Cross-entropy on source labels plus entropy_weight times the mean entropy.

    Raises:
        LabelSpaceError: if a label is the unknown index (source data has no unknowns)
    """
    labels = labels.long()
    if (labels >= probs.unknown_index).any() or (labels < 0).any():
        raise LabelSpaceError(
            f"Source labels should be known class indices below {probs.unknown_index}."
        )
    return _cross_entropy_plus_entropy(probs, labels, entropy_weight)


def assign_pseudo_labels(
    probs: ProbVector | torch.Tensor,
    kappa_lower: float,
    kappa_upper: float,
    kappa_known: float,
) -> PseudoLabels:
    """Threshold pseudo-labels for unlabeled target instances.

    An instance is unknown when every known-class probability is below
    `kappa_lower` or the unknown probability is at least `kappa_upper`;
    otherwise it gets the most probable known class when that probability
    is at least `kappa_known`; otherwise it is discarded.
    """
    with torch.no_grad():
        p = _as_probs(probs).detach()
        unknown_index = p.shape[-1] - 1
        known = p[..., :unknown_index]
        known_argmax = known.argmax(dim=-1)
        known_confidence = known.gather(-1, known_argmax.unsqueeze(-1)).squeeze(-1)
        unknown_prob = p[..., unknown_index]

        is_unknown = (known < kappa_lower).all(dim=-1) | (unknown_prob >= kappa_upper)
        is_known = ~is_unknown & (known_confidence >= kappa_known)

        labels = torch.full_like(known_argmax, DISCARD)
        labels[is_known] = known_argmax[is_known]
        labels[is_unknown] = unknown_index
        confidence = torch.where(is_unknown, torch.maximum(unknown_prob, known_confidence), known_confidence)
    return PseudoLabels(labels=labels, confidence=confidence, unknown_index=unknown_index)


def target_loss(
    probs: ProbVector, pseudo_labels: PseudoLabels | torch.Tensor, entropy_weight: float
) -> torch.Tensor:
    """Cross-entropy on pseudo-labels plus entropy regularization over retained instances.

    Discarded instances contribute nothing; when every instance is discarded
    the loss is a zero that still belongs to the graph of `probs`.
    """
    labels = pseudo_labels.labels if isinstance(pseudo_labels, PseudoLabels) else pseudo_labels
    labels = labels.long()
    if len(labels) != len(probs):
        raise ShapeMismatchError(f"{len(labels)} pseudo-labels for {len(probs)} instances.")
    retained = labels != DISCARD
    if not retained.any():
        return probs.log_probs.sum() * 0.0
    return _cross_entropy_plus_entropy(probs.select(retained), labels[retained], entropy_weight)

import hashlib
import typing as tp
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from tqdm import tqdm

from cosmo.exceptions import CheckpointError, LabelSpaceError, SequenceOverflowError, ShapeMismatchError
from cosmo.log import LOGGER

if tp.TYPE_CHECKING:
    from cosmo.data import ExampleRecord

UNKNOWN_WORD = "unknown."
TEMPLATE_CONTEXT = "a photo of a"
# token slots left once the start and end markers are placed in a 77-token frame
TOY_MAX_SEQUENCE_LENGTH = 75
CLIP_REGISTRY = {
    "ViT-B/16": ("ViT-B-16", "openai"),
    "RN50": ("RN50", "openai"),
}


class ImageEncoder(tp.Protocol):
    feature_dim: int

    def load(self, record: "ExampleRecord") -> torch.Tensor: ...

    def encode(self, inputs: torch.Tensor) -> torch.Tensor: ...


class TextEncoder(tp.Protocol):
    token_dim: int
    output_dim: int
    max_sequence_length: int

    def encode(self, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor: ...


@dataclass
class TokenBank:
    """
    Frozen token embeddings of the class names and of the word "unknown.".

    Class sequences have different lengths (multi-token names keep all their
    tokens), so they are stored zero-padded with explicit lengths.
    """

    class_names: tuple[str, ...]
    class_tokens: torch.Tensor  # (K, Lc, d_t)
    class_lengths: torch.Tensor  # (K,)
    unk_tokens: torch.Tensor  # (Lu, d_t)

    def __post_init__(self) -> None:
        if self.class_tokens.shape[0] != len(self.class_names):
            raise ShapeMismatchError(
                f"Token bank holds {self.class_tokens.shape[0]} sequences for {len(self.class_names)} classes."
            )
        if self.class_tokens.shape[-1] != self.unk_tokens.shape[-1]:
            raise ShapeMismatchError(
                f"Class tokens have dimension {self.class_tokens.shape[-1]}, "
                f"unknown tokens {self.unk_tokens.shape[-1]}."
            )

    @property
    def token_dim(self) -> int:
        return self.class_tokens.shape[-1]

    def constants(self) -> list[torch.Tensor]:
        return [self.class_tokens, self.class_lengths, self.unk_tokens]


def build_token_bank(
    class_names: tp.Sequence[str],
    embed_words: tp.Callable[[str], torch.Tensor],
) -> TokenBank:
    """Embed every class name and the unknown word with a frozen token embedding."""
    sequences = [embed_words(name).detach() for name in class_names]
    unk_tokens = embed_words(UNKNOWN_WORD).detach()
    token_dim = unk_tokens.shape[-1]
    longest = max((s.shape[0] for s in sequences), default=1)
    class_tokens = unk_tokens.new_zeros((len(sequences), longest, token_dim))
    for i, sequence in enumerate(sequences):
        class_tokens[i, : sequence.shape[0]] = sequence
    class_lengths = torch.tensor([s.shape[0] for s in sequences], dtype=torch.long)
    return TokenBank(
        class_names=tuple(class_names),
        class_tokens=class_tokens,
        class_lengths=class_lengths,
        unk_tokens=unk_tokens,
    )


@dataclass
class EncoderBackend:
    """Frozen image encoder, frozen text encoder and the token bank built with them."""

    image_encoder: ImageEncoder
    text_encoder: TextEncoder
    token_bank: TokenBank
    embed_words: tp.Callable[[str], torch.Tensor]
    description: dict[str, tp.Any] = field(default_factory=dict)

    def __iter__(self) -> tp.Iterator[tp.Any]:
        return iter((self.image_encoder, self.text_encoder, self.token_bank))

    def with_classes(self, class_names: tp.Sequence[str]) -> "EncoderBackend":
        return EncoderBackend(
            image_encoder=self.image_encoder,
            text_encoder=self.text_encoder,
            token_bank=build_token_bank(class_names, self.embed_words),
            embed_words=self.embed_words,
            description=self.description,
        )

    def constants(self) -> list[torch.Tensor]:
        tensors: list[torch.Tensor] = []
        for encoder in (self.image_encoder, self.text_encoder):
            if isinstance(encoder, nn.Module):
                tensors.extend(t.detach() for t in encoder.state_dict().values())
        return tensors + self.token_bank.constants()

    def encode_text(self, text: str) -> torch.Tensor:
        """Encode a plain text prompt, e.g. "a dog", without learnable context."""
        tokens = self.embed_words(text)
        lengths = torch.tensor([tokens.shape[0]], dtype=torch.long)
        with torch.no_grad():
            return self.text_encoder.encode(tokens[None], lengths)[0]


def _stable_seed(word: str) -> int:
    return int.from_bytes(hashlib.sha256(word.encode("utf-8")).digest()[:8], "little")


def toy_tokenize(text: str) -> list[str]:
    return text.replace("_", " ").lower().split()


class ToyImageEncoder(nn.Module):
    """Identity on precomputed feature vectors followed by L2 normalization."""

    def __init__(self, feature_dim: int, dtype: torch.dtype = torch.float32) -> None:
        super().__init__()
        self.feature_dim = feature_dim
        self.dtype = dtype

    def load(self, record: "ExampleRecord") -> torch.Tensor:
        if record.feature is None:
            raise ShapeMismatchError(
                f"Toy image encoder needs feature vectors, record {record.item_ref} has none."
            )
        return torch.as_tensor(np.asarray(record.feature), dtype=self.dtype)

    def encode(self, inputs: torch.Tensor) -> torch.Tensor:
        if inputs.shape[-1] != self.feature_dim:
            raise ShapeMismatchError(
                f"Expected features of dimension {self.feature_dim}, got {inputs.shape[-1]}."
            )
        return F.normalize(inputs.to(self.dtype), dim=-1)


class ToyTextEncoder(nn.Module):
    """Seeded random linear map on the mean-pooled token sequence, then L2 normalization.

    Mean pooling ignores token order; that keeps the map differentiable and
    cheap, which is all the mechanism tests need.
    """

    def __init__(
        self, token_dim: int, output_dim: int, seed: int, dtype: torch.dtype = torch.float32
    ) -> None:
        super().__init__()
        self.token_dim = token_dim
        self.output_dim = output_dim
        self.max_sequence_length = TOY_MAX_SEQUENCE_LENGTH
        rng = np.random.default_rng([seed, 1])
        projection = rng.standard_normal((token_dim, output_dim)) / np.sqrt(token_dim)
        self.register_buffer("projection", torch.as_tensor(projection, dtype=dtype))

    def encode(self, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.token_dim:
            raise ShapeMismatchError(
                f"Expected token embeddings of dimension {self.token_dim}, got {tokens.shape[-1]}."
            )
        if int(lengths.max()) > self.max_sequence_length:
            raise SequenceOverflowError(
                f"Sequence of {int(lengths.max())} tokens exceeds {self.max_sequence_length}."
            )
        positions = torch.arange(tokens.shape[-2], device=tokens.device)
        mask = (positions[None, :] < lengths[:, None]).to(tokens.dtype)  # (P, L)
        pooled = (tokens * mask[..., None]).sum(dim=-2) / lengths.to(tokens.dtype)[:, None]
        return F.normalize(pooled @ self.projection, dim=-1)


def toy_backend(
    d_v: int,
    d_t: int,
    seed: int,
    class_names: tp.Sequence[str] = (),
    dtype: torch.dtype = torch.float32,
) -> EncoderBackend:
    """Deterministic stand-in for a pretrained dual encoder.

    Args:
        d_v (int): image feature dimension (and text output dimension)
        d_t (int): token embedding dimension
        seed (int): seed of the text projection and of the word embeddings
        class_names (tp.Sequence[str]): known classes to put in the token bank
        dtype (torch.dtype): float32 for training, float64 for gradient checks

    Returns:
        EncoderBackend: image encoder, text encoder and token bank
    """
    if d_v < 2 or d_t < 2:
        raise ShapeMismatchError(f"Toy backend needs d_v, d_t >= 2, got {d_v}, {d_t}.")

    def embed_words(text: str) -> torch.Tensor:
        words = toy_tokenize(text)
        if not words:
            raise LabelSpaceError(f"{text!r} has no words to embed.")
        vectors = []
        for word in words:
            vector = np.random.default_rng([seed, _stable_seed(word)]).standard_normal(d_t)
            vectors.append(vector / np.linalg.norm(vector))
        return torch.as_tensor(np.stack(vectors), dtype=dtype)

    return EncoderBackend(
        image_encoder=ToyImageEncoder(d_v, dtype),
        text_encoder=ToyTextEncoder(d_t, d_v, seed, dtype),
        token_bank=build_token_bank(class_names, embed_words),
        embed_words=embed_words,
        description={"name": "toy", "d_v": d_v, "d_t": d_t, "seed": seed},
    )


class ClipImageEncoder(nn.Module):
    def __init__(self, model: nn.Module, preprocess: tp.Callable, feature_dim: int) -> None:
        super().__init__()
        self.model = model
        self.preprocess = preprocess
        self.feature_dim = feature_dim

    def load(self, record: "ExampleRecord") -> torch.Tensor:
        if record.feature is not None:
            return torch.as_tensor(np.asarray(record.feature), dtype=torch.float32)
        with Image.open(record.item_ref) as image:
            return self.preprocess(image.convert("RGB"))

    def encode(self, inputs: torch.Tensor) -> torch.Tensor:
        # cached features are already encoded
        if inputs.dim() == 2 and inputs.shape[-1] == self.feature_dim:
            return F.normalize(inputs, dim=-1)
        with torch.no_grad():
            return F.normalize(self.model.encode_image(inputs).float(), dim=-1)


class ClipTextEncoder(nn.Module):
    """CLIP text transformer fed with token embeddings instead of token ids.

    Every sequence is framed as [SOS, tokens..., EOS, padding...] and the
    feature is read at the EOS position, the prompt-learning convention.
    """

    def __init__(self, model: nn.Module, sos_id: int, eos_id: int) -> None:
        super().__init__()
        self.transformer = model.transformer
        self.ln_final = model.ln_final
        self.register_buffer("positional_embedding", model.positional_embedding.detach().clone())
        self.register_buffer("text_projection", model.text_projection.detach().clone())
        self.register_buffer("attn_mask", model.attn_mask.detach().clone())
        embedding = model.token_embedding.weight.detach()
        self.register_buffer("sos_embedding", embedding[sos_id].clone())
        self.register_buffer("eos_embedding", embedding[eos_id].clone())
        self.register_buffer("pad_embedding", embedding[0].clone())
        self.context_length = self.positional_embedding.shape[0]
        self.token_dim = embedding.shape[1]
        self.output_dim = self.text_projection.shape[1]
        self.max_sequence_length = self.context_length - 2
        self.batch_first = getattr(self.transformer, "batch_first", False)

    def encode(self, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        if int(lengths.max()) > self.max_sequence_length:
            raise SequenceOverflowError(
                f"Sequence of {int(lengths.max())} tokens exceeds {self.max_sequence_length}."
            )
        lead = tokens.shape[:-2]
        n_tokens = tokens.shape[-2]
        flat = tokens.reshape(-1, n_tokens, self.token_dim)
        flat_lengths = lengths.repeat(flat.shape[0] // lengths.shape[0])

        body = F.pad(flat, (0, 0, 1, self.context_length - n_tokens - 1))
        positions = torch.arange(self.context_length, device=tokens.device)
        eos_positions = flat_lengths + 1
        is_body = (positions[None, :] >= 1) & (positions[None, :] <= flat_lengths[:, None])
        x = torch.where(is_body[..., None], body, self.pad_embedding)
        x = torch.where((positions == 0)[None, :, None], self.sos_embedding, x)
        x = torch.where((positions[None, :] == eos_positions[:, None])[..., None], self.eos_embedding, x)

        x = x + self.positional_embedding
        if not self.batch_first:
            x = x.permute(1, 0, 2)
        x = self.transformer(x, attn_mask=self.attn_mask)
        if not self.batch_first:
            x = x.permute(1, 0, 2)
        x = self.ln_final(x)
        x = x[torch.arange(x.shape[0]), eos_positions] @ self.text_projection
        return F.normalize(x, dim=-1).reshape(*lead, self.output_dim)


def clip_adapter(
    checkpoint_ref: str,
    class_names: tp.Sequence[str] = (),
    architecture: str = "ViT-B-16",
    device: str = "cpu",
) -> EncoderBackend:
    """Wrap published CLIP weights as frozen encoders.

    Args:
        checkpoint_ref (str): registry name ("ViT-B/16", "RN50") or a path to
            a checkpoint file loadable by open_clip
        class_names (tp.Sequence[str]): known classes to put in the token bank
        architecture (str): open_clip architecture name used with a path
        device (str): torch device

    Raises:
        CheckpointError: if the checkpoint is missing or cannot be loaded

    Returns:
        EncoderBackend: d_v = 512 for ViT-B/16, 1024 for RN50; d_t = 512
    """
    import open_clip  # type: ignore[import]

    if checkpoint_ref in CLIP_REGISTRY:
        architecture, pretrained = CLIP_REGISTRY[checkpoint_ref]
    else:
        if not Path(checkpoint_ref).exists():
            raise CheckpointError(f"CLIP checkpoint {checkpoint_ref} does not exist.")
        pretrained = checkpoint_ref

    LOGGER.info(f"Loading CLIP {architecture} weights from {pretrained}...")
    try:
        model, _, preprocess = open_clip.create_model_and_transforms(
            architecture, pretrained=pretrained, device=device
        )
    except (RuntimeError, ValueError, OSError) as e:
        raise CheckpointError(f"Failed to load CLIP checkpoint {checkpoint_ref}: {e}") from e
    model.eval()
    model.requires_grad_(False)
    tokenizer = open_clip.get_tokenizer(architecture)

    def token_ids(text: str) -> torch.Tensor:
        ids = tokenizer([text])[0]
        # end-of-text has the largest id in the vocabulary
        return ids[1 : int(ids.argmax())]

    sample = tokenizer(["x"])[0]
    sos_id, eos_id = int(sample[0]), int(sample.max())

    def embed_words(text: str) -> torch.Tensor:
        with torch.no_grad():
            return model.token_embedding(token_ids(text).to(device)).float()

    feature_dim = model.text_projection.shape[1]
    return EncoderBackend(
        image_encoder=ClipImageEncoder(model, preprocess, feature_dim),
        text_encoder=ClipTextEncoder(model, sos_id, eos_id),
        token_bank=build_token_bank(class_names, embed_words),
        embed_words=embed_words,
        description={"name": "clip", "checkpoint_ref": checkpoint_ref, "architecture": architecture},
    )


def build_backend(
    description: tp.Mapping[str, tp.Any],
    class_names: tp.Sequence[str],
    dtype: torch.dtype = torch.float32,
) -> EncoderBackend:
    """Rebuild a backend from the description stored in checkpoints and run manifests."""
    if description["name"] == "toy":
        return toy_backend(description["d_v"], description["d_t"], description["seed"], class_names, dtype)
    if description["name"] == "clip":
        return clip_adapter(description["checkpoint_ref"], class_names, description["architecture"])
    raise CheckpointError(f"Unknown encoder backend {description['name']!r}.")


def encode_records(
    records: tp.Sequence["ExampleRecord"],
    image_encoder: ImageEncoder,
    batch_size: int = 64,
) -> torch.Tensor:
    """Encode records with the frozen image encoder into unit-norm features (n, d_v)."""
    features = []
    for start in tqdm(range(0, len(records), batch_size), desc="Encoding", disable=len(records) <= batch_size):
        batch = torch.stack([image_encoder.load(r) for r in records[start : start + batch_size]])
        with torch.no_grad():
            features.append(image_encoder.encode(batch))
    if not features:
        return torch.empty((0, image_encoder.feature_dim))
    return torch.cat(features)

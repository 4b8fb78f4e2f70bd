import typing as tp
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from cosmo.encoders import TEMPLATE_CONTEXT, TextEncoder, TokenBank
from cosmo.exceptions import SequenceOverflowError, ShapeMismatchError

CONTEXT_INIT_STD = 0.02


@dataclass
class PromptMatrix:
    """
    Token-embedding sequences fed to the text encoder, zero-padded to a
    common length: `tokens` is (*batch, P, L, d_t), `lengths` is (P,).
    For the full matrix, P = |C_k| + 1 and the unknown prompt is the last row.
    """

    tokens: torch.Tensor
    lengths: torch.Tensor

    def __post_init__(self) -> None:
        if self.tokens.shape[-3] != self.lengths.shape[0]:
            raise ShapeMismatchError(
                f"{self.tokens.shape[-3]} sequences but {self.lengths.shape[0]} lengths."
            )

    @property
    def n_rows(self) -> int:
        return self.lengths.shape[0]


class PromptState(nn.Module):
    """
    Learnable known context s (m, d_t), learnable unknown context u (m, d_t)
    and the frozen token bank they are prepended to. s is shared by all
    known classes.

    With `separate_prompts=False` the unknown prompt reuses s and u is never
    trained.
    """

    def __init__(
        self,
        token_bank: TokenBank,
        context_length: int,
        generator: torch.Generator | None = None,
        separate_prompts: bool = True,
        template_tokens: torch.Tensor | None = None,
    ) -> None:
        super().__init__()
        token_dim = token_bank.token_dim
        dtype = token_bank.class_tokens.dtype
        self.token_bank = token_bank
        self.context_length = context_length
        self.separate_prompts = separate_prompts

        known_context = torch.randn(context_length, token_dim, generator=generator, dtype=dtype) * CONTEXT_INIT_STD
        unknown_context = torch.randn(context_length, token_dim, generator=generator, dtype=dtype) * CONTEXT_INIT_STD
        if template_tokens is not None:
            n_template = min(context_length, template_tokens.shape[0])
            known_context[:n_template] = template_tokens[:n_template].to(dtype)
        self.known_context = nn.Parameter(known_context)
        self.unknown_context = nn.Parameter(unknown_context, requires_grad=separate_prompts)

    @property
    def m(self) -> int:
        return self.context_length

    @property
    def active_unknown_context(self) -> torch.Tensor:
        return self.unknown_context if self.separate_prompts else self.known_context


def init_prompt_state(
    token_bank: TokenBank,
    context_length: int,
    seed: int,
    context_init: str = "random",
    embed_words: tp.Callable[[str], torch.Tensor] | None = None,
    separate_prompts: bool = True,
) -> PromptState:
    """Seeded prompt state; `context_init="template"` starts s from the embedding of "a photo of a"."""
    generator = torch.Generator().manual_seed(seed)
    template_tokens = None
    if context_init == "template":
        if embed_words is None:
            raise ValueError("Template initialization needs the backend's word embedding.")
        template_tokens = embed_words(TEMPLATE_CONTEXT).detach()
    return PromptState(token_bank, context_length, generator, separate_prompts, template_tokens)


def _biased_context(context: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    if beta.shape[-1] != context.shape[-1]:
        raise ShapeMismatchError(
            f"Bias has dimension {beta.shape[-1]}, context tokens {context.shape[-1]}."
        )
    # (m, d) + (*batch, 1, d) -> (*batch, m, d)
    return context + beta[..., None, :]


def _prepend_context(
    biased_context: torch.Tensor, class_tokens: torch.Tensor, class_lengths: torch.Tensor
) -> PromptMatrix:
    if class_tokens.shape[-1] != biased_context.shape[-1]:
        raise ShapeMismatchError(
            f"Token bank has dimension {class_tokens.shape[-1]}, context {biased_context.shape[-1]}."
        )
    lead = biased_context.shape[:-2]
    n_rows, n_class_tokens, token_dim = class_tokens.shape
    context = biased_context.unsqueeze(-3).expand(*lead, n_rows, -1, token_dim)
    names = class_tokens.expand(*lead, n_rows, n_class_tokens, token_dim)
    return PromptMatrix(
        tokens=torch.cat([context, names], dim=-2),
        lengths=class_lengths + biased_context.shape[-2],
    )


def build_known_prompts(state: PromptState, beta: torch.Tensor) -> PromptMatrix:
    """[s_1 + beta, ..., s_m + beta, CLS_c tokens] for every known class c, in label space order."""
    bank = state.token_bank
    return _prepend_context(
        _biased_context(state.known_context, beta), bank.class_tokens, bank.class_lengths
    )


def build_unknown_prompt(state: PromptState, beta: torch.Tensor) -> PromptMatrix:
    """[u_1 + beta, ..., u_m + beta, tokens of "unknown."]"""
    bank = state.token_bank
    return _prepend_context(
        _biased_context(state.active_unknown_context, beta),
        bank.unk_tokens[None],
        torch.tensor([bank.unk_tokens.shape[0]], dtype=torch.long),
    )


def assemble_prompts(state: PromptState, beta: torch.Tensor) -> PromptMatrix:
    """Known prompts followed by the unknown prompt, padded to a common length."""
    known = build_known_prompts(state, beta)
    unknown = build_unknown_prompt(state, beta)
    length = max(known.tokens.shape[-2], unknown.tokens.shape[-2])
    tokens = torch.cat(
        [
            F.pad(known.tokens, (0, 0, 0, length - known.tokens.shape[-2])),
            F.pad(unknown.tokens, (0, 0, 0, length - unknown.tokens.shape[-2])),
        ],
        dim=-3,
    )
    return PromptMatrix(tokens=tokens, lengths=torch.cat([known.lengths, unknown.lengths]))


def assemble_text_features(
    state: PromptState, beta: torch.Tensor, text_encoder: TextEncoder
) -> torch.Tensor:
    """Encode every prompt into the text feature matrix W.

    Args:
        state (PromptState): contexts and token bank
        beta (torch.Tensor): bias token, (d_t,) or one per image (B, d_t)
        text_encoder (TextEncoder): frozen text encoder

    Raises:
        SequenceOverflowError: if a prompt does not fit the encoder frame

    Returns:
        torch.Tensor: unit-norm rows, (|C_k|+1, d_v) or (B, |C_k|+1, d_v)
    """
    prompts = assemble_prompts(state, beta)
    longest = int(prompts.lengths.max())
    if longest > text_encoder.max_sequence_length:
        raise SequenceOverflowError(
            f"Prompt of {longest} tokens ({state.m} context tokens) exceeds the text encoder "
            f"limit of {text_encoder.max_sequence_length}."
        )
    return text_encoder.encode(prompts.tokens, prompts.lengths)

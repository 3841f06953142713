"""Streaming geometry: attention policies, masks, look-ahead and latency, and
contextual block encoding with per-layer context inheritance."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .data import FRAME_MS


@dataclass(frozen=True)
class Full:
    """Unrestricted self-attention (non-streaming)."""


@dataclass(frozen=True)
class Chunk:
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"chunk size must be >= 1, got {self.size}")


@dataclass(frozen=True)
class Block:
    """Block processing with ``left`` past, ``center`` central and ``right`` future frames."""

    left: int
    center: int
    right: int

    def __post_init__(self):
        if self.center < 1:
            raise ValueError(f"N_c must be >= 1, got {self.center}")
        if self.left < 0 or self.right < 0:
            raise ValueError("N_l and N_r must be >= 0")


AttentionPolicy = Full | Chunk | Block
BlockSpec = Block


def make_mask(policy: AttentionPolicy, n_frames: int) -> torch.Tensor:
    """Boolean ``(T, T)`` allow-matrix; entry ``[t, s]`` is True if frame t may attend s."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    if isinstance(policy, Full):
        return torch.ones(n_frames, n_frames, dtype=torch.bool)
    if isinstance(policy, Chunk):
        idx = torch.arange(n_frames)
        limit = (idx // policy.size + 1) * policy.size
        return idx[None, :] < limit[:, None]
    raise TypeError(f"{type(policy).__name__} policies are encoded block-wise, not with a global mask")


def reach(policy: AttentionPolicy, t: int, n_frames: int, n_layers: int = 1) -> int:
    """Largest input frame index that can influence the encoder output at frame ``t``.

    The mask is the same in every layer, so look-ahead does not grow with depth and
    ``n_layers`` has no effect; it is accepted for symmetry with stacked encoders.
    """
    if not 0 <= t < n_frames:
        raise ValueError(f"frame {t} outside [0, {n_frames})")
    if isinstance(policy, Full):
        return n_frames - 1
    if isinstance(policy, Chunk):
        return min((t // policy.size + 1) * policy.size - 1, n_frames - 1)
    if isinstance(policy, Block):
        b = t // policy.center
        return min((b + 1) * policy.center + policy.right, n_frames) - 1
    raise TypeError(f"unknown policy {policy!r}")


def latency_chunk(chunk_size: int, frame_ms: float = FRAME_MS) -> float:
    if chunk_size < 1:
        raise ValueError("chunk size must be >= 1")
    return (chunk_size - 1) * frame_ms


def latency_block(n_center: int, n_right: int, frame_ms: float = FRAME_MS) -> float:
    if n_center < 1:
        raise ValueError("N_c must be >= 1")
    return (n_center + n_right - 1) * frame_ms


def latency(policy: AttentionPolicy, frame_ms: float = FRAME_MS) -> float:
    """Algorithmic latency in ms; ``inf`` for full attention."""
    if isinstance(policy, Chunk):
        return latency_chunk(policy.size, frame_ms)
    if isinstance(policy, Block):
        return latency_block(policy.center, policy.right, frame_ms)
    return math.inf


@dataclass(frozen=True)
class BlockRange:
    """Absolute half-open frame ranges of one block (1-based ``index``)."""

    index: int
    past: range
    central: range
    future: range

    @property
    def frames(self) -> range:
        return range(self.past.start if len(self.past) else self.central.start,
                     self.future.stop if len(self.future) else self.central.stop)

    @property
    def end(self) -> int:
        """One past the last input frame this block consumes."""
        return self.frames.stop


def block_split(n_frames: int, spec: Block) -> list[BlockRange]:
    if n_frames < 1:
        raise ValueError("need at least one frame")
    blocks = []
    n_blocks = -(-n_frames // spec.center)
    for b in range(n_blocks):
        c0 = b * spec.center
        c1 = min(c0 + spec.center, n_frames)
        past = range(max(0, c0 - spec.left), c0)
        future = range(c1, min(n_frames, c1 + spec.right))
        blocks.append(BlockRange(b + 1, past, range(c0, c1), future))
    return blocks


def init_context(encoder, batch: int | None = None, dtype=None) -> list[torch.Tensor]:
    """Zero context vectors, one per encoder layer."""
    dtype = dtype or next(encoder.parameters()).dtype
    shape = (encoder.d_model,) if batch is None else (batch, encoder.d_model)
    return [torch.zeros(shape, dtype=dtype) for _ in encoder.layers]


def block_encode(encoder, z: torch.Tensor, context: list[torch.Tensor], central: slice,
                 offset: int = 0, valid: torch.Tensor | None = None):
    """Encode one block given the previous block's per-layer context vectors.

    ``z`` is ``(L, D)`` or ``(B, L, D)`` input features of the block; ``central``
    indexes the central frames inside it and ``offset`` is the absolute frame index
    of ``z[..., 0, :]`` (used for positional encodings). ``valid`` is an optional
    ``(B, L)`` boolean frame mask for padded batches.

    In every layer the key/value sequence is ``[c_prev ; frames]`` and the query
    sequence is ``[slot ; frames]``, where ``slot`` starts as the mean of the
    layer input over the (valid) central frames. The slot output becomes the new
    context vector for that layer. Returns the final-layer central outputs
    (after the final norm) and the new context list.
    """
    unbatched = z.dim() == 2
    if unbatched:
        z = z.unsqueeze(0)
        context = [c.unsqueeze(0) for c in context]
        if valid is not None:
            valid = valid.unsqueeze(0)
    if z.shape[-1] != encoder.input_dim:
        raise ValueError(f"block features have dim {z.shape[-1]}, encoder expects {encoder.input_dim}")
    if len(context) != len(encoder.layers):
        raise ValueError(f"got {len(context)} context vectors for {len(encoder.layers)} layers")
    if any(c.shape[-1] != encoder.d_model for c in context):
        raise ValueError("context vector width does not match the encoder")

    n_batch, length, _ = z.shape
    if valid is None:
        valid = torch.ones(n_batch, length, dtype=torch.bool)
    x = encoder.embed(z, offset)
    cmask = torch.zeros(n_batch, length, dtype=x.dtype)
    cmask[:, central] = valid[:, central].to(x.dtype)
    denom = cmask.sum(1, keepdim=True).clamp_min(1.0)
    # key mask over [ctx ; frames]; queries see every valid key
    keys_ok = torch.cat([torch.ones(n_batch, 1, dtype=torch.bool), valid], dim=1)
    attn_mask = keys_ok[:, None, :].expand(n_batch, length + 1, length + 1)

    new_context = []
    for layer, c_prev in zip(encoder.layers, context):
        slot = (x * cmask[..., None]).sum(1) / denom
        q_in = torch.cat([slot[:, None, :], x], dim=1)
        kv_in = torch.cat([c_prev[:, None, :], x], dim=1)
        out = layer(q_in, attn_mask, kv=kv_in)
        new_context.append(out[:, 0])
        x = out[:, 1:]
    h = encoder.final_norm(x[:, central])
    if unbatched:
        return h[0], [c[0] for c in new_context]
    return h, new_context


def stream_blocks(encoder, feats: torch.Tensor, spec: Block):
    """Run the block encoder over one utterance, yielding ``(block, H_b, c_b)`` in order."""
    n_frames = feats.shape[0]
    context = init_context(encoder, dtype=feats.dtype)
    for blk in block_split(n_frames, spec):
        frames = blk.frames
        z = feats[frames.start:frames.stop]
        central = slice(blk.central.start - frames.start, blk.central.stop - frames.start)
        h, context = block_encode(encoder, z, context, central, offset=frames.start)
        yield blk, h, context


def encode_blocks(encoder, feats: torch.Tensor, spec: Block) -> torch.Tensor:
    """Concatenated central outputs ``(T, d)`` of a full streaming pass."""
    return torch.cat([h for _, h, _ in stream_blocks(encoder, feats, spec)], dim=0)


def encode_blocks_batch(encoder, feats: torch.Tensor, lengths: torch.Tensor, spec: Block) -> torch.Tensor:
    """Batched block encoding of padded ``(B, T, D)`` features; returns ``(B, T, d)``.

    Blocks are laid out on absolute frame indices, so each utterance sees exactly
    the blocks it would see alone; padded frames are excluded as keys and from the
    context-slot mean.
    """
    n_batch, t_max, _ = feats.shape
    valid_all = torch.arange(t_max)[None, :] < lengths[:, None]
    context = init_context(encoder, batch=n_batch, dtype=feats.dtype)
    outs = []
    for blk in block_split(t_max, spec):
        frames = blk.frames
        central = slice(blk.central.start - frames.start, blk.central.stop - frames.start)
        z = feats[:, frames.start:frames.stop]
        valid = valid_all[:, frames.start:frames.stop]
        h, context = block_encode(encoder, z, context, central, offset=frames.start, valid=valid)
        outs.append(h)
    return torch.cat(outs, dim=1)


def policy_name(policy: AttentionPolicy) -> str:
    """Compact text form: ``full``, ``chunk4``, ``block8-4-2``."""
    if isinstance(policy, Chunk):
        return f"chunk{policy.size}"
    if isinstance(policy, Block):
        return f"block{policy.left}-{policy.center}-{policy.right}"
    return "full"


def parse_policy(text: str) -> AttentionPolicy:
    text = text.strip().lower()
    try:
        if text == "full":
            return Full()
        if text.startswith("chunk"):
            return Chunk(int(text[5:]))
        if text.startswith("block"):
            left, center, right = (int(v) for v in text[5:].split("-"))
            return Block(left, center, right)
    except ValueError as exc:
        raise ValueError(f"bad policy {text!r}: {exc}") from exc
    raise ValueError(f"unknown policy {text!r}")

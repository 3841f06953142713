"""Differentiable building blocks shared by every model in the package."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .streaming import AttentionPolicy, Full, make_mask


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 16
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_layers: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")


@dataclass(frozen=True)
class DecoderConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_layers: int = 2
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")


def sinusoid_positions(n: int, dim: int, offset: int = 0, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(offset, offset + n, dtype=torch.float64)[:, None]
    inv = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * inv)
    pe[:, 1::2] = torch.cos(pos * inv)[:, : dim // 2]
    return pe.to(dtype)


def check_mask(mask: torch.Tensor) -> None:
    if not bool(mask.any(-1).all()):
        raise ValueError("attention mask has a row with no allowed column")


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, query: torch.Tensor, kv: torch.Tensor, mask: torch.Tensor | None = None,
                check: bool = True) -> torch.Tensor:
        """``query`` (B, L, d), ``kv`` (B, S, d), ``mask`` (L, S) or (B, L, S) allow-matrix."""
        n_batch, n_q, _ = query.shape
        n_k = kv.shape[1]
        q = self.q(query).view(n_batch, n_q, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k(kv).view(n_batch, n_k, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v(kv).view(n_batch, n_k, self.n_heads, self.d_head).transpose(1, 2)
        if mask is not None:
            if check:
                check_mask(mask)
            mask = mask[:, None] if mask.dim() == 3 else mask
        p = self.drop.p if self.training else 0.0
        ctx = F.scaled_dot_product_attention(q, k, v, attn_mask=mask, dropout_p=p)
        return self.out(ctx.transpose(1, 2).reshape(n_batch, n_q, -1))


def self_attention(x: torch.Tensor, mask: torch.Tensor | None, attn: MultiHeadAttention) -> torch.Tensor:
    """Masked self-attention over ``x`` of shape (T, d) or (B, T, d).

    Disallowed columns receive exactly zero weight; a row with no allowed column
    raises ``ValueError``.
    """
    unbatched = x.dim() == 2
    if unbatched:
        x = x.unsqueeze(0)
    out = attn(x, x, mask)
    return out[0] if unbatched else out


class FeedForward(nn.Sequential):
    def __init__(self, d_model: int, d_ff: int, dropout: float = 0.0):
        super().__init__(nn.Linear(d_model, d_ff), nn.ReLU(), nn.Dropout(dropout), nn.Linear(d_ff, d_model))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.norm_attn = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm_ff = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None, kv: torch.Tensor | None = None) -> torch.Tensor:
        q = self.norm_attn(x)
        k = q if kv is None else self.norm_attn(kv)
        x = x + self.drop(self.attn(q, k, mask))
        return x + self.drop(self.ff(self.norm_ff(x)))


class TransformerEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.input_dim = cfg.input_dim
        self.d_model = cfg.d_model
        self.input_proj = nn.Linear(cfg.input_dim, cfg.d_model)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.dropout) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def embed(self, x: torch.Tensor, offset: int = 0) -> torch.Tensor:
        pe = sinusoid_positions(x.shape[-2], self.d_model, offset, x.dtype)
        return self.drop(self.input_proj(x) + pe)

    def forward(self, x: torch.Tensor, policy: AttentionPolicy = Full(),
                lengths: torch.Tensor | None = None) -> torch.Tensor:
        """Encode (T, D) or padded (B, T, D) features under a Full or Chunk policy."""
        unbatched = x.dim() == 2
        if unbatched:
            x = x.unsqueeze(0)
        n_batch, n_frames, _ = x.shape
        if n_frames < 1:
            raise ValueError("cannot encode an empty sequence")
        mask = make_mask(policy, n_frames)
        if lengths is not None:
            valid = torch.arange(n_frames)[None, :] < lengths[:, None]
            mask = mask[None] & valid[:, None, :]
        h = self.embed(x)
        for layer in self.layers:
            h = layer(h, mask)
        h = self.final_norm(h)
        return h[0] if unbatched else h


def transformer_encoder(x: torch.Tensor, policy: AttentionPolicy, encoder: TransformerEncoder) -> torch.Tensor:
    return encoder(x, policy)


class LSTMCell(nn.Module):
    """Gated recurrent cell with input, forget and output gates and a cell state."""

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.hidden_size = hidden_size
        self.ih = nn.Linear(input_size, 4 * hidden_size)
        self.hh = nn.Linear(hidden_size, 4 * hidden_size, bias=False)

    def initial_state(self, batch: int | None = None, dtype=torch.float32):
        shape = (self.hidden_size,) if batch is None else (batch, self.hidden_size)
        return torch.zeros(shape, dtype=dtype), torch.zeros(shape, dtype=dtype)

    def forward(self, x: torch.Tensor, state):
        h, c = state
        if h.shape[-1] != self.hidden_size or c.shape[-1] != self.hidden_size:
            raise ValueError("recurrent state width does not match the cell")
        i, f, g, o = (self.ih(x) + self.hh(h)).chunk(4, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, (h, c)


def recurrent_cell_step(y_emb: torch.Tensor, state, cell: LSTMCell):
    return cell(y_emb, state)


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.norm_self = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm_src = nn.LayerNorm(d_model)
        self.src_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm_ff = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, y, memory, self_mask=None, memory_mask=None):
        q = self.norm_self(y)
        y = y + self.drop(self.self_attn(q, q, self_mask))
        y = y + self.drop(self.src_attn(self.norm_src(y), memory, memory_mask))
        return y + self.drop(self.ff(self.norm_ff(y)))


class TransformerDecoder(nn.Module):
    """Token embedding + self/cross-attention stack + output projection.

    Cross-attention always covers the whole memory (except padding), so any change
    to the memory may change every output position.
    """

    def __init__(self, vocab_size: int, n_out: int, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.d_model = cfg.d_model
        self.embed = nn.Embedding(vocab_size, cfg.d_model)
        # scaled by sqrt(d) in forward, so start at unit scale relative to the positions
        nn.init.normal_(self.embed.weight, std=cfg.d_model ** -0.5)
        self.layers = nn.ModuleList(
            DecoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.dropout) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(cfg.d_model)
        self.output = nn.Linear(cfg.d_model, n_out)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, tokens: torch.Tensor, memory: torch.Tensor, self_mask: torch.Tensor | None = None,
                memory_valid: torch.Tensor | None = None) -> torch.Tensor:
        """Logits ``(B, U, n_out)`` for ``tokens`` (B, U) attending ``memory`` (B, T, d)."""
        y = self.drop(self.embed(tokens) * math.sqrt(self.d_model)
                      + sinusoid_positions(tokens.shape[1], self.d_model, dtype=memory.dtype))
        memory_mask = None if memory_valid is None else memory_valid[:, None, :]
        for layer in self.layers:
            y = layer(y, memory, self_mask, memory_mask)
        return self.output(self.final_norm(y))


def causal_mask(n: int) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool).tril()


def transformer_decoder(y: torch.Tensor, memory: torch.Tensor, self_mask: torch.Tensor | None,
                        decoder: TransformerDecoder) -> torch.Tensor:
    unbatched = y.dim() == 1
    if unbatched:
        y, memory = y[None], memory[None]
    out = decoder(y, memory, self_mask)
    return out[0] if unbatched else out


# -- parameters and optimization ---------------------------------------------

def parameter_set(module: nn.Module) -> "OrderedDict[str, np.ndarray]":
    """Ordered name -> array snapshot of a module's parameters."""
    return OrderedDict((name, p.detach().cpu().numpy().copy()) for name, p in module.named_parameters())


def load_parameter_set(module: nn.Module, params: Mapping[str, np.ndarray]) -> None:
    own = dict(module.named_parameters())
    missing = set(own) - set(params)
    extra = set(params) - set(own)
    if missing or extra:
        raise KeyError(f"parameter names differ: missing={sorted(missing)} unexpected={sorted(extra)}")
    with torch.no_grad():
        for name, p in own.items():
            value = np.asarray(params[name])
            if tuple(value.shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {tuple(p.shape)}")
            p.copy_(torch.as_tensor(value, dtype=p.dtype))


def adam_step(param, grad, moments, step: int, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; works on numpy arrays and torch tensors.

    ``moments`` is ``(m, v)``; returns ``(new_param, (m, v))``. ``step`` is 1-based.
    """
    m, v = moments
    if param.shape != grad.shape or m.shape != param.shape or v.shape != param.shape:
        raise ValueError(f"shape mismatch: param {tuple(param.shape)}, grad {tuple(grad.shape)}")
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    return param - lr * m_hat / (v_hat ** 0.5 + eps), (m, v)


class Adam:
    """Adam over a module's parameters with linear warmup then constant rate."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 warmup: int = 0, frozen: Callable[[str], bool] | None = None):
        self.named = [(n, p) for n, p in params if p.requires_grad and not (frozen and frozen(n))]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.warmup = warmup
        self.step_count = 0
        self.moments = {n: (torch.zeros_like(p), torch.zeros_like(p)) for n, p in self.named}

    def current_lr(self) -> float:
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(1.0, (self.step_count + 1) / self.warmup)

    def zero_grad(self):
        for _, p in self.named:
            p.grad = None

    @torch.no_grad()
    def step(self):
        lr = self.current_lr()
        self.step_count += 1
        for name, p in self.named:
            if p.grad is None:
                continue
            new, self.moments[name] = adam_step(p, p.grad, self.moments[name], self.step_count, lr,
                                                self.betas[0], self.betas[1], self.eps)
            p.copy_(new)


def grad_check(f: Callable[[dict], torch.Tensor], params: Mapping[str, torch.Tensor], step: float = 1e-6,
               floor: float = 1e-6, max_coords: int | None = None, seed: int = 0) -> float:
    """Worst relative error between autograd and central-difference gradients.

    ``f`` maps a dict of float64 tensors to a scalar tensor. The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, floor)``. With ``max_coords`` set, a
    random subset of coordinates per parameter is checked.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    leaves = {k: v.detach().clone().to(torch.float64).requires_grad_(True) for k, v in params.items()}
    value = f(leaves)
    if not torch.isfinite(value):
        raise FloatingPointError(f"objective is not finite: {value.item()}")
    grads = torch.autograd.grad(value, list(leaves.values()), allow_unused=True)
    analytic = {k: (g if g is not None else torch.zeros_like(leaves[k])) for k, g in zip(leaves, grads)}

    rng = np.random.default_rng(seed)
    worst = 0.0
    base = {k: v.detach().clone() for k, v in leaves.items()}
    with torch.no_grad():
        for name, tensor in base.items():
            flat = tensor.view(-1)
            coords = np.arange(flat.numel())
            if max_coords is not None and coords.size > max_coords:
                coords = rng.choice(coords, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + step
                up = f(base).item()
                flat[i] = orig - step
                down = f(base).item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise FloatingPointError(f"objective not finite near {name}[{i}]")
                numeric = (up - down) / (2 * step)
                a = analytic[name].view(-1)[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst

"""Slide encoder, prototype projection head, case transformer and task heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .nn import functional as fn


@dataclass(frozen=True)
class SlideEncoderConfig:
    d_patch: int = 384
    dim: int = 768
    heads: int = 12
    layers: int = 6
    ffn_dim: int = 3072
    registers: int = 4
    mlp_dropout: float = 0.1
    attn_dropout: float = 0.0
    drop_path: float = 0.1

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class ProjectionConfig:
    hidden: int = 2048
    bottleneck: int = 256
    prototypes: int = 8192


@dataclass(frozen=True)
class CaseTransformerConfig:
    layers: int = 3
    heads: int = 12
    ffn_dim: int = 3072
    dropout: float = 0.1
    layerscale: float = 1e-5
    token_std: float = 0.02
    init_std: float = 0.02


@dataclass
class TokenSequence:
    """A batch of patch tokens; CLS and registers are added by the encoder.

    features: ``(B, N, d_patch)``; coords: ``(B, N, 2)`` level-0 pixels;
    valid/masked: ``(B, N)`` bool; spacing: ``(B,)`` level-0 pixels per token.
    """

    features: torch.Tensor
    coords: torch.Tensor
    valid: torch.Tensor
    spacing: torch.Tensor
    masked: torch.Tensor | None = None

    def __post_init__(self):
        if self.masked is not None and bool((self.masked & ~self.valid).any()):
            raise ValueError("masked tokens must be valid")


def alibi_slopes(n_heads: int) -> torch.Tensor:
    """Fixed geometric slopes ``2^(-8h/H)`` for ``h = 1..H``."""
    h = torch.arange(1, n_heads + 1, dtype=torch.float64)
    return 2.0 ** (-8.0 * h / n_heads)


def alibi_bias(coords_i, coords_j, spacing, slopes) -> torch.Tensor:
    """``-s_h * ||p_i - p_j|| / spacing`` per head.

    ``coords_*`` are ``(..., N, 2)``; ``spacing`` broadcasts over the leading
    dims.  Returns ``(..., H, N_i, N_j)``.
    """
    diff = coords_i[..., :, None, :] - coords_j[..., None, :, :]
    dist = torch.sqrt((diff * diff).sum(-1))
    spacing = torch.as_tensor(spacing, dtype=dist.dtype)
    dist = dist / spacing.reshape(spacing.shape + (1, 1))
    slopes = torch.as_tensor(slopes, dtype=dist.dtype)
    return -slopes.reshape(-1, 1, 1) * dist.unsqueeze(-3)


def background_mask(valid) -> torch.Tensor:
    """Additive mask: ``-inf`` wherever either token is invalid, else 0.

    ``valid`` is ``(..., T)`` including special tokens; returns ``(..., T, T)``.
    """
    valid = torch.as_tensor(valid, dtype=torch.bool)
    if not bool(valid.any(-1).all()):
        raise ValueError("token set has no valid (tissue) tokens")
    pair = valid[..., :, None] & valid[..., None, :]
    out = torch.zeros(pair.shape, dtype=torch.float64)
    return out.masked_fill(~pair, float("-inf"))


def _init_linear(layer: nn.Linear, std=0.02):
    nn.init.trunc_normal_(layer.weight, std=std, a=-2 * std, b=2 * std)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return fn.layer_norm(x, self.weight, self.bias)


class Attention(nn.Module):
    def __init__(self, dim, heads, attn_dropout=0.0, proj_dropout=0.0):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.attn_dropout = attn_dropout
        self.proj_dropout = proj_dropout

    def forward(self, x, bias=None):
        B, T, D = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = fn.softmax((q @ k.transpose(-1, -2)) * self.scale, bias)
        attn = fn.dropout(attn, self.attn_dropout, self.training)
        out = (attn @ v).transpose(1, 2).reshape(B, T, D)
        return fn.dropout(self.proj(out), self.proj_dropout, self.training)


class Mlp(nn.Module):
    def __init__(self, dim, hidden, dropout):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.dropout = dropout

    def forward(self, x):
        x = fn.dropout(fn.gelu(self.fc1(x)), self.dropout, self.training)
        return fn.dropout(self.fc2(x), self.dropout, self.training)


class Block(nn.Module):
    """Pre-norm transformer block with optional LayerScale and stochastic depth."""

    def __init__(self, dim, heads, ffn_dim, dropout=0.0, attn_dropout=0.0,
                 drop_path=0.0, layerscale=None):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, attn_dropout, dropout)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, ffn_dim, dropout)
        self.drop_path = drop_path
        if layerscale is not None:
            self.gamma1 = nn.Parameter(torch.full((dim,), float(layerscale)))
            self.gamma2 = nn.Parameter(torch.full((dim,), float(layerscale)))
        else:
            self.gamma1 = self.gamma2 = None

    def forward(self, x, bias=None):
        a = self.attn(self.norm1(x), bias)
        if self.gamma1 is not None:
            a = a * self.gamma1
        x = x + fn.drop_path(a, self.drop_path, self.training)
        m = self.mlp(self.norm2(x))
        if self.gamma2 is not None:
            m = m * self.gamma2
        return x + fn.drop_path(m, self.drop_path, self.training)


class SlideEncoder(nn.Module):
    """ViT over patch-feature tokens with 2-D ALiBi and a background mask."""

    def __init__(self, cfg: SlideEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.d_patch, cfg.dim)
        self.cls_token = nn.Parameter(torch.zeros(cfg.dim))
        self.registers = nn.Parameter(torch.zeros(cfg.registers, cfg.dim))
        self.mask_token = nn.Parameter(torch.zeros(cfg.dim))
        rates = np.linspace(0.0, cfg.drop_path, cfg.layers) if cfg.layers > 1 else [cfg.drop_path]
        self.blocks = nn.ModuleList(
            Block(cfg.dim, cfg.heads, cfg.ffn_dim, cfg.mlp_dropout, cfg.attn_dropout, float(r))
            for r in rates
        )
        self.norm = LayerNorm(cfg.dim)
        self.register_buffer("slopes", alibi_slopes(cfg.heads), persistent=False)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                _init_linear(m)
        for p in (self.cls_token, self.registers, self.mask_token):
            nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04)

    @property
    def n_special(self):
        return 1 + self.cfg.registers

    def attention_bias(self, tokens: TokenSequence, dtype):
        B, N = tokens.valid.shape
        T = N + self.n_special
        bias = torch.zeros((B, self.cfg.heads, T, T), dtype=dtype)
        bias[:, :, self.n_special:, self.n_special:] = alibi_bias(
            tokens.coords.to(dtype), tokens.coords.to(dtype), tokens.spacing.to(dtype),
            self.slopes.to(dtype),
        )
        full_valid = torch.cat([torch.ones((B, self.n_special), dtype=torch.bool), tokens.valid], 1)
        return bias + background_mask(full_valid).to(dtype).unsqueeze(1), full_valid

    def forward(self, tokens: TokenSequence):
        dtype = self.embed.weight.dtype
        x = fn.gelu(self.embed(tokens.features.to(dtype)))
        if tokens.masked is not None:
            x = torch.where(tokens.masked.unsqueeze(-1), self.mask_token.expand_as(x), x)
        B = x.shape[0]
        special = torch.cat([self.cls_token[None], self.registers], 0)
        x = torch.cat([special.unsqueeze(0).expand(B, -1, -1), x], 1)
        bias, full_valid = self.attention_bias(tokens, dtype)
        keep = full_valid.unsqueeze(-1).to(dtype)
        for block in self.blocks:
            x = block(x, bias) * keep
        x = self.norm(x) * keep
        return x[:, 0], x[:, self.n_special:]


def encode_slide(tokens: TokenSequence, encoder: SlideEncoder, train: bool = False):
    """Run the encoder; returns ``(cls (B, d), patch embeddings (B, N, d))``."""
    encoder.train(train)
    return encoder(tokens)


class ProjectionHead(nn.Module):
    """MLP -> L2-normalized bottleneck -> weight-normalized prototypes (gain fixed at 1)."""

    def __init__(self, dim, cfg: ProjectionConfig):
        super().__init__()
        self.fc1 = nn.Linear(dim, cfg.hidden)
        self.fc2 = nn.Linear(cfg.hidden, cfg.hidden)
        self.fc3 = nn.Linear(cfg.hidden, cfg.bottleneck)
        self.prototypes = nn.Parameter(torch.empty(cfg.prototypes, cfg.bottleneck))
        for m in (self.fc1, self.fc2, self.fc3):
            _init_linear(m)
        nn.init.trunc_normal_(self.prototypes, std=0.02, a=-0.04, b=0.04)
        self.renormalize()

    @torch.no_grad()
    def renormalize(self):
        self.prototypes.copy_(fn.l2_normalize(self.prototypes))

    def bottleneck(self, h):
        u = fn.gelu(self.fc1(h))
        u = fn.gelu(self.fc2(u))
        return fn.l2_normalize(self.fc3(u))

    def forward(self, h):
        return fn.linear(self.bottleneck(h), fn.l2_normalize(self.prototypes))


def project_prototypes(embeddings, head: ProjectionHead):
    return head(embeddings)


def canonical_order(x: torch.Tensor) -> torch.Tensor:
    """Row permutation sorting rows lexicographically by value."""
    rows = x.detach().cpu().numpy()
    return torch.as_tensor(np.lexsort(rows.T[::-1]), dtype=torch.long)


class CaseTransformer(nn.Module):
    """Aggregates a set of slide embeddings into one case embedding via a [CASE] token.

    Slides carry no positional encoding and are put in a canonical order
    first, so the output depends on the set of slides only (bitwise).
    """

    def __init__(self, dim, cfg: CaseTransformerConfig):
        super().__init__()
        self.case_token = nn.Parameter(torch.empty(dim))
        nn.init.trunc_normal_(self.case_token, std=cfg.token_std, a=-2 * cfg.token_std,
                              b=2 * cfg.token_std)
        self.blocks = nn.ModuleList(
            Block(dim, cfg.heads, cfg.ffn_dim, cfg.dropout, 0.0, 0.0, cfg.layerscale)
            for _ in range(cfg.layers)
        )
        for m in self.blocks.modules():
            if isinstance(m, nn.Linear):
                _init_linear(m, cfg.init_std)
        self.norm = LayerNorm(dim)

    def forward(self, slides: torch.Tensor):
        if slides.ndim != 2 or slides.shape[0] < 1:
            raise ValueError(f"need a non-empty (S, d) slide stack, got {tuple(slides.shape)}")
        slides = slides[canonical_order(slides)]
        x = torch.cat([self.case_token[None], slides.to(self.case_token.dtype)], 0)[None]
        for block in self.blocks:
            x = block(x)
        return self.norm(x)[0, 0]


def aggregate_case(slide_embeddings, aggregator: CaseTransformer, train=False):
    if len(slide_embeddings) == 0:
        raise ValueError("case has no slides")
    aggregator.train(train)
    if isinstance(slide_embeddings, (list, tuple)):
        slide_embeddings = torch.stack(list(slide_embeddings))
    return aggregator(slide_embeddings)


class TaskHead(nn.Module):
    """Linear (dropout + affine) or MLP (LN, two GELU+dropout(0.25) layers, affine) head.

    Layers keep torch's fan-in scaled init: a fixed std of 0.02 through three
    stacked affines would wash out the input at narrow widths.
    """

    MLP_DROPOUT = 0.25

    def __init__(self, dim, out_dim, kind="mlp", dropout=0.1, hidden=None):
        super().__init__()
        self.kind = kind
        self.out_dim = out_dim
        if kind == "linear":
            self.dropout = dropout
            self.fc = nn.Linear(dim, out_dim)
        elif kind == "mlp":
            hidden = hidden or dim
            self.dropout = self.MLP_DROPOUT
            self.norm = LayerNorm(dim)
            self.fc1 = nn.Linear(dim, hidden)
            self.fc2 = nn.Linear(hidden, hidden)
            self.fc3 = nn.Linear(hidden, out_dim)
        else:
            raise ValueError(f"unknown head kind {kind!r}")

    def forward(self, h):
        if self.kind == "linear":
            return self.fc(fn.dropout(h, self.dropout, self.training))
        u = fn.dropout(fn.gelu(self.fc1(self.norm(h))), self.dropout, self.training)
        u = fn.dropout(fn.gelu(self.fc2(u)), self.dropout, self.training)
        return self.fc3(u)


def task_head_forward(h, head: TaskHead, train=False):
    head.train(train)
    return head(h)


def tokens_from_crops(crops, masks=None, dtype=torch.float64) -> TokenSequence:
    """Stack equally-sized crops into one token batch (raster order within each crop)."""
    feats = np.stack([c.features.reshape(-1, c.features.shape[-1]) for c in crops])
    coords = np.stack([c.coords.reshape(-1, 2) for c in crops])
    valid = np.stack([c.validity.ravel() for c in crops])
    masked = None
    if masks is not None and any(m is not None for m in masks):
        masked = np.stack([
            np.zeros(valid.shape[1], bool) if m is None else m.mask.ravel() for m in masks
        ])
        masked = torch.as_tensor(masked & valid)
    return TokenSequence(
        torch.as_tensor(feats, dtype=dtype),
        torch.as_tensor(coords, dtype=dtype),
        torch.as_tensor(valid),
        torch.as_tensor([c.spacing for c in crops], dtype=dtype),
        masked,
    )


def tokens_from_view(view, keep=None, dtype=torch.float64) -> TokenSequence:
    """Compact the valid tokens of a view (optionally a subset of valid ranks) into a batch of one."""
    flat = np.flatnonzero(view.validity.ravel())
    if keep is not None:
        flat = flat[keep]
    feats = view.features.reshape(-1, view.features.shape[-1])[flat]
    coords = view.coords.reshape(-1, 2)[flat]
    return TokenSequence(
        torch.as_tensor(feats, dtype=dtype)[None],
        torch.as_tensor(coords, dtype=dtype)[None],
        torch.ones((1, len(flat)), dtype=torch.bool),
        torch.as_tensor([view.spacing], dtype=dtype),
    )


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def no_decay_names(module: nn.Module, prefix="") -> set:
    """Biases, norm parameters, learned tokens and LayerScale are excluded from weight decay."""
    names = set()
    for name, p in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if p.ndim <= 1 or leaf in ("cls_token", "registers", "mask_token", "case_token"):
            names.add(prefix + name)
    return names


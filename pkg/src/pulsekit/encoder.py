"""Transformer sequence encoder over normalized log-mel frames.

Linear input projection plus fixed sinusoidal positions, followed by a
stack of pre-norm encoder layers. Every layer's output is returned so
downstream probes can learn a convex combination of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    num_heads: int = 4
    embed_dim: int = 64
    ffn_dim: int = 128
    dropout: float = 0.1
    input_dim: int = 128

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if min(self.num_layers, self.num_heads, self.embed_dim, self.ffn_dim, self.input_dim) < 1:
            raise ValueError("all encoder sizes must be positive")


FULL_CONFIG = EncoderConfig(num_layers=8, num_heads=8, embed_dim=512, ffn_dim=1024)


def parameter_count(cfg: EncoderConfig) -> int:
    """Closed-form number of trainable encoder parameters."""
    d, f = cfg.embed_dim, cfg.ffn_dim
    per_layer = (2 * d            # pre-attention layer norm
                 + 3 * d * d + 3 * d  # q, k, v
                 + d * d + d      # attention output
                 + 2 * d          # pre-ffn layer norm
                 + d * f + f      # ffn in
                 + f * d + d)     # ffn out
    return cfg.input_dim * d + d + cfg.num_layers * per_layer


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(dtype)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.embed_dim
        self.num_heads = cfg.num_heads
        self.dropout = cfg.dropout
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ffn_in = nn.Linear(d, cfg.ffn_dim)
        self.ffn_out = nn.Linear(cfg.ffn_dim, d)

    def attention(self, x):
        b, t, d = x.shape
        h = self.num_heads
        q, k, v = self.qkv(x).view(b, t, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        weights = torch.softmax(scores, dim=-1)
        weights = nn.functional.dropout(weights, self.dropout, self.training)
        ctx = (weights @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(ctx)

    def forward(self, x):
        x = x + self.attention(self.norm1(x))
        return x + self.ffn_out(torch.relu(self.ffn_in(self.norm2(x))))


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(cfg.input_dim, cfg.embed_dim)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.num_layers))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Map (B, T, input_dim) or (T, input_dim) frames to per-layer outputs."""
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
        if x.shape[-1] != self.cfg.input_dim:
            raise ValueError(f"expected {self.cfg.input_dim} input features, got {x.shape[-1]}")
        h = self.proj(x) + sinusoidal_positions(x.shape[1], self.cfg.embed_dim, x.dtype)
        outputs = []
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if not torch.isfinite(h).all():
                raise FloatingPointError(f"non-finite activations after layer {i + 1}")
            outputs.append(h[0] if squeeze else h)
        return outputs


def init_encoder(cfg: EncoderConfig = EncoderConfig(), seed: int = 0,
                 dtype=torch.float32) -> Encoder:
    """Build an encoder with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) linear weights."""
    gen = torch.Generator().manual_seed(int(seed))
    model = Encoder(cfg)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                module.weight.uniform_(-bound, bound, generator=gen)
                module.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
    return model.to(dtype)


def forward(x, model: Encoder, train_mode: bool = False) -> list[torch.Tensor]:
    """Run the encoder on frames (array, tensor or LogMelFrames)."""
    frames = getattr(x, "frames", x)
    dtype = next(model.parameters()).dtype
    frames = torch.as_tensor(frames, dtype=dtype)
    model.train(train_mode)
    if train_mode:
        return model(frames)
    with torch.no_grad():
        return model(frames)


def gradients(loss: torch.Tensor, model: nn.Module, retain_graph: bool = False) -> dict:
    """Reverse-mode gradients of a scalar loss for every named parameter.

    Parameters the loss does not depend on get an all-zero gradient.
    """
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar")
    if loss.grad_fn is None:
        raise ValueError("loss is not connected to any parameter")
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    grads = torch.autograd.grad(loss, params, retain_graph=retain_graph, allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)}


class LayerWeights(nn.Module):
    """Softmax-normalized trainable mixing weights over encoder layers."""

    def __init__(self, num_layers: int):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(num_layers))

    def forward(self, outputs):
        return weighted_layer_sum(outputs, self.logits)


def weighted_layer_sum(outputs, weights: torch.Tensor) -> torch.Tensor:
    if len(outputs) != weights.shape[0]:
        raise ValueError(f"{len(outputs)} layer outputs but {weights.shape[0]} weights")
    mix = torch.softmax(weights, dim=0)
    return sum(m * z for m, z in zip(mix, outputs))


class Probe(nn.Module):
    """Per-frame beat logit from an embedding: linear, or two linear layers with a ReLU."""

    def __init__(self, embed_dim: int, kind: str = "linear", hidden: int | None = None):
        super().__init__()
        if kind not in ("linear", "mlp2"):
            raise ValueError(f"unknown probe kind {kind!r}")
        self.kind = kind
        if kind == "linear":
            self.net = nn.Linear(embed_dim, 1)
        else:
            hidden = hidden or embed_dim
            self.net = nn.Sequential(nn.Linear(embed_dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, z):
        return self.net(z).squeeze(-1)


class BeatModel(nn.Module):
    """Encoder, layer weights and probe; returns per-frame beat logits."""

    def __init__(self, encoder: Encoder, probe_kind: str = "linear"):
        super().__init__()
        self.encoder = encoder
        self.layer_weights = LayerWeights(encoder.cfg.num_layers)
        self.probe = Probe(encoder.cfg.embed_dim, probe_kind)

    def forward(self, x):
        return self.probe(self.layer_weights(self.encoder(x)))

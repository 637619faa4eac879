"""Shared sequence encoder: frame-stacking frontend plus pre-norm transformer blocks.

Every block ends with an affine layer norm, and :func:`encode` returns each
block's output so callers can tap intermediate depths.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 16
    hidden_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    ffn_multiplier: int = 4
    downsample_stride: int = 4
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim={self.hidden_dim} not divisible by num_heads={self.num_heads}")
        if self.num_blocks < 2:
            raise ValueError("num_blocks must be >= 2 so the last block can serve the high-level space")
        if self.downsample_stride < 1:
            raise ValueError("downsample_stride must be >= 1")
        if self.input_dim < 1 or self.hidden_dim < 1 or self.ffn_multiplier < 1:
            raise ValueError("dimensions must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    def frames_out(self, t_in: int) -> int:
        return -(-t_in // self.downsample_stride)


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))


def init_encoder(config: EncoderConfig, rng: np.random.Generator, prefix: str = "enc.") -> Params:
    F, H, S = config.input_dim, config.hidden_dim, config.downsample_stride
    ffn = H * config.ffn_multiplier
    raw: dict[str, np.ndarray] = {
        "frontend.w": _dense(rng, F * S, H),
        "frontend.b": np.zeros(H),
        "frontend.ln.g": np.ones(H),
        "frontend.ln.b": np.zeros(H),
    }
    for i in range(config.num_blocks):
        p = f"blocks.{i}."
        raw[p + "ln1.g"] = np.ones(H)
        raw[p + "ln1.b"] = np.zeros(H)
        for name in ("wq", "wk", "wv", "wo"):
            raw[p + "attn." + name] = _dense(rng, H, H)
        raw[p + "attn.bo"] = np.zeros(H)
        raw[p + "ln2.g"] = np.ones(H)
        raw[p + "ln2.b"] = np.zeros(H)
        raw[p + "ffn.w1"] = _dense(rng, H, ffn)
        raw[p + "ffn.b1"] = np.zeros(ffn)
        raw[p + "ffn.w2"] = _dense(rng, ffn, H)
        raw[p + "ffn.b2"] = np.zeros(H)
        raw[p + "ln_out.g"] = np.ones(H)
        raw[p + "ln_out.b"] = np.zeros(H)
    return {prefix + k: Tensor(v, requires_grad=True) for k, v in raw.items()}


def parameter_count(config: EncoderConfig) -> int:
    F, H, S = config.input_dim, config.hidden_dim, config.downsample_stride
    ffn = H * config.ffn_multiplier
    frontend = F * S * H + 3 * H
    block = 4 * H * H + H + 6 * H + H * ffn + ffn + ffn * H + H
    return frontend + config.num_blocks * block


def affine_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return ad.layer_norm(x) * gain + bias


def frontend(x: Tensor, params: Params, config: EncoderConfig, prefix: str = "enc.") -> Tensor:
    """Stack ``S`` consecutive frames, project to ``H`` and layer-normalise.

    A trailing partial window is zero-padded, so ``T = ceil(T_in / S)``.
    """
    x = ad.as_tensor(x)
    if x.ndim != 3 or x.shape[1] == 0:
        raise ad.ShapeError(f"frontend expects a non-empty B x T_in x F input, got {x.shape}")
    B, T_in, F = x.shape
    if F != config.input_dim:
        raise ad.ShapeError(f"input feature dim {F} != config.input_dim {config.input_dim}")
    S = config.downsample_stride
    T = config.frames_out(T_in)
    pad = T * S - T_in
    if pad:
        x = ad.concatenate([x, Tensor(np.zeros((B, pad, F)))], axis=1)
    stacked = x.reshape(B, T, S * F)
    h = stacked @ params[prefix + "frontend.w"] + params[prefix + "frontend.b"]
    return affine_norm(h, params[prefix + "frontend.ln.g"], params[prefix + "frontend.ln.b"])


def positional_encoding(T: int, H: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(H)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / H)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)


def _attention(x: Tensor, params: Params, p: str, num_heads: int, trace: list | None) -> Tensor:
    B, T, H = x.shape
    dh = H // num_heads

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(t.reshape(B, T, num_heads, dh), (0, 2, 1, 3))

    q = heads(x @ params[p + "attn.wq"])
    k = heads(x @ params[p + "attn.wk"])
    v = heads(x @ params[p + "attn.wv"])
    scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    probs = ad.softmax(scores, axis=-1)
    if trace is not None:
        trace.append(probs.data)
    ctx = ad.transpose(probs @ v, (0, 2, 1, 3)).reshape(B, T, H)
    return ctx @ params[p + "attn.wo"] + params[p + "attn.bo"]


def block(x: Tensor, params: Params, config: EncoderConfig, index: int, prefix: str = "enc.",
          rng: np.random.Generator | None = None, trace: list | None = None) -> Tensor:
    p = f"{prefix}blocks.{index}."
    rate = config.dropout_rate
    a = affine_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
    x = x + _dropout(_attention(a, params, p, config.num_heads, trace), rate, rng)
    f = affine_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
    f = ad.gelu(f @ params[p + "ffn.w1"] + params[p + "ffn.b1"]) @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
    x = x + _dropout(f, rate, rng)
    return affine_norm(x, params[p + "ln_out.g"], params[p + "ln_out.b"])


def encode(h: Tensor, params: Params, config: EncoderConfig, dropout_on: bool = False,
           rng: np.random.Generator | None = None, num_blocks: int | None = None,
           prefix: str = "enc.", trace: list | None = None) -> list[Tensor]:
    """Run the block stack on frontend output ``h`` (B x T x H).

    Returns one B x T x H tensor per block, shallowest first.  ``num_blocks``
    truncates the stack when the deeper outputs are not needed.
    """
    if h.ndim != 3 or h.shape[-1] != config.hidden_dim:
        raise ad.ShapeError(f"encode expects B x T x {config.hidden_dim}, got {h.shape}")
    if dropout_on and rng is None:
        raise ValueError("dropout requires an rng")
    n = config.num_blocks if num_blocks is None else num_blocks
    x = h + Tensor(positional_encoding(h.shape[1], config.hidden_dim))
    outputs = []
    for i in range(n):
        x = block(x, params, config, i, prefix, rng if dropout_on else None, trace)
        outputs.append(x)
    return outputs

"""The three-branch model: span masking, student, EMA teacher and frozen teacher."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderConfig, Params, encode, frontend, init_encoder


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    num_classes: int = 8
    top_k: int | None = None
    # False reproduces the ablation without projectors or a dedicated high-level block.
    high_level_split: bool = True
    mask_fill: str = "learned"

    def __post_init__(self):
        if self.mask_fill not in ("learned", "zero"):
            raise ValueError(f"mask_fill must be 'learned' or 'zero', got {self.mask_fill!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        k = self.resolved_top_k
        if not 1 <= k <= self.target_depth:
            raise ValueError(f"top_k={k} must lie in [1, {self.target_depth}]")

    @property
    def target_depth(self) -> int:
        """Number of blocks the structural target may draw from."""
        n = self.encoder.num_blocks
        return n - 1 if self.high_level_split else n

    @property
    def resolved_top_k(self) -> int:
        if self.top_k is not None:
            return self.top_k
        return max(1, math.ceil(self.target_depth / 2))


@dataclass
class MaskPlan:
    mask: np.ndarray
    input_mask: np.ndarray
    span_length: int
    mask_prob: float


@dataclass
class BranchSet:
    config: ModelConfig
    student: Params
    ema_teacher: Params
    frozen_teacher: Params | None = None
    tau: float = 0.999

    @property
    def top_k(self) -> int:
        return self.config.resolved_top_k


@dataclass
class ForwardOutputs:
    z_prime: Tensor
    y_prime: Tensor
    z_struc: Tensor
    y_regul: Tensor | None
    mask: np.ndarray


def init_student(config: ModelConfig, rng: np.random.Generator) -> Params:
    H, C, F = config.encoder.hidden_dim, config.num_classes, config.encoder.input_dim
    params = init_encoder(config.encoder, rng)
    if config.high_level_split:
        params["mid.w"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(H), (H, H)), requires_grad=True)
        params["mid.b"] = Tensor(np.zeros(H), requires_grad=True)
        params["high.w"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(H), (H, C)), requires_grad=True)
        params["high.b"] = Tensor(np.zeros(C), requires_grad=True)
    if config.mask_fill == "learned":
        params["mask_emb"] = Tensor(rng.normal(0.0, 1.0, F), requires_grad=True)
    return params


def init_frozen_teacher(config: ModelConfig, rng: np.random.Generator) -> Params:
    H, C = config.encoder.hidden_dim, config.num_classes
    params = init_encoder(config.encoder, rng)
    params["cls.w"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(H), (H, C)), requires_grad=True)
    params["cls.b"] = Tensor(np.zeros(C), requires_grad=True)
    return params


def ema_names(student: Params) -> list[str]:
    return [name for name in student if name.startswith("enc.")]


def init_branches(config: ModelConfig, rng: np.random.Generator, frozen_teacher: Params | None = None,
                  tau: float = 0.999) -> BranchSet:
    student = init_student(config, rng)
    ema = {name: Tensor(student[name].data.copy()) for name in ema_names(student)}
    return BranchSet(config, student, ema, freeze(frozen_teacher) if frozen_teacher else None, tau)


def freeze(params: Params) -> Params:
    return {name: Tensor(p.data.copy()) for name, p in params.items()}


# masking


def spans_to_mask(starts: np.ndarray, span_length: int) -> np.ndarray:
    """Union of spans ``[s, s + M)`` for every true start, clipped at the sequence end."""
    c = np.cumsum(starts, axis=-1, dtype=np.int64)
    shifted = np.zeros_like(c)
    shifted[..., span_length:] = c[..., :-span_length] if span_length < c.shape[-1] else 0
    return (c - shifted) > 0


def sample_span_mask(batch: int, t_in: int, p: float, span_length: int, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 < p < 1.0:
        raise ValueError(f"mask start probability must lie in (0, 1), got {p}")
    if not 1 <= span_length <= t_in:
        raise ValueError(f"span length {span_length} must lie in [1, {t_in}]")
    if p * span_length >= 1.0:
        raise ValueError(f"p * M = {p * span_length:.3f} >= 1 would mask essentially everything")
    return spans_to_mask(rng.random((batch, t_in)) < p, span_length)


def downsample_mask(input_mask: np.ndarray, stride: int) -> np.ndarray:
    """A step is masked when any input frame in its window is masked."""
    B, T_in = input_mask.shape
    T = -(-T_in // stride)
    padded = np.zeros((B, T * stride), dtype=bool)
    padded[:, :T_in] = input_mask
    return padded.reshape(B, T, stride).any(axis=-1)


def apply_mask(x: np.ndarray, input_mask: np.ndarray, mask_emb: Tensor | None) -> Tensor:
    m = input_mask[..., None].astype(np.float64)
    out = Tensor(x) * Tensor(1.0 - m)
    if mask_emb is not None:
        out = out + Tensor(m) * mask_emb
    return out


def mask_spans(x: np.ndarray, p: float, span_length: int, rng: np.random.Generator, stride: int,
               mask_emb: Tensor | None = None) -> tuple[Tensor, MaskPlan]:
    B, T_in, _ = x.shape
    input_mask = sample_span_mask(B, T_in, p, span_length, rng)
    plan = MaskPlan(downsample_mask(input_mask, stride), input_mask, span_length, p)
    return apply_mask(x, input_mask, mask_emb), plan


# branches


def student_forward(x_corrupt: Tensor, branches: BranchSet, rng: np.random.Generator | None = None,
                    dropout_on: bool = True) -> tuple[Tensor, Tensor]:
    """Return ``(z_prime, y_prime)``.

    With the split architecture the mid-level prediction reads block N-1 and
    the high-level prediction runs block N on top of it; the ablated variant
    uses the top block output for both, unprojected.
    """
    cfg = branches.config
    enc = cfg.encoder
    params = branches.student
    layers = encode(frontend(x_corrupt, params, enc), params, enc, dropout_on=dropout_on, rng=rng)
    if not cfg.high_level_split:
        return layers[-1], layers[-1]
    z_prime = layers[-2] @ params["mid.w"] + params["mid.b"]
    y_prime = layers[-1] @ params["high.w"] + params["high.b"]
    return z_prime, y_prime


def average_top_k(layers: list[Tensor], k: int) -> Tensor:
    """Layer-normalise each of the last ``k`` outputs per frame, then average."""
    total = None
    for out in layers[-k:]:
        normed = ad.layer_norm(out)
        total = normed if total is None else total + normed
    return total * (1.0 / k)


def build_struc_target(x: np.ndarray | Tensor, branches: BranchSet, params: Params | None = None,
                       stop: bool = True) -> Tensor:
    """Structural target from the teacher's top-K mid-level outputs on intact input.

    ``params`` defaults to the EMA teacher; passing the student's parameters with
    ``stop=False`` gives the tied-weight, no-stop-gradient variant.
    """
    cfg = branches.config
    params = branches.ema_teacher if params is None else params
    layers = encode(frontend(ad.as_tensor(x), params, cfg.encoder), params, cfg.encoder,
                    num_blocks=cfg.target_depth)
    target = average_top_k(layers, cfg.resolved_top_k)
    return ad.stop_gradient(target) if stop else target


def frozen_teacher_targets(x: np.ndarray | Tensor, branches: BranchSet) -> Tensor:
    if branches.frozen_teacher is None:
        raise RuntimeError("frozen teacher is absent; train it first")
    return ad.stop_gradient(teacher_logits(ad.as_tensor(x), branches.frozen_teacher, branches.config,
                                           embed_only=not branches.config.high_level_split))


def teacher_logits(x: Tensor, params: Params, config: ModelConfig, dropout_on: bool = False,
                   rng: np.random.Generator | None = None, embed_only: bool = False) -> Tensor:
    enc = config.encoder
    top = encode(frontend(x, params, enc), params, enc, dropout_on=dropout_on, rng=rng)[-1]
    if embed_only:
        return top
    return top @ params["cls.w"] + params["cls.b"]


def forward(x: np.ndarray, branches: BranchSet, mask_prob: float, span_length: int,
            mask_rng: np.random.Generator, dropout_rng: np.random.Generator | None,
            stop_gradient: bool = True, need_regul: bool = True) -> ForwardOutputs:
    """One full three-branch pass on a batch of intact inputs ``x``."""
    cfg = branches.config
    x_corrupt, plan = mask_spans(x, mask_prob, span_length, mask_rng, cfg.encoder.downsample_stride,
                                 branches.student.get("mask_emb"))
    z_prime, y_prime = student_forward(x_corrupt, branches, dropout_rng, dropout_on=dropout_rng is not None)
    if stop_gradient:
        z_struc = build_struc_target(x, branches)
    else:
        z_struc = build_struc_target(x, branches, params=branches.student, stop=False)
    y_regul = frozen_teacher_targets(x, branches) if need_regul else None
    return ForwardOutputs(z_prime, y_prime, z_struc, y_regul, plan.mask)


def ema_update(branches: BranchSet, tau: float) -> BranchSet:
    """theta_teacher <- tau * theta_teacher + (1 - tau) * theta_student, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    for name, t in branches.ema_teacher.items():
        t.data = tau * t.data + (1.0 - tau) * branches.student[name].data
    branches.tau = tau
    return branches


def tau_schedule(step: int, tau_start: float, tau_end: float, anneal_steps: int) -> float:
    if not 0.0 <= tau_start <= tau_end <= 1.0:
        raise ValueError("need 0 <= tau_start <= tau_end <= 1")
    if anneal_steps <= 0 or step >= anneal_steps:
        return tau_end
    return tau_start + (tau_end - tau_start) * step / anneal_steps

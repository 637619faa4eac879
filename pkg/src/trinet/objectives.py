"""Training objectives: structural regression, high-level regression and
pseudo-class cross-entropy, combined according to the training mode."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MODES = ("trinet", "trinet_ablated_regre", "data2vec_baseline")
POSITIONS = ("masked_only", "all_frames")
LOG_FLOOR = 1e-12


class EmptySelectionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LossConfig:
    mode: str = "trinet"
    loss_positions: str = "masked_only"
    regul_temperature: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.loss_positions not in POSITIONS:
            raise ValueError(f"loss_positions must be one of {POSITIONS}, got {self.loss_positions!r}")
        if not self.regul_temperature > 0:
            raise ValueError("regul_temperature must be positive")

    @property
    def uses_frozen_teacher(self) -> bool:
        return self.mode != "data2vec_baseline"


@dataclass
class LossReport:
    l_struc: float
    l_regre: float | None
    l_regul: float | None
    l_total: float
    masked_frame_count: int
    empty_selection: bool = False


def _select(pred: Tensor, target: Tensor, mask: np.ndarray | None, positions: str) -> tuple[Tensor, Tensor, int]:
    if pred.shape != target.shape:
        raise ad.ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    if positions == "all_frames" or mask is None:
        n = int(np.prod(pred.shape[:-1]))
        return pred, target, n
    if mask.shape != pred.shape[:-1]:
        raise ad.ShapeError(f"mask {mask.shape} does not match frames {pred.shape[:-1]}")
    return pred[mask], target[mask], int(mask.sum())


def _scaled_sq_error(pred: Tensor, target: Tensor, mask, positions: str) -> Tensor:
    dim = pred.shape[-1]
    if dim == 0:
        raise ad.ShapeError("feature dimension must be positive")
    p, t, n = _select(pred, target, mask, positions)
    if n == 0:
        warnings.warn("no frames selected for the loss; returning 0", EmptySelectionWarning, stacklevel=3)
        return Tensor(0.0)
    return ad.square(p - t).sum() * (1.0 / math.sqrt(dim))


def loss_struc(z_prime: Tensor, z_struc: Tensor, mask: np.ndarray | None = None,
               positions: str = "masked_only") -> Tensor:
    """(1/sqrt(D)) * sum of squared differences over the selected frames."""
    return _scaled_sq_error(z_prime, z_struc, mask, positions)


def loss_regre(y_prime: Tensor, y_regul: Tensor, mask: np.ndarray | None = None,
               positions: str = "masked_only") -> Tensor:
    return _scaled_sq_error(y_prime, y_regul, mask, positions)


def loss_regul(y_prime: Tensor, y_regul: Tensor, mask: np.ndarray | None = None,
               positions: str = "masked_only", temperature: float = 1.0) -> Tensor:
    """Cross-entropy of softmax(y') against softmax(y_regul / temperature), scaled by 1/sqrt(C)."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    p, t, n = _select(y_prime, y_regul, mask, positions)
    if n == 0:
        warnings.warn("no frames selected for the loss; returning 0", EmptySelectionWarning, stacklevel=2)
        return Tensor(0.0)
    target = ad.softmax(ad.stop_gradient(t) * (1.0 / temperature), axis=-1).data
    log_q = ad.log(ad.softmax(p, axis=-1), floor=LOG_FLOOR)
    ce = -(log_q * Tensor(target)).sum()
    return ce * (1.0 / math.sqrt(y_prime.shape[-1]))


def total_loss(z_prime: Tensor, y_prime: Tensor | None, z_struc: Tensor, y_regul: Tensor | None,
               mask: np.ndarray | None, config: LossConfig) -> tuple[Tensor, LossReport]:
    pos = config.loss_positions
    count = int(np.prod(z_prime.shape[:-1])) if pos == "all_frames" or mask is None else int(mask.sum())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptySelectionWarning)
        l_struc = loss_struc(z_prime, z_struc, mask, pos)
        l_regre = l_regul = None
        total = l_struc
        if config.mode == "trinet":
            l_regul = loss_regul(y_prime, y_regul, mask, pos, config.regul_temperature)
            total = l_struc + l_regul
        elif config.mode == "trinet_ablated_regre":
            l_regre = loss_regre(y_prime, y_regul, mask, pos)
            total = l_struc + l_regre
    if count == 0:
        warnings.warn("no frames selected for the loss; returning 0", EmptySelectionWarning, stacklevel=2)
    report = LossReport(
        l_struc=l_struc.item(),
        l_regre=None if l_regre is None else l_regre.item(),
        l_regul=None if l_regul is None else l_regul.item(),
        l_total=total.item(),
        masked_frame_count=count,
        empty_selection=count == 0,
    )
    return total, report

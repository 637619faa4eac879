"""End-to-end protocol: frozen teacher, pre-training, linear probe, logging.

All randomness is drawn from ``np.random.default_rng([seed, stream, step])`` so a
run is a pure function of its config and resuming needs no saved RNG state.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as synth
from .autodiff import Adam, OptimizerState, Tensor
from .config import ExperimentConfig, dump_config, from_dict
from .diagnostics import CollapseMetrics, collapse_metrics
from .encoder import Params, encode, frontend
from .model import (BranchSet, ema_update, forward, init_branches, init_frozen_teacher, init_student,
                    tau_schedule, teacher_logits)
from .objectives import LOG_FLOOR, LossReport, total_loss

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# named random sub-streams
INIT_TEACHER, TEACHER_DATA, TEACHER_DROPOUT = 1, 2, 3
INIT_STUDENT, DATA, MASK, DROPOUT = 4, 5, 6, 7
INIT_PROBE, DIAG, RANDOM_ENCODER = 8, 9, 10


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, metrics: CollapseMetrics | None = None):
        super().__init__(message)
        self.metrics = metrics


class CheckpointError(ValueError):
    pass


def stream(seed: int, name: int, step: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, name, step])


@dataclass
class RunLog:
    losses: list[tuple[int, LossReport]] = field(default_factory=list)
    metrics: list[CollapseMetrics] = field(default_factory=list)
    wall_clock: list[tuple[int, float]] = field(default_factory=list)
    checkpoints: list[tuple[int, str]] = field(default_factory=list)
    probes: list[tuple[int, float]] = field(default_factory=list)

    def totals(self) -> np.ndarray:
        return np.array([r.l_total for _, r in self.losses])


@dataclass
class Splits:
    pretrain: synth.LabeledDataset
    finetune: synth.LabeledDataset
    eval: synth.LabeledDataset


def make_splits(config: ExperimentConfig) -> Splits:
    dataset = synth.split(synth.generate(config.synth_config()), config.data.split, seed=config.seed)
    return Splits(dataset.subset("pretrain"), dataset.subset("finetune"), dataset.subset("eval"))


def _batch_indices(n: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(n, size=batch, replace=n < batch)


def _frame_labels(dataset: synth.LabeledDataset, stride: int) -> np.ndarray:
    return synth.downsample_labels(dataset.frame_labels, stride, dataset.num_classes)


def _cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.eye(logits.shape[-1])[labels]
    log_q = ad.log(ad.softmax(logits, axis=-1), floor=LOG_FLOOR)
    return -(log_q * Tensor(onehot)).sum() * (1.0 / labels.size)


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(-1) == labels).mean())


# frozen teacher


def train_frozen_teacher(labeled: synth.LabeledDataset, heldout: synth.LabeledDataset,
                         config: ExperimentConfig) -> tuple[Params, float]:
    """Supervised frame classification on the small labeled split.

    Returns frozen (gradient-free) parameters and accuracy on ``heldout``.
    """
    if len(labeled) == 0:
        raise ValueError("labeled split is empty")
    mcfg = config.model_config()
    stride = mcfg.encoder.downsample_stride
    params = init_frozen_teacher(mcfg, stream(config.seed, INIT_TEACHER))
    labels = _frame_labels(labeled, stride)
    opt = Adam(params, config.teacher.lr, warmup_steps=config.teacher.warmup_steps)
    for step in range(config.teacher.steps):
        idx = _batch_indices(len(labeled), config.train.batch_size, stream(config.seed, TEACHER_DATA, step))
        try:
            logits = teacher_logits(Tensor(labeled.features[idx]), params, mcfg, dropout_on=True,
                                    rng=stream(config.seed, TEACHER_DROPOUT, step))
            loss = _cross_entropy(logits, labels[idx])
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        except ad.NonFiniteError as exc:
            raise TrainingDiverged(f"frozen teacher diverged at step {step}: {exc}") from exc
    frozen = {name: Tensor(p.data.copy()) for name, p in params.items()}
    return frozen, teacher_accuracy(frozen, heldout, config)


def teacher_accuracy(params: Params, dataset: synth.LabeledDataset, config: ExperimentConfig) -> float:
    mcfg = config.model_config()
    labels = _frame_labels(dataset, mcfg.encoder.downsample_stride)
    logits = teacher_logits(Tensor(dataset.features), params, mcfg).data
    return _accuracy(logits, labels)


# representations and probe


def representations(params: Params, x: np.ndarray, config: ExperimentConfig, layer: int | None = None) -> np.ndarray:
    """Block outputs (B x T x H) on intact input with dropout off.

    ``layer`` defaults to the mid-level tap: block N-1 with the split
    architecture, the top block for the ablated variant.
    """
    mcfg = config.model_config()
    enc = mcfg.encoder
    if layer is None:
        layer = mcfg.target_depth - 1
    layers = encode(frontend(Tensor(x), params, enc), params, enc, num_blocks=layer + 1)
    return layers[layer].data


def train_probe(features: np.ndarray, labels: np.ndarray, num_classes: int, steps: int, lr: float,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch softmax regression on fixed features; returns (weights, bias)."""
    H = features.shape[-1]
    w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(H), (H, num_classes)), requires_grad=True)
    b = Tensor(np.zeros(num_classes), requires_grad=True)
    x = Tensor(features)
    opt = Adam({"w": w, "b": b}, lr)
    for _ in range(steps):
        loss = _cross_entropy(x @ w + b, labels)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
    return w.data, b.data


def linear_probe(params: Params, train: synth.LabeledDataset, test: synth.LabeledDataset,
                 config: ExperimentConfig, layer: int | None = None, permute_labels: bool = False) -> float:
    """Frame accuracy of a linear classifier on frozen representations."""
    stride = config.encoder.downsample_stride
    C = train.num_classes
    feats = representations(params, train.features, config, layer).reshape(-1, config.encoder.hidden_dim)
    labels = _frame_labels(train, stride).reshape(-1)
    if permute_labels:
        labels = stream(config.seed, INIT_PROBE, 1).permutation(labels)
    try:
        w, b = train_probe(feats, labels, C, config.probe.steps, config.probe.lr, stream(config.seed, INIT_PROBE))
    except ad.NonFiniteError as exc:
        raise TrainingDiverged(f"probe diverged: {exc}") from exc
    test_feats = representations(params, test.features, config, layer)
    return _accuracy(test_feats @ w + b, _frame_labels(test, stride))


# checkpoints


def save_checkpoint(path, branches: BranchSet, opt_state: OptimizerState | None, step: int,
                    config: ExperimentConfig) -> Path:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for prefix, params in (("student", branches.student), ("ema", branches.ema_teacher),
                           ("frozen", branches.frozen_teacher or {})):
        for name, p in params.items():
            arrays[f"{prefix}/{name}"] = p.data
    opt_meta = None
    if opt_state is not None:
        for name in opt_state.m:
            arrays[f"adam_m/{name}"] = opt_state.m[name]
            arrays[f"adam_v/{name}"] = opt_state.v[name]
        opt_meta = {k: getattr(opt_state, k) for k in ("lr", "beta1", "beta2", "eps", "warmup_steps", "step")}
    meta = {
        "version": CHECKPOINT_VERSION,
        "step": step,
        "tau": branches.tau,
        "has_frozen": branches.frozen_teacher is not None,
        "optimizer": opt_meta,
        "config": config.to_dict(),
    }
    arrays["meta"] = np.array(json.dumps(meta))
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


@dataclass
class Checkpoint:
    branches: BranchSet
    opt_state: OptimizerState | None
    step: int
    config: ExperimentConfig


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(Path(path), allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "meta" not in arrays:
        raise CheckpointError("checkpoint has no metadata")
    meta = json.loads(str(arrays.pop("meta")))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')}, expected {CHECKPOINT_VERSION}")
    config = from_dict(meta["config"])
    groups: dict[str, dict[str, np.ndarray]] = {}
    for key, value in arrays.items():
        prefix, name = key.split("/", 1)
        groups.setdefault(prefix, {})[name] = value
    student = {n: Tensor(v, requires_grad=True) for n, v in groups.get("student", {}).items()}
    ema = {n: Tensor(v) for n, v in groups.get("ema", {}).items()}
    frozen = {n: Tensor(v) for n, v in groups.get("frozen", {}).items()} if meta["has_frozen"] else None
    branches = BranchSet(config.model_config(), student, ema, frozen, meta["tau"])
    opt_state = None
    if meta["optimizer"] is not None:
        opt_state = OptimizerState(**meta["optimizer"], m=groups.get("adam_m", {}), v=groups.get("adam_v", {}))
    return Checkpoint(branches, opt_state, int(meta["step"]), config)


# pre-training


def initial_branches(config: ExperimentConfig, frozen: Params | None) -> BranchSet:
    return init_branches(config.model_config(), stream(config.seed, INIT_STUDENT), frozen, config.ema.tau_start)


def probe_batch(splits: Splits, config: ExperimentConfig) -> np.ndarray:
    return splits.eval.features[: config.train.batch_size]


def diagnose(branches: BranchSet, x_probe: np.ndarray, config: ExperimentConfig, step: int) -> CollapseMetrics:
    reps = representations(branches.student, x_probe, config)
    return collapse_metrics(reps, step, stream(config.seed, DIAG, step))


def pretrain(unlabeled: synth.LabeledDataset, frozen: Params | None, config: ExperimentConfig,
             x_probe: np.ndarray | None = None, resume: Checkpoint | None = None,
             checkpoint_dir: Path | None = None, probe_fn=None) -> tuple[BranchSet, Adam, RunLog]:
    """Masked three-branch pre-training of the student.

    Each step: mask, student and teacher forwards, total loss, backward,
    optimizer step on the student only, then the EMA update with the scheduled
    tau.  ``probe_fn(branches) -> accuracy`` is called every
    ``train.probe_interval`` steps when given.
    """
    lcfg = config.loss_config()
    if lcfg.uses_frozen_teacher and frozen is None and resume is None:
        raise ValueError(f"mode {lcfg.mode} needs a frozen teacher")
    if resume is not None:
        branches, start = resume.branches, resume.step
        opt = Adam(branches.student, config.optim.lr, state=resume.opt_state)
    else:
        branches, start = initial_branches(config, frozen), 0
        opt = Adam(branches.student, config.optim.lr, warmup_steps=config.optim.warmup_steps)
    log = RunLog()
    tcfg = config.train
    sg = config.model.stop_gradient
    if x_probe is not None and start == 0:
        log.metrics.append(diagnose(branches, x_probe, config, 0))
    for step in range(start, tcfg.steps):
        t0 = time.perf_counter()
        idx = _batch_indices(len(unlabeled), tcfg.batch_size, stream(config.seed, DATA, step))
        try:
            out = forward(unlabeled.features[idx], branches, config.mask.prob, config.mask.span,
                          stream(config.seed, MASK, step), stream(config.seed, DROPOUT, step),
                          stop_gradient=sg, need_regul=lcfg.uses_frozen_teacher)
            loss, report = total_loss(out.z_prime, out.y_prime, out.z_struc, out.y_regul, out.mask, lcfg)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        except ad.NonFiniteError as exc:
            last = log.metrics[-1] if log.metrics else None
            raise TrainingDiverged(f"non-finite value at step {step + 1}: {exc}", last) from exc
        ema_update(branches, tau_schedule(step, config.ema.tau_start, config.ema.tau_end, config.ema.anneal_steps))
        done = step + 1
        log.losses.append((done, report))
        log.wall_clock.append((done, time.perf_counter() - t0))
        if x_probe is not None and tcfg.diag_interval and done % tcfg.diag_interval == 0:
            log.metrics.append(diagnose(branches, x_probe, config, done))
        if probe_fn is not None and tcfg.probe_interval and done % tcfg.probe_interval == 0:
            log.probes.append((done, probe_fn(branches)))
        if checkpoint_dir is not None and tcfg.checkpoint_interval and done % tcfg.checkpoint_interval == 0:
            path = save_checkpoint(Path(checkpoint_dir) / f"step_{done:06d}.npz", branches, opt.state, done, config)
            log.checkpoints.append((done, str(path)))
    return branches, opt, log


# reporting


def _fmt(value) -> str:
    return "" if value is None else repr(value)


def write_runlog(log: RunLog, out_dir: Path) -> None:
    with (out_dir / "losses.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "l_struc", "l_regre", "l_regul", "l_total", "masked_frame_count"])
        for step, r in log.losses:
            w.writerow([step, _fmt(r.l_struc), _fmt(r.l_regre), _fmt(r.l_regul), _fmt(r.l_total),
                        r.masked_frame_count])
    with (out_dir / "collapse.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mean_variance", "effective_rank", "mean_pairwise_cosine"])
        for m in log.metrics:
            w.writerow([m.step, _fmt(m.mean_variance), _fmt(m.effective_rank), _fmt(m.mean_pairwise_cosine)])
    with (out_dir / "timing.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "seconds"])
        w.writerows(log.wall_clock)
    with (out_dir / "checkpoints.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "path"])
        w.writerows(log.checkpoints)


@dataclass
class ExperimentResult:
    branches: BranchSet
    log: RunLog
    summary: dict
    out_dir: Path


def run_experiment(config: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Frozen teacher, then pre-training, then probes; writes all artifacts."""
    out_dir = Path(out_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    dump_config(config, out_dir / "config.yaml")
    t_start = time.perf_counter()

    splits = make_splits(config)
    lcfg = config.loss_config()
    frozen, teacher_acc = None, None
    if lcfg.uses_frozen_teacher:
        frozen, teacher_acc = train_frozen_teacher(splits.finetune, splits.eval, config)
        logger.info("frozen teacher validation accuracy %.4f", teacher_acc)

    def probe_fn(b: BranchSet) -> float:
        return linear_probe(b.student, splits.finetune, splits.eval, config)

    x_probe = probe_batch(splits, config)
    init = initial_branches(config, frozen)
    save_checkpoint(ckpt_dir / "step_000000.npz", init, None, 0, config)
    branches, opt, log = pretrain(splits.pretrain, frozen, config, x_probe=x_probe, checkpoint_dir=ckpt_dir,
                                  probe_fn=probe_fn if config.train.probe_interval else None)
    final = save_checkpoint(ckpt_dir / "final.npz", branches, opt.state, config.train.steps, config)
    log.checkpoints.insert(0, (0, str(ckpt_dir / "step_000000.npz")))
    log.checkpoints.append((config.train.steps, str(final)))

    probe_acc = probe_fn(branches)
    random_params = init_student(config.model_config(), stream(config.seed, RANDOM_ENCODER))
    random_acc = linear_probe(random_params, splits.finetune, splits.eval, config)
    write_runlog(log, out_dir)

    first, last = log.metrics[0], log.metrics[-1]
    totals = log.totals()
    summary = {
        "mode": lcfg.mode,
        "high_level_split": config.model.high_level_split,
        "stop_gradient": config.model.stop_gradient,
        "seed": config.seed,
        "steps": config.train.steps,
        "teacher_val_accuracy": teacher_acc,
        "probe_accuracy": probe_acc,
        "random_init_probe_accuracy": random_acc,
        "final_l_total": float(totals[-1]) if totals.size else None,
        "collapse": {str(m.step): m.as_row() for m in (first, last)},
        "variance_ratio": last.mean_variance / first.mean_variance,
    }
    if log.probes:
        best_step, best_acc = max(log.probes, key=lambda p: (p[1], -p[0]))
        summary["steps_to_best_probe"] = best_step
        summary["best_probe_accuracy"] = best_acc
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    logger.info("experiment finished in %.1fs", time.perf_counter() - t_start)
    return ExperimentResult(branches, log, summary, out_dir)

"""Joint two-task objective, AdamW, learning-rate schedule and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .model import ModelConfig, ModelParams, forward_tensors, init_params, is_decayed, save_checkpoint
from .numerics import GradTape, Tensor
from .signal_pipeline import DatasetArchive, SplitIndex

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def derive_seed(seed: int, name: str) -> int:
    """Independent 63-bit seed for the named random substream of ``seed``."""
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, name))


@dataclass
class TrainConfig:
    epochs: int = 45
    batch_size: int = 64
    lr_initial: float = 1e-4
    lr_after_warmup: float = 1e-5
    warmup_epochs: int = 15
    schedule: str = "step"  # "step" or "linear"
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    focal_gamma: float = 2.0
    focal_alpha: dict[str, list[float]] | None = None
    task_weights: tuple[float, float] = (1.0, 1.0)
    early_stop_patience: int | None = 10
    seed: int = 0
    checkpoint_every: int = 0
    stop_at_train_accuracy: float | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.task_weights = tuple(self.task_weights)
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_initial <= 0 or self.lr_after_warmup <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.task_weights) < 0 or sum(self.task_weights) == 0:
            raise ValueError("task weights must be non-negative and not both zero")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be non-negative")
        if self.schedule not in ("step", "linear"):
            raise ValueError("schedule must be 'step' or 'linear'")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["task_weights"] = list(self.task_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("early_stop_patience") in ("inf", "none"):
            d["early_stop_patience"] = None
        return cls(**d)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def one_hot(labels, n_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return labels.astype(dtype)
    out = np.zeros((labels.size, n_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def focal_loss(probs, targets, gamma: float = 2.0, alpha=None) -> Tensor:
    """Mean over the batch of ``-sum_k alpha_k (1 - p_k)^gamma y_k log p_k``.

    ``log`` is evaluated at ``max(p, 1e-12)``.  With ``gamma = 0`` and unit
    ``alpha`` this is the categorical cross-entropy.
    """
    probs = nx.as_tensor(probs)
    p = probs.data
    y = one_hot(targets, p.shape[-1], p.dtype)
    if y.shape != p.shape:
        raise ValueError(f"shape mismatch: probs {p.shape} vs targets {y.shape}")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    a = np.ones(p.shape[-1], p.dtype) if alpha is None else np.asarray(alpha, p.dtype)
    if np.any(a < 0):
        raise ValueError("alpha must be non-negative")
    b = p.shape[0]
    pc = np.maximum(p, PROB_FLOOR)
    logp = np.log(pc)
    q = np.clip(1.0 - p, 0.0, None)
    mod = q ** gamma if gamma else np.ones_like(p)
    w = a * y
    loss = -(w * mod * logp).sum() / b

    def backward(g):
        dlog = np.where(p >= PROB_FLOOR, 1.0 / pc, 0.0)
        dmod = np.zeros_like(p)
        if gamma:
            with np.errstate(divide="ignore", invalid="ignore"):
                dmod = np.where(q > 0, -gamma * q ** (gamma - 1.0), 0.0)
        grad = -(w * (dmod * logp + mod * dlog)) / b
        return (g * grad,)

    return nx.record(np.asarray(loss, dtype=p.dtype), (probs,), backward, "focal_loss")


def cross_entropy(probs, targets) -> Tensor:
    """Categorical cross-entropy averaged over the batch."""
    return focal_loss(probs, targets, gamma=0.0, alpha=None)


def joint_loss(stage_probs, apnea_probs, stage_targets, apnea_targets,
               config: TrainConfig, alpha: dict | None = None) -> Tensor:
    """``w_stage * focal(stage) + w_apnea * focal(apnea)``."""
    ns = nx.as_tensor(stage_probs).shape[0]
    na = nx.as_tensor(apnea_probs).shape[0]
    if ns != na:
        raise ValueError(f"batch-size mismatch across tasks: {ns} vs {na}")
    alpha = alpha if alpha is not None else (config.focal_alpha or {})
    ls = focal_loss(stage_probs, stage_targets, config.focal_gamma, alpha.get("stage"))
    la = focal_loss(apnea_probs, apnea_targets, config.focal_gamma, alpha.get("apnea"))
    ws, wa = config.task_weights
    return nx.add(nx.mul(ls, ws), nx.mul(la, wa))


def inverse_frequency_alpha(labels, n_classes: int) -> list[float]:
    """Per-class weights proportional to 1/count, rescaled to mean 1."""
    counts = np.bincount(np.asarray(labels), minlength=n_classes).astype(np.float64)
    inv = 1.0 / np.maximum(counts, 1.0)
    return (inv * n_classes / inv.sum()).tolist()


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8,
               decay_mask: dict[str, bool] | None = None) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One AdamW update, in place.

    ``theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta``,
    with the decay skipped for names whose ``decay_mask`` entry is False.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"shape mismatch for {name}: param {theta.shape}, grad {g.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        wd = weight_decay if decay_mask is None or decay_mask.get(name, True) else 0.0
        theta -= (lr * update + lr * wd * theta).astype(theta.dtype, copy=False)
    return params, state


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Learning rate for 0-indexed ``epoch``.

    ``step``: ``lr_initial`` before ``warmup_epochs``, ``lr_after_warmup`` from then on.
    ``linear``: straight-line interpolation between the two over the warm-up epochs.
    """
    if epoch < config.warmup_epochs:
        if config.schedule == "linear":
            frac = epoch / config.warmup_epochs
            return config.lr_initial + frac * (config.lr_after_warmup - config.lr_initial)
        return config.lr_initial
    return config.lr_after_warmup


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

HISTORY_COLUMNS = (
    "epoch", "lr",
    "train_running_loss",
    "train_loss", "train_stage_loss", "train_apnea_loss",
    "train_stage_ce", "train_apnea_ce", "train_stage_acc", "train_apnea_acc",
    "val_loss", "val_stage_loss", "val_apnea_loss",
    "val_stage_ce", "val_apnea_ce", "val_stage_acc", "val_apnea_acc",
)


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)
    selected_epoch: int | None = None
    wall_time_s: float = 0.0
    stop_reason: str = ""

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS + ("selected",))
        for r in self.rows:
            cells = [r["epoch"]] + [_fmt(r[c]) for c in HISTORY_COLUMNS[1:]]
            w.writerow(cells + [int(r["epoch"] == self.selected_epoch)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.10g}"


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last good parameters."""

    def __init__(self, message: str, params: ModelParams, history: TrainHistory):
        super().__init__(message)
        self.params = params
        self.history = history


def evaluate_split(params: ModelParams, x: np.ndarray, stage: np.ndarray, apnea: np.ndarray,
                   config: TrainConfig, alpha: dict, batch_size: int = 64) -> dict[str, float]:
    """Eval-mode losses and accuracies over a whole example set."""
    from .model import predict

    if len(x) == 0:
        return {}
    ps, pa = predict(params, x, batch_size)
    ls = focal_loss(ps, stage, config.focal_gamma, alpha.get("stage")).item()
    la = focal_loss(pa, apnea, config.focal_gamma, alpha.get("apnea")).item()
    ws, wa = config.task_weights
    return {
        "loss": ws * ls + wa * la,
        "stage_loss": ls,
        "apnea_loss": la,
        "stage_ce": cross_entropy(ps, stage).item(),
        "apnea_ce": cross_entropy(pa, apnea).item(),
        "stage_acc": float(np.mean(ps.argmax(1) == stage)),
        "apnea_acc": float(np.mean(pa.argmax(1) == apnea)),
    }


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    archive: DatasetArchive,
    split: SplitIndex,
    dtype=np.float32,
    checkpoint_dir=None,
    init: ModelParams | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    batch_audit: Callable[[np.ndarray], None] | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Train on the split's training subjects, early-stopping on validation loss.

    Returns the parameters of the epoch with the lowest validation joint
    loss (training loss when the validation split is empty).
    ``batch_audit`` receives the subject ids of every training batch.
    """
    cfg = train_config
    tr_idx = archive.indices_for(split.train_subjects)
    va_idx = archive.indices_for(split.val_subjects)
    if tr_idx.size == 0:
        raise ValueError("empty training split")
    x_tr, s_tr, a_tr = archive.x[tr_idx], archive.stage[tr_idx], archive.apnea[tr_idx]
    x_va, s_va, a_va = archive.x[va_idx], archive.stage[va_idx], archive.apnea[va_idx]
    if dtype != np.float32:
        x_tr, x_va = x_tr.astype(dtype), x_va.astype(dtype)

    alpha = dict(cfg.focal_alpha or {})
    alpha.setdefault("stage", inverse_frequency_alpha(s_tr, model_config.n_stage_classes))
    alpha.setdefault("apnea", inverse_frequency_alpha(a_tr, model_config.n_apnea_classes))

    params = init if init is not None else init_params(
        model_config, derive_seed(cfg.seed, "init"), dtype)
    params = params.copy()
    batch_rng = substream(cfg.seed, "batching")
    drop_rng = substream(cfg.seed, "dropout")
    decay = {k: is_decayed(k) for k in params.tensors}
    state = AdamWState()
    history = TrainHistory()
    best, best_loss, since_best = params.copy(), math.inf, 0
    t0 = time.perf_counter()
    n = len(tr_idx)
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = batch_rng.permutation(n)
        running, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            bi = order[start:start + cfg.batch_size]
            if batch_audit is not None:
                batch_audit(archive.subject_ids[tr_idx[bi]])
            leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.tensors.items()}
            try:
                with GradTape() as tape:
                    ps, pa, _ = forward_tensors(leaves, model_config, x_tr[bi], training=True,
                                                rng=drop_rng, capture=False)
                    loss = joint_loss(ps, pa, s_tr[bi], a_tr[bi], cfg, alpha)
            except nx.NonFiniteError as err:
                _diverged(f"non-finite forward at epoch {epoch}: {err}", params, history, ckdir)
            if not np.isfinite(loss.data):
                _diverged(f"NaN loss at epoch {epoch}", params, history, ckdir)
            grads = tape.gradient(loss, list(leaves.values()))
            adamw_step(params.tensors, dict(zip(leaves, grads)), state, lr,
                       cfg.weight_decay, cfg.betas, cfg.adam_eps, decay)
            running += loss.item() * len(bi)
            seen += len(bi)

        tr = evaluate_split(params, x_tr, s_tr, a_tr, cfg, alpha, cfg.batch_size)
        va = evaluate_split(params, x_va, s_va, a_va, cfg, alpha, cfg.batch_size)
        row = {"epoch": epoch, "lr": lr, "train_running_loss": running / seen}
        row.update({f"train_{k}": v for k, v in tr.items()})
        for k in tr:
            row[f"val_{k}"] = va.get(k, float("nan"))
        history.rows.append(row)

        monitor = va["loss"] if va else tr["loss"]
        if monitor < best_loss:
            best_loss, best, since_best = monitor, params.copy(), 0
            history.selected_epoch = epoch
        else:
            since_best += 1
        log.info("epoch %d lr %.1e train %.4f val %.4f acc %.3f/%.3f", epoch, lr, tr["loss"],
                 monitor, tr["stage_acc"], tr["apnea_acc"])
        if on_epoch is not None:
            on_epoch(row)
        if ckdir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(params, ckdir / "last.ckpt", {"epoch": epoch})
        if cfg.stop_at_train_accuracy is not None and \
                min(tr["stage_acc"], tr["apnea_acc"]) >= cfg.stop_at_train_accuracy:
            history.stop_reason = "train accuracy target reached"
            break
        if cfg.early_stop_patience is not None and since_best >= cfg.early_stop_patience:
            history.stop_reason = "early stopping"
            break
    else:
        history.stop_reason = "epoch budget exhausted"

    history.wall_time_s = time.perf_counter() - t0
    if ckdir:
        save_checkpoint(best, ckdir / "best.ckpt", {"epoch": history.selected_epoch})
    return best, history


def _diverged(message, params, history, ckdir):
    # the failing step has not been applied, so params are still the last good ones
    good = params.copy()
    if ckdir:
        save_checkpoint(good, ckdir / "last_good.ckpt")
    raise TrainingDiverged(message, good, history)

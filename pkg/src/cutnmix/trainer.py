"""The online-distillation training loop.

One step, for ``J`` peers sharing a raw batch:

1. each peer distorts the raw batch with its own RNG stream (pad-crop-flip);
2. one Cut^nMix plan mixes all distorted batches (shared ``lam`` and pairing,
   per-peer rectangles);
3. every peer runs forward once; the peer teacher sees the detached features;
4. each peer's loss ``ce + alpha*dml + beta*mmd + gamma*pt`` is built from that
   single snapshot, then all peers update together;
5. the peer teacher takes its own cross-entropy step on the mixed labels.
"""

from __future__ import annotations

import bisect
import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from . import seeding
from .augment import ImageBatch, apply_mix_plan, base_distort, cutmix_batch, cutnmix_plan, one_hot_batch
from .datasets import Split, shuffled_batches
from .errors import ConfigurationError, NonFiniteLossError, ParameterError
from .evaluation import evaluate_all
from .losses import DistillConfig, dml_loss, kd_kl, mmd_loss, soft_ce, total_loss
from .models import (
    PeerStudent,
    PeerTeacher,
    build_student,
    build_teacher,
    load_checkpoint,
    save_checkpoint,
    student_forward,
    teacher_forward,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "peer", "ce", "dml", "mmd", "pt", "total", "train_acc", "test_acc", "lr")
LOSS_PARTS = ("ce", "dml", "mmd", "pt")
MIXING = ("cutnmix", "cutmix", "none")
UPDATES = ("simultaneous", "alternating")


@dataclass(frozen=True)
class OptimConfig:
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    milestones: tuple[int, ...] = (150, 180, 210)
    decay_factor: float = 0.1
    max_epochs: int = 240

    def __post_init__(self) -> None:
        object.__setattr__(self, "milestones", tuple(sorted(int(m) for m in self.milestones)))
        if self.max_epochs < 0:
            raise ParameterError("max_epochs must be >= 0")
        if self.lr0 < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ParameterError("lr0, weight_decay must be >= 0 and momentum in [0, 1)")


def scaled_milestones(max_epochs: int, reference: OptimConfig = OptimConfig()) -> tuple[int, ...]:
    """Reference milestones rescaled to a shorter schedule, e.g. 30 epochs -> (19, 23, 26)."""
    return tuple(int(math.floor(m * max_epochs / reference.max_epochs + 0.5)) for m in reference.milestones)


def lr_at(cfg: OptimConfig, epoch: int) -> float:
    """Step schedule: ``lr0 * decay_factor ** (number of milestones <= epoch)``."""
    if not 0 <= epoch < cfg.max_epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {cfg.max_epochs})")
    return cfg.lr0 * cfg.decay_factor ** bisect.bisect_right(cfg.milestones, epoch)


@dataclass(frozen=True)
class TrainConfig:
    """Everything the loop needs besides data.

    ``num_peers`` is ``distill.J`` for the distillation modes and 1 for the
    solo baselines (where ``distill`` is ignored apart from the
    temperature). ``teacher`` trains the peer-teacher classifier; it is
    required whenever ``gamma > 0``. ``update="alternating"`` steps the
    peers one after another, each from a fresh forward pass that already
    sees the earlier peers' new weights; the default steps all peers from
    one shared snapshot.
    """

    distill: DistillConfig = DistillConfig()
    optim: OptimConfig = OptimConfig()
    arch: str = "tiny-cnn"
    num_peers: int = 2
    mixing: str = "cutnmix"
    teacher: bool = True
    batch_size: int = 128
    seed: int = 0
    update: str = "simultaneous"

    def __post_init__(self) -> None:
        if self.update not in UPDATES:
            raise ConfigurationError(f"update must be one of {UPDATES}, got {self.update!r}")
        if self.mixing not in MIXING:
            raise ConfigurationError(f"mixing must be one of {MIXING}, got {self.mixing!r}")
        if self.num_peers < 1:
            raise ConfigurationError("need at least one peer")
        if self.num_peers > 1 and self.num_peers != self.distill.J:
            raise ConfigurationError(f"num_peers={self.num_peers} disagrees with J={self.distill.J}")
        if self.mixing == "cutnmix" and self.num_peers < 2:
            raise ConfigurationError("Cut^nMix needs at least two peers; use mixing='cutmix' for one network")
        if self.mixing == "cutmix" and self.num_peers != 1:
            raise ConfigurationError("plain CutMix is the single-network mode")
        if self.num_peers == 1 and (self.teacher or self.distill.alpha or self.distill.beta or self.distill.gamma):
            raise ConfigurationError("a single network has no peers to distill from; zero alpha/beta/gamma and disable the teacher")
        if self.distill.gamma > 0 and not self.teacher:
            raise ConfigurationError("gamma > 0 needs the peer teacher")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")


@dataclass
class TrainState:
    students: list[PeerStudent]
    optimizers: list[torch.optim.SGD]
    teacher: PeerTeacher | None = None
    teacher_opt: torch.optim.SGD | None = None
    epoch: int = 0  # epoch currently (or next) being trained
    step: int = 0  # global optimizer steps taken
    batch_index: int = 0  # position within the current epoch
    distort_rngs: list[np.random.Generator] = field(default_factory=list)
    history: list[dict[str, Any]] = field(default_factory=list)


@dataclass
class StepMetrics:
    peers: list[dict[str, float]]
    teacher_ce: float | None = None
    teacher_acc: float | None = None


@dataclass
class TrainResult:
    students: list[PeerStudent]
    teacher: PeerTeacher | None
    history: list[dict[str, Any]]


def _sgd(params, cfg: OptimConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        params, lr=cfg.lr0, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        nesterov=cfg.nesterov and cfg.momentum > 0,
    )


def init_state(cfg: TrainConfig, num_classes: int) -> TrainState:
    """Fresh peers (peer ``j`` seeded from ``(seed, j)``), optimizers and teacher."""
    students = [
        build_student(cfg.arch, num_classes, seed=seeding.torch_seed(cfg.seed, seeding.INIT, j))
        for j in range(cfg.num_peers)
    ]
    state = TrainState(students=students, optimizers=[_sgd(s.parameters(), cfg.optim) for s in students])
    if cfg.teacher:
        state.teacher = build_teacher(
            [s.feature_dim for s in students], num_classes, seed=seeding.torch_seed(cfg.seed, seeding.TEACHER_INIT)
        )
        state.teacher_opt = _sgd(state.teacher.parameters(), cfg.optim)
    return state


def begin_epoch(state: TrainState, cfg: TrainConfig, epoch: int) -> float:
    """Reset per-epoch RNG streams and set the learning rate; returns it."""
    state.epoch = epoch
    state.batch_index = 0
    state.distort_rngs = [seeding.stream(cfg.seed, seeding.DISTORT, j, epoch) for j in range(cfg.num_peers)]
    lr = lr_at(cfg.optim, epoch)
    for opt in [*state.optimizers, state.teacher_opt]:
        if opt is not None:
            for group in opt.param_groups:
                group["lr"] = lr
    return lr


def _check_finite(value: torch.Tensor, what: str, state: TrainState) -> None:
    if not torch.isfinite(value).all():
        raise NonFiniteLossError(
            f"non-finite {what} ({value.item()}) at epoch {state.epoch}, batch {state.batch_index}, step {state.step}"
        )


def mixed_batches(state: TrainState, cfg: TrainConfig, raw: ImageBatch):
    """Per-peer distorted-then-mixed batches for the current step."""
    distorted = [base_distort(raw, rng) for rng in state.distort_rngs]
    if cfg.mixing == "none":
        return [one_hot_batch(b) for b in distorted]
    mix_rng = seeding.stream(cfg.seed, seeding.MIX, state.epoch, state.batch_index)
    if cfg.mixing == "cutmix":
        return [cutmix_batch(distorted[0], mix_rng)[0]]
    W, H = raw.image_size
    plan = cutnmix_plan(len(raw), W, H, cfg.num_peers, mix_rng)
    return apply_mix_plan(distorted, plan)


def _peer_parts(
    cfg: TrainConfig, j: int, mixed, logits, feats, t_logits
) -> dict[str, torch.Tensor]:
    dc = cfg.distill
    parts: dict[str, torch.Tensor] = {"ce": soft_ce(logits[j], mixed[j].soft_labels)}
    if cfg.num_peers > 1 and dc.alpha:
        parts["dml"] = dml_loss(logits, j, dc.tau)
    if cfg.num_peers > 1 and dc.beta:
        parts["mmd"] = mmd_loss(feats, j)
    if t_logits is not None and dc.gamma:
        parts["pt"] = kd_kl(logits[j], t_logits, dc.tau)
    return parts


def _forward_all(state: TrainState, mixed):
    outs = [student_forward(s, m.pixels) for s, m in zip(state.students, mixed)]
    feats = [f for f, _ in outs]
    logits = [z for _, z in outs]
    t_logits = teacher_forward(state.teacher, feats, detach=True) if state.teacher is not None else None
    return feats, logits, t_logits


def train_step(state: TrainState, cfg: TrainConfig, raw_batch: ImageBatch) -> tuple[TrainState, StepMetrics]:
    if len(state.distort_rngs) != cfg.num_peers:
        begin_epoch(state, cfg, state.epoch)
    mixed = mixed_batches(state, cfg, raw_batch)
    targets = mixed[0].soft_labels
    dominant = torch.from_numpy(targets.dominant)

    for s in state.students:
        s.train()
    if state.teacher is not None:
        state.teacher.train()

    def record(j, parts, logits_j):
        tot = total_loss(cfg.distill, parts)
        _check_finite(tot, f"loss of peer {j}", state)
        row = {k: float(v.item()) for k, v in parts.items()}
        row["total"] = float(tot.item())
        row["train_acc"] = float((logits_j.detach().argmax(dim=1) == dominant).double().mean().item())
        return tot, row

    peer_metrics = []
    if cfg.update == "simultaneous":
        feats, logits, t_logits = _forward_all(state, mixed)
        totals = []
        for j in range(cfg.num_peers):
            tot, row = record(j, _peer_parts(cfg, j, mixed, logits, feats, t_logits), logits[j])
            totals.append(tot)
            peer_metrics.append(row)
        for opt in state.optimizers:
            opt.zero_grad(set_to_none=True)
        sum(totals).backward()
        for opt in state.optimizers:
            opt.step()
    else:
        # peer j sees the peers updated before it in this step
        for j, opt in enumerate(state.optimizers):
            feats, logits, t_logits = _forward_all(state, mixed)
            tot, row = record(j, _peer_parts(cfg, j, mixed, logits, feats, t_logits), logits[j])
            peer_metrics.append(row)
            opt.zero_grad(set_to_none=True)
            tot.backward()
            opt.step()

    metrics = StepMetrics(peer_metrics)
    if state.teacher is not None and cfg.teacher:
        t_ce = soft_ce(t_logits, targets)
        _check_finite(t_ce, "peer-teacher loss", state)
        state.teacher_opt.zero_grad(set_to_none=True)
        t_ce.backward()
        state.teacher_opt.step()
        metrics.teacher_ce = float(t_ce.item())
        metrics.teacher_acc = float((t_logits.detach().argmax(dim=1) == dominant).double().mean().item())

    state.step += 1
    state.batch_index += 1
    return state, metrics


# --- full runs ------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def append_metrics(path: Path, rows: list[dict[str, Any]]) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in METRIC_COLUMNS])


def read_metrics(path: str | Path) -> list[dict[str, Any]]:
    rows = []
    with Path(path).open(newline="") as fh:
        for r in csv.DictReader(fh):
            out: dict[str, Any] = {"epoch": int(r["epoch"]), "peer": r["peer"]}
            for c in METRIC_COLUMNS[2:]:
                out[c] = float(r[c]) if r[c] != "" else None
            rows.append(out)
    return rows


def _truncate_metrics(path: Path, before_epoch: int) -> None:
    if not path.exists():
        return
    keep = [r for r in read_metrics(path) if r["epoch"] < before_epoch]
    path.unlink()
    append_metrics(path, keep)


def epoch_rows(
    state: TrainState, cfg: TrainConfig, epoch: int, lr: float, sums: list[dict[str, float]],
    teacher_sums: dict[str, float], n_steps: int, test: Split | None,
) -> list[dict[str, Any]]:
    teacher = state.teacher if cfg.teacher else None
    accs = evaluate_all(state.students, teacher, test) if test is not None else {}
    rows = []
    for j in range(len(state.students)):
        r: dict[str, Any] = {"epoch": epoch, "peer": str(j), "lr": lr}
        for k, v in sums[j].items():
            r[k] = v / max(n_steps, 1)
        for k in ("dml", "mmd", "pt"):
            r.setdefault(k, 0.0)
        r["test_acc"] = accs.get(str(j))
        rows.append(r)
    if len(state.students) > 1 and test is not None:
        rows.append({"epoch": epoch, "peer": "ensemble", "lr": lr, "test_acc": accs["ensemble"]})
    if teacher is not None:
        rows.append({
            "epoch": epoch, "peer": "teacher", "lr": lr,
            "ce": teacher_sums["ce"] / max(n_steps, 1), "total": teacher_sums["ce"] / max(n_steps, 1),
            "train_acc": teacher_sums["acc"] / max(n_steps, 1),
            "test_acc": accs.get("teacher"),
        })
    return rows


def run_epoch(state: TrainState, cfg: TrainConfig, train_split: Split, epoch: int):
    lr = begin_epoch(state, cfg, epoch)
    sums = [dict() for _ in range(cfg.num_peers)]
    teacher_sums = {"ce": 0.0, "acc": 0.0}
    n = 0
    for raw in shuffled_batches(train_split, cfg.batch_size, cfg.seed, epoch):
        state, m = train_step(state, cfg, raw)
        for acc, row in zip(sums, m.peers):
            for k, v in row.items():
                acc[k] = acc.get(k, 0.0) + v
        if m.teacher_ce is not None:
            teacher_sums["ce"] += m.teacher_ce
            teacher_sums["acc"] += m.teacher_acc
        n += 1
    return lr, sums, teacher_sums, n


def checkpoint_payload(state: TrainState, cfg: TrainConfig, num_classes: int, next_epoch: int) -> dict[str, Any]:
    return {
        "archs": [s.arch for s in state.students],
        "num_classes": num_classes,
        "students": [s.state_dict() for s in state.students],
        "teacher": state.teacher.state_dict() if state.teacher is not None else None,
        "optimizers": [o.state_dict() for o in state.optimizers],
        "teacher_optimizer": state.teacher_opt.state_dict() if state.teacher_opt is not None else None,
        "epoch": next_epoch,
        "step": state.step,
        "seed": cfg.seed,
        "config": config_to_dict(cfg),
        "torch_rng": torch.get_rng_state(),
    }


def restore_state(blob: dict[str, Any], cfg: TrainConfig, num_classes: int) -> TrainState:
    state = init_state(cfg, num_classes)
    for s, sd in zip(state.students, blob["students"]):
        s.load_state_dict(sd)
    for o, sd in zip(state.optimizers, blob["optimizers"]):
        o.load_state_dict(sd)
    if state.teacher is not None and blob.get("teacher") is not None:
        state.teacher.load_state_dict(blob["teacher"])
        state.teacher_opt.load_state_dict(blob["teacher_optimizer"])
    state.epoch = int(blob["epoch"])
    state.step = int(blob["step"])
    torch.set_rng_state(blob["torch_rng"])
    return state


def config_to_dict(cfg: TrainConfig) -> dict[str, Any]:
    d = dataclasses.asdict(cfg)
    d["optim"]["milestones"] = list(cfg.optim.milestones)
    return d


def train(
    cfg: TrainConfig,
    train_split: Split,
    test_split: Split | None = None,
    out_dir: str | Path | None = None,
    resume: bool = False,
    on_epoch: Callable[[int, list[dict[str, Any]]], None] | None = None,
) -> TrainResult:
    """Run ``cfg.optim.max_epochs`` epochs; fully determined by ``cfg.seed``.

    With ``out_dir`` set, appends one block of rows per epoch to
    ``metrics.csv`` and rewrites ``checkpoints/last.pt`` after every epoch.
    ``resume=True`` restarts from that checkpoint; because every RNG stream is
    keyed by (seed, epoch, ...), the resumed run matches an uninterrupted one.
    """
    K = train_split.num_classes
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "checkpoints" / "last.pt" if out is not None else None
    metrics_path = out / "metrics.csv" if out is not None else None

    state = None
    if resume and ckpt is not None and ckpt.exists():
        state = restore_state(load_checkpoint(ckpt), cfg, K)
        _truncate_metrics(metrics_path, state.epoch)
        if metrics_path.exists():
            state.history = read_metrics(metrics_path)
        log.info("resuming from %s at epoch %d", ckpt, state.epoch)
    if state is None:
        state = init_state(cfg, K)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            if metrics_path.exists():
                metrics_path.unlink()
            append_metrics(metrics_path, [])

    for epoch in range(state.epoch, cfg.optim.max_epochs):
        lr, sums, teacher_sums, n = run_epoch(state, cfg, train_split, epoch)
        rows = epoch_rows(state, cfg, epoch, lr, sums, teacher_sums, n, test_split)
        state.history.extend(rows)
        if out is not None:
            append_metrics(metrics_path, rows)
            save_checkpoint(ckpt, checkpoint_payload(state, cfg, K, epoch + 1))
        state.epoch = epoch + 1
        accs = ", ".join(f"{r['peer']}={r['test_acc']:.4f}" for r in rows if r.get("test_acc") is not None)
        log.info("epoch %d/%d lr=%.4g %s", epoch + 1, cfg.optim.max_epochs, lr, accs)
        if on_epoch is not None:
            on_epoch(epoch, rows)
    return TrainResult(state.students, state.teacher, state.history)

"""Experiment configuration, run directories, ablations and plots.

A run directory always holds::

    config.resolved.json   every field after defaulting; re-running it reproduces the run
    metrics.csv            one row per (epoch, peer); see trainer.METRIC_COLUMNS
    checkpoints/last.pt    state after the latest finished epoch
    plots/                 written by ``plot``
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .datasets import Split, make_synthetic, read_cifar10, read_cifar100
from .errors import ConfigurationError
from .evaluation import accuracy_from_logits, evaluate, evaluate_ensemble, evaluate_teacher  # noqa: F401
from .losses import DistillConfig
from .trainer import OptimConfig, TrainConfig, TrainResult, read_metrics, scaled_milestones, train

log = logging.getLogger(__name__)

CONFIG_NAME = "config.resolved.json"
METRICS_NAME = "metrics.csv"

# mode -> (peers: "J" or 1, mixing, use dml, use mmd, use pt)
MODES: dict[str, tuple[Any, str, bool, bool, bool]] = {
    "ours": ("J", "cutnmix", True, True, True),
    "ablation-none": ("J", "cutnmix", True, False, False),
    "ablation-mmd": ("J", "cutnmix", True, True, False),
    "ablation-pt": ("J", "cutnmix", True, False, True),
    "dml": ("J", "none", True, False, False),
    "cutmix-solo": (1, "cutmix", False, False, False),
    "baseline": (1, "none", False, False, False),
}

# Rows of the component ablation, in table order: (mode, Cut^nMix, MMD, PT).
ABLATION_ROWS: tuple[tuple[str, bool, bool, bool], ...] = (
    ("ablation-none", True, False, False),
    ("ablation-mmd", True, True, False),
    ("ablation-pt", True, False, True),
    ("ours", True, True, True),
)


@dataclass
class DatasetConfig:
    name: str = "synthetic"  # synthetic | cifar10 | cifar100
    root: str | None = None  # CIFAR directory; falls back to $CUTNMIX_DATA
    num_classes: int = 10
    n_train: int = 5000
    n_test: int = 1000
    difficulty: float = 1.0
    seed: int = 0  # synthetic generation seed, independent of the run seed


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: str = "tiny-cnn"
    distill: DistillConfig = field(default_factory=DistillConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    out: str | None = None
    mode: str = "ours"
    batch_size: int = 128
    update: str = "simultaneous"  # or "alternating"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; choose from {sorted(MODES)}")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["optim"]["milestones"] = list(self.optim.milestones)
        return d

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        """Build from a (possibly partial) dict. Unknown keys are errors.

        If ``optim.milestones`` is omitted, the reference milestones are
        rescaled to ``optim.max_epochs``.
        """
        raw = dict(raw)
        _reject_unknown(raw, cls, "config")
        ds = raw.pop("dataset", {}) or {}
        dc = raw.pop("distill", {}) or {}
        oc = dict(raw.pop("optim", {}) or {})
        _reject_unknown(ds, DatasetConfig, "dataset")
        _reject_unknown(dc, DistillConfig, "distill")
        _reject_unknown(oc, OptimConfig, "optim")
        if "milestones" not in oc:
            oc["milestones"] = scaled_milestones(oc.get("max_epochs", OptimConfig.max_epochs))
        return cls(dataset=DatasetConfig(**ds), distill=DistillConfig(**dc), optim=OptimConfig(**oc), **raw)

    def with_overrides(self, **kw) -> "RunConfig":
        """Copy with top-level overrides; ``epochs`` and ``dataset`` are shortcuts."""
        d = self.to_dict()
        if kw.get("epochs") is not None:
            d["optim"]["max_epochs"] = kw.pop("epochs")
            d["optim"].pop("milestones")
        kw.pop("epochs", None)
        if kw.get("dataset") is not None:
            name = kw.pop("dataset")
            if name != d["dataset"]["name"]:
                d["dataset"]["name"] = name
                d["dataset"]["num_classes"] = {"cifar10": 10, "cifar100": 100}.get(name, d["dataset"]["num_classes"])
        kw.pop("dataset", None)
        d.update({k: v for k, v in kw.items() if v is not None})
        return RunConfig.from_dict(d)


def _reject_unknown(raw: dict, klass, where: str) -> None:
    known = {f.name for f in dataclasses.fields(klass)}
    extra = set(raw) - known
    if extra:
        raise ConfigurationError(f"unknown {where} keys: {sorted(extra)}")


def load_config(path: str | Path) -> RunConfig:
    with Path(path).open() as fh:
        return RunConfig.from_dict(json.load(fh))


def save_config(cfg: RunConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def train_config(run: RunConfig) -> TrainConfig:
    """Translate a run mode into the loop's switches."""
    peers, mixing, dml, mmd, pt = MODES[run.mode]
    d = run.distill
    if peers == 1:
        distill = dataclasses.replace(d, alpha=0.0, beta=0.0, gamma=0.0)
        num_peers = 1
    else:
        distill = dataclasses.replace(
            d, alpha=d.alpha if dml else 0.0, beta=d.beta if mmd else 0.0, gamma=d.gamma if pt else 0.0
        )
        num_peers = d.J
    return TrainConfig(
        distill=distill, optim=run.optim, arch=run.arch, num_peers=num_peers, mixing=mixing,
        teacher=pt and peers != 1, batch_size=run.batch_size, seed=run.seed, update=run.update,
    )


def load_dataset(ds: DatasetConfig) -> tuple[Split, Split]:
    if ds.name == "synthetic":
        return make_synthetic(ds.num_classes, ds.n_train, ds.n_test, seed=ds.seed, difficulty=ds.difficulty)
    if ds.name == "cifar10":
        return read_cifar10(ds.root)
    if ds.name == "cifar100":
        return read_cifar100(ds.root)
    raise ConfigurationError(f"unknown dataset {ds.name!r}")


def run(cfg: RunConfig, data: tuple[Split, Split] | None = None, resume: bool = False) -> TrainResult:
    """Execute one training run, persisting the resolved config first."""
    train_split, test_split = data if data is not None else load_dataset(cfg.dataset)
    if cfg.out is not None:
        save_config(cfg, Path(cfg.out) / CONFIG_NAME)
    return train(train_config(cfg), train_split, test_split, out_dir=cfg.out, resume=resume)


def final_accuracies(history: Sequence[dict[str, Any]]) -> dict[str, float]:
    """``{peer: test_acc}`` at the last logged epoch."""
    if not history:
        return {}
    last = max(r["epoch"] for r in history)
    return {r["peer"]: r["test_acc"] for r in history if r["epoch"] == last and r.get("test_acc") is not None}


def mean_peer_accuracy(accs: dict[str, float]) -> float:
    vals = [v for k, v in accs.items() if k.isdigit()]
    return sum(vals) / len(vals)


@dataclass
class SeedResult:
    mode: str
    seed: int
    peer_accs: list[float]
    ensemble_acc: float | None
    teacher_acc: float | None

    @property
    def mean_acc(self) -> float:
        return sum(self.peer_accs) / len(self.peer_accs)


def run_modes(
    base: RunConfig, modes: Iterable[str], seeds: Iterable[int], out_root: str | Path | None = None,
    data: tuple[Split, Split] | None = None,
) -> list[SeedResult]:
    """Train every (mode, seed) pair on one dataset; run dirs are ``out_root/<mode>/seed<k>``."""
    data = data if data is not None else load_dataset(base.dataset)
    results = []
    for seed in seeds:
        for mode in modes:
            out = str(Path(out_root) / mode / f"seed{seed}") if out_root is not None else None
            cfg = dataclasses.replace(base, mode=mode, seed=seed, out=out)
            res = run(cfg, data)
            accs = final_accuracies(res.history)
            results.append(SeedResult(
                mode, seed, [accs[k] for k in sorted(accs) if k.isdigit()], accs.get("ensemble"), accs.get("teacher"),
            ))
            log.info("%s seed %d: %s", mode, seed, accs)
    return results


def summarize(results: Sequence[SeedResult], modes: Sequence[str]) -> list[dict[str, Any]]:
    rows = []
    flags = {m: (c, mm, p) for m, c, mm, p in ABLATION_ROWS}
    for mode in modes:
        accs = [r.mean_acc for r in results if r.mode == mode]
        if not accs:
            continue
        c, mm, p = flags.get(mode, (MODES[mode][1] == "cutnmix", MODES[mode][3], MODES[mode][4]))
        rows.append({
            "mode": mode, "cutnmix": c, "mmd": mm, "pt": p, "seeds": len(accs),
            "mean_acc": statistics.fmean(accs), "std_acc": statistics.pstdev(accs) if len(accs) > 1 else 0.0,
            "per_seed": accs,
        })
    return rows


def ablate(base: RunConfig, seeds: Sequence[int], out_root: str | Path, data=None) -> list[dict[str, Any]]:
    """The four component-ablation rows, in table order, written to ``ablation.csv``."""
    modes = [m for m, *_ in ABLATION_ROWS]
    results = run_modes(base, modes, seeds, out_root, data)
    rows = summarize(results, modes)
    out = Path(out_root)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "cutnmix", "mmd", "pt", "seeds", "mean_acc", "std_acc", "per_seed"])
        for r in rows:
            w.writerow([r["mode"], int(r["cutnmix"]), int(r["mmd"]), int(r["pt"]), r["seeds"],
                        repr(r["mean_acc"]), repr(r["std_acc"]), " ".join(repr(a) for a in r["per_seed"])])
    return rows


# --- plots -----------------------------------------------------------------


def find_runs(paths: Iterable[str | Path]) -> list[Path]:
    """Run directories (those holding a metrics CSV) under the given paths."""
    runs: set[Path] = set()
    for p in map(Path, paths):
        if (p / METRICS_NAME).exists():
            runs.add(p)
        runs.update(m.parent for m in p.rglob(METRICS_NAME))
    return sorted(runs)


def curve_data(runs: Sequence[Path], peer: str = "0") -> dict[str, dict[int, list[float]]]:
    """``{mode: {epoch: [test_acc per run]}}`` for one peer row (e.g. ``"0"`` or ``"ensemble"``)."""
    out: dict[str, dict[int, list[float]]] = {}
    for rd in runs:
        cfg_path = rd / CONFIG_NAME
        mode = json.loads(cfg_path.read_text())["mode"] if cfg_path.exists() else rd.name
        for r in read_metrics(rd / METRICS_NAME):
            if r["peer"] == peer and r["test_acc"] is not None:
                out.setdefault(mode, {}).setdefault(r["epoch"], []).append(r["test_acc"])
    return out


def plot_curves(runs: Sequence[Path], out_dir: str | Path, peer: str = "0", formats=("svg", "png")) -> list[Path]:
    """Test accuracy vs epoch, mean line with a +-1 std band over runs of each mode."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = curve_data(runs, peer)
    if not data:
        raise ConfigurationError(f"no metrics rows for peer {peer!r} under the given runs")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    with (out / "accuracy_curves.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "epoch", "n_runs", "mean", "std", "values"])
        for mode in sorted(data):
            epochs = sorted(data[mode])
            means = [statistics.fmean(data[mode][e]) for e in epochs]
            stds = [statistics.pstdev(data[mode][e]) for e in epochs]
            for e, m, s in zip(epochs, means, stds):
                w.writerow([mode, e, len(data[mode][e]), repr(m), repr(s), " ".join(map(repr, data[mode][e]))])
            xs = [e + 1 for e in epochs]
            ax.plot(xs, means, label=mode)
            ax.fill_between(xs, [m - s for m, s in zip(means, stds)], [m + s for m, s in zip(means, stds)], alpha=0.25)
    ax.set_xlabel("epoch")
    ax.set_ylabel(f"top-1 test accuracy (peer {peer})")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    paths = []
    for fmt in formats:
        p = out / f"accuracy.{fmt}"
        fig.savefig(p, **({"metadata": {"Date": None}} if fmt == "svg" else {}))
        paths.append(p)
    plt.close(fig)
    return paths

"""Top-1 accuracy of single peers and peer ensembles.

Argmax ties resolve to the lowest class index (``torch.argmax`` returns the
first maximal entry), so accuracies are deterministic even for constant
logits.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import torch

from .augment import ImageBatch
from .errors import ConfigurationError, ParameterError
from .models import PeerStudent, student_forward, teacher_forward


def _batches(stream) -> Iterable[ImageBatch]:
    return stream.batches() if hasattr(stream, "batches") else stream


def accuracy_from_logits(logits: torch.Tensor, labels) -> float:
    labels = torch.tensor(labels)
    return (logits.argmax(dim=1) == labels).double().mean().item()


@torch.no_grad()
def _collect(models: Sequence[torch.nn.Module], stream, fn):
    modes = [m.training for m in models]
    for m in models:
        m.eval()
    correct = total = 0
    try:
        for batch in _batches(stream):
            scores = fn(batch)
            correct += int((scores.argmax(dim=1) == torch.tensor(batch.labels)).sum())
            total += len(batch)
    finally:
        for m, mode in zip(models, modes):
            m.train(mode)
    if total == 0:
        raise ParameterError("cannot evaluate on an empty stream")
    return correct / total


def evaluate(peer: PeerStudent, stream) -> float:
    """Fraction of test samples whose argmax logit equals the label."""
    return _collect([peer], stream, lambda b: student_forward(peer, b.pixels)[1])


def evaluate_ensemble(peers: Sequence[PeerStudent], stream, rule: str = "softmax") -> float:
    """Accuracy of the mean per-peer softmax (``rule="softmax"``) or mean logits (``rule="logits"``)."""
    if not peers:
        raise ParameterError("need at least one peer")
    if rule not in ("softmax", "logits"):
        raise ConfigurationError(f"unknown ensemble rule {rule!r}")

    def score(batch):
        outs = [student_forward(p, batch.pixels)[1] for p in peers]
        if rule == "softmax":
            outs = [torch.softmax(o, dim=1) for o in outs]
        return torch.stack(outs).mean(dim=0)

    return _collect(list(peers), stream, score)


def evaluate_teacher(peers: Sequence[PeerStudent], teacher, stream) -> float:
    """Accuracy of the peer teacher reading the concatenated peer features."""

    def score(batch):
        feats = [student_forward(p, batch.pixels)[0] for p in peers]
        return teacher_forward(teacher, feats)

    return _collect([*peers, teacher], stream, score)


@torch.no_grad()
def evaluate_all(peers: Sequence[PeerStudent], teacher, stream, rule: str = "softmax") -> dict[str, float]:
    """Per-peer, ensemble and teacher accuracy from one forward pass per peer.

    Returns the same numbers as :func:`evaluate`, :func:`evaluate_ensemble`
    and :func:`evaluate_teacher`; keys are ``"0".."J-1"``, ``"ensemble"``
    (J >= 2) and ``"teacher"`` (when ``teacher`` is given).
    """
    models = [*peers, *([teacher] if teacher is not None else [])]
    modes = [m.training for m in models]
    for m in models:
        m.eval()
    keys = [str(j) for j in range(len(peers))] + (["ensemble"] if len(peers) > 1 else [])
    keys += ["teacher"] if teacher is not None else []
    correct = dict.fromkeys(keys, 0)
    total = 0
    try:
        for batch in _batches(stream):
            labels = torch.tensor(batch.labels)
            outs = [student_forward(p, batch.pixels) for p in peers]
            scores = {str(j): z for j, (_, z) in enumerate(outs)}
            if len(peers) > 1:
                zs = [z for _, z in outs]
                if rule == "softmax":
                    zs = [torch.softmax(z, dim=1) for z in zs]
                scores["ensemble"] = torch.stack(zs).mean(dim=0)
            if teacher is not None:
                scores["teacher"] = teacher_forward(teacher, [f for f, _ in outs])
            for k, v in scores.items():
                correct[k] += int((v.argmax(dim=1) == labels).sum())
            total += len(batch)
    finally:
        for m, mode in zip(models, modes):
            m.train(mode)
    if total == 0:
        raise ParameterError("cannot evaluate on an empty stream")
    return {k: c / total for k, c in correct.items()}

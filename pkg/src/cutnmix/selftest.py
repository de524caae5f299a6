"""Quick built-in oracle and invariant checks behind ``cutnmix selftest``.

Each check compares the library against an independent loop-based reference
or a structural invariant, on small random instances. The full suites live
in the test tree; this is the smoke version that needs no pytest.
"""

from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np
import torch

from .augment import ImageBatch, apply_mix_plan, cutnmix_plan
from .datasets import decode_records, encode_records, record_size
from .losses import dml_loss, kd_kl, mmd_loss, soft_ce
from .trainer import OptimConfig, lr_at


def _softmax(z, tau):
    m = max(v / tau for v in z)
    e = [math.exp(v / tau - m) for v in z]
    return [v / sum(e) for v in e]


def _kd_loop(s, t, tau):
    total = 0.0
    for si, ti in zip(s, t):
        p, q = _softmax(ti, tau), _softmax(si, tau)
        total += sum(a * (math.log(max(a, 1e-12)) - math.log(max(b, 1e-12))) for a, b in zip(p, q))
    return tau * tau * total / len(s)


def _ce_loop(z, y):
    total = 0.0
    for zi, yi in zip(z, y):
        p = _softmax(zi, 1.0)
        total -= sum(a * math.log(max(b, 1e-12)) for a, b in zip(yi, p))
    return total / len(z)


def _mmd_loop(fa, fb):
    n, d = len(fa), len(fa[0])
    return sum((sum(fa[i][c] for i in range(n)) / n - sum(fb[i][c] for i in range(n)) / n) ** 2 for c in range(d))


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-12)


def check_losses(rng: np.random.Generator, trials: int = 40) -> str | None:
    t64 = lambda x: torch.tensor(x, dtype=torch.float64)  # noqa: E731
    for _ in range(trials):
        n, K, d = rng.integers(1, 9), rng.integers(2, 6), rng.integers(1, 8)
        tau = float(rng.uniform(0.5, 5))
        s, t = rng.normal(size=(n, K)) * 2, rng.normal(size=(n, K)) * 2
        y = rng.dirichlet(np.ones(K), size=n)
        fa, fb = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        pairs = [
            (kd_kl(t64(s), t64(t), tau).item(), _kd_loop(s.tolist(), t.tolist(), tau)),
            (dml_loss([t64(s), t64(t)], 0, tau).item(), _kd_loop(s.tolist(), t.tolist(), tau)),
            (soft_ce(t64(s), t64(y)).item(), _ce_loop(s.tolist(), y.tolist())),
            (mmd_loss([t64(fa), t64(fb)], 0).item(), _mmd_loop(fa.tolist(), fb.tolist())),
        ]
        for got, want in pairs:
            if _rel(got, want) > 1e-10:
                return f"loss mismatch {got!r} vs {want!r}"
    return None


def check_gradients(rng: np.random.Generator, trials: int = 10, h: float = 1e-6) -> str | None:
    for _ in range(trials):
        n, K = int(rng.integers(1, 5)), int(rng.integers(2, 5))
        s0, t = rng.normal(size=(n, K)), torch.tensor(rng.normal(size=(n, K)))
        f = lambda x: kd_kl(x, t, 3.0)  # noqa: E731
        s = torch.tensor(s0, requires_grad=True)
        (g,) = torch.autograd.grad(f(s), s)
        for idx in np.ndindex(n, K):
            xp, xm = s0.copy(), s0.copy()
            xp[idx] += h
            xm[idx] -= h
            fd = (f(torch.tensor(xp)).item() - f(torch.tensor(xm)).item()) / (2 * h)
            if abs(fd - g[idx].item()) > 1e-4 * max(1.0, abs(fd)):
                return f"gradient mismatch at {idx}: {g[idx].item()} vs {fd}"
    return None


def check_mixing(rng: np.random.Generator, trials: int = 100) -> str | None:
    W = H = 32
    for _ in range(trials):
        n, J = int(rng.integers(2, 6)), int(rng.integers(2, 4))
        pix = rng.random((n, 3, H, W)).astype(np.float32)
        batch = ImageBatch(pix, rng.integers(0, 5, n), 5)
        plan = cutnmix_plan(n, W, H, J, rng)
        outs = apply_mix_plan([batch] * J, plan)
        for j, out in enumerate(outs):
            for i in range(n):
                m = plan.mask(j, i).to_array(W, H).astype(bool)
                if abs(m.mean() - plan.lam) > 0.07:
                    return f"mask area {m.mean():.3f} far from lambda {plan.lam:.3f}"
                want = np.where(m[None], pix[plan.perm[i]], pix[i])
                if not np.array_equal(out.pixels[i], want):
                    return "pixel provenance violated"
            if not np.array_equal(out.soft_labels.probs, outs[0].soft_labels.probs):
                return "peers received different soft labels"
        probs = outs[0].soft_labels.probs
        if np.abs(probs.sum(1) - 1).max() > 1e-12 or ((probs > 0).sum(1) > 2).any():
            return "soft labels off the simplex or with support > 2"
    return None


def check_schedule() -> str | None:
    cfg = OptimConfig()
    got = [lr_at(cfg, e) for e in (0, 150, 210)]
    if not np.allclose(got, [0.05, 0.005, 5e-5], rtol=1e-12):
        return f"lr_at gave {got}"
    return None


def check_records(rng: np.random.Generator) -> str | None:
    if record_size(1) * 10_000 != 30_730_000 or record_size(2) * 50_000 != 153_700_000:
        return "record sizes do not match the CIFAR layouts"
    labels = rng.integers(0, 10, (3, 1), dtype=np.uint8)
    images = rng.integers(0, 256, (3, 3, 32, 32), dtype=np.uint8)
    raw = encode_records(labels, images)
    labels, images = decode_records(raw, 1, 3, "selftest")
    if encode_records(labels, images) != raw:
        return "decode/encode round-trip is not byte-identical"
    return None


def run_all(seed: int = 0, echo: Callable[[str], None] = print) -> bool:
    rng = np.random.default_rng(seed)
    checks = [
        ("loss oracles", lambda: check_losses(rng)),
        ("finite-difference gradients", lambda: check_gradients(rng)),
        ("mixing invariants", lambda: check_mixing(rng)),
        ("learning-rate schedule", check_schedule),
        ("CIFAR record codec", lambda: check_records(rng)),
    ]
    ok = True
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            err = fn()
        except Exception as exc:  # a crash is a failed check, not a crashed selftest
            err = f"{type(exc).__name__}: {exc}"
        ok &= err is None
        status = "PASS" if err is None else "FAIL"
        echo(f"{status} {name} ({time.perf_counter() - t0:.2f}s)" + (f": {err}" if err else ""))
    return ok

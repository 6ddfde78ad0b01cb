"""Fast invariant checks bundled with the package (``augpt selftest``)."""

from __future__ import annotations

import math

import numpy as np

from . import imageops
from .augment import AugmentConfig, build_view_set
from .distill import init_student, kl_loss, loss_and_grads
from .gate import filter_views
from .harness import harmonic_mean
from .imageops import Raster, apply_policy, horizontal_flip
from .scoring import ClassEmbeddings, Encoder, LogitVector
from .teacher import ce_loss_and_grad


def _fd_rel_error(f, arrays, grads, h=1e-6):
    worst = 0.0
    for i, g in enumerate(grads):
        num = np.zeros_like(arrays[i])
        for idx in np.ndindex(*arrays[i].shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            num[idx] = (f(plus) - f(minus)) / (2 * h)
        den = max(np.linalg.norm(g), np.linalg.norm(num), 1e-8)
        worst = max(worst, float(np.linalg.norm(g - num) / den))
    return worst


def _check_transforms(rng):
    for _ in range(10):
        img = Raster(rng.integers(0, 256, size=(12, 12, 3)))
        assert apply_policy(img, "Rotate", 0.0, 0) == img
        assert apply_policy(img, "Brightness", 1.0, 0) == img
        assert apply_policy(img, "Invert", 0, 0) != img or np.all(img.pixels == 127)
        inv = apply_policy(img, "Invert", 0, 0)
        assert apply_policy(inv, "Invert", 0, 0) == img
        ac = apply_policy(img, "AutoContrast", 0, 0)
        assert apply_policy(ac, "AutoContrast", 0, 0) == ac
        assert horizontal_flip(horizontal_flip(img)) == img


def _check_amplitude():
    spec = imageops.POLICIES["Rotate"]
    assert abs(imageops.convert_amplitude(spec, 15.0, "fixed") - 15.0) < 1e-12
    assert abs(imageops.convert_amplitude(spec, 30.0, "fixed") - 30.0) < 1e-12


def _check_gate():
    rows = np.zeros((6, 8))
    for j, k in enumerate([3, 3, 5, 3, 2, 3]):
        rows[j, k] = 1.0
    r = filter_views(None, list(rows))
    assert r.consensus == 3 and r.accepted_indices == [0, 1, 3, 5] and not r.raw_discarded


def _check_views(rng):
    img = Raster(rng.integers(0, 256, size=(16, 16, 3)))
    a = build_view_set(img, AugmentConfig(), "k", 1, 2)
    b = build_view_set(img, AugmentConfig(), "k", 1, 2)
    assert len(a) == 6 and a.members == b.members


def _check_gradients(rng):
    W, b, X = rng.standard_normal((3, 4)), rng.standard_normal(4) * 0.3, rng.standard_normal((5, 4))
    y = rng.integers(0, 3, size=5)
    _, dW, db = ce_loss_and_grad(W, b, X, y, 0.7)
    assert _fd_rel_error(lambda p: ce_loss_and_grad(p[0], p[1], X, y, 0.7)[0], [W, b], [dW, db]) < 1e-4
    s = init_student(Encoder("random-projection", 5, 0, (8, 8)), 4, 2, 1.0, 0)
    params = [p + rng.normal(0, 0.5, p.shape) for p in s.params()]
    E = ClassEmbeddings.from_rows(rng.standard_normal((3, 4))).matrix
    Xs, T = rng.standard_normal((3, 5)), rng.uniform(-1, 1, (3, 3))
    _, grads, _ = loss_and_grads(params, Xs, T, E, 1.0)
    assert _fd_rel_error(lambda p: loss_and_grads(p, Xs, T, E, 1.0)[0], params, grads) < 1e-4


def _check_metrics():
    assert abs(harmonic_mean(86.91, 80.17) - 83.41) <= 0.01
    kl = kl_loss([LogitVector([math.log(2), 0.0])], [LogitVector([0.0, math.log(2)])], 1.0)
    assert abs(kl - math.log(2) / 3) < 1e-12


CHECKS = (
    ("transform identities and involutions", _check_transforms),
    ("fixed-mode amplitude conversion", lambda rng: _check_amplitude()),
    ("consensus gate example", lambda rng: _check_gate()),
    ("view-set determinism", _check_views),
    ("analytic gradients vs finite differences", _check_gradients),
    ("harmonic mean and KL examples", lambda rng: _check_metrics()),
)


def run_selftest(stream) -> int:
    """Run every check, print one line each, return the number of failures."""
    failures = 0
    for name, check in CHECKS:
        try:
            check(np.random.default_rng(0))
            status = "PASS"
        except AssertionError:
            status = "FAIL"
            failures += 1
        print(f"{status}  {name}", file=stream)
    return failures

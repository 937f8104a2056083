"""Quick oracle checks runnable without the test suite (``dplora selftest``)."""

from __future__ import annotations

import math

import numpy as np

from .ledger import attention_block_count, lora_overhead, lora_matrix_count, reduction_ratio
from .lora import init_lora_model, lora_gradients
from .numerics import Rng, frobenius_norm, matmul
from .privacy import (
    PrivacyParams,
    clip_gradient,
    moments_alpha,
    moments_epsilon,
    sequential_epsilon,
)


def _matmul_vs_loops():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            s = 0.0
            for k in range(7):
                s += a[i, k] * b[k, j]
            ref[i, j] = s
    return bool(np.array_equal(matmul(a, b), ref)), "bitwise vs triple loop"


def _gradients_vs_finite_differences():
    model = init_lora_model(Rng(3).generator(0), layers=2, width=6, rank=2, num_classes=3)
    rng = np.random.default_rng(4)
    # move B off zero so every path is exercised
    model = model.with_adapters(
        [type(ad)(ad.a, 0.3 * rng.standard_normal(ad.b.shape)) for ad in model.adapters]
    )
    x, y = rng.standard_normal((6, 5)), rng.integers(0, 3, 5)
    grads = lora_gradients(model, x, y)
    from .lora import lora_loss_and_gradients

    worst, h = 0.0, 1e-5
    for li, ad in enumerate(model.adapters):
        for which, mat in ((0, ad.a), (1, ad.b)):
            for idx in np.ndindex(mat.shape):
                plus, minus = mat.copy(), mat.copy()
                plus[idx] += h
                minus[idx] -= h

                def loss_with(m):
                    ads = [a.copy() for a in model.adapters]
                    if which == 0:
                        ads[li].a = m
                    else:
                        ads[li].b = m
                    return lora_loss_and_gradients(model.with_adapters(ads), x, y)[0]

                fd = (loss_with(plus) - loss_with(minus)) / (2 * h)
                an = grads[li][which][idx]
                worst = max(worst, abs(fd - an) / max(1e-8, abs(fd) + abs(an)))
    return worst < 1e-6, f"max relative error {worst:.2e}"


def _clip_property():
    rng = np.random.default_rng(5)
    for _ in range(500):
        g = rng.standard_normal((4, 3)) * rng.uniform(0.01, 50)
        c = rng.uniform(0.1, 100)
        out = clip_gradient(g, c)
        if frobenius_norm(out) > c or (frobenius_norm(g) <= c and out is not g):
            return False, f"violated at C={c}"
    return True, "500 random pairs"


def _lambda_sweep():
    p = PrivacyParams(1e-5, 0.01, 1000, sigma=2.0)
    spent = moments_epsilon(p)
    brute = min(
        (1000 * moments_alpha(lam, 0.01, 2.0, 1.0) + math.log(1e5)) / lam for lam in range(1, p.lambda_max + 1)
    )
    seq = sequential_epsilon(2.0, 1e-5, 1000).epsilon
    ok = spent.epsilon == brute and spent.epsilon < seq
    return ok, f"eps={spent.epsilon:.6f} (sweep {brute:.6f}, sequential {seq:.1f})"


def _ledger_numbers():
    ok = (
        attention_block_count(4096, 3) == 50_331_648
        and 32 * attention_block_count(4096, 3) == 1_610_612_736
        and lora_matrix_count(4096, 256) == 2_097_152
        and lora_overhead(50, 5, 1, 256, 4096).total == 524_288_000
        and abs(reduction_ratio(2.43e9, 6.7e9) - 36.27) < 0.01
    )
    return ok, "overhead arithmetic"


CHECKS = (
    ("matmul", _matmul_vs_loops),
    ("lora gradients", _gradients_vs_finite_differences),
    ("clipping", _clip_property),
    ("moments accountant", _lambda_sweep),
    ("ledger", _ledger_numbers),
)


def run_all() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - report, don't abort the remaining checks
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results

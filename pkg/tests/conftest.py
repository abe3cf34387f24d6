"""Shared fixtures and finite-difference helpers."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("slow_box", deadline=None, max_examples=50)
settings.load_profile("slow_box")

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)
    yield


def finite_diff_check(loss_fn, model, num_params=50, eps=1e-6, rtol=1e-3, atol=1e-9, seed=0):
    """Compare autograd gradients with central differences on sampled parameters.

    loss_fn recomputes the scalar loss from scratch; the model must be in
    float64. Samples among parameter entries with non-negligible analytic
    gradient and asserts |fd - grad| <= atol + rtol * max(|fd|, |grad|).
    """
    params = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()

    eligible = []
    for name, p in params:
        if p.grad is None:
            continue
        g = p.grad.reshape(-1)
        idx = torch.nonzero(g.abs() > 1e-8).reshape(-1)
        for k in idx.tolist():
            eligible.append((name, p, k, float(g[k])))
    assert len(eligible) >= num_params, f"only {len(eligible)} parameters receive gradient"

    rng = np.random.default_rng(seed)
    picks = rng.choice(len(eligible), size=num_params, replace=False)
    worst = 0.0
    for pick in picks:
        name, p, k, grad = eligible[pick]
        flat = p.data.reshape(-1)
        orig = float(flat[k])
        h = eps * max(1.0, abs(orig))
        with torch.no_grad():
            flat[k] = orig + h
        lp = float(loss_fn().detach())
        with torch.no_grad():
            flat[k] = orig - h
        lm = float(loss_fn().detach())
        with torch.no_grad():
            flat[k] = orig
        fd = (lp - lm) / (2.0 * h)
        err = abs(fd - grad)
        tol = atol + rtol * max(abs(fd), abs(grad))
        assert err <= tol, f"{name}[{k}]: analytic {grad:.6e} vs fd {fd:.6e} (err {err:.2e} > tol {tol:.2e})"
        worst = max(worst, err / max(tol, 1e-30))
    return worst

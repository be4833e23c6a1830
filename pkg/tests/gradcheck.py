"""Central finite-difference check of the adapter gradient (float64)."""

import numpy as np

from zsal.scoring import score_rows
from zsal.tta import grad_omega, tta_losses

STEP = 1e-4


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def random_instance(seed, max_m=8, max_n=3, max_c=8):
    rng = np.random.default_rng(seed)
    m, n, c = rng.integers(1, max_m + 1), rng.integers(1, max_n + 1), rng.integers(2, max_c + 1)
    tau = float(rng.uniform(1.0, 20.0))
    patches = unit(rng.standard_normal((m, c)))
    tokens = unit(rng.standard_normal((2 * n, c)))
    omega = tokens + 0.3 * rng.standard_normal((2 * n, c))
    t_plus, t_minus = unit(tokens[:n].mean(axis=0)), unit(tokens[n:].mean(axis=0))
    s_pseudo = score_rows(patches, t_plus, t_minus, tau)
    delta = 0.1 * rng.standard_normal((m, c))
    return dict(patches=patches, tokens=tokens, omega=omega, s_pseudo=s_pseudo, delta=delta,
                t_plus=t_plus, t_minus=t_minus, tau=tau)


def numeric_grad(inst, step=STEP):
    omega = inst["omega"]
    out = np.zeros_like(omega)
    for idx in np.ndindex(*omega.shape):
        hi, lo = omega.copy(), omega.copy()
        hi[idx] += step
        lo[idx] -= step
        f = lambda w: tta_losses(**{**inst, "omega": w}).total  # noqa: E731
        out[idx] = (f(hi) - f(lo)) / (2 * step)
    return out


def relative_error(inst):
    """max |analytic - numeric| / max |numeric| over all omega entries."""
    analytic = grad_omega(**inst)
    numeric = numeric_grad(inst)
    scale = max(float(np.abs(numeric).max()), 1e-12)
    return float(np.abs(analytic - numeric).max()) / scale

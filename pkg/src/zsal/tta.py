"""Per-image test-time adaptation of patch tokens.

The adapter attends from patch tokens P (queries) over a trainable key
matrix omega (2N x C) to the fixed prompt tokens T (values)::

    P' = softmax(P omega^T) T + P

omega starts as a copy of T and is trained for a few AdamW steps on two
self-supervised losses: telling adapted tokens apart from their
Gaussian-corrupted copies (``loss_d``) and agreeing with the unadapted
scores used as soft pseudo-labels (``loss_p``). Gradients are written out by
hand; everything here works in whichever float dtype it is given, so the
gradient check can run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .rng import SplitMix64
from .scoring import DEFAULT_TAU, score_rows
from .tensor_core import NonFiniteError, ShapeError, l2_normalize_rows, softmax_rows

LOG_EPS = 1e-7


@dataclass(frozen=True)
class NoiseSpec:
    mu: float = 0.0
    sigma: float | None = None  # None: relative_scale * RMS of the adapted tokens
    relative_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.sigma is not None and self.sigma < 0:
            raise ValueError("noise sigma must be non-negative")
        if self.relative_scale < 0:
            raise ValueError("relative noise scale must be non-negative")


@dataclass(frozen=True)
class TtaConfig:
    epochs: int = 5
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class AdapterState:
    omega: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step_count: int = 0

    @classmethod
    def reset(cls, tokens: np.ndarray) -> "AdapterState":
        omega = np.array(tokens, copy=True)
        return cls(omega, np.zeros_like(omega), np.zeros_like(omega), 0)


class TtaNumericError(NonFiniteError):
    pass


def adapt_tokens(patches: np.ndarray, omega: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    if omega.shape != tokens.shape or patches.shape[1] != omega.shape[1]:
        raise ShapeError(
            f"adapter shape mismatch: P {patches.shape}, omega {omega.shape}, T {tokens.shape}"
        )
    return softmax_rows(patches @ omega.T) @ tokens + patches


def noise_sigma(adapted: np.ndarray, noise: NoiseSpec) -> float:
    if noise.sigma is not None:
        return float(noise.sigma)
    rms = float(np.sqrt(np.mean(np.square(adapted, dtype=np.float64))))
    return noise.relative_scale * rms


def sample_noise(adapted: np.ndarray, noise: NoiseSpec, rng: SplitMix64 | None = None) -> np.ndarray:
    """Gaussian offsets shaped like ``adapted`` (zeros when sigma is 0)."""
    sigma = noise_sigma(adapted, noise)
    if sigma == 0.0 and noise.mu == 0.0:
        return np.zeros_like(adapted)
    rng = rng if rng is not None else SplitMix64(noise.seed)
    draws = rng.normal(adapted.size, noise.mu, sigma)
    return draws.reshape(adapted.shape).astype(adapted.dtype)


def corrupt_tokens(adapted: np.ndarray, noise: NoiseSpec, rng: SplitMix64 | None = None) -> np.ndarray:
    if noise_sigma(adapted, noise) == 0.0 and noise.mu == 0.0:
        return adapted.copy()
    return adapted + sample_noise(adapted, noise, rng)


def _clamped(s: np.ndarray) -> np.ndarray:
    return np.clip(s, LOG_EPS, 1.0 - LOG_EPS)


def loss_d(s_clean: np.ndarray, s_noisy: np.ndarray) -> float:
    """Cross-entropy for "clean is normal, corrupted is anomalous" over 2M tokens."""
    m = len(s_clean)
    total = np.log(1.0 - _clamped(s_clean)).sum() + np.log(_clamped(s_noisy)).sum()
    return float(-total / (2 * m))


def loss_p(s_pseudo: np.ndarray, s_adapted: np.ndarray) -> float:
    """Soft cross-entropy against the fixed pseudo-labels."""
    m = len(s_pseudo)
    return float(-(s_pseudo * np.log(_clamped(s_adapted))).sum() / m)


@dataclass(frozen=True)
class LossTerms:
    l_d: float
    l_p: float

    @property
    def total(self) -> float:
        return self.l_d + self.l_p


def _score_and_back(x, t_plus, t_minus, tau):
    """Scores of rows ``x`` after normalization, plus what backprop needs."""
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    u = l2_normalize_rows(x)
    s = score_rows(u, t_plus, t_minus, tau)
    return s, u, norms


def _row_grad(ds, s, u, norms, direction, tau):
    """dL/dx for rows x given dL/ds, through the logistic and normalization."""
    live = (s > LOG_EPS) & (s < 1.0 - LOG_EPS)
    dz = np.where(live, ds * s * (1.0 - s), 0.0)
    du = (tau * dz)[:, None] * direction[None, :]
    return (du - u * (u * du).sum(axis=1, keepdims=True)) / norms


def loss_and_grad(
    patches: np.ndarray,
    tokens: np.ndarray,
    omega: np.ndarray,
    s_pseudo: np.ndarray,
    delta: np.ndarray,
    t_plus: np.ndarray,
    t_minus: np.ndarray,
    tau: float,
    need_grad: bool = True,
):
    """Losses at ``omega`` and d(L_d + L_p)/d omega, with ``delta`` held fixed.

    Returns ``(LossTerms, grad or None, adapted_tokens)``.
    """
    m = patches.shape[0]
    attn = softmax_rows(patches @ omega.T)
    adapted = attn @ tokens + patches
    s_c, u_c, n_c = _score_and_back(adapted, t_plus, t_minus, tau)
    s_n, u_n, n_n = _score_and_back(adapted + delta, t_plus, t_minus, tau)
    terms = LossTerms(loss_d(s_c, s_n), loss_p(s_pseudo, s_c))
    if not need_grad:
        return terms, None, adapted

    sc, sn = _clamped(s_c), _clamped(s_n)
    ds_clean = 1.0 / (2 * m * (1.0 - sc)) - s_pseudo / (m * sc)
    ds_noisy = -1.0 / (2 * m * sn)
    direction = t_minus - t_plus
    d_adapted = _row_grad(ds_clean, s_c, u_c, n_c, direction, tau) + _row_grad(
        ds_noisy, s_n, u_n, n_n, direction, tau
    )
    d_attn = d_adapted @ tokens.T
    d_logits = attn * (d_attn - (d_attn * attn).sum(axis=1, keepdims=True))
    grad = (d_logits.T @ patches).astype(omega.dtype)
    return terms, grad, adapted


def grad_omega(patches, tokens, omega, s_pseudo, delta, t_plus, t_minus, tau) -> np.ndarray:
    return loss_and_grad(patches, tokens, omega, s_pseudo, delta, t_plus, t_minus, tau)[1]


def tta_losses(patches, tokens, omega, s_pseudo, delta, t_plus, t_minus, tau) -> LossTerms:
    return loss_and_grad(patches, tokens, omega, s_pseudo, delta, t_plus, t_minus, tau, False)[0]


def adamw_step(state: AdapterState, grad: np.ndarray, config: TtaConfig) -> AdapterState:
    """Decoupled weight decay, then a bias-corrected Adam update."""
    if grad.shape != state.omega.shape:
        raise ShapeError(f"gradient {grad.shape} does not match omega {state.omega.shape}")
    b1, b2 = config.betas
    lr = config.learning_rate
    step = state.step_count + 1
    dtype = state.omega.dtype
    omega = state.omega * dtype.type(1.0 - lr * config.weight_decay)
    m = (b1 * state.adam_m + (1.0 - b1) * grad).astype(dtype)
    v = (b2 * state.adam_v + (1.0 - b2) * grad * grad).astype(dtype)
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    omega = (omega - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)).astype(dtype)
    if not np.all(np.isfinite(omega)):
        raise TtaNumericError(f"omega became non-finite at step {step}")
    return AdapterState(omega, m, v, step)


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    l_d: float
    l_p: float

    @property
    def total(self) -> float:
        return self.l_d + self.l_p


@dataclass(frozen=True)
class TtaResult:
    adapted: np.ndarray  # raw adapted tokens P' at the final omega
    trace: list[TraceRow]
    state: AdapterState
    # total loss at omega = T and at the final omega, both on the first
    # epoch's noise draw so the comparison is not swamped by resampling
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


def run_tta(patches: np.ndarray, pair, config: TtaConfig = TtaConfig()) -> TtaResult:
    """Adapt one image's patch tokens.

    ``trace[k]`` holds the losses after ``k`` optimizer steps, so the trace
    has ``epochs + 1`` rows; each row draws fresh noise from one generator
    seeded with ``config.noise.seed``. ``initial_loss``/``final_loss``
    reuse the first draw for both ends.
    """
    tokens = pair.tokens.astype(patches.dtype)
    t_plus = pair.t_plus.astype(patches.dtype)
    t_minus = pair.t_minus.astype(patches.dtype)
    state = AdapterState.reset(tokens)
    s_pseudo = score_rows(patches, t_plus, t_minus, config.tau)
    rng = SplitMix64(config.noise.seed)
    trace = []
    adapted = None
    first_delta = None
    for epoch in range(config.epochs + 1):
        adapted = adapt_tokens(patches, state.omega, tokens)
        delta = sample_noise(adapted, config.noise, rng)
        if first_delta is None:
            first_delta = delta
        terms, grad, adapted = loss_and_grad(
            patches, tokens, state.omega, s_pseudo, delta, t_plus, t_minus, config.tau,
            need_grad=epoch < config.epochs,
        )
        if not np.isfinite(terms.total):
            raise TtaNumericError(f"non-finite TTA loss at epoch {epoch}: {terms}")
        trace.append(TraceRow(epoch, terms.l_d, terms.l_p))
        if epoch < config.epochs:
            state = adamw_step(state, grad, config)
    final, _, _ = loss_and_grad(
        patches, tokens, state.omega, s_pseudo, first_delta, t_plus, t_minus, config.tau,
        need_grad=False,
    )
    return TtaResult(adapted, trace, state, trace[0].total, final.total)


def with_seed(config: TtaConfig, seed: int) -> TtaConfig:
    return replace(config, noise=replace(config.noise, seed=seed))

"""DP-SGD training and Renyi-DP accounting for the subsampled Gaussian mechanism.

The trainer clips each per-sample gradient to L2 norm C, sums the clipped
gradients, adds N(0, sigma^2 C^2 I) noise, and normalizes by the expected
batch size of Poisson subsampling. The accountant composes the per-step RDP
of the subsampled Gaussian mechanism over T steps and converts to
(epsilon, delta)-DP via epsilon = min_alpha [RDP(alpha) + log(1/delta)/(alpha-1)].
"""

from __future__ import annotations

import dataclasses
import functools
import math
import warnings

import numpy as np
from scipy import special

from . import models
from .models import MlpModel, ModelSpec, TrainConfig, TrainingDiverged

# Integer-and-fractional order grid; 0.25 spacing keeps the conversion minimum tight.
DEFAULT_ORDERS = tuple(np.arange(1.25, 64.0 + 1e-9, 0.25).tolist())

SIGMA_SEARCH_RANGE = (1e-2, 1e3)


class NoiseCalibrationError(RuntimeError):
    """Target epsilon unreachable within the sigma search range."""


@dataclasses.dataclass(frozen=True)
class PrivacySpec:
    """DP-SGD mechanism parameters plus the (epsilon, delta) target."""

    clip_norm: float
    noise_multiplier: float
    sampling_rate: float
    steps: int
    delta: float = 1e-5
    epsilon_target: float | None = None

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be non-negative")
        if not 0.0 < self.sampling_rate <= 1.0:
            raise ValueError("sampling_rate must be in (0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must be in (0, 1)")
        if self.epsilon_target is not None and self.epsilon_target <= 0:
            raise ValueError("epsilon_target must be positive")


@dataclasses.dataclass(frozen=True)
class AccountingReport:
    epsilon: float
    delta: float
    rdp_orders_evaluated: tuple[float, ...]
    chosen_order: float
    unstable_orders: tuple[float, ...] = ()
    steps: int = 0
    noise_multiplier: float = 0.0
    sampling_rate: float = 1.0


# ---------------------------------------------------------------------------
# RDP of the Poisson-subsampled Gaussian mechanism (log-space series)
# ---------------------------------------------------------------------------

def _signed_logsumexp(log_terms: np.ndarray, signs: np.ndarray) -> float:
    """log of a signed sum given per-term logs of absolute values."""
    pos = log_terms[signs > 0]
    neg = log_terms[signs < 0]
    log_pos = special.logsumexp(pos) if pos.size else -math.inf
    log_neg = special.logsumexp(neg) if neg.size else -math.inf
    if log_neg == -math.inf:
        return float(log_pos)
    if log_neg > log_pos:
        raise ArithmeticError("signed series summed to a negative value")
    if log_neg == log_pos:
        return -math.inf
    return float(log_pos + math.log1p(-math.exp(log_neg - log_pos)))


def _log_erfc(x: np.ndarray) -> np.ndarray:
    return math.log(2.0) + special.log_ndtr(-x * math.sqrt(2.0))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    i = np.arange(alpha + 1, dtype=np.float64)
    log_coef = (special.gammaln(alpha + 1) - special.gammaln(i + 1)
                - special.gammaln(alpha - i + 1))
    log_terms = (log_coef + i * math.log(q) + (alpha - i) * math.log1p(-q)
                 + (i * i - i) / (2.0 * sigma * sigma))
    return float(special.logsumexp(log_terms))


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    # Split the integral at z0 and expand both halves as binomial series; the
    # series converges once i clears alpha and the erfc tails take over.
    z0 = sigma * sigma * math.log(1.0 / q - 1.0) + 0.5
    log_q, log_1q = math.log(q), math.log1p(-q)
    sqrt2_sigma = math.sqrt(2.0) * sigma
    n_terms = int(alpha) + 64
    for _ in range(8):
        i = np.arange(n_terms, dtype=np.float64)
        coef = special.binom(alpha, i)
        with np.errstate(divide="ignore"):
            log_coef = np.log(np.abs(coef))
        j = alpha - i
        log_s0 = (log_coef + i * log_q + j * log_1q
                  + (i * i - i) / (2.0 * sigma * sigma)
                  + math.log(0.5) + _log_erfc((i - z0) / sqrt2_sigma))
        log_s1 = (log_coef + j * log_q + i * log_1q
                  + (j * j - j) / (2.0 * sigma * sigma)
                  + math.log(0.5) + _log_erfc((z0 - j) / sqrt2_sigma))
        if max(log_s0[-1], log_s1[-1]) < -30:
            signs = np.sign(coef)
            return _signed_logsumexp(np.concatenate([log_s0, log_s1]),
                                     np.concatenate([signs, signs]))
        n_terms *= 2
    raise ArithmeticError("subsampled-RDP series did not converge")


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """Single-step RDP at one order. Sensitivity 1 (gradients pre-scaled by C)."""
    if sigma <= 0:
        return math.inf
    if q == 0.0:
        return 0.0
    if q == 1.0:
        return alpha / (2.0 * sigma * sigma)
    if alpha <= 1.0:
        raise ValueError("RDP order must exceed 1")
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return log_a / (alpha - 1.0)


@functools.lru_cache(maxsize=65536)
def account_epsilon(spec: PrivacySpec, orders=DEFAULT_ORDERS) -> AccountingReport:
    """Theoretical epsilon for the full DP-SGD run described by ``spec``.

    sigma = 0 yields the epsilon = inf sentinel. Orders whose series
    evaluation fails numerically are reported, not silently dropped.
    Memoized: shadow-ensemble training re-accounts the same spec n times.
    """
    orders = tuple(float(a) for a in orders)
    if spec.noise_multiplier == 0.0:
        return AccountingReport(math.inf, spec.delta, orders, math.nan, (),
                                spec.steps, 0.0, spec.sampling_rate)
    log_inv_delta = math.log(1.0 / spec.delta)
    best_eps, best_order = math.inf, math.nan
    unstable = []
    for alpha in orders:
        try:
            rdp = spec.steps * rdp_subsampled_gaussian(
                spec.sampling_rate, spec.noise_multiplier, alpha)
        except (ArithmeticError, ValueError, OverflowError):
            unstable.append(alpha)
            continue
        if math.isnan(rdp):
            unstable.append(alpha)
            continue
        eps = rdp + log_inv_delta / (alpha - 1.0)
        if eps < best_eps:
            best_eps, best_order = eps, alpha
    return AccountingReport(best_eps, spec.delta, orders, best_order,
                            tuple(unstable), spec.steps,
                            spec.noise_multiplier, spec.sampling_rate)


@functools.lru_cache(maxsize=4096)
def calibrate_noise(epsilon_target: float, delta: float, sampling_rate: float,
                    steps: int, clip_norm: float = 1.0,
                    tolerance: float = 0.01) -> float:
    """Binary-search the noise multiplier whose accounted epsilon hits the target.

    Raises NoiseCalibrationError when no sigma in [1e-2, 1e3] reaches the
    target within +/- tolerance (relative). Results are memoized: sweeps
    revisit the same epsilon grid many times.
    """
    if epsilon_target <= 0:
        raise ValueError("epsilon_target must be positive")

    def eps_at(sigma: float) -> float:
        return account_epsilon(PrivacySpec(clip_norm, sigma, sampling_rate,
                                           steps, delta)).epsilon

    lo, hi = SIGMA_SEARCH_RANGE
    eps_lo, eps_hi = eps_at(lo), eps_at(hi)  # eps decreases in sigma
    if epsilon_target > eps_lo or epsilon_target < eps_hi:
        raise NoiseCalibrationError(
            f"epsilon={epsilon_target} unreachable for sigma in {SIGMA_SEARCH_RANGE}: "
            f"achievable range is [{eps_hi:.4g}, {eps_lo:.4g}]")
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if eps_at(mid) > epsilon_target:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1.0 + 1e-12:
            break
    sigma = hi
    achieved = eps_at(sigma)
    if abs(achieved - epsilon_target) > tolerance * epsilon_target:
        raise NoiseCalibrationError(
            f"calibration landed at epsilon={achieved:.6g} for target "
            f"{epsilon_target} (outside +/-{tolerance:.0%})")
    return sigma


# ---------------------------------------------------------------------------
# The mechanism
# ---------------------------------------------------------------------------

def clip_per_sample(gradient: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale a gradient vector to L2 norm at most ``clip_norm``."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    gradient = np.asarray(gradient, dtype=np.float64)
    if not np.all(np.isfinite(gradient)):
        raise ValueError("non-finite gradient")
    norm = np.linalg.norm(gradient)
    if norm <= clip_norm:
        return gradient
    return gradient * (clip_norm / norm)


def _clip_rows(grads: np.ndarray, clip_norm: float) -> np.ndarray:
    if not np.all(np.isfinite(grads)):
        raise ValueError("non-finite gradient batch")
    norms = np.linalg.norm(grads, axis=1, keepdims=True)
    scale = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
    return grads * scale


def dp_sgd_step(model: MlpModel, batch_x: np.ndarray, batch_y: np.ndarray,
                spec: PrivacySpec, learning_rate: float, rng: np.random.Generator,
                expected_batch_size: float) -> MlpModel:
    """One noisy SGD step on a Poisson-sampled batch; returns the updated model.

    An empty batch is legal and produces a noise-only update. The normalizer
    is the expected batch size q*N, not the realized one.
    """
    if expected_batch_size <= 0:
        raise ValueError("expected_batch_size must be positive")
    flat = models.flatten_params(model)
    if len(batch_y) > 0:
        _, per_sample = models.loss_and_per_sample_grads(model, batch_x, batch_y)
        summed = _clip_rows(per_sample, spec.clip_norm).sum(axis=0)
    else:
        summed = np.zeros_like(flat)
    if spec.noise_multiplier > 0:
        summed = summed + rng.normal(
            scale=spec.noise_multiplier * spec.clip_norm, size=flat.shape)
    flat = flat - learning_rate * summed / expected_batch_size
    return models.unflatten_params(model, flat)


def derive_step_count(epochs: int, sampling_rate: float) -> int:
    """Steps for `epochs` expected passes under Poisson sampling at rate q."""
    return max(1, math.ceil(epochs / sampling_rate))


def train_dp(features: np.ndarray, labels: np.ndarray, model_spec: ModelSpec,
             train_config: TrainConfig, privacy_spec: PrivacySpec,
             num_classes: int | None = None) -> tuple[MlpModel, AccountingReport]:
    """DP-SGD training; the returned report carries the run's theoretical epsilon.

    The step count is derived as ceil(epochs / sampling_rate) and recorded in
    the report (overriding privacy_spec.steps if they differ). Early stopping
    is not applied: the accountant assumes the full step count runs.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n = features.shape[0]
    if privacy_spec.delta > 1.0 / n:
        warnings.warn(f"delta={privacy_spec.delta:g} exceeds 1/N={1.0 / n:g}; "
                      "the guarantee is weak at this scale", stacklevel=2)
    if num_classes is None:
        num_classes = max(int(labels.max()) + 1, 2)
    steps = derive_step_count(train_config.epochs, privacy_spec.sampling_rate)
    spec = dataclasses.replace(privacy_spec, steps=steps)
    model = models.init_model(features.shape[1], num_classes, model_spec,
                              train_config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([train_config.seed, 2]))
    expected_batch = privacy_spec.sampling_rate * n
    for step in range(steps):
        take = rng.random(n) < privacy_spec.sampling_rate
        try:
            model = dp_sgd_step(model, features[take], labels[take], spec,
                                train_config.learning_rate, rng, expected_batch)
        except ValueError as exc:
            if "non-finite" in str(exc):
                raise TrainingDiverged(f"DP-SGD diverged at step {step}: {exc}") from exc
            raise
        if not np.all(np.isfinite(models.flatten_params(model))):
            raise TrainingDiverged(f"DP-SGD diverged at step {step}")
    return model, account_epsilon(spec)

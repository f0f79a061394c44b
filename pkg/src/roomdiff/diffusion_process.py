"""Forward noising chain, closed-form marginals, posteriors, and the ELBO.

The forward process is q(z_t | z_{t-1}) = N(sqrt(alpha_t) z_{t-1}, beta_t I)
with a linear beta schedule.  Timesteps are 1-based: t runs over 1..T and
alpha_bar(0) == 1 denotes the clean data.  All distributions here are
isotropic Gaussians, so they are carried around as (mean, scalar var) pairs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .latent_codec import LatentGrid
from .tensor_core import Rng


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray  # (T,), beta[i] is the variance added at step t = i+1
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def abar(self, t: int) -> float:
        """Cumulative product alpha_bar at 1-based t; abar(0) == 1."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def at(self, t: int) -> float:
        return float(self.alpha[t - 1])

    def bt(self, t: int) -> float:
        return float(self.beta[t - 1])


@dataclass
class GaussianParams:
    """Isotropic Gaussian: mean tensor plus a single scalar variance."""

    mean: np.ndarray
    var: float

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        if self.var < 0:
            raise DomainError(f"GaussianParams: negative variance {self.var}")


@dataclass
class ElboReport:
    """Per-term ELBO decomposition.

    kl_terms has length T: entries 0..T-2 are the posterior KLs at chain
    steps t=2..T, and the last entry is the prior KL(q(z_T|z0) || N(0,I)).
    total = reconstruction_term - sum(kl_terms).
    """

    reconstruction_term: float
    kl_terms: list
    total: float


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"schedule needs T >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"schedule needs 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _check_t(t: int, schedule: NoiseSchedule, low: int = 1) -> None:
    if not (low <= t <= schedule.T):
        raise IndexError(f"timestep {t} outside [{low}, {schedule.T}]")


def _data(z):
    return z.data if isinstance(z, LatentGrid) else np.asarray(z, dtype=np.float64)


def _like(z, arr, t: int):
    return LatentGrid(arr, t=t) if isinstance(z, LatentGrid) else arr


def forward_step(z_prev, t: int, schedule: NoiseSchedule, rng: Rng):
    """One chain step: sqrt(alpha_t) z_{t-1} + sqrt(beta_t) eps."""
    _check_t(t, schedule)
    x = _data(z_prev)
    eps = rng.normal(x.shape)
    out = np.sqrt(schedule.at(t)) * x + np.sqrt(schedule.bt(t)) * eps
    return _like(z_prev, out, t)


def forward_marginal(z0, t: int, schedule: NoiseSchedule, rng: Rng):
    """Closed-form jump to step t; returns (z_t, eps) with the exact eps used."""
    _check_t(t, schedule)
    x = _data(z0)
    eps = rng.normal(x.shape)
    abar = schedule.abar(t)
    out = np.sqrt(abar) * x + np.sqrt(1.0 - abar) * eps
    return _like(z0, out, t), eps


def posterior_params(z0, zt, t: int, schedule: NoiseSchedule) -> GaussianParams:
    """q(z_{t-1} | z_t, z_0) for t >= 2 (the tractable DDPM posterior)."""
    _check_t(t, schedule, low=2)
    x0, xt = _data(z0), _data(zt)
    abar_t, abar_prev = schedule.abar(t), schedule.abar(t - 1)
    beta_t, alpha_t = schedule.bt(t), schedule.at(t)
    denom = 1.0 - abar_t
    mean = (np.sqrt(abar_prev) * beta_t * x0 + np.sqrt(alpha_t) * (1.0 - abar_prev) * xt) / denom
    var = beta_t * (1.0 - abar_prev) / denom
    return GaussianParams(mean, var)


def reverse_params(zt, t: int, eps_hat: np.ndarray, schedule: NoiseSchedule) -> GaussianParams:
    """p_theta(z_{t-1} | z_t) from a noise prediction.

    Mean is the epsilon reparameterization (z_t - beta_t/sqrt(1-abar_t) *
    eps_hat)/sqrt(alpha_t); variance is the posterior variance for t >= 2 and
    beta_1 for the final decoding step t=1.
    """
    _check_t(t, schedule)
    xt = _data(zt)
    abar_t = schedule.abar(t)
    beta_t, alpha_t = schedule.bt(t), schedule.at(t)
    mean = (xt - beta_t / np.sqrt(1.0 - abar_t) * np.asarray(eps_hat)) / np.sqrt(alpha_t)
    if t >= 2:
        var = beta_t * (1.0 - schedule.abar(t - 1)) / (1.0 - abar_t)
    else:
        var = beta_t
    return GaussianParams(mean, var)


def kl_gaussian(p: GaussianParams, q: GaussianParams) -> float:
    """KL(p || q) for isotropic Gaussians over tensors of equal shape."""
    if p.var <= 0 or q.var <= 0:
        raise DomainError("kl_gaussian: variances must be positive")
    if p.mean.shape != q.mean.shape:
        raise DomainError(f"kl_gaussian: shape mismatch {p.mean.shape} vs {q.mean.shape}")
    d = p.mean.size
    ratio = p.var / q.var
    sq = float(np.sum((p.mean - q.mean) ** 2))
    return 0.5 * (d * (ratio - 1.0 - np.log(ratio)) + sq / q.var)


def gaussian_logpdf(x: np.ndarray, g: GaussianParams) -> float:
    """log N(x; g.mean, g.var * I), summed over all dimensions."""
    if g.var <= 0:
        raise DomainError("gaussian_logpdf: variance must be positive")
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    sq = float(np.sum((x - g.mean) ** 2))
    return -0.5 * (d * np.log(2.0 * np.pi * g.var) + sq / g.var)


def elbo(z0, denoiser, schedule: NoiseSchedule, rng: Rng, mc_samples: int = 1) -> ElboReport:
    """Stratified Monte-Carlo estimate of the per-term ELBO decomposition.

    ``denoiser(z_t_array, t) -> eps_hat array`` is any noise predictor valid
    on z0's shape.  One z_t is drawn per timestep per Monte-Carlo repeat; the
    prior KL is computed in closed form.
    """
    if mc_samples < 1:
        raise ConfigError(f"elbo: mc_samples must be >= 1, got {mc_samples}")
    x0 = _data(z0)
    T = schedule.T
    recon_acc = 0.0
    kl_acc = np.zeros(max(T - 1, 0))
    for m in range(mc_samples):
        sub = rng.spawn("elbo", m)
        z1, _ = forward_marginal(x0, 1, schedule, sub.spawn("t", 1))
        p1 = reverse_params(z1, 1, denoiser(_data(z1), 1), schedule)
        recon_acc += gaussian_logpdf(x0, p1)
        for t in range(2, T + 1):
            zt, _ = forward_marginal(x0, t, schedule, sub.spawn("t", t))
            q_post = posterior_params(x0, zt, t, schedule)
            p_rev = reverse_params(zt, t, denoiser(_data(zt), t), schedule)
            kl_acc[t - 2] += kl_gaussian(q_post, p_rev)
    recon = recon_acc / mc_samples
    kl_terms = list(kl_acc / mc_samples)
    # closed-form prior term: KL(q(z_T | z0) || N(0, I))
    abar_T = schedule.abar(T)
    d = x0.size
    v = 1.0 - abar_T
    prior = 0.5 * (d * (v - 1.0 - np.log(v)) + abar_T * float(np.sum(x0**2)))
    kl_terms.append(prior)
    total = recon - float(np.sum(kl_terms))
    return ElboReport(reconstruction_term=recon, kl_terms=kl_terms, total=total)

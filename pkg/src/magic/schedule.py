"""Noise schedules, forward noising, and the DDIM reverse step.

The schedule keeps float64 coefficients; the sampler casts to the latent
dtype at the point of use. alpha_bar(0) == 1 by convention, so stepping to
the t=0 boundary inverts the forward noising exactly when eta == 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .engine.tensor import Tensor


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass(frozen=True)
class NoiseSchedule:
    t_train: int
    betas: np.ndarray  # beta_s for s in [1, t_train]
    alphas_cum: np.ndarray  # cumulative products, index 0 <-> t=1
    sample_steps: tuple  # descending timesteps used at inference

    @property
    def t_sample(self):
        return len(self.sample_steps)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal coefficient; alpha_bar(0) == 1."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.t_train:
            raise ValueError(f"timestep {t} outside [0, {self.t_train}]")
        return float(self.alphas_cum[t - 1])

    def step_pairs(self):
        """(t, t_prev) pairs walked by the sampler, ending at t_prev = 0."""
        steps = list(self.sample_steps)
        return list(zip(steps, steps[1:] + [0]))


def make_schedule(kind, t_train, beta_start, beta_end, t_sample) -> NoiseSchedule:
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"invalid beta range [{beta_start}, {beta_end}]")
    if not (1 <= t_sample <= t_train):
        raise ValueError(f"t_sample {t_sample} must be in [1, t_train={t_train}]")
    betas = np.linspace(beta_start, beta_end, t_train, dtype=np.float64)
    alphas_cum = np.cumprod(1.0 - betas)
    steps = np.unique(np.round(np.linspace(t_train, 1, t_sample)).astype(int))[::-1]
    if len(steps) != t_sample:
        raise ValueError("t_sample too large for distinct timesteps")
    return NoiseSchedule(t_train, betas, alphas_cum, tuple(int(s) for s in steps))


def default_schedule(t_sample=50):
    return make_schedule("linear", 1000, 1e-4, 0.02, t_sample)


def forward_noise(x0, t, eps, sched: NoiseSchedule):
    """sqrt(a_t) x0 + sqrt(1 - a_t) eps."""
    x0, eps = _data(x0), _data(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    if not 1 <= t <= sched.t_train:
        raise ValueError(f"timestep {t} outside [1, {sched.t_train}]")
    a = sched.alpha_bar(t)
    return (math.sqrt(a) * x0 + math.sqrt(1 - a) * eps).astype(x0.dtype)


def forward_noise_batch(x0, t, eps, sched: NoiseSchedule):
    """forward_noise with a per-sample timestep vector t[B]."""
    x0, eps = _data(x0), _data(eps)
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > sched.t_train):
        raise ValueError("timestep outside [1, t_train]")
    a = sched.alphas_cum[t - 1].reshape(-1, 1, 1, 1)
    return (np.sqrt(a) * x0 + np.sqrt(1 - a) * eps).astype(x0.dtype)


def sigma_t(sched: NoiseSchedule, t, t_prev, eta):
    """DDIM stochasticity coefficient; 0 when eta == 0."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    a_t = sched.alpha_bar(t)
    a_prev = sched.alpha_bar(t_prev)
    if a_prev < a_t:
        raise ValueError(f"t_prev={t_prev} is not a predecessor of t={t}")
    if eta == 0.0 or a_prev == a_t:
        return 0.0
    return eta * math.sqrt((1 - a_prev) / (1 - a_t)) * math.sqrt(1 - a_t / a_prev)


def ddim_step(z_t, eps_pred, t, t_prev, eta, rng, sched: NoiseSchedule):
    """One DDIM reverse step from t to t_prev.

    Draws fresh noise from rng only when eta != 0, so deterministic and
    stochastic paths consume randomness consistently.
    """
    z_t, eps_pred = _data(z_t), _data(eps_pred)
    if z_t.shape != eps_pred.shape:
        raise ValueError(f"eps shape {eps_pred.shape} != latent shape {z_t.shape}")
    a_t = sched.alpha_bar(t)
    a_prev = sched.alpha_bar(t_prev)
    sig = sigma_t(sched, t, t_prev, eta)
    resid = 1 - a_prev - sig * sig
    if resid < -1e-12:
        raise ValueError(f"schedule misconfiguration: 1 - a_prev - sigma^2 = {resid}")
    resid = max(resid, 0.0)
    x0_pred = (z_t - math.sqrt(1 - a_t) * eps_pred) / math.sqrt(a_t)
    out = math.sqrt(a_prev) * x0_pred + math.sqrt(resid) * eps_pred
    if eta != 0.0:
        noise = rng.standard_normal(size=z_t.shape)
        out = out + sig * noise
    return out.astype(z_t.dtype)


def renoise(z_prev, t, t_prev, rng, sched: NoiseSchedule):
    """Re-noise a t_prev latent back to marginal level t (time travel)."""
    z_prev = _data(z_prev)
    a_t = sched.alpha_bar(t)
    a_prev = sched.alpha_bar(t_prev)
    if a_prev < a_t:
        raise ValueError(f"alpha ordering violated for t={t}, t_prev={t_prev}")
    ratio = a_t / a_prev
    out = math.sqrt(ratio) * z_prev
    if ratio < 1.0:
        out = out + math.sqrt(1 - ratio) * rng.standard_normal(size=z_prev.shape)
    return out.astype(z_prev.dtype)

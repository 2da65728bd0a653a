"""Continuous prior over semantic vectors: variance-preserving forward
perturbation, the noise-prediction training loss, and ancestral reverse
sampling with modality conditioning.

The forward process is applied through its closed-form marginal
``r_t = sqrt(alpha_bar(t)) * r0 + sqrt(1 - alpha_bar(t)) * eps``; the
reverse process runs discrete ancestral updates on a uniform time grid
using the noise-prediction parameterization. Sampled vectors are
re-projected to unit norm before use as conditions, mirroring the
normalization applied before the forward process.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .bridge import Modality, SemanticVector, unit_normalize
from .schedules import NoiseSchedule


def forward_perturb(r0: SemanticVector, t: float, eps: np.ndarray,
                    schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal perturbation of a unit-norm vector."""
    a = schedule.alpha_bar(t)
    return np.sqrt(a) * r0.values + np.sqrt(1.0 - a) * np.asarray(eps, dtype=np.float64)


def latent_loss_batch(r0: np.ndarray, modality_ids: np.ndarray,
                      times: np.ndarray, eps: np.ndarray,
                      store: T.ParamStore, net,
                      schedule: NoiseSchedule) -> T.Tensor:
    """Mean over the batch of squared noise-prediction errors.

    ``r0``/``eps`` are (B, d); per sample the loss is the squared
    Euclidean distance between the drawn noise and the prediction at the
    perturbed point, summed over coordinates.
    """
    a = np.array([schedule.alpha_bar(float(t)) for t in times])[:, None]
    r_t = np.sqrt(a) * r0 + np.sqrt(1.0 - a) * eps
    pred = net.eps_predict(r_t, times, modality_ids, store)
    diff = T.sub(T.Tensor(eps), pred)
    return T.tmean(T.tsum(T.mul(diff, diff), axis=-1))


def latent_loss(r0: SemanticVector, modality: Modality, t: float,
                eps: np.ndarray, store: T.ParamStore, net,
                schedule: NoiseSchedule) -> T.Tensor:
    """Single-sample squared noise-prediction error."""
    return latent_loss_batch(r0.values[None, :], np.array([int(modality)]),
                             np.array([t]), np.asarray(eps)[None, :],
                             store, net, schedule)


def ancestral_raw(modality: Modality, store: T.ParamStore, net,
                  schedule: NoiseSchedule, rng: np.random.Generator,
                  inject_noise: bool = True) -> np.ndarray:
    """Reverse ancestral walk, returning the un-normalized t=0 vector.

    Starts from a standard normal draw at t=1 and walks the uniform grid
    down to t=0 with the posterior-variance update. ``inject_noise=False``
    suppresses the stochastic term (pure drift), which makes the
    trajectory verifiable by hand recursion.
    """
    steps = schedule.num_latent_steps
    dim = net.config.dim
    r = rng.standard_normal(dim)
    alpha_bars = [schedule.alpha_bar(i / steps) for i in range(steps + 1)]
    for i in range(steps, 0, -1):
        t_i = i / steps
        ab_t, ab_prev = alpha_bars[i], alpha_bars[i - 1]
        alpha_i = ab_t / ab_prev
        beta_i = 1.0 - alpha_i
        pred = net.eps_predict(r[None, :], np.array([t_i]),
                               np.array([int(modality)]), store).numpy()[0]
        mean = (r - beta_i / np.sqrt(1.0 - ab_t) * pred) / np.sqrt(alpha_i)
        if i > 1 and inject_noise:
            var = beta_i * (1.0 - ab_prev) / (1.0 - ab_t)
            mean = mean + np.sqrt(var) * rng.standard_normal(dim)
        r = mean
    return r


def ancestral_sample(modality: Modality, store: T.ParamStore, net,
                     schedule: NoiseSchedule, rng: np.random.Generator,
                     inject_noise: bool = True) -> SemanticVector:
    """Draw one semantic vector, re-projected to the unit sphere so it
    can condition the token stage."""
    raw = ancestral_raw(modality, store, net, schedule, rng, inject_noise)
    return SemanticVector(unit_normalize(raw), modality)


def ancestral_sample_batch(modality: Modality, count: int, store: T.ParamStore,
                           net, schedule: NoiseSchedule,
                           rng: np.random.Generator) -> np.ndarray:
    """Vectorized ancestral sampling: (count, dim) unit-norm rows.

    Uses one noise draw per step for the whole batch, so the stream
    differs from ``count`` sequential single samples; determinism per
    (seed, count) still holds.
    """
    steps = schedule.num_latent_steps
    dim = net.config.dim
    r = rng.standard_normal((count, dim))
    modality_ids = np.full(count, int(modality))
    alpha_bars = [schedule.alpha_bar(i / steps) for i in range(steps + 1)]
    for i in range(steps, 0, -1):
        t_i = i / steps
        ab_t, ab_prev = alpha_bars[i], alpha_bars[i - 1]
        alpha_i = ab_t / ab_prev
        beta_i = 1.0 - alpha_i
        pred = net.eps_predict(r, np.full(count, t_i), modality_ids, store).numpy()
        r = (r - beta_i / np.sqrt(1.0 - ab_t) * pred) / np.sqrt(alpha_i)
        if i > 1:
            var = beta_i * (1.0 - ab_prev) / (1.0 - ab_t)
            r = r + np.sqrt(var) * rng.standard_normal((count, dim))
    return r / np.linalg.norm(r, axis=1, keepdims=True)

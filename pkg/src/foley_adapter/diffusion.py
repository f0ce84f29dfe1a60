"""Noise schedules, v-parameterization, guidance, and the sampler.

Conventions: schedules are 0-indexed over t in [0, num_steps); tables are
float64 and per-step coefficients are applied as python floats so array
dtypes (float32 at inference, float64 in tests) are preserved.  The
forward process is z_t = sqrt(a_t) z_{t-1} + sqrt(1-a_t) e_t, with
marginal z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) e.  The network predicts
v = sqrt(abar) e - sqrt(1-abar) z0.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, ContractError, DimensionError


@dataclass(frozen=True)
class NoiseSchedule:
    num_steps: int
    kind: str
    alpha: np.ndarray
    alpha_bar: np.ndarray


@dataclass(frozen=True)
class GuidanceParams:
    """gamma: classifier-free guidance scale; alpha_asym: unconditional-path
    attenuation of the adapter contribution, in [0, 1]."""

    gamma: float = 7.0
    alpha_asym: float = 0.5

    def __post_init__(self):
        if not np.isfinite(self.gamma):
            raise ConfigError("gamma must be finite, got %r" % (self.gamma,))
        if not 0.0 <= self.alpha_asym <= 1.0:
            raise ConfigError(
                "alpha_asym must lie in [0, 1], got %r" % (self.alpha_asym,)
            )


def build_schedule(num_steps, kind="cosine"):
    """Noise schedule tables with the product identity exact by construction."""
    if num_steps < 2:
        raise ConfigError("schedule needs at least 2 steps, got %d" % num_steps)
    if kind == "cosine":
        s = 0.008
        grid = np.arange(num_steps + 1, dtype=np.float64)
        f = np.cos((grid / num_steps + s) / (1 + s) * (np.pi / 2)) ** 2
        abar_raw = f[1:] / f[0]
        prev = np.concatenate([[1.0], abar_raw[:-1]])
        alpha = np.clip(abar_raw / prev, 1e-3, 0.9999)
    elif kind == "linear":
        alpha = 1.0 - np.linspace(1e-4, 0.02, num_steps)
    else:
        raise ConfigError("unknown schedule kind %r" % (kind,))
    alpha_bar = np.empty_like(alpha)
    acc = np.float64(1.0)
    for t in range(num_steps):
        acc = acc * alpha[t]
        alpha_bar[t] = acc
    return NoiseSchedule(num_steps, kind, alpha, alpha_bar)


def _coeffs(sched, t):
    if not 0 <= t < sched.num_steps:
        raise IndexError(
            "t=%d outside schedule of %d steps" % (t, sched.num_steps)
        )
    abar = sched.alpha_bar[t]
    return float(np.sqrt(abar)), float(np.sqrt(1.0 - abar))


def forward_step(z_prev, t, eps_t, sched):
    """One corruption step z_t from z_{t-1}."""
    if z_prev.shape != eps_t.shape:
        raise DimensionError(
            "noise shape %s does not match %s" % (eps_t.shape, z_prev.shape)
        )
    if not 0 <= t < sched.num_steps:
        raise IndexError(
            "t=%d outside schedule of %d steps" % (t, sched.num_steps)
        )
    a = sched.alpha[t]
    return float(np.sqrt(a)) * z_prev + float(np.sqrt(1.0 - a)) * eps_t


def forward_marginal(z0, t, eps, sched):
    """Direct jump from clean z0 to z_t."""
    if z0.shape != eps.shape:
        raise DimensionError(
            "noise shape %s does not match %s" % (eps.shape, z0.shape)
        )
    a, b = _coeffs(sched, t)
    return a * z0 + b * eps


def v_from(z0, eps, t, sched):
    """Network target v for a (z0, eps, t) triple."""
    if z0.shape != eps.shape:
        raise DimensionError(
            "noise shape %s does not match %s" % (eps.shape, z0.shape)
        )
    a, b = _coeffs(sched, t)
    return a * eps - b * z0


def recover_z0_eps(z_t, v, t, sched):
    """Invert (z_t, v) back to the (z0, eps) estimates."""
    if z_t.shape != v.shape:
        raise DimensionError(
            "v shape %s does not match %s" % (v.shape, z_t.shape)
        )
    a, b = _coeffs(sched, t)
    return a * z_t - b * v, b * z_t + a * v


def training_loss(model_fn, z0_batch, class_ids, sched, cond_drop_p, rng,
                  null_id, counters=None, details=None):
    """Denoising objective on one batch.

    Per item: t uniform, eps drawn, z_t formed via the marginal, the text
    condition replaced by null_id with probability cond_drop_p, and the
    model's v prediction scored by mean squared error against the true v.
    model_fn(z_t, t_batch, ids) must return a Tensor of z0_batch's shape.
    RNG consumption order is fixed: t, eps, condition dropout.
    """
    if not 0.0 <= cond_drop_p < 1.0:
        raise ConfigError(
            "cond_drop_p must be in [0, 1), got %r" % (cond_drop_p,)
        )
    n = z0_batch.shape[0]
    if n == 0:
        raise ContractError("training_loss needs a non-empty batch")
    t_batch = rng.integers(0, sched.num_steps, size=n)
    eps = rng.standard_normal(z0_batch.shape, dtype=z0_batch.dtype)
    drop = rng.random(n) < cond_drop_p
    ids = np.where(drop, null_id, class_ids)
    if counters is not None:
        counters["null_conditions"] = (
            counters.get("null_conditions", 0) + int(drop.sum())
        )
    bshape = (n,) + (1,) * (z0_batch.ndim - 1)
    a = np.sqrt(sched.alpha_bar[t_batch]).astype(z0_batch.dtype).reshape(bshape)
    b = np.sqrt(1.0 - sched.alpha_bar[t_batch]).astype(z0_batch.dtype)
    b = b.reshape(bshape)
    z_t = a * z0_batch + b * eps
    v_target = a * eps - b * z0_batch
    if details is not None:
        details.update(t_batch=t_batch, eps=eps, ids=ids, z_t=z_t,
                       v_target=v_target)
    pred = model_fn(z_t, t_batch, ids)
    return nn.mse(pred, nn.Tensor(v_target))


def guided_prediction(pred_cond, pred_uncond, gamma):
    """Classifier-free combination; exact passthrough at gamma 0 and 1."""
    gamma = float(gamma)
    if gamma == 1.0:
        return pred_cond
    if gamma == 0.0:
        return pred_uncond
    return pred_uncond + gamma * (pred_cond - pred_uncond)


def _step_subset(sched, steps):
    if steps < 1:
        raise ConfigError("steps must be >= 1, got %d" % steps)
    if steps > sched.num_steps:
        raise ConfigError(
            "steps=%d exceeds schedule length %d" % (steps, sched.num_steps)
        )
    grid = np.linspace(sched.num_steps - 1, 0, steps)
    return np.unique(np.round(grid).astype(np.int64))[::-1]


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample(model_pair, sched, guide, steps, shape, seed, dtype=np.float32):
    """Deterministic first-order reverse pass; returns the final z0 estimate.

    model_pair(z_t, t, path) -> ndarray v prediction, with path one of
    "conditional" / "unconditional".  The conditional and unconditional
    evaluations run as two same-shape calls so that collapsing gamma to 1
    (or 0) leaves the surviving path bit-identical; at those values the
    other path is skipped entirely.
    """
    rng = _as_rng(seed)
    ts = _step_subset(sched, steps)
    z = rng.standard_normal(shape, dtype=dtype)
    gamma = float(guide.gamma)
    z0_hat = z
    with nn.no_grad():
        for i, t in enumerate(ts):
            if gamma == 1.0:
                v = model_pair(z, int(t), "conditional")
            elif gamma == 0.0:
                v = model_pair(z, int(t), "unconditional")
            else:
                v = guided_prediction(
                    model_pair(z, int(t), "conditional"),
                    model_pair(z, int(t), "unconditional"),
                    gamma,
                )
            z0_hat, eps_hat = recover_z0_eps(z, v, int(t), sched)
            if i + 1 < len(ts):
                a, b = _coeffs(sched, int(ts[i + 1]))
                z = a * z0_hat + b * eps_hat
    return z0_hat


def sample_conditional_only(model_cond, sched, steps, shape, seed,
                            dtype=np.float32):
    """Reference loop that never touches guidance or the unconditional path."""
    rng = _as_rng(seed)
    ts = _step_subset(sched, steps)
    z = rng.standard_normal(shape, dtype=dtype)
    z0_hat = z
    with nn.no_grad():
        for i, t in enumerate(ts):
            v = model_cond(z, int(t))
            z0_hat, eps_hat = recover_z0_eps(z, v, int(t), sched)
            if i + 1 < len(ts):
                a, b = _coeffs(sched, int(ts[i + 1]))
                z = a * z0_hat + b * eps_hat
    return z0_hat

"""Conditional WGAN-GP objectives for StageI and both StageII variants, plus the
gradient penalty, Adam, and weight clipping.

Critic argument order follows the loss formulas:

* StageI and v1 critics are called as ``D(t, s)``;
* the v0 critic is called as ``D(high, low)``.

``NetworkSpec`` critics are adapted automatically; any other callable returning one
score per sample (shape [B]) can be passed instead, which is how the tests plug in
hand-checkable critics.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import BatchTriple
from .networks import NetworkSpec, critic_v0, critic_v1, stage1_critic
from .tensor import Parameter, Tensor


@dataclass
class TrainingConfig:
    lambda_gp: float = 10.0
    critic_steps_per_gen_step: int = 5
    learning_rate: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    adam_eps: float = 1e-8
    batch_size: int = 8
    iterations: int = 500
    seed: int = 0
    clip_value: float | None = None
    base_channels: int = 16
    checkpoint_every: int = 100

    def validate(self) -> "TrainingConfig":
        if self.lambda_gp < 0:
            raise ValueError("lambda_gp must be >= 0")
        if self.critic_steps_per_gen_step < 1:
            raise ValueError("critic_steps_per_gen_step must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (mismatch sampling needs two samples)")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.clip_value is not None and self.clip_value <= 0:
            raise ValueError("clip_value must be positive")
        if self.base_channels < 1 or self.checkpoint_every < 1:
            raise ValueError("base_channels and checkpoint_every must be >= 1")
        return self


class FrozenGeneratorError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# gradient penalty
# ---------------------------------------------------------------------------

def interpolate(x, x_hat, epsilon) -> Tensor:
    """Convex combination ``epsilon * x + (1 - epsilon) * x_hat``.

    ``epsilon`` is a scalar or one value per sample (leading axis).
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    if x.shape != x_hat.shape:
        raise T.ShapeError(f"interpolate: shapes differ, {x.shape} vs {x_hat.shape}")
    eps = np.asarray(epsilon, dtype=x.dtype)
    if np.any(eps < 0) or np.any(eps > 1):
        raise ValueError("epsilon must lie in [0, 1]")
    if eps.ndim == 1:
        eps = eps.reshape((-1,) + (1,) * (x.ndim - 1))
    return T.add(T.mul(x, Tensor(eps)), T.mul(x_hat, Tensor((1 - eps).astype(x.dtype))))


def gradient_penalty(critic: Callable[..., Tensor], inputs: Sequence) -> Tensor:
    """Mean over the batch of sum over inputs of (||dD/d input||_2 - 1)^2.

    Each input carries a leading batch axis and the norm runs over the rest of
    that input. The result stays differentiable with respect to the critic's
    parameters (second-order graph).
    """
    leaves = [Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True) for x in inputs]
    scores = critic(*leaves)
    total = T.sum(scores) if scores.size != 1 else T.reshape(scores, ())
    grads = T.grad(total, leaves, create_graph=True)
    penalty = None
    for g in grads:
        if not np.all(np.isfinite(g.data)):
            raise FloatingPointError("gradient penalty: non-finite critic gradient")
        n = T.norm(g, range(1, g.ndim)) if g.ndim > 1 else T.reshape(T.norm(g, (0,)), (1,))
        term = T.square(T.sub(n, 1.0))
        penalty = term if penalty is None else T.add(penalty, term)
    return T.mean(penalty)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def _as_critic(d, stage: str) -> Callable[..., Tensor]:
    if not isinstance(d, NetworkSpec):
        return d
    if stage == "1":
        return lambda t, s: stage1_critic(d, s, t)
    if stage == "2v0":
        return lambda high, low: critic_v0(d, high, low)
    return lambda t, high: critic_v1(d, t, high)


def _require_frozen(g1) -> None:
    if not getattr(g1, "frozen", True):
        raise FrozenGeneratorError("StageI generator must be frozen during StageII training")


def _dtype_of(net, default=np.float32):
    return getattr(net, "dtype", default)


def _t(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _epsilon(rng, n):
    return (rng or np.random.default_rng(0)).uniform(0.0, 1.0, size=n)


@dataclass
class CriticTerms:
    fake: float
    mismatched: float
    matched: float
    penalty: float

    @property
    def wasserstein(self) -> float:
        """The critic's distance estimate: the negated loss without the penalty."""
        return -(self.fake + self.mismatched - self.matched)


def _finish(fake, mis, mat, mat_weight, penalty, lam):
    loss = T.sub(T.add(fake, mis) if mis is not None else fake, T.mul(mat, mat_weight))
    if lam:
        loss = T.add(loss, T.mul(penalty, lam))
    terms = CriticTerms(fake.item(), mis.item() if mis is not None else 0.0,
                        mat_weight * mat.item(), penalty.item() if penalty is not None else 0.0)
    return loss, terms


def stage1_critic_loss(g1, d, batch: BatchTriple, cfg: TrainingConfig, rng=None):
    """E_t[D(t, G(t))] + E_mis[D(t, s)] - 2 E_mat[D(t, s)] + lambda * GP; returns (loss, terms)."""
    critic = _as_critic(d, "1")
    dt = _dtype_of(d)
    with T.no_grad():
        fake = g1(_t(batch.embeddings, dt)).data
        fake_mat = fake if batch.embeddings is batch.matched_t else g1(_t(batch.matched_t, dt)).data
    fake_term = T.mean(critic(_t(batch.embeddings, dt), Tensor(fake)))
    mis_term = T.mean(critic(_t(batch.mismatched_t, dt), _t(batch.mismatched_s, dt)))
    mat_term = T.mean(critic(_t(batch.matched_t, dt), _t(batch.matched_s, dt)))
    penalty = None
    if cfg.lambda_gp:
        s_hat = interpolate(_t(batch.matched_s, dt), Tensor(fake_mat), _epsilon(rng, len(batch)))
        penalty = gradient_penalty(critic, [_t(batch.matched_t, dt), s_hat])
    return _finish(fake_term, mis_term, mat_term, 2.0, penalty, cfg.lambda_gp)


def stage1_generator_loss(g1, d, batch: BatchTriple) -> Tensor:
    critic = _as_critic(d, "1")
    t = _t(batch.embeddings, _dtype_of(d))
    return T.neg(T.mean(critic(t, g1(t))))


def stage1_loss(g1, d, batch: BatchTriple, cfg: TrainingConfig, rng=None) -> tuple[Tensor, Tensor]:
    critic_loss, _ = stage1_critic_loss(g1, d, batch, cfg, rng)
    return critic_loss, stage1_generator_loss(g1, d, batch)


def _low_from_stage1(g1, batch: BatchTriple, dt):
    _require_frozen(g1)
    with T.no_grad():
        return g1(_t(batch.matched_t, dt)).data


def v0_critic_loss(g1, g2, d, batch: BatchTriple, cfg: TrainingConfig, rng=None):
    """E_t[D(G2(G1(t)), G1(t))] - E_mat[D(s, G1(t))] + lambda * GP, no mismatch term.

    The penalty differentiates with respect to the high-res slot (interpolated
    between real and generated) and the low-res slot G1(t) (held fixed).
    """
    critic = _as_critic(d, "2v0")
    dt = _dtype_of(d)
    low = _low_from_stage1(g1, batch, dt)
    with T.no_grad():
        fake = g2(Tensor(low)).data
    fake_term = T.mean(critic(Tensor(fake), Tensor(low)))
    mat_term = T.mean(critic(_t(batch.matched_s, dt), Tensor(low)))
    penalty = None
    if cfg.lambda_gp:
        s_hat = interpolate(_t(batch.matched_s, dt), Tensor(fake), _epsilon(rng, len(batch)))
        penalty = gradient_penalty(critic, [s_hat, Tensor(low)])
    return _finish(fake_term, None, mat_term, 1.0, penalty, cfg.lambda_gp)


def v0_generator_loss(g1, g2, d, batch: BatchTriple) -> Tensor:
    critic = _as_critic(d, "2v0")
    low = Tensor(_low_from_stage1(g1, batch, _dtype_of(d)))
    return T.neg(T.mean(critic(g2(low), low)))


def v0_loss(g1, g2, d, batch: BatchTriple, cfg: TrainingConfig, rng=None) -> tuple[Tensor, Tensor]:
    critic_loss, _ = v0_critic_loss(g1, g2, d, batch, cfg, rng)
    return critic_loss, v0_generator_loss(g1, g2, d, batch)


def v1_critic_loss(g1, g2, d, batch: BatchTriple, cfg: TrainingConfig, rng=None):
    """E_t[D(t, G2(G1(t)))] + E_mis[D(t, s)] - 2 E_mat[D(t, s)] + lambda * GP at high resolution."""
    critic = _as_critic(d, "2v1")
    dt = _dtype_of(d)
    t = _t(batch.matched_t, dt)
    low = _low_from_stage1(g1, batch, dt)
    with T.no_grad():
        fake = g2(Tensor(low), t).data
    fake_term = T.mean(critic(t, Tensor(fake)))
    mis_term = T.mean(critic(_t(batch.mismatched_t, dt), _t(batch.mismatched_s, dt)))
    mat_term = T.mean(critic(t, _t(batch.matched_s, dt)))
    penalty = None
    if cfg.lambda_gp:
        s_hat = interpolate(_t(batch.matched_s, dt), Tensor(fake), _epsilon(rng, len(batch)))
        penalty = gradient_penalty(critic, [t, s_hat])
    return _finish(fake_term, mis_term, mat_term, 2.0, penalty, cfg.lambda_gp)


def v1_generator_loss(g1, g2, d, batch: BatchTriple) -> Tensor:
    critic = _as_critic(d, "2v1")
    dt = _dtype_of(d)
    t = _t(batch.matched_t, dt)
    low = Tensor(_low_from_stage1(g1, batch, dt))
    return T.neg(T.mean(critic(t, g2(low, t))))


def v1_loss(g1, g2, d, batch: BatchTriple, cfg: TrainingConfig, rng=None) -> tuple[Tensor, Tensor]:
    critic_loss, _ = v1_critic_loss(g1, g2, d, batch, cfg, rng)
    return critic_loss, v1_generator_loss(g1, g2, d, batch)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

class Adam:
    """Adam with per-parameter first/second moment state."""

    def __init__(self, params: Sequence[Parameter], lr=1e-4, beta1=0.5, beta2=0.9, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @classmethod
    def from_config(cls, params, cfg: TrainingConfig) -> "Adam":
        return cls(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        T.zero_grad(self.params)


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


def clip_weights(params: Sequence[Parameter], c: float) -> None:
    """Clamp every weight into [-c, c] (the original WGAN Lipschitz constraint)."""
    if c <= 0:
        raise ValueError("clip value must be positive")
    for p in params:
        np.clip(p.data, -c, c, out=p.data)

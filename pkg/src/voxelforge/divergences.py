"""Small-instance reference divergences: KL, JSD, the optimal GAN discriminator,
the GAN value function, and the empirical 1-D Wasserstein-1 distance.

These serve as independent oracles for the training losses. Natural log throughout.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class DiscreteDistribution:
    support: tuple[float, ...]
    probs: tuple[float, ...]

    def __init__(self, support: Sequence[float], probs: Sequence[float]):
        support = tuple(float(s) for s in support)
        probs = tuple(float(p) for p in probs)
        if len(support) != len(probs):
            raise ValueError("support and probs must have equal length")
        if len(set(support)) != len(support):
            raise ValueError("support points must be distinct")
        if any(p < 0 for p in probs):
            raise ValueError("probabilities must be nonnegative")
        if abs(math.fsum(probs) - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {math.fsum(probs)}, not 1")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def on_indices(cls, probs: Sequence[float]) -> "DiscreteDistribution":
        return cls(range(len(probs)), probs)

    def __len__(self) -> int:
        return len(self.probs)


def _aligned(p: DiscreteDistribution, q: DiscreteDistribution) -> tuple[np.ndarray, np.ndarray]:
    if p.support != q.support:
        raise ValueError("distributions must share the same support")
    return np.array(p.probs), np.array(q.probs)


def kl_divergence(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """KL(p || q). Returns ``inf`` (with a warning) if q vanishes where p does not."""
    pa, qa = _aligned(p, q)
    if np.any((qa == 0) & (pa > 0)):
        warnings.warn("KL divergence is infinite: q is zero where p is positive", RuntimeWarning)
        return math.inf
    mask = pa > 0
    return float(math.fsum(pa[mask] * np.log(pa[mask] / qa[mask])))


def mixture(p: DiscreteDistribution, q: DiscreteDistribution) -> DiscreteDistribution:
    pa, qa = _aligned(p, q)
    return DiscreteDistribution(p.support, (pa + qa) / 2)


def jsd(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    a = mixture(p, q)
    return 0.5 * kl_divergence(p, a) + 0.5 * kl_divergence(q, a)


def optimal_discriminator(p: DiscreteDistribution, q: DiscreteDistribution) -> dict[float, float]:
    """Pointwise D*(x) = p(x) / (p(x) + q(x)) over the shared support."""
    pa, qa = _aligned(p, q)
    total = pa + qa
    if np.any(total <= 0):
        raise ValueError("p + q must be positive on the support")
    return dict(zip(p.support, (pa / total).tolist()))


def gan_value(p: DiscreteDistribution, q: DiscreteDistribution,
              discriminator: Callable[[float], float] | dict) -> float:
    """E_p[log D] + E_q[log(1 - D)].

    Terms with zero probability are skipped, so D may reach 0 or 1 where the
    corresponding distribution has no mass.
    """
    _aligned(p, q)
    d = discriminator.__getitem__ if isinstance(discriminator, dict) else discriminator
    terms = []
    for x, pr, qr in zip(p.support, p.probs, q.probs):
        dx = d(x)
        if pr > 0:
            terms.append(pr * math.log(dx))
        if qr > 0:
            terms.append(qr * math.log(1.0 - dx))
    return math.fsum(terms)


def wasserstein1_empirical(samples_a: Sequence[float], samples_b: Sequence[float]) -> float:
    """W1 between two equal-size empirical measures on the real line:
    mean |sorted_a[i] - sorted_b[i]|."""
    a = np.sort(np.asarray(samples_a, dtype=np.float64))
    b = np.sort(np.asarray(samples_b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"sample counts differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("need at least one sample")
    return float(np.mean(np.abs(a - b)))


def wasserstein1_bruteforce(samples_a: Sequence[float], samples_b: Sequence[float]) -> float:
    """W1 by exhaustive search over couplings of two uniform n-point measures.

    The transport polytope's vertices are permutation matrices (Birkhoff), so
    enumerating permutations covers every extreme coupling. Only for tiny n.
    """
    a = list(samples_a)
    b = list(samples_b)
    if len(a) != len(b):
        raise ValueError(f"sample counts differ: {len(a)} vs {len(b)}")
    n = len(a)
    if n > 8:
        raise ValueError("brute-force transport is limited to 8 points")
    best = math.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, math.fsum(abs(a[i] - b[j]) for i, j in enumerate(perm)) / n)
    return best

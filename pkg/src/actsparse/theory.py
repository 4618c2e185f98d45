"""Numerical checks that the loss gradient on a positive pre-activation is
positive in expectation over a random last layer, and of the scalar
expectation inequality the cross-entropy argument rests on.

Setting: ``f = V relu(p)`` with ``V`` of shape ``(num_classes, d_ff)`` drawn
at random and ``p`` fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from .linalg import make_rng, softmax

_CHUNK_ELEMS = 4_000_000


@dataclass
class Theorem1Config:
    loss: str
    p: np.ndarray
    y: np.ndarray
    i_star: int
    num_classes: int
    d_ff: int
    v_std: float
    samples: int = 100_000
    seed: int = 0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.loss not in ("mse", "ce"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.p.shape != (self.d_ff,) or self.y.shape != (self.num_classes,):
            raise ValueError("p must have d_ff entries and y num_classes entries")
        if not self.p[self.i_star] > 0:
            raise ValueError(f"p[{self.i_star}] = {self.p[self.i_star]} must be strictly positive")
        if self.loss == "ce" and abs(self.y.sum() - 1.0) > 1e-9:
            raise ValueError("cross-entropy target must sum to 1")
        if self.samples < 1000:
            raise ValueError("use at least 1000 Monte-Carlo samples")
        if not self.v_std > 0:
            raise ValueError("V entries need a positive standard deviation")

    @classmethod
    def random(cls, loss: str, rng: np.random.Generator, samples: int = 100_000, seed: int = 0,
               classes=(2, 10), widths=(4, 512)) -> "Theorem1Config":
        """A random admissible configuration with He-variance ``V``.

        ``p`` is standard normal and ``i*`` is its largest entry (flipped to
        positive if every entry is negative).
        """
        K = int(rng.integers(classes[0], classes[1] + 1))
        d_ff = int(rng.integers(widths[0], widths[1] + 1))
        p = rng.standard_normal(d_ff)
        i_star = int(np.argmax(p))
        if p[i_star] <= 0:
            p[i_star] = -p[i_star] + 1e-3
        y = rng.dirichlet(np.ones(K)) if loss == "ce" else rng.standard_normal(K)
        return cls(loss, p, y, i_star, K, d_ff, np.sqrt(2.0 / d_ff), samples, seed)


def grad_wrt_p(loss: str, V, p, y, i_star: int) -> float:
    """d loss / d p[i*] at a point where ``p[i*] > 0``.

    MSE: ``<V relu(p) - y, v_i*>``; CE: ``<softmax(V relu(p)) - y, v_i*>``.
    ``V`` may carry leading sample axes, in which case one value per sample
    is returned.
    """
    V = np.asarray(V, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not p[i_star] > 0:
        raise ValueError(f"p[{i_star}] must be strictly positive")
    f = V @ np.maximum(p, 0.0)
    if loss == "mse":
        r = f - y
    elif loss == "ce":
        r = softmax(f, axis=-1) - y
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return np.sum(r * V[..., i_star], axis=-1)


@dataclass
class MonteCarloResult:
    mean: float
    se: float
    samples: int

    @property
    def verdict(self) -> bool:
        return self.mean > 3.0 * self.se


def theorem1_mc(cfg: Theorem1Config) -> MonteCarloResult:
    """Average the gradient over ``cfg.samples`` i.i.d. normal draws of ``V``."""
    rng = make_rng(cfg.seed, 31)
    # columns with p_i <= 0 are multiplied by relu(p_i) = 0 and never enter
    # the gradient, so only the active columns of V are drawn
    active = np.flatnonzero(cfg.p > 0)
    p_act = cfg.p[active]
    i_act = int(np.searchsorted(active, cfg.i_star))
    per = cfg.num_classes * active.size
    chunk = max(1, _CHUNK_ELEMS // per)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < cfg.samples:
        m = min(chunk, cfg.samples - done)
        V = rng.standard_normal((m, cfg.num_classes, active.size)) * cfg.v_std
        g = grad_wrt_p(cfg.loss, V, p_act, cfg.y, i_act)
        total += g.sum()
        total_sq += (g * g).sum()
        done += m
    mean = total / done
    var = max(total_sq / done - mean * mean, 0.0) * done / (done - 1)
    return MonteCarloResult(float(mean), float(np.sqrt(var / done)), done)


def mse_closed_form(cfg: Theorem1Config) -> float:
    """Exact expectation for independent zero-mean ``V``: relu(p*) K var."""
    return float(cfg.p[cfg.i_star] * cfg.num_classes * cfg.v_std ** 2)


@dataclass
class LemmaD1Params:
    c1: float
    c2: float
    c3: float
    p: float
    dist: stats.rv_continuous = field(default_factory=lambda: stats.norm(0.0, 1.0))

    def __post_init__(self):
        if min(self.c1, self.c2, self.c3, self.p) <= 0:
            raise ValueError("C1, C2, C3 and p must all be positive")


@dataclass
class LemmaResult:
    lhs: float
    rhs: float
    abserr: float

    @property
    def verdict(self) -> bool:
        return self.lhs > self.rhs


class QuadratureError(RuntimeError):
    pass


def _lemma_integrand(params: LemmaD1Params):
    c1, c2, c3, p = params.c1, params.c2, params.c3, params.p

    def g(v):
        # c1 v e^{pv} / (c2 e^{pv} + c3) rewritten to avoid overflow
        return c1 * v / (c2 + c3 * np.exp(-p * v)) if p * v > -700 else c1 * v * np.exp(p * v) / c3

    return g


def lemma_d1_check(params: LemmaD1Params, rtol: float = 1e-8, width: float = 10.0) -> LemmaResult:
    """Compare ``E[c1 V e^{pV} / (c2 e^{pV} + c3)]`` with ``c1 / (c2 + c3) E[V]``.

    The left side is integrated adaptively over ``mean +- width * std`` of
    the density.
    """
    dist = params.dist
    mu, sd = float(dist.mean()), float(dist.std())
    lo, hi = mu - width * sd, mu + width * sd
    g = _lemma_integrand(params)
    pdf = dist.pdf
    # split at the mode so the peak is not straddled by the first panel
    pieces = [(lo, mu), (mu, hi)]
    lhs = 0.0
    abserr = 0.0
    for a, b in pieces:
        val, err = integrate.quad(lambda v: g(v) * pdf(v), a, b, epsabs=0.0, epsrel=rtol * 1e-2, limit=500)
        lhs += val
        abserr += err
    if not np.isfinite(lhs) or abserr > rtol * max(abs(lhs), 1e-300):
        raise QuadratureError(f"quadrature did not reach relative {rtol}: value {lhs}, error {abserr}")
    rhs = params.c1 / (params.c2 + params.c3) * mu
    return LemmaResult(float(lhs), float(rhs), float(abserr))


def lemma_d1_mc(params: LemmaD1Params, samples: int, seed: int = 0) -> MonteCarloResult:
    """Monte-Carlo estimate of the left side of the lemma."""
    rng = make_rng(seed, 32)
    total = 0.0
    total_sq = 0.0
    done = 0
    chunk = 1_000_000
    while done < samples:
        m = min(chunk, samples - done)
        v = params.dist.rvs(size=m, random_state=rng)
        with np.errstate(over="ignore"):
            val = params.c1 * v / (params.c2 + params.c3 * np.exp(-params.p * v))
        total += val.sum()
        total_sq += (val * val).sum()
        done += m
    mean = total / done
    var = max(total_sq / done - mean * mean, 0.0) * done / (done - 1)
    return MonteCarloResult(float(mean), float(np.sqrt(var / done)), done)

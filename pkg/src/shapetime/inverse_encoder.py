"""Amortised intrinsic-time encoder ``g(p, d) -> tau``.

The encoder is fit on triplets ``(p, mu(p, tau), tau)`` drawn from a frozen
forward field, so at test time one forward pass per point replaces a
per-shape likelihood maximisation over ``tau``.
"""
from dataclasses import dataclass, asdict, field
import csv
import logging
import math

import numpy as np

from . import network as nw
from .errors import DivergenceError
from .gaussian_field import Adam

log = logging.getLogger(__name__)


@dataclass
class TripletBatch:
    p: np.ndarray
    tau: np.ndarray
    d: np.ndarray

    def __len__(self):
        return len(self.tau)


def sample_triplets(forward_params, n, p_domain, t_range=(0.0, 1.0), seed=0,
                    jitter=False, noise=False, rng=None, input_noise=0.0):
    """Draw ``n`` triplets with ``p`` uniform over ``p_domain`` and ``tau`` uniform in ``t_range``.

    ``p_domain`` is an ``(V, D)`` array of template vertices (a closed
    polygon when ``jitter`` is set, in which case points are spread
    uniformly along the edge to the next vertex).  ``d`` is the forward
    mean, plus a draw from ``Sigma(p, tau)`` only when ``noise`` is set, plus
    isotropic Gaussian noise of standard deviation ``input_noise`` when positive.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    p_domain = np.asarray(p_domain, dtype=float)
    D = p_domain.shape[1]
    if n == 0:
        return TripletBatch(np.zeros((0, D)), np.zeros(0), np.zeros((0, D)))
    j = rng.integers(0, len(p_domain), size=n)
    p = p_domain[j]
    if jitter:
        u = rng.uniform(size=(n, 1))
        p = (1 - u) * p + u * p_domain[(j + 1) % len(p_domain)]
    tau = rng.uniform(t_range[0], t_range[1], size=n)
    mu, L = nw.forward_field(forward_params, p, tau)
    d = mu
    if noise:
        d = mu + np.einsum("nij,nj->ni", L, rng.standard_normal((n, D)))
    if input_noise > 0:
        d = d + input_noise * rng.standard_normal((n, D))
    return TripletBatch(p, tau, d)


@dataclass
class InverseConfig:
    steps: int = 6000
    batch_size: int = 1024
    lr: float = 1e-3
    lr_final: float = 1e-5
    seed: int = 0
    jitter: bool = False
    noise: bool = False
    input_noise: float = 0.0
    t_range: tuple = None
    precision: str = "float32"

    def to_dict(self):
        return asdict(self)

    def lr_at(self, step):
        if self.lr_final is None or self.steps <= 1:
            return self.lr
        frac = step / (self.steps - 1)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1 + math.cos(math.pi * frac))


@dataclass
class InverseLog:
    rows: list = field(default_factory=list)


def inverse_l1(params, batch):
    """``mean |g(p, d) - tau|``."""
    tau_hat = nw.forward_inverse(params, batch.p, batch.d)
    return float(np.abs(tau_hat - batch.tau).mean())


def train_inverse(forward_params, p_domain, config=None, arch=None, callback=None):
    """Fit ``g`` by L1 regression on streamed triplets from the frozen field.

    Returns ``(params, InverseLog)``; deterministic given ``config.seed``.
    """
    config = config or InverseConfig()
    D = forward_params.d
    arch = arch or nw.NetArch("inverse", d=D,
                              hidden_layers=forward_params.arch.hidden_layers,
                              hidden_width=forward_params.arch.hidden_width,
                              num_frequencies=forward_params.arch.num_frequencies)
    t_range = tuple(config.t_range or forward_params.t_range)
    params = nw.init_params(arch, seed=config.seed)
    params.t_range = t_range
    dtype = np.float32 if config.precision == "float32" else np.float64
    rng = np.random.default_rng([config.seed, 2])
    opt = Adam(arch.n_weights, lr=config.lr)
    trainlog = InverseLog()
    running = 0.0
    every = max(1, config.steps // 20)
    for step in range(config.steps):
        batch = sample_triplets(forward_params, config.batch_size, p_domain, t_range,
                                jitter=config.jitter, noise=config.noise, rng=rng,
                                input_noise=config.input_noise)
        feats = nw.inverse_features(batch.p, batch.d, arch.num_frequencies)
        outs, cache = nw.forward(arch, params.weights, feats, dtype)
        r = outs["tau"][:, 0] - batch.tau.astype(dtype)
        loss = float(np.abs(r).mean(dtype=np.float64))
        if not math.isfinite(loss):
            raise DivergenceError(step + 1)
        g = (np.sign(r) / len(r))[:, None]
        gw, _ = nw.backward(arch, params.weights, cache, {"tau": g})
        opt.lr = config.lr_at(step)
        opt.step(params.weights, gw)
        running += loss
        if (step + 1) % every == 0:
            trainlog.rows.append({"step": step + 1, "l1": running / every})
            log.info("inverse step %d l1 %.6g", step + 1, running / every)
            if callback is not None:
                callback(step + 1, params, running / every)
            running = 0.0
    return params, trainlog


@dataclass
class TimeMap:
    """Per-point intrinsic-time estimates for one shape."""

    p: np.ndarray
    tau_raw: np.ndarray
    tau_clipped: np.ndarray
    low_confidence: np.ndarray = None

    def __len__(self):
        return len(self.tau_raw)


def time_map(inverse_params, p, d, t_range=(0.0, 1.0), I_mu=None, floor=1e-8):
    """``tau_hat_p = g(p, d_p)`` for every point; nothing is aggregated.

    ``I_mu`` (optional, per point) flags points whose mean-term Fisher
    information is below ``floor``.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    d = np.atleast_2d(np.asarray(d, dtype=float))
    if len(p) == 0:
        z = np.zeros(0)
        return TimeMap(p, z, z, np.zeros(0, dtype=bool))
    tau = nw.forward_inverse(inverse_params, p, d)
    low = np.zeros(len(tau), dtype=bool) if I_mu is None else np.asarray(I_mu) < floor
    return TimeMap(p, tau, np.clip(tau, *t_range), low)


def write_time_map(path, tmap, header_comment=None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        D = tmap.p.shape[1]
        w.writerow(["point"] + [f"p{k}" for k in range(D)] + ["tau_raw", "tau_clipped", "low_I_mu"])
        for i in range(len(tmap)):
            w.writerow([i] + [repr(float(v)) for v in tmap.p[i]]
                       + [repr(float(tmap.tau_raw[i])), repr(float(tmap.tau_clipped[i])),
                          int(tmap.low_confidence[i])])

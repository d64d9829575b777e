"""Conditional displacement distribution ``d | p, t ~ N(mu(p, t), Sigma(p, t))``.

Holds the point-sample containers, the NLL and L1 objectives with their
weight gradients, the two-stage trainer and the exact log density.
"""
from dataclasses import dataclass, field, asdict
import csv
import hashlib
import logging
import math

import numpy as np

from . import network as nw
from .errors import DivergenceError, NonFiniteError

log = logging.getLogger(__name__)


@dataclass
class ShapeSample:
    """One template point of one observed shape."""

    p: tuple
    d: tuple
    t: float
    subject_id: int
    tau_gt: float = None
    limb_label: str = None
    obs_id: int = 0
    vertex: int = 0


LIMB_NAMES = ("arm", "leg")


@dataclass
class ShapeDataset:
    """Column-oriented collection of :class:`ShapeSample` records.

    ``limb`` is an integer code into :data:`LIMB_NAMES` (``-1`` = unlabeled);
    ``tau_gt`` is NaN where unknown.  ``obs_id`` groups points into shapes.
    """

    p: np.ndarray
    d: np.ndarray
    t: np.ndarray
    subject_id: np.ndarray
    obs_id: np.ndarray
    vertex: np.ndarray
    tau_gt: np.ndarray = None
    limb: np.ndarray = None
    t_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.p.ndim != 2:
            raise ValueError("p must have shape (N, D)")
        n, dim = self.p.shape
        self.d = np.asarray(self.d, dtype=np.float64).reshape(n, dim)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(n)
        self.subject_id = np.asarray(self.subject_id, dtype=np.int64).reshape(n)
        self.obs_id = np.asarray(self.obs_id, dtype=np.int64).reshape(n)
        self.vertex = np.asarray(self.vertex, dtype=np.int64).reshape(n)
        self.tau_gt = (np.full(n, np.nan) if self.tau_gt is None
                       else np.asarray(self.tau_gt, dtype=np.float64).reshape(n))
        self.limb = (np.full(n, -1, dtype=np.int64) if self.limb is None
                     else np.asarray(self.limb, dtype=np.int64).reshape(n))
        self.t_range = tuple(float(v) for v in self.t_range)

    def __len__(self):
        return len(self.t)

    @property
    def dim(self):
        return self.p.shape[1]

    @classmethod
    def empty(cls, dim=2, t_range=(0.0, 1.0)):
        z = np.zeros(0)
        return cls(np.zeros((0, dim)), np.zeros((0, dim)), z, z, z, z, t_range=t_range)

    def subset(self, mask):
        return ShapeDataset(self.p[mask], self.d[mask], self.t[mask], self.subject_id[mask],
                            self.obs_id[mask], self.vertex[mask], self.tau_gt[mask],
                            self.limb[mask], self.t_range)

    def shapes(self):
        """Yield ``(obs_id, index array)`` per shape, in order of first appearance."""
        _, first, inverse = np.unique(self.obs_id, return_index=True, return_inverse=True)
        order = np.argsort(first, kind="stable")
        groups = np.argsort(inverse, kind="stable")
        counts = np.bincount(inverse)
        starts = np.concatenate([[0], np.cumsum(counts)])
        for g in order:
            yield self.obs_id[first[g]], groups[starts[g]:starts[g + 1]]

    @property
    def n_shapes(self):
        return len(np.unique(self.obs_id))

    def records(self):
        for i in range(len(self)):
            tau = None if np.isnan(self.tau_gt[i]) else float(self.tau_gt[i])
            limb = LIMB_NAMES[self.limb[i]] if self.limb[i] >= 0 else None
            yield ShapeSample(tuple(self.p[i]), tuple(self.d[i]), float(self.t[i]),
                              int(self.subject_id[i]), tau, limb,
                              int(self.obs_id[i]), int(self.vertex[i]))

    @classmethod
    def from_records(cls, records, dim=2, t_range=(0.0, 1.0)):
        records = list(records)
        if not records:
            return cls.empty(dim, t_range)
        return cls(
            p=np.array([r.p for r in records], dtype=float).reshape(-1, dim),
            d=np.array([r.d for r in records], dtype=float).reshape(-1, dim),
            t=[r.t for r in records],
            subject_id=[r.subject_id for r in records],
            obs_id=[r.obs_id for r in records],
            vertex=[r.vertex for r in records],
            tau_gt=[np.nan if r.tau_gt is None else r.tau_gt for r in records],
            limb=[-1 if r.limb_label is None else LIMB_NAMES.index(r.limb_label)
                  for r in records],
            t_range=t_range,
        )

    def fingerprint(self):
        """SHA-256 over the IEEE-754 bytes of every column."""
        h = hashlib.sha256()
        for a in (self.p, self.d, self.t, self.tau_gt):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        for a in (self.subject_id, self.obs_id, self.vertex, self.limb):
            h.update(np.ascontiguousarray(a, dtype="<i8").tobytes())
        return h.hexdigest()


@dataclass
class TrainConfig:
    """Two-stage training schedule.

    Epochs ``1..warm_epochs`` fit the mean with L1 only (covariance branch
    frozen); later epochs minimise ``lambda_l1 * L1 + lambda_nll * NLL``.
    With ``nll_mean_grad`` off (the default) the NLL gradient stops at the
    mean, so the mean branch keeps following L1 and only the covariance
    branch learns from the likelihood.  ``lr_final`` sets the end point of a
    cosine decay (``None`` = constant).
    """

    warm_epochs: int = 10
    lambda_l1: float = 1.0
    lambda_nll: float = 1.0
    lr: float = 1e-3
    lr_final: float = 1e-5
    batch_size: int = 1024
    epochs: int = 200
    seed: int = 0
    precision: str = "float32"
    nll_mean_grad: bool = False

    def __post_init__(self):
        if self.warm_epochs > self.epochs:
            raise ValueError("warm_epochs must not exceed epochs")
        if self.lambda_l1 < 0 or self.lambda_nll < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size and lr must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    def to_dict(self):
        return asdict(self)

    def lr_at(self, epoch):
        """Learning rate for 0-based ``epoch``."""
        if self.lr_final is None or self.epochs <= 1:
            return self.lr
        frac = epoch / (self.epochs - 1)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1 + math.cos(math.pi * frac))


class Adam:
    """Adaptive moment estimation on a flat parameter vector."""

    def __init__(self, n, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.step_count = 0

    def step(self, w, g):
        self.step_count += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.step_count)
        vhat = self.v / (1 - self.b2 ** self.step_count)
        w -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return w


def _batch_arrays(batch):
    if isinstance(batch, ShapeDataset):
        return batch.p, batch.t, batch.d
    p, t, d = batch
    return np.atleast_2d(p), np.atleast_1d(t), np.atleast_2d(d)


def _solve_lower(L, r):
    """Forward substitution ``L z = r`` for a batch of small triangular systems."""
    d = L.shape[-1]
    z = np.empty_like(r)
    for i in range(d):
        acc = r[:, i] - np.einsum("nj,nj->n", L[:, i, :i], z[:, :i])
        z[:, i] = acc / L[:, i, i]
    return z


def _solve_upper_t(L, z):
    """Back substitution ``L^T w = z``."""
    d = L.shape[-1]
    w = np.empty_like(z)
    for i in range(d - 1, -1, -1):
        acc = z[:, i] - np.einsum("nj,nj->n", L[:, i + 1:, i], w[:, i + 1:])
        w[:, i] = acc / L[:, i, i]
    return w


def mahalanobis_logdet(L, r):
    """``(r^T Sigma^-1 r, log det Sigma, Sigma^-1 r, L^-1 r)`` from the Cholesky factor."""
    z = _solve_lower(L, r)
    w = _solve_upper_t(L, z)
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    return np.einsum("ni,ni->n", z, z), 2.0 * np.log(diag).sum(-1), w, z


def _losses(params, p, t, d, want_l1, want_nll, grad, dtype=np.float64):
    arch = params.arch
    D = arch.d
    mu, raw, hs, _ = nw.forward_field_raw(params, p, t, dtype)
    M = len(t)
    r = d.astype(dtype) - mu
    out = {}
    g_mu = np.zeros_like(mu)
    g_raw = None
    if want_l1:
        out["l1"] = float(np.abs(r).mean())
        g_mu -= want_l1 * np.sign(r) / (M * D)
    if want_nll:
        L = nw.chol_from_raw(raw, D)
        q, logdet, w, z = mahalanobis_logdet(L, r)
        out["nll"] = float((q + logdet).sum() / (2 * M))
        if grad:
            g_mu -= want_nll * w / M
            g_raw = _chol_grad(raw, L, w, z) * (want_nll / M)
    for v in out.values():
        if not math.isfinite(v):
            raise NonFiniteError("loss is not finite")
    if not grad:
        return out
    grads = {"mean": g_mu}
    if g_raw is not None:
        grads["chol"] = g_raw
    gw, _ = nw.backward(arch, params.weights, hs, grads)
    return out, gw


def nll_loss(params, batch, with_grad=False):
    """Gaussian NLL ``1/(2M) sum [r^T Sigma^-1 r + log det Sigma]`` (no 2*pi term).

    ``batch`` is a :class:`ShapeDataset` or a ``(p, t, d)`` tuple.  With
    ``with_grad`` returns ``(loss, d loss / d weights)``.
    """
    p, t, d = _batch_arrays(batch)
    if len(t) == 0:
        raise ValueError("empty batch")
    res = _losses(params, p, t, d, 0.0, 1.0, with_grad)
    if with_grad:
        return res[0]["nll"], res[1]
    return res["nll"]


def l1_warmup_loss(params, batch, with_grad=False):
    """Mean absolute residual over samples and coordinates."""
    p, t, d = _batch_arrays(batch)
    if len(t) == 0:
        raise ValueError("empty batch")
    res = _losses(params, p, t, d, 1.0, 0.0, with_grad)
    if with_grad:
        return res[0]["l1"], res[1]
    return res["l1"]


def log_density(params, p, t, d):
    """Exact log N(d; mu(p, t), Sigma(p, t)) including the 2*pi constant."""
    single = np.ndim(p) == 1
    mu, L = nw.forward_field(params, np.atleast_2d(p), t)
    r = np.atleast_2d(d) - mu
    q, logdet, _, _ = mahalanobis_logdet(L, r)
    D = params.d
    out = -0.5 * (q + logdet + D * math.log(2 * math.pi))
    return float(out[0]) if single else out


def mahalanobis_sq(params, p, t, d):
    mu, L = nw.forward_field(params, np.atleast_2d(p), t)
    q, _, _, _ = mahalanobis_logdet(L, np.atleast_2d(d) - mu)
    return q


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, epoch, stage, l1, nll, total):
        self.rows.append({"epoch": epoch, "stage": stage, "l1": l1, "nll": nll, "total": total})

    def write_csv(self, path, header_comment=None):
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.DictWriter(fh, fieldnames=["epoch", "stage", "l1", "nll", "total"])
            w.writeheader()
            for row in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _chol_grad(raw, L, w, z):
    """Gradient of ``(r' S^-1 r + log det S) / 2`` with respect to the raw head.

    In ``L`` this is ``-w z'`` (lower part) plus ``diag(1 / L_ii)``, with
    ``z = L^-1 r`` and ``w = S^-1 r``; the diagonal is chained through softplus.
    """
    D = L.shape[-1]
    g = np.empty_like(raw)
    for k, (i, j) in enumerate(nw.tril_indices(D)):
        if i == j:
            g[:, k] = (-w[:, i] * z[:, i] + 1.0 / L[:, i, i]) * nw.sigmoid(raw[:, k])
        else:
            g[:, k] = -w[:, i] * z[:, j]
    return g


def train(dataset, config=None, arch=None, params=None, callback=None):
    """Fit the field to ``dataset`` with the two-stage schedule in ``config``.

    Returns ``(params, TrainLog)``.  Deterministic given ``config.seed``.
    """
    config = config or TrainConfig()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    arch = arch or nw.NetArch("field", d=dataset.dim)
    if params is None:
        params = nw.init_params(arch, seed=config.seed)
    else:
        params = params.copy()
    params.t_range = tuple(dataset.t_range)
    dtype = np.float32 if config.precision == "float32" else np.float64
    rng = np.random.default_rng([config.seed, 1])
    opt = Adam(arch.n_weights, lr=config.lr)
    feats_all = nw.field_features(dataset.p, dataset.t, arch.num_frequencies).astype(dtype)
    d_all = dataset.d.astype(dtype)
    n = len(dataset)
    trainlog = TrainLog()
    D = arch.d

    for epoch in range(config.epochs):
        stage = 1 if epoch < config.warm_epochs else 2
        opt.lr = config.lr_at(epoch)
        perm = rng.permutation(n)
        sums = {"l1": 0.0, "nll": 0.0, "total": 0.0}
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            M = len(idx)
            # stage 1 never evaluates the covariance branch: it is frozen
            outs, cache = nw.forward(arch, params.weights, feats_all[idx], dtype,
                                     branches=["mean"] if stage == 1 else None)
            r = d_all[idx] - outs["mean"]
            l1 = float(np.abs(r).mean(dtype=np.float64))
            grads = {"mean": -config.lambda_l1 * np.sign(r) / (M * D)}
            nll = float("nan")
            total = config.lambda_l1 * l1
            if stage == 2:
                raw = outs["chol"]
                L = nw.chol_from_raw(raw, D)
                q, logdet, w, z = mahalanobis_logdet(L, r)
                nll = float((q.astype(np.float64) + logdet).sum() / (2 * M))
                total += config.lambda_nll * nll
                if config.nll_mean_grad:
                    grads["mean"] = grads["mean"] - config.lambda_nll * w / M
                grads["chol"] = _chol_grad(raw, L, w, z) * (config.lambda_nll / M)
            if not math.isfinite(total):
                raise DivergenceError(epoch + 1)
            gw, _ = nw.backward(arch, params.weights, cache, grads)
            opt.step(params.weights, gw)
            sums["l1"] += l1
            sums["nll"] += nll
            sums["total"] += total
            n_batches += 1
        row = {k: v / n_batches for k, v in sums.items()}
        trainlog.append(epoch + 1, stage, row["l1"], row["nll"], row["total"])
        log.info("epoch %d stage %d l1 %.6g nll %.6g", epoch + 1, stage, row["l1"], row["nll"])
        if callback is not None:
            callback(epoch + 1, params, row)
    return params, trainlog


def constant_gaussian_nll(train_set, test_set):
    """Held-out NLL of the best single Gaussian fit to all training displacements."""
    mu = train_set.d.mean(axis=0)
    cov = np.cov(train_set.d.T) + 1e-12 * np.eye(train_set.dim)
    L = np.broadcast_to(np.linalg.cholesky(cov), (len(test_set),) + cov.shape)
    q, logdet, _, _ = mahalanobis_logdet(np.ascontiguousarray(L), test_set.d - mu)
    return float((q + logdet).sum() / (2 * len(test_set)))

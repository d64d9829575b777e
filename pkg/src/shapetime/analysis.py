"""Downstream uses of a trained field and encoder.

Global time estimates (plain and Fisher-weighted means of a time map),
z-score longitudinal prediction, the normalised-lag OOD score and the
scalar / point-set evaluation metrics.
"""
from dataclasses import dataclass
import math
import warnings

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.stats import pearsonr

from . import network as nw
from .errors import (UnidentifiableError, AllUnidentifiableError, EmptyShapeError,
                     InsufficientDataError, DegenerateError, ExtrapolationWarning)
from .fisher import fisher_terms, I_MU_FLOOR
from .inverse_encoder import time_map, TimeMap


@dataclass
class TimeEstimate:
    tau_bar: float
    method: str
    per_point: TimeMap = None
    t_chron: float = None

    def __post_init__(self):
        if self.method not in ("mean", "fisher_weighted"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "fisher_weighted" and self.t_chron is None:
            raise ValueError("fisher_weighted estimates need the chronological time")


@dataclass
class OodResult:
    score: float
    argmin_point: int
    tau_max: float
    label: str = None


def _taus(tmap):
    return np.asarray(tmap.tau_raw if isinstance(tmap, TimeMap) else tmap, dtype=float)


def estimate_time_mean(tmap):
    """Arithmetic mean of the per-point estimates."""
    tau = _taus(tmap)
    if tau.size == 0:
        raise EmptyShapeError("time map is empty")
    return float(tau.mean())


def estimate_time_weighted(tmap, params=None, t=None, weights=None):
    """``sum_p I(p, t) tau_p / sum_p I(p, t)`` with ``I = I_mu``.

    Pass precomputed ``weights`` to skip the Fisher evaluation.
    """
    tau = _taus(tmap)
    if tau.size == 0:
        raise EmptyShapeError("time map is empty")
    if weights is None:
        if t is None or params is None:
            raise ValueError("weighted estimate needs params and t (or explicit weights)")
        weights, _, _ = fisher_terms(params, tmap.p, np.full(len(tau), float(t)))
    w = np.asarray(weights, dtype=float)
    w = np.where(w >= I_MU_FLOOR, w, 0.0)
    if not w.any():
        raise UnidentifiableError("all Fisher weights are below the floor")
    return float(np.dot(w, tau) / w.sum())


def population_sigma_tau(params, points, t):
    """``sqrt(1 / mean_p I_mu(p, t))`` over identifiable template points."""
    points = np.atleast_2d(points)
    I_mu, _, _ = fisher_terms(params, points, np.full(len(points), float(t)))
    ok = I_mu >= I_MU_FLOOR
    if not ok.any():
        raise UnidentifiableError(f"no identifiable point at t={t}")
    return float(math.sqrt(1.0 / I_mu[ok].mean()))


@dataclass
class LongitudinalPrediction:
    points: np.ndarray
    tau0: float
    z: float
    tau1: float
    sigma0: float
    sigma1: float


def predict_longitudinal(p, d, t0, params, inverse_params, t1, tau0=None):
    """Forecast the shape at ``t1`` from one observation ``(p, d)`` at ``t0``.

    ``z = (tau0 - t0) / sigma(t0)`` is held fixed, ``tau1 = t1 + z sigma(t1)``,
    and the forecast is ``p + mu(p, tau1)``.  ``tau0`` defaults to the mean of
    the encoder's time map.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    lo, hi = params.t_range
    if not lo <= t1 <= hi:
        warnings.warn(f"t1={t1} outside training range [{lo}, {hi}]", ExtrapolationWarning)
    if tau0 is None:
        tau0 = estimate_time_mean(time_map(inverse_params, p, d))
    s0 = population_sigma_tau(params, p, t0)
    s1 = population_sigma_tau(params, p, t1)
    z = (tau0 - t0) / s0
    tau1 = t1 + z * s1
    mu, _ = nw.forward_field(params, p, np.full(len(p), tau1))
    return LongitudinalPrediction(p + mu, float(tau0), float(z), float(tau1), s0, s1)


def ood_score(tmap, params=None, t=None, I_mu=None):
    """Most negative lag ``(tau_p - tau_max) / sigma(p, t)`` with ``sigma = I_mu**-0.5``.

    Points with ``I_mu`` below the floor are skipped, both for the minimum
    and for ``tau_max``.
    """
    tau = _taus(tmap)
    if tau.size == 0:
        raise EmptyShapeError("time map is empty")
    if I_mu is None:
        I_mu, _, _ = fisher_terms(params, tmap.p, np.full(len(tau), float(t)))
    I_mu = np.asarray(I_mu, dtype=float)
    ok = I_mu >= I_MU_FLOOR
    if not ok.any():
        raise AllUnidentifiableError("no identifiable point in shape")
    tau_max = float(tau[ok].max())
    lag = np.full(len(tau), np.inf)
    lag[ok] = (tau[ok] - tau_max) * np.sqrt(I_mu[ok])
    i = int(np.argmin(lag))
    return OodResult(float(min(lag[i], 0.0)), i, tau_max)


def roc_auc(scores_pos, scores_neg):
    """Probability a positive outranks a negative (ties count one half)."""
    pos = np.asarray(scores_pos, dtype=float)
    neg = np.asarray(scores_neg, dtype=float)
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(len(allv))
    sorted_v = allv[order]
    i = 0
    while i < len(allv):
        j = i
        while j + 1 < len(allv) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1
        i = j + 1
    r_pos = ranks[:len(pos)].sum()
    return float((r_pos - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(neg)))


# -- metrics -----------------------------------------------------------------

def scalar_metrics(pred, truth):
    """Pearson ``r``, ``R^2`` (of ``pred`` as a predictor of ``truth``) and MAE."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth must have equal length")
    if truth.size == 0 or np.ptp(truth) == 0.0:
        raise DegenerateError("truth has zero variance")
    mae = float(np.abs(pred - truth).mean())
    if np.ptp(pred) == 0.0:
        r = 0.0
    else:
        r = float(pearsonr(pred, truth)[0])
    ss_tot = float(((truth - truth.mean()) ** 2).sum())
    r2 = 1.0 - float(((truth - pred) ** 2).sum()) / ss_tot
    return {"r": r, "R2": r2, "MAE": mae}


def _nn_dists(a, b):
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if len(a) == 0 or len(b) == 0:
        raise EmptyShapeError("point sets must be non-empty")
    D = cdist(a, b)
    return D.min(axis=1), D.min(axis=0)


def chamfer(a, b):
    """Symmetric Chamfer: mean of the two directed mean squared NN distances."""
    da, db = _nn_dists(a, b)
    return float(0.5 * ((da ** 2).mean() + (db ** 2).mean()))


def hausdorff(a, b):
    da, db = _nn_dists(a, b)
    return float(max(da.max(), db.max()))


def emd(a, b, max_points=512, seed=0):
    """Mean matched distance of the optimal one-to-one assignment.

    Clouds larger than ``max_points`` are subsampled (seeded) to that size.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise EmptyShapeError("point sets must be non-empty")
    rng = np.random.default_rng(seed)
    n = min(len(a), len(b), max_points)
    if len(a) > n:
        a = a[np.sort(rng.choice(len(a), n, replace=False))]
    if len(b) > n:
        b = b[np.sort(rng.choice(len(b), n, replace=False))]
    C = cdist(a, b)
    rows, cols = linear_sum_assignment(C)
    return float(C[rows, cols].mean())


def shape_metrics(pred, truth, seed=0):
    return {"CD": chamfer(pred, truth), "HD": hausdorff(pred, truth),
            "EMD": emd(pred, truth, seed=seed)}


# -- dataset-level evaluation ------------------------------------------------

@dataclass
class ShapeTimes:
    """Per-shape time estimates over a dataset, with the per-point inputs kept."""

    obs_id: np.ndarray
    subject_id: np.ndarray
    t: np.ndarray
    tau_gt: np.ndarray
    tau_mean: np.ndarray
    tau_weighted: np.ndarray
    limb_gt: np.ndarray        # (n_shapes, n_limbs), NaN where a shape lacks the limb
    limb_mean: np.ndarray
    limb_weighted: np.ndarray
    sigma_pop: np.ndarray      # sqrt(1 / mean I_mu) over each shape's points
    point_shape: np.ndarray    # shape index of every point
    point_tau: np.ndarray
    point_I_mu: np.ndarray


def _group_sum(values, groups, n):
    return np.bincount(groups, weights=values, minlength=n)


def _group_mean(values, groups, n, weights=None, mask=None):
    w = np.ones(len(values)) if weights is None else np.asarray(weights, dtype=float)
    if mask is not None:
        w = np.where(mask, w, 0.0)
    den = _group_sum(w, groups, n)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, _group_sum(w * values, groups, n) / den, np.nan)


def evaluate_time_estimation(dataset, params, inverse_params, n_limbs=2):
    """Run the encoder and the Fisher weights over every point of ``dataset``.

    Shapes are ordered by ``obs_id``.
    """
    if len(dataset) == 0:
        raise EmptyShapeError("dataset is empty")
    ids, first, groups = np.unique(dataset.obs_id, return_index=True, return_inverse=True)
    groups = groups.reshape(-1)
    n = len(ids)
    tau = nw.forward_inverse(inverse_params, dataset.p, dataset.d)
    I_mu, _, _ = fisher_terms(params, dataset.p, dataset.t)
    ok = I_mu >= I_MU_FLOOR
    tau_w = _group_mean(tau, groups, n, weights=I_mu, mask=ok)
    shape = lambda a: _group_mean(a, groups, n)
    limb_gt = np.full((n, n_limbs), np.nan)
    limb_mean = np.full((n, n_limbs), np.nan)
    limb_w = np.full((n, n_limbs), np.nan)
    for k in range(n_limbs):
        m = dataset.limb == k
        limb_gt[:, k] = _group_mean(dataset.tau_gt, groups, n, mask=m)
        limb_mean[:, k] = _group_mean(tau, groups, n, mask=m)
        limb_w[:, k] = _group_mean(tau, groups, n, weights=I_mu, mask=m & ok)
    mean_I = _group_mean(I_mu, groups, n, mask=ok)
    with np.errstate(divide="ignore"):
        sigma_pop = np.sqrt(1.0 / mean_I)
    return ShapeTimes(ids, dataset.subject_id[first], dataset.t[first], shape(dataset.tau_gt),
                      shape(tau), tau_w, limb_gt, limb_mean, limb_w, sigma_pop,
                      groups, tau, I_mu)


def longitudinal_pairs(times):
    """``(anchor, target)`` shape-index pairs: each subject's earliest shape to each later one."""
    pairs = []
    order = np.lexsort((times.obs_id, times.t, times.subject_id))
    sids = times.subject_id[order]
    starts = np.flatnonzero(np.r_[True, sids[1:] != sids[:-1]])
    ends = np.r_[starts[1:], len(order)]
    for a, b in zip(starts, ends):
        for k in range(a + 1, b):
            pairs.append((order[a], order[k]))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


@dataclass
class LongitudinalResult:
    pairs: np.ndarray
    tau1: np.ndarray
    CD: np.ndarray
    HD: np.ndarray
    EMD: np.ndarray


def evaluate_longitudinal(dataset, params, times, seed=0):
    """Forecast every later shape of each subject from its earliest one.

    Uses the per-shape mean time estimate as ``tau0`` and the per-shape
    population spread (``times.sigma_pop``) at the anchor and target times.
    """
    pairs = longitudinal_pairs(times)
    if not len(pairs):
        raise InsufficientDataError("no subject has two or more observations")
    order = np.argsort(times.point_shape, kind="stable")
    bounds = np.r_[0, np.cumsum(np.bincount(times.point_shape, minlength=len(times.obs_id)))]
    idx_of = [order[bounds[s]:bounds[s + 1]] for s in range(len(times.obs_id))]
    a, b = pairs[:, 0], pairs[:, 1]
    z = (times.tau_mean[a] - times.t[a]) / times.sigma_pop[a]
    tau1 = times.t[b] + z * times.sigma_pop[b]
    P = np.concatenate([dataset.p[idx_of[i]] for i in a])
    T1 = np.concatenate([np.full(len(idx_of[i]), tau1[k]) for k, i in enumerate(a)])
    mu, _ = nw.forward_field(params, P, T1)
    pred = P + mu
    cd, hd, em = [], [], []
    k = 0
    for i, j in pairs:
        n = len(idx_of[i])
        y = pred[k:k + n]
        k += n
        truth = dataset.p[idx_of[j]] + dataset.d[idx_of[j]]
        m = shape_metrics(y, truth, seed=seed)
        cd.append(m["CD"])
        hd.append(m["HD"])
        em.append(m["EMD"])
    return LongitudinalResult(pairs, tau1, np.array(cd), np.array(hd), np.array(em))


def shape_ood_scores(times):
    """Most negative normalised lag per shape, vectorised over a :class:`ShapeTimes`."""
    g = times.point_shape
    n = len(times.obs_id)
    ok = times.point_I_mu >= I_MU_FLOOR
    tau_max = np.full(n, -np.inf)
    np.maximum.at(tau_max, g[ok], times.point_tau[ok])
    lag = np.full(len(g), np.inf)
    lag[ok] = (times.point_tau[ok] - tau_max[g[ok]]) * np.sqrt(times.point_I_mu[ok])
    score = np.full(n, np.inf)
    np.minimum.at(score, g, lag)
    if np.isinf(score).any():
        raise AllUnidentifiableError("a shape has no identifiable point")
    return np.minimum(score, 0.0)


def ood_auc(normal_scores, anomalous_scores):
    """AUC of ``-score`` (more negative lag = more anomalous)."""
    return roc_auc(-np.asarray(anomalous_scores), -np.asarray(normal_scores))

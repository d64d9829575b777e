"""Synthetic "starman" populations with known intrinsic time.

The template is a five-pointed star (head, two arms, two legs) given as a
closed polygon of ``n_vertices`` points.  Vertex ``j`` sits at angle
``2*pi*j/n`` with a radius that falls linearly from ``tip_radius`` at each
point of the star to ``inner_radius`` halfway between points; the head
points straight up.  With 100 vertices the five tips are vertices
25 (head), 5 (right arm), 45 (left arm), 65 (left leg) and 85 (right leg).

Four Gaussian RBF control points at the limb tips push the arms up and the
legs outwards, each scaled by its own intrinsic time.  In the global variant
every limb shares ``tau = t + z * sigma_tau(t)``; in the local variant arms
and legs use different ``sigma_tau`` curves (same ``z``).
"""
from dataclasses import dataclass, field, asdict
import numpy as np

from .gaussian_field import ShapeDataset, LIMB_NAMES

ARM, LEG = 0, 1


def sigma_tau(t, params):
    """Logistic temporal spread ``smin + (smax - smin) / (1 + exp(-(t - t50)/k))``."""
    smin, smax, t50, k = params
    if k <= 0:
        raise ValueError("logistic slope k must be positive")
    t = np.asarray(t, dtype=float)
    # 0.5 * (1 + tanh(x/2)) == 1 / (1 + exp(-x)) without overflow
    out = smin + (smax - smin) * 0.5 * (1.0 + np.tanh(0.5 * (t - t50) / k))
    return float(out) if out.ndim == 0 else out


@dataclass
class StarmanConfig:
    variant: str = "G"
    n_vertices: int = 100
    tip_radius: float = 1.0
    inner_radius: float = 0.4
    rbf_sigma: float = 0.5
    sigma_params_global: tuple = (0.01, 0.20, 0.88, 0.12)
    sigma_params_arm: tuple = (0.01, 0.15, 0.30, 0.10)
    sigma_params_leg: tuple = (0.01, 0.20, 0.88, 0.12)
    n_train_subjects: int = 1000
    n_test_subjects: int = 1000
    obs_per_subject: tuple = (1, 9)
    t_range: tuple = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("G", "L"):
            raise ValueError("variant must be 'G' or 'L'")
        if self.rbf_sigma <= 0:
            raise ValueError("rbf_sigma must be positive")
        if self.n_vertices % 20:
            raise ValueError("n_vertices must be a multiple of 20 so star tips are vertices")
        for sp in (self.sigma_params_global, self.sigma_params_arm, self.sigma_params_leg):
            smin, smax, t50, _ = sp
            if not smin < smax:
                raise ValueError("need sigma_min < sigma_max")
            if not self.t_range[0] <= t50 <= self.t_range[1]:
                raise ValueError("t50 must lie inside t_range")
        for name in ("sigma_params_global", "sigma_params_arm", "sigma_params_leg",
                     "obs_per_subject", "t_range"):
            setattr(self, name, tuple(getattr(self, name)))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @property
    def tip_vertices(self):
        """Vertex indices of the right arm, left arm, left leg, right leg tips."""
        step = self.n_vertices // 20
        return (1 * step, 9 * step, 13 * step, 17 * step)

    @property
    def head_vertex(self):
        return self.n_vertices // 4

    @property
    def control_limb(self):
        return (ARM, ARM, LEG, LEG)

    def limb_sigma_params(self, limb):
        if self.variant == "G":
            return self.sigma_params_global
        return self.sigma_params_arm if limb == ARM else self.sigma_params_leg


def template(config=None):
    """``(n_vertices, 2)`` template polygon."""
    config = config or StarmanConfig()
    n = config.n_vertices
    theta = 2 * np.pi * np.arange(n) / n
    period = 2 * np.pi / 5
    frac = np.mod(theta - np.pi / 2, period) / period
    r = config.inner_radius + (config.tip_radius - config.inner_radius) * np.abs(1 - 2 * frac)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def control_points(config=None):
    config = config or StarmanConfig()
    return template(config)[list(config.tip_vertices)]


def directions(config=None):
    """Arms move up; legs move outwards (left leg -x, right leg +x)."""
    return np.array([[0.0, 1.0], [0.0, 1.0], [-1.0, 0.0], [1.0, 0.0]])


def rbf_weights(p, config=None):
    """``(N, 4)`` Gaussian RBF weight of each control point at each ``p``."""
    config = config or StarmanConfig()
    p = np.atleast_2d(np.asarray(p, dtype=float))
    c = control_points(config)
    sq = ((p[:, None, :] - c[None, :, :]) ** 2).sum(-1)
    return np.exp(-sq / (2 * config.rbf_sigma ** 2))


def deform(p, taus, config=None):
    """Displacement ``sum_i tau_i * exp(-|p - c_i|^2 / (2 s^2)) * v_i``.

    ``p`` is ``(2,)`` or ``(N, 2)``; ``taus`` is ``(4,)`` or ``(N, 4)``.
    """
    config = config or StarmanConfig()
    single = np.ndim(p) == 1
    w = rbf_weights(p, config)
    taus = np.broadcast_to(np.asarray(taus, dtype=float), w.shape)
    d = (taus * w) @ directions(config)
    return d[0] if single else d


def vertex_limbs(config=None, torso_floor=1e-3):
    """Per-vertex ``(limb code, nearest control index)``; ``-1`` marks torso."""
    config = config or StarmanConfig()
    T = template(config)
    c = control_points(config)
    dist = ((T[:, None, :] - c[None]) ** 2).sum(-1)
    nearest = dist.argmin(axis=1)
    limb = np.array([config.control_limb[i] for i in nearest])
    torso = rbf_weights(T, config).max(axis=1) < torso_floor
    limb[torso] = -1
    nearest[torso] = -1
    return limb, nearest


@dataclass
class Subject:
    subject_id: int
    z: float
    observations: list = field(default_factory=list)  # dicts: t, tau_arm, tau_leg, vertices


def subject_times(config, subject_id, split):
    """Latent ``z`` and sorted observation times for one subject (own RNG stream)."""
    rng = np.random.default_rng([config.seed, 0 if split == "train" else 1, subject_id])
    z = rng.standard_normal()
    lo, hi = config.obs_per_subject
    n_obs = int(rng.integers(lo, hi + 1))
    t = np.sort(rng.uniform(config.t_range[0], config.t_range[1], size=n_obs))
    return float(z), t


def limb_taus(config, t, z):
    """``(tau_arm, tau_leg)`` for observation times ``t`` and latent ``z``."""
    tau_arm = t + z * sigma_tau(t, config.limb_sigma_params(ARM))
    tau_leg = t + z * sigma_tau(t, config.limb_sigma_params(LEG))
    return tau_arm, tau_leg


def _build_split(config, split, lag=0.0, lag_control=0):
    n_subj = config.n_train_subjects if split == "train" else config.n_test_subjects
    offset = 0 if split == "train" else config.n_train_subjects
    T = template(config)
    W = rbf_weights(T, config)
    V = directions(config)
    limb, nearest = vertex_limbs(config)
    nv = len(T)
    cols = {k: [] for k in ("p", "d", "t", "sid", "obs", "vtx", "tau", "limb")}
    subjects = []
    for s in range(n_subj):
        sid = offset + s
        z, ts = subject_times(config, sid, split)
        tau_arm, tau_leg = limb_taus(config, ts, z)
        subj = Subject(sid, z)
        for k, t in enumerate(ts):
            taus = np.array([tau_arm[k], tau_arm[k], tau_leg[k], tau_leg[k]])
            if lag:
                taus[lag_control] -= lag
            d = (W * taus) @ V
            tau_v = np.where(nearest >= 0, taus[np.maximum(nearest, 0)],
                             np.mean(taus))
            cols["p"].append(T)
            cols["d"].append(d)
            cols["t"].append(np.full(nv, t))
            cols["sid"].append(np.full(nv, sid))
            cols["obs"].append(np.full(nv, 16 * sid + k))
            cols["vtx"].append(np.arange(nv))
            cols["tau"].append(tau_v)
            cols["limb"].append(limb)
            subj.observations.append({"t": float(t), "tau_arm": float(tau_arm[k]),
                                      "tau_leg": float(tau_leg[k]), "vertices": T + d})
        subjects.append(subj)
    if not subjects or not cols["p"]:
        return ShapeDataset.empty(2, config.t_range), subjects
    ds = ShapeDataset(
        p=np.concatenate(cols["p"]), d=np.concatenate(cols["d"]),
        t=np.concatenate(cols["t"]), subject_id=np.concatenate(cols["sid"]),
        obs_id=np.concatenate(cols["obs"]), vertex=np.concatenate(cols["vtx"]),
        tau_gt=np.concatenate(cols["tau"]), limb=np.concatenate(cols["limb"]),
        t_range=config.t_range)
    return ds, subjects


@dataclass
class StarmanData:
    config: StarmanConfig
    train: ShapeDataset
    test: ShapeDataset
    train_subjects: list
    test_subjects: list


def generate(config=None, splits=("train", "test")):
    """Generate the requested splits.  Deterministic in ``config.seed``.

    ``obs_id`` is ``16 * subject_id + k`` for the subject's ``k``-th
    observation (sorted by time).
    """
    config = config or StarmanConfig()
    out = {"train": (None, []), "test": (None, [])}
    for split in splits:
        out[split] = _build_split(config, split)
    return StarmanData(config, out["train"][0], out["test"][0], out["train"][1], out["test"][1])


def generate_split(config, split):
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    return _build_split(config, split)[0]


def make_synthetic_ood(config, lag, control=0):
    """Test split with one limb (control point ``control``) lagged by ``lag``.

    Subjects, times and ``z`` match :func:`generate`'s test split exactly, so
    shape ``obs_id`` values pair up one-to-one with the normal test set.
    """
    if lag < 0:
        raise ValueError("lag must be non-negative")
    return _build_split(config, "test", lag=lag, lag_control=control)[0]


def empirical_tau_spread(config, t, n_subjects=20000, seed=0, limb=ARM):
    """Monte-Carlo ``(mean, std)`` of ``tau - t`` at a fixed ``t`` over fresh latent draws."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n_subjects)
    tau = t + z * sigma_tau(t, config.limb_sigma_params(limb))
    return float(np.mean(tau - t)), float(np.std(tau - t, ddof=1))


def expected_shape_count(config):
    lo, hi = config.obs_per_subject
    return config.n_train_subjects * (lo + hi) / 2


def mean_shape(t, config=None):
    """Noise-free population-mean shape at time ``t`` (every tau equal to ``t``)."""
    config = config or StarmanConfig()
    T = template(config)
    return T + deform(T, np.full(4, float(t)), config)


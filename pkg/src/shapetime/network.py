"""Coordinate MLPs for the Gaussian displacement field and the inverse encoder.

The forward field maps ``(p, t)`` to a mean displacement and a lower
triangular Cholesky factor ``L`` of the covariance; the inverse encoder maps
``(p, d)`` to an intrinsic time.  Both are plain tanh MLPs evaluated in
batches with numpy.  Gradients come from a layer-wise reverse sweep
(:func:`backward`), which tests check against the scalar tape in
:mod:`shapetime.autodiff`.

Weights live in one flat float64 vector; :func:`unpack` hands out reshaped
views so optimizers and checkpoints only ever see the flat form.
"""
from dataclasses import dataclass, asdict

import numpy as np

from .errors import NonFiniteError

EPS_DIAG = 1e-4


@dataclass(frozen=True)
class NetArch:
    """Shape of a field (``kind='field'``) or inverse (``kind='inverse'``) network.

    A field is two tanh MLPs reading the same encoded ``(p, t)``: the mean
    branch (``hidden_layers x hidden_width``) and the covariance branch
    (``cov_hidden_layers x cov_hidden_width``) whose linear output holds the
    raw lower-triangular Cholesky entries.  An inverse encoder is a single
    MLP on ``encode(p) ++ d``.
    """

    kind: str = "field"
    d: int = 2
    hidden_layers: int = 4
    hidden_width: int = 128
    num_frequencies: int = 4
    cov_hidden_layers: int = 2
    cov_hidden_width: int = 64

    def __post_init__(self):
        if self.kind not in ("field", "inverse"):
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.d not in (2, 3):
            raise ValueError("spatial dimension must be 2 or 3")
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ValueError("need at least one hidden layer of positive width")
        if self.kind == "field" and (self.cov_hidden_layers < 1 or self.cov_hidden_width < 1):
            raise ValueError("covariance branch needs at least one hidden layer")
        if self.num_frequencies < 0:
            raise ValueError("num_frequencies must be >= 0")

    @property
    def input_dim(self):
        return self.d + 1 if self.kind == "field" else 2 * self.d

    @property
    def feature_dim(self):
        m = 1 + 2 * self.num_frequencies
        if self.kind == "field":
            return (self.d + 1) * m
        return self.d * m + self.d

    @property
    def output_heads(self):
        if self.kind == "field":
            return {"mean": self.d, "chol": self.d * (self.d + 1) // 2}
        return {"tau": 1}

    def branches(self):
        """``{head name: [(fan_in, fan_out), ...]}`` in flat-vector order."""
        def mlp(layers, width, out):
            return ([(self.feature_dim, width)] + [(width, width)] * (layers - 1)
                    + [(width, out)])

        heads = self.output_heads
        if self.kind == "inverse":
            return {"tau": mlp(self.hidden_layers, self.hidden_width, 1)}
        return {"mean": mlp(self.hidden_layers, self.hidden_width, heads["mean"]),
                "chol": mlp(self.cov_hidden_layers, self.cov_hidden_width, heads["chol"])}

    def layer_shapes(self):
        return [s for shapes in self.branches().values() for s in shapes]

    @property
    def n_weights(self):
        return sum(i * o + o for i, o in self.layer_shapes())

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class GaussianFieldParams:
    """Architecture plus flat weight vector of one network."""

    arch: NetArch
    weights: np.ndarray
    t_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.arch.n_weights,):
            raise ValueError(f"expected {self.arch.n_weights} weights, "
                             f"got {self.weights.shape}")

    @property
    def d(self):
        return self.arch.d

    def copy(self):
        return GaussianFieldParams(self.arch, self.weights.copy(), self.t_range)


def branch_slices(arch):
    """Flat-vector slice of each branch."""
    out, k = {}, 0
    for name, shapes in arch.branches().items():
        size = sum(i * o + o for i, o in shapes)
        out[name] = slice(k, k + size)
        k += size
    return out


def unpack(arch, weights):
    """``{branch: [(W, b), ...]}`` of views into the flat weight vector."""
    out, k = {}, 0
    for name, shapes in arch.branches().items():
        layers = []
        for fan_in, fan_out in shapes:
            W = weights[k:k + fan_in * fan_out].reshape(fan_in, fan_out)
            k += fan_in * fan_out
            b = weights[k:k + fan_out]
            k += fan_out
            layers.append((W, b))
        out[name] = layers
    return out


def init_params(arch, seed=0):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; covariance output layer zeroed."""
    rng = np.random.default_rng(seed)
    w = np.empty(arch.n_weights)
    k = 0
    for fan_in, fan_out in arch.layer_shapes():
        n = fan_in * fan_out + fan_out
        bound = 1.0 / np.sqrt(fan_in)
        w[k:k + n] = rng.uniform(-bound, bound, size=n)
        k += n
    if arch.kind == "field":
        fan_in, fan_out = arch.branches()["chol"][-1]
        end = branch_slices(arch)["chol"].stop
        w[end - fan_in * fan_out - fan_out:end] = 0.0
    return GaussianFieldParams(arch, w)


def encode_input(x, num_frequencies):
    """Raw coordinates followed by sin/cos of ``2**k``-scaled copies.

    ``x`` has shape ``(..., k)``; output has ``k * (1 + 2 * num_frequencies)``
    columns ordered ``[x, sin(x), cos(x), sin(2x), cos(2x), ...]``.
    """
    x = np.asarray(x, dtype=float)
    parts = [x]
    for k in range(num_frequencies):
        s = 2.0 ** k * x
        parts += [np.sin(s), np.cos(s)]
    return np.concatenate(parts, axis=-1)


def encode_input_tangent(x, num_frequencies, j):
    """Derivative of :func:`encode_input` features with respect to ``x[..., j]``."""
    x = np.asarray(x, dtype=float)
    e = np.zeros_like(x)
    e[..., j] = 1.0
    parts = [e]
    for k in range(num_frequencies):
        f = 2.0 ** k
        s = f * x
        parts += [f * np.cos(s) * e, -f * np.sin(s) * e]
    return np.concatenate(parts, axis=-1)


def field_features(p, t, num_frequencies):
    p = np.atleast_2d(np.asarray(p, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (len(p),))
    return encode_input(np.column_stack([p, t]), num_frequencies)


def inverse_features(p, d, num_frequencies):
    p = np.atleast_2d(np.asarray(p, dtype=float))
    d = np.atleast_2d(np.asarray(d, dtype=float))
    return np.column_stack([encode_input(p, num_frequencies), d])


def _mlp_forward(layers, h, dtype):
    hs = [h]
    for W, b in layers[:-1]:
        h = np.tanh(h @ W.astype(dtype, copy=False) + b.astype(dtype, copy=False))
        hs.append(h)
    W, b = layers[-1]
    return h @ W.astype(dtype, copy=False) + b.astype(dtype, copy=False), hs


def _mlp_backward(layers, hs, g, need_weights, need_input):
    dtype = hs[0].dtype
    grads = []
    W, _ = layers[-1]
    if need_weights:
        grads.append((hs[-1].T @ g, g.sum(axis=0)))
    gh = g @ W.T.astype(dtype, copy=False)
    for i in range(len(layers) - 2, -1, -1):
        W, _ = layers[i]
        h_out = hs[i + 1]
        ga = gh * (1.0 - h_out * h_out)
        if need_weights:
            grads.append((hs[i].T @ ga, ga.sum(axis=0)))
        if i > 0 or need_input:
            gh = ga @ W.T.astype(dtype, copy=False)
    flat = None
    if need_weights:
        flat = np.concatenate([np.concatenate([gW.ravel(), gb.ravel()])
                               for gW, gb in reversed(grads)])
    return flat, (gh if need_input else None)


def forward(arch, weights, feats, dtype=np.float64, branches=None):
    """Run the requested branches (default: all) on a feature batch.

    Returns ``({branch: output}, cache)``; the cache feeds :func:`backward`.
    """
    layers = unpack(arch, weights)
    h = np.asarray(feats, dtype=dtype)
    outs, cache = {}, {}
    for name in branches or layers:
        outs[name], cache[name] = _mlp_forward(layers[name], h, dtype)
    return outs, cache


def backward(arch, weights, cache, grads, need_weights=True, need_input=False):
    """Reverse sweep from ``grads = {branch: d loss / d output}``.

    Branches absent from ``grads`` get zero weight gradient.  Returns
    ``(flat float64 weight gradient or None, feature gradient or None)``.
    """
    layers = unpack(arch, weights)
    slices = branch_slices(arch)
    flat = np.zeros(arch.n_weights) if need_weights else None
    gx = None
    for name, g in grads.items():
        hs = cache[name]
        g = np.asarray(g, dtype=hs[0].dtype)
        fw, gin = _mlp_backward(layers[name], hs, g, need_weights, need_input)
        if need_weights:
            flat[slices[name]] = fw
        if need_input:
            gx = gin if gx is None else gx + gin
    return flat, gx


def tril_indices(d):
    """Row-major lower-triangle index pairs, diagonal included."""
    return [(i, j) for i in range(d) for j in range(i + 1)]


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def chol_from_raw(raw, d):
    """Assemble ``L`` from the covariance head: softplus + floor on the diagonal."""
    L = np.zeros(raw.shape[:-1] + (d, d), dtype=raw.dtype)
    for k, (i, j) in enumerate(tril_indices(d)):
        L[..., i, j] = softplus(raw[..., k]) + EPS_DIAG if i == j else raw[..., k]
    return L


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("network produced a non-finite output")


def _forward_chunked(arch, weights, feats, dtype, chunk=32768):
    parts = [forward(arch, weights, feats[k:k + chunk], dtype)[0]
             for k in range(0, max(len(feats), 1), chunk)]
    return {name: np.concatenate([o[name] for o in parts]) for name in parts[0]}


def forward_field(params, p, t, dtype=np.float64):
    """Mean displacement and Cholesky factor at template points ``p``, time ``t``.

    ``p`` is ``(D,)`` or ``(N, D)``; ``t`` a scalar or ``(N,)``.  A single
    point returns ``(mu (D,), L (D, D))``; a batch ``(N, D)`` and ``(N, D, D)``.
    """
    single = np.ndim(p) == 1
    feats = field_features(p, t, params.arch.num_frequencies)
    outs = _forward_chunked(params.arch, params.weights, feats, dtype)
    mu, L = outs["mean"], chol_from_raw(outs["chol"], params.d)
    _check_finite(mu, L)
    if single:
        return mu[0], L[0]
    return mu, L


def forward_field_raw(params, p, t, dtype=np.float64):
    """Like :func:`forward_field` but also returns the raw covariance head and cache."""
    feats = field_features(p, t, params.arch.num_frequencies)
    outs, cache = forward(params.arch, params.weights, feats, dtype)
    return outs["mean"], outs["chol"], cache, feats


def field_time_derivatives(params, p, t, chunk=32768):
    """``mu``, ``L`` and their partial derivatives in ``t`` at a batch of points.

    One reverse sweep per output component (``D + D(D+1)/2`` sweeps) gives the
    gradient of that component with respect to the input features, which is
    contracted with the feature tangent along ``t``.  Large batches are
    processed in chunks of ``chunk`` points.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (len(p),))
    parts = [_field_time_derivatives(params, p[k:k + chunk], t[k:k + chunk])
             for k in range(0, max(len(p), 1), chunk)]
    return tuple(np.concatenate(cols) for cols in zip(*parts))


def _field_time_derivatives(params, p, t):
    arch = params.arch
    d = arch.d
    p = np.atleast_2d(np.asarray(p, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (len(p),))
    x = np.column_stack([p, t])
    feats = encode_input(x, arch.num_frequencies)
    tangent = encode_input_tangent(x, arch.num_frequencies, d)
    outs, cache = forward(arch, params.weights, feats)
    mu, raw = outs["mean"], outs["chol"]
    rates = {}
    for name, out in outs.items():
        rates[name] = np.empty_like(out)
        for k in range(out.shape[1]):
            g = np.zeros_like(out)
            g[:, k] = 1.0
            _, gx = backward(arch, params.weights, cache, {name: g},
                             need_weights=False, need_input=True)
            rates[name][:, k] = np.einsum("nf,nf->n", gx, tangent)
    mu_t, raw_t = rates["mean"], rates["chol"]
    L = chol_from_raw(raw, d)
    L_t = np.zeros_like(L)
    for k, (i, j) in enumerate(tril_indices(d)):
        L_t[:, i, j] = sigmoid(raw[:, k]) * raw_t[:, k] if i == j else raw_t[:, k]
    _check_finite(mu, L, mu_t, L_t)
    return mu, L, mu_t, L_t


def covariance(L):
    return L @ np.swapaxes(L, -1, -2)


def covariance_derivative(L, L_t):
    LtL = L_t @ np.swapaxes(L, -1, -2)
    return LtL + np.swapaxes(LtL, -1, -2)


def forward_inverse(params, p, d, dtype=np.float64):
    """Intrinsic-time estimate for template points ``p`` with displacements ``d``."""
    single = np.ndim(p) == 1
    feats = inverse_features(p, d, params.arch.num_frequencies)
    tau = _forward_chunked(params.arch, params.weights, feats, dtype)["tau"][:, 0]
    _check_finite(tau)
    return float(tau[0]) if single else tau


# -- scalar-tape mirror, used to cross-check the batched sweep ---------------

def record_mlp(tape, arch, weight_vars, feats):
    """Record every branch for one feature vector on ``tape``.

    Returns ``{branch: [Var, ...]}``, matching :func:`forward`.
    """
    from .autodiff import Var

    x = [f if isinstance(f, Var) else tape.const(f) for f in feats]
    outs, k = {}, 0
    for name, shapes in arch.branches().items():
        h = x
        for n, (fan_in, fan_out) in enumerate(shapes):
            W = weight_vars[k:k + fan_in * fan_out]
            k += fan_in * fan_out
            b = weight_vars[k:k + fan_out]
            k += fan_out
            cols = [[W[r * fan_out + c] for r in range(fan_in)] for c in range(fan_out)]
            h = [z + bc for z, bc in zip(tape.matvec(cols, h), b)]
            if n < len(shapes) - 1:
                h = [a.tanh() for a in h]
        outs[name] = h
    return outs


def record_field(tape, params_vars, arch, p, t):
    """Record ``mu`` and ``L`` (nested lists of Var) for one point on ``tape``.

    ``t`` may be a float or a Var (to differentiate with respect to time).
    """
    from .autodiff import Var

    x = [tape.const(v) for v in p] + [t if isinstance(t, Var) else tape.const(t)]
    feats = list(x)
    for k in range(arch.num_frequencies):
        s = [xi * (2.0 ** k) for xi in x]
        feats += [si.sin() for si in s] + [si.cos() for si in s]
    outs = record_mlp(tape, arch, params_vars, feats)
    mu, raw = outs["mean"], outs["chol"]
    d = arch.d
    L = [[None] * d for _ in range(d)]
    for k, (i, j) in enumerate(tril_indices(d)):
        L[i][j] = raw[k].softplus() + EPS_DIAG if i == j else raw[k]
    return mu, L

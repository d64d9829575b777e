"""Shared test utilities: random expression trees, hand-built fields and an
analytic field that stands in for the network inside the fisher module."""
import math
import pathlib

import numpy as np

from shapetime import network as nw
from shapetime.autodiff import Tape

# -- random expressions ------------------------------------------------------

UNARY = ("neg", "tanh", "sin", "cos", "exp", "log", "softplus", "pow_const")
BINARY = ("add", "sub", "mul", "div", "pow_var", "dot")


def random_tree(rng, depth, n_inputs):
    """A random expression tree of at most ``depth`` levels over ``n_inputs`` leaves."""
    if depth <= 1 or rng.random() < 0.15:
        if rng.random() < 0.8:
            return ("x", int(rng.integers(n_inputs)))
        return ("c", float(rng.uniform(-2, 2)))
    if rng.random() < 0.5:
        op = UNARY[rng.integers(len(UNARY))]
        if op == "pow_const":
            return (op, random_tree(rng, depth - 1, n_inputs), float(rng.choice([2.0, 3.0, 0.5, -1.0])))
        return (op, random_tree(rng, depth - 1, n_inputs))
    op = BINARY[rng.integers(len(BINARY))]
    return (op, random_tree(rng, depth - 1, n_inputs), random_tree(rng, depth - 1, n_inputs))


def _positive(v):
    # v*v + 0.5 keeps log/div/pow arguments in their domain
    return v * v + 0.5


def record_tree(tree, xs):
    """Record ``tree`` on the tape of the input Vars ``xs``."""
    tape = xs[0].tape
    kind = tree[0]
    if kind == "x":
        return xs[tree[1]]
    if kind == "c":
        return tape.const(tree[1])
    a = record_tree(tree[1], xs)
    if kind == "neg":
        return -a
    if kind == "tanh":
        return a.tanh()
    if kind == "sin":
        return a.sin()
    if kind == "cos":
        return a.cos()
    if kind == "exp":
        return a.tanh().exp()
    if kind == "log":
        return _positive(a).log()
    if kind == "softplus":
        return a.softplus()
    if kind == "pow_const":
        return _positive(a) ** tree[2]
    b = record_tree(tree[2], xs)
    if kind == "add":
        return a + b
    if kind == "sub":
        return a - b
    if kind == "mul":
        return a * b
    if kind == "div":
        return a / _positive(b)
    if kind == "pow_var":
        return _positive(a) ** b.tanh()
    if kind == "dot":
        from shapetime.autodiff import dot
        return dot([a, b], [b.sin(), a.cos()])
    raise ValueError(kind)


def eval_tree(tree, point):
    tape = Tape()
    xs = [tape.var(v) for v in point]
    return record_tree(tree, xs).value


def tree_gradcheck(tree, point, h=1e-5):
    """Max relative error of tape gradients against central differences.

    Returns ``(max_rel_err, value)``; the relative error uses an absolute floor
    of 1e-8 near zero.
    """
    tape = Tape()
    xs = [tape.var(v) for v in point]
    y = record_tree(tree, xs)
    grads = tape.backward(y)
    worst = 0.0
    for i, v in enumerate(point):
        g = grads.get(xs[i].id, 0.0)
        up, dn = list(point), list(point)
        up[i] = v + h
        dn[i] = v - h
        fd = (eval_tree(tree, up) - eval_tree(tree, dn)) / (2 * h)
        err = abs(g - fd) / max(abs(fd), 1e-8) if abs(g - fd) > 1e-8 else 0.0
        worst = max(worst, err)
    return worst, y.value


def seeded_gradcheck(n_expr=100, max_depth=8, seed=0):
    """Worst relative error over ``n_expr`` random expressions with inputs in [-2, 2]."""
    rng = np.random.default_rng(seed)
    errs = []
    while len(errs) < n_expr:
        n_in = int(rng.integers(1, 4))
        tree = random_tree(rng, int(rng.integers(2, max_depth + 1)), n_in)
        point = rng.uniform(-2, 2, size=n_in).tolist()
        err, val = tree_gradcheck(tree, point)
        if not math.isfinite(val) or abs(val) > 1e3:
            continue
        errs.append(err)
    return np.array(errs)


# -- hand-built fields ----------------------------------------------------------

def inv_softplus(y):
    return y + math.log(-math.expm1(-y))


def constant_field(mu, L, num_frequencies=0, hidden_width=4):
    """A real network whose output is the constant ``(mu, L)`` everywhere."""
    mu = np.asarray(mu, dtype=float)
    L = np.asarray(L, dtype=float)
    D = len(mu)
    arch = nw.NetArch("field", d=D, hidden_layers=1, hidden_width=hidden_width,
                      num_frequencies=num_frequencies, cov_hidden_layers=1,
                      cov_hidden_width=hidden_width)
    w = np.zeros(arch.n_weights)
    params = nw.GaussianFieldParams(arch, w)
    layers = nw.unpack(arch, params.weights)
    layers["mean"][-1][1][:] = mu
    raw = [inv_softplus(L[i, j] - nw.EPS_DIAG) if i == j else L[i, j]
           for i, j in nw.tril_indices(D)]
    layers["chol"][-1][1][:] = raw
    return params


def random_field(seed=0, d=2, width=8, layers=2, num_frequencies=2, chol_scale=0.3):
    """Small random field whose covariance also varies with ``(p, t)``."""
    arch = nw.NetArch("field", d=d, hidden_layers=layers, hidden_width=width,
                      num_frequencies=num_frequencies, cov_hidden_layers=layers,
                      cov_hidden_width=width)
    params = nw.init_params(arch, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    W, b = nw.unpack(arch, params.weights)["chol"][-1]
    W[:] = rng.uniform(-chol_scale, chol_scale, size=W.shape)
    b[:] = rng.uniform(-chol_scale, chol_scale, size=b.shape)
    return params


class AnalyticField:
    """Closed-form ``mu(t)`` and ``L(t)`` (independent of ``p``) with known derivatives."""

    def __init__(self, mu, mu_t, L, L_t, d=2, t_range=(0.0, 1.0)):
        self.mu, self.mu_t, self.L, self.L_t = mu, mu_t, L, L_t
        self.d = d
        self.t_range = t_range


def _broadcast_t(p, t):
    p = np.atleast_2d(np.asarray(p, dtype=float))
    return p, np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (len(p),))


def install_analytic(monkeypatch):
    """Route ``field_time_derivatives`` and ``forward_field`` through :class:`AnalyticField`."""
    real_der = nw.field_time_derivatives
    real_fwd = nw.forward_field

    def der(params, p, t, chunk=32768):
        if not isinstance(params, AnalyticField):
            return real_der(params, p, t, chunk)
        p, t = _broadcast_t(p, t)
        return (np.array([params.mu(s) for s in t]), np.array([params.L(s) for s in t]),
                np.array([params.mu_t(s) for s in t]), np.array([params.L_t(s) for s in t]))

    def fwd(params, p, t, dtype=np.float64):
        if not isinstance(params, AnalyticField):
            return real_fwd(params, p, t, dtype)
        single = np.ndim(p) == 1
        p, t = _broadcast_t(p, t)
        mu = np.array([params.mu(s) for s in t])
        L = np.array([params.L(s) for s in t])
        return (mu[0], L[0]) if single else (mu, L)

    monkeypatch.setattr(nw, "field_time_derivatives", der)
    monkeypatch.setattr(nw, "forward_field", fwd)


def location_field(a=(1.0, 0.0), sigma=1.0):
    """``mu(t) = a t``, ``Sigma = sigma^2 I`` in two dimensions."""
    a = np.asarray(a, dtype=float)
    return AnalyticField(lambda t: a * t, lambda t: a.copy(),
                         lambda t: sigma * np.eye(2), lambda t: np.zeros((2, 2)))


def exp_scale_field(d=2):
    """Constant mean, ``Sigma(t) = exp(2t) I`` (``L = exp(t) I``)."""
    return AnalyticField(lambda t: np.zeros(d), lambda t: np.zeros(d),
                         lambda t: math.exp(t) * np.eye(d), lambda t: math.exp(t) * np.eye(d), d=d)


# -- command-line pipeline ----------------------------------------------------

GEN_CFG = "n_train_subjects = 12\nn_test_subjects = 12\n"
TRAIN_CFG = ("epochs = 3\nwarm_epochs = 1\nbatch_size = 256\n"
             "hidden_layers = 2\nhidden_width = 16\ncov_hidden_width = 8\n")
INV_CFG = "steps = 40\nbatch_size = 128\n"

CLI_OUTPUTS = ["starman_G_train.psd", "starman_G_test.psd", "field.pck", "train_log.csv",
           "inverse.pck", "inverse_log.csv", "time_estimates.csv", "time_maps.csv",
           "predictions.csv", "ood_scores.csv", "ood_summary.csv", "fisher_validation.csv",
           "table2.csv", "table3.csv", "table4.csv", "table5.csv", "fig3.svg", "fig4.svg"]


def run_pipeline(root):
    """Run every command on a tiny problem; returns the exit codes."""
    root = pathlib.Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for name, text in (("gen.cfg", GEN_CFG), ("train.cfg", TRAIN_CFG), ("inv.cfg", INV_CFG)):
        (root / name).write_text(text)
    out = str(root)
    train_ds, test_ds = str(root / "starman_G_train.psd"), str(root / "starman_G_test.psd")
    ckpt = str(root / "field.pck")
    evaluation = ["--ckpt", ckpt, "--dataset", test_ds, "--out-dir", out]
    steps = [
        ["generate", "--variant", "G", "--config", str(root / "gen.cfg"), "--out-dir", out],
        ["train", "--dataset", train_ds, "--config", str(root / "train.cfg"), "--out-dir", out],
        ["train-inverse", "--ckpt", ckpt, "--dataset", train_ds, "--config",
         str(root / "inv.cfg"), "--out-dir", out],
        ["infer-time", *evaluation, "--maps"],
        ["predict", *evaluation, "--t1", "0.9"],
        ["ood", *evaluation, "--lag", "0.3"],
        ["validate-fisher", "--ckpt", ckpt, "--dataset", train_ds, "--grid", "3",
         "--mc-samples", "2e5", "--out-dir", out],
        ["report", *evaluation, "--threads", "1"],
    ]
    from shapetime import cli

    return [(s[0], cli.run(s)) for s in steps]

"""Command-line pipeline: generate, train, train-inverse, infer-time, predict,
ood, validate-fisher and report.

Every command takes ``--seed``, ``--out-dir``, ``--threads`` and ``--config``
(a ``key=value`` file whose entries act as defaults; explicit flags win).
Exit codes: 0 success, 1 usage error, 2 validation failure, 3 runtime error.
Log level comes from ``PRISM_LOG`` (error, info or debug).
"""
import argparse
import csv
import dataclasses
import logging
import math
import os
import sys

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("shapetime.cli")


class UsageError(Exception):
    pass


class ValidationFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- parser ------------------------------------------------------------------

def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _nonneg_int(s):
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _nonneg_float(s):
    v = float(s)
    if not v >= 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=_nonneg_int, default=0)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--threads", type=_positive_int, default=None)
    common.add_argument("--config", default=None, help="key=value file of defaults")

    parser = _Parser(prog="prism", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    cmds = {}

    def add(name, help_):
        cmds[name] = sub.add_parser(name, parents=[common], help=help_)
        return cmds[name]

    p = add("generate", "write a synthetic Starman dataset")
    p.add_argument("--variant", choices=["G", "L"], default="G")
    p.add_argument("--out", default=None, help="single output file (one split)")
    p.add_argument("--split", choices=["train", "test"], default=None)
    p.add_argument("--lag", type=_nonneg_float, default=0.0,
                   help="write the test split with one limb lagged by this much")

    p = add("train", "fit the Gaussian displacement field")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=_positive_int, default=None)
    p.add_argument("--warm-epochs", type=_nonneg_int, default=None)
    p.add_argument("--out", default=None, help="checkpoint path (default OUT_DIR/field.pck)")

    p = add("train-inverse", "fit the amortised time encoder")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True, help="dataset whose template points to sample")
    p.add_argument("--out", default=None, help="checkpoint path (default OUT_DIR/inverse.pck)")

    def evaluation(p):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--inverse", default=None,
                       help="encoder checkpoint (default: inverse.pck next to --ckpt)")
        p.add_argument("--dataset", required=True)

    p = add("infer-time", "per-shape intrinsic-time estimates")
    evaluation(p)
    p.add_argument("--maps", action="store_true", help="also write every per-point time map")

    p = add("predict", "forecast each shape to time t1")
    evaluation(p)
    p.add_argument("--t1", type=float, required=True)
    p.add_argument("--t0", type=float, default=None,
                   help="override the observation time of every input shape")

    p = add("ood", "normalised-lag anomaly scores")
    evaluation(p)
    p.add_argument("--lag", type=_nonneg_float, default=0.0,
                   help="also score a synthetic lagged copy of the dataset and report AUC")

    p = add("validate-fisher", "closed-form Fisher information vs Monte Carlo")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", default=None, help="draw p from this dataset's template points")
    p.add_argument("--grid", type=_positive_int, default=20)
    p.add_argument("--mc-samples", type=lambda s: _positive_int(str(int(float(s)))),
                   default=10**6)

    p = add("report", "tables and figures for one trained model")
    evaluation(p)
    p.add_argument("--lag", type=_nonneg_float, default=0.3,
                   help="lag of the synthetic anomaly set for table5 (0 disables)")
    return parser, cmds


def _read_config(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def parse_args(argv):
    parser, cmds = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("prism: a command is required (see --help)")
    args.extra = {}
    if args.config:
        if not os.path.isfile(args.config):
            raise UsageError(f"config file not found: {args.config}")
        sub = cmds[args.command]
        actions = {a.dest: a for a in sub._actions}
        given = _explicit_dests(sub, argv[1:])
        for key, value in _read_config(args.config).items():
            if key in actions and key not in ("help", "config"):
                if key in given:
                    continue
                action = actions[key]
                conv = action.type or str
                try:
                    setattr(args, key, value.lower() in ("1", "true", "yes")
                            if isinstance(action, argparse._StoreTrueAction) else conv(value))
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise UsageError(f"config {key}={value}: {exc}") from None
            else:
                args.extra[key] = value
    return args


def _explicit_dests(sub, argv):
    dests = set()
    for action in sub._actions:
        if any(tok == opt or tok.startswith(opt + "=") for opt in action.option_strings
               for tok in argv):
            dests.add(action.dest)
    return dests


def _apply_extra(cls, base, extra, used):
    """Override dataclass ``cls`` fields from ``extra`` (string values)."""
    names = {f.name: f for f in dataclasses.fields(cls)}
    kw = dict(base)
    for key, value in extra.items():
        if key not in names:
            continue
        used.add(key)
        current = kw.get(key, getattr(cls, key, None))
        kw[key] = _coerce(value, current)
    return kw


def _coerce(value, like):
    if value.lower() in ("none", "null"):
        return None
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float) or like is None:
        try:
            return float(value)
        except ValueError:
            return value
    if isinstance(like, tuple):
        return tuple(float(v) for v in value.strip("()[] ").split(","))
    return value


def _check_extra(extra, used):
    unknown = sorted(set(extra) - used)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")


def _need_file(path, what):
    if path is None or not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _inverse_path(args):
    path = args.inverse or os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), "inverse.pck")
    _need_file(path, "inverse-encoder checkpoint (--inverse)")
    return path


# -- helpers -----------------------------------------------------------------

def _out(args, name):
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _hash_line(**paths):
    from .io import file_sha256

    parts = [f"{k}_sha256={file_sha256(v)}" for k, v in paths.items() if v]
    return "# " + " ".join(parts)


def _write_csv(path, header_comment, columns, rows):
    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return "" if math.isnan(v) else repr(float(v))
        if isinstance(v, np.integer):
            return int(v)
        return v

    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        fh.write(header_comment + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    os.replace(tmp, path)
    log.info("wrote %s", path)


def _load_field(path):
    from .io import load_checkpoint

    ckpt = load_checkpoint(path)
    if ckpt.arch.kind != "field":
        raise UsageError(f"{path} is not a field checkpoint")
    return ckpt.params()


def _load_inverse(path):
    from .io import load_checkpoint

    ckpt = load_checkpoint(path)
    if ckpt.arch.kind != "inverse":
        raise UsageError(f"{path} is not an inverse-encoder checkpoint")
    return ckpt.params()


def _template_points(dataset):
    """Unique template points ordered by vertex index."""
    _, first = np.unique(dataset.vertex, return_index=True)
    return dataset.p[first]


def _starman_config(header):
    from .starman import StarmanConfig

    prov = (header or {}).get("provenance") or {}
    if prov.get("generator") != "starman":
        return None
    return StarmanConfig.from_dict(prov["config"])


def lipschitz_t(params, points, n_t=21, h=1e-6):
    """Largest ``|mu(p, t + h) - mu(p, t)| / h`` over ``points`` and a ``t`` grid."""
    from . import network as nw

    lo, hi = params.t_range
    ts = np.linspace(lo, hi - h, n_t)
    P = np.repeat(points, n_t, axis=0)
    T = np.tile(ts, len(points))
    mu0, _ = nw.forward_field(params, P, T)
    mu1, _ = nw.forward_field(params, P, T + h)
    return float(np.max(np.linalg.norm(mu1 - mu0, axis=1)) / h)


# -- commands ----------------------------------------------------------------

def cmd_generate(args):
    from . import starman
    from .io import write_dataset, dataset_header

    used = set()
    base = {"variant": args.variant, "seed": args.seed}
    config = starman.StarmanConfig(**_apply_extra(starman.StarmanConfig, base, args.extra, used))
    _check_extra(args.extra, used)
    if args.out and args.split is None:
        args.split = "test" if args.lag else "train"
    if args.lag and args.split == "train":
        raise UsageError("--lag applies to the test split only")
    splits = [args.split] if args.split else ["train", "test"]
    for split in splits:
        if args.lag:
            ds = starman.make_synthetic_ood(config, args.lag, control=0)
            name = f"starman_{config.variant}_ood.psd"
        else:
            ds = starman.generate_split(config, split)
            name = f"starman_{config.variant}_{split}.psd"
        prov = {"generator": "starman", "config": config.to_dict(), "split": split,
                "lag": args.lag, "control": 0}
        path = args.out or _out(args, name)
        write_dataset(path, ds, dataset_header(ds, provenance=prov, seed=config.seed))
        log.info("wrote %s (%d points, %d shapes)", path, len(ds), ds.n_shapes)


def cmd_train(args):
    from . import network as nw
    from .gaussian_field import TrainConfig, train
    from .io import read_dataset, save_checkpoint, Checkpoint

    _need_file(args.dataset, "dataset")
    used = set()
    base = {"seed": args.seed}
    if args.epochs is not None:
        base["epochs"] = args.epochs
    if args.warm_epochs is not None:
        base["warm_epochs"] = args.warm_epochs
    arch_keys = {f.name for f in dataclasses.fields(nw.NetArch)} - {"kind", "d"}
    arch_kw = {k: int(v) for k, v in args.extra.items() if k in arch_keys}
    used |= set(arch_kw)
    try:
        config = TrainConfig(**_apply_extra(TrainConfig, base, args.extra, used))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _check_extra(args.extra, used)
    dataset, _ = read_dataset(args.dataset)
    arch = nw.NetArch("field", d=dataset.dim, **arch_kw)
    params, trainlog = train(dataset, config, arch)
    meta = {"lipschitz_t": lipschitz_t(params, _template_points(dataset))}
    ckpt = Checkpoint.from_params(params, config, dataset.fingerprint(), metadata=meta)
    path = args.out or _out(args, "field.pck")
    save_checkpoint(path, ckpt)
    trainlog.write_csv(_out(args, "train_log.csv"),
                       _hash_line(dataset=args.dataset)[2:])


def cmd_train_inverse(args):
    from .inverse_encoder import InverseConfig, train_inverse
    from .io import read_dataset, save_checkpoint, Checkpoint

    _need_file(args.ckpt, "checkpoint")
    _need_file(args.dataset, "dataset")
    used = set()
    try:
        config = InverseConfig(**_apply_extra(InverseConfig, {"seed": args.seed}, args.extra, used))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _check_extra(args.extra, used)
    params = _load_field(args.ckpt)
    dataset, _ = read_dataset(args.dataset)
    inv, ilog = train_inverse(params, _template_points(dataset), config)
    path = args.out or _out(args, "inverse.pck")
    save_checkpoint(path, Checkpoint.from_params(inv, config, dataset.fingerprint()))
    _write_csv(_out(args, "inverse_log.csv"),
               _hash_line(ckpt=args.ckpt, dataset=args.dataset), ["step", "l1"],
               [(r["step"], r["l1"]) for r in ilog.rows])


def _evaluation_inputs(args):
    from .io import read_dataset

    _need_file(args.ckpt, "checkpoint")
    _need_file(args.dataset, "dataset")
    inv_path = _inverse_path(args)
    _check_extra(args.extra, set())
    params = _load_field(args.ckpt)
    inv = _load_inverse(inv_path)
    dataset, header = read_dataset(args.dataset)
    hashes = _hash_line(ckpt=args.ckpt, inverse=inv_path, dataset=args.dataset)
    return params, inv, dataset, header, hashes


def cmd_infer_time(args):
    from . import analysis as an

    params, inv, dataset, _, hashes = _evaluation_inputs(args)
    st = an.evaluate_time_estimation(dataset, params, inv)
    rows = zip(st.obs_id, st.subject_id, st.t, st.tau_mean, st.tau_weighted, st.tau_gt)
    _write_csv(_out(args, "time_estimates.csv"), hashes,
               ["obs_id", "subject_id", "t", "tau_mean", "tau_weighted", "tau_gt"], rows)
    if args.maps:
        from .fisher import I_MU_FLOOR

        lo, hi = params.t_range
        D = dataset.dim
        rows = ([st.obs_id[s], dataset.vertex[i], *dataset.p[i], st.point_tau[i],
                 min(max(st.point_tau[i], lo), hi), int(st.point_I_mu[i] < I_MU_FLOOR)]
                for i, s in enumerate(st.point_shape))
        _write_csv(_out(args, "time_maps.csv"), hashes,
                   ["obs_id", "point"] + [f"p{k}" for k in range(D)]
                   + ["tau_raw", "tau_clipped", "low_I_mu"], rows)


def cmd_predict(args):
    import warnings
    from . import analysis as an
    from .errors import ExtrapolationWarning

    params, inv, dataset, _, hashes = _evaluation_inputs(args)
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtrapolationWarning)
        lo, hi = params.t_range
        if not lo <= args.t1 <= hi:
            log.warning("t1=%g outside training range [%g, %g]", args.t1, lo, hi)
        for oid, idx in sorted(dataset.shapes(), key=lambda g: g[0]):
            t0 = dataset.t[idx[0]] if args.t0 is None else args.t0
            pred = an.predict_longitudinal(dataset.p[idx], dataset.d[idx], t0, params, inv, args.t1)
            for v, pt in zip(dataset.vertex[idx], pred.points):
                rows.append([oid, v, *pt, t0, pred.tau0, pred.z, pred.tau1])
    D = dataset.dim
    _write_csv(_out(args, "predictions.csv"), hashes,
               ["obs_id", "vertex"] + [f"y{k}" for k in range(D)] + ["t0", "tau0", "z", "tau1"],
               rows)


def _ood_rows(times, dataset, label):
    from . import analysis as an

    order = np.argsort(times.point_shape, kind="stable")
    bounds = np.r_[0, np.cumsum(np.bincount(times.point_shape, minlength=len(times.obs_id)))]
    rows = []
    for s in range(len(times.obs_id)):
        idx = order[bounds[s]:bounds[s + 1]]
        res = an.ood_score(times.point_tau[idx], I_mu=times.point_I_mu[idx])
        rows.append([times.obs_id[s], times.t[s], res.score, dataset.vertex[idx[res.argmin_point]],
                     res.tau_max, label])
    return rows


def cmd_ood(args):
    from . import analysis as an, starman

    params, inv, dataset, header, hashes = _evaluation_inputs(args)
    st = an.evaluate_time_estimation(dataset, params, inv)
    rows = _ood_rows(st, dataset, "normal" if args.lag else "")
    if args.lag:
        config = _starman_config(header)
        if config is None:
            raise UsageError("--lag needs a synthetic Starman dataset")
        anomalous = starman.make_synthetic_ood(config, args.lag)
        st_a = an.evaluate_time_estimation(anomalous, params, inv)
        rows_a = _ood_rows(st_a, anomalous, "anomalous")
        auc = an.ood_auc([r[2] for r in rows], [r[2] for r in rows_a])
        rows += rows_a
        _write_csv(_out(args, "ood_summary.csv"), hashes,
                   ["lag", "n_normal", "n_anomalous", "auc"],
                   [[args.lag, len(st.obs_id), len(st_a.obs_id), auc]])
        print(f"AUC {auc:.4f}")
    _write_csv(_out(args, "ood_scores.csv"), hashes,
               ["obs_id", "t", "score", "argmin_vertex", "tau_max", "label"], rows)


def cmd_validate_fisher(args):
    from . import fisher
    from .io import read_dataset

    _need_file(args.ckpt, "checkpoint")
    if args.dataset:
        _need_file(args.dataset, "dataset")
    if args.mc_samples < 10**4:
        raise UsageError("--mc-samples must be at least 10000")
    _check_extra(args.extra, set())
    params = _load_field(args.ckpt)
    rng = np.random.default_rng(args.seed)
    lo, hi = params.t_range
    if args.dataset:
        points = _template_points(read_dataset(args.dataset)[0])
        P = points[rng.integers(0, len(points), size=args.grid)]
    else:
        P = rng.uniform(-1.0, 1.0, size=(args.grid, params.d))
    T = rng.uniform(lo, hi, size=args.grid)
    rows, failures = [], 0
    for k in range(args.grid):
        rep = fisher.fisher_full(params, P[k], T[k])
        mc = fisher.mc_fisher(params, P[k], T[k], args.mc_samples, seed=args.seed * 7919 + k)
        tol = max(0.02 * abs(rep.I_full), 3 * mc.mc_I_se)
        ok = abs(rep.I_full - mc.mc_I) <= tol
        failures += not ok
        rows.append([k, *P[k], T[k], rep.I_mu, rep.I_sigma, rep.I_full, mc.mc_I, mc.mc_I_se,
                     abs(rep.I_full - mc.mc_I) / abs(rep.I_full), mc.score_mean / mc.score_mean_se,
                     mc.cross_cov / mc.cross_cov_se, int(ok)])
    _write_csv(_out(args, "fisher_validation.csv"), _hash_line(ckpt=args.ckpt),
               ["point"] + [f"p{k}" for k in range(params.d)]
               + ["t", "I_mu", "I_sigma", "I_full", "mc_I", "mc_se", "rel_err",
                  "score_mean_z", "cross_z", "pass"], rows)
    print(f"{args.grid - failures}/{args.grid} points within tolerance")
    if failures:
        raise ValidationFailure(f"{failures} of {args.grid} points exceed max(2%, 3 SE)")


def cmd_report(args):
    from . import analysis as an, plots, starman
    from .analysis import population_sigma_tau

    params, inv, dataset, header, hashes = _evaluation_inputs(args)
    st = an.evaluate_time_estimation(dataset, params, inv)
    has_gt = not np.isnan(st.tau_gt).any()

    rows = []
    if has_gt:
        for name, est in (("mean", st.tau_mean), ("fisher_weighted", st.tau_weighted)):
            m = an.scalar_metrics(est, st.tau_gt)
            rows.append([name, len(est), m["r"], m["R2"], m["MAE"]])
    _write_csv(_out(args, "table2.csv"), hashes, ["estimator", "n_shapes", "r", "R2", "MAE"],
               rows)

    rows = []
    from .gaussian_field import LIMB_NAMES
    for k, limb in enumerate(LIMB_NAMES):
        ok = ~np.isnan(st.limb_gt[:, k])
        if ok.sum() < 2:
            continue
        for name, est in (("mean", st.limb_mean[:, k]), ("fisher_weighted", st.limb_weighted[:, k])):
            m = an.scalar_metrics(est[ok], st.limb_gt[ok, k])
            rows.append([limb, name, int(ok.sum()), m["r"], m["R2"], m["MAE"]])
    _write_csv(_out(args, "table3.csv"), hashes,
               ["region", "estimator", "n_shapes", "r", "R2", "MAE"], rows)

    lr = an.evaluate_longitudinal(dataset, params, st, seed=args.seed)
    rows = [[len(lr.pairs), 100 * lr.CD.mean(), 100 * lr.HD.mean(), 100 * lr.EMD.mean()]]
    _write_csv(_out(args, "table4.csv"), hashes,
               ["n_pairs", "CD_x100", "HD_x100", "EMD_x100"], rows)

    config = _starman_config(header)
    if args.lag and config is not None:
        anomalous = starman.make_synthetic_ood(config, args.lag)
        st_a = an.evaluate_time_estimation(anomalous, params, inv)
        auc = an.ood_auc(an.shape_ood_scores(st), an.shape_ood_scores(st_a))
        _write_csv(_out(args, "table5.csv"), hashes, ["lag", "n_shapes", "AUC"],
                   [[args.lag, len(st.obs_id), auc]])

    points = _template_points(dataset)
    lo, hi = params.t_range
    grid = np.linspace(lo, hi, 41)
    band = np.array([population_sigma_tau(params, points, t) for t in grid])
    plots.time_scatter(_out(args, "fig3.svg"), st.t, st.tau_mean,
                       st.tau_gt if has_gt else st.tau_mean, grid, band,
                       title="intrinsic time vs chronological time")

    from . import fisher
    if config is not None:
        names = ("right arm tip", "left arm tip", "left leg tip", "right leg tip")
        locs = [(names[i], template_point, config.limb_sigma_params(config.control_limb[i]))
                for i, template_point in enumerate(starman.control_points(config))]
    else:
        locs = [(f"point {i}", points[i], None) for i in (0, len(points) // 2)]
    curves = {}
    for name, p, sp in locs:
        I_mu, _, _ = fisher.fisher_terms(params, np.tile(p, (len(grid), 1)), grid)
        with np.errstate(divide="ignore"):
            est = np.sqrt(1.0 / I_mu)
        true = starman.sigma_tau(grid, sp) if sp is not None else np.full(len(grid), np.nan)
        curves[name] = (true, est)
    plots.sigma_bands(_out(args, "fig4.svg"), grid, curves,
                      title="temporal uncertainty: ground truth vs model")


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "train-inverse": cmd_train_inverse,
    "infer-time": cmd_infer_time,
    "predict": cmd_predict,
    "ood": cmd_ood,
    "validate-fisher": cmd_validate_fisher,
    "report": cmd_report,
}


def _setup_logging():
    level = os.environ.get("PRISM_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"PRISM_LOG must be one of {', '.join(levels)}")
    logging.basicConfig(level=levels[level], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def run(argv=None):
    """Run one command; returns the exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _setup_logging()
        args = parse_args(argv)
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                COMMANDS[args.command](args)
        else:
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationFailure as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every crash maps to exit code 3
        log.debug("traceback", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())

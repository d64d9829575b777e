"""Dataset (``.psd``) and checkpoint (``.pck``) files.

Both formats open with a magic line ``<MAGIC> <format_version>``.

A dataset continues with one JSON header object on line 2 and one JSON
sample per line after that.  Floats are written with ``repr`` so every value
round-trips exactly.

A checkpoint continues with one JSON header line (architecture, training
config, dataset fingerprint, weight count and digest) followed by the raw
little-endian float64 weight block.
"""
from dataclasses import dataclass, field
import hashlib
import json
import os
import tempfile

import numpy as np

from . import network as nw
from .errors import FormatError, SchemaError, VersionError
from .gaussian_field import ShapeDataset, LIMB_NAMES

DATASET_MAGIC = "PRISM-PSD"
CHECKPOINT_MAGIC = "PRISM-PCK"
FORMAT_VERSION = 1

_REQUIRED = ("p", "d", "t", "subject_id")


def _atomic_write(path, data):
    """Write ``data`` (bytes) to a temp file in the target directory, then rename."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _magic_line(line, magic):
    parts = line.strip().split()
    if len(parts) != 2 or parts[0] != magic:
        raise FormatError(f"not a {magic} file", line=1)
    try:
        version = int(parts[1])
    except ValueError:
        raise FormatError(f"bad format_version {parts[1]!r}", line=1) from None
    if version != FORMAT_VERSION:
        raise VersionError(version, FORMAT_VERSION)
    return version


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# -- datasets ----------------------------------------------------------------

def dataset_header(dataset, provenance=None, seed=None, time_units="normalized"):
    return {"D": dataset.dim, "t_range": list(dataset.t_range), "time_units": time_units,
            "seed": seed, "provenance": provenance}


def _fmt(v):
    return repr(float(v))


def write_dataset(path, dataset, header=None):
    """Write ``dataset`` as a ``.psd`` file (atomic)."""
    header = dict(header or dataset_header(dataset))
    header["D"] = dataset.dim
    header.setdefault("t_range", list(dataset.t_range))
    lines = [f"{DATASET_MAGIC} {FORMAT_VERSION}", json.dumps(header, sort_keys=True)]
    for i in range(len(dataset)):
        p = ", ".join(_fmt(v) for v in dataset.p[i])
        d = ", ".join(_fmt(v) for v in dataset.d[i])
        tau = "null" if np.isnan(dataset.tau_gt[i]) else _fmt(dataset.tau_gt[i])
        limb = "null" if dataset.limb[i] < 0 else f'"{LIMB_NAMES[dataset.limb[i]]}"'
        lines.append(
            f'{{"p": [{p}], "d": [{d}], "t": {_fmt(dataset.t[i])}, '
            f'"subject_id": {int(dataset.subject_id[i])}, "obs_id": {int(dataset.obs_id[i])}, '
            f'"vertex": {int(dataset.vertex[i])}, "tau_gt": {tau}, "limb": {limb}}}')
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def _vector(rec, key, D, lineno):
    v = rec[key]
    if not isinstance(v, list) or not all(isinstance(x, (int, float)) for x in v):
        raise SchemaError(f"field {key!r} must be a list of numbers", line=lineno)
    if len(v) != D:
        raise SchemaError(f"field {key!r} has dimension {len(v)}, file declares D={D}",
                          line=lineno)
    return v


def read_dataset(path):
    """Parse a ``.psd`` file; returns ``(ShapeDataset, header dict)``.

    Records without ``obs_id`` are grouped into shapes by ``(subject_id, t)``.
    """
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise FormatError("empty file", line=1)
        _magic_line(first, DATASET_MAGIC)
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad header: {exc.msg}", line=2) from None
        if not isinstance(header, dict) or not isinstance(header.get("D"), int):
            raise SchemaError("header must be an object with integer 'D'", line=2)
        D = header["D"]
        t_range = tuple(header.get("t_range") or (0.0, 1.0))
        cols = {k: [] for k in ("p", "d", "t", "subject_id", "obs_id", "vertex", "tau_gt", "limb")}
        for lineno, line in enumerate(fh, start=3):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"bad record: {exc.msg}", line=lineno) from None
            if not isinstance(rec, dict):
                raise SchemaError("record must be an object", line=lineno)
            missing = [k for k in _REQUIRED if k not in rec]
            if missing:
                raise SchemaError(f"missing field(s) {', '.join(missing)}", line=lineno)
            cols["p"].append(_vector(rec, "p", D, lineno))
            cols["d"].append(_vector(rec, "d", D, lineno))
            cols["t"].append(float(rec["t"]))
            cols["subject_id"].append(int(rec["subject_id"]))
            cols["obs_id"].append(int(rec["obs_id"]) if rec.get("obs_id") is not None else -1)
            cols["vertex"].append(int(rec.get("vertex", -1)))
            tau = rec.get("tau_gt")
            cols["tau_gt"].append(np.nan if tau is None else float(tau))
            limb = rec.get("limb")
            if limb is not None and limb not in LIMB_NAMES:
                raise SchemaError(f"unknown limb label {limb!r}", line=lineno)
            cols["limb"].append(-1 if limb is None else LIMB_NAMES.index(limb))
    if not cols["t"]:
        return ShapeDataset.empty(D, t_range), header
    obs = np.array(cols["obs_id"])
    if (obs < 0).any():
        keys = np.column_stack([cols["subject_id"], np.asarray(cols["t"]).view(np.int64)])
        _, derived = np.unique(keys, axis=0, return_inverse=True)
        obs = np.where(obs < 0, -1 - derived.reshape(-1), obs)
    ds = ShapeDataset(np.array(cols["p"], dtype=float).reshape(-1, D),
                      np.array(cols["d"], dtype=float).reshape(-1, D),
                      cols["t"], cols["subject_id"], obs, cols["vertex"],
                      cols["tau_gt"], cols["limb"], t_range)
    return ds, header


def regenerate(header):
    """Rebuild a synthetic dataset from the provenance in its header."""
    from . import starman

    prov = header.get("provenance") or {}
    if prov.get("generator") != "starman":
        raise ValueError("header does not describe a synthetic Starman dataset")
    config = starman.StarmanConfig.from_dict(prov["config"])
    if prov.get("lag"):
        return starman.make_synthetic_ood(config, prov["lag"], prov.get("control", 0))
    return starman.generate_split(config, prov["split"])


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    """A saved network: architecture, flat weights and training metadata."""

    arch: nw.NetArch
    weights: np.ndarray
    train_config: dict = field(default_factory=dict)
    dataset_fingerprint: str = None
    created_at: str = None
    t_range: tuple = (0.0, 1.0)
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_params(cls, params, train_config=None, dataset_fingerprint=None, created_at=None,
                    metadata=None):
        cfg = train_config.to_dict() if hasattr(train_config, "to_dict") else dict(train_config or {})
        return cls(params.arch, params.weights.copy(), cfg, dataset_fingerprint,
                   created_at, tuple(params.t_range), dict(metadata or {}))

    def params(self):
        return nw.GaussianFieldParams(self.arch, self.weights.copy(), tuple(self.t_range))


def created_timestamp():
    """UTC ISO timestamp from ``SOURCE_DATE_EPOCH`` (default 0) so reruns are byte-identical."""
    import datetime

    epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
    stamp = datetime.datetime.fromtimestamp(epoch, tz=datetime.timezone.utc)
    return stamp.strftime("%Y-%m-%dT%H:%M:%SZ")


def save_checkpoint(path, ckpt):
    """Write magic line, JSON header line and the float64 weight block atomically."""
    blob = np.ascontiguousarray(ckpt.weights, dtype="<f8").tobytes()
    header = {
        "arch": ckpt.arch.to_dict(),
        "train_config": ckpt.train_config,
        "dataset_fingerprint": ckpt.dataset_fingerprint,
        "created_at": ckpt.created_at or created_timestamp(),
        "t_range": list(ckpt.t_range),
        "metadata": ckpt.metadata,
        "n_weights": int(len(ckpt.weights)),
        "weights_sha256": hashlib.sha256(blob).hexdigest(),
    }
    head = f"{CHECKPOINT_MAGIC} {FORMAT_VERSION}\n{json.dumps(header, sort_keys=True)}\n"
    _atomic_write(path, head.encode("utf-8") + blob)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        first = fh.readline().decode("utf-8", errors="replace")
        if not first.endswith("\n"):
            raise FormatError("truncated checkpoint header", line=1)
        version = _magic_line(first, CHECKPOINT_MAGIC)
        raw = fh.readline()
        if not raw.endswith(b"\n"):
            raise FormatError("truncated checkpoint header", line=2)
        try:
            header = json.loads(raw)
            arch = nw.NetArch.from_dict(header["arch"])
            n = int(header["n_weights"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad checkpoint header: {exc}", line=2) from None
        blob = fh.read()
    if len(blob) != 8 * n:
        raise FormatError(f"weight block has {len(blob)} bytes, expected {8 * n} "
                          "(truncated or corrupt file)")
    if hashlib.sha256(blob).hexdigest() != header.get("weights_sha256"):
        raise FormatError("weight block digest mismatch")
    if n != arch.n_weights:
        raise FormatError(f"architecture needs {arch.n_weights} weights, file has {n}")
    weights = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    return Checkpoint(arch, weights, header.get("train_config") or {},
                      header.get("dataset_fingerprint"), header.get("created_at"),
                      tuple(header.get("t_range", (0.0, 1.0))), header.get("metadata") or {},
                      version)

"""Session fixtures: trained Starman pipelines (cached on disk) and the
acceptance summary printed at the end of the run."""
import hashlib
import json
import os
import pathlib
import time

import numpy as np
import pytest

from shapetime import starman
from shapetime.gaussian_field import TrainConfig, train
from shapetime.inverse_encoder import InverseConfig, train_inverse
from shapetime.io import Checkpoint, save_checkpoint, load_checkpoint

ROOT = pathlib.Path(__file__).resolve().parent.parent
CACHE = pathlib.Path(os.environ.get("SHAPETIME_TEST_CACHE", ROOT / ".test_cache"))

# desk-scale budget used by every trained-model test
PIPELINE_EPOCHS = 40
PIPELINE_INVERSE_STEPS = 4000

ACCEPTANCE_LINES = []


def _source_digest():
    h = hashlib.sha256()
    src = ROOT / "src" / "shapetime"
    for name in ("network.py", "gaussian_field.py", "inverse_encoder.py", "starman.py"):
        h.update((src / name).read_bytes())
    return h.hexdigest()[:16]


class Pipeline:
    """Generated data plus a trained field and encoder for one variant."""

    def __init__(self, variant):
        self.config = starman.StarmanConfig(variant)
        t0 = time.perf_counter()
        self.data = starman.generate(self.config)
        gen_s = time.perf_counter() - t0
        self.train_config = TrainConfig(epochs=PIPELINE_EPOCHS)
        self.inverse_config = InverseConfig(steps=PIPELINE_INVERSE_STEPS)
        key = json.dumps([self.config.to_dict(), self.train_config.to_dict(),
                          self.inverse_config.to_dict(), _source_digest()], sort_keys=True)
        tag = hashlib.sha256(key.encode()).hexdigest()[:16]
        self._tag = tag
        field_path = CACHE / f"field_{variant}_{tag}.pck"
        inv_path = CACHE / f"inverse_{variant}_{tag}.pck"
        if field_path.exists() and inv_path.exists():
            field = load_checkpoint(field_path)
            inv = load_checkpoint(inv_path)
            self.params, self.inverse = field.params(), inv.params()
            self.timings = dict(field.metadata["timings"])
            self.timings["from_cache"] = True
            return
        t0 = time.perf_counter()
        self.params, self.train_log = train(self.data.train, self.train_config)
        train_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        self.inverse, _ = train_inverse(self.params, starman.template(self.config),
                                        self.inverse_config)
        inv_s = time.perf_counter() - t0
        self.timings = {"generate_s": gen_s, "train_s": train_s, "inverse_s": inv_s,
                        "from_cache": False}
        save_checkpoint(field_path, Checkpoint.from_params(
            self.params, self.train_config, self.data.train.fingerprint(),
            metadata={"timings": self.timings}))
        save_checkpoint(inv_path, Checkpoint.from_params(
            self.inverse, self.inverse_config, self.data.train.fingerprint()))

    def inverse_with(self, **overrides):
        """An encoder trained on this field with modified :class:`InverseConfig` fields."""
        config = InverseConfig(**{**self.inverse_config.to_dict(), **overrides})
        key = json.dumps([self._tag, config.to_dict()], sort_keys=True)
        tag = hashlib.sha256(key.encode()).hexdigest()[:16]
        path = CACHE / f"inverse_{self.config.variant}_{tag}.pck"
        if path.exists():
            return load_checkpoint(path).params()
        inv, _ = train_inverse(self.params, self.template, config)
        save_checkpoint(path, Checkpoint.from_params(inv, config, self.data.train.fingerprint()))
        return inv

    @property
    def tips(self):
        return list(self.config.tip_vertices)

    @property
    def template(self):
        return starman.template(self.config)


@pytest.fixture(scope="session")
def pipeline_G():
    return Pipeline("G")


@pytest.fixture(scope="session")
def pipeline_L():
    return Pipeline("L")


@pytest.fixture(scope="session")
def times_G(pipeline_G):
    from shapetime.analysis import evaluate_time_estimation
    return evaluate_time_estimation(pipeline_G.data.test, pipeline_G.params, pipeline_G.inverse)


@pytest.fixture(scope="session")
def times_L(pipeline_L):
    from shapetime.analysis import evaluate_time_estimation
    return evaluate_time_estimation(pipeline_L.data.test, pipeline_L.params, pipeline_L.inverse)


@pytest.fixture
def report():
    """Record one acceptance line; all lines are echoed in the terminal summary."""
    def _report(criterion, ok, detail):
        line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

"""Tests for checkpoint directories and the metrics CSV."""

import csv
import json

import numpy as np
import pytest

from affinity_refine.errors import FormatError
from affinity_refine.tensor_core import Rng
from affinity_refine.training.checkpoint import (
    MANIFEST_NAME,
    load_checkpoint,
    load_manifest,
    save_checkpoint,
    write_metrics_csv,
)
from affinity_refine.training.toy_model import PARAM_NAMES, ToyModel
from affinity_refine.training.trainer import StepMetrics


@pytest.fixture
def model() -> ToyModel:
    return ToyModel.init(3, 3, 4, 5, Rng(11))


@pytest.mark.unit
class TestCheckpoint:
    def test_round_trip_at_float32(self, model, tmp_path):
        save_checkpoint(model, tmp_path, {"seed": 11})
        loaded, meta = load_checkpoint(tmp_path)
        assert meta == {"seed": 11}
        for name in PARAM_NAMES:
            expected = model.params[name].astype(np.float32).astype(np.float64)
            assert np.array_equal(loaded.params[name], expected)

    def test_manifest_lists_every_parameter(self, model, tmp_path):
        save_checkpoint(model, tmp_path)
        manifest = load_manifest(tmp_path)
        assert set(manifest["params"]) == set(PARAM_NAMES)
        assert manifest["params"]["conv2_w"]["dims"] == [3, 3, 4, 5]
        assert all(len(e["xxh64"]) == 16 for e in manifest["params"].values())

    def test_writes_are_byte_identical(self, model, tmp_path):
        save_checkpoint(model, tmp_path / "a")
        save_checkpoint(model, tmp_path / "b")
        for name in [*(f"{n}.dten" for n in PARAM_NAMES), MANIFEST_NAME]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_tampered_file_fails_digest(self, model, tmp_path):
        save_checkpoint(model, tmp_path)
        path = tmp_path / "head_b.dten"
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="digest"):
            load_checkpoint(tmp_path)

    def test_foreign_manifest(self, tmp_path):
        (tmp_path / MANIFEST_NAME).write_text(json.dumps({"format": "other"}), encoding="utf-8")
        with pytest.raises(FormatError):
            load_manifest(tmp_path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "nowhere")


@pytest.mark.unit
class TestMetricsCsv:
    def test_header_and_rows(self, tmp_path):
        history = [StepMetrics(1, 0, 0.5, 1.25, 0.0, 0.0, 1.75), StepMetrics(1, 1, 0.4, 1.0, 0.1, 0.0, 1.41)]
        path = tmp_path / "metrics.csv"
        write_metrics_csv(history, path)
        with path.open(newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        assert list(rows[0]) == ["epoch", "step", "cls", "ce", "aa", "lr", "total"]
        assert rows[1]["step"] == "1"
        assert float(rows[1]["total"]) == 1.41

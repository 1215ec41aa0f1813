"""Checkpoint directories and the per-step metrics CSV.

A checkpoint holds one DTEN file per model parameter and a ``manifest.json``
listing each file's dims and xxh64 digest. Loading re-hashes every file.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np
import xxhash

from affinity_refine import __version__
from affinity_refine.errors import FormatError
from affinity_refine.tensor_core import DenseTensor, tensor_from_bytes, tensor_to_bytes
from affinity_refine.training.toy_model import PARAM_NAMES, ToyModel
from affinity_refine.training.trainer import StepMetrics

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "affinity-refine-checkpoint"
MANIFEST_VERSION = 1
METRICS_FIELDS = ("epoch", "step", "cls", "ce", "aa", "lr", "total")


def save_checkpoint(model: ToyModel, out_dir: str | Path, meta: dict[str, Any] | None = None) -> Path:
    """Write every parameter as float32 DTEN plus the manifest. Returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries: dict[str, Any] = {}
    for name in PARAM_NAMES:
        raw = tensor_to_bytes(DenseTensor.from_array(model.params[name]))
        filename = f"{name}.dten"
        (out / filename).write_bytes(raw)
        entries[name] = {
            "file": filename,
            "dims": list(model.params[name].shape),
            "xxh64": xxhash.xxh64_hexdigest(raw),
        }
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "package_version": __version__,
        "params": entries,
        "meta": meta or {},
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("checkpoint written to %s (%d parameters)", out, model.parameter_count)
    return path


def load_manifest(ckpt_dir: str | Path) -> dict[str, Any]:
    path = Path(ckpt_dir) / MANIFEST_NAME
    text = path.read_text(encoding="utf-8")
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e.msg}", offset=e.pos) from e
    if not isinstance(manifest, dict) or manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: not a checkpoint manifest", offset=0)
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {manifest.get('version')!r}", offset=0)
    return manifest


def load_checkpoint(ckpt_dir: str | Path) -> tuple[ToyModel, dict[str, Any]]:
    """Load a checkpoint, verifying digests and dims. Returns the model and the manifest meta."""
    src = Path(ckpt_dir)
    manifest = load_manifest(src)
    params: dict[str, np.ndarray] = {}
    entries = manifest.get("params", {})
    for name in PARAM_NAMES:
        entry = entries.get(name)
        if entry is None:
            raise FormatError(f"{src / MANIFEST_NAME}: missing parameter {name}", offset=0)
        raw = (src / entry["file"]).read_bytes()
        digest = xxhash.xxh64_hexdigest(raw)
        if digest != entry.get("xxh64"):
            raise FormatError(
                f"{src / entry['file']}: digest {digest} does not match manifest {entry.get('xxh64')}",
                offset=0,
            )
        t = tensor_from_bytes(raw)
        if list(t.dims) != list(entry.get("dims", [])):
            raise FormatError(f"{src / entry['file']}: dims {list(t.dims)} != manifest {entry.get('dims')}", offset=7)
        params[name] = t.to_float64()
    return ToyModel(params), manifest.get("meta", {})


def write_metrics_csv(history: list[StepMetrics], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        for m in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in m.to_row().items()})

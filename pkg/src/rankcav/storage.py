# storage.py
"""Versioned artifacts: JSON documents, CSV tables and binary scene grids.

Every text artifact starts with a `# rankcav <kind> v<version>` line. Grid
binaries start with one ASCII line `rankcav grids v<version> <n> <cells> 3`
followed by little-endian float64 values in scene, cell, channel order.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np

from rankcav.cav import Cav
from rankcav.exceptions import ArtifactError, RankcavError
from rankcav.nn import Layer, LinearHead, MlpEncoder
from rankcav.synth import CompositionProfile, Scene, Split
from rankcav.training import EncoderTag, TrainConfig, TrainedPipeline

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
GRIDS = "grids.bin"


def header(kind: str) -> str:
    return f"# rankcav {kind} v{SCHEMA_VERSION}"


def _check_header(path: Path, line: str, kind: str) -> None:
    if line.rstrip("\r\n") != header(kind):
        raise ArtifactError(
            "Unexpected artifact header",
            context={"path": str(path), "expected": header(kind), "found": line.strip()[:80]},
        )


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)
    logger.info("wrote %s", path)
    return path


def _read_lines(path: Path) -> list[str]:
    try:
        return path.read_text(encoding="utf-8").splitlines(keepends=True)
    except FileNotFoundError as exc:
        raise ArtifactError("Missing artifact", context={"path": str(path)}) from exc


def _null_non_finite(value: Any) -> Any:
    """Non-finite floats become null; strict JSON has no NaN or Infinity."""
    match value:
        case float() | np.floating() if not np.isfinite(value):
            return None
        case Mapping():
            return {key: _null_non_finite(item) for key, item in value.items()}
        case list() | tuple():
            return [_null_non_finite(item) for item in value]
        case _:
            return value


def _floats(values: Iterable[float | None]) -> tuple[float, ...]:
    return tuple(float("nan") if value is None else float(value) for value in values)


def write_json(path: Path | str, kind: str, payload: Any) -> Path:
    body = json.dumps(_null_non_finite(payload), sort_keys=True, indent=1, allow_nan=False)
    return _write_text(Path(path), f"{header(kind)}\n{body}\n")


def read_json(path: Path | str, kind: str) -> Any:
    path = Path(path)
    lines = _read_lines(path)
    if not lines:
        raise ArtifactError("Empty artifact", context={"path": str(path)})
    _check_header(path, lines[0], kind)
    try:
        return json.loads("".join(lines[1:]))
    except json.JSONDecodeError as exc:
        raise ArtifactError("Corrupt JSON artifact", context={"path": str(path), "error": str(exc)}) from exc


def write_csv(path: Path | str, kind: str, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    buffer = io.StringIO()
    buffer.write(header(kind) + "\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    return _write_text(Path(path), buffer.getvalue())


def read_csv(path: Path | str, kind: str) -> list[dict[str, str]]:
    path = Path(path)
    lines = _read_lines(path)
    if not lines:
        raise ArtifactError("Empty artifact", context={"path": str(path)})
    _check_header(path, lines[0], kind)
    return list(csv.DictReader(lines[1:]))


# ============================================================================
# scenes


def _scene_entry(scene: Scene) -> dict[str, Any]:
    return {
        "id": scene.id,
        "split": str(scene.split),
        "target": scene.target,
        "composition": scene.composition.fractions.tolist(),
        "cells": scene.cells.astype(int).tolist(),
    }


def save_scenes(directory: Path | str, scenes: Sequence[Scene], kind: str = "scenes") -> Path:
    """Manifest JSON plus a binary grid file; returns the manifest path."""
    directory = Path(directory)
    if not scenes:
        raise ArtifactError("Refusing to store an empty scene set", context={"path": str(directory)})
    shapes = {scene.shape for scene in scenes}
    if len(shapes) != 1:
        raise ArtifactError("Scenes of mixed grid shapes", context={"shapes": sorted(shapes)})
    height, width = shapes.pop()
    grids = np.stack([scene.grid for scene in scenes]).astype("<f8")
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / GRIDS, "wb") as handle:
        handle.write(f"rankcav grids v{SCHEMA_VERSION} {len(scenes)} {height * width} 3\n".encode("ascii"))
        handle.write(grids.tobytes())
    payload = {
        "kind": kind,
        "count": len(scenes),
        "grid_shape": [height, width],
        "grids": GRIDS,
        "scenes": [_scene_entry(scene) for scene in scenes],
    }
    return write_json(directory / MANIFEST, "manifest", payload)


def _read_grids(path: Path, count: int, cells: int) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise ArtifactError("Missing grid file", context={"path": str(path)}) from exc
    line, _, body = raw.partition(b"\n")
    expected = f"rankcav grids v{SCHEMA_VERSION} {count} {cells} 3".encode("ascii")
    if line != expected:
        raise ArtifactError(
            "Unexpected grid header",
            context={"path": str(path), "found": line[:80].decode("ascii", "replace")},
        )
    if len(body) != count * cells * 3 * 8:
        raise ArtifactError("Truncated grid file", context={"path": str(path), "bytes": len(body)})
    return np.frombuffer(body, dtype="<f8").reshape(count, cells, 3).astype(np.float64)


def load_scenes(directory: Path | str) -> list[Scene]:
    directory = Path(directory)
    manifest = read_json(directory / MANIFEST, "manifest")
    try:
        height, width = manifest["grid_shape"]
        entries = manifest["scenes"]
        grids = _read_grids(directory / manifest["grids"], manifest["count"], height * width)
        return [
            Scene(
                id=entry["id"],
                grid=grid,
                cells=np.asarray(entry["cells"], dtype=np.int64),
                shape=(height, width),
                composition=CompositionProfile(np.asarray(entry["composition"])),
                target=entry["target"],
                split=Split(entry["split"]),
            )
            for entry, grid in zip(entries, grids, strict=True)
        ]
    except ArtifactError:
        raise
    except (KeyError, TypeError, ValueError, RankcavError) as exc:
        raise ArtifactError("Malformed scene manifest", context={"path": str(directory), "error": str(exc)}) from exc


def save_concept_sets(directory: Path | str, concept_sets: Mapping[str, Sequence[Scene]]) -> list[Path]:
    directory = Path(directory)
    paths = [save_scenes(directory / str(name), scenes, kind="concept") for name, scenes in concept_sets.items()]
    write_json(directory / "concepts.json", "concepts", [str(name) for name in concept_sets])
    return paths


def load_concept_sets(directory: Path | str) -> dict[str, list[Scene]]:
    directory = Path(directory)
    names = read_json(directory / "concepts.json", "concepts")
    return {name: load_scenes(directory / name) for name in names}


# ============================================================================
# checkpoints


def _encoder_payload(encoder: MlpEncoder) -> list[dict[str, Any]]:
    return [
        {"weights": layer.weights.tolist(), "bias": layer.bias.tolist(), "activation": str(layer.activation)}
        for layer in encoder.layers
    ]


def save_pipeline(path: Path | str, pipeline: TrainedPipeline) -> Path:
    payload = {
        "tag": str(pipeline.tag),
        "config": pipeline.config.snapshot(),
        "encoder": _encoder_payload(pipeline.encoder),
        "head": {"weights": pipeline.head.weights.tolist(), "bias": pipeline.head.bias},
        "pretrain_losses": list(pipeline.pretrain_losses),
        "probe_val_r2": list(pipeline.probe_val_r2),
        "best_epoch": pipeline.best_epoch,
        "rng_state": pipeline.rng_state,
    }
    return write_json(path, "checkpoint", payload)


def load_pipeline(path: Path | str) -> TrainedPipeline:
    payload = read_json(path, "checkpoint")
    try:
        encoder = MlpEncoder(
            tuple(
                Layer(np.asarray(layer["weights"]), np.asarray(layer["bias"]), layer["activation"])
                for layer in payload["encoder"]
            )
        ).freeze()
        return TrainedPipeline(
            encoder=encoder,
            head=LinearHead(np.asarray(payload["head"]["weights"]), payload["head"]["bias"]),
            tag=EncoderTag(payload["tag"]),
            config=TrainConfig(**payload["config"]),
            pretrain_losses=_floats(payload["pretrain_losses"]),
            probe_val_r2=_floats(payload["probe_val_r2"]),
            best_epoch=payload["best_epoch"],
            rng_state=payload["rng_state"],
        )
    except (KeyError, TypeError, ValueError, RankcavError) as exc:
        raise ArtifactError("Malformed checkpoint", context={"path": str(path), "error": str(exc)}) from exc


# ============================================================================
# CAVs


def save_cavs(path: Path | str, cavs: Iterable[Cav]) -> Path:
    payload = [
        {
            "concept": cav.concept,
            "layer": cav.layer,
            "direction": np.asarray(cav.direction).tolist(),
            "bias": cav.bias,
            "holdout_accuracy": cav.holdout_accuracy,
            "seed": cav.seed,
            "shortfall": cav.shortfall,
            "train_ids": list(cav.train_ids),
            "holdout_ids": list(cav.holdout_ids),
        }
        for cav in cavs
    ]
    return write_json(path, "cavs", payload)


def load_cavs(path: Path | str) -> list[Cav]:
    try:
        return [
            Cav(
                concept=entry["concept"],
                layer=entry["layer"],
                direction=np.asarray(entry["direction"], dtype=np.float64),
                bias=entry["bias"],
                holdout_accuracy=entry["holdout_accuracy"],
                seed=entry["seed"],
                shortfall=entry["shortfall"],
                train_ids=tuple(entry["train_ids"]),
                holdout_ids=tuple(entry["holdout_ids"]),
            )
            for entry in read_json(path, "cavs")
        ]
    except (KeyError, TypeError) as exc:
        raise ArtifactError("Malformed CAV file", context={"path": str(path), "error": str(exc)}) from exc

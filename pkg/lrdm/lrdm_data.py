#!/usr/bin/env python3
"""
Data Service

Synthetic Gaussian-mixture datasets, CSV dataset files and checkpoint
persistence.

Checkpoint layout::

    LRDM1\\n
    <JSON header, indent=2>\\n
    \\n
    <blob><blob>...

Each blob is an unsigned 64-bit little-endian element count followed by that
many little-endian float64 values. Blobs appear in the order listed by the
header's ``blobs`` entry, which is always: denoiser parameters, denoiser EMA
shadow, encoder parameters, first-stage parameters, first-stage EMA shadow,
Adam first moments, Adam second moments (absent components are skipped).
"""

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .lrdm_trainer import AdamState, EmaState, ModelBundle, build_bundle


MAGIC = b"LRDM1\n"
FORMAT_VERSION = 1
HEADER_END = b"\n\n"
COUNT = struct.Struct("<Q")

PathLike = Union[str, Path]


class DatasetFormatError(ValueError):
    """Malformed dataset file."""


class CheckpointError(ValueError):
    """Unreadable checkpoint."""


class CheckpointVersionError(CheckpointError):
    """Wrong magic string or unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """A blob is shorter than its length prefix claims."""


class CheckpointShapeError(CheckpointError):
    """A blob disagrees with the shape recorded in the header or the rebuilt model."""


# ----------------------------------------------------------------------
# datasets
# ----------------------------------------------------------------------
@dataclass
class Dataset:
    """Point cloud with optional integer labels and provenance."""
    points: np.ndarray
    labels: Optional[np.ndarray] = None
    split: str = "train"
    spec: Dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None
    num_classes: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise ValueError(f"Dataset points must be a 2-D matrix, got shape {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("Dataset points must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.points.shape[0],):
                raise ValueError("Dataset labels must have one entry per point")
            if not self.num_classes:
                self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValueError(f"Labels must lie in [0, {self.num_classes})")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def subset(self, n: int, rng: Optional[np.random.Generator] = None) -> "Dataset":
        """First ``n`` points, or a random subset when ``rng`` is given."""
        idx = np.arange(min(n, self.n)) if rng is None else rng.choice(self.n, size=min(n, self.n), replace=False)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.points[idx], labels, self.split, self.spec, self.seed, self.num_classes)


def mixture_centers(modes: int, radius: float) -> np.ndarray:
    """Mode centres evenly spaced on a circle."""
    angles = 2.0 * np.pi * np.arange(modes) / modes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def make_mixture(n: int, modes: int = 8, radius: float = 1.0, std: float = 0.05, seed: int = 0,
                 labeled: bool = False, split: str = "train") -> Dataset:
    """
    Equal-weight 2-D Gaussian mixture with modes on a circle.

    Args:
        n: Number of points
        modes: Number of mixture components (>= 1)
        radius: Circle radius of the mode centres
        std: Per-axis standard deviation of every mode
        seed: Generator seed
        labeled: Attach the mode index as label
        split: "train" or "heldout"

    Returns:
        Dataset
    """
    if modes < 1:
        raise ValueError(f"Mixture needs at least one mode, got {modes}")
    if n < 1 or std < 0.0:
        raise ValueError(f"Mixture needs n >= 1 and std >= 0, got n={n}, std={std}")
    rng = np.random.default_rng(seed)
    assignment = rng.integers(0, modes, size=n)
    points = mixture_centers(modes, radius)[assignment] + std * rng.standard_normal((n, 2))
    spec = {"generator": "mixture", "n": n, "modes": modes, "radius": radius, "std": std}
    return Dataset(points, assignment if labeled else None, split, spec, seed, modes if labeled else 0)


def save_csv_dataset(path: PathLike, dataset: Dataset) -> str:
    """Write one point per row (label last when present) at full precision."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        for i, row in enumerate(dataset.points):
            cells = [repr(float(v)) for v in row]
            if dataset.labels is not None:
                cells.append(str(int(dataset.labels[i])))
            writer.writerow(cells)
    return str(path)


def load_csv_dataset(path: PathLike, has_labels: bool = False, split: str = "train") -> Dataset:
    """
    Read a rectangular numeric CSV.

    Args:
        path: File path
        has_labels: Last column holds integer labels
        split: Split tag for the result

    Returns:
        Dataset with the dimension (and number of classes) inferred
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset file not found: {path}")

    rows: List[List[float]] = []
    width = None
    with open(path, newline="", encoding="utf-8") as f:
        for row_number, row in enumerate(csv.reader(f), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DatasetFormatError(f"{path}: row {row_number} has {len(row)} columns, expected {width}")
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                raise DatasetFormatError(f"{path}: row {row_number} contains a non-numeric cell")

    if not rows:
        raise DatasetFormatError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=np.float64)
    if has_labels:
        if data.shape[1] < 2:
            raise DatasetFormatError(f"{path}: labeled file needs at least one feature column")
        labels = data[:, -1]
        bad = np.flatnonzero((labels != np.round(labels)) | (labels < 0))
        if bad.size:
            raise DatasetFormatError(f"{path}: row {int(bad[0]) + 1} has an invalid label")
        return Dataset(data[:, :-1], labels.astype(np.int64), split, {"generator": "csv", "path": str(path)})
    return Dataset(data, None, split, {"generator": "csv", "path": str(path)})


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------
def _blob_entries(bundle: ModelBundle) -> List[Tuple[str, np.ndarray]]:
    entries: List[Tuple[str, np.ndarray]] = []
    entries.extend((f"denoiser/{n}", p.values) for n, p in bundle.denoiser.named_parameters())
    if bundle.denoiser_ema is not None:
        entries.extend((f"denoiser_ema/{n}", bundle.denoiser_ema.shadow[n])
                       for n, _ in bundle.denoiser.named_parameters())
    if bundle.encoder is not None:
        entries.extend((f"encoder/{n}", p.values) for n, p in bundle.encoder.named_parameters())
    if bundle.first_stage is not None:
        fs_named = bundle.first_stage.named_parameters()
        entries.extend((f"first_stage/{n}", p.values) for n, p in fs_named)
        if bundle.first_stage_ema is not None:
            entries.extend((f"first_stage_ema/{n}", bundle.first_stage_ema.shadow[n]) for n, _ in fs_named)
    if bundle.optimizer_state is not None:
        names = [n for n, _ in bundle.training_parameters()]
        entries.extend((f"adam_m/{n}", bundle.optimizer_state.m[n]) for n in names)
        entries.extend((f"adam_v/{n}", bundle.optimizer_state.v[n]) for n in names)
    return entries


def _ema_header(ema: Optional[EmaState]) -> Optional[Dict[str, Any]]:
    return None if ema is None else {"decay": ema.decay, "num_updates": ema.num_updates}


def checkpoint_header(bundle: ModelBundle) -> Dict[str, Any]:
    """Structured header describing everything needed to rebuild the bundle."""
    return {
        "format": MAGIC.decode().strip(),
        "version": FORMAT_VERSION,
        "config": bundle.config,
        "schedule": bundle.schedule.to_config(),
        "data_dim": bundle.data_dim,
        "num_classes": bundle.num_classes,
        "step": bundle.step,
        "rng_state": bundle.rng_state,
        "first_stage_scale": None if bundle.first_stage is None else bundle.first_stage.scale,
        "denoiser_ema": _ema_header(bundle.denoiser_ema),
        "first_stage_ema": _ema_header(bundle.first_stage_ema),
        "adam_step": None if bundle.optimizer_state is None else bundle.optimizer_state.step,
        "blobs": [{"name": name, "shape": list(values.shape)} for name, values in _blob_entries(bundle)],
    }


def save_checkpoint(path: PathLike, bundle: ModelBundle) -> str:
    """
    Write a bundle to ``path``.

    Args:
        path: Destination file
        bundle: Models, EMA shadows and optimizer state

    Returns:
        Path written
    """
    path = Path(path)
    header = json.dumps(checkpoint_header(bundle), indent=2).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(header)
        f.write(HEADER_END)
        for _, values in _blob_entries(bundle):
            flat = np.ascontiguousarray(values, dtype="<f8").reshape(-1)
            f.write(COUNT.pack(flat.size))
            f.write(flat.tobytes())
    return str(path)


def read_checkpoint_header(raw: bytes) -> Tuple[Dict[str, Any], int]:
    """Parse the header; returns it with the offset of the first blob."""
    if not raw.startswith(MAGIC):
        raise CheckpointVersionError(f"Not an LRDM checkpoint (expected magic {MAGIC!r})")
    end = raw.find(HEADER_END, len(MAGIC))
    if end < 0:
        raise CheckpointTruncatedError("Checkpoint header is not terminated")
    try:
        header = json.loads(raw[len(MAGIC):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"Checkpoint header is not valid JSON: {exc}")
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"Unsupported checkpoint version {header.get('version')!r} (this build reads {FORMAT_VERSION})")
    return header, end + len(HEADER_END)


def _read_blobs(raw: bytes, offset: int, specs: List[Dict[str, Any]]) -> Dict[str, np.ndarray]:
    blobs: Dict[str, np.ndarray] = {}
    for spec in specs:
        name, shape = spec["name"], tuple(spec["shape"])
        if offset + COUNT.size > len(raw):
            raise CheckpointTruncatedError(f"Checkpoint ends before blob {name}")
        (count,) = COUNT.unpack_from(raw, offset)
        offset += COUNT.size
        if offset + 8 * count > len(raw):
            raise CheckpointTruncatedError(
                f"Blob {name} claims {count} values but only {(len(raw) - offset) // 8} remain")
        expected = int(np.prod(shape)) if shape else 1
        if count != expected:
            raise CheckpointShapeError(f"Blob {name} has {count} values, header shape {list(shape)} needs {expected}")
        blobs[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(raw):
        raise CheckpointError(f"Checkpoint has {len(raw) - offset} unexpected trailing bytes")
    return blobs


def _load_module(module, prefix: str, blobs: Dict[str, np.ndarray]):
    state = {}
    for name, p in module.named_parameters():
        key = f"{prefix}/{name}"
        if key not in blobs:
            raise CheckpointShapeError(f"Checkpoint is missing blob {key}")
        if blobs[key].shape != p.shape:
            raise CheckpointShapeError(f"Blob {key} has shape {blobs[key].shape}, model expects {p.shape}")
        state[name] = blobs[key]
    module.load_state_dict(state)


def _load_ema(meta: Optional[Dict[str, Any]], module, prefix: str,
              blobs: Dict[str, np.ndarray]) -> Optional[EmaState]:
    if meta is None:
        return None
    shadow = {}
    for name, p in module.named_parameters():
        key = f"{prefix}/{name}"
        if key not in blobs or blobs[key].shape != p.shape:
            raise CheckpointShapeError(f"EMA blob {key} is missing or misshapen")
        shadow[name] = blobs[key].copy()
    return EmaState(decay=meta["decay"], shadow=shadow, num_updates=meta["num_updates"])


def load_checkpoint(path: PathLike) -> ModelBundle:
    """
    Rebuild a bundle from a checkpoint file.

    Raises:
        CheckpointVersionError, CheckpointTruncatedError, CheckpointShapeError
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()
    header, offset = read_checkpoint_header(raw)
    blobs = _read_blobs(raw, offset, header["blobs"])

    bundle = build_bundle(header["config"], header["data_dim"], header["num_classes"])
    _load_module(bundle.denoiser, "denoiser", blobs)
    bundle.denoiser_ema = _load_ema(header["denoiser_ema"], bundle.denoiser, "denoiser_ema", blobs)
    if bundle.encoder is not None:
        _load_module(bundle.encoder, "encoder", blobs)
    if bundle.first_stage is not None:
        _load_module(bundle.first_stage, "first_stage", blobs)
        bundle.first_stage.scale = header["first_stage_scale"]
        bundle.first_stage_ema = _load_ema(header["first_stage_ema"], bundle.first_stage, "first_stage_ema", blobs)
    if header["adam_step"] is not None:
        names = [n for n, _ in bundle.training_parameters()]
        try:
            bundle.optimizer_state = AdamState(step=header["adam_step"],
                                               m={n: blobs[f"adam_m/{n}"].copy() for n in names},
                                               v={n: blobs[f"adam_v/{n}"].copy() for n in names})
        except KeyError as exc:
            raise CheckpointShapeError(f"Checkpoint is missing optimizer blob {exc}")
    bundle.step = header["step"]
    bundle.rng_state = header["rng_state"]
    return bundle


def restore_rng(state: Optional[Dict[str, Any]], seed: int) -> np.random.Generator:
    """Generator continuing from a saved bit-generator state (or freshly seeded)."""
    rng = np.random.default_rng(seed)
    if state is not None:
        rng.bit_generator.state = state
    return rng

"""
Persistence layer for repulse.

Checkpoints (``.rpve``) store a ParticleSet bit-exactly. Datasets are stored either as
editable CSV or as an exact little-endian binary (``.rpds``).

Checkpoint layout (little-endian):

    "RPVE"  u16 version
    spec block of the base (or full) network: u32 count, count x u32 widths, u8 activation
    u8 mode; multi-head only: head spec block, u8 frozen flag
    u32 n  u64 seed  u64 step
    32-byte SHA-256 digest of the descriptor bytes (spec blocks, mode, frozen flag)
    multi-head only: f64 base parameters
    n x P f64 particle parameters, canonical order

Dataset binary layout:

    "RPDS"  u16 version  u32 N  u32 d  u8 target kind (0 class, 1 regression)
    N x d f64 inputs row-major, then N targets (i64 labels or f64 values)
"""

import csv
import hashlib
import logging
import math
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    BadMagic,
    CheckpointError,
    DatasetFormatError,
    InvalidLabel,
    MalformedHeader,
    NonFiniteValue,
    RowLengthMismatch,
    SpecDigestMismatch,
    TruncatedCheckpoint,
    VersionMismatch,
)
from .models import Activation, Dataset, MlpSpec, ParticleMode, TargetKind
from .particles import ParticleSet

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RPVE"
DATASET_MAGIC = b"RPDS"
FORMAT_VERSION = 1
DIGEST_SIZE = 32

_ACTIVATION_TAGS = {Activation.RELU: 0, Activation.TANH: 1}
_MODE_TAGS = {ParticleMode.FULL_ENSEMBLE: 0, ParticleMode.MULTI_HEAD: 1}
_TARGET_TAGS = {TargetKind.CLASS: 0, TargetKind.REGRESSION: 1}


def _invert(table: dict) -> dict:
    return {tag: key for key, tag in table.items()}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _spec_block(spec: MlpSpec) -> bytes:
    widths = spec.layer_widths
    return (
        struct.pack("<I", len(widths))
        + struct.pack(f"<{len(widths)}I", *widths)
        + struct.pack("<B", _ACTIVATION_TAGS[spec.activation])
    )


def _descriptor(ps: ParticleSet) -> bytes:
    blob = _spec_block(ps.base_spec) + struct.pack("<B", _MODE_TAGS[ps.mode])
    if ps.mode is ParticleMode.MULTI_HEAD:
        assert ps.head_spec is not None
        blob += _spec_block(ps.head_spec) + struct.pack("<B", int(ps.frozen_base))
    return blob


def encode_checkpoint(ps: ParticleSet) -> bytes:
    """Serialize a particle set to checkpoint bytes."""
    descriptor = _descriptor(ps)
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        descriptor,
        struct.pack("<IQQ", ps.n, ps.seed, ps.step),
        hashlib.sha256(descriptor).digest(),
    ]
    if ps.mode is ParticleMode.MULTI_HEAD:
        assert ps.base_params is not None
        parts.append(np.ascontiguousarray(ps.base_params, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(ps.particles, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    """Sequential little-endian reader over a byte string."""

    def __init__(self, data: bytes, truncated: type[Exception]):
        self.data = data
        self.offset = 0
        self.truncated = truncated

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise self.truncated(
                f"file ends at byte {len(self.data)}, needed {size} bytes at offset {self.offset}"
            )
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset


def _read_spec_widths(reader: _Reader) -> tuple[tuple[int, ...], int]:
    (count,) = reader.unpack("<I")
    widths = reader.unpack(f"<{count}I")
    (activation,) = reader.unpack("<B")
    return widths, activation


def _build_spec(widths: tuple[int, ...], tag: int) -> MlpSpec:
    activations = _invert(_ACTIVATION_TAGS)
    if tag not in activations:
        raise CheckpointError(f"unknown activation tag {tag}")
    return MlpSpec(widths, activations[tag])


def decode_checkpoint(data: bytes) -> ParticleSet:
    """
    Parse checkpoint bytes.

    Raises:
        BadMagic: If the file does not start with "RPVE".
        VersionMismatch: If the format version is not supported.
        TruncatedCheckpoint: If the data ends early.
        SpecDigestMismatch: If the descriptors were altered.
        CheckpointError: For unknown tags or trailing bytes.
    """
    reader = _Reader(data, TruncatedCheckpoint)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise BadMagic("not a repulse checkpoint (bad magic bytes)")
    (version,) = reader.unpack("<H")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {FORMAT_VERSION}")

    start = reader.offset
    base_widths, base_act = _read_spec_widths(reader)
    (mode_tag,) = reader.unpack("<B")
    head: Optional[tuple[tuple[int, ...], int]] = None
    frozen = True
    if mode_tag == _MODE_TAGS[ParticleMode.MULTI_HEAD]:
        head = _read_spec_widths(reader)
        (frozen_tag,) = reader.unpack("<B")
        frozen = bool(frozen_tag)
    elif mode_tag != _MODE_TAGS[ParticleMode.FULL_ENSEMBLE]:
        raise CheckpointError(f"unknown mode tag {mode_tag}")
    descriptor = data[start : reader.offset]
    n, seed, step = reader.unpack("<IQQ")
    if reader.take(DIGEST_SIZE) != hashlib.sha256(descriptor).digest():
        raise SpecDigestMismatch("spec digest does not match the stored spec descriptors")

    base_spec = _build_spec(base_widths, base_act)
    head_spec = None if head is None else _build_spec(*head)
    base_params = None
    if head_spec is not None:
        base_params = reader.floats(base_spec.parameter_count)
    particle_spec = base_spec if head_spec is None else head_spec
    particles = reader.floats(n * particle_spec.parameter_count).reshape(n, -1)
    if reader.remaining:
        raise CheckpointError(f"{reader.remaining} unexpected trailing bytes")
    return ParticleSet(
        mode=_invert(_MODE_TAGS)[mode_tag],
        base_spec=base_spec,
        particles=particles,
        head_spec=head_spec,
        base_params=base_params,
        frozen_base=frozen,
        seed=seed,
        step=step,
    )


def save_checkpoint(ps: ParticleSet, path: Path) -> None:
    """Write a checkpoint, creating parent directories as needed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(ps))
    logger.debug("wrote checkpoint %s (%d particles, step %d)", path, ps.n, ps.step)


def load_checkpoint(path: Path) -> ParticleSet:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Example:
        >>> ps = load_checkpoint(Path("out/checkpoint.rpve"))  # doctest: +SKIP
        >>> ps.n
        10
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def format_float(value: float) -> str:
    """17 significant digits, enough to round-trip any float64."""
    return format(float(value), ".17g")


def _format_target(value: float, kind: TargetKind) -> str:
    if kind is TargetKind.CLASS:
        return str(int(value))
    text = format_float(value)
    # Keep regression targets distinguishable from labels on reload
    if text.lstrip("-").isdigit():
        text += ".0"
    return text


def _save_csv(ds: Dataset, path: Path) -> None:
    header = [f"feat_{j}" for j in range(ds.dim)] + ["label"]
    with_flags = ds.ambiguous is not None
    if with_flags:
        header.append("ambiguous")
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for i in range(ds.size):
            row = [format_float(v) for v in ds.inputs[i]]
            row.append(_format_target(ds.targets[i], ds.target_kind))
            if with_flags:
                assert ds.ambiguous is not None
                row.append("1" if ds.ambiguous[i] else "0")
            writer.writerow(row)


def _save_binary(ds: Dataset, path: Path) -> None:
    kind = ds.target_kind
    targets = ds.targets.astype("<i8" if kind is TargetKind.CLASS else "<f8")
    path.write_bytes(
        DATASET_MAGIC
        + struct.pack("<HIIB", FORMAT_VERSION, ds.size, ds.dim, _TARGET_TAGS[kind])
        + np.ascontiguousarray(ds.inputs, dtype="<f8").tobytes()
        + targets.tobytes()
    )


def save_dataset(ds: Dataset, path: Path) -> None:
    """
    Write a dataset; the suffix selects the format (``.csv`` or ``.rpds``).

    Raises:
        DatasetFormatError: For any other suffix.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    suffix = path.suffix.lower()
    if suffix == ".csv":
        _save_csv(ds, path)
    elif suffix == ".rpds":
        _save_binary(ds, path)
    else:
        raise DatasetFormatError(f"unknown dataset suffix '{path.suffix}' (use .csv or .rpds)")


def _parse_header(header: list[str]) -> tuple[int, bool]:
    """Feature count and whether an ``ambiguous`` column follows ``label``."""
    with_flags = bool(header) and header[-1] == "ambiguous"
    names = header[:-1] if with_flags else header
    if len(names) < 2 or names[-1] != "label":
        raise MalformedHeader(f"header must end with 'label', got {header}")
    dim = len(names) - 1
    if names[:-1] != [f"feat_{j}" for j in range(dim)]:
        raise MalformedHeader(f"feature columns must be feat_0..feat_{dim - 1}, got {names[:-1]}")
    return dim, with_flags


def _parse_value(token: str, line: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise DatasetFormatError(f"line {line}: '{token}' is not a number") from None
    if not math.isfinite(value):
        raise NonFiniteValue(f"line {line}: non-finite value '{token}'")
    return value


def _is_integral_token(token: str) -> bool:
    return token.lstrip("+-").isdigit()


def _parse_labels(tokens: list[str], lines: list[int], kind: TargetKind) -> np.ndarray:
    if kind is TargetKind.REGRESSION:
        return np.array([_parse_value(t, ln) for t, ln in zip(tokens, lines, strict=True)])
    labels = np.empty(len(tokens), dtype=np.int64)
    for i, (token, line) in enumerate(zip(tokens, lines, strict=True)):
        value = _parse_value(token, line)
        if not value.is_integer() or value < 0:
            raise InvalidLabel(f"line {line}: label '{token}' is not a non-negative integer")
        labels[i] = int(value)
    return labels


def _load_csv(path: Path, target_kind: Optional[TargetKind]) -> Dataset:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise MalformedHeader(f"{path} is empty")
    dim, with_flags = _parse_header(rows[0])
    width = dim + 1 + int(with_flags)

    inputs, label_tokens, lines, flags = [], [], [], []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise RowLengthMismatch(line, width, len(row))
        inputs.append([_parse_value(t, line) for t in row[:dim]])
        label_tokens.append(row[dim].strip())
        lines.append(line)
        if with_flags:
            flag = row[dim + 1].strip()
            if flag not in ("0", "1"):
                raise DatasetFormatError(
                    f"line {line}: ambiguous flag must be 0 or 1, got '{flag}'"
                )
            flags.append(flag == "1")
    if not inputs:
        raise DatasetFormatError(f"{path} has no data rows")

    if target_kind is None:
        integral = all(_is_integral_token(t) for t in label_tokens)
        target_kind = TargetKind.CLASS if integral else TargetKind.REGRESSION
    return Dataset(
        inputs=np.array(inputs, dtype=np.float64),
        targets=_parse_labels(label_tokens, lines, target_kind),
        name=path.stem,
        ambiguous=np.array(flags, dtype=bool) if with_flags else None,
    )


def _load_binary(path: Path, target_kind: Optional[TargetKind]) -> Dataset:
    reader = _Reader(path.read_bytes(), DatasetFormatError)
    if reader.take(len(DATASET_MAGIC)) != DATASET_MAGIC:
        raise MalformedHeader(f"{path} is not a repulse dataset (bad magic bytes)")
    version, n, dim, tag = reader.unpack("<HIIB")
    if version != FORMAT_VERSION:
        raise MalformedHeader(f"dataset version {version}, expected {FORMAT_VERSION}")
    kinds = _invert(_TARGET_TAGS)
    if tag not in kinds:
        raise MalformedHeader(f"unknown target kind tag {tag}")
    stored = kinds[tag]
    if target_kind is not None and target_kind is not stored:
        raise MalformedHeader(f"{path} stores {stored.value} targets, not {target_kind.value}")
    inputs = reader.floats(n * dim).reshape(n, dim)
    if stored is TargetKind.CLASS:
        targets: np.ndarray = np.frombuffer(reader.take(8 * n), dtype="<i8").astype(np.int64)
        if n and targets.min() < 0:
            raise InvalidLabel(f"{path} contains negative labels")
    else:
        targets = reader.floats(n)
    if reader.remaining:
        raise DatasetFormatError(f"{path} has {reader.remaining} unexpected trailing bytes")
    if not np.isfinite(inputs).all() or not np.isfinite(targets).all():
        raise NonFiniteValue(f"{path} contains NaN or infinity")
    return Dataset(inputs=inputs, targets=targets, name=path.stem)


def load_dataset(path: Path, target_kind: Optional[TargetKind] = None) -> Dataset:
    """
    Read a dataset written by ``save_dataset`` (or edited by hand, for CSV).

    The format is taken from the magic bytes when present, else CSV is assumed. Without
    ``target_kind``, CSV labels that are all integers load as classes and any other
    label column (``2.5``, say) loads as regression targets. A non-integral label only
    raises InvalidLabel when ``target_kind`` is ``TargetKind.CLASS``.

    Raises:
        MalformedHeader: Bad CSV header or binary preamble.
        RowLengthMismatch: A CSV row with the wrong field count (names the line).
        NonFiniteValue: NaN or infinity anywhere.
        InvalidLabel: A negative class label, or a non-integral one when the class kind
            is forced.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError(f"dataset not found: {path}")
    with open(path, "rb") as f:
        head = f.read(len(DATASET_MAGIC))
    if head == DATASET_MAGIC:
        ds = _load_binary(path, target_kind)
    else:
        ds = _load_csv(path, target_kind)
    logger.debug("loaded %s: %d rows, %d features, %s", path, ds.size, ds.dim, ds.target_kind.value)
    return ds

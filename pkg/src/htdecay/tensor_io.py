"""Portable checkpoint container and module naming.

File format v1 (bit-exact):

    bytes 0..7     ASCII magic ``HTSRCKPT``
    bytes 8..11    u32 little-endian manifest length ``Lm``
    bytes 12..12+Lm  UTF-8 JSON manifest {name: {dtype, shape, offset, length}}
    rest           raw payload; offsets are relative to payload start

All tensors are stored as row-major little-endian float32. A reserved
manifest key ``__metadata__`` (never a tensor name) carries the free-form
string key/value metadata. The manifest JSON is written with sorted keys
and compact separators so identical inputs produce identical bytes.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MAGIC = b"HTSRCKPT"
METADATA_KEY = "__metadata__"
_HEADER = struct.Struct("<I")


class CheckpointError(Exception):
    """Base class for checkpoint container failures."""


class DuplicateNameError(CheckpointError):
    """Two entries share a raw name."""


class NonFiniteValuesError(CheckpointError):
    """A matrix contains NaN or infinity."""


class BadMagicError(CheckpointError):
    """File does not start with the v1 magic."""


class TruncatedPayloadError(CheckpointError):
    """A manifest region points past the end of the payload."""


class OverlappingRegionsError(CheckpointError):
    """Two manifest regions overlap."""


class UnsupportedDtypeError(CheckpointError):
    """Manifest declares a dtype other than f32."""


class MalformedManifestError(CheckpointError):
    """Manifest is not valid JSON or an entry is structurally wrong."""


class ModuleKind(str, Enum):
    ATT_Q = "att.q"
    ATT_K = "att.k"
    ATT_V = "att.v"
    ATT_O = "att.o"
    MLP_GATE = "mlp.gate"
    MLP_UP = "mlp.up"
    MLP_DOWN = "mlp.down"
    OTHER = "other"


# The seven projection kinds scheduled by default; OTHER is stored and
# reloadable but excluded from spectral scheduling.
SCHEDULED_KINDS: frozenset[ModuleKind] = frozenset(
    k for k in ModuleKind if k is not ModuleKind.OTHER
)

# Order used whenever modules must be listed deterministically.
KIND_ORDER = {k: i for i, k in enumerate(ModuleKind)}

_NAME_RE = re.compile(r"^layers\.(\d+)\.(att\.[qkvo]|mlp\.(?:gate|up|down))$")


@dataclass(frozen=True)
class ModuleId:
    """Identity of one named matrix: layer index, kind, and the raw name."""

    layer: int
    kind: ModuleKind
    raw_name: str

    def sort_key(self) -> tuple[int, int, str]:
        return (self.layer, KIND_ORDER[self.kind], self.raw_name)


def parse_module_name(raw_name: str) -> ModuleId:
    """Parse ``layers.{i}.{kind}``; anything unmatched maps to kind=other.

    Total and deterministic: never raises.
    """
    m = _NAME_RE.match(raw_name)
    if m is None:
        return ModuleId(layer=0, kind=ModuleKind.OTHER, raw_name=raw_name)
    return ModuleId(layer=int(m.group(1)), kind=ModuleKind(m.group(2)), raw_name=raw_name)


def format_module_name(mid: ModuleId) -> str:
    """Inverse of :func:`parse_module_name` for the seven projection kinds."""
    if mid.kind is ModuleKind.OTHER:
        return mid.raw_name
    return f"layers.{mid.layer}.{mid.kind.value}"


@dataclass
class WeightMatrix:
    """A named dense real matrix (2-D, finite entries only).

    ``values`` is held as-is; callers must not mutate it after construction.
    Spectral analysis promotes to float64 internally, so float32 storage
    and float64 working copies are both accepted.
    """

    id: ModuleId
    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError(f"{self.id.raw_name}: expected a nonempty 2-D matrix, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValuesError(f"{self.id.raw_name}: matrix contains non-finite values")
        self.values = arr

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


@dataclass
class Checkpoint:
    """In-memory view of a v1 checkpoint file: entries plus metadata."""

    entries: list[WeightMatrix] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def by_name(self) -> dict[str, WeightMatrix]:
        return {e.id.raw_name: e for e in self.entries}


def write_checkpoint(
    entries: Sequence[WeightMatrix] | Iterable[WeightMatrix],
    metadata: Mapping[str, str],
    path: str | Path,
) -> None:
    """Write entries and metadata to ``path`` in format v1.

    Matrices are stored as float32; inputs already in float32 round-trip
    bit-for-bit. Raises :class:`DuplicateNameError` on repeated raw names.
    """
    entries = list(entries)
    seen: set[str] = set()
    for e in entries:
        name = e.id.raw_name
        if name == METADATA_KEY:
            raise DuplicateNameError(f"entry name {METADATA_KEY!r} is reserved")
        if name in seen:
            raise DuplicateNameError(f"duplicate entry name {name!r}")
        seen.add(name)

    manifest: dict[str, object] = {}
    chunks: list[bytes] = []
    offset = 0
    for e in entries:
        raw = np.ascontiguousarray(e.values, dtype="<f4").tobytes()
        manifest[e.id.raw_name] = {
            "dtype": "f32",
            "shape": [int(e.rows), int(e.cols)],
            "offset": offset,
            "length": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)
    if metadata:
        manifest[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}

    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def read_checkpoint(path: str | Path) -> Checkpoint:
    """Read a v1 checkpoint, validating magic, regions, and dtypes.

    Every structural defect raises its own error type so callers can
    distinguish truncation from overlap from unsupported dtypes.
    """
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + _HEADER.size or data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a v1 checkpoint (bad magic)")
    (mlen,) = _HEADER.unpack_from(data, len(MAGIC))
    head = len(MAGIC) + _HEADER.size
    if head + mlen > len(data):
        raise TruncatedPayloadError(f"{path}: manifest extends past end of file")
    try:
        manifest = json.loads(data[head : head + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedManifestError(f"{path}: manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise MalformedManifestError(f"{path}: manifest root is not an object")

    payload = memoryview(data)[head + mlen :]

    metadata: dict[str, str] = {}
    meta = manifest.pop(METADATA_KEY, None)
    if meta is not None:
        if not isinstance(meta, dict):
            raise MalformedManifestError(f"{path}: {METADATA_KEY} is not an object")
        metadata = {str(k): str(v) for k, v in meta.items()}

    regions: list[tuple[int, int, str]] = []
    entries: list[WeightMatrix] = []
    for name in manifest:
        spec = manifest[name]
        if not isinstance(spec, dict):
            raise MalformedManifestError(f"{path}: entry {name!r} is not an object")
        try:
            dtype = spec["dtype"]
            shape = spec["shape"]
            off = int(spec["offset"])
            length = int(spec["length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedManifestError(f"{path}: entry {name!r} missing/invalid fields") from exc
        if dtype != "f32":
            raise UnsupportedDtypeError(f"{path}: entry {name!r} has unsupported dtype {dtype!r}")
        if (
            not isinstance(shape, list)
            or len(shape) != 2
            or not all(isinstance(s, int) and s > 0 for s in shape)
        ):
            raise MalformedManifestError(f"{path}: entry {name!r} has invalid shape {shape!r}")
        n, m = shape
        if length != 4 * n * m:
            raise MalformedManifestError(
                f"{path}: entry {name!r} length {length} does not match shape {n}x{m}"
            )
        if off < 0 or off + length > len(payload):
            raise TruncatedPayloadError(
                f"{path}: entry {name!r} region [{off}, {off + length}) past end of payload"
            )
        regions.append((off, off + length, name))

        arr = np.frombuffer(payload, dtype="<f4", count=n * m, offset=off).reshape(n, m)
        entries.append(WeightMatrix(id=parse_module_name(name), values=arr))

    regions.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(regions, regions[1:]):
        if s1 < e0:
            raise OverlappingRegionsError(f"{path}: regions of {n0!r} and {n1!r} overlap")

    return Checkpoint(entries=entries, metadata=metadata)

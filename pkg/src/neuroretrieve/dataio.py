"""On-disk formats: EEG clips, pair manifests, embedding caches and checkpoints.

All binary formats are little-endian. Layouts:

clip (``.eeg``)
    ``b"EEGB"`` | u32 version=1 | u32 V | u32 T | u32 fs | V*T float32, channel-major

embedding cache (``.emb``)
    ``b"EMBV"`` | u32 version=1 | u32 count | u32 dim | count*dim float32, row-major

    The pair_id -> row map lives outside the binary payload, either in the
    manifest (``image_ref`` holding the row index) or in a ``<path>.ids.jsonl``
    sidecar with one ``{"pair_id": ..., "row": ...}`` object per line.

checkpoint (``.ckpt``)
    ``b"NRCK"`` | u32 version=1 | u32 meta_len | meta (UTF-8 JSON, sorted keys)
    | u32 n_tensors | per tensor, in lexicographic name order:
    u32 name_len | name (UTF-8) | u32 ndim | ndim*u32 shape | float64 payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

CLIP_MAGIC = b"EEGB"
EMB_MAGIC = b"EMBV"
CKPT_MAGIC = b"NRCK"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Base class for malformed files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class NonFiniteValueError(FormatError):
    pass


class ManifestError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass
class EEGClip:
    pair_id: str
    data: np.ndarray  # (V, T)
    fs: float
    class_label: str | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise ValueError(f"clip data must be a non-empty V x T matrix, got shape {self.data.shape}")
        if not self.fs > 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs}")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteValueError(f"clip {self.pair_id!r} contains non-finite values")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.fs


def _read_header(buf: bytes, magic: bytes, n_fields: int, path) -> tuple[int, ...]:
    if len(buf) < 4 or buf[:4] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {buf[:4]!r}")
    need = 4 + 4 * n_fields
    if len(buf) < need:
        raise TruncatedPayloadError(f"{path}: header truncated ({len(buf)} < {need} bytes)")
    fields = struct.unpack(f"<{n_fields}I", buf[4:need])
    if fields[0] != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {fields[0]}, expected {FORMAT_VERSION}")
    return fields


def _read_f32_payload(buf: bytes, offset: int, count: int, path) -> np.ndarray:
    n_bytes = 4 * count
    if len(buf) - offset < n_bytes:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(buf) - offset} bytes, header promises {n_bytes}"
        )
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValueError(f"{path}: payload contains non-finite values")
    return values.astype(np.float32)


def write_clip(clip: EEGClip, path) -> None:
    """Write a clip; data is stored as float32 so round-trips are exact for float32 input."""
    if int(clip.fs) != clip.fs:
        raise ValueError(f"clip format stores integer sampling rates, got {clip.fs}")
    V, T = clip.data.shape
    payload = np.ascontiguousarray(clip.data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(CLIP_MAGIC)
        f.write(struct.pack("<4I", FORMAT_VERSION, V, T, int(clip.fs)))
        f.write(payload.tobytes())


def read_clip(path, pair_id: str | None = None, class_label: str | None = None) -> EEGClip:
    path = Path(path)
    buf = path.read_bytes()
    _, V, T, fs = _read_header(buf, CLIP_MAGIC, 4, path)
    data = _read_f32_payload(buf, 20, V * T, path).reshape(V, T)
    return EEGClip(pair_id=pair_id or path.stem, data=data, fs=float(fs), class_label=class_label)


# --------------------------------------------------------------------------- manifest

MANIFEST_FIELDS = ("pair_id", "eeg_path", "image_ref", "class_label", "set_id")


@dataclass
class ManifestEntry:
    pair_id: str
    eeg_path: str
    image_ref: str | int
    class_label: str
    set_id: int


@dataclass
class PairManifest:
    entries: list[ManifestEntry]
    n_sets: int
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def classes(self) -> list[str]:
        return sorted({e.class_label for e in self.entries})

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.pair_id: e for e in self.entries}

    def in_sets(self, set_ids) -> list[ManifestEntry]:
        wanted = set(set_ids)
        return [e for e in self.entries if e.set_id in wanted]

    def eeg_file(self, entry: ManifestEntry) -> Path:
        p = Path(entry.eeg_path)
        return p if p.is_absolute() else self.root / p

    def load_clip(self, entry: ManifestEntry) -> EEGClip:
        return read_clip(self.eeg_file(entry), pair_id=entry.pair_id, class_label=entry.class_label)


def validate_entries(entries: list[ManifestEntry], n_sets: int) -> None:
    seen = set()
    for e in entries:
        if e.pair_id in seen:
            raise ManifestError(f"duplicate pair_id {e.pair_id!r}")
        seen.add(e.pair_id)
        if not (0 <= e.set_id < n_sets):
            raise ManifestError(f"pair {e.pair_id!r}: set_id {e.set_id} outside [0, {n_sets})")


def load_manifest(path, n_sets: int | None = None, check_files: bool = True) -> PairManifest:
    """Load a line-delimited JSON manifest.

    ``n_sets`` defaults to ``max(set_id) + 1``. Relative ``eeg_path`` values are
    resolved against the manifest's directory.
    """
    path = Path(path)
    entries = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            unknown = set(rec) - set(MANIFEST_FIELDS)
            if unknown:
                raise ManifestError(f"{path}:{lineno}: unknown field(s) {sorted(unknown)}")
            missing = [k for k in MANIFEST_FIELDS if k not in rec]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing required field(s) {missing}")
            entries.append(
                ManifestEntry(
                    pair_id=str(rec["pair_id"]),
                    eeg_path=str(rec["eeg_path"]),
                    image_ref=rec["image_ref"],
                    class_label=str(rec["class_label"]),
                    set_id=int(rec["set_id"]),
                )
            )
    if n_sets is None:
        n_sets = max((e.set_id for e in entries), default=-1) + 1
    validate_entries(entries, n_sets)
    manifest = PairManifest(entries=entries, n_sets=n_sets, root=path.parent)
    if check_files:
        for e in entries:
            if not manifest.eeg_file(e).exists():
                raise ManifestError(f"pair {e.pair_id!r}: eeg_path {e.eeg_path!r} does not resolve")
    return manifest


def write_manifest(manifest: PairManifest, path) -> None:
    validate_entries(manifest.entries, manifest.n_sets)
    with open(path, "w") as f:
        for e in manifest.entries:
            rec = {k: getattr(e, k) for k in MANIFEST_FIELDS}
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- embeddings


@dataclass
class EmbeddingCache:
    vectors: np.ndarray  # (count, dim) float32
    id_index: dict[str, int]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2:
            raise ValueError("embedding vectors must be a count x dim matrix")
        if not np.all(np.isfinite(self.vectors)):
            raise NonFiniteValueError("embedding cache contains non-finite values")
        rows = sorted(self.id_index.values())
        if len(set(rows)) != len(rows) or any(not 0 <= r < self.count for r in rows):
            raise ValueError("id_index must map each pair_id to a distinct valid row")

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def lookup(self, pair_id: str, expected_dim: int | None = None) -> np.ndarray:
        if expected_dim is not None and expected_dim != self.dim:
            raise DimensionMismatchError(f"cache dim {self.dim} != expected {expected_dim}")
        try:
            row = self.id_index[pair_id]
        except KeyError:
            raise KeyError(f"pair_id {pair_id!r} not found in embedding cache") from None
        return self.vectors[row]


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".ids.jsonl")


def write_embeddings(cache: EmbeddingCache, path, sidecar: bool = True) -> None:
    path = Path(path)
    payload = np.ascontiguousarray(cache.vectors, dtype="<f4")
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<3I", FORMAT_VERSION, cache.count, cache.dim))
        f.write(payload.tobytes())
    if sidecar:
        with open(_sidecar(path), "w") as f:
            for pid, row in sorted(cache.id_index.items(), key=lambda kv: kv[1]):
                f.write(json.dumps({"pair_id": pid, "row": row}) + "\n")


def read_embeddings(path, id_index: Mapping[str, int] | None = None) -> EmbeddingCache:
    """Read a cache. Without ``id_index`` the sidecar next to ``path`` is used if present."""
    path = Path(path)
    buf = path.read_bytes()
    _, count, dim = _read_header(buf, EMB_MAGIC, 3, path)
    vectors = _read_f32_payload(buf, 16, count * dim, path).reshape(count, dim)
    if id_index is None:
        id_index = {}
        if _sidecar(path).exists():
            with open(_sidecar(path)) as f:
                for line in f:
                    if line.strip():
                        rec = json.loads(line)
                        id_index[rec["pair_id"]] = int(rec["row"])
    return EmbeddingCache(vectors=vectors, id_index=dict(id_index))


def manifest_id_index(manifest: PairManifest) -> dict[str, int]:
    """pair_id -> row map for manifests whose image_ref fields are embedding rows."""
    return {e.pair_id: int(e.image_ref) for e in manifest.entries}


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(params: Mapping[str, Any], path, meta: Mapping | None = None) -> None:
    """Serialize named float64 tensors (numpy arrays or torch tensors).

    Output bytes depend only on the tensor values and ``meta``: names are
    written in lexicographic order and metadata as sorted-key JSON.
    """
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<2I", FORMAT_VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            value = params[name]
            if hasattr(value, "detach"):
                value = value.detach().cpu().numpy()
            arr = np.asarray(value, dtype="<f8")  # tobytes() below is C-order; keeps 0-d shapes
            raw = name.encode()
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            f.write(arr.tobytes())


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    buf = path.read_bytes()
    _, meta_len = _read_header(buf, CKPT_MAGIC, 2, path)
    pos = 12

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedPayloadError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    meta = json.loads(take(meta_len).decode())
    (n_tensors,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValueError(f"{path}: tensor {name!r} holds non-finite values")
        tensors[name] = arr
    return tensors, meta


def load_checkpoint(
    path,
    expected_shapes: Mapping[str, tuple] | None = None,
    encoder_only: bool = False,
    encoder_prefix: str = "encoder.",
) -> dict[str, np.ndarray]:
    """Load tensors, optionally checking them against ``expected_shapes``.

    With ``encoder_only`` only tensors under ``encoder_prefix`` are required and
    returned; other expected tensors may be absent (pre-training transfer).
    """
    tensors, _ = read_checkpoint(path)
    if encoder_only:
        tensors = {k: v for k, v in tensors.items() if k.startswith(encoder_prefix)}
    if expected_shapes is not None:
        bad = []
        for name, arr in tensors.items():
            if name not in expected_shapes:
                bad.append(f"{name}: unexpected tensor")
            elif tuple(arr.shape) != tuple(expected_shapes[name]):
                bad.append(f"{name}: checkpoint {tuple(arr.shape)} vs model {tuple(expected_shapes[name])}")
        required = [
            n for n in expected_shapes if not encoder_only or n.startswith(encoder_prefix)
        ]
        bad += [f"{n}: missing" for n in required if n not in tensors]
        if bad:
            raise ShapeMismatchError("checkpoint does not match model: " + "; ".join(bad))
    return tensors

"""Layered feature stacks, the ESDF container, manifests and cropping."""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, TextIO

import numpy as np

MAGIC = b"ESDF"
VERSION = 1
DTYPE_F32 = 0
HEADER = struct.Struct("<4sIIIII")

LABELS = ("bonafide", "spoof")
SPLITS = ("train", "dev", "eval_seen", "eval_unseen")
BONAFIDE_GENERATOR = "-"


class FeatureFormatError(ValueError):
    """Stream is not an ESDF file."""


class FeatureCorruptionError(FeatureFormatError):
    """ESDF payload is shorter or longer than its header declares."""


class UnsupportedVersionError(FeatureFormatError):
    pass


class ManifestError(ValueError):
    pass


class ManifestIntegrityError(ManifestError):
    pass


@dataclass(frozen=True)
class FeatureStack:
    """All encoder layers for one utterance, stored as an (L, T, D) array."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"feature stack must be L x T x D with positive extents, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature stack holds non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def L(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def D(self) -> int:
        return self.values.shape[2]

    def __eq__(self, other):
        if not isinstance(other, FeatureStack):
            return NotImplemented
        a, b = self.values, other.values
        return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()

    __hash__ = None


def write_feature_stack(stack: FeatureStack, dest: BinaryIO | str | os.PathLike) -> int:
    """Serialise ``stack`` as ESDF v1 and return the number of bytes written."""
    if not hasattr(dest, "write"):
        with open(dest, "wb") as fh:
            return write_feature_stack(stack, fh)
    payload = np.ascontiguousarray(stack.values, dtype="<f4").tobytes()
    header = HEADER.pack(MAGIC, VERSION, stack.L, stack.T, stack.D, DTYPE_F32)
    dest.write(header)
    dest.write(payload)
    return len(header) + len(payload)


def read_feature_stack(src: BinaryIO | bytes | str | os.PathLike) -> FeatureStack:
    if isinstance(src, (bytes, bytearray)):
        src = io.BytesIO(src)
    if not hasattr(src, "read"):
        with open(src, "rb") as fh:
            return read_feature_stack(fh)
    head = src.read(HEADER.size)
    if len(head) < HEADER.size or head[:4] != MAGIC:
        raise FeatureFormatError(f"bad magic {head[:4]!r}, expected {MAGIC!r}")
    _, version, L, T, D, dtype = HEADER.unpack(head)
    if version != VERSION:
        raise UnsupportedVersionError(f"ESDF version {version} is not supported (expected {VERSION})")
    if dtype != DTYPE_F32:
        raise FeatureFormatError(f"unknown dtype code {dtype}")
    if min(L, T, D) < 1:
        raise FeatureFormatError(f"header declares empty shape {(L, T, D)}")
    expected = L * T * D * 4
    payload = src.read(expected + 1)
    if len(payload) < expected:
        raise FeatureCorruptionError(
            f"truncated payload: got {len(payload)} bytes, expected {expected}"
            f" (deficit {expected - len(payload)} bytes)"
        )
    if len(payload) > expected:
        raise FeatureCorruptionError(f"trailing bytes after the {expected}-byte payload")
    values = np.frombuffer(payload, dtype="<f4").reshape(L, T, D).astype(np.float32)
    return FeatureStack(values)


def random_crop(stack: FeatureStack, t_target: int, rng: np.random.Generator) -> FeatureStack:
    """Crop to ``t_target`` frames at one random offset shared by every layer.

    Clips shorter than the target are wrap-padded by repeating from frame 0.
    """
    if t_target < 1:
        raise ValueError("t_target must be at least 1")
    T = stack.T
    if T == t_target:
        return stack
    if T < t_target:
        return FeatureStack(stack.values[:, np.arange(t_target) % T, :])
    offset = int(rng.integers(0, T - t_target + 1))
    return FeatureStack(stack.values[:, offset:offset + t_target, :])


def center_crop(stack: FeatureStack, t_target: int) -> FeatureStack:
    """Deterministic evaluation crop; short clips are wrap-padded."""
    if t_target < 1:
        raise ValueError("t_target must be at least 1")
    T = stack.T
    if T == t_target:
        return stack
    if T < t_target:
        return FeatureStack(stack.values[:, np.arange(t_target) % T, :])
    offset = (T - t_target) // 2
    return FeatureStack(stack.values[:, offset:offset + t_target, :])


def frames_for_seconds(seconds: float, frame_rate: float = 50.0) -> int:
    return max(1, int(round(seconds * frame_rate)))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    path: str
    label: str
    generator_id: str
    split: str

    def __post_init__(self):
        if not self.utt_id:
            raise ManifestError("empty utt_id")
        if self.label not in LABELS:
            raise ManifestError(f"{self.utt_id}: unknown label {self.label!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"{self.utt_id}: unknown split {self.split!r}")
        if self.label == "bonafide" and self.generator_id != BONAFIDE_GENERATOR:
            raise ManifestError(f"{self.utt_id}: bonafide entry must use generator '-'")
        if self.label == "spoof" and self.generator_id in ("", BONAFIDE_GENERATOR):
            raise ManifestError(f"{self.utt_id}: spoof entry needs a generator id")

    def to_json(self) -> str:
        return json.dumps(
            {
                "utt_id": self.utt_id,
                "path": self.path,
                "label": self.label,
                "generator": self.generator_id,
                "split": self.split,
            }
        )


def load_manifest(src: TextIO | str | os.PathLike) -> list[ManifestEntry]:
    if not hasattr(src, "read"):
        with open(src, encoding="utf-8") as fh:
            return load_manifest(fh)
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(src, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            entry = ManifestEntry(
                utt_id=str(obj["utt_id"]),
                path=str(obj["path"]),
                label=obj["label"],
                generator_id=str(obj["generator"]),
                split=obj["split"],
            )
        except (json.JSONDecodeError, KeyError, TypeError, ManifestError) as exc:
            raise ManifestError(f"manifest line {lineno}: {exc}") from exc
        if entry.utt_id in seen:
            raise ManifestIntegrityError(f"duplicate utt_id {entry.utt_id!r} at line {lineno}")
        seen.add(entry.utt_id)
        entries.append(entry)
    return entries


def write_manifest(entries: Iterable[ManifestEntry], dest: TextIO | str | os.PathLike) -> None:
    if not hasattr(dest, "write"):
        with open(dest, "w", encoding="utf-8") as fh:
            write_manifest(entries, fh)
        return
    for e in entries:
        dest.write(e.to_json() + "\n")


class Corpus:
    """Manifest entries plus access to their feature stacks.

    Stacks come either from a preloaded mapping (in-memory synthetic data) or
    from ESDF files resolved relative to ``root``.  File reads are cached.
    """

    def __init__(self, entries: list[ManifestEntry], stacks: dict | None = None, root=None):
        self.entries = list(entries)
        self._stacks = dict(stacks or {})
        self.root = Path(root) if root is not None else None
        self.world = None

    @classmethod
    def from_manifest(cls, manifest_path) -> "Corpus":
        manifest_path = Path(manifest_path)
        return cls(load_manifest(manifest_path), root=manifest_path.parent)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def stack(self, entry: ManifestEntry) -> FeatureStack:
        s = self._stacks.get(entry.utt_id)
        if s is None:
            path = Path(entry.path)
            if not path.is_absolute() and self.root is not None:
                path = self.root / path
            s = read_feature_stack(path)
            self._stacks[entry.utt_id] = s
        return s

    def __len__(self) -> int:
        return len(self.entries)

"""Readers and writers for the pipeline's binary and text artifacts.

Binary layouts are little-endian regardless of host byte order:

* feature file:   "FEA1", u32 F, u32 T, then F*T f32 values stored
                  time-major (each frame's F values contiguous).
* embedding file: "EMB1", u32 count, then per record u16 id length,
                  the UTF-8 id bytes, and 64 f32 values.
* checkpoint:     "DNSE", u32 version, u32 tensor count, a manifest of
                  (u16 name length, name bytes, u8 rank, u32 dims...),
                  then every tensor's f64 data in manifest order.

Text artifacts are newline-delimited with space-separated fields.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"FEA1"
EMBEDDING_MAGIC = b"EMB1"
CHECKPOINT_MAGIC = b"DNSE"
CHECKPOINT_VERSION = 1
EMBEDDING_DIM = 64


class FormatError(ValueError):
    """A file does not conform to its declared layout."""


class _Reader:
    def __init__(self, path: Path):
        self.path = Path(path)
        self.data = self.path.read_bytes()
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(
                f"{self.path}: truncated while reading {what} at byte {self.offset}"
            )
        out = self.data[self.offset : self.offset + n]
        self.offset += n
        return out

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def expect_end(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(
                f"{self.path}: {len(self.data) - self.offset} trailing bytes at byte {self.offset}"
            )


def _expect_magic(r: _Reader, magic: bytes) -> None:
    got = r.take(len(magic), "magic")
    if got != magic:
        raise FormatError(f"{r.path}: bad magic {got!r}, expected {magic!r}")


# feature files ---------------------------------------------------------------


def write_feature_file(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
        raise ValueError(f"frames must be a non-empty [F, T] array, got shape {frames.shape}")
    f, t = frames.shape
    payload = np.ascontiguousarray(frames.T, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", f, t))
        fh.write(payload)


def read_feature_file(path) -> np.ndarray:
    """Returns [F, T] float64 frames."""
    r = _Reader(path)
    _expect_magic(r, FEATURE_MAGIC)
    f = r.u32("feature dimension")
    t = r.u32("frame count")
    if f < 1 or t < 1:
        raise FormatError(f"{r.path}: degenerate dimensions F={f}, T={t}")
    raw = r.take(4 * f * t, "feature payload")
    r.expect_end()
    mat = np.frombuffer(raw, dtype="<f4").reshape(t, f)
    return mat.T.astype(np.float64)


# embedding files -------------------------------------------------------------


def write_embedding_file(path, records: list[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<I", len(records)))
        for rec_id, vec in records:
            vec = np.asarray(vec)
            if vec.shape != (EMBEDDING_DIM,):
                raise ValueError(
                    f"embedding for {rec_id!r} has shape {vec.shape}, format stores ({EMBEDDING_DIM},)"
                )
            ident = rec_id.encode("utf-8")
            if len(ident) > 0xFFFF:
                raise ValueError(f"recording id too long: {rec_id!r}")
            fh.write(struct.pack("<H", len(ident)))
            fh.write(ident)
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def read_embedding_file(path) -> dict[str, np.ndarray]:
    r = _Reader(path)
    _expect_magic(r, EMBEDDING_MAGIC)
    count = r.u32("record count")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        ident_len = r.u16(f"id length of record {i}")
        ident = r.take(ident_len, f"id of record {i}").decode("utf-8")
        raw = r.take(4 * EMBEDDING_DIM, f"embedding of {ident!r}")
        if ident in out:
            raise FormatError(f"{r.path}: duplicate recording id {ident!r}")
        out[ident] = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    r.expect_end()
    return out


# checkpoints -----------------------------------------------------------------


def write_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ValueError(f"tensor name too long: {name!r}")
            if arr.ndim > 0xFF:
                raise ValueError(f"tensor rank {arr.ndim} too large for {name!r}")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    r = _Reader(path)
    _expect_magic(r, CHECKPOINT_MAGIC)
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{r.path}: unsupported checkpoint version {version}")
    count = r.u32("tensor count")
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for i in range(count):
        name_len = r.u16(f"name length of tensor {i}")
        name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        rank = r.u8(f"rank of {name!r}")
        dims = tuple(r.u32(f"dim {d} of {name!r}") for d in range(rank))
        shapes.append((name, dims))
    out: dict[str, np.ndarray] = {}
    for name, dims in shapes:
        n = int(np.prod(dims)) if dims else 1
        raw = r.take(8 * n, f"data of {name!r}")
        if name in out:
            raise FormatError(f"{r.path}: duplicate tensor name {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    r.expect_end()
    return out


# text artifacts --------------------------------------------------------------


def write_manifest(path, rows: list[tuple[str, str, str, str]]) -> None:
    """Rows of (recording_id, speaker_id, domain, relative_path)."""
    lines = []
    for rec_id, spk, domain, rel in rows:
        for fieldname, value in (("recording_id", rec_id), ("speaker_id", spk),
                                 ("domain", domain), ("path", rel)):
            if not value or any(ch.isspace() for ch in value):
                raise ValueError(f"manifest {fieldname} {value!r} must be non-empty without spaces")
        if domain not in ("source", "target"):
            raise ValueError(f"manifest domain must be source|target, got {domain!r}")
        lines.append(f"{rec_id} {spk} {domain} {rel}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[tuple[str, str, str, str]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        if parts[2] not in ("source", "target"):
            raise FormatError(f"{path}:{lineno}: bad domain {parts[2]!r}")
        rows.append((parts[0], parts[1], parts[2], parts[3]))
    return rows


def write_trial_list(path, trials: list[tuple[str, str, str]]) -> None:
    lines = []
    for enroll, test, label in trials:
        if label not in ("target", "nontarget"):
            raise ValueError(f"trial label must be target|nontarget, got {label!r}")
        lines.append(f"{enroll} {test} {label}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trial_list(path) -> list[tuple[str, str, str]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        if parts[2] not in ("target", "nontarget"):
            raise FormatError(f"{path}:{lineno}: bad label {parts[2]!r}")
        out.append((parts[0], parts[1], parts[2]))
    return out


def write_score_file(path, rows: list[tuple[str, str, float]]) -> None:
    Path(path).write_text(
        "\n".join(f"{e} {t} {s:.6f}" for e, t, s in rows) + "\n"
    )


def read_score_file(path) -> list[tuple[str, str, float]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        try:
            score = float(parts[2])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad score {parts[2]!r}") from exc
        out.append((parts[0], parts[1], score))
    return out


def format_log_line(epoch: int, l_y: float, l_d: float, val_eer: float,
                    lr_f: float, lr_y: float, lr_d: float) -> str:
    return (f"{epoch} {l_y:.6f} {l_d:.6f} {val_eer:.6f} "
            f"{lr_f:.6f} {lr_y:.6f} {lr_d:.6f}")


def parse_log_line(line: str, lineno: int = 0, path: str = "<log>") -> tuple[int, list[float]]:
    parts = line.split()
    if len(parts) != 7:
        raise FormatError(f"{path}:{lineno}: expected 7 columns, got {len(parts)}")
    try:
        return int(parts[0]), [float(p) for p in parts[1:]]
    except ValueError as exc:
        raise FormatError(f"{path}:{lineno}: bad numeric field") from exc

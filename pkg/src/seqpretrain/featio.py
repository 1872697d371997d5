"""On-disk formats: feature files, manifests, and audio loading.

Feature file (little-endian)::

    4 bytes   magic b"MSKF"
    u32       version (1)
    u32       T
    u32       d
    f32       frame_rate
    T*d f32   frames, row-major

Manifest: UTF-8 text, one utterance per line, five tab-separated fields::

    id  speaker_id  source_path  source_kind(audio|feat)  transcript

The transcript may be empty. Relative source paths resolve against the
manifest's directory.
"""

import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np

from .frontend import FeatureMatrix, Waveform

FEAT_MAGIC = b"MSKF"
FEAT_VERSION = 1
_FEAT_HEADER = struct.Struct("<4sIIIf")


class DataError(Exception):
    """Malformed or unreadable input data."""


def write_features(path, fm: FeatureMatrix) -> None:
    frames = np.ascontiguousarray(fm.frames, dtype="<f4")
    T, d = frames.shape
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, T, d, fm.frame_rate))
        fh.write(frames.tobytes())


def read_features(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _FEAT_HEADER.size:
        raise DataError(f"{path}: truncated feature header")
    magic, version, T, d, rate = _FEAT_HEADER.unpack_from(raw)
    if magic != FEAT_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != FEAT_VERSION:
        raise DataError(f"{path}: unsupported feature file version {version}")
    body = raw[_FEAT_HEADER.size:]
    if len(body) != 4 * T * d:
        raise DataError(f"{path}: expected {T}x{d} floats, found {len(body)} bytes")
    frames = np.frombuffer(body, dtype="<f4").reshape(T, d).astype(np.float64)
    return FeatureMatrix(frames, rate)


@dataclass(frozen=True)
class Record:
    id: str
    speaker: str
    source: str
    kind: str
    transcript: str = ""

    def resolved(self, base: Optional[Path]) -> "Record":
        if base is None or os.path.isabs(self.source):
            return self
        return replace(self, source=str(base / self.source))


def read_manifest(path) -> List[Record]:
    path = Path(path)
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) == 4:
                fields.append("")
            if len(fields) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
            uid, spk, src, kind, text = fields
            if kind not in ("audio", "feat"):
                raise DataError(f"{path}:{lineno}: source_kind must be audio or feat, got {kind!r}")
            if uid in seen:
                raise DataError(f"{path}:{lineno}: duplicate utterance id {uid!r}")
            seen.add(uid)
            records.append(Record(uid, spk, src, kind, text.strip()).resolved(path.parent))
    return records


def write_manifest(path, records: Iterable[Record]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            for field in (r.id, r.speaker, r.source, r.transcript):
                if "\t" in field or "\n" in field:
                    raise DataError(f"manifest field for {r.id!r} contains a tab or newline")
            fh.write(f"{r.id}\t{r.speaker}\t{r.source}\t{r.kind}\t{r.transcript}\n")


def read_audio(path) -> Waveform:
    """Read a WAV file, mixing down to mono; integer PCM is scaled to [-1, 1)."""
    from scipy.io import wavfile

    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read audio: {exc}") from exc
    data = np.asarray(data)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max + 1)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.size == 0:
        raise DataError(f"{path}: empty audio")
    return Waveform(data.astype(np.float64), rate)


def write_audio(path, w: Waveform) -> None:
    from scipy.io import wavfile

    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, w.sample_rate, pcm)

"""File formats: PCM16 WAV, FDMS mel files, FDVT video tracks and JSON lines."""
from __future__ import annotations

import json
import os
import struct
import wave
from pathlib import Path
from typing import Iterable

import numpy as np

from .dsp import SAMPLE_RATE, Waveform

MEL_MAGIC = b"FDMS"
TRACK_MAGIC = b"FDVT"


class FormatError(ValueError):
    pass


def write_wav(path: str | os.PathLike, w: Waveform | np.ndarray) -> None:
    samples = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(pcm.tobytes())


def read_wav(path: str | os.PathLike) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise FormatError(f"{path}: expected mono PCM16")
        if fh.getframerate() != SAMPLE_RATE:
            raise FormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {fh.getframerate()}")
        raw = fh.readframes(fh.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0)


def _write_matrix(path, magic: bytes, m: np.ndarray) -> None:
    m = np.asarray(m, dtype="<f4", order="C")
    if m.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    Path(path).write_bytes(magic + struct.pack("<II", *m.shape) + m.tobytes())


def _read_matrix(path, magic: bytes) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != magic:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {magic!r}")
    rows, cols = struct.unpack_from("<II", blob, 4)
    if len(blob) != 12 + 4 * rows * cols:
        raise FormatError(f"{path}: payload size does not match header {rows}x{cols}")
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(rows, cols).astype(np.float64)


def write_mel(path, mel: np.ndarray) -> None:
    _write_matrix(path, MEL_MAGIC, mel)


def read_mel(path) -> np.ndarray:
    return _read_matrix(path, MEL_MAGIC)


def write_track(path, track: np.ndarray) -> None:
    _write_matrix(path, TRACK_MAGIC, track)


def read_track(path) -> np.ndarray:
    return _read_matrix(path, TRACK_MAGIC)


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]

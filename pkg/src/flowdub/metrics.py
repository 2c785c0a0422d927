"""Evaluation metrics: cepstra, DTW alignment, MCD, MCD_SL and energy correlation."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import dsp

N_CEPSTRA = 13
MCD_CONST = 10.0 / np.log(10.0) * np.sqrt(2.0)

# preference on equal cost while backtracking from the end: diagonal, then (1,0), then (0,1)
_STEPS = ((1, 1), (1, 0), (0, 1))


@lru_cache(maxsize=4)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis, rows are frequencies: C @ x gives the coefficients."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    C = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    C[0] /= np.sqrt(2.0)
    C.setflags(write=False)
    return C


def cepstra_full(mel: np.ndarray) -> np.ndarray:
    mel = np.asarray(mel, dtype=np.float64)
    if not np.all(np.isfinite(mel)):
        raise ValueError("non-finite log-mel input")
    return mel @ dct_matrix(mel.shape[1]).T


def mfcc(mel: np.ndarray) -> np.ndarray:
    """T x 13 mel-cepstra c1..c13 (c0 dropped) from a T x 80 log-mel matrix."""
    mel = np.atleast_2d(mel)
    if mel.shape[1] != dsp.N_MELS:
        raise ValueError(f"expected {dsp.N_MELS} mel bins, got {mel.shape[1]}")
    return cepstra_full(mel)[:, 1:N_CEPSTRA + 1]


def _distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim == 1:
        return np.abs(a[:, None] - b[None, :])
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _dtw_from_distances(d: np.ndarray) -> tuple[list[tuple[int, int]], float]:
    Ta, Tb = d.shape
    D = np.full((Ta + 1, Tb + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, Ta + 1):
        prev, cur, row = D[i - 1], D[i], d[i - 1]
        for j in range(1, Tb + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = row[j - 1] + best
    i, j = Ta, Tb
    path = [(Ta - 1, Tb - 1)]
    while (i, j) != (1, 1):
        options = [(D[i - di, j - dj], di, dj) for di, dj in _STEPS]
        best = min(v for v, _, _ in options)
        for v, di, dj in options:
            if v == best:
                i, j = i - di, j - dj
                break
        path.append((i - 1, j - 1))
    path.reverse()
    return path, float(D[Ta, Tb])


def _check_track(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError(f"empty track {name}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite values in track {name}")
    return x


def dtw_align(a: np.ndarray, b: np.ndarray) -> tuple[list[tuple[int, int]], float]:
    """Minimal-cost monotone alignment under Euclidean frame distance.

    Returns the path as (i, j) pairs from (0, 0) to (Ta-1, Tb-1) and the summed
    frame distance along it.
    """
    a, b = _check_track(a, "a"), _check_track(b, "b")
    return _dtw_from_distances(_distance_matrix(a, b))


def _canonical(a: np.ndarray, b: np.ndarray) -> bool:
    """True when (a, b) should be swapped so that f(a, b) and f(b, a) share one lattice."""
    if a.shape[0] != b.shape[0]:
        return a.shape[0] > b.shape[0]
    return a.tobytes() > b.tobytes()


def _aligned_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _canonical(a, b):
        a, b = b, a
    d = _distance_matrix(a, b)
    path, _ = _dtw_from_distances(d)
    idx = np.array(path)
    return d[idx[:, 0], idx[:, 1]]


def mcd(a: np.ndarray, b: np.ndarray) -> float:
    """Mel cepstral distortion in dB over the DTW alignment of two cepstra tracks."""
    a, b = _check_track(a, "a"), _check_track(b, "b")
    return float(MCD_CONST * np.mean(_aligned_distances(a, b)))


def length_ratio(a, b) -> float:
    na, nb = len(a), len(b)
    return max(na, nb) / min(na, nb)


def mcd_sl(a: np.ndarray, b: np.ndarray) -> float:
    """MCD scaled by the length ratio max(Ta, Tb) / min(Ta, Tb)."""
    return mcd(a, b) * length_ratio(_check_track(a, "a"), _check_track(b, "b"))


def energy_corr(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two energy contours, DTW-aligned when lengths differ."""
    a = _check_track(np.asarray(a, dtype=np.float64).reshape(-1), "a")
    b = _check_track(np.asarray(b, dtype=np.float64).reshape(-1), "b")
    if a.size != b.size:
        swap = _canonical(a, b)
        x, y = (b, a) if swap else (a, b)
        path, _ = _dtw_from_distances(_distance_matrix(x, y))
        idx = np.array(path)
        x, y = x[idx[:, 0]], y[idx[:, 1]]
        a, b = (y, x) if swap else (x, y)
    if np.ptp(a) <= 1e-12 or np.ptp(b) <= 1e-12:
        return 0.0
    r = np.corrcoef(a, b)[0, 1]
    return float(np.clip(r, -1.0, 1.0))


def evaluate_pair(pair_id: str, reference: dsp.Waveform, generated: dsp.Waveform) -> dict:
    """One evaluation-report record for a reference / generated waveform pair."""
    ref_c = mfcc(dsp.mel_spectrogram(reference))
    gen_c = mfcc(dsp.mel_spectrogram(generated))
    m = mcd(ref_c, gen_c)
    return {
        "id": pair_id,
        "mcd": m,
        "mcd_sl": m * length_ratio(ref_c, gen_c),
        "energy_corr": energy_corr(dsp.energy_contour(reference), dsp.energy_contour(generated)),
        "frames_ref": int(ref_c.shape[0]),
        "frames_gen": int(gen_c.shape[0]),
    }


def summarize(records: list[dict]) -> dict:
    if not records:
        return {"n": 0, "mean_mcd": None, "mean_mcd_sl": None, "mean_energy_corr": None}
    return {
        "n": len(records),
        "mean_mcd": float(np.mean([r["mcd"] for r in records])),
        "mean_mcd_sl": float(np.mean([r["mcd_sl"] for r in records])),
        "mean_energy_corr": float(np.mean([r["energy_corr"] for r in records])),
    }

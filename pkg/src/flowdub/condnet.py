"""Trainable field network, toy condition encoders and energy injection.

Rows are mel frames. A batch stacks the frames of several clips; the
``sample_index`` of a :class:`Condition` maps each row to its clip so that
per-clip inputs (prompt vectors, drop flags, flow times) can be broadcast.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import dsp
from . import numkit as nk
from .synthdata import SAMPLES_PER_VIDEO_FRAME, TRACK_DIMS, VOCAB

D_C = 64
N_BLOCKS = 4
TIME_DIM = 32
FILLER = "<pad>"
TEXT_VOCAB = VOCAB + (FILLER,)
INSTRUCTION_BUCKETS = 256
INSTRUCTION_DIM = 64
SOURCES = ("video", "text", "prompt", "energy")
_SOURCE_WIDTH = {"video": D_C, "text": D_C, "prompt": D_C, "energy": 1}


@dataclass
class Condition:
    """Conditioning for ``n_rows`` mel frames drawn from ``n_samples`` clips.

    ``video``/``text`` are per-row embeddings, ``prompt`` is one vector per
    clip and ``energy`` one scalar channel per row. ``dropped[src]`` marks
    clips whose source is replaced by the learned null embedding; a source
    left as ``None`` counts as dropped everywhere.
    """

    sample_index: np.ndarray
    video: object = None
    text: object = None
    prompt: object = None
    energy: np.ndarray | None = None
    dropped: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sample_index = np.asarray(self.sample_index, dtype=np.int64)
        for name in ("video", "text", "energy"):
            val = getattr(self, name)
            if val is not None and val.shape[0] != self.n_rows:
                raise ValueError(f"{name} has {val.shape[0]} frames, condition has {self.n_rows}")
        if self.prompt is not None and self.prompt.shape[0] != self.n_samples:
            raise ValueError("prompt needs one row per sample")

    @property
    def n_rows(self) -> int:
        return int(self.sample_index.size)

    @property
    def n_samples(self) -> int:
        return int(self.sample_index.max()) + 1 if self.sample_index.size else 0

    def drop_mask(self, source: str) -> np.ndarray:
        """Per-sample booleans, True where the source is replaced by its null."""
        if getattr(self, source) is None:
            return np.ones(self.n_samples, dtype=bool)
        return np.asarray(self.dropped.get(source, np.zeros(self.n_samples, dtype=bool)), dtype=bool)

    def with_dropped(self, source: str, mask=True) -> "Condition":
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), (self.n_samples,)).copy()
        return replace(self, dropped={**self.dropped, source: mask})


def single(n_frames: int, **sources) -> Condition:
    return Condition(sample_index=np.zeros(n_frames, dtype=np.int64), **sources)


def concat(conds: list[Condition]) -> Condition:
    """Stack single- or multi-clip conditions into one batch."""
    def cat(name):
        vals = [getattr(c, name) for c in conds]
        if all(v is None for v in vals):
            return None
        if any(v is None for v in vals):
            raise ValueError(f"source {name} present in only part of the batch")
        if any(isinstance(v, nk.Tensor) for v in vals):
            raise TypeError("concat works on arrays; build batches before encoding")
        return np.concatenate([np.asarray(v) for v in vals], axis=0)

    offsets = np.cumsum([0] + [c.n_samples for c in conds])
    index = np.concatenate([c.sample_index + off for c, off in zip(conds, offsets)])
    dropped = {}
    for src in SOURCES:
        if any(src in c.dropped for c in conds):
            dropped[src] = np.concatenate([c.drop_mask(src) for c in conds])
    return Condition(sample_index=index, video=cat("video"), text=cat("text"), prompt=cat("prompt"),
                     energy=cat("energy"), dropped=dropped)


# parameters

def _affine_params(store: nk.ParamStore, rng, name: str, fan_in: int, fan_out: int, bias: bool = True):
    store.add(f"{name}/W", nk.init_uniform(rng, fan_in, (fan_in, fan_out)))
    if bias:
        store.add(f"{name}/b", np.zeros(fan_out))


def init_field(store: nk.ParamStore, rng: np.random.Generator, prefix: str, sources: tuple[str, ...],
               n_bins: int = dsp.N_MELS, hidden: int = D_C, n_blocks: int = N_BLOCKS) -> None:
    _affine_params(store, rng, f"{prefix}/in_x", n_bins, hidden)
    _affine_params(store, rng, f"{prefix}/in_t", TIME_DIM, hidden, bias=False)
    for src in sources:
        _affine_params(store, rng, f"{prefix}/in_{src}", _SOURCE_WIDTH[src], hidden, bias=False)
        store.add(f"{prefix}/null_{src}", np.zeros((1, hidden)))
    for k in range(n_blocks):
        for part in ("a", "g", "o"):
            _affine_params(store, rng, f"{prefix}/block{k}/{part}", hidden, hidden)
    _affine_params(store, rng, f"{prefix}/out", hidden, n_bins)


def init_video_encoder(store, rng, prefix: str = "video") -> None:
    _affine_params(store, rng, prefix, TRACK_DIMS, D_C)


def init_text_encoder(store, rng, prefix: str = "text") -> None:
    store.add(f"{prefix}/emb", nk.init_uniform(rng, len(TEXT_VOCAB), (len(TEXT_VOCAB), D_C)))


def init_prompt_encoder(store, rng, prefix: str = "prompt") -> None:
    _affine_params(store, rng, prefix, dsp.N_MELS, D_C)


def field_sources(store: nk.ParamStore, prefix: str) -> tuple[str, ...]:
    return tuple(s for s in SOURCES if f"{prefix}/null_{s}" in store)


def n_blocks_of(store: nk.ParamStore, prefix: str) -> int:
    k = 0
    while f"{prefix}/block{k}/a/W" in store:
        k += 1
    return k


# forward

@lru_cache(maxsize=1)
def _time_freqs() -> np.ndarray:
    return np.geomspace(1.0, 1000.0, TIME_DIM // 2)


def time_embedding(t_rows) -> np.ndarray:
    t = np.asarray(t_rows, dtype=np.float64).reshape(-1, 1)
    ang = t * _time_freqs()[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _rows_of(mask_per_sample: np.ndarray, index: np.ndarray) -> np.ndarray:
    return mask_per_sample[index].astype(np.float64)[:, None]


def _source_term(store, prefix: str, src: str, cond: Condition) -> nk.Tensor:
    null = store[f"{prefix}/null_{src}"]
    dropped = cond.drop_mask(src)
    n = cond.n_rows
    if dropped.all():
        return nk.matmul(np.ones((n, 1)), null)
    value = getattr(cond, src)
    if src == "prompt":
        onehot = np.zeros((n, cond.n_samples))
        onehot[np.arange(n), cond.sample_index] = 1.0
        value = nk.matmul(onehot, value)
    elif src == "energy":
        value = np.asarray(value, dtype=np.float64).reshape(n, 1)
    proj = nk.matmul(value, store[f"{prefix}/in_{src}/W"])
    if not dropped.any():
        return proj
    keep = _rows_of(~dropped, cond.sample_index)
    return nk.mul(proj, keep) + nk.matmul(1.0 - keep, null)


def field_forward(store: nk.ParamStore, prefix: str, x_t, t, cond: Condition) -> nk.Tensor:
    """Predicted velocity for every row of ``x_t`` (rows x mel bins).

    ``t`` is a scalar or one value per row.
    """
    x_t = x_t if isinstance(x_t, nk.Tensor) else nk.Tensor(x_t)
    n = x_t.shape[0]
    if cond.n_rows != n:
        raise ValueError(f"condition has {cond.n_rows} frames, x_t has {n}")
    t_rows = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    h = nk.affine(x_t, store[f"{prefix}/in_x/W"], store[f"{prefix}/in_x/b"])
    h = h + nk.matmul(time_embedding(t_rows), store[f"{prefix}/in_t/W"])
    for src in field_sources(store, prefix):
        h = h + _source_term(store, prefix, src, cond)
    for k in range(n_blocks_of(store, prefix)):
        p = f"{prefix}/block{k}"
        a = nk.tanh(nk.affine(h, store[f"{p}/a/W"], store[f"{p}/a/b"]))
        g = nk.sigmoid(nk.affine(h, store[f"{p}/g/W"], store[f"{p}/g/b"]))
        h = h + nk.affine(a * g, store[f"{p}/o/W"], store[f"{p}/o/b"])
    return nk.affine(h, store[f"{prefix}/out/W"], store[f"{prefix}/out/b"])


# encoders

def mel_frame_times(n_mel: int) -> np.ndarray:
    return (np.arange(n_mel) * dsp.HOP_LENGTH + dsp.WIN_LENGTH / 2) / dsp.SAMPLE_RATE


def mel_frames_for_track(track: np.ndarray) -> int:
    return dsp.n_frames(len(track) * SAMPLES_PER_VIDEO_FRAME)


def resample_track(track: np.ndarray, n_mel: int) -> np.ndarray:
    """Linear interpolation of a 25 fps track at mel frame centres (clamped at the ends)."""
    track = np.asarray(track, dtype=np.float64)
    if track.ndim != 2 or track.shape[0] == 0:
        raise ValueError("empty video track")
    pos = mel_frame_times(n_mel) * (dsp.SAMPLE_RATE / SAMPLES_PER_VIDEO_FRAME) - 0.5
    grid = np.arange(track.shape[0])
    return np.stack([np.interp(pos, grid, track[:, k]) for k in range(track.shape[1])], axis=1)


def encode_video(store, track: np.ndarray, n_mel: int | None = None, prefix: str = "video") -> nk.Tensor:
    """Per-mel-frame embedding tanh(track_resampled @ W + b)."""
    track = np.asarray(track, dtype=np.float64)
    if track.ndim != 2 or track.shape[0] == 0:
        raise ValueError("empty video track")
    if n_mel is None:
        n_mel = mel_frames_for_track(track)
    return video_from_rows(store, resample_track(track, n_mel), prefix)


def video_from_rows(store, rows: np.ndarray, prefix: str = "video") -> nk.Tensor:
    return nk.tanh(nk.affine(rows, store[f"{prefix}/W"], store[f"{prefix}/b"]))


def token_ids(transcript) -> list[int]:
    ids = []
    for tok in transcript:
        if tok not in VOCAB:
            raise ValueError(f"unknown token {tok!r}")
        ids.append(VOCAB.index(tok))
    return ids


def _onehot(ids, width: int) -> np.ndarray:
    out = np.zeros((len(ids), width))
    out[np.arange(len(ids)), ids] = 1.0
    return out


def encode_text(store, transcript, target_frames: int, prefix: str = "text") -> nk.Tensor:
    """Token embeddings right-padded with the filler token to ``target_frames`` rows."""
    ids = token_ids(transcript)
    if target_frames < len(ids):
        raise ValueError(f"transcript of {len(ids)} tokens does not fit in {target_frames} frames")
    ids = ids + [TEXT_VOCAB.index(FILLER)] * (target_frames - len(ids))
    return nk.matmul(_onehot(ids, len(TEXT_VOCAB)), store[f"{prefix}/emb"])


def expansion_index(n_tokens: int, n_frames: int) -> np.ndarray:
    """Token slot feeding each frame when tokens share the frames equally; filler slot if empty."""
    if n_tokens == 0:
        return np.full(n_frames, n_frames - 1 if n_frames else 0)
    return np.minimum(((np.arange(n_frames) + 0.5) * n_tokens / n_frames).astype(int), n_tokens - 1)


def expand_text(padded, n_tokens: int, n_frames: int | None = None) -> nk.Tensor:
    """Length expansion of a padded text embedding onto ``n_frames`` mel frames."""
    padded = padded if isinstance(padded, nk.Tensor) else nk.Tensor(padded)
    n_frames = padded.shape[0] if n_frames is None else n_frames
    if n_tokens == 0:
        sel = np.zeros((n_frames, padded.shape[0]))
        sel[:, -1] = 1.0
    else:
        sel = _onehot(expansion_index(n_tokens, n_frames), padded.shape[0])
    return nk.matmul(sel, padded)


def frame_token_ids(transcript, n_frames: int) -> np.ndarray:
    """Vocabulary id feeding each frame after length expansion."""
    if n_frames < len(transcript):
        raise ValueError(f"transcript of {len(transcript)} tokens does not fit in {n_frames} frames")
    if len(transcript) == 0:
        return np.full(n_frames, TEXT_VOCAB.index(FILLER))
    return np.asarray(token_ids(transcript))[expansion_index(len(transcript), n_frames)]


def text_from_ids(store, ids: np.ndarray, prefix: str = "text") -> nk.Tensor:
    return nk.matmul(_onehot(np.asarray(ids), len(TEXT_VOCAB)), store[f"{prefix}/emb"])


def text_rows(store, transcript, n_frames: int, prefix: str = "text") -> nk.Tensor:
    """Per-frame transcript embedding: encode_text followed by expand_text."""
    return text_from_ids(store, frame_token_ids(transcript, n_frames), prefix)


def prompt_features(mel: np.ndarray, mel_mean: np.ndarray, mel_std: np.ndarray) -> np.ndarray:
    """Temporal mean of the standardized log-mel frames."""
    mel = np.atleast_2d(np.asarray(mel, dtype=np.float64))
    if mel.shape[0] == 0:
        raise ValueError("prompt shorter than one frame")
    return ((mel - mel_mean) / mel_std).mean(axis=0)


def encode_prompt(store, prompt: dsp.Waveform, mel_mean=0.0, mel_std=1.0, prefix: str = "prompt") -> nk.Tensor:
    """Speaker-style vector: log-mel, temporal mean, affine projection."""
    if len(prompt) < dsp.WIN_LENGTH:
        raise ValueError("prompt shorter than one frame")
    feats = prompt_features(dsp.mel_spectrogram(prompt), mel_mean, mel_std)
    return prompt_from_features(store, feats[None, :], prefix)


def prompt_from_features(store, feats: np.ndarray, prefix: str = "prompt") -> nk.Tensor:
    return nk.affine(feats, store[f"{prefix}/W"], store[f"{prefix}/b"])


@lru_cache(maxsize=1)
def _instruction_projection() -> np.ndarray:
    # unit-bound entries keep the averaged bag at O(1) scale after projection
    rng = np.random.default_rng(20240817)
    w = rng.uniform(-3.0, 3.0, size=(INSTRUCTION_BUCKETS, INSTRUCTION_DIM))
    w.setflags(write=False)
    return w


def instruction_tokens(text: str) -> list[str]:
    return [tok.strip(".,;:!?\"'") for tok in text.lower().split() if tok.strip(".,;:!?\"'")]


def instruction_bag(text: str) -> np.ndarray:
    toks = instruction_tokens(text)
    if not toks:
        raise ValueError("empty instruction")
    bag = np.zeros(INSTRUCTION_BUCKETS)
    for tok in toks:
        bag[zlib.crc32(tok.encode("utf-8")) % INSTRUCTION_BUCKETS] += 1.0
    return bag / len(toks)


def encode_instruction(text: str) -> np.ndarray:
    """Fixed 64-dim bag-of-hashed-words embedding."""
    return instruction_bag(text) @ _instruction_projection()


# energy

def resample_linear(values, n_out: int) -> np.ndarray:
    """Piecewise-linear interpolant on [0, 1] sampled at ``n_out`` evenly spaced points."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("empty contour")
    if values.size == n_out:
        return values.copy()
    if n_out == 1:
        return values[:1].copy()
    pos = np.arange(n_out) * (values.size - 1) / (n_out - 1)
    return np.interp(pos, np.arange(values.size), values)


def inject_energy(cond: Condition, energy) -> Condition:
    """Attach an energy contour as the per-frame scalar channel (single-clip conditions)."""
    if cond.n_samples != 1:
        raise ValueError("inject_energy works on one clip at a time")
    e = resample_linear(energy, cond.n_rows)
    dropped = {k: v for k, v in cond.dropped.items() if k != "energy"}
    return replace(cond, energy=e.reshape(-1, 1), dropped=dropped)

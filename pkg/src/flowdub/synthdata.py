"""Deterministic synthetic audiovisual corpus.

Each clip is a harmonic tone sequence: one equal-length segment per transcript
token (A..H map to fixed base frequencies, ``_`` is silence), a speaker-specific
harmonic timbre, and a random smooth amplitude envelope. The "video" is a
25 fps, 4-channel control track: amplitude envelope, base-frequency index,
timbre id and onset pattern. The waveform envelope is the linear interpolant
of the track's amplitude channel, so audio energy follows the video exactly.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .io import read_track, read_wav, write_jsonl, write_track, write_wav

VOCAB = ("A", "B", "C", "D", "E", "F", "G", "H", "_")
SILENCE = "_"
TOKEN_FREQS = {tok: 140.0 * 1.15**k for k, tok in enumerate(VOCAB[:-1])}
VIDEO_FPS = 25
SAMPLES_PER_VIDEO_FRAME = dsp.SAMPLE_RATE // VIDEO_FPS
TRACK_DIMS = 4  # amplitude, base-frequency index, timbre id, onset pattern
N_SPEAKERS = 4
PROMPT_SECONDS = 1.0
# every prompt reads the same tone sweep, so prompts differ only in speaker and envelope
PROMPT_TRANSCRIPT = "ABCDEFGH"
ONSET_DECAY_S = 0.25

TIMBRES = np.array([
    [1.0, 0.5, 0.25, 0.12, 0.06, 0.03, 0.015, 0.008],
    [0.2, 0.4, 1.0, 0.8, 0.3, 0.1, 0.05, 0.02],
    [0.5, 0.0, 1.0, 0.0, 0.7, 0.0, 0.4, 0.0],
    [0.15, 0.2, 0.25, 0.35, 0.5, 0.7, 0.85, 1.0],
])

TASKS = ("v2a", "v2s", "tts")


@dataclass(frozen=True)
class ClipSpec:
    duration: float
    speaker: int
    n_tokens: int
    constant_amplitude: bool = False


@dataclass
class SynClip:
    id: str
    video_track: np.ndarray
    waveform: dsp.Waveform
    transcript: str
    speaker: int
    duration: float
    prompt: dsp.Waveform
    token_bounds: np.ndarray = field(repr=False)


def clip_rng(seed: int, *key) -> np.random.Generator:
    """Independent stream per (corpus seed, clip key) so clips can be built in any order."""
    digest = hashlib.sha256(repr((seed,) + key).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _draw_transcript(rng: np.random.Generator, n_tokens: int, allow_silence: bool) -> str:
    toks = []
    for _ in range(n_tokens):
        if allow_silence and rng.random() < 0.12 and (not toks or toks[-1] != SILENCE):
            toks.append(SILENCE)
        else:
            toks.append(VOCAB[rng.integers(0, 8)])
    if all(t == SILENCE for t in toks):
        toks[0] = VOCAB[rng.integers(0, 8)]
    return "".join(toks)


def _smooth_envelope(rng: np.random.Generator, times: np.ndarray) -> np.ndarray:
    env = np.zeros_like(times)
    for _ in range(3):
        f = rng.uniform(0.5, 3.0)
        env += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * f * times + rng.uniform(0, 2 * np.pi))
    env /= np.max(np.abs(env)) + 1e-12
    return 0.55 + 0.4 * env


def synthesize(transcript: str, speaker: int, n_samples: int, track_amp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Render samples for a transcript; returns (samples, token boundaries in samples)."""
    L = len(transcript)
    bounds = np.round(np.arange(L + 1) * n_samples / L).astype(int)
    freq = np.zeros(n_samples)
    for k, tok in enumerate(transcript):
        freq[bounds[k]:bounds[k + 1]] = TOKEN_FREQS.get(tok, 0.0)
    phase = 2 * np.pi * np.cumsum(freq) / dsp.SAMPLE_RATE
    amps = TIMBRES[speaker] / TIMBRES[speaker].sum()
    tone = sum(a * np.sin((h + 1) * phase) for h, a in enumerate(amps))
    centers = (np.arange(len(track_amp)) + 0.5) * SAMPLES_PER_VIDEO_FRAME
    env = np.interp(np.arange(n_samples), centers, track_amp) * (freq > 0)
    return 0.9 * env * tone, bounds


def _video_track(rng, transcript: str, speaker: int, n_video: int, constant_amplitude: bool) -> np.ndarray:
    L = len(transcript)
    times = (np.arange(n_video) + 0.5) / VIDEO_FPS
    duration = n_video / VIDEO_FPS
    seg = np.minimum((times / duration * L).astype(int), L - 1)
    since_onset = times - seg * duration / L
    onset = np.exp(-since_onset / ONSET_DECAY_S)
    if constant_amplitude:
        amp = np.full(n_video, 0.8)
    else:
        amp = _smooth_envelope(rng, times) * (0.6 + 0.4 * onset)
    tok = np.array([VOCAB.index(transcript[s]) for s in seg])
    amp = np.where(tok == VOCAB.index(SILENCE), 0.0, amp)
    track = np.stack([
        np.clip(amp, 0.0, 1.0),
        tok / (len(VOCAB) - 1),
        np.full(n_video, speaker / (N_SPEAKERS - 1)),
        onset,
    ], axis=1)
    return track


def render_utterance(rng, transcript: str, speaker: int, n_video: int, constant_amplitude: bool = False):
    track = _video_track(rng, transcript, speaker, n_video, constant_amplitude)
    samples, bounds = synthesize(transcript, speaker, n_video * SAMPLES_PER_VIDEO_FRAME, track[:, 0])
    return track, dsp.Waveform(samples), bounds


def make_clip(seed: int, spec: ClipSpec, clip_id: str = "clip") -> SynClip:
    if not 0 <= spec.speaker < N_SPEAKERS:
        raise ValueError(f"speaker must be in 0..{N_SPEAKERS - 1}")
    if spec.n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    rng = clip_rng(seed, clip_id)
    n_video = int(round(spec.duration * VIDEO_FPS))
    if n_video * SAMPLES_PER_VIDEO_FRAME < dsp.WIN_LENGTH:
        raise ValueError("clip shorter than one analysis window")
    transcript = _draw_transcript(rng, spec.n_tokens, allow_silence=not spec.constant_amplitude)
    track, wave, bounds = render_utterance(rng, transcript, spec.speaker, n_video, spec.constant_amplitude)
    prng = clip_rng(seed, clip_id, "prompt")
    _, prompt, _ = render_utterance(prng, PROMPT_TRANSCRIPT, spec.speaker, int(PROMPT_SECONDS * VIDEO_FPS))
    return SynClip(
        id=clip_id,
        video_track=track,
        waveform=wave,
        transcript=transcript,
        speaker=spec.speaker,
        duration=n_video / VIDEO_FPS,
        prompt=prompt,
        token_bounds=bounds,
    )


def draw_spec(seed: int, index: int) -> ClipSpec:
    rng = clip_rng(seed, "spec", index)
    n_tokens = int(rng.integers(2, 7))
    token_seconds = rng.uniform(0.15, 0.33)
    duration = float(np.clip(n_tokens * token_seconds, 0.5, 2.0))
    return ClipSpec(duration=duration, speaker=index % N_SPEAKERS, n_tokens=n_tokens)


def clip_id_for(index: int) -> str:
    return f"clip{index:05d}"


def split_assignment(seed: int, n_clips: int) -> list[str]:
    order = clip_rng(seed, "split").permutation(n_clips)
    n_train = int(round(0.8 * n_clips))
    n_val = int(round(0.1 * n_clips))
    splits = [""] * n_clips
    for rank, idx in enumerate(order):
        splits[idx] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return splits


def make_corpus(seed: int, n_clips: int, out_dir: str | os.PathLike) -> dict:
    """Write WAVs, prompt WAVs, FDVT tracks, instructions and manifest.json; return the manifest."""
    if n_clips < 10:
        raise ValueError("n_clips must be >= 10")
    out = Path(out_dir)
    try:
        (out / "clips").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc}") from exc
    splits = split_assignment(seed, n_clips)
    entries = []
    for i in range(n_clips):
        cid = clip_id_for(i)
        clip = make_clip(seed, draw_spec(seed, i), cid)
        rel = {"wav": f"clips/{cid}.wav", "prompt": f"clips/{cid}_prompt.wav", "video": f"clips/{cid}.fdvt"}
        write_wav(out / rel["wav"], clip.waveform)
        write_wav(out / rel["prompt"], clip.prompt)
        write_track(out / rel["video"], clip.video_track)
        entries.append({
            "id": cid,
            **rel,
            "transcript": clip.transcript,
            "speaker": clip.speaker,
            "duration": clip.duration,
            "split": splits[i],
        })
    instructions = make_instruction_set(seed)
    write_jsonl(out / "instructions.jsonl", instructions)
    manifest = {
        "format": "flowdub-manifest/1",
        "seed": seed,
        "n_clips": n_clips,
        "instructions": "instructions.jsonl",
        "clips": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


@dataclass
class ClipRecord:
    """A manifest entry with its files loaded."""

    id: str
    transcript: str
    speaker: int
    split: str
    waveform: dsp.Waveform
    prompt: dsp.Waveform
    video_track: np.ndarray


def load_manifest(path: str | os.PathLike) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text(encoding="utf-8"))
    return manifest, path.parent


def load_clips(path: str | os.PathLike, split: str | None = None) -> list[ClipRecord]:
    manifest, root = load_manifest(path)
    out = []
    for e in manifest["clips"]:
        if split is not None and e["split"] != split:
            continue
        out.append(ClipRecord(
            id=e["id"],
            transcript=e["transcript"],
            speaker=e["speaker"],
            split=e["split"],
            waveform=read_wav(root / e["wav"]),
            prompt=read_wav(root / e["prompt"]),
            video_track=read_track(root / e["video"]),
        ))
    return out


# instructions

_FAMILIES = {
    "v2a": (
        ["generate", "create", "produce", "synthesize", "add"],
        ["sound effects", "ambient audio", "background noise", "foley sounds", "environmental audio"],
        ["for this video", "for the silent footage", "to match the footage", "for the scene", "from the frames"],
    ),
    "v2s": (
        ["dub", "voice", "lip-sync", "narrate"],
        ["this silent video", "the character", "the actor", "the person on screen", "the animated character"],
        ["with the script", "using the transcript", "reading the given lines", "in sync with the lips",
         "following the dialogue"],
    ),
    "tts": (
        ["read", "say", "speak", "pronounce", "recite"],
        ["this text", "the sentence", "the transcript", "these words", "the passage"],
        ["aloud", "out loud", "in a natural voice", "with the reference speaker", "clearly"],
    ),
}
TEMPLATES_PER_FAMILY = 40
HELD_OUT = {"v2a": 7, "v2s": 7, "tts": 6}
CANONICAL_INSTRUCTIONS = {
    "v2a": "generate sound effects for this video",
    "v2s": "dub this silent video with the script",
    "tts": "read this text aloud",
}


def make_instruction_set(seed: int) -> list[dict]:
    """120 labeled instructions (40 per task), 100 train and 20 held out.

    Records are ``{"text", "label", "task", "split"}`` with label indexing TASKS.
    """
    records = []
    for label, task in enumerate(TASKS):
        verbs, objects, tails = _FAMILIES[task]
        combos = [f"{v} {o} {t}" for v in verbs for o in objects for t in tails]
        rng = clip_rng(seed, "instructions", task)
        chosen = [combos[i] for i in rng.permutation(len(combos))[:TEMPLATES_PER_FAMILY]]
        for k, text in enumerate(chosen):
            split = "heldout" if k < HELD_OUT[task] else "train"
            records.append({"text": text, "label": label, "task": task, "split": split})
    return records

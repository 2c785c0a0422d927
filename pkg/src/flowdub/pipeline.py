"""Four-stage training orchestration, bundle loading, routed generation and evaluation.

On-disk bundle layout::

    DIR/bundle.json          mel statistics, frames per token, stage provenance
    DIR/stageN/model.ckpt    FDCK parameters + optimizer state
    DIR/stageN/loss.csv      step,lr,loss
    DIR/stageN/run.json      seed, config hash, version
    DIR/stage4/drops.csv     per-sample conditioning drops of the finetune
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from . import condnet as cn
from . import dsp, metrics, mof
from . import numkit as nk
from .io import write_jsonl
from .models import SpeechInput, TTSFlow, V2AFlow, fit_mel_scaler, scaler_from_stats
from .synthdata import CANONICAL_INSTRUCTIONS, load_clips, load_manifest
from .io import read_jsonl

STAGE_DEPS = {1: (), 2: (1,), 3: (1,), 4: (1, 2, 3)}
CHECKPOINT_EVERY = 500
MODULES = ("v2a", "tts", "mof")


class PipelineError(RuntimeError):
    """Runtime failure of a stage or request (missing artifacts, divergence)."""


class RouteInputError(ValueError):
    """An input required by the chosen route was not supplied."""


# configuration

@dataclass(frozen=True)
class StageConfig:
    stage: int
    updates: int
    batch_size: int
    seed: int
    peak_lr: float
    final_lr: float
    warmup_steps: int
    clip_norm: float | None = None
    optimizer: str = "adam"
    weight_decay: float = 0.0
    drop_probability: float = 0.0
    guidance_scale: float = 1.0

    def __post_init__(self):
        if self.stage not in STAGE_DEPS:
            raise ValueError(f"stage must be one of 1-4, got {self.stage}")
        if self.updates < 0 or self.batch_size < 1:
            raise ValueError("updates must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must lie in [0, 1]")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.updates > 0:
            self.schedule()

    def schedule(self) -> nk.Schedule:
        return nk.Schedule(self.peak_lr, self.final_lr, self.warmup_steps, self.updates, self.clip_norm)

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_TOP_KEYS = {"stage", "updates", "batch_size", "seed", "drop_probability", "guidance_scale", "optimizer", "schedule"}
_OPT_KEYS = {"name", "weight_decay"}
_SCHED_KEYS = {"peak_lr", "final_lr", "warmup_steps", "clip_norm"}


def config_from_dict(raw: dict) -> StageConfig:
    def check(section, allowed, where):
        extra = set(section) - allowed
        if extra:
            raise ValueError(f"unknown {where} keys: {sorted(extra)}")

    check(raw, _TOP_KEYS, "config")
    opt = raw.get("optimizer", {})
    sched = raw.get("schedule", {})
    check(opt, _OPT_KEYS, "[optimizer]")
    check(sched, _SCHED_KEYS, "[schedule]")
    try:
        return StageConfig(
            stage=int(raw["stage"]),
            updates=int(raw["updates"]),
            batch_size=int(raw["batch_size"]),
            seed=int(raw.get("seed", 42)),
            peak_lr=float(sched["peak_lr"]),
            final_lr=float(sched["final_lr"]),
            warmup_steps=int(sched["warmup_steps"]),
            clip_norm=float(sched["clip_norm"]) if "clip_norm" in sched else None,
            optimizer=str(opt.get("name", "adam")),
            weight_decay=float(opt.get("weight_decay", 0.0)),
            drop_probability=float(raw.get("drop_probability", 0.0)),
            guidance_scale=float(raw.get("guidance_scale", 1.0)),
        )
    except KeyError as exc:
        raise ValueError(f"missing config key {exc.args[0]!r}") from None


def load_config(path: str | os.PathLike | None = None, stage: int | None = None) -> StageConfig:
    """Read a stage config; without a path the packaged default for ``stage`` is used."""
    if path is None:
        if stage is None:
            raise ValueError("need a config path or a stage number")
        text = resources.files("flowdub").joinpath("configs", f"stage{stage}.toml").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    cfg = config_from_dict(tomllib.loads(text))
    if stage is not None and cfg.stage != stage:
        raise ValueError(f"config is for stage {cfg.stage}, not stage {stage}")
    return cfg


# corpus features

class Corpus:
    """Manifest clips with cached log-mels and energy contours."""

    def __init__(self, manifest_path: str | os.PathLike):
        try:
            self.manifest, self.root = load_manifest(manifest_path)
        except (OSError, ValueError) as exc:
            raise PipelineError(f"cannot read manifest {manifest_path}: {exc}") from exc
        self.path = Path(manifest_path)
        self._clips = {}
        self._mels = {}
        self._prompt_mels = {}

    def clips(self, split: str):
        if split not in self._clips:
            try:
                self._clips[split] = load_clips(self.path, split=split)
            except OSError as exc:
                raise PipelineError(f"missing corpus file: {exc}") from exc
        return self._clips[split]

    def mel(self, clip) -> np.ndarray:
        if clip.id not in self._mels:
            self._mels[clip.id] = dsp.mel_spectrogram(clip.waveform)
        return self._mels[clip.id]

    def prompt_mel(self, clip) -> np.ndarray:
        if clip.id not in self._prompt_mels:
            self._prompt_mels[clip.id] = dsp.mel_spectrogram(clip.prompt)
        return self._prompt_mels[clip.id]

    def instructions(self) -> list[dict]:
        name = self.manifest.get("instructions")
        if not name:
            raise PipelineError("manifest lists no instruction file")
        try:
            return read_jsonl(self.root / name)
        except OSError as exc:
            raise PipelineError(f"missing instruction file: {exc}") from exc

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.manifest, sort_keys=True).encode()).hexdigest()


# bundle

def _stage_dir(out: Path, stage: int) -> Path:
    return out / f"stage{stage}"


def _ckpt(out: Path, stage: int) -> Path:
    return _stage_dir(out, stage) / "model.ckpt"


def _read_meta(out: Path) -> dict:
    p = out / "bundle.json"
    if p.exists():
        return json.loads(p.read_text(encoding="utf-8"))
    return {"format": "flowdub-bundle/1", "stages": {}}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def check_prerequisites(out: Path, stage: int) -> None:
    for dep in STAGE_DEPS[stage]:
        if not _ckpt(out, dep).exists():
            raise PipelineError(f"missing stage-{dep} checkpoint (required by stage {stage}) in {out}")


@dataclass
class Counters:
    gate: int = 0
    v2a: int = 0
    tts: int = 0
    mof: int = 0

    def activated(self) -> list[str]:
        return [m for m in MODULES if getattr(self, m) > 0]


@dataclass
class ModelBundle:
    root: Path
    meta: dict
    v2a: V2AFlow | None = None
    tts: TTSFlow | None = None
    gate: mof.GatingClassifier | None = None
    stages: tuple[int, ...] = ()
    counters: Counters = field(default_factory=Counters)

    @property
    def scaler(self):
        return scaler_from_stats(self.meta["mel_mean"], self.meta["mel_scale"])

    @property
    def frames_per_token(self) -> float:
        return float(self.meta["frames_per_token"])

    @classmethod
    def load(cls, root: str | os.PathLike, upto_stage: int | None = None) -> "ModelBundle":
        root = Path(root)
        if not (root / "bundle.json").exists():
            raise PipelineError(f"no bundle.json in {root}")
        meta = _read_meta(root)
        limit = 4 if upto_stage is None else upto_stage
        stages = tuple(s for s in (1, 2, 3, 4) if s <= limit and _ckpt(root, s).exists())
        b = cls(root=root, meta=meta, stages=stages)
        scaler = b.scaler if "mel_mean" in meta else None
        if 1 in stages:
            b.v2a = V2AFlow(scaler=scaler)
            b.v2a.store_ = nk.load_checkpoint(_ckpt(root, 1))
            b.v2a.scaler_ = scaler
        tts_stage = 4 if 4 in stages else (2 if 2 in stages else None)
        if tts_stage is not None:
            guidance = meta["stages"].get("4", {}).get("guidance_scale", 1.0) if tts_stage == 4 else 1.0
            b.tts = TTSFlow(scaler=scaler, guidance_scale=guidance)
            b.tts.store_ = nk.load_checkpoint(_ckpt(root, tts_stage))
            b.tts.scaler_ = scaler
        if 3 in stages:
            b.gate = mof.GatingClassifier()
            b.gate.store_ = nk.load_checkpoint(_ckpt(root, 3))
            b.gate.classes_ = np.arange(mof.N_TASKS)
        return b

    def prompt_features(self, prompt: dsp.Waveform | None) -> np.ndarray | None:
        if prompt is None:
            return None
        sc = self.scaler
        return cn.prompt_features(dsp.mel_spectrogram(prompt), sc.mean_, sc.scale_)

    def text_frames(self, transcript: str) -> int:
        """Output length when only the transcript fixes the duration."""
        return max(int(round(len(transcript) * self.frames_per_token)), len(transcript), 1)


# training

class _LossLog:
    def __init__(self, path: Path, resume_step: int):
        rows = []
        if resume_step and path.exists():
            for line in path.read_text(encoding="utf-8").splitlines()[1:]:
                if line and int(line.split(",")[0]) <= resume_step:
                    rows.append(line)
        self.path = path
        self.rows = rows

    def add(self, step: int, lr: float, loss: float) -> None:
        self.rows.append(f"{step},{lr!r},{loss!r}")

    def write(self) -> None:
        self.path.write_text("step,lr,loss\n" + "".join(r + "\n" for r in self.rows), encoding="utf-8")


def _start_store(out: Path, stage: int, resume: bool):
    ckpt = _ckpt(out, stage)
    if resume:
        if not ckpt.exists():
            raise PipelineError(f"--resume given but no stage-{stage} checkpoint in {out}")
        return nk.load_checkpoint(ckpt)
    return None


def _finish_stage(out: Path, cfg: StageConfig, store: nk.ParamStore, log: _LossLog, extra: dict,
                  corpus: Corpus) -> dict:
    sdir = _stage_dir(out, cfg.stage)
    nk.save_checkpoint(_ckpt(out, cfg.stage), store)
    log.write()
    losses = [float(r.split(",")[2]) for r in log.rows]
    summary = {
        "stage": cfg.stage,
        "updates": store.step,
        "initial_loss": float(np.mean(losses[:50])) if losses else None,
        "final_loss": float(np.mean(losses[-50:])) if losses else None,
        **extra,
    }
    header = {"seed": cfg.seed, "config_hash": cfg.config_hash(), "version": __version__,
              "config": asdict(cfg), "corpus": corpus.digest(), **summary}
    _write_json(sdir / "run.json", header)
    meta = _read_meta(out)
    meta["version"] = __version__
    meta["stages"][str(cfg.stage)] = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "updates": store.step,
                                      "guidance_scale": cfg.guidance_scale}
    _write_json(out / "bundle.json", meta)
    return summary


def _flow_loop(est, X, y, store, log: _LossLog, out: Path, stage: int, on_info=None):
    def on_step(step, lr, loss, info):
        log.add(step, lr, loss)
        if on_info is not None:
            on_info(step, info)
        if step % CHECKPOINT_EVERY == 0 and step < est.n_updates:
            nk.save_checkpoint(_ckpt(out, stage), est.store_)
            log.write()

    try:
        est.fit(X, y, store=store, on_step=on_step)
    except nk.NonFiniteError as exc:
        raise PipelineError(f"stage {stage} diverged: {exc}") from exc
    return est


def _estimator_kwargs(cfg: StageConfig) -> dict:
    warm = min(cfg.warmup_steps, max(cfg.updates - 1, 0))
    return dict(n_updates=cfg.updates, batch_size=cfg.batch_size, peak_lr=cfg.peak_lr, final_lr=cfg.final_lr,
                warmup_steps=warm, clip_norm=cfg.clip_norm, optimizer=cfg.optimizer,
                weight_decay=cfg.weight_decay, seed=cfg.seed)


def train_stage1_v2a(corpus: Corpus, cfg: StageConfig, out: Path, resume: bool = False) -> dict:
    train = corpus.clips("train")
    mels = [corpus.mel(c) for c in train]
    meta = _read_meta(out)
    if resume and "mel_mean" in meta:
        scaler = scaler_from_stats(meta["mel_mean"], meta["mel_scale"])
    else:
        scaler = fit_mel_scaler(mels)
    meta.update({"mel_mean": scaler.mean_.tolist(), "mel_scale": scaler.scale_.tolist()})
    _write_json(out / "bundle.json", meta)
    store = _start_store(out, 1, resume)
    log = _LossLog(_stage_dir(out, 1) / "loss.csv", store.step if store else 0)
    est = V2AFlow(scaler=scaler, **_estimator_kwargs(cfg))
    if cfg.updates == 0 and store is None:
        est.store_ = est.init_store()
    else:
        _flow_loop(est, [c.video_track for c in train], mels, store, log, out, 1)
    return _finish_stage(out, cfg, est.store_, log, {}, corpus)


def _speech_inputs(corpus: Corpus, clips, scaler, with_energy: bool) -> list[SpeechInput]:
    out = []
    for c in clips:
        T = corpus.mel(c).shape[0]
        prompt = cn.prompt_features(corpus.prompt_mel(c), scaler.mean_, scaler.scale_)
        energy = dsp.energy_contour(c.waveform) if with_energy else None
        out.append(SpeechInput(transcript=c.transcript, n_frames=T, prompt=prompt, energy=energy))
    return out


def train_stage2_tts(corpus: Corpus, cfg: StageConfig, out: Path, resume: bool = False) -> dict:
    meta = _read_meta(out)
    scaler = scaler_from_stats(meta["mel_mean"], meta["mel_scale"])
    train = corpus.clips("train")
    X = _speech_inputs(corpus, train, scaler, with_energy=False)
    fpt = float(np.mean([x.n_frames / len(x.transcript) for x in X]))
    meta["frames_per_token"] = fpt
    _write_json(out / "bundle.json", meta)
    store = _start_store(out, 2, resume)
    log = _LossLog(_stage_dir(out, 2) / "loss.csv", store.step if store else 0)
    est = TTSFlow(scaler=scaler, drop_probability=cfg.drop_probability, **_estimator_kwargs(cfg))
    if cfg.updates == 0 and store is None:
        est.store_ = est.init_store()
    else:
        _flow_loop(est, X, [corpus.mel(c) for c in train], store, log, out, 2)
    return _finish_stage(out, cfg, est.store_, log, {"frames_per_token": fpt}, corpus)


def train_stage3_mof(corpus: Corpus, cfg: StageConfig, out: Path, resume: bool = False) -> dict:
    recs = corpus.instructions()
    train = [r for r in recs if r.get("split", "train") == "train"]
    held = [r for r in recs if r.get("split") == "heldout"]
    store = _start_store(out, 3, resume)
    log = _LossLog(_stage_dir(out, 3) / "loss.csv", store.step if store else 0)
    clf = mof.GatingClassifier(n_updates=cfg.updates, batch_size=cfg.batch_size, peak_lr=cfg.peak_lr,
                               final_lr=cfg.final_lr, warmup_steps=min(cfg.warmup_steps, max(cfg.updates - 1, 0)),
                               clip_norm=cfg.clip_norm, seed=cfg.seed)
    if cfg.updates == 0 and store is None:
        clf.store_ = clf.init_store()
        clf.classes_ = np.arange(mof.N_TASKS)
    else:
        clf.fit([r["text"] for r in train], [r["label"] for r in train], store=store,
                on_step=lambda s, lr, loss: log.add(s, lr, loss))
    acc = float(clf.score([r["text"] for r in held], [r["label"] for r in held])) if held else None
    return _finish_stage(out, cfg, clf.store_, log, {"heldout_accuracy": acc, "heldout_size": len(held)}, corpus)


def fresh_copy(store: nk.ParamStore) -> nk.ParamStore:
    """Same parameters, zeroed optimizer state (a new optimization run)."""
    new = nk.ParamStore()
    for k, t in store.params.items():
        new.add(k, t.data.copy())
    return new


def train_stage4_v2s(corpus: Corpus, cfg: StageConfig, out: Path, resume: bool = False) -> dict:
    meta = _read_meta(out)
    scaler = scaler_from_stats(meta["mel_mean"], meta["mel_scale"])
    train = corpus.clips("train")
    X = _speech_inputs(corpus, train, scaler, with_energy=True)
    store = _start_store(out, 4, resume)
    if store is None:
        store = fresh_copy(nk.load_checkpoint(_ckpt(out, 2)))
    log = _LossLog(_stage_dir(out, 4) / "loss.csv", store.step)
    drops_path = _stage_dir(out, 4) / "drops.csv"
    drop_rows = []
    if resume and drops_path.exists():
        for line in drops_path.read_text(encoding="utf-8").splitlines()[1:]:
            if line and int(line.split(",")[0]) <= store.step:
                drop_rows.append(line)

    def on_info(step, info):
        for k, (de, dt, dp) in enumerate(zip(info["dropped"][:, 2], info["dropped"][:, 0], info["dropped"][:, 1])):
            drop_rows.append(f"{step},{train[info['index'][k]].id},{int(de)},{int(dt)},{int(dp)}")

    est = TTSFlow(scaler=scaler, use_energy=True, drop_probability=cfg.drop_probability,
                  guidance_scale=cfg.guidance_scale, **_estimator_kwargs(cfg))
    if cfg.updates > 0:
        _flow_loop(est, X, [corpus.mel(c) for c in train], store, log, out, 4, on_info=on_info)
    else:
        est.store_ = store
    drops_path.write_text("step,clip,energy,text,prompt\n" + "".join(r + "\n" for r in drop_rows), encoding="utf-8")
    rates = drop_rates(drops_path)
    return _finish_stage(out, cfg, est.store_, log, {"drop_rates": rates}, corpus)


def drop_rates(path: str | os.PathLike) -> dict:
    rows = [line.split(",") for line in Path(path).read_text(encoding="utf-8").splitlines()[1:] if line]
    if not rows:
        return {"samples": 0}
    arr = np.array([[int(r[2]), int(r[3]), int(r[4])] for r in rows])
    return {"samples": len(rows), "energy": float(arr[:, 0].mean()), "text": float(arr[:, 1].mean()),
            "prompt": float(arr[:, 2].mean())}


_TRAINERS = {1: train_stage1_v2a, 2: train_stage2_tts, 3: train_stage3_mof, 4: train_stage4_v2s}


def train_stage(stage: int, data: str | os.PathLike, out: str | os.PathLike, cfg: StageConfig | None = None,
                resume: bool = False) -> dict:
    cfg = cfg if cfg is not None else load_config(stage=stage)
    if cfg.stage != stage:
        raise ValueError(f"config is for stage {cfg.stage}, not stage {stage}")
    out = Path(out)
    check_prerequisites(out, stage)
    corpus = Corpus(data)
    _stage_dir(out, stage).mkdir(parents=True, exist_ok=True)
    return _TRAINERS[stage](corpus, cfg, out, resume)


# generation

def _require(value, name: str, task: str):
    if value is None:
        raise RouteInputError(f"{name} required for route {task}")


def synthesize_v2a_mel(bundle: ModelBundle, video: np.ndarray, seed: int) -> np.ndarray:
    if bundle.v2a is None:
        raise PipelineError("bundle has no stage-1 checkpoint")
    bundle.counters.v2a += 1
    return bundle.v2a.sample(bundle.v2a.condition(video), np.random.default_rng([seed, 1]))


def synthesize_speech_mel(bundle: ModelBundle, transcript: str, n_frames: int, prompt, energy, seed: int):
    if bundle.tts is None:
        raise PipelineError("bundle has no stage-2 checkpoint")
    bundle.counters.tts += 1
    inp = SpeechInput(transcript=transcript, n_frames=n_frames, prompt=bundle.prompt_features(prompt), energy=energy)
    return bundle.tts.generate(inp, np.random.default_rng([seed, 2]))


def v2a_energy(bundle: ModelBundle, video: np.ndarray, seed: int) -> np.ndarray:
    """Energy contour of the V2A module's audio for a video track."""
    mel = synthesize_v2a_mel(bundle, video, seed)
    return dsp.energy_contour(dsp.griffin_lim(mel, seed=seed))


def _check_inputs(task: str, video, transcript):
    if task in ("v2a", "v2s"):
        _require(video, "video", task)
    if task in ("tts", "v2s"):
        _require(transcript, "transcript", task)


def generate(bundle: ModelBundle, instruction: str, video: np.ndarray | None = None, transcript: str | None = None,
             prompt: dsp.Waveform | None = None, seed: int = 42) -> tuple[dsp.Waveform, dict]:
    """Route an instruction through the gate and run only the modules of that route."""
    if bundle.gate is None:
        raise PipelineError("bundle has no stage-3 gating checkpoint")
    start = Counters(**asdict(bundle.counters))
    decision = bundle.gate.decide(instruction)
    bundle.counters.gate += 1
    task = decision.task
    _check_inputs(task, video, transcript)
    if task == "v2a":
        wave = dsp.griffin_lim(synthesize_v2a_mel(bundle, video, seed), seed=seed)
    elif task == "tts":
        T = bundle.text_frames(transcript)
        knowledge = mof.route(decision, None, mode="hard", width=T)
        bundle.counters.mof += 1
        energy = None if knowledge.empty else knowledge.feature
        mel = synthesize_speech_mel(bundle, transcript, T, prompt, energy, seed)
        wave = dsp.griffin_lim(mel, seed=seed)
    else:
        T = cn.mel_frames_for_track(video)
        knowledge = mof.route(decision, v2a_energy(bundle, video, seed), mode="hard")
        bundle.counters.mof += 1
        mel = synthesize_speech_mel(bundle, transcript, T, prompt, knowledge.feature, seed)
        wave = dsp.griffin_lim(mel, seed=seed)
    used = Counters(**{k: getattr(bundle.counters, k) - getattr(start, k) for k in asdict(start)})
    audit = {
        "instruction": instruction,
        "probs": [float(p) for p in decision.probs],
        "route": task,
        "activated_modules": used.activated(),
        "counters": asdict(used),
    }
    return wave, audit


# evaluation

def _eval_one(bundle: ModelBundle | None, mode: str, clip, seed: int, duration: str) -> dict:
    if mode == "reference":
        generated = clip.waveform
    elif mode == "v2a":
        generated = dsp.griffin_lim(synthesize_v2a_mel(bundle, clip.video_track, seed), seed=seed)
    elif mode == "zero-shot":
        if duration == "text":
            T = bundle.text_frames(clip.transcript)
        else:
            T = cn.mel_frames_for_track(clip.video_track)
        mel = synthesize_speech_mel(bundle, clip.transcript, T, clip.prompt, None, seed)
        generated = dsp.griffin_lim(mel, seed=seed)
    else:
        energy = v2a_energy(bundle, clip.video_track, seed)
        T = cn.mel_frames_for_track(clip.video_track)
        mel = synthesize_speech_mel(bundle, clip.transcript, T, clip.prompt, energy, seed)
        generated = dsp.griffin_lim(mel, seed=seed)
    return metrics.evaluate_pair(clip.id, clip.waveform, generated)


def eval_mode(bundle: ModelBundle | None) -> str:
    if bundle is None:
        return "reference"
    if 4 in bundle.stages:
        return "v2s"
    if 2 in bundle.stages:
        return "zero-shot"
    if 1 in bundle.stages:
        return "v2a"
    raise PipelineError(f"bundle {bundle.root} has no checkpoints")


def thread_count() -> int:
    raw = os.environ.get("FLOWDUB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise PipelineError(f"FLOWDUB_THREADS must be an integer, got {raw!r}") from None


def evaluate(manifest: str | os.PathLike, bundle_dir: str | os.PathLike | None, out: str | os.PathLike,
             upto_stage: int | None = None, seed: int = 42, split: str = "test",
             duration: str = "video") -> dict:
    """Score generated audio against the reference clips of a split.

    Writes one JSON line per clip to ``out`` and the aggregate to
    ``<out>.summary.json``; returns the aggregate. Without a bundle the
    references are scored against themselves.

    The mode follows the newest stage present: stage 4 runs the full V2S
    chain, stages 2-3 run the speech model zero-shot on the V2S inputs
    (transcript and prompt, no energy), stage 1 alone runs V2A. ``duration``
    sets the zero-shot output length: ``"video"`` takes the clip's frame
    count, ``"text"`` the transcript length times the training frames per
    token.
    """
    if duration not in ("video", "text"):
        raise ValueError(f"duration must be 'video' or 'text', got {duration!r}")
    corpus = Corpus(manifest)
    clips = corpus.clips(split)
    if not clips:
        raise PipelineError(f"split {split!r} is empty")
    bundle = ModelBundle.load(bundle_dir, upto_stage) if bundle_dir is not None else None
    mode = eval_mode(bundle)
    seeds = [int.from_bytes(hashlib.sha256(f"{seed}:{c.id}".encode()).digest()[:4], "little") for c in clips]
    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        records = list(pool.map(lambda a: _eval_one(bundle, mode, *a, duration), zip(clips, seeds)))
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, records)
    summary = {"mode": mode, "split": split, **metrics.summarize(records)}
    if mode == "zero-shot":
        summary["duration"] = duration
    if bundle is not None:
        summary["stages"] = list(bundle.stages)
    _write_json(out.with_name(out.name + ".summary.json"), summary)
    return summary


def canonical_instruction(task: str) -> str:
    return CANONICAL_INSTRUCTIONS[task]

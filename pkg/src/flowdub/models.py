"""Estimator wrappers around the flow-matching generators.

``V2AFlow`` maps video tracks to log-mel spectrograms; ``TTSFlow`` maps a
transcript plus optional prompt and energy contour to a log-mel
spectrogram. Both follow the scikit-learn fit/predict protocol; inputs are
lists because clips differ in length.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_is_fitted

from . import condnet as cn
from . import dsp
from . import flowmatch as fm
from . import numkit as nk

SPEECH_SOURCES = ("text", "prompt", "energy")


def fit_mel_scaler(mels: list[np.ndarray]) -> StandardScaler:
    return StandardScaler().fit(np.concatenate(mels, axis=0))


def scaler_from_stats(mean, scale) -> StandardScaler:
    sc = StandardScaler()
    sc.mean_ = np.asarray(mean, dtype=np.float64)
    sc.scale_ = np.asarray(scale, dtype=np.float64)
    sc.var_ = sc.scale_ ** 2
    sc.n_features_in_ = sc.mean_.size
    sc.n_samples_seen_ = 1
    return sc


@dataclass
class SpeechInput:
    """One TTS request: transcript, pooled prompt features, target length, optional energy."""

    transcript: str
    n_frames: int
    prompt: np.ndarray | None = None
    energy: np.ndarray | None = None


class FlowEstimator(BaseEstimator):
    """Shared training loop: minibatch CFM loss, global-norm clip, Adam/AdamW, warmup/decay."""

    prefix = "field"

    def __init__(self, n_updates=2000, batch_size=16, peak_lr=1e-4, final_lr=1e-6, warmup_steps=1000,
                 clip_norm=0.2, optimizer="adam", weight_decay=0.0, ode_steps=32, ode_method="euler",
                 seed=0, scaler=None):
        self.n_updates = n_updates
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.final_lr = final_lr
        self.warmup_steps = warmup_steps
        self.clip_norm = clip_norm
        self.optimizer = optimizer
        self.weight_decay = weight_decay
        self.ode_steps = ode_steps
        self.ode_method = ode_method
        self.seed = seed
        self.scaler = scaler

    # subclass hooks
    def init_store(self) -> nk.ParamStore:
        raise NotImplementedError

    def _prepare(self, X, mels) -> list:
        raise NotImplementedError

    def _batch_condition(self, items: list, rng: np.random.Generator) -> tuple[cn.Condition, dict]:
        raise NotImplementedError

    def schedule(self) -> nk.Schedule:
        warm = min(self.warmup_steps, max(self.n_updates - 1, 0))
        return nk.Schedule(self.peak_lr, self.final_lr, warm, max(self.n_updates, 1), self.clip_norm)

    def _check_optimizer(self):
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.optimizer == "adam" and self.weight_decay:
            raise ValueError("weight decay needs optimizer='adamw'")

    def fit(self, X, y, store: nk.ParamStore | None = None, on_step=None):
        """Train on inputs ``X`` and log-mel targets ``y``.

        Passing ``store`` continues from it (step counter and moments kept);
        ``on_step(step, lr, loss, info)`` is called after every update.
        """
        self._check_optimizer()
        if len(X) != len(y):
            raise ValueError("X and y lengths differ")
        if not len(y):
            raise ValueError("empty training set")
        self.scaler_ = self.scaler if self.scaler is not None else fit_mel_scaler(list(y))
        items = self._prepare(X, [self.scaler_.transform(m) for m in y])
        self.store_ = store if store is not None else self.init_store()
        sched = self.schedule()
        decay = self.weight_decay if self.optimizer == "adamw" else 0.0
        losses = []
        while self.store_.step < self.n_updates:
            step = self.store_.step + 1
            rng = np.random.default_rng([self.seed, 7919, step])
            idx = rng.choice(len(items), size=min(self.batch_size, len(items)), replace=False)
            batch = [items[i] for i in idx]
            x1 = np.concatenate([b["x1"] for b in batch], axis=0)
            cond, info = self._batch_condition(batch, rng)
            info = {**info, "index": idx}
            loss, _ = fm.cfm_loss(self._field, x1, cond, rng)
            if not np.isfinite(float(loss.data)):
                raise nk.NonFiniteError(f"loss diverged at step {step}")
            grads = nk.backward(loss, self.store_.params)
            if self.clip_norm is not None:
                grads = nk.clip_global_norm(grads, self.clip_norm)
            lr = nk.lr_at_step(sched, step)
            nk.adam_step(self.store_, grads, lr, weight_decay=decay)
            losses.append(float(loss.data))
            if on_step is not None:
                on_step(step, lr, losses[-1], info)
        self.loss_curve_ = losses
        return self

    def _field(self, x_t, t_rows, cond):
        return cn.field_forward(self.store_, self.prefix, x_t, t_rows, cond)

    def _velocity(self, x, t, cond):
        with nk.no_grad():
            return cn.field_forward(self.store_, self.prefix, x, t, cond).data.astype(np.float64)

    def sample(self, cond: cn.Condition, rng: np.random.Generator, guidance: fm.GuidanceSpec | None = None,
               uncond: cn.Condition | None = None) -> np.ndarray:
        """Integrate from Gaussian noise; returns a log-mel matrix (de-standardized)."""
        check_is_fitted(self, "store_")
        x0 = rng.standard_normal((cond.n_rows, dsp.N_MELS))
        x1 = fm.ode_sample(self._velocity, x0, steps=self.ode_steps, method=self.ode_method,
                           guidance=guidance, condition=cond, uncond_condition=uncond)
        return self.scaler_.inverse_transform(x1)


class V2AFlow(FlowEstimator):
    """Video track -> log-mel generator."""

    prefix = "v2a"

    def init_store(self) -> nk.ParamStore:
        rng = np.random.default_rng([self.seed, 1])
        store = nk.ParamStore()
        cn.init_video_encoder(store, rng)
        cn.init_field(store, rng, self.prefix, ("video",))
        return store

    def _prepare(self, X, mels):
        items = []
        for track, m in zip(X, mels):
            rows = cn.resample_track(track, m.shape[0])
            items.append({"x1": m, "video": rows})
        return items

    def _batch_condition(self, items, rng):
        rows = np.concatenate([b["video"] for b in items], axis=0)
        index = np.concatenate([np.full(b["x1"].shape[0], k) for k, b in enumerate(items)])
        return cn.Condition(sample_index=index, video=cn.video_from_rows(self.store_, rows)), {}

    def condition(self, track: np.ndarray, n_frames: int | None = None) -> cn.Condition:
        check_is_fitted(self, "store_")
        n_frames = cn.mel_frames_for_track(track) if n_frames is None else n_frames
        with nk.no_grad():
            emb = cn.encode_video(self.store_, track, n_frames).data
        return cn.single(n_frames, video=emb)

    def predict(self, X, seed: int = 0) -> list[np.ndarray]:
        return [self.sample(self.condition(track), np.random.default_rng([seed, k])) for k, track in enumerate(X)]


class TTSFlow(FlowEstimator):
    """Transcript (+ prompt, + energy) -> log-mel generator with per-source condition dropout.

    ``use_energy`` feeds the energy channel during training (it is treated as
    dropped otherwise); ``drop_probability`` drops each of transcript,
    prompt and energy independently per sample.
    """

    prefix = "tts"

    def __init__(self, n_updates=2000, batch_size=16, peak_lr=7.5e-5, final_lr=0.0, warmup_steps=33,
                 clip_norm=1.0, optimizer="adamw", weight_decay=0.01, ode_steps=32, ode_method="euler",
                 seed=0, scaler=None, use_energy=False, drop_probability=0.0, guidance_scale=1.0):
        super().__init__(n_updates=n_updates, batch_size=batch_size, peak_lr=peak_lr, final_lr=final_lr,
                         warmup_steps=warmup_steps, clip_norm=clip_norm, optimizer=optimizer,
                         weight_decay=weight_decay, ode_steps=ode_steps, ode_method=ode_method, seed=seed,
                         scaler=scaler)
        self.use_energy = use_energy
        self.drop_probability = drop_probability
        self.guidance_scale = guidance_scale

    def init_store(self) -> nk.ParamStore:
        rng = np.random.default_rng([self.seed, 2])
        store = nk.ParamStore()
        cn.init_text_encoder(store, rng)
        cn.init_prompt_encoder(store, rng)
        cn.init_field(store, rng, self.prefix, SPEECH_SOURCES)
        return store

    def _prepare(self, X, mels):
        items = []
        for inp, m in zip(X, mels):
            T = m.shape[0]
            item = {"x1": m, "ids": cn.frame_token_ids(inp.transcript, T), "prompt": inp.prompt}
            if self.use_energy:
                if inp.energy is None:
                    raise ValueError("energy contour required when use_energy is set")
                item["energy"] = cn.resample_linear(inp.energy, T)
            items.append(item)
        return items

    def _batch_condition(self, items, rng):
        B = len(items)
        index = np.concatenate([np.full(b["x1"].shape[0], k) for k, b in enumerate(items)])
        ids = np.concatenate([b["ids"] for b in items])
        has_prompt = np.array([b["prompt"] is not None for b in items])
        feats = np.stack([b["prompt"] if b["prompt"] is not None else np.zeros(dsp.N_MELS) for b in items])
        drops = rng.random((B, len(SPEECH_SOURCES))) < self.drop_probability
        dropped = {"text": drops[:, 0], "prompt": drops[:, 1] | ~has_prompt, "energy": drops[:, 2]}
        energy = None
        if self.use_energy:
            energy = np.concatenate([b["energy"] for b in items])[:, None]
        cond = cn.Condition(sample_index=index, text=cn.text_from_ids(self.store_, ids),
                            prompt=cn.prompt_from_features(self.store_, feats), energy=energy, dropped=dropped)
        return cond, {"dropped": drops}

    def condition(self, inp: SpeechInput) -> cn.Condition:
        check_is_fitted(self, "store_")
        T = inp.n_frames
        with nk.no_grad():
            text = cn.text_rows(self.store_, inp.transcript, T).data
            prompt = None
            if inp.prompt is not None:
                prompt = cn.prompt_from_features(self.store_, np.asarray(inp.prompt)[None, :]).data
        cond = cn.single(T, text=text, prompt=prompt)
        if inp.energy is not None:
            cond = cn.inject_energy(cond, inp.energy)
        return cond

    def generate(self, inp: SpeechInput, rng: np.random.Generator) -> np.ndarray:
        cond = self.condition(inp)
        if inp.energy is not None and self.guidance_scale != 1.0:
            guidance = fm.GuidanceSpec(scale=self.guidance_scale)
            return self.sample(cond, rng, guidance=guidance, uncond=cond.with_dropped("energy"))
        return self.sample(cond, rng)

    def predict(self, X, seed: int = 0) -> list[np.ndarray]:
        return [self.generate(inp, np.random.default_rng([seed, k])) for k, inp in enumerate(X)]

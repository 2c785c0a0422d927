"""Instruction router: gating MLP, feature fusion and the gating objective."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import numkit as nk
from .condnet import INSTRUCTION_DIM, encode_instruction
from .synthdata import TASKS

GATE_HIDDEN = 32
N_TASKS = len(TASKS)
ACTIVATED = {"v2a": ("v2a",), "tts": ("tts", "mof"), "v2s": ("v2a", "tts", "mof")}


@dataclass(frozen=True)
class GateDecision:
    probs: np.ndarray
    route: int

    @property
    def task(self) -> str:
        return TASKS[self.route]

    def weight(self, task: str) -> float:
        return float(self.probs[TASKS.index(task)])


@dataclass(frozen=True)
class AudioKnowledge:
    """Fused feature handed to the speech generator; ``empty`` marks the all-zeros feature."""

    feature: np.ndarray
    empty: bool


def init_gate(store: nk.ParamStore, rng: np.random.Generator, prefix: str = "gate", hidden: int = GATE_HIDDEN):
    store.add(f"{prefix}/h/W", nk.init_uniform(rng, INSTRUCTION_DIM, (INSTRUCTION_DIM, hidden)))
    store.add(f"{prefix}/h/b", np.zeros(hidden))
    # zero head: uniform probabilities before training
    store.add(f"{prefix}/out/W", np.zeros((hidden, N_TASKS)))
    store.add(f"{prefix}/out/b", np.zeros(N_TASKS))


def gate_logits(store: nk.ParamStore, emb, prefix: str = "gate") -> nk.Tensor:
    h = nk.tanh(nk.affine(emb, store[f"{prefix}/h/W"], store[f"{prefix}/h/b"]))
    return nk.affine(h, store[f"{prefix}/out/W"], store[f"{prefix}/out/b"])


def decision_from_logits(logits) -> GateDecision:
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(z)):
        raise nk.NonFiniteError("non-finite gate logits")
    e = np.exp(z - z.max())
    probs = e / e.sum()
    return GateDecision(probs=probs, route=int(np.argmax(probs)))


def gate_probs(store: nk.ParamStore, instr_emb: np.ndarray, prefix: str = "gate") -> GateDecision:
    with nk.no_grad():
        logits = gate_logits(store, np.asarray(instr_emb, dtype=np.float64).reshape(1, -1), prefix)
    return decision_from_logits(logits.data)


def route(decision: GateDecision, v2a_feature: np.ndarray | None, mode: str = "hard",
          width: int | None = None) -> AudioKnowledge:
    """Fuse G_v2s * feature + G_tts * phi, with phi the all-zeros feature.

    Hard mode replaces the probabilities by the one-hot route. The phi term
    contributes nothing and is not added, so unit weights return the feature
    bitwise.
    """
    if mode not in ("soft", "hard"):
        raise ValueError(f"unknown routing mode {mode!r}")
    if mode == "hard":
        g_v2s = 1.0 if decision.task == "v2s" else 0.0
    else:
        g_v2s = decision.weight("v2s")
    if g_v2s > 0.0:
        if v2a_feature is None:
            raise ValueError("v2a feature required when the v2s gate is open")
        feature = np.asarray(v2a_feature, dtype=np.float64)
        return AudioKnowledge(feature.copy() if g_v2s == 1.0 else g_v2s * feature, empty=False)
    if width is None:
        if v2a_feature is None:
            raise ValueError("width needed to build the empty feature")
        width = np.asarray(v2a_feature).shape[0]
    return AudioKnowledge(np.zeros(width), empty=True)


def gating_loss(probs, labels) -> nk.Tensor:
    """Mean cross-entropy -(1/N) sum_n log p[n, y_n]; probabilities are clamped at 1e-12."""
    probs = probs if isinstance(probs, nk.Tensor) else nk.Tensor(probs)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if probs.data.ndim != 2 or probs.shape[0] != labels.size:
        raise ValueError("probs must be N x K with one label per row")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError(f"labels must lie in 0..{probs.shape[1] - 1}")
    onehot = np.zeros(probs.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    if np.any(probs.data[np.arange(labels.size), labels] <= 0.0):
        warnings.warn("zero probability on a true class; clamped at 1e-12", RuntimeWarning, stacklevel=2)
    per_row = nk.matmul(nk.mul(nk.log(probs), onehot), np.ones((probs.shape[1], 1)))
    return nk.mul(nk.reduce_mean(per_row), -1.0)


class GatingClassifier(ClassifierMixin, BaseEstimator):
    """Routes free-text instructions to one of the three tasks."""

    def __init__(self, hidden=GATE_HIDDEN, n_updates=5000, batch_size=32, peak_lr=1e-4, final_lr=1e-6,
                 warmup_steps=1000, clip_norm=None, seed=0):
        self.hidden = hidden
        self.n_updates = n_updates
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.final_lr = final_lr
        self.warmup_steps = warmup_steps
        self.clip_norm = clip_norm
        self.seed = seed

    def _embed(self, X) -> np.ndarray:
        if isinstance(X, str):
            raise TypeError("expected a sequence of instruction strings")
        return np.stack([encode_instruction(x) for x in X])

    def init_store(self) -> nk.ParamStore:
        store = nk.ParamStore()
        init_gate(store, np.random.default_rng(self.seed), hidden=self.hidden)
        return store

    def schedule(self) -> nk.Schedule:
        return nk.Schedule(self.peak_lr, self.final_lr, self.warmup_steps, max(self.n_updates, 1), self.clip_norm)

    def fit(self, X, y, store: nk.ParamStore | None = None, on_step=None):
        """Minibatch Adam on the gating cross-entropy.

        ``store`` resumes from an existing parameter store (its step counter
        and moments are kept); ``on_step(step, lr, loss)`` is called after
        every update.
        """
        emb = self._embed(X)
        y = np.asarray(y, dtype=np.int64)
        if emb.shape[0] != y.size:
            raise ValueError("X and y lengths differ")
        self.classes_ = np.arange(N_TASKS)
        self.store_ = store if store is not None else self.init_store()
        sched = self.schedule()
        losses = []
        while self.store_.step < self.n_updates:
            step = self.store_.step + 1
            rng = np.random.default_rng([self.seed, step])
            idx = rng.choice(y.size, size=min(self.batch_size, y.size), replace=False)
            logits = gate_logits(self.store_, emb[idx])
            loss = gating_loss(nk.softmax(logits, axis=1), y[idx])
            grads = nk.backward(loss, self.store_.params)
            if self.clip_norm is not None:
                grads = nk.clip_global_norm(grads, self.clip_norm)
            lr = nk.lr_at_step(sched, step)
            nk.adam_step(self.store_, grads, lr)
            losses.append(float(loss.data))
            if on_step is not None:
                on_step(step, lr, losses[-1])
        self.loss_curve_ = losses
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "store_")
        with nk.no_grad():
            logits = gate_logits(self.store_, self._embed(X))
            return nk.softmax(logits, axis=1).data.astype(np.float64)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def decide(self, instruction: str) -> GateDecision:
        check_is_fitted(self, "store_")
        return gate_probs(self.store_, encode_instruction(instruction))

"""Acceptance suite: one test (or group) per numbered criterion.

The run prints a per-criterion PASS/FAIL summary (see conftest). Criteria
7-11 share one full pipeline run through the command line, executed twice
for the determinism check.
"""
import hashlib
import json
import math
import os
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from flowdub import dsp, metrics, mof
from flowdub import numkit as nk
from flowdub import pipeline as pl
from flowdub.condnet import mel_frames_for_track
from flowdub.flowmatch import cfm_loss, ode_sample
from flowdub.synthdata import CANONICAL_INSTRUCTIONS, load_clips, make_instruction_set
from oracles import brute_force_dtw, brute_force_mcd

N_CLIPS = 200
SEED = 42
RUNTIME_BUDGET_S = 30 * 60


def detail(request, text):
    request.node.user_properties.append(("detail", text))


# 1-6: numerical properties

def _random_graph(rng):
    kinds = ("tanh", "sigmoid", "silu")
    n_in, n_out = rng.integers(2, 6), rng.integers(2, 5)
    widths = [n_in] + list(rng.integers(2, 7, size=rng.integers(1, 3))) + [n_out]
    params = {}
    for k, (a, b) in enumerate(zip(widths, widths[1:])):
        params[f"w{k}"] = nk.Tensor(rng.normal(size=(a, b)), requires_grad=True)
        params[f"b{k}"] = nk.Tensor(rng.normal(size=(b,)) * 0.5, requires_grad=True)
    acts = [kinds[i] for i in rng.integers(0, len(kinds), size=len(widths) - 2)]
    x = nk.Tensor(rng.normal(size=(int(rng.integers(1, 5)), n_in)))
    head = rng.integers(0, 3)
    y = rng.dirichlet(np.ones(n_out), size=x.shape[0])
    gate = rng.normal(size=(x.shape[0], n_out))

    def loss():
        h = x
        for k in range(len(widths) - 1):
            h = nk.affine(h, params[f"w{k}"], params[f"b{k}"])
            if k < len(acts):
                h = nk.nonlinearity(h, acts[k])
        if head == 0:
            return nk.squared_error(nk.softmax(h, axis=1), nk.Tensor(y))
        if head == 1:
            return nk.reduce_mean(nk.mul(nk.add(h, gate), h))
        return nk.reduce_mean(nk.matmul(nk.tanh(h), np.ones((n_out, 1))))

    return params, loss


@pytest.mark.criterion(1)
def test_c1_autodiff_random_graphs(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    with nk.float64_mode():
        for _ in range(50):
            params, loss = _random_graph(rng)
            analytic = nk.backward(loss(), params)
            numeric = nk.numerical_grads(loss, params, h=1e-3)
            worst = max(worst, max(nk.relative_error(analytic[k], numeric[k]) for k in params))
    elapsed = time.perf_counter() - t0
    detail(request, f"max rel err {worst:.2e}, {elapsed:.1f}s")
    assert worst <= 1e-4
    assert elapsed < 30


@pytest.mark.criterion(2)
def test_c2_exact_recovery(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for steps in (1, 2, 5, 16, 32, 100):
        for method in ("euler", "midpoint"):
            x0, x1 = rng.normal(size=(4, 80)), rng.normal(size=(4, 80))
            out = ode_sample(lambda x, t, _: x1 - x0, x0, steps=steps, method=method)
            worst = max(worst, float(np.max(np.abs(out - x1))))
    elapsed = time.perf_counter() - t0
    detail(request, f"max abs err {worst:.1e}, {elapsed * 1000:.0f}ms")
    assert worst <= 1e-6 and elapsed < 1.0


@pytest.mark.criterion(3)
def test_c3_ode_convergence(request):
    def run(n, method="euler"):
        return ode_sample(lambda x, t, _: x, np.array([1.0]), steps=n, method=method)[0]

    err = abs(run(1000) - math.e)
    assert err == pytest.approx(math.e - (1 + 1e-3) ** 1000, rel=1e-9)
    assert err <= 0.0014
    for n in (4, 5, 8, 10, 32, 100, 1000):
        assert abs(run(n, "midpoint") - math.e) <= abs(run(n) - math.e)
    detail(request, f"Euler N=1000 err {err:.5f}")


@pytest.mark.criterion(4)
def test_c4_cfm_floor(request):
    def zero(x, t, c):
        return nk.Tensor(np.zeros_like(x))

    loss, _ = cfm_loss(zero, np.zeros((100_000, 1)), None, np.random.default_rng(11))
    value = float(loss.data)
    detail(request, f"loss {value:.4f}")
    assert abs(value - 1.0) <= 0.02


@pytest.mark.criterion(5)
def test_c5_schedule_golden(request):
    s1, s2 = pl.load_config(stage=1), pl.load_config(stage=2)
    sched = s1.schedule()
    assert nk.lr_at_step(sched, s1.warmup_steps) == 1e-4
    assert nk.lr_at_step(sched, s1.updates) == 1e-6
    assert nk.lr_at_step(sched, 0) == 0.0
    assert s1.warmup_steps == 1000 and s1.clip_norm == 0.2 and s1.optimizer == "adam"
    assert s2.peak_lr == 7.5e-5 and s2.optimizer == "adamw"
    assert nk.lr_at_step(s2.schedule(), s2.warmup_steps) == 7.5e-5
    s3 = pl.load_config(stage=3)
    assert (s3.updates, s3.batch_size) == (5000, 32)
    assert pl.load_config(stage=4).drop_probability == 0.25
    # the stage-1 clip value reaches the estimator
    assert pl._estimator_kwargs(s1)["clip_norm"] == 0.2
    detail(request, "stage-1 1e-4 -> 1e-6, clip 0.2; stage-2 peak 7.5e-5")


@pytest.mark.criterion(6)
def test_c6_metrics_bruteforce(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(200):
        a = rng.normal(size=(int(rng.integers(1, 7)), 13))
        b = rng.normal(size=(int(rng.integers(1, 7)), 13))
        _, cost = metrics.dtw_align(a, b)
        worst = max(worst, abs(cost - brute_force_dtw(a, b)[1]), abs(metrics.mcd(a, b) - brute_force_mcd(a, b)))
    elapsed = time.perf_counter() - t0
    detail(request, f"max abs diff {worst:.1e}, {elapsed:.1f}s")
    assert worst <= 1e-9 and elapsed < 60


# full pipeline (criteria 7-11)

def flowdub(cwd, *args):
    env = {**os.environ, "FLOWDUB_THREADS": "1"}
    proc = subprocess.run([sys.executable, "-m", "flowdub", *args], cwd=cwd, env=env, capture_output=True,
                          text=True)
    if proc.returncode != 0:
        raise AssertionError(f"flowdub {' '.join(args)} exited {proc.returncode}: {proc.stderr}")
    return proc.stdout


def run_pipeline(root: Path) -> dict:
    root.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    flowdub(root, "data-gen", "--out", "data", "--n-clips", str(N_CLIPS), "--seed", str(SEED))
    v2a_digest = []
    for stage in (1, 2, 3, 4):
        flowdub(root, "train", "--stage", str(stage), "--data", "data/manifest.json", "--out", "bundle")
        if stage >= 3:
            v2a_digest.append(hashlib.sha256((root / "bundle" / "stage1" / "model.ckpt").read_bytes()).hexdigest())
    flowdub(root, "eval", "--manifest", "data/manifest.json", "--bundle", "bundle", "--out", "reports/v2s.jsonl")
    flowdub(root, "eval", "--manifest", "data/manifest.json", "--bundle", "bundle", "--upto-stage", "3",
            "--out", "reports/zero_shot.jsonl")
    elapsed = time.perf_counter() - t0
    flowdub(root, "eval", "--manifest", "data/manifest.json", "--bundle", "bundle", "--upto-stage", "3",
            "--duration", "text", "--out", "reports/zero_shot_text.jsonl")
    clip = load_clips(root / "data" / "manifest.json", split="test")[0]
    flowdub(root, "generate", "--bundle", "bundle", "--instruction", CANONICAL_INSTRUCTIONS["v2s"],
            "--video", f"data/clips/{clip.id}.fdvt", "--transcript", clip.transcript,
            "--prompt", f"data/clips/{clip.id}_prompt.wav", "--out", "gen/v2s.wav")
    return {"root": root, "elapsed": elapsed, "v2a_digest": v2a_digest}


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("accept") / "run1")


def summary(run, name):
    return json.loads((run["root"] / "reports" / f"{name}.jsonl.summary.json").read_text())


@pytest.mark.criterion(7)
def test_c7_gating(request, pipeline_run):
    run = json.loads((pipeline_run["root"] / "bundle" / "stage3" / "run.json").read_text())
    assert run["config"]["batch_size"] == 32 and run["config"]["updates"] == 5000
    assert run["updates"] == 5000
    steps = (pipeline_run["root"] / "bundle" / "stage3" / "loss.csv").read_text().splitlines()[1:]
    assert len(steps) == 5000
    detail(request, f"held-out accuracy {run['heldout_accuracy']:.3f} on {run['heldout_size']}")
    assert run["heldout_accuracy"] == 1.0

    feat = np.random.default_rng(3).normal(size=37)
    feat[5] = -0.0
    v2s = mof.GateDecision(probs=np.array([0.0, 1.0, 0.0]), route=1)
    tts = mof.GateDecision(probs=np.array([0.0, 0.0, 1.0]), route=2)
    assert mof.route(v2s, feat, mode="soft").feature.tobytes() == feat.tobytes()
    assert mof.route(v2s, feat, mode="hard").feature.tobytes() == feat.tobytes()
    zero = mof.route(tts, feat, mode="soft").feature
    assert zero.tobytes() == np.zeros(37).tobytes()


@pytest.mark.criterion(8)
def test_c8_drop_rate(request, pipeline_run):
    rates = pl.drop_rates(pipeline_run["root"] / "bundle" / "stage4" / "drops.csv")
    detail(request, f"{rates['samples']} samples: energy {rates['energy']:.4f}, text {rates['text']:.4f}, "
                    f"prompt {rates['prompt']:.4f}")
    assert rates["samples"] >= 10_000
    for src in ("energy", "text", "prompt"):
        assert abs(rates[src] - 0.25) <= 0.02


@pytest.mark.criterion(9)
def test_c9_activation_exclusivity(request, pipeline_run):
    root = pipeline_run["root"]
    bundle = pl.ModelBundle.load(root / "bundle")
    clips = load_clips(root / "data" / "manifest.json", split="test")
    instructions = make_instruction_set(SEED)
    rng = np.random.default_rng(99)
    routes = {t: 0 for t in mof.ACTIVATED}
    ok = 0
    for k in range(300):
        rec = instructions[int(rng.integers(len(instructions)))]
        clip = clips[int(rng.integers(len(clips)))]
        _, audit = pl.generate(bundle, rec["text"], video=clip.video_track, transcript=clip.transcript,
                               prompt=clip.prompt, seed=int(rng.integers(2**31)))
        c = audit["counters"]
        active = {m for m in pl.MODULES if c[m] > 0}
        routes[audit["route"]] += 1
        ok += c["gate"] == 1 and active == set(mof.ACTIVATED[audit["route"]])
    detail(request, f"{ok}/300 exclusive; routes {routes}")
    assert ok == 300
    assert all(v > 0 for v in routes.values())


@pytest.mark.criterion(10)
def test_c10_knowledge_transfer(request, pipeline_run):
    v2s, zs = summary(pipeline_run, "v2s"), summary(pipeline_run, "zero_shot")
    zs_text = summary(pipeline_run, "zero_shot_text")
    gain = v2s["mean_energy_corr"] - zs["mean_energy_corr"]
    detail(request, f"energy_corr {v2s['mean_energy_corr']:.3f} vs {zs['mean_energy_corr']:.3f} (+{gain:.3f}); "
                    f"MCD_SL {v2s['mean_mcd_sl']:.2f} vs {zs['mean_mcd_sl']:.2f} "
                    f"(text-length zero-shot {zs_text['mean_mcd_sl']:.2f}); "
                    f"pipeline {pipeline_run['elapsed'] / 60:.1f} min")
    assert v2s["mode"] == "v2s" and zs["mode"] == "zero-shot"
    assert gain >= 0.1
    assert v2s["mean_mcd_sl"] < zs["mean_mcd_sl"]
    assert v2s["mean_mcd_sl"] < zs_text["mean_mcd_sl"]
    assert pipeline_run["elapsed"] < RUNTIME_BUDGET_S


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.criterion(11)
def test_c11_determinism(request, pipeline_run, tmp_path_factory):
    again = run_pipeline(tmp_path_factory.mktemp("accept") / "run2")
    a, b = _tree(pipeline_run["root"]), _tree(again["root"])
    assert sorted(a) == sorted(b)
    differing = [k for k in a if a[k] != b[k]]
    kinds = {"ckpt": 0, "wav": 0, "jsonl": 0}
    for name in a:
        for ext in kinds:
            kinds[ext] += name.endswith("." + ext)
    detail(request, f"{len(a)} files compared ({kinds['ckpt']} checkpoints, {kinds['wav']} WAVs, "
                    f"{kinds['jsonl']} JSONL), {len(differing)} differ")
    assert not differing, differing[:10]


# supporting checks on the same run (not numbered criteria)

def _loss_ratio(path: Path, window: int = 50) -> float:
    losses = [float(r.split(",")[2]) for r in path.read_text().splitlines()[1:]]
    return float(np.mean(losses[-window:]) / np.mean(losses[:window]))


def test_stage1_loss_halves(pipeline_run):
    assert _loss_ratio(pipeline_run["root"] / "bundle" / "stage1" / "loss.csv") < 0.5


@pytest.mark.xfail(strict=True, reason="2k updates at peak lr 1e-4 reach a smoothed loss ratio near 0.55")
def test_stage1_loss_halves_in_2k_updates(tmp_path, pipeline_run):
    cfg = replace(pl.load_config(stage=1), updates=2000)
    pl.train_stage(1, pipeline_run["root"] / "data" / "manifest.json", tmp_path, cfg)
    assert _loss_ratio(tmp_path / "stage1" / "loss.csv") < 0.5


@pytest.mark.xfail(strict=True, reason="2k updates at peak lr 7.5e-5 reach a smoothed loss ratio near 0.55")
def test_stage2_loss_halves(pipeline_run):
    assert _loss_ratio(pipeline_run["root"] / "bundle" / "stage2" / "loss.csv") < 0.5


def test_stage2_beats_random_pair_baseline(pipeline_run):
    root = pipeline_run["root"]
    clips = load_clips(root / "data" / "manifest.json", split="test")
    zs = summary(pipeline_run, "zero_shot")
    mels = [dsp.mel_spectrogram(c.waveform) for c in clips]
    refs = [metrics.mfcc(m) for m in mels]
    # Model output is vocoded, so the baseline pairs each reference with another clip passed through the same vocoder.
    vocoded = [metrics.mfcc(dsp.mel_spectrogram(dsp.griffin_lim(m, seed=i))) for i, m in enumerate(mels)]
    n = len(refs)
    random_pair = np.mean([metrics.mcd(refs[i], vocoded[(i + 1) % n]) for i in range(n)])
    assert zs["mean_mcd"] < random_pair


def test_stage4_energy_channel_ablation(pipeline_run):
    root = pipeline_run["root"]
    bundle = pl.ModelBundle.load(root / "bundle")
    clips = load_clips(root / "data" / "manifest.json", split="test")
    with_e, without = [], []
    for i, c in enumerate(clips):
        ref = dsp.energy_contour(c.waveform)
        energy = pl.v2a_energy(bundle, c.video_track, i)
        T = mel_frames_for_track(c.video_track)
        for store, e in ((with_e, energy), (without, None)):
            mel = pl.synthesize_speech_mel(bundle, c.transcript, T, c.prompt, e, i)
            store.append(metrics.energy_corr(ref, dsp.energy_contour(dsp.griffin_lim(mel, seed=i))))
    assert np.mean(with_e) - np.mean(without) >= 0.1


def test_stage4_keeps_v2a_frozen(pipeline_run):
    before, after = pipeline_run["v2a_digest"]
    assert before == after
    s4 = nk.load_checkpoint(pipeline_run["root"] / "bundle" / "stage4" / "model.ckpt")
    assert not any(k.startswith(("v2a/", "video/")) for k in s4.params)

import numpy as np
import pytest

from flowdub import condnet as cn
from flowdub import dsp
from flowdub import numkit as nk
from flowdub import synthdata as sd
from oracles import linear_resample


def make_tts_store(seed=0, hidden=cn.D_C, n_blocks=cn.N_BLOCKS):
    rng = np.random.default_rng(seed)
    store = nk.ParamStore()
    cn.init_text_encoder(store, rng)
    cn.init_prompt_encoder(store, rng)
    cn.init_field(store, rng, "tts", ("text", "prompt", "energy"), hidden=hidden, n_blocks=n_blocks)
    return store


def batch_condition(store, rng, lengths, drop=None):
    ids = np.concatenate([rng.integers(0, len(cn.TEXT_VOCAB), n) for n in lengths])
    index = np.concatenate([np.full(n, k) for k, n in enumerate(lengths)])
    prompt = cn.prompt_from_features(store, rng.standard_normal((len(lengths), dsp.N_MELS)))
    cond = cn.Condition(sample_index=index, text=cn.text_from_ids(store, ids), prompt=prompt,
                        energy=rng.uniform(0, 1, (index.size, 1)))
    for src, mask in (drop or {}).items():
        cond = cond.with_dropped(src, mask)
    return cond


def test_field_shape_and_determinism():
    store = make_tts_store()
    rng = np.random.default_rng(1)
    cond = batch_condition(store, rng, [5, 7])
    x = rng.standard_normal((12, dsp.N_MELS))
    with nk.no_grad():
        a = cn.field_forward(store, "tts", x, rng.uniform(size=12), cond).data
        t = np.full(12, 0.3)
        b1 = cn.field_forward(store, "tts", x, t, cond).data
        b2 = cn.field_forward(store, "tts", x, t, cond).data
    assert a.shape == x.shape
    assert np.array_equal(b1, b2)


def test_field_frame_mismatch():
    store = make_tts_store()
    rng = np.random.default_rng(2)
    cond = batch_condition(store, rng, [5])
    with pytest.raises(ValueError, match="frames"):
        cn.field_forward(store, "tts", np.zeros((6, dsp.N_MELS)), 0.5, cond)
    with pytest.raises(ValueError):
        cn.Condition(sample_index=np.zeros(4, dtype=int), energy=np.zeros((5, 1)))


def test_field_gradients_match_finite_differences():
    with nk.float64_mode():
        store = make_tts_store(seed=3, hidden=6, n_blocks=2)
        rng = np.random.default_rng(4)
        x = rng.standard_normal((5, dsp.N_MELS))
        t = rng.uniform(size=5)
        ids = rng.integers(0, len(cn.TEXT_VOCAB), 5)
        feats = rng.standard_normal((2, dsp.N_MELS))
        energy = rng.uniform(0, 1, (5, 1))
        index = np.array([0, 0, 0, 1, 1])

        def loss():
            cond = cn.Condition(sample_index=index, text=cn.text_from_ids(store, ids),
                                prompt=cn.prompt_from_features(store, feats), energy=energy,
                                dropped={"prompt": np.array([False, True])})
            out = cn.field_forward(store, "tts", x, t, cond)
            return nk.reduce_mean(out * out)

        analytic = nk.backward(loss(), store.params)
        numeric = nk.numerical_grads(loss, store.params)
    worst = max(nk.relative_error(analytic[k], numeric[k]) for k in store.params
                if np.linalg.norm(numeric[k]) > 0 or np.linalg.norm(analytic[k]) > 0)
    assert worst <= 1e-4


def test_all_dropped_output_ignores_inputs():
    store = make_tts_store()
    x = np.random.default_rng(5).standard_normal((9, dsp.N_MELS))
    outs = []
    for seed in (6, 7):
        cond = batch_condition(store, np.random.default_rng(seed), [4, 5],
                               drop={s: True for s in ("text", "prompt", "energy")})
        with nk.no_grad():
            outs.append(cn.field_forward(store, "tts", x, 0.4, cond).data)
    assert np.array_equal(outs[0], outs[1])
    none_cond = cn.Condition(sample_index=np.repeat([0, 1], [4, 5]))
    with nk.no_grad():
        assert np.array_equal(cn.field_forward(store, "tts", x, 0.4, none_cond).data, outs[0])


def test_partial_drop_only_touches_dropped_sample():
    store = make_tts_store()
    rng = np.random.default_rng(8)
    cond = batch_condition(store, rng, [4, 5])
    for k in ("text", "prompt", "energy"):
        store[f"tts/null_{k}"].data[...] = 0.3
    x = rng.standard_normal((9, dsp.N_MELS))
    with nk.no_grad():
        full = cn.field_forward(store, "tts", x, 0.5, cond).data
        part = cn.field_forward(store, "tts", x, 0.5, cond.with_dropped("prompt", [False, True])).data
    assert np.array_equal(full[:4], part[:4])
    assert not np.allclose(full[4:], part[4:])


def test_lipschitz_at_init():
    store = make_tts_store(seed=9)
    rng = np.random.default_rng(10)
    for _ in range(5):
        cond = batch_condition(store, rng, [20, 30])
        x = rng.standard_normal((50, dsp.N_MELS))
        with nk.no_grad():
            out = cn.field_forward(store, "tts", x, rng.uniform(), cond).data
        assert np.linalg.norm(out) <= 10 * np.linalg.norm(x)


def video_store(seed=0):
    store = nk.ParamStore()
    cn.init_video_encoder(store, np.random.default_rng(seed))
    return store


def test_encode_video_zero_track_is_bias():
    store = video_store()
    store["video/b"].data[...] = np.linspace(-1, 1, cn.D_C)
    emb = cn.encode_video(store, np.zeros((10, sd.TRACK_DIMS)))
    assert np.allclose(emb.data, np.tanh(store["video/b"].data)[None, :])
    assert emb.shape[0] == cn.mel_frames_for_track(np.zeros((10, 4)))


def test_encode_video_frames_and_distinctness():
    store = video_store()
    a = sd.make_clip(1, sd.ClipSpec(1.2, 0, 3), "a")
    b = sd.make_clip(1, sd.ClipSpec(1.2, 1, 3), "b")
    ea = cn.encode_video(store, a.video_track).data
    eb = cn.encode_video(store, b.video_track).data
    assert ea.shape[0] == dsp.mel_spectrogram(a.waveform).shape[0]
    differ = np.any(np.abs(ea - eb) > 1e-6, axis=1)
    assert differ.mean() >= 0.99
    with pytest.raises(ValueError):
        cn.encode_video(store, np.zeros((0, 4)))


def text_store():
    store = nk.ParamStore()
    cn.init_text_encoder(store, np.random.default_rng(0))
    return store


def test_encode_text_padding_and_errors():
    store = text_store()
    filler = store["text/emb"].data[cn.TEXT_VOCAB.index(cn.FILLER)]
    empty = cn.encode_text(store, "", 7).data
    assert np.array_equal(empty, np.tile(filler, (7, 1)))
    emb = cn.encode_text(store, "AB_", 5).data
    assert np.array_equal(emb[3:], np.tile(filler, (2, 1)))
    with pytest.raises(ValueError):
        cn.encode_text(store, "ABCD", 3)
    with pytest.raises(ValueError, match="unknown token"):
        cn.encode_text(store, "AZ", 5)


def test_encode_text_no_collisions():
    store = text_store()
    seqs = [a + b for a in sd.VOCAB for b in sd.VOCAB]
    embs = {s: cn.encode_text(store, s, 4).data.tobytes() for s in seqs}
    assert len(set(embs.values())) == len(seqs)


def test_expand_text_matches_frame_rows():
    store = text_store()
    for transcript, T in (("ABC", 10), ("A_H", 3), ("", 4), ("HGFEDC", 23)):
        padded = cn.encode_text(store, transcript, T)
        assert np.array_equal(cn.expand_text(padded, len(transcript)).data, cn.text_rows(store, transcript, T).data)
    idx = cn.expansion_index(3, 9)
    assert list(idx) == [0, 0, 0, 1, 1, 1, 2, 2, 2]


def test_encode_instruction_properties():
    a = cn.encode_instruction("generate speech from video")
    assert np.array_equal(a, cn.encode_instruction("generate speech from video"))
    assert np.array_equal(a, cn.encode_instruction("video from speech generate"))
    assert a.shape == (cn.INSTRUCTION_DIM,)
    with pytest.raises(ValueError):
        cn.encode_instruction("   ")
    embs = [cn.encode_instruction(t) for t in sd.CANONICAL_INSTRUCTIONS.values()]
    for i in range(3):
        for j in range(i + 1, 3):
            cos = embs[i] @ embs[j] / np.linalg.norm(embs[i]) / np.linalg.norm(embs[j])
            assert cos < 0.9


def test_instruction_families_linearly_separable():
    from sklearn.linear_model import Perceptron

    recs = sd.make_instruction_set(0)
    X = np.stack([cn.encode_instruction(r["text"]) for r in recs])
    y = [r["label"] for r in recs]
    clf = Perceptron(max_iter=1000, tol=None, random_state=0).fit(X, y)
    assert clf.score(X, y) == 1.0


def prompt_store():
    store = nk.ParamStore()
    cn.init_prompt_encoder(store, np.random.default_rng(0))
    return store


def test_encode_prompt_silence_and_determinism():
    store = prompt_store()
    silence = dsp.Waveform(np.zeros(4000))
    emb = cn.encode_prompt(store, silence).data
    floor = np.full((1, dsp.N_MELS), np.log(dsp.LOG_FLOOR))
    expected = floor @ store["prompt/W"].data.astype(np.float64) + store["prompt/b"].data
    assert np.allclose(emb, expected, rtol=1e-6)
    w = sd.make_clip(0, sd.ClipSpec(1.0, 2, 3)).prompt
    assert np.array_equal(cn.encode_prompt(store, w).data, cn.encode_prompt(store, w).data)
    with pytest.raises(ValueError):
        cn.encode_prompt(store, dsp.Waveform(np.zeros(100)))


def test_prompt_speaker_nearest_centroid():
    store = prompt_store()
    embs, labels = [], []
    for i in range(40):
        clip = sd.make_clip(2, sd.draw_spec(2, i), sd.clip_id_for(i))
        embs.append(cn.encode_prompt(store, clip.prompt).data[0])
        labels.append(clip.speaker)
    embs, labels = np.array(embs), np.array(labels)
    centroids = np.stack([embs[labels == s].mean(0) for s in range(sd.N_SPEAKERS)])
    pred = np.argmin(((embs[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == labels) == 1.0


def test_inject_energy_readback_and_zero():
    store = make_tts_store()
    rng = np.random.default_rng(11)
    cond = batch_condition(store, rng, [8]).with_dropped("energy", True)
    e = rng.uniform(0, 1, 8)
    out = cn.inject_energy(cond, e)
    assert np.array_equal(out.energy[:, 0], e)
    assert not out.drop_mask("energy").any()
    z = cn.inject_energy(cond, np.zeros(8))
    assert np.array_equal(z.energy, np.zeros((8, 1)))
    assert z.text is cond.text and z.prompt is cond.prompt


@pytest.mark.parametrize("T", [2, 5, 17, 64])
def test_inject_energy_resampling_matches_oracle(T):
    rng = np.random.default_rng(T)
    e = rng.uniform(0, 1, 2 * T)
    cond = cn.single(T)
    got = cn.inject_energy(cond, e).energy[:, 0]
    assert np.max(np.abs(got - linear_resample(e, T))) <= 1e-6

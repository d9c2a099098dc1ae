import hashlib
import json

import numpy as np
import pytest

import vitlens


def identity_toy(**kw):
    return vitlens.make_toy("identity", seed=3, layers=3, concepts=["cls", "sky", "tree"], **kw)


def test_identity_toy_tokens_retrieve_their_words():
    toy = identity_toy()
    patches = vitlens.preprocess(toy.images[0], toy.bundle)
    assert patches.dtype == np.float32
    trace = vitlens.forward(toy.bundle, patches)
    assert trace.num_layers == 3
    assert len(trace.states) == 4
    for layer in range(1, 5):
        rows = vitlens.interpret(trace, toy.bundle, toy.vocab, layer, top_k=1)
        assert [r["position"] for r in rows] == list(range(trace.seq_len))
        assert rows[1]["ranking"][0]["text"] == "sky"
        assert rows[2]["ranking"][0]["text"] == "tree"


def test_final_layer_matches_numpy_cosines_and_classify():
    toy = vitlens.make_toy("random", seed=1)
    patches = vitlens.preprocess(toy.images[0], toy.bundle)
    trace = vitlens.forward(toy.bundle, patches)
    last = toy.bundle.num_layers + 1
    got = vitlens.interpret(trace, toy.bundle, toy.vocab, last, 0)[0]["ranking"]
    joint = vitlens.project_to_joint(trace.states[-1][0], toy.bundle).astype(np.float64)
    emb = toy.vocab.embeddings.astype(np.float64)
    cos = emb @ joint / (np.linalg.norm(emb, axis=1) * np.linalg.norm(joint))
    order = sorted(range(len(cos)), key=lambda i: (-cos[i], i))
    assert [r["index"] for r in got] == order
    np.testing.assert_allclose([r["cosine"] for r in got], cos[order], atol=1e-9)
    assert vitlens.classify(toy.bundle, patches, toy.vocab) == got


def test_smoothing_is_seeded():
    toy = vitlens.make_toy("random", seed=2)
    patches = [vitlens.preprocess(img, toy.bundle) for img in toy.images]
    drift = vitlens.calibrate_drift(toy.bundle, patches, "toy")
    assert json.loads(drift.to_json())["calibration_size"] == len(patches)
    trace = vitlens.forward(toy.bundle, patches[0])
    a = vitlens.interpret(trace, toy.bundle, toy.vocab, 1, 2, drift=drift, samples=8, seed=5)
    b = vitlens.interpret(trace, toy.bundle, toy.vocab, 1, 2, drift=drift, samples=8, seed=5)
    assert a == b
    assert a[0]["smoothing_used"]


def test_saliency_and_rollout():
    toy = identity_toy()
    trace = vitlens.forward(toy.bundle, vitlens.preprocess(toy.images[0], toy.bundle))
    roll = vitlens.rollout(trace, 2)
    np.testing.assert_allclose(roll.sum(axis=1), 1.0, atol=1e-6)
    s = vitlens.saliency(trace, 2, 1)
    assert s["grid_size"] ** 2 == trace.seq_len - 1


def test_planted_attack_is_repaired_by_zeroing_matched_tokens():
    toy = vitlens.make_toy("planted_attack", seed=4, cases=1)
    (clean, label, _), = toy.first
    (attacked, attacked_label, _), = toy.second
    assert label == attacked_label
    before = vitlens.classify(toy.bundle, attacked, toy.class_vocab)
    assert before[0]["index"] != label
    words = next(iter(toy.wordlists.values()))
    trace = vitlens.forward(toy.bundle, attacked)
    tokens = vitlens.match(trace, toy.bundle, toy.vocab, words)
    assert tokens
    plan = vitlens.zero_plan(tokens)
    assert len(plan) == len(tokens)
    ranking, edited = vitlens.apply(plan, attacked, toy.bundle, toy.class_vocab)
    assert ranking[0]["index"] == label
    assert edited.num_layers == toy.bundle.num_layers
    restored = vitlens.Plan.from_json(plan.to_json())
    assert vitlens.classify(toy.bundle, attacked, toy.class_vocab, restored) == ranking


def test_round_trips_and_errors(tmp_path):
    toy = identity_toy()
    toy.bundle.save(tmp_path / "bundle")
    loaded = vitlens.Bundle.load(tmp_path / "bundle")
    assert vitlens.manifest(loaded) == vitlens.manifest(toy.bundle)
    toy.vocab.save(tmp_path / "vocab.bin")
    assert vitlens.Vocabulary.load(tmp_path / "vocab.bin").texts == toy.vocab.texts

    with pytest.raises(vitlens.VitlensError) as err:
        vitlens.Bundle.load(tmp_path / "missing")
    assert err.value.code in ("not_found", "io_error")

    trace = vitlens.forward(toy.bundle, vitlens.preprocess(toy.images[0], toy.bundle))
    with pytest.raises(vitlens.VitlensError) as err:
        vitlens.interpret(trace, toy.bundle, toy.vocab, 99, 0)
    assert err.value.code == "input_error"

    with pytest.raises(vitlens.VitlensError):
        vitlens.Vocabulary("v", ["a", "a"], np.eye(2, dtype=np.float32))

    assert vitlens.content_hash(b"abc") == hashlib.sha256(b"abc").hexdigest()


def test_cli_in_process(tmp_path):
    code, out, err = vitlens.run_cli(["toy", "--kind", "identity", "--out", str(tmp_path / "toy")])
    assert code == 0, err
    image = next((tmp_path / "toy" / "images").glob("*.png"))
    code, out, err = vitlens.run_cli([
        "interpret", "--bundle", tmp_path / "toy" / "bundle", "--vocab", tmp_path / "toy" / "vocab.bin",
        "--image", image, "--layer", 1, "--position", 2, "-k", 1,
    ])
    assert code == 0, err
    assert "token2" in out or "tree" in out

    code, out, err = vitlens.run_cli(["interpret", "--bundle", tmp_path / "nope"])
    assert code != 0
    assert json.loads(err.strip().splitlines()[-1])["error"]["code"]

import json
import os
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrdistill import evaluation as E
from lrdistill.data.formats import checkpoint_load
from lrdistill.data.manifest import ImageSet, load_images, load_manifest
from lrdistill.exceptions import MissingRecordError, PreconditionError
from lrdistill.model import StudentModel

from conftest import DATA, TINY
from oracles import cosine, retrieve_brute, verify_brute, verify_brute_scores_as_thresholds


def emb(rows, labels=None):
    rows = np.asarray(rows, dtype=np.float64)
    return E.Embeddings([f"e{k}" for k in range(len(rows))], rows, None if labels is None else np.asarray(labels))


# ---- verification


def test_verify_separable():
    acc, thr = E.verify_scores([0.9, 0.8, 0.2, 0.1], [True, True, False, False])
    assert acc == 1.0 and thr == pytest.approx(0.5)


def test_verify_inverted_pair():
    acc, thr = E.verify_scores([0.5, 0.7], [True, False])
    assert acc == 0.5
    assert thr == -np.inf  # lowest threshold among the tied optima


def test_verify_through_embeddings():
    e = emb([[1, 0], [1, 0.1], [0, 1], [-1, 0]])
    pairs = E.VerificationSet([("e0", "e1", True), ("e0", "e2", False), ("e0", "e3", False)])
    rep = E.verify(e, pairs)
    assert rep.accuracy == 1.0 and rep.counts == {"pairs": 3, "positive": 1, "negative": 2}
    with pytest.raises(PreconditionError):
        E.verify(e, E.VerificationSet([]))
    with pytest.raises(MissingRecordError):
        E.verify(e, E.VerificationSet([("e0", "zz", True)]))


def test_verify_zero_norm():
    e = emb([[0, 0], [1, 0]])
    with pytest.raises(PreconditionError, match="zero-norm"):
        E.verify(e, E.VerificationSet([("e0", "e1", True)]))


def test_verify_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(60):
        n = int(rng.integers(2, 201))
        same = rng.random(n) < rng.uniform(0.1, 0.9)
        sims = np.round(rng.uniform(-1, 1, n), int(rng.integers(1, 4)))  # rounding forces ties
        acc, thr = E.verify_scores(sims, same)
        b_acc, b_thr = verify_brute(sims.tolist(), same.tolist())
        assert acc == b_acc and thr == b_thr, trial
        assert acc == verify_brute_scores_as_thresholds(sims.tolist(), same.tolist())


def test_verify_embeddings_match_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(10):
        n = int(rng.integers(4, 201))
        x = rng.standard_normal((n, 8))
        k = int(rng.integers(1, 4 * n))
        a, b = rng.integers(0, n, k), rng.integers(0, n, k)
        b = np.where(a == b, (b + 1) % n, b)
        same = rng.random(k) < 0.5
        rep = E.verify(emb(x), E.VerificationSet([(f"e{i}", f"e{j}", bool(s)) for i, j, s in zip(a, b, same)]))
        sims = [cosine(x[i], x[j]) for i, j in zip(a, b)]
        assert rep.accuracy == verify_brute(sims, same.tolist())[0]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), st.booleans()), min_size=1, max_size=60))
def test_verify_invariants(rows):
    sims = np.array([r[0] for r in rows])
    same = np.array([r[1] for r in rows])
    acc, _ = E.verify_scores(sims, same)
    assert acc >= max(same.sum(), (~same).sum()) / same.size
    # scaling by a power of two is exact, so it is strictly increasing in floating point too
    assert E.verify_scores(4.0 * sims, same)[0] == acc
    perm = np.random.default_rng(len(rows)).permutation(len(rows))
    assert E.verify_scores(sims[perm], same[perm])[0] == acc


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-1000, 1000), st.booleans()), min_size=1, max_size=60))
def test_verify_nonlinear_monotone_transform(rows):
    sims = np.array([r[0] for r in rows]) / 1000.0
    same = np.array([r[1] for r in rows])
    acc, _ = E.verify_scores(sims, same)
    assert E.verify_scores(np.exp(3 * sims) + np.arctan(sims), same)[0] == acc


def test_verification_set_roundtrip(tmp_path):
    vs = E.VerificationSet([("a", "b", True), ("a", "c", False)])
    vs.save(tmp_path / "p.json")
    back = E.VerificationSet.load(tmp_path / "p.json")
    assert back.pairs == vs.pairs and back.digest() == vs.digest()
    (tmp_path / "bad.json").write_text(json.dumps([{"a": "x", "b": "y", "same": 1}]))
    with pytest.raises(PreconditionError):
        E.VerificationSet.load(tmp_path / "bad.json")


# ---- pair construction


def test_build_pairs_positive_maximum():
    labels = np.repeat(np.arange(5), 4)
    ids = [f"s{k}" for k in range(20)]
    vs = E.build_pairs(ids, labels, 30, 20, seed=7)
    assert vs.n_pos == 30 and vs.n_neg == 20
    with pytest.raises(PreconditionError, match="30 / 160"):
        E.build_pairs(ids, labels, 31, 10)
    with pytest.raises(PreconditionError):
        E.build_pairs(ids, labels, 1, 161)


def test_build_pairs_contract():
    labels = np.repeat(np.arange(6), 5)
    ids = [f"s{k}" for k in range(30)]
    a = E.build_pairs(ids, labels, 40, 50, seed=3)
    assert a.pairs == E.build_pairs(ids, labels, 40, 50, seed=3).pairs
    assert a.pairs != E.build_pairs(ids, labels, 40, 50, seed=4).pairs
    lab = dict(zip(ids, labels))
    keys = set()
    for x, y, s in a.pairs:
        assert x != y
        assert (lab[x] == lab[y]) == s
        key = frozenset((x, y))
        assert key not in keys
        keys.add(key)


def test_build_pairs_rejection_path():
    labels = np.repeat(np.arange(10), 3)
    ids = [f"s{k}" for k in range(30)]
    vs = E.build_pairs(ids, labels, 5, 20, seed=1, enumerate_limit=0)
    assert vs.n_neg == 20 and len({frozenset(p[:2]) for p in vs.pairs}) == 25


# ---- retrieval


def test_retrieve_nearest_prototype():
    g = emb([[1, 0], [0, 1]], ["A", "B"])
    p = emb([[0.9, 0.1]], ["A"])
    assert E.retrieve(g, p, ranks=(1, 2)).rank_accuracy == {"1": 1.0, "2": 1.0}


def test_retrieve_tie_break_by_index():
    p = emb([[1, 1]], ["B"])
    assert E.retrieve(emb([[1, 0], [0, 1]], ["A", "B"]), p, ranks=(1,)).accuracy == 0.0
    assert E.retrieve(emb([[0, 1], [1, 0]], ["B", "A"]), p, ranks=(1,)).accuracy == 1.0


def test_retrieve_rank_bounds():
    with pytest.raises(PreconditionError, match="exceeds"):
        E.retrieve(emb([[1, 0]], [0]), emb([[1, 0]], [0]), ranks=(1, 5))
    with pytest.raises(PreconditionError):
        E.retrieve_scores(np.zeros((1, 0)), [], [0], ranks=(1,))


def test_retrieve_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(15):
        ng, npr, c = int(rng.integers(10, 201)), int(rng.integers(1, 60)), int(rng.integers(2, 12))
        g, p = rng.standard_normal((ng, 6)), rng.standard_normal((npr, 6))
        g[: ng // 4] = g[ng // 4 : 2 * (ng // 4)]  # duplicate rows create exact ties
        gl, pl = rng.integers(0, c, ng), rng.integers(0, c, npr)
        rep = E.retrieve(emb(g, gl), emb(p, pl), ranks=(1, 5, 10))
        assert rep.rank_accuracy == retrieve_brute(p, pl.tolist(), g, gl.tolist(), (1, 5, 10))


def test_retrieve_monotone_and_permutation_invariant():
    rng = np.random.default_rng(3)
    g, p = rng.standard_normal((50, 4)), rng.standard_normal((30, 4))
    gl, pl = rng.integers(0, 5, 50), rng.integers(0, 5, 30)
    rates = E.retrieve(emb(g, gl), emb(p, pl), ranks=(1, 2, 5, 10, 50)).rank_accuracy
    vals = list(rates.values())
    assert vals == sorted(vals) and vals[-1] == 1.0
    perm = rng.permutation(30)
    assert E.retrieve(emb(g, gl), emb(p[perm], pl[perm]), ranks=(1, 2, 5, 10, 50)).rank_accuracy == rates


def test_retrieve_oracle_separable_embeddings():
    protos = np.eye(8)
    gl = np.arange(8)
    rng = np.random.default_rng(4)
    pl = rng.integers(0, 8, 40)
    probes = protos[pl] + 0.05 * rng.standard_normal((40, 8))
    assert E.retrieve(emb(protos, gl), emb(probes, pl), ranks=(1,)).accuracy == 1.0


# ---- embeddings and identification


@pytest.fixture(scope="module")
def trained(tiny_data):
    from lrdistill.train import OptimConfig, train_stage1, train_stage2

    train, _, gen, disc = tiny_data
    cfg = OptimConfig(batch_size=16, epochs_backbone=4, epochs_head=8)
    model = StudentModel(TINY, 5, seed=7)
    ck = train_stage1(model, train, gen, cfg)
    train_stage2(model, ck, train, disc, cfg)
    return model


def test_embed_all_shape_and_determinism(trained, tiny_data):
    train, _, _, _ = tiny_data
    a = E.embed_all(trained, train)
    assert a.matrix.shape == (len(train), 512)
    assert a.matrix.tobytes() == E.embed_all(trained, train).matrix.tobytes()
    np.testing.assert_allclose(E.embed_all(trained, train, batch_size=7).matrix, a.matrix, rtol=1e-5, atol=1e-6)
    dup = ImageSet(["x", "y"], np.stack([train.images[0]] * 2), np.zeros(2, np.int64), 5)
    d = E.embed_all(trained, dup)
    assert (d["x"] == d["y"]).all()


def test_embed_all_golden(tmp_path):
    sys.path.insert(0, DATA)
    from build_golden import SMALL

    (tmp_path / "m.json").write_text(json.dumps([{"id": "g", "path": os.path.join(DATA, "fixture.pgm"), "label": 0}]))
    data = load_images(load_manifest(str(tmp_path / "m.json")), num_classes=3)
    model = StudentModel(SMALL, 3, seed=0)
    model.load_state_dict(checkpoint_load(os.path.join(DATA, "fixture.gckp"), SMALL).tensors)
    with open(os.path.join(DATA, "golden.json")) as fh:
        golden = np.array(json.load(fh)["fixture_embedding"])
    np.testing.assert_allclose(E.embed_all(model, data)["g"], golden, rtol=1e-5, atol=1e-7)


@pytest.fixture(scope="module")
def separable(tmp_path_factory):
    """Fixture whose class templates share nothing, so embeddings separate linearly."""
    from lrdistill.data import read_teacher_store, synth_generate
    from lrdistill.train import OptimConfig, train_stage2

    out = str(tmp_path_factory.mktemp("separable"))
    synth_generate(5, 12, 7, out, test_per_class=4, class_weight=1.0)
    train = load_images(load_manifest(os.path.join(out, "train_manifest.json")))
    test = load_images(load_manifest(os.path.join(out, "test_manifest.json")))
    model = StudentModel(TINY, 5, seed=7)
    train_stage2(model, None, train, read_teacher_store(os.path.join(out, "disc_teacher.gten")),
                 OptimConfig(batch_size=16, epochs_head=4), ["cls"])
    return model, train, test


def test_identify_separable(separable):
    model, train, test = separable
    before = {k: v.tobytes() for k, v in model.state_dict().items()}
    rep = E.identify_finetune(model, train, test)
    assert rep.accuracy == 1.0 and rep.counts == {"classes": 5, "train": 40, "test": 20}
    assert {k: v.tobytes() for k, v in model.state_dict().items()} == before


def test_identify_deterministic(trained, tiny_data):
    train, test, _, _ = tiny_data
    cfg = E.FinetuneConfig(epochs=5)
    assert E.identify_finetune(trained, train, test, cfg) == E.identify_finetune(trained, train, test, cfg)


def test_identify_single_class(trained, tiny_data):
    train, test, _, _ = tiny_data
    one = lambda d: ImageSet([i for i, y in zip(d.ids, d.labels) if y == 2], d.images[d.labels == 2],  # noqa: E731
                             d.labels[d.labels == 2], 5)
    assert E.identify_finetune(trained, one(train), one(test), E.FinetuneConfig(epochs=2)).accuracy == 1.0


def test_identify_unseen_class(trained, tiny_data):
    train, test, _, _ = tiny_data
    keep = train.labels != 4
    partial = ImageSet([i for i, k in zip(train.ids, keep) if k], train.images[keep], train.labels[keep], 5)
    with pytest.raises(PreconditionError, match=r"\[4\]"):
        E.identify_finetune(trained, partial, test)


def test_metrics_report_json():
    rep = E.MetricsReport("verification", 0.5, threshold=-np.inf)
    assert json.loads(rep.to_json())["threshold"] == "-inf"

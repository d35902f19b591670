import json
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lrdistill.data import formats as F
from lrdistill.data.images import decode_pgm, degrade, encode_pgm, load_image, write_pgm
from lrdistill.data.manifest import ManifestError, load_manifest, parse_manifest
from lrdistill.data.synth import generate, synth_generate
from lrdistill.exceptions import ConfigMismatchError, FormatError, MissingRecordError, PreconditionError
from lrdistill.model import StudentModel

from conftest import TINY
from oracles import degrade_naive


# ---- manifests


def _write_manifest(tmp_path, rows, make_files=True):
    for r in rows:
        if make_files:
            write_pgm(tmp_path / r["path"], np.zeros((4, 4), np.uint8))
    path = tmp_path / "m.json"
    path.write_text(json.dumps(rows))
    return str(path)


def test_manifest_counts_classes(tmp_path):
    rows = [{"id": f"s{k}", "path": f"s{k}.pgm", "label": k % 5} for k in range(20)]
    m = load_manifest(_write_manifest(tmp_path, rows))
    assert len(m) == 20 and m.num_classes == 5
    assert os.path.isabs(m.resolve(m.records[0]))


def test_manifest_duplicate_id(tmp_path):
    rows = [{"id": "a", "path": "a.pgm", "label": 0}, {"id": "a", "path": "b.pgm", "label": 1}]
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(_write_manifest(tmp_path, rows))


def test_manifest_non_contiguous(tmp_path):
    rows = [{"id": "a", "path": "a.pgm", "label": 0}, {"id": "b", "path": "b.pgm", "label": 2}]
    with pytest.raises(ManifestError, match="non-contiguous labels"):
        load_manifest(_write_manifest(tmp_path, rows))


def test_manifest_missing_file(tmp_path):
    rows = [{"id": "a", "path": "a.pgm", "label": 0}]
    with pytest.raises(ManifestError, match="missing image"):
        load_manifest(_write_manifest(tmp_path, rows, make_files=False))


@pytest.mark.parametrize("text", ["{", "{}", '[{"id": "a"}]', '[{"id": 1, "path": "p", "label": 0}]',
                                  '[{"id": "a", "path": "p", "label": -1}]', '[{"id": "a", "path": "p", "label": true}]'])
def test_manifest_malformed(text):
    with pytest.raises(FormatError):
        parse_manifest(text, check_files=False)


# ---- PGM


def test_pgm_hand_values(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64]))
    img = load_image(str(p))
    assert img.shape == (1, 2, 2)
    np.testing.assert_allclose(img.ravel(), [0, 0.50196, 1.0, 0.25098], atol=5e-6)
    assert img[0, 0, 1] == 128 / 255


@pytest.mark.parametrize("value,expect", [(0, 0.0), (255, 1.0)])
def test_pgm_constant(tmp_path, value, expect):
    p = tmp_path / "c.pgm"
    write_pgm(p, np.full((5, 3), value, np.uint8))
    img = load_image(str(p))
    assert img.shape == (1, 5, 3) and (img == expect).all()


def test_pgm_header_comments_and_errors():
    px = np.arange(6, dtype=np.uint8).reshape(2, 3)
    assert (decode_pgm(b"P5 # c\n3 2\n255\n" + px.tobytes()) == px).all()
    with pytest.raises(FormatError, match="magic"):
        decode_pgm(b"P6\n3 2\n255\n" + px.tobytes())
    with pytest.raises(FormatError, match="truncated"):
        decode_pgm(encode_pgm(px)[:-1])
    with pytest.raises(FormatError):
        decode_pgm(b"P5\n3 2\n65535\n" + px.tobytes())
    with pytest.raises(FormatError):
        decode_pgm(b"P5\n3")


def test_pgm_missing_file(tmp_path):
    with pytest.raises(FormatError):
        load_image(str(tmp_path / "nope.pgm"))


def test_pgm_fuzz_structured_errors():
    rng = np.random.default_rng(11)
    good = encode_pgm(rng.integers(0, 256, (4, 4), dtype=np.uint8))
    for _ in range(2000):
        buf = bytearray(good)
        for _ in range(int(rng.integers(1, 4))):
            buf[int(rng.integers(0, 16))] = int(rng.integers(0, 256))
        buf = bytes(buf[: int(rng.integers(0, len(buf) + 1))])
        try:
            decode_pgm(buf)
        except FormatError:
            pass


# ---- degradation


def test_degrade_block_mean():
    hr = np.zeros((1, 112, 112))
    hr[0, :7, :7] = np.arange(49).reshape(7, 7)
    out = degrade(hr)
    assert out.shape == (1, 16, 16)
    assert out[0, 0, 0] == 24.0
    assert (out[0].ravel()[1:] == 0).all()


def test_degrade_constant():
    assert (degrade(np.full((1, 112, 112), 0.3)) == 0.3).all()


def test_degrade_matches_naive(rng):
    hr = rng.uniform(size=(1, 112, 112))
    np.testing.assert_allclose(degrade(hr), degrade_naive(hr, 16), rtol=0, atol=1e-15)


def test_degrade_block_permutation(rng):
    hr = rng.uniform(size=(1, 112, 112))
    perm = rng.permutation(256)
    blocks = hr[0].reshape(16, 7, 16, 7).transpose(0, 2, 1, 3).reshape(256, 7, 7)
    shuffled = blocks[perm].reshape(16, 16, 7, 7).transpose(0, 2, 1, 3).reshape(1, 112, 112)
    np.testing.assert_array_equal(degrade(shuffled).ravel(), degrade(hr).ravel()[perm])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (1, 32, 32), elements=st.floats(0, 1)), st.floats(-5, 5), st.floats(-5, 5))
def test_degrade_commutes_with_affine(img, a, b):
    np.testing.assert_allclose(degrade(a * img + b, 8), a * degrade(img, 8) + b, rtol=0, atol=1e-12)


def test_degrade_non_divisible():
    with pytest.raises(PreconditionError, match="integer multiple"):
        degrade(np.zeros((1, 100, 100)))


# ---- GTEN


def _store(rng, count=3, dim=4, logit_dim=None, prefix="r"):
    logits = rng.standard_normal((count, logit_dim)).astype(np.float32) if logit_dim else None
    ids = [f"{prefix}{k}" for k in range(count)]
    return F.TeacherStore(ids, rng.standard_normal((count, dim)).astype(np.float32), logits)


@pytest.mark.parametrize("logit_dim", [None, 3])
def test_gten_roundtrip_bit_exact(tmp_path, rng, logit_dim):
    store = _store(rng, logit_dim=logit_dim, prefix="é")
    path = tmp_path / "s.gten"
    F.write_teacher_store(store, path)
    back = F.read_teacher_store(path)
    assert back.ids == store.ids
    assert back.features.tobytes() == store.features.tobytes()
    if logit_dim:
        assert back.logits.tobytes() == store.logits.tobytes()
    else:
        assert back.logits is None
    assert F.encode_teacher_store(back) == path.read_bytes()


def test_gten_layout(rng):
    store = _store(rng, count=1, dim=2)
    buf = F.encode_teacher_store(store)
    assert buf[:4] == b"GTEN"
    assert struct.unpack("<IIIBI", buf[4:21]) == (1, 1, 2, 0, 0)
    assert struct.unpack("<H", buf[21:23]) == (2,)
    assert len(buf) == 21 + 2 + 2 + 8


def test_gten_lookup(rng):
    store = _store(rng, logit_dim=2)
    feat, logit = store.lookup("r1")
    assert (feat == store.features[1]).all() and (logit == store.logits[1]).all()
    with pytest.raises(MissingRecordError, match="nope"):
        store.lookup("nope")
    with pytest.raises(MissingRecordError):
        store.features_for(["r0", "zzz"])


def test_gten_count_mismatch(rng):
    buf = bytearray(F.encode_teacher_store(_store(rng)))
    buf[8:12] = struct.pack("<I", 4)
    with pytest.raises(FormatError, match="declares 4"):
        F.decode_teacher_store(bytes(buf))
    buf[8:12] = struct.pack("<I", 2)
    with pytest.raises(FormatError, match="trailing"):
        F.decode_teacher_store(bytes(buf))


def test_gten_bad_magic_and_version(rng):
    buf = F.encode_teacher_store(_store(rng))
    with pytest.raises(FormatError, match="magic"):
        F.decode_teacher_store(b"XTEN" + buf[4:])
    with pytest.raises(FormatError, match="version"):
        F.decode_teacher_store(buf[:4] + struct.pack("<I", 2) + buf[8:])


def test_store_dims_checked():
    with pytest.raises(FormatError):
        F.TeacherStore(["a", "b"], np.zeros((3, 4)))
    with pytest.raises(FormatError, match="duplicate"):
        F.TeacherStore(["a", "a"], np.zeros((2, 4)))


def _fuzz(buf: bytes, decode, rng, cases):
    n = len(buf)
    for k in range(cases):
        b = bytearray(buf)
        mode = k % 4
        if mode == 0:  # flip header bytes
            for _ in range(int(rng.integers(1, 5))):
                b[int(rng.integers(0, min(n, 32)))] = int(rng.integers(0, 256))
        elif mode == 1:  # truncate
            b = b[: int(rng.integers(0, n))]
        elif mode == 2:  # random bytes anywhere
            for _ in range(int(rng.integers(1, 8))):
                b[int(rng.integers(0, n))] = int(rng.integers(0, 256))
        else:  # header prefix plus garbage
            b = b[: int(rng.integers(0, 40))] + bytes(rng.integers(0, 256, int(rng.integers(0, 64)), dtype=np.uint8))
        try:
            decode(bytes(b))
        except FormatError:
            pass


def test_gten_fuzz(rng):
    _fuzz(F.encode_teacher_store(_store(rng, logit_dim=2)), F.decode_teacher_store, np.random.default_rng(1), 10_000)


# ---- GCKP


@pytest.fixture
def tiny_model():
    return StudentModel(TINY, 5, seed=7)


def test_checkpoint_roundtrip_bit_exact(tmp_path, tiny_model):
    path = tmp_path / "m.gckp"
    F.checkpoint_save(tiny_model, {"stage": 1, "epoch": 3, "seed": 7}, path)
    ckpt = F.checkpoint_load(path, TINY)
    state = tiny_model.state_dict()
    assert list(ckpt.tensors) == list(state)
    for k, v in state.items():
        assert ckpt.tensors[k].tobytes() == v.astype(np.float32).tobytes(), k
    assert ckpt.stage == 1 and ckpt.meta["seed"] == 7
    assert ckpt.meta["config_hash"] == TINY.digest()
    restored = StudentModel(TINY, 5, seed=99)
    restored.load_state_dict(ckpt.tensors)
    assert all(restored.state_dict()[k].tobytes() == state[k].tobytes() for k in state)


def test_checkpoint_scalar_and_empty():
    buf = F.encode_checkpoint({"s": np.float32(2.5), "e": np.zeros((0, 3), np.float32)}, {})
    ck = F.decode_checkpoint(buf)
    assert ck.tensors["s"].shape == () and ck.tensors["s"] == 2.5
    assert ck.tensors["e"].shape == (0, 3)


def test_checkpoint_tampered_byte(tmp_path, tiny_model):
    path = tmp_path / "m.gckp"
    F.checkpoint_save(tiny_model, {"stage": 1}, path)
    buf = bytearray(path.read_bytes())
    buf[-5] ^= 0x01
    path.write_bytes(bytes(buf))
    with pytest.raises(FormatError, match="integrity"):
        F.checkpoint_load(path)


def test_checkpoint_config_mismatch(tmp_path, tiny_model):
    path = tmp_path / "m.gckp"
    F.checkpoint_save(tiny_model, {"stage": 1}, path)
    other = TINY.__class__(**{**TINY.to_dict(), "conv_channels": (8, 8)})
    with pytest.raises(ConfigMismatchError, match="checkpoint/config mismatch"):
        F.checkpoint_load(path, other)


def test_checkpoint_fuzz(tiny_model):
    small = {k: v for k, v in list(tiny_model.state_dict().items())[:3]}
    _fuzz(F.encode_checkpoint(small, {"stage": 1}), F.decode_checkpoint, np.random.default_rng(2), 10_000)


# ---- synthetic fixture


def test_synth_counts(tmp_path):
    summary = synth_generate(5, 4, 7, str(tmp_path))
    assert summary["records"] == 20
    m = load_manifest(str(tmp_path / "manifest.json"))
    assert len(m) == 20 and m.num_classes == 5
    gen = F.read_teacher_store(tmp_path / "gen_teacher.gten")
    disc = F.read_teacher_store(tmp_path / "disc_teacher.gten")
    assert len(gen) == len(disc) == 20
    assert not gen.has_logits and disc.logits.shape == (20, 5)
    assert load_image(m.resolve(m.records[0])).shape == (1, 112, 112)


def test_synth_byte_identical(tmp_path):
    synth_generate(3, 3, 5, str(tmp_path / "a"), test_per_class=1)
    synth_generate(3, 3, 5, str(tmp_path / "b"), test_per_class=1)
    for root, _, files in os.walk(tmp_path / "a"):
        for name in files:
            rel = os.path.relpath(os.path.join(root, name), tmp_path / "a")
            if rel.endswith("manifest.json"):
                continue  # manifests are compared record-wise (roots differ)
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    assert (tmp_path / "a" / "manifest.json").read_text() == (tmp_path / "b" / "manifest.json").read_text()


def test_synth_seed_changes_output():
    a, b = generate(2, 2, seed=1), generate(2, 2, seed=2)
    assert a.images.tobytes() != b.images.tobytes()


def test_synth_nearest_prototype_and_unit_norms():
    data = generate(20, 10, 7)
    labels = data.manifest.labels
    for store, protos in ((data.disc_store, data.disc_prototypes), (data.gen_store, data.gen_prototypes)):
        np.testing.assert_allclose(np.linalg.norm(store.features.astype(np.float64), axis=1), 1.0, atol=1e-6)
        d = ((store.features[:, None, :] - protos[None]) ** 2).sum(-1)
        assert (d.argmin(axis=1) == labels).all()
    assert (data.disc_store.logits.argmax(axis=1) == labels).all()


def test_synth_jitter_and_range():
    data = generate(2, 6, 7)
    assert data.images.dtype == np.uint8
    # samples of one class differ (jitter + noise) but stay close to each other
    a, b = data.images[0].astype(float), data.images[1].astype(float)
    assert 0 < np.abs(a - b).mean() < 40


@pytest.mark.parametrize("c,n", [(1, 4), (3, 1)])
def test_synth_preconditions(c, n):
    with pytest.raises(PreconditionError):
        generate(c, n)

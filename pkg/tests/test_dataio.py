import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from neuroretrieve.dataio import (
    BadMagicError,
    DimensionMismatchError,
    EEGClip,
    EmbeddingCache,
    ManifestEntry,
    ManifestError,
    NonFiniteValueError,
    PairManifest,
    ShapeMismatchError,
    TruncatedPayloadError,
    VersionMismatchError,
    load_checkpoint,
    load_manifest,
    read_checkpoint,
    read_clip,
    read_embeddings,
    save_checkpoint,
    write_clip,
    write_embeddings,
    write_manifest,
)

finite32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@given(data=hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12), elements=finite32), fs=st.integers(1, 8192))
def test_clip_roundtrip_is_bit_exact(tmp_path_factory, data, fs):
    path = tmp_path_factory.mktemp("clip") / "a.eeg"
    write_clip(EEGClip("a", data, fs), path)
    back = read_clip(path)
    assert back.data.tobytes() == data.tobytes()
    assert back.fs == fs and back.pair_id == "a"


def test_clip_properties():
    clip = EEGClip("x", np.zeros((3, 256)), 128.0)
    assert (clip.n_channels, clip.n_samples, clip.duration) == (3, 256, 2.0)


@pytest.mark.parametrize(
    "data, fs",
    [(np.zeros((0, 4)), 10), (np.zeros(4), 10), (np.zeros((2, 2)), 0), (np.array([[0.0, np.nan]]), 10)],
)
def test_clip_rejects_invalid(data, fs):
    with pytest.raises(ValueError):
        EEGClip("x", data, fs)


def _clip_bytes(tmp_path):
    path = tmp_path / "c.eeg"
    write_clip(EEGClip("c", np.ones((2, 3), np.float32), 100), path)
    return path, path.read_bytes()


def test_clip_errors_are_distinct(tmp_path):
    path, buf = _clip_bytes(tmp_path)
    cases = [
        (b"XXXX" + buf[4:], BadMagicError),
        (buf[:4] + struct.pack("<I", 99) + buf[8:], VersionMismatchError),
        (buf[:-4], TruncatedPayloadError),
        (buf[:20] + np.array([np.inf] * 6, "<f4").tobytes(), NonFiniteValueError),
    ]
    for payload, err in cases:
        path.write_bytes(payload)
        with pytest.raises(err):
            read_clip(path)
    assert len({err for _, err in cases}) == 4


def test_clip_rejects_fractional_rate(tmp_path):
    with pytest.raises(ValueError):
        write_clip(EEGClip("c", np.ones((1, 2)), 100.5), tmp_path / "c.eeg")


# --------------------------------------------------------------------------- manifest


def _entries(n=4, n_sets=2):
    return [ManifestEntry(f"p{i}", f"clips/p{i}.eeg", i, f"k{i % 2}", i % n_sets) for i in range(n)]


def _write_clips(root, entries):
    (root / "clips").mkdir(exist_ok=True)
    for e in entries:
        write_clip(EEGClip(e.pair_id, np.zeros((2, 4), np.float32), 10), root / e.eeg_path)


def test_manifest_roundtrip(tmp_path):
    entries = _entries()
    _write_clips(tmp_path, entries)
    write_manifest(PairManifest(entries, n_sets=2), tmp_path / "m.jsonl")
    back = load_manifest(tmp_path / "m.jsonl")
    assert back.entries == entries and back.n_sets == 2
    assert back.classes == ["k0", "k1"]
    assert [e.pair_id for e in back.in_sets([1])] == ["p1", "p3"]
    clip = back.load_clip(back.entries[0])
    assert clip.pair_id == "p0" and clip.class_label == "k0"


def _write_lines(path, recs):
    path.write_text("".join(json.dumps(r) + "\n" for r in recs))


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda recs: recs.append(dict(recs[0])), "duplicate"),
        (lambda recs: recs[0].update(extra=1), "unknown field"),
        (lambda recs: recs[0].pop("class_label"), "missing"),
        (lambda recs: recs[0].update(set_id=7), "set_id"),
    ],
)
def test_manifest_errors(tmp_path, mutate, message):
    entries = _entries()
    _write_clips(tmp_path, entries)
    recs = [vars(e).copy() for e in entries]
    mutate(recs)
    _write_lines(tmp_path / "m.jsonl", recs)
    with pytest.raises(ManifestError, match=message):
        load_manifest(tmp_path / "m.jsonl", n_sets=2)


def test_manifest_missing_clip_file(tmp_path):
    entries = _entries()
    _write_lines(tmp_path / "m.jsonl", [vars(e) for e in entries])
    with pytest.raises(ManifestError, match="does not resolve"):
        load_manifest(tmp_path / "m.jsonl")
    assert len(load_manifest(tmp_path / "m.jsonl", check_files=False)) == 4


# --------------------------------------------------------------------------- embeddings


@given(vec=hnp.arrays(np.float32, st.tuples(st.integers(1, 8), st.integers(1, 6)), elements=finite32))
def test_embedding_roundtrip_bit_exact(tmp_path_factory, vec):
    path = tmp_path_factory.mktemp("emb") / "v.emb"
    ids = {f"id{i}": len(vec) - 1 - i for i in range(len(vec))}
    write_embeddings(EmbeddingCache(vec, ids), path)
    back = read_embeddings(path)
    assert back.vectors.tobytes() == vec.tobytes()
    assert back.id_index == ids


def test_embedding_lookup_and_errors(tmp_path):
    cache = EmbeddingCache(np.arange(6, dtype=np.float32).reshape(3, 2), {"a": 2, "b": 0})
    np.testing.assert_array_equal(cache.lookup("a"), [4, 5])
    with pytest.raises(KeyError, match="'zz'"):
        cache.lookup("zz")
    with pytest.raises(DimensionMismatchError):
        cache.lookup("a", expected_dim=3)
    with pytest.raises(ValueError):
        EmbeddingCache(np.zeros((2, 2)), {"a": 0, "b": 0})
    with pytest.raises(NonFiniteValueError):
        EmbeddingCache(np.array([[np.nan]]), {})


def test_embedding_without_sidecar_uses_given_index(tmp_path):
    path = tmp_path / "v.emb"
    write_embeddings(EmbeddingCache(np.ones((2, 3), np.float32), {}), path, sidecar=False)
    assert read_embeddings(path, id_index={"x": 1}).lookup("x").shape == (3,)


# --------------------------------------------------------------------------- checkpoints


@given(
    tensors=st.dictionaries(
        st.text("abcdef._", min_size=1, max_size=8),
        hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4), elements=st.floats(-1e300, 1e300)),
        max_size=5,
    )
)
def test_checkpoint_roundtrip_bit_exact(tmp_path_factory, tensors):
    path = tmp_path_factory.mktemp("ck") / "m.ckpt"
    meta = {"epoch": 3, "history": [{"loss": 0.5}]}
    save_checkpoint(tensors, path, meta)
    back, back_meta = read_checkpoint(path)
    assert back_meta == meta
    assert sorted(back) == sorted(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape and back[k].tobytes() == v.tobytes()


def test_checkpoint_bytes_independent_of_insertion_order(tmp_path):
    a = {"x": np.ones(2), "y": np.zeros((1, 2))}
    save_checkpoint(a, tmp_path / "1.ckpt", {"b": 1, "a": 2})
    save_checkpoint(dict(reversed(list(a.items()))), tmp_path / "2.ckpt", {"a": 2, "b": 1})
    assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint({"w": np.ones(3)}, path)
    buf = path.read_bytes()
    path.write_bytes(buf[:-1])
    with pytest.raises(TruncatedPayloadError):
        read_checkpoint(path)
    path.write_bytes(b"NOPE" + buf[4:])
    with pytest.raises(BadMagicError):
        read_checkpoint(path)
    save_checkpoint({"w": np.array([1.0, np.inf])}, path)
    with pytest.raises(NonFiniteValueError):
        read_checkpoint(path)


def test_load_checkpoint_shape_checks(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint({"encoder.a": np.ones((2, 2)), "head.b": np.ones(3)}, path)
    with pytest.raises(ShapeMismatchError, match="encoder.a"):
        load_checkpoint(path, {"encoder.a": (2, 3), "head.b": (3,)})
    got = load_checkpoint(path, {"encoder.a": (2, 2), "proj.w": (4,)}, encoder_only=True)
    assert list(got) == ["encoder.a"]
    with pytest.raises(ShapeMismatchError, match="proj.w: missing"):
        load_checkpoint(path, {"encoder.a": (2, 2), "head.b": (3,), "proj.w": (4,)})

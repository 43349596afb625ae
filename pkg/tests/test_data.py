import dataclasses
import hashlib
import json

import numpy as np
import pytest

from trimodal.data import (
    MAGIC,
    Concept,
    DataConfig,
    DatasetError,
    DatasetOffsetError,
    DatasetTruncatedError,
    DatasetVersionError,
    _make_world,
    attribute_token_ids,
    build_points,
    build_views,
    generate,
    load,
    make_batches,
    synthesize,
    tokenize,
    vocabulary,
)

SMALL = DataConfig(train_shapes=40, test_shapes=12)


@pytest.fixture(scope="module")
def small():
    return synthesize(SMALL, seed=5)


@pytest.fixture
def written(tmp_path):
    paths = generate(SMALL, 5, tmp_path)
    return tmp_path, paths


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ------------------------------------------------------------- generation


def test_defaults_match_desk_scale():
    cfg = DataConfig()
    assert (cfg.train_shapes, cfg.test_shapes, cfg.n_points, cfg.views, cfg.d_v, cfg.vocab) == (256, 64, 256, 6, 32, 64)
    assert cfg.attribute_sizes == (16, 4, 2, 2) and cfg.n_concepts == 256
    assert cfg.captions == 5 and cfg.point_jitter == 0.01 and cfg.view_noise == 0.05


def test_same_seed_same_bytes(tmp_path):
    a = generate(SMALL, 11, tmp_path / "a")
    b = generate(SMALL, 11, tmp_path / "b")
    c = generate(SMALL, 12, tmp_path / "c")
    for split in ("train", "test"):
        assert sha(a[split].with_name(f"{split}.blob")) == sha(b[split].with_name(f"{split}.blob"))
        assert a[split].read_bytes() == b[split].read_bytes()
    assert sha(a["train"].with_name("train.blob")) != sha(c["train"].with_name("train.blob"))


def test_record_invariants(small):
    cfg = SMALL
    for rec in small["train"]:
        assert rec.points.shape == (cfg.n_points, 6) and rec.points.dtype == np.float32
        assert np.all(np.abs(rec.points[:, :3]) <= 1.0)
        assert np.all((rec.points[:, 3:] >= 0) & (rec.points[:, 3:] <= 1))
        assert rec.views.shape == (cfg.views, cfg.d_v)
        assert len(rec.captions) == 5
        assert all(1 <= len(c) <= cfg.max_len and c.max() < cfg.vocab for c in rec.captions)


def test_train_and_test_are_disjoint_instances_with_shared_concepts():
    splits = synthesize(DataConfig(), 0)
    train = {r.concept for r in splits["train"]}
    test = [r.concept for r in splits["test"]]
    assert len(set(test)) == len(test)
    assert set(test) <= train
    train_pts = {r.points.tobytes() for r in splits["train"]}
    assert not any(r.points.tobytes() in train_pts for r in splits["test"])


def test_noise_free_degeneracy():
    cfg = SMALL
    world = _make_world(cfg, np.random.default_rng(0))
    c = Concept(3, 1, 1, 0)
    r1, r2 = np.random.default_rng(1), np.random.default_rng(2)
    np.testing.assert_array_equal(build_points(c, cfg, world, r1, jitter=0.0), build_points(c, cfg, world, r2, jitter=0.0))
    np.testing.assert_array_equal(build_views(c, cfg, world, r1, noise=0.0), build_views(c, cfg, world, r2, noise=0.0))
    other = Concept(4, 1, 1, 0)
    assert not np.array_equal(build_points(c, cfg, world, jitter=0.0), build_points(other, cfg, world, jitter=0.0))


def test_view_rows_follow_mixing_matrices():
    cfg = SMALL
    world = _make_world(cfg, np.random.default_rng(0))
    c = Concept(2, 3, 0, 1)
    perm = np.random.default_rng(1).permutation(cfg.views)
    shuffled = dataclasses.replace(world, mixing=world.mixing[perm])
    np.testing.assert_array_equal(build_views(c, cfg, shuffled, noise=0.0), build_views(c, cfg, world, noise=0.0)[perm])


def test_captions_name_every_attribute():
    splits = synthesize(DataConfig(train_shapes=100, test_shapes=8), 3)
    cfg = splits["train"].cfg
    for rec in splits["train"]:
        for cap in rec.captions:
            toks = set(cap.tolist())
            for a, v in enumerate(rec.concept.as_tuple()):
                syns = attribute_token_ids(cfg, a, v)
                assert len(syns) >= 2
                assert toks & set(syns), (rec.id, a)


def test_captions_differ_lexically():
    splits = synthesize(DataConfig(train_shapes=64, test_shapes=8), 4)
    distinct = [len({c.tobytes() for c in r.captions}) for r in splits["train"]]
    assert np.mean(distinct) > 3


def test_different_concepts_have_different_caption_tokens():
    cfg = DataConfig()
    attrs = lambda c: {t for a, v in enumerate(c.as_tuple()) for t in attribute_token_ids(cfg, a, v)}
    splits = synthesize(DataConfig(train_shapes=64, test_shapes=8), 6)
    recs = list(splits["train"])
    for i in range(len(recs)):
        for j in range(i + 1, len(recs)):
            if recs[i].concept != recs[j].concept:
                ti = {t for c in recs[i].captions for t in c.tolist()} & attrs(recs[i].concept)
                tj = {t for c in recs[j].captions for t in c.tolist()} & attrs(recs[j].concept)
                assert ti != tj


def test_vocabulary_and_tokenize():
    cfg = DataConfig()
    vocab = vocabulary(cfg)
    assert len(vocab) == cfg.vocab and len(set(vocab)) == cfg.vocab
    ids = tokenize(f"A {vocab[0]} that is {vocab[20]} xyzzy", vocab)
    assert 0 in ids and 20 in ids


def test_config_roundtrip_and_validation():
    assert DataConfig.from_dict(SMALL.to_dict()) == SMALL
    with pytest.raises(ValueError):
        DataConfig(views=0)


# --------------------------------------------------------------------- files


def test_roundtrip_preserves_every_field(small, written):
    _, paths = written
    for split in ("train", "test"):
        h = load(paths[split])
        assert len(h) == len(small[split])
        for a, b in zip(small[split], h):
            assert a.id == b.id and a.concept == b.concept and a.size == pytest.approx(b.size, abs=1e-7)
            np.testing.assert_array_equal(a.points, b.points)
            np.testing.assert_array_equal(a.views, b.views)
            assert [c.tolist() for c in a.captions] == [c.tolist() for c in b.captions]


def test_manifest_contents(written):
    out, paths = written
    m = json.loads(paths["train"].read_text())
    assert m["version"] == "TMR1"
    assert m["counts"] == {"train": 40, "test": 12}
    assert m["config"]["views"] == SMALL.views and m["config"]["n_points"] == SMALL.n_points
    offsets = [r["offset"] for r in m["records"]]
    assert all(a < b for a, b in zip(offsets, offsets[1:]))
    assert (out / "train.blob").read_bytes()[:4] == MAGIC


def test_corrupted_magic_is_a_version_error(written):
    out, paths = written
    blob = out / "train.blob"
    raw = bytearray(blob.read_bytes())
    raw[:4] = b"XXXX"
    blob.write_bytes(bytes(raw))
    with pytest.raises(DatasetVersionError):
        load(paths["train"])


def test_manifest_version_mismatch(written):
    _, paths = written
    m = json.loads(paths["test"].read_text())
    m["version"] = "TMR0"
    paths["test"].write_text(json.dumps(m))
    with pytest.raises(DatasetVersionError):
        load(paths["test"])


def test_truncation_names_last_record(written):
    out, paths = written
    blob = out / "train.blob"
    blob.write_bytes(blob.read_bytes()[:-10])
    with pytest.raises(DatasetTruncatedError, match="record 39"):
        load(paths["train"])


def test_offset_out_of_bounds(written):
    _, paths = written
    m = json.loads(paths["test"].read_text())
    m["records"][-1]["offset"] = m["blob_bytes"] + 100
    paths["test"].write_text(json.dumps(m))
    with pytest.raises(DatasetOffsetError):
        load(paths["test"])


def test_error_kinds_are_distinct():
    kinds = {DatasetVersionError, DatasetTruncatedError, DatasetOffsetError}
    assert all(issubclass(k, DatasetError) for k in kinds)
    assert not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)


def test_missing_manifest():
    with pytest.raises(DatasetError):
        load("/nonexistent/train.manifest.json")


# ------------------------------------------------------------------ batching


def test_batch_count_and_drop_tail():
    ds = synthesize(DataConfig(train_shapes=128, test_shapes=4), 1)["train"]
    assert len(make_batches(ds, 64, 0)) == 2
    batches = make_batches(ds, 50, 0)
    assert len(batches) == 2 and all(len(b) == 50 for b in batches)


def test_batch_contents_and_determinism(small):
    ds = small["train"]
    a, b = make_batches(ds, 8, 42), make_batches(ds, 8, 42)
    c = make_batches(ds, 8, 43)
    assert [x.ids.tolist() for x in a] == [x.ids.tolist() for x in b]
    assert [x.ids.tolist() for x in a] != [x.ids.tolist() for x in c]
    ids = np.concatenate([x.ids for x in a])
    assert len(set(ids.tolist())) == len(ids)
    for batch in a:
        assert batch.points.shape == (8, SMALL.n_points, 6) and batch.views.shape == (8, SMALL.views, SMALL.d_v)
        for sid, cap, k in zip(batch.ids, batch.captions, batch.caption_index):
            np.testing.assert_array_equal(cap, ds.record(int(sid)).captions[k])


def test_caption_coverage_over_100_epochs(small):
    ds = small["train"]
    seen = {i: set() for i in range(len(ds))}
    for epoch in range(100):
        for batch in make_batches(ds, 8, epoch):
            for sid, k in zip(batch.ids, batch.caption_index):
                seen[int(sid)].add(int(k))
    assert all(s == set(range(5)) for s in seen.values())


def test_batch_errors(small):
    with pytest.raises(ValueError):
        make_batches(small["train"], 1, 0)
    with pytest.raises(ValueError):
        make_batches(small["test"], 64, 0)

import math

import numpy as np
import pytest

import stgl


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d)).astype(np.float32)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_contrast_enhance_contract():
    img = np.array([[0.4, 0.6]])
    np.testing.assert_allclose(stgl.contrast_enhance(img, 3.0), [[0.2, 0.8]], atol=1e-12)
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(8, 9))
    assert np.array_equal(stgl.contrast_enhance(x, 1.0), x)
    with pytest.raises(stgl.InputError):
        stgl.contrast_enhance(x, 0.0)


def test_tile_counts():
    assert len(stgl.tile_offsets(582, 582, 512, 35)) == 9
    assert len(stgl.tile_offsets(100, 70, 20, 10)) == ((100 - 20) // 10 + 1) * ((70 - 20) // 10 + 1)


def test_world_shapes():
    sat, thermal = stgl.generate_world(seed=3, height=48, width=40)
    assert sat.shape == (48, 40, 3)
    assert thermal.shape == (48, 40)
    assert 0.0 <= thermal.min() and thermal.max() <= 1.0


def test_index_knn_matches_brute_force(tmp_path):
    rng = np.random.default_rng(1)
    db = unit_rows(rng, 50, 8)
    pos = rng.uniform(0, 1000, size=(50, 2))
    ids = list(range(100, 150))
    idx = stgl.DescriptorIndex(db, pos, ids, fingerprint="abc")
    q = unit_rows(rng, 1, 8)[0]
    got = [n["tile_id"] for n in idx.knn(q, 5)]
    dist = np.linalg.norm(db.astype(np.float64) - q.astype(np.float64), axis=1)
    assert got == [ids[i] for i in np.argsort(dist, kind="stable")[:5]]

    near = idx.knn_within(q, 50, center=(500.0, 500.0), radius_m=200.0)
    assert all(math.hypot(n["x"] - 500, n["y"] - 500) <= 200 for n in near)

    path = tmp_path / "db.stgl"
    idx.save(path)
    back = stgl.DescriptorIndex.load(path)
    assert back.tile_ids == ids and back.model_fingerprint == "abc" and len(back) == 50
    raw = bytearray(path.read_bytes())
    raw[40] ^= 1
    path.write_bytes(bytes(raw))
    with pytest.raises(stgl.FormatError, match="checksum"):
        stgl.DescriptorIndex.load(path)


def test_evaluate_self_retrieval():
    rng = np.random.default_rng(2)
    db = unit_rows(rng, 20, 16)
    pos = np.stack([np.arange(20) * 100.0, np.zeros(20)], axis=1)
    idx = stgl.DescriptorIndex(db, pos, list(range(20)))
    rep = stgl.evaluate(idx, db, pos)
    assert rep["r_at"][1] == 100.0
    assert rep["r_prior_at"][(512, 5)] == 100.0
    assert rep["l2_prior"][512] == 0.0


def test_mining_radii():
    rng = np.random.default_rng(3)
    descs = unit_rows(rng, 4, 8)
    pos = np.array([[10.0, 0.0], [40.0, 0.0], [60.0, 0.0], [300.0, 0.0]])
    got = stgl.mine_triplets(descs[0], (0.0, 0.0), descs, pos, [1, 2, 3, 4], n_neg=5)
    assert got["positive"] == 1
    assert sorted(got["negatives"]) == [3, 4]
    assert stgl.mine_triplets(descs[0], (5000.0, 0.0), descs, pos, [1, 2, 3, 4]) is None


def test_embedding_is_unit_norm():
    net = stgl.SgmNetwork.create("desk", seed=1)
    sat, _ = stgl.generate_world(seed=4, height=64, width=64)
    d = net.embed(sat)
    assert d.shape == (net.c_final,)
    assert abs(float(np.linalg.norm(d)) - 1.0) < 1e-5


def test_experiment_defaults():
    cfg = stgl.experiment_config("full")
    assert cfg["tiling"]["crop_size"] == 512
    assert cfg["sgm"]["c_final"] == 4096
    with pytest.raises(stgl.InputError):
        stgl.experiment_config("huge")

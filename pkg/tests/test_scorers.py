import itertools

import numpy as np
import pytest
import torch

from homographyad.backbones import REGISTRY, build_backbone
from homographyad.errors import ConfigMismatch, DimensionMismatch, InsufficientNormals, UnknownLayer
from homographyad.scorers import (
    FeatureExtractor,
    FeatureMap,
    ScorerConfig,
    _spade_map,
    cov_factor,
    extract_features,
    fit_scorer,
    kcenter_greedy,
    load_normal_model,
    mahad_fit_descriptors,
    mahad_score_descriptors,
    mahalanobis,
    padim_distances,
    padim_fit,
    patchcore_distances,
    patchcore_fit,
    save_normal_model,
    score_images,
    spade_distances,
    spade_fit,
)


def fmap(values, layer="layer1", stride=4):
    return [FeatureMap(layer, np.asarray(values, dtype=np.float64), stride)]


def brute_kcenter(X, count, start):
    sel = [start]
    for _ in range(count - 1):
        best, best_d = None, -1.0
        for j in range(len(X)):
            if j in sel:
                continue
            d = min(np.linalg.norm(X[j] - X[i]) for i in sel)
            if d > best_d:
                best, best_d = j, d
        sel.append(best)
    return sel


# ---- kernels


def test_mahalanobis_hand_cases():
    assert mahalanobis([1, 2], [1, 2], cov_factor(np.eye(2))) == 0.0
    assert mahalanobis([3, 4], [0, 0], cov_factor(np.eye(2))) == pytest.approx(5.0, abs=1e-12)
    val = mahalanobis([1, 1], [0, 0], cov_factor(np.diag([2.0, 0.5])))
    assert abs(val - np.sqrt(2.5)) < 1e-8
    cov = np.array([[2.0, 1.0], [1.0, 2.0]])
    x = np.array([1.0, -1.0])
    assert abs(mahalanobis(x, [0, 0], cov_factor(cov)) - np.sqrt(x @ np.linalg.inv(cov) @ x)) < 1e-8
    with pytest.raises(DimensionMismatch):
        mahalanobis([1, 2, 3], [0, 0], cov_factor(np.eye(2)))


def test_kcenter_hand_trace_and_ratio():
    pts = np.array([[0.0], [1.0], [10.0]])
    assert kcenter_greedy(pts, count=2, start=0) == [0, 2]
    assert sorted(kcenter_greedy(pts, ratio=1.0, seed=3)) == [0, 1, 2]


def test_kcenter_matches_bruteforce():
    for seed in range(50):
        X = np.random.default_rng(seed).normal(size=(50, 5))
        assert kcenter_greedy(X, count=12, start=seed % 50) == brute_kcenter(X, 12, seed % 50)


def test_kcenter_seeded_start_reproducible():
    X = np.random.default_rng(0).normal(size=(30, 3))
    assert kcenter_greedy(X, ratio=0.2, seed=7) == kcenter_greedy(X, ratio=0.2, seed=7)


# ---- PaDiM


def test_padim_hand_two_images():
    feats = fmap([[[[1.0]], [[2.0]]], [[[3.0]], [[6.0]]]])  # 2 images, 2 channels, 1x1
    st = padim_fit(feats, ScorerConfig(eps=0.01))
    np.testing.assert_allclose(st.mean[0], [2.0, 4.0])
    np.testing.assert_allclose(st.cov[0], [[2.01, 4.0], [4.0, 8.01]])
    x = fmap([[[[5.0]], [[1.0]]]])
    d = padim_distances(st, x)[0, 0, 0]
    expect = mahalanobis([5.0, 1.0], st.mean[0], cov_factor(st.cov[0]))
    assert abs(d - expect) < 1e-8


def test_padim_identical_normals(rng):
    one = rng.normal(size=(1, 6, 4, 4))
    st = padim_fit(fmap(np.repeat(one, 3, axis=0)), ScorerConfig(eps=0.01))
    np.testing.assert_allclose(st.cov, np.broadcast_to(0.01 * np.eye(6), st.cov.shape), atol=1e-15)
    assert np.abs(padim_distances(st, fmap(one))).max() < 1e-8


def test_padim_locality_and_channels(rng):
    normals = rng.normal(size=(10, 4, 5, 5))
    st = padim_fit(fmap(normals), ScorerConfig(padim_dims=3, seed=1))
    assert np.array_equal(st.channels, padim_fit(fmap(normals), ScorerConfig(padim_dims=3, seed=1)).channels)
    probe = normals[:1].copy()
    probe[0, :, 2, 3] += 50.0
    d = padim_distances(st, fmap(probe))[0]
    assert np.unravel_index(np.argmax(d), d.shape) == (2, 3)


def test_padim_order_invariant(rng):
    normals = rng.normal(size=(6, 3, 2, 2))
    a = padim_fit(fmap(normals))
    b = padim_fit(fmap(normals[::-1]))
    np.testing.assert_allclose(a.cov, b.cov, atol=1e-12)


def test_padim_insufficient():
    with pytest.raises(InsufficientNormals):
        padim_fit(fmap(np.zeros((1, 2, 2, 2))))


# ---- PatchCore


def test_patchcore_member_zero_and_bank_size(rng):
    normals = rng.normal(size=(3, 4, 4, 4))
    bank = patchcore_fit(fmap(normals), ScorerConfig(coreset_ratio=1.0, patch_size=1))
    assert bank.bank.shape == (3 * 16, 4)
    assert np.abs(patchcore_distances(bank, fmap(normals[1:2]))).max() < 1e-8
    sub = patchcore_fit(fmap(normals), ScorerConfig(coreset_ratio=0.25, patch_size=3, seed=2))
    assert len(set(sub.coreset.tolist())) == len(sub.coreset)
    member = sub.coreset[0]
    img, pos = divmod(int(member), 16)
    d = patchcore_distances(sub, fmap(normals[img : img + 1]))[0]
    assert d.ravel()[pos] < 1e-8


def test_patchcore_matches_bruteforce(rng):
    normals = rng.normal(size=(2, 3, 3, 3))
    bank = patchcore_fit(fmap(normals), ScorerConfig(coreset_ratio=0.5, patch_size=1))
    q = rng.normal(size=(1, 3, 3, 3))
    d = patchcore_distances(bank, fmap(q))[0]
    qv = q[0].transpose(1, 2, 0).reshape(-1, 3)
    brute = np.array([min(np.linalg.norm(v - b) for b in bank.bank) for v in qv]).reshape(3, 3)
    np.testing.assert_allclose(d, brute, atol=1e-10)


def test_patchcore_constant_maps_identical_vectors():
    bank = patchcore_fit(fmap(np.ones((2, 3, 4, 4))), ScorerConfig(coreset_ratio=1.0))
    assert np.all(bank.bank == bank.bank[0])


# ---- SPADE


def test_spade_k1_member_zero(rng):
    normals = rng.normal(size=(5, 3, 4, 4))
    model = spade_fit(fmap(normals), ScorerConfig(spade_k=1))
    s, maps = spade_distances(model, fmap(normals[2:3]))
    assert abs(s[0]) < 1e-8 and np.abs(maps).max() < 1e-8


def test_spade_map_bruteforce(rng):
    q = rng.normal(size=(2, 3, 3))
    g = rng.normal(size=(2, 2, 3, 3))
    out = _spade_map(q, g, kappa=2)
    for y, x in itertools.product(range(3), range(3)):
        ds = []
        for k in range(2):
            for dy, dx in itertools.product((-1, 0, 1), repeat=2):
                yy, xx = y + dy, x + dx
                if 0 <= yy < 3 and 0 <= xx < 3:
                    ds.append(np.linalg.norm(q[:, y, x] - g[k, :, yy, xx]))
        assert abs(out[y, x] - np.mean(sorted(ds)[:2])) < 1e-10


def test_spade_all_identical_normals(rng):
    one = rng.normal(size=(1, 3, 2, 2))
    model = spade_fit(fmap(np.repeat(one, 4, axis=0)), ScorerConfig(spade_k=50))
    probe = rng.normal(size=(1, 3, 2, 2))
    s, _ = spade_distances(model, fmap(probe))
    expect = np.linalg.norm(probe.mean(axis=(2, 3)) - one.mean(axis=(2, 3)))
    assert abs(s[0] - expect) < 1e-10


# ---- Mah.AD


def test_mahad_mean_zero_and_hand_case():
    desc = np.array([[1.0, 2.0], [3.0, 1.0], [2.0, 6.0]])
    m = mahad_fit_descriptors(desc, eps=0.01)
    assert mahad_score_descriptors(m, m.mean[None])[0].image_score == 0.0
    cov = np.cov(desc, rowvar=False) + 0.01 * np.eye(2)
    x = np.array([4.0, 4.0])
    expect = np.sqrt((x - desc.mean(0)) @ np.linalg.inv(cov) @ (x - desc.mean(0)))
    r = mahad_score_descriptors(m, x[None])[0]
    assert abs(r.image_score - expect) < 1e-8 and r.score_map is None


# ---- features and persistence


def test_extract_features_strides_and_determinism(rng):
    bb = build_backbone("compact_cnn", seed=0)
    imgs = rng.random((2, 64, 48, 3)).astype(np.float32)
    a = extract_features(bb, imgs, ("layer1", "layer2", "layer3"))
    b = extract_features(bb, imgs, ("layer1", "layer2", "layer3"))
    for fa, fb in zip(a, b):
        s = REGISTRY["compact_cnn"].strides[fa.layer]
        assert fa.values.shape[2:] == (64 // s, 48 // s)
        assert fa.values.shape[1] == REGISTRY["compact_cnn"].channels[fa.layer]
        assert np.array_equal(fa.values, fb.values)
    with pytest.raises(UnknownLayer):
        extract_features(bb, imgs, ("layer9",))


def test_zero_input_zero_bias_gives_zero_maps():
    bb = build_backbone("compact_cnn", seed=0)
    bb.mean.zero_()
    bb.std.fill_(1.0)
    with torch.no_grad():
        for m in bb.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.bias.zero_()
    feats = extract_features(bb, np.zeros((1, 32, 32, 3), np.float32), ("layer1", "layer3"))
    assert all(np.all(f.values == 0) for f in feats)


@pytest.mark.parametrize("scorer", ["padim", "patchcore", "spade", "mahad"])
def test_fit_save_load_score(tmp_path, rng, scorer):
    ex = FeatureExtractor(build_backbone("compact_cnn", seed=0), ("layer1", "layer2"))
    normals = rng.random((4, 32, 32, 3)).astype(np.float32)
    model = fit_scorer(scorer, ex, normals, ScorerConfig(spade_k=2))
    r1 = score_images(model, ex, normals[:2])
    save_normal_model(model, tmp_path / "m")
    r2 = score_images(load_normal_model(tmp_path / "m", ex), ex, normals[:2])
    for a, b in zip(r1, r2):
        assert a.image_score == b.image_score and a.image_score >= 0
        if a.score_map is not None:
            assert a.score_map.shape == (32, 32) and np.array_equal(a.score_map, b.score_map)
    other = FeatureExtractor(build_backbone("compact_cnn", seed=1), ("layer1", "layer2"))
    with pytest.raises(ConfigMismatch):
        score_images(model, other, normals[:1])
    with pytest.raises(ConfigMismatch):
        load_normal_model(tmp_path / "m", other)

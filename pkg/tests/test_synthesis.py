import json
from pathlib import Path

import numpy as np
import pytest

from homographyad.errors import InfeasibleParams, InvalidSpec
from homographyad.geometry import ImageFrame, apply_homography
from homographyad.synthesis import (
    AugmentationPolicy,
    DatasetManifest,
    MisalignmentParams,
    ToyClassSpec,
    ToySpec,
    augment,
    build_misaligned_dataset,
    generate_toy_dataset,
    sample_inward_perturbation,
    sample_misalignment,
)
from homographyad.synthesis.augment import shift_hue
from homographyad.synthesis.manifest import load_mask
from homographyad.synthesis.toy import inject_defect
from homographyad.synthesis.variants import foreground_box, warp_pair

GOLDEN = Path(__file__).parent / "golden"
FRAME = ImageFrame(128, 128)


def test_inward_perturbation_bounds():
    rng = np.random.default_rng(0)
    d = np.stack([sample_inward_perturbation(rng, 32, FRAME).deltas for _ in range(10_000)])
    signs = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]])
    inward = d * signs
    assert inward.min() >= 0 and inward.max() <= 32
    small = sample_inward_perturbation(rng, 1, FRAME)
    assert np.abs(small.deltas).max() <= 1
    with pytest.raises(ValueError):
        sample_inward_perturbation(rng, 33, FRAME)


def test_inward_perturbation_golden():
    g = json.loads((GOLDEN / "inward_perturbation.json").read_text())
    d = sample_inward_perturbation(np.random.default_rng(g["seed"]), g["rho"], ImageFrame(*g["frame"]))
    assert d.to_list() == g["displacement"]


def test_misalignment_zero_params_identity():
    H = sample_misalignment(np.random.default_rng(0), MisalignmentParams(0, 0, 0), FRAME)
    assert H.is_identity(1e-12)


def test_misalignment_rotation_only_structure():
    rng = np.random.default_rng(1)
    for _ in range(50):
        h = sample_misalignment(rng, MisalignmentParams(30, 0, 0), FRAME).h
        np.testing.assert_allclose(h[:2, :2] @ h[:2, :2].T, np.eye(2), atol=1e-9)
        np.testing.assert_allclose(h[2], [0, 0, 1], atol=1e-12)


def test_misalignment_keeps_foreground_in_frame():
    rng = np.random.default_rng(2)
    params = MisalignmentParams()
    box = foreground_box(FRAME, params.foreground_margin)
    for _ in range(10_000):
        h = sample_misalignment(rng, params, FRAME).h
        blk = h[:2, :2]
        s = np.sqrt(abs(np.linalg.det(blk)))
        np.testing.assert_allclose(blk @ blk.T / s**2, np.eye(2), atol=1e-9)
        p = apply_homography(h, box)
        assert p.min() >= 0 and p[:, 0].max() <= 127 and p[:, 1].max() <= 127


def test_misalignment_infeasible():
    with pytest.raises(InfeasibleParams):
        sample_misalignment(np.random.default_rng(0), MisalignmentParams(0, 0.5, 0, foreground_margin=0.0), FRAME)


def test_augment_none_identity_and_counts(rng):
    img = rng.random((100, 100, 3))
    assert np.array_equal(augment(img, AugmentationPolicy("none"), rng), img)
    pol = AugmentationPolicy("shape", pepper_rate=0.0, salt_rate=0.01)
    out = augment(np.full((100, 100, 3), 0.5), pol, rng)
    assert int(np.all(out == 1.0, axis=2).sum()) == 100
    assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        AugmentationPolicy(salt_rate=0.3)


def test_hue_half_turn_red_to_cyan():
    red = np.zeros((4, 4, 3))
    red[..., 0] = 1.0
    out = shift_hue(red, 0.5)
    np.testing.assert_allclose(out[0, 0], [0, 1, 1], atol=1e-9)


def test_augment_category_wiring(rng):
    img = np.full((16, 16, 3), 0.5)
    color_only = augment(img, AugmentationPolicy("color", pepper_rate=0.2, salt_rate=0.2), rng)
    assert not np.any(np.all(color_only == 1.0, axis=2))
    shape_only = augment(img, AugmentationPolicy("shape", brightness=0.5), rng)
    assert set(np.unique(shape_only)) <= {0.0, 0.5, 1.0}


def test_toy_counts_masks_and_invariants(tiny_toy):
    counts = tiny_toy.counts()
    for c in ("widget", "rotor", "weave"):
        assert counts[c] == {"train": 8, "test_good": 4, "test_defect": 6}
    for r in tiny_toy.images:
        if r.split == "train":
            assert r.label == "good"
        if r.is_anomalous:
            m = load_mask(tiny_toy.root / r.mask)
            assert m.shape == (64, 64) and (m > 0).any() and set(np.unique(m)) <= {0, 255}
    assert {c.name: c.kind for c in tiny_toy.classes} == {"widget": "object", "rotor": "object", "weave": "texture"}
    for sub in ("widget/train/good", "widget/test/good", "widget/ground_truth"):
        assert (tiny_toy.root / sub).is_dir()
    tiny_toy.validate(check_files=True)


def test_toy_deterministic(tmp_path):
    spec = ToySpec(classes=(ToyClassSpec("widget"),), size=32, n_train=2, n_test_good=1, n_test_defect=3)
    a = generate_toy_dataset(spec, tmp_path / "a", seed=5)
    b = generate_toy_dataset(spec, tmp_path / "b", seed=5)
    files = sorted(p.relative_to(a.root) for p in a.root.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b.root) for p in b.root.rglob("*") if p.is_file())
    for f in files:
        assert (a.root / f).read_bytes() == (b.root / f).read_bytes()


def test_toy_invalid_spec():
    with pytest.raises(InvalidSpec):
        ToySpec(classes=()).validate()
    with pytest.raises(InvalidSpec):
        ToySpec(classes=(ToyClassSpec("a", defects=("crack",)),)).validate()


def test_manifest_roundtrip(tiny_toy):
    again = DatasetManifest.load(tiny_toy.root)
    assert again.to_json() == tiny_toy.to_json()


def test_misaligned_zero_params_copies(tiny_toy, tmp_path):
    m = build_misaligned_dataset(tiny_toy, MisalignmentParams(0, 0, 0), tmp_path / "mis", seed=0)
    assert m.counts() == tiny_toy.counts()
    for r in tiny_toy.images:
        assert (tmp_path / "mis" / r.path).read_bytes() == (tiny_toy.root / r.path).read_bytes()


def test_misaligned_records_shared_transform(tiny_toy, tmp_path):
    m = build_misaligned_dataset(tiny_toy, MisalignmentParams(), tmp_path / "mis", seed=3)
    assert m.variant == "misaligned" and m.counts() == tiny_toy.counts()
    for r in m.images:
        assert r.alignment == "misaligned" and r.homography is not None
        if r.mask is not None:
            mk = load_mask(m.root / r.mask)
            assert set(np.unique(mk)) <= {0, 255}


def test_scale_only_mask_area():
    mask = np.zeros((128, 128), bool)
    mask[44:84, 44:84] = True
    from homographyad.geometry import similarity_matrix

    for s in (0.9, 1.1):
        H = similarity_matrix(0, s, 0, 0, FRAME)
        _, out = warp_pair(np.zeros((128, 128, 3)), mask, H)
        assert abs(out.sum() - s**2 * mask.sum()) <= 0.15 * s**2 * mask.sum()


def test_inject_defect(rng):
    img = np.full((64, 64, 3), 0.5, np.float32)
    for kind in ("scratch", "spot"):
        out, mask = inject_defect(img, rng, kind)
        assert mask.any() and out.dtype == img.dtype and not np.array_equal(out, img)


def test_import_mvtec_layout(tmp_path):
    from homographyad.synthesis import import_mvtec, save_image, save_mask

    src = tmp_path / "mvtec"
    rng = np.random.default_rng(0)
    for i in range(2):
        save_image(src / "bottle" / "train" / "good" / f"{i:03d}.png", rng.random((40, 40, 3)))
    save_image(src / "bottle" / "test" / "good" / "000.png", rng.random((40, 40, 3)))
    save_image(src / "bottle" / "test" / "broken" / "000.png", rng.random((40, 40, 3)))
    mask = np.zeros((40, 40), bool)
    mask[10:20, 10:20] = True
    save_mask(src / "bottle" / "ground_truth" / "broken" / "000_mask.png", mask)
    m = import_mvtec(src, tmp_path / "out", size=32)
    assert m.counts() == {"bottle": {"train": 2, "test_good": 1, "test_defect": 1}}
    assert m.class_record("bottle").kind == "object"
    imgs, labels, masks = m.load_split("bottle", "test")
    assert imgs.shape == (2, 32, 32, 3) and sorted(labels.tolist()) == [0, 1]
    assert sum(mk.sum() for mk in masks) == 64  # 10x10 block scaled by 0.8 under nearest sampling
    with pytest.raises(FileNotFoundError):
        import_mvtec(src, tmp_path / "out2", ["carpet"])

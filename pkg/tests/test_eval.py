from pathlib import Path

import numpy as np
import pytest
from matplotlib import colormaps
from PIL import Image

from homographyad.eval import studies
from homographyad.eval.heatmap import heatmap_panel, normalize_map, overlay, render_heatmap
from homographyad.eval.studies import (
    ExperimentResult,
    condition,
    evaluate_condition,
    grid_table,
    markdown_table,
    results_document,
    run_alignment_study,
    run_augmentation_study,
    validate_results,
    validation_split,
)
from homographyad.shl import ShlConfig

GOLDEN = Path(__file__).parent / "golden"


def _scene():
    yy, xx = np.mgrid[0:16, 0:16]
    score = np.exp(-((yy - 10) ** 2 + (xx - 5) ** 2) / 8.0)
    img = np.stack([xx / 15.0, yy / 15.0, np.full((16, 16), 0.5)], axis=2)
    return score, img, score > 0.5


def test_normalize_map():
    assert np.array_equal(normalize_map(np.full((3, 3), 7.0)), np.zeros((3, 3)))
    m = normalize_map(np.array([[1.0, 3.0], [2.0, 5.0]]))
    assert m.min() == 0 and m.max() == 1 and m[0, 1] == 0.5


def test_overlay_endpoints():
    score, img, _ = _scene()
    out = overlay(score, img)
    y, x = np.unravel_index(score.argmax(), score.shape)
    np.testing.assert_allclose(out[y, x], 0.5 * img[y, x] + 0.5 * np.array(colormaps["jet"](1.0)[:3]))
    y, x = np.unravel_index(score.argmin(), score.shape)
    np.testing.assert_allclose(out[y, x], 0.5 * img[y, x] + 0.5 * np.array(colormaps["jet"](0.0)[:3]))


def test_heatmap_panel_layout_and_golden(tmp_path):
    score, img, mask = _scene()
    panel = heatmap_panel(score, img, mask)
    assert panel.shape == (16, 48, 3) and panel.dtype == np.uint8
    assert np.array_equal(panel[:, 32:, 0] > 0, mask)
    path = render_heatmap(score, img, tmp_path / "p.png", mask)
    golden = np.asarray(Image.open(GOLDEN / "heatmap_panel.png"))
    assert np.array_equal(np.asarray(Image.open(path)), golden)
    with pytest.raises(ValueError):
        heatmap_panel(score[:8], img)


def _result(per_seed, kinds, cond=None):
    r = ExperimentResult(cond or condition(), [0, 1])
    r.per_seed = per_seed
    return r.finalize(kinds)


def test_result_averages_are_means():
    r = _result({"a": [[0.8, 0.9], [0.6, 0.7]], "b": [[1.0, None], [0.5, None]]}, {"a": "object", "b": "texture"})
    assert r.per_class["a"]["image"] == pytest.approx(0.7)
    assert r.per_class["b"]["pixel"] is None
    assert r.average["image"] == pytest.approx((0.7 + 0.75) / 2)
    assert r.splits["object"]["image"] == pytest.approx(0.7)
    assert r.splits["total"] == r.average
    assert ExperimentResult.from_dict(r.to_dict()) == r


def test_tables():
    a = _result({"a": [[0.8, 0.9]], "b": [[0.6, 0.7]]}, {"a": "object", "b": "texture"})
    b = _result({"a": [[0.9, 0.8]], "b": [[0.5, 0.7]]}, {"a": "object", "b": "texture"}, condition("aligned"))
    grid = grid_table([a, b]).splitlines()
    assert grid[2].endswith("| 90.00 |") and grid[3].endswith("| 60.00 |")
    assert grid[4].startswith("| total")
    md = markdown_table([a, b]).splitlines()
    assert len(md) == 4 and "aligned" in md[3]


def test_identical_variants_zero_deltas(tiny_toy):
    variants = {"misaligned": tiny_toy, "original": tiny_toy, "aligned": tiny_toy}
    results, d = run_alignment_study(variants, ["widget"], seeds=[0], pretrained=False)
    assert [r.condition["variant"] for r in results] == ["misaligned", "original", "aligned"]
    assert len(d) == 2
    for row in d:
        assert all(v["image"] == 0 and v["pixel"] == 0 for v in row["splits"].values())
    doc = results_document("alignment", {"seeds": [0]}, results, d)
    validate_results(doc)
    with pytest.raises(Exception):
        validate_results({**doc, "schema_version": 99})


def test_evaluate_condition_records_cell_errors(tiny_toy):
    r = evaluate_condition(tiny_toy, ["widget", "nope"], condition(), [0], pretrained=False)
    assert r.failed and "nope/seed0" in r.errors
    assert "widget" in r.per_class


def test_hl_with_baseline_weights_gives_zero_deltas(tiny_toy):
    w = studies.make_backbone("compact_cnn", 0, False).state_dict()
    results, d = studies.run_hl_study(tiny_toy, ["widget"], seeds=[0], weights={("widget", 0): w}, pretrained=False)
    assert all(v["image"] == 0 for v in d[0]["splits"].values())


def test_augmentation_category_reaches_finetuning(tiny_toy, monkeypatch):
    seen = []

    def fake(manifest, cls, seed, shl_cfg, *a, **k):
        seen.append(shl_cfg.augmentation.category)
        return studies.make_backbone("compact_cnn", seed, False).state_dict(), 10, [0.5], None

    monkeypatch.setattr(studies, "finetune_and_select", fake)
    results, _ = run_augmentation_study(tiny_toy, ["widget"], ("shape", "color"), shl_cfg=ShlConfig(), seeds=[0], pretrained=False)
    assert seen == ["shape", "color"]
    assert [r.condition["augmentation"] for r in results] == [None, "shape", "color"]


def test_validation_split_seeded():
    train = np.random.default_rng(0).random((8, 32, 32, 3)).astype(np.float32)
    fit, probe, labels = validation_split(train, 3, 0.25)
    assert len(fit) == 6 and len(probe) == 4 and labels.tolist() == [0, 0, 1, 1]
    fit2, probe2, _ = validation_split(train, 3, 0.25)
    assert np.array_equal(probe, probe2)
    assert not any(np.array_equal(p, f) for p in probe[:2] for f in fit)
    with pytest.raises(ValueError):
        validation_split(train[:2], 0, 0.5)

import numpy as np
import pytest
import torch

from homographyad.backbones import RegressionHead, build_backbone
from homographyad.geometry import CornerDisplacement
from homographyad.shl import (
    Checkpoint,
    CheckpointSeries,
    ShlConfig,
    finetune_backbone,
    grad_check_head,
    select_checkpoint,
    shl_loss,
)


def test_loss_hand_cases():
    zero = CornerDisplacement.zeros()
    assert shl_loss(zero, zero) == 0.0
    assert shl_loss(np.ones(8), np.zeros(8)) == 8.0
    assert shl_loss(np.zeros(8), np.arange(1, 9)) == 204.0
    t = torch.tensor([[1.0] * 8, [0.0] * 8])
    assert shl_loss(t, torch.zeros(2, 8)).tolist() == [8.0, 0.0]


def test_loss_symmetric_nonnegative(rng):
    a, b = rng.normal(size=8), rng.normal(size=8)
    assert shl_loss(a, b) == shl_loss(b, a) > 0


def test_grad_check_head():
    torch.manual_seed(0)
    head = RegressionHead(6, pool=2, output_scale=4.0)
    torch.nn.init.normal_(head.fc.weight, std=0.1)
    probe = torch.randn(3, 6, 4, 4)
    target = torch.randn(3, 8)
    err, norm = grad_check_head(head, probe, target)
    assert err < 1e-3 and norm > 0
    _, norm2 = grad_check_head(head, probe, target, loss_scale=2.0)
    assert abs(norm2 - 2 * norm) < 1e-6


def test_grad_zero_at_zero_loss():
    head = RegressionHead(4, pool=1)
    probe = torch.randn(2, 4, 3, 3)
    with torch.no_grad():
        target = head(probe)
    _, norm = grad_check_head(head, probe, target)
    assert norm < 1e-8


def test_config_invariants():
    assert ShlConfig().iterations // ShlConfig().checkpoint_every == 30
    with pytest.raises(ValueError):
        ShlConfig(iterations=250, checkpoint_every=100)
    cfg = ShlConfig(iterations=200, rho=8.0)
    assert ShlConfig.from_dict(cfg.to_dict()) == cfg


def _series(values):
    cps = [Checkpoint(100 * (i + 1), 0.0, {}) for i in range(len(values))]
    return CheckpointSeries(cps, [], ShlConfig()), dict(zip([c.iteration for c in cps], values))


def test_select_checkpoint_rules():
    s, table = _series([0.1, 0.2, 0.3])
    assert select_checkpoint(s, lambda c: table[c.iteration])[0].iteration == 300
    s, table = _series([0.5, 0.5, 0.5])
    assert select_checkpoint(s, lambda c: table[c.iteration])[0].iteration == 100
    recorded = [0.91, 0.935, 0.93, 0.935, 0.9]
    s, table = _series(recorded)
    best = select_checkpoint(s, lambda c: table[c.iteration])[0]
    assert best.iteration == 100 * (int(np.argmax(recorded)) + 1)
    assert select_checkpoint(s, lambda c: np.exp(table[c.iteration]))[0] is best


def _normals(tiny_toy):
    imgs, _, _ = tiny_toy.load_split("widget", "train")
    return list(imgs)


def test_finetune_trend_and_determinism(tiny_toy, tmp_path):
    normals = _normals(tiny_toy)
    bb = build_backbone("compact_cnn", seed=0)
    cfg = ShlConfig(iterations=300, checkpoint_every=100, batch_size=4, lr=1e-3, seed=0)
    s1 = finetune_backbone(bb, normals, cfg)
    n = len(s1.losses) // 10
    assert np.mean(s1.losses[-n:]) < np.mean(s1.losses[:n])
    assert s1.iterations == [100, 200, 300]
    short = ShlConfig(iterations=20, checkpoint_every=10, batch_size=2, seed=1)
    a = finetune_backbone(bb, normals, short)
    b = finetune_backbone(bb, normals, short)
    assert np.abs(np.array(a.losses) - np.array(b.losses)).max() <= 1e-6
    # original backbone untouched; earlier checkpoints independent of later ones
    assert all(torch.equal(v, bb.state_dict()[k]) for k, v in build_backbone("compact_cnn", seed=0).state_dict().items())
    half = finetune_backbone(bb, normals, ShlConfig(iterations=10, checkpoint_every=10, batch_size=2, seed=1))
    for k, v in half.checkpoints[0].weights.items():
        assert torch.equal(v, a.checkpoints[0].weights[k])


def test_resume_equivalence(tiny_toy, tmp_path):
    normals = _normals(tiny_toy)
    bb = build_backbone("compact_cnn", seed=0)
    cfg = ShlConfig(iterations=30, checkpoint_every=10, batch_size=2, seed=2)
    full = finetune_backbone(bb, normals, cfg, out_dir=tmp_path / "full")
    finetune_backbone(bb, normals, cfg, out_dir=tmp_path / "part", stop_after=10)
    resumed = finetune_backbone(bb, normals, cfg, out_dir=tmp_path / "part", resume=True)
    assert resumed.losses == full.losses
    loaded = CheckpointSeries.load(tmp_path / "part")
    assert loaded.iterations == [10, 20, 30]
    for k, v in loaded.weights(loaded.checkpoints[-1]).items():
        assert torch.equal(v, full.checkpoints[-1].weights[k])


def test_sample_hook_sees_perturbed_views(tiny_toy):
    seen = []
    cfg = ShlConfig(iterations=2, checkpoint_every=1, batch_size=2, seed=0)
    finetune_backbone(build_backbone("compact_cnn", seed=0), _normals(tiny_toy), cfg, sample_hook=seen.append)
    assert len(seen) == 4 and seen[0].shape == (3, 64, 64)

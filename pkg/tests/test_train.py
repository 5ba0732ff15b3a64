import math

import numpy as np
import pytest
import torch

from va_lds.dataio import SynthConfig, generate_synthetic_dataset, make_folds, align_frames
from va_lds.errors import ConfigError, ValidationError
from va_lds.lds import LDSParams, SmoothingKernel, lds_weight_table, uniform_table
from va_lds.model import ModelConfig, build_model, count_parameters
from va_lds.train import (
    TrainConfig,
    ccc_loss,
    coverage_starts,
    cross_validate,
    fit,
    lds_tables,
    load_checkpoint,
    predict_videos,
    prepare_videos,
    weighted_loss,
    window_starts,
)

TINY_MODEL = ModelConfig(image_size=16, cnn_channels=(4, 4), spatial_feature_dim=6, mlp_hidden=6,
                         temporal_channels=4, recurrent_hidden=6, window_length=4,
                         n_scales=1, n_orientations=2)
TINY_TRAIN = TrainConfig(epochs=2, batch_windows=4, window_length=4, learning_rate=0.05,
                         lds=LDSParams(n_bins=20, kernel=SmoothingKernel("gaussian", 0.2, 2)),
                         k_folds=2)


def central_difference_grad(f, params, indices, steps=(1e-4, 1e-5, 1e-6, 1e-7)):
    """Central differences of scalar f() w.r.t. chosen flat entries of each tensor.

    Each entry is differenced at several steps; the estimate kept is the
    larger step of the adjacent pair that agrees best. Large steps can jump a
    ReLU kink, small ones drown in roundoff; the stable pair avoids both.
    """
    grads = []
    with torch.no_grad():
        for p, idx in zip(params, indices):
            flat = p.view(-1)
            for i in idx:
                old = flat[i].item()
                est = []
                for eps in steps:
                    flat[i] = old + eps
                    up = f().item()
                    flat[i] = old - eps
                    down = f().item()
                    est.append((up - down) / (2 * eps))
                flat[i] = old
                gaps = [abs(a - b) for a, b in zip(est, est[1:])]
                grads.append(est[int(np.argmin(gaps))])
    return np.array(grads)


class TestWeightedLoss:
    def test_perfect_fit(self):
        t = torch.tensor([[0.1, -0.2], [0.5, 0.3]])
        assert weighted_loss(t, t, [1, 2], [3, 4]).item() == 0.0

    def test_hand_case(self):
        loss = weighted_loss(torch.tensor([[0.0, 0.0]]), [[1.0, 0.0]], [2.0], [1.0])
        assert loss.item() == 1.0

    def test_unit_weights_is_mean_mse(self):
        g = torch.Generator().manual_seed(0)
        p, t = torch.rand(10, 2, generator=g), torch.rand(10, 2, generator=g)
        loss = weighted_loss(p, t, torch.ones(10), torch.ones(10))
        mse = ((p[:, 0] - t[:, 0]) ** 2).mean() / 2 + ((p[:, 1] - t[:, 1]) ** 2).mean() / 2
        torch.testing.assert_close(loss, mse)

    def test_linear_in_weights(self):
        g = torch.Generator().manual_seed(1)
        p = torch.rand(6, 2, generator=g, dtype=torch.float64, requires_grad=True)
        t = torch.rand(6, 2, generator=g, dtype=torch.float64)
        w1, w2 = torch.rand(6, generator=g, dtype=torch.float64), torch.rand(6, generator=g, dtype=torch.float64)
        l1 = weighted_loss(p, t, w1, w2)
        (g1,) = torch.autograd.grad(l1, p)
        l2 = weighted_loss(p, t, 2 * w1, 2 * w2)
        (g2,) = torch.autograd.grad(l2, p)
        torch.testing.assert_close(l2, 2 * l1)
        torch.testing.assert_close(g2, 2 * g1)

    def test_mask(self):
        p = torch.tensor([[0.0, 0.0], [1.0, 1.0]])
        t = torch.tensor([[0.0, 0.0], [-5.0, -5.0]])
        assert weighted_loss(p, t, [1, 0], [1, 0], [True, False]).item() == 0.0
        with pytest.raises(ValidationError):
            weighted_loss(p, t, [1, 1], [1, 1], [False, False])

    def test_non_negative(self):
        g = torch.Generator().manual_seed(2)
        p, t = torch.rand(20, 2, generator=g), torch.rand(20, 2, generator=g)
        assert weighted_loss(p, t, torch.rand(20, generator=g), torch.rand(20, generator=g)) >= 0


class TestCCCLoss:
    def test_perfect(self):
        t = torch.tensor([0.1, 0.4, -0.3])
        assert abs(ccc_loss(t, t).item()) < 1e-7

    def test_anti(self):
        t = torch.tensor([-0.5, 0.0, 0.5], dtype=torch.float64)
        assert abs(ccc_loss(-t, t).item() - 2.0) < 1e-12

    def test_constant_targets(self):
        with pytest.raises(ValidationError):
            ccc_loss(torch.tensor([0.1, 0.2]), torch.tensor([0.3, 0.3]))

    def test_range(self):
        g = torch.Generator().manual_seed(4)
        for _ in range(20):
            v = ccc_loss(torch.rand(8, generator=g), torch.rand(8, generator=g)).item()
            assert 0 <= v <= 2


def _grad_check(loss_fn, seed=0):
    torch.manual_seed(seed)
    model = build_model(TINY_MODEL).double()
    assert count_parameters(TINY_MODEL) < 10_000
    g = torch.Generator().manual_seed(seed)
    frames = torch.rand(2, 4, 1, 16, 16, generator=g, dtype=torch.float64)
    diffs = (torch.rand(2, 3, 2, 16, 16, generator=g, dtype=torch.float64) - 0.5) * 4
    targets = torch.rand(2, 4, 2, generator=g, dtype=torch.float64) * 2 - 1

    def f():
        return loss_fn(model(frames, diffs), targets)

    params = list(model.parameters())
    model.zero_grad()
    f().backward()
    rng = np.random.default_rng(seed)
    indices = [rng.choice(p.numel(), size=min(3, p.numel()), replace=False) for p in params]
    analytic = np.array([p.grad.view(-1)[i].item() for p, idx in zip(params, indices) for i in idx])
    numeric = central_difference_grad(f, params, indices)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = scale > 1e-9
    rel = np.abs(analytic - numeric)[ok] / scale[ok]
    return rel, np.abs(analytic - numeric)[~ok]


def test_gradient_check_weighted_mse():
    w = torch.linspace(0.5, 2.0, 8, dtype=torch.float64).view(2, 4)
    rel, tiny = _grad_check(lambda p, t: weighted_loss(p, t, w, w.flip(1)))
    assert rel.max() < 1e-4
    assert np.all(tiny < 1e-9)


def test_gradient_check_ccc_loss():
    rel, tiny = _grad_check(lambda p, t: ccc_loss(p[..., 0].reshape(-1), t[..., 0].reshape(-1))
                            + ccc_loss(p[..., 1].reshape(-1), t[..., 1].reshape(-1)), seed=1)
    assert rel.max() < 1e-4
    assert np.all(tiny < 1e-9)


def test_window_helpers():
    assert window_starts(10, 4) == [0, 4]
    assert window_starts(3, 4) == [0]
    assert coverage_starts(10, 4) == [0, 4, 6]
    assert coverage_starts(8, 4) == [0, 4]
    assert coverage_starts(2, 4) == [0]


@pytest.fixture(scope="module")
def tiny_videos():
    return generate_synthetic_dataset(SynthConfig(4, 12, 16, 1.0, seed=11))


def test_fit_smoke(tiny_videos, tmp_path):
    split = make_folds([v.video_id for v in tiny_videos], 2, 0)
    res = fit(tiny_videos, split, 0, TINY_MODEL, TINY_TRAIN, out_dir=tmp_path)
    assert len(res.rows) == 2
    assert all(math.isfinite(r.train_loss) for r in res.rows)
    assert all(-1 <= r.val_valence <= 1 for r in res.rows)
    model, payload = load_checkpoint(res.checkpoint)
    assert payload["epoch"] == res.best_epoch
    preds = predict_videos(model, tiny_videos[:1])
    assert preds[tiny_videos[0].video_id].shape == (12, 2)


def test_fit_deterministic(tiny_videos):
    split = make_folds([v.video_id for v in tiny_videos], 2, 0)
    a = fit(tiny_videos, split, 1, TINY_MODEL, TINY_TRAIN)
    b = fit(tiny_videos, split, 1, TINY_MODEL, TINY_TRAIN)
    assert [r.train_loss for r in a.rows] == [r.train_loss for r in b.rows]
    assert [r.val_arousal for r in a.rows] == [r.val_arousal for r in b.rows]


def test_lds_disabled_equals_unit_weights(tiny_videos):
    from dataclasses import replace
    split = make_folds([v.video_id for v in tiny_videos], 2, 0)
    off = fit(tiny_videos, split, 0, TINY_MODEL, replace(TINY_TRAIN, lds_enabled=False, epochs=1))
    unit = (uniform_table(20), uniform_table(20))
    forced = fit(tiny_videos, split, 0, TINY_MODEL, replace(TINY_TRAIN, epochs=1),
                 weights_override=unit)
    assert off.rows[0].train_loss == forced.rows[0].train_loss


def test_weights_come_from_training_fold_only(tiny_videos):
    split = make_folds([v.video_id for v in tiny_videos], 2, 0)
    res = fit(tiny_videos, split, 0, TINY_MODEL, TINY_TRAIN)
    train = [v for v in tiny_videos if v.video_id in split.train_ids(0)]
    labels = np.concatenate([v.labels()[v.annotated_mask()] for v in train])
    tv = lds_weight_table(labels[:, 0], TINY_TRAIN.lds)
    ta = lds_weight_table(labels[:, 1], TINY_TRAIN.lds)
    assert np.array_equal(res.weight_tables[0].weights, tv.weights)
    assert np.array_equal(res.weight_tables[1].weights, ta.weights)


def test_uniform_labels_make_lds_a_no_op():
    from dataclasses import replace
    # every video covers every bin equally, so smoothed density is flat up to edge effects;
    # a delta kernel removes the edge effect entirely
    vids = []
    centers = np.linspace(-0.95, 0.95, 20)
    base = generate_synthetic_dataset(SynthConfig(4, 20, 16, seed=2))
    for v in base:
        anns = [(float(c), float(-c)) for c in centers]
        vids.append(align_frames([f.image_ref for f in v.frames], anns, v.video_id))
    cfg = replace(TINY_TRAIN, lds=LDSParams(20, SmoothingKernel("delta"), 50.0), epochs=2)
    labels = np.concatenate([v.labels() for v in vids])
    tv, ta = lds_tables(labels, cfg)
    assert np.max(np.abs(tv.weights - 1)) < 1e-6 and np.max(np.abs(ta.weights - 1)) < 1e-6
    split = make_folds([v.video_id for v in vids], 2, 0)
    on = fit(vids, split, 0, TINY_MODEL, cfg)
    off = fit(vids, split, 0, TINY_MODEL, replace(cfg, lds_enabled=False))
    for a, b in zip(on.rows, off.rows):
        assert abs(a.train_loss - b.train_loss) < 1e-6


def test_cross_validate_report(tiny_videos, tmp_path):
    from dataclasses import replace
    split = make_folds([v.video_id for v in tiny_videos], 2, 0)
    cfg = replace(TINY_TRAIN, loss_kind="weighted_mse_plus_ccc")
    rep = cross_validate(tiny_videos, split, TINY_MODEL, cfg, out_dir=tmp_path,
                         config={"seed": 0})
    text = rep.to_text()
    rows = [ln for ln in text.splitlines() if ln and ln[0].isdigit()]
    assert len(rows) == 2 * 2 + 2  # (fold, epoch) rows + per-fold summary rows
    for r in rep.rows():
        assert abs(r.val_mean - (r.val_valence + r.val_arousal) / 2) < 1e-12


def test_two_stream_cache(tiny_videos, tmp_path):
    pv = prepare_videos(tiny_videos[:1], TINY_MODEL, cache_dir=tmp_path)[0]
    assert pv.diffs.shape == (12, 2, 16, 16)
    assert torch.all(pv.diffs[0] == 0)
    assert any(tmp_path.iterdir())


@pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(epochs=0), dict(loss_kind="l1"),
                                dict(fold_mode="loo")])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)

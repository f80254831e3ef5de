import copy
import math

import numpy as np
import pytest

from clearsplat.config import RunConfig
from clearsplat.decomposition import compose, compose_naive
from clearsplat.splat import GaussianCloud
from clearsplat.synthcam import TrajectoryConfig, make_dataset
from clearsplat.training import (CSV_HEADER, DensifyStats, TrainingDiverged,
                                 create_state, densify_and_prune, evaluate_split,
                                 gather_params, render_frame,
                                 scene_extent_from_cameras, train,
                                 train_test_split)
from clearsplat.geometry import g3e_pipeline

from helpers import simple_camera


def _tiny_config(**kw):
    base = dict(width=32, height=32, frames=6, iters=25, n_init_points=200,
                omap_size=16, hash_levels=4, warmup_iters=5,
                densify_from=10**6, seed=0)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def tiny_dataset():
    return make_dataset(0, n_frames=6, trajectory=TrajectoryConfig(width=32, height=32))


def test_split_holds_out_one_in_eight():
    train_idx, test_idx = train_test_split(30, 8)
    assert test_idx == [0, 8, 16, 24]
    assert len(train_idx) == 26 and not set(train_idx) & set(test_idx)
    assert sorted(train_idx + test_idx) == list(range(30))


def test_split_degenerate_cases():
    assert train_test_split(5, 0) == (list(range(5)), [])
    # too small to hold anything out: everything trains
    train_idx, test_idx = train_test_split(1, 1)
    assert train_idx == [0] and test_idx == []


def test_scene_extent_from_camera_spread():
    import dataclasses
    cams = [simple_camera(), simple_camera()]
    t = np.zeros((3, 1))
    t[0, 0] = -4.0  # second camera at x=4
    cams[1] = dataclasses.replace(cams[1], world_to_camera=np.hstack([np.eye(3), t]))
    # radius 2 around the midpoint, padded 10%
    assert scene_extent_from_cameras(cams) == pytest.approx(2.2)
    assert scene_extent_from_cameras([simple_camera()]) == 1.0  # floor


def test_initial_cloud_sits_on_scene_surfaces(tiny_dataset):
    cfg = _tiny_config()
    state = create_state(tiny_dataset, cfg, np.random.Generator(np.random.PCG64(0)))
    assert len(state.cloud.means) <= cfg.n_init_points
    d = tiny_dataset.scene.surface_distance(state.cloud.means.astype(np.float64))
    assert d.max() < 1e-5
    assert np.isfinite(state.cloud.opacity_logits).all()


def test_initial_cloud_without_depth_falls_back(tiny_dataset):
    ds = copy.copy(tiny_dataset)
    ds.frames = [copy.copy(f) for f in tiny_dataset.frames]
    for f in ds.frames:
        f.depth = None
    cfg = _tiny_config()
    state = create_state(ds, cfg, np.random.Generator(np.random.PCG64(0)))
    assert len(state.cloud.means) == cfg.n_init_points
    assert np.isfinite(state.cloud.means).all()


@pytest.mark.parametrize("ablation,has_field,gated,has_omap", [
    ("baseline", False, None, False),
    ("nom", True, False, False),
    ("ad", True, False, True),
    ("lim", True, True, True),
])
def test_state_structure_per_ablation(tiny_dataset, ablation, has_field, gated, has_omap):
    cfg = _tiny_config(ablation=ablation)
    state = create_state(tiny_dataset, cfg, np.random.Generator(np.random.PCG64(0)))
    assert (state.field is not None) == has_field
    assert (state.omap is not None) == has_omap
    if has_field:
        assert state.field.gated == gated


def test_render_frame_composition_per_level(tiny_dataset):
    cam = tiny_dataset.frames[0].camera
    rng = lambda: np.random.Generator(np.random.PCG64(0))  # noqa: E731
    base = render_frame(create_state(tiny_dataset, _tiny_config(ablation="baseline"), rng()), cam)
    np.testing.assert_array_equal(base.image, base.transmission)
    assert not base.phi.any() and not base.obstruction.any()

    nom = render_frame(create_state(tiny_dataset, _tiny_config(ablation="nom"), rng()), cam)
    np.testing.assert_allclose(
        nom.image, compose_naive(nom.transmission, nom.obstruction), atol=1e-12)

    lim = render_frame(create_state(tiny_dataset, _tiny_config(ablation="lim"), rng()), cam)
    np.testing.assert_allclose(
        lim.image, compose(lim.transmission, lim.obstruction, lim.phi), atol=1e-12)


def test_warmup_freezes_obstruction_branch(tiny_dataset):
    cfg = _tiny_config(iters=3, warmup_iters=100)
    state = create_state(tiny_dataset, cfg, np.random.Generator(np.random.PCG64(0)))
    before = {k: v.copy() for k, v in gather_params(state).items()}
    state, _ = train(tiny_dataset, cfg, initial_state=state)
    after = gather_params(state)
    np.testing.assert_array_equal(after["hash/table0"], before["hash/table0"])
    np.testing.assert_array_equal(after["phi/logits"], before["phi/logits"])
    np.testing.assert_array_equal(after["decoder/W0"], before["decoder/W0"])
    assert not np.array_equal(after["gaussians/means"], before["gaussians/means"])


def test_training_is_deterministic(tiny_dataset):
    cfg = _tiny_config()
    _, rows_a = train(tiny_dataset, cfg)
    _, rows_b = train(tiny_dataset, cfg)
    assert rows_a == rows_b
    assert rows_a[0] == CSV_HEADER
    assert rows_a[-1].startswith("final,")


def test_csv_total_is_weighted_sum_of_terms(tiny_dataset):
    cfg = _tiny_config(iters=5)
    _, rows = train(tiny_dataset, cfg)
    for row in rows[1:4]:
        _, pho, sky, op, total, _, _ = row.split(",")
        want = float(pho) + cfg.lambda_sky * float(sky) + cfg.lambda_opacity * float(op)
        assert float(total) == pytest.approx(want, rel=1e-5)


def test_divergence_carries_partial_state_and_rows(tiny_dataset, monkeypatch):
    import clearsplat.training as tr
    real = tr.photometric_loss
    calls = {"n": 0}

    def poisoned(img, target):
        calls["n"] += 1
        val, grad = real(img, target)
        if calls["n"] == 3:
            return float("nan"), grad
        return val, grad

    monkeypatch.setattr(tr, "photometric_loss", poisoned)
    cfg = _tiny_config()
    with pytest.raises(TrainingDiverged, match="iteration 3") as info:
        train(tiny_dataset, cfg)
    exc = info.value
    assert exc.state.iteration == 2
    assert exc.rows[0] == CSV_HEADER and len(exc.rows) == 3  # header + 2 finished iters


def test_evaluate_split_scores_against_given_targets(tiny_dataset):
    cfg = _tiny_config()
    state = create_state(tiny_dataset, cfg, np.random.Generator(np.random.PCG64(0)))
    j = 1
    perfect = {j: render_frame(state, tiny_dataset.frames[j].camera).image}
    bd, p = evaluate_split(state, tiny_dataset, [j], targets=perfect)
    assert bd.pho == pytest.approx(0.0, abs=1e-12)
    assert p == 99.0  # capped
    _, p_gt = evaluate_split(state, tiny_dataset, [j])
    assert p_gt < 99.0


def _densify_cloud():
    # row 0: transparent (pruned); row 1: hot + small (cloned); row 2: hot + large (split)
    logit = lambda x: math.log(x / (1 - x))  # noqa: E731
    return GaussianCloud(
        means=np.arange(9, dtype=np.float64).reshape(3, 3),
        log_scales=np.log(np.array([[0.02] * 3, [0.005] * 3, [0.5] * 3])),
        rotations=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (3, 1)),
        opacity_logits=np.array([logit(0.001), logit(0.9), logit(0.9)]),
        color_logits=np.zeros((3, 3)),
    )


def test_densify_prunes_clones_and_splits():
    cloud = _densify_cloud()
    stats = DensifyStats.zeros(3)
    stats.grad_accum[:] = [0.0, 1.0, 1.0]
    stats.count[:] = [0, 1, 1]
    cfg = RunConfig()
    rng = np.random.Generator(np.random.PCG64(0))
    new, sources = densify_and_prune(cloud, stats, 1.0, cfg, rng)
    # survivor B, clone of B, two children of C
    assert len(new.means) == 4
    np.testing.assert_array_equal(sources, [1, -1, -1, -1])
    np.testing.assert_array_equal(new.means[1], cloud.means[1])  # clone copies in place
    want_child_scale = cloud.log_scales[2] - math.log(1.6)
    np.testing.assert_allclose(new.log_scales[2], want_child_scale)
    np.testing.assert_allclose(new.log_scales[3], want_child_scale)
    assert not np.allclose(new.means[2], new.means[3])  # children get distinct offsets


def test_densify_growth_respects_cap():
    cloud = _densify_cloud()
    stats = DensifyStats.zeros(3)
    stats.grad_accum[:] = [0.0, 1.0, 1.0]
    stats.count[:] = [0, 1, 1]
    cfg = RunConfig(max_gaussians=3)
    new, sources = densify_and_prune(cloud, stats, 1.0, cfg,
                                     np.random.Generator(np.random.PCG64(0)))
    # at the cap: prune still runs, growth is suppressed
    assert len(new.means) == 2
    np.testing.assert_array_equal(sources, [1, 2])


def test_geometry_stage_returns_trained_state_and_log(tiny_dataset):
    cfg = _tiny_config(iters=60, g3e_iters=40)
    state1, _ = train(tiny_dataset, cfg)
    state2, rows = g3e_pipeline(state1, tiny_dataset, cfg)
    assert rows[0] == CSV_HEADER
    assert rows[-1].startswith("final,")
    assert state2.iteration == 40
    assert np.isfinite(state2.cloud.means).all()


@pytest.mark.slow
@pytest.mark.parametrize("scene_seed", [0, 1])
def test_loss_trend_is_nonincreasing(scene_seed):
    """Median loss per 100-iteration window is non-increasing over the first
    1k iterations of a benchmark-scale run; at most 5% of window-to-window
    steps may regress.

    Windows are non-overlapping: medians of stride-1 sliding windows jitter
    by ~1% relative as single samples enter and leave, which measures the
    estimator, not the optimization trend.
    """
    dataset = make_dataset(scene_seed, n_frames=30)
    cfg = RunConfig(iters=1000, seed=scene_seed)
    _, rows = train(dataset, cfg)
    totals = np.array([float(r.split(",")[4]) for r in rows[1:]
                       if not r.startswith("final")])
    meds = np.array([np.median(totals[k:k + 100])
                     for k in range(0, len(totals) - 99, 100)])
    violations = np.mean(np.diff(meds) > 0)
    assert violations <= 0.05, f"{violations:.1%} of windows regressed: {meds}"

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from semheight.fusion import (DecayModel, Projection, decay_g, decay_g_bar, fuse_height,
                              fuse_semantic, measurement_log_likelihood, project_frame,
                              run_sequence)
from semheight.grid import new_height_field
from semheight.labellers import CorruptionParams, OracleViewLabeller, boundary_mask
from semheight.metrics import mean_iou
from semheight.render import Intrinsics, NoiseModel, look_pose, make_trajectory, render_view

M4 = DecayModel(1.0, 4)


def points_projection(field, xyz):
    """Projection of explicit world points, one pixel per point."""
    xyz = np.atleast_2d(np.asarray(xyz, float))
    loc = field.locate_points(xyz[:, 0], xyz[:, 1])
    assert loc.valid.all()
    return Projection(xyz, np.arange(len(xyz)), loc.vertex_index, loc.weights, 0)


# ---------------------------------------------------------------- likelihood


def test_decay_examples():
    assert decay_g(2, 2, 0.0, M4) == 1.0
    assert decay_g(1, 2, 0.0, M4) == 0.0
    assert decay_g(2, 2, 1e9, M4) == pytest.approx(0.25, abs=1e-12)
    assert decay_g(0, 2, 1e9, M4) == pytest.approx(0.25, abs=1e-12)
    assert decay_g(1, 1, 1.0, M4) == pytest.approx(0.5259096, abs=1e-7)
    assert decay_g(0, 1, 1.0, M4) == pytest.approx(0.1580301, abs=1e-7)
    with pytest.raises(ValueError):
        decay_g(0, 0, -0.1, M4)


@pytest.mark.parametrize("kw", [dict(alpha=-1.0), dict(num_classes=1), dict(distance="2d")])
def test_model_validation(kw):
    with pytest.raises(ValueError):
        DecayModel(**kw)


def test_g_bar_examples():
    assert decay_g_bar([0, 1, 0, 0], 1, 0.3, M4) == decay_g(1, 1, 0.3, M4)
    assert decay_g_bar([0.25] * 4, 3, 0.7, M4) == pytest.approx(0.25, abs=1e-15)
    m2 = DecayModel(1.0, 2)
    gm = math.exp(-0.5) * 0.5 + 0.5
    assert decay_g_bar([0.7, 0.3], 0, 0.5, m2) == pytest.approx(0.7 * gm + 0.3 * (1 - gm))
    with pytest.raises(ValueError):
        decay_g_bar([0.5, 0.6], 0, 0.1, m2)


@given(st.integers(2, 10), st.floats(0, 50), st.floats(0, 10))
def test_likelihood_sums_to_one(c, alpha, d):
    model = DecayModel(alpha, c)
    for v in range(c):
        assert sum(decay_g(m, v, d, model) for m in range(c)) == pytest.approx(1.0, abs=1e-12)


@given(st.integers(2, 6), st.floats(0, 20), st.integers(0, 1000))
def test_closed_form_matches_class_sum(c, alpha, seed):
    rng = np.random.default_rng(seed)
    model = DecayModel(alpha, c)
    probs = rng.dirichlet(np.ones(c), size=5)
    dist = rng.uniform(0, 0.5, (5, 3))
    ll = measurement_log_likelihood(probs, dist, model)
    for i in range(5):
        for k in range(3):
            for v in range(c):
                assert math.exp(ll[i, k, v]) == pytest.approx(
                    decay_g_bar(probs[i], v, dist[i, k], model), rel=1e-12, abs=1e-300)


# ---------------------------------------------------------------- semantic fusion


def test_uniform_measurement_is_noop(rng):
    f = new_height_field(6, 5, 0.01)
    lp = rng.normal(size=f.log_posteriors.shape)
    f.log_posteriors[:] = lp - np.log(np.exp(lp).sum(-1, keepdims=True))
    before = f.posteriors()
    pts = np.column_stack([rng.uniform(0, 0.05, 200), rng.uniform(0, 0.04, 200), rng.normal(0, 0.01, 200)])
    fuse_semantic(f, points_projection(f, pts), np.full((200, 4), 0.25), M4)
    assert np.max(np.abs(f.posteriors() - before)) <= 1e-12


def test_exact_hit_is_deterministic():
    f = new_height_field(2, 2, 0.01)
    probs = np.array([[0.0, 1.0, 0.0, 0.0]])
    fuse_semantic(f, points_projection(f, [(0.0, 0.0, 0.0)]), probs, M4)
    assert np.allclose(f.posteriors()[0, 0], [0, 1, 0, 0], atol=1e-300)


def brute_force(seq, model, c):
    post = np.ones(c)
    for m, d in seq:
        post *= [decay_g_bar(m, v, d, model) for v in range(c)]
        post /= post.sum()
    return post


@given(st.integers(2, 6), st.integers(1, 20), st.floats(0.1, 200), st.integers(0, 10_000))
def test_bayes_oracle_single_vertex(c, n, alpha, seed):
    rng = np.random.default_rng(seed)
    model = DecayModel(alpha, c, "horizontal")
    f = new_height_field(3, 3, 0.01, num_classes=c)
    seq = []
    for _ in range(n):
        m = rng.dirichlet(np.ones(c))
        x, y = rng.uniform(0.01, 0.02, 2)
        fuse_semantic(f, points_projection(f, [(x, y, 0.0)]), m[None], model)
        seq.append((m, math.hypot(x - 0.01, y - 0.01)))
    assert np.allclose(f.posteriors()[1, 1], brute_force(seq, model, c), atol=1e-9)


def test_order_invariance(rng):
    f1 = new_height_field(5, 5, 0.01)
    f2 = new_height_field(5, 5, 0.01)
    batches = [(rng.uniform(0, 0.04, (30, 3)), rng.dirichlet(np.ones(4), 30)) for _ in range(6)]
    for pts, probs in batches:
        fuse_semantic(f1, points_projection(f1, pts), probs, M4)
    for pts, probs in batches[::-1]:
        fuse_semantic(f2, points_projection(f2, pts), probs, M4)
    assert np.allclose(f1.posteriors(), f2.posteriors(), atol=1e-12)


def test_repeated_evidence_is_monotone():
    f = new_height_field(2, 2, 0.01)
    m = np.array([[0.1, 0.6, 0.2, 0.1]])
    last = 0.25
    for _ in range(10):
        fuse_semantic(f, points_projection(f, [(0.002, 0.001, 0.0)]), m, M4)
        p = f.posteriors()[0, 0, 1]
        assert p > last
        last = p


def test_contradicting_certain_measurements_stay_finite():
    f = new_height_field(2, 2, 0.01)
    for cls in (1, 2):
        probs = np.eye(4)[[cls]]
        fuse_semantic(f, points_projection(f, [(0.0, 0.0, 0.0)]), probs, M4)
    assert np.isfinite(f.log_posteriors).all()
    assert np.allclose(f.posteriors().sum(-1), 1.0)


# ---------------------------------------------------------------- height fusion


def test_height_equal_observations():
    f = new_height_field(3, 3, 0.01)
    for z in (0.02, 0.02):
        fuse_height(f, points_projection(f, [(0.01, 0.01, z)]))
    assert f.heights[1, 1] == 0.02


def test_height_equal_weight_mean():
    f = new_height_field(3, 3, 0.01)
    for z in (0.0, 0.02):
        fuse_height(f, points_projection(f, [(0.01, 0.01, z)]))
    assert f.heights[1, 1] == pytest.approx(0.01, abs=1e-15)
    assert f.fusion_weights[1, 1] == 2.0


@given(st.integers(0, 10_000), st.integers(1, 40))
def test_batch_equals_sequential_update(seed, n):
    rng = np.random.default_rng(seed)
    f = new_height_field(4, 4, 0.01)
    pts = np.column_stack([rng.uniform(0, 0.03, n), rng.uniform(0, 0.03, n), rng.normal(0, 0.02, n)])
    proj = points_projection(f, pts)
    fuse_height(f, proj)
    h = np.zeros(16)
    w = np.zeros(16)
    for p in range(n):
        for v, wt in zip(proj.vertices[p], proj.weights[p]):
            if wt > 0:
                w[v] += wt
                h[v] += wt * (pts[p, 2] - h[v]) / w[v]
    assert np.allclose(f.heights.ravel(), h, atol=1e-12)
    assert np.allclose(f.fusion_weights.ravel(), w, atol=1e-12)


def test_flat_nadir_frame(flat_scene):
    intr = Intrinsics.from_fov(80, 60)
    pose = look_pose((0.256, 0.256), 0.3, 0.0, 0.0)
    frame = render_view(flat_scene, pose, intr)
    f = new_height_field(129, 129, 0.004)
    proj = project_frame(f, frame.depth, pose, intr)
    fuse_height(f, proj)
    assert f.observed.sum() > 1000
    assert np.max(np.abs(f.heights[f.observed])) <= 1e-4


# ---------------------------------------------------------------- sequences


def flat_frames(flat_scene, n):
    intr = Intrinsics.from_fov(40, 30)
    poses = make_trajectory(flat_scene, n, (0.2, 0.3), (0.0, 20.0), rng_seed=4)
    return intr, [render_view(flat_scene, p, intr, index=k) for k, p in enumerate(poses)]


def test_snapshot_cadence(flat_scene):
    intr, frames = flat_frames(flat_scene, 6)
    snaps, log = run_sequence(new_height_field(129, 129, 0.004), frames, NoiseModel(), None, 6,
                              M4, intr)
    assert len(snaps) == 1 and snaps[0].frames == 6
    snaps, log = run_sequence(new_height_field(129, 129, 0.004), frames, NoiseModel(), None, 2,
                              M4, intr)
    assert [s.frames for s in snaps] == [2, 4, 6]
    assert len(log.rows) == 6 and log.labelled_pixels == 0
    assert snaps[0].coverage <= snaps[-1].coverage
    with pytest.raises(ValueError):
        run_sequence(new_height_field(9, 9, 0.1), frames, NoiseModel(), None, 0, M4, intr)
    with pytest.raises(ValueError):
        run_sequence(new_height_field(9, 9, 0.1), [], NoiseModel(), None, 1, M4, intr)


def test_sequence_log_csv(tmp_path, flat_scene):
    intr, frames = flat_frames(flat_scene, 2)
    _, log = run_sequence(new_height_field(129, 129, 0.004), frames, NoiseModel(), None, 1, M4, intr)
    log.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "frame,t_load,t_reconstruct,t_label,t_fuse,pixels_fused,pixels_skipped"
    assert len(lines) == 3


def test_perfect_labeller_full_coverage():
    """Zero noise and a perfect labeller: exact labels away from class boundaries."""
    from semheight.experiments import ExperimentConfig, build_scene, new_field, render_frames

    config = ExperimentConfig(frames=200)
    spec, gt = build_scene(config, 1)
    frames = render_frames(config, spec, 0)
    lab = OracleViewLabeller(CorruptionParams(base_accuracy=1.0, boundary_band=0))
    snaps, _ = run_sequence(new_field(config), frames, NoiseModel(), lab, 200, M4,
                            config.intrinsics())
    assert snaps[-1].coverage >= 0.99
    interior = ~boundary_mask(gt.labels, 1)
    assert mean_iou(snaps[-1].labels, gt.labels, 4, mask=interior).mean >= 0.98

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morel.errors import InvalidInput
from morel.raster import ViewTransform, render, render_backward, render_with_tape
from morel.scene import GaussianAttributes, GaussianSet

from oracles import brute_render


def _random_set(rng, n, size=32, sigma=(1.5, 4.0)):
    ang = rng.uniform(0, np.pi, n)
    s = rng.uniform(*sigma, size=(n, 2))
    r = np.stack([np.stack([np.cos(ang), -np.sin(ang)], -1), np.stack([np.sin(ang), np.cos(ang)], -1)], -2)
    return GaussianSet(
        center=rng.uniform(0, size, (n, 2)),
        cov=np.einsum("nab,nb,ncb->nac", r, s ** 2, r),
        color=rng.uniform(0, 1, (n, 3)),
        opacity=rng.uniform(0.2, 0.95, n),
        depth=rng.normal(size=n),
    )


def _brute(gs, view):
    return brute_render(gs.center, gs.cov, gs.color, gs.opacity, gs.depth,
                        view.linear, view.translation, view.width, view.height)


def test_empty_scene_is_black():
    img = render([], ViewTransform.identity(16, 12))
    assert img.shape == (12, 16, 3) and not img.any()


def test_single_opaque_gaussian_peak():
    g = GaussianAttributes(np.array([16.0, 16.0]), np.eye(2) * 4.0, np.array([0.2, 0.6, 0.9]), 1.0, 0.0)
    img = render([g], ViewTransform.identity(32, 32))
    np.testing.assert_allclose(img[16, 16], g.color, atol=1e-6)
    # radial decay along a row
    row = img[16, 16:26, 1]
    assert np.all(np.diff(row) < 0)


def test_overlapping_pair_matches_brute_force():
    rng = np.random.default_rng(2)
    gs = _random_set(rng, 2, size=20)
    gs.center[:] = [[14.0, 15.0], [17.0, 16.0]]
    gs.depth[:] = [0.3, -0.1]
    view = ViewTransform.identity(32, 32)
    np.testing.assert_allclose(render(gs, view), _brute(gs, view), atol=1e-6)


def test_culling_invariance():
    rng = np.random.default_rng(3)
    gs = _random_set(rng, 30, size=48)
    view = ViewTransform(np.array([[0.9, 0.2], [-0.1, 1.1]]), np.array([3.0, -2.0]), 48, 48)
    assert np.abs(render(gs, view) - _brute(gs, view)).max() < 1e-4


def test_permutation_invariance():
    rng = np.random.default_rng(4)
    gs = _random_set(rng, 25)
    perm = rng.permutation(25)
    shuffled = GaussianSet(gs.center[perm], gs.cov[perm], gs.color[perm], gs.opacity[perm], gs.depth[perm])
    view = ViewTransform.identity(32, 32)
    assert render(gs, view).tobytes() == render(shuffled, view).tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-6, 6), st.floats(-6, 6))
def test_translation_equivariance(seed, vx, vy):
    rng = np.random.default_rng(seed)
    gs = _random_set(rng, 8)
    view = ViewTransform(np.array([[1.0, 0.1], [0.0, 0.9]]), np.array([1.0, 2.0]), 32, 32)
    v = np.array([vx, vy])
    moved = GaussianSet(gs.center + v, gs.cov, gs.color, gs.opacity, gs.depth)
    a = render(gs, view)
    b = render(moved, view.shifted(v))
    assert np.abs(a - b).max() < 1e-10


def test_non_pd_covariance_rejected():
    g = GaussianAttributes(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), np.ones(3), 0.5, 0.0)
    with pytest.raises(InvalidInput):
        render([g], ViewTransform.identity(8, 8))


def test_singular_view_rejected():
    with pytest.raises(InvalidInput):
        ViewTransform(np.array([[1.0, 2.0], [0.5, 1.0]]), np.zeros(2), 8, 8)


def test_zero_image_gradient_gives_zero_grads():
    gs = _random_set(np.random.default_rng(5), 5)
    img, tape = render_with_tape(gs, ViewTransform.identity(32, 32))
    g = render_backward(tape, np.zeros_like(img))
    for arr in (g.center, g.cov, g.color, g.opacity):
        assert not arr.any()


def test_center_pixel_opacity_gradient_positive():
    g = GaussianAttributes(np.array([8.0, 8.0]), np.eye(2) * 3.0, np.array([0.5, 0.5, 0.5]), 0.4, 0.0)
    img, tape = render_with_tape([g], ViewTransform.identity(16, 16))
    up = np.zeros_like(img)
    up[8, 8] = 1.0
    assert render_backward(tape, up).opacity[0] > 0


def test_five_gaussian_fixture_matches_finite_differences():
    rng = np.random.default_rng(6)
    gs = _random_set(rng, 5, size=24)
    view = ViewTransform(np.array([[1.05, 0.1], [-0.1, 0.95]]), np.array([1.0, 0.5]), 24, 24)
    probe = rng.normal(size=(24, 24, 3))
    cutoff = 9.0
    img, tape = render_with_tape(gs, view, cutoff)
    grads = render_backward(tape, probe)
    h = 1e-5
    worst = 0.0
    for name, g in (("center", grads.center), ("color", grads.color), ("opacity", grads.opacity)):
        arr = getattr(gs, name).reshape(-1)
        for i in range(arr.size):
            keep = arr[i]
            arr[i] = keep + h
            up = np.sum(probe * render(gs, view, cutoff))
            arr[i] = keep - h
            down = np.sum(probe * render(gs, view, cutoff))
            arr[i] = keep
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(g.reshape(-1)[i] - fd) / (abs(fd) + 1e-8))
    # covariance: perturb symmetric pairs together
    for k in range(5):
        for a, b in ((0, 0), (0, 1), (1, 1)):
            e = np.zeros((2, 2))
            e[a, b] = e[b, a] = 1.0
            keep = gs.cov[k].copy()
            gs.cov[k] = keep + h * e
            up = np.sum(probe * render(gs, view, cutoff))
            gs.cov[k] = keep - h * e
            down = np.sum(probe * render(gs, view, cutoff))
            gs.cov[k] = keep
            fd = (up - down) / (2 * h)
            an = np.sum(grads.cov[k] * e)
            worst = max(worst, abs(an - fd) / (abs(fd) + 1e-8))
    assert worst < 1e-4

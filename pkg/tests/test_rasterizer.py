import numpy as np
import pytest

from hiersplat.gaussian_map import GaussianMap
from hiersplat.geometry import Intrinsics, RigidPose
from hiersplat.rasterizer import (
    ChannelGradients,
    RenderOptions,
    Splat2D,
    alpha_at,
    project_splats,
    render,
    render_backward,
    splats_for,
)

from conftest import random_map, random_pose

EXACT = RenderOptions(cutoff_sigmas=None, early_exit_transmittance=0.0)


def brute_force(gmap, pose, K, near=0.01):
    """Per-pixel compositor: sort by depth, accumulate with no cutoff."""
    p = project_splats(gmap, pose, K, near)
    H, W = K.height, K.width
    n_sem = gmap.sem.shape[1]
    C = np.zeros((H, W, 3))
    D = np.zeros((H, W))
    S = np.zeros((H, W))
    HM = np.zeros((H, W, n_sem))
    for py in range(H):
        for px in range(W):
            t = 1.0
            for i in p.order:
                d2 = (px - p.u[i]) ** 2 + (py - p.v[i]) ** 2
                a = min(gmap.opacity[i] * np.exp(-d2 / (2 * p.sigma[i] ** 2)), 0.999)
                w = a * t
                C[py, px] += w * gmap.color[i]
                D[py, px] += w * p.z[i]
                S[py, px] += w
                HM[py, px] += w * gmap.sem[i]
                t *= 1.0 - a
    return C, D, S, HM


def linear_probe_loss(gmap, pose, K, up, options):
    out = render(gmap, pose, K, options)
    total = 0.0
    if up.color is not None:
        total += float((up.color * out.color).sum())
    if up.depth is not None:
        total += float((up.depth * out.depth).sum())
    if up.silhouette is not None:
        total += float((up.silhouette * out.silhouette).sum())
    if up.sem is not None:
        total += float((up.sem * out.sem).sum())
    return total


def fd_check_gradients(gmap, pose, K, up, options, eps=1e-4, rtol=1e-3, atol=1e-6):
    """Central finite differences for every parameter against analytic."""
    an = render_backward(gmap, pose, K, up, options)
    worst = 0.0

    def compare(fd, ana):
        nonlocal worst
        err = abs(fd - ana)
        if err > atol:
            worst = max(worst, err / max(abs(fd), abs(ana)))

    for arr, ga in [
        (gmap.mu, an.mu),
        (gmap.radius, an.radius),
        (gmap.opacity, an.opacity),
        (gmap.color, an.color),
        (gmap.sem, an.sem),
    ]:
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + eps
            lp = linear_probe_loss(gmap, pose, K, up, options)
            arr[idx] = old - eps
            lm = linear_probe_loss(gmap, pose, K, up, options)
            arr[idx] = old
            compare((lp - lm) / (2 * eps), ga[idx])
    for k in range(6):
        e = np.zeros(6)
        e[k] = eps
        lp = linear_probe_loss(gmap, pose.retract(e), K, up, options)
        lm = linear_probe_loss(gmap, pose.retract(-e), K, up, options)
        compare((lp - lm) / (2 * eps), an.pose[k])
    assert worst < rtol, f"worst relative gradient error {worst}"


class TestAlphaAt:
    def test_center_equals_opacity(self):
        s = Splat2D(np.array([3.0, 3.0]), 2.0, 1.0, 0)
        assert alpha_at(s, 0.8, np.array([3.0, 3.0])) == pytest.approx(0.8)

    def test_one_radius_falloff(self):
        s = Splat2D(np.array([0.0, 0.0]), 2.0, 1.0, 0)
        assert alpha_at(s, 1.0, np.array([2.0, 0.0])) == pytest.approx(np.exp(-0.5))

    def test_matches_formula(self, rng):
        for _ in range(50):
            center = rng.uniform(0, 8, 2)
            radius = rng.uniform(0.3, 3.0)
            o = rng.uniform(0, 1)
            pixel = rng.uniform(0, 8, 2)
            s = Splat2D(center, radius, 1.0, 0)
            d2 = ((pixel - center) ** 2).sum()
            assert alpha_at(s, o, pixel) == pytest.approx(
                min(o * np.exp(-d2 / (2 * radius**2)), 0.999)
            )


class TestRenderForward:
    def test_empty_map(self, small_intrinsics):
        out = render(GaussianMap(4), RigidPose.identity(), small_intrinsics)
        assert out.silhouette.sum() == 0
        assert out.color.sum() == 0
        assert (out.transmittance == 1.0).all()

    def test_single_splat_single_term(self, small_intrinsics):
        g = GaussianMap(2)
        g.append(np.array([0.0, 0.0, 2.0]), 0.05, 0.7, np.array([1.0, 0, 0]),
                 np.array([2.0, -1.0]), 0)
        out = render(g, RigidPose.identity(), small_intrinsics, EXACT)
        py, px = 3, 3  # nearest pixel to principal point (3.5, 3.5)
        d2 = 0.5
        sigma = 20.0 * 0.05 / 2.0
        a = 0.7 * np.exp(-d2 / (2 * sigma**2))
        assert out.silhouette[py, px] == pytest.approx(a)
        assert out.depth[py, px] == pytest.approx(2.0 * a)
        assert out.color[py, px, 0] == pytest.approx(a)
        assert out.sem[py, px, 0] == pytest.approx(2.0 * a)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_brute_force(self, seed, small_intrinsics):
        rng = np.random.default_rng(seed)
        g = random_map(rng, 30, sem_width=3)
        pose = RigidPose.identity()
        out = render(g, pose, small_intrinsics, EXACT)
        C, D, S, HM = brute_force(g, pose, small_intrinsics)
        assert np.abs(out.color - C).max() < 1e-10
        assert np.abs(out.depth - D).max() < 1e-10
        assert np.abs(out.silhouette - S).max() < 1e-10
        assert np.abs(out.sem - HM).max() < 1e-10

    def test_silhouette_identity(self, rng, small_intrinsics):
        # S == 1 - prod(1 - alpha_i) pixel-wise
        g = random_map(rng, 25)
        out = render(g, RigidPose.identity(), small_intrinsics, EXACT)
        assert np.allclose(out.silhouette, 1.0 - out.transmittance, atol=1e-6)

    def test_transmittance_nonincreasing_with_more_splats(self, rng, small_intrinsics):
        g = random_map(rng, 20)
        full = render(g, RigidPose.identity(), small_intrinsics, EXACT)
        g2 = GaussianMap(g.sem_width)
        g2.mu, g2.radius, g2.opacity = g.mu[:10], g.radius[:10], g.opacity[:10]
        g2.color, g2.sem, g2.birth_frame = g.color[:10], g.sem[:10], g.birth_frame[:10]
        half = render(g2, RigidPose.identity(), small_intrinsics, EXACT)
        assert (full.transmittance <= half.transmittance + 1e-12).all()

    def test_storage_order_invariance(self, rng, small_intrinsics):
        g = random_map(rng, 40)
        out1 = render(g, RigidPose.identity(), small_intrinsics, EXACT)
        perm = rng.permutation(40)
        g2 = GaussianMap(g.sem_width)
        g2.mu, g2.radius, g2.opacity = g.mu[perm], g.radius[perm], g.opacity[perm]
        g2.color, g2.sem, g2.birth_frame = g.color[perm], g.sem[perm], g.birth_frame[perm]
        out2 = render(g2, RigidPose.identity(), small_intrinsics, EXACT)
        assert np.abs(out1.color - out2.color).max() < 1e-6
        assert np.abs(out1.depth - out2.depth).max() < 1e-6

    def test_opaque_front_parallel_depth_is_z_times_s(self, small_intrinsics):
        g = GaussianMap(1)
        g.append(np.array([0.0, 0.0, 3.0]), 1.5, 1.0, np.array([1.0, 1, 1]),
                 np.array([0.0]), 0)
        out = render(g, RigidPose.identity(), small_intrinsics, EXACT)
        covered = out.silhouette > 0.5
        assert covered.any()
        assert np.allclose(out.depth[covered], 3.0 * out.silhouette[covered], atol=1e-12)

    def test_band_split_equals_full(self, rng, small_intrinsics):
        g = random_map(rng, 30)
        full = render(g, RigidPose.identity(), small_intrinsics, EXACT)
        banded = render(
            g, RigidPose.identity(), small_intrinsics,
            RenderOptions(cutoff_sigmas=None, early_exit_transmittance=0.0, row_bands=4),
        )
        assert np.abs(full.color - banded.color).max() < 1e-5
        assert np.abs(full.depth - banded.depth).max() < 1e-5

    def test_cutoff_and_early_exit_are_small_perturbations(self, rng, small_intrinsics):
        g = random_map(rng, 30)
        g.opacity[:] = np.minimum(g.opacity + 0.3, 0.95)
        exact = render(g, RigidPose.identity(), small_intrinsics, EXACT)
        fast = render(g, RigidPose.identity(), small_intrinsics, RenderOptions())
        assert np.abs(exact.color - fast.color).max() < 0.05
        assert np.abs(exact.silhouette - fast.silhouette).max() < 0.05

    def test_splats_for_sorted_by_depth(self, rng, small_intrinsics):
        g = random_map(rng, 15)
        splats = splats_for(g, RigidPose.identity(), small_intrinsics)
        depths = [s.depth for s in splats]
        assert depths == sorted(depths)
        for s in splats:
            assert s.radius_px == pytest.approx(
                small_intrinsics.f_mean * g.radius[s.index] / s.depth
            )


class TestRenderBackward:
    def test_zero_upstream_zero_gradients(self, rng, small_intrinsics):
        g = random_map(rng, 5)
        grads = render_backward(
            g, RigidPose.identity(), small_intrinsics, ChannelGradients(), EXACT
        )
        for arr in (grads.mu, grads.radius, grads.opacity, grads.color, grads.sem, grads.pose):
            assert np.abs(arr).max() == 0.0

    def test_color_gradient_is_weight_pattern(self, small_intrinsics):
        # single splat, single-pixel probe: dL/dc = alpha * T = alpha
        g = GaussianMap(1)
        g.append(np.array([0.0, 0.0, 2.0]), 0.2, 0.6, np.array([0.2, 0.4, 0.6]),
                 np.array([0.0]), 0)
        up_c = np.zeros((8, 8, 3))
        up_c[3, 3, 1] = 1.0
        grads = render_backward(
            g, RigidPose.identity(), small_intrinsics, ChannelGradients(color=up_c), EXACT
        )
        sigma = small_intrinsics.f_mean * 0.2 / 2.0
        a = 0.6 * np.exp(-0.5 / (2 * sigma**2))
        assert grads.color[0] == pytest.approx([0.0, a, 0.0])

    @pytest.mark.parametrize("seed", range(6))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed + 100)
        K = Intrinsics(20.0, 22.0, 3.5, 3.6, 8, 8)
        g = random_map(rng, 5, sem_width=3)
        pose = random_pose(rng, translation_scale=0.05)
        g.mu = pose.transform(g.mu)  # keep splats in front of the camera
        up = ChannelGradients(
            color=rng.normal(0, 1, (8, 8, 3)),
            depth=rng.normal(0, 1, (8, 8)),
            silhouette=rng.normal(0, 1, (8, 8)),
            sem=rng.normal(0, 1, (8, 8, 3)),
        )
        fd_check_gradients(g, pose, K, up, EXACT)

    def test_behind_camera_splats_get_no_gradient(self, rng, small_intrinsics):
        g = random_map(rng, 4)
        g.mu[2, 2] = -1.0  # behind
        up = ChannelGradients(silhouette=np.ones((8, 8)))
        grads = render_backward(g, RigidPose.identity(), small_intrinsics, up, EXACT)
        assert np.abs(grads.mu[2]).max() == 0.0
        assert grads.opacity[2] == 0.0

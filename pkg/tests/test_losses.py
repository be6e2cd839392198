import numpy as np
import pytest

from hiersplat.datasets import Frame
from hiersplat.errors import EmptyMask, LayoutMismatch, ShapeMismatch
from hiersplat.gaussian_map import GaussianMap
from hiersplat.geometry import Intrinsics, RigidPose
from hiersplat.losses import (
    DecoderGrads,
    InterLevelDecoder,
    SemanticLossWeights,
    TrackMapWeights,
    color_loss_prime,
    init_decoder,
    inter_level_loss,
    intra_level_loss,
    mapping_loss,
    semantic_loss,
    semantic_targets,
    ssim_index,
    ssim_with_grad,
    tracking_loss,
)
from hiersplat.rasterizer import ChannelGradients, RenderOptions, render, render_backward
from hiersplat.semantic_tree import binary_layout, encode_one_hot, one_hot_layout, path_of

from conftest import random_map

EXACT = RenderOptions(cutoff_sigmas=None, early_exit_transmittance=0.0)


def fd_scalar(fn, arr, indices, eps=1e-6):
    out = {}
    for idx in indices:
        old = arr[idx]
        arr[idx] = old + eps
        vp = fn()
        arr[idx] = old - eps
        vm = fn()
        arr[idx] = old
        out[idx] = (vp - vm) / (2 * eps)
    return out


class TestSsim:
    def test_identical_images_give_one(self, rng):
        x = rng.uniform(0, 1, (16, 16, 3))
        assert ssim_index(x, x.copy()) == pytest.approx(1.0, abs=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            ssim_index(np.zeros((4, 4)), np.zeros((5, 5)))

    def test_gradient_matches_fd(self, rng):
        x = rng.uniform(0, 1, (12, 12, 3))
        y = rng.uniform(0, 1, (12, 12, 3))
        _, grad = ssim_with_grad(x, y)
        fd = fd_scalar(lambda: ssim_index(x, y), x, [(2, 3, 0), (8, 8, 2), (0, 11, 1)])
        for idx, val in fd.items():
            assert grad[idx] == pytest.approx(val, rel=1e-4, abs=1e-9)

    def test_gradient_zero_at_identity(self, rng):
        x = rng.uniform(0.2, 0.8, (10, 10))
        _, grad = ssim_with_grad(x, x.copy())
        assert np.abs(grad).max() < 1e-12

    def test_independent_windowed_reference(self, rng):
        # direct per-pixel SSIM from explicitly filtered statistics
        from scipy.ndimage import convolve1d

        x = rng.uniform(0, 1, (14, 14))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        half = 5
        taps = np.exp(-((np.arange(11) - half) ** 2) / (2 * 1.5**2))
        taps /= taps.sum()

        def filt(a):
            return convolve1d(convolve1d(a, taps, axis=0, mode="constant"), taps, axis=1, mode="constant")

        mx, my = filt(x), filt(y)
        vx = filt(x * x) - mx * mx
        vy = filt(y * y) - my * my
        cxy = filt(x * y) - mx * my
        c1, c2 = 0.01**2, 0.03**2
        ref = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
        assert ssim_index(x, y) == pytest.approx(float(ref.mean()), abs=1e-12)


class TestColorLossPrime:
    def test_zero_at_identity(self, rng):
        x = rng.uniform(0, 1, (12, 12, 3))
        val, grad = color_loss_prime(x, x.copy())
        assert val == pytest.approx(0.0, abs=1e-9)

    def test_pure_l1_when_lambda_zero(self, rng):
        x = rng.uniform(0, 1, (8, 8, 3))
        val, _ = color_loss_prime(x + 0.1, x, lambda_ssim=0.0)
        assert val == pytest.approx(0.1, abs=1e-9)

    def test_gradient_matches_fd(self, rng):
        x = rng.uniform(0.1, 0.9, (10, 10, 3))
        y = rng.uniform(0.1, 0.9, (10, 10, 3))
        val, grad = color_loss_prime(x, y)
        fd = fd_scalar(lambda: color_loss_prime(x, y)[0], x, [(1, 1, 0), (5, 7, 2)])
        for idx, v in fd.items():
            assert grad[idx] == pytest.approx(v, rel=1e-4, abs=1e-9)


class TestTrackingLoss:
    def _rendered(self, rng, H=10, W=10):
        from hiersplat.rasterizer import RenderedMaps

        return RenderedMaps(
            color=rng.uniform(0, 1, (H, W, 3)),
            depth=rng.uniform(1, 3, (H, W)),
            silhouette=np.ones((H, W)),
            sem=np.zeros((H, W, 0)),
            transmittance=np.zeros((H, W)),
        )

    def test_zero_at_perfect_render(self, rng):
        r = self._rendered(rng)
        frame = Frame(0, r.color.copy(), r.depth.copy(), None)
        val, *_ = tracking_loss(r, frame, TrackMapWeights(normalize_depth=False))
        assert val == pytest.approx(0.0, abs=1e-12)

    def test_empty_mask_raises(self, rng):
        r = self._rendered(rng)
        r.silhouette[:] = 0.0
        frame = Frame(0, r.color, r.depth, None)
        with pytest.raises(EmptyMask):
            tracking_loss(r, frame, TrackMapWeights())

    def test_hand_computed_masked_sum(self, rng):
        r = self._rendered(rng)
        r.silhouette[:5] = 0.5  # excluded rows
        depth_gt = r.depth + rng.normal(0, 0.05, r.depth.shape)
        depth_gt[:, 0] = 0.0  # invalid column
        color_gt = np.clip(r.color + rng.normal(0, 0.05, r.color.shape), 0, 1)
        frame = Frame(0, color_gt, depth_gt, None)
        w = TrackMapWeights(normalize_depth=False)
        val, gc, gd, gs = tracking_loss(r, frame, w)
        mask = (r.silhouette > w.delta) & (depth_gt > 0)
        expected = w.w1 * np.abs(r.depth - depth_gt)[mask].mean() + w.w2 * np.abs(
            r.color - color_gt
        )[mask].mean()
        assert val == pytest.approx(expected, rel=1e-12)
        assert gs.sum() == 0.0  # raw-depth mode has no silhouette gradient

    def test_normalized_depth_uses_ratio(self, rng):
        r = self._rendered(rng)
        r.silhouette[:] = 0.995
        frame = Frame(0, r.color.copy(), (r.depth / 0.995).copy(), None)
        val, *_ = tracking_loss(r, frame, TrackMapWeights(normalize_depth=True))
        assert val == pytest.approx(0.0, abs=1e-12)


def _exact_semantic_map(tree, layout, labels, magnitude=10.0):
    H, W = labels.shape
    h_map = np.zeros((H, W, layout.total_width))
    for cid in np.unique(labels):
        if cid not in tree.leaf_classes:
            continue
        vec = encode_one_hot(layout, path_of(tree, cid)) * magnitude
        h_map[labels == cid] = vec
    return h_map


class TestIntraLevelLoss:
    def test_saturated_correct_prediction(self, toy_tree, rng):
        layout = one_hot_layout(toy_tree)
        labels = rng.integers(1, 17, (6, 6)).astype(np.int32)
        targets = semantic_targets(labels, toy_tree)
        h_map = _exact_semantic_map(toy_tree, layout, labels)
        val, _ = intra_level_loss(h_map, targets, layout, "onehot")
        assert val < 1e-3

    def test_uniform_logits_value(self, toy_tree, rng):
        layout = one_hot_layout(toy_tree)
        labels = rng.integers(1, 17, (5, 5)).astype(np.int32)
        targets = semantic_targets(labels, toy_tree)
        val, _ = intra_level_loss(np.zeros((5, 5, layout.total_width)), targets, layout, "onehot")
        assert val == pytest.approx(sum(np.log(n) for n in layout.per_level_width), abs=1e-6)

    def test_reference_per_pixel_oracle(self, toy_tree, rng):
        # scalar re-implementation, level by level, pixel by pixel
        layout = one_hot_layout(toy_tree)
        labels = rng.integers(0, 18, (4, 4)).astype(np.int32)
        targets = semantic_targets(labels, toy_tree)
        h_map = rng.normal(0, 1, (4, 4, layout.total_width))
        val, _ = intra_level_loss(h_map, targets, layout, "onehot")
        expected = 0.0
        labeled = [(i, j) for i in range(4) for j in range(4) if 1 <= labels[i, j] <= 16]
        for l in range(toy_tree.num_levels):
            acc = 0.0
            for (i, j) in labeled:
                sib = path_of(toy_tree, int(labels[i, j])).node_index_per_level[l]
                sl = h_map[i, j, layout.offsets[l] : layout.offsets[l] + layout.per_level_width[l]]
                p = np.exp(sl - sl.max())
                p /= p.sum()
                acc += -np.log(p[sib])
            expected += acc / len(labeled)
        assert val == pytest.approx(expected, rel=1e-9)

    def test_binary_mode_bce_oracle(self, toy_tree, rng):
        layout = binary_layout(toy_tree)
        labels = rng.integers(1, 17, (4, 4)).astype(np.int32)
        targets = semantic_targets(labels, toy_tree)
        h_map = rng.normal(0, 1, (4, 4, layout.total_width))
        val, _ = intra_level_loss(h_map, targets, layout, "binary")
        expected = 0.0
        for l in range(toy_tree.num_levels):
            k = layout.per_level_bits[l]
            acc = 0.0
            for i in range(4):
                for j in range(4):
                    sib = path_of(toy_tree, int(labels[i, j])).node_index_per_level[l]
                    for b in range(k):
                        t = (sib >> b) & 1
                        x = h_map[i, j, layout.offsets[l] + b]
                        p = 1 / (1 + np.exp(-x))
                        acc += -(t * np.log(p) + (1 - t) * np.log(1 - p))
            expected += acc / 16
        assert val == pytest.approx(expected, rel=1e-6)

    def test_gradients_match_fd(self, toy_tree, rng):
        for mode, layout in (("onehot", one_hot_layout(toy_tree)), ("binary", binary_layout(toy_tree))):
            labels = rng.integers(1, 17, (4, 4)).astype(np.int32)
            targets = semantic_targets(labels, toy_tree)
            h_map = rng.normal(0, 1, (4, 4, layout.total_width))
            _, grad = intra_level_loss(h_map, targets, layout, mode)
            fd = fd_scalar(
                lambda: intra_level_loss(h_map, targets, layout, mode)[0],
                h_map,
                [(0, 0, 0), (2, 3, layout.total_width - 1), (1, 1, 2)],
            )
            for idx, v in fd.items():
                assert grad[idx] == pytest.approx(v, rel=1e-5, abs=1e-10)

    def test_layout_mismatch(self, toy_tree, rng):
        layout = one_hot_layout(toy_tree)
        targets = semantic_targets(np.ones((2, 2), dtype=np.int32), toy_tree)
        with pytest.raises(LayoutMismatch):
            intra_level_loss(np.zeros((2, 2, 3)), targets, layout, "onehot")


class TestInterLevelLoss:
    def test_identity_lift_on_flat_layout(self, rng):
        from hiersplat.semantic_tree import flat_tree

        tree = flat_tree({i: f"c{i}" for i in range(1, 7)})
        layout = one_hot_layout(tree)
        labels = rng.integers(1, 7, (5, 5)).astype(np.int32)
        targets = semantic_targets(labels, tree)
        h_map = _exact_semantic_map(tree, layout, labels)
        n = layout.total_width
        decoder = InterLevelDecoder(np.eye(n), np.zeros(n), np.eye(n), np.zeros(n))
        val, _, _ = inter_level_loss(h_map, decoder, targets)
        assert val < 1e-3

    def test_uniform_output_value(self, toy_tree, rng):
        layout = one_hot_layout(toy_tree)
        labels = rng.integers(1, 17, (4, 4)).astype(np.int32)
        targets = semantic_targets(labels, toy_tree)
        n_mid = 8
        decoder = InterLevelDecoder(
            np.zeros((n_mid, layout.total_width)), np.zeros(n_mid),
            np.zeros((16, n_mid)), np.zeros(16),
        )
        val, _, _ = inter_level_loss(rng.normal(size=(4, 4, layout.total_width)), decoder, targets)
        assert val == pytest.approx(np.log(16), abs=1e-9)

    def test_gradients_match_fd(self, toy_tree, rng):
        layout = one_hot_layout(toy_tree)
        labels = rng.integers(1, 17, (4, 4)).astype(np.int32)
        targets = semantic_targets(labels, toy_tree)
        h_map = rng.normal(0, 1, (4, 4, layout.total_width))
        decoder = init_decoder(layout.total_width, 16, seed=2, n_mid=12)
        val, grad_h, dgrads = inter_level_loss(h_map, decoder, targets)

        def value():
            return inter_level_loss(h_map, decoder, targets)[0]

        for idx, v in fd_scalar(value, h_map, [(0, 0, 0), (3, 3, 5)]).items():
            assert grad_h[idx] == pytest.approx(v, rel=1e-5, abs=1e-10)
        for param, grad in zip(decoder.parameters(), dgrads.parameters()):
            idx = (0,) * param.ndim
            fd = fd_scalar(value, param, [idx])[idx]
            assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-10)

    def test_finite_for_any_input(self, toy_tree, rng):
        layout = one_hot_layout(toy_tree)
        labels = rng.integers(1, 17, (3, 3)).astype(np.int32)
        targets = semantic_targets(labels, toy_tree)
        decoder = init_decoder(layout.total_width, 16, seed=0)
        h_map = rng.normal(0, 1, (3, 3, layout.total_width)) * 1e4
        val, grad, _ = inter_level_loss(h_map, decoder, targets)
        assert np.isfinite(val)
        assert np.isfinite(grad).all()


class TestSemanticLossSchedule:
    def test_inter_term_absent_before_eta(self, toy_tree, rng):
        assert SemanticLossWeights().at(0) == (1.0, 0.0)
        assert SemanticLossWeights().at(14) == (1.0, 0.0)

    def test_switches_exactly_at_eta(self):
        w = SemanticLossWeights()
        assert w.eta == 15
        assert w.at(15) == (1.0, 5.0)

    def test_zero_weights_zero_loss(self, toy_tree, rng):
        layout = one_hot_layout(toy_tree)
        labels = rng.integers(1, 17, (3, 3)).astype(np.int32)
        targets = semantic_targets(labels, toy_tree)
        decoder = init_decoder(layout.total_width, 16, seed=0)
        w = SemanticLossWeights(omega1=0.0, omega2=0.0)
        val, grad, _ = semantic_loss(
            rng.normal(size=(3, 3, layout.total_width)), decoder, targets, layout,
            "onehot", w, iteration=20,
        )
        assert val == 0.0
        assert np.abs(grad).max() == 0.0

    def test_monotone_in_weights(self, toy_tree, rng):
        layout = one_hot_layout(toy_tree)
        labels = rng.integers(1, 17, (3, 3)).astype(np.int32)
        targets = semantic_targets(labels, toy_tree)
        decoder = init_decoder(layout.total_width, 16, seed=0)
        h = rng.normal(size=(3, 3, layout.total_width))
        vals = [
            semantic_loss(h, decoder, targets, layout, "onehot",
                          SemanticLossWeights(omega1=o1, omega2=o2), 20)[0]
            for (o1, o2) in [(0.5, 1.0), (1.0, 1.0), (1.0, 3.0)]
        ]
        assert vals[0] <= vals[1] <= vals[2]


class TestMappingLoss:
    def _setup(self, rng, toy_tree):
        K = Intrinsics(20.0, 20.0, 3.5, 3.5, 8, 8)
        layout = one_hot_layout(toy_tree)
        g = random_map(rng, 6, sem_width=layout.total_width)
        g.opacity[:] = 0.9
        pose = RigidPose.identity()
        rendered = render(g, pose, K, EXACT)
        labels = rng.integers(1, 17, (8, 8)).astype(np.int32)
        frame = Frame(0, rng.uniform(0, 1, (8, 8, 3)), rng.uniform(1, 3, (8, 8)), labels)
        targets = semantic_targets(labels, toy_tree)
        decoder = init_decoder(layout.total_width, 16, seed=1, n_mid=12)
        return K, layout, g, pose, rendered, frame, targets, decoder

    def test_perfect_render_near_zero(self, toy_tree, rng):
        K = Intrinsics(20.0, 20.0, 3.5, 3.5, 8, 8)
        layout = one_hot_layout(toy_tree)
        labels = rng.integers(1, 17, (8, 8)).astype(np.int32)
        from hiersplat.rasterizer import RenderedMaps

        h_map = _exact_semantic_map(toy_tree, layout, labels)
        color = rng.uniform(0, 1, (8, 8, 3))
        depth = rng.uniform(1, 3, (8, 8))
        rendered = RenderedMaps(color.copy(), depth.copy(), np.ones((8, 8)),
                                h_map, np.zeros((8, 8)))
        frame = Frame(0, color, depth, labels)
        targets = semantic_targets(labels, toy_tree)
        n = layout.total_width
        decoder = init_decoder(n, 16, seed=0)
        res = mapping_loss(
            rendered, frame, TrackMapWeights(normalize_depth=False),
            decoder=decoder, targets=targets, layout=layout, mode="onehot",
            iteration=0,
        )
        # depth and color vanish; the intra term saturates near zero
        assert res.value < 1e-3

    def test_w5_zero_reduces_to_geometric(self, toy_tree, rng):
        K, layout, g, pose, rendered, frame, targets, decoder = self._setup(rng, toy_tree)
        w = TrackMapWeights(w5=0.0)
        res = mapping_loss(rendered, frame, w, decoder=decoder, targets=targets,
                           layout=layout, mode="onehot")
        assert res.grad_sem is None
        ld, gd, gs, _ = __import__("hiersplat.losses", fromlist=["depth_l1_term"]).depth_l1_term(
            rendered, frame.depth, res.depth_mask, True
        )
        lc, _ = color_loss_prime(rendered.color, frame.color, w.lambda_ssim)
        assert res.value == pytest.approx(w.w3 * ld + w.w4 * lc, rel=1e-12)

    def test_termwise_oracle(self, toy_tree, rng):
        K, layout, g, pose, rendered, frame, targets, decoder = self._setup(rng, toy_tree)
        w = TrackMapWeights()
        res = mapping_loss(rendered, frame, w, decoder=decoder, targets=targets,
                           layout=layout, mode="onehot", iteration=20)
        from hiersplat.losses import depth_l1_term

        ld, *_ = depth_l1_term(rendered, frame.depth, res.depth_mask, True)
        lc, _ = color_loss_prime(rendered.color, frame.color, w.lambda_ssim)
        ls, _, _ = semantic_loss(rendered.sem, decoder, targets, layout, "onehot",
                                 SemanticLossWeights(), 20)
        assert res.value == pytest.approx(w.w3 * ld + w.w4 * lc + w.w5 * ls, rel=1e-10)

    def test_full_gradient_chain_matches_fd(self, toy_tree, rng):
        # mapping loss through the rasterizer: gradients for a primitive's
        # fields and the decoder against central finite differences
        K, layout, g, pose, rendered, frame, targets, decoder = self._setup(rng, toy_tree)
        w = TrackMapWeights()

        def total():
            out = render(g, pose, K, EXACT)
            return mapping_loss(out, frame, w, decoder=decoder, targets=targets,
                                layout=layout, mode="onehot", iteration=20).value

        res = mapping_loss(render(g, pose, K, EXACT), frame, w, decoder=decoder,
                           targets=targets, layout=layout, mode="onehot", iteration=20)
        grads = render_backward(
            g, pose, K,
            ChannelGradients(color=res.grad_color, depth=res.grad_depth,
                             silhouette=res.grad_silhouette, sem=res.grad_sem),
            EXACT,
        )
        eps = 1e-5
        for arr, ga, name in [(g.mu, grads.mu, "mu"), (g.color, grads.color, "color"),
                              (g.opacity, grads.opacity, "opacity"), (g.sem, grads.sem, "sem")]:
            it = np.nditer(arr, flags=["multi_index"])
            checked = 0
            for _ in it:
                idx = it.multi_index
                if checked >= 4:
                    break
                checked += 1
                old = arr[idx]
                arr[idx] = old + eps
                vp = total()
                arr[idx] = old - eps
                vm = total()
                arr[idx] = old
                fd = (vp - vm) / (2 * eps)
                if abs(fd) > 1e-6 or abs(ga[idx]) > 1e-6:
                    assert ga[idx] == pytest.approx(fd, rel=2e-3, abs=1e-6), name
        # decoder weights too
        for param, grad in zip(decoder.parameters(), res.decoder_grads.parameters()):
            idx = (0,) * param.ndim
            old = param[idx]
            param[idx] = old + eps
            vp = total()
            param[idx] = old - eps
            vm = total()
            param[idx] = old
            fd = (vp - vm) / (2 * eps)
            assert grad[idx] == pytest.approx(fd, rel=2e-3, abs=1e-8)

import numpy as np
import pytest

from woundseg.errors import ShapeError
from woundseg.explain import (
    OverlayConfig,
    bilinear_resize,
    colormap,
    gradcam,
    normalize_cam,
    render_overlay,
    render_side_by_side,
    upsample_cam,
)
from woundseg.model import CAM_LAYERS
from woundseg.tensor import Tensor, precision, sigmoid
from woundseg.training import load_pair

from conftest import OVERFIT_SEEDS


class ToyModel:
    """Feature ``A = x[..., :2]``; logits ``z = A @ v + c``."""

    cam_layers = ("feat",)

    def __init__(self, v, c=0.0):
        self.v = Tensor(np.asarray(v, dtype=np.float64).reshape(2, 1))
        self.c = c
        self.training = False

    def parameters(self):
        return {"v": self.v}

    def eval(self):
        self.training = False

    def train(self, mode=True):
        self.training = mode

    def forward(self, x, probe=None, return_logits=False):
        feat = x[..., :2]
        if probe:
            probe("feat", feat)
        n, h, w, _ = feat.shape
        z = (feat.reshape(-1, 2) @ self.v + self.c).reshape(n, h, w, 1)
        prob = sigmoid(z)
        return (prob, z) if return_logits else prob


def symbolic_cam(image, v, c):
    """Grad-CAM of the toy model derived with sympy."""
    sp = pytest.importorskip("sympy")
    H, W = image.shape[:2]
    A = [[[sp.Symbol(f"a_{i}_{j}_{k}") for k in range(2)] for j in range(W)] for i in range(H)]
    z = [[v[0] * A[i][j][0] + v[1] * A[i][j][1] + c for j in range(W)] for i in range(H)]
    subs = {A[i][j][k]: float(image[i, j, k]) for i in range(H) for j in range(W) for k in range(2)}
    zval = np.array([[float(z[i][j].subs(subs)) for j in range(W)] for i in range(H)])
    pos = 1 / (1 + np.exp(-zval)) > 0.5
    if not pos.any():
        pos[:] = True
    target = sum(z[i][j] for i in range(H) for j in range(W) if pos[i, j]) / int(pos.sum())
    alphas = [
        float(sum(sp.diff(target, A[i][j][k]) for i in range(H) for j in range(W)) / (H * W)) for k in range(2)
    ]
    raw = np.maximum(alphas[0] * image[..., 0] + alphas[1] * image[..., 1], 0)
    return np.array(alphas), raw / raw.max() if raw.max() > 0 else raw


class TestToyModel:
    @pytest.mark.parametrize("v,c", [((1.0, -0.5), 0.0), ((0.3, 2.0), -1.0), ((-1.0, -2.0), 5.0)])
    def test_matches_symbolic_oracle(self, rng, v, c):
        img = rng.uniform(0, 1, (2, 2, 3))
        with precision(np.float64):
            cam = gradcam(ToyModel(v, c), img, "feat")
        alphas, expected = symbolic_cam(img, v, c)
        np.testing.assert_allclose(cam.alphas, alphas, atol=1e-12)
        np.testing.assert_allclose(cam.alphas, np.array(v) / 4, atol=1e-12)
        np.testing.assert_allclose(cam.values, expected, atol=1e-12)

    def test_scaling_logits_leaves_cam_unchanged(self, rng):
        img = rng.uniform(0, 1, (3, 3, 3))
        with precision(np.float64):
            a = gradcam(ToyModel((0.7, -0.2)), img, "feat").values
            b = gradcam(ToyModel((2.1, -0.6)), img, "feat").values
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_all_negative_evidence_gives_zero_map(self, rng):
        with precision(np.float64):
            cam = gradcam(ToyModel((-1.0, -1.0)), rng.uniform(0, 1, (2, 2, 3)), "feat")
        np.testing.assert_array_equal(cam.values, 0.0)

    def test_unknown_layer_lists_valid_targets(self, rng):
        with pytest.raises(ValueError, match="feat"):
            gradcam(ToyModel((1.0, 1.0)), rng.uniform(0, 1, (2, 2, 3)), "nope")

    def test_batch_rejected(self, rng):
        with pytest.raises(ShapeError):
            gradcam(ToyModel((1.0, 1.0)), rng.uniform(0, 1, (2, 2, 2, 3)), "feat")


class TestNormalize:
    def test_max_is_one_and_non_negative(self, rng):
        v = normalize_cam(rng.standard_normal((5, 5)))
        assert v.min() >= 0 and v.max() == 1.0

    def test_idempotent(self, rng):
        v = normalize_cam(rng.standard_normal((4, 4)))
        np.testing.assert_array_equal(normalize_cam(v), v)

    def test_zero_map_stays_zero(self):
        np.testing.assert_array_equal(normalize_cam(np.zeros((3, 3))), 0.0)


class TestResize:
    def test_checkerboard_hand_case(self):
        out = bilinear_resize(np.array([[0.0, 1.0], [1.0, 0.0]]), 4, 4)
        expected = np.array(
            [
                [0.0, 0.25, 0.75, 1.0],
                [0.25, 0.375, 0.625, 0.75],
                [0.75, 0.625, 0.375, 0.25],
                [1.0, 0.75, 0.25, 0.0],
            ]
        )
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_constant_is_preserved(self):
        np.testing.assert_allclose(bilinear_resize(np.full((3, 5), 0.7), 8, 9), 0.7)

    def test_identity_size(self, rng):
        a = rng.random((4, 4))
        np.testing.assert_array_equal(bilinear_resize(a, 4, 4), a)

    def test_upsample_keeps_unit_range(self, rng):
        from woundseg.explain import CamMap

        cam = upsample_cam(CamMap(normalize_cam(rng.random((4, 4)))), 16)
        assert cam.shape == (16, 16) and cam.values.min() >= 0 and cam.values.max() <= 1


class TestRendering:
    def test_ramp_stops(self):
        np.testing.assert_allclose(colormap(np.array([0.0, 0.5, 1.0])), [[0, 0, 255], [127.5, 255, 0], [255, 0, 0]])

    def test_alpha_zero_returns_image(self, rng):
        img = rng.integers(0, 256, (4, 4, 3), dtype=np.uint8)
        out = render_overlay(img, np.ones((4, 4)), config=OverlayConfig(alpha=0.0))
        np.testing.assert_array_equal(out, img)

    def test_alpha_one_full_weight_is_ramp_colour(self, rng):
        img = rng.integers(0, 256, (2, 2, 3), dtype=np.uint8)
        out = render_overlay(img, np.ones((2, 2)), config=OverlayConfig(alpha=1.0))
        np.testing.assert_array_equal(out, np.broadcast_to([255, 0, 0], (2, 2, 3)))

    def test_mask_overlay(self):
        img = np.zeros((2, 2, 3), np.uint8)
        mask = np.array([[1, 0], [0, 0]])
        out = render_overlay(img, mask, kind="mask", config=OverlayConfig(alpha=0.5))
        np.testing.assert_array_equal(out[0, 0], [128, 0, 0])
        np.testing.assert_array_equal(out[1, 1], [0, 0, 0])

    def test_invalid_alpha_and_kind(self):
        with pytest.raises(ValueError):
            OverlayConfig(alpha=1.5)
        with pytest.raises(ValueError):
            render_overlay(np.zeros((2, 2, 3)), np.zeros((2, 2)), kind="heat")

    def test_side_by_side(self, rng):
        img = rng.integers(0, 256, (5, 6, 3), dtype=np.uint8)
        mask = rng.random((5, 6)) > 0.5
        out = render_side_by_side(img, mask)
        assert out.shape == (5, 2 * 6 + 4, 3)
        np.testing.assert_array_equal(out[:, :6], img)
        np.testing.assert_array_equal(out[:, 6:10], 255)
        assert set(np.unique(out[:, 10:])) <= {0, 255}

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            render_overlay(np.zeros((4, 4, 3)), np.zeros((3, 3)))
        with pytest.raises(ShapeError):
            render_side_by_side(np.zeros((4, 4, 3)), np.zeros((3, 4)))


class TestOnTrainedModel:
    def test_every_layer_gives_a_valid_map(self, rng):
        from woundseg.model import ModelConfig, TransUNet

        model = TransUNet(ModelConfig.scaled(), seed=0)
        img = rng.random((64, 64, 3)).astype(np.float32)
        for layer in CAM_LAYERS:
            cam = gradcam(model, img, layer)
            assert cam.values.min() >= 0 and cam.values.max() in (0.0, 1.0)
            assert upsample_cam(cam, 64).shape == (64, 64)

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", OVERFIT_SEEDS)
    def test_activation_concentrates_on_wound(self, overfit_runs, seed):
        run = overfit_runs[seed]
        wins = 0
        for entry in run["index"].entries:
            img, mask = load_pair(entry, 64)
            cam = upsample_cam(gradcam(run["model"], img, "dec4"), 64).values
            inside = mask[..., 0] > 0.5
            wins += cam[inside].mean() > cam[~inside].mean()
        assert wins >= 7

"""
Tests for Fourier parameterisation, augmentations, feature visualisation and saliency
"""

import numpy as np
import pytest

from backend.engine.network import (Conv2d, Flatten, GlobalAvgPool, Linear, MaxPool2x2, Network,
                                    ReLU, build_network)
from backend.engine.tensor import Graph, Tensor
from backend.interpret.fourier import (LensError, SpectrumImage, channel_mix, dataset_color_matrix,
                                       decode, encode, fourier_param_init, spectral_decode,
                                       validate_color_matrix)
from backend.interpret.saliency import (SaliencyConfig, heatmap_gray, heatmap_rgb, rmse, saliency,
                                        saliency_batch, smoothgrad, smoothgrad_batch)
from backend.interpret.transforms import (Augmentation, augment, reflect_coordinates, resample,
                                          sample_augmentation, source_coordinates)
from backend.interpret.visualization import (VizConfig, VizObjective, contact_sheet,
                                             random_neurons, visualize, visualize_layer)

MIX = np.array([[1.0, 0.2, 0.0], [0.1, 0.9, 0.1], [0.0, 0.3, 1.1]])
SOBEL = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def linear_gradient_check(op, x, seed=0):
    """Compare an op's recorded gradient of <R, op(x)> against finite differences"""
    rng = np.random.default_rng(seed)
    tensor = Tensor(x.copy(), requires_grad=True)
    graph = Graph()
    out = op(tensor, graph)
    weights = rng.normal(size=out.shape)
    graph.run_backward(out, weights)
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    step = 1e-5
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = float(np.sum(op(Tensor(x), None).data * weights))
        flat[i] = original - step
        minus = float(np.sum(op(Tensor(x), None).data * weights))
        flat[i] = original
        numeric.reshape(-1)[i] = (plus - minus) / (2 * step)
    return np.max(np.abs(tensor.grad - numeric))


def small_viz_config(**overrides):
    values = dict(steps=20, lr=0.05, augment=False, image_size=8, seed=0)
    values.update(overrides)
    return VizConfig(**values)


class TestFourier:
    """Test the spectral image parameterisation"""

    @pytest.mark.parametrize("size", [(8, 8), (9, 10), (8, 11)])
    def test_decode_inverts_encode(self, size):
        """decode(encode(image)) returns the image"""
        image = np.random.default_rng(0).uniform(0.1, 0.9, size=(3,) + size)
        restored = decode(encode(image, MIX), MIX)
        np.testing.assert_allclose(restored, image, atol=1e-8)

    def test_decoded_range(self):
        """Squashed images lie in [0, 1]"""
        spectrum = fourier_param_init(16, 16, 3, seed=1, std=5.0)
        image = decode(spectrum)
        assert image.shape == (3, 16, 16)
        assert image.min() >= 0.0 and image.max() <= 1.0

    def test_param_shape(self):
        """Parameters hold the real half spectrum with real and imaginary parts"""
        spectrum = fourier_param_init(8, 12, 3)
        assert spectrum.params.shape == (3, 8, 7, 2)

    def test_too_small(self):
        """Images need sides of at least 8 pixels"""
        with pytest.raises(LensError):
            fourier_param_init(4, 8)

    @pytest.mark.parametrize("matrix, channels", [
        (np.ones((2, 3)), None),
        (np.eye(3), 1),
        (np.ones((3, 3)), 3),
        (np.array([[np.nan]]), 1),
    ])
    def test_invalid_color_matrix(self, matrix, channels):
        """Non-square, mismatched, singular or non-finite matrices are rejected"""
        with pytest.raises(LensError):
            validate_color_matrix(matrix, channels)

    def test_dataset_color_matrix(self):
        """The factor reproduces the channel covariance"""
        images = np.random.default_rng(2).random((20, 3, 4, 4))
        images[:, 1] += 0.5 * images[:, 0]
        factor = dataset_color_matrix(images)
        pixels = images.transpose(1, 0, 2, 3).reshape(3, -1)
        np.testing.assert_allclose(factor @ factor.T, np.cov(pixels), atol=1e-12)
        assert np.allclose(factor, np.tril(factor))

    def test_decoded_noise_matches_dataset_covariance(self):
        """White spectral noise mixed by the dataset factor has the dataset channel covariance"""
        rng = np.random.default_rng(6)
        images = rng.random((40, 3, 8, 8))
        images[:, 1] += 0.5 * images[:, 0]
        images[:, 2] += 0.3 * images[:, 1]
        target = np.cov(images.transpose(1, 0, 2, 3).reshape(3, -1))
        factor = dataset_color_matrix(images)
        noise = fourier_param_init(128, 128, 3, seed=7, std=1.0)
        white = SpectrumImage(noise.params / noise.scale[None, :, :, None], 128, 128, noise.scale)
        variance = decode(white, squash=False).var()
        mixed = decode(white, factor, squash=False)
        estimate = np.cov(mixed.reshape(3, -1)) / variance
        assert np.linalg.norm(estimate - target) <= 0.2 * np.linalg.norm(target)

    @pytest.mark.parametrize("height, width", [(8, 8), (8, 9)])
    def test_spectral_decode_gradient(self, height, width):
        """The recorded inverse FFT has the exact adjoint gradient"""
        spectrum = fourier_param_init(height, width, 2, seed=3, std=1.0)

        def op(t, graph):
            return spectral_decode(t, spectrum.scale, height, width, graph)

        assert linear_gradient_check(op, spectrum.params) < 1e-6

    def test_channel_mix_gradient(self):
        """Channel mixing back-propagates through the transpose"""
        x = np.random.default_rng(4).normal(size=(1, 3, 4, 4))
        assert linear_gradient_check(lambda t, g: channel_mix(t, MIX, g), x) < 1e-6


class TestTransforms:
    """Test affine augmentations"""

    def test_identity_passthrough(self):
        """The identity augmentation returns its input unchanged"""
        x = Tensor(np.ones((1, 1, 4, 4)))
        assert augment(x, Augmentation()) is x

    def test_reflect(self):
        """Coordinates fold back about the edge pixels"""
        np.testing.assert_array_equal(reflect_coordinates(np.array([-1.0, 0.0, 3.0, 4.0, 5.0]), 4),
                                      [1.0, 0.0, 3.0, 2.0, 1.0])

    def test_integer_shift(self):
        """A one-pixel shift moves columns right with a reflected edge"""
        image = np.arange(16.0).reshape(1, 1, 4, 4)
        out = augment(Tensor(image), Augmentation(shift2=(0, 1))).data
        np.testing.assert_allclose(out[0, 0, :, 1:], image[0, 0, :, :3])
        np.testing.assert_allclose(out[0, 0, :, 0], image[0, 0, :, 1])

    def test_rotation_about_centre(self):
        """A 90 degree rotation keeps the centre of an odd image fixed"""
        sy, sx = source_coordinates(Augmentation(angle=90.0), 5, 5)
        assert sy[2, 2] == pytest.approx(2.0)
        assert sx[2, 2] == pytest.approx(2.0)

    def test_sampled_ranges(self):
        """Sampled transforms respect the configured ranges"""
        rng = np.random.default_rng(0)
        for _ in range(50):
            aug = sample_augmentation(rng, jitter1=2, scale_range=(0.9, 1.1), rotate=5.0,
                                      jitter2=1)
            assert max(abs(v) for v in aug.shift1) <= 2
            assert max(abs(v) for v in aug.shift2) <= 1
            assert 0.9 <= aug.scale <= 1.1
            assert abs(aug.angle) <= 5.0

    @pytest.mark.parametrize("mode", ["bilinear", "nearest"])
    def test_resample_gradient(self, mode):
        """Resampling back-propagates to the sampled pixels"""
        x = np.random.default_rng(5).normal(size=(1, 2, 6, 6))
        sy, sx = source_coordinates(Augmentation((1, -1), 1.07, 12.0, (0, 1)), 6, 6)
        if mode == "nearest":
            sy, sx = np.rint(sy) + 0.1, np.rint(sx) + 0.1
        assert linear_gradient_check(lambda t, g: resample(t, sy, sx, g, mode=mode), x) < 1e-6


class TestVisualization:
    """Test activation maximisation"""

    def test_maximisation_improves(self):
        """Optimising a first-layer channel raises its mean activation"""
        net = build_network("tiny", seed=0)
        result = visualize(net, VizObjective(0, 1), small_viz_config())
        assert result.image.shape == (3, 8, 8)
        assert result.improved

    def test_minimisation_improves(self):
        """The minimise sign lowers the activation"""
        net = build_network("tiny", seed=0)
        result = visualize(net, VizObjective(0, 1, sign="minimize"), small_viz_config())
        assert result.final_objective < result.initial_objective

    @pytest.mark.parametrize("transpose", [False, True])
    def test_edge_filter_orientation(self, transpose):
        """A fixed Sobel filter drives the image to vary across the filter's edge direction"""
        net = Network([Conv2d("edge", 1, 1, 3, padding=0), ReLU("relu")])
        net.params["edge.weight"].data = (SOBEL.T if transpose else SOBEL)[None, None].copy()
        result = visualize(net, VizObjective(1, 0), small_viz_config(image_size=16, steps=64))
        image = result.image[0]
        horizontal = np.sum(np.diff(image, axis=1) ** 2)
        vertical = np.sum(np.diff(image, axis=0) ** 2)
        assert result.improved
        if transpose:
            assert vertical > horizontal
        else:
            assert horizontal > vertical

    def test_zero_lr_keeps_image(self):
        """Without updates the objective is unchanged"""
        net = build_network("tiny", seed=0)
        result = visualize(net, VizObjective(0, 0), small_viz_config(lr=0.0, steps=3))
        assert result.final_objective == result.initial_objective

    def test_deterministic_with_augmentation(self):
        """The seed fixes initialisation and augmentation draws"""
        net = build_network("tiny", seed=1)
        config = small_viz_config(steps=5, augment=True, jitter1=2, jitter2=1, seed=3)
        a = visualize(net, VizObjective(3, 2), config)
        b = visualize(net, VizObjective(3, 2), config)
        np.testing.assert_array_equal(a.image, b.image)

    def test_invalid_objective(self):
        """Channels beyond the layer width are rejected"""
        net = build_network("tiny")
        with pytest.raises(LensError):
            visualize(net, VizObjective(0, 4), small_viz_config())
        with pytest.raises(LensError):
            visualize(net, VizObjective(0, 0, sign="sideways"), small_viz_config())

    def test_layer_jobs_independent_of_workers(self):
        """Pooled visualisation matches sequential visualisation"""
        net = build_network("tiny", seed=2)
        config = small_viz_config(steps=3)
        serial = visualize_layer(net, 3, None, config, workers=1)
        pooled = visualize_layer(net, 3, None, config, workers=3)
        assert [r.objective.channel for r in serial] == list(range(8))
        assert [r.seed for r in serial] == list(range(8))
        for left, right in zip(serial, pooled):
            np.testing.assert_array_equal(left.image, right.image)

    def test_random_neurons(self):
        """Sampled neurons are distinct conv channels"""
        net = build_network("tiny")
        chosen = random_neurons(net, 12, seed=0)
        assert len({(o.layer, o.channel) for o in chosen}) == 12
        assert all(o.layer in net.conv_layer_indices() for o in chosen)
        with pytest.raises(LensError):
            random_neurons(net, 13)

    def test_contact_sheet(self):
        """Images tile row-major with padding"""
        images = [np.full((1, 2, 2), float(i)) for i in range(3)]
        sheet = contact_sheet(images, columns=2, pad=1, background=9.0)
        assert sheet.shape == (1, 5, 5)
        assert sheet[0, 0, 0] == 0.0 and sheet[0, 0, 3] == 1.0 and sheet[0, 3, 0] == 2.0
        assert sheet[0, 4, 4] == 9.0


class TestSaliency:
    """Test vanilla saliency and SmoothGrad"""

    def linear_net(self):
        net = Network([Flatten(), Linear("fc", 4, 2)])
        net.params["fc.weight"].data = np.array([[1.0, 2.0, -0.5, 0.0], [0.1, 0.1, 0.1, 0.1]])
        return net

    def test_linear_model(self):
        """A linear classifier's map is its normalised absolute weight row"""
        x = np.ones((1, 2, 2))
        heat = saliency(self.linear_net(), x)
        np.testing.assert_allclose(heat, [[0.5, 1.0], [0.25, 0.0]])

    def test_zero_network_gives_zero_map(self):
        """A zero gradient stays zero instead of dividing by zero"""
        net = Network([Flatten(), Linear("fc", 4, 2)])
        assert np.all(saliency(net, np.ones((1, 2, 2))) == 0.0)

    def test_range_and_shape(self):
        """Maps are (H, W) and peak at exactly 1"""
        net = build_network("tiny", seed=0)
        x = np.random.default_rng(0).random((3, 8, 8))
        heat = saliency(net, x)
        assert heat.shape == (8, 8)
        assert heat.max() == 1.0 and heat.min() >= 0.0

    def test_batch_matches_single(self):
        """Batched saliency equals per-image saliency"""
        net = build_network("tiny", seed=0)
        images = np.random.default_rng(1).random((3, 3, 8, 8))
        batch = saliency_batch(net, images)
        np.testing.assert_allclose(batch[1], saliency(net, images[1]))

    def test_zero_sigma_is_vanilla(self):
        """SmoothGrad without noise is the vanilla map"""
        net = build_network("tiny", seed=0)
        x = np.random.default_rng(2).random((3, 8, 8))
        np.testing.assert_array_equal(smoothgrad(net, x, SaliencyConfig(sigma=0.0)), saliency(net, x))

    def test_smoothgrad_independent_of_batching(self):
        """Noise streams are per image, not per batch"""
        net = build_network("tiny", seed=0)
        images = np.random.default_rng(3).random((2, 3, 8, 8))
        config = SaliencyConfig(samples=4, sigma=0.1, batch_size=3, seed=5)
        batch = smoothgrad_batch(net, images, config, offset=10)
        single = smoothgrad(net, images[1], SaliencyConfig(samples=4, sigma=0.1, batch_size=1,
                                                            seed=5), index=11)
        np.testing.assert_allclose(batch[1], single, atol=1e-12)

    def test_smoothgrad_linear_model(self):
        """On a linear model the mean of 200 noisy gradients is the vanilla map within 2%"""
        net = Network([Flatten(), Linear("fc", 12, 3)])
        net.params["fc.weight"].data = np.random.default_rng(9).normal(size=(3, 12))
        x = np.random.default_rng(10).random((3, 2, 2))
        smooth = smoothgrad(net, x, SaliencyConfig(samples=200, sigma=0.2, seed=1))
        np.testing.assert_allclose(smooth, saliency(net, x), rtol=0.02, atol=1e-12)

    def test_zero_outside_receptive_field(self):
        """Pixels feeding only the conv row and column that max-pooling crops get zero saliency"""
        rng = np.random.default_rng(8)
        net = Network([Conv2d("conv", 1, 2, 3, padding=0), ReLU("relu"), MaxPool2x2("pool"),
                       GlobalAvgPool("gap"), Linear("fc", 2, 3)])
        net.params["conv.weight"].data = rng.uniform(0.1, 1.0, size=(2, 1, 3, 3))
        net.params["fc.weight"].data = rng.normal(size=(3, 2))
        heat = saliency(net, rng.random((1, 7, 7)))
        assert np.all(heat[6, :] == 0.0) and np.all(heat[:, 6] == 0.0)
        assert heat[:6, :6].max() == 1.0

    def test_wrong_rank(self):
        """saliency takes one (C, H, W) image"""
        with pytest.raises(LensError):
            saliency(build_network("tiny"), np.zeros((1, 3, 8, 8)))

    def test_rmse_and_heatmaps(self):
        """rmse compares maps; heatmaps are uint8 images"""
        a = np.zeros((4, 4))
        b = np.ones((4, 4))
        assert rmse(a, b) == 1.0
        with pytest.raises(LensError):
            rmse(a, np.zeros((2, 2)))
        assert heatmap_rgb(b * 0.5).shape == (4, 4, 3)
        assert heatmap_rgb(b).dtype == np.uint8
        np.testing.assert_array_equal(heatmap_gray(b), np.full((4, 4), 255, dtype=np.uint8))

import math

import numpy as np
import pytest
from skimage import measure

from app.exceptions import ExplanationError
from app.explain import (LIME_COLOR, MAX_TINT, POSITIVE_COLOR, SuperpixelMap, global_importance,
                         grid_superpixels, kernel_shap, lime_explain, mask_aware_superpixels,
                         perturb_and_predict, perturb_batch, render_overlay, segment_outline,
                         shap_explain, shap_kernel_weight)
from app.imaging import GrainMask, RasterImage, segment_grain
from app.model import build_model
from app.models import LimeConfig, ShapConfig, ShapExplanation, TrainingConfig
from tests.conftest import grain_pixels


def ones_image(size=50):
    return RasterImage(np.ones((size, size, 3)), normalized=True)


def single_segment_model(spmap, segment, weight=0.6, base=0.1):
    """Class-0 score rises linearly with how much of one segment is visible."""
    region = spmap.segments == segment

    def predict(batch):
        visible = batch[:, region, 0].mean(axis=1)
        out = np.full((len(batch), 5), 0.1)
        out[:, 0] = base + weight * visible
        return out

    return predict


def table_game(m, seed):
    table = np.random.default_rng(seed).normal(size=2 ** m)
    powers = 1 << np.arange(m)

    def value_fn(z):
        return table[np.asarray(z, dtype=np.int64) @ powers]

    return table, value_fn


def brute_force_shapley(table, m):
    phi = np.zeros(m)
    for i in range(m):
        for code in range(2 ** m):
            if code >> i & 1:
                continue
            s = bin(code).count("1")
            weight = math.factorial(s) * math.factorial(m - s - 1) / math.factorial(m)
            phi[i] += weight * (table[code | 1 << i] - table[code])
    return phi


def test_gridSuperpixels():
    spmap = grid_superpixels(50, 50, 5)
    assert spmap.count == 25
    assert spmap.sizes().tolist() == [100] * 25
    assert spmap.segments[0, 0] == 0 and spmap.segments[49, 49] == 24
    assert grid_superpixels(50, 50, 1).count == 1


def test_gridRemainderGoesToLastCells():
    spmap = grid_superpixels(50, 50, 7)
    assert spmap.count == 49
    sizes = spmap.sizes().reshape(7, 7)
    assert sizes[0, 0] == 49
    assert sizes[6, 6] == 64
    assert sizes.sum() == 2500


def test_gridRejectsBadCellCount():
    for grid in (0, 51):
        with pytest.raises(ValueError):
            grid_superpixels(50, 50, grid)


def test_maskAwareFullForegroundIsGrid():
    spmap = mask_aware_superpixels(GrainMask(np.ones((50, 50))), grid=6)
    assert np.array_equal(spmap.segments, grid_superpixels(50, 50, 6).segments)


def test_maskAwareSplitsCellsAtBoundary():
    flags = np.zeros((50, 50), dtype=bool)
    flags[15:35, 15:35] = True
    spmap = mask_aware_superpixels(GrainMask(flags), grid=5)
    assert spmap.count == 33
    for segment in range(spmap.count):
        region = spmap.segments == segment
        assert region.sum() >= 8
        assert len(np.unique(flags[region])) == 1


def test_maskAwareSegmentsAreConnected():
    mask = segment_grain(RasterImage(grain_pixels("Jasmine", size=50, jitter=1)))
    spmap = mask_aware_superpixels(mask, grid=6)
    assert spmap.segments[0, 0] == 0
    assert set(np.unique(spmap.segments)) == set(range(spmap.count))
    for segment in range(spmap.count):
        assert measure.label(spmap.segments == segment, connectivity=1).max() == 1


def test_perturbAllOnesAndZeros():
    img = RasterImage(np.random.default_rng(0).random((50, 50, 3)), normalized=True)
    spmap = grid_superpixels(50, 50, 3)
    batch = perturb_batch(img, spmap, [np.ones(9), np.zeros(9)])
    assert np.array_equal(batch[0], img.pixels)
    assert not batch[1].any()
    half = perturb_batch(img, spmap, np.eye(9)[4], baseline=0.5)[0]
    assert np.array_equal(half[spmap.segments == 4], img.pixels[spmap.segments == 4])
    assert np.all(half[spmap.segments != 4] == 0.5)
    with pytest.raises(ExplanationError):
        perturb_batch(img, spmap, np.ones((1, 8)))


def test_perturbAndPredict():
    spmap = grid_superpixels(50, 50, 3)
    predict = single_segment_model(spmap, 2)
    assert perturb_and_predict(predict, ones_image(), spmap, np.ones(9))[0] == pytest.approx(0.7)
    assert perturb_and_predict(predict, ones_image(), spmap, np.zeros(9))[0] == pytest.approx(0.1)


def test_limeRecoversSingleSegmentModel():
    spmap = grid_superpixels(50, 50, 3)
    config = LimeConfig(samples=1000, ridge=0.01, seed=0)
    explanation = lime_explain(single_segment_model(spmap, 3), ones_image(), spmap, 0, config)
    assert abs(explanation.coefficients[3] - 0.6) < 0.02
    assert explanation.fidelity_r2 >= 0.99
    assert explanation.top_k[0] == 3
    assert len(explanation.top_k) == 5
    assert max(abs(c) for i, c in enumerate(explanation.coefficients) if i != 3) < 0.02


def test_limeConstantModelHasZeroWeights():
    spmap = grid_superpixels(50, 50, 3)
    explanation = lime_explain(lambda batch: np.full((len(batch), 5), 0.2), ones_image(), spmap, 1)
    assert np.allclose(explanation.coefficients, 0.0, atol=1e-9)
    assert explanation.intercept == pytest.approx(0.2)


def test_limeIsDeterministic():
    spmap = grid_superpixels(50, 50, 4)
    predict = single_segment_model(spmap, 5)
    config = LimeConfig(samples=200, seed=9)
    a = lime_explain(predict, ones_image(), spmap, 0, config)
    b = lime_explain(predict, ones_image(), spmap, 0, config)
    assert a == b
    c = lime_explain(predict, ones_image(), spmap, 0, LimeConfig(samples=200, seed=10))
    assert a.coefficients != c.coefficients


def test_limeSingularWithoutRidge():
    spmap = grid_superpixels(50, 50, 3)
    with pytest.raises(ExplanationError):
        lime_explain(single_segment_model(spmap, 0), ones_image(), spmap, 0, LimeConfig(samples=2, ridge=0.0))


def test_shapKernelWeights():
    assert shap_kernel_weight(4, 1) == pytest.approx(0.25)
    assert shap_kernel_weight(4, 2) == pytest.approx(0.125)
    for s in range(1, 10):
        assert shap_kernel_weight(10, s) == pytest.approx(shap_kernel_weight(10, 10 - s))
    with pytest.raises(ValueError):
        shap_kernel_weight(4, 0)
    with pytest.raises(ValueError):
        shap_kernel_weight(4, 4)


def test_exactShapMatchesBruteForce():
    table, value_fn = table_game(8, seed=0)
    phi, v0, v1, method = kernel_shap(value_fn, 8, mode="exact")
    assert method == "exact"
    assert phi.shape == (1, 8)
    assert np.allclose(phi[0], brute_force_shapley(table, 8), atol=1e-6)
    assert v0[0] == table[0] and v1[0] == table[-1]


def test_shapEfficiencyAndDummy():
    weights = np.array([0.5, -0.2, 0.0, 0.3, 0.0, 0.1])

    def value_fn(z):
        z = np.asarray(z, dtype=np.float64)
        return np.stack([z @ weights + 0.3 * z[:, 0] * z[:, 3], np.ones(len(z))], axis=1)

    phi, v0, v1, _ = kernel_shap(value_fn, 6)
    assert np.allclose(phi.sum(axis=1), v1 - v0, atol=1e-9)
    assert abs(phi[0, 2]) < 1e-9 and abs(phi[0, 4]) < 1e-9
    assert phi[0, 0] == pytest.approx(0.5 + 0.15)
    assert phi[0, 3] == pytest.approx(0.3 + 0.15)
    assert np.allclose(phi[1], 0.0, atol=1e-9)


def test_shapSymmetryAndLinearity():
    def first(z):
        z = np.asarray(z, dtype=np.float64)
        return (z[:, 0] + z[:, 1]) ** 2 + z[:, 2]

    def second(z):
        return np.asarray(z, dtype=np.float64)[:, 3] * 2.0

    phi_a, _, _, _ = kernel_shap(first, 5)
    phi_b, _, _, _ = kernel_shap(second, 5)
    phi_sum, _, _, _ = kernel_shap(lambda z: first(z) + second(z), 5)
    assert phi_a[0, 0] == pytest.approx(phi_a[0, 1])
    assert np.allclose(phi_sum, phi_a + phi_b, atol=1e-9)


def test_exactModeLimit():
    with pytest.raises(ExplanationError):
        kernel_shap(lambda z: np.zeros(len(z)), 13, mode="exact")


def test_sampledEqualsExactWhenFullyEnumerated():
    _, value_fn = table_game(10, seed=1)
    exact, _, _, _ = kernel_shap(value_fn, 10, mode="exact")
    sampled, _, _, method = kernel_shap(value_fn, 10, mode="sampled", n_samples=2048)
    assert method == "sampled"
    assert np.allclose(sampled, exact, atol=1e-9)


def test_sampledShapApproximatesExact():
    a = np.arange(1, 11) / 10.0

    def value_fn(z):
        s = np.asarray(z, dtype=np.float64) @ a
        return s + 0.02 * s ** 2

    expected = a * (1 + 0.02 * a.sum())
    exact, _, _, _ = kernel_shap(value_fn, 10, mode="exact")
    assert np.allclose(exact[0], expected, atol=1e-9)
    sampled, v0, v1, _ = kernel_shap(value_fn, 10, mode="sampled", n_samples=256, seed=4)
    assert sampled[0].sum() == pytest.approx(v1[0] - v0[0])
    assert np.max(np.abs(sampled[0] - expected)) < 0.05


def test_shapExplainOnModel():
    model = build_model(TrainingConfig())
    img = RasterImage(grain_pixels("Basmati", size=50))
    spmap = grid_superpixels(50, 50, 3)
    explanation = shap_explain(model.predict, img, spmap, ShapConfig())
    assert explanation.method == "exact"
    assert explanation.samples == 512
    phi = np.array(explanation.phi)
    assert phi.shape == (5, 9)
    gap = np.array(explanation.outputs) - np.array(explanation.base_values)
    assert np.allclose(phi.sum(axis=1), gap, atol=1e-6)
    assert np.allclose(explanation.base_values, 0.2, atol=1e-6)


def test_globalImportance():
    def explanation(phi):
        return ShapExplanation(phi=phi, base_values=[0, 0], outputs=[0, 0], method="exact",
                               segments=3, samples=8, seed=0)

    summary = global_importance([explanation([[1, -3, 0], [0, 0, 2]]),
                                 explanation([[-1, 1, 0], [0, 0, -4]])])
    assert summary["images"] == 2
    assert summary["mean_abs_phi"] == [[1.0, 2.0, 0.0], [0.0, 0.0, 3.0]]
    assert summary["ranking"][0] == [1, 0, 2]

    other = ShapExplanation(phi=[[1, 2]], base_values=[0], outputs=[0], method="exact",
                            segments=2, samples=4, seed=0)
    with pytest.raises(ExplanationError):
        global_importance([explanation([[1, 1, 1], [1, 1, 1]]), other])
    with pytest.raises(ExplanationError):
        global_importance([])


def test_heatOverlayZeroWeightsUnchanged():
    img = RasterImage(np.random.default_rng(2).random((50, 50, 3)), normalized=True)
    spmap = grid_superpixels(50, 50, 5)
    out = render_overlay(img, spmap, np.zeros(25), style="shap_heat")
    assert np.array_equal(out.pixels, img.pixels)


def test_heatOverlayTintsPositiveSegment():
    img = RasterImage(np.full((50, 50, 3), 0.5), normalized=True)
    spmap = grid_superpixels(50, 50, 5)
    weights = np.zeros(25)
    weights[7] = 2.0
    out = render_overlay(img, spmap, weights, style="shap_heat")
    region = spmap.segments == 7
    expected = (1 - MAX_TINT) * 0.5 + MAX_TINT * POSITIVE_COLOR
    assert np.allclose(out.pixels[region], expected)
    assert np.array_equal(out.pixels[~region], img.pixels[~region])


def test_limeOutlineMarksTopSegments():
    img = RasterImage(np.zeros((50, 50, 3)), normalized=True)
    spmap = grid_superpixels(50, 50, 5)
    weights = np.zeros(25)
    weights[0] = 0.9
    weights[12] = -0.5
    weights[20] = 0.1
    out = render_overlay(img, spmap, weights, style="lime_outline", k=2)
    expected = segment_outline(spmap, 0) | segment_outline(spmap, 12)
    marked = np.all(out.pixels == LIME_COLOR, axis=2)
    assert np.array_equal(marked, expected)
    assert segment_outline(spmap, 0).sum() == 36
    with pytest.raises(ValueError):
        render_overlay(img, spmap, weights, style="sepia")
    with pytest.raises(ExplanationError):
        render_overlay(img, spmap, np.zeros(3))


def test_superpixelMapSizes():
    spmap = SuperpixelMap([[0, 0, 1], [2, 2, 2]])
    assert spmap.count == 3
    assert spmap.sizes().tolist() == [2, 1, 3]


def test_exactShapMatchesBruteForceOnRandomGames():
    for seed in range(50):
        m = 4 + seed % 7
        table, value_fn = table_game(m, seed=100 + seed)
        phi, _, _, method = kernel_shap(value_fn, m, mode="exact")
        assert method == "exact"
        assert np.allclose(phi[0], brute_force_shapley(table, m), atol=1e-6), (seed, m)


def test_sampledShapErrorShrinksWithBudget():
    budgets = (256, 512, 1024, 2048)
    errors = {n: [] for n in budgets}
    for seed in range(20):
        _, value_fn = table_game(10, seed=200 + seed)
        exact, _, _, _ = kernel_shap(value_fn, 10, mode="exact")
        for n in budgets:
            sampled, _, _, _ = kernel_shap(value_fn, 10, mode="sampled", n_samples=n, seed=seed)
            errors[n].append(np.mean(np.abs(sampled - exact)))
    medians = [float(np.median(errors[n])) for n in budgets]
    assert medians[0] > 0
    for before, after in zip(medians, medians[1:]):
        assert after <= before + 1e-9, medians


def test_limeFindsTheDrivingSegmentAcrossSeeds():
    spmap = grid_superpixels(30, 30, 3)
    for seed in range(100):
        segment = seed % 9
        config = LimeConfig(samples=2000, ridge=1e-6, seed=seed)
        explanation = lime_explain(single_segment_model(spmap, segment), ones_image(30), spmap, 0, config)
        assert explanation.top_k[0] == segment, seed
        assert abs(explanation.coefficients[segment] - 0.6) < 1e-3, seed
        assert explanation.fidelity_r2 >= 0.99, seed

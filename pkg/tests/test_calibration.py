import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthcal.calibration import (
    BinningConfig,
    DepthPair,
    PairStore,
    ResidualBins,
    _weighted_normal_system,
    accumulate_pairs,
    bias_objective,
    bin_residuals,
    calibrate,
    default_bin_centers,
    fit_bias_map,
    fit_pixel_bias,
    fit_sigma_quadratic,
    pooled_sigma,
)
from depthcal.error_model import DepthFrame, NoiseModel, PixelBias, SigmaSample
from depthcal.errors import DegenerateSystemError, InsufficientDataError, TooFewDistancesError
from depthcal.geometry import CameraIntrinsics, PlaneHessian, RigidTransform, reference_depth_map, transform_plane
from depthcal.simulator import (
    GroundTruthBiasField,
    SimConfig,
    camera_mount,
    random_wall_planes,
    simulate_frame,
    simulate_sequence,
    smooth_bias_field,
    wall_planes,
)

from conftest import small_sequence

NOISE = NoiseModel(0.0007, 0.0, 0.002)


def measured_domain_pairs(rng, coef, n, noise=NOISE, lo=0.5, hi=4.5):
    """Pairs with z - mu(z) = z* + sigma(z) eps, measured depths uniform on [lo, hi]."""
    a, b, c = coef
    z = rng.uniform(lo, hi, n)
    zr = z - (a * z * z + b * z + c) - noise(z) * rng.standard_normal(n)
    return [DepthPair(float(p), float(q)) for p, q in zip(z, zr)]


# --- accumulation and binning -------------------------------------------------


def test_accumulate_examples():
    K = CameraIntrinsics(20, 20, 3.5, 2.5, 8, 6)
    wall = PlaneHessian([0, 0, 1], 2.0)
    store = PairStore(8, 6)
    accumulate_pairs(DepthFrame(np.zeros((6, 8))), wall, K, store)
    assert len(store) == 0

    accumulate_pairs(DepthFrame(np.full((6, 8), 2.0)), wall, K, store)
    assert len(store) == 48
    assert store.pairs(5, 4) == [DepthPair(2.0, 2.0)]

    depths = np.full((6, 8), 2.0)
    depths[1, 3] = 2.03
    store = accumulate_pairs(DepthFrame(depths), wall, K, PairStore(8, 6))
    assert store.pairs(3, 1) == [DepthPair(2.03, 2.0)]


def test_accumulate_gates():
    K = CameraIntrinsics(20, 20, 1.5, 0.5, 4, 2)
    wall = PlaneHessian([0, 0, 1], 2.0)
    depths = np.array([[2.0, 2.6, 1.6, 2.0], [7.0, 2.0, 2.0, 0.0]])
    store = accumulate_pairs(DepthFrame(depths), wall, K, PairStore(4, 2), max_range=6.0)
    # 2.6 is beyond the 0.5 m outlier gate, 7.0 beyond max range, 0 invalid
    np.testing.assert_array_equal(store.counts(), [[1, 0, 1, 1], [0, 1, 1, 0]])


def test_accumulate_matches_simulated_bias():
    K = CameraIntrinsics(20, 20, 3.5, 2.5, 8, 6)
    ext = camera_mount()
    coef = np.zeros((6, 8, 3))
    coef[2, 4, 2] = 0.03
    config = SimConfig(K, wall_planes(ext, [2.0]), ext, noise=(0, 0, 0))
    frame, wall = simulate_frame(config, 0, GroundTruthBiasField(coef))
    store = accumulate_pairs(frame, transform_plane(wall, ext), K, PairStore(8, 6))
    (pair,) = store.pairs(4, 2)
    assert pair.reference == pytest.approx(2.0, abs=1e-12)
    assert pair.measured == pytest.approx(2.03, abs=1e-12)


def _store(pairs_by_pixel, width=4, height=1):
    store = PairStore(width, height)
    for p, pairs in pairs_by_pixel.items():
        for z, zr in pairs:
            store.add(p % width, p // width, DepthPair(z, zr))
    return store


def test_bin_examples():
    store = _store({0: [(1.0, 0.99), (3.0, 2.95)]})
    bins = bin_residuals(store, BinningConfig((1.0,), 0.5))
    np.testing.assert_allclose(bins.residuals(1.0)[1], [0.01])
    bins = bin_residuals(store, BinningConfig((1.0, 3.0), 0.5))
    np.testing.assert_allclose(bins.residuals(1.0)[1], [0.01])
    np.testing.assert_allclose(bins.residuals(3.0)[1], [0.05])


def test_bin_boundary_is_exclusive():
    store = _store({0: [(1.5, 1.5), (1.25, 1.2)]})
    bins = bin_residuals(store, BinningConfig((1.0, 2.0), 0.5))
    assert len(bins.residuals(1.0)[1]) == 1
    assert len(bins.residuals(2.0)[1]) == 0


def test_bin_counts_against_counting_oracle(rng):
    n = 200_000
    store = PairStore(50, 20)
    z = rng.uniform(0.5, 4.5, n)
    store.append(rng.integers(0, 1000, n), z, z - 0.01)
    config = BinningConfig.uniform(0.55, 4.45, 0.1, threshold=0.05)
    bins = bin_residuals(store, config)
    expected = n / len(config.bin_centers)
    for k, (pix, res) in zip(bins.centers, bins.sets):
        assert len(res) == np.count_nonzero(np.abs(z - k) < 0.05)
        assert abs(len(res) - expected) < 5 * np.sqrt(expected)


def test_overlapping_bins_share_pairs():
    store = _store({0: [(1.05, 1.0)]})
    bins = bin_residuals(store, BinningConfig((1.0, 1.1), 0.2))
    assert len(bins.residuals(1.0)[1]) == len(bins.residuals(1.1)[1]) == 1


# --- pooled sigma ------------------------------------------------------------


def two_pass_pooled(sets):
    ss, n = 0.0, 0
    for values in sets.values():
        m = sum(values) / len(values)
        ss += sum((x - m) ** 2 for x in values)
        n += len(values)
    return (ss / n) ** 0.5


def test_pooled_examples():
    bins = ResidualBins.from_sets({1.0: {0: [0.01, 0.03]}})
    s = pooled_sigma(bins, 1.0, 1)
    assert s.sigma == pytest.approx(0.01, rel=1e-12)
    assert s.count == 2

    bins = ResidualBins.from_sets({1.0: {0: [0.02] * 3, 1: [-0.5] * 4, 7: [1.25]}})
    assert pooled_sigma(bins, 1.0, 1).sigma == 0.0


def test_pooled_insufficient():
    bins = ResidualBins.from_sets({1.0: {0: [0.01, 0.03]}})
    with pytest.raises(InsufficientDataError):
        pooled_sigma(bins, 1.0, 3)
    with pytest.raises(InsufficientDataError):
        pooled_sigma(bins, 1.0, 2, ddof=1)


residual_sets = st.dictionaries(
    st.integers(0, 50), st.lists(st.floats(-0.1, 0.1), min_size=1, max_size=8), min_size=1, max_size=6
)


@settings(max_examples=200, deadline=None)
@given(residual_sets, st.floats(-1, 1), st.floats(-10, 10))
def test_pooled_invariance_and_equivariance(sets, offset, scale):
    base = pooled_sigma(ResidualBins.from_sets({2.0: sets}), 2.0, 1).sigma
    assert base == pytest.approx(two_pass_pooled(sets), rel=1e-9, abs=1e-15)

    p = min(sets)
    shifted = {**sets, p: [x + offset for x in sets[p]]}
    assert pooled_sigma(ResidualBins.from_sets({2.0: shifted}), 2.0, 1).sigma == pytest.approx(base, abs=1e-12)

    scaled = {q: [scale * x for x in v] for q, v in sets.items()}
    assert pooled_sigma(ResidualBins.from_sets({2.0: scaled}), 2.0, 1).sigma == pytest.approx(
        abs(scale) * base, rel=1e-9, abs=1e-14
    )


def test_pooled_sigma_on_simulated_data():
    """Dense wall sweep: each pooled bin has >= 1e4 samples and tracks the injected sigma."""
    K = CameraIntrinsics(40, 40, 15.5, 11.5, 32, 24)
    ext = camera_mount()
    config = SimConfig(K, wall_planes(ext, np.linspace(0.5, 4.5, 600)), ext, seed=4)
    truth = smooth_bias_field(K, 2)
    store = PairStore(K.width, K.height)
    for frame, wall in simulate_sequence(config, truth):
        accumulate_pairs(frame, transform_plane(wall, ext), K, store)
    binning = BinningConfig.uniform(1.0, 4.0, 0.5)
    bins = bin_residuals(store, binning)
    for k in binning.bin_centers:
        s = pooled_sigma(bins, k, 10_000, ddof=1)
        assert s.sigma == pytest.approx(0.002 + 0.0007 * k * k, rel=0.10)


# --- noise model fit ---------------------------------------------------------


def test_fit_sigma_exact():
    model = fit_sigma_quadratic([SigmaSample(k, 0.001 * k * k, 100) for k in (0.5, 1.0, 2.0, 3.5, 4.0)])
    assert (model.a, model.b, model.c) == pytest.approx((0.001, 0.0, 0.0), abs=1e-10)


def test_fit_sigma_residuals_orthogonal():
    samples = [SigmaSample(1, 0.003, 10), SigmaSample(2, 0.006, 10), SigmaSample(3, 0.011, 10)]
    model = fit_sigma_quadratic(samples)
    k = np.array([1.0, 2.0, 3.0])
    r = np.array([0.003, 0.006, 0.011]) - (model.a * k * k + model.b * k + model.c)
    X = np.column_stack([k * k, k, np.ones(3)])
    assert np.abs(X.T @ r).max() < 1e-9

    samples.append(SigmaSample(4, 0.015, 10))
    model = fit_sigma_quadratic(samples)
    k = np.array([1.0, 2.0, 3.0, 4.0])
    r = np.array([0.003, 0.006, 0.011, 0.015]) - (model.a * k * k + model.b * k + model.c)
    X = np.column_stack([k * k, k, np.ones(4)])
    assert np.abs(X.T @ r).max() < 1e-9


def test_fit_sigma_degenerate():
    with pytest.raises(DegenerateSystemError):
        fit_sigma_quadratic([SigmaSample(1, 0.003, 10), SigmaSample(2, 0.006, 10)])
    with pytest.raises(DegenerateSystemError):
        fit_sigma_quadratic([SigmaSample(1, 0.003, 10)] * 2 + [SigmaSample(2, 0.006, 10)])


# --- per-pixel bias fit ------------------------------------------------------


def test_fit_pixel_bias_exact():
    z = np.array([1.0, 2.0, 3.0, 0.6, 1.4, 2.2, 2.7, 3.3, 3.9, 4.4])
    mu = 0.01 * z * z - 0.02 * z + 0.005
    pairs = [DepthPair(a, b) for a, b in zip(z, z - mu)]
    fit = fit_pixel_bias(pairs, NOISE)
    assert fit.as_tuple() == pytest.approx((0.01, -0.02, 0.005), abs=1e-9)

    zero = fit_pixel_bias([DepthPair(v, v) for v in z], NOISE)
    assert zero.as_tuple() == pytest.approx((0, 0, 0), abs=1e-15)


def test_fit_pixel_bias_guards():
    z = np.linspace(1.0, 3.0, 9)
    with pytest.raises(InsufficientDataError):
        fit_pixel_bias([DepthPair(v, v) for v in z], NOISE)
    z = np.linspace(2.0, 2.4, 12)
    with pytest.raises(InsufficientDataError):
        fit_pixel_bias([DepthPair(v, v) for v in z], NOISE)


def test_fit_pixel_bias_monte_carlo_coverage():
    """Noisy pairs over [0.5, 4.5]: the fitted mean stays within 3 sigma / sqrt(N/3) in >= 95% of trials."""
    rng = np.random.default_rng(2024)
    coef = (0.004, -0.006, 0.01)
    zz = np.linspace(1.0, 4.0, 61)
    tol = 3 * NOISE(zz) / np.sqrt(200 / 3)
    truth = np.polyval(coef, zz)
    hits = 0
    for _ in range(100):
        fit = fit_pixel_bias(measured_domain_pairs(rng, coef, 200), NOISE)
        hits += np.all(np.abs(np.polyval(fit.as_tuple(), zz) - truth) < tol)
    assert hits >= 95


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(10, 40))
def test_fit_is_a_minimum(seed, n):
    rng = np.random.default_rng(seed)
    coef = rng.uniform([-0.01, -0.02, -0.05], [0.01, 0.02, 0.05])
    pairs = measured_domain_pairs(rng, coef, n)
    z = [p.measured for p in pairs]
    zr = [p.reference for p in pairs]
    fit = np.array(fit_pixel_bias(pairs, NOISE).as_tuple())
    best = bias_objective(fit, z, zr, NOISE)
    for i in range(3):
        for step in (-1e-4, 1e-4):
            trial = fit.copy()
            trial[i] += step
            assert bias_objective(trial, z, zr, NOISE) >= best


def test_objective_gradient_matches_finite_differences(rng):
    pairs = measured_domain_pairs(rng, (0.003, 0.0, 0.01), 30)
    z = np.array([p.measured for p in pairs])
    zr = np.array([p.reference for p in pairs])
    A, rhs = _weighted_normal_system(z, z - zr, 1.0 / NOISE(z) ** 2)
    for _ in range(10):
        theta = rng.uniform(-0.05, 0.05, 3)
        analytic = 2.0 * (A @ theta - rhs)
        h = 1e-6
        numeric = np.array(
            [
                (bias_objective(theta + h * e, z, zr, NOISE) - bias_objective(theta - h * e, z, zr, NOISE)) / (2 * h)
                for e in np.eye(3)
            ]
        )
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6)


def test_fit_bias_map_matches_pixel_fits(rng):
    store = PairStore(3, 2)
    for p in range(6):
        n = [25, 9, 40, 12, 30, 18][p]
        lo = [0.5, 0.5, 2.0, 1.0, 0.5, 3.0][p]
        hi = [4.5, 4.5, 2.3, 4.0, 1.2, 4.5][p]
        pairs = measured_domain_pairs(rng, rng.uniform(-0.01, 0.01, 3), n, lo=lo, hi=hi)
        store.append([p] * n, [q.measured for q in pairs], [q.reference for q in pairs])
    bias_map = fit_bias_map(store, NOISE)
    for v in range(2):
        for u in range(3):
            try:
                expected = fit_pixel_bias(store.pairs(u, v), NOISE).as_tuple()
            except InsufficientDataError:
                assert not bias_map.valid[v, u]
                assert bias_map.pixel(u, v).as_tuple() == (0.0, 0.0, 0.0)
            else:
                assert bias_map.valid[v, u]
                np.testing.assert_allclose(bias_map.pixel(u, v).as_tuple(), expected, rtol=1e-8, atol=1e-12)
    assert bias_map.valid.tolist() == [[True, False, False], [True, True, True]]


# --- end to end --------------------------------------------------------------


def test_default_bins():
    centers = default_bin_centers()
    assert centers[0] == 0.4 and centers[-1] == 5.0 and len(centers) == 47


def test_too_few_distances(small_camera):
    ext = camera_mount()
    config = SimConfig(small_camera, wall_planes(ext, [2.0, 2.0]), ext, noise=(0, 0, 0))
    truth = GroundTruthBiasField.constant(small_camera, PixelBias())
    obs = simulate_sequence(config, truth)
    with pytest.raises(TooFewDistancesError):
        calibrate(obs[:1], ext, small_camera)
    with pytest.raises(TooFewDistancesError):
        calibrate(obs, ext, small_camera)
    with pytest.raises(TooFewDistancesError):
        calibrate([], ext, small_camera)


def test_zero_bias_zero_noise(small_camera):
    ext = camera_mount()
    config = SimConfig(small_camera, wall_planes(ext, np.linspace(0.5, 4.5, 120)), ext, noise=(0, 0, 0))
    truth = GroundTruthBiasField.constant(small_camera, PixelBias())
    result = calibrate(simulate_sequence(config, truth), ext, small_camera, BinningConfig(min_samples_per_bin=10))
    assert result.bias_map.valid.all()
    assert np.abs(result.bias_map.coefficients).max() < 1e-9
    assert result.noise(np.linspace(0.5, 4.5, 9)) == pytest.approx(result.noise.sigma_floor)


def test_calibrate_is_deterministic_and_order_independent(small_camera):
    obs, ext, _ = small_sequence(small_camera, seed=5, count=30)
    binning = BinningConfig(min_samples_per_bin=200)
    first = calibrate(obs, ext, small_camera, binning)
    again = calibrate(obs, ext, small_camera, binning)
    perm = np.random.default_rng(0).permutation(len(obs))
    shuffled = calibrate([obs[i] for i in perm], ext, small_camera, binning)
    for other in (again, shuffled):
        assert other.bias_map.coefficients.tobytes() == first.bias_map.coefficients.tobytes()
        assert other.noise == first.noise


def test_calibrate_report(small_camera):
    obs, ext, _ = small_sequence(small_camera, seed=5, count=30)
    result = calibrate(obs, ext, small_camera, BinningConfig(min_samples_per_bin=200))
    rep = result.report
    assert rep["frames"] == 30
    assert sum(b["count"] for b in rep["bins"]) <= rep["pairs"]
    assert rep["valid_pixels"] + rep["dropped_pixels"] + rep["unobserved_pixels"] == small_camera.width * small_camera.height
    used = [b for b in rep["bins"] if b["used"]]
    assert len(used) == len(rep["sigma_fit_residuals"]) >= 3


def test_bias_recovery_with_more_frames():
    """With 200 frames the bias-recovery target is met comfortably (cf. the 50-frame acceptance run)."""
    K = CameraIntrinsics(140, 140, 79.5, 59.5, 160, 120)
    ext = camera_mount()
    truth = smooth_bias_field(
        K, 11, a_range=(-0.004, 0.004), b_range=(-0.002, 0.002), c_range=(-0.02, 0.02), shape="bowl"
    )
    config = SimConfig(K, random_wall_planes(ext, 7, 200), ext, seed=7)
    result = calibrate(simulate_sequence(config, truth), ext, K)
    zz = np.linspace(1.0, 4.0, 31)[:, None, None]
    err = np.abs(result.bias_map.evaluate(zz) - truth.as_bias_map().evaluate(zz)).max(axis=0)
    valid = result.bias_map.valid
    assert np.mean(err[valid] < 0.005) >= 0.95


def test_sparse_bins_are_reported(small_camera):
    obs, ext, _ = small_sequence(small_camera, seed=5, count=10)
    with pytest.raises(DegenerateSystemError, match="depth bins"):
        calibrate(obs, ext, small_camera)

import numpy as np
import pytest
import sciris as sc
import reprise as rp


@pytest.fixture(scope="module")
def fixtures():
    return sc.loadjson(rp.paths.fixtures / "metrics_matrices.json")


def test_metrics_fixtures(fixtures):
    for case in fixtures:
        report = rp.compute_metrics(case["matrix"])
        for key, expected in case["expected"].items():
            got = getattr(report, key)
            if expected is None:
                assert got is None, f"{case['name']}: {key}"
            else:
                assert got == pytest.approx(expected, abs=1e-12), f"{case['name']}: {key}"


def test_metrics_identity_on_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(200):
        T = int(rng.integers(2, 9))
        report = rp.compute_metrics(rp.AccuracyMatrix.random(T, rng))
        assert report.A_T == pytest.approx(report.plasticity + (T - 1) / T * report.B_T, abs=1e-12)
        assert report.A_T >= report.plasticity - (T - 1) / T * report.F_T - 1e-12


@pytest.mark.parametrize("rows", [[], [[0.5], [0.5]], [[1.2]], [[0.5], [np.nan, 0.5]]])
def test_malformed_matrices(rows):
    with pytest.raises(rp.ContractError):
        rp.AccuracyMatrix(rows)


def test_matrix_access_and_csv(tmp_path):
    matrix = rp.AccuracyMatrix([[0.9], [0.7, 0.8]])
    assert matrix[1, 0] == 0.7
    with pytest.raises(rp.ContractError):
        matrix[0, 1]
    path = matrix.to_csv(tmp_path / "accuracy.csv")
    rows = rp.read_csv(path)
    assert rows[0].task_1 == ""
    assert rp.AccuracyMatrix.from_csv(path).to_list() == matrix.to_list()


def test_memory_weight_closed_form():
    assert rp.beta_t(0, 10) == 1.0
    assert rp.beta_t(6, 6) == pytest.approx(1 / 3)
    assert rp.memory_weight(6, 6, 6, 3) == pytest.approx(2 / 3)
    with pytest.raises(rp.ContractError):
        rp.beta_t(1, 0)
    with pytest.raises(rp.ContractError):
        rp.memory_weight(1, 1, 6, 0)


def test_static_memory_weight_is_lambda():
    verdict = rp.verify_prop2(rp.TinyConfig(task_size=6, memory_size=3), trials=50_000, seed=1)
    assert verdict.predicted_weight == pytest.approx(2.0)
    assert verdict.empirical_weight == pytest.approx(2.0)
    assert verdict.ci_halfwidth < 1e-6
    assert verdict.status == "pass"
    assert "memory_update" in verdict.meta
    with pytest.raises(rp.ContractError):
        rp.verify_prop2(rp.TinyConfig(t=1), trials=10)


def test_evolving_memory_weight():
    cfg = rp.TinyConfig(task_size=6, memory_size=3, n_past=6, incoming_batch_size=2, memory_batch_size=2, t=3)
    assert cfg.predicted_weight() == pytest.approx(2 / 3)
    verdict = rp.verify_prop1(cfg, trials=100_000, seed=2)
    assert verdict.status == "pass", verdict.to_dict()
    assert verdict.rel_norm < 0.05


def test_wrong_prediction_fails():
    cfg = rp.TinyConfig(t=3)
    verdict = rp.verify_prop1(cfg, trials=100_000, seed=3)
    shifted = rp.ErmVerdict("prop1", 1.0, verdict.empirical_weight, verdict.ci_halfwidth, verdict.cosine, verdict.rel_norm, 0.02, 0.999, verdict.n_trials)
    assert shifted.status == "fail"
    noisy = rp.ErmVerdict("prop1", 1.0, 1.0, 0.5, 1.0, 0.0, 0.02, 0.999, 10)
    assert noisy.status == "inconclusive"


def test_augmented_memory_weight():
    cfg = rp.TinyConfig(task_size=6, memory_size=3, image_shape=(4, 4), seed=4)
    verdict = rp.verify_prop3(cfg, rp.flip_group((4, 4)), trials=50_000, seed=5)
    assert verdict.status == "pass", verdict.to_dict()
    assert abs(verdict.meta["loss_z"]) < 5
    with pytest.raises(rp.ContractError):
        rp.verify_prop3(cfg, rp.flip_group((2, 2)), trials=10)


@pytest.fixture
def anchors():
    rng = np.random.default_rng(6)
    spec = rp.MlpSpec([3, 4, 2])
    w1 = rng.normal(size=spec.n_params)
    return spec, w1, w1 + rng.normal(size=spec.n_params), w1 + rng.normal(size=spec.n_params)


def test_plane_is_orthonormal(anchors):
    _, w1, w2, w2ft = anchors
    plane = rp.landscape_plane(w1, w2, w2ft)
    assert plane.e1 @ plane.e1 == pytest.approx(1.0)
    assert plane.e2 @ plane.e2 == pytest.approx(1.0)
    assert abs(plane.e1 @ plane.e2) < 1e-12
    np.testing.assert_array_equal(plane.point(0, 0), w1)
    for w in (w2, w2ft):
        assert plane.residual(w) < 1e-10


def test_degenerate_plane(anchors):
    _, w1, w2, _ = anchors
    with pytest.raises(rp.DegeneratePlaneError):
        rp.landscape_plane(w1, w1, w2)
    with pytest.raises(rp.DegeneratePlaneError):
        rp.landscape_plane(w1, w2, w1 + 2 * (w2 - w1))


def test_grid_origin_matches_direct_evaluation(anchors, tmp_path):
    spec, w1, w2, w2ft = anchors
    rng = np.random.default_rng(7)
    data = dict(
        first=[rp.Sample(rng.normal(size=3), int(rng.integers(0, 2))) for _ in range(5)],
        second=[rp.Sample(rng.normal(size=3), int(rng.integers(0, 2))) for _ in range(5)],
    )
    plane = rp.landscape_plane(w1, w2, w2ft)
    grid = rp.landscape_grid(plane, spec, data, resolution=9, anchors=[w2, w2ft])
    assert 0.0 in grid.a_values and 0.0 in grid.b_values
    direct = np.mean(rp.per_sample_losses(rp.Model(spec, w1), data["first"]))
    assert grid.loss_at("first", 0.0, 0.0) == direct
    gap = grid.gap_at(w1, "second", "first")
    assert gap == pytest.approx(np.mean(rp.per_sample_losses(rp.Model(spec, w1), data["second"])) - direct)

    rows = rp.read_csv(grid.to_csv(tmp_path / "grid.csv"))
    assert len(rows) == 81
    assert list(rows[0].keys()) == ["a", "b", "first", "second"]

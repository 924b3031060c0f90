import numpy as np
import pytest
import reprise as rp


def make_batch(rng, n_inputs, n_classes, n=4, logits=False):
    return [
        rp.Sample(
            rng.normal(size=n_inputs),
            int(rng.integers(0, n_classes)),
            stored_logits=rng.normal(size=n_classes) if logits else None,
        )
        for _ in range(n)
    ]


def test_spec_sizes():
    spec = rp.MlpSpec([2, 8, 2], activation="tanh")
    assert spec.n_params == 2 * 8 + 8 + 8 * 2 + 2
    assert spec.n_inputs == 2 and spec.n_outputs == 2
    layout = rp.param_layout(spec)
    assert [entry.name for entry in layout] == ["W0", "b0", "W1", "b1"]
    assert layout[-1].offset + layout[-1].shape[0] == spec.n_params


@pytest.mark.parametrize("sizes, activation", [([1], "relu"), ([3, 0, 2], "relu"), ([3, 2], "sigmoid")])
def test_spec_rejects(sizes, activation):
    with pytest.raises(rp.ContractError):
        rp.MlpSpec(sizes, activation=activation)


def test_init_is_glorot_and_seeded():
    spec = rp.MlpSpec([10, 30, 5])
    model = rp.init_model(spec, seed=1)
    again = rp.init_model(spec, seed=1)
    np.testing.assert_array_equal(model.params, again.params)
    (W0, b0), (W1, b1) = model.layers()
    assert np.all(np.abs(W0) <= np.sqrt(6 / 40))
    assert np.all(np.abs(W1) <= np.sqrt(6 / 35))
    assert not b0.any() and not b1.any()


def test_forward_linear_model():
    spec = rp.MlpSpec([2, 2])
    model = rp.Model(spec, [1.0, 2.0, 3.0, 4.0, 0.5, -0.5])
    logits = rp.forward(model, np.array([[1.0, 1.0]]))
    np.testing.assert_allclose(logits, [[3.5, 6.5]])
    assert rp.predict(model, np.array([[1.0, 1.0]]))[0] == 1


def test_forward_shape_mismatch():
    model = rp.init_model(rp.MlpSpec([3, 2]), seed=0)
    with pytest.raises(rp.ContractError):
        rp.forward(model, np.zeros((2, 4)))


@pytest.mark.parametrize("activation", rp.nn.ACTIVATIONS)
@pytest.mark.parametrize("loss", ["cross_entropy", "squared_error", "distillation_mse"])
def test_gradients_match_finite_differences(activation, loss):
    rng = np.random.default_rng(2)
    spec = rp.MlpSpec([3, 5, 4], activation=activation)
    model = rp.init_model(spec, seed=rng)
    model.params += 0.1 * rng.normal(size=spec.n_params)
    batch = make_batch(rng, 3, 4, n=5, logits=True)
    assert rp.check_gradients(model, batch, rp.LossKind(loss)) < 1e-5


def test_cross_entropy_uniform_logits():
    model = rp.Model(rp.MlpSpec([2, 3]))  # All-zero parameters
    batch = [rp.Sample([1.0, 2.0], 0), rp.Sample([0.0, 1.0], 2)]
    loss, grad = rp.loss_and_grad(model, batch)
    assert loss == pytest.approx(np.log(3))
    assert grad.shape == (model.spec.n_params,)


def test_squared_error_uses_explicit_target():
    model = rp.Model(rp.MlpSpec([1, 1]), [1.0, 0.0])
    batch = [rp.Sample([2.0], 0, target=[0.5])]
    loss, _ = rp.loss_and_grad(model, batch, rp.LossKind.squared_error())
    assert loss == pytest.approx(1.5**2)


def test_distillation_needs_stored_logits():
    model = rp.init_model(rp.MlpSpec([2, 2]), seed=0)
    with pytest.raises(rp.ContractError):
        rp.loss_and_grad(model, [rp.Sample([0.0, 1.0], 0)], rp.LossKind.distillation_mse())


def test_distillation_zero_at_stored_logits():
    model = rp.init_model(rp.MlpSpec([2, 3]), seed=0)
    x = np.array([0.3, -0.2])
    sample = rp.Sample(x, 1, stored_logits=rp.forward(model, x)[0])
    loss, grad = rp.loss_and_grad(model, [sample], rp.LossKind.distillation_mse(0.3))
    assert loss == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(grad, 0.0, atol=1e-15)


def test_empty_batch_rejected():
    model = rp.init_model(rp.MlpSpec([2, 2]), seed=0)
    with pytest.raises(rp.ContractError):
        rp.loss_and_grad(model, [])


def test_nonfinite_raises_numeric_error():
    model = rp.Model(rp.MlpSpec([1, 2]), [1e308, 1e308, 0.0, 0.0])
    with pytest.raises(rp.NumericError):
        rp.loss_and_grad(model, [rp.Sample([1e10], 0)])


def test_sgd_step():
    np.testing.assert_allclose(rp.sgd_step([1.0, 2.0], [1.0, -1.0], 0.5), [0.5, 2.5])
    with pytest.raises(rp.ContractError):
        rp.sgd_step([1.0], [1.0, 2.0], 0.1)
    with pytest.raises(rp.ContractError):
        rp.sgd_step([1.0], [1.0], 0.0)


def test_accuracy():
    model = rp.Model(rp.MlpSpec([1, 2]), [-1.0, 1.0, 0.0, 0.0])
    samples = [rp.Sample([1.0], 1), rp.Sample([-1.0], 0), rp.Sample([2.0], 0)]
    assert rp.accuracy(model, samples) == pytest.approx(2 / 3)
    assert np.isnan(rp.accuracy(model, []))


def test_checkpoint_roundtrip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    model = rp.init_model(rp.MlpSpec([4, 3, 2], activation="tanh"), seed=rng)
    model.params += rng.normal(size=model.spec.n_params) * 1e-3
    path = rp.save_checkpoint(model, tmp_path / "model.ckpt")
    loaded = rp.load_checkpoint(path)
    assert loaded.spec == model.spec
    assert loaded.params.tobytes() == model.params.tobytes()


def test_checkpoint_bad_line(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_text("mlpspec 1,1 relu\n0.5\nnot-a-number\n")
    with pytest.raises(rp.FormatError, match="line 3"):
        rp.load_checkpoint(path)

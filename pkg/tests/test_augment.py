import numpy as np
import pytest
import reprise as rp


def image_sample(rng, side=4, label=0):
    return rp.Sample(rng.random(side * side), label, shape=(side, side))


def test_zero_magnitude_is_identity():
    rng = np.random.default_rng(0)
    x = rng.random(16)
    for op in rp.make_ops(domain="image"):
        np.testing.assert_array_equal(op.apply(x, 0, rng, shape=(4, 4)), x)
    for op in rp.make_ops(domain="vector"):
        np.testing.assert_array_equal(op.apply(x, 0, rng), x)


@pytest.mark.parametrize("magnitude", [-1, 31])
def test_magnitude_range(magnitude):
    with pytest.raises(rp.ContractError):
        rp.IMAGE_OPS["rotate"].apply(np.zeros(4), magnitude, shape=(2, 2))


def test_domain_guards():
    with pytest.raises(rp.ContractError):
        rp.IMAGE_OPS["rotate"].apply(np.zeros(4), 10)
    with pytest.raises(rp.ContractError):
        rp.VECTOR_OPS["gaussian_noise"].apply(np.zeros(4), 10, shape=(2, 2))
    with pytest.raises(rp.ContractError):
        rp.make_ops(["rotate"], domain="vector")


def test_horizontal_flip():
    x = np.arange(6) / 10.0
    out = rp.IMAGE_OPS["horizontal_flip"].apply(x, 14, shape=(2, 3))
    np.testing.assert_array_equal(out, [0.2, 0.1, 0.0, 0.5, 0.4, 0.3])


@pytest.mark.parametrize("name", list(rp.IMAGE_OPS))
def test_image_ops_stay_in_range(name):
    rng = np.random.default_rng(5)
    x = rng.random(64)
    out = rp.IMAGE_OPS[name].apply(x, 30, rng, shape=(8, 8))
    assert out.shape == x.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_policy_checks():
    ops = rp.make_ops(["identity", "gaussian_noise"], "vector")
    with pytest.raises(rp.ContractError):
        rp.AugPolicy(ops, p=3)
    with pytest.raises(rp.ContractError):
        rp.AugPolicy(ops, q=40)
    with pytest.raises(rp.ContractError):
        rp.AugPolicy(ops, target="all")
    with pytest.raises(rp.ContractError):
        rp.AugPolicy([rp.IMAGE_OPS["rotate"], rp.VECTOR_OPS["identity"]])
    policy = rp.AugPolicy(ops).with_strength(4, 14)
    assert policy.p == 2 and policy.q == 14
    assert policy.applies_to("memory") and policy.applies_to("incoming")
    assert rp.AugPolicy(ops, target="memory_only").applies_to("memory")
    assert not rp.AugPolicy(ops, target="memory_only").applies_to("incoming")


def test_rand_augment_applies_p_distinct_ops():
    rng = np.random.default_rng(1)
    batch = [image_sample(rng, side=3) for _ in range(5)]
    before = [s.features.copy() for s in batch]
    policy = rp.AugPolicy(rp.make_ops(["identity", "horizontal_flip"], "image"), p=2, q=14)
    out = rp.rand_augment_batch(batch, policy, rng)
    for sample, original, augmented in zip(batch, before, out):
        np.testing.assert_array_equal(sample.features, original)
        np.testing.assert_array_equal(augmented.features, original.reshape(3, 3)[:, ::-1].ravel())
        assert augmented.label == sample.label and augmented.shape == (3, 3)


def test_rand_augment_domain_mismatch():
    policy = rp.AugPolicy.from_names(["gaussian_noise"], domain="vector")
    with pytest.raises(rp.ContractError):
        rp.rand_augment_batch([image_sample(np.random.default_rng(0))], policy, np.random.default_rng(0))


def test_flip_group_table():
    group = rp.flip_group((4, 4))
    np.testing.assert_array_equal(group.table, [[0, 1], [1, 0]])
    assert group.identity == 0


def test_rotation_group_is_cyclic():
    group = rp.rotation_group((3, 3))
    expected = np.add.outer(np.arange(4), np.arange(4)) % 4
    np.testing.assert_array_equal(group.table, expected)
    with pytest.raises(rp.ContractError):
        rp.rotation_group((2, 3))


def test_not_a_group():
    with pytest.raises(rp.ContractError, match="not closed"):
        rp.FiniteGroup([rp.IMAGE_OPS["identity"], rp.IMAGE_OPS["translate_x"]], shape=(4, 4))


def test_trivial_group_and_orbit_losses():
    group = rp.trivial_group()
    assert len(group) == 1 and group.table.tolist() == [[0]]
    rng = np.random.default_rng(2)
    model = rp.init_model(rp.MlpSpec([16, 3]), seed=rng)
    sample = image_sample(rng, label=2)
    losses, mean = rp.group_orbit_losses(model, sample, rp.flip_group((4, 4)))
    assert losses.shape == (2,)
    assert mean == pytest.approx(losses.mean())
    assert losses[0] == pytest.approx(rp.per_sample_losses(model, [sample])[0])


@pytest.mark.parametrize(
    "op, shape",
    [
        (rp.IMAGE_OPS["gaussian_noise"], (4, 4)),
        (rp.IMAGE_OPS["brightness"], (4, 4)),
        (rp.IMAGE_OPS["contrast"], (4, 4)),
        (rp.VECTOR_OPS["gaussian_noise"], None),
    ],
)
def test_displacement_grows_with_magnitude(op, shape):
    x = np.random.default_rng(2).random(16)
    changes = []
    for magnitude in range(0, 31, 2):
        out = op.apply(x, magnitude, np.random.default_rng(9), shape=shape)
        changes.append(np.abs(out - x).mean())
    assert changes[0] == 0.0
    assert np.all(np.diff(changes) >= -1e-12)
    assert changes[-1] > 0.0

import numpy as np
import pytest
from scipy import special
import reprise as rp


@pytest.fixture
def space():
    return rp.ActionSpace(iteration_arms=[1, 2, 3, 4, 5], aug_arms=[(1, 5), (1, 14), (2, 14)])


def test_action_space_checks():
    with pytest.raises(rp.ContractError):
        rp.ActionSpace(iteration_arms=[0, 1])
    with pytest.raises(rp.ContractError):
        rp.ActionSpace(iteration_arms=[1, 1])
    with pytest.raises(rp.ContractError):
        rp.ActionSpace(aug_arms=[])
    labels = rp.ActionSpace([1, 2], [(1, 5)]).labels()
    assert labels == ["p_iter_1", "p_iter_2", "p_aug_1_5"]


def test_iteration_sets(space):
    # Memory overfitted: fewer iterations are better
    assert rp.action_sets(2, 0.95, 0.9, space, "iter") == ([0, 1], [3, 4])
    # Memory underfitted: more iterations are better
    assert rp.action_sets(2, 0.5, 0.9, space, "iter") == ([3, 4], [0, 1])
    assert rp.action_sets(2, 0.9, 0.9, space, "iter") == ([], [0, 1, 3, 4])


def test_augmentation_sets(space):
    # Memory overfitted: stronger augmentation is better
    assert rp.action_sets(1, 0.95, 0.9, space, "aug") == ([2], [0])
    assert rp.action_sets(1, 0.5, 0.9, space, "aug") == ([0], [2])
    with pytest.raises(rp.ContractError):
        rp.action_sets(3, 0.5, 0.9, space, "aug")


def test_set_log_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    weights = rng.normal(size=6)
    arm_set = [1, 4, 5]

    def objective(w):
        return np.log(special.softmax(w)[arm_set].sum())

    eps = 1e-6
    numeric = np.array([(objective(weights + eps * e) - objective(weights - eps * e)) / (2 * eps) for e in np.eye(6)])
    np.testing.assert_allclose(rp.softmax_set_log_grad(weights, arm_set), numeric, atol=1e-8)
    np.testing.assert_array_equal(rp.softmax_set_log_grad(weights, []), 0.0)


def test_bpg_update():
    weights = np.zeros(4)
    new = rp.bpg_update(weights, 0.2, [0], [3], lr_rl=1.0)
    probs = special.softmax(new)
    assert probs[0] > 0.25 > probs[3]
    np.testing.assert_array_equal(rp.bpg_update(weights, 0.0, [0], [3], 1.0), weights)
    with pytest.raises(rp.ContractError):
        rp.bpg_update(weights, 0.2, [0, 1], [1, 2], 1.0)


def test_reset(space):
    policy = rp.BanditPolicy(space)
    policy.update("iter", 0, 0.2)
    assert policy.weights["iter"].any()
    rp.reset_on_task_boundary(policy)
    np.testing.assert_allclose(policy.probs("iter"), 0.2)
    np.testing.assert_allclose(policy.probs("aug"), 1 / 3)


def test_policy_checks():
    with pytest.raises(rp.ContractError):
        rp.BanditPolicy(target_acc=1.0)
    with pytest.raises(rp.ContractError):
        rp.BanditPolicy(lr_rl=0.0)


def test_converges_to_target_arm():
    """Memory accuracy is 0.3 below K=5, 0.7 above and exactly the target at K=5"""
    policy = rp.BanditPolicy(rp.ActionSpace(), lr_rl=0.5, target_acc=0.5)
    rng = np.random.default_rng(0)
    for _ in range(2000):
        action = rp.sample_action(policy, rng)
        mem_acc = 0.5 if action.K == 5 else 0.3 if action.K < 5 else 0.7
        policy.update("iter", action.i_iter, mem_acc)
    probs = policy.probs("iter")
    assert np.argmax(probs) in [3, 4, 5]
    assert probs[3:6].sum() > 0.8


def test_sample_action_frequencies():
    space = rp.ActionSpace(iteration_arms=[1, 2, 4, 8], aug_arms=[(1, 5), (1, 14), (2, 14)])
    policy = rp.BanditPolicy(space)
    policy.weights["iter"] = np.array([0.5, -1.0, 1.5, 0.0])
    policy.weights["aug"] = np.array([-0.5, 0.0, 1.0])
    rng = np.random.default_rng(3)
    n = 100_000
    draws = [rp.sample_action(policy, rng) for _ in range(n)]
    for which, key in [("iter", "i_iter"), ("aug", "i_aug")]:
        probs = policy.probs(which)
        counts = np.bincount([draw[key] for draw in draws], minlength=len(probs))
        sigma = np.sqrt(n * probs * (1 - probs))
        assert np.all(np.abs(counts - n * probs) <= 3 * sigma)


def test_hook_in_run_stream(tmp_path):
    stream = rp.make_synthetic_stream(2, 2, 10, 5, input_dim=4, class_separation=4.0, seed=0, batch_size=5)
    model = rp.init_model(rp.MlpSpec([4, 8, 4]), seed=0)
    aug = rp.AugPolicy.from_names(["gaussian_noise", "global_scale", "feature_dropout"], "vector")
    cfg = rp.RehearsalConfig(k=1, incoming_batch_size=5, memory_batch_size=5, memory_capacity=10, aug=aug)
    space = rp.ActionSpace(iteration_arms=[1, 2, 3], aug_arms=[(1, 5), (2, 14), (3, 14)])
    hook = rp.TunerHook(rp.BanditPolicy(space), seed=1)
    result = rp.run_stream(stream, cfg, model, seed=0, hooks=hook)

    # The first batch has no memory samples and gives no update
    assert hook.n_skipped == 1
    assert len(hook.rows) == 7
    assert [event.task for event in hook.events if event.event == "reset"] == [0, 1]
    assert len(result.trace) == sum(row["K"] for row in hook.rows) + result.trace[0].K_chosen
    for row in hook.rows:
        records = [rec for rec in result.trace if rec.t == row["batch"]]
        assert {(rec.K_chosen, rec.P_chosen, rec.Q_chosen) for rec in records} == {(row["K"], row["P"], row["Q"])}
        assert row["r"] == pytest.approx(abs(row["A_M"] - 0.9))

    rows = rp.read_csv(hook.to_csv(tmp_path / "tuner.csv"))
    assert list(rows[0].keys()) == hook.fieldnames()
    total = sum(float(rows[-1][label]) for label in space.labels() if label.startswith("p_iter"))
    assert total == pytest.approx(1.0)

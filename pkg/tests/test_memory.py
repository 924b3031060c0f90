import numpy as np
import pytest
import reprise as rp


def items(n, task_id=0):
    return [rp.Sample([float(i)], i % 2, task_id=task_id, uid=i) for i in range(n)]


def test_fills_then_holds_capacity():
    mem = rp.ReservoirMemory(capacity=5, seed=0)
    rp.reservoir_update(mem, items(3))
    assert [s.uid for s in mem.items] == [0, 1, 2]
    assert not mem.is_full
    rp.reservoir_update(mem, items(50))
    assert len(mem) == 5 and mem.is_full
    assert mem.n_seen == 53


def test_zero_capacity_stores_nothing():
    mem = rp.ReservoirMemory(capacity=0, seed=0)
    rp.reservoir_update(mem, items(10))
    assert len(mem) == 0 and mem.n_seen == 10
    assert rp.retrieve(mem, 3, np.random.default_rng(0)) == []
    with pytest.raises(rp.ContractError):
        rp.ReservoirMemory(capacity=-1)


def test_reservoir_index_probability():
    rng = np.random.default_rng(1)
    assert rp.reservoir_index(2, 5, rng) == 2
    kept = [rp.reservoir_index(9, 3, rng) >= 0 for _ in range(20000)]
    assert np.mean(kept) == pytest.approx(0.3, abs=0.02)


def test_memory_inclusion_is_uniform():
    n_trials, capacity, n_items = 2000, 3, 6
    counts = np.zeros(n_items)
    for trial in range(n_trials):
        mem = rp.ReservoirMemory(capacity, seed=trial)
        rp.reservoir_update(mem, items(n_items))
        for sample in mem.items:
            counts[sample.uid] += 1
    np.testing.assert_allclose(counts / n_trials, 0.5, atol=0.06)


def test_vectorized_trials():
    held = rp.reservoir_trials(2, 4, 200_000, 0)
    assert held.shape == (200_000, 2)
    assert np.all(held[:, 0] != held[:, 1])
    freq = np.bincount(held.ravel(), minlength=4) / 200_000
    np.testing.assert_allclose(freq, 0.5, atol=0.006)


def test_stored_logits():
    model = rp.Model(rp.MlpSpec([1, 2]), [1.0, -1.0, 0.0, 0.0])
    mem = rp.ReservoirMemory(capacity=2, seed=0, store_logits=True)
    with pytest.raises(rp.ContractError):
        rp.reservoir_update(mem, items(1))
    rp.reservoir_update(mem, items(2), model=model)
    np.testing.assert_allclose(mem.items[1].stored_logits, [1.0, -1.0])


def test_retrieve_random_without_replacement():
    mem = rp.ReservoirMemory(capacity=10, seed=0)
    rp.reservoir_update(mem, items(10))
    batch = rp.retrieve_random(mem, 6, np.random.default_rng(3))
    assert len({s.uid for s in batch}) == 6
    assert len(rp.retrieve_random(mem, 50, np.random.default_rng(3))) == 10


def test_mir_prefers_interfered_samples():
    model = rp.Model(rp.MlpSpec([1, 2]))
    mem = rp.ReservoirMemory(capacity=4, seed=0)
    rp.reservoir_update(mem, [rp.Sample([x], 0, uid=i) for i, x in enumerate([-1.0, 1.0, 2.0, -2.0])])
    incoming = [rp.Sample([1.0], 1)]
    policy = rp.RetrievalPolicy.mir(4)
    chosen = rp.retrieve_mir(mem, model, incoming, 1.0, policy, 2, np.random.default_rng(0))
    assert [s.uid for s in chosen] == [2, 1]
    np.testing.assert_array_equal(model.params, 0.0)


def test_mir_without_step_keeps_draw_order():
    mem = rp.ReservoirMemory(capacity=8, seed=0)
    rp.reservoir_update(mem, items(8))
    model = rp.init_model(rp.MlpSpec([1, 2]), seed=0)
    policy = rp.RetrievalPolicy.mir(5)
    chosen = rp.retrieve_mir(mem, model, items(2), 0.0, policy, 3, np.random.default_rng(4))
    expected = np.random.default_rng(4).choice(8, size=5, replace=False)[:3]
    assert [s.uid for s in chosen] == expected.tolist()


def test_mir_policy_checks():
    with pytest.raises(rp.ContractError):
        rp.RetrievalPolicy("most_recent")
    with pytest.raises(rp.ContractError):
        rp.RetrievalPolicy.mir(5).validate(10)
    with pytest.raises(rp.ContractError):
        rp.retrieve_mir(rp.ReservoirMemory(3), None, [], 0.1, rp.RetrievalPolicy.mir(), 2, np.random.default_rng(0))


def test_memory_csv(tmp_path):
    mem = rp.ReservoirMemory(capacity=3, seed=0)
    rp.reservoir_update(mem, items(3, task_id=1))
    rows = rp.read_csv(rp.memory_to_csv(mem, tmp_path / "memory.csv"))
    assert [row.insertion_step for row in rows] == ["0", "1", "2"]
    assert mem.class_counts() == {0: 2, 1: 1}

import numpy as np
import pytest
import reprise as rp


@pytest.fixture(scope="module")
def stream_args():
    return dict(
        num_tasks=3,
        classes_per_task=2,
        samples_per_class_train=7,
        samples_per_class_test=4,
        input_dim=5,
        class_separation=4.0,
        seed=11,
        batch_size=4,
    )


def merged(base, **kwargs):
    return {**base, **kwargs}


def drain(stream):
    batches = []
    while (batch := stream.next_batch()) is not None:
        batches.append((stream.task_index, stream.new_task, batch))
    return batches


def test_single_pass_no_repeats(stream_args):
    stream = rp.make_synthetic_stream(**stream_args)
    batches = drain(stream)
    uids = [sample.uid for _, _, batch in batches for sample in batch]
    assert len(uids) == stream.n_train == 3 * 2 * 7
    assert len(set(uids)) == len(uids)
    assert stream.next_batch() is None


def test_batches_never_span_tasks(stream_args):
    stream = rp.make_synthetic_stream(**stream_args)
    batches = drain(stream)
    for task_index, _, batch in batches:
        assert {sample.task_id for sample in batch} == {task_index}
        assert len(batch) <= 4
    # 14 samples per task in batches of 4: 4, 4, 4, 2
    assert [len(batch) for t, _, batch in batches if t == 0] == [4, 4, 4, 2]
    assert [t for t, new, _ in batches if new] == [0, 1, 2]


def test_tasks_are_disjoint_classes(stream_args):
    stream = rp.make_synthetic_stream(**stream_args)
    assert stream.n_classes == 6
    assert [sorted(task.classes) for task in stream.tasks] == [[0, 1], [2, 3], [4, 5]]
    with pytest.raises(rp.ContractError):
        rp.TaskStream([stream.tasks[0], stream.tasks[0]])


def test_same_seed_same_stream(stream_args):
    first = drain(rp.make_synthetic_stream(**stream_args))
    second = drain(rp.make_synthetic_stream(**stream_args))
    for (_, _, a), (_, _, b) in zip(first, second):
        np.testing.assert_array_equal([s.features for s in a], [s.features for s in b])


def test_restart_and_validation(stream_args):
    stream = rp.make_synthetic_stream(**stream_args)
    drain(stream)
    fresh = stream.restart()
    assert [s.uid for s in fresh.next_batch()] == [s.uid for s in drain(stream.restart())[0][2]]
    val = stream.validation(2)
    assert len(val) == 2 and val.n_classes == stream.n_classes
    with pytest.raises(rp.ContractError):
        stream.validation(4)


def test_imbalanced_train_sizes(stream_args):
    stream = rp.make_synthetic_stream(**merged(stream_args, train_sizes=[10, 3, 5]))
    assert [len(task.train) for task in stream.tasks] == [20, 6, 10]
    assert rp.lambda_ratio(stream, 0, 5) == pytest.approx(4.0)
    with pytest.raises(rp.ContractError):
        rp.make_synthetic_stream(**merged(stream_args, train_sizes=[10, 3]))


@pytest.mark.parametrize("separation", [0.0, -1.0])
def test_bad_separation(stream_args, separation):
    with pytest.raises(rp.ContractError):
        rp.make_synthetic_stream(**merged(stream_args, class_separation=separation))


def test_idx_roundtrip_and_split(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(40, 4, 4), dtype=np.uint8)
    labels = np.repeat(np.arange(4), 10).astype(np.uint8)
    rp.write_idx(tmp_path / "images.idx", images)
    rp.write_idx(tmp_path / "labels.idx", labels)
    np.testing.assert_array_equal(rp.read_idx(tmp_path / "images.idx", rp.stream.IDX_IMAGES_MAGIC), images)

    stream = rp.load_idx_stream(tmp_path / "images.idx", tmp_path / "labels.idx", 2, batch_size=5, seed=0, test_fraction=0.2)
    assert [sorted(task.classes) for task in stream.tasks] == [[0, 1], [2, 3]]
    assert [len(task.train) for task in stream.tasks] == [16, 16]
    assert [len(task.test) for task in stream.tasks] == [4, 4]
    sample = stream.tasks[1].train[0]
    assert sample.shape == (4, 4) and sample.task_id == 1
    assert 0.0 <= sample.features.min() and sample.features.max() <= 1.0


def test_idx_bad_magic(tmp_path):
    rp.write_idx(tmp_path / "labels.idx", np.zeros(3, dtype=np.uint8))
    with pytest.raises(rp.FormatError, match="byte offset 0"):
        rp.read_idx(tmp_path / "labels.idx", rp.stream.IDX_IMAGES_MAGIC)


def test_idx_truncated(tmp_path):
    path = rp.write_idx(tmp_path / "images.idx", np.zeros((2, 3, 3), dtype=np.uint8))
    data = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(data[:-4])
    with pytest.raises(rp.FormatError, match="truncated"):
        rp.read_idx(path, rp.stream.IDX_IMAGES_MAGIC)


def test_well_separated_classes_are_learned_quickly():
    stream = rp.make_synthetic_stream(1, 2, 100, 100, input_dim=2, class_separation=10.0, seed=0)
    train, test = stream.tasks[0].train, stream.tasks[0].test
    model = rp.init_model(rp.MlpSpec([2, 8, 2]), seed=0)
    rng = np.random.default_rng(0)
    for _ in range(200):
        batch = [train[i] for i in rng.choice(len(train), size=10, replace=False)]
        _, grad = rp.loss_and_grad(model, batch, rp.LossKind())
        model.params = rp.sgd_step(model.params, grad, 0.02)
    assert rp.accuracy(model, test) >= 0.95

"""
Class-incremental task streams: synthetic Gaussian blobs or IDX image files.

A stream is read once. Batches come from one task at a time in a seeded shuffled
order, and the stream flags the batch that opens each new task.
"""

import numpy as np
import sciris as sc
import reprise as rp

__all__ = [
    "Sample",
    "Task",
    "TaskStream",
    "make_synthetic_stream",
    "read_idx",
    "write_idx",
    "load_idx_stream",
    "next_batch",
    "lambda_ratio",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DEFAULT_BATCH_SIZE = 10


class Sample(sc.prettyobj):
    """
    One labeled example.

    Args:
        features (array): flat feature vector (images are flattened row-major)
        label (int): global class id
        task_id (int): index of the task the sample came from
        stored_logits (array): logits recorded when the sample entered memory (distillation rehearsal)
        target (array): real-valued regression target for the squared-error loss
        shape (tuple): original image shape, or None for plain vectors
        uid (int): index of the sample within its stream
    """

    def __init__(self, features, label, task_id=0, stored_logits=None, target=None, shape=None, uid=None):
        self.features = np.asarray(features, dtype=np.float64).ravel()
        self.label = int(label)
        self.task_id = int(task_id)
        self.stored_logits = None if stored_logits is None else np.asarray(stored_logits, dtype=np.float64)
        self.target = None if target is None else np.atleast_1d(np.asarray(target, dtype=np.float64))
        self.shape = None if shape is None else tuple(shape)
        self.uid = uid
        return

    def copy(self, **kwargs):
        """A shallow copy with some fields replaced, e.g. sample.copy(features=new)"""
        fields = dict(
            features=self.features,
            label=self.label,
            task_id=self.task_id,
            stored_logits=self.stored_logits,
            target=self.target,
            shape=self.shape,
            uid=self.uid,
        )
        fields.update(kwargs)
        return Sample(**fields)


class Task(sc.prettyobj):
    """A contiguous segment of the stream: train and test samples over a set of classes"""

    def __init__(self, id, train, test, classes):
        self.id = int(id)
        self.train = list(train)
        self.test = list(test)
        self.classes = set(int(c) for c in classes)
        for split, samples in [("train", self.train), ("test", self.test)]:
            labels = set(sample.label for sample in samples)
            if not labels <= self.classes:
                errormsg = f"Task {id} {split} labels {sorted(labels - self.classes)} are outside its classes {sorted(self.classes)}"
                raise rp.ContractError(errormsg)
        return


class TaskStream(sc.prettyobj):
    """
    An ordered sequence of tasks consumed as a single pass of incoming batches.

    Args:
        tasks (list): Task objects with disjoint class sets
        batch_size (int): size of each incoming batch
        seed (int): seed of the within-task shuffle
        n_classes (int): global class count (default: one more than the largest label)

    **Example**::

        stream = rp.make_synthetic_stream(2, 2, 50, 10, input_dim=5, class_separation=6, seed=0)
        while (batch := stream.next_batch()) is not None:
            if stream.new_task:
                print(f"Task {stream.task_index} starts")
    """

    def __init__(self, tasks, batch_size=None, seed=None, n_classes=None):
        self.tasks = list(tasks)
        self.batch_size = int(sc.ifelse(batch_size, DEFAULT_BATCH_SIZE))
        self.seed = seed
        if self.batch_size <= 0:
            raise rp.ContractError(f"Batch size must be positive, not {self.batch_size}")

        seen = set()
        for task in self.tasks:
            overlap = seen & task.classes
            if overlap:
                errormsg = f"Task {task.id} reuses classes {sorted(overlap)}; class-incremental tasks must be disjoint"
                raise rp.ContractError(errormsg)
            seen |= task.classes
        self.n_classes = int(sc.ifelse(n_classes, max(seen) + 1 if seen else 0))

        rng = rp.make_rng(seed)
        self.orders = [rng.permutation(len(task.train)) for task in self.tasks]
        self.cursor = (0, 0)
        self.task_index = None
        self.new_task = False
        return

    def __len__(self):
        return len(self.tasks)

    @property
    def n_train(self):
        return sum(len(task.train) for task in self.tasks)

    def next_batch(self):
        return next_batch(self)

    def restart(self):
        """An unread stream over the same tasks, with the same shuffle (a new run)"""
        return TaskStream(self.tasks, batch_size=self.batch_size, seed=self.seed, n_classes=self.n_classes)

    def validation(self, n_tasks):
        """An unread stream over the first n_tasks tasks"""
        if not 1 <= n_tasks <= len(self.tasks):
            errormsg = f"Validation stream needs 1..{len(self.tasks)} tasks, not {n_tasks}"
            raise rp.ContractError(errormsg)
        return TaskStream(self.tasks[:n_tasks], batch_size=self.batch_size, seed=self.seed, n_classes=self.n_classes)

    def test_sets(self, upto=None):
        """Test samples of each task up to and including task index upto"""
        upto = sc.ifelse(upto, len(self.tasks) - 1)
        return [task.test for task in self.tasks[: upto + 1]]


def next_batch(stream):
    """
    Return the next batch of at most batch_size samples of the current task, or None at the end.

    Batches never span two tasks. After the call, stream.new_task is True when the
    returned batch is the first one of its task, and stream.task_index names the task.
    """
    task_index, offset = stream.cursor
    while task_index < len(stream.tasks) and offset >= len(stream.tasks[task_index].train):
        task_index += 1
        offset = 0
    if task_index >= len(stream.tasks):
        stream.cursor = (len(stream.tasks), 0)
        stream.new_task = False
        return None

    order = stream.orders[task_index][offset : offset + stream.batch_size]
    batch = [stream.tasks[task_index].train[i] for i in order]
    stream.new_task = offset == 0
    stream.task_index = task_index
    stream.cursor = (task_index, offset + len(batch))
    return batch


def _class_means(n_classes, input_dim, separation, rng):
    """Class means on the sphere of radius `separation`, spread as far apart as possible"""
    if n_classes <= input_dim:
        q, _ = np.linalg.qr(rng.normal(size=(input_dim, input_dim)))
        directions = q[:, :n_classes].T * rng.choice([-1.0, 1.0], size=(n_classes, 1))
    else:
        candidates = rng.normal(size=(64 * n_classes, input_dim))
        candidates /= np.linalg.norm(candidates, axis=1, keepdims=True)
        chosen = [0]
        dists = np.linalg.norm(candidates - candidates[0], axis=1)
        for _ in range(n_classes - 1):
            nxt = int(np.argmax(dists))
            chosen.append(nxt)
            dists = np.minimum(dists, np.linalg.norm(candidates - candidates[nxt], axis=1))
        directions = candidates[chosen]
    return separation * directions


def make_synthetic_stream(
    num_tasks,
    classes_per_task,
    samples_per_class_train,
    samples_per_class_test,
    input_dim,
    class_separation,
    seed=None,
    batch_size=None,
    train_sizes=None,
):
    """
    Build a class-incremental stream of unit-covariance Gaussian blobs.

    Args:
        num_tasks (int): number of tasks
        classes_per_task (int): classes introduced by each task
        samples_per_class_train (int): training samples per class
        samples_per_class_test (int): test samples per class
        input_dim (int): feature dimension
        class_separation (float): radius of the sphere the class means lie on
        seed (int): seed for means, samples and shuffling
        batch_size (int): incoming batch size
        train_sizes (list): per-task override of samples_per_class_train (imbalanced streams)
    """
    counts = [num_tasks, classes_per_task, samples_per_class_train, samples_per_class_test, input_dim]
    if any(int(count) <= 0 for count in counts):
        errormsg = f"All counts must be positive, got {counts}"
        raise rp.ContractError(errormsg)
    if not class_separation > 0:
        raise rp.ContractError(f"Class separation must be positive, not {class_separation}")
    train_sizes = sc.ifelse(train_sizes, [samples_per_class_train] * num_tasks)
    if len(train_sizes) != num_tasks:
        errormsg = f"train_sizes has {len(train_sizes)} entries for {num_tasks} tasks"
        raise rp.ContractError(errormsg)

    rng = rp.make_rng(seed)
    n_classes = num_tasks * classes_per_task
    means = _class_means(n_classes, input_dim, class_separation, rng)

    tasks = []
    uid = 0
    for task_id in range(num_tasks):
        classes = list(range(task_id * classes_per_task, (task_id + 1) * classes_per_task))
        train, test = [], []
        for label in classes:
            for split, n in [(train, train_sizes[task_id]), (test, samples_per_class_test)]:
                points = means[label] + rng.normal(size=(n, input_dim))
                for point in points:
                    split.append(Sample(point, label, task_id=task_id, uid=uid))
                    uid += 1
        tasks.append(Task(task_id, train, test, classes))
    return TaskStream(tasks, batch_size=batch_size, seed=seed, n_classes=n_classes)


def read_idx(path, magic):
    """
    Read an IDX file (big-endian header, unsigned bytes) into a numpy array.

    Args:
        path (str/path): the file
        magic (int): the expected magic number (0x00000803 images, 0x00000801 labels)
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        errormsg = f"{path}: truncated before the magic number (file ends at byte offset {len(data)})"
        raise rp.FormatError(errormsg)
    found = int.from_bytes(data[:4], "big")
    if found != magic:
        errormsg = f"{path}: bad magic number 0x{found:08x} at byte offset 0, expected 0x{magic:08x}"
        raise rp.FormatError(errormsg)

    ndim = 3 if magic == IDX_IMAGES_MAGIC else 1
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        errormsg = f"{path}: truncated header, file ends at byte offset {len(data)} of {header_len}"
        raise rp.FormatError(errormsg)
    dims = tuple(int(d) for d in np.frombuffer(data, dtype=">u4", count=ndim, offset=4))
    n_values = int(np.prod(dims))
    if len(data) < header_len + n_values:
        errormsg = f"{path}: truncated data, file ends at byte offset {len(data)} but {header_len + n_values} bytes are needed"
        raise rp.FormatError(errormsg)
    values = np.frombuffer(data, dtype=np.uint8, count=n_values, offset=header_len)
    return values.reshape(dims)


def write_idx(path, array):
    """Write a uint8 array as IDX: 3-D arrays as images, 1-D arrays as labels"""
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim == 3:
        magic = IDX_IMAGES_MAGIC
    elif array.ndim == 1:
        magic = IDX_LABELS_MAGIC
    else:
        raise rp.ContractError(f"IDX arrays must be 1-D (labels) or 3-D (images), not {array.ndim}-D")
    header = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in array.shape)
    path = sc.makefilepath(path, makedirs=True)
    with open(path, "wb") as f:
        f.write(header + array.tobytes())
    return path


def _idx_samples(images_path, labels_path, uid_start=0):
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        errormsg = f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels"
        raise rp.FormatError(errormsg)
    shape = images.shape[1:]
    pixels = images.reshape(len(images), -1) / 255.0
    return [
        Sample(pixels[i], labels[i], shape=shape, uid=uid_start + i) for i in range(len(labels))
    ]


def load_idx_stream(
    images_path,
    labels_path,
    num_tasks,
    batch_size=None,
    seed=None,
    test_images_path=None,
    test_labels_path=None,
    test_fraction=0.0,
):
    """
    Build a class-incremental stream from IDX files (Split-MNIST style).

    Classes are sorted by id and split into num_tasks contiguous groups; pixels are
    scaled to [0, 1]. Test data comes from separate IDX files, or from a seeded
    held-out fraction of each task's records.
    """
    samples = _idx_samples(images_path, labels_path)
    test_samples = []
    if test_images_path is not None:
        test_samples = _idx_samples(test_images_path, test_labels_path, uid_start=len(samples))

    classes = sorted(set(sample.label for sample in samples))
    if not 1 <= num_tasks <= len(classes):
        errormsg = f"Cannot split {len(classes)} classes into {num_tasks} tasks"
        raise rp.ContractError(errormsg)
    groups = [list(group) for group in np.array_split(classes, num_tasks)]

    rng = rp.make_rng(seed)
    tasks = []
    for task_id, group in enumerate(groups):
        members = set(group)
        train = [s.copy(task_id=task_id) for s in samples if s.label in members]
        test = [s.copy(task_id=task_id) for s in test_samples if s.label in members]
        if test_fraction > 0:
            held_out = set(rng.permutation(len(train))[: int(round(test_fraction * len(train)))].tolist())
            test += [s for i, s in enumerate(train) if i in held_out]
            train = [s for i, s in enumerate(train) if i not in held_out]
        tasks.append(Task(task_id, train, test, group))
    n_classes = max(classes) + 1
    return TaskStream(tasks, batch_size=batch_size, seed=seed, n_classes=n_classes)


def lambda_ratio(stream, task_index, memory_capacity):
    """Task-to-memory size ratio: |train set of the task| / memory capacity"""
    if not memory_capacity > 0:
        raise rp.ContractError(f"Memory capacity must be positive, not {memory_capacity}")
    return len(stream.tasks[task_index].train) / memory_capacity

"""
Analysis tools: continual-learning metrics, the memory-weight closed forms, Monte-Carlo
checks of the rehearsal empirical risk, and loss-landscape planes.
"""

import numpy as np
import sciris as sc
import reprise as rp

__all__ = [
    "AccuracyMatrix",
    "MetricsReport",
    "compute_metrics",
    "beta_t",
    "memory_weight",
    "TinyConfig",
    "ErmVerdict",
    "verify_prop1",
    "verify_prop2",
    "verify_prop3",
    "LandscapePlane",
    "LandscapeGrid",
    "landscape_plane",
    "landscape_grid",
]

DEFAULT_WEIGHT_TOL = 0.02
DEFAULT_COS_TOL = 0.999
DEFAULT_CHUNK = 100_000
DEFAULT_RANGE = (-0.5, 1.5)
DEFAULT_RESOLUTION = 41


# %% Metrics


class AccuracyMatrix(sc.prettyobj):
    """
    Test accuracies a[i][j] on task j after training on task i, for j <= i.

    Args:
        rows (list): row i holds the i+1 accuracies a[i][0..i]; a square array is
            also accepted, in which case entries above the diagonal are ignored
    """

    def __init__(self, rows):
        rows = [list(row) for row in rows]
        self.T = len(rows)
        if not self.T:
            raise rp.ContractError("An accuracy matrix needs at least one task")
        square = all(len(row) == self.T for row in rows)
        self.rows = []
        for i, row in enumerate(rows):
            if not square and len(row) != i + 1:
                errormsg = f"Row {i} of the accuracy matrix has {len(row)} entries, expected {i + 1}"
                raise rp.ContractError(errormsg)
            values = np.array(row[: i + 1], dtype=np.float64)
            if not np.all(np.isfinite(values)) or np.any(values < 0) or np.any(values > 1):
                errormsg = f"Row {i} of the accuracy matrix has entries outside [0, 1]: {values.tolist()}"
                raise rp.ContractError(errormsg)
            self.rows.append(values)
        return

    def __getitem__(self, key):
        i, j = key
        if j > i:
            raise rp.ContractError(f"a[{i}][{j}] is undefined: task {j} comes after task {i}")
        return float(self.rows[i][j])

    @classmethod
    def random(cls, T, rng=None):
        """A matrix with uniform random entries, for property checks"""
        rng = rp.make_rng(rng)
        return cls([rng.random(i + 1) for i in range(T)])

    def diagonal(self):
        return np.array([row[i] for i, row in enumerate(self.rows)])

    def to_list(self):
        return [row.tolist() for row in self.rows]

    def to_csv(self, path):
        """One row per training stage; column task_j is empty before task j is learned"""
        fieldnames = ["after_task"] + [f"task_{j}" for j in range(self.T)]
        rows = []
        for i, row in enumerate(self.rows):
            rows.append(dict(after_task=i, **{f"task_{j}": float(val) for j, val in enumerate(row)}))
        return rp.write_csv(path, rows, fieldnames=fieldnames)

    @classmethod
    def from_csv(cls, path):
        records = rp.read_csv(path)
        rows = []
        for i, rec in enumerate(records):
            rows.append([float(rec[f"task_{j}"]) for j in range(i + 1)])
        return cls(rows)


class MetricsReport(sc.prettyobj):
    """
    End accuracy A_T, forgetting F_T, backward transfer B_T, plasticity and stability.

    A_T = plasticity + stability, where plasticity is the mean diagonal accuracy and
    stability is ((T-1)/T)*B_T. F_T, B_T and stability are None for a single task.
    """

    def __init__(self, T, A_T, F_T, B_T, plasticity, stability):
        self.T = T
        self.A_T = A_T
        self.F_T = F_T
        self.B_T = B_T
        self.plasticity = plasticity
        self.stability = stability
        return

    def to_dict(self):
        return dict(
            T=self.T,
            A_T=self.A_T,
            F_T=self.F_T,
            B_T=self.B_T,
            plasticity=self.plasticity,
            stability=self.stability,
        )


def compute_metrics(matrix):
    """
    Metrics of an accuracy matrix.

    Args:
        matrix (AccuracyMatrix/list): the matrix (lists are converted)

    **Example**::

        report = rp.compute_metrics([[0.9], [0.7, 0.8]])
        report.A_T  # 0.75
    """
    if not isinstance(matrix, AccuracyMatrix):
        matrix = AccuracyMatrix(matrix)
    T = matrix.T
    last = matrix.rows[-1]
    A = float(np.mean(last))
    plasticity = float(np.mean(matrix.diagonal()))
    if T == 1:
        return MetricsReport(T, A, None, None, plasticity, None)

    diag = matrix.diagonal()[:-1]
    B = float(np.mean(last[:-1] - diag))
    best = np.array([max(matrix.rows[l][i] for l in range(i, T - 1)) for i in range(T - 1)])
    F = float(-np.mean(last[:-1] - best))
    stability = (T - 1) / T * B
    return MetricsReport(T, A, F, B, plasticity, stability)


# %% Memory weight closed forms


def beta_t(n_cur, n_past):
    """Memory weight factor 1/(1 + 2*n_cur/n_past) after n_cur samples of the current task"""
    if not n_past > 0:
        errormsg = f"The memory weight is undefined without past data (n_past={n_past})"
        raise rp.ContractError(errormsg)
    if n_cur < 0:
        raise rp.ContractError(f"n_cur cannot be negative, not {n_cur}")
    return 1.0 / (1.0 + 2.0 * n_cur / n_past)


def memory_weight(n_cur, n_past, task_size, mem_capacity):
    """Effective weight beta_t*lambda of memory samples relative to current-task samples"""
    if not mem_capacity > 0:
        raise rp.ContractError(f"Memory capacity must be positive, not {mem_capacity}")
    return beta_t(n_cur, n_past) * task_size / mem_capacity


# %% Monte-Carlo verification


class TinyConfig(sc.prettyobj):
    """
    A small fixed problem for checking what rehearsal gradients are unbiased for.

    The memory starts full with memory_size samples standing for n_past samples of past
    tasks; the current task has task_size samples. Each trial evolves the reservoir
    through t incoming batches, then draws one incoming batch and one memory batch.

    Args:
        task_size (int): current-task data size
        memory_size (int): memory capacity, all filled with past data
        n_past (int): number of past samples seen by the reservoir (>= memory_size)
        incoming_batch_size (int): incoming batch size
        memory_batch_size (int): memory batch size
        t (int): reservoir updates before the gradient draw
        input_dim (int): feature dimension (ignored when image_shape is given)
        n_classes (int): output width of the linear model
        image_shape (tuple): make the samples images of this shape
        seed (int): seed of the data and the model
    """

    def __init__(
        self,
        task_size=6,
        memory_size=3,
        n_past=None,
        incoming_batch_size=2,
        memory_batch_size=2,
        t=0,
        input_dim=3,
        n_classes=4,
        image_shape=None,
        seed=0,
    ):
        self.task_size = int(task_size)
        self.memory_size = int(memory_size)
        self.n_past = int(sc.ifelse(n_past, task_size))
        self.incoming_batch_size = int(incoming_batch_size)
        self.memory_batch_size = int(memory_batch_size)
        self.t = int(t)
        self.image_shape = None if image_shape is None else tuple(image_shape)
        self.input_dim = int(np.prod(self.image_shape)) if self.image_shape else int(input_dim)
        self.n_classes = int(n_classes)
        self.seed = seed
        self.validate()
        self.build()
        return

    def validate(self):
        if self.memory_size < 1 or self.task_size < 1:
            raise rp.ContractError("Task and memory sizes must be positive")
        if self.n_past < self.memory_size:
            errormsg = f"The memory must start full of past data: n_past ({self.n_past}) < memory_size ({self.memory_size})"
            raise rp.ContractError(errormsg)
        if not 1 <= self.incoming_batch_size <= self.task_size:
            raise rp.ContractError(f"Incoming batch size must be in [1, {self.task_size}]")
        if not 1 <= self.memory_batch_size <= self.memory_size:
            raise rp.ContractError(f"Memory batch size must be in [1, {self.memory_size}]")
        if self.t < 0:
            raise rp.ContractError(f"t cannot be negative, not {self.t}")
        if self.n_classes < 2:
            raise rp.ContractError("The model needs at least two classes")
        return

    def build(self):
        """Draw the data and a linear model"""
        rng = rp.make_rng(self.seed)
        half = self.n_classes // 2
        n = self.memory_size + self.task_size
        if self.image_shape:
            features = rng.random((n, self.input_dim))
        else:
            features = rng.normal(size=(n, self.input_dim))
        labels = np.concatenate(
            [rng.integers(0, half, self.memory_size), rng.integers(half, self.n_classes, self.task_size)]
        )
        self.samples = [
            rp.Sample(
                features[i],
                int(labels[i]),
                task_id=0 if i < self.memory_size else 1,
                shape=self.image_shape,
                uid=i,
            )
            for i in range(n)
        ]
        spec = rp.MlpSpec([self.input_dim, self.n_classes])
        self.model = rp.init_model(spec, seed=rng)
        self.model.params += 0.1 * rng.normal(size=spec.n_params)  # Nonzero biases
        return

    @property
    def memory(self):
        return self.samples[: self.memory_size]

    @property
    def task(self):
        return self.samples[self.memory_size :]

    @property
    def n_cur(self):
        return self.t * self.incoming_batch_size

    @property
    def lam(self):
        return self.task_size / self.memory_size

    def predicted_weight(self):
        return memory_weight(self.n_cur, self.n_past, self.task_size, self.memory_size)

    def scale(self):
        """Factor relating the expected rehearsal gradient to the gradient of the weighted risk"""
        return (self.n_past + 2 * self.n_cur) / ((self.n_past + self.n_cur) * self.task_size)


class ErmVerdict(sc.prettyobj):
    """
    Outcome of a Monte-Carlo check.

    Attributes:
        kind (str): which check
        predicted_weight (float): predicted memory weight relative to current-task samples
        empirical_weight (float): the same ratio estimated from the trials
        ci_halfwidth (float): 3-sigma half-width of the empirical weight
        cosine (float): cosine between the mean empirical gradient and the analytic gradient
        rel_norm (float): relative norm of their difference (after scaling)
        status (str): "pass", "fail" or "inconclusive"
        meta (dict): configuration and notes
    """

    def __init__(self, kind, predicted_weight, empirical_weight, ci_halfwidth, cosine, rel_norm, weight_tol, cos_tol, n_trials, meta=None):
        self.kind = kind
        self.predicted_weight = predicted_weight
        self.empirical_weight = empirical_weight
        self.ci_halfwidth = ci_halfwidth
        self.cosine = cosine
        self.rel_norm = rel_norm
        self.weight_tol = weight_tol
        self.cos_tol = cos_tol
        self.n_trials = n_trials
        self.meta = sc.mergedicts(meta)
        self.status = self.judge()
        return

    @property
    def rel_error(self):
        return abs(self.empirical_weight - self.predicted_weight) / self.predicted_weight

    @property
    def passed(self):
        return self.status == "pass"

    def judge(self):
        if self.ci_halfwidth > self.weight_tol * self.predicted_weight:
            return "inconclusive"
        if self.rel_error <= self.weight_tol and self.cosine >= self.cos_tol:
            return "pass"
        return "fail"

    def to_dict(self):
        return dict(
            kind=self.kind,
            status=self.status,
            predicted_weight=self.predicted_weight,
            empirical_weight=self.empirical_weight,
            ci_halfwidth=self.ci_halfwidth,
            rel_error=self.rel_error,
            cosine=self.cosine,
            rel_norm=self.rel_norm,
            weight_tol=self.weight_tol,
            cos_tol=self.cos_tol,
            n_trials=self.n_trials,
            meta=self.meta,
        )


def _draw_subsets(rng, n_trials, n, k):
    """k distinct indices out of n, independently for each trial"""
    return np.argsort(rng.random((n_trials, n)), axis=1)[:, :k]


def _simulate_weights(cfg, n_trials, seed):
    """
    Per-trial weight of every sample in the rehearsal gradient.

    Columns 0..M-1 are the initial memory samples, the rest the current task. A weight
    is (copies in the incoming batch)/|B| + (copies in the memory batch)/|B_M|.
    """
    rng = rp.make_rng(seed)
    M, D = cfg.memory_size, cfg.task_size
    rows = np.arange(n_trials)
    memory = np.tile(np.arange(M), (n_trials, 1))
    n_seen = cfg.n_past
    for _ in range(cfg.t):
        batch = M + _draw_subsets(rng, n_trials, D, cfg.incoming_batch_size)
        for s in range(cfg.incoming_batch_size):
            slot = rng.integers(0, n_seen + 1, size=n_trials)
            keep = slot < M
            memory[rows[keep], slot[keep]] = batch[keep, s]
            n_seen += 1

    weights = np.zeros((n_trials, M + D))
    incoming = M + _draw_subsets(rng, n_trials, D, cfg.incoming_batch_size)
    slots = _draw_subsets(rng, n_trials, M, cfg.memory_batch_size)
    mem_batch = np.take_along_axis(memory, slots, axis=1)
    for col in range(cfg.incoming_batch_size):
        np.add.at(weights, (rows, incoming[:, col]), 1.0 / cfg.incoming_batch_size)
    for col in range(cfg.memory_batch_size):
        np.add.at(weights, (rows, mem_batch[:, col]), 1.0 / cfg.memory_batch_size)
    return weights


def _simulate_chunk(args):
    cfg, size, seed = args
    return _simulate_weights(cfg, size, seed)


def _chunk_sizes(trials, chunk):
    sizes = [chunk] * (trials // chunk)
    if trials % chunk:
        sizes.append(trials % chunk)
    return sizes


class _Moments(sc.prettyobj):
    """Running sums for the weight ratio and its delta-method standard error"""

    def __init__(self, n_cols):
        self.n = 0
        self.weight_sum = np.zeros(n_cols)
        self.sums = np.zeros(5)  # m, c, m^2, c^2, m*c
        return

    def add(self, weights, M):
        m = weights[:, :M].mean(axis=1)
        c = weights[:, M:].mean(axis=1)
        self.n += len(weights)
        self.weight_sum += weights.sum(axis=0)
        self.sums += [m.sum(), c.sum(), (m * m).sum(), (c * c).sum(), (m * c).sum()]
        return

    def ratio(self):
        """Ratio of mean memory-sample weight to mean current-sample weight, and its 3-sigma half-width"""
        n = self.n
        mm, mc = self.sums[0] / n, self.sums[1] / n
        var_m = self.sums[2] / n - mm**2
        var_c = self.sums[3] / n - mc**2
        cov = self.sums[4] / n - mm * mc
        R = mm / mc
        var_R = max(var_m - 2 * R * cov + R**2 * var_c, 0.0) / (n * mc**2)
        return float(R), float(3 * np.sqrt(var_R))


def _cosine(u, v):
    return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))


def _per_sample_grads(model, samples, kind):
    return np.vstack([rp.loss_and_grad(model, [sample], kind)[1] for sample in samples])


def verify_prop1(cfg=None, trials=100_000, seed=None, kind=None, weight_tol=None, cos_tol=None, chunk=None, parallel=False):
    """
    Check that online rehearsal with a reservoir memory is unbiased SGD for the risk
    sum(current-task losses) + beta_t*lambda*sum(initial-memory losses).

    The reservoir is simulated in every trial. The mean per-sample weight of initial
    memory samples relative to current-task samples estimates beta_t*lambda; the mean
    gradient is compared with the gradient of the weighted risk.

    Args:
        cfg (TinyConfig): the problem (default: the t=0 problem)
        trials (int): Monte-Carlo trials
        seed (int): root seed; chunks of trials get child seeds
        kind (LossKind): the loss
        weight_tol (float): relative tolerance on the weight
        cos_tol (float): minimum cosine
        chunk (int): trials per chunk
        parallel (bool): simulate chunks in a process pool
    """
    cfg = sc.ifelse(cfg, TinyConfig())
    chunk = int(sc.ifelse(chunk, DEFAULT_CHUNK))
    sizes = _chunk_sizes(int(trials), chunk)
    seeds = rp.child_seeds(seed, len(sizes))
    M = cfg.memory_size

    moments = _Moments(M + cfg.task_size)
    if parallel:
        results = sc.parallelize(_simulate_chunk, iterarg=[(cfg, size, s) for size, s in zip(sizes, seeds)])
        for weights in results:
            moments.add(weights, M)
    else:
        for size, s in zip(sizes, seeds):
            moments.add(_simulate_weights(cfg, size, s), M)

    grads = _per_sample_grads(cfg.model, cfg.samples, kind)
    mean_grad = moments.weight_sum / moments.n @ grads
    predicted = cfg.predicted_weight()
    analytic = grads[M:].sum(axis=0) + predicted * grads[:M].sum(axis=0)
    scaled = cfg.scale() * analytic
    R, halfwidth = moments.ratio()
    meta = dict(
        task_size=cfg.task_size,
        memory_size=M,
        n_past=cfg.n_past,
        n_cur=cfg.n_cur,
        t=cfg.t,
        lam=cfg.lam,
        beta=beta_t(cfg.n_cur, cfg.n_past),
        memory_update="reservoir update after each incoming batch, following the risk's own sampling model; training runs update once per incoming batch after all inner iterations",
    )
    return ErmVerdict(
        "prop1" if cfg.t else "prop2",
        predicted,
        R,
        halfwidth,
        _cosine(mean_grad, analytic),
        float(np.linalg.norm(mean_grad - scaled) / np.linalg.norm(scaled)),
        sc.ifelse(weight_tol, DEFAULT_WEIGHT_TOL),
        sc.ifelse(cos_tol, DEFAULT_COS_TOL),
        moments.n,
        meta=meta,
    )


def verify_prop2(cfg=None, trials=100_000, seed=None, **kwargs):
    """The static-memory case: the weight is exactly lambda"""
    cfg = sc.ifelse(cfg, TinyConfig())
    if cfg.t:
        errormsg = f"The static-memory check needs t=0, not t={cfg.t}"
        raise rp.ContractError(errormsg)
    return verify_prop1(cfg, trials=trials, seed=seed, **kwargs)


def verify_prop3(cfg=None, group=None, trials=100_000, seed=None, kind=None, weight_tol=None, cos_tol=None, chunk=None):
    """
    Check that augmented rehearsal (one random group element per step, applied to both
    batches) is unbiased SGD for the orbit-averaged risk.

    The memory is static (t must be 0). The analytic gradient averages every sample's
    gradient over the whole orbit by enumeration. The mean augmented objective over the
    trials is compared with its exact value in units of its standard error
    (meta["loss_z"]).
    """
    cfg = sc.ifelse(cfg, TinyConfig())
    group = sc.ifelse(group, rp.trivial_group(cfg.image_shape))
    if cfg.t:
        raise rp.ContractError(f"The augmented check uses a static memory (t=0), not t={cfg.t}")
    if group.shape != cfg.image_shape:
        raise rp.ContractError(f"Group acts on shape {group.shape}, samples have shape {cfg.image_shape}")
    chunk = int(sc.ifelse(chunk, DEFAULT_CHUNK))
    sizes = _chunk_sizes(int(trials), chunk)
    seeds = rp.child_seeds(seed, len(sizes))
    M, G = cfg.memory_size, len(group)

    orbits = [group.orbit(sample) for sample in cfg.samples]  # orbits[i][e]
    grads = np.stack([_per_sample_grads(cfg.model, [orbit[e] for orbit in orbits], kind) for e in range(G)])
    losses = np.stack([rp.per_sample_losses(cfg.model, [orbit[e] for orbit in orbits], kind) for e in range(G)])

    moments = _Moments(M + cfg.task_size)
    element_weights = np.zeros((G, M + cfg.task_size))
    loss_sum = 0.0
    loss_sq = 0.0
    for size, s in zip(sizes, seeds):
        weights = _simulate_weights(cfg, size, s)
        elements = rp.make_rng(rp.child_seeds(s, 1)[0]).integers(0, G, size=size)
        moments.add(weights, M)
        np.add.at(element_weights, elements, weights)
        values = np.einsum("ij,ij->i", weights, losses[elements])
        loss_sum += values.sum()
        loss_sq += (values**2).sum()

    n = moments.n
    mean_grad = np.einsum("ei,eip->p", element_weights / n, grads)
    orbit_grads = grads.mean(axis=0)
    analytic = orbit_grads[M:].sum(axis=0) + cfg.lam * orbit_grads[:M].sum(axis=0)
    scaled = analytic / cfg.task_size
    orbit_losses = losses.mean(axis=0)
    exact_loss = orbit_losses[M:].mean() + orbit_losses[:M].mean()
    mean_loss = loss_sum / n
    se = np.sqrt(max(loss_sq / n - mean_loss**2, 0.0) / n)
    R, halfwidth = moments.ratio()
    meta = dict(
        group=group.name,
        group_size=G,
        task_size=cfg.task_size,
        memory_size=M,
        lam=cfg.lam,
        loss_mean=float(mean_loss),
        loss_exact=float(exact_loss),
        loss_z=float((mean_loss - exact_loss) / se) if se > 0 else 0.0,
    )
    return ErmVerdict(
        "prop3",
        cfg.lam,
        R,
        halfwidth,
        _cosine(mean_grad, analytic),
        float(np.linalg.norm(mean_grad - scaled) / np.linalg.norm(scaled)),
        sc.ifelse(weight_tol, DEFAULT_WEIGHT_TOL),
        sc.ifelse(cos_tol, DEFAULT_COS_TOL),
        n,
        meta=meta,
    )


# %% Loss landscape


class LandscapePlane(sc.prettyobj):
    """
    A 2-D plane in parameter space: origin + a*e1 + b*e2 with orthonormal e1, e2.
    """

    def __init__(self, origin, e1, e2):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.e1 = np.asarray(e1, dtype=np.float64)
        self.e2 = np.asarray(e2, dtype=np.float64)
        return

    def point(self, a, b):
        if a == 0 and b == 0:
            return self.origin.copy()
        return self.origin + a * self.e1 + b * self.e2

    def project(self, w):
        """Plane coordinates (a, b) of the orthogonal projection of w"""
        diff = np.asarray(w, dtype=np.float64) - self.origin
        return float(diff @ self.e1), float(diff @ self.e2)

    def residual(self, w):
        """Distance from w to the plane"""
        a, b = self.project(w)
        return float(np.linalg.norm(self.point(a, b) - w))


def landscape_plane(w1, w2, w2ft):
    """
    The plane through three parameter vectors, by Gram-Schmidt on w2-w1 and w2ft-w1.

    Raises:
        DegeneratePlaneError: if w2 == w1 or w2ft - w1 is parallel to w2 - w1
    """
    w1, w2, w2ft = [np.asarray(w, dtype=np.float64) for w in (w1, w2, w2ft)]
    if not w1.shape == w2.shape == w2ft.shape or w1.ndim != 1:
        errormsg = f"Parameter vectors must be 1-D and of equal length, got {w1.shape}, {w2.shape}, {w2ft.shape}"
        raise rp.ContractError(errormsg)
    d1 = w2 - w1
    n1 = np.linalg.norm(d1)
    if n1 == 0:
        raise rp.DegeneratePlaneError("w2 equals w1, so the first plane direction is zero")
    e1 = d1 / n1
    d2 = w2ft - w1
    residual = d2 - (d2 @ e1) * e1
    n2 = np.linalg.norm(residual)
    if n2 <= 1e-12 * max(np.linalg.norm(d2), n1):
        raise rp.DegeneratePlaneError("w2ft - w1 is parallel to w2 - w1 (or zero); the plane is degenerate")
    e2 = residual / n2
    e2 -= (e2 @ e1) * e1  # Second pass keeps e1.e2 at rounding level
    e2 /= np.linalg.norm(e2)
    return LandscapePlane(w1, e1, e2)


def _axis(lo, hi, resolution):
    values = np.linspace(lo, hi, resolution)
    values[np.abs(values) <= 1e-12 * max(abs(lo), abs(hi), 1.0)] = 0.0
    return values


def _grid_row(a, plane, spec, datasets, b_values, kind):
    row = {name: np.zeros(len(b_values)) for name in datasets}
    for j, b in enumerate(b_values):
        model = rp.Model(spec, plane.point(a, b))
        for name, samples in datasets.items():
            row[name][j] = float(np.mean(rp.per_sample_losses(model, samples, kind)))
    return row


class LandscapeGrid(sc.prettyobj):
    """
    Mean losses of named datasets over a rectangular grid of a plane.

    Attributes:
        a_values, b_values (array): grid coordinates along e1 and e2
        losses (dict): dataset name -> array of shape (len(a_values), len(b_values))
    """

    def __init__(self, plane, a_values, b_values, losses):
        self.plane = plane
        self.a_values = np.asarray(a_values)
        self.b_values = np.asarray(b_values)
        self.losses = losses
        return

    def nearest(self, a, b):
        """Indices of the grid node nearest to (a, b)"""
        return int(np.argmin(np.abs(self.a_values - a))), int(np.argmin(np.abs(self.b_values - b)))

    def loss_at(self, name, a, b):
        i, j = self.nearest(a, b)
        return float(self.losses[name][i, j])

    def gap_at(self, w, minuend, subtrahend):
        """Loss difference between two datasets at the node nearest to the projection of w"""
        a, b = self.plane.project(w)
        return self.loss_at(minuend, a, b) - self.loss_at(subtrahend, a, b)

    def to_csv(self, path):
        names = list(self.losses.keys())
        rows = []
        for i, a in enumerate(self.a_values):
            for j, b in enumerate(self.b_values):
                rows.append(dict(a=float(a), b=float(b), **{name: float(self.losses[name][i, j]) for name in names}))
        return rp.write_csv(path, rows, fieldnames=["a", "b"] + names)


def landscape_grid(plane, model_spec, datasets, a_range=None, b_range=None, resolution=None, kind=None, anchors=None, parallel=False):
    """
    Evaluate mean losses on a grid of the plane.

    Ranges default to [-0.5, 1.5] times the largest anchor coordinate along each axis
    (anchors are parameter vectors, e.g. w2 and w2ft), or to [-0.5, 1.5] in absolute
    plane units without anchors. Axis values within rounding of zero are snapped to
    zero so that the node (0, 0) is exactly the origin.

    Args:
        plane (LandscapePlane): the plane
        model_spec (MlpSpec): architecture matching the parameter vectors
        datasets (dict): name -> list of samples
        a_range, b_range (tuple): (lo, hi) along e1 and e2
        resolution (int/tuple): nodes per axis
        kind (LossKind): the loss
        anchors (list): parameter vectors whose projections set the default ranges
        parallel (bool): evaluate rows in a process pool
    """
    resolution = sc.ifelse(resolution, DEFAULT_RESOLUTION)
    n_a, n_b = (resolution, resolution) if np.isscalar(resolution) else resolution
    scale_a, scale_b = 1.0, 1.0
    if anchors:
        coords = np.array([plane.project(w) for w in anchors])
        scale_a = max(np.abs(coords[:, 0]).max(), 1e-12)
        scale_b = max(np.abs(coords[:, 1]).max(), 1e-12)
    a_range = sc.ifelse(a_range, (DEFAULT_RANGE[0] * scale_a, DEFAULT_RANGE[1] * scale_a))
    b_range = sc.ifelse(b_range, (DEFAULT_RANGE[0] * scale_b, DEFAULT_RANGE[1] * scale_b))
    a_values = _axis(*a_range, n_a)
    b_values = _axis(*b_range, n_b)
    datasets = dict(datasets)
    if not datasets:
        raise rp.ContractError("A landscape grid needs at least one dataset")

    kwargs = dict(plane=plane, spec=model_spec, datasets=datasets, b_values=b_values, kind=kind)
    if parallel:
        rows = sc.parallelize(_grid_row, iterarg=list(a_values), kwargs=kwargs)
    else:
        rows = [_grid_row(a, **kwargs) for a in a_values]
    losses = {name: np.vstack([row[name] for row in rows]) for name in datasets}
    return LandscapeGrid(plane, a_values, b_values, losses)

"""
Run orchestration: single runs with artifacts, validation-stream sweeps, verification
suites and loss-landscape studies.
"""

import numpy as np
import sciris as sc
from scipy import stats
import reprise as rp

__all__ = [
    "make_stream",
    "make_model",
    "make_aug",
    "make_rehearsal_config",
    "make_tuner",
    "Run",
    "Sweep",
    "Landscape",
    "VERIFY_KINDS",
    "verify",
    "summarize_trace",
]

VERIFY_KINDS = ["prop1", "prop2", "prop3", "reservoir", "gradients", "metrics"]


# %% Builders


def _seeds(cfg):
    """Independent seeds for the stream, the model, the training loop and the tuner"""
    return sc.objdict(zip(["stream", "model", "train", "tuner"], rp.child_seeds(cfg["seed"], 4)))


def make_stream(cfg, seed=None):
    """The task stream described by the config"""
    s = cfg.section("stream")
    seed = sc.ifelse(seed, _seeds(cfg).stream)
    batch_size = cfg["rehearsal.incoming_batch_size"]
    if s.kind == "idx":
        return rp.load_idx_stream(
            s.images_path,
            s.labels_path,
            s.num_tasks,
            batch_size=batch_size,
            seed=seed,
            test_images_path=s.test_images_path,
            test_labels_path=s.test_labels_path,
            test_fraction=0.0 if s.test_images_path else s.test_fraction,
        )
    return rp.make_synthetic_stream(
        s.num_tasks,
        s.classes_per_task,
        s.samples_per_class_train,
        s.samples_per_class_test,
        s.input_dim,
        s.class_separation,
        seed=seed,
        batch_size=batch_size,
        train_sizes=s.train_sizes,
    )


def make_model(cfg, stream, seed=None):
    """An initialized MLP sized to the stream's features and classes"""
    n_inputs = len(stream.tasks[0].train[0].features)
    sizes = [n_inputs] + list(cfg["model.hidden"]) + [stream.n_classes]
    spec = rp.MlpSpec(sizes, activation=cfg["model.activation"])
    return rp.init_model(spec, seed=sc.ifelse(seed, _seeds(cfg).model))


def make_aug(cfg, domain):
    """The augmentation policy for data of the given domain ("image" or "vector")"""
    ops = cfg["aug.ops"]
    names = [name.strip() for name in ops.split(",") if name.strip()] if ops else None
    ops = rp.make_ops(names, domain)
    return rp.AugPolicy(ops, p=min(cfg["aug.p"], len(ops)), q=cfg["aug.q"], target=cfg["aug.target"])


def make_rehearsal_config(cfg, domain="vector", **kwargs):
    """A RehearsalConfig from the rehearsal and aug sections; kwargs override single fields"""
    r = cfg.section("rehearsal")
    loss = rp.LossKind(r.loss)
    memory_loss = rp.LossKind.distillation_mse(r.der_alpha) if r.der_alpha is not None else None
    retrieval = rp.RetrievalPolicy.mir(r.mir_candidates) if r.retrieval == "mir" else rp.RetrievalPolicy()
    aug = make_aug(cfg, domain) if cfg["aug.target"] != "none" else None
    fields = dict(
        k=r.k,
        lr=r.lr,
        incoming_batch_size=r.incoming_batch_size,
        memory_batch_size=r.memory_batch_size,
        memory_capacity=r.memory_capacity,
        loss=loss,
        memory_loss=memory_loss,
        alpha_rw=r.alpha_rw,
        aug=aug,
        retrieval=retrieval,
        offline_epochs=r.offline_epochs,
    )
    return rp.RehearsalConfig(**sc.mergedicts(fields, kwargs))


def make_tuner(cfg, seed=None, verbose=False):
    """A TunerHook from the tuner section"""
    t = cfg.section("tuner")
    space = rp.ActionSpace(t.iteration_arms, t.aug_arms)
    policy = rp.BanditPolicy(space, lr_rl=t.lr_rl, target_acc=t.target_acc)
    return rp.TunerHook(policy, seed=sc.ifelse(seed, _seeds(cfg).tuner), verbose=verbose)


def _domain(stream):
    return "image" if stream.tasks[0].train[0].shape is not None else "vector"


# %% Runs


class Run(sc.prettyobj):
    """
    One training run with all of its artifacts.

    Args:
        cfg (RunConfig): the configuration
        out_dir (str): run directory (default: output.dir of the config)
        verbose (bool): print progress
        run (bool): run immediately

    **Example**::

        cfg = rp.load_config("example.cfg", overrides=["rehearsal.k=10"])
        run = rp.Run(cfg, out_dir="runs/k10", run=True)
        print(run.metrics.A_T)
    """

    def __init__(self, cfg, out_dir=None, verbose=True, run=False):
        self.cfg = cfg
        self.out_dir = sc.path(sc.ifelse(out_dir, cfg["output.dir"]))
        self.verbose = verbose
        self.seeds = _seeds(cfg)
        self.stream = None
        self.model = None
        self.rehearsal = None
        self.hooks = None
        self.result = None
        self.metrics = None
        self.artifacts = {}
        self.manifest = None
        self.elapsed = None
        if run:
            self.run()
        return

    def log(self, string, color="green"):
        rp.log(string, color=color, verbose=self.verbose)
        return

    def make(self):
        """Build the stream, the model, the rehearsal config and the tuner"""
        self.stream = make_stream(self.cfg, seed=self.seeds.stream)
        self.model = make_model(self.cfg, self.stream, seed=self.seeds.model)
        self.rehearsal = make_rehearsal_config(self.cfg, domain=_domain(self.stream))
        if self.cfg["tuner.enabled"]:
            if self.rehearsal.aug is None:
                self.log("Tuner enabled with aug.target = none: (P, Q) choices are recorded but not applied", "yellow")
            self.hooks = make_tuner(self.cfg, seed=self.seeds.tuner, verbose=self.verbose)
        return

    def run(self):
        start = sc.tic()
        self.log(f"\nStarting run in {self.out_dir} (config {self.cfg.hash()[:12]})", color="blue")
        self.make()
        self.result = rp.run_stream(
            self.stream,
            self.rehearsal,
            self.model,
            seed=self.seeds.train,
            hooks=self.hooks,
            verbose=self.verbose,
        )
        self.metrics = self.result.metrics()
        self.log(f"A_T = {self.metrics.A_T:.4f}")
        self.save()
        self.elapsed = sc.toc(start, output=True, verbose=False)
        self.write_manifest()
        return self

    def _artifact(self, name, filename):
        path = self.out_dir / filename
        self.artifacts[name] = filename
        return path

    def save(self):
        """Write every artifact except the manifest"""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        sc.savetext(self._artifact("config", "config.txt"), self.cfg.to_text())
        self.result.accuracy_matrix().to_csv(self._artifact("accuracy", "accuracy.csv"))
        metrics = dict(
            accuracy_matrix=self.result.accuracy_matrix().to_list(),
            metrics=self.metrics.to_dict(),
            memory_gap=_json_float(self.result.memory_gap()),
        )
        sc.savejson(self._artifact("metrics", "metrics.json"), metrics)
        if self.cfg["output.trace"]:
            rp.trace_to_csv(self.result.trace, self._artifact("trace", "trace.csv"))
        if self.hooks is not None:
            self.hooks.to_csv(self._artifact("tuner", "tuner.csv"))
        if self.cfg["output.checkpoints"]:
            for i, model in enumerate(self.result.checkpoints):
                rp.save_checkpoint(model, self._artifact(f"checkpoint_{i}", f"checkpoints/task_{i}.ckpt"))
        return

    def write_manifest(self):
        self.manifest = dict(
            config_hash=self.cfg.hash(),
            seed=self.cfg["seed"],
            version=rp.__version__,
            duration=self.elapsed,
            artifacts=self.artifacts,
        )
        sc.savejson(self.out_dir / "manifest.json", self.manifest)
        return


def _json_float(value):
    return None if value is None or not np.isfinite(value) else float(value)


# %% Sweep


class Sweep(sc.prettyobj):
    """
    Offline tuning on a short validation stream: every (K, (P, Q)) grid point is run on
    the first validation_tasks tasks, and the points are ranked by end accuracy.

    Args:
        cfg (RunConfig): base configuration (the grid overrides K and the augmentation strength)
        k_values (list): K values (default: sweep.k_values)
        aug_arms (list): (P, Q) pairs (default: sweep.aug_arms)
        validation_tasks (int): tasks in the validation stream (default: sweep.validation_tasks)
        epochs (int): passes per validation task (default: sweep.epochs)
        out_dir (str): if given, each point writes its accuracy CSV to its own subdirectory
        parallel (bool): run grid points in a process pool
        die (bool): raise on the first failing point instead of recording it
        verbose (bool): print progress
        run (bool): run immediately
    """

    def __init__(
        self,
        cfg,
        k_values=None,
        aug_arms=None,
        validation_tasks=None,
        epochs=None,
        out_dir=None,
        parallel=False,
        die=True,
        verbose=True,
        run=False,
    ):
        # Grid
        self.cfg = cfg
        self.k_values = sc.tolist(sc.ifelse(k_values, cfg["sweep.k_values"]))
        self.aug_arms = [tuple(arm) for arm in sc.ifelse(aug_arms, cfg["sweep.aug_arms"])]
        self.validation_tasks = int(sc.ifelse(validation_tasks, cfg["sweep.validation_tasks"]))
        self.epochs = int(sc.ifelse(epochs, cfg["sweep.epochs"]))
        self.grid = [(k, arm) for k in self.k_values for arm in self.aug_arms]
        if not self.grid:
            raise rp.ContractError("The sweep grid is empty")

        # Run options
        self.out_dir = None if out_dir is None else sc.path(out_dir)
        self.parallel = parallel
        self.die = die
        self.verbose = verbose

        # Results
        self.results = []
        self.errors = []
        self.best = None
        if run:
            self.run()
        return

    def log(self, string, color="green"):
        rp.log(string, color=color, verbose=self.verbose)
        return

    def run_single(self, point):
        """Run one grid point on the validation stream"""
        k, (p, q) = point
        self.log(f"Sweep point K={k}, P={p}, Q={q}")
        try:
            seeds = _seeds(self.cfg)
            stream = make_stream(self.cfg, seed=seeds.stream).validation(self.validation_tasks)
            model = make_model(self.cfg, stream, seed=seeds.model)
            rehearsal = make_rehearsal_config(
                self.cfg,
                domain=_domain(stream),
                k=k,
                offline_epochs=self.epochs if self.epochs > 1 else None,
            )
            if rehearsal.aug is not None:
                rehearsal.aug = rehearsal.aug.with_strength(p, q)
            result = rp.run_stream(stream, rehearsal, model, seed=seeds.train)
            A_T = result.metrics().A_T
            if self.out_dir is not None:
                result.accuracy_matrix().to_csv(self.out_dir / f"K{k}_P{p}_Q{q}" / "accuracy.csv")
        except Exception as E:
            errormsg = f"Sweep point K={k}, P={p}, Q={q} failed: {E}"
            if self.die:
                raise E
            self.log(errormsg, "red")
            return sc.objdict(K=k, P=p, Q=q, A_T=np.nan, error=errormsg)
        return sc.objdict(K=k, P=p, Q=q, A_T=A_T, error=None)

    def run(self):
        self.log(f"\nSweeping {len(self.grid)} points on {self.validation_tasks} validation tasks", color="blue")
        start = sc.tic()
        if self.parallel:
            results = sc.parallelize(self.run_single, self.grid)
        else:
            results = [self.run_single(point) for point in self.grid]
        self.errors = [res.error for res in results if res.error]
        ok = [res for res in results if not res.error]
        ranked = sorted(ok, key=lambda res: -res.A_T)  # Stable: ties keep grid order
        for rank, res in enumerate(ranked, start=1):
            res.rank = rank
        self.results = ranked
        self.best = ranked[0] if ranked else None
        self.elapsed = sc.toc(start, output=True, verbose=False)
        if self.best is not None:
            self.log(f"Best: K={self.best.K}, P={self.best.P}, Q={self.best.Q} (A_T = {self.best.A_T:.4f})")
        if self.out_dir is not None:
            self.to_csv(self.out_dir / "sweep.csv")
        return self.results

    def to_csv(self, path):
        rows = [dict(rank=res.rank, K=res.K, P=res.P, Q=res.Q, A_T=res.A_T) for res in self.results]
        return rp.write_csv(path, rows, fieldnames=["rank", "K", "P", "Q", "A_T"])


# %% Verification


def _report(kind, passed, details, status=None):
    status = sc.ifelse(status, "pass" if passed else "fail")
    return sc.objdict(kind=kind, status=status, passed=status == "pass", details=details)


def _verify_erm(kind, dt=6, dm=3, n_past=None, batch=2, mem_batch=2, t=None, trials=100_000, seed=0, group="flip", side=4, tol=None, parallel=False):
    if kind == "prop3":
        cfg = rp.TinyConfig(task_size=dt, memory_size=dm, n_past=n_past, incoming_batch_size=batch, memory_batch_size=mem_batch, image_shape=(side, side), seed=seed)
        factory = dict(flip=rp.flip_group, rotation=rp.rotation_group, trivial=rp.trivial_group)
        if group not in factory:
            raise rp.ConfigError(f"Unknown group {group!r}; choose from {list(factory)}")
        verdict = rp.verify_prop3(cfg, factory[group]((side, side)), trials=trials, seed=seed, weight_tol=tol)
    else:
        t = sc.ifelse(t, 0 if kind == "prop2" else -(-dt // batch))  # Default prop1: end of the task
        cfg = rp.TinyConfig(task_size=dt, memory_size=dm, n_past=n_past, incoming_batch_size=batch, memory_batch_size=mem_batch, t=t, seed=seed)
        fn = rp.verify_prop2 if kind == "prop2" else rp.verify_prop1
        verdict = fn(cfg, trials=trials, seed=seed, weight_tol=tol, parallel=parallel)
    return _report(kind, verdict.passed, verdict.to_dict(), status=verdict.status)


def _verify_reservoir(m=2, n=4, trials=200_000, seed=0, sigma=3.0):
    """
    Per-item inclusion frequency against capacity/n_items.

    The sigma bound is family-wise: it is widened (Sidak) so that all n items together
    have the false-alarm rate of a single two-sided sigma test.
    """
    held = rp.reservoir_trials(m, n, trials, seed)
    counts = np.bincount(held[held >= 0].ravel(), minlength=n)
    freq = counts / trials
    p = min(m, n) / n
    se = np.sqrt(p * (1 - p) / trials) if 0 < p < 1 else 0.0
    alpha = 2 * stats.norm.sf(sigma)
    z_crit = stats.norm.isf((1 - (1 - alpha) ** (1 / n)) / 2)
    if se > 0:
        z = (freq - p) / se
    else:
        z = np.where(freq == p, 0.0, np.inf)  # Capacity >= n: every item is always held
    passed = bool(np.all(np.abs(z) <= z_crit))
    details = dict(capacity=m, n_items=n, trials=trials, expected=p, frequencies=freq.tolist(), max_abs_z=float(np.max(np.abs(z))), z_crit=float(z_crit))
    return _report("reservoir", passed, details)


def _verify_gradients(models=50, seed=0, tol=1e-4):
    rng = rp.make_rng(seed)
    worst = 0.0
    cases = []
    for i in range(models):
        sizes = [int(rng.integers(2, 5)) for _ in range(int(rng.integers(2, 4)))] + [int(rng.integers(2, 5))]
        spec = rp.MlpSpec(sizes, activation=rp.nn.ACTIVATIONS[i % len(rp.nn.ACTIVATIONS)])
        model = rp.init_model(spec, seed=rng)
        model.params += 0.1 * rng.normal(size=spec.n_params)
        batch = [
            rp.Sample(rng.normal(size=sizes[0]), int(rng.integers(0, sizes[-1])), stored_logits=rng.normal(size=sizes[-1]))
            for _ in range(int(rng.integers(1, 5)))
        ]
        for kind in [rp.LossKind.cross_entropy(), rp.LossKind.squared_error(), rp.LossKind.distillation_mse(0.3)]:
            err = rp.check_gradients(model, batch, kind)
            worst = max(worst, err)
            cases.append(dict(sizes=sizes, activation=spec.activation, loss=kind.name, rel_error=err))
    return _report("gradients", worst < tol, dict(models=models, tol=tol, max_rel_error=worst, cases=cases))


def _verify_metrics(path=None, random=1000, seed=0, tol=1e-12):
    path = sc.ifelse(path, rp.paths.fixtures / "metrics_matrices.json")
    fixtures = sc.loadjson(path)
    failures = []
    for case in fixtures:
        report = rp.compute_metrics(case["matrix"])
        for key, expected in case["expected"].items():
            got = getattr(report, key)
            if (expected is None) != (got is None) or (expected is not None and abs(got - expected) > 1e-9):
                failures.append(f"{case['name']}: {key} = {got}, expected {expected}")
    rng = rp.make_rng(seed)
    worst = 0.0
    for _ in range(random):
        T = int(rng.integers(2, 11))
        report = rp.compute_metrics(rp.AccuracyMatrix.random(T, rng))
        worst = max(worst, abs(report.A_T - (report.plasticity + report.stability)))
        if report.A_T < report.plasticity - (T - 1) / T * report.F_T - tol:
            failures.append(f"Random T={T}: A_T below plasticity - ((T-1)/T)*F_T")
    if worst > tol:
        failures.append(f"Identity A_T = plasticity + stability off by {worst}")
    details = dict(fixtures=str(path), n_fixtures=len(fixtures), n_random=random, max_identity_error=worst, failures=failures)
    return _report("metrics", not failures, details)


def verify(kind, **options):
    """
    Run a verification suite and return a machine-readable report.

    Args:
        kind (str): "prop1", "prop2", "prop3", "reservoir", "gradients" or "metrics"
        options: suite options (e.g. dt, dm, trials, seed; m, n for the reservoir)

    Returns:
        objdict with kind, status ("pass", "fail" or "inconclusive"), passed and details
    """
    suites = dict(
        prop1=lambda **kw: _verify_erm("prop1", **kw),
        prop2=lambda **kw: _verify_erm("prop2", **kw),
        prop3=lambda **kw: _verify_erm("prop3", **kw),
        reservoir=_verify_reservoir,
        gradients=_verify_gradients,
        metrics=_verify_metrics,
    )
    if kind not in suites:
        errormsg = f"Unknown verification {kind!r}; choose from {VERIFY_KINDS}"
        raise rp.ConfigError(errormsg)
    options = {key: val for key, val in options.items() if val is not None}
    return suites[kind](**options)


# %% Landscape


class Landscape(sc.prettyobj):
    """
    Loss landscape around the end of task 2.

    w1 is the model after training on task 1; w2 continues from w1 on task 2 with the
    configured rehearsal, w2ft with plain finetuning. The grid spans the plane through
    the three and records task-1 memory, task-1 test, task-2 train and task-2 test losses.

    Args:
        cfg (RunConfig): the configuration (the stream must have at least two tasks)
        out_dir (str): where checkpoints and grid.csv are written (None: nothing written)
        resolution (int): grid nodes per axis (default: landscape.resolution)
        task1_epochs (int): passes over task 1 (default: landscape.task1_epochs)
        w1 (str): checkpoint of a model already trained on task 1, or the directory of a run
            whose checkpoints/task_0.ckpt holds it; task-1 training is then skipped and the
            task-1 memory is refilled by one reservoir pass over task 1
        parallel (bool): evaluate grid rows in a process pool
        verbose (bool): print progress
        run (bool): run immediately
    """

    def __init__(self, cfg, out_dir=None, resolution=None, task1_epochs=None, w1=None, parallel=False, verbose=True, run=False):
        self.cfg = cfg
        self.w1_path = None if w1 is None else sc.path(w1)
        self.out_dir = None if out_dir is None else sc.path(out_dir)
        self.resolution = int(sc.ifelse(resolution, cfg["landscape.resolution"]))
        self.task1_epochs = int(sc.ifelse(task1_epochs, cfg["landscape.task1_epochs"]))
        self.parallel = parallel
        self.verbose = verbose
        self.w1 = self.w2 = self.w2ft = None
        self.plane = None
        self.grid = None
        self.gap = None
        if run:
            self.run()
        return

    def log(self, string, color="green"):
        rp.log(string, color=color, verbose=self.verbose)
        return

    def run(self):
        seeds = _seeds(self.cfg)
        stream = make_stream(self.cfg, seed=seeds.stream)
        if len(stream) < 2:
            raise rp.ContractError(f"The landscape needs at least two tasks, the stream has {len(stream)}")
        model = make_model(self.cfg, stream, seed=seeds.model)
        domain = _domain(stream)
        task1 = rp.TaskStream(stream.tasks[:1], batch_size=stream.batch_size, seed=stream.seed, n_classes=stream.n_classes)
        task2 = rp.TaskStream(stream.tasks[1:2], batch_size=stream.batch_size, seed=stream.seed, n_classes=stream.n_classes)

        rehearsal = make_rehearsal_config(self.cfg, domain)
        if self.w1_path is None:
            self.log("Training w1 on task 1", color="blue")
            epochs = self.task1_epochs if self.task1_epochs > 1 else None
            first = rp.run_stream(task1, make_rehearsal_config(self.cfg, domain, offline_epochs=epochs), model, seed=seeds.train)
            self.w1, memory = first.model, first.memory
        else:
            self.w1, memory = self.load_w1(task1, rehearsal, seeds.train)

        self.log("Training w2 (rehearsal) and w2ft (finetune) on task 2 from w1", color="blue")
        cl = rp.run_stream(task2, rehearsal, self.w1, seed=seeds.train, memory=memory)
        ft = rp.run_stream(task2.restart(), make_rehearsal_config(self.cfg, domain, memory_capacity=0), self.w1, seed=seeds.train)
        self.w2, self.w2ft = cl.model, ft.model

        self.plane = rp.landscape_plane(self.w1.params, self.w2.params, self.w2ft.params)
        memory = [sample for sample in cl.memory.items if sample.task_id == stream.tasks[0].id]
        datasets = dict(
            task1_memory=memory,
            task1_test=stream.tasks[0].test,
            task2_train=stream.tasks[1].train,
            task2_test=stream.tasks[1].test,
        )
        datasets = {name: samples for name, samples in datasets.items() if samples}
        self.grid = rp.landscape_grid(
            self.plane,
            self.w1.spec,
            datasets,
            resolution=self.resolution,
            anchors=[self.w2.params, self.w2ft.params],
            parallel=self.parallel,
        )
        if "task1_memory" in datasets:
            self.gap = self.grid.gap_at(self.w2.params, "task1_test", "task1_memory")
            self.log(f"Task-1 test minus memory loss at w2: {self.gap:.4f}")
        if self.out_dir is not None:
            self.save()
        return self

    def load_w1(self, task1, rehearsal, seed):
        """Read w1 from disk and rebuild the task-1 memory it would have left behind"""
        path = self.w1_path
        if path.is_dir():
            path = path / "checkpoints" / "task_0.ckpt"
        if not path.is_file():
            errormsg = f"No task-1 checkpoint at {path}"
            raise rp.ConfigError(errormsg)
        self.log(f"Loading w1 from {path}", color="blue")
        w1 = rp.load_checkpoint(path)
        mem_seed, _ = rp.child_seeds(seed, 2)
        memory = rp.ReservoirMemory(rehearsal.memory_capacity, seed=mem_seed, store_logits=rehearsal.stores_logits)
        while (batch := task1.next_batch()) is not None:
            rp.reservoir_update(memory, batch, model=w1)
        return w1, memory

    def save(self):
        for name in ["w1", "w2", "w2ft"]:
            rp.save_checkpoint(getattr(self, name), self.out_dir / f"{name}.ckpt")
        self.grid.to_csv(self.out_dir / "grid.csv")
        return


# %% Traces


def summarize_trace(path):
    """
    Per-task loss-decay ratios of a trace CSV.

    Returns:
        list of objdicts (task_id, incoming, memory, gap, n_batches), one per task
    """
    trace = rp.read_csv(path)
    task_ids = sorted(set(int(rec["task_id"]) for rec in trace if rec["task_id"] != ""))
    summary = []
    for task_id in task_ids:
        ratios = rp.loss_decay_ratios(trace, task_id=task_id)
        summary.append(sc.objdict(task_id=task_id, **ratios))
    return summary

"""
Rehearsal training loops: ER, repeated rehearsal and repeated augmented rehearsal,
with the reweighted (ER-rw) and logit-distillation (DER) memory terms.
"""

import numpy as np
import sciris as sc
import reprise as rp

__all__ = [
    "RehearsalConfig",
    "TrainState",
    "Hooks",
    "RunResult",
    "er_iteration",
    "der_memory_loss",
    "rar_step",
    "run_stream",
    "evaluate_accuracy",
    "loss_decay_ratios",
    "trace_to_csv",
    "TRACE_FIELDS",
]

DEFAULT_K = 10
DEFAULT_LR = 0.1
DEFAULT_BATCH = 10
DEFAULT_CAPACITY = 100
TRACE_FIELDS = [
    "t",
    "k",
    "memory_loss",
    "incoming_loss",
    "memory_batch_accuracy",
    "K_chosen",
    "P_chosen",
    "Q_chosen",
    "task_id",
]


class RehearsalConfig(sc.prettyobj):
    """
    Hyperparameters of a rehearsal run.

    Args:
        k (int): inner iterations per incoming batch (1 is plain ER)
        lr (float): learning rate
        incoming_batch_size (int): size of the incoming batches
        memory_batch_size (int): size of each memory batch
        memory_capacity (int): reservoir size (0 trains on incoming data only)
        loss (LossKind): loss on incoming samples (and on memory samples unless memory_loss is given)
        memory_loss (LossKind): loss on memory samples; distillation_mse gives DER
        alpha_rw (float): memory weight of ER-rw in (0, 1); the gradient is 2*[(1-alpha)*incoming + alpha*memory]
        aug (AugPolicy): augmentation policy (None disables augmentation)
        retrieval (RetrievalPolicy): how memory batches are read
        offline_epochs (int): passes over each task (None is the online single pass)

    **Examples**::

        er  = rp.RehearsalConfig(k=1)
        rar = rp.RehearsalConfig(k=10, aug=rp.AugPolicy.from_names(p=1, q=14))
        der = rp.RehearsalConfig.der(alpha=0.3)
    """

    def __init__(
        self,
        k=None,
        lr=None,
        incoming_batch_size=None,
        memory_batch_size=None,
        memory_capacity=None,
        loss=None,
        memory_loss=None,
        alpha_rw=None,
        aug=None,
        retrieval=None,
        offline_epochs=None,
    ):
        # Optimization
        self.k = int(sc.ifelse(k, DEFAULT_K))
        self.lr = float(sc.ifelse(lr, DEFAULT_LR))
        self.incoming_batch_size = int(sc.ifelse(incoming_batch_size, DEFAULT_BATCH))
        self.memory_batch_size = int(sc.ifelse(memory_batch_size, DEFAULT_BATCH))
        self.offline_epochs = offline_epochs

        # Memory
        self.memory_capacity = int(sc.ifelse(memory_capacity, DEFAULT_CAPACITY))
        self.retrieval = sc.ifelse(retrieval, rp.RetrievalPolicy())

        # Losses
        self.loss = sc.ifelse(loss, rp.LossKind())
        self.memory_loss = sc.ifelse(memory_loss, self.loss)
        self.alpha_rw = alpha_rw

        # Augmentation
        self.aug = aug
        self.validate()
        return

    @classmethod
    def finetune(cls, **kwargs):
        """Plain SGD on the incoming batches, no memory"""
        return cls(**sc.mergedicts(kwargs, dict(memory_capacity=0)))

    @classmethod
    def der(cls, alpha=None, **kwargs):
        """Distillation rehearsal: memory samples are fitted to their stored logits"""
        return cls(**sc.mergedicts(kwargs, dict(memory_loss=rp.LossKind.distillation_mse(alpha))))

    @property
    def stores_logits(self):
        return self.memory_loss.name == "distillation_mse"

    @property
    def aug_enabled(self):
        return self.aug is not None and self.aug.target != "none"

    def validate(self):
        if self.k < 1:
            raise rp.ContractError(f"K must be at least 1, not {self.k}")
        if not self.lr > 0:
            raise rp.ContractError(f"Learning rate must be positive, not {self.lr}")
        for name in ["incoming_batch_size", "memory_batch_size"]:
            if getattr(self, name) < 1:
                raise rp.ContractError(f"{name} must be at least 1, not {getattr(self, name)}")
        if self.memory_capacity < 0:
            raise rp.ContractError(f"Memory capacity cannot be negative, not {self.memory_capacity}")
        if self.alpha_rw is not None:
            self.alpha_rw = float(self.alpha_rw)
            if not 0.0 < self.alpha_rw < 1.0:
                raise rp.ContractError(f"alpha_rw must lie in (0, 1), not {self.alpha_rw}")
        if self.offline_epochs is not None:
            self.offline_epochs = int(self.offline_epochs)
            if self.offline_epochs < 1:
                raise rp.ContractError(f"offline_epochs must be at least 1, not {self.offline_epochs}")
        if self.loss.name == "distillation_mse":
            raise rp.ContractError("Distillation applies to memory samples only; use memory_loss")
        self.retrieval.validate(self.memory_batch_size)
        return

    def choice(self):
        """The default (K, P, Q)"""
        if self.aug is None:
            return self.k, None, None
        return self.k, self.aug.p, self.aug.q


class TrainState(sc.prettyobj):
    """
    Everything that evolves during a run.

    Args:
        model (Model): the network, updated in place by each step
        memory (ReservoirMemory): the rehearsal memory
        rng (Generator): randomness for retrieval and augmentation
    """

    def __init__(self, model, memory, rng=None):
        self.model = model
        self.memory = memory
        self.rng = rp.make_rng(rng)
        self.t = 0  # Incoming batches completed
        self.n_iters = 0  # Inner iterations completed
        self.task_index = None
        self.trace = []
        return


def der_memory_loss(model, mem_batch, alpha=None):
    """
    Distillation term of DER on a memory batch.

    Returns:
        (loss, grad): alpha*MSE between current and stored logits, and its gradient
    """
    return rp.loss_and_grad(model, mem_batch, rp.LossKind.distillation_mse(alpha))


def er_iteration(state, incoming_batch, mem_batch, cfg, k=1, choice=None):
    """
    One rehearsal update on an incoming batch and a memory batch.

    The gradient is the mean incoming gradient plus the mean memory gradient; the
    memory term is dropped when the memory batch is empty. With cfg.alpha_rw the two
    terms are reweighted as 2*[(1-alpha)*incoming + alpha*memory].
    """
    incoming_batch = list(incoming_batch)
    mem_batch = list(mem_batch)
    if not len(incoming_batch):
        raise rp.ContractError("An ER iteration needs a nonempty incoming batch")

    model = state.model
    inc_loss, grad = rp.loss_and_grad(model, incoming_batch, cfg.loss)
    mem_loss = np.nan
    mem_acc = np.nan
    if len(mem_batch):
        mem_acc = rp.accuracy(model, mem_batch)
        mem_loss, mem_grad = rp.loss_and_grad(model, mem_batch, cfg.memory_loss)
        if cfg.alpha_rw is not None:
            grad = 2.0 * ((1.0 - cfg.alpha_rw) * grad + cfg.alpha_rw * mem_grad)
        else:
            grad = grad + mem_grad
    model.params = rp.sgd_step(model.params, grad, cfg.lr)

    K, P, Q = sc.ifelse(choice, cfg.choice())
    state.n_iters += 1
    state.trace.append(
        sc.objdict(
            t=state.t,
            k=k,
            memory_loss=mem_loss,
            incoming_loss=inc_loss,
            memory_batch_accuracy=mem_acc,
            K_chosen=K,
            P_chosen=P,
            Q_chosen=Q,
            task_id=state.task_index,
        )
    )
    return state


def _augment(mem_batch, incoming_batch, policy, rng):
    """Augment the parts of the rehearsal batch named by the policy target"""
    if policy.target == "both":
        joint = rp.rand_augment_batch(mem_batch + incoming_batch, policy, rng)
        return joint[: len(mem_batch)], joint[len(mem_batch) :]
    if policy.target == "memory_only":
        return rp.rand_augment_batch(mem_batch, policy, rng), incoming_batch
    if policy.target == "incoming_only":
        return mem_batch, rp.rand_augment_batch(incoming_batch, policy, rng)
    return mem_batch, incoming_batch


def rar_step(state, incoming_batch, cfg, tuner_choice=None, update_memory=True):
    """
    Repeated (augmented) rehearsal on one incoming batch.

    Runs K inner iterations, each with the same incoming batch and a freshly retrieved
    memory batch, augmented according to cfg.aug. The raw incoming batch is then offered
    to the memory.

    Args:
        state (TrainState): the training state (updated in place and returned)
        incoming_batch (list): the incoming samples
        cfg (RehearsalConfig): the hyperparameters
        tuner_choice (tuple): (K, P, Q) overriding cfg.k and the augmentation strength
        update_memory (bool): offer the batch to the memory afterwards
    """
    incoming_batch = list(incoming_batch)
    choice = sc.ifelse(tuner_choice, cfg.choice())
    K, P, Q = choice
    policy = None
    if cfg.aug_enabled:
        policy = cfg.aug if (P, Q) == (cfg.aug.p, cfg.aug.q) else cfg.aug.with_strength(P, Q)

    for k in range(1, K + 1):
        mem_batch = rp.retrieve(
            state.memory,
            cfg.memory_batch_size,
            state.rng,
            policy=cfg.retrieval,
            model=state.model,
            incoming_batch=incoming_batch,
            lr=cfg.lr,
            kind=cfg.loss,
        )
        inc = incoming_batch
        if policy is not None:
            mem_batch, inc = _augment(mem_batch, incoming_batch, policy, state.rng)
        er_iteration(state, inc, mem_batch, cfg, k=k, choice=choice)

    if update_memory:
        rp.reservoir_update(state.memory, incoming_batch, model=state.model)
    state.t += 1
    return state


class Hooks(sc.prettyobj):
    """No-op callbacks of run_stream; subclass to plug in a tuner or extra logging"""

    def on_task_start(self, state, task_index):
        return

    def choose(self, state):
        """(K, P, Q) for the next incoming batch, or None for the configured values"""
        return None

    def after_batch(self, state, choice, records):
        """Called with the trace records of the batch just processed"""
        return

    def on_task_end(self, state, task_index):
        return


class RunResult(sc.prettyobj):
    """
    Output of run_stream.

    Attributes:
        model (Model): the final model
        memory (ReservoirMemory): the final memory
        checkpoints (list): a model copy after each task
        acc_rows (list): acc_rows[i][j] = test accuracy on task j after training task i
        trace (list): one record per inner iteration
        test_sets (list): test samples of each task
    """

    def __init__(self, model, memory, checkpoints, acc_rows, trace, test_sets, hooks=None, elapsed=None):
        self.model = model
        self.memory = memory
        self.checkpoints = checkpoints
        self.acc_rows = acc_rows
        self.trace = trace
        self.test_sets = test_sets
        self.hooks = hooks
        self.elapsed = elapsed
        return

    @property
    def n_tasks(self):
        return len(self.acc_rows)

    def accuracy_matrix(self):
        return rp.AccuracyMatrix(self.acc_rows)

    def metrics(self):
        return rp.compute_metrics(self.accuracy_matrix())

    def memory_gap(self):
        """
        Memory-train accuracy minus test accuracy, both restricted to past tasks.

        Past tasks are all tasks but the last (all tasks for a single-task run); nan
        when the memory holds no past-task samples.
        """
        past = max(self.n_tasks - 1, 1)
        mem_items = [sample for sample in self.memory.items if sample.task_id < past]
        if not mem_items:
            return np.nan
        test = [sample for test in self.test_sets[:past] for sample in test]
        return rp.accuracy(self.model, mem_items) - rp.accuracy(self.model, test)


def evaluate_accuracy(model, test_sets):
    """Test accuracy on each of the given test sets"""
    return [rp.accuracy(model, test) for test in test_sets]


def run_stream(stream, cfg, model, seed=None, hooks=None, memory=None, verbose=False):
    """
    Train on a task stream with rehearsal and record the accuracy matrix.

    After each task the model is checkpointed and evaluated on the test sets of every
    task seen so far. With cfg.offline_epochs, each task is trained for that many
    passes; the memory is only updated during the first one.

    Args:
        stream (TaskStream): an unread stream
        cfg (RehearsalConfig): hyperparameters
        model (Model): the initial model (not modified; training uses a copy)
        seed (int): root seed of the memory and of the retrieval/augmentation randomness
        hooks (Hooks): callbacks, e.g. a TunerHook
        memory (ReservoirMemory): starting memory (copied; default: a new empty memory)
        verbose (bool): print progress
    """
    if model.spec.n_outputs < stream.n_classes:
        errormsg = f"The model has {model.spec.n_outputs} outputs but the stream has {stream.n_classes} classes"
        raise rp.ContractError(errormsg)
    if stream.batch_size != cfg.incoming_batch_size:
        errormsg = f"Stream batch size {stream.batch_size} differs from incoming_batch_size {cfg.incoming_batch_size}"
        raise rp.ContractError(errormsg)

    hooks = sc.ifelse(hooks, Hooks())
    mem_seed, train_seed = rp.child_seeds(seed, 2)
    if memory is None:
        memory = rp.ReservoirMemory(cfg.memory_capacity, seed=mem_seed, store_logits=cfg.stores_logits)
    else:
        memory = sc.dcp(memory)
    state = TrainState(model.copy(), memory, rng=train_seed)
    epochs = sc.ifelse(cfg.offline_epochs, 1)
    test_sets = stream.test_sets()
    checkpoints = []
    acc_rows = []
    start = sc.tic()

    def process(batch, update_memory):
        choice = hooks.choose(state)
        start = len(state.trace)
        rar_step(state, batch, cfg, tuner_choice=choice, update_memory=update_memory)
        hooks.after_batch(state, sc.ifelse(choice, cfg.choice()), state.trace[start:])
        return

    def end_task(task_index, task_batches):
        for epoch in range(1, epochs):
            for batch in task_batches:
                process(batch, update_memory=False)
        hooks.on_task_end(state, task_index)
        checkpoints.append(state.model.copy())
        acc_rows.append(evaluate_accuracy(state.model, test_sets[: task_index + 1]))
        rp.log(f"  Task {task_index}: accuracies {np.round(acc_rows[-1], 4).tolist()}", verbose=verbose)
        return

    rp.log(f"Training on {len(stream)} tasks ({stream.n_train} samples)", color="blue", verbose=verbose)
    task_batches = []
    while (batch := stream.next_batch()) is not None:
        if stream.new_task:
            if state.task_index is not None:
                end_task(state.task_index, task_batches)
            task_batches = []
            state.task_index = stream.task_index
            hooks.on_task_start(state, stream.task_index)
        if epochs > 1:
            task_batches.append(batch)
        process(batch, update_memory=True)
    if state.task_index is not None:
        end_task(state.task_index, task_batches)
    elapsed = sc.toc(start, output=True, verbose=False)
    rp.log(f"Run finished in {elapsed:.2f} s", verbose=verbose)

    return RunResult(state.model, memory, checkpoints, acc_rows, state.trace, test_sets, hooks=hooks, elapsed=elapsed)


def loss_decay_ratios(trace, task_id=None):
    """
    Mean over incoming batches of loss(k=K)/loss(k=1), separately for the incoming and
    memory batches.

    Only batches with K >= 2 and finite, nonzero first-iteration losses count. A much
    smaller incoming ratio than memory ratio is the signature of a memory term whose
    relative weight grows as the incoming loss collapses.

    Args:
        trace (list): trace records (from a RunResult or read back from CSV)
        task_id (int): restrict to the batches of one task

    Returns:
        objdict with incoming, memory (mean ratios, nan if no batch qualifies), gap (memory - incoming) and n_batches
    """
    batches = {}
    for rec in trace:
        if task_id is not None and int(rec["task_id"]) != int(task_id):
            continue
        batches.setdefault(int(rec["t"]), []).append(rec)

    inc_ratios = []
    mem_ratios = []
    for records in batches.values():
        records = sorted(records, key=lambda rec: int(rec["k"]))
        if len(records) < 2:
            continue
        first, last = records[0], records[-1]
        inc0, inc1 = float(first["incoming_loss"]), float(last["incoming_loss"])
        mem0, mem1 = float(first["memory_loss"]), float(last["memory_loss"])
        if not np.all(np.isfinite([inc0, inc1, mem0, mem1])) or inc0 == 0 or mem0 == 0:
            continue
        inc_ratios.append(inc1 / inc0)
        mem_ratios.append(mem1 / mem0)

    incoming = float(np.mean(inc_ratios)) if inc_ratios else np.nan
    memory = float(np.mean(mem_ratios)) if mem_ratios else np.nan
    return sc.objdict(incoming=incoming, memory=memory, gap=memory - incoming, n_batches=len(inc_ratios))


def trace_to_csv(trace, path):
    """Write trace records to CSV (empty cells for absent P/Q)"""
    rows = [{key: ("" if val is None else val) for key, val in rec.items()} for rec in trace]
    return rp.write_csv(path, rows, fieldnames=TRACE_FIELDS)

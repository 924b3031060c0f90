"""
Fixed-capacity rehearsal memory: reservoir-sampling writes, random and MIR reads.
"""

import numpy as np
import sciris as sc
import reprise as rp

__all__ = [
    "ReservoirMemory",
    "RetrievalPolicy",
    "reservoir_index",
    "reservoir_update",
    "reservoir_trials",
    "retrieve_random",
    "retrieve_mir",
    "retrieve",
    "memory_to_csv",
]

DEFAULT_MEMORY_BATCH = 10
DEFAULT_MIR_CANDIDATES = 50
RETRIEVAL_KINDS = ["uniform_random", "mir"]


def reservoir_index(n_seen, capacity, rng):
    """
    Slot that the next stream item goes into, or -1 if it is discarded.

    Below capacity the item is appended. Afterwards it replaces a uniformly chosen
    slot with probability capacity/(n_seen+1).
    """
    if n_seen < capacity:
        return n_seen
    slot = int(rng.integers(0, n_seen + 1))
    return slot if slot < capacity else -1


class ReservoirMemory(sc.prettyobj):
    """
    A fixed-size store holding a uniform random subset of everything offered to it.

    Args:
        capacity (int): maximum number of items M
        seed (int/Generator): seed of the reservoir's own generator
        store_logits (bool): record the model's logits for each inserted sample (distillation rehearsal)

    **Example**::

        mem = rp.ReservoirMemory(capacity=100, seed=0)
        rp.reservoir_update(mem, batch)
        replay = rp.retrieve_random(mem, 10, rng)
    """

    def __init__(self, capacity, seed=None, store_logits=False):
        self.capacity = int(capacity)
        if self.capacity < 0:
            raise rp.ContractError(f"Memory capacity cannot be negative, not {capacity}")
        self.items = []
        self.inserted_at = []  # Stream position (n_seen) at which each slot was written
        self.n_seen = 0
        self.rng = rp.make_rng(seed)
        self.store_logits = store_logits
        return

    def __len__(self):
        return len(self.items)

    @property
    def is_full(self):
        return len(self.items) >= self.capacity

    def class_counts(self):
        """Number of stored samples per label"""
        counts = {}
        for sample in self.items:
            counts[sample.label] = counts.get(sample.label, 0) + 1
        return dict(sorted(counts.items()))


def reservoir_update(mem, batch, model=None):
    """
    Offer each sample of a batch to the memory, in order, by reservoir sampling.

    Args:
        mem (ReservoirMemory): the memory (updated in place and returned)
        batch (list): samples to offer
        model (Model): when mem.store_logits is set, the model whose logits are stored with inserted samples
    """
    for sample in batch:
        slot = reservoir_index(mem.n_seen, mem.capacity, mem.rng) if mem.capacity else -1
        if slot >= 0:
            if mem.store_logits:
                if model is None:
                    raise rp.ContractError("This memory stores logits, so reservoir_update needs a model")
                logits = rp.forward(model, sample.features.reshape(1, -1))[0]
                sample = sample.copy(stored_logits=logits)
            if slot == len(mem.items):
                mem.items.append(sample)
                mem.inserted_at.append(mem.n_seen)
            else:
                mem.items[slot] = sample
                mem.inserted_at[slot] = mem.n_seen
        mem.n_seen += 1
    return mem


def reservoir_trials(capacity, n_items, trials, rng):
    """
    Run the reservoir rule over items 0..n_items-1 in many independent replicas at once.

    Uses the same slot rule as reservoir_index, vectorized over replicas.

    Returns:
        (trials, min(capacity, n_items)) array of the item ids held at the end
    """
    rng = rp.make_rng(rng)
    size = min(int(capacity), int(n_items))
    held = np.full((trials, size), -1, dtype=np.int64)
    rows = np.arange(trials)
    for item in range(int(n_items)):
        if item < capacity:
            held[:, item] = item
            continue
        slot = rng.integers(0, item + 1, size=trials)
        keep = slot < capacity
        held[rows[keep], slot[keep]] = item
    return held


class RetrievalPolicy(sc.prettyobj):
    """
    How memory batches are read.

    Args:
        kind (str): "uniform_random" or "mir" (maximally interfered retrieval)
        candidate_pool_size (int): MIR candidates C drawn before scoring
    """

    def __init__(self, kind="uniform_random", candidate_pool_size=None):
        if kind not in RETRIEVAL_KINDS:
            errormsg = f"Retrieval must be one of {RETRIEVAL_KINDS}, not {kind!r}"
            raise rp.ContractError(errormsg)
        self.kind = kind
        self.candidate_pool_size = None
        if kind == "mir":
            self.candidate_pool_size = int(sc.ifelse(candidate_pool_size, DEFAULT_MIR_CANDIDATES))
        return

    @classmethod
    def uniform_random(cls):
        return cls("uniform_random")

    @classmethod
    def mir(cls, candidate_pool_size=None):
        return cls("mir", candidate_pool_size=candidate_pool_size)

    def validate(self, memory_batch_size):
        if self.kind == "mir" and self.candidate_pool_size < memory_batch_size:
            errormsg = f"MIR candidate pool ({self.candidate_pool_size}) is smaller than the memory batch ({memory_batch_size})"
            raise rp.ContractError(errormsg)
        return


def retrieve_random(mem, b, rng):
    """Draw min(b, |memory|) samples uniformly without replacement"""
    n = min(int(b), len(mem.items))
    if n <= 0:
        return []
    idx = rng.choice(len(mem.items), size=n, replace=False)
    return [mem.items[i] for i in idx]


def retrieve_mir(mem, model, incoming_batch, lr, policy, b, rng, kind=None):
    """
    Maximally interfered retrieval.

    Draws min(C, |memory|) candidates without replacement, takes a virtual SGD step
    on the incoming batch, and returns the b candidates whose loss increases most
    under that step. Ties keep the candidates' draw order. The model is not modified.

    Args:
        mem (ReservoirMemory): the memory (must be nonempty)
        model (Model): the current model
        incoming_batch (list): the incoming samples defining the virtual step
        lr (float): learning rate of the virtual step (0 means no step)
        policy (RetrievalPolicy): holds the candidate pool size C
        b (int): number of samples to return
        rng (Generator): randomness for the candidate draw
        kind (LossKind): the loss used for the step and the scores
    """
    if not len(mem.items):
        raise rp.ContractError("MIR retrieval needs a nonempty memory")
    kind = sc.ifelse(kind, rp.LossKind())
    pool = sc.ifelse(policy.candidate_pool_size, DEFAULT_MIR_CANDIDATES)
    n_candidates = min(pool, len(mem.items))
    idx = rng.choice(len(mem.items), size=n_candidates, replace=False)
    candidates = [mem.items[i] for i in idx]

    if lr > 0 and len(incoming_batch):
        _, grad = rp.loss_and_grad(model, incoming_batch, kind)
        virtual = model.with_params(rp.sgd_step(model.params, grad, lr))
        scores = rp.per_sample_losses(virtual, candidates, kind) - rp.per_sample_losses(model, candidates, kind)
    else:
        scores = np.zeros(n_candidates)
    ranking = np.argsort(-scores, kind="stable")
    return [candidates[i] for i in ranking[: min(int(b), n_candidates)]]


def retrieve(mem, b, rng, policy=None, model=None, incoming_batch=None, lr=None, kind=None):
    """Dispatch to the retrieval named by the policy; empty memory gives an empty batch"""
    policy = sc.ifelse(policy, RetrievalPolicy())
    if not len(mem.items):
        return []
    if policy.kind == "mir":
        return retrieve_mir(mem, model, incoming_batch, lr, policy, b, rng, kind=kind)
    return retrieve_random(mem, b, rng)


def memory_to_csv(mem, path):
    """Debug dump: task_id, label and insertion step of every stored item"""
    rows = [
        dict(task_id=sample.task_id, label=sample.label, insertion_step=step)
        for sample, step in zip(mem.items, mem.inserted_at)
    ]
    return rp.write_csv(path, rows, fieldnames=["task_id", "label", "insertion_step"])

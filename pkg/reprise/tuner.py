"""
Online selection of (K, P, Q) with a bootstrapped-policy-gradient bandit.

Two independent softmax policies pick the number of inner iterations and the
augmentation strength for each incoming batch. The reward is the distance between
the memory-batch accuracy and a target accuracy; the direction of the update comes
from "better" and "worse" action sets: above the target (memory overfitting) fewer
iterations and stronger augmentation are better, below it the reverse.
"""

import numpy as np
import sciris as sc
from scipy import special
import reprise as rp

__all__ = [
    "ActionSpace",
    "BanditPolicy",
    "TunerHook",
    "sample_action",
    "action_sets",
    "softmax_set_log_grad",
    "bpg_update",
    "reset_on_task_boundary",
]

DEFAULT_ITERATION_ARMS = list(range(1, 21))
DEFAULT_AUG_ARMS = [(1, 5), (1, 14), (2, 14), (3, 14), (4, 14)]
DEFAULT_TARGET_ACC = 0.9
DEFAULT_LR_RL = 0.5


class ActionSpace(sc.prettyobj):
    """
    The arms of the two bandits.

    Args:
        iteration_arms (list): candidate K values
        aug_arms (list): candidate (P, Q) pairs, listed from weakest to strongest
    """

    def __init__(self, iteration_arms=None, aug_arms=None):
        self.iteration_arms = [int(k) for k in sc.ifelse(iteration_arms, DEFAULT_ITERATION_ARMS)]
        self.aug_arms = [(int(p), q) for p, q in sc.ifelse(aug_arms, DEFAULT_AUG_ARMS)]
        if not self.iteration_arms or not self.aug_arms:
            raise rp.ContractError("Both arm lists of an action space must be nonempty")
        if min(self.iteration_arms) < 1:
            raise rp.ContractError(f"Iteration arms must be at least 1, got {self.iteration_arms}")
        for name, arms in [("iteration", self.iteration_arms), ("augmentation", self.aug_arms)]:
            if len(set(arms)) != len(arms):
                raise rp.ContractError(f"Duplicate {name} arms in {arms}")
        return

    def arms(self, which):
        return self.iteration_arms if which == "iter" else self.aug_arms

    def ranks(self, which):
        """Position of each arm in its order: K for iterations, list position for augmentation"""
        if which == "iter":
            return np.array(self.iteration_arms)
        return np.arange(len(self.aug_arms))

    def labels(self):
        """Column names of the per-arm probabilities in the tuner CSV"""
        return [f"p_iter_{k}" for k in self.iteration_arms] + [f"p_aug_{p}_{q}" for p, q in self.aug_arms]


class BanditPolicy(sc.prettyobj):
    """
    Softmax weights over the iteration arms and the augmentation arms.

    Args:
        space (ActionSpace): the arms
        lr_rl (float): step size of the policy update
        target_acc (float): target memory accuracy A*, in (0, 1)
    """

    def __init__(self, space=None, lr_rl=None, target_acc=None):
        self.space = sc.ifelse(space, ActionSpace())
        self.lr_rl = float(sc.ifelse(lr_rl, DEFAULT_LR_RL))
        self.target_acc = float(sc.ifelse(target_acc, DEFAULT_TARGET_ACC))
        if not 0.0 < self.target_acc < 1.0:
            raise rp.ContractError(f"Target accuracy must lie in (0, 1), not {self.target_acc}")
        if not self.lr_rl > 0:
            raise rp.ContractError(f"lr_rl must be positive, not {self.lr_rl}")
        self.weights = dict(
            iter=np.zeros(len(self.space.iteration_arms)),
            aug=np.zeros(len(self.space.aug_arms)),
        )
        return

    def probs(self, which):
        return special.softmax(self.weights[which])

    def update(self, which, chosen, mem_acc):
        """One BPG step on one of the two bandits; returns the reward magnitude"""
        r = abs(mem_acc - self.target_acc)
        better, worse = action_sets(chosen, mem_acc, self.target_acc, self.space, which)
        self.weights[which] = bpg_update(self.weights[which], r, better, worse, self.lr_rl)
        return r


def sample_action(policy, rng):
    """
    Draw an iteration arm and an augmentation arm independently from their softmax.

    Returns:
        objdict with K, P, Q and the arm indices i_iter, i_aug
    """
    i_iter = int(rng.choice(len(policy.space.iteration_arms), p=policy.probs("iter")))
    i_aug = int(rng.choice(len(policy.space.aug_arms), p=policy.probs("aug")))
    P, Q = policy.space.aug_arms[i_aug]
    return sc.objdict(K=policy.space.iteration_arms[i_iter], P=P, Q=Q, i_iter=i_iter, i_aug=i_aug)


def action_sets(chosen, mem_acc, target_acc, space, which="iter"):
    """
    Better and worse arm sets (as sorted index lists) for one bandit.

    Above the target, arms with fewer iterations or stronger augmentation are better and
    the others worse; below the target the sets swap. Exactly at the target there is no
    better arm and every other arm is worse.

    Args:
        chosen (int): index of the chosen arm
        mem_acc (float): observed memory accuracy A_M
        target_acc (float): target A*
        space (ActionSpace): the arms
        which (str): "iter" or "aug"
    """
    ranks = space.ranks(which)
    if not 0 <= chosen < len(ranks):
        raise rp.ContractError(f"Arm index {chosen} is outside the {len(ranks)} {which} arms")
    others = [i for i in range(len(ranks)) if i != chosen]
    if mem_acc == target_acc:
        return [], others
    below = [i for i in others if ranks[i] < ranks[chosen]]
    above = [i for i in others if ranks[i] > ranks[chosen]]
    overfit = mem_acc > target_acc
    if which == "iter":
        return (below, above) if overfit else (above, below)
    return (above, below) if overfit else (below, above)


def softmax_set_log_grad(weights, arm_set):
    """
    Gradient of log(sum of softmax(weights) over arm_set) with respect to the weights.

    Equals the probabilities restricted to the set and renormalized, minus the full
    probabilities. An empty set gives a zero gradient.
    """
    weights = np.asarray(weights, dtype=np.float64)
    arm_set = list(arm_set)
    if not arm_set:
        return np.zeros_like(weights)
    probs = special.softmax(weights)
    grad = -probs
    grad[arm_set] += probs[arm_set] / probs[arm_set].sum()
    return grad


def bpg_update(weights, r, better, worse, lr_rl):
    """
    One bootstrapped policy gradient step:
    w + lr_rl*|r|*(grad log pi(better) - grad log pi(worse)).
    """
    overlap = set(better) & set(worse)
    if overlap:
        errormsg = f"Better and worse arm sets overlap at {sorted(overlap)}"
        raise rp.ContractError(errormsg)
    weights = np.asarray(weights, dtype=np.float64)
    step = softmax_set_log_grad(weights, better) - softmax_set_log_grad(weights, worse)
    return weights + lr_rl * abs(r) * step


def reset_on_task_boundary(policy):
    """Set every weight to zero (uniform probabilities)"""
    for which in policy.weights:
        policy.weights[which] = np.zeros_like(policy.weights[which])
    return policy


class TunerHook(rp.Hooks):
    """
    Runs the bandit around each rehearsal step of run_stream.

    Before every incoming batch an action (K, P, Q) is sampled; afterwards the mean
    memory-batch accuracy over the K inner iterations drives one update of each bandit.
    The weights are reset at the start of every task. Batches without memory samples
    (start of the stream) give no reward and no update.

    Args:
        policy (BanditPolicy): the bandits
        seed (int): seed of the action draws
        verbose (bool): log skipped updates

    **Example**::

        hook = rp.TunerHook(rp.BanditPolicy(target_acc=0.9), seed=1)
        result = rp.run_stream(stream, cfg, model, seed=0, hooks=hook)
        hook.to_csv("tuner.csv")
    """

    def __init__(self, policy=None, seed=None, verbose=False):
        self.policy = sc.ifelse(policy, BanditPolicy())
        self.rng = rp.make_rng(seed)
        self.verbose = verbose
        self.pending = None
        self.rows = []
        self.events = []
        self.n_skipped = 0
        return

    def on_task_start(self, state, task_index):
        reset_on_task_boundary(self.policy)
        self.events.append(sc.objdict(event="reset", task=task_index, t=state.t))
        return

    def choose(self, state):
        self.pending = sample_action(self.policy, self.rng)
        return self.pending.K, self.pending.P, self.pending.Q

    def after_batch(self, state, choice, records):
        action, self.pending = self.pending, None
        accs = np.array([rec.memory_batch_accuracy for rec in records], dtype=np.float64)
        accs = accs[np.isfinite(accs)]
        if action is None or not len(accs):
            self.n_skipped += 1
            if self.n_skipped == 1:
                rp.log("Tuner: no memory samples yet, skipping updates", color="yellow", verbose=self.verbose)
            return

        mem_acc = float(np.mean(accs))
        r = self.policy.update("iter", action.i_iter, mem_acc)
        self.policy.update("aug", action.i_aug, mem_acc)
        self.events.append(sc.objdict(event="update", task=state.task_index, t=state.t - 1))
        probs = np.concatenate([self.policy.probs("iter"), self.policy.probs("aug")])
        row = dict(batch=state.t - 1, K=action.K, P=action.P, Q=action.Q, A_M=mem_acc, r=r)
        row.update(zip(self.policy.space.labels(), probs.tolist()))
        self.rows.append(row)
        return

    def fieldnames(self):
        return ["batch", "K", "P", "Q", "A_M", "r"] + self.policy.space.labels()

    def to_csv(self, path):
        return rp.write_csv(path, self.rows, fieldnames=self.fieldnames())

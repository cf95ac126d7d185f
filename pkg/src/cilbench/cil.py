"""Continual-learning strategies for class-incremental training.

A strategy is driven by the trainer through these hooks:

* ``begin_task`` before training on a new task,
* ``batch_loss`` to compute the (possibly augmented) loss and gradient,
* ``transform_gradient`` right before the optimizer step,
* ``after_step`` right after the optimizer step,
* ``end_of_task`` to consolidate state once a task is finished.

Consolidated state (importances, anchors, memory, snapshots) is only ever
written inside ``end_of_task``.
"""

from __future__ import annotations

import numpy as np

from .neuralnet import Network, masked_cross_entropy, masked_softmax


class StrategyError(RuntimeError):
    pass


class ExemplarMemory:
    """Class-balanced rehearsal buffer with a fixed total capacity."""

    def __init__(self, capacity=100):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = int(capacity)
        self.x = np.zeros((0, 0))
        self.y = np.zeros(0, dtype=np.int64)
        self.task = np.zeros(0, dtype=np.int64)
        self.ids = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return len(self.y)

    @property
    def classes(self):
        return sorted(set(self.y.tolist()))

    def quotas(self, classes):
        classes = sorted(classes)
        base, extra = divmod(self.capacity, max(len(classes), 1))
        return {c: base + (1 if i < extra else 0) for i, c in enumerate(classes)}

    def add_task(self, x, y, task, rng, ids=None):
        """Insert a seeded class-balanced sample of one task, then rebalance.

        ``ids`` are opaque integers stored alongside (the trainer uses dataset
        row indices so that leakage can be audited).
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        ids = np.arange(len(y)) if ids is None else np.asarray(ids, dtype=np.int64)
        classes = sorted(set(self.y.tolist()) | set(y.tolist()))
        quota = self.quotas(classes)
        keep = []
        # shrink old classes by uniform eviction
        for c in sorted(set(self.y.tolist())):
            idx = np.flatnonzero(self.y == c)
            if len(idx) > quota[c]:
                idx = np.sort(rng.choice(idx, size=quota[c], replace=False))
            keep.append(idx)
        keep = np.concatenate(keep) if keep else np.zeros(0, dtype=np.int64)
        new = []
        for c in sorted(set(y.tolist())):
            idx = np.flatnonzero(y == c)
            take = min(len(idx), quota[c])
            new.append(np.sort(rng.choice(idx, size=take, replace=False)))
        new = np.concatenate(new) if new else np.zeros(0, dtype=np.int64)
        old_x = self.x[keep] if len(self) else np.zeros((0, x.shape[1]))
        self.x = np.concatenate([old_x, x[new]])
        self.y = np.concatenate([self.y[keep], y[new]])
        self.task = np.concatenate([self.task[keep], np.full(len(new), task, dtype=np.int64)])
        self.ids = np.concatenate([self.ids[keep], ids[new]])

    def sample(self, k, rng):
        """Class-balanced sample of up to ``k`` stored exemplars."""
        if len(self) == 0 or k <= 0:
            return np.zeros(0, dtype=np.int64)
        k = min(k, len(self))
        classes = self.classes
        base, extra = divmod(k, len(classes))
        # rotate which classes get the extra draw so no class is favoured
        start = int(rng.integers(len(classes)))
        picks = []
        for i, c in enumerate(classes):
            want = base + (1 if (i - start) % len(classes) < extra else 0)
            idx = np.flatnonzero(self.y == c)
            picks.append(rng.choice(idx, size=min(want, len(idx)), replace=False))
        return np.concatenate(picks)


class Strategy:
    """Plain fine-tuning. Subclasses override the hooks they need."""

    name = "naive"
    uses_memory = False

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)
        self.tasks_done = 0
        self.seen_classes: list[int] = []

    def reseed(self, seed):
        self.rng = np.random.default_rng(seed)

    def begin_task(self, net: Network, classes):
        self.current_classes = sorted(int(c) for c in classes)

    def batch_loss(self, net: Network, x, y, mask):
        cache = net.forward_cache(x)
        loss, dlogits = masked_cross_entropy(cache.logits, y, mask)
        return loss, net.backward(cache, dlogits)

    def transform_gradient(self, net: Network, g, mask):
        return g

    def after_step(self, net: Network, old_params, task_grad):
        pass

    def end_of_task(self, net: Network, x, y, mask, ids=None):
        if len(y) == 0:
            raise StrategyError("end_of_task called with empty task data")
        self.seen_classes = sorted(set(self.seen_classes) | set(int(c) for c in np.unique(y)))
        self.tasks_done += 1

    def describe(self):
        return {"name": self.name}


class Cumulative(Strategy):
    """Reference: the trainer hands this one all past raw data."""

    name = "cumulative"


class Oracle(Strategy):
    """Reference: the trainer fits it once on the union of all tasks."""

    name = "oracle"


# -- parameter regularisation ------------------------------------------------


class QuadraticPenalty(Strategy):
    """Shared machinery for (lam/2) * sum_i I_i (theta_i - anchor_i)^2."""

    def __init__(self, lam, seed=0):
        super().__init__(seed)
        if lam < 0:
            raise ValueError("penalty strength must be >= 0")
        self.lam = float(lam)
        self.importance = None
        self.anchor = None

    def penalty(self, params):
        if self.importance is None:
            return 0.0, np.zeros_like(params)
        diff = params - self.anchor
        loss = 0.5 * self.lam * float(np.sum(self.importance * diff * diff))
        return loss, self.lam * self.importance * diff

    def batch_loss(self, net, x, y, mask):
        if self.tasks_done > 0 and self.importance is None:
            raise StrategyError(f"{self.name}: past task without consolidated importances")
        loss, grad = super().batch_loss(net, x, y, mask)
        ploss, pgrad = self.penalty(net.params)
        return loss + ploss, grad + pgrad

    def _consolidate(self, importance, net):
        importance = np.asarray(importance, dtype=np.float64)
        if np.any(importance < 0) or not np.all(np.isfinite(importance)):
            raise StrategyError(f"{self.name}: invalid importance vector")
        self.importance = importance if self.importance is None else self.importance + importance
        self.anchor = net.get_flat()

    def describe(self):
        return {"name": self.name, "lam": self.lam}


class EWC(QuadraticPenalty):
    """Elastic weight consolidation with the empirical Fisher diagonal."""

    name = "ewc"

    def __init__(self, lam=100.0, seed=0):
        super().__init__(lam, seed)

    def end_of_task(self, net, x, y, mask, ids=None):
        super().end_of_task(net, x, y, mask, ids)
        cache = net.forward_cache(x)
        # per-sample d(-log p(y|x))/dlogits; the batch mean in the CE gradient is undone
        _, dlogits = masked_cross_entropy(cache.logits, y, mask)
        fisher = net.sample_grad_moment(cache, dlogits * len(y), "square")
        self._consolidate(fisher, net)


class MAS(QuadraticPenalty):
    """Memory-aware synapses: sensitivity of the squared output norm."""

    name = "mas"

    def __init__(self, lam=1.0, seed=0):
        super().__init__(lam, seed)

    def end_of_task(self, net, x, y, mask, ids=None):
        super().end_of_task(net, x, y, mask, ids)
        cache = net.forward_cache(x)
        keep = np.zeros(net.n_classes)
        keep[list(mask)] = 1.0
        # d ||f(x)||^2 / d logits over the classes trained so far
        dlogits = 2.0 * cache.logits * keep
        self._consolidate(net.sample_grad_moment(cache, dlogits, "abs"), net)


class SI(QuadraticPenalty):
    """Synaptic intelligence: path-integral importances."""

    name = "si"

    def __init__(self, c=0.1, xi=1e-3, seed=0):
        super().__init__(c, seed)
        if xi <= 0:
            raise ValueError("xi must be > 0")
        self.xi = float(xi)
        self.omega = None
        self.task_start = None

    def begin_task(self, net, classes):
        super().begin_task(net, classes)
        self.omega = np.zeros(net.n_params)
        self.task_start = net.get_flat()

    def after_step(self, net, old_params, task_grad):
        self.omega -= task_grad * (net.params - old_params)

    def end_of_task(self, net, x, y, mask, ids=None):
        super().end_of_task(net, x, y, mask, ids)
        delta = net.params - self.task_start
        # negative path contributions are clipped; importances must stay >= 0
        self._consolidate(np.maximum(self.omega, 0.0) / (delta * delta + self.xi), net)
        self.omega = np.zeros(net.n_params)

    def describe(self):
        return {"name": self.name, "c": self.lam, "xi": self.xi}


# -- knowledge distillation ----------------------------------------------------


def distillation(new_logits, old_logits, old_classes, temperature):
    """KL(p_old || p_new) at ``temperature`` over ``old_classes``, batch mean.

    Returns (loss, dloss/dnew_logits).
    """
    p = masked_softmax(old_logits, old_classes, temperature)
    q = masked_softmax(new_logits, old_classes, temperature)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    n = new_logits.shape[0]
    loss = float(terms.sum() / n)
    return loss, (q - p) / (temperature * n)


class LwF(Strategy):
    """Learning without forgetting: distil the previous model's outputs."""

    name = "lwf"

    def __init__(self, temperature=2.0, alpha=1.0, seed=0):
        super().__init__(seed)
        if temperature <= 0 or alpha < 0:
            raise ValueError("need temperature > 0 and alpha >= 0")
        self.temperature = float(temperature)
        self.alpha = float(alpha)
        self.old_net = None
        self.old_classes: list[int] = []

    def batch_loss(self, net, x, y, mask):
        if self.tasks_done > 0 and self.old_net is None:
            raise StrategyError("lwf: past task without a stored model")
        cache = net.forward_cache(x)
        loss, dlogits = masked_cross_entropy(cache.logits, y, mask)
        if self.old_net is not None:
            T = self.temperature
            kl, dkl = distillation(cache.logits, self.old_net.forward(x), self.old_classes, T)
            loss += self.alpha * T * T * kl
            dlogits = dlogits + self.alpha * T * T * dkl
        return loss, net.backward(cache, dlogits)

    def end_of_task(self, net, x, y, mask, ids=None):
        super().end_of_task(net, x, y, mask, ids)
        self.old_net = net.copy()
        self.old_classes = list(self.seen_classes)

    def describe(self):
        return {"name": self.name, "temperature": self.temperature, "alpha": self.alpha}


# -- gradient projection -------------------------------------------------------


def project_single(g, g_ref):
    """Closed-form projection onto the half-space <g~, g_ref> >= 0."""
    g = np.asarray(g, dtype=np.float64)
    g_ref = np.asarray(g_ref, dtype=np.float64)
    dot = float(g @ g_ref)
    if dot >= 0:
        return g
    ref_sq = float(g_ref @ g_ref)
    if ref_sq == 0.0:
        return g
    return g - (dot / ref_sq) * g_ref


def project_multi(g, refs, margin=0.0, floor=0.0, tol=1e-13, max_iter=10_000):
    """Nearest vector to ``g`` with <g~, refs[k]> >= margin for every k.

    Solves the dual  min_{v >= floor} 1/2 v'Mv + v'(Rg - margin), M = RR',
    by cyclic coordinate descent; g~ = g + R'v. With ``floor == 0`` this is
    the exact Euclidean projection. A positive floor always mixes in at least
    ``floor`` times each reference gradient once any constraint is violated.
    Zero reference rows are ignored. With ``margin > 0`` and dependent rows
    the constraints can be infeasible, and the result is then meaningless.
    """
    g = np.asarray(g, dtype=np.float64)
    R = np.atleast_2d(np.asarray(refs, dtype=np.float64))
    if R.size == 0:
        return g
    diag = np.einsum("ij,ij->i", R, R)
    R = R[diag > 0]
    if len(R) == 0:
        return g
    M = R @ R.T
    b = R @ g - margin
    if np.all(b >= 0):
        return g
    v = np.full(len(R), float(floor))
    Mv = M @ v
    scale = max(1.0, float(np.abs(b).max()))
    for _ in range(max_iter):
        biggest = 0.0
        for k in range(len(R)):
            new = max(floor, v[k] - (Mv[k] + b[k]) / M[k, k])
            step = new - v[k]
            if step != 0.0:
                Mv += step * M[:, k]
                v[k] = new
                biggest = max(biggest, abs(step) * M[k, k])
        if biggest <= tol * scale:
            break
    v = _polish(M, b, v, float(floor))
    return g + R.T @ v


def _polish(M, b, v, floor):
    """Solve the dual exactly on the active set found by coordinate descent.

    Kept only if the result passes the KKT checks; ill-conditioned duals
    converge slowly under coordinate descent.
    """
    free = v > floor
    if not free.any():
        return v
    w = np.full_like(v, floor)
    rhs = -(b[free] + M[np.ix_(free, ~free)] @ w[~free])
    try:
        w[free] = np.linalg.solve(M[np.ix_(free, free)], rhs)
    except np.linalg.LinAlgError:
        return v
    grad = M @ w + b
    slack = 1e-9 * max(1.0, float(np.abs(b).max()))
    if np.all(w[free] >= floor) and np.all(grad[~free] >= -slack):
        return w
    return v


class _MemoryStrategy(Strategy):
    uses_memory = True

    def __init__(self, memory_size=100, seed=0):
        super().__init__(seed)
        self.memory = ExemplarMemory(memory_size)

    def end_of_task(self, net, x, y, mask, ids=None):
        super().end_of_task(net, x, y, mask, ids)
        self.memory.add_task(x, y, self.tasks_done - 1, self.rng, ids)

    def describe(self):
        return {"name": self.name, "memory_size": self.memory.capacity}


class GEM(_MemoryStrategy):
    """Gradient episodic memory: one constraint per past task."""

    name = "gem"

    def __init__(self, memory_size=100, margin=0.0, memory_strength=0.5, seed=0):
        super().__init__(memory_size, seed)
        if margin < 0 or memory_strength < 0:
            raise ValueError("margin and memory_strength must be >= 0")
        self.margin = float(margin)
        self.memory_strength = float(memory_strength)

    def reference_gradients(self, net, mask):
        refs = []
        for t in sorted(set(self.memory.task.tolist())):
            sel = self.memory.task == t
            cache = net.forward_cache(self.memory.x[sel])
            _, d = masked_cross_entropy(cache.logits, self.memory.y[sel], mask)
            refs.append(net.backward(cache, d))
        return refs

    def transform_gradient(self, net, g, mask):
        if len(self.memory) == 0:
            return g
        return project_multi(g, self.reference_gradients(net, mask), self.margin, self.memory_strength)

    def describe(self):
        return {**super().describe(), "margin": self.margin, "memory_strength": self.memory_strength}


class AGEM(_MemoryStrategy):
    """Averaged GEM: a single constraint from a random memory sample."""

    name = "agem"

    def __init__(self, memory_size=100, sample_size=64, seed=0):
        super().__init__(memory_size, seed)
        self.sample_size = int(sample_size)

    def transform_gradient(self, net, g, mask):
        if len(self.memory) == 0:
            return g
        idx = self.memory.sample(self.sample_size, self.rng)
        cache = net.forward_cache(self.memory.x[idx])
        _, d = masked_cross_entropy(cache.logits, self.memory.y[idx], mask)
        return project_single(g, net.backward(cache, d))

    def describe(self):
        return {**super().describe(), "sample_size": self.sample_size}


# -- replay --------------------------------------------------------------------


class Replay(_MemoryStrategy):
    """Experience replay: each minibatch is topped up with stored exemplars."""

    name = "replay"

    def __init__(self, memory_size=100, replay_ratio=1.0, seed=0):
        super().__init__(memory_size, seed)
        self.replay_ratio = float(replay_ratio)
        self.last_batch_labels = None

    def batch_loss(self, net, x, y, mask):
        if len(self.memory):
            idx = self.memory.sample(int(round(self.replay_ratio * len(y))), self.rng)
            x = np.concatenate([x, self.memory.x[idx]])
            y = np.concatenate([y, self.memory.y[idx]])
        self.last_batch_labels = np.asarray(y)
        return super().batch_loss(net, x, y, mask)

    def describe(self):
        return {**super().describe(), "replay_ratio": self.replay_ratio}


class FeatureReplay(Strategy):
    """Replays Gaussian pseudo-features of past classes through the head."""

    name = "fr"

    def __init__(self, replay_ratio=1.0, seed=0):
        super().__init__(seed)
        self.replay_ratio = float(replay_ratio)
        self.prototypes: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def batch_loss(self, net, x, y, mask):
        if self.tasks_done > 0 and not self.prototypes:
            raise StrategyError("fr: past task without stored prototypes")
        loss, grad = super().batch_loss(net, x, y, mask)
        if not self.prototypes:
            return loss, grad
        classes = sorted(self.prototypes)
        k = max(1, int(round(self.replay_ratio * len(y))))
        labels = np.array([classes[i % len(classes)] for i in range(k)])
        self.rng.shuffle(labels)
        mean = np.stack([self.prototypes[c][0] for c in labels])
        std = np.stack([self.prototypes[c][1] for c in labels])
        feats = np.maximum(mean + std * self.rng.standard_normal(mean.shape), 0.0)
        floss, d = masked_cross_entropy(net.head_logits(feats), labels, mask)
        # the replayed term is weighted like one extra batch of the same size
        w = k / (k + len(y))
        return (1 - w) * loss + w * floss, (1 - w) * grad + w * net.head_backward(feats, d)

    def end_of_task(self, net, x, y, mask, ids=None):
        super().end_of_task(net, x, y, mask, ids)
        feats = net.penultimate_features(x)
        for c in np.unique(y):
            f = feats[y == c]
            self.prototypes[int(c)] = (f.mean(axis=0), f.std(axis=0))

    def describe(self):
        return {"name": self.name, "replay_ratio": self.replay_ratio}


STRATEGIES = {
    "naive": Strategy,
    "ewc": EWC,
    "mas": MAS,
    "si": SI,
    "lwf": LwF,
    "gem": GEM,
    "agem": AGEM,
    "fr": FeatureReplay,
    "replay": Replay,
    "cumulative": Cumulative,
    "oracle": Oracle,
}

CIL_METHODS = ("ewc", "mas", "si", "lwf", "gem", "agem", "fr", "replay")
ALL_METHODS = ("cumulative", "oracle") + CIL_METHODS


def make_strategy(name, seed=0, **hyper):
    try:
        cls = STRATEGIES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown strategy {name!r}; valid: {', '.join(STRATEGIES)}") from None
    try:
        return cls(seed=seed, **hyper)
    except TypeError as exc:
        raise ValueError(f"invalid hyperparameters for {name}: {exc}") from None

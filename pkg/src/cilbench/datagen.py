"""Labeled instance datasets: generation, streams, splits and the JSONL format."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations
from pathlib import Path

import numba
import numpy as np

from . import binpack
from .binpack import SOLVERS, Instance, Solver

log = logging.getLogger(__name__)

DEFAULT_SIZES = (100, 200, 300, 400, 500)
METHODS = ("lineage", "rejection")


class DatasetError(ValueError):
    pass


class BudgetExhausted(RuntimeError):
    def __init__(self, counts, used, budget):
        self.counts = dict(counts)
        self.used = used
        self.budget = budget
        per = ", ".join(f"{k}={v}" for k, v in self.counts.items())
        super().__init__(f"budget of {budget} evaluations exhausted after {used}; per-class counts: {per}")


@dataclass(frozen=True)
class Meta:
    capacity: int = binpack.DEFAULT_CAPACITY
    min_size: int = binpack.MIN_SIZE
    max_size: int = binpack.MAX_SIZE
    length: int = binpack.DEFAULT_LENGTH
    seed: int | None = None
    method: str = "lineage"


@dataclass(frozen=True)
class Entry:
    instance: Instance
    winner: Solver
    scores: tuple[float, float, float, float]

    @property
    def id(self):
        return self.instance.id


@dataclass
class LabeledDataset:
    entries: list[Entry]
    meta: Meta = field(default_factory=Meta)

    def __len__(self):
        return len(self.entries)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate entry ids")

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(e.winner) for e in self.entries], dtype=np.int64)

    def features(self) -> np.ndarray:
        """Item sequences scaled into (0, 1] by the maximum item size."""
        if not self.entries:
            return np.zeros((0, self.meta.length))
        return np.array([e.instance.items for e in self.entries], dtype=np.float64) / self.meta.max_size

    def counts(self) -> dict[str, int]:
        lab = self.labels
        return {s.name: int(np.sum(lab == s)) for s in SOLVERS}

    def verify(self, k=2.0):
        """Relabel every entry; raise on the first disagreement."""
        for e in self.entries:
            winner, scores = binpack.label(e.instance, self.meta.capacity, k)
            if winner != e.winner:
                raise DatasetError(f"entry {e.id}: stored winner {e.winner.name}, recomputed {winner.name}")
            if tuple(scores[s] for s in SOLVERS) != tuple(e.scores):
                raise DatasetError(f"entry {e.id}: stored scores differ from recomputed scores")


def make_entry(id, items, capacity, k=2.0) -> Entry:
    inst = Instance(id, tuple(int(v) for v in items))
    winner, scores = binpack.label(inst, capacity, k)
    return Entry(inst, winner, tuple(scores[s] for s in SOLVERS))


# -- sampling and search -------------------------------------------------------


def sample_instance(rng: np.random.Generator, id="", length=binpack.DEFAULT_LENGTH,
                    min_size=binpack.MIN_SIZE, max_size=binpack.MAX_SIZE) -> Instance:
    """``length`` i.i.d. integer sizes, uniform on [min_size, max_size]."""
    if min_size > max_size:
        raise DatasetError(f"empty item range [{min_size}, {max_size}]")
    return Instance(id, tuple(rng.integers(min_size, max_size + 1, size=length).tolist()))


@dataclass
class ClimbConfig:
    tries: int = 8  # mutations attempted per step
    patience: int = 300  # failed steps before restarting from a fresh start point


@numba.njit(cache=True)
def _margin(items, target, capacity, k):
    s = binpack._scores_kernel(items, capacity, k)
    own = s[target]
    best = -1.0
    for i in range(4):
        if i != target and s[i] > best:
            best = s[i]
    return own - best


@numba.njit(cache=True)
def _mutate_inplace(x, min_size, max_size):
    if np.random.random() < 0.5:
        x[np.random.randint(0, x.shape[0])] = np.random.randint(min_size, max_size + 1)
    else:
        i = np.random.randint(0, x.shape[0])
        j = np.random.randint(0, x.shape[0])
        t = x[i]
        x[i] = x[j]
        x[j] = t


@numba.njit(cache=True)
def _climb_kernel(base, n_mut, target, capacity, k, min_size, max_size, tries, patience, max_evals, seed):
    """Compiled hill climb; returns (items, evaluations, success).

    A start point is ``base`` perturbed by ``n_mut`` mutations, or a uniform
    random instance when ``n_mut < 0``.
    """
    np.random.seed(seed)
    n = base.shape[0]
    x = base.copy()
    cand = base.copy()
    used = 0
    while used < max_evals:
        if n_mut < 0:
            for i in range(n):
                x[i] = np.random.randint(min_size, max_size + 1)
        else:
            x[:] = base
            for _ in range(n_mut):
                _mutate_inplace(x, min_size, max_size)
        mg = _margin(x, target, capacity, k)
        used += 1
        stall = 0
        while stall < patience and used < max_evals:
            if mg > 0:
                return x, used, True
            improved = False
            for _ in range(tries):
                cand[:] = x
                _mutate_inplace(cand, min_size, max_size)
                cm = _margin(cand, target, capacity, k)
                used += 1
                if cm > mg:
                    x[:] = cand
                    mg = cm
                    improved = True
                    break
                if used >= max_evals:
                    break
            stall = 0 if improved else stall + 1
        if mg > 0:
            return x, used, True
    return x, used, False


def hill_climb(target, rng, meta: Meta, cfg: ClimbConfig, max_evals, base=None, n_mut=-1, k=2.0):
    """Mutate until the target solver wins strictly; restart when stuck.

    Mutations resample one item or swap two positions. A candidate is kept
    only if it raises the target's margin over the best rival. Start points
    are uniform random instances, or ``base`` perturbed by ``n_mut``
    mutations. Returns (items, evaluations) with items None when
    ``max_evals`` runs out. Results are re-labeled by the reference labeler
    before being accepted.
    """
    base = np.zeros(meta.length, dtype=np.int64) if base is None else np.asarray(base, dtype=np.int64)
    used = 0
    while used < max_evals:
        seed = int(rng.integers(2**31 - 1))
        x, n, ok = _climb_kernel(base, n_mut, int(target), meta.capacity, float(k), meta.min_size,
                                 meta.max_size, cfg.tries, cfg.patience, max_evals - used, seed)
        used += n
        if ok and binpack.label(x.tolist(), meta.capacity, k)[0] == target:
            return x, used
    return None, used


def _seed_rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(v) for v in key)))


def _random_job(args):
    seed, key, target, meta, cfg, max_evals, k = args
    return hill_climb(target, _seed_rng(seed, *key), meta, cfg, max_evals, k=k)


def _child_job(args):
    seed, key, target, founder, n_mut, meta, cfg, max_evals, k = args
    return hill_climb(target, _seed_rng(seed, *key), meta, cfg, max_evals, founder, n_mut, k)


def _run_jobs(fn, jobs, workers, budget, used, glog, on_result):
    """Run jobs in order, charging their evaluations against the budget.

    Results are consumed in job order so the outcome is independent of the
    worker count.
    """
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = (fn(j) for j in jobs)
    for job, (items, n) in zip(jobs, results):
        used += n
        glog.class_evaluations[Solver(job[2]).name] += n
        if items is None or used > budget:
            raise BudgetExhausted(glog.counts(), used, budget)
        on_result(job, items)
    return used


@dataclass
class GenerationLog:
    method: str
    target_per_class: int
    evaluations: int = 0
    sampled: dict = field(default_factory=lambda: {s.name: 0 for s in SOLVERS})
    evolved: dict = field(default_factory=lambda: {s.name: 0 for s in SOLVERS})
    founders: dict = field(default_factory=lambda: {s.name: 0 for s in SOLVERS})
    class_evaluations: dict = field(default_factory=lambda: {s.name: 0 for s in SOLVERS})

    def counts(self):
        return {s.name: self.sampled[s.name] + self.evolved[s.name] for s in SOLVERS}

    def to_dict(self):
        return asdict(self)


def generate_balanced(target_per_class: int, budget: int | None = None, seed: int = 0, *,
                      method: str = "lineage", meta: Meta | None = None,
                      founders: int = 10, mutations: int = 30,
                      climb: ClimbConfig | None = None, stall_draws: int = 500,
                      workers: int = 1, k: float = 2.0, log_out: GenerationLog | None = None) -> LabeledDataset:
    """Dataset with exactly ``target_per_class`` strict or tie-broken winners per solver.

    ``method="rejection"``: draw uniform instances and keep those whose class is
    under quota; classes random draws cannot fill are hill-climbed from fresh
    random instances until their solver wins strictly.

    ``method="lineage"``: every class is built from ``founders`` hill-climbed
    winning instances; each entry is a founder perturbed by ``mutations``
    random mutations and climbed back to a strict win. Entries of a class share
    ancestry the way members of an evolved population do.

    ``budget`` caps the number of instance evaluations (default: 200000 per
    requested instance).
    """
    if target_per_class < 0:
        raise DatasetError("target_per_class must be >= 0")
    if method not in METHODS:
        raise DatasetError(f"unknown generation method {method!r}; valid: {', '.join(METHODS)}")
    meta = replace(meta or Meta(), seed=seed, method=method)
    climb = climb or ClimbConfig()
    if budget is None:
        budget = 200_000 * 4 * max(target_per_class, 1)
    if budget < target_per_class:
        raise DatasetError("budget must be >= target_per_class")
    glog = log_out if log_out is not None else GenerationLog(method, target_per_class)
    entries: list[Entry] = []
    if target_per_class == 0:
        return LabeledDataset([], meta)

    used = 0
    if method == "rejection":
        used = _rejection_phase(target_per_class, budget, seed, meta, stall_draws, k, entries, glog)
        todo = {s: target_per_class - glog.sampled[s.name] for s in SOLVERS}
        jobs = [(seed, (1, int(s), j), int(s), meta, climb, budget - used, k)
                for s in SOLVERS for j in range(todo[s])]

        def keep(job, items):
            s = Solver(job[2])
            entries.append(make_entry(f"e{s.name}{job[1][2]:05d}", items, meta.capacity, k))
            glog.evolved[s.name] += 1

        used = _run_jobs(_random_job, jobs, workers, budget, used, glog, keep)
    else:
        if founders < 1:
            raise DatasetError("need at least one founder per class")
        pool: dict[int, list] = {int(s): [] for s in SOLVERS}
        jobs = [(seed, (2, int(s), j), int(s), meta, climb, budget, k)
                for s in SOLVERS for j in range(founders)]

        def keep_founder(job, items):
            pool[job[2]].append(items)
            glog.founders[Solver(job[2]).name] += 1

        used = _run_jobs(_random_job, jobs, workers, budget, used, glog, keep_founder)
        jobs = [(seed, (3, int(s), j), int(s), pool[int(s)][j % founders], mutations, meta, climb, budget, k)
                for s in SOLVERS for j in range(target_per_class)]

        def keep_child(job, items):
            s = Solver(job[2])
            entries.append(make_entry(f"l{s.name}{job[1][2]:05d}", items, meta.capacity, k))
            glog.evolved[s.name] += 1

        used = _run_jobs(_child_job, jobs, workers, budget, used, glog, keep_child)

    glog.evaluations = used
    entries.sort(key=lambda e: e.id)
    ds = LabeledDataset(entries, meta)
    counts = ds.counts()
    if set(counts.values()) != {target_per_class}:
        raise BudgetExhausted(counts, used, budget)
    log.info("generated %d entries with %d evaluations", len(ds), used)
    return ds


def _rejection_phase(target, budget, seed, meta, stall_draws, k, entries, glog):
    rng = _seed_rng(seed, 0)
    used = 0
    since_hit = 0
    draw = 0
    while used < budget:
        under = [s for s in SOLVERS if glog.sampled[s.name] < target]
        if not under or since_hit >= stall_draws:
            break
        inst = sample_instance(rng, f"r{draw:07d}", meta.length, meta.min_size, meta.max_size)
        draw += 1
        used += 1
        winner, scores = binpack.label(inst, meta.capacity, k)
        if glog.sampled[winner.name] < target:
            entries.append(Entry(inst, winner, tuple(scores[s] for s in SOLVERS)))
            glog.sampled[winner.name] += 1
            since_hit = 0
        else:
            since_hit += 1
    if used >= budget and any(glog.sampled[s.name] < target for s in SOLVERS):
        raise BudgetExhausted(glog.counts(), used, budget)
    return used


# -- streams and splits ----------------------------------------------------------


@dataclass(frozen=True)
class StreamSpec:
    d1: tuple[Solver, Solver]
    d2: tuple[Solver, Solver]
    n: int = 100

    def __post_init__(self):
        d1 = tuple(sorted(Solver(s) for s in self.d1))
        d2 = tuple(sorted(Solver(s) for s in self.d2))
        object.__setattr__(self, "d1", d1)
        object.__setattr__(self, "d2", d2)
        if set(d1) & set(d2) or set(d1) | set(d2) != set(SOLVERS):
            raise DatasetError(f"stream tasks must partition the four solvers, got {d1} / {d2}")
        if self.n < 1:
            raise DatasetError("train size must be positive")

    @property
    def name(self):
        return "-".join(s.name for s in self.d1) + "_" + "-".join(s.name for s in self.d2)

    def with_size(self, n):
        return replace(self, n=n)


def make_streams(dataset: LabeledDataset | None = None, n: int = 100) -> list[StreamSpec]:
    """The six ordered (D1, D2) assignments, D1 pairs in lexicographic order."""
    if dataset is not None:
        missing = [k for k, v in dataset.counts().items() if v == 0]
        if missing:
            raise DatasetError(f"dataset lacks labels: {', '.join(missing)}")
    out = []
    for pair in combinations(SOLVERS, 2):
        rest = tuple(s for s in SOLVERS if s not in pair)
        out.append(StreamSpec(pair, rest, n))
    return out


@dataclass(frozen=True)
class TaskSplit:
    d1_train: np.ndarray
    d2_train: np.ndarray
    test: np.ndarray


def split(dataset: LabeledDataset, spec: StreamSpec, rng) -> TaskSplit:
    """Draw ``spec.n`` training rows per class without replacement; the rest is test."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    labels = dataset.labels
    picked = {}
    for s in SOLVERS:
        idx = np.flatnonzero(labels == s)
        if len(idx) <= spec.n:
            raise DatasetError(f"class {s.name} has {len(idx)} instances; need more than {spec.n} "
                               "to leave a non-empty test set")
        picked[s] = np.sort(rng.choice(idx, size=spec.n, replace=False))
    d1 = np.sort(np.concatenate([picked[s] for s in spec.d1]))
    d2 = np.sort(np.concatenate([picked[s] for s in spec.d2]))
    used = np.zeros(len(labels), dtype=bool)
    used[d1] = True
    used[d2] = True
    return TaskSplit(d1, d2, np.flatnonzero(~used))


# -- file format ------------------------------------------------------------------


def save(dataset: LabeledDataset, path):
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(asdict(dataset.meta)) + "\n")
        for e in dataset.entries:
            fh.write(json.dumps({"id": e.id, "items": list(e.instance.items),
                                 "winner": e.winner.name, "scores": list(e.scores)}) + "\n")


def load(path, *, trust=False, capacity=None, k=2.0) -> LabeledDataset:
    """Read a dataset file and, unless ``trust``, re-verify every label.

    ``capacity`` overrides the header value (needed when importing files that
    do not record it). Records without ``winner``/``scores`` are labeled on
    load.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DatasetError(f"{path}: empty file (missing header line)")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}:1: bad header: {exc}") from None
    if not isinstance(head, dict) or "items" in head:
        raise DatasetError(f"{path}:1: first line must be the meta object")
    known = {f for f in Meta.__dataclass_fields__}
    meta = Meta(**{k_: v for k_, v in head.items() if k_ in known})
    if capacity is not None:
        meta = replace(meta, capacity=int(capacity))
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            inst = Instance(str(rec["id"]), tuple(rec["items"]))
            if "winner" in rec and "scores" in rec:
                scores = tuple(float(v) for v in rec["scores"])
                if len(scores) != 4:
                    raise ValueError("scores must have 4 values")
                entries.append(Entry(inst, Solver[rec["winner"]], scores))
            else:
                entries.append(make_entry(inst.id, inst.items, meta.capacity, k))
        except (KeyError, ValueError, TypeError) as exc:
            raise DatasetError(f"{path}:{lineno}: malformed record: {exc}") from None
    ds = LabeledDataset(entries, meta)
    for e in entries:
        if len(e.instance) != meta.length:
            raise DatasetError(f"entry {e.id}: {len(e.instance)} items, header says {meta.length}")
    if not trust:
        ds.verify(k)
    return ds

"""Two-task class-incremental protocol: train on D1, retrain on D2, measure.

Per (stream, train size) cell the data split and the initial network are
shared by every method, so the strategy is the only thing that varies.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import mean, stdev

import numpy as np

from . import cil, datagen
from .binpack import SOLVERS, Solver
from .neuralnet import SGD, Network, NonFiniteError

log = logging.getLogger(__name__)

METRICS = ("acc_d1_after_p1", "acc_d1_after_p2", "acc_d2_after_p2", "acc_all")


@dataclass
class TrainConfig:
    hidden: tuple = (128, 64)
    epochs: int = 50
    oracle_epochs: int | None = None  # defaults to 2 * epochs
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    strategy_params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")

    def params_for(self, method):
        return dict(self.strategy_params.get(method, {}))


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    h = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "big") >> 1


class RunFailed(RuntimeError):
    pass


@dataclass
class RunRecord:
    stream: str
    d1: list
    d2: list
    n: int
    method: str
    seed: int
    repeat: int
    acc_d1_after_p1: float | None
    acc_d1_after_p2: float
    acc_d2_after_p2: float
    acc_all: float
    per_class_acc: dict
    per_class_acc_p1: dict

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# -- training --------------------------------------------------------------------


class Trace:
    """Optional instrumentation: records row ids and labels of every batch."""

    def __init__(self):
        self.batches = []

    def add(self, phase, rows, labels):
        self.batches.append((phase, np.asarray(rows).copy(), np.asarray(labels).copy()))


def train_task(net, strategy, X, y, mask, epochs, cfg: TrainConfig, rng, rows=None, trace=None, phase=0):
    """Minibatch SGD over one task. Returns the number of optimizer steps."""
    opt = SGD(cfg.lr, cfg.momentum)
    n = len(y)
    steps = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            loss, grad = strategy.batch_loss(net, X[b], y[b], mask)
            if trace is not None:
                trace.add(phase, rows[b] if rows is not None else b, y[b])
            if not math.isfinite(loss):
                raise NonFiniteError(f"{strategy.name}: non-finite loss {loss} at step {steps}")
            task_grad = grad
            grad = strategy.transform_gradient(net, grad, mask)
            old = net.get_flat()
            opt.step(net, grad)
            strategy.after_step(net, old, task_grad)
            steps += 1
    return steps


def accuracy(net, X, y, mask):
    if len(y) == 0:
        return float("nan")
    return float(np.mean(net.predict(X, mask) == y))


def per_class(net, X, y, mask, classes):
    pred = net.predict(X, mask)
    return {Solver(c).name: float(np.mean(pred[y == c] == c)) for c in classes}


def run_one(dataset: datagen.LabeledDataset, spec: datagen.StreamSpec, method: str,
            config: TrainConfig | None = None, seed: int = 0, repeat: int = 0,
            trace: Trace | None = None, return_state=False):
    """Execute one stream cell for one method and measure it."""
    cfg = config or TrainConfig()
    method = method.lower()
    cell = derive_seed(seed, spec.name, spec.n, repeat)
    run_seed = derive_seed(seed, method, spec.name, spec.n, repeat)
    split = datagen.split(dataset, spec, derive_seed(cell, "split"))
    X = dataset.features()
    y = dataset.labels
    strategy = cil.make_strategy(method, seed=derive_seed(run_seed, "strategy"), **cfg.params_for(method))
    sizes = (X.shape[1],) + cfg.hidden + (len(SOLVERS),)
    net = Network(sizes, seed=derive_seed(cell, "init"))
    order_rng = np.random.default_rng(derive_seed(cell, "order"))

    d1 = [int(s) for s in spec.d1]
    d2 = [int(s) for s in spec.d2]
    everything = d1 + d2
    test = split.test
    Xt, yt = X[test], y[test]
    in_d1 = np.isin(yt, d1)
    in_d2 = np.isin(yt, d2)

    rows1, rows2 = split.d1_train, split.d2_train
    if method == "oracle":
        rows = np.sort(np.concatenate([rows1, rows2]))
        strategy.begin_task(net, everything)
        epochs = cfg.oracle_epochs or 2 * cfg.epochs
        train_task(net, strategy, X[rows], y[rows], everything, epochs, cfg, order_rng, rows, trace, 0)
        acc_p1 = None
        pc_p1 = {}
    else:
        strategy.begin_task(net, d1)
        train_task(net, strategy, X[rows1], y[rows1], d1, cfg.epochs, cfg, order_rng, rows1, trace, 1)
        acc_p1 = accuracy(net, Xt[in_d1], yt[in_d1], d1)
        pc_p1 = per_class(net, Xt[in_d1], yt[in_d1], d1, d1)
        strategy.end_of_task(net, X[rows1], y[rows1], d1, rows1)
        if method == "cumulative":
            rows = np.sort(np.concatenate([rows1, rows2]))
        else:
            rows = rows2
        strategy.begin_task(net, d2)
        train_task(net, strategy, X[rows], y[rows], everything, cfg.epochs, cfg, order_rng, rows, trace, 2)
        strategy.end_of_task(net, X[rows2], y[rows2], everything, rows2)

    rec = RunRecord(
        stream=spec.name, d1=[Solver(c).name for c in d1], d2=[Solver(c).name for c in d2],
        n=spec.n, method=method, seed=run_seed, repeat=repeat,
        acc_d1_after_p1=acc_p1,
        acc_d1_after_p2=accuracy(net, Xt[in_d1], yt[in_d1], everything),
        acc_d2_after_p2=accuracy(net, Xt[in_d2], yt[in_d2], everything),
        acc_all=accuracy(net, Xt, yt, everything),
        per_class_acc=per_class(net, Xt, yt, everything, everything),
        per_class_acc_p1=pc_p1,
    )
    for name in METRICS:
        v = getattr(rec, name)
        if v is not None and not 0.0 <= v <= 1.0:
            raise RunFailed(f"{name}={v} outside [0, 1]")
    if return_state:
        return rec, {"split": split, "strategy": strategy, "network": net}
    return rec


def _job(args):
    dataset, spec, method, config, seed, repeat = args
    try:
        return run_one(dataset, spec, method, config, seed, repeat), None
    except Exception as exc:  # noqa: BLE001 - failures are reported, the matrix goes on
        return None, f"{method} {spec.name} n={spec.n} repeat={repeat}: {type(exc).__name__}: {exc}"


def method_rank(method):
    order = list(cil.ALL_METHODS) + ["naive"]
    return order.index(method) if method in order else len(order)


def sort_key(rec: RunRecord):
    streams = [s.name for s in datagen.make_streams()]
    return (method_rank(rec.method), rec.method, streams.index(rec.stream), rec.n, rec.repeat)


def run_matrix(dataset, methods, sizes=datagen.DEFAULT_SIZES, seed=0, config=None,
               workers=1, repeats=1):
    """All 6 streams x sizes x repeats for every method.

    Returns (records sorted by method/stream/size/repeat, failure messages).
    """
    config = config or TrainConfig()
    jobs = [(dataset, spec.with_size(n), m, config, seed, r)
            for m in methods
            for spec in datagen.make_streams(dataset)
            for n in sizes
            for r in range(repeats)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    records = [r for r, _ in results if r is not None]
    failures = [e for _, e in results if e is not None]
    for f in failures:
        log.warning("run failed: %s", f)
    return sorted(records, key=sort_key), failures


def save_records(records, path):
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


def load_records(path):
    out = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(RunRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ValueError(f"{path}:{i}: malformed record: {exc}") from None
    return out


# -- aggregation -----------------------------------------------------------------


def mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None, 0
    return mean(vals), (stdev(vals) if len(vals) > 1 else 0.0), len(vals)


@dataclass
class AggregateReport:
    # method -> metric -> (mean, sample std, count)
    table1: dict
    # D1 pair name -> {"p1": {cls: acc}, "p2": {cls: acc}, "loss": {cls: acc}}, for one method
    table2: dict
    # pair name -> {"as_d1": {cls: acc}, "as_d2": {cls: acc}, "diff": {cls: acc}}, for one method
    table3: dict
    detail_method: str
    per_stream: dict  # method -> stream -> metric -> (mean, std, count)


def _avg_dicts(dicts):
    keys = dicts[0].keys()
    return {k: mean(d[k] for d in dicts) for k in keys}


def aggregate(records, detail_method="replay") -> AggregateReport:
    if not records:
        raise ValueError("no records to aggregate")
    methods = sorted({r.method for r in records}, key=method_rank)
    table1, per_stream = {}, {}
    for m in methods:
        rs = [r for r in records if r.method == m]
        table1[m] = {k: mean_std([getattr(r, k) for r in rs]) for k in METRICS}
        per_stream[m] = {}
        for s in sorted({r.stream for r in rs}):
            ss = [r for r in rs if r.stream == s]
            per_stream[m][s] = {k: mean_std([getattr(r, k) for r in ss]) for k in METRICS}
    if detail_method not in table1:
        detail_method = methods[0]
    det = [r for r in records if r.method == detail_method]
    table2, table3 = {}, {}
    for spec in datagen.make_streams():
        rs = [r for r in det if r.stream == spec.name]
        pair = "-".join(s.name for s in spec.d1)
        names = [s.name for s in spec.d1]
        if rs and rs[0].per_class_acc_p1:
            p1 = _avg_dicts([r.per_class_acc_p1 for r in rs])
            p2 = _avg_dicts([{c: r.per_class_acc[c] for c in names} for r in rs])
            table2[pair] = {"p1": p1, "p2": p2, "loss": {c: p2[c] - p1[c] for c in names}}
        # the same pair trained as D2 happens in the stream whose D1 is the complement
        as_d2 = [r for r in det if r.d2 == names]
        if rs and as_d2:
            a = _avg_dicts([{c: r.per_class_acc[c] for c in names} for r in rs])
            b = _avg_dicts([{c: r.per_class_acc[c] for c in names} for r in as_d2])
            table3[pair] = {"as_d1": a, "as_d2": b, "diff": {c: a[c] - b[c] for c in names}}
    return AggregateReport(table1, table2, table3, detail_method, per_stream)


def forgetting_summary(report: AggregateReport):
    """(method, D1 accuracy lost after retraining) sorted by loss, smallest first."""
    out = []
    for m, row in report.table1.items():
        before, after = row["acc_d1_after_p1"][0], row["acc_d1_after_p2"][0]
        if before is None or after is None:
            continue
        out.append((m, before - after))
    return sorted(out, key=lambda t: (t[1], t[0]))

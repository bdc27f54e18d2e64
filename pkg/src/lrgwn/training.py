"""Losses, gradients, AdamW, toy tasks and the training loop."""

from __future__ import annotations

import csv
import io as _io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .graph import build_normalized_laplacian, from_edges, hop_distances, path_graph
from .network import (
    NonFiniteError,
    init_params,
    model_backward,
    model_forward,
    named_tensors,
    with_tensors,
)
from .spectral import partial_evd

log = logging.getLogger(__name__)

KINDS = ("node-regression", "node-classification", "graph-classification")


# -- losses -------------------------------------------------------------------

def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grad(kind, pred, target):
    """Mean-reduced loss and its gradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    if kind == "mse" or kind == "node-regression":
        target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
        r = pred - target
        return float(np.mean(r * r)), 2.0 * r / r.size
    if kind == "mae":
        target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
        r = pred - target
        return float(np.mean(np.abs(r))), np.sign(r) / r.size
    if kind in ("cross-entropy", "node-classification", "graph-classification"):
        target = np.asarray(target).astype(np.int64).reshape(-1)
        if target.size != pred.shape[0]:
            raise ValueError(f"{target.size} labels for {pred.shape[0]} predictions")
        logp = _log_softmax(pred)
        nll = -logp[np.arange(target.size), target]
        grad = np.exp(logp)
        grad[np.arange(target.size), target] -= 1.0
        return float(nll.mean()), grad / target.size
    raise ValueError(f"unknown loss kind {kind!r}")


def loss(kind, predictions, targets):
    return loss_and_grad(kind, predictions, targets)[0]


# -- samples and tasks -----------------------------------------------------------

@dataclass
class Sample:
    """One graph prepared for the model: Laplacian, decomposition, targets, loss mask."""

    graph: object
    lap: object
    evd: object
    target: np.ndarray
    mask: np.ndarray | None = None  # node indices entering the loss; None = all


@dataclass
class ToyTask:
    name: str
    graphs: list
    targets: list
    kind: str
    splits: dict = field(default_factory=dict)
    n_classes: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        seen = set()
        for idx in self.splits.values():
            s = set(int(i) for i in idx)
            if s & seen:
                raise ValueError("task splits overlap")
            seen |= s

    def to_dict(self):
        return {
            "name": self.name,
            "kind": self.kind,
            "n_classes": self.n_classes,
            "splits": {k: [int(i) for i in v] for k, v in self.splits.items()},
            "graphs": [
                {"n": g.n, "edges": g.edges.tolist(),
                 "features": None if g.features is None else g.features.tolist()}
                for g in self.graphs
            ],
            "targets": [np.asarray(t).tolist() for t in self.targets],
        }

    @classmethod
    def from_dict(cls, doc):
        graphs = [from_edges(g["n"], g["edges"], features=g["features"]) for g in doc["graphs"]]
        targets = [np.asarray(t) for t in doc["targets"]]
        return cls(doc["name"], graphs, targets, doc["kind"], doc["splits"], doc.get("n_classes", 0))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _split(n_items, rng, fractions=(0.6, 0.2, 0.2)):
    perm = rng.permutation(n_items)
    n_tr = int(round(fractions[0] * n_items))
    n_va = int(round(fractions[1] * n_items))
    return {
        "train": np.sort(perm[:n_tr]).tolist(),
        "val": np.sort(perm[n_tr:n_tr + n_va]).tolist(),
        "test": np.sort(perm[n_tr + n_va:]).tolist(),
    }


def make_path_localization_task(n_nodes=64, n_graphs=40, seed=0, sources=None):
    """Path graphs with a single marked source; target = hop distance / (n - 1)."""
    if n_nodes < 64:
        raise ValueError("n_nodes must be >= 64")
    rng = np.random.default_rng(seed)
    if sources is None:
        sources = rng.integers(0, n_nodes, size=n_graphs)
    graphs, targets = [], []
    base = path_graph(n_nodes)
    for src in sources:
        x = np.zeros((n_nodes, 1))
        x[int(src), 0] = 1.0
        graphs.append(base.with_features(x))
        targets.append(hop_distances(base, int(src)).reshape(-1, 1) / (n_nodes - 1))
    return ToyTask("path-localization", graphs, targets, "node-regression",
                   _split(len(graphs), rng))


DEGREE_THRESHOLD = 3  # degree >= 3 is the "high" bucket


def degree_bucket(deg):
    return (np.asarray(deg) >= DEGREE_THRESHOLD).astype(np.int64)


def _hub_graph(rng):
    # hubs joined by a random tree, each carrying a handful of leaves
    hubs = int(rng.integers(3, 7))
    edges = [(int(i), int(rng.integers(0, i))) for i in range(1, hubs)]
    nxt = hubs
    for h in range(hubs):
        for _ in range(int(rng.integers(2, 7))):
            edges.append((h, nxt))
            nxt += 1
    return from_edges(nxt, edges, features=np.ones((nxt, 1)))


def make_local_degree_task(n_graphs=30, seed=0):
    """Hub-and-leaf graphs; node class = degree bucket (low < 3 <= high)."""
    rng = np.random.default_rng(seed)
    graphs = [_hub_graph(rng) for _ in range(n_graphs)]
    targets = [degree_bucket(g.degrees) for g in graphs]
    return ToyTask("local-degree", graphs, targets, "node-classification",
                   _split(len(graphs), rng), n_classes=2)


def prepare_samples(task, cfg, k=8, tol=1e-8, seed=0, cache=None):
    """Laplacians and partial decompositions, computed once per distinct graph."""
    cache = {} if cache is None else cache
    out = []
    for g, t in zip(task.graphs, task.targets):
        key = g.content_hash()
        if key not in cache:
            lap = build_normalized_laplacian(g)
            evd = partial_evd(lap, min(k, g.n), tol=tol, seed=seed, graph=g)
            cache[key] = (lap, evd)
        lap, evd = cache[key]
        out.append(Sample(g, lap, evd, np.asarray(t)))
    return out


# -- gradients --------------------------------------------------------------------

def batch_loss(m, batch, kind):
    total = 0.0
    for s in batch:
        out = model_forward(m, s.graph, s.evd, lap=s.lap)
        pred, tgt = _select(out, s)
        total += loss_and_grad(kind, pred, tgt)[0]
    return total / len(batch)


def _select(out, s):
    if s.mask is None:
        return out, s.target
    return out[s.mask], np.asarray(s.target)[s.mask]


def backward(m, batch, kind):
    """Mean loss over ``batch`` and exact gradients keyed like :func:`named_tensors`."""
    grads = {k: np.zeros_like(v) for k, v in named_tensors(m).items()}
    total = 0.0
    for s in batch:
        out, cache = model_forward(m, s.graph, s.evd, lap=s.lap, keep=True)
        pred, tgt = _select(out, s)
        val, dpred = loss_and_grad(kind, pred, tgt)
        total += val
        if s.mask is None:
            dout = dpred
        else:
            dout = np.zeros_like(out)
            dout[s.mask] = dpred
        for k, g in model_backward(m, s.evd, cache, dout / len(batch)).items():
            grads[k] += g
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
    return total / len(batch), grads


def central_difference(fn, tensors, step=1e-5):
    """Central differences of scalar ``fn()`` with respect to each entry of ``tensors`` (in place)."""
    if step <= 0:
        raise ValueError("step must be positive")
    out = {}
    for k, a in tensors.items():
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            fp = fn()
            flat[i] = old - step
            fm = fn()
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * step)
        out[k] = g
    return out


def fd_gradient(m, batch, kind, step=1e-5):
    work = m.copy()
    return central_difference(lambda: batch_loss(work, batch, kind), named_tensors(work), step)


# -- optimizer --------------------------------------------------------------------

@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    total_steps: int = 1000
    warmup_frac: float = 0.05
    schedule: str = "cosine"  # cosine | constant


@dataclass(frozen=True)
class OptimizerState:
    config: AdamWConfig
    m: dict
    v: dict
    step: int = 0


def init_optimizer(params, config=None):
    config = config or AdamWConfig()
    zeros = {k: np.zeros_like(a) for k, a in named_tensors(params).items()}
    return OptimizerState(config, zeros, {k: np.zeros_like(a) for k, a in zeros.items()}, 0)


def learning_rate(config, step):
    """Linear warmup from 0 over ``warmup_frac * total_steps``, then cosine to 0."""
    if config.schedule == "constant":
        return config.lr
    warm = int(round(config.warmup_frac * config.total_steps))
    if step < warm:
        return config.lr * step / warm
    span = max(config.total_steps - warm, 1)
    t = min(step - warm, span) / span
    return 0.5 * config.lr * (1.0 + math.cos(math.pi * t))


def optimizer_step(state, params, grads):
    """One AdamW step with decoupled weight decay; returns ``(params, state)``."""
    c = state.config
    b1, b2 = c.betas
    t = state.step + 1
    lr = learning_rate(c, state.step)
    tensors = named_tensors(params)
    if tensors.keys() != grads.keys():
        raise KeyError("gradient keys do not match parameters")
    new_m, new_v, new_t = {}, {}, {}
    for k, p in tensors.items():
        g = grads[k]
        mk = b1 * state.m[k] + (1.0 - b1) * g
        vk = b2 * state.v[k] + (1.0 - b2) * g * g
        mhat = mk / (1.0 - b1**t)
        vhat = vk / (1.0 - b2**t)
        new_t[k] = p - lr * (mhat / (np.sqrt(vhat) + c.eps) + c.weight_decay * p)
        new_m[k], new_v[k] = mk, vk
    return with_tensors(params, new_t), OptimizerState(c, new_m, new_v, t)


# -- training loop ----------------------------------------------------------------

TRACE_FIELDS = ("epoch", "step", "train_loss", "val_loss", "val_metric", "lr")


def evaluate(m, batch, kind):
    """``(loss, metric)``: metric is accuracy for classification, MSE for regression."""
    total, correct, count = 0.0, 0, 0
    sq = 0.0
    for s in batch:
        out = model_forward(m, s.graph, s.evd, lap=s.lap)
        pred, tgt = _select(out, s)
        total += loss_and_grad(kind, pred, tgt)[0]
        if kind == "node-regression":
            r = pred - np.asarray(tgt).reshape(pred.shape)
            sq += float(np.sum(r * r))
            count += r.size
        else:
            lab = np.asarray(tgt).reshape(-1)
            correct += int(np.sum(np.argmax(pred, axis=1) == lab))
            count += lab.size
    metric = sq / count if kind == "node-regression" else correct / count
    return total / len(batch), metric


@dataclass
class TrainResult:
    params: object
    trace: list
    best_epoch: int


def train(m, samples, splits, kind, opt=None, epochs=100, seed=0, batch_size=None,
          patience=20, trace_path=None):
    """AdamW training with early stopping on validation loss; returns the best parameters.

    ``samples`` is the prepared sample list and ``splits`` maps ``train``/``val``
    to indices into it. Mini-batch order is a seeded permutation per epoch.
    """
    rng = np.random.default_rng(seed)
    tr = [samples[i] for i in splits["train"]]
    va = [samples[i] for i in splits.get("val", [])] or tr
    bs = batch_size or len(tr)
    steps_per_epoch = math.ceil(len(tr) / bs)
    opt = opt or AdamWConfig()
    opt = replace(opt, total_steps=max(epochs * steps_per_epoch, 1))
    state = init_optimizer(m, opt)
    best, best_loss, best_epoch, bad = m, math.inf, 0, 0
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(len(tr))
        losses = []
        for b in range(steps_per_epoch):
            batch = [tr[i] for i in order[b * bs:(b + 1) * bs]]
            lr = learning_rate(opt, state.step)
            try:
                val, grads = backward(m, batch, kind)
            except NonFiniteError as exc:
                raise NonFiniteError(f"{exc} at epoch {epoch}, step {state.step}") from exc
            if not math.isfinite(val):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, step {state.step}")
            m, state = optimizer_step(state, m, grads)
            losses.append(val)
        v_loss, v_metric = evaluate(m, va, kind)
        trace.append({"epoch": epoch, "step": state.step, "train_loss": float(np.mean(losses)),
                      "val_loss": v_loss, "val_metric": v_metric, "lr": lr})
        if v_loss < best_loss:
            best, best_loss, best_epoch, bad = m, v_loss, epoch, 0
        else:
            bad += 1
            if bad >= patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    if trace_path is not None:
        Path(trace_path).write_text(trace_to_csv(trace), encoding="utf-8")
    return TrainResult(best, trace, best_epoch)


def trace_to_csv(trace, comment=None):
    buf = _io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    for row in trace:
        w.writerow([row["epoch"], row["step"]] + [repr(float(row[k])) for k in TRACE_FIELDS[2:]])
    return buf.getvalue()


def ablation_configs(cfg):
    """The full model and its two single-component removals."""
    return {
        "full": cfg,
        "no-spatial": replace(cfg, spatial=False),
        "no-spectral": replace(cfg, spectral=False),
    }


def run_training(task, cfg, k=8, epochs=100, seed=0, opt=None, patience=20, evd_cache=None,
                 batch_size=None):
    """Prepare ``task``, initialize from ``seed``, train; returns ``(TrainResult, samples)``."""
    samples = prepare_samples(task, cfg, k=k, seed=seed, cache=evd_cache)
    m = init_params(cfg, seed=seed)
    res = train(m, samples, task.splits, task.kind, opt=opt, epochs=epochs, seed=seed,
                batch_size=batch_size, patience=patience)
    return res, samples

"""Experiment definitions, distance diagnostics and the TU-format loader."""

from __future__ import annotations

import csv
import json
import logging
import os
import random
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .engine import DelayModel
from .errors import InvalidArgument, ParseError
from .graph import (DatasetInstance, Graph, TaskKind, bfs_distances, generate_cycle_pair,
                    generate_skip_cycles, generate_spanning_tree_graph,
                    generate_triangle_lcc_data, load_fixed_constructions)
from .models import (AmpCellConfig, AmpModel, RunSettings, TrainConfig, accuracy_of, predict,
                     train)
from .sync_baseline import SginModel, sgin_forward

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DESK_TEST_SIZES = (10, 25, 50)
TEXT_TEST_SIZES = (10, 15, 25, 50, 100, 250, 500, 1000)
TABLE_TEST_SIZES = (10, 25, 50, 100, 250, 500, 1000, 2500)
TEST_SEED_BASE = 10_000_000


def results_dir(default="results") -> Path:
    return Path(os.environ.get("AMP_RESULTS_DIR", default))


# ---------------------------------------------------------------- configs

@dataclass
class ExperimentConfig:
    task: str
    model: dict
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    train_n: int = 10
    train_graphs: int = 25
    test_sizes: list = field(default_factory=lambda: list(DESK_TEST_SIZES))
    test_graphs_per_size: int = 20
    iterations: int = 1000
    lr: float = 0.01
    clip: float = 1.0
    budget_factor: int = 10
    halting_cap_factor: int = 50
    fixed_budget: int | None = None
    delay: dict = field(default_factory=lambda: {"kind": "constant", "value": 1.0})
    metrics: list = field(default_factory=lambda: ["accuracy", "underreaching", "oversmoothing"])
    k_tasks: int = 1
    dataset_dir: str | None = None
    schema_version: int = SCHEMA_VERSION

    def cell_config(self) -> AmpCellConfig:
        return AmpCellConfig.from_dict(self.model)

    def run_settings(self) -> RunSettings:
        return RunSettings(self.budget_factor, self.halting_cap_factor, DelayModel(**self.delay),
                           self.fixed_budget)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.iterations, self.lr, self.clip, seed, self.run_settings())

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgument(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def parity_task(train_n: int = 10, train_graphs: int = 25, test_sizes=DESK_TEST_SIZES,
                seeds=(0, 1, 2, 3, 4), model: AmpCellConfig | None = None, **kw) -> ExperimentConfig:
    model = model or AmpCellConfig(30, 10, "gru", halting="iter")
    return ExperimentConfig("parity", model.to_dict(), list(seeds), train_n, train_graphs,
                            list(test_sizes), **kw)


# ------------------------------------------------------------ parity data

def parity_instance(n: int, seed: int, k: int = 1) -> DatasetInstance:
    """Spanning-tree graph with ``k`` marked starts; labels are BFS-distance parities."""
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    if n < k:
        raise InvalidArgument(f"graph with n={n} cannot hold {k} distinct starts")
    g = generate_spanning_tree_graph(n, seed)
    starts = tuple(random.Random(seed ^ 0x5EED).sample(range(n), k))
    dists = [bfs_distances(g, s) for s in starts]
    if k == 1:
        g = g.with_labels(node_labels=[d % 2 for d in dists[0]])
        return DatasetInstance(g, TaskKind.NODE, starts)
    labels = np.array([[d[v] % 2 for d in dists] for v in range(n)], dtype=np.int64)
    return DatasetInstance(g, TaskKind.MULTI_START_NODE, starts, labels)


def parity_data(cfg: ExperimentConfig, seed: int, k: int | None = None):
    """Training graphs and per-size test graphs; test seeds never overlap training seeds."""
    k = cfg.k_tasks if k is None else k
    train_set = [parity_instance(cfg.train_n, seed * 100_000 + i, k) for i in range(cfg.train_graphs)]
    tests = {n: [parity_instance(n, TEST_SEED_BASE + seed * 1_000_000 + n * 1000 + j, k)
                 for j in range(cfg.test_graphs_per_size)] for n in cfg.test_sizes}
    return train_set, tests


def max_train_distance(instances) -> int:
    return max(max(bfs_distances(i.graph, i.start_marks[0])) for i in instances)


# ------------------------------------------------------------ diagnostics

def bucket_label(d: int) -> str:
    lo = d - d % 2
    return f"{lo}-{lo + 1}"


def underreaching_breakdown(predictions, distances) -> dict:
    """Accuracy per distance bucket ``0-1``, ``2-3``, ...; keys in distance order."""
    counts: dict[int, list[int]] = {}
    for (v, pred, y) in predictions:
        d = distances[v]
        if d < 0:
            raise InvalidArgument(f"node {v} is unreachable")
        c = counts.setdefault(d // 2, [0, 0])
        c[0] += pred == y
        c[1] += 1
    return {bucket_label(2 * b): {"accuracy": c[0] / c[1], "count": c[1]}
            for b, c in sorted(counts.items())}


def overall_from_buckets(buckets: dict) -> float:
    total = sum(b["count"] for b in buckets.values())
    return sum(b["accuracy"] * b["count"] for b in buckets.values()) / total


def oversmoothing_restricted(predictions, distances, train_max_distance: int) -> float:
    kept = [(v, p, y) for v, p, y in predictions if distances[v] <= train_max_distance]
    return accuracy_of(kept)


def per_task_accuracy(predictions) -> float:
    """Accuracy over (node, task) pairs for multi-start predictions."""
    hits = total = 0
    for _, guess, ys in predictions:
        for a, b in zip(guess, ys):
            hits += a == b
            total += 1
    return hits / total if total else float("nan")


# ------------------------------------------------------------- evaluation

def _eval_chunk(args):
    model, indexed, settings, seed0 = args
    return [predict(model, inst, settings, seed0 + i).predictions for i, inst in indexed]


def evaluate(model: AmpModel, instances, settings: RunSettings, jobs: int = 1, delay_seed: int = 0):
    """Predictions per instance; fans out over processes with a snapshot of the model.

    Delay seeds depend only on the instance index, so ``jobs`` never changes results.
    """
    indexed = list(enumerate(instances))
    if jobs <= 1 or len(instances) < 2:
        return _eval_chunk((model, indexed, settings, delay_seed))
    chunks = [indexed[i::jobs] for i in range(jobs)]
    with ProcessPoolExecutor(jobs) as ex:
        parts = list(ex.map(_eval_chunk, [(model, c, settings, delay_seed) for c in chunks]))
    out = [None] * len(instances)
    for chunk, part in zip(chunks, parts):
        for (i, _), p in zip(chunk, part):
            out[i] = p
    return out


def parity_seed_report(cfg: ExperimentConfig, seed: int, jobs: int = 1,
                       model: AmpModel | None = None) -> dict:
    """Train (unless a model is given) and evaluate one seed of the parity task."""
    train_set, tests = parity_data(cfg, seed)
    history = []
    if model is None:
        model, history = train(train_set, cfg.cell_config(), cfg.train_config(seed))
    settings = cfg.run_settings()
    tmax = max_train_distance(train_set)
    per_size = {}
    for n, insts in tests.items():
        preds_per = evaluate(model, insts, settings, jobs, delay_seed=seed)
        if cfg.k_tasks > 1:
            flat = [p for ps in preds_per for p in ps]
            per_size[n] = {"accuracy": per_task_accuracy(flat), "count": len(flat)}
            continue
        flat, buckets_in = [], []
        restricted_hits = restricted_total = 0
        for inst, ps in zip(insts, preds_per):
            dist = bfs_distances(inst.graph, inst.start_marks[0])
            # offset node ids so all graphs of this size share one distance table
            base = len(buckets_in)
            buckets_in.extend(dist)
            flat.extend((base + v, p, y) for v, p, y in ps)
        buckets = underreaching_breakdown(flat, buckets_in)
        restricted = oversmoothing_restricted(flat, buckets_in, tmax)
        per_size[n] = {"accuracy": accuracy_of(flat), "count": len(flat),
                       "underreaching": buckets, "oversmoothing_restricted": restricted,
                       "bucket_reconstruction": overall_from_buckets(buckets)}
    return {"seed": seed, "train_max_distance": tmax, "sizes": per_size,
            "final_loss": history[-1].loss if history else None,
            "loss_curve": [h.loss for h in history]}, model


def _seed_worker(args):
    cfg, seed = args
    return parity_seed_report(cfg, seed)


def run_parity_experiment(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    """All seeds; returns the summary dict (per-seed reports plus mean/std per size)."""
    if jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            reports = [r for r, _ in ex.map(_seed_worker, [(cfg, s) for s in cfg.seeds])]
    else:
        reports = [parity_seed_report(cfg, s)[0] for s in cfg.seeds]
    return summarize(cfg, reports)


def summarize(cfg: ExperimentConfig, reports: list) -> dict:
    summary = {}
    for n in cfg.test_sizes:
        accs = [r["sizes"][n]["accuracy"] for r in reports]
        summary[n] = {"mean": statistics.fmean(accs), "median": statistics.median(accs),
                      "std": statistics.pstdev(accs)}
    return {"schema_version": SCHEMA_VERSION, "config": asdict(cfg), "seeds": reports,
            "summary": summary}


def oversquashing_multitask(cfg: ExperimentConfig, k_tasks: int = 3, jobs: int = 1) -> dict:
    """Single-task and k-task parity side by side for the same seeds and sizes."""
    if min([cfg.train_n, *cfg.test_sizes]) < k_tasks:
        raise InvalidArgument(f"every graph needs at least k={k_tasks} nodes")
    single = run_parity_experiment(ExperimentConfig(**{**asdict(cfg), "k_tasks": 1}), jobs)
    multi = run_parity_experiment(ExperimentConfig(**{**asdict(cfg), "k_tasks": k_tasks}), jobs)
    return {"schema_version": SCHEMA_VERSION, "k_tasks": k_tasks,
            "single": {n: v for n, v in single["summary"].items()},
            "multi": {n: v for n, v in multi["summary"].items()}}


def report_rows(summary: dict) -> list[dict]:
    """Flat CSV rows: one per seed x size x metric."""
    rows = []
    for rep in summary["seeds"]:
        for n, m in rep["sizes"].items():
            rows.append({"seed": rep["seed"], "size": n, "metric": "accuracy", "value": m["accuracy"]})
            if "oversmoothing_restricted" in m:
                rows.append({"seed": rep["seed"], "size": n, "metric": "oversmoothing_restricted",
                             "value": m["oversmoothing_restricted"]})
                for b, v in m["underreaching"].items():
                    rows.append({"seed": rep["seed"], "size": n, "metric": f"bucket_{b}",
                                 "value": v["accuracy"]})
    return rows


def write_csv(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["schema_version", "seed", "size", "metric", "value"])
        w.writeheader()
        for r in rows:
            w.writerow({"schema_version": SCHEMA_VERSION, **r})


def write_json(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str))


# --------------------------------------------------- expressiveness tasks

def cycle_pair_instances() -> list[DatasetInstance]:
    a, b = generate_cycle_pair()
    return [DatasetInstance(a, TaskKind.NODE), DatasetInstance(b, TaskKind.NODE)]


def construction_instances(name: str) -> list[DatasetInstance]:
    c = load_fixed_constructions()[name]
    kind = TaskKind.NODE if c.graphs[0].node_labels is not None else TaskKind.GRAPH
    return [DatasetInstance(g, kind) for g in c.graphs]


def expressiveness_instances(task: str, seed: int = 0) -> list[DatasetInstance]:
    if task == "cycle_pair":
        return cycle_pair_instances()
    if task in ("limits1", "limits2", "max", "mean"):
        return construction_instances(task)
    if task == "skip_cycles":
        return generate_skip_cycles([9, 11, 12, 15, 16])
    if task in ("triangles", "lcc"):
        return generate_triangle_lcc_data(20, 12, seed, task)
    raise InvalidArgument(f"unknown task {task!r}")


def certify_baseline_blind(graphs: list[Graph], trials: int = 10, seed: int = 0, L: int = 3,
                           d: int = 4, tol: float = 1e-9) -> bool:
    """True when random sGIN weights give the same multiset of node outputs on every graph."""
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        model = SginModel.random(d, L, rng)
        outs = []
        for g in graphs:
            x = np.repeat(g.features[:, :1], d, axis=1) if g.d_in != d else g.features
            h = sgin_forward(g, model, x)
            outs.append(h[np.lexsort(h.T[::-1])])
        for o in outs[1:]:
            if o.shape != outs[0].shape or not np.allclose(o, outs[0], atol=tol, rtol=0):
                return False
    return True


# ---------------------------------------------------------------- TU data

def _read_ints(path: Path, width: int | None = None) -> list[tuple[int, list[int]]]:
    rows = []
    with open(path) as fh:
        for i, raw in enumerate(fh, start=1):
            s = raw.strip()
            if not s:
                continue
            try:
                vals = [int(float(t)) for t in s.replace(",", " ").split()]
            except ValueError:
                raise ParseError(f"non-numeric entry {s!r}", str(path), i) from None
            if width is not None and len(vals) != width:
                raise ParseError(f"expected {width} values, got {len(vals)}", str(path), i)
            rows.append((i, vals))
    return rows


def _prefix(root: Path) -> str:
    hits = sorted(root.glob("*_A.txt"))
    if len(hits) != 1:
        raise ParseError(f"expected exactly one *_A.txt in {root}", str(root))
    return hits[0].name[:-len("_A.txt")]


def load_tu_dataset(directory, name: str | None = None) -> list[DatasetInstance]:
    """Graph-classification instances from a standard TU directory.

    Graph labels are remapped to ``0..C-1`` in sorted order; node labels become
    one-hot features over the dataset-wide label set.
    """
    root = Path(directory)
    name = name or _prefix(root)
    f = lambda suffix: root / f"{name}_{suffix}.txt"
    for req in ("A", "graph_indicator", "graph_labels"):
        if not f(req).exists():
            raise ParseError(f"missing {f(req).name}", str(root))
    indicator = [(ln, v[0]) for ln, v in _read_ints(f("graph_indicator"), 1)]
    graph_labels = [(ln, v[0]) for ln, v in _read_ints(f("graph_labels"), 1)]
    n_graphs = len(graph_labels)
    node_graph = []
    for ln, gid in indicator:
        if not 1 <= gid <= n_graphs:
            raise ParseError(f"graph id {gid} outside 1..{n_graphs}", str(f("graph_indicator")), ln)
        if node_graph and gid < node_graph[-1]:
            raise ParseError("graph indicator is not sorted", str(f("graph_indicator")), ln)
        node_graph.append(gid - 1)
    node_labels = None
    if f("node_labels").exists():
        rows = _read_ints(f("node_labels"))
        if len(rows) != len(node_graph):
            ln = rows[-1][0] if rows else 0
            raise ParseError(f"{len(rows)} node labels for {len(node_graph)} nodes",
                             str(f("node_labels")), ln)
        node_labels = [v[0] for _, v in rows]
    offsets = {}
    counts = [0] * n_graphs
    for v, gi in enumerate(node_graph):
        if counts[gi] == 0:
            offsets[gi] = v
        counts[gi] += 1
    if 0 in counts:
        raise ParseError(f"graph {counts.index(0) + 1} has no nodes", str(f("graph_indicator")))
    edges = [set() for _ in range(n_graphs)]
    for ln, (a, b) in _read_ints(f("A"), 2):
        if not (1 <= a <= len(node_graph) and 1 <= b <= len(node_graph)):
            raise ParseError(f"node id out of range in edge ({a}, {b})", str(f("A")), ln)
        ga, gb = node_graph[a - 1], node_graph[b - 1]
        if ga != gb:
            raise ParseError(f"edge ({a}, {b}) crosses graphs", str(f("A")), ln)
        if a == b:
            continue
        u, w = a - 1 - offsets[ga], b - 1 - offsets[ga]
        edges[ga].add((min(u, w), max(u, w)))
    label_map = {lab: i for i, lab in enumerate(sorted({lab for _, lab in graph_labels}))}
    feat_map = None
    if node_labels is not None:
        feat_map = {lab: i for i, lab in enumerate(sorted(set(node_labels)))}
    out = []
    for gi in range(n_graphs):
        n = counts[gi]
        if feat_map is None:
            x = np.ones((n, 1))
        else:
            x = np.zeros((n, len(feat_map)))
            for v in range(n):
                x[v, feat_map[node_labels[offsets[gi] + v]]] = 1.0
        g = Graph.from_edges(n, sorted(edges[gi]), x, graph_label=label_map[graph_labels[gi][1]])
        out.append(DatasetInstance(g, TaskKind.GRAPH))
    return out


def write_tu_dataset(graphs: list[Graph], directory, name: str, node_labels=None) -> None:
    """Inverse of the loader for fixtures; ``node_labels`` is one list per graph."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    a_lines, ind, glab, nlab = [], [], [], []
    base = 0
    for gi, g in enumerate(graphs, start=1):
        for u, v in g.edges():
            a_lines.append(f"{base + u + 1}, {base + v + 1}")
            a_lines.append(f"{base + v + 1}, {base + u + 1}")
        ind.extend([str(gi)] * g.n)
        glab.append(str(g.graph_label))
        if node_labels is not None:
            nlab.extend(str(x) for x in node_labels[gi - 1])
        base += g.n
    (root / f"{name}_A.txt").write_text("\n".join(a_lines) + "\n")
    (root / f"{name}_graph_indicator.txt").write_text("\n".join(ind) + "\n")
    (root / f"{name}_graph_labels.txt").write_text("\n".join(glab) + "\n")
    if node_labels is not None:
        (root / f"{name}_node_labels.txt").write_text("\n".join(nlab) + "\n")


def split_fold(instances: list, fold: int = 0, folds: int = 10, seed: int = 0):
    """Deterministic shuffled k-fold split -> (train, test)."""
    idx = list(range(len(instances)))
    random.Random(seed).shuffle(idx)
    test = set(idx[fold::folds])
    return ([instances[i] for i in idx if i not in test], [instances[i] for i in idx if i in test])


def tu_smoke_run(directory, seed: int = 0, epochs: int = 20, state_width: int = 16,
                 fixed_budget: int = 15, fold: int = 0) -> dict:
    """One fold of AMP-RNN graph classification on a TU dataset.

    Returns per-epoch mean training losses plus final train/test accuracy.
    """
    instances = load_tu_dataset(directory)
    train_set, test_set = split_fold(instances, fold, 10, seed)
    cfg = AmpCellConfig(state_width, 10, "rnn")
    settings = RunSettings(delay=DelayModel.constant(), fixed_budget=fixed_budget)
    model = None
    epoch_losses = []
    order_rng = random.Random(seed)
    for _ in range(epochs):
        order = train_set[:]
        order_rng.shuffle(order)
        model, hist = train(order, cfg, TrainConfig(len(order), 0.01, 1.0, seed, settings), model=model,
                            n_classes=max(2, 1 + max(int(i.graph.graph_label) for i in instances)))
        epoch_losses.append(statistics.fmean(h.loss for h in hist))
    acc = lambda insts: accuracy_of([p for ps in evaluate(model, insts, settings) for p in ps])
    return {"graphs": len(instances), "epoch_losses": epoch_losses,
            "train_accuracy": acc(train_set), "test_accuracy": acc(test_set) if test_set else None}

"""Acceptance criteria at full tolerance; one PASS/FAIL line each in the summary.

The MUTAG smoke run needs a local TU copy of the dataset in ``AMP_MUTAG_DIR``.
"""

import json
import os
import statistics
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest

from asyncmp import autodiff as ad
from asyncmp import bench, idproto
from asyncmp.engine import DelayModel, RunConfig, run
from asyncmp.graph import DatasetInstance, TaskKind, generate_spanning_tree_graph, path_graph
from asyncmp.models import (AmpCellConfig, AmpModel, RunSettings, TrainConfig, forward_instance, predict,
                            train)
from asyncmp.verify import verify_mlp, verify_sim

from conftest import ACCEPTANCE_LINES

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def record(tag, ok, detail):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {tag}: {detail}")
    return ok


def test_c1_synchronizer_matches_oracle():
    rep = verify_sim(graphs=50, max_n=12, layers=3, seed=0, max_degree=5)
    ok = rep.passed and rep.seconds < 30
    assert record("C1 synchronizer", ok,
                  f"max deviation {rep.max_deviation:.2e} (constant {rep.per_delay['constant']:.1e}, "
                  f"uniform {rep.per_delay['uniform']:.1e}) in {rep.seconds:.1f}s")


def test_c2_exact_mlp():
    rep = verify_mlp(samples=10_000, seed=0)
    ok = rep.passed and rep.seconds < 10
    assert record("C2 exact MLP", ok, f"{rep.branch_mismatches} branch mismatches, "
                                      f"max rel error {rep.max_error:.1e} in {rep.seconds:.1f}s")


@pytest.fixture(scope="module")
def id_reports():
    t0 = time.perf_counter()
    reports = {k: idproto.protocol_report(k, 1000, seed=k) for k in range(1, 7)}
    surrender = idproto.surrender_probability(100_000, seed=0)
    return reports, surrender, time.perf_counter() - t0


def test_c3_id_protocol(id_reports):
    reports, surrender, secs = id_reports
    failures = sum(r["uniqueness_failures"] + r["completeness_failures"] for r in reports.values())
    # two disjoint surrender events per race, then one uncontested attempt for the last node
    derived = 1 / (2 / 6) + 1
    attempts = reports[2]["mean_attempts"]
    ok = failures == 0 and abs(surrender - 1 / 6) <= 0.01 and secs < 120
    ok = ok and abs(attempts - derived) <= 0.1 * derived
    assert record("C3 id protocol", ok,
                  f"{failures} failures over k=1..6 x 1000, surrender {surrender:.4f}, "
                  f"k=2 attempts {attempts:.3f} (derived {derived:.0f}) in {secs:.0f}s")


@pytest.mark.xfail(strict=True, reason="k=2 attempt count is geometric(1/3) plus one, mean 4; see ledger")
def test_c3_k2_attempts_literal_geometric(id_reports):
    attempts = id_reports[0][2]["mean_attempts"]
    ok = abs(attempts - 6) <= 0.6
    record("C3 k=2 attempts vs geometric(1/6) mean 6", ok, f"measured {attempts:.3f}, unattainable")
    assert ok


class _Echo:
    def __init__(self, scale):
        self.scale = scale

    def initial_state(self, node, graph):
        return 0

    def on_message(self, node, state, message):
        state += 1
        if state > 6:
            return state, None, False
        return state, (np.full(3, self.scale * state), frozenset(("m",))), False


def test_c4_engine_determinism():
    g = generate_spanning_tree_graph(15, 3)
    same = True
    for delay in (DelayModel.constant(), DelayModel.uniform(0, 1, 11)):
        cfg = RunConfig(2, 400, delay)
        a, b = run(g, _Echo(1.0), cfg), run(g, _Echo(1.0), cfg)
        same &= a.trace.dumps() == b.trace.dumps() and a.deliveries == b.deliveries
        same &= a.final_time == b.final_time
    inst = bench.parity_instance(12, 1)
    model = AmpModel.create(AmpCellConfig(8, 4, "gru", halting="iter"), 1, 2, 0)
    s = RunSettings(5, 50, DelayModel.uniform(0, 1, 0))
    dumps = []
    for _ in range(2):
        runs, tape = [], ad.Tape()
        out = forward_instance(model, model.store.bind(tape, False), tape, inst, s, 3, runs_out=runs)
        dumps.append(([r.trace.dumps() for r in runs], out.loss.item(), out.predictions))
    same &= dumps[0] == dumps[1]
    cfg = RunConfig(2, 400, DelayModel.constant())
    order = lambda r: [(st.arrival_time, st.receiver, st.message.sender) for st in r.trace]
    invariant = order(run(g, _Echo(1.0), cfg)) == order(run(g, _Echo(-3.25), cfg))
    assert record("C4 engine determinism", same and invariant,
                  f"identical reruns {same}, payload-invariant order {invariant}")


def _primitive_errors():
    rng = np.random.default_rng(0)
    errs = []
    for rows, cols in [(1, 1), (3, 5), (8, 4)]:
        st_ = ad.ParameterStore()
        st_.add("W", rng.normal(size=(rows, cols)))
        st_.add("x", rng.normal(size=cols))
        st_.add("a", rng.normal(size=rows))

        def loss(p, t):
            z = p["W"] @ p["x"]
            y = ad.concat([ad.sigmoid(z) * p["a"], ad.tanh(z) - ad.relu(p["a"] + 0.2)])
            return ad.softmax_cross_entropy(y, 1)

        errs.extend(ad.check_gradients(loss, st_).values())
    for kind in ("rnn", "gru", "lstm"):
        st_ = ad.ParameterStore()
        ad.init_cell(st_, "c.", kind, 3, 4, rng)
        st_.glorot("out", (2, 4), rng)
        xs = rng.normal(size=(3, 3))

        def loss(p, t, kind=kind):
            h, c = t.constant(np.full(4, 0.1)), t.constant(np.zeros(4))
            for x in xs:
                if kind == "lstm":
                    h, c = ad.lstm_cell(h, c, t.constant(x), p, "c.")
                else:
                    h = getattr(ad, f"{kind}_cell")(h, t.constant(x), p, "c.")
            return ad.softmax_cross_entropy(p["out"] @ h, 0)

        errs.extend(ad.check_gradients(loss, st_).values())
    return max(errs)


def _end_to_end_error():
    inst = DatasetInstance(path_graph(3).with_labels(node_labels=[0, 1, 0]),
                                 TaskKind.NODE, (0,))
    worst = 0.0
    for kind in ("rnn", "gru", "lstm"):
        model = AmpModel.create(AmpCellConfig(2, 2, kind), 1, 2, 4)
        loss = lambda p, t: forward_instance(model, p, t, inst, RunSettings(fixed_budget=6)).loss
        worst = max(worst, max(ad.check_gradients(loss, model.store).values()))
    return worst


def test_c5_gradients():
    prim, e2e = _primitive_errors(), _end_to_end_error()
    ok = prim < 1e-4 and e2e < 1e-3
    assert record("C5 gradients", ok, f"primitives/cells max rel error {prim:.1e}, "
                                      f"through-trace {e2e:.1e}")


def test_c6_cycle_pair():
    t0 = time.perf_counter()
    insts = bench.cycle_pair_instances()
    blind = bench.certify_baseline_blind([i.graph for i in insts])
    cfg = AmpCellConfig.from_dict(json.loads((CONFIGS / "amp_rnn.json").read_text()))
    settings = RunSettings(budget_factor=5, delay=DelayModel.constant())
    accs = []
    for seed in range(5):
        model, _ = train(insts, cfg, TrainConfig(300, 0.01, 1.0, seed, settings))
        preds = [p for i in insts for p in predict(model, i, settings).predictions]
        accs.append(sum(p == y for _, p, y in preds) / len(preds))
    secs = time.perf_counter() - t0
    med = statistics.median(accs)
    ok = blind and med == 1.0 and secs < 300
    assert record("C6 cycle pair", ok, f"baseline blind {blind}, accuracies {accs}, median {med:.2f} "
                                       f"in {secs:.0f}s")


def test_c7_parity(tmp_path):
    t0 = time.perf_counter()
    cfg = bench.parity_task(model=AmpCellConfig.from_dict(
        {k: v for k, v in json.loads((CONFIGS / "amp_iter.json").read_text()).items() if k != "seed"}))
    summary = bench.run_parity_experiment(cfg)
    secs = time.perf_counter() - t0
    med = {n: summary["summary"][n]["median"] for n in cfg.test_sizes}
    thresholds = {10: 0.95, 25: 0.95, 50: 0.90}
    acc_ok = all(med[n] >= thresholds[n] for n in thresholds) and secs < 1800
    gap = max(abs(s["sizes"][n]["bucket_reconstruction"] - s["sizes"][n]["accuracy"])
              for s in summary["seeds"] for n in cfg.test_sizes)
    smoothing = all(0.0 <= s["sizes"][n]["oversmoothing_restricted"] <= 1.0
                    for s in summary["seeds"] for n in cfg.test_sizes)
    small = bench.ExperimentConfig(**{**asdict(cfg), "seeds": [0], "iterations": 300,
                                      "test_sizes": [10, 25]})
    squash = bench.oversquashing_multitask(small, 3)
    bench.write_json({"parity": summary, "oversquashing": squash}, tmp_path / "parity.json")
    squash_ok = set(squash["multi"]) == {10, 25} and all(
        0.0 <= v["mean"] <= 1.0 for v in squash["multi"].values())
    ok = acc_ok and gap <= 1e-12 and smoothing and squash_ok
    assert record("C7 parity", ok,
                  "median accuracy " + ", ".join(f"n={n} {m:.3f}" for n, m in med.items()) + f" in {secs:.0f}s; "
                  f"bucket reconstruction gap {gap:.1e}; k=3 multitask "
                  + ", ".join(f"n={n} {v['mean']:.2f}" for n, v in squash["multi"].items()))


def test_c8_tu_fixture_roundtrip(tmp_path):
    graphs = [bench.parity_instance(n, n).graph.with_labels(graph_label=n % 2) for n in (3, 6, 9, 12)]
    labels = [[(v * 7) % 4 for v in range(g.n)] for g in graphs]
    bench.write_tu_dataset(graphs, tmp_path, "FIX", labels)
    back = bench.load_tu_dataset(tmp_path)
    exact = all(g.edges() == b.graph.edges() and g.graph_label == b.graph.graph_label
                and np.argmax(b.graph.features, axis=1).tolist() == lab
                for g, b, lab in zip(graphs, back, labels)) and len(back) == len(graphs)
    assert record("C8 TU fixture round trip", exact, f"{len(back)} graphs reloaded exactly: {exact}")


@pytest.mark.skipif(not os.environ.get("AMP_MUTAG_DIR"), reason="set AMP_MUTAG_DIR to a local MUTAG copy")
def test_c8_mutag_smoke():
    t0 = time.perf_counter()
    out = bench.tu_smoke_run(os.environ["AMP_MUTAG_DIR"], seed=0)
    secs = time.perf_counter() - t0
    losses = out["epoch_losses"]
    ok = (out["train_accuracy"] >= 0.90 and all(np.isfinite(losses)) and losses[-1] < losses[0]
          and secs < 1800)
    assert record("C8 MUTAG smoke", ok, f"train accuracy {out['train_accuracy']:.3f}, loss "
                                        f"{losses[0]:.3f} -> {losses[-1]:.3f} in {secs:.0f}s")


def test_c8_mutag_skip_notice():
    if not os.environ.get("AMP_MUTAG_DIR"):
        ACCEPTANCE_LINES.append("SKIP  C8 MUTAG smoke: AMP_MUTAG_DIR not set, no local dataset")

import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from asyncmp.engine import DelayModel
from asyncmp.errors import ContractViolation, OutOfDomain, ProtocolFailure
from asyncmp.graph import Graph, generate_spanning_tree_graph, path_graph
from asyncmp.sync_baseline import SginModel, SginWeights, sgin_forward
from asyncmp.synchronizer import (CORRECTED, PULSE, SAFE, VERBATIM, SyncMessage, SyncState,
                                  build_exact_transition_mlp, initial_sync_state,
                                  reduced_transition, simulate_sgin, sync_transition)
from asyncmp.verify import random_bounded_graph, verify_mlp, verify_sim

I1 = SginWeights(np.eye(1))


class TestTable:
    def test_origin_row_verbatim(self):
        x = np.array([4.0])
        st_, out = sync_transition(initial_sync_state(x, 2), SyncMessage(np.zeros(1), origin=True), 3, I1,
                                   VERBATIM)
        assert (st_.s.tolist(), st_.w, st_.u, st_.l) == ([4.0], 2, 3, 2)
        assert out.pulse and out.m.tolist() == [4.0]

    def test_origin_row_corrected_clears_state(self):
        st_, out = sync_transition(initial_sync_state([4.0], 2), SyncMessage(np.zeros(1), origin=True), 3, I1)
        assert st_.s.tolist() == [0.0]
        assert out.m.tolist() == [4.0]

    def test_finished_node_is_inert(self):
        state = SyncState(np.array([1.0]), 3, 1, 0)
        assert sync_transition(state, SyncMessage(np.ones(1), pulse=True), 2, I1) == (state, None)

    def test_w_zero_row_by_hand(self):
        st_, out = sync_transition(SyncState(np.array([2.0]), 0, 2, 1), SyncMessage(np.array([3.0]), pulse=True),
                                   2, I1)
        assert (st_.s.tolist(), st_.w, st_.u, st_.l) == ([5.0], 0, 1, 0)
        assert out.safe and out.m.tolist() == [2.0]

    def test_u_zero_row_starts_round(self):
        st_, out = sync_transition(SyncState(np.array([2.0]), 0, 0, 2), SyncMessage(np.array([7.0]), pulse=True),
                                   4, I1)
        assert (st_.s.tolist(), st_.w, st_.u) == ([7.0], 2, 4)
        assert out.pulse

    def test_leaf_clamp(self):
        st_, out = sync_transition(SyncState(np.array([2.0]), 0, 0, 1), SyncMessage(np.array([-3.0]), pulse=True),
                                   1, I1)
        assert st_.w == 0 and st_.l == 0 and st_.s.tolist() == [0.0]

    def test_safe_row(self):
        st_, out = sync_transition(SyncState(np.array([2.0]), 1, 2, 1), SyncMessage(np.zeros(1), safe=True), 3, I1)
        assert st_.u == 1 and out is None

    def test_two_bits_rejected(self):
        with pytest.raises(ContractViolation):
            sync_transition(SyncState(np.zeros(1), 0, 0, 1), SyncMessage(np.zeros(1), pulse=True, safe=True), 2, I1)


class TestSimulation:
    def test_zero_layers(self):
        g = path_graph(3)
        x = np.array([[1.0], [2.0], [3.0]])
        assert np.array_equal(simulate_sgin(g, SginModel((), 1), features=x), x)

    def test_path_by_hand(self):
        x = np.array([[1.0], [2.0], [3.0]])
        out = simulate_sgin(path_graph(3), [I1], features=x)
        assert out.ravel().tolist() == [2.0, 4.0, 2.0]

    def test_fifty_random_graphs(self):
        rep = verify_sim(50, 12, 3, seed=1)
        assert rep.passed, rep.to_dict()

    @given(st.integers(0, 10 ** 6), st.integers(1, 3))
    def test_delay_independence(self, seed, L):
        rng = random.Random(seed)
        g = random_bounded_graph(rng.randint(2, 10), 5, rng)
        model = SginModel.random(2, L, np.random.default_rng(seed), scale=0.5, bias=True)
        x = np.random.default_rng(seed + 1).normal(size=(g.n, 2))
        a = simulate_sgin(g, model, start=seed % g.n, features=x)
        b = simulate_sgin(g, model, start=seed % g.n, features=x, delay=DelayModel.uniform(0, 1, seed))
        assert np.abs(a - b).max() < 1e-9
        assert np.abs(a - sgin_forward(g, model, x)).max() < 1e-9

    def test_trace_accounting_and_pulse_soundness(self):
        rng = np.random.default_rng(3)
        g = generate_spanning_tree_graph(9, 3)
        L = 3
        model = SginModel.random(2, L, rng, scale=0.5)
        x = rng.normal(size=(g.n, 2))
        _, res = simulate_sgin(g, model, start=4, features=x, delay=DelayModel.uniform(0, 1, 11),
                               record_trace=True, return_run=True)
        layers = [x]
        for k in range(1, L):
            layers.append(sgin_forward(g, SginModel(model.layers[:k], 2), x))
        pulses_in = [0] * g.n
        safes_in = [0] * g.n
        for step in res.trace:
            bits = step.message.protocol_bits
            pulses_in[step.receiver] += PULSE in bits
            safes_in[step.receiver] += SAFE in bits
        for v in range(g.n):
            assert pulses_in[v] == g.degree(v) * L
            assert safes_in[v] == g.degree(v) * L
        # pulse payloads carry the completed round's state
        seen_per_sender = {}
        for step in sorted(res.trace, key=lambda s: s.message.seq):
            m = step.message
            if PULSE in m.protocol_bits and m.sender is not None:
                # every copy of one broadcast shares the payload object
                mine = seen_per_sender.setdefault(m.sender, [])
                if not any(p is m.payload for p in mine):
                    mine.append(m.payload)
        for v, payloads in seen_per_sender.items():
            assert len(payloads) == L
            for k, p in enumerate(payloads):
                assert np.allclose(p, layers[k][v], atol=1e-12)

    def test_unreachable_nodes_keep_features(self):
        g = Graph.from_edges(4, [(0, 1)])
        x = np.arange(4.0).reshape(4, 1)
        out = simulate_sgin(g, [I1], features=x)
        assert out[2:].ravel().tolist() == [2.0, 3.0]

    def test_safety_cap(self, monkeypatch):
        import asyncmp.synchronizer as mod

        class Stuck(mod.AlphaSynchronizer):
            def on_message(self, node, st_, msg):
                return st_, (np.zeros(1), frozenset((PULSE,))), False

        monkeypatch.setattr(mod, "AlphaSynchronizer", Stuck)
        with pytest.raises(ProtocolFailure):
            simulate_sgin(path_graph(3), [I1], features=np.ones((3, 1)))


class TestExactMlp:
    def setup_method(self):
        self.w = SginWeights(np.array([[0.5, -1.0], [2.0, 0.25]]), np.array([0.1, -0.2]))
        self.mlp = build_exact_transition_mlp(4, 2, self.w, bound=10.0)

    def test_layer_one_has_complements_and_indicators(self):
        names = self.mlp.layer1_names
        for bit in ("pulse", "safe", "origin"):
            assert bit in names and f"not_{bit}" in names
        assert "w=0" in names and "u=0" in names

    def test_safe_returns_state(self):
        s, m = np.array([1.5, -2.0]), np.array([3.0, 4.0])
        out = self.mlp(self.mlp.encode(s, m, 0, 1, 0, 2, 0))
        assert np.allclose(out, s, atol=1e-12, rtol=0)

    def test_u_zero_applies_layer(self):
        s, m = np.array([1.5, -2.0]), np.array([3.0, 4.0])
        out = self.mlp(self.mlp.encode(s, m, 1, 0, 0, 1, 0))
        assert np.allclose(out, self.w.apply(s + m), atol=1e-12, rtol=0)

    def test_else_adds(self):
        s, m = np.array([1.5, -2.0]), np.array([3.0, 4.0])
        out = self.mlp(self.mlp.encode(s, m, 1, 0, 0, 1, 3))
        assert np.allclose(out, s + m, atol=1e-12, rtol=0)
        assert np.allclose(out, reduced_transition(s, m, 0, 3, self.w), atol=1e-12, rtol=0)

    def test_out_of_domain(self):
        with pytest.raises(OutOfDomain):
            self.mlp.encode(np.array([11.0, 0.0]), np.zeros(2), 1, 0, 0, 0, 0)
        with pytest.raises(OutOfDomain):
            self.mlp.encode(np.zeros(2), np.zeros(2), 1, 0, 0, 9, 0)

    def test_random_inputs(self):
        rep = verify_mlp(2000, seed=5)
        assert rep.passed, rep.to_dict()

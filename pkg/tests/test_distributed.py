import numpy as np
import pytest

from dgcn.distributed import (AgentState, DistConfig, DistributedGCN,
                              OptimizerSpec, ScheduleSpec, consensus_step,
                              dist_backward, dist_forward, local_step,
                              step_size, train_distributed)
from dgcn.gcn import (LayerSpec, ParamBank, block_backward, block_forward,
                      gc_backward, gc_forward, masked_loss, masked_loss_grad)
from dgcn.graphs import DataGraph, Partition, normalize_shift, partition_bfs
from dgcn.topology import MixingMatrix, fully_connected_mixing, metropolis_weights

from oracles import fd_block_grads, rel_err, rel_err_masked


def random_instance(rng, n=None, m=None, layers=None, basis=None, loss="cross_entropy"):
    n = n or int(rng.integers(6, 30))
    m = m or int(rng.integers(1, 6))
    layers = layers or int(rng.integers(1, 4))
    basis = basis or ("monomial" if rng.random() < 0.5 else "chebyshev")
    d = int(rng.integers(2, 6))
    classes = int(rng.integers(2, 5))
    edges = [(i, j) for i in range(n) for j in range(i + 1, n)
             if rng.random() < min(1.0, 4.0 / n)]
    if not edges:
        edges = [(0, 1 % n)]
    if loss == "cross_entropy":
        labels = rng.integers(0, classes, size=n)
    else:
        labels = rng.standard_normal(n)
    g = DataGraph.from_edges(
        n, [e[0] for e in edges], [e[1] for e in edges],
        features=rng.standard_normal((n, d)), labels=labels,
        train_mask=np.sort(rng.choice(n, size=max(2, n // 3), replace=False)))
    g = normalize_shift(g, "sym_renorm")
    part = partition_bfs(g, m, rng_seed=int(rng.integers(1 << 30)))
    dims = [d] + [int(rng.integers(2, 6)) for _ in range(layers)]
    if loss == "mse":
        dims[-1] = 1
    specs = []
    for i in range(layers):
        act = ("relu" if i < layers - 1 else
               ("softmax" if loss == "cross_entropy" else "identity"))
        if loss == "cross_entropy" and i == layers - 1:
            dims[i + 1] = classes
        specs.append(LayerSpec(dims[i], dims[i + 1], order=int(rng.integers(1, 3)),
                               activation=act, basis=basis))
    banks = [ParamBank.gaussian(specs, rng, std=0.5) for _ in range(m)]
    return g, part, specs, banks


def make_net(g, part, specs, banks, mixing=None, **kw):
    mixing = mixing or fully_connected_mixing(part.m)
    net = DistributedGCN(g, part, mixing, specs, **kw)
    net.init_params(0)
    for k in range(net.m):
        net.agents[k].params = banks[k]
    return net


class TestForwardEquivalence:
    def test_matches_block_oracle_many_instances(self):
        rng = np.random.default_rng(100)
        for _ in range(30):
            g, part, specs, banks = random_instance(rng)
            net = make_net(g, part, specs, banks)
            out, _, _ = dist_forward(net)
            ref, _ = block_forward(g.shift, g.features, part.assign, banks)
            assert rel_err(out, ref) < 1e-12

    def test_identical_weights_match_shared_forward(self):
        rng = np.random.default_rng(101)
        g, part, specs, banks = random_instance(rng, n=14, m=4, layers=2,
                                                basis="monomial")
        shared = banks[0]
        net = make_net(g, part, specs, [shared.copy() for _ in range(4)])
        out, _, _ = dist_forward(net)
        ref, _ = gc_forward(g.shift, g.features, shared)
        assert rel_err(out, ref) < 1e-12

    def test_single_agent_sends_nothing(self):
        rng = np.random.default_rng(102)
        g, part, specs, banks = random_instance(rng, m=1)
        net = make_net(g, part, specs, banks, capture_messages=True)
        out, _, counts = dist_forward(net)
        assert counts["forward"] == 0
        assert net.message_log == []
        ref, _ = block_forward(g.shift, g.features, part.assign, banks)
        assert rel_err(out, ref) < 1e-12


class TestMessageAccounting:
    def _setup(self, rng, order=1, basis="monomial"):
        g, part, specs, banks = random_instance(rng, n=24, m=4, layers=2,
                                                basis=basis)
        specs = [LayerSpec(specs[0].in_dim, 5, order=order, basis=basis),
                 LayerSpec(5, specs[-1].out_dim, order=order,
                           activation="softmax", basis=basis)]
        banks = [ParamBank.gaussian(specs, rng, std=0.5) for _ in range(4)]
        return g, part, specs, banks

    def test_forward_scalars_follow_boundary_counts(self):
        rng = np.random.default_rng(103)
        g, part, specs, banks = self._setup(rng, order=1)
        net = make_net(g, part, specs, banks)
        _, _, counts = dist_forward(net)
        B = part.boundary.copy()
        np.fill_diagonal(B, 0)
        expect = sum(B.sum() * s.order * s.out_dim for s in specs)
        assert counts["forward"] == expect

    def test_backward_equals_forward_total(self):
        rng = np.random.default_rng(104)
        for order in (1, 2):
            for basis in ("monomial", "chebyshev"):
                g, part, specs, banks = self._setup(rng, order=order, basis=basis)
                net = make_net(g, part, specs, banks)
                _, _, fc = dist_forward(net)
                _, bc = dist_backward(net)
                assert fc["forward"] == bc["backward"]

    def test_consensus_scalar_count(self):
        psi = [np.zeros(17) for _ in range(3)]
        mixing = metropolis_weights({(0, 1), (1, 0), (1, 2), (2, 1)}, 3)
        _, scalars = consensus_step(psi, mixing)
        assert scalars == 2 * 17 * 2  # two undirected links, both directions

    def test_captured_batches_are_well_formed(self):
        rng = np.random.default_rng(105)
        g, part, specs, banks = self._setup(rng)
        net = make_net(g, part, specs, banks, capture_messages=True)
        dist_forward(net)
        assert net.message_log
        for batch in net.message_log:
            assert batch.from_agent != batch.to_agent
            assert batch.values.shape == (len(batch.targets), batch.width)
            # targets belong to the receiving agent
            owners = part.assign[batch.targets]
            assert (owners == batch.to_agent).all()
            # the pair shares at least one data edge
            assert part.boundary[batch.to_agent, batch.from_agent] > 0
            for node, vec in batch:
                assert part.assign[node] == batch.to_agent
                assert vec.shape == (batch.width,)


class TestBackwardEquivalence:
    def test_matches_block_backward_many_instances(self):
        rng = np.random.default_rng(106)
        for _ in range(20):
            g, part, specs, banks = random_instance(rng)
            net = make_net(g, part, specs, banks)
            out, _, _ = dist_forward(net)
            grads, _ = dist_backward(net)
            ref_out, cache = block_forward(g.shift, g.features, part.assign, banks)
            g_out = masked_loss_grad(ref_out, g.labels, g.train_mask,
                                     "cross_entropy")
            ref_grads, _ = block_backward(cache, banks, g_out)
            for k in range(part.m):
                assert rel_err(grads[k], ref_grads[k].flatten()) < 1e-10

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(107)
        g, part, specs, banks = random_instance(rng, n=10, m=3, layers=2,
                                                basis="monomial")
        net = make_net(g, part, specs, banks)
        dist_forward(net)
        grads, _ = dist_backward(net)
        fd = fd_block_grads(g.shift.toarray(), g.features, part.assign, banks,
                            g.labels, g.train_mask, "cross_entropy")
        for k in range(part.m):
            assert rel_err_masked(grads[k], fd[k]) < 1e-6

    def test_agent_without_influence_has_zero_gradient(self):
        # path 0-1-2-3-4-5, two layers (two hops); only node 0 is labeled,
        # so the far agent owning nodes 4 and 5 never touches the loss
        n = 6
        g = DataGraph.from_edges(n, list(range(5)), list(range(1, 6)),
                                 features=np.random.default_rng(0).standard_normal((n, 3)),
                                 labels=np.array([1, 0, 0, 0, 0, 0]),
                                 train_mask=np.array([0]))
        g = normalize_shift(g, "sym_renorm")
        part = Partition.from_assignment(g, np.array([0, 0, 1, 1, 2, 2]), 3)
        specs = [LayerSpec(3, 4), LayerSpec(4, 2, activation="softmax")]
        rng = np.random.default_rng(1)
        banks = [ParamBank.gaussian(specs, rng, std=0.5) for _ in range(3)]
        net = make_net(g, part, specs, banks)
        dist_forward(net)
        grads, _ = dist_backward(net)
        assert np.abs(grads[2]).max() == 0.0
        assert np.abs(grads[0]).max() > 0.0

    def test_locality_of_gradient_support(self):
        # zeroing an agent outside the shared receptive field of any training
        # node must leave the gradient bit-identical
        rng = np.random.default_rng(108)
        for _ in range(5):
            g, part, specs, banks = random_instance(rng, m=4, layers=2,
                                                    basis="monomial")
            K = sum(s.order for s in specs)
            n = g.n
            adj = g.adjacency
            influence = {k: set() for k in range(part.m)}
            for i in g.train_mask:
                seen = {int(i)}
                frontier = {int(i)}
                for _ in range(K):
                    new = set()
                    for u in frontier:
                        new |= set(adj.indices[adj.indptr[u]:adj.indptr[u + 1]].tolist())
                    frontier = new - seen
                    seen |= new
                owners = {int(part.assign[u]) for u in seen}
                for k in owners:
                    influence[k] |= owners
            out, cache = block_forward(g.shift, g.features, part.assign, banks)
            g_out = masked_loss_grad(out, g.labels, g.train_mask, "cross_entropy")
            base, _ = block_backward(cache, banks, g_out)
            for k in range(part.m):
                for z in range(part.m):
                    if z == k or z in influence[k]:
                        continue
                    others = [b if j != z else ParamBank.zeros(specs)
                              for j, b in enumerate(banks)]
                    o2, c2 = block_forward(g.shift, g.features, part.assign, others)
                    go2 = masked_loss_grad(o2, g.labels, g.train_mask,
                                           "cross_entropy")
                    g2, _ = block_backward(c2, others, go2)
                    np.testing.assert_array_equal(g2[k].flatten(),
                                                  base[k].flatten())


class TestSchedule:
    def test_constant(self):
        s = ScheduleSpec("constant", 0.3)
        assert step_size(s, 0) == 0.3
        assert step_size(s, 1000) == 0.3

    def test_diminishing(self):
        s = ScheduleSpec("diminishing", 0.4, tau=20.0)
        assert step_size(s, 0) == 0.4
        assert step_size(s, 20) == pytest.approx(0.2)

    def test_validation(self):
        with pytest.raises(ValueError):
            ScheduleSpec("bogus", 0.1)
        with pytest.raises(ValueError):
            ScheduleSpec("constant", -0.1)
        with pytest.raises(ValueError):
            step_size(ScheduleSpec("constant", 0.1), -1)


class TestLocalStep:
    def _state(self, w):
        specs = [LayerSpec(1, w.size, activation="identity")]
        bank = ParamBank.from_flat(specs, np.concatenate([w, np.zeros(w.size)]))
        return AgentState(agent_id=0, params=bank,
                          local_nodes=np.array([0]), local_train=np.array([0]))

    def test_zero_gradient_keeps_params(self):
        st = self._state(np.array([1.0, -2.0]))
        psi = local_step(st, np.zeros(4), 0.5, OptimizerSpec("gd"))
        np.testing.assert_array_equal(psi, st.params.flatten())

    def test_gd_unit_step_from_origin(self):
        st = self._state(np.zeros(2))
        grad = np.array([3.0, -1.0, 0.5, 2.0])
        psi = local_step(st, grad, 1.0, OptimizerSpec("gd"))
        np.testing.assert_array_equal(psi, -grad)

    def test_momentum_beta_zero_equals_gd(self):
        rng = np.random.default_rng(109)
        st_m = self._state(rng.standard_normal(2))
        st_g = self._state(st_m.params.flatten()[:2].copy())
        st_g.params = st_m.params.copy()
        for _ in range(5):
            grad = rng.standard_normal(4)
            pm = local_step(st_m, grad, 0.2, OptimizerSpec("momentum", beta=0.0))
            pg = local_step(st_g, grad, 0.2, OptimizerSpec("gd"))
            np.testing.assert_array_equal(pm, pg)
            st_m.params = ParamBank.from_flat(st_m.params.specs, pm)
            st_g.params = ParamBank.from_flat(st_g.params.specs, pg)

    def test_adam_first_step_is_signed_unit(self):
        st = self._state(np.zeros(2))
        grad = np.array([0.3, -0.7, 0.1, 4.0])
        psi = local_step(st, grad, 0.01, OptimizerSpec("adam"))
        np.testing.assert_allclose(psi, -0.01 * np.sign(grad), rtol=1e-6)

    def test_nan_gradient_rejected(self):
        st = self._state(np.zeros(2))
        with pytest.raises(ValueError, match="non-finite"):
            local_step(st, np.array([1.0, np.nan, 0.0, 0.0]), 0.1,
                       OptimizerSpec("gd"))


class TestConsensusStep:
    def test_identity_matrix_keeps_local(self):
        psi = [np.array([1.0, 2.0]), np.array([3.0, 4.0])]
        mixing = MixingMatrix(m=2, entries=np.eye(2), gamma=0.0)
        new, scalars = consensus_step(psi, mixing)
        np.testing.assert_array_equal(new[0], psi[0])
        np.testing.assert_array_equal(new[1], psi[1])
        assert scalars == 0

    def test_projector_averages_exactly(self):
        rng = np.random.default_rng(110)
        psi = [rng.standard_normal(9) for _ in range(4)]
        new, _ = consensus_step(psi, fully_connected_mixing(4))
        mean = np.mean(psi, axis=0)
        for v in new:
            np.testing.assert_allclose(v, mean, atol=1e-15)

    def test_metropolis_step_contracts_disagreement(self):
        from dgcn.metrics import max_pairwise_distance
        from dgcn.topology import deflated_spectral_radius

        rng = np.random.default_rng(111)
        mixing = metropolis_weights({(0, 1), (1, 0), (1, 2), (2, 1),
                                     (2, 3), (3, 2)}, 4)
        psi = [rng.standard_normal(30) for _ in range(4)]
        new, _ = consensus_step(psi, mixing)
        assert max_pairwise_distance(new) < max_pairwise_distance(psi)
        # contraction on the consensus-orthogonal component
        P = np.stack(psi)
        N = np.stack(new)
        rho = deflated_spectral_radius(mixing.entries)
        before = np.linalg.norm(P - P.mean(axis=0))
        after = np.linalg.norm(N - N.mean(axis=0))
        assert after <= rho * before + 1e-12

    def test_row_count_mismatch_rejected(self):
        psi = [np.zeros(3)] * 3
        with pytest.raises(ValueError, match="agents"):
            consensus_step(psi, fully_connected_mixing(4))


class TestProtocol:
    def test_missing_channel_names_data_edge(self):
        g = DataGraph.from_edges(4, [0, 1, 2], [1, 2, 3],
                                 features=np.zeros((4, 2)),
                                 labels=np.zeros(4, dtype=np.int64),
                                 train_mask=np.array([0]))
        g = normalize_shift(g, "sym_renorm")
        part = Partition.from_assignment(g, np.array([0, 0, 1, 1]), 2)
        mixing = MixingMatrix(m=2, entries=np.eye(2), gamma=0.0)
        specs = [LayerSpec(2, 2, activation="softmax")]
        with pytest.raises(ValueError, match="data edge \\(1, 2\\)|data edge \\(2, 1\\)"):
            DistributedGCN(g, part, mixing, specs)


class TestExecutionModes:
    def test_threads_match_serial_bitwise(self):
        rng = np.random.default_rng(112)
        g, part, specs, banks = random_instance(rng, n=20, m=4, layers=2)
        serial = make_net(g, part, specs, [b.copy() for b in banks])
        out_s, _, _ = dist_forward(serial)
        grads_s, _ = dist_backward(serial)
        threaded = make_net(g, part, specs, [b.copy() for b in banks],
                            execution="threads")
        try:
            out_t, _, _ = dist_forward(threaded)
            grads_t, _ = dist_backward(threaded)
        finally:
            threaded.close()
        np.testing.assert_array_equal(out_s, out_t)
        for a, b in zip(grads_s, grads_t):
            np.testing.assert_array_equal(a, b)


class TestTrainDistributed:
    def _instance(self, rng, m=3):
        g, part, specs, banks = random_instance(rng, n=24, m=m, layers=2,
                                                basis="monomial")
        return g, part, specs

    def test_projector_with_shared_init_tracks_single_party_descent(self):
        rng = np.random.default_rng(113)
        g, part, specs = self._instance(rng)
        eta, T = 0.4, 30
        cfg = DistConfig(schedule=ScheduleSpec("constant", eta), iterations=T,
                         seed=5, init="shared", eval_every=1000,
                         compute_stationarity=False)
        net, records = train_distributed(g, part, fully_connected_mixing(part.m),
                                         specs, cfg)
        # reference: plain descent with step eta/m (the projector averages the
        # m per-agent blocks whose sum is the single-party gradient)
        params = ParamBank.gaussian(specs, np.random.default_rng(5), std=1e-3)
        for t in range(T):
            out, cache = gc_forward(g.shift, g.features, params)
            g_out = masked_loss_grad(out, g.labels, g.train_mask, "cross_entropy")
            grad, _ = gc_backward(cache, params, g_out)
            params = ParamBank.from_flat(
                specs, params.flatten() - eta / part.m * grad.flatten())
        for flat in net.param_flats():
            assert rel_err(flat, params.flatten()) < 1e-9

    def test_records_shape_and_closing_entry(self):
        rng = np.random.default_rng(114)
        g, part, specs = self._instance(rng)
        cfg = DistConfig(schedule=ScheduleSpec("constant", 0.2), iterations=7,
                         seed=0, eval_every=3)
        _, records = train_distributed(g, part, fully_connected_mixing(part.m),
                                       specs, cfg)
        assert len(records) == 8
        assert records[-1].eta is None
        assert records[-1].messages_backward == 0
        assert all(r.eta == 0.2 for r in records[:-1])
        assert records[-1].stationarity is not None
        evaluated = [r.stationarity_best for r in records
                     if r.stationarity_best is not None]
        assert evaluated == sorted(evaluated, reverse=True)

    def test_zero_iterations_evaluates_initialization(self):
        rng = np.random.default_rng(115)
        g, part, specs = self._instance(rng)
        cfg = DistConfig(schedule=ScheduleSpec("constant", 0.2), iterations=0, seed=0)
        _, records = train_distributed(g, part, fully_connected_mixing(part.m),
                                       specs, cfg)
        assert len(records) == 1
        assert records[0].test_accuracy is not None

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(116)
        g, part, specs = self._instance(rng)
        cfg = DistConfig(schedule=ScheduleSpec("constant", 0.3), iterations=10, seed=9)
        _, r1 = train_distributed(g, part, fully_connected_mixing(part.m), specs, cfg)
        _, r2 = train_distributed(g, part, fully_connected_mixing(part.m), specs, cfg)
        assert [r.to_dict() for r in r1] == [r.to_dict() for r in r2]

    def test_no_consensus_period_keeps_agents_apart(self):
        rng = np.random.default_rng(117)
        g, part, specs = self._instance(rng)
        cfg = DistConfig(schedule=ScheduleSpec("constant", 0.2), iterations=5,
                         seed=1, consensus_period=None)
        net, records = train_distributed(g, part, fully_connected_mixing(part.m),
                                         specs, cfg)
        assert all(r.messages_consensus == 0 for r in records)
        assert records[-1].consensus_residual > 0

    def test_consensus_period_two_alternates(self):
        rng = np.random.default_rng(118)
        g, part, specs = self._instance(rng)
        cfg = DistConfig(schedule=ScheduleSpec("constant", 0.2), iterations=4,
                         seed=1, consensus_period=2)
        _, records = train_distributed(g, part, fully_connected_mixing(part.m),
                                       specs, cfg)
        stepped = [r.messages_consensus > 0 for r in records[:-1]]
        assert stepped == [True, False, True, False]

    def test_dropout_run_is_reproducible_and_distinct_per_agent(self):
        rng = np.random.default_rng(119)
        g, part, specs = self._instance(rng)
        cfg = DistConfig(schedule=ScheduleSpec("constant", 0.2), iterations=5,
                         seed=2, dropout=0.5, compute_stationarity=False)
        _, r1 = train_distributed(g, part, fully_connected_mixing(part.m), specs, cfg)
        _, r2 = train_distributed(g, part, fully_connected_mixing(part.m), specs, cfg)
        assert [r.train_loss for r in r1] == [r.train_loss for r in r2]

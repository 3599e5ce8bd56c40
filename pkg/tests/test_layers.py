"""Tests for graph convolutions, the classifier head, and checkpoints.

Every layer is checked against an independent brute-force oracle that walks
nodes and edges explicitly, and every backward rule is checked against
central finite differences.
"""

import math

import numpy as np
import pytest

from mmgr import layers as L
from mmgr.errors import ConfigError, FormatError, MmgrError, ShapeError
from mmgr.graphs import NodeKind, Topology, batch_graphs
from mmgr.tensor import make_rng

from conftest import finite_difference, max_rel_err, toy_graph, toy_star

GRAD_TOL = 1e-3
K = NodeKind


def adjacency(edges, n):
    neigh = {i: [] for i in range(n)}
    for a, b in np.asarray(edges).reshape(-1, 2):
        neigh[int(a)].append(int(b))
        neigh[int(b)].append(int(a))
    return neigh


def sage_oracle(graph, w_self, w_neigh, b_self=0.0, b_neigh=0.0):
    """Node loop: project self, project each neighbor, average the messages."""
    n = graph.n_nodes
    neigh = adjacency(graph.edges, n)
    out = []
    for i in range(n):
        acc = graph.features[i] @ w_self[graph.kinds[i]] + b_self
        if neigh[i]:
            msgs = [graph.features[j] @ w_neigh[graph.kinds[j]] + b_neigh for j in neigh[i]]
            acc = acc + np.mean(msgs, axis=0)
        out.append(acc)
    return np.stack(out)


def gated_oracle(graph, w_self, w_neigh, w_gate_self, w_gate_neigh, b=None):
    """Directed-edge loop computing every gate and message explicitly."""
    b = b or {"self": 0.0, "neigh": 0.0, "gate": 0.0}
    n = graph.n_nodes
    neigh = adjacency(graph.edges, n)
    out = []
    for i in range(n):
        acc = graph.features[i] @ w_self[graph.kinds[i]] + b["self"]
        for j in neigh[i]:
            pre = (
                graph.features[i] @ w_gate_self[graph.kinds[i]]
                + graph.features[j] @ w_gate_neigh[graph.kinds[j]]
                + b["gate"]
            )
            gate = 1.0 / (1.0 + np.exp(-pre))
            acc = acc + gate * (graph.features[j] @ w_neigh[graph.kinds[j]] + b["neigh"])
        out.append(acc)
    return np.stack(out)


def param_loss(model_or_layer_forward, probe):
    out = model_or_layer_forward()
    return float(np.sum(out * probe))


DIMS4 = {K.QUESTION: 4, K.IMAGE_SOURCE: 4, K.TEXT_SOURCE: 4}


class TestSageConv:
    def test_identity_self_zero_neighbor(self):
        rng = make_rng(0)
        g = toy_star(3, DIMS4, rng)
        batch = batch_graphs([g])
        conv = L.SageConv("c", {k: 4 for k in DIMS4}, 4, bias=False).init(rng)
        for k in conv.weights["self"]:
            conv.weights["self"][k].value[...] = np.eye(4)
            conv.weights["neigh"][k].value[...] = 0.0
        out, _ = conv.forward(batch, None)
        assert np.allclose(out, np.stack(batch.features))

    def test_pure_neighbor_projection(self):
        rng = make_rng(1)
        # two nodes, one edge: each node sees exactly the other's projection
        g = toy_graph(Topology.DENSE, [K.TEXT_SOURCE, K.TEXT_SOURCE], DIMS4, [(0, 1)], rng)
        batch = batch_graphs([g])
        conv = L.SageConv("c", {K.TEXT_SOURCE: 4}, 4, bias=False).init(rng)
        conv.weights["self"][K.TEXT_SOURCE].value[...] = 0.0
        conv.weights["neigh"][K.TEXT_SOURCE].value[...] = np.eye(4)
        out, _ = conv.forward(batch, None)
        assert np.allclose(out[0], batch.features[1])
        assert np.allclose(out[1], batch.features[0])

    def test_path_graph_matches_adjacency_oracle(self):
        rng = make_rng(2)
        kinds = [K.TEXT_SOURCE, K.IMAGE_SOURCE, K.TEXT_SOURCE, K.IMAGE_SOURCE]
        dims = {K.IMAGE_SOURCE: 5, K.TEXT_SOURCE: 3}
        g = toy_graph(Topology.DENSE, kinds, dims, [(0, 1), (1, 2), (2, 3)], rng)
        batch = batch_graphs([g])
        conv = L.SageConv("c", dims, 6).init(rng)
        out, _ = conv.forward(batch, None)
        want = sage_oracle(
            g,
            {k: conv.weights["self"][k].value for k in dims},
            {k: conv.weights["neigh"][k].value for k in dims},
            conv.biases["self"].value[0],
            conv.biases["neigh"].value[0],
        )
        assert np.allclose(out, want, atol=1e-12)

    def test_neighbor_order_invariance(self):
        rng = make_rng(3)
        g = toy_star(4, DIMS4, rng)
        conv = L.SageConv("c", {k: 4 for k in DIMS4}, 4).init(rng)
        out1, _ = conv.forward(batch_graphs([g]), None)
        g2 = toy_graph(
            g.topology, g.kinds, DIMS4, np.flipud(g.edges), rng, graph_id=g.graph_id
        )
        g2.features = g.features
        out2, _ = conv.forward(batch_graphs([g2]), None)
        assert np.allclose(out1, out2, atol=1e-12)

    def test_dim_error_names_layer_and_kind(self):
        rng = make_rng(4)
        g = toy_star(2, DIMS4, rng)
        conv = L.SageConv("conv0", {K.QUESTION: 4, K.IMAGE_SOURCE: 9, K.TEXT_SOURCE: 4}, 4).init(rng)
        with pytest.raises(ShapeError, match="conv0.*image_source"):
            conv.forward(batch_graphs([g]), None)


class TestGatedConv:
    def test_gate_is_half_at_zero_input(self):
        rng = make_rng(5)
        g = toy_star(2, DIMS4, rng)
        g.features = [np.zeros(4) for _ in g.features]
        batch = batch_graphs([g])
        conv = L.GatedConv("c", {k: 4 for k in DIMS4}, 4, bias=False).init(rng)
        out, cache = conv.forward(batch, None)
        assert np.allclose(cache["gates"], 0.5)
        assert np.allclose(out, 0.0)

    def test_zero_neighbor_weight_leaves_self_term(self):
        rng = make_rng(6)
        g = toy_star(3, DIMS4, rng)
        batch = batch_graphs([g])
        conv = L.GatedConv("c", {k: 4 for k in DIMS4}, 4, bias=False).init(rng)
        for k in conv.weights["neigh"]:
            conv.weights["neigh"][k].value[...] = 0.0
        out, _ = conv.forward(batch, None)
        want = np.stack(
            [f @ conv.weights["self"][k].value for f, k in zip(g.features, g.kinds)]
        )
        assert np.allclose(out, want)

    def test_three_node_star_matches_directed_edge_oracle(self):
        rng = make_rng(7)
        dims = {K.QUESTION: 3, K.IMAGE_SOURCE: 5, K.TEXT_SOURCE: 4}
        g = toy_star(2, dims, rng)
        batch = batch_graphs([g])
        conv = L.GatedConv("c", dims, 6).init(rng)
        for p in conv.parameters():  # nonzero biases make the check stronger
            if "bias" in p.name:
                p.value[...] = rng.standard_normal(p.value.shape)
        out, _ = conv.forward(batch, None)
        want = gated_oracle(
            g,
            {k: conv.weights["self"][k].value for k in dims},
            {k: conv.weights["neigh"][k].value for k in dims},
            {k: conv.weights["gate_self"][k].value for k in dims},
            {k: conv.weights["gate_neigh"][k].value for k in dims},
            {
                "self": conv.biases["self"].value[0],
                "neigh": conv.biases["neigh"].value[0],
                "gate": conv.biases["gate"].value[0],
            },
        )
        assert np.allclose(out, want, atol=1e-12)

    def test_gates_differ_per_direction(self):
        # eta(i<-j) != eta(j<-i): the unordered edge unfolds into two gates
        rng = make_rng(88)
        g = toy_graph(Topology.DENSE, [K.TEXT_SOURCE, K.TEXT_SOURCE], DIMS4, [(0, 1)], rng)
        batch = batch_graphs([g])
        conv = L.GatedConv("c", {K.TEXT_SOURCE: 4}, 4, bias=False).init(rng)
        _, cache = conv.forward(batch, None)
        dst, src = batch.directed_edges()
        forward_idx = int(np.flatnonzero((dst == 0) & (src == 1))[0])
        reverse_idx = int(np.flatnonzero((dst == 1) & (src == 0))[0])
        assert not np.allclose(cache["gates"][forward_idx], cache["gates"][reverse_idx])

    def test_gates_strictly_inside_unit_interval(self):
        # float64 sigmoid saturates to exactly 0/1 past |x| ~ 36, so the test
        # drives pre-activations across the representable open-interval range.
        rng = make_rng(8)
        g = toy_star(5, DIMS4, rng)
        g.features = [f * 8 for f in g.features]
        conv = L.GatedConv("c", {k: 4 for k in DIMS4}, 4).init(rng)
        _, cache = conv.forward(batch_graphs([g]), None)
        assert np.all(cache["gates"] > 0.0) and np.all(cache["gates"] < 1.0)
        assert cache["gates"].min() < 0.2 and cache["gates"].max() > 0.8

    def test_saturated_gates_match_ungated_sum(self):
        rng = make_rng(9)
        g = toy_star(3, DIMS4, rng)
        batch = batch_graphs([g])
        conv = L.GatedConv("c", {k: 4 for k in DIMS4}, 4).init(rng)
        for k in conv.weights["gate_self"]:
            conv.weights["gate_self"][k].value[...] = 0.0
            conv.weights["gate_neigh"][k].value[...] = 0.0
        conv.biases["gate"].value[...] = 40.0  # gate pre-activation +40 -> gate ~ 1
        out, _ = conv.forward(batch, None)

        neigh = adjacency(g.edges, g.n_nodes)
        want = []
        for i in range(g.n_nodes):
            acc = g.features[i] @ conv.weights["self"][g.kinds[i]].value + conv.biases["self"].value
            for j in neigh[i]:
                acc = acc + (
                    g.features[j] @ conv.weights["neigh"][g.kinds[j]].value
                    + conv.biases["neigh"].value
                )
            want.append(np.asarray(acc).reshape(-1))
        assert np.allclose(out, np.stack(want), atol=1e-6)


class TestHead:
    def test_zero_weights_give_uniform_softmax(self):
        rng = make_rng(10)
        lin = L.Linear("h", 3, 2).init(rng)
        lin.weight.value[...] = 0.0
        out, _ = lin.forward(None, rng.standard_normal((4, 3)))
        assert np.allclose(out, 0.0)

    def test_relu_clamps(self):
        r = L.ReLU("r")
        out, _ = r.forward(None, np.array([[-1.0, 2.0]]))
        assert np.array_equal(out, [[0.0, 2.0]])

    def test_head_matches_affine_composition_oracle(self):
        rng = make_rng(11)
        spec = L.ModelSpec(
            Topology.STAR, conv_dims=(4,), head_dims=(5, 3, 2),
            in_dims={K.QUESTION: 4, K.IMAGE_SOURCE: 4, K.TEXT_SOURCE: 4},
        )
        model = L.init_model(spec, 12)
        head = model.layers[1:]
        x = rng.standard_normal((6, 4))
        got = x
        for layer in head:
            got, _ = layer.forward(None, got)

        w0, b0 = head[0].weight.value, head[0].b.value
        w1, b1 = head[2].weight.value, head[2].b.value
        w2, b2 = head[4].weight.value, head[4].b.value
        want = np.maximum(x @ w0 + b0, 0.0)
        want = np.maximum(want @ w1 + b1, 0.0)
        want = want @ w2 + b2
        assert np.allclose(got, want, atol=1e-12)


SMALL_DIMS = {K.QUESTION: 4, K.IMAGE_SOURCE: 5, K.TEXT_SOURCE: 3}


def small_model(gated=False, conv=(6, 5), head=(4, 2), seed=21, topology=Topology.STAR, bias=True):
    spec = L.ModelSpec(
        topology, gated=gated, conv_dims=conv, head_dims=head,
        in_dims=dict(SMALL_DIMS), bias=bias,
    )
    return L.init_model(spec, seed)


class TestModelForward:
    def test_single_node_dense_graph_uses_self_terms_only(self):
        rng = make_rng(13)
        model = small_model(topology=Topology.DENSE)
        g = toy_graph(Topology.DENSE, [K.TEXT_SOURCE], SMALL_DIMS, np.zeros((0, 2)), rng)
        logits, _ = model.forward(batch_graphs([g]))

        x = g.features[0][np.newaxis, :]
        for conv in model.layers[:2]:
            kind = K.TEXT_SOURCE if conv.heterogeneous else None
            x = x @ conv.weights["self"][kind].value + conv.biases["self"].value
        for layer in model.layers[2:]:
            x, _ = layer.forward(None, x)
        assert np.allclose(logits, x, atol=1e-12)

    def test_batched_equals_unbatched(self):
        rng = make_rng(14)
        model = small_model()
        gs = [toy_star(1 + i % 4, SMALL_DIMS, rng, graph_id=f"g{i}") for i in range(6)]
        batched, _ = model.forward(batch_graphs(gs))
        row = 0
        for g in gs:
            single, _ = model.forward(batch_graphs([g]))
            assert np.abs(batched[row : row + g.n_nodes] - single).max() < 1e-6
            row += g.n_nodes

    def test_permuting_nodes_permutes_logits(self):
        rng = make_rng(15)
        model = small_model(topology=Topology.DENSE)
        kinds = [K.TEXT_SOURCE, K.IMAGE_SOURCE, K.TEXT_SOURCE]
        g = toy_graph(Topology.DENSE, kinds, SMALL_DIMS, [(0, 1), (0, 2), (1, 2)], rng)
        logits, _ = model.forward(batch_graphs([g]))

        perm = np.array([2, 0, 1])  # new index of old node i
        g2 = toy_graph(
            Topology.DENSE, [kinds[i] for i in np.argsort(perm)], SMALL_DIMS,
            [(min(perm[a], perm[b]), max(perm[a], perm[b])) for a, b in g.edges],
            rng,
        )
        g2.features = [g.features[i] for i in np.argsort(perm)]
        logits2, _ = model.forward(batch_graphs([g2]))
        assert np.allclose(logits2[perm], logits, atol=1e-9)

    def test_topology_mismatch_rejected(self):
        rng = make_rng(16)
        model = small_model(topology=Topology.DENSE)
        g = toy_star(2, SMALL_DIMS, rng)
        with pytest.raises(ConfigError, match="topology"):
            model.forward(batch_graphs([g]))

    def test_forward_counter_increments(self):
        rng = make_rng(17)
        model = small_model()
        b = batch_graphs([toy_star(2, SMALL_DIMS, rng)])
        assert model.forward_count == 0
        model.forward(b)
        model.forward(b)
        assert model.forward_count == 2


class TestModelBackward:
    def test_zero_dlogits_gives_zero_grads(self):
        rng = make_rng(18)
        model = small_model()
        b = batch_graphs([toy_star(3, SMALL_DIMS, rng)])
        logits, cache = model.forward(b)
        model.zero_grad()
        model.backward(cache, np.zeros_like(logits))
        assert all(np.all(p.grad == 0) for p in model.parameters())

    def test_single_linear_matches_hand_rule(self):
        rng = make_rng(19)
        lin = L.Linear("l", 4, 3).init(rng)
        x = rng.standard_normal((5, 4))
        dy = rng.standard_normal((5, 3))
        _, cache = lin.forward(None, x)
        dx = lin.backward(None, cache, dy)
        assert np.allclose(lin.weight.grad, x.T @ dy)
        assert np.allclose(lin.b.grad, dy.sum(axis=0, keepdims=True))
        assert np.allclose(dx, dy @ lin.weight.value.T)

    def test_stale_cache_rejected(self):
        rng = make_rng(20)
        model = small_model()
        b = batch_graphs([toy_star(2, SMALL_DIMS, rng)])
        _, cache = model.forward(b)
        model.forward(b)
        with pytest.raises(MmgrError, match="stale"):
            model.backward(cache, np.zeros((b.n_nodes, 2)))


def model_gradcheck(model, batch, probe=None):
    """Finite-difference check of every trainable parameter and the inputs."""
    rng = make_rng(12345)
    logits, cache = model.forward(batch)
    probe = rng.standard_normal(logits.shape) if probe is None else probe

    model.zero_grad()
    dx = model.backward(cache, probe)

    def loss():
        out, _ = model.forward(batch)
        return float(np.sum(out * probe))

    worst = 0.0
    for p in model.parameters():
        num = finite_difference(lambda _v: loss(), p.value)
        worst = max(worst, max_rel_err(p.grad, num))
    # input gradients, node by node
    for i, f in enumerate(batch.features):
        num = finite_difference(lambda _v: loss(), f)
        worst = max(worst, max_rel_err(dx[i], num))
    return worst


class TestGradientChecks:
    def test_sage_layer(self):
        rng = make_rng(22)
        g = toy_star(3, SMALL_DIMS, rng)
        model = small_model(conv=(5,), head=(2,), seed=31)
        assert model_gradcheck(model, batch_graphs([g])) < GRAD_TOL

    def test_gated_layer(self):
        rng = make_rng(23)
        g = toy_star(3, SMALL_DIMS, rng)
        model = small_model(gated=True, conv=(5,), head=(2,), seed=32)
        assert model_gradcheck(model, batch_graphs([g])) < GRAD_TOL

    def test_full_two_layer_star_model(self):
        rng = make_rng(24)
        g = toy_star(4, SMALL_DIMS, rng)
        model = small_model(conv=(6, 5), head=(4, 2), seed=33)
        assert model_gradcheck(model, batch_graphs([g])) < GRAD_TOL

    def test_full_two_layer_gated_dense_model(self):
        rng = make_rng(25)
        kinds = [K.TEXT_SOURCE, K.IMAGE_SOURCE, K.TEXT_SOURCE]
        g = toy_graph(Topology.DENSE, kinds, SMALL_DIMS, [(0, 1), (0, 2), (1, 2)], rng)
        model = small_model(gated=True, topology=Topology.DENSE, seed=34)
        assert model_gradcheck(model, batch_graphs([g])) < GRAD_TOL

    def test_bias_free_configuration(self):
        rng = make_rng(26)
        g = toy_star(2, SMALL_DIMS, rng)
        model = small_model(bias=False, seed=35)
        assert model_gradcheck(model, batch_graphs([g])) < GRAD_TOL


class TestMultihop:
    """Information propagates exactly as far as the conv stack is deep."""

    def _logit_delta(self, n_layers, seed=40):
        rng = make_rng(seed)
        g = toy_star(3, SMALL_DIMS, rng, graph_id="hop")
        model = small_model(conv=(5,) * n_layers, head=(2,), seed=seed)
        base, _ = model.forward(batch_graphs([g]))

        bump = rng.standard_normal(g.features[1].shape[0])
        g.features[1] = g.features[1] + bump / np.linalg.norm(bump)
        moved, _ = model.forward(batch_graphs([g]))
        other = 2  # a different source node
        return np.abs(moved[other] - base[other]).max()

    def test_two_layers_propagate_between_sources(self):
        assert self._logit_delta(2) > 1e-8

    def test_one_layer_does_not(self):
        assert self._logit_delta(1) == 0.0


class TestInit:
    def test_same_seed_bitwise_identical(self):
        a = small_model(seed=50)
        b = small_model(seed=50)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.name == pb.name and np.array_equal(pa.value, pb.value)

    def test_fan_in_bound(self):
        spec = L.ModelSpec(Topology.STAR, conv_dims=(4,), head_dims=(2,),
                           in_dims={K.TEXT_SOURCE: 2048})
        model = L.init_model(spec, 51)
        w = model.layers[0].weights["self"][K.TEXT_SOURCE].value
        bound = math.sqrt(1.0 / 2048)
        assert bound == pytest.approx(0.0221, abs=1e-4)
        assert np.all(np.abs(w) <= bound)
        assert np.abs(w).max() > bound * 0.9  # actually fills the range

    def test_standard_architecture_dims(self):
        model = L.init_model(L.ModelSpec(Topology.STAR), 52)
        conv_in = [3584]  # widest kind of the first layer handled per kind
        convs = [l for l in model.layers if isinstance(l, L.SageConv)]
        assert [c.out_dim for c in convs] == [2048, 1024, 512, 256, 128]
        assert convs[0].in_dims[K.IMAGE_SOURCE] == 2816
        assert convs[0].in_dims[K.QUESTION] == 768
        heads = [l for l in model.layers if isinstance(l, L.Linear)]
        assert [(h.in_dim, h.out_dim) for h in heads] == [(128, 128), (128, 64), (64, 2)]
        relus = [l for l in model.layers if isinstance(l, L.ReLU)]
        assert len(relus) == 2

    def test_biases_start_at_zero(self):
        model = small_model(seed=53, gated=True)
        for p in model.parameters():
            if "bias" in p.name:
                assert np.all(p.value == 0.0)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        model = small_model(gated=True, seed=60)
        path = tmp_path / "m.mmgm"
        L.save_model(model, path)
        loaded = L.load_model(path)
        for pa, pb in zip(model.parameters(), loaded.parameters()):
            assert pa.name == pb.name
            assert pa.value.tobytes() == pb.value.tobytes()
        L.save_model(loaded, tmp_path / "m2.mmgm")
        assert (tmp_path / "m.mmgm").read_bytes() == (tmp_path / "m2.mmgm").read_bytes()

    def test_topology_refusal(self, tmp_path):
        model = small_model(seed=61, topology=Topology.STAR)
        path = tmp_path / "m.mmgm"
        L.save_model(model, path)
        with pytest.raises(ConfigError, match="refusing"):
            L.load_model(path, expect_topology=Topology.DENSE)
        loaded = L.load_model(path, expect_topology=Topology.STAR)
        assert loaded.topology is Topology.STAR

    def test_gated_refusal(self, tmp_path):
        model = small_model(seed=62, gated=False)
        path = tmp_path / "m.mmgm"
        L.save_model(model, path)
        with pytest.raises(ConfigError, match="gated"):
            L.load_model(path, expect_gated=True)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.mmgm"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            L.load_model(path)

    def test_truncated_file(self, tmp_path):
        model = small_model(seed=63)
        path = tmp_path / "m.mmgm"
        L.save_model(model, path)
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(FormatError, match="truncated"):
            L.load_model(path)

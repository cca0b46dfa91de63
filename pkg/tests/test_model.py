"""Graph layer, attention readout, scoring, loss, and checkpoint round-trips."""

import numpy as np
import pytest

from posrec import numcore as nc
from posrec import posenc, sessgraph
from posrec.model import (
    ModelError,
    PosRecModel,
    cross_entropy,
    load_checkpoint,
    prediction_from_scores,
    save_checkpoint,
)
from posrec.numcore import Tape, Tensor, backward, grad_check
from posrec.sessgraph import Session, SessionGraph


def make_model(kind="LDPE", m=12, d=8, seed=3, **kw):
    scheme = posenc.make_scheme(kind, d, kw.pop("max_len", 10), seed=seed)
    return PosRecModel(m=m, d=d, scheme=scheme, seed=seed, **kw)


def zero_params(model, names):
    for name in names:
        model.params[name].data = np.zeros_like(model.params[name].data)


class TestGraphLayer:
    def test_zero_parameters_halve_features(self):
        model = make_model()
        zero_params(model, [n for n in model.params if n.startswith(("gnn.", "gru."))])
        prep = model.prepare(Session([1, 2, 3], label=0))
        x = Tensor(np.random.default_rng(0).normal(size=(3, 8)))
        out = model.pggnn_layer(prep.graph, x, prep.a_in, prep.a_out)
        np.testing.assert_allclose(out.data, 0.5 * x.data, atol=1e-12)

    def test_single_node_has_zero_message(self):
        model = make_model(anchor_enabled=False)
        prep = model.prepare(Session([4], label=0))
        assert prep.a_in.sum() == 0 and prep.a_out.sum() == 0
        x = Tensor(np.random.default_rng(1).normal(size=(1, 8)))
        out = model.pggnn_layer(prep.graph, x, prep.a_in, prep.a_out)
        # must equal the gated update applied to a zero message
        p = {k: v.data for k, v in model.params.items()}
        msg = np.zeros((1, 16))
        z = 1 / (1 + np.exp(-(msg @ p["gru.w_update"] + x.data @ p["gru.u_update"] + p["gru.b_update"])))
        r = 1 / (1 + np.exp(-(msg @ p["gru.w_reset"] + x.data @ p["gru.u_reset"] + p["gru.b_reset"])))
        cand = np.tanh(msg @ p["gru.w_cand"] + (r * x.data) @ p["gru.u_cand"] + p["gru.b_cand"])
        np.testing.assert_allclose(out.data, (1 - z) * x.data + z * cand, atol=1e-12)

    def test_path_graph_message_sources(self):
        model = make_model()
        prep = model.prepare(Session([1, 2, 3], label=0))
        # middle node hears only the first item inbound (edge and anchor) and
        # only the last item outbound
        np.testing.assert_array_equal(prep.a_in[1], [2.0, 0.0, 0.0])
        np.testing.assert_array_equal(prep.a_out[1], [0.0, 0.0, 2.0])

    def test_feature_width_checked(self):
        model = make_model()
        prep = model.prepare(Session([1, 2], label=0))
        with pytest.raises(ModelError, match="width"):
            model.pggnn_layer(prep.graph, Tensor(np.zeros((2, 5))), prep.a_in, prep.a_out)

    def test_anchors_required_when_enabled(self):
        model = make_model()
        bare = sessgraph.build_session_graph(Session([1, 2]))
        with pytest.raises(ModelError, match="anchor"):
            model.pggnn_layer(bare, Tensor(np.zeros((2, 8))))


class TestReadout:
    def test_identity_transformer_doubles_last_state(self):
        model = make_model(kind="NONE", layer_norm=False, lambda0=1.0, lambda1=1.0, lambda2=0.0)
        zero_params(model, ["attn.w_value", "ff.w2"])
        prep = model.prepare(Session([1, 2, 3], label=0))
        x = Tensor(np.random.default_rng(2).normal(size=(3, 8)))
        h = model.transformer_readout(x, model.node_pe(prep.graph), prep.graph)
        np.testing.assert_allclose(h.data[0], 2.0 * x.data[prep.graph.last_node], atol=1e-12)

    def test_single_node_attention_is_one(self):
        model = make_model()
        prep = model.prepare(Session([5], label=0))
        x = Tensor(np.random.default_rng(3).normal(size=(1, 8)))
        _, attn = model.transformer_readout(x, model.node_pe(prep.graph), prep.graph,
                                            return_attention=True)
        np.testing.assert_array_equal(attn[0], [[1.0]])

    def test_node_order_equivariance(self):
        model = make_model(kind="DPE")
        session = Session([1, 2, 3, 1, 4], label=0)
        prep = model.prepare(session)
        x0 = model.embed_nodes(prep.node_items)
        x1 = model.pggnn_layer(prep.graph, x0, prep.a_in, prep.a_out)
        h = model.transformer_readout(x1, model.node_pe(prep.graph), prep.graph)

        perm = np.array([2, 0, 3, 1])  # new index of each old node
        g = prep.graph
        permuted = SessionGraph(
            items=[0] * g.n,
            edges=[(int(perm[s]), int(perm[t]), w) for s, t, w in g.edges],
            occurrences={int(perm[v]): g.occurrences[v] for v in range(g.n)},
            first_node=int(perm[g.first_node]),
            last_node=int(perm[g.last_node]),
            length=g.length,
            anchor_in=[None] * g.n,
            anchor_out=[None] * g.n,
        )
        for v in range(g.n):
            permuted.items[perm[v]] = g.items[v]
            permuted.anchor_in[perm[v]] = [(int(perm[a]), w) for a, w in g.anchor_in[v]]
            permuted.anchor_out[perm[v]] = [(int(perm[a]), w) for a, w in g.anchor_out[v]]
        prep2 = model.prepare(session)  # rebuild adjacency from the permuted graph instead
        a_in, a_out = model._adjacency(permuted)
        x0p = model.embed_nodes(np.asarray(permuted.items))
        x1p = model.pggnn_layer(permuted, x0p, a_in, a_out)
        hp = model.transformer_readout(x1p, model.node_pe(permuted), permuted)
        np.testing.assert_allclose(hp.data, h.data, atol=1e-9)

    def test_zeroing_readout_terms_changes_h(self):
        # with no positional encoding and no anchors, the endpoint selection
        # in the readout is the only absolute-position signal
        session = Session([1, 2, 3], label=0)
        outs = []
        for lambdas in ((1, 1, 0.5), (1, 1, 0.0), (0, 0, 1.0)):
            model = make_model(kind="NONE", anchor_enabled=False,
                               lambda0=lambdas[0], lambda1=lambdas[1], lambda2=lambdas[2])
            prep = model.prepare(session)
            x0 = model.embed_nodes(prep.node_items)
            x1 = model.pggnn_layer(prep.graph, x0, prep.a_in, prep.a_out)
            outs.append(model.transformer_readout(x1, model.node_pe(prep.graph), prep.graph).data)
        assert np.abs(outs[0] - outs[1]).max() > 1e-9
        assert np.abs(outs[1] - outs[2]).max() > 1e-9

    def test_reversed_session_changes_h_only_through_endpoints(self):
        model = make_model(kind="NONE", anchor_enabled=False)
        h_fwd = model.forward_full(Session([1, 2, 3], label=0))
        h_rev = model.forward_full(Session([3, 2, 1], label=0))
        assert np.abs(h_fwd.scores - h_rev.scores).max() > 1e-12

    def test_relative_bias_enters_attention(self):
        model = make_model(kind="LRPE")
        session = Session([1, 2, 3], label=0)
        base = model.forward_full(session).scores
        sibling = make_model(kind="NONE")
        np.testing.assert_allclose(base, sibling.forward_full(session).scores, atol=1e-12)
        model.params["pe.bias"].data = np.linspace(-1, 1, 19).reshape(19, 1)
        shifted = model.forward_full(session).scores
        assert np.abs(shifted - base).max() > 1e-9

    def test_multi_head_runs_and_divisibility_checked(self):
        model = make_model(heads=2)
        pred = model.forward_full(Session([1, 2, 3], label=0))
        assert pred.scores.shape == (12,)
        with pytest.raises(ModelError, match="divide"):
            make_model(heads=3)


class TestScore:
    def test_zero_vector_scores_uniform(self):
        model = make_model()
        probs, pred = model.score(Tensor(np.zeros((1, 8))))
        np.testing.assert_allclose(pred.scores, np.full(12, 1 / 12), atol=1e-15)
        assert list(pred.top_k) == list(range(12))  # ties break by ascending id

    def test_orthonormal_rows_pick_scaled_match(self):
        model = make_model(m=8, d=8)
        model.params["item_embeddings"].data = np.eye(8)
        for k in (0, 3, 7):
            h = Tensor(10.0 * np.eye(8)[k][None, :])
            _, pred = model.score(h)
            assert pred.top_k[0] == k

    def test_doubling_h_keeps_argmax(self):
        model = make_model()
        rng = np.random.default_rng(4)
        h = rng.normal(size=(1, 8))
        _, p1 = model.score(Tensor(h))
        _, p2 = model.score(Tensor(2 * h))
        assert p1.top_k[0] == p2.top_k[0]

    def test_scores_sum_to_one_across_sessions(self):
        model = make_model()
        rng = np.random.default_rng(5)
        for _ in range(25):
            items = rng.integers(0, 12, size=rng.integers(1, 9)).tolist()
            pred = model.forward_full(Session([int(i) for i in items], label=0))
            assert abs(pred.scores.sum() - 1.0) < 1e-9
            assert np.all(pred.scores >= 0)


class TestLoss:
    def test_uniform_prediction(self):
        probs = Tensor(np.full((1, 4), 0.25))
        loss = cross_entropy([probs], [2])
        assert loss.item() == pytest.approx(1.3862943611198906, abs=1e-12)

    def test_perfect_prediction_is_negligible(self):
        probs = Tensor(np.eye(4)[1][None, :])
        assert cross_entropy([probs], [1]).item() < 1e-9

    def test_batch_sums(self):
        probs = Tensor(np.array([[0.7, 0.1, 0.1, 0.1]]))
        single = cross_entropy([probs], [0]).item()
        double = cross_entropy([probs, probs], [0, 0]).item()
        assert double == pytest.approx(2 * single, abs=1e-12)

    def test_label_out_of_vocabulary_rejected(self):
        probs = Tensor(np.full((1, 4), 0.25))
        with pytest.raises(ModelError, match="vocabulary"):
            cross_entropy([probs], [4])

    def test_batch_size_mismatch_rejected(self):
        probs = Tensor(np.full((1, 4), 0.25))
        with pytest.raises(ModelError, match="mismatch"):
            cross_entropy([probs], [0, 1])


class TestFullForward:
    def test_deterministic(self):
        model = make_model()
        session = Session([3, 7, 3, 5], label=9)
        a = model.forward_full(session)
        b = model.forward_full(session)
        np.testing.assert_array_equal(a.scores, b.scores)

    def test_degenerate_single_item_session(self):
        model = make_model()
        pred = model.forward_full(Session([4], label=0))
        assert pred.scores.shape == (12,)
        assert abs(pred.scores.sum() - 1.0) < 1e-9

    def test_item_outside_vocabulary_rejected(self):
        model = make_model(m=5)
        with pytest.raises(ModelError, match="vocabulary"):
            model.forward_full(Session([7], label=0))

    @pytest.mark.parametrize("kind", ["LPE", "LDPE", "ALPE", "2DLPE"])
    def test_learned_node_pe_matches_assembly(self, kind):
        model = make_model(kind=kind)
        prep = model.prepare(Session([3, 7, 3, 5], label=9))
        on_tape = model.node_pe(prep.graph)
        reference = sessgraph.assemble_node_pe(prep.graph, model.scheme)
        np.testing.assert_array_equal(on_tape.data, reference)

    def test_gradients_reach_every_used_parameter(self):
        model = make_model(kind="LDPE")
        session = Session([3, 7, 5, 2], label=9)
        prep = model.prepare(session)
        with Tape() as tape:
            probs = model.forward_prepared(prep)
            loss = cross_entropy([probs], [9])
        grads = backward(tape, loss)
        named = {name for name, t in model.params.items() if t in grads}
        assert "item_embeddings" in named
        assert "pe.forward" in named and "pe.backward" in named
        assert {"gnn.w_in", "gnn.w_out", "attn.w_query", "ff.w1"} <= named

    def test_full_loss_gradient_check(self):
        model = make_model(kind="LDPE", m=12, d=8)
        session = Session([3, 7, 3, 5], label=9)
        worst = 0.0
        for name in sorted(model.params):
            original = model.params[name]

            def loss_with(t, name=name, original=original):
                model.params[name] = t
                try:
                    probs = model.forward_prepared(model.prepare(session))
                    return cross_entropy([probs], [9])
                finally:
                    model.params[name] = original

            worst = max(worst, grad_check(loss_with, original, h=1e-5))
        assert worst < 1e-4


class TestCheckpoints:
    def test_roundtrip_bit_exact(self, tmp_path):
        model = make_model(kind="LDPE", lambda2=0.75, heads=2)
        path = tmp_path / "model.bin"
        save_checkpoint(model, path)
        clone = load_checkpoint(path)
        assert clone.manifest() == model.manifest()
        for name, t in model.params.items():
            np.testing.assert_array_equal(clone.params[name].data, t.data)
        session = Session([1, 2, 3], label=0)
        np.testing.assert_array_equal(clone.forward_full(session).scores,
                                      model.forward_full(session).scores)

    def test_serialized_twice_is_byte_identical(self, tmp_path):
        model = make_model()
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(model, a)
        save_checkpoint(model, b)
        assert a.read_bytes() == b.read_bytes()

    def test_magic_and_version_checked(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(ModelError, match="not a checkpoint"):
            load_checkpoint(path)


class TestRanking:
    def test_ties_break_by_ascending_id(self):
        pred = prediction_from_scores(np.array([0.2, 0.5, 0.2, 0.5]))
        assert list(pred.top_k) == [1, 3, 0, 2]

"""The session recommender: position-aware gated graph layer plus attention readout.

Forward pipeline for one session:

    session -> session graph (+ anchors) -> embedding lookup
            -> gated graph layer over weighted in/out neighborhoods
            -> per-node positional encodings
            -> one bidirectional (unmasked) attention layer
            -> weighted mix of first/last node states -> session vector h
            -> softmax over the item catalogue

All trainable arrays live in a single flat registry keyed by string path,
so the optimizer and the finite-difference checker can treat the model as
one bag of parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from . import posenc, sessgraph
from .numcore import Tensor
from .posenc import EncodingScheme
from .sessgraph import Session, SessionGraph

CHECKPOINT_MAGIC = b"PRCK"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass
class Prediction:
    """Full catalogue ranking for one session."""

    scores: np.ndarray  # (m,) probabilities, sum to 1
    top_k: np.ndarray   # item ids ranked by descending score, ties by ascending id


@dataclass
class PreparedSession:
    """Static per-session context reused across epochs."""

    graph: SessionGraph
    node_items: np.ndarray
    a_in: np.ndarray
    a_out: np.ndarray
    label: int | None


class PosRecModel:
    """Item embeddings, graph-layer weights, attention weights, and mixing scalars.

    ``lambda0`` scales the graph-layer output of the last item's node,
    ``lambda1`` the attended state of that node, and ``lambda2`` the
    attended state of the first item's node.
    """

    def __init__(
        self,
        m: int,
        d: int,
        scheme: EncodingScheme,
        lambda0: float = 1.0,
        lambda1: float = 1.0,
        lambda2: float = 0.5,
        anchor_enabled: bool = True,
        anchor_weight: str = "distance",
        layer_norm: bool = True,
        heads: int = 1,
        d_ff: int | None = None,
        seed: int = 0,
    ):
        if scheme.dim != d:
            raise ModelError(f"scheme dim {scheme.dim} must match model dim {d}")
        if d % heads != 0:
            raise ModelError(f"head count {heads} must divide dim {d}")
        self.m = m
        self.d = d
        self.d_ff = d_ff if d_ff is not None else 2 * d
        self.scheme = scheme
        self.lambda0 = float(lambda0)
        self.lambda1 = float(lambda1)
        self.lambda2 = float(lambda2)
        self.anchor_enabled = bool(anchor_enabled)
        self.anchor_weight = anchor_weight
        self.layer_norm = bool(layer_norm)
        self.heads = heads
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))
        for name, table in scheme.tables.items():
            self.params[f"pe.{name}"] = table

    def _init_params(self, rng) -> None:
        d, d_ff = self.d, self.d_ff
        bound = 1.0 / np.sqrt(d)

        def mat(name, shape):
            self.params[name] = Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)

        def vec(name, value):
            self.params[name] = Tensor(value, requires_grad=True)

        mat("item_embeddings", (self.m, d))
        mat("gnn.w_in", (d, d))
        mat("gnn.w_out", (d, d))
        for gate in ("update", "reset", "cand"):
            mat(f"gru.w_{gate}", (2 * d, d))
            mat(f"gru.u_{gate}", (d, d))
            vec(f"gru.b_{gate}", np.zeros(d))
        for proj in ("query", "key", "value", "output"):
            mat(f"attn.w_{proj}", (d, d))
        mat("ff.w1", (d, d_ff))
        mat("ff.w2", (d_ff, d))
        vec("norm1.gain", np.ones(d))
        vec("norm1.bias", np.zeros(d))
        vec("norm2.gain", np.ones(d))
        vec("norm2.bias", np.zeros(d))

    # -- session preparation -------------------------------------------------

    def prepare(self, session: Session) -> PreparedSession:
        if max(session.items) >= self.m or min(session.items) < 0:
            raise ModelError(f"item id outside vocabulary of size {self.m}")
        graph = sessgraph.build_session_graph(session)
        if self.anchor_enabled:
            sessgraph.attach_anchors(graph, weight_mode=self.anchor_weight)
        a_in, a_out = self._adjacency(graph)
        return PreparedSession(
            graph=graph,
            node_items=np.asarray(graph.items, dtype=np.int64),
            a_in=a_in,
            a_out=a_out,
            label=session.label,
        )

    def _adjacency(self, graph: SessionGraph) -> tuple[np.ndarray, np.ndarray]:
        n = graph.n
        a_in = np.zeros((n, n))
        a_out = np.zeros((n, n))
        for s, t, w in graph.edges:
            a_in[t, s] += w
            a_out[s, t] += w
        if self.anchor_enabled:
            if not graph.has_anchors:
                raise ModelError("anchor aggregation enabled but graph has no anchors attached")
            for v in range(n):
                for a, w in graph.anchor_in[v]:
                    a_in[v, a] += w
                for a, w in graph.anchor_out[v]:
                    a_out[v, a] += w
        return a_in, a_out

    # -- stages ---------------------------------------------------------------

    def embed_nodes(self, node_items: np.ndarray) -> Tensor:
        return nc.gather_rows(self.params["item_embeddings"], node_items)

    def pggnn_layer(
        self,
        graph: SessionGraph,
        node_feats: Tensor,
        a_in: np.ndarray | None = None,
        a_out: np.ndarray | None = None,
    ) -> Tensor:
        """One round of weighted in/out message passing with a gated update.

        The inbound message of a node sums distance- or frequency-weighted
        features of its in-neighbors and anchors through one projection; the
        outbound side mirrors it.  The concatenated 2d message drives
        update/reset gates over the node's current feature.
        """
        if node_feats.shape[-1] != self.d:
            raise ModelError(f"node feature width {node_feats.shape[-1]} != {self.d}")
        if a_in is None or a_out is None:
            a_in, a_out = self._adjacency(graph)
        p = self.params
        msg_in = nc.matmul(nc.matmul(Tensor(a_in), node_feats), p["gnn.w_in"])
        msg_out = nc.matmul(nc.matmul(Tensor(a_out), node_feats), p["gnn.w_out"])
        msg = nc.concat([msg_in, msg_out])

        def gate(name):
            pre = nc.add(nc.add(nc.matmul(msg, p[f"gru.w_{name}"]),
                                nc.matmul(node_feats, p[f"gru.u_{name}"])),
                         p[f"gru.b_{name}"])
            return pre

        z = nc.sigmoid(gate("update"))
        r = nc.sigmoid(gate("reset"))
        cand = nc.tanh(nc.add(nc.add(nc.matmul(msg, p["gru.w_cand"]),
                                     nc.matmul(nc.mul(r, node_feats), p["gru.u_cand"])),
                              p["gru.b_cand"]))
        keep = nc.add(Tensor(np.ones_like(z.data)), nc.scale(z, -1.0))
        return nc.add(nc.mul(keep, node_feats), nc.mul(z, cand))

    def node_pe(self, graph: SessionGraph) -> Tensor:
        """Per-node encodings on the tape; gradients reach learned tables.

        Matches ``sessgraph.assemble_node_pe`` numerically: first half from
        the earliest occurrence, second half from the latest.
        """
        kind = self.scheme.kind
        n = graph.n
        l = graph.length
        if kind == posenc.LRPE:
            return Tensor(np.zeros((n, self.d)))
        if not self.scheme.is_learned:
            return Tensor(sessgraph.assemble_node_pe(graph, self.scheme))

        earliest = np.array([min(graph.occurrences[v]) for v in range(n)], dtype=np.int64)
        latest = np.array([max(graph.occurrences[v]) for v in range(n)], dtype=np.int64)
        half = self.d // 2
        t = {name: self.params[f"pe.{name}"] for name in self.scheme.tables}
        if kind == posenc.LDPE:
            return nc.concat([nc.gather_rows(t["forward"], earliest),
                              nc.gather_rows(t["backward"], l - 1 - latest)])
        if kind == posenc.LPE:
            lo = nc.gather_rows(t["table"], earliest)
            hi = nc.gather_rows(t["table"], latest)
            return nc.concat([nc.slice_axis(lo, 1, 0, half), nc.slice_axis(hi, 1, half, self.d)])
        if kind == posenc.ALPE:
            lo = nc.add(nc.gather_rows(t["forward"], earliest),
                        nc.gather_rows(t["backward"], l - 1 - earliest))
            hi = nc.add(nc.gather_rows(t["forward"], latest),
                        nc.gather_rows(t["backward"], l - 1 - latest))
            return nc.concat([nc.slice_axis(lo, 1, 0, half), nc.slice_axis(hi, 1, half, self.d)])
        if kind == posenc.TWO_D_LPE:
            lrow = nc.gather_rows(t["length"], np.full(n, l, dtype=np.int64))
            return nc.concat([nc.gather_rows(t["position"], earliest), lrow])
        raise ModelError(f"unhandled learned kind {kind!r}")

    def _relative_bias_matrix(self, graph: SessionGraph) -> Tensor:
        cap = self.scheme.max_len - 1
        pos = np.array([min(graph.occurrences[v]) for v in range(graph.n)], dtype=np.int64)
        offsets = np.clip(pos[:, None] - pos[None, :], -cap, cap) + cap
        bias = nc.gather_rows(self.params["pe.bias"], offsets.reshape(-1))
        return nc.reshape(bias, (graph.n, graph.n))

    def transformer_readout(
        self,
        node_feats_updated: Tensor,
        node_pe: Tensor,
        graph: SessionGraph,
        return_attention: bool = False,
    ):
        """Unmasked self-attention over nodes, then the first/last state mix.

        Residuals use post-norm ordering; layer norm (with its affine pair)
        can be disabled, leaving the pure residual path.
        """
        if graph.n == 0:
            raise ModelError("cannot read out an empty graph")
        p = self.params
        z = nc.add(node_feats_updated, node_pe)
        q = nc.matmul(z, p["attn.w_query"])
        k = nc.matmul(z, p["attn.w_key"])
        v = nc.matmul(z, p["attn.w_value"])

        d_head = self.d // self.heads
        bias = self._relative_bias_matrix(graph) if self.scheme.kind == posenc.LRPE else None
        contexts = []
        attention = []
        for h in range(self.heads):
            lo, hi = h * d_head, (h + 1) * d_head
            qh = nc.slice_axis(q, 1, lo, hi)
            kh = nc.slice_axis(k, 1, lo, hi)
            vh = nc.slice_axis(v, 1, lo, hi)
            logits = nc.scale(nc.matmul(qh, kh, transpose_b=True), 1.0 / np.sqrt(d_head))
            if bias is not None:
                logits = nc.add(logits, bias)
            weights = nc.softmax(logits)
            attention.append(weights.data)
            contexts.append(nc.matmul(weights, vh))
        mixed = contexts[0] if self.heads == 1 else nc.concat(contexts)
        attended = nc.matmul(mixed, p["attn.w_output"])

        s1 = nc.add(z, attended)
        if self.layer_norm:
            s1 = nc.add(nc.mul(nc.layer_norm(s1), p["norm1.gain"]), p["norm1.bias"])
        ff = nc.matmul(nc.tanh(nc.matmul(s1, p["ff.w1"])), p["ff.w2"])
        s2 = nc.add(s1, ff)
        if self.layer_norm:
            s2 = nc.add(nc.mul(nc.layer_norm(s2), p["norm2.gain"]), p["norm2.bias"])

        x_last = nc.gather_rows(node_feats_updated, [graph.last_node])
        h_last = nc.gather_rows(s2, [graph.last_node])
        h_first = nc.gather_rows(s2, [graph.first_node])
        out = nc.add(nc.add(nc.scale(x_last, self.lambda0), nc.scale(h_last, self.lambda1)),
                     nc.scale(h_first, self.lambda2))
        return (out, attention) if return_attention else out

    def score(self, h: Tensor) -> tuple[Tensor, Prediction]:
        """Probabilities over the catalogue from the initial item embeddings."""
        logits = nc.matmul(h, self.params["item_embeddings"], transpose_b=True)
        probs = nc.softmax(logits)
        return probs, prediction_from_scores(probs.data[0])

    # -- full pipeline ---------------------------------------------------------

    def forward_prepared(self, prep: PreparedSession) -> Tensor:
        x0 = self.embed_nodes(prep.node_items)
        x1 = self.pggnn_layer(prep.graph, x0, prep.a_in, prep.a_out)
        pe = self.node_pe(prep.graph)
        h = self.transformer_readout(x1, pe, prep.graph)
        probs, _ = self.score(h)
        return probs

    def forward_full(self, session: Session) -> Prediction:
        probs = self.forward_prepared(self.prepare(session))
        return prediction_from_scores(probs.data[0])

    # -- persistence -------------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "m": self.m,
            "d": self.d,
            "d_ff": self.d_ff,
            "scheme": self.scheme.kind,
            "max_len": self.scheme.max_len,
            "lambda0": self.lambda0,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "anchor_enabled": self.anchor_enabled,
            "anchor_weight": self.anchor_weight,
            "layer_norm": self.layer_norm,
            "heads": self.heads,
            "seed": self.seed,
        }

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: np.array(t.data, copy=True) for name, t in self.params.items()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, arr in snapshot.items():
            self.params[name].data = np.array(arr, copy=True)


def prediction_from_scores(scores: np.ndarray) -> Prediction:
    """Rank the catalogue by descending score; equal scores break by ascending id."""
    order = np.lexsort((np.arange(scores.size), -scores))
    return Prediction(scores=scores, top_k=order)


def cross_entropy(probs: list[Tensor], labels: list[int]) -> Tensor:
    """Summed (not averaged) cross entropy of a batch of probability rows."""
    if len(probs) != len(labels):
        raise ModelError(f"batch size mismatch: {len(probs)} scores vs {len(labels)} labels")
    if not probs:
        raise ModelError("empty batch")
    total = None
    for p, label in zip(probs, labels):
        m = p.shape[-1]
        if not 0 <= label < m:
            raise ModelError(f"label {label} outside vocabulary of size {m}")
        onehot = np.zeros((1, m))
        onehot[0, label] = 1.0
        term = nc.scale(nc.reduce_sum(nc.mul(nc.log(p), Tensor(onehot))), -1.0)
        total = term if total is None else nc.add(total, term)
    return total


def save_checkpoint(model: PosRecModel, path) -> None:
    """Single-file checkpoint: JSON manifest plus named float64 little-endian blocks."""
    manifest = json.dumps(model.manifest(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        names = sorted(model.params)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            arr = model.params[name].data
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> PosRecModel:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ModelError(f"not a checkpoint file: {path}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    manifest = json.loads(blob[offset:offset + mlen].decode("utf-8"))
    offset += mlen
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4

    scheme = posenc.make_scheme(manifest["scheme"], manifest["d"], manifest["max_len"],
                                seed=manifest["seed"])
    model = PosRecModel(
        m=manifest["m"],
        d=manifest["d"],
        scheme=scheme,
        lambda0=manifest["lambda0"],
        lambda1=manifest["lambda1"],
        lambda2=manifest["lambda2"],
        anchor_enabled=manifest["anchor_enabled"],
        anchor_weight=manifest["anchor_weight"],
        layer_norm=manifest["layer_norm"],
        heads=manifest["heads"],
        d_ff=manifest["d_ff"],
        seed=manifest["seed"],
    )
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + nlen].decode("utf-8")
        offset += nlen
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape)
        offset += 8 * size
        if name not in model.params:
            raise ModelError(f"checkpoint contains unknown parameter {name!r}")
        if model.params[name].data.shape != arr.shape:
            raise ModelError(f"checkpoint shape mismatch for {name!r}")
        model.params[name].data = arr.astype(np.float64)
    return model

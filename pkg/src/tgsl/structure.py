"""The structure learner: edge-centric message passing, sequence-predicted
context embeddings, candidate edge construction, time mapping, and
Gumbel-Top-K selection into an augmented graph view.

Candidate edges are proposed per source node by one of three strategies
(one-hop resampling, third-hop borrowing, random), projected to a freshly
sampled timestamp via the time-context vector, scored against the node's
context embedding, and the K largest relaxed weights survive. The surviving
weight rho stays attached to each added edge so gradients flow back through
the encoder's value aggregation.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import time_context, time_encode
from .graph import khop_sample

__all__ = [
    "TgslParams", "EtgnnOutput", "etgnn_forward", "ContextEmbedding",
    "context_predict", "context_predict_batch", "CandidateEdge",
    "CandidateBatch", "sample_candidates", "time_map", "gumbel_topk_select",
    "AugmentedView", "build_augmented_view", "visible_window",
    "StructureLearner",
]

STRATEGIES = ("one-hop", "third-hop", "random")


class TgslParams:
    """ET-GNN layer weights plus the single-layer LSTM of the context
    predictor. Layer dims follow the raw feature dims at layer 1 and the
    model dim afterwards; the time block is d_model wide (shared omega)."""

    def __init__(self, d_model, d_node, d_edge, layers=2, seed=0,
                 dtype=np.float32):
        self.d_model = d_model
        self.layers = layers
        rng = np.random.default_rng(seed)
        dm = d_model
        self.w_h = []
        self.w_f = []
        dh, df = d_node, d_edge
        for l in range(layers):
            in_h = dh + (dh + df + dm)
            in_f = df + 2 * dh + dm
            self.w_h.append(ad.init_uniform((in_h, dm), in_h, rng, dtype,
                                            f"tgsl.l{l}.wh"))
            self.w_f.append(ad.init_uniform((in_f, dm), in_f, rng, dtype,
                                            f"tgsl.l{l}.wf"))
            dh = df = dm
        self.lstm = {
            "wx": ad.init_uniform((dm, 4 * dm), dm, rng, dtype, "tgsl.lstm.wx"),
            "wh": ad.init_uniform((dm, 4 * dm), dm, rng, dtype, "tgsl.lstm.wh"),
            "b": ad.init_uniform((4 * dm,), dm, rng, dtype, "tgsl.lstm.b"),
        }

    def parameters(self):
        out = []
        for wh, wf in zip(self.w_h, self.w_f):
            out.extend((wh, wf))
        out.extend(self.lstm[k] for k in ("wx", "wh", "b"))
        return out

    def replace_tensors(self, tensors):
        it = iter(tensors)
        for l in range(self.layers):
            self.w_h[l] = next(it)
            self.w_f[l] = next(it)
        for k in ("wx", "wh", "b"):
            self.lstm[k] = next(it)

    def state_dict(self):
        return {p.name: p.values.copy() for p in self.parameters()}

    def load_state_dict(self, d):
        for p in self.parameters():
            p.values[...] = d[p.name]


# ---------------------------------------------------------------------------
# edge-centric message passing (mean aggregation with time encodings)

class EtgnnOutput:
    """Layer-L node and edge embeddings over a visible event window, with
    lookups from graph ids to local rows."""

    def __init__(self, nodes, node_h, event_ids, edge_f):
        self.nodes = nodes
        self.node_h = node_h
        self.event_ids = event_ids
        self.edge_f = edge_f

    def node_rows(self, nodes):
        pos = np.searchsorted(self.nodes, nodes)
        pos = np.clip(pos, 0, max(len(self.nodes) - 1, 0))
        ok = len(self.nodes) > 0 and np.array_equal(self.nodes[pos], nodes)
        return pos, ok

    def event_rows(self, eids):
        eids = np.asarray(eids, dtype=np.int64)
        pos = np.searchsorted(self.event_ids, eids)
        pos = np.clip(pos, 0, max(len(self.event_ids) - 1, 0))
        if len(self.event_ids) == 0 or not np.array_equal(
                self.event_ids[pos], eids):
            raise KeyError("event id outside the visible window")
        return pos


def etgnn_forward(event_ids, store, params, cfg):
    """Run the edge-centric GNN over the given (already time-filtered)
    events. Per layer: node messages are the neighborhood mean of
    concat(neighbor state, edge state, TE(t)); node and edge states pass
    through relu-activated linear maps. Inputs are the raw feature rows."""
    event_ids = np.asarray(event_ids, dtype=np.int64)
    dtype = params.w_h[0].dtype
    dm = params.d_model
    if len(event_ids) == 0:
        return EtgnnOutput(np.zeros(0, np.int64),
                           ad.constant(np.zeros((0, dm), dtype)),
                           np.zeros(0, np.int64),
                           ad.constant(np.zeros((0, dm), dtype)))
    src, dst = store.src[event_ids], store.dst[event_ids]
    ts = store.ts[event_ids]
    nodes = np.unique(np.concatenate([src, dst]))
    s_l = np.searchsorted(nodes, src)
    d_l = np.searchsorted(nodes, dst)
    n = len(nodes)

    h = ad.constant(store.node_features[nodes].astype(dtype))
    f = ad.constant(store.edge_features[store.feat_ids[event_ids]].astype(dtype))
    te = ad.constant(time_encode(ts, cfg, dtype=dtype))
    deg = np.bincount(np.concatenate([d_l, s_l]), minlength=n)
    inv = ad.constant((1.0 / np.maximum(deg, 1))[:, None].astype(dtype))
    seg = np.concatenate([d_l, s_l])

    for l in range(params.layers):
        msg_fwd = ad.concat([ad.take(h, s_l), f, te], axis=1)
        msg_bwd = ad.concat([ad.take(h, d_l), f, te], axis=1)
        mean_msg = ad.mul(ad.segment_sum(ad.concat([msg_fwd, msg_bwd], axis=0),
                                         seg, n), inv)
        h_new = ad.relu(ad.matmul(ad.concat([h, mean_msg], axis=1),
                                  params.w_h[l]))
        f_new = ad.relu(ad.matmul(
            ad.concat([f, ad.take(h, s_l), ad.take(h, d_l), te], axis=1),
            params.w_f[l]))
        h, f = h_new, f_new
    return EtgnnOutput(nodes, h, event_ids, f)


# ---------------------------------------------------------------------------
# sequence-predicted context embeddings

@dataclass
class ContextEmbedding:
    node: int
    vector: np.ndarray
    t_nominal: float


def context_predict_batch(params, et, index, nodes, t_cut, n_rnn,
                          max_eid=None):
    """LSTM over each node's most recent <= n_rnn edge embeddings in
    non-decreasing time order; returns the final hidden states [S, d].
    Nodes without history keep the zero initial state."""
    nodes = np.asarray(nodes, dtype=np.int64)
    s = len(nodes)
    dm = params.d_model
    dtype = params.lstm["wx"].dtype
    rows = np.zeros((s, n_rnn), dtype=np.int64)
    mask = np.zeros((s, n_rnn), dtype=dtype)
    have = len(et.event_ids) > 0
    for i, u in enumerate(nodes):
        if not have:
            break
        _, ei, _ = index.neighbors_before(int(u), t_cut, n_rnn, max_eid)
        k = len(ei)
        if k:
            rows[i, n_rnn - k:] = et.event_rows(ei)   # left padding
            mask[i, n_rnn - k:] = 1.0
    zeros = ad.constant(np.zeros((s, dm), dtype=dtype))
    if not mask.any():
        return zeros
    start = int(np.flatnonzero(mask.any(axis=0))[0])
    h, c = zeros, zeros
    wx, wh, b = params.lstm["wx"], params.lstm["wh"], params.lstm["b"]
    for t in range(start, n_rnn):
        x = ad.take(et.edge_f, rows[:, t])
        gates = ad.add(ad.add(ad.matmul(x, wx), ad.matmul(h, wh)), b)
        i_g = ad.sigmoid(ad.narrow(gates, 1, 0, dm))
        f_g = ad.sigmoid(ad.narrow(gates, 1, dm, dm))
        g_g = ad.tanh(ad.narrow(gates, 1, 2 * dm, dm))
        o_g = ad.sigmoid(ad.narrow(gates, 1, 3 * dm, dm))
        c_new = ad.add(ad.mul(f_g, c), ad.mul(i_g, g_g))
        h_new = ad.mul(o_g, ad.tanh(c_new))
        m = ad.constant(mask[:, t:t + 1])
        km = ad.constant(1.0 - mask[:, t:t + 1])
        h = ad.add(ad.mul(h_new, m), ad.mul(h, km))
        c = ad.add(ad.mul(c_new, m), ad.mul(c, km))
    return h


def context_predict(node, et, index, n_rnn, params, t_cut, max_eid=None,
                    t_nominal=None):
    """Single-node wrapper returning a ContextEmbedding."""
    out = context_predict_batch(params, et, index, np.array([node]), t_cut,
                                n_rnn, max_eid)
    return ContextEmbedding(int(node), out.values[0].copy(),
                            float(t_cut if t_nominal is None else t_nominal))


# ---------------------------------------------------------------------------
# candidate construction

@dataclass
class CandidateEdge:
    src: int
    dst: int
    t_new: float
    strategy: str
    feature_event: int          # event id whose embedding is used; -1 = zeros
    t_sample: float
    m: float = None             # dot-product logit, set by selection
    rho: float = None           # relaxed selection weight, set by selection


class CandidateBatch:
    """Struct-of-arrays candidate container."""

    def __init__(self, src, dst, t_new, t_sample, feat_eid, strategy):
        self.src = np.asarray(src, dtype=np.int64)
        self.dst = np.asarray(dst, dtype=np.int64)
        self.t_new = np.asarray(t_new, dtype=np.float64)
        self.t_sample = np.asarray(t_sample, dtype=np.float64)
        self.feat_eid = np.asarray(feat_eid, dtype=np.int64)
        self.strategy = strategy

    def __len__(self):
        return len(self.src)

    def to_edges(self, m=None, rho=None):
        out = []
        for i in range(len(self)):
            out.append(CandidateEdge(
                int(self.src[i]), int(self.dst[i]), float(self.t_new[i]),
                self.strategy, int(self.feat_eid[i]), float(self.t_sample[i]),
                None if m is None else float(m[i]),
                None if rho is None else float(rho[i])))
        return out


def sample_candidates(src_nodes, strategy, index, store, n_can, seed, *,
                      t_ref, t_max, random_pool=None, max_eid=None,
                      fanouts=(10, 3, 3)):
    """Up to n_can candidate destinations per source node.

    one-hop: seeded sample of distinct historical neighbors, feature = the
    node's own edge with them. third-hop: random-walk endpoints with the
    final-hop edge's feature borrowed. random: uniform training-set nodes
    with zero feature vectors (t_sample := t_new so the projection is the
    identity). Every candidate gets a fresh t_new uniform on [0, t_max].
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; one of {STRATEGIES}")
    if strategy == "random" and (random_pool is None or len(random_pool) == 0):
        raise ValueError("random strategy needs a node pool")
    rng = np.random.default_rng(seed)
    src_out, dst_out, eid_out, tsamp_out = [], [], [], []
    for u in np.asarray(src_nodes, dtype=np.int64):
        u = int(u)
        if strategy == "one-hop":
            nb, ei, tt = index.neighbors_before(u, t_ref, index.degree(u),
                                                max_eid)
            if len(nb) == 0:
                continue
            order = rng.permutation(len(nb))
            seen = set()
            for j in order:
                v = int(nb[j])
                if v in seen:
                    continue
                seen.add(v)
                src_out.append(u)
                dst_out.append(v)
                eid_out.append(int(ei[j]))
                tsamp_out.append(float(tt[j]))
                if len(seen) >= n_can:
                    break
        elif strategy == "third-hop":
            walk_seed = int(rng.integers(2 ** 31))
            ends = khop_sample(index, u, t_ref, hops=len(fanouts),
                               fanouts=fanouts, seed=walk_seed,
                               max_eid=max_eid)
            for v, e in ends[:n_can]:
                src_out.append(u)
                dst_out.append(v)
                eid_out.append(e)
                tsamp_out.append(float(store.ts[e]))
        else:
            pool = np.asarray(random_pool, dtype=np.int64)
            pool = pool[pool != u]
            if len(pool) == 0:
                continue
            k = min(n_can, len(pool))
            picks = rng.choice(pool, size=k, replace=False)
            for v in picks:
                src_out.append(u)
                dst_out.append(int(v))
                eid_out.append(-1)
                tsamp_out.append(0.0)   # overwritten with t_new below
    t_new = rng.uniform(0.0, t_max, size=len(src_out))
    tsamp = np.asarray(tsamp_out, dtype=np.float64)
    if strategy == "random":
        tsamp = t_new.copy()
    return CandidateBatch(src_out, dst_out, t_new, tsamp, eid_out, strategy)


# ---------------------------------------------------------------------------
# time mapping and selection

def time_map_batch(z_rows, f_rows, t_new, t_max, t_sample, cfg):
    """Project context rows to t_new and candidate feature rows from their
    sampled time to t_new, via elementwise time-context products."""
    dtype = z_rows.dtype
    s_ctx = ad.constant(time_context(t_new - t_max, cfg, dtype=dtype))
    s_feat = ad.constant(time_context(t_new - t_sample, cfg, dtype=dtype))
    return ad.mul(z_rows, s_ctx), ad.mul(f_rows, s_feat)


def time_map(ctx, cand, feature_vec, cfg):
    """Single-candidate wrapper over numpy vectors."""
    zhat = ctx.vector * time_context(cand.t_new - ctx.t_nominal, cfg,
                                     dtype=ctx.vector.dtype)
    fhat = feature_vec * time_context(cand.t_new - cand.t_sample, cfg,
                                      dtype=feature_vec.dtype)
    return zhat, fhat


def gumbel_topk_select(zhat, fhat, src_of, k_select, tau, seed,
                       mode="stochastic"):
    """Score candidates by the context/feature dot product, perturb with
    seeded logistic noise, squash by temperature, and keep the K largest
    relaxed weights per source node. Noise-free mode pins u = 0.5.

    Returns (m, rho, selected_indices): m and rho stay differentiable.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if k_select < 1:
        raise ValueError("K must be >= 1")
    if mode not in ("stochastic", "noise-free"):
        raise ValueError(f"unknown mode {mode!r}")
    c = zhat.shape[0]
    m = ad.sum_(ad.mul(zhat, fhat), axis=1)
    if mode == "stochastic":
        rng = np.random.default_rng(seed)
        u = rng.uniform(0.0, 1.0, size=c)
        noise = np.log(u) - np.log1p(-u)
    else:
        noise = np.zeros(c)
    rho = ad.sigmoid(ad.scale(ad.add(m, ad.constant(noise.astype(
        zhat.dtype))), 1.0 / tau))
    src_of = np.asarray(src_of)
    # per-source top-K, vectorized: sort by (source, -rho, index), keep the
    # first K ranks of every group; ties resolve to the earlier candidate
    order = np.lexsort((np.arange(c), -rho.values, src_of))
    grp = src_of[order]
    starts = np.flatnonzero(np.concatenate(([True], grp[1:] != grp[:-1])))
    rank = np.arange(c) - np.repeat(starts, np.diff(
        np.concatenate((starts, [c]))))
    sel = np.sort(order[rank < k_select])
    return m, rho, sel


# ---------------------------------------------------------------------------
# the augmented view

class AugmentedView:
    """A neighbor index plus weighted candidate edges inserted at their
    sampled timestamps. Original events carry implicit weight 1; added
    edges resolve to differentiable feature rows and weights. Ephemeral:
    valid only for the batch that built it."""

    def __init__(self, base, add_src, add_dst, add_t, cand_features, rho,
                 num_real_events):
        self.base = base
        self.cand_features = cand_features
        self.rho = rho
        self.num_real_events = num_real_events
        self._per_node = {}
        for j in range(len(add_src)):
            for a, bnode in ((add_src[j], add_dst[j]),
                             (add_dst[j], add_src[j])):
                self._per_node.setdefault(int(a), []).append(
                    (float(add_t[j]), j, int(bnode)))
        for lst in self._per_node.values():
            lst.sort()

    @property
    def num_added(self):
        return 0 if self.cand_features is None else self.cand_features.shape[0]

    def batch_neighbors(self, nodes, ts, n, max_eid=None, uniform_seed=None):
        ids, eids, tss, mask = self.base.batch_neighbors(
            nodes, ts, n, max_eid, uniform_seed)
        aug = np.full(ids.shape, -1, dtype=np.int64)
        if not self._per_node:
            return ids, eids, tss, mask, aug
        for i in range(len(nodes)):
            adds = self._per_node.get(int(nodes[i]))
            if not adds:
                continue
            t_q = float(ts[i])
            live = [(t, j, peer) for (t, j, peer) in adds if t < t_q]
            if not live:
                continue
            k = int(mask[i].sum())
            b_ids, b_eids, b_tss = (ids[i, :k].copy(), eids[i, :k].copy(),
                                    tss[i, :k].copy())
            merged = [(b_tss[c], 0, c, -1) for c in range(k)]
            merged += [(t, 1, j, peer) for (t, j, peer) in live]
            merged.sort(key=lambda r: (r[0], r[1], r[2]))
            merged = merged[-n:]
            for c, (t, kind, j, peer) in enumerate(merged):
                if kind == 0:
                    ids[i, c], eids[i, c] = b_ids[j], b_eids[j]
                    tss[i, c], aug[i, c] = t, -1
                else:
                    ids[i, c] = peer
                    eids[i, c] = self.num_real_events + j
                    tss[i, c] = t
                    aug[i, c] = j
                mask[i, c] = 1.0
            for c in range(len(merged), n):
                ids[i, c] = eids[i, c] = 0
                tss[i, c] = 0.0
                mask[i, c] = 0.0
                aug[i, c] = -1
        return ids, eids, tss, mask, aug


def build_augmented_view(base, cands, selected_idx, fhat, rho,
                         num_real_events):
    """Insert the selected candidates into the neighbor structure at their
    t_new, deduplicating (src, dst, t_new) triples by the larger rho."""
    if len(selected_idx) == 0:
        return AugmentedView(base, np.zeros(0, np.int64), np.zeros(0, np.int64),
                             np.zeros(0), None, None, num_real_events)
    sel = np.asarray(selected_idx, dtype=np.int64)
    key = np.stack([cands.src[sel].astype(np.float64),
                    cands.dst[sel].astype(np.float64),
                    cands.t_new[sel]], axis=1)
    _, first, inv = np.unique(key, axis=0, return_index=True,
                              return_inverse=True)
    inv = inv.reshape(-1)
    if len(first) != len(sel):
        keep = np.zeros(len(first), dtype=np.int64)
        best = np.full(len(first), -np.inf)
        rv = rho.values[sel]
        for pos in range(len(sel)):
            g = inv[pos]
            if rv[pos] > best[g]:
                best[g] = rv[pos]
                keep[g] = pos
        sel = sel[np.sort(keep)]
    fh = ad.take(fhat, sel)
    rh = ad.take(rho, sel)
    return AugmentedView(base, cands.src[sel], cands.dst[sel],
                         cands.t_new[sel], fh, rh, num_real_events)


# ---------------------------------------------------------------------------
# window collection and the end-to-end proposer

def visible_window(index, nodes, t_ref, levels=2, max_eid=None):
    """Event ids incident to the sources and their first (levels-1) rings,
    restricted to strictly before t_ref (and the optional event-id cutoff)."""
    seen = set(int(u) for u in nodes)
    level = np.unique(np.asarray(nodes, dtype=np.int64))
    eids = []
    for _ in range(levels):
        nxt = []
        for u in level:
            nb, ei, _ = index.neighbors_before(int(u), t_ref,
                                               index.degree(int(u)), max_eid)
            if len(ei):
                eids.append(ei)
                nxt.append(nb)
        if not nxt:
            break
        cand = np.unique(np.concatenate(nxt))
        level = np.array([v for v in cand if int(v) not in seen],
                         dtype=np.int64)
        seen.update(int(v) for v in level)
        if len(level) == 0:
            break
    if not eids:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(eids))


class StructureLearner:
    """End-to-end proposer: window -> edge embeddings -> contexts ->
    candidates -> time mapping -> Gumbel-Top-K -> augmented view."""

    def __init__(self, params, cfg, store, strategy="one-hop", k_select=8,
                 n_can=30, n_rnn=20, tau=1.0, fanouts=(10, 3, 3),
                 random_pool=None):
        self.params = params
        self.cfg = cfg
        self.store = store
        self.strategy = strategy
        self.k_select = k_select
        self.n_can = n_can
        self.n_rnn = n_rnn
        self.tau = tau
        self.fanouts = fanouts
        self.random_pool = random_pool

    def window_levels(self):
        # third-hop borrowing needs the events incident to hop-2 nodes
        return 3 if self.strategy == "third-hop" else 2

    def propose(self, index, src_nodes, *, t_ref, t_max, seed,
                mode="stochastic", max_eid=None, window_event_ids=None,
                etgnn_cache=None):
        """Build the augmented view for a batch of source nodes. Returns
        (view, detail dict) — the view is ephemeral to this batch."""
        src_nodes = np.unique(np.asarray(src_nodes, dtype=np.int64))
        num_real = len(self.store)
        if self.k_select == 0:
            return (AugmentedView(index, np.zeros(0, np.int64),
                                  np.zeros(0, np.int64), np.zeros(0),
                                  None, None, num_real), {})
        if etgnn_cache is not None:
            et = etgnn_cache
        else:
            if window_event_ids is None:
                window_event_ids = visible_window(
                    index, src_nodes, t_ref, self.window_levels(), max_eid)
            et = etgnn_forward(window_event_ids, self.store, self.params,
                               self.cfg)
        z = context_predict_batch(self.params, et, index, src_nodes, t_ref,
                                  self.n_rnn, max_eid)
        cands = sample_candidates(
            src_nodes, self.strategy, index, self.store, self.n_can, seed,
            t_ref=t_ref, t_max=t_max, random_pool=self.random_pool,
            max_eid=max_eid, fanouts=self.fanouts)
        if len(cands) == 0:
            return (AugmentedView(index, np.zeros(0, np.int64),
                                  np.zeros(0, np.int64), np.zeros(0),
                                  None, None, num_real), {"candidates": cands})
        z_rows = ad.take(z, np.searchsorted(src_nodes, cands.src))
        dtype = z.dtype
        borrow = cands.feat_eid >= 0
        if borrow.any():
            rows = np.zeros(len(cands), dtype=np.int64)
            rows[borrow] = et.event_rows(cands.feat_eid[borrow])
            feat_rows = ad.mul(ad.take(et.edge_f, rows),
                               ad.constant(borrow[:, None].astype(dtype)))
        else:
            feat_rows = ad.constant(
                np.zeros((len(cands), self.params.d_model), dtype=dtype))
        zhat, fhat = time_map_batch(z_rows, feat_rows, cands.t_new, t_max,
                                    cands.t_sample, self.cfg)
        m, rho, sel = gumbel_topk_select(
            zhat, fhat, cands.src, self.k_select, self.tau, seed + 1, mode)
        view = build_augmented_view(index, cands, sel, fhat, rho, num_real)
        detail = {"candidates": cands, "m": m, "rho": rho, "selected": sel,
                  "context": z, "etgnn": et}
        return view, detail

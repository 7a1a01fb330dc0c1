"""Verification suites behind `tgsl verify`: gradient correctness against
finite differences, Gumbel-Top-K selection frequencies against a Monte-Carlo
oracle, metric implementations against brute-force definitions, and
chronological leakage invariance. Each check reports its measured value and
threshold; suites run in float64 where gradients are involved.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import EncoderParams, TgatEncoder, TimeEncodingConfig
from .graph import EventStore, NeighborIndex, chronological_split, synth_generate
from .structure import (StructureLearner, TgslParams, context_predict_batch,
                        etgnn_forward, gumbel_topk_select)
from .training import average_precision, accuracy_score, bce_link_loss, info_nce_batch

__all__ = ["Check", "grad_suite", "gumbel_suite", "metrics_suite",
           "leakage_suite", "run_suites", "SUITES"]


@dataclass
class Check:
    name: str
    passed: bool
    measured: float
    threshold: float
    note: str = ""

    def line(self):
        word = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.note})" if self.note else ""
        return (f"[{word}] {self.name}: measured {self.measured:.6g} "
                f"vs threshold {self.threshold:.6g}{extra}")


# ---------------------------------------------------------------------------
# gradient suite

def _primitive_cases(rng):
    """One random instance per call, cycling through the primitive set."""
    c = ad.constant

    def rnd(*shape):
        return rng.standard_normal(shape)

    w = c(rng.standard_normal((4, 3)))
    w5 = c(rng.standard_normal((4, 5)))
    w42 = c(rng.standard_normal((4, 2)))
    w3 = c(rng.standard_normal(3))
    w4 = c(rng.standard_normal(4))

    return [
        ("add", lambda a, b: ad.sum_(ad.mul(ad.add(a, b), w)),
         [rnd(4, 3), rnd(4, 3)]),
        ("sub-broadcast", lambda a, b: ad.sum_(ad.mul(ad.sub(a, b), w)),
         [rnd(4, 3), rnd(1, 3)]),
        ("mul", lambda a, b: ad.sum_(ad.mul(ad.mul(a, b), w)),
         [rnd(4, 3), rnd(4, 3)]),
        ("div", lambda a, b: ad.sum_(ad.mul(ad.div(a, b), w)),
         [rnd(4, 3), np.abs(rnd(4, 3)) + 0.5]),
        ("scale", lambda a: ad.sum_(ad.mul(ad.scale(a, -2.5), w)), [rnd(4, 3)]),
        ("matmul", lambda a, b: ad.sum_(ad.mul(ad.matmul(a, b), w)),
         [rnd(4, 5), rnd(5, 3)]),
        ("matmul-batched", lambda a, b: ad.sum_(ad.matmul(a, b)),
         [rnd(2, 3, 4), rnd(2, 4, 2)]),
        ("concat-narrow",
         lambda a, b: ad.sum_(ad.mul(ad.narrow(ad.concat([a, b], axis=1),
                                               1, 1, 3), w)),
         [rnd(4, 2), rnd(4, 3)]),
        ("reshape", lambda a: ad.sum_(ad.mul(ad.reshape(a, (4, 3)), w)),
         [rnd(12)]),
        ("take", lambda a: ad.sum_(ad.mul(ad.take(
            a, np.array([0, 2, 2, 1])), w)), [rnd(3, 3)]),
        ("segment-sum", lambda a: ad.sum_(ad.mul(ad.segment_sum(
            a, np.array([0, 1, 0, 2, 1]), 4), w42)), [rnd(5, 2)]),
        ("sigmoid", lambda a: ad.sum_(ad.mul(ad.sigmoid(a), w)), [rnd(4, 3)]),
        ("relu", lambda a: ad.sum_(ad.mul(ad.relu(a), w)), [rnd(4, 3)]),
        ("tanh", lambda a: ad.sum_(ad.mul(ad.tanh(a), w)), [rnd(4, 3)]),
        ("sin", lambda a: ad.sum_(ad.mul(ad.sin(a), w)), [rnd(4, 3)]),
        ("cos", lambda a: ad.sum_(ad.mul(ad.cos(a), w)), [rnd(4, 3)]),
        ("exp", lambda a: ad.sum_(ad.mul(ad.exp(a), w)), [rnd(4, 3)]),
        ("log", lambda a: ad.sum_(ad.mul(ad.log(a), w)),
         [np.abs(rnd(4, 3)) + 0.5]),
        ("sqrt", lambda a: ad.sum_(ad.mul(ad.sqrt(a), w)),
         [np.abs(rnd(4, 3)) + 0.5]),
        ("mean-axis", lambda a: ad.sum_(ad.mul(ad.mean(a, axis=0), w3)),
         [rnd(5, 3)]),
        ("sum-axis", lambda a: ad.sum_(ad.mul(ad.sum_(a, axis=1), w4)),
         [rnd(4, 5)]),
        ("logsumexp", lambda a: ad.sum_(ad.mul(ad.logsumexp(a, axis=1),
                                               w4)), [rnd(4, 5)]),
        ("softmax", lambda a: ad.sum_(ad.mul(ad.softmax(a, axis=1), w5)),
         [rnd(4, 5)]),
        ("clip", lambda a: ad.sum_(ad.mul(ad.clip(a, -5.0, 5.0), w)),
         [rnd(4, 3)]),
    ]


def grad_primitives(n_instances=100, seed=0, tol=1e-4):
    rng = np.random.default_rng(seed)
    worst = 0.0
    i = 0
    while i < n_instances:
        for name, fn, args in _primitive_cases(rng):
            res = ad.grad_check(fn, args)
            worst = max(worst, res.max_rel_err)
            i += 1
            if i >= n_instances:
                break
    return worst


def toy_mtl_setup(d_model=8, seed=13):
    """The 6-node, 10-event toy graph with a full multi-task loss, float64
    throughout; returns (loss_fn, start_values) for grad_check."""
    store = synth_generate(2, 3, 3, 10, 0.2, seed=seed)
    split = chronological_split(store)
    index = NeighborIndex.build(store, split.usable_train_ids)
    cfg = TimeEncodingConfig(d_model)
    enc_p = EncoderParams(d_model, layers=1, heads=1, d_hidden=6,
                          seed=seed + 1, dtype=np.float64)
    enc = TgatEncoder(enc_p, cfg, store, n_nb=4)
    tg_p = TgslParams(d_model, store.node_dim, store.edge_dim, layers=1,
                      seed=seed + 2, dtype=np.float64)
    learner = StructureLearner(tg_p, cfg, store, strategy="one-hop",
                               k_select=2, n_can=4, n_rnn=3)
    rng = np.random.default_rng(seed + 3)
    queue = rng.standard_normal((4, d_model))
    batch = split.usable_train_ids[-3:]
    src, dst, tss = store.src[batch], store.dst[batch], store.ts[batch]
    neg = np.array([store.dst[0]] * len(batch))
    b = len(batch)
    keys = rng.standard_normal((2 * b, d_model))   # frozen positive keys
    start_eid = int(batch[0])
    t0 = float(tss[0])
    nodes3 = np.concatenate([src, dst, neg])
    ts3 = np.concatenate([tss, tss, tss])
    n_enc = len(enc_p.parameters())

    def loss_fn(*probes):
        enc_p.replace_tensors(probes[:n_enc])
        tg_p.replace_tensors(probes[n_enc:])
        emb_o = enc.encode_batch(index, nodes3, ts3, max_eid=start_eid)
        l_ori = bce_link_loss(
            enc.score_batch(ad.narrow(emb_o, 0, 0, b),
                            ad.narrow(emb_o, 0, b, b)),
            enc.score_batch(ad.narrow(emb_o, 0, 0, b),
                            ad.narrow(emb_o, 0, 2 * b, b)))
        view, _ = learner.propose(index, np.concatenate([src, dst]),
                                  t_ref=t0, t_max=split.t_max_train,
                                  seed=seed + 4, mode="stochastic",
                                  max_eid=start_eid)
        emb_a = enc.encode_batch(view, nodes3, ts3, max_eid=start_eid)
        l_aug = bce_link_loss(
            enc.score_batch(ad.narrow(emb_a, 0, 0, b),
                            ad.narrow(emb_a, 0, b, b)),
            enc.score_batch(ad.narrow(emb_a, 0, 0, b),
                            ad.narrow(emb_a, 0, 2 * b, b)))
        l_cl = info_nce_batch(ad.narrow(emb_a, 0, 0, 2 * b), keys, queue, 0.2)
        return ad.add(ad.add(l_ori, l_aug), ad.scale(l_cl, 0.5))

    start = [p.values.copy() for p in enc_p.parameters() + tg_p.parameters()]
    return loss_fn, start


def grad_suite(n_instances=100, tol=1e-4):
    checks = []
    t0 = time.time()
    worst = grad_primitives(n_instances=n_instances)
    checks.append(Check("grad/primitives-100-random-instances",
                        worst <= tol, worst, tol))
    fn, start = toy_mtl_setup()
    res = ad.grad_check(fn, start)
    note = f"{res.n_checked} coords, {len(res.skipped)} kinks skipped"
    checks.append(Check("grad/composite-mtl-toy-graph",
                        res.max_rel_err <= tol, res.max_rel_err, tol, note))
    checks.append(Check("grad/runtime-seconds", time.time() - t0 < 60,
                        time.time() - t0, 60.0))
    return checks


# ---------------------------------------------------------------------------
# Gumbel suite

def gumbel_suite(draws=100_000, n=10, k=3, tol=0.01):
    t0 = time.time()
    c = draws * n
    src = np.repeat(np.arange(draws), n)
    zh = ad.constant(np.ones((c, 1)))
    fh_eq = ad.constant(np.zeros((c, 1)))
    _, _, sel = gumbel_topk_select(zh, fh_eq, src, k, 1.0, seed=123)
    freq = np.bincount(sel % n, minlength=n) / draws
    dev = float(np.abs(freq - k / n).max())
    checks = [Check("gumbel/equal-logit-frequency-dev", dev <= tol, dev, tol,
                    f"target {k / n:.3f} each")]

    # raise candidate 0's logit by +2 under common random numbers
    raised = np.zeros((c, 1))
    raised[::n] = 2.0
    _, _, sel2 = gumbel_topk_select(zh, ad.constant(raised), src, k, 1.0,
                                    seed=123)
    f0_eq = freq[0]
    f0_up = np.count_nonzero(sel2 % n == 0) / draws
    checks.append(Check("gumbel/raised-logit-frequency-increases",
                        f0_up > f0_eq, f0_up - f0_eq, 0.0,
                        f"{f0_eq:.3f} -> {f0_up:.3f}"))

    # monotone influence: candidate 0 never drops out under paired noise
    base0 = set(sel[sel % n == 0].tolist())
    up0 = set(sel2[sel2 % n == 0].tolist())
    dropped = len(base0 - up0)
    checks.append(Check("gumbel/monotone-influence-dropouts", dropped == 0,
                        float(dropped), 0.0))

    # noise-free mode is deterministic
    zh50 = ad.constant(np.ones((50, 1)))
    f50 = ad.constant(raised[:50])
    _, r1, s1 = gumbel_topk_select(zh50, f50, src[:50], k, 1.0,
                                   seed=1, mode="noise-free")
    _, r2, s2 = gumbel_topk_select(zh50, f50, src[:50], k, 1.0,
                                   seed=2, mode="noise-free")
    same = np.array_equal(r1.values, r2.values) and np.array_equal(s1, s2)
    checks.append(Check("gumbel/noise-free-deterministic", same,
                        float(same), 1.0))
    checks.append(Check("gumbel/runtime-seconds", time.time() - t0 < 30,
                        time.time() - t0, 30.0))
    return checks


# ---------------------------------------------------------------------------
# metric oracle suite

def _brute_ap(labels, scores):
    n = len(labels)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    tp = 0
    total_pos = sum(labels)
    if total_pos == 0:
        return 0.0
    area = 0.0
    prev_recall = 0.0
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            tp += 1
        precision = tp / rank
        recall = tp / total_pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def _brute_acc(labels, scores, thr=0.5):
    hits = sum(1 for l, s in zip(labels, scores)
               if (s > thr) == (l == 1))
    return hits / len(labels)


def metrics_suite(max_n=12, seed=5):
    rng = np.random.default_rng(seed)
    worst_ap = 0.0
    worst_acc = 0.0
    for n in range(1, max_n + 1):
        scores = np.round(rng.random(n), 1)   # coarse grid forces ties
        for pattern in range(1, 2 ** n):
            labels = np.array([(pattern >> i) & 1 for i in range(n)])
            worst_ap = max(worst_ap, abs(average_precision(labels, scores)
                                         - _brute_ap(labels.tolist(),
                                                     scores.tolist())))
            worst_acc = max(worst_acc, abs(accuracy_score(labels, scores)
                                           - _brute_acc(labels.tolist(),
                                                        scores.tolist())))
    checks = [
        Check("metrics/ap-brute-force-max-abs-diff", worst_ap <= 1e-12,
              worst_ap, 1e-12, f"all label patterns, n <= {max_n}"),
        Check("metrics/acc-brute-force-max-abs-diff", worst_acc <= 1e-12,
              worst_acc, 1e-12),
    ]
    # monotone transform invariance
    labels = rng.integers(0, 2, size=200)
    labels[0] = 1
    scores = rng.random(200)
    base = average_precision(labels, scores)
    dev = max(abs(average_precision(labels, t(scores)) - base)
              for t in (lambda s: 2 * s + 1, np.exp,
                        lambda s: 1 / (1 + np.exp(-5 * s))))
    checks.append(Check("metrics/ap-monotone-transform-invariance",
                        dev == 0.0, dev, 0.0))
    return checks


# ---------------------------------------------------------------------------
# leakage suite

def leakage_suite(trials=50, seed=11):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(trials):
        store = synth_generate(2, 8, 8, 120, 0.2, seed=int(rng.integers(1e6)))
        t = float(store.ts[70])
        nodes = rng.integers(0, store.num_nodes, size=4)
        tss = np.full(4, t)
        d = 8
        cfg = TimeEncodingConfig(d)
        enc_p = EncoderParams(d, layers=2, heads=2, d_hidden=8,
                              seed=int(rng.integers(1e6)))
        tg_p = TgslParams(d, store.node_dim, store.edge_dim, layers=2,
                          seed=int(rng.integers(1e6)))

        def outputs(st):
            idx = NeighborIndex.build(st)
            enc = TgatEncoder(enc_p, cfg, st, n_nb=5)
            emb = enc.encode_batch(idx, nodes, tss).values
            visible = np.flatnonzero(st.ts < t)
            et = etgnn_forward(visible, st, tg_p, cfg)
            z = context_predict_batch(tg_p, et, idx, nodes, t, 4).values
            return emb, et.node_h.values, et.edge_f.values, z

        base = outputs(store)
        kind = trial % 3
        future = np.flatnonzero(store.ts >= t)
        pick = int(rng.choice(future))
        if kind == 0:      # modify a future event's features
            feats = store.edge_features.copy()
            feats[store.feat_ids[pick]] += rng.standard_normal(
                feats.shape[1]).astype(np.float32)
            mut = EventStore(store.src, store.dst, store.ts, store.feat_ids,
                             store.node_features, feats, store.num_users)
        elif kind == 1:    # delete a future event
            keep = np.ones(len(store), dtype=bool)
            keep[pick] = False
            mut = EventStore(store.src[keep], store.dst[keep], store.ts[keep],
                             store.feat_ids[keep], store.node_features,
                             store.edge_features, store.num_users)
        else:              # append a brand-new future event
            feats = np.concatenate([store.edge_features,
                                    rng.standard_normal(
                                        (1, store.edge_dim)).astype(np.float32)])
            mut = EventStore(np.append(store.src, rng.integers(8)),
                             np.append(store.dst, 8 + rng.integers(8)),
                             np.append(store.ts, store.ts[-1] + 1.0),
                             np.append(store.feat_ids, len(feats) - 1),
                             store.node_features, feats, store.num_users)
        after = outputs(mut)
        for a, b in zip(base, after):
            if not np.array_equal(a, b):
                worst = max(worst, float(np.abs(a - b).max())
                            if a.shape == b.shape else np.inf)
    return [Check("leakage/future-perturbation-max-delta", worst == 0.0,
                  worst, 0.0, f"{trials} randomized trials")]


SUITES = {
    "grad": grad_suite,
    "gumbel": gumbel_suite,
    "metrics": metrics_suite,
    "leakage": leakage_suite,
}


def run_suites(names):
    checks = []
    for name in names:
        checks.extend(SUITES[name]())
    return checks, all(c.passed for c in checks)

"""Discriminative training: the mutual-information objective and extended
Baum-Welch updates.

The objective contrasts the scaled likelihood of the reference transcript
(numerator, via its aligned composite) with the summed scaled likelihood
of every word sequence the recogniser admits (denominator).  The
denominator is computed exactly by a forward pass over the full
recognition network at desk scale, or approximately from decoder word
lattices.  Parameter updates damp the numerator-minus-denominator
statistics with a per-Gaussian constant chosen to keep variances positive.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .acoustic import (
    Accumulators,
    DiagGaussian,
    GaussianMixture,
    LOG_ZERO,
    _graph_forward,
    _graph_forward_backward,
    build_composite,
    build_transcript_composite,
    global_variance,
    logsumexp,
)
from .decoder import DecoderConfig, LatArc, LatNode, Lattice, compile_network, decode
from .errors import AlignmentError, DataFormatError, NumericError
from .langmodel import EOS, SOS

DEFAULT_KAPPA = 1.0 / 12.0


@dataclass
class EbwConfig:
    e_const: float = 2.0
    var_floor_scale: float = 1e-4
    max_iters: int = 10

    def __post_init__(self):
        if self.e_const <= 0.0:
            raise DataFormatError("the damping constant must be positive")


@dataclass
class MmiStats:
    """Numerator and denominator accumulators over the same parameter pool."""

    num: Accumulators
    den: Accumulators
    num_total: float = 0.0   # sum of scaled reference log likelihoods + log P(W)
    den_total: float = 0.0   # sum of scaled recognition-model log likelihoods
    n_utterances: int = 0
    skipped: list = field(default_factory=list)

    @property
    def objective(self):
        return self.num_total - self.den_total

    def add(self, other):
        self.num.add(other.num)
        self.den.add(other.den)
        self.num_total += other.num_total
        self.den_total += other.den_total
        self.n_utterances += other.n_utterances
        self.skipped.extend(other.skipped)
        return self


def _sentence_lm_logprob(lm, words):
    total = 0.0
    history = (SOS,)
    for w in list(words) + [EOS]:
        total += lm.logprob(w, history)
        history = history + (w,)
    return total


def _network_graph(net, kappa):
    """Flatten a recognition network into (init, trans, final) log weights.

    Emitting-to-emitting transitions keep their acoustic weights scaled by
    ``kappa``; junction routes are closed off by summing over all epsilon
    paths, with language-model terms unscaled.
    """
    n = net.n_emitting
    n_eps = len(net.eps)

    # Closure over the junction DAG (indices are already topological).
    eps_reach = [dict() for _ in range(n_eps)]  # src -> {dst: log weight}
    for e in range(n_eps - 1, -1, -1):
        table = {e: 0.0}
        for dst, lm_raw, _pen in net.eps_arcs[e]:
            for target, w in eps_reach[dst].items():
                cand = lm_raw + w
                if target in table:
                    table[target] = float(np.logaddexp(table[target], cand))
                else:
                    table[target] = cand
        eps_reach[e] = table

    # Junction -> emitting entry weights (kappa on the acoustic entry part).
    entry = np.full((n_eps, n), LOG_ZERO)
    for j in range(n):
        for eps_idx, w in net.entry_arcs[j]:
            entry[eps_idx, j] = np.logaddexp(entry[eps_idx, j], kappa * w)
    # Closure-extended entry: from any junction, into any emitting state.
    closed_entry = np.full((n_eps, n), LOG_ZERO)
    for e in range(n_eps - 1, -1, -1):
        acc = entry[e].copy()
        for target, w in eps_reach[e].items():
            if target != e:
                acc = np.logaddexp(acc, w + entry[target])
        closed_entry[e] = acc

    log_trans = np.full((n, n), LOG_ZERO)
    for j in range(n):
        for src, w in net.emit_arcs[j]:
            log_trans[src, j] = np.logaddexp(log_trans[src, j], kappa * w)
    log_final = np.full(n, LOG_ZERO)
    final = net.final_index
    for e, arcs in enumerate(net.end_arcs):
        if not arcs:
            continue
        to_final = eps_reach[e].get(final)
        row = closed_entry[e]
        for src, w_exit in arcs:
            contribution = kappa * w_exit + row
            log_trans[src] = np.logaddexp(log_trans[src], contribution)
            if to_final is not None:
                log_final[src] = np.logaddexp(log_final[src], kappa * w_exit + to_final)
    log_init = closed_entry[net.start_index]
    return log_init, log_trans, log_final


def denominator_network(lexicon, models, lm, cross_word=False):
    """Recognition network with exact word-pair probabilities for summing."""
    return compile_network(lexicon, models, lm, cross_word=cross_word, exact_lm=True)


def mmi_objective(models, corpus, lexicon, lm, kappa=DEFAULT_KAPPA, cross_word=False,
                  net=None):
    """Scaled conditional log likelihood of the references; always <= 0."""
    if net is None:
        net = denominator_network(lexicon, models, lm, cross_word)
    log_init, log_trans, log_final = _network_graph(net, kappa)
    total = 0.0
    for feats_obj, words in corpus:
        feats = feats_obj.frames if hasattr(feats_obj, "frames") else np.asarray(feats_obj)
        comp = build_transcript_composite(models, list(words), lexicon, cross_word=cross_word)
        num = _graph_forward(
            models, comp.state_ids, kappa * comp.log_init, kappa * comp.log_trans,
            kappa * comp.log_final, feats, kappa=kappa,
        ) + _sentence_lm_logprob(lm, words)
        den = _graph_forward(
            models, net.emit_state_ids, log_init, log_trans, log_final, feats,
            kappa=kappa,
        )
        total += num - den
    return total


def accumulate_mmi_stats(models, corpus, lexicon, lm, kappa=DEFAULT_KAPPA,
                         lattice_mode=False, cross_word=False, net=None,
                         lattices=None):
    """Numerator (reference) and denominator (recognition) statistics.

    The exact denominator runs forward-backward over the full recognition
    network.  In ``lattice_mode`` the denominator is approximated from word
    lattices (supplied per utterance, or freshly decoded): each arc's
    acoustic score is recomputed as a summed within-word pass, the lattice
    is itself forward-backward weighted, and within-arc occupancies are
    scaled by arc posteriors.
    """
    stats = MmiStats(Accumulators(), Accumulators())
    if net is None:
        net = denominator_network(lexicon, models, lm, cross_word)
    if not lattice_mode:
        graph = _network_graph(net, kappa)
    for idx, (feats_obj, words) in enumerate(corpus):
        feats = feats_obj.frames if hasattr(feats_obj, "frames") else np.asarray(feats_obj)
        try:
            comp = build_transcript_composite(
                models, list(words), lexicon, cross_word=cross_word
            )
            num_acc, num_total, _, _, _ = _graph_forward_backward(
                models, comp.state_ids, kappa * comp.log_init,
                kappa * comp.log_trans, kappa * comp.log_final, feats, kappa=kappa,
            )
            if lattice_mode:
                lat = lattices[idx] if lattices is not None else None
                den_acc, den_total = _lattice_denominator(
                    models, feats, lexicon, lm, kappa, net, lat
                )
            else:
                den_acc, den_total = _exact_denominator(models, feats, net, graph, kappa)
        except AlignmentError:
            stats.skipped.append(idx)
            continue
        stats.num.add(num_acc)
        stats.den.add(den_acc)
        stats.num_total += num_total + _sentence_lm_logprob(lm, words)
        stats.den_total += den_total
        stats.n_utterances += 1
    if stats.n_utterances == 0:
        raise AlignmentError("no utterance contributed statistics")
    return stats


def _exact_denominator(models, feats, net, graph, kappa):
    log_init, log_trans, log_final = graph
    acc, total, _, _, _ = _graph_forward_backward(
        models, net.emit_state_ids, log_init, log_trans, log_final, feats, kappa=kappa
    )
    return acc, total


def dense_word_lattice(Y, lexicon, models, lm, kappa=DEFAULT_KAPPA, cross_word=False):
    """Every (word, start, end) hypothesis as a lattice, acoustics summed.

    Arc acoustic scores hold the scaled within-word forward sum over the
    arc's span, so a forward-backward over this lattice reproduces the
    exact recognition-network probability mass.
    """
    feats = Y.frames if hasattr(Y, "frames") else np.asarray(Y, dtype=np.float64)
    T = feats.shape[0]
    words = sorted(lexicon.words)
    span_score = {}
    for w in words:
        comp = build_transcript_composite(models, [w], lexicon, cross_word=False)
        shortest = comp.shortest_path
        for t1 in range(T):
            for t2 in range(t1 + 1, T + 1):
                if t2 - t1 < shortest:
                    continue
                try:
                    s = _graph_forward(
                        models, comp.state_ids, kappa * comp.log_init,
                        kappa * comp.log_trans, kappa * comp.log_final,
                        feats[t1:t2], kappa=kappa,
                    )
                except AlignmentError:
                    continue
                span_score[(w, t1, t2)] = s
    nodes = [LatNode(0, 0)]
    node_ids = {("start",): 0}
    arcs = []

    def node_for(key, t):
        if key not in node_ids:
            node_ids[key] = len(nodes)
            nodes.append(LatNode(len(nodes), t))
        return node_ids[key]

    end = node_for(("final",), T)
    for (w, t1, t2), s in sorted(span_score.items()):
        dst = node_for((t2, w), t2)
        if t1 == 0:
            arcs.append(
                LatArc(len(arcs), 0, dst, w, 0, s, lm.logprob(w, (SOS,)))
            )
        for prev in words:
            if (prev, t1) in {(k[0], k[2]) for k in span_score if k[2] == t1}:
                src = node_for((t1, prev), t1)
                arcs.append(
                    LatArc(len(arcs), src, dst, w, 0, s, lm.logprob(w, (prev,)))
                )
    for key, nid in list(node_ids.items()):
        if len(key) == 2 and key[0] == T:
            arcs.append(LatArc(len(arcs), nid, end, EOS, 0, 0.0, lm.logprob(EOS, (key[1],))))
    lat = Lattice(nodes, arcs, 1.0, 0.0, 0, end)
    from .decoder import _prune_unreachable

    return _prune_unreachable(lat)


def _lattice_denominator(models, feats, lexicon, lm, kappa, net, lat):
    """Denominator statistics from a word lattice.

    Acoustic arc scores are recomputed as scaled summed within-word passes;
    posteriors come from forward-backward over the lattice, and within-arc
    occupancies are accumulated scaled by the arc posterior.
    """
    if lat is None:
        cfg = DecoderConfig(word_penalty=0.0, lm_scale=1.0 / kappa, generate_lattice=True)
        lat = decode(feats, net, cfg).lattice
    times = {n.id: n.t for n in lat.nodes}
    order = lat.topo_order()
    out_arcs = {n.id: [] for n in lat.nodes}
    for arc in lat.arcs:
        out_arcs[arc.src].append(arc)

    # Recompute arc scores as summed passes and keep the per-arc pieces.
    arc_comp = {}
    arc_weight = {}
    comps = {}
    for arc in lat.arcs:
        if arc.word == EOS:
            arc_weight[arc.id] = arc.lm
            continue
        t1, t2 = times[arc.src], times[arc.dst]
        key = (arc.word, arc.variant)
        if key not in comps:
            comps[key] = build_transcript_composite(
                models, [arc.word], lexicon, cross_word=False
            )
        comp = comps[key]
        try:
            score = _graph_forward(
                models, comp.state_ids, kappa * comp.log_init, kappa * comp.log_trans,
                kappa * comp.log_final, feats[t1:t2], kappa=kappa,
            )
        except AlignmentError:
            score = LOG_ZERO
        arc_comp[arc.id] = (comp, t1, t2)
        arc_weight[arc.id] = score + arc.lm

    fwd = {n.id: LOG_ZERO for n in lat.nodes}
    fwd[lat.start] = 0.0
    for nid in order:
        for arc in out_arcs[nid]:
            fwd[arc.dst] = np.logaddexp(fwd[arc.dst], fwd[nid] + arc_weight[arc.id])
    bwd = {n.id: LOG_ZERO for n in lat.nodes}
    bwd[lat.end] = 0.0
    for nid in reversed(order):
        for arc in out_arcs[nid]:
            bwd[nid] = np.logaddexp(bwd[nid], arc_weight[arc.id] + bwd[arc.dst])
    total = fwd[lat.end]
    if not np.isfinite(total):
        raise AlignmentError("lattice carries no probability mass")

    den = Accumulators()
    den.total_log_likelihood = float(total)
    den.n_frames = feats.shape[0]
    den.n_utterances = 1
    for arc in lat.arcs:
        if arc.id not in arc_comp:
            continue
        posterior = math.exp(fwd[arc.src] + arc_weight[arc.id] + bwd[arc.dst] - total)
        if posterior <= 1e-12:
            continue
        comp, t1, t2 = arc_comp[arc.id]
        acc, _, _, _, _ = _graph_forward_backward(
            models, comp.state_ids, kappa * comp.log_init, kappa * comp.log_trans,
            kappa * comp.log_final, feats[t1:t2], kappa=kappa,
        )
        for sid in acc.comp_occ:
            den._ensure_state(sid, *acc.comp_sum[sid].shape)
            den.state_occ[sid] += posterior * acc.state_occ[sid]
            den.comp_occ[sid] += posterior * acc.comp_occ[sid]
            den.comp_sum[sid] += posterior * acc.comp_sum[sid]
            den.comp_sumsq[sid] += posterior * acc.comp_sumsq[sid]
    return den, float(total)


# ---------------------------------------------------------------------------
# Extended Baum-Welch update


def _min_damping(g, x, s, mean, var, floor):
    """Smallest damping constant keeping every updated variance above floor."""
    worst = 0.0
    for d in range(len(mean)):
        a = var[d] - floor
        b = s[d] + (var[d] + mean[d] ** 2) * g - 2.0 * x[d] * mean[d] - 2.0 * floor * g
        c = s[d] * g - x[d] ** 2 - floor * g * g
        if a <= 0.0:
            a = 1e-12
        disc = b * b - 4.0 * a * c
        if disc <= 0.0:
            continue  # positive for every damping value
        root = (-b + math.sqrt(disc)) / (2.0 * a)
        worst = max(worst, root)
    return worst


def ebw_update(stats, models, cfg=None):
    """Extended Baum-Welch re-estimation of means, variances and weights.

    Means and variances use numerator-minus-denominator moments damped per
    Gaussian; the damping constant is the larger of E times the denominator
    occupancy and twice the smallest value keeping variances positive.
    Weights use the damped count rule with a shared positivity constant.
    Returns (updated models, list of frozen (state, component) pairs).
    """
    if cfg is None:
        cfg = EbwConfig()
    floor = cfg.var_floor_scale * global_variance(stats.num)
    new = models.clone()
    frozen = []
    for sid, mix in enumerate(new.states):
        if sid not in stats.num.comp_occ and sid not in stats.den.comp_occ:
            continue
        M = mix.n_components
        dim = mix.dim
        gn = stats.num.comp_occ.get(sid, np.zeros(M))
        gd = stats.den.comp_occ.get(sid, np.zeros(M))
        xn = stats.num.comp_sum.get(sid, np.zeros((M, dim)))
        xd = stats.den.comp_sum.get(sid, np.zeros((M, dim)))
        sn = stats.num.comp_sumsq.get(sid, np.zeros((M, dim)))
        sd = stats.den.comp_sumsq.get(sid, np.zeros((M, dim)))
        comps = []
        for m, comp in enumerate(mix.components):
            g = gn[m] - gd[m]
            x = xn[m] - xd[m]
            s = sn[m] - sd[m]
            if gn[m] < 1e-8 and gd[m] < 1e-8:
                comps.append(comp)
                continue
            floor_vec = np.minimum(floor, comp.var * 0.5)
            d_min = _min_damping(g, x, s, comp.mean, comp.var, float(floor_vec.max()))
            damping = max(cfg.e_const * gd[m], 2.0 * d_min)
            denom = g + damping
            if denom <= 1e-8:
                frozen.append((sid, m))
                comps.append(comp)
                continue
            mean = (x + damping * comp.mean) / denom
            var = (s + damping * (comp.var + comp.mean**2)) / denom - mean**2
            if np.any(var <= 0.0):
                d2 = 2.0 * damping
                mean2 = (x + d2 * comp.mean) / (g + d2)
                var2 = (s + d2 * (comp.var + comp.mean**2)) / (g + d2) - mean2**2
                if np.any(var2 <= 0.0):
                    frozen.append((sid, m))
                    comps.append(comp)
                    continue
                mean, var = mean2, var2
            comps.append(DiagGaussian(mean, np.maximum(var, floor_vec)))
        # Weight update with a shared positivity constant.
        weights = np.asarray(mix.weights)
        deficit = (gd - gn) / np.maximum(weights, 1e-10)
        c_const = max(cfg.e_const, 2.0 * float(deficit.max()), 1.0)
        raw = gn - gd + c_const * weights
        raw = np.maximum(raw, 1e-10)
        new.states[sid] = GaussianMixture(raw / raw.sum(), comps)
    return new, frozen


def mmi_train(models, corpus, lexicon, lm, n_iters=10, kappa=DEFAULT_KAPPA,
              cfg=None, lattice_mode=False, cross_word=False):
    """Iterate statistics accumulation and extended Baum-Welch updates.

    Returns (final models, objective value per iteration measured before
    each update).
    """
    trajectory = []
    current = models
    for _ in range(n_iters):
        net = denominator_network(lexicon, current, lm, cross_word)
        stats = accumulate_mmi_stats(
            current, corpus, lexicon, lm, kappa=kappa,
            lattice_mode=lattice_mode, cross_word=cross_word, net=net,
        )
        trajectory.append(stats.objective)
        current, _ = ebw_update(stats, current, cfg)
    return current, trajectory

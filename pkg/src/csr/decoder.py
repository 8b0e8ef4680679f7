"""Recognition network compilation and time-synchronous Viterbi decoding.

The network places every vocabulary word (all pronunciation variants) in
parallel inside a loop.  Inter-word arcs carry raw bigram log probabilities
(scaled at decode time); the backoff structure is folded in with one
backoff junction per boundary-context pair, and cross-word triphone
contexts are handled by instantiating word-edge phones once per possible
neighbouring phone.  Decoding is token passing with one token per network
node per frame, per-frame beam pruning, and word-link records that
assemble into a word lattice.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .acoustic import build_transcript_composite, viterbi_align
from .errors import AlignmentError, DataFormatError, NumericError
from .langmodel import EOS, SOS
from .phonology import BOUNDARY, make_label
from .textio import atomic_write_text, fmt9

NEG_INF = -math.inf


@dataclass
class DecoderConfig:
    beam: float = math.inf
    max_active: int = 0          # 0 disables the cap
    word_penalty: float = -10.0  # log-domain insertion penalty per word
    lm_scale: float = 12.0
    generate_lattice: bool = False
    word_end_beam: float = math.inf

    def __post_init__(self):
        if not self.beam > 0.0:
            raise DataFormatError("beam must be positive (or infinite)")
        if not self.lm_scale > 0.0:
            raise DataFormatError("lm_scale must be positive")
        if not self.word_end_beam > 0.0:
            raise DataFormatError("word_end_beam must be positive (or infinite)")


class _Eps:
    """Non-emitting junction node."""

    __slots__ = ("kind", "word", "variant", "context", "index")

    def __init__(self, kind, word=None, variant=None, context=None):
        self.kind = kind  # start | end | bo | begin | final
        self.word = word
        self.variant = variant
        self.context = context
        self.index = None


class RecognitionNetwork:
    """Compiled decoding graph of HMM-state nodes and junction nodes."""

    def __init__(self, lexicon, models, lm, cross_word, exact_lm):
        self.lexicon = lexicon
        self.models = models
        self.lm = lm
        self.cross_word = cross_word
        self.exact_lm = exact_lm
        self.words = sorted(lexicon.words)
        self.word_id = {w: i for i, w in enumerate(self.words)}
        self.emit_state_ids = []
        self.emit_arcs = []    # per emitting node: [(src emitting, weight)]
        self.entry_arcs = []   # per emitting node: [(eps index, weight)]
        self.eps = []
        self.end_arcs = []     # per eps index: [(src emitting, exit weight)]
        self.eps_arcs = []     # per eps index: [(dst eps, lm_raw, penalised)]
        self.start_index = None
        self.final_index = None

    @property
    def n_emitting(self):
        return len(self.emit_state_ids)

    def _new_emit(self, state_id):
        self.emit_state_ids.append(state_id)
        self.emit_arcs.append([])
        self.entry_arcs.append([])
        return len(self.emit_state_ids) - 1

    def pair_lm(self, prev_word, word):
        """Conditional word log probability as the network's arcs encode it."""
        return self.lm.logprob(word, (prev_word,))

    def end_lm(self, prev_word):
        return self.lm.logprob(EOS, (prev_word,))


def _phone_chain(net, models, labels, entry_extra=0.0):
    """Instantiate a chain of phone HMMs; returns (entry arcs, exit arcs)."""
    entries = None
    exits = None
    for label in labels:
        _, state_ids, trans = models.resolve(label)
        n_emit = len(state_ids)
        nodes = [net._new_emit(s) for s in state_ids]
        with np.errstate(divide="ignore"):
            log_a = np.log(trans)
        this_entry = [
            (nodes[j], float(log_a[0, j + 1]))
            for j in range(n_emit)
            if trans[0, j + 1] > 0.0
        ]
        this_exit = [
            (nodes[i], float(log_a[i + 1, n_emit + 1]))
            for i in range(n_emit)
            if trans[i + 1, n_emit + 1] > 0.0
        ]
        for i in range(n_emit):
            for j in range(n_emit):
                if trans[i + 1, j + 1] > 0.0:
                    net.emit_arcs[nodes[j]].append((nodes[i], float(log_a[i + 1, j + 1])))
        if entries is None:
            entries = [(n, w + entry_extra) for n, w in this_entry]
        else:
            for src, w_exit in exits:
                for dst, w_entry in this_entry:
                    net.emit_arcs[dst].append((src, w_exit + w_entry))
        exits = this_exit
    return entries, exits


def compile_network(lexicon, models, lm, cross_word=False, exact_lm=False):
    """Build the parallel word-loop recognition network.

    ``exact_lm`` gives every word pair a direct arc with the exact
    conditional probability instead of folding the backoff structure into
    junctions; this is required for language models without a stored
    backoff table (class or interpolated models) and for summed-probability
    passes in discriminative training.
    """
    if not lexicon.words:
        raise DataFormatError("empty lexicon")
    stored = getattr(lm, "stored_logprob", None)
    backoff = getattr(lm, "backoff_logweight", None)
    use_backoff = not exact_lm and stored is not None and backoff is not None

    net = RecognitionNetwork(lexicon, models, lm, cross_word, exact_lm)
    prons = {w: lexicon.pronunciations(w) for w in net.words}
    if cross_word:
        lefts = sorted({seq[-1] for w in net.words for seq, _ in prons[w]} | {BOUNDARY})
        rights = sorted({seq[0] for w in net.words for seq, _ in prons[w]} | {BOUNDARY})
    else:
        lefts = [BOUNDARY]
        rights = [BOUNDARY]

    # Junction nodes, in their processing order: start, word ends, backoff
    # junctions, word begins, final.  Within a band the order is fixed by
    # word id, variant and context so that decoding is deterministic.
    start = _Eps("start")
    final = _Eps("final")
    end_nodes = {}
    begin_nodes = {}
    bo_nodes = {}
    for w in net.words:
        for v in range(len(prons[w])):
            for r in rights:
                end_nodes[(w, v, r)] = _Eps("end", w, v, (r,))
            for l in lefts:
                begin_nodes[(w, v, l)] = _Eps("begin", w, v, (l,))
    if use_backoff:
        for l in lefts:
            for r in rights:
                bo_nodes[(l, r)] = _Eps("bo", context=(l, r))

    ordered = [start]
    ordered += [end_nodes[k] for k in sorted(end_nodes, key=lambda k: (net.word_id[k[0]], k[1], k[2]))]
    ordered += [bo_nodes[k] for k in sorted(bo_nodes)]
    ordered += [begin_nodes[k] for k in sorted(begin_nodes, key=lambda k: (net.word_id[k[0]], k[1], k[2]))]
    ordered.append(final)
    for i, node in enumerate(ordered):
        node.index = i
    net.eps = ordered
    net.end_arcs = [[] for _ in ordered]
    net.eps_arcs = [[] for _ in ordered]
    net.start_index = start.index
    net.final_index = final.index

    edge_info = {}
    for w in net.words:
        for v, (seq, prob) in enumerate(prons[w]):
            edge_info[(w, v)] = (seq[0], seq[-1])
            prior = math.log(prob)
            if len(seq) == 1:
                for l in lefts:
                    begin = begin_nodes[(w, v, l)]
                    for r in rights:
                        entries, exits = _phone_chain(
                            net, models, [make_label(l, seq[0], r)], prior
                        )
                        for node, w_entry in entries:
                            net.entry_arcs[node].append((begin.index, w_entry))
                        end = end_nodes[(w, v, r)]
                        for node, w_exit in exits:
                            net.end_arcs[end.index].append((node, w_exit))
            else:
                interior = [
                    make_label(seq[i - 1], seq[i], seq[i + 1])
                    for i in range(1, len(seq) - 1)
                ]
                last_instances = {}
                for r in rights:
                    last_entries, last_exits = _phone_chain(
                        net, models, [make_label(seq[-2], seq[-1], r)]
                    )
                    last_instances[r] = last_entries
                    end = end_nodes[(w, v, r)]
                    for node, w_exit in last_exits:
                        net.end_arcs[end.index].append((node, w_exit))
                for l in lefts:
                    begin = begin_nodes[(w, v, l)]
                    entries, exits = _phone_chain(
                        net, models, [make_label(l, seq[0], seq[1])] + interior, prior
                    )
                    for node, w_entry in entries:
                        net.entry_arcs[node].append((begin.index, w_entry))
                    for r in rights:
                        for src, w_exit in exits:
                            for dst, w_entry in last_instances[r]:
                                net.emit_arcs[dst].append((src, w_exit + w_entry))

    def add_eps(src, dst, lm_raw, penalised):
        net.eps_arcs[src.index].append((dst.index, lm_raw, penalised))

    # Language model arcs out of the sentence start and every word end.
    sources = [(None, None, start, BOUNDARY, set(rights))]
    for (w, v, r), node in sorted(
        end_nodes.items(), key=lambda kv: (net.word_id[kv[0][0]], kv[0][1], kv[0][2])
    ):
        l_out = edge_info[(w, v)][1] if cross_word else BOUNDARY
        sources.append((w, v, node, l_out, {r}))

    for w_src, v_src, src_node, l_out, allowed_r in sources:
        hist = (SOS,) if w_src is None else (w_src,)
        for u in net.words:
            for vu in range(len(prons[u])):
                r_needed = edge_info[(u, vu)][0] if cross_word else BOUNDARY
                if r_needed not in allowed_r:
                    continue
                begin = begin_nodes[(u, vu, l_out)]
                if use_backoff:
                    lp = stored(u, hist)
                    if lp is not None:
                        add_eps(src_node, begin, lp, True)
                else:
                    add_eps(src_node, begin, lm.logprob(u, hist), True)
        if w_src is not None and BOUNDARY in allowed_r:
            if use_backoff:
                lp = stored(EOS, hist)
                if lp is not None:
                    add_eps(src_node, final, lp, False)
            else:
                add_eps(src_node, final, lm.logprob(EOS, hist), False)
        if use_backoff:
            bow = backoff(hist)
            for r in sorted(allowed_r):
                add_eps(src_node, bo_nodes[(l_out, r)], bow, False)

    if use_backoff:
        uni = {u: stored(u, ()) for u in net.words}
        uni_end = stored(EOS, ())
        for (l, r), node in sorted(bo_nodes.items()):
            for u in net.words:
                for vu in range(len(prons[u])):
                    r_needed = edge_info[(u, vu)][0] if cross_word else BOUNDARY
                    if r_needed != r or uni[u] is None:
                        continue
                    add_eps(node, begin_nodes[(u, vu, l)], uni[u], True)
            if r == BOUNDARY and uni_end is not None:
                add_eps(node, final, uni_end, False)
    return net


# ---------------------------------------------------------------------------
# Lattices


@dataclass
class LatNode:
    id: int
    t: int


@dataclass
class LatArc:
    id: int
    src: int
    dst: int
    word: str
    variant: int
    ac: float
    lm: float


@dataclass
class Lattice:
    """Acyclic word-hypothesis graph with separate acoustic and LM scores."""

    nodes: list
    arcs: list
    lm_scale: float
    word_penalty: float
    start: int
    end: int

    def topo_order(self):
        """Node ids in topological order; raises if the graph has a cycle."""
        indeg = {n.id: 0 for n in self.nodes}
        out = {n.id: [] for n in self.nodes}
        for arc in self.arcs:
            indeg[arc.dst] += 1
            out[arc.src].append(arc.dst)
        frontier = sorted(i for i, d in indeg.items() if d == 0)
        order = []
        while frontier:
            n = frontier.pop(0)
            order.append(n)
            for m in sorted(out[n]):
                indeg[m] -= 1
                if indeg[m] == 0:
                    frontier.append(m)
        if len(order) != len(self.nodes):
            raise DataFormatError("lattice contains a cycle")
        return order

    def arcs_from(self):
        out = {n.id: [] for n in self.nodes}
        for arc in self.arcs:
            out[arc.src].append(arc)
        return out

    def combined(self, arc, lm_scale=None, word_penalty=None):
        scale = self.lm_scale if lm_scale is None else lm_scale
        pen = self.word_penalty if word_penalty is None else word_penalty
        res = arc.ac + scale * arc.lm
        if arc.word != EOS:
            res += pen
        return res

    def best_path(self, lm_scale=None, word_penalty=None):
        """Highest-scoring path; returns (words, score, arcs on the path)."""
        order = self.topo_order()
        score = {n.id: NEG_INF for n in self.nodes}
        back = {n.id: None for n in self.nodes}
        score[self.start] = 0.0
        out = self.arcs_from()
        for nid in order:
            if score[nid] == NEG_INF:
                continue
            for arc in sorted(out[nid], key=lambda a: a.id):
                cand = score[nid] + self.combined(arc, lm_scale, word_penalty)
                if cand > score[arc.dst]:
                    score[arc.dst] = cand
                    back[arc.dst] = arc
        if score[self.end] == NEG_INF:
            raise NumericError("lattice has no complete path")
        arcs = []
        node = self.end
        while back[node] is not None:
            arcs.append(back[node])
            node = back[node].src
        arcs.reverse()
        words = [a.word for a in arcs if a.word != EOS]
        return words, score[self.end], arcs


def write_lattice(path, lat):
    lines = [
        f"NLAT {len(lat.nodes)} {len(lat.arcs)} {fmt9(lat.lm_scale)} {fmt9(lat.word_penalty)}"
    ]
    for node in sorted(lat.nodes, key=lambda n: n.id):
        lines.append(f"N {node.id} t={node.t}")
    for arc in sorted(lat.arcs, key=lambda a: a.id):
        lines.append(
            f"A {arc.id} S={arc.src} E={arc.dst} W={arc.word} v={arc.variant} "
            f"a={fmt9(arc.ac)} l={fmt9(arc.lm)}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_lattice(path):
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 5 or header[0] != "NLAT":
            raise DataFormatError(f"{path}: bad lattice header")
        n_nodes, n_arcs = int(header[1]), int(header[2])
        lm_scale, penalty = float(header[3]), float(header[4])
        nodes = []
        arcs = []
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "N":
                fields = dict(p.split("=", 1) for p in parts[2:])
                nodes.append(LatNode(int(parts[1]), int(fields["t"])))
            elif parts[0] == "A":
                fields = dict(p.split("=", 1) for p in parts[2:])
                arcs.append(
                    LatArc(
                        int(parts[1]),
                        int(fields["S"]),
                        int(fields["E"]),
                        fields["W"],
                        int(fields["v"]),
                        float(fields["a"]),
                        float(fields["l"]),
                    )
                )
    if len(nodes) != n_nodes or len(arcs) != n_arcs:
        raise DataFormatError(f"{path}: lattice body disagrees with header")
    ids = {n.id for n in nodes}
    starts = ids - {a.dst for a in arcs}
    ends = ids - {a.src for a in arcs}
    if len(starts) != 1 or len(ends) != 1:
        raise DataFormatError(f"{path}: lattice must have one start and one end node")
    return Lattice(nodes, arcs, lm_scale, penalty, starts.pop(), ends.pop())


# ---------------------------------------------------------------------------
# Decoding


class _Wlr:
    """Word-link record: one word hypothesis ending at a frame boundary."""

    __slots__ = ("word", "variant", "t_start", "t_end", "ac", "lm", "prev", "score")

    def __init__(self, word, variant, t_start, t_end, ac, lm, prev, score):
        self.word = word
        self.variant = variant
        self.t_start = t_start
        self.t_end = t_end
        self.ac = ac
        self.lm = lm
        self.prev = prev
        self.score = score


@dataclass
class DecodeResult:
    words: list
    score: float
    lattice: object
    word_details: list  # (word, variant, start frame, end frame, ac, lm)


def _eps_pass(net, cfg, emit_scores, emit_info, boundary, first, wlr_sink):
    """Propagate through the junction graph at one frame boundary."""
    n_eps = len(net.eps)
    scores = [NEG_INF] * n_eps
    info = [None] * n_eps
    if first:
        scores[net.start_index] = 0.0
        info[net.start_index] = (None, 0.0)

    # Word exits from emitting nodes, then word-link records.
    best_end = NEG_INF
    for e in range(n_eps):
        arcs = net.end_arcs[e]
        if not arcs:
            continue
        for src, w_exit in arcs:
            if emit_scores[src] == NEG_INF:
                continue
            cand = emit_scores[src] + w_exit
            if cand > scores[e]:
                scores[e] = cand
                info[e] = emit_info[src]
        if scores[e] > best_end:
            best_end = scores[e]
    threshold = best_end - cfg.word_end_beam
    for e in range(n_eps):
        node = net.eps[e]
        if node.kind != "end" or scores[e] == NEG_INF:
            continue
        if scores[e] < threshold:
            scores[e] = NEG_INF
            info[e] = None
            continue
        entry_t, entry_score, lm_raw, wlr = info[e]
        new = _Wlr(
            node.word, node.variant, entry_t, boundary,
            scores[e] - entry_score, lm_raw, wlr, scores[e],
        )
        wlr_sink.append(new)
        info[e] = (new, 0.0)

    # Remaining junction arcs in topological (index) order.
    for e in range(n_eps):
        if scores[e] == NEG_INF:
            continue
        wlr, lm_accum = info[e]
        for dst, lm_raw, penalised in net.eps_arcs[e]:
            w = cfg.lm_scale * lm_raw + (cfg.word_penalty if penalised else 0.0)
            cand = scores[e] + w
            if cand > scores[dst]:
                scores[dst] = cand
                info[dst] = (wlr, lm_accum + lm_raw)
    return scores, info


def decode(Y, net, cfg=None):
    """Time-synchronous beam decode of one utterance.

    Returns the best word sequence with its combined log score and, when
    requested, a word lattice.  Raises if every token is pruned.
    """
    if cfg is None:
        cfg = DecoderConfig()
    feats = Y.frames if hasattr(Y, "frames") else np.asarray(Y, dtype=np.float64)
    T = feats.shape[0]
    B = net.models.emission_log_probs(feats, net.emit_state_ids)
    n = net.n_emitting

    wlrs = []
    emit_scores = [NEG_INF] * n
    emit_info = [None] * n
    eps_scores, eps_info = _eps_pass(net, cfg, emit_scores, emit_info, 0, True, wlrs)

    for t in range(T):
        new_scores = [NEG_INF] * n
        new_info = [None] * n
        for j in range(n):
            best = NEG_INF
            best_info = None
            for src, w in net.emit_arcs[j]:
                s = emit_scores[src]
                if s == NEG_INF:
                    continue
                cand = s + w
                if cand > best:
                    best = cand
                    best_info = emit_info[src]
            for eps_idx, w in net.entry_arcs[j]:
                s = eps_scores[eps_idx]
                if s == NEG_INF:
                    continue
                cand = s + w
                if cand > best:
                    best = cand
                    wlr, lm_accum = eps_info[eps_idx]
                    best_info = (t, s, lm_accum, wlr)
            if best > NEG_INF:
                new_scores[j] = best + B[t, j]
                new_info[j] = best_info
        frame_best = max(new_scores)
        if frame_best == NEG_INF:
            raise AlignmentError(f"no active hypothesis at frame {t}")
        threshold = frame_best - cfg.beam
        for j in range(n):
            if new_scores[j] < threshold:
                new_scores[j] = NEG_INF
                new_info[j] = None
        if cfg.max_active and n > cfg.max_active:
            alive = sorted(
                (j for j in range(n) if new_scores[j] > NEG_INF),
                key=lambda j: (-new_scores[j], j),
            )
            for j in alive[cfg.max_active:]:
                new_scores[j] = NEG_INF
                new_info[j] = None
        emit_scores, emit_info = new_scores, new_info
        eps_scores, eps_info = _eps_pass(net, cfg, emit_scores, emit_info, t + 1, False, wlrs)

    final_score = eps_scores[net.final_index]
    if final_score == NEG_INF:
        raise AlignmentError("no complete hypothesis survived the beam")
    final_wlr, final_lm = eps_info[net.final_index]
    sentinel = _Wlr(EOS, 0, T, T, 0.0, final_lm, final_wlr, final_score)
    wlrs.append(sentinel)

    chain = []
    node = sentinel
    while node is not None:
        chain.append(node)
        node = node.prev
    chain.reverse()
    words = [r.word for r in chain if r.word != EOS]
    details = [
        (r.word, r.variant, r.t_start, r.t_end, r.ac, r.lm)
        for r in chain
        if r.word != EOS
    ]

    lattice = None
    if cfg.generate_lattice:
        lattice = _assemble_lattice(net, cfg, wlrs, sentinel, T)
    return DecodeResult(words, final_score, lattice, details)


def _assemble_lattice(net, cfg, wlrs, sentinel, T):
    node_ids = {}
    nodes = []

    def node_for(key, t):
        if key not in node_ids:
            node_ids[key] = len(nodes)
            nodes.append(LatNode(len(nodes), t))
        return node_ids[key]

    start = node_for(("start",), 0)
    end = node_for(("final",), T)
    best_arc = {}
    for r in wlrs:
        if r.word == EOS:
            continue
        if r.prev is None:
            src = start
        else:
            src = node_for((r.prev.t_end, r.prev.word), r.prev.t_end)
        dst = node_for((r.t_end, r.word), r.t_end)
        key = (src, dst, r.word, r.variant)
        combined = r.ac + cfg.lm_scale * r.lm
        if key not in best_arc or combined > best_arc[key][0]:
            best_arc[key] = (combined, r.ac, r.lm)
    arcs = []
    for (src, dst, word, variant), (_, ac, lm) in sorted(best_arc.items()):
        arcs.append(LatArc(len(arcs), src, dst, word, variant, ac, lm))
    # Sentence-end arcs from every word node at the last boundary.
    for key, nid in sorted(node_ids.items(), key=lambda kv: kv[1]):
        if len(key) == 2 and key[0] == T:
            arcs.append(LatArc(len(arcs), nid, end, EOS, 0, 0.0, net.end_lm(key[1])))

    lat = Lattice(nodes, arcs, cfg.lm_scale, cfg.word_penalty, start, end)
    return _prune_unreachable(lat)


def _prune_unreachable(lat):
    fwd = {lat.start}
    changed = True
    arcs = lat.arcs
    while changed:
        changed = False
        for a in arcs:
            if a.src in fwd and a.dst not in fwd:
                fwd.add(a.dst)
                changed = True
    bwd = {lat.end}
    changed = True
    while changed:
        changed = False
        for a in arcs:
            if a.dst in bwd and a.src not in bwd:
                bwd.add(a.src)
                changed = True
    keep = fwd & bwd
    if lat.start not in keep or lat.end not in keep:
        raise NumericError("lattice start and end are not connected")
    node_map = {}
    nodes = []
    for n in sorted(lat.nodes, key=lambda n: n.id):
        if n.id in keep:
            node_map[n.id] = len(nodes)
            nodes.append(LatNode(len(nodes), n.t))
    new_arcs = []
    for a in sorted(arcs, key=lambda a: a.id):
        if a.src in keep and a.dst in keep:
            new_arcs.append(
                LatArc(len(new_arcs), node_map[a.src], node_map[a.dst],
                       a.word, a.variant, a.ac, a.lm)
            )
    return Lattice(nodes, new_arcs, lat.lm_scale, lat.word_penalty,
                   node_map[lat.start], node_map[lat.end])


# ---------------------------------------------------------------------------
# Forced alignment


@dataclass
class AlignResult:
    words: list
    variants: tuple
    segments: list  # (label, word index, start frame, end frame exclusive)
    state_path: np.ndarray
    log_likelihood: float


def force_align(Y, words, lexicon, models, cross_word=False):
    """Viterbi alignment of an utterance against a fixed transcript.

    Pronunciation variants compete in parallel; the winning variant per
    word, per-phone time boundaries and the path log likelihood come back.
    """
    comp = build_transcript_composite(models, list(words), lexicon, cross_word=cross_word)
    path, score = viterbi_align(models, comp, Y)
    chain = comp.instances[comp.state_instance[path[0]]]["chain"]
    expansion = comp.expansions[chain]
    segments = []
    seg_start = 0
    for t in range(1, len(path) + 1):
        if t == len(path) or comp.state_instance[path[t]] != comp.state_instance[path[t - 1]]:
            inst = comp.instances[comp.state_instance[path[t - 1]]]
            segments.append((inst["label"], inst["meta"], seg_start, t))
            seg_start = t
    return AlignResult(list(words), expansion.variants, segments, path, score)


# ---------------------------------------------------------------------------
# Lattice rescoring


def rescore_lattice(lat, lm, cfg=None):
    """Re-apply a (possibly higher-order) language model to a lattice.

    Histories are expanded so every arc sees its previous order-1 words:
    nodes are split per distinct word history, arcs re-scored, and the best
    path under the new combined score returned along with the new lattice.
    """
    if cfg is None:
        cfg = DecoderConfig(lm_scale=lat.lm_scale, word_penalty=lat.word_penalty)
    order = getattr(lm, "order", 2)
    hist_len = max(order - 1, 1)
    lat.topo_order()  # validates acyclicity

    out = lat.arcs_from()
    times = {n.id: n.t for n in lat.nodes}

    new_nodes = []
    new_arcs = []
    node_ids = {}

    def node_for(key, t):
        if key not in node_ids:
            node_ids[key] = len(new_nodes)
            new_nodes.append(LatNode(len(new_nodes), t))
        return node_ids[key]

    start_key = (lat.start, (SOS,))
    start = node_for(start_key, times[lat.start])
    end = node_for(("final",), times[lat.end])

    frontier = [start_key]
    seen = {start_key}
    while frontier:
        key = frontier.pop()
        old_id, ctx = key
        src = node_for(key, times[old_id])
        for arc in sorted(out[old_id], key=lambda a: a.id):
            new_lm = lm.logprob(arc.word if arc.word != EOS else EOS, ctx)
            if arc.word == EOS:
                new_arcs.append(
                    LatArc(len(new_arcs), src, end, EOS, arc.variant, arc.ac, new_lm)
                )
                continue
            new_ctx = (ctx + (arc.word,))[-hist_len:]
            dst_key = (arc.dst, new_ctx)
            dst = node_for(dst_key, times[arc.dst])
            new_arcs.append(
                LatArc(len(new_arcs), src, dst, arc.word, arc.variant, arc.ac, new_lm)
            )
            if dst_key not in seen:
                seen.add(dst_key)
                frontier.append(dst_key)

    new_lat = Lattice(new_nodes, new_arcs, cfg.lm_scale, cfg.word_penalty, start, end)
    new_lat = _prune_unreachable(new_lat)
    words, score, _ = new_lat.best_path()
    return words, score, new_lat

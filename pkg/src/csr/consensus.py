"""Lattice posteriors, confusion networks and system combination.

Arc posteriors come from a forward-backward pass over the lattice with
down-scaled acoustic scores.  Arcs are then clustered into a linear chain
of confusion sets (same-word overlap first, then inter-word time-overlap
similarity), the minimum word error hypothesis picks the top alternative
per set, and multiple systems combine by aligning and merging their
confusion networks.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, NumericError
from .langmodel import EOS
from .textio import atomic_write_text, fmt9

NULL = "<null>"
DEFAULT_ACOUSTIC_SCALE = 1.0 / 12.0


@dataclass
class ArcPosteriors:
    posteriors: dict       # arc id -> probability
    acoustic_scale: float
    lm_scale: float
    total_log: float


def lattice_posteriors(lat, acoustic_scale=DEFAULT_ACOUSTIC_SCALE, lm_scale=1.0):
    """Arc posteriors by forward-backward with combined score k*ac + lm."""
    if acoustic_scale <= 0.0 or lm_scale <= 0.0:
        raise DataFormatError("posterior scales must be positive")
    order = lat.topo_order()
    in_arcs = {n.id: [] for n in lat.nodes}
    out_arcs = {n.id: [] for n in lat.nodes}
    for arc in lat.arcs:
        in_arcs[arc.dst].append(arc)
        out_arcs[arc.src].append(arc)

    def weight(arc):
        return acoustic_scale * arc.ac + lm_scale * arc.lm

    fwd = {n.id: -math.inf for n in lat.nodes}
    fwd[lat.start] = 0.0
    for nid in order:
        for arc in out_arcs[nid]:
            cand = fwd[nid] + weight(arc)
            fwd[arc.dst] = np.logaddexp(fwd[arc.dst], cand)
    bwd = {n.id: -math.inf for n in lat.nodes}
    bwd[lat.end] = 0.0
    for nid in reversed(order):
        for arc in out_arcs[nid]:
            bwd[nid] = np.logaddexp(bwd[nid], weight(arc) + bwd[arc.dst])
    total = fwd[lat.end]
    if not math.isfinite(total):
        raise NumericError("disconnected lattice: no complete path")
    posteriors = {}
    for arc in lat.arcs:
        p = math.exp(fwd[arc.src] + weight(arc) + bwd[arc.dst] - total)
        if not math.isfinite(fwd[arc.src]) or not math.isfinite(bwd[arc.dst]):
            p = 0.0
        posteriors[arc.id] = p
    return ArcPosteriors(posteriors, acoustic_scale, lm_scale, float(total))


@dataclass
class ConfusionNetwork:
    """Ordered confusion sets; each set maps alternatives to posteriors."""

    sets: list  # list of dict word -> posterior (may include NULL)

    def __post_init__(self):
        for k, s in enumerate(self.sets):
            total = sum(s.values())
            if abs(total - 1.0) > 1e-9:
                raise DataFormatError(f"confusion set {k} sums to {total}")
            if any(p < -1e-12 for p in s.values()):
                raise DataFormatError(f"confusion set {k} has negative posteriors")


def _normalise(counts):
    total = sum(counts.values())
    if total <= 0.0:
        raise NumericError("empty confusion set")
    return {w: p / total for w, p in sorted(counts.items())}


class _Cluster:
    __slots__ = ("arcs", "index")

    def __init__(self, index, arcs):
        self.index = index
        self.arcs = arcs


def build_confusion_network(lat, posteriors=None, acoustic_scale=DEFAULT_ACOUSTIC_SCALE,
                            lm_scale=1.0):
    """Linearise a lattice into posterior-normalised confusion sets.

    Two greedy agglomeration stages: first same-word arcs with positive
    time overlap, then unordered cluster pairs by overlap-weighted
    posterior similarity, until the clusters are totally ordered by the
    lattice's path precedence.  Paths that skip a set contribute the
    residual probability to its null alternative.
    """
    if posteriors is None:
        posteriors = lattice_posteriors(lat, acoustic_scale, lm_scale)
    times = {n.id: n.t for n in lat.nodes}
    arcs = [a for a in lat.arcs if a.word != EOS]
    if not arcs:
        raise DataFormatError("lattice has no word arcs")
    post = posteriors.posteriors

    # Node reachability (transitive), for the precedence relation.
    order = lat.topo_order()
    succ = {n.id: set() for n in lat.nodes}
    out_arcs = {n.id: [] for n in lat.nodes}
    for a in lat.arcs:
        out_arcs[a.src].append(a.dst)
    for nid in reversed(order):
        for m in out_arcs[nid]:
            succ[nid].add(m)
            succ[nid] |= succ[m]

    def arc_precedes(a, b):
        return a.dst == b.src or b.src in succ[a.dst]

    clusters = {i: _Cluster(i, [a]) for i, a in enumerate(arcs)}

    def precedes(c1, c2):
        return any(arc_precedes(a, b) for a in c1.arcs for b in c2.arcs)

    def overlap(a, b):
        start = max(times[a.src], times[b.src])
        end = min(times[a.dst], times[b.dst])
        return max(0, end - start)

    def mergeable(c1, c2):
        return not precedes(c1, c2) and not precedes(c2, c1)

    # Stage 1: same-word arcs with positive overlap.
    while True:
        best = None
        ids = sorted(clusters)
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                c1, c2 = clusters[ids[i]], clusters[ids[j]]
                if c1.arcs[0].word != c2.arcs[0].word:
                    continue
                ov = max(overlap(a, b) for a in c1.arcs for b in c2.arcs)
                if ov <= 0 or not mergeable(c1, c2):
                    continue
                key = (ov, -ids[i], -ids[j])
                if best is None or key > best[0]:
                    best = (key, ids[i], ids[j])
        if best is None:
            break
        _, i, j = best
        clusters[i].arcs.extend(clusters[j].arcs)
        del clusters[j]

    # Stage 2: merge unordered cluster pairs until a total order exists.
    def similarity(c1, c2):
        total = 0.0
        for a in c1.arcs:
            for b in c2.arcs:
                ov = overlap(a, b)
                if ov > 0:
                    shorter = min(times[a.dst] - times[a.src], times[b.dst] - times[b.src])
                    total += (ov / max(shorter, 1)) * post[a.id] * post[b.id]
        return total

    def midpoint(c):
        weights = [max(post[a.id], 1e-12) for a in c.arcs]
        mids = [(times[a.src] + times[a.dst]) / 2.0 for a in c.arcs]
        return sum(w * m for w, m in zip(weights, mids)) / sum(weights)

    while True:
        unordered = []
        ids = sorted(clusters)
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                c1, c2 = clusters[ids[i]], clusters[ids[j]]
                if mergeable(c1, c2):
                    unordered.append((ids[i], ids[j]))
        if not unordered:
            break
        best = None
        for i, j in unordered:
            sim = similarity(clusters[i], clusters[j])
            gap = abs(midpoint(clusters[i]) - midpoint(clusters[j]))
            key = (sim, -gap, -i, -j)
            if best is None or key > best[0]:
                best = (key, i, j)
        _, i, j = best
        clusters[i].arcs.extend(clusters[j].arcs)
        del clusters[j]

    ordered = sorted(
        clusters.values(),
        key=lambda c: (sum(1 for o in clusters.values() if o is not c and precedes(o, c)),
                       midpoint(c)),
    )

    sets = []
    for c in ordered:
        counts = {}
        for a in c.arcs:
            counts[a.word] = counts.get(a.word, 0.0) + post[a.id]
        total = sum(counts.values())
        if total < 1.0 - 1e-12:
            counts[NULL] = 1.0 - total
        sets.append(_normalise(counts))
    return ConfusionNetwork(sets)


def min_wer_hypothesis(cn):
    """Top alternative per confusion set; null wins ties against words.

    Returns (words, per-word posteriors).
    """
    words = []
    posteriors = []
    for s in cn.sets:
        null_p = s.get(NULL, 0.0)
        candidates = sorted(
            ((w, p) for w, p in s.items() if w != NULL),
            key=lambda item: (-item[1], item[0]),
        )
        if not candidates:
            continue
        word, p = candidates[0]
        if p > null_p:
            words.append(word)
            posteriors.append(p)
    return words, posteriors


def confidence_scores(cn, mapping=None):
    """Per-emitted-word confidences, optionally recalibrated.

    ``mapping`` is a monotone piecewise-linear table of (raw, mapped) knots.
    """
    words, posteriors = min_wer_hypothesis(cn)
    if mapping is None:
        return words, list(posteriors)
    xs = [float(x) for x, _ in mapping]
    ys = [float(y) for _, y in mapping]
    if len(xs) < 2 or any(b <= a for a, b in zip(xs, xs[1:])):
        raise DataFormatError("mapping knots must be strictly increasing in x")
    if any(b < a for a, b in zip(ys, ys[1:])):
        raise DataFormatError("mapping must be monotone non-decreasing")
    return words, [float(np.interp(p, xs, ys)) for p in posteriors]


def combine_systems(cns, weights):
    """Weighted combination of confusion networks by set alignment.

    Networks fold in one at a time: sets align by minimum cost
    (1 - posterior-weighted symbol overlap, null-padding allowed) and
    aligned sets add weight-scaled posteriors; everything renormalises at
    the end.
    """
    if len(cns) < 2:
        raise DataFormatError("need at least two confusion networks to combine")
    weights = [float(w) for w in weights]
    if len(weights) != len(cns) or any(w < 0.0 for w in weights):
        raise DataFormatError("need one non-negative weight per network")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise DataFormatError("combination weights must sum to 1")

    acc = [dict((w, p * weights[0]) for w, p in s.items()) for s in cns[0].sets]
    acc_weight = weights[0]
    for cn, wt in zip(cns[1:], weights[1:]):
        acc = _align_merge(acc, acc_weight, cn.sets, wt)
        acc_weight += wt
    return ConfusionNetwork([_normalise(s) for s in acc])


def _align_merge(acc, acc_weight, sets, wt):
    def norm(s, total):
        if total <= 0.0:
            return {}
        return {w: p / total for w, p in s.items()}

    a = [norm(s, acc_weight) for s in acc]
    b = list(sets)

    def cost(sa, sb):
        return 1.0 - sum(sa.get(sym, 0.0) * p for sym, p in sb.items())

    def gap_cost(s):
        return 1.0 - s.get(NULL, 0.0)

    n, m = len(a), len(b)
    dp = np.full((n + 1, m + 1), np.inf)
    move = np.zeros((n + 1, m + 1), dtype=np.int8)  # 1 diag, 2 up (gap b), 3 left (gap a)
    dp[0, 0] = 0.0
    for i in range(1, n + 1):
        dp[i, 0] = dp[i - 1, 0] + gap_cost(a[i - 1])
        move[i, 0] = 2
    for j in range(1, m + 1):
        dp[0, j] = dp[0, j - 1] + gap_cost(b[j - 1])
        move[0, j] = 3
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            options = (
                (dp[i - 1, j - 1] + cost(a[i - 1], b[j - 1]), 1),
                (dp[i - 1, j] + gap_cost(a[i - 1]), 2),
                (dp[i, j - 1] + gap_cost(b[j - 1]), 3),
            )
            dp[i, j], move[i, j] = min(options, key=lambda o: (o[0], o[1]))
    # Traceback.
    pairs = []
    i, j = n, m
    while i > 0 or j > 0:
        mv = move[i, j]
        if mv == 1:
            pairs.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif mv == 2:
            pairs.append((i - 1, None))
            i -= 1
        else:
            pairs.append((None, j - 1))
            j -= 1
    pairs.reverse()

    merged = []
    for ia, jb in pairs:
        out = {}
        if ia is not None:
            for w, p in acc[ia].items():
                out[w] = out.get(w, 0.0) + p
        else:
            out[NULL] = out.get(NULL, 0.0) + acc_weight
        if jb is not None:
            for w, p in b[jb].items():
                out[w] = out.get(w, 0.0) + wt * p
        else:
            out[NULL] = out.get(NULL, 0.0) + wt
        merged.append(out)
    return merged


# ---------------------------------------------------------------------------
# Text format


def write_confusion_network(path, cn):
    lines = []
    for k, s in enumerate(cn.sets):
        parts = " ".join(f"{w}={fmt9(p)}" for w, p in sorted(s.items()))
        lines.append(f"SET {k}: {parts}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_confusion_network(path):
    sets = []
    with open(path) as f:
        for lineno, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            if not line.startswith("SET "):
                raise DataFormatError(f"{path}:{lineno + 1}: expected 'SET k: ...'")
            _, rest = line.split(":", 1)
            s = {}
            for item in rest.split():
                word, p = item.rsplit("=", 1)
                s[word] = float(p)
            sets.append(s)
    return ConfusionNetwork(sets)

"""Pronunciations and context-dependent phone modelling.

Covers the lexicon, expansion of word sequences into triphone label
sequences (optionally across word boundaries), likelihood-based decision
tree clustering of states into a tied pool, synthesis of models for unseen
contexts, and soft-tying of neighbouring states.
"""

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .acoustic import (
    AcousticModelSet,
    DiagGaussian,
    GaussianMixture,
    HmmDef,
    base_phone,
    parse_triphone,
)
from .errors import DataFormatError, OutOfVocabularyError

# Context marker used at sentence edges and, with cross-word modelling off,
# at word boundaries.  It answers "no" to every phonetic question.
BOUNDARY = "~"


def make_label(left, base, right):
    return f"{left}-{base}+{right}"


class PhoneSet:
    """Base phone inventory with a phonetic attribute table."""

    def __init__(self, attributes):
        self.attributes = {p: frozenset(a) for p, a in attributes.items()}
        if BOUNDARY in self.attributes:
            raise DataFormatError(f"{BOUNDARY!r} is reserved for the boundary marker")
        self.phones = tuple(self.attributes)

    def __contains__(self, phone):
        return phone in self.attributes

    def __iter__(self):
        return iter(self.phones)

    def has_attribute(self, phone, attr):
        """Boundary and missing contexts carry no attributes."""
        if phone is None or phone == BOUNDARY:
            return False
        if phone not in self.attributes:
            raise DataFormatError(f"unknown phone {phone!r}")
        return attr in self.attributes[phone]


class Lexicon:
    """word -> pronunciation variants with probabilities summing to one."""

    def __init__(self, entries):
        self.entries = {}
        for word, variants in entries.items():
            if not variants:
                raise DataFormatError(f"word {word!r} has no pronunciations")
            probs = [p for _, p in variants]
            if any(p is None for p in probs):
                if not all(p is None for p in probs):
                    raise DataFormatError(
                        f"word {word!r} mixes explicit and implicit probabilities"
                    )
                probs = [1.0 / len(variants)] * len(variants)
            else:
                total = sum(probs)
                if abs(total - 1.0) > 1e-6:
                    raise DataFormatError(
                        f"word {word!r}: pronunciation probabilities sum to {total}"
                    )
                probs = [p / total for p in probs]
            seqs = []
            for (seq, _), p in zip(variants, probs):
                seq = tuple(seq)
                if not seq:
                    raise DataFormatError(f"word {word!r} has an empty pronunciation")
                seqs.append((seq, p))
            self.entries[word] = seqs

    def __contains__(self, word):
        return word in self.entries

    @property
    def words(self):
        return tuple(self.entries)

    def pronunciations(self, word):
        if word not in self.entries:
            raise OutOfVocabularyError(word)
        return self.entries[word]

    def phones_used(self):
        out = set()
        for variants in self.entries.values():
            for seq, _ in variants:
                out.update(seq)
        return sorted(out)


def read_lexicon(path):
    """Dictionary file: ``WORD [prob] phone phone ...``, ``#`` comments."""
    entries = {}
    seen = set()
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 2:
                raise DataFormatError(f"{path}:{lineno}: need a word and phones")
            word = parts[0]
            rest = parts[1:]
            prob = None
            try:
                prob = float(rest[0])
                rest = rest[1:]
            except ValueError:
                pass
            if not rest:
                raise DataFormatError(f"{path}:{lineno}: no phones for {word!r}")
            key = (word, tuple(rest))
            if key in seen:
                raise DataFormatError(
                    f"{path}:{lineno}: duplicate pronunciation for {word!r}"
                )
            seen.add(key)
            entries.setdefault(word, []).append((tuple(rest), prob))
    return Lexicon(entries)


def read_phone_set(path):
    """Phone attribute file: ``PHONE attr1 attr2 ...``, ``#`` comments."""
    attributes = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] in attributes:
                raise DataFormatError(f"{path}:{lineno}: duplicate phone {parts[0]!r}")
            attributes[parts[0]] = parts[1:]
    return PhoneSet(attributes)


@dataclass(frozen=True)
class Question:
    """A binary context question: does the left/right neighbour have an attribute?"""

    name: str
    side: str  # "L" or "R"
    attr: str

    def answer(self, label, phone_set):
        left, _, right = parse_triphone(label)
        context = left if self.side == "L" else right
        return phone_set.has_attribute(context, self.attr)


def read_questions(path):
    """Question file: ``QNAME L|R attr``, ``#`` comments."""
    questions = []
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3 or parts[1] not in ("L", "R"):
                raise DataFormatError(f"{path}:{lineno}: expected 'NAME L|R attr'")
            questions.append(Question(parts[0], parts[1], parts[2]))
    return questions


# ---------------------------------------------------------------------------
# Transcript expansion


@dataclass(frozen=True)
class Expansion:
    """One pronunciation combination of a transcript, as triphone labels."""

    labels: tuple
    prob: float
    variants: tuple       # chosen variant index per word
    word_indexes: tuple   # for each label, the transcript word it belongs to


def expand_transcript(words, lexicon, cross_word=False):
    """All pronunciation combinations of a word sequence as triphone labels.

    With ``cross_word`` set, boundary phones see the neighbouring word's
    edge phone as context; otherwise word edges use the boundary marker.
    Sentence edges always use the boundary marker.
    """
    if not words:
        raise DataFormatError("cannot expand an empty transcript")
    per_word = [lexicon.pronunciations(w) for w in words]

    combos = [((), 1.0)]
    for variants in per_word:
        combos = [
            (chosen + (v,), p * vp)
            for chosen, p in combos
            for v, (_, vp) in enumerate(variants)
        ]

    expansions = []
    for chosen, prob in combos:
        seqs = [per_word[k][v][0] for k, v in enumerate(chosen)]
        labels = []
        word_indexes = []
        for k, seq in enumerate(seqs):
            for i, phone in enumerate(seq):
                if i > 0:
                    left = seq[i - 1]
                elif cross_word and k > 0:
                    left = seqs[k - 1][-1]
                else:
                    left = BOUNDARY
                if i < len(seq) - 1:
                    right = seq[i + 1]
                elif cross_word and k < len(seqs) - 1:
                    right = seqs[k + 1][0]
                else:
                    right = BOUNDARY
                labels.append(make_label(left, phone, right))
                word_indexes.append(k)
        expansions.append(
            Expansion(tuple(labels), prob, chosen, tuple(word_indexes))
        )
    return expansions


# ---------------------------------------------------------------------------
# Decision-tree state clustering


@dataclass
class StateStats:
    """Single-Gaussian summary of one logical state: occupancy, mean, variance."""

    occ: float
    mean: np.ndarray
    var: np.ndarray


def _pool(stats_list):
    """Occupancy-weighted pooled single-Gaussian statistics."""
    occ = sum(s.occ for s in stats_list)
    if occ <= 0.0:
        return StateStats(0.0, None, None)
    mean = sum(s.occ * s.mean for s in stats_list) / occ
    second = sum(s.occ * (s.var + s.mean**2) for s in stats_list) / occ
    var = np.maximum(second - mean**2, 1e-20)
    return StateStats(occ, mean, var)


def pooled_log_likelihood(pooled):
    """Data log likelihood of a pooled set under its own single Gaussian."""
    if pooled.occ <= 0.0:
        return 0.0
    return -0.5 * pooled.occ * float(
        (np.log(2.0 * math.pi * pooled.var) + 1.0).sum()
    )


class TreeNode:
    __slots__ = ("question", "yes", "no", "labels", "leaf_id")

    def __init__(self, labels):
        self.question = None
        self.yes = None
        self.no = None
        self.labels = labels
        self.leaf_id = None


class DecisionTreeSet:
    """One binary tree per (base phone, state position)."""

    def __init__(self, trees, phone_set, n_positions):
        self.trees = trees
        self.phone_set = phone_set
        self.n_positions = n_positions

    def lookup(self, label):
        """Physical state ids for a (possibly unseen) logical label."""
        base = base_phone(label)
        ids = []
        for pos in range(self.n_positions):
            node = self.trees.get((base, pos))
            if node is None:
                raise DataFormatError(f"no decision tree for phone {base!r}")
            while node.question is not None:
                node = node.yes if node.question.answer(label, self.phone_set) else node.no
            ids.append(node.leaf_id)
        return tuple(ids)


def best_split(labels, stats, questions, phone_set, min_occ):
    """Score every question on a node; return (gain, question, yes, no) or None."""
    parent = _pool([stats[l] for l in labels])
    parent_ll = pooled_log_likelihood(parent)
    best = None
    for q in questions:
        yes = [l for l in labels if q.answer(l, phone_set)]
        if not yes or len(yes) == len(labels):
            continue
        no = [l for l in labels if l not in set(yes)]
        pool_yes = _pool([stats[l] for l in yes])
        pool_no = _pool([stats[l] for l in no])
        if pool_yes.occ < min_occ or pool_no.occ < min_occ:
            continue
        gain = (
            pooled_log_likelihood(pool_yes)
            + pooled_log_likelihood(pool_no)
            - parent_ll
        )
        if best is None or gain > best[0]:
            best = (gain, q, yes, no)
    return best


@dataclass
class ClusterResult:
    trees: DecisionTreeSet
    tying: dict          # logical label -> tuple of pooled state ids
    leaf_stats: list     # pooled StateStats per physical state id


def cluster_states(stats, questions, phone_set, min_gain=350.0, min_occ=100.0,
                   max_leaves=10000, n_positions=3):
    """Greedy likelihood-gain decision-tree clustering of logical states.

    ``stats`` maps (label, position) to StateStats.  Splits are executed
    best-gain-first across all trees until no candidate reaches ``min_gain``,
    a child would fall under ``min_occ``, or the pool would exceed
    ``max_leaves``.
    """
    if not stats:
        raise DataFormatError("no clustering statistics supplied")
    groups = {}
    for (label, pos), st in stats.items():
        groups.setdefault((base_phone(label), pos), {})[label] = st

    trees = {}
    counter = 0
    heap = []
    for key in sorted(groups):
        labels = sorted(groups[key])
        root = TreeNode(labels)
        trees[key] = root
        cand = best_split(labels, groups[key], questions, phone_set, min_occ)
        if cand is not None and cand[0] >= min_gain:
            heapq.heappush(heap, (-cand[0], key[0], key[1], counter, root, cand))
            counter += 1

    n_leaves = len(trees)
    while heap and n_leaves < max_leaves:
        _, phone, pos, _, node, (gain, q, yes, no) = heapq.heappop(heap)
        node.question = q
        node.yes = TreeNode(yes)
        node.no = TreeNode(no)
        node.labels = None
        n_leaves += 1
        for child in (node.yes, node.no):
            cand = best_split(
                child.labels, groups[(phone, pos)], questions, phone_set, min_occ
            )
            if cand is not None and cand[0] >= min_gain:
                heapq.heappush(heap, (-cand[0], phone, pos, counter, child, cand))
                counter += 1

    # Number leaves deterministically and build the tying map.
    leaf_stats = []
    tying = {}
    tree_set = DecisionTreeSet(trees, phone_set, n_positions)
    for key in sorted(trees):
        stack = [trees[key]]
        while stack:
            node = stack.pop()
            if node.question is not None:
                stack.append(node.no)
                stack.append(node.yes)
                continue
            node.leaf_id = len(leaf_stats)
            leaf_stats.append(_pool([groups[key][l] for l in node.labels]))
            for label in node.labels:
                tying.setdefault(label, [None] * n_positions)[key[1]] = node.leaf_id
    tying = {label: tuple(ids) for label, ids in tying.items()}
    for label, ids in tying.items():
        if any(i is None for i in ids):
            raise DataFormatError(
                f"label {label!r} lacks statistics for some state positions"
            )
    return ClusterResult(tree_set, tying, leaf_stats)


def synthesize_unseen(label, trees):
    """Physical state ids for an unseen context, by walking the trees."""
    return trees.lookup(label)


def collect_cluster_stats(models, acc):
    """Turn untied single-Gaussian EM accumulators into clustering statistics.

    Uses each logical label's own accumulated moments; labels with zero
    occupancy are dropped.
    """
    stats = {}
    for label, hmm in models.hmms.items():
        for pos, sid in enumerate(hmm.state_ids):
            occ = acc.state_occ.get(sid, 0.0)
            if occ <= 0.0:
                continue
            c_occ = float(acc.comp_occ[sid].sum())
            if c_occ <= 0.0:
                continue
            mean = acc.comp_sum[sid].sum(axis=0) / c_occ
            var = np.maximum(
                acc.comp_sumsq[sid].sum(axis=0) / c_occ - mean**2, 1e-20
            )
            stats[(label, pos)] = StateStats(c_occ, mean, var)
    return stats


def build_tied_models(base_models, cluster, self_loop=None):
    """Assemble a tied-state model set from a clustering result.

    Base-phone topologies are kept; each tree leaf becomes one pooled
    single-Gaussian state initialised from the leaf statistics.
    """
    states = []
    for st in cluster.leaf_stats:
        states.append(GaussianMixture([1.0], [DiagGaussian(st.mean, st.var)]))
    hmms = {}
    for name, hmm in base_models.hmms.items():
        base = base_phone(name)
        if base != name:
            continue  # only keep base-phone topologies
        try:
            ids = cluster.trees.lookup(name)
        except DataFormatError:
            continue
        hmms[name] = HmmDef(name, hmm.trans.copy(), ids)
    if not hmms:
        raise DataFormatError("no base phone has a decision tree")
    return AcousticModelSet(
        states,
        hmms,
        tying=dict(cluster.tying),
        trees=cluster.trees,
        phones=base_models.phones if base_models.phones is not None else cluster.trees.phone_set,
    )


def write_cluster_stats(path, stats):
    """Clustering statistics file: one logical state per line."""
    from .textio import atomic_write_text, fmt9

    lines = [f"CSTATS {len(stats)}"]
    for (label, pos) in sorted(stats):
        st = stats[(label, pos)]
        mean = " ".join(fmt9(v) for v in st.mean)
        var = " ".join(fmt9(v) for v in st.var)
        lines.append(f"{label} {pos} {fmt9(st.occ)} MEAN {mean} VAR {var}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_cluster_stats(path):
    stats = {}
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 2 or header[0] != "CSTATS":
            raise DataFormatError(f"{path}: bad clustering statistics header")
        for line in f:
            parts = line.split()
            if not parts:
                continue
            label, pos, occ = parts[0], int(parts[1]), float(parts[2])
            if parts[3] != "MEAN":
                raise DataFormatError(f"{path}: malformed statistics line")
            rest = parts[4:]
            split = rest.index("VAR")
            mean = np.array([float(v) for v in rest[:split]])
            var = np.array([float(v) for v in rest[split + 1:]])
            stats[(label, pos)] = StateStats(occ, mean, var)
    return stats


# ---------------------------------------------------------------------------
# Soft-tying


def _single_gaussian_summary(mix):
    mean = (mix.weights[:, None] * np.stack([c.mean for c in mix.components])).sum(axis=0)
    second = (
        mix.weights[:, None]
        * np.stack([c.var + c.mean**2 for c in mix.components])
    ).sum(axis=0)
    return mean, np.maximum(second - mean**2, 1e-20)


def _sym_kl(mean_p, var_p, mean_q, var_q):
    def kl(m1, v1, m2, v2):
        return 0.5 * float(
            (np.log(v2 / v1) + (v1 + (m1 - m2) ** 2) / v2 - 1.0).sum()
        )

    return kl(mean_p, var_p, mean_q, var_q) + kl(mean_q, var_q, mean_p, var_p)


def soft_tie(models, k=1):
    """Pool each state's Gaussians with those of its k nearest states.

    Distances are symmetrised KL divergences between single-Gaussian
    summaries.  Component objects are shared, so the total number of
    Gaussians in the system is unchanged; only the mixture weights grow.
    """
    if k not in (1, 2):
        raise DataFormatError("soft-tying supports k of 1 or 2")
    n = len(models.states)
    if n < k + 1:
        raise DataFormatError(f"need at least {k + 1} states to soft-tie with k={k}")
    summaries = [_single_gaussian_summary(mix) for mix in models.states]
    new = models.clone()
    original = models.states
    shared = [list(mix.components) for mix in new.states]
    for sid in range(n):
        mean_p, var_p = summaries[sid]
        dists = []
        for other in range(n):
            if other == sid:
                continue
            mean_q, var_q = summaries[other]
            dists.append((_sym_kl(mean_p, var_p, mean_q, var_q), other))
        dists.sort()
        neighbours = [other for _, other in dists[:k]]
        weights = list(original[sid].weights)
        comps = list(shared[sid])
        for nb in neighbours:
            weights.extend(original[nb].weights)
            comps.extend(shared[nb])
        total = sum(weights)
        new.states[sid] = GaussianMixture([w / total for w in weights], comps)
    return new

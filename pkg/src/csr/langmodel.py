"""Backoff n-gram language models.

Counting, Good-Turing/Katz estimation with exact per-history normalisation,
ARPA text round-tripping, perplexity, exchange-based word clustering into
class models, and query-time linear interpolation.

Conditional probabilities are stored as log10 (the ARPA convention) and
converted to natural logs at query time, so files round-trip bit exactly.
"""

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

from .errors import DataFormatError, NumericError, OutOfVocabularyError
from .textio import atomic_write_text

SOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
LN10 = math.log(10.0)
# Backoff weights and probabilities at or below this log10 value stand for
# "no mass"; a scored token this improbable is treated as a zero.
LOG10_ZERO = -99.0


class Vocabulary:
    """Dense word <-> id table with the reserved sentence and unknown symbols."""

    def __init__(self, words=()):
        self._words = []
        self._index = {}
        for w in (SOS, EOS, UNK):
            self.add(w)
        for w in words:
            self.add(w)

    def add(self, word):
        if word not in self._index:
            self._index[word] = len(self._words)
            self._words.append(word)
        return self._index[word]

    def __contains__(self, word):
        return word in self._index

    def __len__(self):
        return len(self._words)

    def id(self, word):
        return self._index[word]

    def word(self, idx):
        return self._words[idx]

    @property
    def words(self):
        return tuple(self._words)


@dataclass
class CountTable:
    """Exact within-sentence n-gram counts for orders 1..n."""

    order: int
    vocab: Vocabulary
    tables: list  # tables[k-1]: dict[id tuple of length k] -> count

    def count(self, gram):
        return self.tables[len(gram) - 1].get(gram, 0)


def count_ngrams(sentences, order, vocab=None):
    """Count all n-grams of orders 1..order, sentence markers included."""
    if order < 1:
        raise DataFormatError("n-gram order must be at least 1")
    if vocab is None:
        vocab = Vocabulary()
    tables = [Counter() for _ in range(order)]
    for sentence in sentences:
        seq = [vocab.add(SOS)] + [vocab.add(w) for w in sentence] + [vocab.add(EOS)]
        for k in range(1, order + 1):
            table = tables[k - 1]
            for i in range(len(seq) - k + 1):
                table[tuple(seq[i : i + k])] += 1
    return CountTable(order, vocab, [dict(t) for t in tables])


@dataclass
class DiscountConfig:
    method: str = "good_turing"  # good_turing | absolute | none
    gt_max: int = 7
    absolute_d: float = 0.5
    cutoffs: tuple = ()          # per-order minimum counts (0 keeps everything)
    open_vocab: bool = True


def _xlnx(x):
    return x * math.log(x) if x > 0.0 else 0.0


def _discount_factors(counts_of_counts, cfg):
    """Per-count discount ratios d_r; returns (dict r -> d, fallback flag)."""
    if cfg.method == "none":
        return {}, False
    if cfg.method == "good_turing":
        k = cfg.gt_max
        n = counts_of_counts
        if all(n.get(r, 0) > 0 for r in range(1, k + 2)):
            big_a = (k + 1) * n[k + 1] / n[1]
            if big_a < 1.0:
                d = {}
                ok = True
                for r in range(1, k + 1):
                    r_star = (r + 1) * n[r + 1] / n[r]
                    dr = (r_star / r - big_a) / (1.0 - big_a)
                    if not 0.0 < dr <= 1.0:
                        ok = False
                        break
                    d[r] = dr
                if ok:
                    return d, False
        # Degenerate count-of-counts: fall back to absolute discounting.
        return (
            {r: (r - cfg.absolute_d) / r for r in range(1, max(counts_of_counts, default=1) + 1)},
            True,
        )
    if cfg.method == "absolute":
        return (
            {r: (r - cfg.absolute_d) / r for r in range(1, max(counts_of_counts, default=1) + 1)},
            False,
        )
    raise DataFormatError(f"unknown discounting method {cfg.method!r}")


class BackoffNGram:
    """Discounted n-gram probabilities plus backoff weights, log10 storage."""

    def __init__(self, order, vocab, entries, notes=()):
        self.order = order
        self.vocab = vocab
        # entries[k-1]: dict[id tuple len k] -> [logp10, bow10]; bow10 is None
        # for the highest order.
        self.entries = entries
        self.notes = tuple(notes)
        self.open_vocab = (vocab.id(UNK),) in entries[0]

    @property
    def vocab_words(self):
        return set(self.vocab.words)

    def _map(self, word):
        if word in self.vocab:
            wid = self.vocab.id(word)
            if (wid,) in self.entries[0]:
                return wid
        if self.open_vocab:
            return self.vocab.id(UNK)
        raise OutOfVocabularyError(word)

    def _bow10(self, history):
        entry = self.entries[len(history) - 1].get(history)
        if entry is None or entry[1] is None:
            return 0.0
        return entry[1]

    def _cond10(self, wid, history):
        acc = 0.0
        while history:
            entry = self.entries[len(history)].get(history + (wid,))
            if entry is not None:
                return acc + entry[0]
            acc += self._bow10(history)
            history = history[1:]
        entry = self.entries[0].get((wid,))
        return acc + (entry[0] if entry is not None else LOG10_ZERO)

    def logprob(self, word, history=()):
        """Natural-log conditional probability with backoff and unk mapping.

        Histories longer than order-1 words are truncated from the left.
        """
        wid = self._map(word)
        hist = tuple(self._map(h) for h in history)
        hist = hist[len(hist) - (self.order - 1):] if self.order > 1 else ()
        return self._cond10(wid, hist) * LN10

    def stored_logprob(self, word, history=()):
        """Natural log of an explicitly stored n-gram, or None if unseen."""
        wid = self._map(word)
        hist = tuple(self._map(h) for h in history)
        hist = hist[len(hist) - (self.order - 1):] if self.order > 1 else ()
        entry = self.entries[len(hist)].get(hist + (wid,))
        return None if entry is None else entry[0] * LN10

    def backoff_logweight(self, history):
        """Natural-log backoff weight of a history (0.0 when none is stored)."""
        hist = tuple(self._map(h) for h in history)
        hist = hist[len(hist) - (self.order - 1):] if self.order > 1 else ()
        if not hist:
            return 0.0
        return self._bow10(hist) * LN10

    def histories(self):
        """Every context the model stores (as word tuples), plus the empty one."""
        yield ()
        for k in range(0, self.order - 1):
            for gram in self.entries[k]:
                yield tuple(self.vocab.word(i) for i in gram)


def estimate_backoff(counts, cfg=None):
    """Katz estimation: discounted ML probabilities with exact backoff weights."""
    if cfg is None:
        cfg = DiscountConfig()
    order = counts.order
    vocab = counts.vocab
    notes = []
    entries = [dict() for _ in range(order)]

    cutoffs = tuple(cfg.cutoffs) + (0,) * (order - len(cfg.cutoffs))

    # Unigrams.
    uni = {g: c for g, c in counts.tables[0].items()}
    total = sum(uni.values())
    if total == 0:
        raise DataFormatError("empty corpus")
    cofc = Counter(uni.values())
    d, fell_back = _discount_factors(cofc, cfg)
    if fell_back:
        notes.append("order 1: degenerate count-of-counts, absolute discounting used")
        warnings.warn(notes[-1], stacklevel=2)
    probs = {}
    for gram, c in uni.items():
        probs[gram] = d.get(c, 1.0) * c / total
    leftover = 1.0 - sum(probs.values())
    unk_id = vocab.id(UNK)
    if cfg.open_vocab:
        probs[(unk_id,)] = probs.get((unk_id,), 0.0) + max(leftover, 0.0)
    elif leftover > 0.0:
        scale = 1.0 / sum(probs.values())
        probs = {g: p * scale for g, p in probs.items()}
    for gram, p in probs.items():
        if p > 0.0:
            entries[0][gram] = [math.log10(p), 0.0 if order > 1 else None]

    # Higher orders.
    for k in range(2, order + 1):
        table = counts.tables[k - 1]
        cofc = Counter(table.values())
        d, fell_back = _discount_factors(cofc, cfg)
        if fell_back:
            notes.append(
                f"order {k}: degenerate count-of-counts, absolute discounting used"
            )
            warnings.warn(notes[-1], stacklevel=2)
        by_hist = {}
        for gram, c in table.items():
            if c <= cutoffs[k - 1] and cutoffs[k - 1] > 0:
                continue
            by_hist.setdefault(gram[:-1], []).append((gram[-1], c))
        lower = BackoffNGram(k - 1, vocab, entries[: k - 1])
        for hist, conts in sorted(by_hist.items()):
            h_total = sum(c for _, c in conts)
            seen_mass = 0.0
            seen_lower = 0.0
            for wid, c in conts:
                p = d.get(c, 1.0) * c / h_total
                entries[k - 1][hist + (wid,)] = [
                    math.log10(p),
                    0.0 if k < order else None,
                ]
                seen_mass += p
                seen_lower += 10.0 ** lower._cond10(wid, hist[1:])
            num = 1.0 - seen_mass
            den = 1.0 - seen_lower
            if num <= 0.0:
                bow10 = LOG10_ZERO
                if num < -1e-9:
                    # Seen mass exceeds one (should not happen): renormalise.
                    scale = math.log10(1.0 / seen_mass)
                    for wid, _ in conts:
                        entries[k - 1][hist + (wid,)][0] += scale
            elif den <= 1e-12:
                # Continuations cover the whole lower distribution: push the
                # leftover back onto the seen mass to keep sums exact.
                scale = math.log10(1.0 / seen_mass)
                for wid, _ in conts:
                    entries[k - 1][hist + (wid,)][0] += scale
                bow10 = LOG10_ZERO
            else:
                bow10 = math.log10(num / den)
            hist_entry = entries[k - 2].get(hist)
            if hist_entry is not None:
                hist_entry[1] = bow10
            elif bow10 != LOG10_ZERO and num > 1e-12:
                # A history with continuations must itself be a stored gram.
                raise NumericError(
                    "inconsistent count tables: history missing at lower order"
                )
    return BackoffNGram(order, vocab, entries, notes)


def train_backoff(sentences, order, cfg=None):
    return estimate_backoff(count_ngrams(sentences, order), cfg)


def ngram_logprob(model, word, history=()):
    return model.logprob(word, tuple(history))


def perplexity(model, sentences):
    """exp of the mean negative log probability; end symbols are scored."""
    total = 0.0
    n_tokens = 0
    for sentence in sentences:
        if not list(sentence):
            continue
        history = (SOS,)
        for word in list(sentence) + [EOS]:
            lp = model.logprob(word, history)
            if lp <= LOG10_ZERO * LN10 * 0.9:
                raise NumericError(f"zero-probability token {word!r}")
            total += lp
            history = history + (word,)
            n_tokens += 1
    if n_tokens == 0:
        raise DataFormatError("empty corpus")
    return math.exp(-total / n_tokens)


# ---------------------------------------------------------------------------
# ARPA text format


def _fmt(x):
    return repr(float(x))


def write_arpa(path, model):
    lines = ["\\data\\"]
    for k in range(1, model.order + 1):
        lines.append(f"ngram {k}={len(model.entries[k - 1])}")
    for k in range(1, model.order + 1):
        lines.append("")
        lines.append(f"\\{k}-grams:")
        for gram in sorted(model.entries[k - 1]):
            logp, bow = model.entries[k - 1][gram]
            words = " ".join(model.vocab.word(i) for i in gram)
            if bow is None:
                lines.append(f"{_fmt(logp)}\t{words}")
            else:
                lines.append(f"{_fmt(logp)}\t{words}\t{_fmt(bow)}")
    lines.append("")
    lines.append("\\end\\")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_arpa(path):
    with open(path) as f:
        raw = [line.rstrip("\n") for line in f]
    try:
        start = raw.index("\\data\\")
    except ValueError:
        raise DataFormatError(f"{path}: missing \\data\\ header") from None
    sizes = []
    i = start + 1
    while i < len(raw) and raw[i].strip().startswith("ngram"):
        sizes.append(int(raw[i].split("=")[1]))
        i += 1
    order = len(sizes)
    if order == 0:
        raise DataFormatError(f"{path}: no ngram size declarations")
    vocab = Vocabulary()
    entries = [dict() for _ in range(order)]
    k = 0
    while i < len(raw):
        line = raw[i].strip()
        i += 1
        if not line:
            continue
        if line == "\\end\\":
            break
        if line.endswith("-grams:") and line.startswith("\\"):
            k = int(line[1:].split("-")[0])
            continue
        parts = line.split("\t")
        if len(parts) == 1:
            parts = line.split()
            parts = [parts[0], " ".join(parts[1:k + 1])] + parts[k + 1:]
        if len(parts) < 2:
            raise DataFormatError(f"{path}: bad n-gram line {line!r}")
        logp = float(parts[0])
        gram = tuple(vocab.add(w) for w in parts[1].split())
        if len(gram) != k:
            raise DataFormatError(f"{path}: order mismatch on line {line!r}")
        bow = float(parts[2]) if len(parts) > 2 else (0.0 if k < order else None)
        if k == order:
            bow = None
        entries[k - 1][gram] = [logp, bow]
    for k, size in enumerate(sizes, 1):
        if len(entries[k - 1]) != size:
            raise DataFormatError(f"{path}: \\data\\ section disagrees with body")
    return BackoffNGram(order, vocab, entries)


# ---------------------------------------------------------------------------
# Class models


def _class_bigram_objective(ncd, nl, nr):
    obj = 0.0
    for row in ncd.values():
        for c in row.values():
            obj += _xlnx(c)
    for c in nl.values():
        obj -= _xlnx(c)
    for c in nr.values():
        obj -= _xlnx(c)
    return obj


def cluster_words(sentences, n_classes, max_iters=1000):
    """Exchange clustering maximising the class-bigram log likelihood.

    Repeatedly applies the single best word move; ties go to the lowest
    word id, then the lowest class.  Returns word -> class index.
    """
    bigrams = Counter()
    unigrams = Counter()
    for sentence in sentences:
        seq = [SOS] + list(sentence) + [EOS]
        unigrams.update(seq)
        for a, b in zip(seq, seq[1:]):
            bigrams[(a, b)] += 1
    words = [w for w in unigrams if w not in (SOS, EOS)]
    if n_classes < 2:
        raise DataFormatError("need at least 2 classes")
    if n_classes > len(words):
        raise DataFormatError(
            f"{n_classes} classes requested for {len(words)} clusterable words"
        )
    order = {w: i for i, w in enumerate(sorted(words))}
    ranked = sorted(words, key=lambda w: (-unigrams[w], order[w]))
    cls = {w: min(r, n_classes - 1) for r, w in enumerate(ranked)}
    cls[SOS] = n_classes
    cls[EOS] = n_classes + 1

    succ = {}
    pred = {}
    for (a, b), c in bigrams.items():
        succ.setdefault(a, Counter())[b] += c
        pred.setdefault(b, Counter())[a] += c

    ncd = {}
    nl = Counter()
    nr = Counter()
    for (a, b), c in bigrams.items():
        ncd.setdefault(cls[a], Counter())[cls[b]] += c
        nl[cls[a]] += c
        nr[cls[b]] += c

    def _move(word, new_class):
        """Re-home one word's bigram mass (self-bigrams handled once)."""
        old = cls[word]
        if old == new_class:
            return
        for b, c in succ.get(word, {}).items():
            ncd[old][cls[b]] -= c
            nl[old] -= c
            nr[cls[b]] -= c
        for a, c in pred.get(word, {}).items():
            if a == word:
                continue
            ncd[cls[a]][old] -= c
            nl[cls[a]] -= c
            nr[old] -= c
        cls[word] = new_class
        for b, c in succ.get(word, {}).items():
            ncd.setdefault(new_class, Counter())[cls[b]] += c
            nl[new_class] += c
            nr[cls[b]] += c
        for a, c in pred.get(word, {}).items():
            if a == word:
                continue
            ncd.setdefault(cls[a], Counter())[new_class] += c
            nl[cls[a]] += c
            nr[new_class] += c

    objective = _class_bigram_objective(ncd, nl, nr)
    trajectory = [objective]
    sweep_order = sorted(words, key=lambda x: order[x])
    for _ in range(max_iters):
        best = None
        for w in sweep_order:
            current = cls[w]
            for target in range(n_classes):
                if target == current:
                    continue
                _move(w, target)
                candidate = _class_bigram_objective(ncd, nl, nr)
                _move(w, current)
                gain = candidate - objective
                if gain > 1e-9 and (best is None or gain > best[0] + 1e-12):
                    best = (gain, w, target)
        if best is None:
            break
        _, w, target = best
        _move(w, target)
        objective = _class_bigram_objective(ncd, nl, nr)
        trajectory.append(objective)
    return {w: cls[w] for w in words}, trajectory


class ClassNGram:
    """Class-sequence n-gram times class membership (every word in one class)."""

    def __init__(self, word_class, class_model, membership):
        self.word_class = dict(word_class)   # word -> class token
        self.class_model = class_model       # BackoffNGram over class tokens
        self.membership = dict(membership)   # word -> log10 p(word | class)
        self.order = class_model.order

    @property
    def vocab_words(self):
        return set(self.word_class) | {SOS, EOS, UNK}

    def _class_of(self, word):
        if word in self.word_class:
            return self.word_class[word]
        if word in (SOS, EOS):
            return word
        return UNK

    def logprob(self, word, history=()):
        cls = self._class_of(word)
        hist = tuple(self._class_of(h) for h in history)
        class_lp = self.class_model.logprob(cls, hist)
        member = self.membership.get(word, 0.0 if word not in self.word_class else None)
        if member is None:
            raise NumericError(f"no membership probability for {word!r}")
        return class_lp + member * LN10


def build_class_ngram(sentences, classes, order=2, cfg=None):
    """Train a class n-gram from a word->class-index map."""
    word_class = {w: f"C{c}" for w, c in classes.items()}
    unigrams = Counter()
    class_sents = []
    for sentence in sentences:
        unigrams.update(sentence)
        class_sents.append([word_class.get(w, UNK) for w in sentence])
    class_model = train_backoff(class_sents, order, cfg)
    class_totals = Counter()
    for w, c in unigrams.items():
        class_totals[word_class.get(w, UNK)] += c
    membership = {}
    for w, c in unigrams.items():
        token = word_class.get(w, UNK)
        membership[w] = math.log10(c / class_totals[token])
    return ClassNGram(word_class, class_model, membership)


class InterpolatedLM:
    """Query-time linear interpolation of language models in probability space."""

    def __init__(self, models, weights):
        weights = [float(w) for w in weights]
        if len(models) != len(weights) or not models:
            raise DataFormatError("need matching models and weights")
        if any(w < 0.0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
            raise DataFormatError("interpolation weights must be >= 0 and sum to 1")
        first = models[0].vocab_words
        for m in models[1:]:
            if m.vocab_words != first:
                raise DataFormatError("interpolated models must share a vocabulary")
        self.models = list(models)
        self.weights = weights
        self.order = max(m.order for m in models)

    @property
    def vocab_words(self):
        return self.models[0].vocab_words

    def logprob(self, word, history=()):
        total = 0.0
        for m, w in zip(self.models, self.weights):
            if w > 0.0:
                total += w * math.exp(m.logprob(word, history))
        if total <= 0.0:
            return LOG10_ZERO * LN10
        return math.log(total)


def interpolate(models, weights):
    return InterpolatedLM(models, weights)


# ---------------------------------------------------------------------------
# Counts and class-model files


def write_counts(path, counts):
    lines = [f"NGCOUNTS {counts.order}"]
    for k in range(1, counts.order + 1):
        for gram in sorted(counts.tables[k - 1]):
            words = " ".join(counts.vocab.word(i) for i in gram)
            lines.append(f"{counts.tables[k - 1][gram]}\t{words}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_counts(path):
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 2 or header[0] != "NGCOUNTS":
            raise DataFormatError(f"{path}: bad counts header")
        order = int(header[1])
        vocab = Vocabulary()
        tables = [dict() for _ in range(order)]
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            count, words = line.split("\t")
            gram = tuple(vocab.add(w) for w in words.split())
            tables[len(gram) - 1][gram] = int(count)
    return CountTable(order, vocab, tables)


def write_class_lm(path, model):
    lines = ["CSRCLASSLM", "\\classmap\\"]
    for w in sorted(model.word_class):
        lines.append(f"{w}\t{model.word_class[w]}")
    lines.append("\\membership\\")
    for w in sorted(model.membership):
        lines.append(f"{w}\t{_fmt(model.membership[w])}")
    lines.append("\\classngram\\")
    for k in range(1, model.class_model.order + 1):
        lines.append(f"\\{k}-grams:")
        for gram in sorted(model.class_model.entries[k - 1]):
            logp, bow = model.class_model.entries[k - 1][gram]
            words = " ".join(model.class_model.vocab.word(i) for i in gram)
            if bow is None:
                lines.append(f"{_fmt(logp)}\t{words}")
            else:
                lines.append(f"{_fmt(logp)}\t{words}\t{_fmt(bow)}")
    lines.append("\\end\\")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_class_lm(path):
    with open(path) as f:
        raw = [line.rstrip("\n") for line in f]
    if not raw or raw[0] != "CSRCLASSLM":
        raise DataFormatError(f"{path}: bad class LM header")
    section = None
    word_class = {}
    membership = {}
    grams = []
    order = 0
    for line in raw[1:]:
        if not line:
            continue
        if line in ("\\classmap\\", "\\membership\\", "\\classngram\\", "\\end\\"):
            section = line
            continue
        if section == "\\classmap\\":
            w, c = line.split("\t")
            word_class[w] = c
        elif section == "\\membership\\":
            w, p = line.split("\t")
            membership[w] = float(p)
        elif section == "\\classngram\\":
            if line.startswith("\\") and line.endswith("-grams:"):
                order = int(line[1:].split("-")[0])
                continue
            parts = line.split("\t")
            grams.append((order, parts))
    max_order = max(o for o, _ in grams) if grams else 1
    vocab = Vocabulary()
    entries = [dict() for _ in range(max_order)]
    for k, parts in grams:
        logp = float(parts[0])
        gram = tuple(vocab.add(w) for w in parts[1].split())
        bow = float(parts[2]) if len(parts) > 2 else (0.0 if k < max_order else None)
        if k == max_order:
            bow = None
        entries[k - 1][gram] = [logp, bow]
    class_model = BackoffNGram(max_order, vocab, entries)
    return ClassNGram(word_class, class_model, membership)

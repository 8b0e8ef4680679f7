"""Continuous-density HMM machinery.

Diagonal-covariance Gaussian mixtures, left-to-right phone HMMs, composite
utterance models, log-domain forward-backward and Viterbi alignment,
Baum-Welch re-estimation with mergeable accumulators, mixture growing and
semi-tied covariance transforms.

All probability arithmetic is in natural-log domain; mixture and path sums
use log-sum-exp.  Model sets are treated as immutable: re-estimation
returns updated copies.
"""

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, DataFormatError, NumericError
from .frontend import FeatureMatrix

LOG_ZERO = -np.inf

# Re-estimation defaults.
MIN_STATE_OCC = 3.0
VAR_FLOOR_SCALE = 1e-4
DEFAULT_SELF_LOOP = 0.6
MAX_MIXTURE_COMPONENTS = 32
# A multi-pronunciation transcript expands into at most this many variant
# combinations before we refuse (desk-scale guard).
MAX_PRONUNCIATION_COMBOS = 256


def logsumexp(a, axis=None):
    a = np.asarray(a, dtype=np.float64)
    return np.logaddexp.reduce(a, axis=axis)


def parse_triphone(label):
    """Split "x-y+z" into (x, y, z); missing contexts come back as None."""
    left = None
    right = None
    rest = label
    if "-" in rest:
        left, rest = rest.split("-", 1)
    if "+" in rest:
        rest, right = rest.split("+", 1)
    return left, rest, right


def base_phone(label):
    return parse_triphone(label)[1]


class DiagGaussian:
    """Single diagonal-covariance Gaussian with a cached log normaliser."""

    __slots__ = ("mean", "var", "gconst")

    def __init__(self, mean, var):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.var = np.asarray(var, dtype=np.float64)
        if self.mean.shape != self.var.shape or self.mean.ndim != 1:
            raise DataFormatError("gaussian mean/var must be matching vectors")
        if not np.all(self.var > 0.0):
            raise DataFormatError("gaussian variances must be strictly positive")
        self.gconst = -0.5 * (
            len(self.mean) * math.log(2.0 * math.pi) + float(np.log(self.var).sum())
        )

    @property
    def dim(self):
        return len(self.mean)

    def log_prob(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.shape[-1] != self.dim:
            raise DataFormatError(f"dimension mismatch: {y.shape[-1]} != {self.dim}")
        return self.gconst - 0.5 * (((y - self.mean) ** 2) / self.var).sum(axis=-1)


class GaussianMixture:
    """Weighted mixture of diagonal Gaussians (weights sum to one)."""

    def __init__(self, weights, components):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.components = list(components)
        if len(self.components) < 1 or len(self.weights) != len(self.components):
            raise DataFormatError("mixture needs matching weights and components")
        if np.any(self.weights < 0.0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise DataFormatError("mixture weights must be >= 0 and sum to 1")
        self._stack = None

    @property
    def n_components(self):
        return len(self.components)

    @property
    def dim(self):
        return self.components[0].dim

    def _stacked(self):
        if self._stack is None:
            means = np.stack([c.mean for c in self.components])
            variances = np.stack([c.var for c in self.components])
            gconsts = np.array([c.gconst for c in self.components])
            with np.errstate(divide="ignore"):
                logw = np.log(self.weights)
            self._stack = (means, variances, gconsts, logw)
        return self._stack

    def component_log_probs(self, Y):
        """(T, M) matrix of log(c_m) + log N(y_t; mu_m, var_m)."""
        Y = np.asarray(Y, dtype=np.float64)
        means, variances, gconsts, logw = self._stacked()
        if Y.shape[-1] != means.shape[1]:
            raise DataFormatError(
                f"dimension mismatch: {Y.shape[-1]} != {means.shape[1]}"
            )
        diff = Y[:, None, :] - means[None, :, :]
        return logw + gconsts - 0.5 * (diff * diff / variances[None, :, :]).sum(axis=2)

    def log_prob_matrix(self, Y):
        return logsumexp(self.component_log_probs(Y), axis=1)

    def responsibilities(self, Y):
        """Per-frame mixture log likelihood and component posteriors."""
        comp = self.component_log_probs(Y)
        total = logsumexp(comp, axis=1)
        return total, np.exp(comp - total[:, None])


def log_output_prob(y, mix):
    """Log mixture density of a single observation vector."""
    return float(mix.log_prob_matrix(np.asarray(y, dtype=np.float64)[None, :])[0])


class HmmDef:
    """Left-to-right HMM: non-emitting entry/exit around emitting states.

    ``trans`` is an (n, n) row-stochastic matrix over all states including
    entry (index 0) and exit (index n-1); the exit row is all zero.
    ``state_ids`` holds one tied-state pool index per emitting state.
    """

    def __init__(self, name, trans, state_ids):
        self.name = name
        self.trans = np.asarray(trans, dtype=np.float64)
        self.state_ids = tuple(int(s) for s in state_ids)
        n = self.trans.shape[0]
        if self.trans.shape != (n, n) or n != len(self.state_ids) + 2:
            raise DataFormatError(f"hmm {name}: transition matrix shape mismatch")
        if np.any(self.trans < 0.0):
            raise DataFormatError(f"hmm {name}: negative transition probability")
        sums = self.trans.sum(axis=1)
        if np.any(np.abs(sums[:-1] - 1.0) > 1e-9) or abs(sums[-1]) > 1e-9:
            raise DataFormatError(f"hmm {name}: transition rows must be stochastic")
        if np.any(np.tril(self.trans, -1) > 0.0):
            raise DataFormatError(f"hmm {name}: transitions must be left-to-right")
        if self.trans[0, 0] > 0.0 or self.trans[0, n - 1] > 0.0:
            raise DataFormatError(
                f"hmm {name}: entry state must be non-emitting and non-skipping"
            )

    @property
    def n_states(self):
        return self.trans.shape[0]

    @property
    def n_emitting(self):
        return len(self.state_ids)


def make_left_right_hmm(name, state_ids, self_loop=DEFAULT_SELF_LOOP):
    """Strict left-to-right topology with self loops (the default 3-state shape)."""
    n_emit = len(state_ids)
    n = n_emit + 2
    trans = np.zeros((n, n))
    trans[0, 1] = 1.0
    for i in range(1, n_emit + 1):
        trans[i, i] = self_loop
        trans[i, i + 1] = 1.0 - self_loop
    return HmmDef(name, trans, state_ids)


@dataclass
class SemiTiedTransform:
    """Shared feature-space transforms indexed by class, plus a state->class map."""

    transforms: dict
    state_class: dict = field(default_factory=dict)

    def class_of(self, state_id):
        return self.state_class.get(state_id, 0)

    def matrix(self, cls):
        return self.transforms[cls]


class AcousticModelSet:
    """Pooled tied-state Gaussian mixtures plus the HMMs built over them.

    ``states`` is the physical state pool.  ``hmms`` maps physical model
    names (base phones, or explicit logical labels for untied triphones) to
    their definitions.  ``tying`` maps logical labels to pooled state-id
    tuples; unseen logical labels fall back to the decision trees and
    finally to the base-phone model.
    """

    def __init__(self, states, hmms, tying=None, trees=None, phones=None, semitied=None):
        self.states = list(states)
        self.hmms = dict(hmms)
        self.tying = dict(tying or {})
        self.trees = trees
        self.phones = phones
        self.semitied = semitied

    @property
    def dim(self):
        return self.states[0].dim

    def clone(self):
        new = AcousticModelSet(
            [copy.deepcopy(s) for s in self.states],
            {k: HmmDef(v.name, v.trans.copy(), v.state_ids) for k, v in self.hmms.items()},
            dict(self.tying),
            self.trees,
            self.phones,
            copy.deepcopy(self.semitied),
        )
        return new

    def resolve(self, label):
        """Logical label -> (physical hmm name, state ids, transition matrix)."""
        if label in self.hmms:
            hmm = self.hmms[label]
            return label, hmm.state_ids, hmm.trans
        base = base_phone(label)
        if base not in self.hmms:
            raise DataFormatError(f"no model for phone {base!r} (label {label!r})")
        topo = self.hmms[base]
        if label in self.tying:
            return base, self.tying[label], topo.trans
        if self.trees is not None:
            return base, self.trees.lookup(label), topo.trans
        return base, topo.state_ids, topo.trans

    def emission_log_probs(self, Y, state_ids):
        """(T, len(state_ids)) emission matrix for the given pool states.

        Applies the semi-tied feature transform per state class when one is
        attached (scores then include the log determinant term).
        """
        Y = np.asarray(Y, dtype=np.float64)
        out = np.empty((Y.shape[0], len(state_ids)))
        cache = {}
        if self.semitied is None:
            for k, sid in enumerate(state_ids):
                if sid not in cache:
                    cache[sid] = self.states[sid].log_prob_matrix(Y)
                out[:, k] = cache[sid]
            return out
        transformed = {}
        logdets = {}
        for k, sid in enumerate(state_ids):
            if sid not in cache:
                cls = self.semitied.class_of(sid)
                if cls not in transformed:
                    H = self.semitied.matrix(cls)
                    transformed[cls] = Y @ H.T
                    logdets[cls] = math.log(abs(np.linalg.det(H)))
                cache[sid] = (
                    self.states[sid].log_prob_matrix(transformed[cls]) + logdets[cls]
                )
            out[:, k] = cache[sid]
        return out


def flat_start(phone_names, corpus, n_emitting=3, self_loop=DEFAULT_SELF_LOOP):
    """Initialise one single-Gaussian HMM per phone from global data moments."""
    total = None
    total_sq = None
    count = 0
    for feats in corpus:
        x = feats.frames
        if total is None:
            total = x.sum(axis=0)
            total_sq = (x * x).sum(axis=0)
        else:
            total += x.sum(axis=0)
            total_sq += (x * x).sum(axis=0)
        count += x.shape[0]
    if count == 0:
        raise DataFormatError("flat start needs a non-empty corpus")
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 1e-8)

    states = []
    hmms = {}
    for phone in sorted(phone_names):
        ids = []
        for _ in range(n_emitting):
            ids.append(len(states))
            states.append(GaussianMixture([1.0], [DiagGaussian(mean, var)]))
        hmms[phone] = make_left_right_hmm(phone, ids, self_loop)
    return AcousticModelSet(states, hmms)


# ---------------------------------------------------------------------------
# Composite models


class CompositeHmm:
    """Flattened utterance model: emitting states plus entry/exit structure.

    Built from one or more parallel chains of HMM instances (one chain per
    pronunciation combination).  Interior non-emitting junctions are
    eliminated by multiplying through, leaving a single virtual entry and
    exit.  ``origins`` maps every flattened transition back to the
    underlying per-HMM transitions so counts can be re-accumulated.
    """

    def __init__(self):
        self.state_ids = []
        self.instances = []        # dicts: label, hmm_name, state span, chain, meta
        self.state_instance = []   # per flattened state: index into instances
        self.log_init = None
        self.log_final = None
        self.log_trans = None
        self.init_origins = {}     # state -> [(hmm_name, 0, local_j)]
        self.final_origins = {}    # state -> [(hmm_name, local_i, exit)]
        self.trans_origins = {}    # (i, j) -> [(hmm_name, local_i, local_j), ...]
        self.chain_states = []     # per chain: list of flattened state indexes

    @property
    def n_states(self):
        return len(self.state_ids)

    @property
    def shortest_path(self):
        """Minimum number of frames this model can absorb."""
        return min(len(states) for states in self.chain_states)


def build_composite(models, chains, chain_log_priors=None, metas=None):
    """Assemble a composite from chains of logical labels.

    ``chains`` is a list of label sequences; each becomes a parallel branch
    sharing the virtual entry and exit.  ``chain_log_priors`` weights branch
    entry (pronunciation priors).  ``metas`` optionally carries per-label
    word bookkeeping, one list per chain.
    """
    comp = CompositeHmm()
    if chain_log_priors is None:
        chain_log_priors = [0.0] * len(chains)
    n_total = sum(
        len(models.resolve(label)[1]) for chain in chains for label in chain
    )
    comp.log_init = np.full(n_total, LOG_ZERO)
    comp.log_final = np.full(n_total, LOG_ZERO)
    comp.log_trans = np.full((n_total, n_total), LOG_ZERO)

    offset = 0
    for c, chain in enumerate(chains):
        if not chain:
            raise DataFormatError("empty phone chain in composite")
        chain_state_list = []
        prev = None  # (hmm_name, trans, offset, n_emit)
        for k, label in enumerate(chain):
            hmm_name, state_ids, trans = models.resolve(label)
            n_emit = len(state_ids)
            inst = {
                "label": label,
                "hmm_name": hmm_name,
                "first_state": offset,
                "n_states": n_emit,
                "chain": c,
                "meta": (metas[c][k] if metas is not None else None),
            }
            comp.instances.append(inst)
            inst_index = len(comp.instances) - 1
            for local in range(n_emit):
                comp.state_ids.append(state_ids[local])
                comp.state_instance.append(inst_index)
                chain_state_list.append(offset + local)

            with np.errstate(divide="ignore"):
                log_a = np.log(trans)
            # Internal transitions between emitting states.
            for i in range(n_emit):
                for j in range(n_emit):
                    if trans[i + 1, j + 1] > 0.0:
                        comp.log_trans[offset + i, offset + j] = log_a[i + 1, j + 1]
                        comp.trans_origins.setdefault(
                            (offset + i, offset + j), []
                        ).append((hmm_name, i + 1, j + 1))
            if prev is None:
                # Chain entry: prior plus this HMM's entry row.
                for j in range(n_emit):
                    if trans[0, j + 1] > 0.0:
                        comp.log_init[offset + j] = (
                            chain_log_priors[c] + log_a[0, j + 1]
                        )
                        comp.init_origins.setdefault(offset + j, []).append(
                            (hmm_name, 0, j + 1)
                        )
            else:
                # Join previous HMM's exit to this HMM's entry.
                p_name, p_trans, p_off, p_n = prev
                with np.errstate(divide="ignore"):
                    p_log = np.log(p_trans)
                for i in range(p_n):
                    if p_trans[i + 1, p_n + 1] <= 0.0:
                        continue
                    for j in range(n_emit):
                        if trans[0, j + 1] <= 0.0:
                            continue
                        w = p_log[i + 1, p_n + 1] + log_a[0, j + 1]
                        key = (p_off + i, offset + j)
                        comp.log_trans[key] = w
                        comp.trans_origins.setdefault(key, []).append(
                            (p_name, i + 1, p_n + 1)
                        )
                        comp.trans_origins[key].append((hmm_name, 0, j + 1))
            prev = (hmm_name, trans, offset, n_emit)
            offset += n_emit
        # Chain exit.
        p_name, p_trans, p_off, p_n = prev
        with np.errstate(divide="ignore"):
            p_log = np.log(p_trans)
        for i in range(p_n):
            if p_trans[i + 1, p_n + 1] > 0.0:
                comp.log_final[p_off + i] = p_log[i + 1, p_n + 1]
                comp.final_origins.setdefault(p_off + i, []).append(
                    (p_name, i + 1, p_n + 1)
                )
        comp.chain_states.append(chain_state_list)
    return comp


def build_transcript_composite(
    models, words, lexicon, cross_word=False, pron_mode="max"
):
    """Composite over all pronunciation combinations of a word sequence."""
    from .phonology import expand_transcript

    expansions = expand_transcript(words, lexicon, cross_word=cross_word)
    if len(expansions) > MAX_PRONUNCIATION_COMBOS:
        raise DataFormatError(
            f"transcript expands to {len(expansions)} pronunciation combinations "
            f"(cap {MAX_PRONUNCIATION_COMBOS})"
        )
    chains = [list(e.labels) for e in expansions]
    priors = [math.log(e.prob) for e in expansions]
    metas = [list(e.word_indexes) for e in expansions]
    comp = build_composite(models, chains, priors, metas)
    comp.expansions = expansions
    comp.pron_mode = pron_mode
    return comp


# ---------------------------------------------------------------------------
# Accumulators


class Accumulators:
    """Sufficient statistics for one EM step; element-wise mergeable."""

    def __init__(self, full_cov=False):
        self.full_cov = full_cov
        self.state_occ = {}
        self.comp_occ = {}
        self.comp_sum = {}
        self.comp_sumsq = {}
        self.comp_scatter = {}
        self.trans = {}
        self.total_log_likelihood = 0.0
        self.n_frames = 0
        self.n_utterances = 0

    def _ensure_state(self, sid, n_comp, dim):
        if sid not in self.comp_occ:
            self.state_occ[sid] = 0.0
            self.comp_occ[sid] = np.zeros(n_comp)
            self.comp_sum[sid] = np.zeros((n_comp, dim))
            self.comp_sumsq[sid] = np.zeros((n_comp, dim))
            if self.full_cov:
                self.comp_scatter[sid] = np.zeros((n_comp, dim, dim))

    def _ensure_trans(self, name, n):
        if name not in self.trans:
            self.trans[name] = np.zeros((n, n))

    def add(self, other):
        """Merge another accumulator into this one (commutative monoid)."""
        if self.full_cov != other.full_cov:
            raise DataFormatError("cannot merge accumulators of different kinds")
        for sid in other.comp_occ:
            self._ensure_state(sid, *other.comp_sum[sid].shape)
            self.state_occ[sid] += other.state_occ[sid]
            self.comp_occ[sid] += other.comp_occ[sid]
            self.comp_sum[sid] += other.comp_sum[sid]
            self.comp_sumsq[sid] += other.comp_sumsq[sid]
            if self.full_cov:
                self.comp_scatter[sid] += other.comp_scatter[sid]
        for name, counts in other.trans.items():
            self._ensure_trans(name, counts.shape[0])
            self.trans[name] += counts
        self.total_log_likelihood += other.total_log_likelihood
        self.n_frames += other.n_frames
        self.n_utterances += other.n_utterances
        return self


def _check_feasible(comp, T):
    if T < comp.shortest_path:
        raise AlignmentError(
            f"utterance of {T} frames shorter than the minimum path "
            f"({comp.shortest_path} states)"
        )


def forward_backward(models, comp, Y):
    """One E-step over an utterance: accumulators plus total log likelihood."""
    return _forward_backward(models, comp, Y, full_cov=False)


def _graph_forward(models, state_ids, log_init, log_trans, log_final, feats, kappa=1.0):
    """Forward (summed) log likelihood over an arbitrary flat state graph.

    ``kappa`` scales the emission scores only; transition weights are taken
    as given.
    """
    B = kappa * models.emission_log_probs(feats, state_ids)
    alpha = log_init + B[0]
    for t in range(1, feats.shape[0]):
        alpha = logsumexp(alpha[:, None] + log_trans, axis=0) + B[t]
    total = logsumexp(alpha + log_final)
    if not np.isfinite(total):
        raise AlignmentError("all alignment paths have zero probability")
    return float(total)


def _graph_forward_backward(models, state_ids, log_init, log_trans, log_final,
                            feats, kappa=1.0, full_cov=False):
    """Forward-backward over a flat state graph.

    Returns (Accumulators without transition counts, total, alpha, beta, B).
    ``kappa`` scales emissions only; callers bake any transition scaling
    into the weight matrices.
    """
    T = feats.shape[0]
    S = len(state_ids)
    B = kappa * models.emission_log_probs(feats, state_ids)

    alpha = np.full((T, S), LOG_ZERO)
    beta = np.full((T, S), LOG_ZERO)
    alpha[0] = log_init + B[0]
    for t in range(1, T):
        alpha[t] = logsumexp(alpha[t - 1][:, None] + log_trans, axis=0) + B[t]
    total = logsumexp(alpha[T - 1] + log_final)
    if not np.isfinite(total):
        raise AlignmentError("all alignment paths have zero probability")

    beta[T - 1] = log_final
    for t in range(T - 2, -1, -1):
        beta[t] = logsumexp(log_trans + (B[t + 1] + beta[t + 1])[None, :], axis=1)

    gamma = np.exp(alpha + beta - total)

    acc = Accumulators(full_cov=full_cov)
    acc.total_log_likelihood = float(total)
    acc.n_frames = T
    acc.n_utterances = 1

    by_pool = {}
    for k, sid in enumerate(state_ids):
        by_pool.setdefault(sid, []).append(k)
    for sid, cols in by_pool.items():
        g = gamma[:, cols].sum(axis=1)
        mix = models.states[sid]
        acc._ensure_state(sid, mix.n_components, mix.dim)
        acc.state_occ[sid] += float(g.sum())
        if models.semitied is not None:
            H = models.semitied.matrix(models.semitied.class_of(sid))
            x = feats @ H.T
        else:
            x = feats
        _, resp = mix.responsibilities(x)
        wresp = resp * g[:, None]
        acc.comp_occ[sid] += wresp.sum(axis=0)
        acc.comp_sum[sid] += wresp.T @ x
        acc.comp_sumsq[sid] += wresp.T @ (x * x)
        if full_cov:
            acc.comp_scatter[sid] += np.einsum("tm,td,te->mde", wresp, x, x)

    acc.occupancy = gamma
    return acc, float(total), alpha, beta, B


def _forward_backward(models, comp, Y, full_cov=False, kappa=1.0):
    feats = Y.frames if isinstance(Y, FeatureMatrix) else np.asarray(Y, dtype=np.float64)
    T = feats.shape[0]
    _check_feasible(comp, T)
    S = comp.n_states
    logA = comp.log_trans if kappa == 1.0 else kappa * comp.log_trans
    log_init = comp.log_init if kappa == 1.0 else kappa * comp.log_init
    log_final = comp.log_final if kappa == 1.0 else kappa * comp.log_final

    acc, total, alpha, beta, B = _graph_forward_backward(
        models, comp.state_ids, log_init, logA, log_final, feats,
        kappa=kappa, full_cov=full_cov,
    )

    # Transition counts, mapped back through the origin tables.
    finite = np.isfinite(logA)
    xi_total = np.zeros((S, S))
    for t in range(T - 1):
        with np.errstate(invalid="ignore"):
            contrib = alpha[t][:, None] + logA + (B[t + 1] + beta[t + 1])[None, :] - total
        xi_total[finite] += np.exp(contrib[finite])
    init_gamma = np.exp(log_init + B[0] + beta[0] - total)
    final_gamma = np.exp(alpha[T - 1] + log_final - total)

    def bump(name, i, j, amount, n_states):
        acc._ensure_trans(name, n_states)
        acc.trans[name][i, j] += amount

    hmms = models.hmms
    for (i, j), origins in comp.trans_origins.items():
        if xi_total[i, j] <= 0.0:
            continue
        for name, li, lj in origins:
            bump(name, li, lj, xi_total[i, j], hmms[name].n_states)
    for j, origins in comp.init_origins.items():
        if init_gamma[j] <= 0.0:
            continue
        for name, li, lj in origins:
            bump(name, li, lj, init_gamma[j], hmms[name].n_states)
    for i, origins in comp.final_origins.items():
        if final_gamma[i] <= 0.0:
            continue
        for name, li, lj in origins:
            bump(name, li, lj, final_gamma[i], hmms[name].n_states)

    return acc, float(total)


def viterbi_align(models, comp, Y):
    """Best state path and its exact log score, ties to the lower state index."""
    feats = Y.frames if isinstance(Y, FeatureMatrix) else np.asarray(Y, dtype=np.float64)
    T = feats.shape[0]
    _check_feasible(comp, T)
    B = models.emission_log_probs(feats, comp.state_ids)
    logA = comp.log_trans

    delta = comp.log_init + B[0]
    psi = np.zeros((T, comp.n_states), dtype=np.int64)
    for t in range(1, T):
        scores = delta[:, None] + logA
        psi[t] = np.argmax(scores, axis=0)
        delta = scores[psi[t], np.arange(comp.n_states)] + B[t]
    final_scores = delta + comp.log_final
    best_last = int(np.argmax(final_scores))
    best_score = float(final_scores[best_last])
    if not np.isfinite(best_score):
        raise AlignmentError("no feasible alignment path")
    path = np.empty(T, dtype=np.int64)
    path[T - 1] = best_last
    for t in range(T - 1, 0, -1):
        path[t - 1] = psi[t, path[t]]
    return path, best_score


def path_log_score(comp, B, path):
    """Log product of transition and emission terms along an explicit path."""
    score = comp.log_init[path[0]] + B[0, path[0]]
    for t in range(1, len(path)):
        score += comp.log_trans[path[t - 1], path[t]] + B[t, path[t]]
    return score + comp.log_final[path[-1]]


# ---------------------------------------------------------------------------
# Re-estimation


def global_variance(acc):
    """Occupancy-weighted per-dimension variance over all accumulated data."""
    total = None
    total_sq = None
    occ = 0.0
    for sid in acc.comp_occ:
        s = acc.comp_sum[sid].sum(axis=0)
        sq = acc.comp_sumsq[sid].sum(axis=0)
        if total is None:
            total, total_sq = s.copy(), sq.copy()
        else:
            total += s
            total_sq += sq
        occ += float(acc.comp_occ[sid].sum())
    if occ <= 0.0:
        raise NumericError("no occupancy accumulated")
    mean = total / occ
    return np.maximum(total_sq / occ - mean * mean, 1e-12)


def reestimate(models, acc, min_occ=MIN_STATE_OCC, var_floor_scale=VAR_FLOOR_SCALE):
    """M-step: occupancy-weighted updates of weights, means, variances, transitions.

    States below the occupancy floor keep their previous parameters, as do
    individual components with negligible occupancy.  Variances are floored
    at ``var_floor_scale`` times the global per-dimension variance.
    """
    new = models.clone()
    floor = var_floor_scale * global_variance(acc)
    frozen = []
    for sid, mix in enumerate(new.states):
        occ = acc.state_occ.get(sid, 0.0)
        if occ < min_occ:
            frozen.append(sid)
            continue
        c_occ = acc.comp_occ[sid]
        weights = np.maximum(c_occ / occ, 1e-10)
        weights = weights / weights.sum()
        comps = []
        for m, comp in enumerate(mix.components):
            if c_occ[m] < 1e-2:
                comps.append(comp)
                continue
            mean = acc.comp_sum[sid][m] / c_occ[m]
            var = np.maximum(acc.comp_sumsq[sid][m] / c_occ[m] - mean * mean, floor)
            comps.append(DiagGaussian(mean, var))
        new.states[sid] = GaussianMixture(weights, comps)
    for name, counts in acc.trans.items():
        hmm = new.hmms[name]
        trans = hmm.trans.copy()
        row_sums = counts.sum(axis=1)
        for i in range(hmm.n_states - 1):
            if row_sums[i] > 0.0:
                trans[i] = counts[i] / row_sums[i]
        new.hmms[name] = HmmDef(name, trans, hmm.state_ids)
    return new, frozen


def baum_welch_step(
    models,
    corpus,
    lexicon,
    cross_word=False,
    pron_mode="max",
    min_occ=MIN_STATE_OCC,
    full_cov=False,
):
    """One EM iteration over (features, transcript) pairs.

    Returns (updated models, corpus log likelihood of the pre-update models,
    list of skipped utterance indexes).
    """
    total_acc = Accumulators(full_cov=full_cov)
    skipped = []
    for idx, (feats, words) in enumerate(corpus):
        try:
            comp = build_transcript_composite(
                models, words, lexicon, cross_word=cross_word, pron_mode=pron_mode
            )
            if pron_mode == "max" and len(comp.chain_states) > 1:
                path, _ = viterbi_align(models, comp, feats)
                chain = comp.state_instance[path[0]]
                chain = comp.instances[chain]["chain"]
                exp = comp.expansions[chain]
                comp = build_composite(
                    models,
                    [list(exp.labels)],
                    [math.log(exp.prob)],
                    [list(exp.word_indexes)],
                )
            acc, _ = _forward_backward(models, comp, feats, full_cov=full_cov)
        except AlignmentError:
            skipped.append(idx)
            continue
        total_acc.add(acc)
    if total_acc.n_utterances == 0:
        raise AlignmentError("no utterance could be aligned")
    new_models, _ = reestimate(models, total_acc, min_occ=min_occ)
    return new_models, total_acc.total_log_likelihood, skipped


def accumulate_corpus(models, corpus, lexicon, cross_word=False, pron_mode="max",
                      full_cov=False):
    """E-step only: merged accumulators over a corpus (no parameter update)."""
    total_acc = Accumulators(full_cov=full_cov)
    skipped = []
    for idx, (feats, words) in enumerate(corpus):
        try:
            comp = build_transcript_composite(
                models, words, lexicon, cross_word=cross_word, pron_mode=pron_mode
            )
            if pron_mode == "max" and len(comp.chain_states) > 1:
                path, _ = viterbi_align(models, comp, feats)
                chain = comp.instances[comp.state_instance[path[0]]]["chain"]
                exp = comp.expansions[chain]
                comp = build_composite(
                    models, [list(exp.labels)], [math.log(exp.prob)],
                    [list(exp.word_indexes)],
                )
            acc, _ = _forward_backward(models, comp, feats, full_cov=full_cov)
        except AlignmentError:
            skipped.append(idx)
            continue
        total_acc.add(acc)
    return total_acc, skipped


# ---------------------------------------------------------------------------
# Mixture growing


def mixture_split(models, target_m, rng=None, perturbation=0.2):
    """Grow mixtures toward ``target_m`` components by splitting heavy components.

    Each pass clones the heaviest component of every under-target state,
    halving its weight and nudging the two copies 0.2 standard deviations
    apart per dimension (optionally in random directions).
    """
    if target_m > MAX_MIXTURE_COMPONENTS:
        raise DataFormatError(
            f"target {target_m} exceeds the component cap {MAX_MIXTURE_COMPONENTS}"
        )
    current_max = max(s.n_components for s in models.states)
    if target_m < current_max:
        raise DataFormatError(
            f"cannot shrink mixtures: target {target_m} < current {current_max}"
        )
    new = models.clone()
    for sid, mix in enumerate(new.states):
        weights = list(mix.weights)
        comps = list(mix.components)
        while len(comps) < target_m:
            heavy = int(np.argmax(weights))
            w = weights[heavy] / 2.0
            g = comps[heavy]
            sigma = np.sqrt(g.var)
            if rng is not None:
                direction = np.where(rng.random(g.dim) < 0.5, -1.0, 1.0)
            else:
                direction = np.ones(g.dim)
            offset = perturbation * sigma * direction
            weights[heavy] = w
            comps[heavy] = DiagGaussian(g.mean - offset, g.var)
            weights.append(w)
            comps.append(DiagGaussian(g.mean + offset, g.var))
        total = sum(weights)
        new.states[sid] = GaussianMixture([w / total for w in weights], comps)
    return new


# ---------------------------------------------------------------------------
# Feature-space transforms


def apply_feature_transform(Y, A, b=None):
    """Affine transform of every frame: y <- A y + b."""
    A = np.asarray(A, dtype=np.float64)
    frames = Y.frames if isinstance(Y, FeatureMatrix) else np.asarray(Y, dtype=np.float64)
    if A.shape != (frames.shape[1], frames.shape[1]):
        raise DataFormatError("transform matrix does not match feature dimension")
    out = frames @ A.T
    if b is not None:
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (frames.shape[1],):
            raise DataFormatError("transform offset does not match feature dimension")
        out = out + b
    if isinstance(Y, FeatureMatrix):
        return FeatureMatrix(out, frame_period_ms=Y.frame_period_ms)
    return out


def _semitied_aux(A, stats, beta):
    """Auxiliary likelihood of a shared transform given per-component scatters."""
    sign, logdet = np.linalg.slogdet(A)
    if sign <= 0:
        return -np.inf
    aux = beta * logdet
    for occ, W in stats:
        sigma = np.einsum("ij,jk,ik->i", A, W, A)
        aux -= 0.5 * occ * float(np.log(2.0 * math.pi * sigma).sum() + len(sigma))
    return aux


def estimate_semitied(models, acc, n_iters=20, state_class=None):
    """Estimate shared semi-tied transforms and re-diagonalised variances.

    Requires full-covariance accumulators.  Returns (SemiTiedTransform,
    updated model set with means and variances moved into the transformed
    space, auxiliary-likelihood trajectory per class).
    """
    if not acc.full_cov:
        raise DataFormatError("semi-tied estimation needs full-covariance statistics")
    if state_class is None:
        state_class = {}
    dim = models.dim

    # Gather per-component occupancies and scatters, grouped by class.
    grouped = {}
    comp_keys = {}
    for sid in sorted(acc.comp_occ):
        cls = state_class.get(sid, 0)
        for m in range(len(acc.comp_occ[sid])):
            occ = float(acc.comp_occ[sid][m])
            if occ <= 1e-6:
                continue
            mean = acc.comp_sum[sid][m] / occ
            W = acc.comp_scatter[sid][m] / occ - np.outer(mean, mean)
            for d in range(dim):
                if W[d, d] <= 0.0:
                    raise NumericError(
                        f"singular statistics in dimension {d} (state {sid})"
                    )
            grouped.setdefault(cls, []).append((occ, W))
            comp_keys.setdefault(cls, []).append((sid, m, mean))

    transforms = {}
    trajectories = {}
    for cls, stats in grouped.items():
        beta = sum(occ for occ, _ in stats)
        A = np.eye(dim)
        trajectory = [_semitied_aux(A, stats, beta)]
        for _ in range(n_iters):
            sigma = np.stack([np.einsum("ij,jk,ik->i", A, W, A) for _, W in stats])
            for d in range(dim):
                G = np.zeros((dim, dim))
                for k, (occ, W) in enumerate(stats):
                    G += (occ / sigma[k, d]) * W
                try:
                    Ginv = np.linalg.inv(G)
                except np.linalg.LinAlgError as e:
                    raise NumericError(f"singular statistics in dimension {d}") from e
                cof = np.linalg.det(A) * np.linalg.inv(A)[:, d]
                denom = float(cof @ Ginv @ cof)
                if denom <= 0.0:
                    raise NumericError(f"singular statistics in dimension {d}")
                row = cof @ Ginv * math.sqrt(beta / denom)
                A[d] = row
                sigma[:, d] = [float(A[d] @ W @ A[d]) for _, W in stats]
            trajectory.append(_semitied_aux(A, stats, beta))
        transforms[cls] = A
        trajectories[cls] = trajectory

    # Move component parameters into the transformed space.
    new = models.clone()
    for cls, keys in comp_keys.items():
        A = transforms[cls]
        for sid, m, mean in keys:
            occ = float(acc.comp_occ[sid][m])
            W = acc.comp_scatter[sid][m] / occ - np.outer(mean, mean)
            var = np.maximum(np.einsum("ij,jk,ik->i", A, W, A), 1e-10)
            mix = new.states[sid]
            comps = list(mix.components)
            comps[m] = DiagGaussian(A @ mean, var)
            new.states[sid] = GaussianMixture(mix.weights, comps)
    transform = SemiTiedTransform(transforms, dict(state_class))
    new.semitied = transform
    return transform, new, trajectories

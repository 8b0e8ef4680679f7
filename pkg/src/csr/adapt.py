"""Speaker adaptation: MLLR mean transforms, variance transforms,
constrained (feature-space) MLLR and regression-class trees.

Statistics are per-Gaussian occupancies with first and second moments,
accumulated from forced alignments (supervised) or first-pass hypotheses
(unsupervised).  Transform estimation follows the usual row-wise closed
forms; the constrained transform is iterated with cofactor terms and a
monotone auxiliary objective.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .acoustic import (
    Accumulators,
    DiagGaussian,
    GaussianMixture,
    _forward_backward,
    apply_feature_transform,
    build_transcript_composite,
    viterbi_align,
)
from .errors import AlignmentError, DataFormatError, NumericError
from .textio import atomic_write_text, fmt9

DEFAULT_MIN_OCC = 700.0


class AdaptStats:
    """Per-component occupancy, first and full second moments; mergeable."""

    def __init__(self, dim):
        self.dim = dim
        self.occ = {}     # (state id, comp) -> float
        self.first = {}   # (state id, comp) -> (D,)
        self.second = {}  # (state id, comp) -> (D, D)

    def add(self, other):
        if other.dim != self.dim:
            raise DataFormatError("cannot merge stats of different dimensions")
        for key, occ in other.occ.items():
            if key in self.occ:
                self.occ[key] += occ
                self.first[key] += other.first[key]
                self.second[key] += other.second[key]
            else:
                self.occ[key] = occ
                self.first[key] = other.first[key].copy()
                self.second[key] = other.second[key].copy()
        return self

    @property
    def total_occ(self):
        return sum(self.occ.values())

    @classmethod
    def from_accumulators(cls, acc):
        if not acc.full_cov:
            raise DataFormatError("adaptation needs full-covariance accumulators")
        dim = next(iter(acc.comp_sum.values())).shape[1]
        stats = cls(dim)
        for sid in acc.comp_occ:
            for m in range(len(acc.comp_occ[sid])):
                occ = float(acc.comp_occ[sid][m])
                if occ <= 0.0:
                    continue
                stats.occ[(sid, m)] = occ
                stats.first[(sid, m)] = acc.comp_sum[sid][m].copy()
                stats.second[(sid, m)] = acc.comp_scatter[sid][m].copy()
        return stats


def accumulate_adapt_stats(models, Y, words, lexicon, cross_word=False):
    """Alignment-based adaptation statistics for one utterance.

    ``words`` may be the reference transcript (supervised) or a first-pass
    hypothesis (unsupervised); occupancies come from forward-backward over
    the aligned composite.
    """
    comp = build_transcript_composite(models, list(words), lexicon, cross_word=cross_word)
    if len(comp.chain_states) > 1:
        path, _ = viterbi_align(models, comp, Y)
        chain = comp.instances[comp.state_instance[path[0]]]["chain"]
        exp = comp.expansions[chain]
        from .acoustic import build_composite

        comp = build_composite(
            models, [list(exp.labels)], [math.log(exp.prob)], [list(exp.word_indexes)]
        )
    acc, _ = _forward_backward(models, comp, Y, full_cov=True)
    return AdaptStats.from_accumulators(acc)


# ---------------------------------------------------------------------------
# Transform containers


@dataclass
class MeanTransform:
    """Affine mean update mu <- A mu + b, stored as G = [b A]."""

    G: np.ndarray  # (D, D+1)

    @property
    def b(self):
        return self.G[:, 0]

    @property
    def A(self):
        return self.G[:, 1:]

    def apply(self, mean):
        return self.A @ mean + self.b


@dataclass
class VarianceTransform:
    H: np.ndarray  # (D, D) symmetric positive definite

    def __post_init__(self):
        H = np.asarray(self.H, dtype=np.float64)
        if not np.allclose(H, H.T, atol=1e-8):
            raise DataFormatError("variance transform must be symmetric")
        if np.any(np.linalg.eigvalsh(H) <= 0.0):
            raise DataFormatError("variance transform must be positive definite")
        self.H = H


@dataclass
class ConstrainedTransform:
    """Feature-space affine normalisation y <- A y + b."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if abs(np.linalg.det(self.A)) <= 0.0:
            raise DataFormatError("constrained transform matrix must be invertible")

    def apply(self, Y):
        return apply_feature_transform(Y, self.A, self.b)


# ---------------------------------------------------------------------------
# MLLR mean transform


def _group_by_class(stats, classes):
    grouped = {}
    for key in stats.occ:
        cls = 0 if classes is None else classes.get(key, 0)
        grouped.setdefault(cls, []).append(key)
    return grouped


def estimate_mllr_mean(stats, models, classes=None, min_occ=DEFAULT_MIN_OCC):
    """Row-wise closed-form mean transforms, one per regression class.

    Classes whose occupancy falls below ``min_occ`` get the identity.
    Returns dict class -> MeanTransform.
    """
    dim = stats.dim
    transforms = {}
    for cls, keys in sorted(_group_by_class(stats, classes).items()):
        occ = sum(stats.occ[k] for k in keys)
        identity = np.hstack([np.zeros((dim, 1)), np.eye(dim)])
        if occ < min_occ:
            warnings.warn(
                f"regression class {cls}: occupancy {occ:.1f} below {min_occ}, identity kept",
                stacklevel=2,
            )
            transforms[cls] = MeanTransform(identity)
            continue
        G = np.zeros((dim, dim + 1))
        for i in range(dim):
            lhs = np.zeros((dim + 1, dim + 1))
            rhs = np.zeros(dim + 1)
            for key in keys:
                sid, m = key
                comp = models.states[sid].components[m]
                eta = np.concatenate(([1.0], comp.mean))
                lhs += (stats.occ[key] / comp.var[i]) * np.outer(eta, eta)
                rhs += (stats.first[key][i] / comp.var[i]) * eta
            try:
                G[i] = np.linalg.solve(lhs, rhs)
            except np.linalg.LinAlgError:
                warnings.warn(
                    f"regression class {cls}: singular system in row {i}, identity row",
                    stacklevel=2,
                )
                G[i] = identity[i]
        transforms[cls] = MeanTransform(G)
    return transforms


def adapt_means(models, transforms, classes=None):
    """Apply mean transforms to a model set, returning an adapted copy."""
    new = models.clone()
    for sid, mix in enumerate(new.states):
        comps = []
        changed = False
        for m, comp in enumerate(mix.components):
            cls = 0 if classes is None else classes.get((sid, m), 0)
            tr = transforms.get(cls)
            if tr is None:
                comps.append(comp)
                continue
            comps.append(DiagGaussian(tr.apply(comp.mean), comp.var))
            changed = True
        if changed:
            new.states[sid] = GaussianMixture(mix.weights, comps)
    return new


def mean_adapt_loglik(stats, models, transforms=None, classes=None):
    """Expected adaptation-data log likelihood under (possibly) moved means.

    This is the EM auxiliary for the accumulated occupancies, so estimated
    transforms must never decrease it relative to the identity.
    """
    total = 0.0
    for key, occ in stats.occ.items():
        sid, m = key
        comp = models.states[sid].components[m]
        cls = 0 if classes is None else classes.get(key, 0)
        mean = comp.mean if transforms is None else transforms[cls].apply(comp.mean)
        second_diag = np.diag(stats.second[key])
        quad = second_diag - 2.0 * mean * stats.first[key] + occ * mean**2
        total += occ * comp.gconst - 0.5 * float((quad / comp.var).sum())
    return total


# ---------------------------------------------------------------------------
# Variance transform


def estimate_variance_transform(stats, models, min_occ=DEFAULT_MIN_OCC,
                                mean_transforms=None, classes=None, diagonal=False):
    """Shared variance transform via the standard covariance re-estimation form.

    H averages the per-component scatters of (y - mu) mapped through the
    Choleski factors of the inverse covariances; with diagonal models those
    factors are 1/sigma.  Symmetric positive definite by construction.
    """
    dim = stats.dim
    total_occ = stats.total_occ
    if total_occ < min_occ:
        raise NumericError(f"variance transform: occupancy {total_occ:.1f} below {min_occ}")
    H = np.zeros((dim, dim))
    for key, occ in stats.occ.items():
        sid, m = key
        comp = models.states[sid].components[m]
        cls = 0 if classes is None else classes.get(key, 0)
        mean = comp.mean
        if mean_transforms is not None:
            mean = mean_transforms[cls].apply(mean)
        scatter = (
            stats.second[key]
            - np.outer(mean, stats.first[key])
            - np.outer(stats.first[key], mean)
            + occ * np.outer(mean, mean)
        )
        c = 1.0 / np.sqrt(comp.var)  # Choleski factor of a diagonal precision
        H += scatter * np.outer(c, c)
    H /= total_occ
    H = 0.5 * (H + H.T)
    if diagonal:
        H = np.diag(np.diag(H))
    if np.any(np.linalg.eigvalsh(H) <= 0.0):
        raise NumericError("variance transform: rank-deficient scatter")
    return VarianceTransform(H)


def variance_adapted_components(models, transform, sid):
    """Full covariance parameters of one state under a variance transform."""
    out = []
    for comp in models.states[sid].components:
        c = np.sqrt(comp.var)
        cov = transform.H * np.outer(c, c)
        out.append((comp.mean, cov))
    return out


def fullcov_log_prob(mean, cov, Y):
    """Multivariate normal log density with a full covariance matrix."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    d = mean.shape[0]
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise NumericError("covariance is not positive definite")
    diff = Y - mean
    solved = np.linalg.solve(cov, diff.T).T
    return -0.5 * (d * math.log(2.0 * math.pi) + logdet + (diff * solved).sum(axis=1))


def variance_adapt_loglik(stats, models, transform=None):
    """Expected log likelihood of the adaptation data under transformed variances."""
    total = 0.0
    dim = stats.dim
    for key, occ in stats.occ.items():
        sid, m = key
        comp = models.states[sid].components[m]
        mean = comp.mean
        scatter = (
            stats.second[key]
            - np.outer(mean, stats.first[key])
            - np.outer(stats.first[key], mean)
            + occ * np.outer(mean, mean)
        )
        if transform is None:
            cov = np.diag(comp.var)
        else:
            c = np.sqrt(comp.var)
            cov = transform.H * np.outer(c, c)
        sign, logdet = np.linalg.slogdet(cov)
        if sign <= 0:
            raise NumericError("covariance is not positive definite")
        total += -0.5 * (
            occ * (dim * math.log(2.0 * math.pi) + logdet)
            + float(np.trace(np.linalg.solve(cov, scatter)))
        )
    return total


# ---------------------------------------------------------------------------
# Constrained MLLR


def _cmllr_aux(W, G, k, beta):
    A = W[:, 1:]
    sign, logdet = np.linalg.slogdet(A)
    if sign <= 0:
        return -math.inf
    total = beta * logdet
    for i in range(W.shape[0]):
        total -= 0.5 * float(W[i] @ G[i] @ W[i] - 2.0 * k[i] @ W[i])
    return total


def estimate_cmllr(stats, models, n_iters=20, min_occ=DEFAULT_MIN_OCC):
    """Iterative row-by-row constrained transform estimation.

    Returns (ConstrainedTransform, auxiliary objective trajectory); the
    trajectory is non-decreasing across every row update.
    """
    dim = stats.dim
    beta = stats.total_occ
    if beta < min_occ:
        raise NumericError(f"constrained transform: occupancy {beta:.1f} below {min_occ}")

    G = [np.zeros((dim + 1, dim + 1)) for _ in range(dim)]
    k = np.zeros((dim, dim + 1))
    for key, occ in stats.occ.items():
        sid, m = key
        comp = models.states[sid].components[m]
        Z = np.zeros((dim + 1, dim + 1))
        Z[0, 0] = occ
        Z[0, 1:] = stats.first[key]
        Z[1:, 0] = stats.first[key]
        Z[1:, 1:] = stats.second[key]
        z = np.concatenate(([occ], stats.first[key]))
        for i in range(dim):
            G[i] += Z / comp.var[i]
            k[i] += (comp.mean[i] / comp.var[i]) * z

    W = np.hstack([np.zeros((dim, 1)), np.eye(dim)])
    trajectory = [_cmllr_aux(W, G, k, beta)]
    for _ in range(n_iters):
        for i in range(dim):
            A = W[:, 1:]
            det = np.linalg.det(A)
            if abs(det) < 1e-300:
                raise NumericError("constrained transform drifted to singularity")
            cof = det * np.linalg.inv(A)[:, i]
            p = np.concatenate(([0.0], cof))
            try:
                Ginv_p = np.linalg.solve(G[i], p)
                Ginv_k = np.linalg.solve(G[i], k[i])
            except np.linalg.LinAlgError as e:
                raise NumericError(f"singular statistics in row {i}") from e
            a = float(p @ Ginv_p)
            bq = float(p @ Ginv_k)
            if a <= 0.0:
                raise NumericError(f"degenerate cofactor system in row {i}")
            disc = math.sqrt(bq * bq + 4.0 * a * beta)
            best_row = None
            best_val = -math.inf
            for alpha in ((-bq + disc) / (2.0 * a), (-bq - disc) / (2.0 * a)):
                cand = alpha * Ginv_p + Ginv_k
                trial = W.copy()
                trial[i] = cand
                val = _cmllr_aux(trial, G, k, beta)
                if val > best_val:
                    best_val = val
                    best_row = cand
            W[i] = best_row
            trajectory.append(best_val)
    A = W[:, 1:]
    if abs(np.linalg.det(A)) < 1e-300:
        raise NumericError("constrained transform drifted to singularity")
    return ConstrainedTransform(A, W[:, 0]), trajectory


def cmllr_adapt_models(models, transform):
    """Model-space equivalent of a feature-space constrained transform.

    Moves every Gaussian to full covariance: mu <- A^-1 (mu - b),
    Sigma <- A^-1 Sigma A^-T.  Used to check both application routes agree.
    """
    Ainv = np.linalg.inv(transform.A)
    adapted = {}
    for sid, mix in enumerate(models.states):
        comps = []
        for comp in mix.components:
            mean = Ainv @ (comp.mean - transform.b)
            cov = Ainv @ np.diag(comp.var) @ Ainv.T
            comps.append((mean, cov))
        adapted[sid] = (np.asarray(mix.weights), comps)
    return adapted


# ---------------------------------------------------------------------------
# Regression class tree


@dataclass
class RegressionNode:
    id: int
    components: list
    children: tuple = ()

    @property
    def is_leaf(self):
        return not self.children


@dataclass
class RegressionTree:
    root: RegressionNode
    nodes: dict


def build_regression_tree(models, max_depth=6):
    """Top-down 2-means clustering of Gaussian means into a binary tree."""
    keys = [
        (sid, m)
        for sid, mix in enumerate(models.states)
        for m in range(mix.n_components)
    ]
    means = np.stack(
        [models.states[sid].components[m].mean for sid, m in keys]
    )
    nodes = {}
    counter = [0]

    def split(indexes, depth):
        node = RegressionNode(counter[0], [keys[i] for i in indexes])
        nodes[node.id] = node
        counter[0] += 1
        if depth >= max_depth or len(indexes) < 2:
            return node
        pts = means[indexes]
        centroid = pts.mean(axis=0)
        d0 = ((pts - centroid) ** 2).sum(axis=1)
        c1 = pts[int(np.argmax(d0))]
        d1 = ((pts - c1) ** 2).sum(axis=1)
        c2 = pts[int(np.argmax(d1))]
        if np.allclose(c1, c2):
            return node
        for _ in range(20):
            assign = ((pts - c1) ** 2).sum(axis=1) <= ((pts - c2) ** 2).sum(axis=1)
            if assign.all() or (~assign).all():
                return node
            new_c1 = pts[assign].mean(axis=0)
            new_c2 = pts[~assign].mean(axis=0)
            if np.allclose(new_c1, c1) and np.allclose(new_c2, c2):
                break
            c1, c2 = new_c1, new_c2
        left = split([indexes[i] for i in range(len(indexes)) if assign[i]], depth + 1)
        right = split([indexes[i] for i in range(len(indexes)) if not assign[i]], depth + 1)
        node.children = (left, right)
        return node

    root = split(list(range(len(keys))), 0)
    return RegressionTree(root, nodes)


def select_regression_classes(tree, stats, min_occ=DEFAULT_MIN_OCC):
    """Deepest frontier of tree nodes with sufficient occupancy.

    Components under an under-threshold subtree inherit the nearest
    qualifying ancestor; if even the root is under threshold a single
    global class is used with a warning.
    """
    occ_of = {}

    def node_occ(node):
        if node.id not in occ_of:
            occ_of[node.id] = sum(stats.occ.get(k, 0.0) for k in node.components)
        return occ_of[node.id]

    assignment = {}
    root = tree.root
    if node_occ(root) < min_occ:
        warnings.warn(
            f"regression tree root occupancy {node_occ(root):.1f} below {min_occ}; "
            "using one global class",
            stacklevel=2,
        )
        for key in root.components:
            assignment[key] = root.id
        return assignment

    def descend(node):
        if node.is_leaf:
            for key in node.components:
                assignment[key] = node.id
            return
        for child in node.children:
            if node_occ(child) >= min_occ:
                descend(child)
            else:
                for key in child.components:
                    assignment[key] = node.id

    descend(root)
    return assignment


# ---------------------------------------------------------------------------
# Unsupervised adaptation loop


def adapt_unsupervised(models, utterances, lexicon, net, decode_cfg, mode="cmllr",
                       n_passes=2, min_occ=DEFAULT_MIN_OCC, cross_word=False):
    """Decode, align the hypotheses, estimate a transform, decode again.

    ``mode`` "mllr" re-estimates model means; "cmllr" estimates a
    feature-space transform applied to the data.  Returns (final transform
    or adapted models, list of hypothesis lists per pass).
    """
    from .decoder import decode

    if mode not in ("mllr", "cmllr"):
        raise DataFormatError(f"unknown adaptation mode {mode!r}")
    all_hyps = []
    hyps = [decode(Y, net, decode_cfg).words for Y in utterances]
    all_hyps.append(hyps)
    result = None
    current = list(utterances)
    for _ in range(1, n_passes):
        stats = AdaptStats(models.dim)
        for Y, words in zip(current, hyps):
            if not words:
                continue
            try:
                stats.add(accumulate_adapt_stats(models, Y, words, lexicon, cross_word))
            except AlignmentError:
                continue
        if mode == "mllr":
            transforms = estimate_mllr_mean(stats, models, min_occ=min_occ)
            adapted = adapt_means(models, transforms)
            net.models = adapted
            result = adapted
            hyps = [decode(Y, net, decode_cfg).words for Y in current]
        else:
            transform, _ = estimate_cmllr(stats, models, min_occ=min_occ)
            current = [transform.apply(Y) for Y in utterances]
            result = transform
            hyps = [decode(Y, net, decode_cfg).words for Y in current]
        all_hyps.append(hyps)
    return result, all_hyps


# ---------------------------------------------------------------------------
# Statistics file


def write_adapt_stats(path, stats):
    """Adaptation statistics file: one block per Gaussian component."""
    lines = [f"ASTATS {len(stats.occ)} {stats.dim}"]
    for (sid, m) in sorted(stats.occ):
        lines.append(f"C {sid} {m} {fmt9(stats.occ[(sid, m)])}")
        lines.append(" ".join(fmt9(v) for v in stats.first[(sid, m)]))
        for row in stats.second[(sid, m)]:
            lines.append(" ".join(fmt9(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_adapt_stats(path):
    with open(path) as f:
        raw = [line.rstrip("\n") for line in f if line.strip()]
    header = raw[0].split()
    if len(header) != 3 or header[0] != "ASTATS":
        raise DataFormatError(f"{path}: bad adaptation statistics header")
    n, dim = int(header[1]), int(header[2])
    stats = AdaptStats(dim)
    i = 1
    for _ in range(n):
        parts = raw[i].split()
        if parts[0] != "C":
            raise DataFormatError(f"{path}: malformed component block")
        key = (int(parts[1]), int(parts[2]))
        stats.occ[key] = float(parts[3])
        stats.first[key] = np.array([float(v) for v in raw[i + 1].split()])
        stats.second[key] = np.array(
            [[float(v) for v in raw[i + 2 + r].split()] for r in range(dim)]
        )
        i += 2 + dim
    return stats


# ---------------------------------------------------------------------------
# Transform file


def write_transforms(path, dim, mean=None, var=None, cmllr=None):
    """Per-class transform file; any of the three blocks may be present."""
    lines = [f"CSRTRANS V1 {dim}"]
    classes = sorted(set(mean or {}) | set(var or {}) | set(cmllr or {}))
    for cls in classes:
        lines.append(f"CLASS {cls}")
        if mean and cls in mean:
            lines.append("MEANTRANS")
            for row in mean[cls].G:
                lines.append(" ".join(fmt9(v) for v in row))
        if var and cls in var:
            lines.append("VARTRANS")
            for row in var[cls].H:
                lines.append(" ".join(fmt9(v) for v in row))
        if cmllr and cls in cmllr:
            lines.append("CMLLR")
            t = cmllr[cls]
            for i in range(dim):
                lines.append(" ".join(fmt9(v) for v in np.concatenate(([t.b[i]], t.A[i]))))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_transforms(path):
    with open(path) as f:
        raw = [line.rstrip("\n") for line in f if line.strip()]
    header = raw[0].split()
    if len(header) != 3 or header[0] != "CSRTRANS" or header[1] != "V1":
        raise DataFormatError(f"{path}: bad transform file header")
    dim = int(header[2])
    mean, var, cmllr = {}, {}, {}
    i = 1
    cls = None
    while i < len(raw):
        line = raw[i]
        if line.startswith("CLASS "):
            cls = int(line.split()[1])
            i += 1
        elif line == "MEANTRANS":
            rows = [[float(v) for v in raw[i + 1 + r].split()] for r in range(dim)]
            mean[cls] = MeanTransform(np.array(rows))
            i += 1 + dim
        elif line == "VARTRANS":
            rows = [[float(v) for v in raw[i + 1 + r].split()] for r in range(dim)]
            var[cls] = VarianceTransform(np.array(rows))
            i += 1 + dim
        elif line == "CMLLR":
            rows = np.array([[float(v) for v in raw[i + 1 + r].split()] for r in range(dim)])
            cmllr[cls] = ConstrainedTransform(rows[:, 1:], rows[:, 0])
            i += 1 + dim
        else:
            raise DataFormatError(f"{path}: unexpected line {line!r}")
    return dim, mean, var, cmllr

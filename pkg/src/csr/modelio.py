"""Text persistence for acoustic model sets.

Versioned, deterministic field ordering, 9 significant digits everywhere,
so identical models produce byte-identical files and files diff cleanly.
Decision trees are stored as nested s-expression blocks carrying their
questions inline.
"""

import numpy as np

from .acoustic import (
    AcousticModelSet,
    DiagGaussian,
    GaussianMixture,
    HmmDef,
    SemiTiedTransform,
)
from .errors import DataFormatError
from .phonology import DecisionTreeSet, PhoneSet, Question, TreeNode
from .textio import atomic_write_text, fmt9


def _tree_sexpr(node):
    if node.question is None:
        return str(node.leaf_id)
    q = node.question
    return f"({q.name} {q.side} {q.attr} ({_tree_sexpr(node.yes)}) ({_tree_sexpr(node.no)}))"


def _tokenize(text):
    return text.replace("(", " ( ").replace(")", " ) ").split()


def _parse_tree(tokens, pos):
    if tokens[pos] != "(":
        node = TreeNode([])
        node.leaf_id = int(tokens[pos])
        return node, pos + 1
    name, side, attr = tokens[pos + 1], tokens[pos + 2], tokens[pos + 3]
    if tokens[pos + 4] != "(":
        raise DataFormatError("malformed tree block")
    yes, nxt = _parse_tree(tokens, pos + 5)
    if tokens[nxt] != ")" or tokens[nxt + 1] != "(":
        raise DataFormatError("malformed tree block")
    no, nxt = _parse_tree(tokens, nxt + 2)
    if tokens[nxt] != ")" or tokens[nxt + 1] != ")":
        raise DataFormatError("malformed tree block")
    node = TreeNode(None)
    node.question = Question(name, side, attr)
    node.yes = yes
    node.no = no
    return node, nxt + 2


def write_models(path, models):
    lines = ["CSRMODEL V1", f"DIM {models.dim}"]
    if models.phones is not None:
        lines.append(f"PHONES {len(models.phones.phones)}")
        for p in models.phones.phones:
            attrs = " ".join(sorted(models.phones.attributes[p]))
            lines.append(f"{p} {attrs}".rstrip())
    lines.append(f"POOL {len(models.states)}")
    for sid, mix in enumerate(models.states):
        lines.append(f"STATE {sid} MIX {mix.n_components}")
        for m, comp in enumerate(mix.components):
            lines.append(f"WEIGHT {fmt9(mix.weights[m])}")
            lines.append("MEAN " + " ".join(fmt9(v) for v in comp.mean))
            lines.append("VAR " + " ".join(fmt9(v) for v in comp.var))
    for name in sorted(models.hmms):
        hmm = models.hmms[name]
        lines.append(f"HMM {name} {hmm.n_states}")
        lines.append("TRANS")
        for row in hmm.trans:
            lines.append(" ".join(fmt9(v) for v in row))
        lines.append("STATES " + " ".join(str(s) for s in hmm.state_ids))
    for label in sorted(models.tying):
        ids = " ".join(str(s) for s in models.tying[label])
        lines.append(f"TIE {label} {ids}")
    if models.trees is not None:
        for (phone, pos) in sorted(models.trees.trees):
            sexpr = _tree_sexpr(models.trees.trees[(phone, pos)])
            lines.append(f"TREE {phone} {pos} {sexpr}")
    if models.semitied is not None:
        lines.append(f"SEMITIED {len(models.semitied.transforms)}")
        for cls in sorted(models.semitied.transforms):
            lines.append(f"CLASS {cls}")
            for row in models.semitied.transforms[cls]:
                lines.append(" ".join(fmt9(v) for v in row))
        for sid in sorted(models.semitied.state_class):
            lines.append(f"STCLASS {sid} {models.semitied.state_class[sid]}")
    lines.append("END")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_models(path):
    with open(path) as f:
        raw = [line.rstrip("\n") for line in f]
    if not raw or raw[0] != "CSRMODEL V1":
        raise DataFormatError(f"{path}: bad model file header")
    i = 1
    if not raw[i].startswith("DIM "):
        raise DataFormatError(f"{path}: missing DIM line")
    dim = int(raw[i].split()[1])
    i += 1

    phones = None
    if i < len(raw) and raw[i].startswith("PHONES "):
        n = int(raw[i].split()[1])
        i += 1
        attrs = {}
        for _ in range(n):
            parts = raw[i].split()
            attrs[parts[0]] = parts[1:]
            i += 1
        phones = PhoneSet(attrs)

    if not raw[i].startswith("POOL "):
        raise DataFormatError(f"{path}: missing POOL section")
    n_states = int(raw[i].split()[1])
    i += 1
    states = []
    for _ in range(n_states):
        parts = raw[i].split()
        if parts[0] != "STATE" or int(parts[1]) != len(states):
            raise DataFormatError(f"{path}: bad STATE line {raw[i]!r}")
        n_mix = int(parts[3])
        i += 1
        weights = []
        comps = []
        for _ in range(n_mix):
            weights.append(float(raw[i].split()[1]))
            mean = np.array([float(v) for v in raw[i + 1].split()[1:]])
            var = np.array([float(v) for v in raw[i + 2].split()[1:]])
            comps.append(DiagGaussian(mean, var))
            i += 3
        total = sum(weights)
        states.append(GaussianMixture([w / total for w in weights], comps))

    hmms = {}
    tying = {}
    trees = {}
    semitied = None
    while i < len(raw) and raw[i] != "END":
        line = raw[i]
        if line.startswith("HMM "):
            _, name, n = line.split()
            n = int(n)
            if raw[i + 1] != "TRANS":
                raise DataFormatError(f"{path}: missing TRANS for {name}")
            trans = np.array(
                [[float(v) for v in raw[i + 2 + r].split()] for r in range(n)]
            )
            state_line = raw[i + 2 + n].split()
            if state_line[0] != "STATES":
                raise DataFormatError(f"{path}: missing STATES for {name}")
            hmms[name] = HmmDef(name, trans, [int(s) for s in state_line[1:]])
            i += 3 + n
        elif line.startswith("TIE "):
            parts = line.split()
            tying[parts[1]] = tuple(int(s) for s in parts[2:])
            i += 1
        elif line.startswith("TREE "):
            _, phone, pos, rest = line.split(" ", 3)
            node, _ = _parse_tree(_tokenize(rest), 0)
            trees[(phone, int(pos))] = node
            i += 1
        elif line.startswith("SEMITIED "):
            n_cls = int(line.split()[1])
            i += 1
            transforms = {}
            for _ in range(n_cls):
                cls = int(raw[i].split()[1])
                mat = np.array(
                    [[float(v) for v in raw[i + 1 + r].split()] for r in range(dim)]
                )
                transforms[cls] = mat
                i += 1 + dim
            state_class = {}
            while i < len(raw) and raw[i].startswith("STCLASS "):
                parts = raw[i].split()
                state_class[int(parts[1])] = int(parts[2])
                i += 1
            semitied = SemiTiedTransform(transforms, state_class)
        else:
            raise DataFormatError(f"{path}: unexpected line {line!r}")
    tree_set = None
    if trees:
        if phones is None:
            raise DataFormatError(f"{path}: trees need a PHONES section")
        n_positions = max(pos for _, pos in trees) + 1
        tree_set = DecisionTreeSet(trees, phones, n_positions)
    return AcousticModelSet(states, hmms, tying, tree_set, phones, semitied)

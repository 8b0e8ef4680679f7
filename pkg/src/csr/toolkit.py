"""Corpus management, scoring and the end-to-end training/decoding pipelines.

Pipelines are deterministic given their inputs, configuration and seed;
every stage checkpoint is written atomically and the stage log records the
corpus log likelihood per iteration.
"""

import configparser
import copy
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import frontend as fe
from .acoustic import (
    accumulate_corpus,
    base_phone,
    baum_welch_step,
    estimate_semitied,
    flat_start,
    HmmDef,
    mixture_split,
)
from .decoder import DecoderConfig, compile_network, decode, rescore_lattice
from .consensus import build_confusion_network, min_wer_hypothesis
from .errors import CsrError, DataFormatError
from .phonology import (
    build_tied_models,
    cluster_states,
    collect_cluster_stats,
    expand_transcript,
)
from .textio import atomic_write_text


# ---------------------------------------------------------------------------
# Corpus manifests


@dataclass
class ManifestEntry:
    utt_id: str
    path: str
    words: list
    split: str = "train"


@dataclass
class CorpusManifest:
    entries: list

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.utt_id in seen:
                raise DataFormatError(f"duplicate utterance id {e.utt_id!r}")
            seen.add(e.utt_id)

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def __iter__(self):
        return iter(self.entries)


def read_manifest(path, split="train", check_files=True):
    """Manifest file: one utterance per line, ``ID<TAB>PATH<TAB>TRANSCRIPT``."""
    entries = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
            utt_id, p, transcript = parts
            if not os.path.isabs(p):
                p = os.path.join(base, p)
            if check_files and not os.path.exists(p):
                raise DataFormatError(f"{path}:{lineno}: missing file {p}")
            entries.append(ManifestEntry(utt_id, p, transcript.split(), split))
    return CorpusManifest(entries)


def load_corpus(manifest_entries, frontend_cfg=None):
    """Read features for manifest entries; WAV paths run the front end."""
    corpus = []
    for e in manifest_entries:
        if e.path.lower().endswith(".wav"):
            cfg = frontend_cfg or fe.FrontendConfig()
            feats = fe.extract_features(fe.read_wav(e.path), cfg)
        else:
            feats = fe.read_features(e.path)
        corpus.append((e.utt_id, feats, list(e.words)))
    return corpus


# ---------------------------------------------------------------------------
# Word error rate scoring


@dataclass
class UttScore:
    utt_id: str
    subs: int
    dels: int
    ins: int
    n_ref: int
    trace: list  # (op, ref word or None, hyp word or None)

    @property
    def errors(self):
        return self.subs + self.dels + self.ins

    @property
    def wer(self):
        return 100.0 * self.errors / self.n_ref if self.n_ref else 0.0


@dataclass
class ScoreReport:
    per_utt: list

    @property
    def subs(self):
        return sum(u.subs for u in self.per_utt)

    @property
    def dels(self):
        return sum(u.dels for u in self.per_utt)

    @property
    def ins(self):
        return sum(u.ins for u in self.per_utt)

    @property
    def n_ref(self):
        return sum(u.n_ref for u in self.per_utt)

    @property
    def wer(self):
        return 100.0 * (self.subs + self.dels + self.ins) / self.n_ref if self.n_ref else 0.0

    def summary(self):
        return (
            f"WER {self.wer:.2f}%  (S={self.subs} D={self.dels} I={self.ins} "
            f"N={self.n_ref}, {len(self.per_utt)} utterances)"
        )


def align_words(ref, hyp):
    """Minimum-edit alignment with unit costs.

    Tie preference on equal cost: substitution, then deletion, then
    insertion.  Returns (subs, dels, ins, trace).
    """
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            same = ref[i - 1] == hyp[j - 1]
            dist[i, j] = min(
                dist[i - 1, j - 1] + (0 if same else 1),
                dist[i - 1, j] + 1,
                dist[i, j - 1] + 1,
            )
    trace = []
    i, j = n, m
    subs = dels = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (
            0 if ref[i - 1] == hyp[j - 1] else 1
        ):
            if ref[i - 1] == hyp[j - 1]:
                trace.append(("ok", ref[i - 1], hyp[j - 1]))
            else:
                trace.append(("sub", ref[i - 1], hyp[j - 1]))
                subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            trace.append(("del", ref[i - 1], None))
            dels += 1
            i -= 1
        else:
            trace.append(("ins", None, hyp[j - 1]))
            ins += 1
            j -= 1
    trace.reverse()
    return subs, dels, ins, trace


def score_wer(refs, hyps):
    """Word error rate over matching utterance-id keyed transcripts."""
    if set(refs) != set(hyps):
        missing = set(refs) ^ set(hyps)
        raise DataFormatError(f"reference/hypothesis id mismatch: {sorted(missing)[:5]}")
    per_utt = []
    for utt_id in sorted(refs):
        subs, dels, ins, trace = align_words(list(refs[utt_id]), list(hyps[utt_id]))
        per_utt.append(UttScore(utt_id, subs, dels, ins, len(refs[utt_id]), trace))
    return ScoreReport(per_utt)


# ---------------------------------------------------------------------------
# Configuration file


DEFAULT_CONFIG = {
    "frontend": {
        "window_ms": "25", "step_ms": "10", "n_filters": "24", "n_cepstra": "12",
        "delta_window": "2", "warp_factor": "1.0", "cmvn": "true",
    },
    "acoustic": {
        "n_emitting": "3", "self_loop": "0.6", "min_occ": "3.0",
        "var_floor_scale": "1e-4",
    },
    "phonology": {
        "min_gain": "350.0", "min_occ": "100.0", "max_leaves": "10000",
        "cross_word": "true",
    },
    "langmodel": {
        "order": "3", "discount": "good_turing", "absolute_d": "0.5",
        "open_vocab": "true",
    },
    "decoder": {
        "beam": "inf", "max_active": "0", "lm_scale": "12.0",
        "word_penalty": "-10.0", "word_end_beam": "inf",
    },
    "lattice": {"acoustic_scale": "0.083333333333333329", "lm_scale": "1.0"},
    "adapt": {"min_occ": "700.0", "n_passes": "2", "mode": "cmllr"},
    "discrim": {"kappa": "0.083333333333333329", "e_const": "2.0"},
    "toolkit": {
        "mono_iters": "5", "untied_iters": "2", "tied_iters": "4",
        "mixture_schedule": "", "split_iters": "2", "semitied": "false",
        "seed": "0",
    },
}


def load_config(path=None, overrides=None):
    """Layered configuration: defaults, optional INI file, CLI overrides."""
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULT_CONFIG)
    if path is not None:
        if not os.path.exists(path):
            raise DataFormatError(f"config file {path} not found")
        cp.read(path)
    for (section, key), value in (overrides or {}).items():
        if value is not None:
            if not cp.has_section(section):
                cp.add_section(section)
            cp.set(section, key, str(value))
    return cp


def frontend_config(cp):
    s = cp["frontend"]
    return fe.FrontendConfig(
        window_ms=s.getfloat("window_ms"),
        step_ms=s.getfloat("step_ms"),
        n_filters=s.getint("n_filters"),
        n_cepstra=s.getint("n_cepstra"),
        delta_window=s.getint("delta_window"),
        warp_factor=s.getfloat("warp_factor"),
        cmvn=s.getboolean("cmvn"),
    )


def decoder_config(cp, generate_lattice=False):
    s = cp["decoder"]
    return DecoderConfig(
        beam=s.getfloat("beam"),
        max_active=s.getint("max_active"),
        word_penalty=s.getfloat("word_penalty"),
        lm_scale=s.getfloat("lm_scale"),
        generate_lattice=generate_lattice,
        word_end_beam=s.getfloat("word_end_beam"),
    )


# ---------------------------------------------------------------------------
# Training pipeline


@dataclass
class TrainConfig:
    mono_iters: int = 5
    triphones: bool = True
    untied_iters: int = 2
    tied_iters: int = 4
    mixture_schedule: tuple = ()
    split_iters: int = 2
    cross_word: bool = True
    min_gain: float = 350.0
    min_occ: float = 100.0
    max_leaves: int = 10000
    n_emitting: int = 3
    self_loop: float = 0.6
    state_min_occ: float = 3.0
    semitied: bool = False
    semitied_iters: int = 20
    seed: int = 0
    checkpoint_dir: str = None


@dataclass
class StageLog:
    records: list = field(default_factory=list)  # (stage, iteration, loglik)

    def add(self, stage, iteration, loglik):
        self.records.append((stage, iteration, float(loglik)))

    def text(self):
        return "\n".join(
            f"STAGE {s} ITER {i} LOGLIK {ll:.6f}" for s, i, ll in self.records
        ) + "\n"


def _checkpoint(models, cfg, name):
    if cfg.checkpoint_dir:
        from .modelio import write_models

        os.makedirs(cfg.checkpoint_dir, exist_ok=True)
        write_models(os.path.join(cfg.checkpoint_dir, f"{name}.mdl"), models)


def train_pipeline(corpus, lexicon, phone_set, questions, cfg=None):
    """Staged acoustic model training.

    ``corpus`` is a list of (utt_id, FeatureMatrix, words).  Stages: flat
    start, monophone EM, untied triphone cloning and EM, tree-based state
    tying, tied EM, then an optional mixture-growing schedule and semi-tied
    transform.  Returns (models, stage log).
    """
    if cfg is None:
        cfg = TrainConfig()
    log = StageLog()
    pairs = [(feats, words) for _, feats, words in corpus]
    phones = lexicon.phones_used()
    for p in phones:
        if p not in phone_set:
            raise DataFormatError(f"dictionary phone {p!r} missing from the phone set")

    models = flat_start(
        phones, [f for f, _ in pairs], n_emitting=cfg.n_emitting, self_loop=cfg.self_loop
    )
    models.phones = phone_set
    _checkpoint(models, cfg, "flat")

    for it in range(cfg.mono_iters):
        models, ll, skipped = baum_welch_step(
            models, pairs, lexicon, cross_word=False, min_occ=cfg.state_min_occ
        )
        log.add("mono", it, ll)
    _checkpoint(models, cfg, "mono")
    if not cfg.triphones:
        if cfg.checkpoint_dir:
            atomic_write_text(os.path.join(cfg.checkpoint_dir, "stages.log"), log.text())
        return models, log

    # Clone every logical context seen in training as an untied triphone.
    seen = set()
    for _, words in pairs:
        for exp in expand_transcript(words, lexicon, cross_word=cfg.cross_word):
            seen.update(exp.labels)
    untied = models.clone()
    for label in sorted(seen):
        base_hmm = untied.hmms[base_phone(label)]
        new_ids = []
        for sid in base_hmm.state_ids:
            new_ids.append(len(untied.states))
            untied.states.append(copy.deepcopy(untied.states[sid]))
        untied.hmms[label] = HmmDef(label, base_hmm.trans.copy(), new_ids)
    models = untied
    for it in range(cfg.untied_iters):
        models, ll, _ = baum_welch_step(
            models, pairs, lexicon, cross_word=cfg.cross_word, min_occ=cfg.state_min_occ
        )
        log.add("untied", it, ll)
    _checkpoint(models, cfg, "untied")

    # Decision-tree state tying.
    acc, _ = accumulate_corpus(models, pairs, lexicon, cross_word=cfg.cross_word)
    stats = collect_cluster_stats(models, acc)
    stats = {k: v for k, v in stats.items() if "-" in k[0] or "+" in k[0]}
    cluster = cluster_states(
        stats, questions, phone_set,
        min_gain=cfg.min_gain, min_occ=cfg.min_occ, max_leaves=cfg.max_leaves,
        n_positions=cfg.n_emitting,
    )
    models = build_tied_models(models, cluster)
    log.add("tie", 0, float(len(models.states)))
    for it in range(cfg.tied_iters):
        models, ll, _ = baum_welch_step(
            models, pairs, lexicon, cross_word=cfg.cross_word, min_occ=cfg.state_min_occ
        )
        log.add("tied", it, ll)
    _checkpoint(models, cfg, "tied")

    rng = np.random.default_rng(cfg.seed)
    for target in cfg.mixture_schedule:
        models = mixture_split(models, target)
        for it in range(cfg.split_iters):
            models, ll, _ = baum_welch_step(
                models, pairs, lexicon, cross_word=cfg.cross_word,
                min_occ=cfg.state_min_occ,
            )
            log.add(f"mix{target}", it, ll)
        _checkpoint(models, cfg, f"mix{target}")

    if cfg.semitied:
        acc, _ = accumulate_corpus(
            models, pairs, lexicon, cross_word=cfg.cross_word, full_cov=True
        )
        _, models, _ = estimate_semitied(models, acc, n_iters=cfg.semitied_iters)
        for it in range(2):
            models, ll, _ = baum_welch_step(
                models, pairs, lexicon, cross_word=cfg.cross_word,
                min_occ=cfg.state_min_occ,
            )
            log.add("semitied", it, ll)
        _checkpoint(models, cfg, "semitied")

    if cfg.checkpoint_dir:
        atomic_write_text(os.path.join(cfg.checkpoint_dir, "stages.log"), log.text())
    return models, log


# ---------------------------------------------------------------------------
# Decoding pipeline


@dataclass
class PipelineResult:
    hypotheses: dict          # utt id -> word list (final pass)
    lattices: dict            # utt id -> first-pass lattice
    report: object            # ScoreReport or None
    failures: dict            # utt id -> error message
    pass1: dict = None
    pass2: dict = None


def decode_pipeline(corpus, models, lexicon, lm, rescore_lm=None, dec_cfg=None,
                    consensus=False, cross_word=False, acoustic_scale=None):
    """Bigram decode, optional higher-order rescoring, optional consensus.

    ``corpus`` is a list of (utt_id, FeatureMatrix, words-or-None).  Per
    utterance failures are recorded and the run continues.  When references
    are present the final hypotheses are scored.
    """
    if dec_cfg is None:
        dec_cfg = DecoderConfig(generate_lattice=True)
    elif not dec_cfg.generate_lattice:
        dec_cfg = replace(dec_cfg, generate_lattice=True)
    net = compile_network(lexicon, models, lm, cross_word=cross_word)
    hyps1 = {}
    hyps2 = {}
    final = {}
    lattices = {}
    failures = {}
    refs = {}
    for utt_id, feats, words in corpus:
        if words:
            refs[utt_id] = list(words)
        try:
            res = decode(feats, net, dec_cfg)
            hyps1[utt_id] = res.words
            lattices[utt_id] = res.lattice
            lat = res.lattice
            hyp = res.words
            if rescore_lm is not None:
                hyp, _, lat = rescore_lattice(res.lattice, rescore_lm, dec_cfg)
            hyps2[utt_id] = hyp
            if consensus:
                scale = acoustic_scale if acoustic_scale else 1.0 / dec_cfg.lm_scale
                cn = build_confusion_network(lat, acoustic_scale=scale)
                hyp, _ = min_wer_hypothesis(cn)
            final[utt_id] = hyp
        except CsrError as e:
            failures[utt_id] = str(e)
            final[utt_id] = []
            hyps1.setdefault(utt_id, [])
            hyps2.setdefault(utt_id, [])
    report = None
    if refs:
        report = score_wer(refs, {k: final[k] for k in refs})
    return PipelineResult(final, lattices, report, failures, hyps1, hyps2)

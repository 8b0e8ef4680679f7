"""Exception hierarchy shared by all csr modules.

The split matters for the command line tools: data/format problems exit
with code 2, numeric failures (infeasible alignments, underflow, singular
systems) with code 3.
"""


class CsrError(Exception):
    """Base class for all toolkit errors."""


class DataFormatError(CsrError):
    """Malformed input file, bad configuration value or inconsistent data."""


class OutOfVocabularyError(DataFormatError):
    """A word is missing from the lexicon or language model vocabulary."""

    def __init__(self, word):
        super().__init__(f"out-of-vocabulary word: {word!r}")
        self.word = word


class NumericError(CsrError):
    """Numeric failure: underflow, singular system, impossible update."""


class AlignmentError(NumericError):
    """No feasible state alignment for an utterance."""

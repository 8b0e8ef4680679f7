"""Acoustic front end: waveform to normalised cepstral feature vectors.

The chain is the conventional one: pre-emphasis, Hamming-windowed frames,
magnitude spectrum, mel triangular filterbank (optionally frequency warped
for vocal tract length normalisation), log energies, truncated cosine
transform, log-energy term in place of c0, delta and delta-delta regression
coefficients, and per-utterance cepstral mean/variance normalisation.
"""

import math
import wave
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, DataFormatError
from .textio import atomic_write_text, fmt9

PRE_EMPHASIS = 0.97
# Knee of the piecewise-linear VTLN warp, as a fraction of Nyquist.
VTLN_KNEE = 0.85
DEFAULT_VTLN_GRID = tuple(round(0.88 + 0.02 * i, 2) for i in range(13))

_LOG_FLOOR = 1e-20


@dataclass
class AudioBuffer:
    """Mono 16-bit PCM samples plus their sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise DataFormatError("audio must be a non-empty 1-D sample array")
        if self.sample_rate not in (8000, 16000):
            raise DataFormatError(
                f"unsupported sample rate {self.sample_rate} (want 8000 or 16000)"
            )
        if not np.all(np.isfinite(self.samples.astype(np.float64))):
            raise DataFormatError("audio contains non-finite samples")

    def __len__(self):
        return len(self.samples)


@dataclass
class FrontendConfig:
    window_ms: float = 25.0
    step_ms: float = 10.0
    n_filters: int = 24
    n_cepstra: int = 12
    delta_window: int = 2
    warp_factor: float = 1.0
    cmvn: bool = True

    def __post_init__(self):
        if not 0 < self.step_ms <= self.window_ms:
            raise DataFormatError("need 0 < step_ms <= window_ms")
        if not self.n_cepstra < self.n_filters:
            raise DataFormatError("need n_cepstra < n_filters")
        if not 0.8 <= self.warp_factor <= 1.25:
            raise DataFormatError("warp_factor must lie in [0.8, 1.25]")


@dataclass
class FeatureMatrix:
    """T x D matrix of acoustic vectors with frame-period metadata."""

    frames: np.ndarray
    frame_period_ms: float = 10.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataFormatError("feature matrix must be 2-D with at least one frame")
        if not np.all(np.isfinite(self.frames)):
            raise DataFormatError("feature matrix contains non-finite values")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def warp_frequency(f, warp_factor, nyquist):
    """Piecewise-linear frequency warp used for VTLN.

    Scales frequencies by ``warp_factor`` up to a knee placed so the warped
    axis still ends exactly at Nyquist, then interpolates linearly to
    Nyquist.  Identity for warp_factor 1.0.
    """
    f = np.asarray(f, dtype=np.float64)
    if warp_factor == 1.0:
        return f
    knee = VTLN_KNEE * nyquist * min(1.0, 1.0 / warp_factor)
    lo = warp_factor * f
    hi = warp_factor * knee + (nyquist - warp_factor * knee) * (f - knee) / (nyquist - knee)
    return np.where(f <= knee, lo, hi)


def mel_filterbank(n_filters, n_fft, sample_rate, warp_factor=1.0):
    """Triangular mel filterbank as an (n_filters, n_fft//2+1) weight matrix.

    Centre and edge frequencies are spaced uniformly on the mel scale and
    passed through the VTLN warp; each row is normalised to unit sum so a
    flat magnitude spectrum yields identical log energies in every band.
    """
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(0.0, float(hz_to_mel(nyquist)), n_filters + 2)
    hz_points = warp_frequency(mel_to_hz(mel_points), warp_factor, nyquist)
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft

    bank = np.zeros((n_filters, n_fft // 2 + 1))
    for i in range(n_filters):
        left, centre, right = hz_points[i], hz_points[i + 1], hz_points[i + 2]
        up = (bin_freqs - left) / max(centre - left, 1e-12)
        down = (right - bin_freqs) / max(right - centre, 1e-12)
        bank[i] = np.clip(np.minimum(up, down), 0.0, None)
        total = bank[i].sum()
        if total <= 0.0:
            raise DataFormatError(
                f"mel filter {i} is empty; use fewer filters or a longer window"
            )
        bank[i] /= total
    return bank


def dct_matrix(n_cepstra, n_filters):
    """Truncated cosine transform matrix, rows 1..n_cepstra (c0 excluded)."""
    i = np.arange(1, n_cepstra + 1)[:, None]
    j = np.arange(n_filters)[None, :]
    return np.sqrt(2.0 / n_filters) * np.cos(np.pi * i * (j + 0.5) / n_filters)


def cepstra_from_spectrum(magnitude, bank, dct):
    """Filterbank log energies followed by the truncated cosine transform."""
    energies = np.log(np.maximum(magnitude @ bank.T, _LOG_FLOOR))
    return energies @ dct.T


def frame_signal(samples, frame_len, frame_step):
    """Slice a signal into overlapping frames (last partial frame dropped)."""
    n = len(samples)
    if n < frame_len:
        raise AlignmentError(
            f"audio too short: {n} samples, need at least {frame_len}"
        )
    n_frames = 1 + (n - frame_len) // frame_step
    idx = np.arange(frame_len)[None, :] + frame_step * np.arange(n_frames)[:, None]
    return samples[idx]


def compute_static_features(audio, cfg):
    """Static cepstra for one utterance: [log energy, c1..c_n] per frame."""
    x = audio.samples.astype(np.float64)
    x = np.concatenate(([x[0]], x[1:] - PRE_EMPHASIS * x[:-1]))

    frame_len = int(round(cfg.window_ms * audio.sample_rate / 1000.0))
    frame_step = int(round(cfg.step_ms * audio.sample_rate / 1000.0))
    frames = frame_signal(x, frame_len, frame_step) * np.hamming(frame_len)

    n_fft = 1
    while n_fft < frame_len:
        n_fft *= 2
    magnitude = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))

    bank = mel_filterbank(cfg.n_filters, n_fft, audio.sample_rate, cfg.warp_factor)
    dct = dct_matrix(cfg.n_cepstra, cfg.n_filters)
    cepstra = cepstra_from_spectrum(magnitude, bank, dct)

    log_energy = np.log(np.maximum((frames**2).sum(axis=1), _LOG_FLOOR))
    feats = np.column_stack([log_energy, cepstra])
    return FeatureMatrix(feats, frame_period_ms=cfg.step_ms)


def _regression_slope(x, window):
    """Per-frame regression slope over +-window frames with edge replication."""
    t_max = x.shape[0] - 1
    num = np.zeros_like(x)
    for k in range(1, window + 1):
        ahead = x[np.minimum(np.arange(len(x)) + k, t_max)]
        behind = x[np.maximum(np.arange(len(x)) - k, 0)]
        num += k * (ahead - behind)
    return num / (2.0 * sum(k * k for k in range(1, window + 1)))


def append_deltas(static, delta_window=2):
    """Append first and second order regression coefficients (dim -> 3x)."""
    if delta_window < 1:
        raise DataFormatError("delta_window must be >= 1")
    d1 = _regression_slope(static.frames, delta_window)
    d2 = _regression_slope(d1, delta_window)
    return FeatureMatrix(
        np.hstack([static.frames, d1, d2]), frame_period_ms=static.frame_period_ms
    )


def cmvn(features):
    """Normalise each feature column to zero mean and (where possible) unit variance.

    Constant columns are mean-shifted only; a warning is issued for them.
    With a single frame only the mean is removed.
    """
    x = features.frames
    out = x - x.mean(axis=0)
    if x.shape[0] >= 2:
        std = out.std(axis=0, ddof=0)
        degenerate = std <= 0.0
        if degenerate.any():
            warnings.warn(
                f"cmvn: zero-variance dimensions {np.nonzero(degenerate)[0].tolist()} "
                "left unscaled",
                stacklevel=2,
            )
        out = out / np.where(degenerate, 1.0, std)
    return FeatureMatrix(out, frame_period_ms=features.frame_period_ms)


def extract_features(audio, cfg):
    """Full front end: statics, deltas, then optional CMVN."""
    feats = append_deltas(compute_static_features(audio, cfg), cfg.delta_window)
    if cfg.cmvn:
        feats = cmvn(feats)
    return feats


def vtln_search(utterances, models, transcripts, lexicon, grid=DEFAULT_VTLN_GRID, cfg=None):
    """Pick the warp factor maximising total forced-alignment log likelihood.

    Every grid point re-parameterises every utterance and aligns it against
    its transcript; the factor with the highest summed log likelihood wins,
    with ties broken toward 1.0.  An utterance that fails to align under
    every warp raises an alignment error naming it.
    """
    from .decoder import force_align

    if not grid:
        raise DataFormatError("warp factor grid is empty")
    if cfg is None:
        cfg = FrontendConfig()
    totals = {}
    failed_everywhere = set(range(len(utterances)))
    for warp in grid:
        warp_cfg = FrontendConfig(
            window_ms=cfg.window_ms,
            step_ms=cfg.step_ms,
            n_filters=cfg.n_filters,
            n_cepstra=cfg.n_cepstra,
            delta_window=cfg.delta_window,
            warp_factor=warp,
            cmvn=cfg.cmvn,
        )
        total = 0.0
        feasible = True
        for i, (audio, words) in enumerate(zip(utterances, transcripts)):
            feats = extract_features(audio, warp_cfg)
            try:
                result = force_align(feats, words, lexicon, models)
            except AlignmentError:
                feasible = False
                continue
            failed_everywhere.discard(i)
            total += result.log_likelihood
        if feasible:
            totals[warp] = total
    if failed_everywhere:
        idx = min(failed_everywhere)
        raise AlignmentError(f"utterance {idx} fails alignment under every warp factor")
    if not totals:
        raise AlignmentError("no warp factor aligns all utterances")
    best = max(totals.values())
    candidates = [w for w, v in totals.items() if v == best]
    return min(candidates, key=lambda w: (abs(w - 1.0), w))


def read_wav(path):
    """Read a RIFF/WAVE file; only 16-bit mono PCM at 8 or 16 kHz is accepted."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getcomptype() != "NONE":
                raise DataFormatError(f"{path}: compressed WAV not supported")
            if w.getnchannels() != 1:
                raise DataFormatError(f"{path}: only mono WAV is supported")
            if w.getsampwidth() != 2:
                raise DataFormatError(f"{path}: only 16-bit PCM is supported")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as e:
        raise DataFormatError(f"{path}: not a valid WAV file ({e})") from e
    samples = np.frombuffer(raw, dtype="<i2").astype(np.int64)
    return AudioBuffer(samples, rate)


def write_wav(path, audio):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(np.asarray(audio.samples, dtype="<i2").tobytes())


def write_features(path, features):
    """Write the text feature format: AFEA header then one row per frame."""
    lines = [
        f"AFEA {features.n_frames} {features.dim} {fmt9(features.frame_period_ms)}"
    ]
    for row in features.frames:
        lines.append(" ".join(fmt9(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_features(path):
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 4 or header[0] != "AFEA":
            raise DataFormatError(f"{path}: bad feature file header")
        n_frames, dim = int(header[1]), int(header[2])
        period = float(header[3])
        rows = []
        for line in f:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split()])
    if len(rows) != n_frames or any(len(r) != dim for r in rows):
        raise DataFormatError(f"{path}: feature data does not match header")
    return FeatureMatrix(np.array(rows, dtype=np.float64), frame_period_ms=period)

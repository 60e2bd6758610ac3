"""Deterministic signal processing: mel analysis, F0, mel-cepstra, trimming, Griffin-Lim.

Framing never pads: a waveform of ``n`` samples yields
``(n - win_length) // hop_length + 1`` frames.
"""

from __future__ import annotations

import logging
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct

logger = logging.getLogger(__name__)

N_CEPSTRUM = 13


@dataclass(frozen=True)
class MelParams:
    sample_rate: int = 16000
    win_length: int = 800  # 50 ms
    hop_length: int = 200  # 12.5 ms
    n_fft: int = 1024
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    floor: float = 1e-5

    def __post_init__(self):
        if self.win_length < self.hop_length:
            raise ValueError("window must be at least one hop long")
        if self.n_fft < self.win_length:
            raise ValueError("n_fft must cover the window")
        if self.floor <= 0:
            raise ValueError("amplitude floor must be positive")

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.win_length) // self.hop_length + 1


@dataclass(frozen=True)
class F0Track:
    f0: np.ndarray
    voiced: np.ndarray
    hop: float

    def __post_init__(self):
        if np.any(self.f0 < 0):
            raise ValueError("negative f0")
        if not np.array_equal(self.f0 > 0, self.voiced):
            raise ValueError("f0 > 0 must coincide with the voicing mask")

    def __len__(self) -> int:
        return len(self.f0)


def _check_rate(sample_rate, params: MelParams):
    if sample_rate is not None and sample_rate != params.sample_rate:
        raise ValueError(f"expected {params.sample_rate} Hz audio, got {sample_rate} Hz")


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(params: MelParams = MelParams()) -> np.ndarray:
    """Area-normalised triangular filters, shape ``n_mels x (n_fft // 2 + 1)``."""
    n_bins = params.n_fft // 2 + 1
    freqs = np.linspace(0.0, params.sample_rate / 2.0, n_bins)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(params.fmin), _hz_to_mel(params.fmax),
                                   params.n_mels + 2))
    fb = np.zeros((params.n_mels, n_bins))
    for m in range(params.n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(rise, fall))
        fb[m] *= 2.0 / (hi - lo)
    fb.setflags(write=False)
    return fb


def _frames(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = (len(x) - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def stft(x: np.ndarray, params: MelParams) -> np.ndarray:
    window = np.hanning(params.win_length + 1)[:-1]
    frames = _frames(x, params.win_length, params.hop_length) * window
    return np.fft.rfft(frames, n=params.n_fft, axis=1)


def istft(spec: np.ndarray, params: MelParams) -> np.ndarray:
    """Least-squares inverse of :func:`stft` (Griffin & Lim weighted overlap-add)."""
    window = np.hanning(params.win_length + 1)[:-1]
    frames = np.fft.irfft(spec, n=params.n_fft, axis=1)[:, : params.win_length] * window
    n = (len(spec) - 1) * params.hop_length + params.win_length
    out = np.zeros(n)
    norm = np.zeros(n)
    for t, frame in enumerate(frames):
        s = t * params.hop_length
        out[s:s + params.win_length] += frame
        norm[s:s + params.win_length] += window ** 2
    return out / np.maximum(norm, 1e-8)


def compute_mel(waveform, params: MelParams = MelParams(), sample_rate: int | None = None):
    """Log-amplitude mel spectrogram, ``T x n_mels``."""
    _check_rate(sample_rate, params)
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or len(x) < params.win_length:
        raise ValueError(
            f"waveform must be 1-D with at least {params.win_length} samples, got {x.shape}"
        )
    mag = np.abs(stft(x, params))
    return np.log(np.maximum(mag @ mel_filterbank(params).T, params.floor))


def estimate_f0(
    waveform,
    hop: float = 0.0125,
    f0_range: tuple[float, float] = (50.0, 500.0),
    sample_rate: int = 16000,
    frame_length: float = 0.05,
    voicing_threshold: float = 0.6,
    energy_threshold: float = 1e-4,
) -> F0Track:
    """Frame-wise F0 from the normalised autocorrelation.

    A frame is voiced when its RMS exceeds ``energy_threshold`` and the best
    in-range autocorrelation peak exceeds ``voicing_threshold``.  Among peaks
    within 5% of the best, the shortest lag wins, which suppresses octave-down
    errors on strongly periodic input.
    """
    if sample_rate != 16000:
        raise ValueError(f"expected 16000 Hz audio, got {sample_rate} Hz")
    x = np.asarray(waveform, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty waveform")
    win = int(round(frame_length * sample_rate))
    hop_n = int(round(hop * sample_rate))
    if len(x) < win:
        x = np.pad(x, (0, win - len(x)))
    fmin, fmax = f0_range
    min_lag = int(np.floor(sample_rate / fmax))
    max_lag = int(np.ceil(sample_rate / fmin))
    if max_lag + 1 >= win:
        raise ValueError("frame too short for the lowest f0 in range")
    seg = win - max_lag - 1
    frames = _frames(x, win, hop_n)
    f0 = np.zeros(len(frames))
    for t, frame in enumerate(frames):
        frame = frame - frame.mean()
        if np.sqrt(np.mean(frame ** 2)) < energy_threshold:
            continue
        ref = frame[:seg]
        e_ref = ref @ ref
        if e_ref <= 0:
            continue
        lags = np.arange(min_lag - 1, max_lag + 2)
        r = np.empty(len(lags))
        for k, lag in enumerate(lags):
            other = frame[lag:lag + seg]
            denom = np.sqrt(e_ref * (other @ other))
            r[k] = (ref @ other) / denom if denom > 0 else 0.0
        inner = r[1:-1]
        peaks = np.where((inner >= r[:-2]) & (inner >= r[2:]))[0] + 1
        if peaks.size == 0:
            continue
        best = r[peaks].max()
        if best < voicing_threshold:
            continue
        k = peaks[r[peaks] >= 0.95 * best][0]
        a, b, c = r[k - 1], r[k], r[k + 1]
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom != 0 else 0.0
        freq = sample_rate / (lags[k] + shift)
        if fmin <= freq <= fmax:
            f0[t] = freq
    return F0Track(f0, f0 > 0, hop)


def mel_cepstrum(mel) -> np.ndarray:
    """DCT-II (orthonormal) of each log-mel row, keeping coefficients 1..13."""
    mel = np.asarray(mel, dtype=np.float64)
    if not np.all(np.isfinite(mel)):
        raise ValueError("mel contains non-finite values")
    return dct(mel, type=2, norm="ortho", axis=-1)[..., 1:N_CEPSTRUM + 1]


@dataclass(frozen=True)
class TrimResult:
    waveform: np.ndarray
    start: int
    end: int
    all_silent: bool


def trim_silence(
    waveform, threshold_db: float = -40.0, margin_frames: int = 2,
    frame_length: int = 800, hop_length: int = 200,
) -> TrimResult:
    """Drop leading/trailing frames whose RMS is ``threshold_db`` below the peak frame.

    A stand-in energy trimmer for raw audio; the sample span kept is
    ``[first_loud - margin, last_loud + margin]`` in frames.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if len(x) < frame_length:
        frames = x[None, :] if len(x) else np.zeros((0, 1))
    else:
        frames = _frames(x, frame_length, hop_length)
    rms = np.sqrt(np.mean(frames ** 2, axis=1)) if len(frames) else np.zeros(0)
    if rms.size == 0 or rms.max() <= 0:
        logger.warning("trim_silence: input is entirely silent")
        return TrimResult(x[:0], 0, 0, True)
    db = 20 * np.log10(np.maximum(rms, 1e-12) / rms.max())
    loud = np.where(db > threshold_db)[0]
    first = max(loud[0] - margin_frames, 0)
    last = min(loud[-1] + margin_frames, len(rms) - 1)
    start = first * hop_length
    end = len(x) if last == len(rms) - 1 else min(last * hop_length + frame_length, len(x))
    return TrimResult(x[start:end], start, end, False)


def mel_to_magnitude(mel, params: MelParams = MelParams()) -> np.ndarray:
    """Non-negative least-squares-ish linear magnitude via the filterbank pseudo-inverse."""
    fb = mel_filterbank(params)
    amp = np.exp(np.asarray(mel, dtype=np.float64))
    mag = amp @ np.linalg.pinv(fb).T
    return np.maximum(mag, 0.0)


def griffin_lim(
    mel, iterations: int = 32, seed: int = 0, params: MelParams = MelParams(),
    return_errors: bool = False,
):
    """Invert a log-mel spectrogram to audio with seeded-phase Griffin-Lim.

    With ``return_errors`` the per-iteration spectral error
    ``|| |STFT(x_i)| - S ||_F`` is returned alongside the waveform.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    mel = np.asarray(mel, dtype=np.float64)
    if not np.all(np.isfinite(mel)):
        raise ValueError("mel contains non-finite values")
    target = mel_to_magnitude(mel, params)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(target.shape))
    x = istft(target * phase, params)
    errors = []
    for _ in range(iterations):
        spec = stft(x, params)
        errors.append(float(np.linalg.norm(np.abs(spec) - target)))
        x = istft(target * np.exp(1j * np.angle(spec)), params)
    if return_errors:
        errors.append(float(np.linalg.norm(np.abs(stft(x, params)) - target)))
        return x, errors
    return x


def read_wav(path, expected_rate: int = 16000) -> np.ndarray:
    with wave.open(str(path), "rb") as w:
        if w.getframerate() != expected_rate:
            raise ValueError(f"{path}: expected {expected_rate} Hz, got {w.getframerate()} Hz")
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, waveform, sample_rate: int = 16000) -> None:
    x = np.asarray(waveform, dtype=np.float64)
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak > 1.0:
        x = x / peak
    pcm = np.round(np.clip(x, -1.0, 1.0) * 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())

"""STFT / mel analysis, Griffin-Lim vocoding, YIN pitch tracking and WAV I/O.

Every per-frame quantity lives on the same 50 Hz grid: frame ``f`` is centred
on sample ``f * hop`` and a waveform of ``n`` samples has ``ceil(n / hop)``
frames.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft
import scipy.signal

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    hop: int = 320
    window: int = 1024
    fft_size: int = 1024
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float = 8000.0

    @property
    def frame_rate(self):
        return self.sample_rate / self.hop

    @property
    def n_bins(self):
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples):
        return -(-n_samples // self.hop)


DEFAULT_STFT = StftConfig()


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        self.samples = np.asarray(self.samples, dtype=np.float64)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


def _samples(w):
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)


@lru_cache(maxsize=8)
def _window(cfg):
    win = scipy.signal.get_window("hann", cfg.window, fftbins=True)
    pad = (cfg.fft_size - cfg.window) // 2
    return np.pad(win, (pad, cfg.fft_size - cfg.window - pad))


def stft(w, cfg=DEFAULT_STFT, pad_mode="reflect"):
    """Centred Hann STFT, ``ceil(len / hop)`` x ``fft_size // 2 + 1`` complex."""
    x = _samples(w)
    if len(x) < cfg.window:
        raise ValueError(f"waveform of {len(x)} samples is shorter than one window ({cfg.window})")
    half = cfg.fft_size // 2
    xp = np.pad(x, half, mode=pad_mode)
    n_frames = cfg.n_frames(len(x))
    idx = np.arange(cfg.fft_size)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(xp[idx] * _window(cfg), axis=1)


def istft(spec, cfg=DEFAULT_STFT, length=None):
    """Least-squares inverse of :func:`stft` (overlap-add over the squared window)."""
    n_frames = spec.shape[0]
    win = _window(cfg)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1) * win
    total = cfg.fft_size + cfg.hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for f in range(n_frames):
        s = f * cfg.hop
        out[s:s + cfg.fft_size] += frames[f]
        norm[s:s + cfg.fft_size] += win * win
    nz = norm > 1e-11
    out[nz] /= norm[nz]
    half = cfg.fft_size // 2
    if length is None:
        length = n_frames * cfg.hop
    out = out[half:half + length]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out


def _hz_to_mel(f):
    # Slaney: linear below 1 kHz, logarithmic above
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, f / f_sp)


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@lru_cache(maxsize=8)
def mel_filterbank(cfg=DEFAULT_STFT):
    """``n_mels`` x ``n_bins`` triangular filters with Slaney area normalisation."""
    fft_freqs = np.linspace(0, cfg.sample_rate / 2, cfg.n_bins)
    mel_pts = np.linspace(_hz_to_mel(cfg.f_min), _hz_to_mel(cfg.f_max), cfg.n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fdiff = np.diff(hz_pts)
    ramps = hz_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    fb = np.maximum(0, np.minimum(lower, upper))
    fb *= (2.0 / (hz_pts[2:] - hz_pts[:-2]))[:, None]
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=8)
def _filterbank_pinv(cfg):
    p = np.linalg.pinv(mel_filterbank(cfg))
    p.setflags(write=False)
    return p


def mel_power(w, cfg=DEFAULT_STFT):
    spec = stft(w, cfg)
    return (spec.real**2 + spec.imag**2) @ mel_filterbank(cfg).T


def mel_spectrogram(w, cfg=DEFAULT_STFT):
    """Natural-log mel energies, frames x ``n_mels``."""
    return np.log(np.maximum(mel_power(w, cfg), LOG_FLOOR))


def mel_to_magnitude(mel, cfg=DEFAULT_STFT, nnls_iters=200):
    """Linear STFT magnitude from log-mel.

    Non-negative least squares against the filterbank: start from the clipped
    pseudo-inverse, then band-weighted multiplicative updates, which keep
    every bin >= 0.
    """
    fb = mel_filterbank(cfg)
    power_mel = np.maximum(np.exp(mel) - LOG_FLOOR, 0.0)
    power = np.maximum(power_mel @ _filterbank_pinv(cfg).T, 0.0)
    if nnls_iters > 0:
        # multiplicative updates on the band-relative residual
        # sum_b (fb p - m)_b^2 / m_b; they keep p >= 0 but cannot revive an
        # exact zero, hence the tiny offset
        power += 1e-12 * power_mel.max(axis=1, keepdims=True)
        active = power_mel > 0
        inv_m = np.where(active, 1.0 / np.where(active, power_mel, 1.0), 0.0)
        num = active.astype(np.float64) @ fb
        for _ in range(nnls_iters):
            den = (inv_m * (power @ fb.T)) @ fb
            power *= num / np.maximum(den, 1e-300)
    return np.sqrt(power)


def _bin_weights(cfg):
    w = np.full(cfg.n_bins, 2.0)
    w[0] = 1.0
    if cfg.fft_size % 2 == 0:
        w[-1] = 1.0
    return w


def griffin_lim_vocode(mel, cfg=DEFAULT_STFT, iters=32, seed=0, return_history=False):
    """Mel -> waveform: magnitude by non-negative least squares, then Griffin-Lim phase.

    The output is peak-normalised to 0.95 unless it is all zeros. With
    ``return_history`` the per-iteration spectral convergence is returned too.
    """
    mel = np.asarray(mel, dtype=np.float64)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not np.all(np.isfinite(mel)):
        raise ValueError("mel spectrogram contains non-finite values")
    mag = mel_to_magnitude(mel, cfg)
    n_frames = mel.shape[0]
    length = n_frames * cfg.hop
    weights = _bin_weights(cfg)
    ref_norm = math.sqrt(float(np.sum(weights * mag**2)))
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    history = []
    # zero padding keeps stft∘istft an orthogonal projection, which is what
    # makes the spectral convergence non-increasing
    for _ in range(iters):
        x = istft(mag * phase, cfg, length)
        if length < cfg.window:
            break
        spec = stft(x, cfg, pad_mode="constant")
        amp = np.abs(spec)
        if ref_norm > 0:
            history.append(math.sqrt(float(np.sum(weights * (amp - mag) ** 2))) / ref_norm)
        else:
            history.append(0.0)
        phase = np.where(amp > 0, spec / np.where(amp > 0, amp, 1.0), 1.0)
    x = istft(mag * phase, cfg, length)
    peak = np.max(np.abs(x)) if len(x) else 0.0
    if peak > 0:
        x = x * (0.95 / peak)
    if return_history:
        return x, history
    return x


def yin_f0(w, cfg=DEFAULT_STFT, f_min=60.0, f_max=1200.0, threshold=0.15, integration=512):
    """Per-frame F0 in Hz on the STFT frame grid; 0 marks unvoiced frames.

    YIN difference function over an ``integration``-sample window starting at
    each frame centre, cumulative-mean normalisation, absolute threshold, then
    parabolic refinement of the selected lag. Isolated octave jumps against
    the neighbouring voiced frames are re-picked afterwards.
    """
    if f_min >= f_max:
        raise ValueError(f"f_min ({f_min}) must be below f_max ({f_max})")
    x = _samples(w)
    sr = cfg.sample_rate
    tau_min = max(2, int(math.floor(sr / f_max)))
    tau_max = int(math.ceil(sr / f_min))
    n_frames = cfg.n_frames(len(x))
    seg_len = integration + tau_max + 1
    half = integration // 2
    xp = np.pad(x, (half, seg_len))
    starts = np.arange(n_frames) * cfg.hop
    segs = xp[starts[:, None] + np.arange(seg_len)[None, :]]

    # r(tau) = sum_{j<W} x[j] x[j+tau] via FFT cross-correlation
    nfft = 1 << int(math.ceil(math.log2(seg_len + integration)))
    head = np.zeros_like(segs)
    head[:, :integration] = segs[:, :integration]
    cross = np.fft.irfft(np.conj(np.fft.rfft(head, nfft)) * np.fft.rfft(segs, nfft), nfft)[:, :tau_max + 2]
    sq = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(segs**2, axis=1)], axis=1)
    taus = np.arange(tau_max + 2)
    energy0 = sq[:, integration][:, None]
    energy_tau = sq[:, taus + integration] - sq[:, taus]
    diff = np.maximum(energy0 + energy_tau - 2 * cross, 0.0)
    diff[:, 0] = 0.0

    cum = np.cumsum(diff[:, 1:], axis=1)
    cmnd = np.ones_like(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmnd[:, 1:] = np.where(cum > 0, diff[:, 1:] * taus[1:] / cum, 1.0)

    f0 = np.zeros(n_frames)
    silent = energy0[:, 0] < 1e-8 * integration
    for f in range(n_frames):
        if silent[f]:
            continue
        d = cmnd[f]
        below = np.nonzero(d[tau_min:tau_max + 1] < threshold)[0]
        if len(below) == 0:
            continue
        hz = sr / _refine_lag(d, tau_min + below[0], tau_max)
        if f_min <= hz <= f_max:
            f0[f] = hz
    return _fix_octaves(f0, cmnd, sr, tau_min, tau_max)


def _refine_lag(d, tau, tau_max):
    """Walk to the bottom of the dip at ``tau`` and refine it parabolically."""
    while tau + 1 <= tau_max and d[tau + 1] < d[tau]:
        tau += 1
    shift = 0.0
    if 1 <= tau < len(d) - 1:
        a, b, c = d[tau - 1], d[tau], d[tau + 1]
        den = a - 2 * b + c
        if den > 0:
            shift = 0.5 * (a - c) / den
    return tau + shift


def _fix_octaves(f0, cmnd, sr, tau_min, tau_max, radius=2, limit_cents=900.0):
    """Re-pick isolated octave errors.

    A voiced frame more than ``limit_cents`` away from the median of the other
    voiced frames within ``radius`` (at least two of them) gets its lag
    re-searched in a +-3 semitone band around the neighbourhood median.
    """
    voiced = f0 > 0
    out = f0.copy()
    for f in np.nonzero(voiced)[0]:
        lo, hi = max(0, f - radius), min(len(f0), f + radius + 1)
        nb = [f0[k] for k in range(lo, hi) if k != f and voiced[k]]
        if len(nb) < 2:
            continue
        med = float(np.median(nb))
        if abs(1200 * math.log2(f0[f] / med)) <= limit_cents:
            continue
        a = max(tau_min, int(math.floor(sr / (med * 2 ** (3 / 12)))))
        b = min(tau_max, int(math.ceil(sr / (med * 2 ** (-3 / 12)))))
        if b <= a:
            continue
        d = cmnd[f]
        tau = a + int(np.argmin(d[a:b + 1]))
        if 1 <= tau < len(d) - 1:
            x0, x1, x2 = d[tau - 1], d[tau], d[tau + 1]
            den = x0 - 2 * x1 + x2
            out[f] = sr / (tau + (0.5 * (x0 - x2) / den if den > 0 else 0.0))
    return out


def mel_cepstrum(mel, order=13):
    """Orthonormal DCT-II of each log-mel frame, coefficients ``0..order-1``."""
    mel = np.atleast_2d(np.asarray(mel, dtype=np.float64))
    if order > mel.shape[1]:
        raise ValueError(f"order {order} exceeds mel dimension {mel.shape[1]}")
    return scipy.fft.dct(mel, type=2, norm="ortho", axis=1)[:, :order]


def read_wav(path):
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2 or fh.getnchannels() != 1:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        sr = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(pcm / 32767.0, sr)


def write_wav(path, w, sample_rate=16000):
    if isinstance(w, Waveform):
        sample_rate = w.sample_rate
    x = np.clip(_samples(w), -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())

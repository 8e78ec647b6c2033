import math
import wave

import numpy as np
import pytest

from scoreflow.dsp import (DEFAULT_STFT, LOG_FLOOR, StftConfig, Waveform, _hz_to_mel, _mel_to_hz, griffin_lim_vocode,
                           istft, mel_cepstrum, mel_filterbank, mel_power, mel_spectrogram, read_wav, stft, write_wav,
                           yin_f0)
from scoreflow.metrics import mcd

SR = DEFAULT_STFT.sample_rate


def sine(hz, seconds=1.0, amp=0.5):
    t = np.arange(int(seconds * SR)) / SR
    return amp * np.sin(2 * np.pi * hz * t)


@pytest.mark.parametrize("n", [1024, 1025, 16000, 16321])
def test_frame_count_is_ceil(n):
    x = np.random.default_rng(0).normal(size=n)
    assert stft(x).shape == (math.ceil(n / 320), 513)
    assert mel_spectrogram(x).shape == (math.ceil(n / 320), 80)


def test_short_waveform_rejected():
    with pytest.raises(ValueError, match="shorter"):
        stft(np.zeros(100))


def test_istft_inverts_stft():
    x = np.random.default_rng(1).normal(size=8000)
    np.testing.assert_allclose(istft(stft(x), length=len(x)), x, atol=1e-10)


def test_slaney_mel_scale_anchor_points():
    assert _hz_to_mel(1000.0) == pytest.approx(15.0)
    assert _hz_to_mel(2000.0) == pytest.approx(15.0 + 27 * math.log(2) / math.log(6.4))
    f = np.array([0.0, 300.0, 999.0, 1000.0, 4321.0, 8000.0])
    np.testing.assert_allclose(_mel_to_hz(_hz_to_mel(f)), f, atol=1e-9)


def test_filterbank_shape_and_area_normalisation():
    fb = mel_filterbank(DEFAULT_STFT)
    assert fb.shape == (80, 513) and fb.min() >= 0
    # Slaney "area" norm: peak height = 2 / (upper - lower edge in Hz)
    edges = _mel_to_hz(np.linspace(0, _hz_to_mel(8000.0), 82))
    spacing = SR / 1024
    for m in (5, 40, 79):
        triangle_area = fb[m].sum() * spacing
        assert triangle_area == pytest.approx(1.0, rel=0.05)
        assert fb[m].max() <= 2.0 / (edges[m + 2] - edges[m]) + 1e-12


def test_sine_energy_lands_in_its_band():
    p = mel_power(sine(1000.0)).mean(axis=0)
    centres = _mel_to_hz(np.linspace(0, _hz_to_mel(8000.0), 82))[1:-1]
    assert abs(centres[int(np.argmax(p))] - 1000.0) < 60.0


def test_silence_is_log_floor():
    mel = mel_spectrogram(np.zeros(4000))
    assert np.all(mel == np.log(LOG_FLOOR))


def test_mel_cepstrum_is_orthonormal_dct():
    rng = np.random.default_rng(2)
    mel = rng.normal(size=(3, 80))
    c = mel_cepstrum(mel, 13)
    n = 80
    for k in (0, 1, 12):
        basis = np.cos(np.pi * k * (2 * np.arange(n) + 1) / (2 * n)) * math.sqrt((1 if k == 0 else 2) / n)
        np.testing.assert_allclose(c[:, k], mel @ basis, atol=1e-12)
    with pytest.raises(ValueError):
        mel_cepstrum(mel, 81)


# ---------------------------------------------------------------- Griffin-Lim

def test_vocoded_sine_keeps_its_pitch():
    wav = griffin_lim_vocode(mel_spectrogram(sine(440.0)), iters=32, seed=0)
    f0 = yin_f0(wav)
    assert abs(np.median(f0[5:-5]) - 440.0) <= 5.0


def test_spectral_convergence_non_increasing():
    rng = np.random.default_rng(0)
    x = sine(300.0, 0.5) + 0.05 * rng.normal(size=8000)
    _, history = griffin_lim_vocode(mel_spectrogram(x), iters=16, return_history=True)
    assert len(history) == 16
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))


def test_zero_mel_gives_silence():
    wav = griffin_lim_vocode(np.full((20, 80), np.log(LOG_FLOOR)))
    assert len(wav) == 20 * 320
    assert np.all(wav == 0)


def test_vocoder_seeded_and_validates():
    mel = mel_spectrogram(sine(220.0, 0.3))
    assert np.array_equal(griffin_lim_vocode(mel, iters=4, seed=1), griffin_lim_vocode(mel, iters=4, seed=1))
    assert np.abs(griffin_lim_vocode(mel, iters=4)).max() == pytest.approx(0.95)
    with pytest.raises(ValueError):
        griffin_lim_vocode(np.full((3, 80), np.nan))
    with pytest.raises(ValueError):
        griffin_lim_vocode(mel, iters=0)


@pytest.fixture(scope="module")
def sung_mel():
    from scoreflow.corpus import SingerProfile, gen_score, render_singing
    score = gen_score(np.random.default_rng(0), 8)
    return mel_spectrogram(render_singing(score, SingerProfile.make(0, 0)))


@pytest.mark.xfail(strict=True, reason="GL floor under the orthonormal-DCT MCD convention is ~13 dB, see ledger")
def test_griffin_lim_round_trip_below_1p5_db(sung_mel):
    assert mcd(sung_mel, mel_spectrogram(griffin_lim_vocode(sung_mel))) < 1.5


def test_griffin_lim_round_trip_floor(sung_mel):
    # pins the measured floor so regressions in the vocoder show up
    assert mcd(sung_mel, mel_spectrogram(griffin_lim_vocode(sung_mel))) < 15.0


# ---------------------------------------------------------------- YIN

def test_yin_on_a4_sine():
    f0 = yin_f0(sine(440.0))
    interior = f0[3:-3]
    assert np.all(interior > 0)
    assert np.max(np.abs(interior - 440.0)) < 1.0


@pytest.mark.parametrize("hz", [110.0, 261.63, 880.0])
def test_yin_tracks_harmonic_tones(hz):
    t = np.arange(SR) / SR
    x = sum(np.sin(2 * np.pi * hz * k * t) / k for k in range(1, 6) if hz * k < 7000)
    f0 = yin_f0(x)[3:-3]
    assert np.median(np.abs(1200 * np.log2(f0 / hz))) < 5


def test_yin_noise_and_silence_unvoiced():
    noise = np.random.default_rng(0).normal(size=SR)
    assert np.mean(yin_f0(noise) > 0) <= 0.05
    assert np.all(yin_f0(np.zeros(8000)) == 0)


def test_yin_gain_invariant():
    x = sine(330.0, 0.5)
    np.testing.assert_allclose(yin_f0(x), yin_f0(0.1 * x), rtol=1e-9)


def test_yin_rejects_bad_range():
    with pytest.raises(ValueError):
        yin_f0(sine(440.0), f_min=500, f_max=400)


def test_yin_frame_grid_matches_mel():
    x = sine(440.0, 0.77)
    assert len(yin_f0(x)) == len(mel_spectrogram(x))


# ---------------------------------------------------------------- WAV

def test_wav_round_trip_within_pcm16(tmp_path):
    x = np.random.default_rng(3).uniform(-1, 1, 5000)
    write_wav(tmp_path / "a.wav", x)
    w = read_wav(tmp_path / "a.wav")
    assert isinstance(w, Waveform) and w.sample_rate == SR
    assert np.max(np.abs(w.samples - x)) <= 1 / 32768


def test_wav_rejects_stereo(tmp_path):
    with wave.open(str(tmp_path / "s.wav"), "wb") as fh:
        fh.setnchannels(2)
        fh.setsampwidth(2)
        fh.setframerate(SR)
        fh.writeframes(b"\0" * 40)
    with pytest.raises(ValueError, match="mono"):
        read_wav(tmp_path / "s.wav")


def test_config_frame_rate():
    assert DEFAULT_STFT.frame_rate == 50
    assert StftConfig().n_frames(321) == 2

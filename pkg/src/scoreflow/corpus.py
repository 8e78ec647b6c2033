"""Procedural singing corpus: random scores rendered by additive formant synthesis.

Every utterance has known ground truth: the score, the exact F0 contour that
drove the oscillator, and the waveform itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .dsp import DEFAULT_STFT, write_wav
from .score import CONSONANTS, DEFAULT_INVENTORY, REST, VOWELS, MusicScore, Note, validate_score

NOTE_DURATIONS = (0.12, 0.24, 0.36, 0.48)
CONSONANT_S = 0.04
PORTAMENTO_S = 0.03
ONSET_NOISE_S = 0.02
N_PARTIALS = 12
CONTROL_HOP = 80
MAJOR_STEPS = (0, 2, 4, 5, 7, 9, 11)
MIDI_RANGE = (55, 79)

# (centre Hz, bandwidth Hz) for three resonances per phoneme
BASE_FORMANTS = {
    "a": ((800, 270), (1200, 330), (2500, 480)),
    "e": ((500, 210), (1900, 300), (2500, 480)),
    "i": ((300, 180), (2300, 330), (3000, 540)),
    "o": ((500, 210), (900, 270), (2400, 480)),
    "u": ((350, 180), (800, 270), (2300, 480)),
    "k": ((400, 360), (1600, 480), (2600, 660)),
    "l": ((360, 240), (1300, 360), (2700, 600)),
    "m": ((250, 180), (1200, 450), (2200, 600)),
    "n": ((260, 180), (1500, 450), (2500, 600)),
    "s": ((400, 450), (1700, 600), (3500, 900)),
    "t": ((400, 360), (1800, 480), (2700, 660)),
}


@dataclass
class SingerProfile:
    singer_id: int
    formants: dict = field(default_factory=dict)
    vibrato_rate: float = 5.5
    vibrato_depth: float = 25.0
    breathiness: float = 0.02

    def __post_init__(self):
        if not 0 <= self.vibrato_depth <= 100:
            raise ValueError("vibrato depth must be within 0..100 cents")
        for phn, table in self.formants.items():
            for centre, _ in table:
                if not 200 <= centre <= 4000:
                    raise ValueError(f"formant {centre} Hz for {phn!r} outside 200..4000 Hz")

    @classmethod
    def make(cls, singer_id, seed=0):
        rng = np.random.default_rng([seed, singer_id, 7919])
        shift = rng.uniform(0.92, 1.08)
        formants = {
            p: tuple((float(np.clip(c * shift, 200, 4000)), float(b)) for c, b in table)
            for p, table in BASE_FORMANTS.items()
        }
        return cls(singer_id, formants, float(rng.uniform(5.0, 6.5)),
                   float(rng.uniform(15.0, 40.0)), float(rng.uniform(0.01, 0.04)))

    def to_dict(self):
        d = asdict(self)
        d["formants"] = {k: [list(x) for x in v] for k, v in self.formants.items()}
        return d


def midi_to_hz(m):
    return 440.0 * 2.0 ** ((np.asarray(m, dtype=np.float64) - 69) / 12)


def gen_score(rng, phrase_len_notes, phoneme_inventory=DEFAULT_INVENTORY, key=60, singer_id=0):
    """Random diatonic melody; short notes become consonant+vowel note pairs."""
    if phrase_len_notes < 1:
        raise ValueError("phrase_len_notes must be >= 1")
    vowels = [p for p in phoneme_inventory if p in VOWELS]
    consonants = [p for p in phoneme_inventory if p in CONSONANTS]
    if not vowels:
        raise ValueError("phoneme inventory has no vowels")
    scale = [key - 12 + 12 * octv + s for octv in range(3) for s in MAJOR_STEPS]
    scale = [m for m in scale if MIDI_RANGE[0] <= m <= MIDI_RANGE[1]]
    idx = int(rng.integers(len(scale) // 3, 2 * len(scale) // 3))
    notes = []
    t = 0.0
    for i in range(phrase_len_notes):
        if i > 0:
            idx = int(np.clip(idx + rng.integers(-2, 3), 0, len(scale) - 1))
            if rng.random() < 0.1:
                t += float(rng.choice(NOTE_DURATIONS[:2]))
        midi = scale[idx]
        dur = float(rng.choice(NOTE_DURATIONS))
        vowel = str(rng.choice(vowels))
        end = round(t + dur, 6)
        if dur < 0.3 and consonants:
            split = round(t + CONSONANT_S, 6)
            notes.append(Note(str(rng.choice(consonants)), midi, t, split))
            notes.append(Note(vowel, midi, split, end))
        else:
            notes.append(Note(vowel, midi, t, end))
        t = end
    return validate_score(notes, singer_id, phoneme_inventory)


def score_f0_curve(score, profile, sample_rate=16000, n_samples=None):
    """Per-sample F0 in Hz (0 on rests): note pitches, 30 ms glides in cents, vibrato."""
    if n_samples is None:
        n_samples = int(round(score.duration * sample_rate))
    t = np.arange(n_samples) / sample_rate
    cents = np.zeros(n_samples)
    voiced = np.zeros(n_samples, dtype=bool)
    prev = None
    for note in score.notes:
        a = int(round(note.start_s * sample_rate))
        b = min(int(round(note.end_s * sample_rate)), n_samples)
        if note.phoneme == REST or note.midi == 0:
            prev = None
            continue
        target = 100.0 * note.midi
        cents[a:b] = target
        voiced[a:b] = True
        if prev is not None and prev != target:
            g = min(b, a + int(round(PORTAMENTO_S * sample_rate)))
            frac = (np.arange(a, g) - a) / max(1, g - a)
            cents[a:g] = prev + frac * (target - prev)
        prev = target
    cents += profile.vibrato_depth * np.sin(2 * np.pi * profile.vibrato_rate * t)
    return np.where(voiced, 440.0 * 2.0 ** ((cents - 6900.0) / 1200.0), 0.0)


def _resonance(freqs, table):
    gain = np.full(freqs.shape, 0.1)
    for centre, bw in table:
        gain += 1.0 / (1.0 + ((freqs - centre) / (0.5 * bw)) ** 2)
    return gain


def render_singing(score, profile, cfg=DEFAULT_STFT, seed=0, f0_offset_hz=0.0):
    """Additive-synthesis rendering of a score; rests are digital silence.

    ``f0_offset_hz`` shifts every voiced F0 value (used to build corpora with
    a known pitch error).
    """
    sr = cfg.sample_rate
    n = int(round(score.duration * sr))
    if n == 0:
        return np.zeros(0)
    f0 = score_f0_curve(score, profile, sr, n)
    f0 = np.where(f0 > 0, f0 + f0_offset_hz, 0.0)
    voiced = f0 > 0
    phase = 2 * np.pi * np.cumsum(f0) / sr

    # phoneme formant table active at each control point; consonant notes
    # borrow the formants of the vowel that follows them
    ctrl_t = np.arange(0, n + CONTROL_HOP, CONTROL_HOP)
    ctrl_amp = np.zeros((len(ctrl_t), N_PARTIALS))
    ctrl_f0 = np.interp(ctrl_t, np.arange(n), f0)
    notes = score.notes
    for k, note in enumerate(notes):
        a = int(round(note.start_s * sr))
        b = int(round(note.end_s * sr))
        sel = (ctrl_t >= a) & (ctrl_t < b)
        if not sel.any() or note.phoneme == REST:
            continue
        table = profile.formants[note.phoneme]
        if note.phoneme in CONSONANTS and k + 1 < len(notes) and notes[k + 1].phoneme in VOWELS:
            table = tuple(((c1 + c2) / 2, b2) for (c1, _), (c2, b2) in zip(table, profile.formants[notes[k + 1].phoneme]))
        harmonics = ctrl_f0[sel, None] * np.arange(1, N_PARTIALS + 1)[None, :]
        amp = _resonance(harmonics, table) / np.arange(1, N_PARTIALS + 1)
        amp[harmonics >= 0.49 * sr] = 0.0
        amp[ctrl_f0[sel] <= 0] = 0.0
        ctrl_amp[sel] = amp
    idx = np.arange(n)
    out = np.zeros(n)
    for p in range(N_PARTIALS):
        out += np.interp(idx, ctrl_t, ctrl_amp[:, p]) * np.sin((p + 1) * phase)

    rng = np.random.default_rng([seed, profile.singer_id, n])
    level = np.interp(idx, ctrl_t, ctrl_amp.sum(axis=1))
    out += profile.breathiness * level * rng.standard_normal(n) * voiced
    burst_len = int(round(ONSET_NOISE_S * sr))
    burst_env = np.hanning(burst_len)
    for note in notes:
        if note.phoneme in CONSONANTS:
            a = int(round(note.start_s * sr))
            b = min(n, a + burst_len)
            ref = level[a:b].max() if b > a else 0.0
            out[a:b] += 0.3 * ref * burst_env[:b - a] * rng.standard_normal(b - a)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.9 / peak
    return out


@dataclass
class CorpusManifest:
    records: list
    seed: int
    root: Path = None

    def split(self, name):
        return [r for r in self.records if r["split"] == name]

    def path(self, rel):
        return Path(self.root) / rel

    @classmethod
    def load(cls, root):
        root = Path(root)
        meta = json.loads((root / "corpus.json").read_text())
        records = [json.loads(line) for line in (root / "manifest.jsonl").read_text().splitlines() if line]
        return cls(records, meta["seed"], root)


def split_counts(n_utts):
    n_dev = n_utts // 10
    n_test = n_utts // 10
    return n_utts - n_dev - n_test, n_dev, n_test


def build_corpus(n_utts=200, n_singers=2, seed=0, out_dir="corpus", phrase_len=(10, 16),
                 cfg=DEFAULT_STFT):
    """Render ``n_utts`` utterances round-robin over singers; split 80/10/10 in order."""
    if n_utts < n_singers or n_singers < 1:
        raise ValueError("need n_utts >= n_singers >= 1")
    root = Path(out_dir)
    (root / "scores").mkdir(parents=True, exist_ok=True)
    (root / "wavs").mkdir(parents=True, exist_ok=True)
    profiles = [SingerProfile.make(s, seed) for s in range(n_singers)]
    n_train, n_dev, _ = split_counts(n_utts)
    records = []
    for i in range(n_utts):
        rng = np.random.default_rng([seed, i])
        singer = i % n_singers
        key = int(rng.integers(57, 65))
        length = int(rng.integers(phrase_len[0], phrase_len[1] + 1))
        score = gen_score(rng, length, DEFAULT_INVENTORY, key, singer)
        wav = render_singing(score, profiles[singer], cfg, seed=seed * 100003 + i)
        uid = f"utt_{i:04d}"
        (root / "scores" / f"{uid}.json").write_text(score.to_json())
        write_wav(root / "wavs" / f"{uid}.wav", wav, cfg.sample_rate)
        split = "train" if i < n_train else "dev" if i < n_train + n_dev else "test"
        records.append({"id": uid, "score": f"scores/{uid}.json", "wav": f"wavs/{uid}.wav",
                        "singer_id": singer, "split": split})
    with open(root / "manifest.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    meta = {"seed": seed, "n_utts": n_utts, "n_singers": n_singers,
            "singers": [p.to_dict() for p in profiles]}
    (root / "corpus.json").write_text(json.dumps(meta, indent=1))
    return CorpusManifest(records, seed, root)


def load_profiles(root):
    meta = json.loads((Path(root) / "corpus.json").read_text())
    out = {}
    for d in meta["singers"]:
        d = dict(d)
        d["formants"] = {k: tuple(tuple(x) for x in v) for k, v in d["formants"].items()}
        out[d["singer_id"]] = SingerProfile(**d)
    return out

"""Music-score loading, frame expansion and LM task-template assembly.

A score is a list of notes (phoneme, MIDI pitch, start/end seconds). Each note
becomes ``round_half_up(duration * fps)`` copies of a ``(phoneme, pitch)``
token tuple, so duration is carried implicitly by repetition.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

REST = "rest"
VOWELS = ("a", "e", "i", "o", "u")
CONSONANTS = ("k", "l", "m", "n", "s", "t")
DEFAULT_INVENTORY = (REST,) + VOWELS + CONSONANTS

SPECIALS = ("<pad>", "<bos>", "<eos>", "<task_svs>", "<cond_sep>", "<tgt_sep>")
DEFAULT_FPS = 50
N_STREAMS = 9


class ScoreError(ValueError):
    pass


@dataclass(frozen=True)
class Note:
    phoneme: str
    midi: int
    start_s: float
    end_s: float

    @property
    def duration(self):
        return self.end_s - self.start_s

    def describe(self):
        return f"{self.phoneme}/{self.midi} [{self.start_s:.3f}, {self.end_s:.3f})"


@dataclass
class MusicScore:
    notes: list = field(default_factory=list)
    singer_id: int = 0

    @property
    def duration(self):
        return self.notes[-1].end_s if self.notes else 0.0

    def to_json(self):
        doc = {
            "singer_id": self.singer_id,
            "notes": [
                {"phoneme": n.phoneme, "midi": n.midi, "start_s": n.start_s, "end_s": n.end_s}
                for n in self.notes
            ],
        }
        return json.dumps(doc, indent=1)


def validate_score(notes, singer_id=0, inventory=DEFAULT_INVENTORY, tol=1e-9):
    """Check notes and materialise gaps (including a leading one) as rests."""
    inventory = set(inventory)
    notes = sorted(notes, key=lambda n: n.start_s)
    for i, n in enumerate(notes):
        if n.phoneme not in inventory:
            raise ScoreError(f"note {i} ({n.describe()}): unknown phoneme {n.phoneme!r}")
        if not (0 <= n.midi <= 127) or int(n.midi) != n.midi:
            raise ScoreError(f"note {i} ({n.describe()}): midi must be an integer in 0..127")
        if not n.end_s > n.start_s:
            raise ScoreError(f"note {i} ({n.describe()}): non-positive duration")
        if n.start_s < 0:
            raise ScoreError(f"note {i} ({n.describe()}): negative start time")
    out = []
    prev_end = 0.0
    for i, n in enumerate(notes):
        if i > 0 and n.start_s < notes[i - 1].end_s - tol:
            raise ScoreError(
                f"notes overlap: note {i - 1} ({notes[i - 1].describe()}) and note {i} ({n.describe()})")
        if n.start_s > prev_end + tol:
            out.append(Note(REST, 0, prev_end, n.start_s))
        out.append(n)
        prev_end = n.end_s
    return MusicScore(out, singer_id)


def load_score(text, inventory=DEFAULT_INVENTORY):
    """Parse a JSON score document into a validated :class:`MusicScore`."""
    try:
        doc = json.loads(text)
        notes = [Note(str(d["phoneme"]), int(d["midi"]), float(d["start_s"]), float(d["end_s"]))
                 for d in doc["notes"]]
        singer_id = int(doc.get("singer_id", 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise ScoreError(f"malformed score document: {exc}") from exc
    return validate_score(notes, singer_id, inventory)


def round_half_up(x):
    # tolerance absorbs binary representation error, e.g. 0.03 * 50
    return int(math.floor(x + 0.5 + 1e-9))


def note_repeats(score, fps=DEFAULT_FPS):
    return [round_half_up(n.duration * fps) for n in score.notes]


def phn_token(phoneme):
    return f"svs_phn_{phoneme}"


def pitch_token(midi):
    return f"svs_pitch_{midi}"


def expand_frames(score, fps=DEFAULT_FPS):
    """Frame-level ``(phoneme token, pitch token)`` tuples for a score."""
    frames = []
    for note, rep in zip(score.notes, note_repeats(score, fps)):
        if rep == 0:
            log.warning("dropping note %s: rounds to zero frames at %d fps", note.describe(), fps)
            continue
        frames.extend([(phn_token(note.phoneme), pitch_token(note.midi))] * rep)
    return frames


def frame_pitches(frames):
    """MIDI number per frame, parsed back out of the pitch tokens."""
    return np.array([int(p.rsplit("_", 1)[1]) for _, p in frames], dtype=np.int64)


def collapse_frames(frames, fps=DEFAULT_FPS):
    """Run-length decode frames into ``(phoneme token, pitch token, seconds)`` runs."""
    runs = []
    for tup in frames:
        if runs and runs[-1][0] == tup:
            runs[-1][1] += 1
        else:
            runs.append([tup, 1])
    return [(t[0], t[1], n / fps) for t, n in runs]


class TokenVocab:
    """Dense token <-> id map: specials, ``svs_phn_*`` (sorted), ``svs_pitch_0..127``."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, phoneme_inventory=DEFAULT_INVENTORY):
        inv = list(phoneme_inventory)
        if not inv:
            raise ValueError("phoneme inventory is empty")
        if len(set(inv)) != len(inv):
            dup = sorted({p for p in inv if inv.count(p) > 1})
            raise ValueError(f"duplicate phoneme(s) in inventory: {dup}")
        tokens = list(SPECIALS) + [phn_token(p) for p in sorted(inv)] + [pitch_token(m) for m in range(128)]
        return cls(tokens)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._ids

    def id(self, token):
        return self._ids[token]

    def token(self, i):
        return self.tokens[i]

    def to_tsv(self):
        return "".join(f"{t}\t{i}\n" for i, t in enumerate(self.tokens))

    @classmethod
    def from_tsv(cls, text):
        rows = [line.split("\t") for line in text.splitlines() if line]
        rows.sort(key=lambda r: int(r[1]))
        if [int(r[1]) for r in rows] != list(range(len(rows))):
            raise ValueError("vocabulary ids are not dense from 0")
        return cls(r[0] for r in rows)


def build_vocab(phoneme_inventory=DEFAULT_INVENTORY):
    return TokenVocab.build(phoneme_inventory)


@dataclass
class TaskSequence:
    """One LM example laid out on the ``rows x n_q`` grid.

    ``grid`` holds input ids: vocabulary ids for text/special tokens and
    ``codec_offset + k`` for codec token ``k``. ``labels`` holds raw codec ids
    on target rows and -1 elsewhere.
    """

    grid: np.ndarray
    labels: np.ndarray
    loss_mask: np.ndarray
    cond_start: int
    prompt_start: int
    target_start: int
    codec_offset: int

    @property
    def boundaries(self):
        return (self.cond_start, self.prompt_start, self.target_start)

    @property
    def n_rows(self):
        return self.grid.shape[0]

    @property
    def n_target(self):
        return self.n_rows - self.target_start

    @property
    def n_condition(self):
        return self.prompt_start - 1 - self.cond_start

    def context(self):
        """Inference-mode copy: everything up to and including ``<tgt_sep>``."""
        return TaskSequence(self.grid[:self.target_start].copy(), self.labels[:self.target_start].copy(),
                            self.loss_mask[:self.target_start].copy(), self.cond_start,
                            self.prompt_start, self.target_start, self.codec_offset)


def assemble_template(frames, prompt, target=None, vocab=None, max_prompt=150, n_q=N_STREAMS):
    """Lay out ``<task_svs> | condition | <cond_sep> | prompt | <tgt_sep> | target``.

    Condition frames put the phoneme id in stream 0, the pitch id in stream 1
    and ``<pad>`` elsewhere; prompt and target rows carry codec tokens in all
    streams. ``target=None`` builds an inference-mode sequence.
    """
    vocab = vocab or build_vocab()
    prompt = np.zeros((0, n_q), dtype=np.int64) if prompt is None else np.asarray(prompt, dtype=np.int64)
    if prompt.shape[0] > max_prompt:
        raise ValueError(f"prompt has {prompt.shape[0]} frames, limit is {max_prompt}")
    n_cond = len(frames)
    if target is not None:
        target = np.asarray(target, dtype=np.int64)
        if abs(target.shape[0] - n_cond) > 1:
            raise ValueError(f"target has {target.shape[0]} frames but condition has {n_cond}")
    off = len(vocab)
    pad = vocab.id("<pad>")

    def marker(name):
        return np.full((1, n_q), vocab.id(name), dtype=np.int64)

    cond = np.full((n_cond, n_q), pad, dtype=np.int64)
    for i, (phn, pitch) in enumerate(frames):
        cond[i, 0] = vocab.id(phn)
        cond[i, 1] = vocab.id(pitch)
    parts = [marker("<task_svs>"), cond, marker("<cond_sep>"), prompt + off, marker("<tgt_sep>")]
    if target is not None:
        parts.append(target + off)
    grid = np.concatenate(parts, axis=0)
    target_start = 1 + n_cond + 1 + prompt.shape[0] + 1
    labels = np.full(grid.shape, -1, dtype=np.int64)
    mask = np.zeros(grid.shape[0], dtype=bool)
    if target is not None:
        labels[target_start:] = target
        mask[target_start:] = True
    return TaskSequence(grid, labels, mask, 1, 1 + n_cond + 1, target_start, off)

"""Objective scores: F0 RMSE / correlation on mutually voiced frames, and
DTW-aligned mel-cepstral distortion.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import DEFAULT_STFT, mel_cepstrum, mel_spectrogram, read_wav, yin_f0

log = logging.getLogger(__name__)

MCD_CONST = 10.0 * math.sqrt(2.0) / math.log(10.0)
REPORT_COLUMNS = ("utterance_id", "f0_rmse", "f0_corr", "mcd", "voiced_overlap")
METRICS = ("f0_rmse", "f0_corr", "mcd")


class MetricUndefined(ValueError):
    """A metric's precondition failed (e.g. no mutually voiced frames)."""


def _voiced_pair(ref, hyp):
    ref = np.asarray(ref, dtype=np.float64)
    hyp = np.asarray(hyp, dtype=np.float64)
    n = min(len(ref), len(hyp))
    ref, hyp = ref[:n], hyp[:n]
    both = (ref > 0) & (hyp > 0)
    return ref[both], hyp[both]


def voiced_overlap(ref, hyp):
    """Share of reference-voiced frames that are also voiced in ``hyp``."""
    ref = np.asarray(ref)
    hyp = np.asarray(hyp)
    n = min(len(ref), len(hyp))
    rv = ref[:n] > 0
    if not rv.any():
        return 0.0
    return float(np.mean(hyp[:n][rv] > 0))


def f0_rmse(ref, hyp, unit="hz"):
    """RMSE over frames voiced in both tracks, in Hz (or cents with ``unit="cents"``)."""
    r, h = _voiced_pair(ref, hyp)
    if len(r) == 0:
        raise MetricUndefined("f0_rmse undefined: no mutually voiced frames")
    if unit == "cents":
        r, h = 1200 * np.log2(r), 1200 * np.log2(h)
    elif unit != "hz":
        raise ValueError(f"unit must be 'hz' or 'cents', got {unit!r}")
    return float(np.sqrt(np.mean((r - h) ** 2)))


def f0_corr(ref, hyp):
    """Pearson correlation over mutually voiced frames."""
    r, h = _voiced_pair(ref, hyp)
    if len(r) < 2:
        raise MetricUndefined(f"f0_corr undefined: {len(r)} mutually voiced frame(s)")
    rc, hc = r - r.mean(), h - h.mean()
    den = math.sqrt(float(rc @ rc) * float(hc @ hc))
    if den == 0:
        raise MetricUndefined("f0_corr undefined: a track has zero variance")
    return float(np.clip((rc @ hc) / den, -1.0, 1.0))


def dtw_align(costs):
    """Minimum-cost monotone path through an A x B cost matrix.

    Steps (1,1), (1,0), (0,1); ties prefer the diagonal, then (1,0).
    Returns ``(path, total_cost)``.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2 or c.size == 0:
        raise ValueError("dtw needs a non-empty 2-D cost matrix")
    if not np.all(np.isfinite(c)):
        raise ValueError("dtw costs must be finite")
    a, b = c.shape
    acc = np.full((a + 1, b + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, a + 1):
        row, prev = acc[i], acc[i - 1]
        ci = c[i - 1]
        for j in range(1, b + 1):
            row[j] = ci[j - 1] + min(prev[j - 1], prev[j], row[j - 1])
    path = []
    i, j = a, b
    while True:
        path.append((i - 1, j - 1))
        if i == 1 and j == 1:
            break
        options = (acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
        k = int(np.argmin(options))  # first minimum -> diagonal, then (1,0)
        if k == 0:
            i, j = i - 1, j - 1
        elif k == 1:
            i -= 1
        else:
            j -= 1
    path.reverse()
    return path, float(acc[a, b])


def cepstra(mel, order=13):
    """Mel-cepstral coefficients c1..c_order (c0 dropped)."""
    return mel_cepstrum(mel, order + 1)[:, 1:]


def mcd(ref_mel, hyp_mel, order=13, use_dtw=True):
    """Mel-cepstral distortion in dB, mean over the aligned frame pairs."""
    ref_mel = np.asarray(ref_mel, dtype=np.float64)
    hyp_mel = np.asarray(hyp_mel, dtype=np.float64)
    if ref_mel.size == 0 or hyp_mel.size == 0:
        raise ValueError("mcd needs non-empty spectrograms")
    a, b = cepstra(ref_mel, order), cepstra(hyp_mel, order)
    if use_dtw:
        d = np.sqrt(np.maximum(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1), 0.0))
        path, _ = dtw_align(d)
        ii, jj = np.array(path).T
        dist = d[ii, jj]
    else:
        n = min(len(a), len(b))
        dist = np.linalg.norm(a[:n] - b[:n], axis=1)
    return float(MCD_CONST * dist.mean())


def score_pair(ref, hyp, cfg=DEFAULT_STFT):
    """All metrics for one (reference, hypothesis) waveform pair.

    Failed preconditions become ``None`` with the reason in ``errors``.
    """
    row = {"f0_rmse": None, "f0_corr": None, "mcd": None, "voiced_overlap": None}
    errors = {}
    fr, fh = yin_f0(ref, cfg), yin_f0(hyp, cfg)
    row["voiced_overlap"] = voiced_overlap(fr, fh)
    for name, fn in (("f0_rmse", f0_rmse), ("f0_corr", f0_corr)):
        try:
            row[name] = fn(fr, fh)
        except MetricUndefined as exc:
            errors[name] = str(exc)
    try:
        row["mcd"] = mcd(mel_spectrogram(ref, cfg), mel_spectrogram(hyp, cfg))
    except ValueError as exc:
        errors["mcd"] = str(exc)
    return row, errors


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    system: str = "system"

    def aggregates(self):
        out = {}
        for m in METRICS + ("voiced_overlap",):
            vals = np.array([r[m] for r in self.rows if r.get(m) is not None], dtype=np.float64)
            out[m] = {
                "mean": float(vals.mean()) if len(vals) else None,
                "std": float(vals.std()) if len(vals) else None,
                "count": int(len(vals)),
            }
        return out

    def write(self, out_dir, stem="metrics"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r["utterance_id"]] + [_fmt(r[c]) for c in REPORT_COLUMNS[1:]])
        summary = {"system": self.system, "n_utterances": len(self.rows), "aggregates": self.aggregates(),
                   "failures": {r["utterance_id"]: r["errors"] for r in self.rows if r.get("errors")}}
        (out / f"{stem}.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        with open(out / f"{stem}_long.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("system", "utterance_id", "metric", "value"))
            for r in self.rows:
                for m in METRICS + ("voiced_overlap",):
                    w.writerow((self.system, r["utterance_id"], m, _fmt(r[m])))
        return out / f"{stem}.csv"


def _fmt(v):
    return "" if v is None else repr(float(v))


def read_report_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({k: (r[k] if k == "utterance_id" else (float(r[k]) if r[k] else None))
                         for k in REPORT_COLUMNS})
    return rows


def evaluate_corpus(pairs, cfg=DEFAULT_STFT, system="system"):
    """Score ``(utterance_id, ref_wav_path, hyp_wav_path)`` triples.

    A file that cannot be read marks only its own row as failed. Rows are
    sorted by utterance id.
    """
    pairs = sorted(pairs, key=lambda p: p[0])
    if not pairs:
        raise ValueError("evaluate_corpus needs at least one pair")
    rows = []
    for uid, ref_path, hyp_path in pairs:
        try:
            ref, hyp = read_wav(ref_path), read_wav(hyp_path)
            row, errors = score_pair(ref, hyp, cfg)
        except (OSError, ValueError, EOFError) as exc:
            log.warning("%s: %s", uid, exc)
            row = {"f0_rmse": None, "f0_corr": None, "mcd": None, "voiced_overlap": None}
            errors = {"file": str(exc)}
        row["utterance_id"] = uid
        row["errors"] = errors
        rows.append(row)
    return MetricReport(rows, system)

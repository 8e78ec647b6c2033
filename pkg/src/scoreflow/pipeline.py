"""Stage orchestration: corpus -> codec -> LM -> flow -> synthesis -> evaluation.

Every stage reads its inputs from, and writes its outputs under, one work
directory. Checkpoints are verified (magic, version, stage tag) before use,
and each command leaves a resolved key = value config snapshot next to what
it wrote.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .checkpoint import CheckpointError
from .codec import RvqCodec
from .corpus import CorpusManifest, build_corpus
from .dsp import DEFAULT_STFT, griffin_lim_vocode, mel_spectrogram, read_wav, write_wav
from .flow import FlowMatcher, OdeConfig, synthesize_mel
from .lm import MultiStreamLM
from .metrics import METRICS, evaluate_corpus
from .score import TokenVocab, assemble_template, build_vocab, expand_frames, frame_pitches, load_score

log = logging.getLogger(__name__)

STAGE_FILES = {"codec": "codec.ckpt", "lm": "lm.ckpt", "flow1": "flow1.ckpt", "flow2": "flow2.ckpt"}


class PrerequisiteError(RuntimeError):
    """An upstream artifact is missing or fails verification."""


class UsageError(ValueError):
    pass


@dataclass
class PipelineConfig:
    work_dir: str = "work"
    seed: int = 0
    # corpus
    n_utts: int = 200
    n_singers: int = 2
    # codec
    n_stages: int = 8
    n_codes: int = 256
    codec_context: int = 2
    codec_iters: int = 30
    # lm
    lm_dim: int = 128
    lm_layers: int = 2
    lm_heads: int = 4
    lm_max_frames: int = 1536
    lm_steps: int = 2000
    lm_lr: float = 3e-4
    lm_warmup: int = 100
    prompt_frames: int = 150
    sampling: str = "top_k"
    top_k: int = 20
    temperature: float = 1.0
    # flow
    mode: str = "flow1"
    flow_epochs: int = 30
    flow_batch: int = 4
    flow_lr: float = 3e-4
    flow_end_lr: float = 1e-4
    flow_warmup: int = 50
    flow_hidden: int = 256
    flow_window: int = 4
    ode_steps: int = 32
    solver: str = "euler"
    # vocoder
    gl_iters: int = 32

    @property
    def root(self):
        return Path(self.work_dir)

    @property
    def corpus_dir(self):
        return self.root / "corpus"

    @property
    def ckpt_dir(self):
        return self.root / "checkpoints"

    @property
    def systems_dir(self):
        return self.root / "systems"

    @property
    def report_dir(self):
        return self.root / "reports"

    def stage_seed(self, *names):
        return stage_seed(self.seed, *names)

    def to_text(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text, overrides=None):
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"config line {n}: expected 'key = value', got {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            values[k] = v
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values):
        kinds = {f.name: type(f.default) for f in dataclasses.fields(cls)}
        kwargs = {}
        for k, v in values.items():
            if k not in kinds:
                raise UsageError(f"unknown config key {k!r}")
            try:
                kwargs[k] = kinds[k](v)
            except ValueError as exc:
                raise UsageError(f"config key {k!r}: {exc}") from exc
        return cls(**kwargs)


def stage_seed(seed, *names):
    """Stable 32-bit seed for a named substream of the global seed."""
    digest = hashlib.sha256(":".join([str(seed), *map(str, names)]).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def write_snapshot(cfg, out_dir, command):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}.config").write_text(cfg.to_text())


def write_curve(path, rows, header=("step", "loss")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])


# ------------------------------------------------------------------ loading

def load_manifest(cfg):
    if not (cfg.corpus_dir / "manifest.jsonl").exists():
        raise PrerequisiteError(f"corpus manifest missing under {cfg.corpus_dir} (run build-corpus)")
    return CorpusManifest.load(cfg.corpus_dir)


def load_stage(cfg, stage):
    path = cfg.ckpt_dir / STAGE_FILES[stage]
    if not path.exists():
        raise PrerequisiteError(f"{stage} checkpoint missing ({path}); run train-{stage[:4] if stage.startswith('flow') else stage} first")
    try:
        arrays = checkpoint.load(path, stage=stage)
    except CheckpointError as exc:
        raise PrerequisiteError(f"{stage} checkpoint at {path} failed verification: {exc}") from exc
    if stage == "codec":
        return RvqCodec.from_arrays(arrays)
    if stage == "lm":
        return MultiStreamLM.from_arrays(arrays)
    return FlowMatcher.from_arrays(arrays)


def utterance_mel(manifest, rec, cfg_stft=DEFAULT_STFT):
    return mel_spectrogram(read_wav(manifest.path(rec["wav"])), cfg_stft)


def utterance_score(manifest, rec):
    return load_score(manifest.path(rec["score"]).read_text())


def prompt_record(manifest, singer_id, exclude=None):
    """Prompt source: the first training utterance of ``singer_id`` other than
    ``exclude``, cycling on from ``exclude`` when it is itself a train record."""
    pool = [r for r in manifest.split("train") if r["singer_id"] == singer_id]
    if exclude is not None:
        ids = [r["id"] for r in pool]
        if exclude in ids and len(pool) > 1:
            return pool[(ids.index(exclude) + 1) % len(pool)]
    pool = [r for r in pool if r["id"] != exclude]
    if not pool:
        raise UsageError(f"no prompt source for singer {singer_id}")
    return pool[0]


# ------------------------------------------------------------------ commands

def cmd_build_corpus(cfg, force=False):
    root = cfg.corpus_dir
    if (root / "manifest.jsonl").exists():
        if not force:
            raise UsageError(f"corpus already exists at {root}; pass --force to overwrite")
        shutil.rmtree(root)
    manifest = build_corpus(cfg.n_utts, cfg.n_singers, cfg.stage_seed("corpus"), root)
    write_snapshot(cfg, root, "build-corpus")
    return manifest


def cmd_train_codec(cfg):
    manifest = load_manifest(cfg)
    mels = [utterance_mel(manifest, r) for r in manifest.split("train")]
    codec = RvqCodec(cfg.n_stages, cfg.n_codes, cfg.codec_context, cfg.codec_iters,
                     random_state=cfg.stage_seed("codec")).fit(mels)
    cfg.ckpt_dir.mkdir(parents=True, exist_ok=True)
    checkpoint.save(cfg.ckpt_dir / STAGE_FILES["codec"], codec.to_arrays(), stage="codec")
    # curve: training-set reconstruction MSE after each residual stage
    x = np.concatenate(mels)
    tokens = codec.encode(x)
    rows = [(s, float(np.mean((codec.decode(tokens, s) - x) ** 2))) for s in range(1, cfg.n_stages + 1)]
    write_curve(cfg.ckpt_dir / "codec_curve.csv", rows, ("stage", "mse"))
    write_snapshot(cfg, cfg.ckpt_dir, "train-codec")
    return codec


def _target_tokens(tokens, n_frames):
    if abs(len(tokens) - n_frames) > 1:
        raise ValueError(f"{len(tokens)} codec frames vs {n_frames} score frames")
    return tokens[:n_frames]


def lm_sequences(cfg, manifest, codec, vocab, split="train"):
    recs = manifest.split(split)
    tokens = {}

    def toks(rec):
        if rec["id"] not in tokens:
            tokens[rec["id"]] = codec.encode(utterance_mel(manifest, rec))
        return tokens[rec["id"]]

    seqs = []
    for rec in recs:
        frames = expand_frames(utterance_score(manifest, rec))
        prompt = toks(prompt_record(manifest, rec["singer_id"], rec["id"]))[:cfg.prompt_frames]
        target = _target_tokens(toks(rec), len(frames))
        seqs.append(assemble_template(frames[:len(target)], prompt, target, vocab, cfg.prompt_frames, cfg.n_stages + 1))
    return seqs


def cmd_train_lm(cfg):
    manifest = load_manifest(cfg)
    codec = load_stage(cfg, "codec")
    vocab = build_vocab()
    seqs = lm_sequences(cfg, manifest, codec, vocab)
    lm = MultiStreamLM(model_dim=cfg.lm_dim, layers=cfg.lm_layers, heads=cfg.lm_heads,
                       max_frames=cfg.lm_max_frames, n_codes=cfg.n_codes, n_streams=cfg.n_stages + 1,
                       in_vocab=len(vocab) + cfg.n_codes, steps=cfg.lm_steps, lr=cfg.lm_lr,
                       warmup=cfg.lm_warmup, random_state=cfg.stage_seed("lm")).fit(seqs)
    checkpoint.save(cfg.ckpt_dir / STAGE_FILES["lm"], lm.to_arrays(), stage="lm")
    (cfg.ckpt_dir / "vocab.tsv").write_text(vocab.to_tsv())
    write_curve(cfg.ckpt_dir / "lm_curve.csv", lm.curve_)
    write_snapshot(cfg, cfg.ckpt_dir, "train-lm")
    return lm


def flow_training_data(cfg, manifest, codec, split="train"):
    mels, conds, pitches = [], [], []
    for rec in manifest.split(split):
        mel = utterance_mel(manifest, rec)
        mels.append(mel)
        conds.append(codec.embed(codec.encode(mel)))
        midi = frame_pitches(expand_frames(utterance_score(manifest, rec)))
        pitches.append(_fit_track(midi, len(mel)))
    return mels, conds, pitches


def _fit_track(midi, n):
    if len(midi) >= n:
        return midi[:n]
    return np.concatenate([midi, np.repeat(midi[-1:], n - len(midi))])


def make_flow(cfg, mode):
    return FlowMatcher(mode=mode, window=cfg.flow_window, hidden=cfg.flow_hidden, epochs=cfg.flow_epochs,
                       batch_size=cfg.flow_batch, lr=cfg.flow_lr, end_lr=cfg.flow_end_lr,
                       warmup=cfg.flow_warmup, random_state=cfg.stage_seed("flow", mode))


def cmd_train_flow(cfg, mode=None):
    mode = mode or cfg.mode
    if mode not in ("flow1", "flow2"):
        raise UsageError(f"mode must be flow1 or flow2, got {mode!r}")
    manifest = load_manifest(cfg)
    codec = load_stage(cfg, "codec")
    load_stage(cfg, "lm")  # stage order: codec -> lm -> flow
    mels, conds, pitches = flow_training_data(cfg, manifest, codec)
    flow = make_flow(cfg, mode).fit(mels, conds, pitches)
    checkpoint.save(cfg.ckpt_dir / STAGE_FILES[mode], flow.to_arrays(), stage=mode)
    write_curve(cfg.ckpt_dir / f"{mode}_curve.csv", flow.curve_)
    write_curve(cfg.ckpt_dir / f"{mode}_epochs.csv", list(enumerate(flow.epoch_loss_)), ("epoch", "loss"))
    write_snapshot(cfg, cfg.ckpt_dir, f"train-flow-{mode}")
    return flow


class Synthesizer:
    """Score -> tokens -> mel -> waveform with loaded, verified checkpoints."""

    def __init__(self, cfg, mode=None):
        self.cfg = cfg
        self.mode = mode or cfg.mode
        self.manifest = load_manifest(cfg)
        self.codec = load_stage(cfg, "codec")
        self.lm = load_stage(cfg, "lm")
        self.flow = load_stage(cfg, self.mode)
        vocab_path = cfg.ckpt_dir / "vocab.tsv"
        self.vocab = TokenVocab.from_tsv(vocab_path.read_text()) if vocab_path.exists() else build_vocab()
        self._prompts = {}

    def prompt(self, singer_id):
        if singer_id not in self._prompts:
            if not any(r["singer_id"] == singer_id for r in self.manifest.split("train")):
                raise UsageError(f"unknown singer_id {singer_id}: no training utterance to prompt from")
            rec = prompt_record(self.manifest, singer_id)
            mel = utterance_mel(self.manifest, rec)
            self._prompts[singer_id] = self.codec.encode(mel)[:self.cfg.prompt_frames]
        return self._prompts[singer_id]

    def tokens(self, score, key):
        frames = expand_frames(score)
        ctx = assemble_template(frames, self.prompt(score.singer_id), None, self.vocab, self.cfg.prompt_frames,
                                self.cfg.n_stages + 1)
        return self.lm.predict(ctx, len(frames), sampling=self.cfg.sampling, top_k=self.cfg.top_k,
                               temperature=self.cfg.temperature, seed=self.cfg.stage_seed("lm-sample", key)), frames

    def __call__(self, score, key):
        tokens, frames = self.tokens(score, key)
        ode = OdeConfig(self.cfg.solver, self.cfg.ode_steps, self.cfg.stage_seed("ode", key))
        mel = synthesize_mel(self.flow, self.codec, tokens, frame_pitches(frames), ode)
        wav = griffin_lim_vocode(mel, DEFAULT_STFT, self.cfg.gl_iters, seed=self.cfg.stage_seed("vocoder", key))
        return wav, mel, tokens


def _dump(out_dir, stem, wav, mel, tokens):
    out_dir.mkdir(parents=True, exist_ok=True)
    write_wav(out_dir / f"{stem}.wav", wav, DEFAULT_STFT.sample_rate)
    checkpoint.save(out_dir / f"{stem}.mel", {"mel": mel})
    if tokens is not None:
        (out_dir / f"{stem}.tokens").write_bytes(checkpoint.dump_stream_matrix(tokens))


def cmd_synthesize(cfg, score_path=None, singer_id=None, split=None, resynthesis=False):
    """Single score (``score_path``) or a whole split into ``systems/<name>``."""
    if resynthesis:
        return cmd_resynthesize(cfg, split or "test")
    if (score_path is None) == (split is None):
        raise UsageError("synthesize needs exactly one of a score path or --split")
    synth = Synthesizer(cfg)
    if score_path is not None:
        score = load_score(Path(score_path).read_text())
        if singer_id is not None:
            score.singer_id = singer_id
        stem = f"{Path(score_path).stem}_{synth.mode}"
        wav, mel, tokens = synth(score, Path(score_path).stem)
        out = cfg.root / "synth"
        _dump(out, stem, wav, mel, tokens)
        write_snapshot(cfg, out, f"synthesize-{stem}")
        return out / f"{stem}.wav"
    out = cfg.systems_dir / synth.mode
    for rec in synth.manifest.split(split):
        wav, mel, tokens = synth(utterance_score(synth.manifest, rec), rec["id"])
        _dump(out, rec["id"], wav, mel, tokens)
    write_snapshot(cfg, out, f"synthesize-{split}")
    return out


def cmd_resynthesize(cfg, split="test"):
    """Codec upper bound: reference mel -> RVQ encode/decode -> Griffin-Lim."""
    manifest = load_manifest(cfg)
    codec = load_stage(cfg, "codec")
    out = cfg.systems_dir / "resynthesis"
    for rec in manifest.split(split):
        tokens = codec.encode(utterance_mel(manifest, rec))
        mel = codec.decode(tokens)
        wav = griffin_lim_vocode(mel, DEFAULT_STFT, cfg.gl_iters, seed=cfg.stage_seed("vocoder", rec["id"]))
        _dump(out, rec["id"], wav, mel, tokens)
    write_snapshot(cfg, out, f"synthesize-{split}")
    return out


def cmd_evaluate(cfg, system, split="test"):
    manifest = load_manifest(cfg)
    if system == "reference":
        hyp_dir = cfg.corpus_dir / "wavs"
    else:
        hyp_dir = cfg.systems_dir / system
        if not hyp_dir.is_dir():
            raise PrerequisiteError(f"no synthesized outputs for system {system!r} at {hyp_dir}")
    pairs = [(r["id"], manifest.path(r["wav"]), hyp_dir / f"{r['id']}.wav") for r in manifest.split(split)]
    report = evaluate_corpus(pairs, DEFAULT_STFT, system)
    path = report.write(cfg.report_dir, f"{system}_{split}")
    write_snapshot(cfg, cfg.report_dir, f"evaluate-{system}-{split}")
    return report, path


def cmd_report(cfg):
    """Collect every evaluation summary into one table plus a long-format CSV."""
    rd = cfg.report_dir
    summaries = sorted(rd.glob("*.json")) if rd.is_dir() else []
    summaries = [p for p in summaries if p.name != "summary.json"]
    if not summaries:
        raise PrerequisiteError(f"no evaluation reports under {rd} (run evaluate first)")
    table = []
    for p in summaries:
        doc = json.loads(p.read_text())
        for m in METRICS + ("voiced_overlap",):
            agg = doc["aggregates"][m]
            table.append({"report": p.stem, "system": doc["system"], "metric": m, **agg})
    with open(rd / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("report", "system", "metric", "mean", "std", "count"))
        for r in table:
            w.writerow([r["report"], r["system"], r["metric"],
                        "" if r["mean"] is None else repr(r["mean"]),
                        "" if r["std"] is None else repr(r["std"]), r["count"]])
    (rd / "summary.json").write_text(json.dumps(table, indent=1) + "\n")
    with open(rd / "all_long.csv", "w", newline="") as out:
        out.write("report,system,utterance_id,metric,value\n")
        for p in summaries:
            long_path = rd / f"{p.stem}_long.csv"
            if long_path.exists():
                for line in long_path.read_text().splitlines()[1:]:
                    out.write(f"{p.stem},{line}\n")
    write_snapshot(cfg, rd, "report")
    return rd / "summary.csv"

"""Small causal transformer over multi-stream token frames.

Each grid row (one frame) is embedded as the sum of its per-stream token
embeddings plus a learned position embedding. Row ``t`` produces one logit
vector per stream, read as the prediction for row ``t + 1``; all streams are
predicted in parallel from the same hidden state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor, parameter

log = logging.getLogger(__name__)

MASK_VALUE = -1e9


@dataclass(frozen=True)
class LmConfig:
    in_vocab: int
    n_codes: int = 256
    n_streams: int = 9
    model_dim: int = 128
    layers: int = 2
    heads: int = 4
    max_frames: int = 1024
    mlp_ratio: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.dropout != 0.0:
            raise ValueError("dropout is not supported")


def init_params(cfg, seed=0):
    rng = np.random.default_rng(seed)
    d = cfg.model_dim
    std = 0.02

    def normal(*shape, scale=std):
        return rng.normal(scale=scale, size=shape)

    p = {
        "tok_emb": normal(cfg.n_streams * cfg.in_vocab, d),
        "pos_emb": normal(cfg.max_frames, d),
    }
    for i in range(cfg.layers):
        p.update({
            f"b{i}.ln1_g": np.ones(d), f"b{i}.ln1_b": np.zeros(d),
            f"b{i}.qkv_w": normal(d, 3 * d), f"b{i}.qkv_b": np.zeros(3 * d),
            f"b{i}.out_w": normal(d, d, scale=std / np.sqrt(2 * cfg.layers)), f"b{i}.out_b": np.zeros(d),
            f"b{i}.ln2_g": np.ones(d), f"b{i}.ln2_b": np.zeros(d),
            f"b{i}.fc_w": normal(d, cfg.mlp_ratio * d), f"b{i}.fc_b": np.zeros(cfg.mlp_ratio * d),
            f"b{i}.proj_w": normal(cfg.mlp_ratio * d, d, scale=std / np.sqrt(2 * cfg.layers)),
            f"b{i}.proj_b": np.zeros(d),
        })
    p.update({
        "lnf_g": np.ones(d), "lnf_b": np.zeros(d),
        "head_w": normal(d, cfg.n_streams * cfg.n_codes), "head_b": np.zeros(cfg.n_streams * cfg.n_codes),
    })
    return {k: parameter(v, name=k) for k, v in p.items()}


def _causal_mask(n):
    return np.triu(np.full((n, n), MASK_VALUE), k=1)


def lm_forward(params, grid, cfg, from_row=0):
    """Logits of shape ``rows x n_streams x n_codes`` for an integer grid.

    ``from_row`` skips the output heads for earlier rows (their hidden states
    are still computed); the result then covers rows ``from_row..``."""
    grid = np.asarray(grid, dtype=np.int64)
    rows = grid.shape[0]
    if rows > cfg.max_frames:
        raise ValueError(f"sequence of {rows} rows exceeds max_frames={cfg.max_frames}")
    if grid.ndim != 2 or grid.shape[1] != cfg.n_streams:
        raise ValueError(f"grid must be rows x {cfg.n_streams}, got {grid.shape}")
    d, h = cfg.model_dim, cfg.heads
    dh = d // h
    ids = grid + cfg.in_vocab * np.arange(cfg.n_streams)[None, :]
    x = ad.embedding(params["tok_emb"], ids).sum(axis=1)
    x = x + ad.embedding(params["pos_emb"], np.arange(rows))
    mask = Tensor(_causal_mask(rows))
    for i in range(cfg.layers):
        a = ad.layer_norm(x, params[f"b{i}.ln1_g"], params[f"b{i}.ln1_b"])
        qkv = (a @ params[f"b{i}.qkv_w"] + params[f"b{i}.qkv_b"]).reshape(rows, 3, h, dh)
        qkv = ad.permute(qkv, (1, 2, 0, 3))  # 3, heads, rows, dh
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ad.softmax(ad.scale(q @ k.T, 1.0 / np.sqrt(dh)) + mask)
        y = ad.permute(att @ v, (1, 0, 2)).reshape(rows, d)
        x = x + (y @ params[f"b{i}.out_w"] + params[f"b{i}.out_b"])
        m = ad.layer_norm(x, params[f"b{i}.ln2_g"], params[f"b{i}.ln2_b"])
        m = ad.gelu(m @ params[f"b{i}.fc_w"] + params[f"b{i}.fc_b"])
        x = x + (m @ params[f"b{i}.proj_w"] + params[f"b{i}.proj_b"])
    if from_row:
        x = x[from_row:]
    x = ad.layer_norm(x, params["lnf_g"], params["lnf_b"])
    logits = x @ params["head_w"] + params["head_b"]
    return logits.reshape(rows - from_row, cfg.n_streams, cfg.n_codes)


def lm_loss(logits, seq):
    """Mean cross-entropy over target rows x streams, next-row prediction.

    ``logits`` may cover only the last rows of ``seq`` (see ``from_row``)."""
    start = seq.target_start
    n = seq.n_rows - start
    if n <= 0 or not seq.loss_mask.any():
        raise ValueError("sequence has no target region")
    rows, n_streams, n_codes = logits.shape
    skip = seq.n_rows - rows
    if skip > start - 1:
        raise ValueError(f"logits start at row {skip}, loss needs row {start - 1}")
    pred = logits[start - 1 - skip:rows - 1].reshape(n * n_streams, n_codes)
    return ad.softmax_cross_entropy(pred, seq.labels[start:].reshape(-1))


def _extend(params, cfg, rows, start, cache):
    """Run new ``rows`` (positions ``start..``) through the stack, appending
    their keys/values to ``cache``; returns the rows' logits as numpy."""
    n = len(rows)
    d, h = cfg.model_dim, cfg.heads
    dh = d // h
    ids = rows + cfg.in_vocab * np.arange(cfg.n_streams)[None, :]
    x = Tensor(params["tok_emb"].data[ids].sum(axis=1) + params["pos_emb"].data[start:start + n])
    total = start + n
    mask = np.where(np.arange(total)[None, :] > start + np.arange(n)[:, None], MASK_VALUE, 0.0)
    for i in range(cfg.layers):
        a = ad.layer_norm(x, params[f"b{i}.ln1_g"], params[f"b{i}.ln1_b"])
        qkv = (a @ params[f"b{i}.qkv_w"] + params[f"b{i}.qkv_b"]).data.reshape(n, 3, h, dh).transpose(1, 2, 0, 3)
        k_all = np.concatenate([cache[i][0], qkv[1]], axis=1) if cache[i] else qkv[1]
        v_all = np.concatenate([cache[i][1], qkv[2]], axis=1) if cache[i] else qkv[2]
        cache[i] = (k_all, v_all)
        att = ad.softmax(Tensor(qkv[0] @ np.swapaxes(k_all, -1, -2) * (1.0 / np.sqrt(dh)) + mask))
        y = Tensor((att.data @ v_all).transpose(1, 0, 2).reshape(n, d))
        x = x + (y @ params[f"b{i}.out_w"] + params[f"b{i}.out_b"])
        m = ad.layer_norm(x, params[f"b{i}.ln2_g"], params[f"b{i}.ln2_b"])
        m = ad.gelu(m @ params[f"b{i}.fc_w"] + params[f"b{i}.fc_b"])
        x = x + (m @ params[f"b{i}.proj_w"] + params[f"b{i}.proj_b"])
    x = ad.layer_norm(x, params["lnf_g"], params["lnf_b"])
    logits = x @ params["head_w"] + params["head_b"]
    return logits.data.reshape(n, cfg.n_streams, cfg.n_codes)


def lm_generate(params, cfg, context, max_frames, sampling="greedy", top_k=20, temperature=1.0, seed=0):
    """Autoregressively append up to ``max_frames`` rows of codec tokens to ``context``.

    There is no end-of-sequence class: the number of frames is known from the
    score, so generation runs to ``max_frames`` unless the position table
    runs out first. Keys and values of earlier rows are cached.
    """
    if sampling not in ("greedy", "top_k"):
        raise ValueError(f"unknown sampling mode {sampling!r}")
    rng = np.random.default_rng(seed)
    grid = np.asarray(context.grid, dtype=np.int64)
    if len(grid) > cfg.max_frames:
        raise ValueError(f"context of {len(grid)} rows exceeds max_frames={cfg.max_frames}")
    budget = max(0, min(max_frames, cfg.max_frames - len(grid)))
    out = np.zeros((budget, cfg.n_streams), dtype=np.int64)
    cache = [None] * cfg.layers
    last = _extend(params, cfg, grid, 0, cache)[-1]
    pos = len(grid)
    for step in range(budget):
        if sampling == "greedy":
            row = last.argmax(axis=1)
        else:
            row = np.empty(cfg.n_streams, dtype=np.int64)
            for s in range(cfg.n_streams):
                z = last[s] / temperature
                keep = np.argsort(-z, kind="stable")[:top_k]
                pz = np.exp(z[keep] - z[keep].max())
                row[s] = keep[rng.choice(len(keep), p=pz / pz.sum())]
        out[step] = row
        if step + 1 < budget:
            last = _extend(params, cfg, (row + context.codec_offset)[None, :], pos, cache)[0]
            pos += 1
    return out


class MultiStreamLM(BaseEstimator):
    """Token LM estimator: ``fit`` on training sequences, ``predict`` generates."""

    def __init__(self, model_dim=128, layers=2, heads=4, max_frames=1024, n_codes=256, n_streams=9,
                 in_vocab=None, steps=2000, lr=3e-4, warmup=100, min_lr_ratio=0.3, betas=(0.9, 0.95),
                 log_every=10, random_state=0):
        self.model_dim = model_dim
        self.layers = layers
        self.heads = heads
        self.max_frames = max_frames
        self.n_codes = n_codes
        self.n_streams = n_streams
        self.in_vocab = in_vocab
        self.steps = steps
        self.lr = lr
        self.warmup = warmup
        self.min_lr_ratio = min_lr_ratio
        self.betas = betas
        self.log_every = log_every
        self.random_state = random_state

    def config(self, in_vocab=None):
        return LmConfig(in_vocab=in_vocab or self.in_vocab, n_codes=self.n_codes, n_streams=self.n_streams,
                        model_dim=self.model_dim, layers=self.layers, heads=self.heads,
                        max_frames=self.max_frames)

    def fit(self, sequences, y=None):
        """Adam on next-frame cross-entropy, one sequence per step, cycling in
        a seeded shuffled order; ``curve_`` holds ``(step, loss)`` rows."""
        sequences = list(sequences)
        if not sequences:
            raise ValueError("no training sequences")
        in_vocab = self.in_vocab or int(max(s.grid.max() for s in sequences)) + 1
        self.config_ = self.config(in_vocab)
        seeds = np.random.SeedSequence(self.random_state).generate_state(2)
        self.params_ = init_params(self.config_, int(seeds[0]))
        names = list(self.params_)
        plist = [self.params_[k] for k in names]
        opt = Adam(plist, lr=self.lr, betas=self.betas)
        rng = np.random.default_rng(int(seeds[1]))
        order = []
        self.curve_ = []
        for step in range(self.steps):
            if not order:
                order = list(rng.permutation(len(sequences)))
            seq = sequences[order.pop()]
            lr = ad.warmup_cosine(step, self.steps, self.lr, self.warmup, self.min_lr_ratio)
            with Tape() as tape:
                loss = lm_loss(self._logits(seq), seq)
                grads = tape.backward(loss, plist)
            opt.step(grads, lr=lr)
            if step % self.log_every == 0 or step == self.steps - 1:
                self.curve_.append((step, loss.item()))
                log.debug("lm step %d loss %.4f", step, loss.item())
        return self

    def loss(self, seq):
        check_is_fitted(self, "params_")
        return lm_loss(self._logits(seq), seq).item()

    def _logits(self, seq):
        return lm_forward(self.params_, seq.grid, self.config_, from_row=seq.target_start - 1)

    def predict(self, context, n_frames, sampling="greedy", top_k=20, temperature=1.0, seed=0):
        check_is_fitted(self, "params_")
        return lm_generate(self.params_, self.config_, context, n_frames, sampling, top_k, temperature, seed)

    def to_arrays(self):
        check_is_fitted(self, "params_")
        c = self.config_
        meta = np.array([c.in_vocab, c.n_codes, c.n_streams, c.model_dim, c.layers, c.heads, c.max_frames,
                         c.mlp_ratio], dtype=np.float64)
        out = {"config": meta}
        out.update({f"param/{k}": v.data for k, v in self.params_.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays):
        vals = [int(v) for v in arrays["config"]]
        cfg = LmConfig(*vals)
        est = cls(model_dim=cfg.model_dim, layers=cfg.layers, heads=cfg.heads, max_frames=cfg.max_frames,
                  n_codes=cfg.n_codes, n_streams=cfg.n_streams, in_vocab=cfg.in_vocab)
        est.config_ = cfg
        est.params_ = {k.split("/", 1)[1]: parameter(v, name=k.split("/", 1)[1])
                       for k, v in arrays.items() if k.startswith("param/")}
        return est

"""Conditional flow matching from codec-token features to mel spectrograms.

Linear path ``x_t = (1 - t) x0 + t x1`` with ``x0 ~ N(0, I)``; the network
regresses the path velocity ``x1 - x0``. Sampling integrates the learned
field from t=0 to t=1 with Euler or midpoint steps.

The velocity net is a per-frame MLP over a +-``window`` frame neighbourhood
of the noisy mel and of the condition, plus a sinusoidal time embedding.
Mel and condition features are standardised per dimension with training
statistics; outputs are mapped back before they leave this module.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor, parameter

log = logging.getLogger(__name__)

MODES = ("flow1", "flow2", "uncond")
N_MIDI = 128
DIVERGENCE_LOSS = 1e6


class FlowDivergence(RuntimeError):
    pass


@dataclass
class FlowSample:
    x0: np.ndarray
    x1: np.ndarray
    t: float
    cond: np.ndarray = None
    pitch: np.ndarray = None

    @property
    def x_t(self):
        return (1.0 - self.t) * self.x0 + self.t * self.x1

    @property
    def u_target(self):
        return self.x1 - self.x0


def sample_path(x1, cond=None, rng=None, pitch=None, t=None):
    """Draw ``t ~ U[0, 1]`` and ``x0 ~ N(0, I)`` for one target ``x1``."""
    x1 = np.asarray(x1, dtype=np.float64)
    if not np.all(np.isfinite(x1)):
        raise ValueError("x1 contains non-finite values")
    rng = rng if rng is not None else np.random.default_rng()
    if t is None:
        t = float(rng.random())
    x0 = rng.standard_normal(x1.shape)
    return FlowSample(x0, x1, t, cond, pitch)


def time_embedding(t, dim=16):
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(1, half - 1))
    ang = t * 100.0 * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


@dataclass(frozen=True)
class FlowConfig:
    mel_dim: int = 80
    cond_dim: int = 160
    window: int = 4
    hidden: int = 256
    layers: int = 3
    t_dim: int = 16
    pitch_dim: int = 0  # >0 adds a learned MIDI embedding to the condition

    @property
    def in_dim(self):
        span = 2 * self.window + 1
        return span * (self.mel_dim + self.cond_dim + self.pitch_dim) + self.t_dim


def init_velocity_params(cfg, seed=0):
    rng = np.random.default_rng(seed)
    dims = [cfg.in_dim] + [cfg.hidden] * cfg.layers + [cfg.mel_dim]
    p = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        p[f"w{i}"] = rng.normal(scale=1.0 / math.sqrt(a), size=(a, b))
        p[f"b{i}"] = np.zeros(b)
    if cfg.pitch_dim:
        p["pitch_emb"] = rng.normal(scale=1.0, size=(N_MIDI, cfg.pitch_dim))
    return {k: parameter(v, name=k) for k, v in p.items()}


def velocity(params, cfg, x_t, t, cond=None, pitch=None):
    """Predicted velocity, same shape as ``x_t`` (F x mel_dim)."""
    n = len(x_t)
    feats = [ad.frame_window(Tensor(x_t), cfg.window)]
    if cfg.cond_dim:
        c = np.zeros((n, cfg.cond_dim)) if cond is None else cond
        feats.append(ad.frame_window(Tensor(c), cfg.window))
    if cfg.pitch_dim:
        if pitch is None:
            raise ValueError("this flow needs a per-frame pitch track")
        feats.append(ad.frame_window(ad.embedding(params["pitch_emb"], pitch), cfg.window))
    feats.append(Tensor(np.broadcast_to(time_embedding(t, cfg.t_dim), (n, cfg.t_dim))))
    h = ad.concat(feats, axis=1)
    for i in range(cfg.layers):
        h = ad.gelu(h @ params[f"w{i}"] + params[f"b{i}"])
    return h @ params[f"w{cfg.layers}"] + params[f"b{cfg.layers}"]


def _batch_velocity(params, cfg, samples):
    preds = [velocity(params, cfg, s.x_t, s.t, s.cond, s.pitch) for s in samples]
    return preds[0] if len(preds) == 1 else ad.concat(preds, axis=0)


def cfm_loss(params, cfg, samples, field=None):
    """Mean squared error between target and predicted velocity over every
    frame and dimension of the batch. ``field(sample) -> array`` replaces the
    network (handy for oracle checks)."""
    if not samples:
        raise ValueError("empty batch")
    target = np.concatenate([s.u_target for s in samples], axis=0)
    if field is not None:
        pred = Tensor(np.concatenate([field(s) for s in samples], axis=0))
    else:
        pred = _batch_velocity(params, cfg, samples)
    return ad.mse(pred, Tensor(target))


@dataclass(frozen=True)
class OdeConfig:
    solver: str = "euler"
    steps: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("ODE needs at least one step")
        if self.solver not in ("euler", "midpoint"):
            raise ValueError(f"unknown solver {self.solver!r}")


def integrate(field, x0, steps=32, solver="euler"):
    """Integrate ``dx/dt = field(x, t)`` from t=0 to t=1 with ``steps`` equal steps."""
    OdeConfig(solver, steps)
    h = 1.0 / steps
    x = np.array(x0, dtype=np.float64)
    for k in range(steps):
        t = k * h
        if solver == "euler":
            x = x + h * field(x, t)
        else:
            mid = x + 0.5 * h * field(x, t)
            x = x + h * field(mid, t + 0.5 * h)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"ODE state became non-finite at step {k}")
    return x


def ode_solve(params, cfg, cond, ode=OdeConfig(), pitch=None, n_frames=None):
    """Sample in normalised mel space; the frame count comes from ``cond``."""
    n = n_frames if n_frames is not None else len(cond)
    x0 = np.random.default_rng(ode.seed).standard_normal((n, cfg.mel_dim))

    def field(x, t):
        return velocity(params, cfg, x, t, cond, pitch).data

    return integrate(field, x0, ode.steps, ode.solver)


def _lr_at(step, total, peak, end, warmup):
    if step < warmup:
        return peak * (step + 1) / warmup
    return ad.linear_decay(step, peak, end, warmup, total)


class FlowMatcher(BaseEstimator):
    """Mel generator. ``mode`` is ``flow1`` (codec features), ``flow2`` (codec
    features + score pitch) or ``uncond`` (no condition; ablation baseline)."""

    def __init__(self, mode="flow1", window=4, hidden=256, layers=3, t_dim=16, pitch_dim=16,
                 epochs=30, batch_size=4, lr=3e-4, end_lr=1e-4, warmup=50, random_state=0):
        self.mode = mode
        self.window = window
        self.hidden = hidden
        self.layers = layers
        self.t_dim = t_dim
        self.pitch_dim = pitch_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.end_lr = end_lr
        self.warmup = warmup
        self.random_state = random_state

    def _config(self, mel_dim, cond_dim):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        return FlowConfig(mel_dim=mel_dim, cond_dim=0 if self.mode == "uncond" else cond_dim,
                          window=self.window, hidden=self.hidden, layers=self.layers, t_dim=self.t_dim,
                          pitch_dim=self.pitch_dim if self.mode == "flow2" else 0)

    def _prepare(self, mel, cond, pitch):
        """Trim to a common frame count (at most one frame apart) and normalise."""
        n = len(mel) if mel is not None else len(cond)
        for other, what in ((cond, "condition"), (pitch, "pitch track")):
            if other is not None and mel is not None and abs(len(other) - len(mel)) > 1:
                raise ValueError(f"{what} has {len(other)} frames, mel has {len(mel)}")
            if other is not None:
                n = min(n, len(other))
        x1 = None if mel is None else (mel[:n] - self.mel_mean_) / self.mel_std_
        c = None
        if self.config_.cond_dim:
            c = (cond[:n] - self.cond_mean_) / self.cond_std_
        p = None
        if self.config_.pitch_dim:
            if pitch is None:
                raise ValueError("flow2 needs frame-aligned score pitch")
            p = np.asarray(pitch[:n], dtype=np.int64)
        return n, x1, c, p

    def fit(self, mels, conds, pitches=None):
        """Adam on the CFM loss; ``curve_`` holds per-step ``(step, loss)`` and
        ``epoch_loss_`` the per-epoch means."""
        mels = [check_array(m, dtype=np.float64) for m in mels]
        conds = [check_array(c, dtype=np.float64) for c in conds]
        if not mels or len(mels) != len(conds):
            raise ValueError("need one condition per mel and at least one example")
        if self.mode == "flow2" and (pitches is None or len(pitches) != len(mels)):
            raise ValueError("flow2 needs one pitch track per mel")
        pitches = list(pitches) if pitches is not None else [None] * len(mels)
        allmel = np.concatenate(mels)
        allcond = np.concatenate(conds)
        self.mel_mean_, self.mel_std_ = allmel.mean(0), allmel.std(0) + 1e-3
        self.cond_mean_, self.cond_std_ = allcond.mean(0), allcond.std(0) + 1e-3
        self.config_ = self._config(allmel.shape[1], allcond.shape[1])
        data = [self._prepare(m, c, p)[1:] for m, c, p in zip(mels, conds, pitches)]

        ss = np.random.SeedSequence(self.random_state)
        init_seed, train_seed = (int(s) for s in ss.generate_state(2))
        self.params_ = init_velocity_params(self.config_, init_seed)
        names = list(self.params_)
        plist = [self.params_[k] for k in names]
        opt = Adam(plist, lr=self.lr)
        rng = np.random.default_rng(train_seed)
        per_epoch = math.ceil(len(data) / self.batch_size)
        total = self.epochs * per_epoch
        self.curve_, self.epoch_loss_ = [], []
        step = 0
        for epoch in range(self.epochs):
            order = rng.permutation(len(data))
            losses = []
            for b in range(per_epoch):
                batch = [sample_path(data[i][0], data[i][1], rng, data[i][2])
                         for i in order[b * self.batch_size:(b + 1) * self.batch_size]]
                lr = _lr_at(step, total, self.lr, self.end_lr, self.warmup)
                with Tape() as tape:
                    loss = cfm_loss(self.params_, self.config_, batch)
                    value = loss.item()
                    if not math.isfinite(value) or value > DIVERGENCE_LOSS:
                        raise FlowDivergence(
                            f"flow training diverged at epoch {epoch} step {step}: loss={value:.4g}, lr={lr:.3g}, "
                            f"last logged loss={self.curve_[-1][1] if self.curve_ else float('nan'):.4g}")
                    grads = tape.backward(loss, plist)
                opt.step(grads, lr=lr)
                losses.append(value)
                self.curve_.append((step, value))
                step += 1
            self.epoch_loss_.append(float(np.mean(losses)))
            log.info("flow[%s] epoch %d mean loss %.4f", self.mode, epoch, self.epoch_loss_[-1])
        return self

    def sample(self, cond=None, pitch=None, ode=OdeConfig(), n_frames=None):
        """Generate a mel (original units) for one condition sequence."""
        check_is_fitted(self, "params_")
        if self.config_.cond_dim and cond is None:
            raise ValueError(f"{self.mode} needs a condition")
        if cond is not None:
            cond = check_array(cond, dtype=np.float64)
        if cond is None and n_frames is None:
            raise ValueError("frame count unknown: pass cond or n_frames")
        n, _, c, p = self._prepare(None, cond if cond is not None else np.zeros((n_frames, 1)), pitch)
        x = ode_solve(self.params_, self.config_, c, ode, p, n_frames=n)
        return x * self.mel_std_ + self.mel_mean_

    def to_arrays(self):
        check_is_fitted(self, "params_")
        c = self.config_
        out = {
            "config": np.array([MODES.index(self.mode), c.mel_dim, c.cond_dim, c.window, c.hidden, c.layers,
                                c.t_dim, c.pitch_dim], dtype=np.float64),
            "mel_mean": self.mel_mean_, "mel_std": self.mel_std_,
            "cond_mean": self.cond_mean_, "cond_std": self.cond_std_,
        }
        out.update({f"param/{k}": v.data for k, v in self.params_.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays):
        mode_i, mel_dim, cond_dim, window, hidden, layers, t_dim, pitch_dim = (int(v) for v in arrays["config"])
        est = cls(mode=MODES[mode_i], window=window, hidden=hidden, layers=layers, t_dim=t_dim,
                  pitch_dim=pitch_dim or 16)
        est.config_ = FlowConfig(mel_dim, cond_dim, window, hidden, layers, t_dim, pitch_dim)
        est.mel_mean_, est.mel_std_ = arrays["mel_mean"], arrays["mel_std"]
        est.cond_mean_, est.cond_std_ = arrays["cond_mean"], arrays["cond_std"]
        est.params_ = {k.split("/", 1)[1]: parameter(v, name=k.split("/", 1)[1])
                       for k, v in arrays.items() if k.startswith("param/")}
        return est


def pitch_track(midi_per_frame, n_frames):
    """Fit a score MIDI track to ``n_frames`` (edge-repeat or trim; at most 1 apart)."""
    midi = np.asarray(midi_per_frame, dtype=np.int64)
    if abs(len(midi) - n_frames) > 1:
        raise ValueError(f"score has {len(midi)} frames, tokens have {n_frames}")
    if len(midi) >= n_frames:
        return midi[:n_frames]
    return np.concatenate([midi, np.repeat(midi[-1:], n_frames - len(midi))])


def synthesize_mel(flow, codec, tokens, score_midi=None, ode=OdeConfig()):
    """Token grid -> mel (F x n_mels), F = number of token frames."""
    tokens = np.asarray(tokens, dtype=np.int64)
    cond = codec.embed(tokens)
    pitch = None
    if flow.mode == "flow2":
        if score_midi is None:
            raise ValueError("flow2 needs frame-aligned score pitch")
        pitch = pitch_track(score_midi, len(tokens))
    if flow.mode == "uncond":
        return flow.sample(None, None, ode, n_frames=len(tokens))
    return flow.sample(cond, pitch, ode)

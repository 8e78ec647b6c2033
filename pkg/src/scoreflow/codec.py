"""Residual vector quantisation of mel frames: the discrete audio tokenizer.

Stream 0 is a "semantic" token from k-means over normalised, context-stacked
mel; streams 1..8 are residual stages over the raw mel frame. Only the
acoustic streams take part in reconstruction.

Centroids and encoder inputs are snapped to a 2**-24 lattice. On that lattice
float64 sums of a handful of centroids are exact, so
``decode(encode(x)) + residual == x`` holds bit for bit.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

LATTICE = 2.0**-24


def snap(x):
    return np.round(np.asarray(x, dtype=np.float64) / LATTICE) * LATTICE


def _sq_dists(x, c, c_sq=None):
    if c_sq is None:
        c_sq = np.einsum("ij,ij->i", c, c)
    x_sq = np.einsum("ij,ij->i", x, x)
    return np.maximum(x_sq[:, None] - 2.0 * (x @ c.T) + c_sq[None, :], 0.0)


def nearest(x, c, c_sq=None, chunk=8192):
    """Index of the nearest centroid per row (ties go to the lowest index)."""
    out = np.empty(len(x), dtype=np.int64)
    dist = np.empty(len(x))
    if c_sq is None:
        c_sq = np.einsum("ij,ij->i", c, c)
    for s in range(0, len(x), chunk):
        d = _sq_dists(x[s:s + chunk], c, c_sq)
        out[s:s + chunk] = d.argmin(axis=1)
        dist[s:s + chunk] = d[np.arange(len(d)), out[s:s + chunk]]
    return out, dist


def _kmeans_pp(x, k, rng, pinned_zero):
    n = len(x)
    centroids = np.empty((k, x.shape[1]))
    if pinned_zero:
        centroids[0] = 0.0
    else:
        centroids[0] = x[rng.integers(n)]
    closest = np.einsum("ij,ij->i", x - centroids[0], x - centroids[0])
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centroids[j] = x[idx]
        d = x - centroids[j]
        closest = np.minimum(closest, np.einsum("ij,ij->i", d, d))
    return centroids


def _lloyd(x, centroids, n_iter, pinned_zero):
    k = len(centroids)
    for _ in range(n_iter):
        labels, dist = nearest(x, centroids)
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        new = centroids.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        empty = np.nonzero(~filled)[0]
        if pinned_zero:
            new[0] = 0.0
            empty = empty[empty != 0]
        if len(empty):
            # reseed to the points worst served by the current assignment
            order = np.argsort(-dist, kind="stable")
            new[empty] = x[order[:len(empty)]]
        if np.array_equal(new, centroids):
            break
        centroids = new
    labels, dist = nearest(x, centroids)
    return centroids, float(dist.sum())


def fit_kmeans(points, k, n_iter=30, seed=0, n_init=4, pinned_zero=False):
    """k-means++ seeding plus Lloyd iterations; returns ``(centroids, inertia)``.

    ``pinned_zero`` fixes centroid 0 at the origin, which makes residual
    stages unable to increase a frame's residual energy.
    """
    x = check_array(points, dtype=np.float64)
    if len(x) < k:
        raise ValueError(f"k-means needs at least k={k} points, got {len(x)}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        c0 = _kmeans_pp(x, k, rng, pinned_zero)
        c, inertia = _lloyd(x, c0, n_iter, pinned_zero)
        if best is None or inertia < best[1]:
            best = (c, inertia)
    return best


def context_stack(x, context):
    """Concatenate frames t-context..t+context (edge frames repeated)."""
    n = len(x)
    idx = np.clip(np.arange(n)[:, None] + np.arange(-context, context + 1)[None, :], 0, n - 1)
    return x[idx].reshape(n, -1)


class KMeansCodebook(BaseEstimator):
    """Single vector-quantisation stage."""

    def __init__(self, n_codes=256, n_iter=30, n_init=4, pinned_zero=False, random_state=0):
        self.n_codes = n_codes
        self.n_iter = n_iter
        self.n_init = n_init
        self.pinned_zero = pinned_zero
        self.random_state = random_state

    def fit(self, X, y=None):
        c, inertia = fit_kmeans(X, self.n_codes, self.n_iter, self.random_state, self.n_init, self.pinned_zero)
        self.centroids_ = snap(c)
        self.inertia_ = inertia
        return self

    def predict(self, X):
        check_is_fitted(self, "centroids_")
        return nearest(check_array(X, dtype=np.float64), self.centroids_)[0]


class RvqCodec(BaseEstimator, TransformerMixin):
    """Mel-frame tokenizer: ``transform`` gives an ``F x (1 + n_stages)`` stream matrix."""

    def __init__(self, n_stages=8, n_codes=256, context=2, n_iter=30, n_init=1, random_state=0):
        self.n_stages = n_stages
        self.n_codes = n_codes
        self.context = context
        self.n_iter = n_iter
        self.n_init = n_init
        self.random_state = random_state

    @property
    def n_streams(self):
        return self.n_stages + 1

    def _frames(self, mels):
        if isinstance(mels, np.ndarray) and mels.ndim == 2:
            mels = [mels]
        return [check_array(m, dtype=np.float64) for m in mels]

    def fit(self, mels, y=None):
        mels = self._frames(mels)
        x = snap(np.concatenate(mels, axis=0))
        seeds = np.random.SeedSequence(self.random_state).generate_state(self.n_stages + 1)
        stages = []
        residual = x.copy()
        for s in range(self.n_stages):
            c, _ = fit_kmeans(residual, self.n_codes, self.n_iter, int(seeds[s]), self.n_init, pinned_zero=s > 0)
            c = snap(c)
            stages.append(c)
            residual = residual - c[nearest(residual, c)[0]]
        self.codebooks_ = np.stack(stages)
        self.mean_ = x.mean(axis=0)
        self.std_ = x.std(axis=0) + 1e-6
        feats = np.concatenate([self._semantic_features(m) for m in mels], axis=0)
        c, _ = fit_kmeans(feats, self.n_codes, self.n_iter, int(seeds[-1]), self.n_init)
        self.semantic_codebook_ = c
        self.n_features_in_ = x.shape[1]
        return self

    def _semantic_features(self, mel):
        return context_stack((mel - self.mean_) / self.std_, self.context)

    def _check(self, mel):
        check_is_fitted(self, "codebooks_")
        mel = check_array(mel, dtype=np.float64, ensure_min_samples=0)
        if mel.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} mel bins, got {mel.shape[1]}")
        return mel

    def encode(self, mel, return_residuals=False):
        """Stream matrix for one utterance.

        With ``return_residuals`` also returns the residual after every stage,
        shape ``(n_stages + 1, F, D)``; entry 0 is the lattice-snapped input.
        """
        mel = self._check(mel)
        x = snap(mel)
        tokens = np.zeros((len(x), self.n_streams), dtype=np.int64)
        history = [x]
        residual = x
        for s, c in enumerate(self.codebooks_):
            idx = nearest(residual, c)[0]
            tokens[:, s + 1] = idx
            residual = residual - c[idx]
            history.append(residual)
        if len(mel):
            tokens[:, 0] = nearest(self._semantic_features(mel), self.semantic_codebook_)[0]
        if return_residuals:
            return tokens, np.stack(history)
        return tokens

    def transform(self, mel):
        return self.encode(mel)

    def final_residual(self, mel):
        return self.encode(mel, return_residuals=True)[1][-1]

    def _check_tokens(self, tokens):
        check_is_fitted(self, "codebooks_")
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] != self.n_streams:
            raise ValueError(f"expected an F x {self.n_streams} token grid, got {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.n_codes):
            raise ValueError(f"token id out of range [0, {self.n_codes})")
        return tokens

    def inverse_transform(self, tokens, n_stages=None):
        """Sum of the acoustic-stage centroids; the semantic stream is ignored."""
        tokens = self._check_tokens(tokens)
        n_stages = self.n_stages if n_stages is None else n_stages
        out = np.zeros((len(tokens), self.n_features_in_))
        for s in range(n_stages):
            out = out + self.codebooks_[s][tokens[:, s + 1]]
        return out

    decode = inverse_transform

    @property
    def embedding_dim(self):
        return 2 * self.n_features_in_

    def embed(self, tokens):
        """Flow condition features: decoded acoustic sum next to the semantic centroid.

        The semantic centroid lives in the context-stacked space; its centre
        frame (in normalised units) is what gets concatenated.
        """
        tokens = self._check_tokens(tokens)
        d = self.n_features_in_
        centre = self.semantic_codebook_[:, self.context * d:(self.context + 1) * d]
        return np.concatenate([self.inverse_transform(tokens), centre[tokens[:, 0]]], axis=1)

    def to_arrays(self):
        check_is_fitted(self, "codebooks_")
        return {
            "config": np.array([self.n_stages, self.n_codes, self.context, self.n_iter, self.n_init,
                                self.random_state], dtype=np.float64),
            "codebooks": self.codebooks_,
            "semantic_codebook": self.semantic_codebook_,
            "mean": self.mean_,
            "std": self.std_,
        }

    @classmethod
    def from_arrays(cls, arrays):
        cfg = [int(v) for v in arrays["config"]]
        codec = cls(*cfg)
        codec.codebooks_ = arrays["codebooks"]
        codec.semantic_codebook_ = arrays["semantic_codebook"]
        codec.mean_ = arrays["mean"]
        codec.std_ = arrays["std"]
        codec.n_features_in_ = codec.codebooks_.shape[2]
        return codec

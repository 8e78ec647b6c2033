import itertools

import numpy as np
import pytest

from scoreflow import checkpoint
from scoreflow.codec import LATTICE, KMeansCodebook, RvqCodec, context_stack, fit_kmeans, nearest, snap
from scoreflow.corpus import SingerProfile, gen_score, render_singing
from scoreflow.dsp import mel_spectrogram


@pytest.fixture(scope="module")
def mels():
    prof = [SingerProfile.make(s, 0) for s in range(2)]
    out = []
    for i in range(12):
        score = gen_score(np.random.default_rng(100 + i), 8, singer_id=i % 2)
        out.append(mel_spectrogram(render_singing(score, prof[i % 2], seed=i)))
    return out


@pytest.fixture(scope="module")
def codec(mels):
    return RvqCodec(n_stages=8, n_codes=32, n_iter=15, random_state=0).fit(mels[:10])


def test_kmeans_reaches_brute_force_optimum():
    x = np.array([[0.0], [0.2], [0.9], [3.0], [3.4], [7.0]])
    best = np.inf
    for labels in itertools.product(range(2), repeat=len(x)):
        labels = np.array(labels)
        if len(set(labels)) < 2:
            continue
        cost = sum(((x[labels == k] - x[labels == k].mean()) ** 2).sum() for k in range(2))
        best = min(best, cost)
    _, inertia = fit_kmeans(x, 2, seed=0)
    assert inertia == pytest.approx(best)


def test_kmeans_needs_enough_points():
    with pytest.raises(ValueError):
        fit_kmeans(np.zeros((3, 2)), 4)


def test_pinned_zero_centroid():
    x = np.random.default_rng(0).normal(size=(200, 3))
    c, _ = fit_kmeans(x, 8, pinned_zero=True)
    assert np.all(c[0] == 0)


def test_nearest_ties_go_low():
    c = np.array([[1.0], [-1.0]])
    idx, dist = nearest(np.array([[0.0]]), c)
    assert idx[0] == 0 and dist[0] == 1.0


def test_codebook_estimator():
    x = np.random.default_rng(1).normal(size=(100, 2))
    cb = KMeansCodebook(n_codes=4, random_state=0).fit(x)
    assert cb.centroids_.shape == (4, 2)
    assert set(cb.predict(x)) <= set(range(4))
    assert cb.get_params()["n_codes"] == 4


def test_context_stack_repeats_edges():
    x = np.arange(3.0)[:, None]
    np.testing.assert_array_equal(context_stack(x, 1), [[0, 0, 1], [0, 1, 2], [1, 2, 2]])


def test_stream_matrix_layout(codec, mels):
    tokens = codec.transform(mels[10])
    assert tokens.shape == (len(mels[10]), 9)
    assert tokens.dtype == np.int64
    assert tokens.min() >= 0 and tokens.max() < 32


def test_telescoping_identity_is_exact(codec, mels):
    for mel in mels[10:]:
        tokens = codec.encode(mel)
        assert np.array_equal(codec.decode(tokens) + codec.final_residual(mel), snap(mel))
        assert np.max(np.abs(snap(mel) - mel)) <= LATTICE / 2


def test_residual_energy_never_grows(codec, mels):
    _, hist = codec.encode(mels[11], return_residuals=True)
    energy = (hist**2).sum(axis=2)
    assert np.all(np.diff(energy, axis=0) <= 1e-12)


def test_more_stages_reconstruct_better(codec, mels):
    held = np.concatenate(mels[10:])
    tokens = codec.encode(held)
    err = {s: np.mean((codec.decode(tokens, s) - held) ** 2) for s in (1, 4, 8)}
    assert err[8] < err[4] < err[1]


def test_semantic_stream_is_not_decoded(codec, mels):
    tokens = codec.encode(mels[10])
    other = tokens.copy()
    other[:, 0] = (other[:, 0] + 1) % 32
    assert np.array_equal(codec.decode(tokens), codec.decode(other))
    assert not np.array_equal(codec.embed(tokens), codec.embed(other))


def test_embedding_shape(codec, mels):
    tokens = codec.encode(mels[10])
    assert codec.embedding_dim == 160
    assert codec.embed(tokens).shape == (len(tokens), 160)


def test_token_validation(codec):
    with pytest.raises(ValueError, match="range"):
        codec.decode(np.full((2, 9), 32))
    with pytest.raises(ValueError):
        codec.decode(np.zeros((2, 4), dtype=int))
    with pytest.raises(ValueError, match="mel bins"):
        codec.encode(np.zeros((3, 40)))


def test_fit_and_encode_deterministic(mels, codec):
    again = RvqCodec(n_stages=8, n_codes=32, n_iter=15, random_state=0).fit(mels[:10])
    assert np.array_equal(again.codebooks_, codec.codebooks_)
    assert np.array_equal(again.encode(mels[11]), codec.encode(mels[11]))


def test_checkpoint_round_trip(codec, mels, tmp_path):
    checkpoint.save(tmp_path / "codec.ckpt", codec.to_arrays(), stage="codec")
    clone = RvqCodec.from_arrays(checkpoint.load(tmp_path / "codec.ckpt", stage="codec"))
    assert np.array_equal(clone.encode(mels[10]), codec.encode(mels[10]))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "codec.ckpt", stage="lm")

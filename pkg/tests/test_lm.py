import numpy as np
import pytest

from gradcheck import max_relative_error
from scoreflow.autodiff import Tape, parameter
from scoreflow.lm import LmConfig, MultiStreamLM, init_params, lm_forward, lm_generate, lm_loss
from scoreflow.score import Note, TaskSequence, assemble_template, build_vocab, expand_frames, validate_score

VOCAB = build_vocab()
IN_VOCAB = len(VOCAB) + 256


def toy_cfg(layers=2):
    return LmConfig(in_vocab=12, n_codes=4, n_streams=3, model_dim=8, layers=layers, heads=2,
                    max_frames=8, mlp_ratio=2)


def toy_seq(rng, rows=6, target_start=2):
    grid = rng.integers(0, 12, size=(rows, 3))
    labels = np.full((rows, 3), -1)
    labels[target_start:] = rng.integers(0, 4, size=(rows - target_start, 3))
    return TaskSequence(grid, labels, labels[:, 0] >= 0, 1, 1, target_start, 8)


def ten_frame_example(seed=1):
    score = validate_score([Note("a", 60, 0, 0.1), Note("e", 62, 0.1, 0.2)])
    frames = expand_frames(score)
    target = np.random.default_rng(seed).integers(0, 256, size=(len(frames), 9))
    return assemble_template(frames, None, target, VOCAB), target


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        LmConfig(in_vocab=10, model_dim=10, heads=4)


def test_single_frame_logits_shape():
    cfg = LmConfig(in_vocab=IN_VOCAB, max_frames=16)
    logits = lm_forward(init_params(cfg), np.zeros((1, 9), dtype=int), cfg)
    assert logits.shape == (1, 9, 256)


def test_overlength_sequence_rejected():
    cfg = toy_cfg()
    with pytest.raises(ValueError, match="max_frames"):
        lm_forward(init_params(cfg), np.zeros((9, 3), dtype=int), cfg)


@pytest.mark.parametrize("layers", [1, 2, 3])
def test_future_frames_do_not_leak(layers):
    cfg = toy_cfg(layers)
    params = init_params(cfg, 3)
    grid = np.random.default_rng(0).integers(0, 12, size=(7, 3))
    base = lm_forward(params, grid, cfg).data
    for t in range(6):
        bumped = grid.copy()
        bumped[t + 1:] = (bumped[t + 1:] + 5) % 12
        out = lm_forward(params, bumped, cfg).data
        assert np.array_equal(out[:t + 1], base[:t + 1])


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    cfg = toy_cfg()
    params = init_params(cfg, 0)
    assert sum(p.data.size for p in params.values()) < 5000
    for p in params.values():
        p.data += rng.normal(scale=0.3, size=p.shape)
    seq = toy_seq(rng)
    err = max_relative_error(lambda: lm_loss(lm_forward(params, seq.grid, cfg), seq), list(params.values()))
    assert err < 1e-4


def test_head_only_on_tail_rows_matches_full_forward():
    rng = np.random.default_rng(4)
    cfg = toy_cfg()
    params = init_params(cfg, 1)
    seq = toy_seq(rng, rows=7, target_start=3)
    full = lm_forward(params, seq.grid, cfg)
    tail = lm_forward(params, seq.grid, cfg, from_row=2)
    np.testing.assert_allclose(tail.data, full.data[2:], atol=1e-12)
    assert lm_loss(tail, seq).item() == pytest.approx(lm_loss(full, seq).item(), abs=1e-12)
    with pytest.raises(ValueError):
        lm_loss(lm_forward(params, seq.grid, cfg, from_row=3), seq)


def test_untrained_loss_is_log_vocab():
    seq, _ = ten_frame_example()
    cfg = LmConfig(in_vocab=IN_VOCAB, max_frames=64)
    loss = lm_loss(lm_forward(init_params(cfg), seq.grid, cfg), seq).item()
    assert loss == pytest.approx(np.log(256), abs=0.05)


def test_condition_labels_do_not_affect_loss():
    rng = np.random.default_rng(2)
    cfg = toy_cfg()
    params = init_params(cfg)
    seq = toy_seq(rng)
    logits = lm_forward(params, seq.grid, cfg)
    before = lm_loss(logits, seq).item()
    seq.labels[:seq.target_start] = 3
    assert lm_loss(logits, seq).item() == before


def test_condition_predictions_get_zero_gradient():
    rng = np.random.default_rng(4)
    cfg = toy_cfg()
    params = init_params(cfg)
    seq = toy_seq(rng, target_start=4)
    logits = parameter(lm_forward(params, seq.grid, cfg).data)
    with Tape() as tape:
        (g,) = tape.backward(lm_loss(logits, seq), [logits])
    # row t predicts t + 1, so rows before target_start - 1 are never scored
    assert np.all(g[:seq.target_start - 1] == 0)
    assert np.any(g[seq.target_start - 1:] != 0)


def test_empty_target_rejected():
    seq = assemble_template(expand_frames(validate_score([Note("a", 60, 0, 0.1)])), None, None, VOCAB)
    cfg = LmConfig(in_vocab=IN_VOCAB, max_frames=32)
    with pytest.raises(ValueError, match="target"):
        lm_loss(lm_forward(init_params(cfg), seq.grid, cfg), seq)


@pytest.fixture(scope="module")
def memorised():
    seq, target = ten_frame_example()
    model = MultiStreamLM(steps=600, max_frames=64, in_vocab=IN_VOCAB, log_every=50).fit([seq])
    return model, seq, target


def test_overfits_single_utterance(memorised):
    model, seq, _ = memorised
    assert model.loss(seq) < 0.05
    steps, losses = zip(*model.curve_)
    assert losses[-1] < losses[0]


def test_greedy_decode_reproduces_memorised_target(memorised):
    model, seq, target = memorised
    assert np.array_equal(model.predict(seq.context(), len(target)), target)


def test_top_k_sampling_is_seeded(memorised):
    model, seq, target = memorised
    a = model.predict(seq.context(), len(target), sampling="top_k", top_k=5, temperature=1.5, seed=7)
    b = model.predict(seq.context(), len(target), sampling="top_k", top_k=5, temperature=1.5, seed=7)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() < 256


def test_generation_respects_frame_budget():
    cfg = toy_cfg()
    params = init_params(cfg)
    seq = toy_seq(np.random.default_rng(0), rows=3, target_start=3)
    assert len(lm_generate(params, cfg, seq, 2)) == 2
    # position table caps output at max_frames - context rows
    assert len(lm_generate(params, cfg, seq, 50)) == 5


def test_unknown_sampling_mode():
    cfg = toy_cfg()
    seq = toy_seq(np.random.default_rng(0), rows=3, target_start=3)
    with pytest.raises(ValueError):
        lm_generate(init_params(cfg), cfg, seq, 1, sampling="beam")


def test_array_round_trip(memorised):
    model, seq, target = memorised
    clone = MultiStreamLM.from_arrays(model.to_arrays())
    assert clone.loss(seq) == model.loss(seq)
    assert clone.get_params()["model_dim"] == 128


def test_cached_decoding_matches_full_forward():
    from scoreflow.lm import _extend
    cfg = LmConfig(in_vocab=50, n_codes=16, n_streams=3, model_dim=32, layers=2, heads=4, max_frames=40)
    rng = np.random.default_rng(0)
    params = init_params(cfg, 1)
    for p in params.values():
        p.data += rng.normal(scale=0.1, size=p.shape)
    grid = rng.integers(0, 50, size=(20, 3))
    full = lm_forward(params, grid, cfg).data
    cache = [None] * cfg.layers
    head = _extend(params, cfg, grid[:12], 0, cache)
    tail = np.stack([_extend(params, cfg, grid[i:i + 1], i, cache)[0] for i in range(12, 20)])
    np.testing.assert_allclose(np.concatenate([head, tail]), full, rtol=0, atol=1e-12)

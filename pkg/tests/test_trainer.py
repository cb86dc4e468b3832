import itertools
import math

import numpy as np
import pytest

from conftest import central_difference, relative_error
from dysadapt.adapter import AdapterSpec, is_adapter_param, mount
from dysadapt.corpus.synth import generate_corpus, split
from dysadapt.corpus.vocab import Vocabulary, phone_names
from dysadapt.encoder import EncoderConfig, EncoderModel
from dysadapt.errors import ConfigurationError, DataError, InfeasibleTargetError
from dysadapt.nn import ParamStore, Tensor
from dysadapt.nn.ops import log_softmax
from dysadapt.trainer import (
    AdamW,
    AuxFeatures,
    TrainConfig,
    clip_by_global_norm,
    ctc_loss,
    format_log_line,
    greedy_decode,
    make_train_config,
    min_frames,
    train,
)


def brute_force_ctc(logp, target, blank):
    """-log sum over all frame paths that collapse to ``target``."""
    t_len, vocab = logp.shape
    total = 0.0
    for path in itertools.product(range(vocab), repeat=t_len):
        if greedy_decode(np.eye(vocab)[list(path)], blank) == list(target):
            total += math.exp(sum(logp[t, k] for t, k in enumerate(path)))
    return -math.log(total) if total > 0 else math.inf


# -- CTC -----------------------------------------------------------------------


def test_ctc_matches_enumeration_small(rng):
    logits = rng.normal(size=(3, 3))
    loss = float(ctc_loss(Tensor(logits), [0, 1], blank=2).values)
    assert abs(loss - brute_force_ctc(log_softmax(logits), [0, 1], 2)) <= 1e-10


def test_ctc_single_frame_single_label():
    logits = np.log(np.array([[0.7, 0.3]]))
    assert abs(float(ctc_loss(Tensor(logits), [0], blank=1).values) + math.log(0.7)) < 1e-12


def test_ctc_repeat_needs_blank_between():
    assert min_frames([1, 1]) == 3
    with pytest.raises(InfeasibleTargetError):
        ctc_loss(Tensor(np.zeros((2, 3))), [1, 1], blank=0)
    with pytest.raises(InfeasibleTargetError):
        ctc_loss(Tensor(np.zeros((1, 3))), [1, 2], blank=0)


def test_ctc_empty_target_is_all_blank():
    logits = np.log(np.array([[0.2, 0.8], [0.5, 0.5]]))
    loss = float(ctc_loss(Tensor(logits), [], blank=1).values)
    assert abs(loss + math.log(0.8 * 0.5)) < 1e-12


def test_ctc_gradient_matches_finite_difference(rng):
    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    ctc_loss(x, [1], blank=0).backward()

    def f():
        return float(ctc_loss(x, [1], blank=0).values)

    assert relative_error(x.grad, central_difference(f, x.values)) < 1e-5


def test_ctc_batch_is_mean_of_singles(rng):
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
    z = np.zeros((2, 5, 4))
    z[0], z[1, :3] = a, b
    batched = float(ctc_loss(Tensor(z), [[1, 2], [3]], blank=0, lengths=[5, 3]).values)
    single = (float(ctc_loss(Tensor(a), [1, 2], 0).values) + float(ctc_loss(Tensor(b), [3], 0).values)) / 2
    assert abs(batched - single) < 1e-12


def test_greedy_decode_merges_and_drops_blank():
    frames = np.eye(3)[[0, 0, 2, 1, 1, 2, 0]]
    assert greedy_decode(frames, blank=2) == [0, 1, 0]
    assert greedy_decode(frames, blank=2, length=3) == [0]


# -- schedule and optimizer ----------------------------------------------------


def test_learning_rate_schedule_points():
    cfg = TrainConfig(peak_lr=1e-4, warmup_steps=500, total_steps=5000)
    assert cfg.lr(250) == pytest.approx(0.5e-4, rel=1e-12)
    assert cfg.lr(500) == pytest.approx(1e-4, rel=1e-12)
    assert cfg.lr(2750) == pytest.approx(0.5e-4, rel=1e-12)
    assert cfg.lr(5000) == 0.0


def test_invalid_schedule():
    with pytest.raises(ConfigurationError):
        TrainConfig(warmup_steps=10, total_steps=10)


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    clipped, norm = clip_by_global_norm(grads, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(np.concatenate([clipped["a"], clipped["b"]]), [0.6, 0.0, 0.8])
    same, _ = clip_by_global_norm(grads, 10.0)
    assert same is grads


def test_adamw_first_step_is_signed_lr():
    store = ParamStore()
    store.add("w", np.array([1.0, -2.0, 0.5]))
    cfg = TrainConfig(peak_lr=0.01, warmup_steps=1, total_steps=10, grad_clip_norm=100.0)
    AdamW(cfg).step(store, 1, {"w": np.array([0.3, -0.2, 0.0])})
    np.testing.assert_allclose(store["w"].values, [0.99, -1.99, 0.5], atol=1e-9)


def test_adamw_decoupled_decay_with_zero_gradient():
    store = ParamStore()
    store.add("w", np.array([2.0]))
    cfg = TrainConfig(peak_lr=0.1, warmup_steps=1, total_steps=10, weight_decay=0.5)
    AdamW(cfg).step(store, 1, {"w": np.zeros(1)})
    assert store["w"].values[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_clipping_ignores_frozen_gradients():
    store = ParamStore()
    store.add("free", np.zeros(1))
    store.add("held", np.zeros(1))
    store.freeze(lambda n: n == "held")
    cfg = TrainConfig(peak_lr=0.1, warmup_steps=1, total_steps=10)
    norm = AdamW(cfg).step(store, 1, {"free": np.array([0.5]), "held": np.array([100.0])})
    assert norm == 0.5


# -- training loop -------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_setup():
    vocab = Vocabulary.from_names(phone_names(6))
    recs, _ = generate_corpus({"VL": 1, "H": 1}, vocab, utts_per_speaker=10, seed=3)
    cfg = EncoderConfig(hidden_size=16, n_blocks=2, n_heads=2, input_channels=8)
    return vocab, split(recs, "train"), split(recs, "test"), cfg


def test_stage_one_leaves_backbone_untouched(tiny_setup):
    vocab, train_recs, _, enc_cfg = tiny_setup
    model = EncoderModel.create(enc_cfg, vocab.output_size, seed=0)
    mount(model, AdapterSpec(1, 4), seed=0)
    before = {n: t.values.copy() for n, t in model.params.items() if not is_adapter_param(n)}
    cfg = make_train_config(len(train_recs), epochs=3, batch_size=4, peak_lr=1e-2, warmup_steps=2, stage1_fraction=1.0)
    cfg.total_steps = cfg.stage1_steps = 10
    result = train(model, train_recs, [], vocab.blank, cfg, early_stopping=False)
    assert result.stage1_steps_run == 10
    for name, values in before.items():
        assert model.params[name].values.tobytes() == values.tobytes(), name
    assert any(not np.array_equal(t.values, 0) for n, t in model.params.items() if n.endswith("up.w"))


def test_training_reduces_loss(tiny_setup):
    vocab, train_recs, test_recs, enc_cfg = tiny_setup
    model = EncoderModel.create(enc_cfg, vocab.output_size, seed=0)
    cfg = make_train_config(len(train_recs), epochs=6, batch_size=4, peak_lr=5e-3, warmup_steps=3)
    result = train(model, train_recs, test_recs, vocab.blank, cfg, early_stopping=False)
    assert np.mean(result.losses[-4:]) < np.mean(result.losses[:4])
    assert [e["epoch"] for e in result.log] == list(range(1, 7))


def test_stage_boundary_splits_log_lines(tiny_setup):
    vocab, train_recs, _, enc_cfg = tiny_setup
    model = EncoderModel.create(enc_cfg, vocab.output_size, seed=0)
    mount(model, AdapterSpec(1, 4), seed=0)
    cfg = make_train_config(len(train_recs), epochs=2, batch_size=4, warmup_steps=1)
    cfg.stage1_steps = 3  # 4 steps per epoch
    result = train(model, train_recs, [], vocab.blank, cfg, early_stopping=False)
    assert [(e["epoch"], e["stage"], e["steps"]) for e in result.log] == [(1, 1, 3), (1, 2, 1), (2, 2, 4)]
    assert "NA" in format_log_line(result.log[0])


def test_missing_aux_feature_names_utterance(tiny_setup):
    vocab, train_recs, _, enc_cfg = tiny_setup
    model = EncoderModel.create(enc_cfg, vocab.output_size, seed=0)
    mount(model, AdapterSpec(1, 4, aux_kind="fmllr", aux_dim=8), seed=0)
    cfg = make_train_config(len(train_recs), epochs=1, batch_size=4, warmup_steps=1)
    with pytest.raises(DataError, match=r"no fMLLR features for utterance 'S00\d\w+_U\d{4}'"):
        train(model, train_recs, [], vocab.blank, cfg, aux=AuxFeatures())

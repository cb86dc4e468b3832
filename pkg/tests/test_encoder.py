import numpy as np
import pytest

from dysadapt.adapter import AdapterSpec, mount, mount_dual
from dysadapt.encoder import EncoderConfig, EncoderModel, load_checkpoint, pad_batch, save_checkpoint
from dysadapt.errors import ConfigurationError, FormatError, InputTooShortError
from dysadapt.nn import no_grad

CFG = EncoderConfig(hidden_size=16, n_blocks=3, n_heads=4, input_channels=2)


@pytest.fixture
def model():
    return EncoderModel.create(CFG, vocab_size=7, seed=11)


def test_output_shapes(model, rng):
    out = model.encode(rng.normal(size=(40, 2)))
    assert out.hidden.shape == (10, 16)
    assert len(out.states) == 3 and out.lengths == [10]
    logits, lengths = model.logits(rng.normal(size=(40, 2)))
    assert logits.shape == (10, 7) and lengths == [10]


def test_too_short_input(model):
    with pytest.raises(InputTooShortError):
        model.encode(np.zeros((3, 2)))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        EncoderConfig(hidden_size=10, n_heads=4)


def test_batched_matches_single(model, rng):
    a, b = rng.normal(size=(40, 2)), rng.normal(size=(28, 2))
    x, lengths = pad_batch([a, b])
    with no_grad():
        batched, out_lengths = model.logits(x, lengths=lengths)
        single = model.logits(b)[0]
    assert out_lengths == [10, 7]
    np.testing.assert_allclose(batched.values[1, :7], single.values, rtol=0, atol=1e-12)


@pytest.mark.parametrize(
    "specs",
    [
        [AdapterSpec(1, 2)],
        [AdapterSpec(3, 4, "fmllr", 5)],
        [AdapterSpec(2, 1, "xvector", 6, relu_after_up=True)],
        [AdapterSpec(1, 2, "xvector", 6), AdapterSpec(3, 2, "fmllr", 5)],
    ],
)
def test_fresh_adapters_leave_outputs_bit_identical(model, rng, specs):
    wave = rng.normal(size=(36, 2))
    before = model.logits(wave)[0].values.copy()
    for spec in specs:
        mount(model, spec, seed=3)
    aux = {s.block_index: rng.normal(size=(9, s.aux_dim)) for s in specs if s.aux_dim}
    after = model.logits(wave, aux)[0].values
    assert after.tobytes() == before.tobytes()


def test_extract_features_bypasses_adapters(model, rng):
    wave = rng.normal(size=(24, 2))
    plain = model.extract_features(wave)
    mount(model, AdapterSpec(2, 2, "fmllr", 3), seed=0)
    model.params["adapter.b2.up.w"].values = rng.normal(size=(2, 16))
    assert np.array_equal(model.extract_features(wave), plain)


def test_attention_is_permutation_equivariant_without_conv(model, rng):
    # feed block input directly: permuting frames permutes block outputs
    from dysadapt.nn import Tensor, add, layer_norm, multi_head_attention

    attn = model._block_params(1, "attn")
    ln = model._block_params(1, "ln1")
    x = rng.normal(size=(6, 16))
    perm = rng.permutation(6)

    def block(v):
        t = Tensor(v)
        return add(t, multi_head_attention(layer_norm(t, ln["gamma"], ln["beta"]), attn, 4)).values

    np.testing.assert_allclose(block(x)[perm], block(x[perm]), atol=1e-12)


def test_checkpoint_round_trip(model, tmp_path, rng):
    mount_dual(model, AdapterSpec(1, 2, "xvector", 4), AdapterSpec(3, 2, "fmllr", 3), seed=1)
    model.params.freeze(lambda n: n.startswith("conv."))
    model.metadata["vocab"] = [["a", "EN"]]
    save_checkpoint(model, tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    assert loaded.config == model.config and loaded.adapters == model.adapters
    assert loaded.metadata == model.metadata
    assert loaded.params.names() == model.params.names()
    for name in model.params:
        assert loaded.params[name].values.tobytes() == model.params[name].values.tobytes()
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_corrupt_checkpoint(tmp_path, model):
    (tmp_path / "bad.ckpt").write_bytes(b"NOTMAGIC" + b"\0" * 16)
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.ckpt")
    save_checkpoint(model, tmp_path / "m.ckpt")
    (tmp_path / "long.ckpt").write_bytes((tmp_path / "m.ckpt").read_bytes() + b"x")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "long.ckpt")

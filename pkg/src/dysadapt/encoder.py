"""Context encoder: conv subsampler, pre-norm attention blocks, CTC head."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from dysadapt import adapter as adapter_mod
from dysadapt.adapter import AdapterSpec
from dysadapt.errors import ConfigurationError, FormatError
from dysadapt.nn import (
    ParamStore,
    Tensor,
    add,
    conv_layout,
    conv_subsample,
    layer_norm,
    linear,
    multi_head_attention,
    no_grad,
    relu,
    uniform_init,
)


@dataclass(frozen=True)
class EncoderConfig:
    hidden_size: int = 64
    n_blocks: int = 6
    n_heads: int = 4
    subsample_factor: int = 4
    ffn_width: int | None = None
    input_channels: int = 1
    ln_eps: float = 1e-5

    def __post_init__(self) -> None:
        for name in ("hidden_size", "n_blocks", "n_heads", "subsample_factor", "input_channels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden_size % self.n_heads:
            raise ConfigurationError(f"hidden_size {self.hidden_size} is not divisible by n_heads {self.n_heads}")
        if self.ffn_width is None:
            object.__setattr__(self, "ffn_width", 4 * self.hidden_size)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderBlockState:
    mha_output: Tensor
    block_output: Tensor


@dataclass
class EncoderOutput:
    hidden: Tensor
    states: list[EncoderBlockState]
    lengths: list[int]


@dataclass
class EncoderModel:
    """Encoder plus output head; adapters live in the same parameter store under ``adapter.b<k>.``."""

    config: EncoderConfig
    vocab_size: int
    params: ParamStore = field(default_factory=ParamStore)
    adapters: dict[int, AdapterSpec] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: EncoderConfig, vocab_size: int, seed: int = 0) -> "EncoderModel":
        model = cls(config, vocab_size)
        rng = np.random.default_rng(seed)
        h, f, c = config.hidden_size, config.ffn_width, config.input_channels
        add_p = model.params.add
        c_in = c
        for i, (kernel, _) in enumerate(conv_layout(config.subsample_factor)):
            add_p(f"conv.{i}.w", uniform_init(rng, kernel * c_in, (kernel * c_in, h)))
            add_p(f"conv.{i}.b", uniform_init(rng, kernel * c_in, (h,)))
            c_in = h
        for b in range(1, config.n_blocks + 1):
            pre = f"blocks.{b}."
            add_p(pre + "ln1.gamma", np.ones(h))
            add_p(pre + "ln1.beta", np.zeros(h))
            for proj in ("q", "k", "v", "o"):
                add_p(pre + f"attn.w{proj}", uniform_init(rng, h, (h, h)))
                add_p(pre + f"attn.b{proj}", uniform_init(rng, h, (h,)))
            add_p(pre + "ln2.gamma", np.ones(h))
            add_p(pre + "ln2.beta", np.zeros(h))
            add_p(pre + "ffn.w1", uniform_init(rng, h, (h, f)))
            add_p(pre + "ffn.b1", uniform_init(rng, h, (f,)))
            add_p(pre + "ffn.w2", uniform_init(rng, f, (f, h)))
            add_p(pre + "ffn.b2", uniform_init(rng, f, (h,)))
        add_p("final_ln.gamma", np.ones(h))
        add_p("final_ln.beta", np.zeros(h))
        model.init_head(vocab_size, rng)
        return model

    def init_head(self, vocab_size: int, rng: np.random.Generator) -> None:
        """(Re)create the output layer, e.g. when finetuning onto a merged vocabulary."""
        h = self.config.hidden_size
        self.params.remove("head.")
        self.params.add("head.w", uniform_init(rng, h, (h, vocab_size)))
        self.params.add("head.b", uniform_init(rng, h, (vocab_size,)))
        self.vocab_size = vocab_size

    def _block_params(self, b: int, group: str) -> dict[str, Tensor]:
        prefix = f"blocks.{b}.{group}."
        return {n[len(prefix):]: self.params[n] for n in self.params if n.startswith(prefix)}

    def encode(
        self,
        waveform: np.ndarray | Tensor,
        aux: Mapping[int, np.ndarray] | None = None,
        lengths: Sequence[int] | None = None,
        use_adapters: bool = True,
    ) -> EncoderOutput:
        """Run the encoder on ``L x c`` (or padded ``N x L x c``) input.

        ``aux`` maps block index to that adapter's auxiliary frames, already
        at encoder rate or resampled to it.
        """
        cfg = self.config
        aux = dict(aux or {})
        conv_params = [
            (self.params[f"conv.{i}.w"], self.params[f"conv.{i}.b"]) for i in range(len(conv_layout(cfg.subsample_factor)))
        ]
        x, out_lengths = conv_subsample(waveform, conv_params, cfg.subsample_factor, lengths)
        n_frames = x.shape[-2]
        key_lengths = out_lengths if x.values.ndim == 3 else None
        adapters = self.adapters if use_adapters else {}
        states: list[EncoderBlockState] = []
        for b in range(1, cfg.n_blocks + 1):
            ln1 = self._block_params(b, "ln1")
            ln2 = self._block_params(b, "ln2")
            ffn = self._block_params(b, "ffn")
            attn = self._block_params(b, "attn")
            m_b = add(x, multi_head_attention(layer_norm(x, ln1["gamma"], ln1["beta"], cfg.ln_eps), attn, cfg.n_heads, key_lengths))
            residual = m_b
            if b in adapters:
                spec = adapters[b]
                aux_b = adapter_mod.check_aux(spec, aux.get(b), n_frames)
                a_params = adapter_mod.adapter_params(self, spec)
                k = adapter_mod.auxiliary_net(aux_b, a_params) if aux_b is not None else None
                a_b = adapter_mod.adapter_forward(m_b, k, a_params, spec.relu_after_up)
                residual = add(m_b, a_b)
            normed = layer_norm(residual, ln2["gamma"], ln2["beta"], cfg.ln_eps)
            ff = linear(relu(linear(normed, ffn["w1"], ffn["b1"])), ffn["w2"], ffn["b2"])
            x = add(residual, ff)
            states.append(EncoderBlockState(m_b, x))
        return EncoderOutput(x, states, out_lengths)

    def logits(
        self,
        waveform: np.ndarray | Tensor,
        aux: Mapping[int, np.ndarray] | None = None,
        lengths: Sequence[int] | None = None,
    ) -> tuple[Tensor, list[int]]:
        out = self.encode(waveform, aux, lengths)
        normed = layer_norm(out.hidden, self.params["final_ln.gamma"], self.params["final_ln.beta"], self.config.ln_eps)
        return linear(normed, self.params["head.w"], self.params["head.b"]), out.lengths

    def extract_features(self, waveform: np.ndarray) -> np.ndarray:
        """Final-block hidden states with adapters bypassed and no graph recorded."""
        with no_grad():
            return self.encode(waveform, use_adapters=False).hidden.values.copy()

    def is_adapter_param(self, name: str) -> bool:
        return adapter_mod.is_adapter_param(name)

    # -- checkpoint I/O -------------------------------------------------

    def save(self, path: str | Path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path: str | Path) -> "EncoderModel":
        return load_checkpoint(path)


def pad_batch(arrays: Sequence[np.ndarray]) -> tuple[np.ndarray, list[int]]:
    """Stack ``L_i x c`` arrays into ``N x L_max x c`` with zero padding."""
    lengths = [a.shape[0] for a in arrays]
    out = np.zeros((len(arrays), max(lengths), arrays[0].shape[1]))
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
    return out, lengths


MAGIC = b"DYSADAPT"
FORMAT_VERSION = 1


def save_checkpoint(model: EncoderModel, path: str | Path) -> None:
    """Binary checkpoint: magic, version, JSON header length, JSON header, float64 LE payload.

    Parameters are written in store order, row-major; the header lists name
    and shape for each so the payload can be sliced back exactly.
    """
    header = {
        "config": model.config.to_dict(),
        "vocab_size": model.vocab_size,
        "adapters": [model.adapters[b].to_dict() for b in sorted(model.adapters)],
        "frozen": sorted(model.params.frozen),
        "metadata": model.metadata,
        "params": [[name, list(t.shape)] for name, t in model.params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, tensor in model.params.items():
            fh.write(np.ascontiguousarray(tensor.values, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> EncoderModel:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise FormatError(f"{path}: not a checkpoint file")
    offset = len(MAGIC)
    version, n = struct.unpack_from("<II", data, offset)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    offset += 8
    header = json.loads(data[offset : offset + n].decode("utf-8"))
    offset += n
    model = EncoderModel(EncoderConfig(**header["config"]), header["vocab_size"], metadata=header["metadata"])
    for spec in header["adapters"]:
        s = AdapterSpec(**spec)
        model.adapters[s.block_index] = s
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        model.params.add(name, values.astype(np.float64))
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes after parameters")
    model.params.frozen = set(header["frozen"])
    return model

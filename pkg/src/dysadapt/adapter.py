"""Bottleneck adapter fed with auxiliary speaker features.

An adapter mounted at block ``b`` reads the attention sublayer output
``m_b``, appends the auxiliary-net projection ``K(s)`` of the speaker
features in front of it, and maps the result down to ``d`` units, through a
``d x d`` layer and back up to ``h``::

    c_b = [K(s), m_b]
    a_b = U(relu(D(relu(V(c_b)))))

The block then continues from the residual sum ``m_b + a_b`` whose layer
normalization feeds the feed-forward sublayer. ``U`` starts at zero, so a
freshly mounted adapter leaves the encoder output unchanged.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Mapping

import numpy as np

from dysadapt.errors import AlignmentError, ConfigurationError, DimensionError
from dysadapt.nn import Tensor, add, concat_features, layer_norm, linear, relu, uniform_init

if TYPE_CHECKING:
    from dysadapt.encoder import EncoderModel

AUX_KINDS = ("fmllr", "xvector", "none")


@dataclass(frozen=True)
class AdapterSpec:
    block_index: int
    bottleneck_dim: int
    aux_kind: str = "none"
    aux_dim: int = 0
    aux_proj_dim: int = 64
    # literal reading puts ReLU after U too; off by default, see relu note in README
    relu_after_up: bool = False

    def __post_init__(self) -> None:
        if self.aux_kind not in AUX_KINDS:
            raise ConfigurationError(f"unknown aux_kind {self.aux_kind!r}; expected one of {AUX_KINDS}")
        if self.bottleneck_dim < 1:
            raise ConfigurationError(f"bottleneck_dim must be >= 1, got {self.bottleneck_dim}")
        if self.block_index < 1:
            raise ConfigurationError(f"block_index must be >= 1, got {self.block_index}")
        if self.aux_kind == "none" and self.aux_dim != 0:
            raise ConfigurationError("aux_kind 'none' requires aux_dim 0")
        if self.aux_kind != "none" and self.aux_dim < 1:
            raise ConfigurationError(f"aux_kind {self.aux_kind!r} requires aux_dim >= 1")

    @property
    def prefix(self) -> str:
        return f"adapter.b{self.block_index}."

    @property
    def proj_width(self) -> int:
        return self.aux_proj_dim if self.aux_dim else 0

    def to_dict(self) -> dict:
        return asdict(self)

    def param_count(self, hidden: int) -> int:
        d, p = self.bottleneck_dim, self.proj_width
        aux = self.aux_dim * p + p if self.aux_dim else 0
        return (p + hidden) * d + d + d * d + d + d * hidden + hidden + aux


@dataclass
class AuxSequence:
    """Auxiliary speaker features aligned to encoder frames (``T x p``)."""

    kind: str
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError(f"aux sequence must be T x p, got shape {self.values.shape}")
        if self.kind == "xvector" and not (self.values == self.values[:1]).all():
            raise ConfigurationError("x-vector aux sequence must repeat one embedding for every frame")

    @classmethod
    def from_fmllr(cls, frames: np.ndarray) -> "AuxSequence":
        return cls("fmllr", frames)

    @classmethod
    def from_xvector(cls, embedding: np.ndarray, n_frames: int) -> "AuxSequence":
        g = np.asarray(embedding, dtype=np.float64).reshape(1, -1)
        return cls("xvector", np.repeat(g, n_frames, axis=0))

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    def resampled(self, n_frames: int) -> "AuxSequence":
        if n_frames == self.n_frames:
            return self
        return AuxSequence(self.kind, resample_frames(self.values, n_frames))


def resample_frames(values: np.ndarray, n_frames: int) -> np.ndarray:
    """Nearest-neighbour resampling of a ``T x p`` sequence onto ``n_frames`` frames."""
    src = values.shape[0]
    if src == n_frames:
        return values
    idx = np.minimum(((np.arange(n_frames) + 0.5) * src / n_frames).astype(int), src - 1)
    return values[idx]


def init_adapter_params(spec: AdapterSpec, hidden: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, p = spec.bottleneck_dim, spec.proj_width
    params: dict[str, np.ndarray] = {}
    if spec.aux_dim:
        params["aux.w"] = uniform_init(rng, spec.aux_dim, (spec.aux_dim, p))
        params["aux.b"] = uniform_init(rng, spec.aux_dim, (p,))
    params["down.w"] = uniform_init(rng, p + hidden, (p + hidden, d))
    params["down.b"] = uniform_init(rng, p + hidden, (d,))
    params["mid.w"] = uniform_init(rng, d, (d, d))
    params["mid.b"] = uniform_init(rng, d, (d,))
    params["up.w"] = np.zeros((d, hidden))
    params["up.b"] = np.zeros(hidden)
    return params


def auxiliary_net(s: Tensor | np.ndarray, params: Mapping[str, Tensor]) -> Tensor:
    """``K(s) = relu(s W + b)``, applied frame by frame."""
    return relu(linear(s, params["aux.w"], params["aux.b"]))


def adapter_forward(
    m_b: Tensor,
    k: Tensor | None,
    params: Mapping[str, Tensor],
    relu_after_up: bool = False,
) -> Tensor:
    expected = params["down.w"].shape[0]
    got = m_b.shape[-1] + (k.shape[-1] if k is not None else 0)
    if got != expected:
        raise ConfigurationError(f"adapter input width {got} does not match down-projection width {expected}")
    c_b = concat_features(k, m_b)
    z = relu(linear(c_b, params["down.w"], params["down.b"]))
    z = relu(linear(z, params["mid.w"], params["mid.b"]))
    a_b = linear(z, params["up.w"], params["up.b"])
    return relu(a_b) if relu_after_up else a_b


def adapter_combine(m_b: Tensor, a_b: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Residual add, then layer normalization."""
    if m_b.shape != a_b.shape:
        raise DimensionError(f"adapter_combine: m_b shape {m_b.shape} != a_b shape {a_b.shape}")
    return layer_norm(add(m_b, a_b), gamma, beta, eps)


def adapter_params(model: "EncoderModel", spec: AdapterSpec) -> dict[str, Tensor]:
    prefix = spec.prefix
    return {name[len(prefix):]: model.params[name] for name in model.params if name.startswith(prefix)}


def mount(model: "EncoderModel", spec: AdapterSpec, seed: int = 0) -> None:
    """Attach an adapter to ``model`` in place; one adapter per block."""
    cfg = model.config
    if spec.block_index > cfg.n_blocks:
        raise ConfigurationError(f"block_index {spec.block_index} outside 1..{cfg.n_blocks}")
    if spec.block_index in model.adapters:
        raise ConfigurationError(f"block {spec.block_index} already hosts an adapter")
    rng = np.random.default_rng([seed, spec.block_index])
    for name, values in init_adapter_params(spec, cfg.hidden_size, rng).items():
        model.params.add(spec.prefix + name, values)
    model.adapters[spec.block_index] = spec


def unmount(model: "EncoderModel", block_index: int) -> None:
    spec = model.adapters.pop(block_index)
    model.params.remove(spec.prefix)


def mount_dual(model: "EncoderModel", spec_x: AdapterSpec, spec_f: AdapterSpec, seed: int = 0) -> "EncoderModel":
    """Mount an x-vector adapter and an fMLLR adapter at two distinct blocks."""
    if spec_x.block_index == spec_f.block_index:
        raise ConfigurationError(f"both adapters target block {spec_x.block_index}; dual mounting needs two blocks")
    if spec_x.aux_kind != "xvector" or spec_f.aux_kind != "fmllr":
        raise ConfigurationError("mount_dual expects an xvector spec and an fmllr spec")
    mount(model, spec_x, seed)
    mount(model, spec_f, seed)
    return model


def is_adapter_param(name: str) -> bool:
    return name.startswith("adapter.")


def check_aux(spec: AdapterSpec, aux: np.ndarray | None, n_frames: int) -> np.ndarray | None:
    """Validate and time-align one adapter's aux input (``T x p`` or ``N x T x p``)."""
    if spec.aux_dim == 0:
        return None
    if aux is None:
        raise ConfigurationError(f"adapter at block {spec.block_index} needs an auxiliary {spec.aux_kind} input")
    aux = np.asarray(aux, dtype=np.float64)
    if aux.shape[-1] != spec.aux_dim:
        raise ConfigurationError(
            f"adapter at block {spec.block_index} expects aux width {spec.aux_dim}, got {aux.shape[-1]}"
        )
    if aux.shape[-2] != n_frames:
        if aux.ndim != 2:
            raise AlignmentError(
                f"batched aux for block {spec.block_index} has T={aux.shape[-2]}, encoder has T={n_frames}"
            )
        aux = resample_frames(aux, n_frames)
    return aux

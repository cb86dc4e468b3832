"""Named parameter storage with a freeze mask."""

from __future__ import annotations

from typing import Callable, Iterable, Iterator

import numpy as np

from dysadapt.errors import ConfigurationError
from dysadapt.nn.tensor import Tensor


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParamStore:
    """Ordered ``name -> Tensor`` map.

    Names are unique; frozen names are skipped by the optimizer no matter
    what gradient they hold.
    """

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        tensor = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self._params[name] = tensor
        return tensor

    def remove(self, prefix: str) -> None:
        for name in [n for n in self._params if n.startswith(prefix)]:
            del self._params[name]
            self.frozen.discard(name)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def count(self, predicate: Callable[[str], bool] | None = None) -> int:
        return sum(t.values.size for n, t in self._params.items() if predicate is None or predicate(n))

    def freeze(self, predicate: Callable[[str], bool] | None = None) -> None:
        """Freeze every parameter (or those whose name satisfies ``predicate``)."""
        self.frozen |= {n for n in self._params if predicate is None or predicate(n)}

    def unfreeze(self, predicate: Callable[[str], bool] | None = None) -> None:
        self.frozen -= {n for n in self._params if predicate is None or predicate(n)}

    def trainable(self) -> list[str]:
        return [n for n in self._params if n not in self.frozen]

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.values.copy() for n, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, values in state.items():
            if name not in self._params:
                raise ConfigurationError(f"unknown parameter {name!r} in state")
            if self._params[name].shape != values.shape:
                raise ConfigurationError(
                    f"parameter {name!r}: stored shape {values.shape} != model shape {self._params[name].shape}"
                )
            self._params[name].values = np.array(values, dtype=np.float64)

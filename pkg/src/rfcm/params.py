"""Named parameter collections and their seeded initializers."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Parameter:
    """A named learnable tensor; names are dotted paths like "rsa.layer0.W_p"."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, tensor: Tensor):
        if not tensor.requires_grad:
            raise ValueError(f"parameter {name!r} must have requires_grad=True")
        self.name = name
        self.tensor = tensor

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class ParamStore:
    """Ordered collection of uniquely named parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, Tensor(data, requires_grad=True))
        self._params[name] = p
        return p.tensor

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def n_elements(self) -> int:
        return sum(p.data.size for p in self)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter buffers in place; names and shapes must match."""
        unknown = set(arrays) - set(self._params)
        if unknown:
            raise KeyError(f"unknown parameter name {sorted(unknown)[0]!r}")
        missing = set(self._params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameter {sorted(missing)[0]!r}")
        for name, arr in arrays.items():
            dst = self._params[name].data
            if dst.shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for parameter {name!r}: expected {dst.shape}, got {arr.shape}"
                )
            np.copyto(dst, arr.astype(dst.dtype))

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self}


class Initializer:
    """Seeded weight initializer: Xavier-uniform matrices, zero biases,
    unit layer-norm gains, N(0, 0.02^2) embedding tables."""

    def __init__(self, store: ParamStore, seed_seq: np.random.SeedSequence, dtype=np.float64):
        self.store = store
        self.rng = np.random.default_rng(seed_seq)
        self.dtype = dtype

    def matrix(self, name: str, rows: int, cols: int) -> Tensor:
        limit = np.sqrt(6.0 / (rows + cols))
        data = self.rng.uniform(-limit, limit, size=(rows, cols)).astype(self.dtype)
        return self.store.add(name, data)

    def bias(self, name: str, dim: int) -> Tensor:
        return self.store.add(name, np.zeros(dim, dtype=self.dtype))

    def embedding(self, name: str, rows: int, cols: int) -> Tensor:
        data = (self.rng.standard_normal((rows, cols)) * 0.02).astype(self.dtype)
        return self.store.add(name, data)

    def layer_norm(self, prefix: str) -> tuple[Tensor, Tensor]:
        raise NotImplementedError  # dims required; see ln()

    def ln(self, prefix: str, dim: int) -> tuple[Tensor, Tensor]:
        gain = self.store.add(f"{prefix}.gain", np.ones(dim, dtype=self.dtype))
        bias = self.store.add(f"{prefix}.bias", np.zeros(dim, dtype=self.dtype))
        return gain, bias

    def ffn(self, prefix: str, dim: int, hidden: int) -> dict[str, Tensor]:
        return {
            "W1": self.matrix(f"{prefix}.W1", dim, hidden),
            "b1": self.bias(f"{prefix}.b1", hidden),
            "W2": self.matrix(f"{prefix}.W2", hidden, dim),
            "b2": self.bias(f"{prefix}.b2", dim),
        }

    def attention(self, prefix: str, q_dim: int, kv_dim: int, out_dim: int) -> dict[str, Tensor]:
        return {
            "Wq": self.matrix(f"{prefix}.Wq", q_dim, out_dim),
            "bq": self.bias(f"{prefix}.bq", out_dim),
            "Wk": self.matrix(f"{prefix}.Wk", kv_dim, out_dim),
            "bk": self.bias(f"{prefix}.bk", out_dim),
            "Wv": self.matrix(f"{prefix}.Wv", kv_dim, out_dim),
            "bv": self.bias(f"{prefix}.bv", out_dim),
            "Wo": self.matrix(f"{prefix}.Wo", out_dim, out_dim),
            "bo": self.bias(f"{prefix}.bo", out_dim),
        }

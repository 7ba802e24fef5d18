"""Parameter containers with deterministic, path-ordered naming."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Parameter


class Module:
    """Base class: attributes that are Parameters, Modules, or lists of Modules
    are discovered automatically. Array attributes listed in ``_buffers`` are
    saved with the parameters but never trained."""

    _buffers: tuple[str, ...] = ()
    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name in sorted(vars(self)):
            val = getattr(self, name)
            if isinstance(val, (Parameter, Module)):
                yield name, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, (Module, Parameter)) for v in val):
                for i, v in enumerate(val):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        items = []
        for name, val in self._children():
            path = f"{prefix}{name}"
            if isinstance(val, Parameter):
                items.append((path, val))
            else:
                items.extend(val.named_parameters(path + "."))
        return iter(sorted(items, key=lambda kv: kv[0]))

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        items = [(f"{prefix}{b}", getattr(self, b)) for b in self._buffers]
        for name, val in self._children():
            if isinstance(val, Module):
                items.extend(val.named_buffers(f"{prefix}{name}."))
        return iter(sorted(items, key=lambda kv: kv[0]))

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return dict(sorted(out.items()))

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch; missing: {missing}; unexpected: {unexpected}")
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: stored shape {state[name].shape} != {p.shape}")
            p.data = np.asarray(state[name], dtype=p.dtype).copy()
        for m_prefix, m in self._named_modules():
            for b in m._buffers:
                key = f"{m_prefix}{b}"
                setattr(m, b, np.asarray(state[key], dtype=getattr(m, b).dtype).copy())

    def _named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, val in self._children():
            if isinstance(val, Module):
                yield from val._named_modules(f"{prefix}{name}.")

    def to_dtype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for b in m._buffers:
                setattr(m, b, getattr(m, b).astype(dtype))
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

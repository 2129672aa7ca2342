"""Named parameter storage, reverse-mode gradients, Adam and gradient checking.

Reverse-mode differentiation is delegated to ``torch.autograd``; everything the
training loop relies on (parameter bookkeeping, the Adam update, the gradient
checker, the checkpoint container, the masked primitives with their tie and
floor conventions) lives here.
"""
from __future__ import annotations

import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

CHECKPOINT_VERSION = 1
NORM_FLOOR = 1e-8
NEG_INF = float("-inf")


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


_checked = False


def set_checked(flag: bool) -> None:
    """Toggle validation of intermediates (used by tests and gradient checks)."""
    global _checked
    _checked = bool(flag)


def check_finite(name: str, t: torch.Tensor, allow_neg_inf: bool = False) -> torch.Tensor:
    if _checked:
        bad = torch.isnan(t) | (t == float("inf"))
        if not allow_neg_inf:
            bad |= t == NEG_INF
        if bool(bad.any()):
            raise NonFiniteError(f"non-finite value produced by {name}")
    return t


# -- primitives -------------------------------------------------------------

def masked_softmax(x: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax over entries where ``mask`` is true; masked entries get exactly 0."""
    # slices without any valid entry are computed unmasked, then zeroed, so no NaN enters the graph
    live = mask | ~mask.any(dim=dim, keepdim=True)
    out = torch.softmax(x.masked_fill(~live, NEG_INF), dim=dim)
    return out.masked_fill(~mask, 0.0)


def max_first(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Max along ``dim``; the gradient goes to the first maximal entry."""
    idx = torch.argmax(x, dim=dim, keepdim=True)
    return torch.gather(x, dim, idx).squeeze(dim)


def unit_rows(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(NORM_FLOOR)


def cosine(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return (unit_rows(u) * unit_rows(v)).sum(-1)


def xavier_uniform(fan_in: int, fan_out: int, shape, gen: torch.Generator, dtype) -> torch.Tensor:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(shape, generator=gen, dtype=dtype) * 2 - 1) * s


# -- parameter store ----------------------------------------------------------

class ParameterStore:
    """Named tensors with gradients, Adam moments and per-parameter step counts."""

    def __init__(self, dtype=torch.float64):
        self.dtype = dtype
        self.values: OrderedDict[str, torch.Tensor] = OrderedDict()
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.steps: dict[str, int] = {}

    def add(self, name: str, value) -> torch.Tensor:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name}")
        t = torch.as_tensor(value, dtype=self.dtype).clone().detach()
        if not bool(torch.isfinite(t).all()):
            raise NonFiniteError(f"parameter {name} has non-finite values")
        t.requires_grad_(True)
        self.values[name] = t
        self.m[name] = torch.zeros_like(t, requires_grad=False)
        self.v[name] = torch.zeros_like(t, requires_grad=False)
        self.steps[name] = 0
        return t

    def __getitem__(self, name) -> torch.Tensor:
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self, prefixes: str | Iterable[str] | None = None) -> list[str]:
        if prefixes is None:
            return list(self.values)
        prefixes = (prefixes,) if isinstance(prefixes, str) else tuple(prefixes)
        return [n for n in self.values if n.startswith(prefixes)]

    def grad(self, name) -> torch.Tensor | None:
        return self.values[name].grad

    def zero_grad(self, names=None) -> None:
        for n in names if names is not None else self.values:
            self.values[n].grad = None

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {n: t.detach().clone() for n, t in self.values.items()}

    def to(self, dtype) -> "ParameterStore":
        out = ParameterStore(dtype)
        for n, t in self.values.items():
            out.add(n, t.detach())
        return out

    def num_values(self, names=None) -> int:
        return sum(self.values[n].numel() for n in (names or self.values))


def evaluate_with_gradients(objective: Callable[[ParameterStore], torch.Tensor], store: ParameterStore,
                            names=None) -> float:
    """Run ``objective``, backpropagate, and leave gradients in ``store``.

    Only parameters in ``names`` (default: all) receive gradients; the rest keep
    ``grad`` as None.
    """
    names = store.names() if names is None else list(names)
    store.zero_grad()
    value = objective(store)
    check_finite("objective", value.detach())
    tensors = [store[n] for n in names]
    grads = torch.autograd.grad(value, tensors, allow_unused=True)
    for n, t, g in zip(names, tensors, grads):
        t.grad = torch.zeros_like(t) if g is None else g.detach()
        check_finite(f"gradient of {n}", t.grad)
    return float(value.detach())


def clip_grad_norm(store: ParameterStore, names, max_norm: float) -> float:
    grads = [store.grad(n) for n in names if store.grad(n) is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g.mul_(scale)
    return total


@torch.no_grad()
def adam_step(store: ParameterStore, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, names=None, maximize: bool = False) -> None:
    """Bias-corrected Adam on every named parameter that has a gradient."""
    names = store.names() if names is None else list(names)
    for n in names:
        p = store[n]
        g = p.grad
        if g is None:
            continue
        if maximize:
            g = -g
        store.steps[n] += 1
        t = store.steps[n]
        m, v = store.m[n], store.v[n]
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
        p.grad = None


FD_ROUNDOFF_ULPS = 16
_F64_EPS = float(np.finfo(np.float64).eps)


def finite_difference_check(objective: Callable[[ParameterStore], torch.Tensor], store: ParameterStore,
                            eps: float = 1e-5, names=None, max_coords: int = 10_000, seed: int = 0) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    The central difference carries rounding error of order
    ``ulp(f) / eps``; that bound is subtracted from the raw disagreement so
    coordinates whose true gradient is exactly zero (e.g. attention key
    biases, which softmax shift invariance cancels) do not report pure noise.
    """
    if store.dtype != torch.float64:
        raise TypeError("finite_difference_check requires a float64 store")
    names = store.names() if names is None else list(names)
    evaluate_with_gradients(objective, store, names)
    analytic = {n: store.grad(n).clone() for n in names}
    coords = [(n, k) for n in names for k in range(store[n].numel())]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        coords = [coords[i] for i in sorted(rng.choice(len(coords), max_coords, replace=False))]
    worst = 0.0
    with torch.no_grad():
        for n, k in coords:
            flat = store[n].view(-1)
            orig = flat[k].item()
            flat[k] = orig + eps
            f_plus = float(objective(store))
            flat[k] = orig - eps
            f_minus = float(objective(store))
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            noise = FD_ROUNDOFF_ULPS * _F64_EPS * (abs(f_plus) + abs(f_minus)) / (2 * eps)
            a = float(analytic[n].view(-1)[k])
            err = max(abs(a - numeric) - noise, 0.0) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    store.zero_grad()
    return worst


# -- checkpoint container -------------------------------------------------------

def save_tensors(tensors: dict[str, torch.Tensor], path) -> None:
    """Write tensors as: version u32, count u64, then per tensor
    name length u32 + UTF-8 name, rank u32, dims u64..., float32 values (all LE)."""
    parts = [struct.pack("<IQ", CHECKPOINT_VERSION, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = np.array(t.detach().cpu().numpy(), dtype="<f4", order="C")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint at offset {pos} (needed {n} bytes)")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<IQ", take(12))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (expected {CHECKPOINT_VERSION})")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: bad tensor name at offset {pos - name_len}") from exc
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).copy()
        out[name] = arr
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes at offset {pos}")
    return out


def save_store(store: ParameterStore, path) -> None:
    save_tensors(store.values, path)


def load_store(path, dtype=torch.float32) -> ParameterStore:
    tensors = load_tensors(path)
    store = ParameterStore(dtype)
    for name, arr in tensors.items():
        store.add(name, torch.from_numpy(arr))
    return store

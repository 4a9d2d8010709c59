"""Dense tensor ops, finite-difference gradient checking, Adam and checkpoints.

The ops are thin, shape-checked wrappers over torch; torch autograd supplies
the backward rules. Every op is listed in ``OPS`` together with a sampler of
random inputs so the gradient checker can sweep all of them.
"""

from __future__ import annotations

import base64
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

CHECKPOINT_FORMAT = "cascade-match-tensors"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible for an op."""


class NumericError(ArithmeticError):
    """Raised on non-finite values where finite ones are required."""


def _require(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise DimensionError(f"{op}: {msg}")


# ---------------------------------------------------------------------------
# core ops
# ---------------------------------------------------------------------------


def affine(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``x @ W.T + b`` for ``x`` of shape (..., in) and ``W`` of shape (out, in)."""
    _require(W.dim() == 2, "affine", f"weight must be 2-d, got {tuple(W.shape)}")
    _require(x.shape[-1] == W.shape[1], "affine",
             f"input dim {x.shape[-1]} != weight in-dim {W.shape[1]}")
    _require(b.shape == (W.shape[0],), "affine",
             f"bias shape {tuple(b.shape)} != ({W.shape[0]},)")
    return F.linear(x, W, b)


def conv1d_same(x: torch.Tensor, F_w: torch.Tensor, b: torch.Tensor,
                window: int = 3) -> torch.Tensor:
    """Zero-padded 1-d convolution over rows, output length equals input length.

    ``x`` is (L, d_in) or (B, L, d_in); ``F_w`` is (d_out, d_in, window).
    Row ``i`` of the output sees rows ``i - window//2 .. i + window//2``.
    """
    _require(window % 2 == 1, "conv1d_same", f"window must be odd, got {window}")
    _require(F_w.dim() == 3 and F_w.shape[2] == window, "conv1d_same",
             f"filter shape {tuple(F_w.shape)} does not match window {window}")
    _require(x.shape[-1] == F_w.shape[1], "conv1d_same",
             f"input dim {x.shape[-1]} != filter in-dim {F_w.shape[1]}")
    _require(b.shape == (F_w.shape[0],), "conv1d_same", "bias shape mismatch")
    single = x.dim() == 2
    h = x.unsqueeze(0) if single else x
    out = F.conv1d(h.transpose(1, 2), F_w, b, padding=window // 2).transpose(1, 2)
    return out[0] if single else out


def relu(x: torch.Tensor) -> torch.Tensor:
    # torch uses subgradient 0 at exactly 0
    return torch.relu(x)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def dot(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _require(a.dim() == 1 and b.dim() == 1 and a.shape == b.shape, "dot",
             f"expected equal 1-d shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    return torch.dot(a, b)


def mean_pool(rows: torch.Tensor) -> torch.Tensor:
    _require(rows.dim() == 2 and rows.shape[0] > 0, "mean_pool",
             f"expected non-empty (n, d), got {tuple(rows.shape)}")
    return rows.mean(dim=0)


def max_pool_rows(rows: torch.Tensor) -> torch.Tensor:
    """Column-wise max of an (n, d) matrix."""
    _require(rows.dim() == 2 and rows.shape[0] > 0, "max_pool_rows",
             f"expected non-empty (n, d), got {tuple(rows.shape)}")
    return rows.max(dim=0).values


def max_pool_elementwise(rows: Iterable[torch.Tensor]) -> torch.Tensor:
    """Elementwise max over a sequence of equal-shape vectors."""
    rows = list(rows)
    _require(len(rows) > 0, "max_pool_elementwise", "empty input")
    shape = rows[0].shape
    _require(all(r.shape == shape for r in rows), "max_pool_elementwise",
             "vectors differ in shape")
    out = rows[0]
    for r in rows[1:]:
        out = torch.maximum(out, r)
    return out


def concat(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _require(a.shape[:-1] == b.shape[:-1], "concat",
             f"leading shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.cat([a, b], dim=-1)


# ---------------------------------------------------------------------------
# parameter store, gradient check, Adam
# ---------------------------------------------------------------------------


@dataclass
class ParamStore:
    """Named parameter tensors plus Adam moments.

    Parameters are shared by reference with whatever module built the store,
    so updates made here are visible to the model.
    """

    params: "OrderedDict[str, torch.Tensor]"
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, torch.zeros_like(p, requires_grad=False))
            self.v.setdefault(name, torch.zeros_like(p, requires_grad=False))

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParamStore":
        return cls(OrderedDict(module.named_parameters()))

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, object],
                    dtype: torch.dtype = torch.float64) -> "ParamStore":
        return cls(OrderedDict(
            (k, torch.as_tensor(np.asarray(a), dtype=dtype).clone().requires_grad_(True))
            for k, a in arrays.items()))

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def grads(self) -> dict[str, torch.Tensor]:
        return {k: (p.grad if p.grad is not None else torch.zeros_like(p))
                for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def grad_check(f: Callable[[ParamStore], torch.Tensor], params: ParamStore,
               eps: float = 1e-5, floor: float = 1e-5) -> float:
    """Worst relative error between autograd and central finite differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps coordinates whose true gradient is zero from dividing by
    rounding noise.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params.zero_grad()
    out = f(params)
    if out.numel() != 1:
        raise DimensionError(f"grad_check: f must return a scalar, got {tuple(out.shape)}")
    if not torch.isfinite(out).all():
        raise NumericError("grad_check: f is not finite at params")
    out.backward()
    analytic = {k: g.detach().clone() for k, g in params.grads().items()}
    worst = 0.0
    with torch.no_grad():
        for name, p in params.params.items():
            flat = p.view(-1)
            a_flat = analytic[name].view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = f(params).item()
                flat[i] = orig - eps
                fm = f(params).item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError(f"grad_check: non-finite value perturbing {name}[{i}]")
                num = (fp - fm) / (2 * eps)
                a = a_flat[i].item()
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
    params.zero_grad()
    return worst


def adam_step(store: ParamStore, grads: Mapping[str, torch.Tensor] | None = None,
              lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> ParamStore:
    """One bias-corrected Adam update, in place. Returns the same store."""
    if grads is None:
        grads = store.grads()
    b1, b2 = betas
    for name, g in grads.items():
        if g.shape != store.params[name].shape:
            raise DimensionError(f"adam_step: grad for {name} has shape {tuple(g.shape)}")
        if not torch.isfinite(g).all():
            raise NumericError(f"adam_step: non-finite gradient for {name}")
    store.step += 1
    t = store.step
    with torch.no_grad():
        for name, p in store.params.items():
            g = grads[name]
            m, v = store.m[name], store.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return store


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_tensors(path: str | Path, tensors: Mapping[str, torch.Tensor],
                 header: Mapping | None = None) -> None:
    """Write named tensors as a deterministic JSON document.

    Layout (version 1)::

        {"format": "cascade-match-tensors", "version": 1,
         "header": {...},
         "tensors": {name: {"shape": [...], "dtype": "float64",
                            "data": base64(little-endian raw bytes)}}}

    Tensor order follows the mapping; keys inside objects are sorted.
    """
    body = OrderedDict()
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy()
        dtype = "float32" if arr.dtype == np.float32 else "float64"
        arr = np.ascontiguousarray(arr, dtype="<f4" if dtype == "float32" else "<f8")
        body[name] = {"shape": list(arr.shape), "dtype": dtype,
                      "data": base64.b64encode(arr.tobytes()).decode("ascii")}
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "header": dict(header or {}), "tensors": body}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_tensors(path: str | Path) -> tuple[dict, "OrderedDict[str, torch.Tensor]"]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    out = OrderedDict()
    for name in doc["tensors"]:
        rec = doc["tensors"][name]
        np_dtype = "<f4" if rec["dtype"] == "float32" else "<f8"
        arr = np.frombuffer(base64.b64decode(rec["data"]), dtype=np_dtype).reshape(rec["shape"])
        out[name] = torch.from_numpy(arr.copy())
    return doc["header"], out


# ---------------------------------------------------------------------------
# op registry for gradient sweeps
# ---------------------------------------------------------------------------


def _r(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return rng.standard_normal(shape)


def _sample_affine(rng):
    n, i, o = rng.integers(1, 5, size=3)
    return {"x": _r(rng, n, i), "W": _r(rng, o, i), "b": _r(rng, o)}


def _sample_conv(rng):
    L, di, do = rng.integers(1, 6), rng.integers(1, 4), rng.integers(1, 4)
    return {"x": _r(rng, L, di), "F": _r(rng, do, di, 3), "b": _r(rng, do)}


def _sample_vec(rng):
    return {"x": _r(rng, int(rng.integers(1, 7)))}


def _sample_pair(rng):
    d = int(rng.integers(1, 7))
    return {"a": _r(rng, d), "b": _r(rng, d)}


def _sample_rows(rng):
    return {"rows": _r(rng, int(rng.integers(1, 5)), int(rng.integers(1, 5)))}


def _sample_two_mats(rng):
    n = int(rng.integers(1, 4))
    return {"a": _r(rng, n, int(rng.integers(1, 4))), "b": _r(rng, n, int(rng.integers(1, 4)))}


def _weighted(out: torch.Tensor, seed: int = 7) -> torch.Tensor:
    # contract with a fixed random weight so every output coordinate is checked
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(out.shape, generator=g, dtype=out.dtype)
    return (out * w).sum()


OPS: dict[str, tuple[Callable[[ParamStore], torch.Tensor], Callable]] = {
    "affine": (lambda p: _weighted(affine(p["x"], p["W"], p["b"])), _sample_affine),
    "conv1d_same": (lambda p: _weighted(conv1d_same(p["x"], p["F"], p["b"], 3)), _sample_conv),
    "relu": (lambda p: _weighted(relu(p["x"])), _sample_vec),
    "tanh": (lambda p: _weighted(tanh(p["x"])), _sample_vec),
    "softmax": (lambda p: _weighted(softmax(p["x"])), _sample_vec),
    "dot": (lambda p: dot(p["a"], p["b"]), _sample_pair),
    "mean_pool": (lambda p: _weighted(mean_pool(p["rows"])), _sample_rows),
    "max_pool_rows": (lambda p: _weighted(max_pool_rows(p["rows"])), _sample_rows),
    "max_pool_elementwise": (
        lambda p: _weighted(max_pool_elementwise(list(p["rows"]))), _sample_rows),
    "concat": (lambda p: _weighted(concat(p["a"], p["b"])), _sample_two_mats),
}
"""name -> (scalar objective over a ParamStore, sampler of random input arrays)."""

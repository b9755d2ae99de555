"""Dense tensor ops with reverse-mode differentiation.

Tensors are ``torch.Tensor`` values and the graph is torch's autograd tape;
this module adds the contracts the networks rely on: explicit shape errors,
non-finite detection after every op, first-index routing for max pooling, a
functional Adam step, and a self-describing checkpoint container.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import BadContainer, NumericError, ShapeMismatch

DEFAULT_DTYPE = torch.float64

_checks_enabled = True


def set_numeric_checks(enabled: bool) -> None:
    global _checks_enabled
    _checks_enabled = bool(enabled)


@contextlib.contextmanager
def numeric_checks(enabled: bool):
    prev = _checks_enabled
    set_numeric_checks(enabled)
    try:
        yield
    finally:
        set_numeric_checks(prev)


def _finite(t: torch.Tensor, op: str) -> torch.Tensor:
    if _checks_enabled and not bool(torch.isfinite(t).all()):
        raise NumericError(f"{op} produced non-finite values")
    return t


def tensor(data, requires_grad: bool = False, dtype: torch.dtype | None = None) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data), dtype=dtype or DEFAULT_DTYPE).clone()
    _finite(t, "tensor")
    return t.requires_grad_(requires_grad)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return _finite(a @ b, "matmul")


def _same_or_scalar(a, b, op: str) -> None:
    sa = a.shape if isinstance(a, torch.Tensor) else ()
    sb = b.shape if isinstance(b, torch.Tensor) else ()
    if sa != sb and math.prod(sa) != 1 and math.prod(sb) != 1:
        raise ShapeMismatch(f"{op}: shapes {tuple(sa)} and {tuple(sb)} differ and neither is a scalar")


def relu(x: torch.Tensor) -> torch.Tensor:
    # torch's relu backward passes zero at exactly 0
    return _finite(torch.relu(x), "relu")


def add(a, b) -> torch.Tensor:
    _same_or_scalar(a, b, "add")
    return _finite(a + b, "add")


def mul(a, b) -> torch.Tensor:
    _same_or_scalar(a, b, "mul")
    return _finite(a * b, "mul")


def scale(x: torch.Tensor, s: float) -> torch.Tensor:
    return _finite(x * s, "scale")


_ELEMENTWISE = {"relu": relu, "add": add, "mul": mul, "scale": scale}


def elementwise(kind: str, *inputs) -> torch.Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*inputs)


def reduce_max_over_points(x: torch.Tensor) -> torch.Tensor:
    """Column-wise max over the point axis (-2), keeping it as extent 1.

    The gradient goes to the first maximizing row of each column only.
    """
    if x.dim() < 2 or x.shape[-2] < 1:
        raise ShapeMismatch(f"reduce_max_over_points needs at least one row, got {tuple(x.shape)}")
    idx = torch.argmax(x, dim=-2, keepdim=True)  # first occurrence on ties
    return _finite(torch.gather(x, -2, idx), "reduce_max_over_points")


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return _finite(e / e.sum(dim=dim, keepdim=True), "softmax")


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    return _finite(shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True)), "log_softmax")


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is (out, in)."""
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeMismatch(f"linear: input width {x.shape[-1]} != weight fan-in {weight.shape[-1]}")
    out = x @ weight.transpose(0, 1)
    if bias is not None:
        out = out + bias
    return _finite(out, "linear")


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return _finite((x - mu) / torch.sqrt(var + eps) * weight + bias, "layer_norm")


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None, stride: int = 1, pad: int = 0) -> torch.Tensor:
    """Cross-correlation of (C, H, W) or (B, C, H, W) input with (O, C, k, k) weights."""
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"conv2d: input {tuple(x.shape)} incompatible with kernel {tuple(weight.shape)}")
    kh, kw = weight.shape[-2:]
    oh = (x.shape[2] + 2 * pad - kh) // stride + 1
    ow = (x.shape[3] + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"conv2d: output extent {(oh, ow)} is empty")
    out = torch.nn.functional.conv2d(x, weight, bias, stride=stride, padding=pad)
    out = _finite(out, "conv2d")
    return out[0] if single else out


@dataclass
class AttentionParams:
    """Projection weights (out, in) and biases of one attention block."""

    wq: torch.Tensor
    wk: torch.Tensor
    wv: torch.Tensor
    wo: torch.Tensor
    bq: torch.Tensor | None = None
    bk: torch.Tensor | None = None
    bv: torch.Tensor | None = None
    bo: torch.Tensor | None = None


def multihead_self_attention(
    x: torch.Tensor, heads: int, params: AttentionParams, return_weights: bool = False
):
    """Scaled dot-product self-attention over the token axis (-2) of ``x``."""
    t, d = x.shape[-2], x.shape[-1]
    if d % heads:
        raise ShapeMismatch(f"model width {d} is not divisible by {heads} heads")
    dh = d // heads
    lead = x.shape[:-2]

    def split(y):
        return y.reshape(*lead, t, heads, dh).transpose(-3, -2)

    q = split(linear(x, params.wq, params.bq))
    k = split(linear(x, params.wk, params.bk))
    v = split(linear(x, params.wv, params.bv))
    scores = matmul(q, k.transpose(-2, -1)) / math.sqrt(dh)
    weights = softmax(scores, dim=-1)
    ctx = matmul(weights, v).transpose(-3, -2).reshape(*lead, t, d)
    out = linear(ctx, params.wo, params.bo)
    return (out, weights) if return_weights else out


def cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood; ``target`` holds class indices for the last axis."""
    lp = log_softmax(logits, dim=-1)
    picked = torch.gather(lp, -1, target.long().unsqueeze(-1)).squeeze(-1)
    return _finite(-picked.mean(), "cross_entropy")


def smooth_l1(x: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    a = x.abs()
    return _finite(torch.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta), "smooth_l1")


# --------------------------------------------------------------------- Adam


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(params, grads, state: AdamState, hyper: AdamHyper) -> AdamState:
    """One in-place Adam update of ``params``; returns the advanced state."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ShapeMismatch("optimizer state does not match params")
    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            step = (m / c1) / (torch.sqrt(v / c2) + hyper.eps)
            p.sub_(hyper.lr * step)
    return state


# --------------------------------------------------------------- checkpoints
#
#   b"FFCKPT\0\1" | u32 header_len | header JSON | raw tensor data
#
# The header holds {"version", "meta", "tensors": [{name, shape, dtype,
# offset, nbytes}], "sha256"}; sha256 covers the manifest entries and the data.

CKPT_MAGIC = b"FFCKPT\x00\x01"
CKPT_VERSION = 1
_DTYPES = {"f64": (torch.float64, "<f8"), "f32": (torch.float32, "<f4")}


def _digest(entries: list, blob: bytes) -> str:
    h = hashlib.sha256(json.dumps(entries, sort_keys=True).encode())
    h.update(blob)
    return h.hexdigest()


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        code = "f64" if t.dtype == torch.float64 else "f32"
        raw = np.ascontiguousarray(t.numpy(), dtype=_DTYPES[code][1]).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": code, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    header = {"version": CKPT_VERSION, "meta": meta or {}, "tensors": entries, "sha256": _digest(entries, blob)}
    hb = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<I", len(hb)) + hb + blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise BadContainer(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12 : 12 + hlen].decode())
    if header.get("version") != CKPT_VERSION:
        raise BadContainer(f"{path}: unsupported checkpoint version {header.get('version')}")
    blob = data[12 + hlen :]
    if _digest(header["tensors"], blob) != header["sha256"]:
        raise BadContainer(f"{path}: checksum mismatch")
    out = {}
    for e in header["tensors"]:
        torch_dtype, np_dtype = _DTYPES[e["dtype"]]
        arr = np.frombuffer(blob, dtype=np_dtype, count=e["nbytes"] // np.dtype(np_dtype).itemsize, offset=e["offset"])
        out[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy()).to(torch_dtype)
    return out, header["meta"]

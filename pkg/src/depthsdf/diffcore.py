"""Differentiable tensor substrate.

Dense tensors and reverse-mode gradients come from torch autograd; this
module pins the op set the networks are allowed to use, the parameter
registry used by every training loop, a hand-written Adam step, and the
NTF1 tensor file format.
"""

from __future__ import annotations

import io
import os
import struct
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

Tensor = torch.Tensor

NTF_MAGIC = b"NTF1"
_NTF_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


def configure(threads: int | None = None) -> None:
    """Fix thread count and force deterministic kernels."""
    if threads is not None:
        torch.set_num_threads(max(1, int(threads)))
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# op set


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    return F.linear(x, weight, bias)


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    if weight.shape[-2:] != (3, 3):
        raise ShapeError(f"expected 3x3 kernel, got {tuple(weight.shape)}")
    if stride not in (1, 2):
        raise ShapeError("stride must be 1 or 2")
    return F.conv2d(x, weight, bias, stride=stride, padding=1)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    return F.conv2d(x, weight, bias)


def upsample(x: Tensor, factor: int = 2, mode: str = "nearest") -> Tensor:
    if mode == "nearest":
        return F.interpolate(x, scale_factor=factor, mode="nearest")
    if mode == "bilinear":
        return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)
    raise ValueError(f"unknown upsampling mode {mode!r}")


def avg_pool2(x: Tensor) -> Tensor:
    return F.avg_pool2d(x, 2)


def grid_sample_bilinear(fm: Tensor, grid: Tensor) -> Tensor:
    """Bilinear lookup of ``fm`` (B,C,H,W) at normalized coords ``grid`` (B,N,2).

    Coordinates follow the pixel-area convention: -1 and +1 are the outer
    edges of the border pixels. Out-of-range lookups clamp to the border.
    Returns (B,C,N).
    """
    out = F.grid_sample(fm, grid[:, :, None, :], mode="bilinear",
                        padding_mode="border", align_corners=False)
    return out[..., 0]


def group_norm(x: Tensor, groups: int, weight: Tensor | None = None,
               bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    return F.group_norm(x, groups, weight, bias, eps)


relu = torch.relu
tanh = torch.tanh


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    return F.leaky_relu(x, slope)


def mean(x: Tensor, dim=None) -> Tensor:
    return x.mean() if dim is None else x.mean(dim)


def sum(x: Tensor, dim=None) -> Tensor:  # noqa: A001 - mirrors the tensor op name
    return x.sum() if dim is None else x.sum(dim)


def concat(xs, dim: int) -> Tensor:
    return torch.cat(list(xs), dim)


# ---------------------------------------------------------------------------
# layers built only from the op set above


class Dense(nn.Module):
    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        lin = nn.Linear(n_in, n_out)
        self.weight = lin.weight
        self.bias = lin.bias

    def forward(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)


class Conv3x3(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.weight = conv.weight
        self.bias = conv.bias
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return conv3x3(x, self.weight, self.bias, self.stride)


class Conv1x1(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        conv = nn.Conv2d(c_in, c_out, 1)
        self.weight = conv.weight
        self.bias = conv.bias

    def forward(self, x: Tensor) -> Tensor:
        return conv1x1(x, self.weight, self.bias)


class GroupNorm(nn.Module):
    def __init__(self, groups: int, channels: int):
        super().__init__()
        self.groups = groups
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return group_norm(x, self.groups, self.weight, self.bias)


def num_groups(channels: int, target: int = 8) -> int:
    g = min(target, channels)
    while channels % g:
        g -= 1
    return g


# ---------------------------------------------------------------------------
# parameter registry and graph evaluation


class GradContext:
    """Named trainable tensors plus the graph recorded by the last forward.

    ``fn`` receives the keyword inputs and returns a tensor; it closes over
    the registered parameters (typically an ``nn.Module``). ``signature``
    maps input names to shapes, ``None`` marking a free extent.
    """

    def __init__(self, fn: Callable[..., Tensor] | nn.Module,
                 params: Mapping[str, Tensor] | None = None,
                 signature: Mapping[str, tuple] | None = None):
        self.fn = fn
        if params is None:
            if not isinstance(fn, nn.Module):
                raise TypeError("params are required unless fn is an nn.Module")
            params = dict(fn.named_parameters())
        self.params: dict[str, Tensor] = dict(params)
        self.trainable: dict[str, bool] = {k: True for k in self.params}
        self.signature = dict(signature) if signature else None
        self._output: Tensor | None = None

    def register(self, name: str, tensor: Tensor, trainable: bool = True) -> None:
        self.params[name] = tensor
        self.trainable[name] = trainable

    def freeze(self, prefix: str = "") -> None:
        for k in self.params:
            if k.startswith(prefix):
                self.trainable[k] = False

    def trainable_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if self.trainable[k]}

    def _check_signature(self, inputs: Mapping[str, Tensor]) -> None:
        if self.signature is None:
            return
        if set(inputs) != set(self.signature):
            raise ShapeError(f"inputs {sorted(inputs)} do not match signature {sorted(self.signature)}")
        for name, shape in self.signature.items():
            got = tuple(inputs[name].shape)
            if len(got) != len(shape) or any(s is not None and s != g for s, g in zip(shape, got)):
                raise ShapeError(f"input {name!r} has shape {got}, expected {shape}")

    def forward(self, **inputs: Tensor) -> Tensor:
        self._check_signature(inputs)
        for name, t in inputs.items():
            if isinstance(t, Tensor) and t.is_floating_point():
                check_finite(t, f"input {name!r}")
        for p in self.trainable_params().values():
            p.requires_grad_(True)
        out = self.fn(**inputs)
        check_finite(out, "forward output")
        self._output = out
        return out

    def gradient(self, output: Tensor | None = None) -> dict[str, Tensor]:
        if self._output is None:
            raise RuntimeError("gradient() called before forward()")
        output = self._output if output is None else output
        if output.numel() != 1:
            raise ShapeError(f"gradient needs a scalar output, got shape {tuple(output.shape)}")
        names = list(self.trainable_params())
        tensors = [self.params[k] for k in names]
        if output.requires_grad:
            grads = torch.autograd.grad(output.reshape(()), tensors, allow_unused=True)
        else:
            grads = [None] * len(tensors)
        result = {}
        for name, t, g in zip(names, tensors, grads):
            g = torch.zeros_like(t) if g is None else g
            result[name] = check_finite(g, f"gradient of {name!r}")
        self._output = None
        return result


# ---------------------------------------------------------------------------
# optimizer


def sgd_adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor],
                  state: dict, lr: float, beta1: float = ADAM_BETA1,
                  beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> dict:
    """One bias-corrected Adam update applied in place to ``params``.

    ``state`` starts as ``{}`` and is filled with per-parameter moments and a
    step counter; it is returned for convenience.
    """
    step = state.get("step", 0) + 1
    state["step"] = step
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ShapeError(f"grad {name!r} shape {tuple(g.shape)} != param {tuple(p.shape)}")
            m = m_all.get(name)
            if m is None:
                m = m_all[name] = torch.zeros_like(p)
                v_all[name] = torch.zeros_like(p)
            v = v_all[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


class Adam:
    def __init__(self, lr: float):
        self.lr = lr
        self.state: dict = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, Tensor]) -> None:
        sgd_adam_step(params, grads, self.state, self.lr)


# ---------------------------------------------------------------------------
# NTF1 files


def ntf_dumps(array) -> bytes:
    a = np.asarray(array.detach().cpu().numpy() if isinstance(array, Tensor) else array)
    if a.dtype == np.float64:
        code = 1
    else:
        code = 0
        a = a.astype(np.float32)
    if a.ndim > 255:
        raise ShapeError("too many dimensions for NTF1")
    buf = io.BytesIO()
    buf.write(NTF_MAGIC)
    buf.write(struct.pack("<BB", code, a.ndim))
    buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(np.ascontiguousarray(a, dtype=_NTF_DTYPES[code]).tobytes())
    return buf.getvalue()


def ntf_loads(data: bytes) -> np.ndarray:
    if data[:4] != NTF_MAGIC:
        raise ValueError("not an NTF1 blob")
    code, ndim = struct.unpack_from("<BB", data, 4)
    if code not in _NTF_DTYPES:
        raise ValueError(f"unknown NTF1 dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}I", data, 6)
    offset = 6 + 4 * ndim
    dtype = _NTF_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(data) - offset != count * dtype.itemsize:
        raise ValueError("NTF1 payload length does not match extents")
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape).astype(dtype.newbyteorder("="))


def write_ntf(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(ntf_dumps(array))


def read_ntf(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return ntf_loads(fh.read())

"""Small residual heatmap-regression CNN with hand-written forward/backward.

Architecture (stride 4 overall)::

    stem1  conv 7x7/2 pad 3, in -> 16, relu
    stem2  conv 3x3/2 pad 1, 16 -> 32, relu
    block1..block3
           x -> conv 3x3 pad 1 -> relu -> conv 3x3 pad 1 -> (+x) -> relu
    head   conv 1x1, 32 -> C

Public tensors are NCHW; internally activations are kept NHWC so im2col is a
strided view plus one copy.  Weights are stored ``(out, in, kh, kw)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import Rng

GROUPS = ("stem1", "stem2", "block1", "block2", "block3", "head")
BACKBONE_WIDTH = 32
STEM_WIDTH = 16
STRIDE = 4


@dataclass(frozen=True)
class LayerSpec:
    index: int
    name: str
    kind: str  # conv | relu | residual-block | head-conv
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0

    def signature(self) -> str:
        return (f"{self.index}:{self.name}:{self.kind}:{self.in_channels}>{self.out_channels}"
                f":k{self.kernel}s{self.stride}p{self.padding}")


def layer_specs(in_channels: int, head_channels: int) -> list[LayerSpec]:
    w, s = BACKBONE_WIDTH, STEM_WIDTH
    specs = [
        LayerSpec(0, "stem1", "conv", in_channels, s, 7, 2, 3),
        LayerSpec(1, "stem1.relu", "relu", s, s),
        LayerSpec(2, "stem2", "conv", s, w, 3, 2, 1),
        LayerSpec(3, "stem2.relu", "relu", w, w),
    ]
    for b in range(1, 4):
        specs.append(LayerSpec(len(specs), f"block{b}", "residual-block", w, w, 3, 1, 1))
    specs.append(LayerSpec(len(specs), "head", "head-conv", w, head_channels, 1, 1, 0))
    return specs


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def architecture_hash(in_channels: int, head_channels: int) -> int:
    chain = "|".join(spec.signature() for spec in layer_specs(in_channels, head_channels))
    return fnv1a64(chain.encode("ascii"))


def param_shapes(in_channels: int, head_channels: int) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes for the fixed architecture."""
    shapes: dict[str, tuple[int, ...]] = {}
    for spec in layer_specs(in_channels, head_channels):
        if spec.kind in ("conv", "head-conv"):
            shapes[f"{spec.name}.weight"] = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
            shapes[f"{spec.name}.bias"] = (spec.out_channels,)
        elif spec.kind == "residual-block":
            for conv in ("conv1", "conv2"):
                shapes[f"{spec.name}.{conv}.weight"] = (spec.out_channels, spec.in_channels,
                                                        spec.kernel, spec.kernel)
                shapes[f"{spec.name}.{conv}.bias"] = (spec.out_channels,)
    return shapes


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


HEAD_INIT_GAIN = 0.1


def he_uniform(rng: np.random.Generator, shape, dtype, gain: float = 1.0) -> np.ndarray:
    """U(-b, b) with b = gain * sqrt(6 / fan_in), fan_in = in * kh * kw."""
    fan_in = int(np.prod(shape[1:]))
    bound = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ModelState:
    """Parameters, per-group freeze flags and a version counter for cache checks."""

    def __init__(self, params: dict[str, np.ndarray], frozen=None):
        self.params = params
        self.in_channels = params["stem1.weight"].shape[1]
        self.head_channels = params["head.weight"].shape[0]
        expected = param_shapes(self.in_channels, self.head_channels)
        if list(params) != list(expected):
            raise ValueError(f"parameter names {list(params)} do not match architecture")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.frozen = dict.fromkeys(GROUPS, False)
        if frozen:
            self.frozen.update(frozen)
        self.version = 0

    @property
    def dtype(self):
        return self.params["stem1.weight"].dtype

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def is_frozen(self, name: str) -> bool:
        return self.frozen[group_of(name)]

    def trainable(self) -> list[str]:
        return [name for name in self.params if not self.is_frozen(name)]

    def touch(self) -> None:
        """Mark parameters as modified so older forward caches are rejected."""
        self.version += 1

    def copy(self) -> "ModelState":
        return ModelState({k: v.copy() for k, v in self.params.items()}, dict(self.frozen))

    def astype(self, dtype) -> "ModelState":
        return ModelState({k: v.astype(dtype) for k, v in self.params.items()}, dict(self.frozen))

    @property
    def arch_hash(self) -> int:
        return architecture_hash(self.in_channels, self.head_channels)


def build_network(input_size: int, head_channels: int, rng: Rng | int = 0,
                  in_channels: int = 3, dtype=np.float32) -> ModelState:
    if input_size <= 0 or input_size % STRIDE:
        raise ValueError(f"input size must be a positive multiple of {STRIDE}, got {input_size}")
    if head_channels < 1 or in_channels < 1:
        raise ValueError("channel counts must be positive")
    gen = (rng if isinstance(rng, Rng) else Rng(rng)).numpy()
    params = {}
    for name, shape in param_shapes(in_channels, head_channels).items():
        if name == "head.weight":
            # un-normalised residual features are large at init; a full-scale
            # head starts far from the [0, 1] targets and training stalls
            params[name] = he_uniform(gen, shape, dtype, HEAD_INIT_GAIN)
        elif name.endswith(".weight"):
            params[name] = he_uniform(gen, shape, dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return ModelState(params)


def swap_head(state: ModelState, new_channels: int, rng: Rng | int = 0) -> ModelState:
    """Copy the backbone and attach a freshly initialised ``new_channels`` head."""
    gen = (rng if isinstance(rng, Rng) else Rng(rng)).numpy()
    params = {k: v.copy() for k, v in state.params.items() if group_of(k) != "head"}
    params["head.weight"] = he_uniform(gen, (new_channels, BACKBONE_WIDTH, 1, 1), state.dtype,
                                     HEAD_INIT_GAIN)
    params["head.bias"] = np.zeros(new_channels, dtype=state.dtype)
    return ModelState(params, dict(state.frozen))


def set_freeze_prefix(state: ModelState, depth: int) -> ModelState:
    """Freeze the first ``depth`` groups (stem1, stem2, block1..3, head); in place."""
    if not 0 <= depth <= len(GROUPS):
        raise ValueError(f"freeze depth must lie in [0, {len(GROUPS)}], got {depth}")
    for i, group in enumerate(GROUPS):
        state.frozen[group] = i < depth
    return state


# --------------------------------------------------------------- primitives


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """NHWC input -> ``(B*Ho*Wo, k*k*C)`` columns ordered (kh, kw, C)."""
    b, h, w, c = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    view = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = np.ascontiguousarray(view.transpose(0, 1, 2, 4, 5, 3)).reshape(b * ho * wo, k * k * c)
    return cols, ho, wo


def _wmat(w: np.ndarray) -> np.ndarray:
    f, c, kh, kw = w.shape
    return w.transpose(2, 3, 1, 0).reshape(kh * kw * c, f)


def conv_forward(x, w, bias, stride, pad):
    b = x.shape[0]
    k = w.shape[2]
    cols, ho, wo = _im2col(x, k, stride, pad)
    out = cols @ _wmat(w)
    out += bias
    return out.reshape(b, ho, wo, w.shape[0]), cols


def conv_backward(dout, cols, x_shape, w, stride, pad, need_dx=True):
    b, ho, wo, f = dout.shape
    _, h, wd, c = x_shape
    k = w.shape[2]
    dmat = dout.reshape(b * ho * wo, f)
    dw = (cols.T @ dmat).reshape(k, k, c, f).transpose(3, 2, 0, 1)
    db = dmat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    if stride == 1 and 2 * pad == k - 1:
        # input gradient is the correlation of dout with the flipped, transposed kernel
        wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx, _ = conv_forward(dout, wflip, np.zeros(c, dtype=dout.dtype), 1, k - 1 - pad)
        return dx, dw, db
    dcols = (dmat @ _wmat(w).T).reshape(b, ho, wo, k, k, c)
    dxp = np.zeros((b, h + 2 * pad, wd + 2 * pad, c), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    return dxp[:, pad:pad + h, pad:pad + wd, :], dw, db


# ------------------------------------------------------------ forward/back


class ForwardCache:
    def __init__(self, state: ModelState):
        self.state_id = id(state)
        self.version = state.version
        self.entries: dict[str, tuple] = {}
        self.used = False


class StaleCacheError(RuntimeError):
    pass


def forward(state: ModelState, batch: np.ndarray, keep_cache: bool = True):
    """``B x C_in x S x S`` -> ``(B x C_head x S/4 x S/4, cache)``."""
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1] != state.in_channels:
        raise ValueError(f"expected B x {state.in_channels} x H x W batch, got {batch.shape}")
    if batch.shape[2] % STRIDE or batch.shape[3] % STRIDE:
        raise ValueError(f"spatial size {batch.shape[2:]} must be divisible by {STRIDE}")
    p = state.params
    cache = ForwardCache(state)
    x = np.ascontiguousarray(batch.transpose(0, 2, 3, 1), dtype=state.dtype)

    for name, stride, pad in (("stem1", 2, 3), ("stem2", 2, 1)):
        z, cols = conv_forward(x, p[f"{name}.weight"], p[f"{name}.bias"], stride, pad)
        out = np.maximum(z, 0)
        if keep_cache:
            cache.entries[name] = (cols, x.shape, z > 0)
        x = out
    for b in range(1, 4):
        name = f"block{b}"
        z1, cols1 = conv_forward(x, p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"], 1, 1)
        a = np.maximum(z1, 0)
        z2, cols2 = conv_forward(a, p[f"{name}.conv2.weight"], p[f"{name}.conv2.bias"], 1, 1)
        z2 += x
        out = np.maximum(z2, 0)
        if keep_cache:
            cache.entries[name] = (cols1, cols2, x.shape, z1 > 0, z2 > 0)
        x = out
    hb, hh, hw, hc = x.shape
    feats = x.reshape(-1, hc)
    w = p["head.weight"].reshape(state.head_channels, hc)
    y = feats @ w.T + p["head.bias"]
    if keep_cache:
        cache.entries["head"] = (feats, x.shape)
    y = y.reshape(hb, hh, hw, state.head_channels).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), cache


def features(state: ModelState, batch: np.ndarray) -> np.ndarray:
    """Backbone output before the head, NCHW."""
    head_free = ModelState({**state.params,
                            "head.weight": np.eye(BACKBONE_WIDTH, dtype=state.dtype)[:, :, None, None],
                            "head.bias": np.zeros(BACKBONE_WIDTH, dtype=state.dtype)})
    out, _ = forward(head_free, batch, keep_cache=False)
    return out


def backward(state: ModelState, cache: ForwardCache, dout: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every parameter; frozen groups get exact zero blocks."""
    if cache.state_id != id(state) or cache.version != state.version:
        raise StaleCacheError("forward cache does not belong to the current parameters")
    if cache.used:
        raise StaleCacheError("forward cache already consumed by a backward pass")
    if not cache.entries:
        raise StaleCacheError("forward was run without keep_cache")
    cache.used = True
    p = state.params
    grads = {name: np.zeros_like(v) for name, v in p.items()}
    trainable = [not state.frozen[g] for g in GROUPS]
    # gradient w.r.t. a group's input is only needed if something earlier trains
    needs_input_grad = [any(trainable[:i]) for i in range(len(GROUPS))]

    dy = np.ascontiguousarray(np.asarray(dout, dtype=state.dtype).transpose(0, 2, 3, 1))
    feats, feat_shape = cache.entries["head"]
    dmat = dy.reshape(-1, state.head_channels)
    if trainable[5]:
        grads["head.weight"] = (dmat.T @ feats).reshape(p["head.weight"].shape)
        grads["head.bias"] = dmat.sum(axis=0)
    if not needs_input_grad[5]:
        return grads
    w = p["head.weight"].reshape(state.head_channels, -1)
    dx = (dmat @ w).reshape(feat_shape)

    for b in (3, 2, 1):
        gi = GROUPS.index(f"block{b}")
        name = f"block{b}"
        cols1, cols2, x_shape, m1, m2 = cache.entries[name]
        dz2 = dx * m2
        da, dw2, db2 = conv_backward(dz2, cols2, x_shape, p[f"{name}.conv2.weight"], 1, 1)
        dz1 = da * m1
        need = needs_input_grad[gi]
        dmain, dw1, db1 = conv_backward(dz1, cols1, x_shape, p[f"{name}.conv1.weight"], 1, 1, need)
        if trainable[gi]:
            grads[f"{name}.conv1.weight"], grads[f"{name}.conv1.bias"] = dw1, db1
            grads[f"{name}.conv2.weight"], grads[f"{name}.conv2.bias"] = dw2, db2
        if not need:
            return grads
        dx = dz2 + dmain

    for name, stride, pad in (("stem2", 2, 1), ("stem1", 2, 3)):
        gi = GROUPS.index(name)
        cols, x_shape, mask = cache.entries[name]
        dz = dx * mask
        need = needs_input_grad[gi]
        dx, dw, db = conv_backward(dz, cols, x_shape, p[f"{name}.weight"], stride, pad, need)
        if trainable[gi]:
            grads[f"{name}.weight"], grads[f"{name}.bias"] = dw, db
        if not need:
            break
    return grads


def predict(state: ModelState, batch: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Forward without caches, in chunks to bound memory."""
    outs = [forward(state, batch[i:i + chunk], keep_cache=False)[0]
            for i in range(0, len(batch), chunk)]
    return np.concatenate(outs, axis=0)

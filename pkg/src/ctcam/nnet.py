"""Deep uni/bidirectional LSTM acoustic models with exact BPTT.

Parameters live in an ordered ``name -> ndarray`` mapping so that gradients,
optimizers and checkpoints can treat every tensor uniformly:

    l{k}.{fw|bw}.Wx   (4H, input)      input weights, gate order i, f, o, g
    l{k}.{fw|bw}.Wr   (4H, R)          recurrent weights (R = projection or H)
    l{k}.{fw|bw}.b    (4H,)            gate biases
    l{k}.{fw|bw}.P    (R, H)           recurrent projection (optional)
    out.W             (L, input)       output affine map
    out.b             (L,)
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, DataError, NotCTCError, ShapeError, StaleCacheError

INIT_RANGE = 0.04
CELL_CLIP = 50.0
CELL_GRAD_CLIP = 1.0
CHECKPOINT_MAGIC = b"CTCM1"


@dataclass(frozen=True)
class LayerSpec:
    cells: int
    direction: str = "forward"  # "forward" | "bidirectional"
    projection: int | None = None

    def __post_init__(self):
        if self.cells < 1:
            raise ConfigError("invalid architecture: cells must be >= 1")
        if self.direction not in ("forward", "bidirectional"):
            raise ConfigError(f"invalid architecture: direction {self.direction!r}")
        if self.projection is not None and self.projection < 1:
            raise ConfigError("invalid architecture: projection must be >= 1")

    @property
    def directions(self) -> tuple[str, ...]:
        return ("fw", "bw") if self.direction == "bidirectional" else ("fw",)

    @property
    def output_dim(self) -> int:
        """Width of the layer output seen by the next layer (both directions)."""
        return (self.projection or self.cells) * len(self.directions)


ARCH_PRESETS: dict[str, tuple[LayerSpec, ...]] = {
    "ctc-uni": (LayerSpec(500),) * 5,
    "ctc-bi": (LayerSpec(300, "bidirectional"),) * 5,
    "ce-uni": (LayerSpec(1000, projection=512),) * 2,
    "toy": (LayerSpec(32),),
}


@dataclass(frozen=True)
class ModelParams:
    arch: tuple[LayerSpec, ...]
    input_dim: int
    num_labels: int
    tensors: dict[str, np.ndarray]
    blank_id: int | None = None
    label_inventory_id: str = ""
    version: int = 1
    cell_clip: float | None = CELL_CLIP
    grad_clip: float | None = CELL_GRAD_CLIP

    def __post_init__(self):
        expected = _tensor_shapes(self.arch, self.input_dim, self.num_labels)
        if list(expected) != list(self.tensors):
            raise ShapeError("tensor names do not match the architecture")
        for name, shape in expected.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {t.shape}")
            if not np.all(np.isfinite(t)):
                raise DataError(f"{name}: non-finite parameters")

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "ModelParams":
        return replace(self, tensors=tensors)

    def with_clipping(self, cell_clip: float | None, grad_clip: float | None) -> "ModelParams":
        return replace(self, cell_clip=cell_clip, grad_clip=grad_clip)

    def rounded(self) -> "ModelParams":
        """Copy with every tensor rounded to the 32-bit storage precision."""
        return self.with_tensors({k: v.astype(np.float32).astype(np.float64)
                                  for k, v in self.tensors.items()})

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


@dataclass(frozen=True)
class Posteriorgram:
    data: np.ndarray  # (T', L), rows sum to one
    label_inventory_id: str = ""

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def num_labels(self) -> int:
        return self.data.shape[1]

    def log(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.data)


@dataclass
class _DirCache:
    x: np.ndarray       # (T, in) layer input
    gates: np.ndarray   # (T, 4H) post-activation i, f, o, g
    c: np.ndarray       # (T, H) clipped cell state
    c_prev: np.ndarray  # (T, H) previous cell state in processing order
    r_prev: np.ndarray  # (T, R) previous recurrent output in processing order
    clip_mask: np.ndarray  # (T, H) True where the clip was inactive
    tanh_c: np.ndarray  # (T, H)
    m: np.ndarray       # (T, H) cell output before projection
    reverse: bool


@dataclass
class ForwardCache:
    params: ModelParams
    layers: list[dict[str, _DirCache]]
    final_input: np.ndarray  # (T, in) input to the output layer
    logits: np.ndarray
    posteriors: np.ndarray

    @property
    def cell_states(self) -> list[dict[str, np.ndarray]]:
        return [{d: dc.c for d, dc in layer.items()} for layer in self.layers]


@dataclass
class GradientSet:
    tensors: dict[str, np.ndarray]
    loss: float = 0.0
    input_grad: np.ndarray | None = None
    max_cell_grad: float = 0.0  # largest |dL/dc| seen after clipping

    def norm(self) -> float:
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.tensors.values()))

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet({k: v + other.tensors[k] for k, v in self.tensors.items()},
                           self.loss + other.loss,
                           max_cell_grad=max(self.max_cell_grad, other.max_cell_grad))

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet({k: v * factor for k, v in self.tensors.items()},
                           self.loss * factor, max_cell_grad=self.max_cell_grad)


def _tensor_shapes(arch: Sequence[LayerSpec], input_dim: int, num_labels: int):
    shapes: dict[str, tuple[int, ...]] = {}
    in_dim = input_dim
    for k, spec in enumerate(arch):
        H, R = spec.cells, spec.projection or spec.cells
        for d in spec.directions:
            shapes[f"l{k}.{d}.Wx"] = (4 * H, in_dim)
            shapes[f"l{k}.{d}.Wr"] = (4 * H, R)
            shapes[f"l{k}.{d}.b"] = (4 * H,)
            if spec.projection is not None:
                shapes[f"l{k}.{d}.P"] = (R, H)
        in_dim = spec.output_dim
    shapes["out.W"] = (num_labels, in_dim)
    shapes["out.b"] = (num_labels,)
    return shapes


def init_params(arch: Sequence[LayerSpec] | str, input_dim: int, out_labels: int,
                seed: int = 0, blank_id: int | None = None,
                label_inventory_id: str = "") -> ModelParams:
    """Weights ~ U(-0.04, 0.04) from a seeded generator, biases zero.

    Weights are rounded to 32-bit precision so a checkpoint round trip is exact.
    """
    if isinstance(arch, str):
        try:
            arch = ARCH_PRESETS[arch]
        except KeyError:
            raise ConfigError(f"unknown architecture preset {arch!r}") from None
    arch = tuple(arch)
    if not arch or input_dim < 1 or out_labels < 1:
        raise ConfigError("invalid architecture: need >= 1 layer, input_dim >= 1, labels >= 1")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _tensor_shapes(arch, input_dim, out_labels).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            w = rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)
            tensors[name] = w.astype(np.float32).astype(np.float64)
    return ModelParams(arch, input_dim, out_labels, tensors, blank_id=blank_id,
                       label_inventory_id=label_inventory_id)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _run_direction(x, Wx, Wr, b, P, reverse, cell_clip) -> tuple[np.ndarray, _DirCache]:
    T = x.shape[0]
    H = Wr.shape[0] // 4
    R = Wr.shape[1]
    zx = x @ Wx.T + b
    gates = np.empty((T, 4 * H))
    c_all = np.empty((T, H))
    c_prev_all = np.empty((T, H))
    r_prev_all = np.empty((T, R))
    mask = np.ones((T, H), dtype=bool)
    out = np.empty((T, R))
    c = np.zeros(H)
    r = np.zeros(R)
    WrT = Wr.T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        z = zx[t] + r @ WrT
        ifo = _sigmoid(z[:3 * H])
        g = np.tanh(z[3 * H:])
        c_prev_all[t] = c
        r_prev_all[t] = r
        c = ifo[H:2 * H] * c + ifo[:H] * g
        if cell_clip is not None:
            mask[t] = np.abs(c) <= cell_clip
            c = np.clip(c, -cell_clip, cell_clip)
        gates[t, :3 * H] = ifo
        gates[t, 3 * H:] = g
        c_all[t] = c
        m = ifo[2 * H:] * np.tanh(c)
        r = P @ m if P is not None else m
        out[t] = r
    tanh_c = np.tanh(c_all)
    m_all = gates[:, 2 * H:3 * H] * tanh_c
    return out, _DirCache(x, gates, c_all, c_prev_all, r_prev_all, mask, tanh_c, m_all, reverse)


def forward(params: ModelParams, feats) -> tuple[Posteriorgram, ForwardCache]:
    """Run the network over a (T', D) input; returns posteriors and the BPTT cache."""
    x = getattr(feats, "data", feats)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"shape error: input {x.shape} vs model input dim {params.input_dim}")
    tp = params.tensors
    layers = []
    for k, spec in enumerate(params.arch):
        outs, caches = [], {}
        for d in spec.directions:
            pre = f"l{k}.{d}."
            o, cache = _run_direction(x, tp[pre + "Wx"], tp[pre + "Wr"], tp[pre + "b"],
                                      tp.get(pre + "P"), d == "bw", params.cell_clip)
            outs.append(o)
            caches[d] = cache
        layers.append(caches)
        x = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=1)
    logits = x @ tp["out.W"].T + tp["out.b"]
    post = softmax(logits)
    cache = ForwardCache(params, layers, x, logits, post)
    return Posteriorgram(post, params.label_inventory_id), cache


def _backprop_direction(dout, dc_cache: _DirCache, Wx, Wr, P, grad_clip):
    T, H = dc_cache.c.shape
    gates = dc_cache.gates
    i, f, o, g = gates[:, :H], gates[:, H:2 * H], gates[:, 2 * H:3 * H], gates[:, 3 * H:]
    dZ = np.empty((T, 4 * H))
    dm_all = dout @ P if P is not None else dout
    dr_next = np.zeros(Wr.shape[1])
    dc_next = np.zeros(H)
    max_dc = 0.0
    steps = range(T) if dc_cache.reverse else range(T - 1, -1, -1)
    for t in steps:
        dm = dm_all[t] + (dr_next @ P if P is not None else dr_next)
        tc = dc_cache.tanh_c[t]
        dc = dm * o[t] * (1.0 - tc * tc) + dc_next
        dc = dc * dc_cache.clip_mask[t]
        if grad_clip is not None:
            dc = np.clip(dc, -grad_clip, grad_clip)
        max_dc = max(max_dc, float(np.max(np.abs(dc))))
        dz = dZ[t]
        dz[:H] = dc * g[t] * i[t] * (1.0 - i[t])
        dz[H:2 * H] = dc * dc_cache.c_prev[t] * f[t] * (1.0 - f[t])
        dz[2 * H:3 * H] = dm * tc * o[t] * (1.0 - o[t])
        dz[3 * H:] = dc * i[t] * (1.0 - g[t] * g[t])
        dc_next = dc * f[t]
        dr_next = dz @ Wr
    grads = {
        "Wx": dZ.T @ dc_cache.x,
        "Wr": dZ.T @ dc_cache.r_prev,
        "b": dZ.sum(axis=0),
    }
    if P is not None:
        # dL/dr_t = output gradient + recurrent gradient from the next processed step
        rec = np.zeros_like(dout)
        if dc_cache.reverse:
            rec[1:] = dZ[:-1] @ Wr
        else:
            rec[:-1] = dZ[1:] @ Wr
        grads["P"] = (dout + rec).T @ dc_cache.m
    return grads, dZ @ Wx, max_dc


def backward(params: ModelParams, cache: ForwardCache, dlogits: np.ndarray) -> GradientSet:
    """Exact BPTT of ``sum(dlogits * logits)`` w.r.t. all parameters.

    The gradient reaching each cell state is clipped to ``params.grad_clip``
    per time step; pass a model with ``grad_clip=None`` for unclipped gradients.
    """
    if cache.params is not params:
        raise StaleCacheError("stale cache: cache was produced with different parameters")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != cache.logits.shape:
        raise ShapeError(f"dlogits shape {dlogits.shape} != logits shape {cache.logits.shape}")
    tp = params.tensors
    grads: dict[str, np.ndarray] = {}
    grads["out.W"] = dlogits.T @ cache.final_input
    grads["out.b"] = dlogits.sum(axis=0)
    dx = dlogits @ tp["out.W"]
    max_dc = 0.0
    for k in range(len(params.arch) - 1, -1, -1):
        spec = params.arch[k]
        width = spec.projection or spec.cells
        dx_in = None
        for j, d in enumerate(spec.directions):
            pre = f"l{k}.{d}."
            dout = dx[:, j * width:(j + 1) * width]
            g, d_in, mdc = _backprop_direction(dout, cache.layers[k][d], tp[pre + "Wx"],
                                               tp[pre + "Wr"], tp.get(pre + "P"),
                                               params.grad_clip)
            max_dc = max(max_dc, mdc)
            for name, val in g.items():
                grads[pre + name] = val
            dx_in = d_in if dx_in is None else dx_in + d_in
        dx = dx_in
    ordered = {name: grads[name] for name in tp}
    return GradientSet(ordered, input_grad=dx, max_cell_grad=max_dc)


def bake_blank_scale(params: ModelParams, scale: float) -> ModelParams:
    """Fold a blank posterior scale into the blank output bias (bias += -log(scale))."""
    if params.blank_id is None:
        raise NotCTCError("not a CTC model: no blank label")
    if not scale > 0:
        raise ConfigError("blank scale must be positive")
    tensors = dict(params.tensors)
    bias = tensors["out.b"].copy()
    bias[params.blank_id] += -math.log(scale)
    tensors["out.b"] = bias
    return params.with_tensors(tensors)


def _arch_to_json(arch):
    return [{"cells": s.cells, "direction": s.direction, "projection": s.projection}
            for s in arch]


def save_checkpoint(path: str | Path, params: ModelParams,
                    extra: dict[str, Any] | None = None) -> None:
    """Write magic, a JSON architecture block, then float32 tensors in declared order.

    The write goes to a temporary file that is renamed into place.
    """
    header = {
        "version": params.version,
        "arch": _arch_to_json(params.arch),
        "input_dim": params.input_dim,
        "num_labels": params.num_labels,
        "blank_id": params.blank_id,
        "label_inventory_id": params.label_inventory_id,
        "cell_clip": params.cell_clip,
        "grad_clip": params.grad_clip,
        "tensors": [[name, list(t.shape)] for name, t in params.tensors.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for t in params.tensors.values():
                fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a CTCM1 checkpoint")
    (n,) = struct.unpack_from("<I", raw, 5)
    header = json.loads(raw[9:9 + n].decode("utf-8"))
    offset = 9 + n
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        tensors[name] = arr.astype(np.float64).reshape(shape)
        offset += 4 * count
    if offset != len(raw):
        raise DataError(f"{path}: trailing or missing tensor data")
    arch = tuple(LayerSpec(**spec) for spec in header["arch"])
    params = ModelParams(arch, header["input_dim"], header["num_labels"], tensors,
                         blank_id=header["blank_id"],
                         label_inventory_id=header["label_inventory_id"],
                         version=header["version"], cell_clip=header["cell_clip"],
                         grad_clip=header["grad_clip"])
    return params, header["extra"]

"""Parameter initialization and the forward/backward graph walk."""

from __future__ import annotations

import numpy as np

from . import layers as L
from .arch import Conv3D, Dense, Dropout, Flatten, MaxPool2x2, NetSpec, OutputDense, infer_shapes

MODES = ("train", "eval", "mc_dropout")


def param_names(spec: NetSpec) -> list[str]:
    names = []
    ci = di = 0
    for layer in spec.layers:
        if isinstance(layer, Conv3D):
            ci += 1
            names += [f"conv{ci}_w", f"conv{ci}_b"]
        elif isinstance(layer, Dense):
            di += 1
            names += [f"dense{di}_w", f"dense{di}_b"]
        elif isinstance(layer, OutputDense):
            names += ["out_w", "out_b"]
    return names


def init_params(
    spec: NetSpec, rng: np.random.Generator, dtype=np.float32
) -> dict[str, np.ndarray]:
    """He-initialized weights (normal, std sqrt(2/fan_in)), zero biases.

    Draw order is fixed by the layer order, so a given seed always produces
    the same parameters.
    """
    shapes = infer_shapes(spec)
    params: dict[str, np.ndarray] = {}
    ci = di = 0
    prev = shapes[0]
    for layer, shape in zip(spec.layers, shapes[1:]):
        if isinstance(layer, Conv3D):
            ci += 1
            kx, ky, kz = layer.kernel
            fan_in = kx * ky * kz * prev[3]
            std = np.sqrt(2.0 / fan_in)
            params[f"conv{ci}_w"] = rng.normal(
                0.0, std, size=(kx, ky, kz, prev[3], layer.out_channels)
            ).astype(dtype)
            params[f"conv{ci}_b"] = np.zeros(layer.out_channels, dtype=dtype)
        elif isinstance(layer, Dense):
            di += 1
            fan_in = prev[0]
            std = np.sqrt(2.0 / fan_in)
            params[f"dense{di}_w"] = rng.normal(
                0.0, std, size=(fan_in, layer.width)
            ).astype(dtype)
            params[f"dense{di}_b"] = np.zeros(layer.width, dtype=dtype)
        elif isinstance(layer, OutputDense):
            fan_in = prev[0]
            std = np.sqrt(2.0 / fan_in)
            params["out_w"] = rng.normal(
                0.0, std, size=(fan_in, spec.out_units)
            ).astype(dtype)
            params["out_b"] = np.zeros(spec.out_units, dtype=dtype)
        prev = shape
    return params


def _as_batch(spec: NetSpec, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch)
    if x.ndim == 4:
        x = x[..., None]
    if x.ndim != 5 or x.shape[1:4] != spec.fov or x.shape[4] != 1:
        raise ValueError(
            f"expected batch (N, {spec.fov[0]}, {spec.fov[1]}, {spec.fov[2]}[, 1]), "
            f"got {np.asarray(batch).shape}"
        )
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    return x


def forward(
    spec: NetSpec,
    params: dict[str, np.ndarray],
    batch: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, list | None]:
    """Run the net.  Returns (probs, caches).

    probs has shape (N, rx, ry, rz, 2); channel 0 is background, channel 1 is
    foreground.  caches is populated only in "train" mode (it is what
    ``backward`` consumes).  "train" and "mc_dropout" apply dropout and
    require an rng; "eval" is deterministic.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    use_dropout = mode in ("train", "mc_dropout")
    if use_dropout and rng is None:
        raise ValueError(f"mode {mode!r} needs an rng")
    keep_cache = mode == "train"

    x = _as_batch(spec, batch)
    n = x.shape[0]
    caches: list = [] if keep_cache else None
    ci = di = 0
    for layer in spec.layers:
        if isinstance(layer, Conv3D):
            ci += 1
            xin = x
            a = L.conv3d_forward(x, params[f"conv{ci}_w"], params[f"conv{ci}_b"])
            x, mask = L.relu_forward(a)
            if keep_cache:
                caches.append(("conv", ci, xin, mask))
        elif isinstance(layer, MaxPool2x2):
            in_shape = x.shape
            x, idx = L.maxpool2x2_forward(x)
            if keep_cache:
                caches.append(("pool", idx, in_shape))
        elif isinstance(layer, Flatten):
            shape = x.shape
            x = x.reshape(n, -1)
            if keep_cache:
                caches.append(("flatten", shape))
        elif isinstance(layer, Dense):
            di += 1
            xin = x
            a = L.dense_forward(x, params[f"dense{di}_w"], params[f"dense{di}_b"])
            x, mask = L.relu_forward(a)
            if keep_cache:
                caches.append(("dense", di, xin, mask))
        elif isinstance(layer, Dropout):
            if use_dropout and layer.rate > 0.0:
                x, keep = L.dropout_forward(x, layer.rate, rng)
                if keep_cache:
                    caches.append(("dropout", keep, layer.rate))
            elif keep_cache:
                caches.append(("dropout", None, layer.rate))
        elif isinstance(layer, OutputDense):
            xin = x
            x = L.dense_forward(x, params["out_w"], params["out_b"])
            if keep_cache:
                caches.append(("out", xin))
    rx, ry, rz = spec.roi
    logits = x.reshape(n, rx, ry, rz, 2)
    return L.softmax(logits), caches


def backward(
    spec: NetSpec,
    params: dict[str, np.ndarray],
    caches: list,
    dlogits: np.ndarray,
) -> dict[str, np.ndarray]:
    """Backprop dL/dlogits through caches from a "train"-mode forward pass."""
    if caches is None:
        raise ValueError("backward needs caches from forward(mode='train')")
    n = dlogits.shape[0]
    g = np.asarray(dlogits).reshape(n, spec.out_units)
    grads: dict[str, np.ndarray] = {}
    for cache in reversed(caches):
        kind = cache[0]
        if kind == "out":
            _, xin = cache
            g, dw, db = L.dense_backward(g, xin, params["out_w"])
            grads["out_w"], grads["out_b"] = dw, db
        elif kind == "dropout":
            _, keep, rate = cache
            if keep is not None:
                g = L.dropout_backward(g, keep, rate)
        elif kind == "dense":
            _, di, xin, mask = cache
            g = L.relu_backward(g, mask)
            g, dw, db = L.dense_backward(g, xin, params[f"dense{di}_w"])
            grads[f"dense{di}_w"], grads[f"dense{di}_b"] = dw, db
        elif kind == "flatten":
            _, shape = cache
            g = g.reshape(shape)
        elif kind == "pool":
            _, idx, in_shape = cache
            g = L.maxpool2x2_backward(g, idx, in_shape)
        elif kind == "conv":
            _, ci, xin, mask = cache
            g = L.relu_backward(g, mask)
            g, dw, db = L.conv3d_backward(g, xin, params[f"conv{ci}_w"])
            grads[f"conv{ci}_w"], grads[f"conv{ci}_b"] = dw, db
        else:
            raise ValueError(f"unknown cache entry {kind!r}")
    return grads

"""Minimal convolutional network on numpy with explicit backprop.

All trainable parameters live in one flat vector; every layer reads its
slice as a view, so optimizers and checkpoints deal with a single array.
forward() returns per-layer caches and backward() consumes them, which
keeps the layers stateless and inference reentrant across threads.

Data layout is NHWC. Convolutions are 3x3, stride 1, zero-padded to keep
the spatial size; downsampling happens in explicit 2x2 max-pool layers.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError


class Conv3x3:
    """3x3 same-padding convolution, NHWC, stride 1."""

    def __init__(self, in_ch: int, out_ch: int):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.n_params = out_ch * in_ch * 9 + out_ch
        self.name = f"conv3x3({in_ch}->{out_ch})"

    def init(self, rng: np.random.Generator) -> np.ndarray:
        std = np.sqrt(2.0 / (self.in_ch * 9))
        kernel = rng.normal(0.0, std, size=self.out_ch * self.in_ch * 9)
        return np.concatenate([kernel, np.zeros(self.out_ch)])

    def _views(self, w: np.ndarray):
        k = w[:self.out_ch * self.in_ch * 9].reshape(self.out_ch, self.in_ch, 3, 3)
        b = w[self.out_ch * self.in_ch * 9:]
        return k, b

    def forward(self, x: np.ndarray, w: np.ndarray):
        k, b = self._views(w)
        bsz, h, wd, _ = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (B,H,W,C,3,3)
        cols = win.reshape(bsz * h * wd, self.in_ch * 9)
        y = cols @ k.reshape(self.out_ch, -1).T + b
        return y.reshape(bsz, h, wd, self.out_ch), cols

    def backward(self, dy: np.ndarray, w: np.ndarray, cache, gout: np.ndarray):
        cols = cache
        k, _ = self._views(w)
        bsz, h, wd, _ = dy.shape
        dy2 = dy.reshape(-1, self.out_ch)
        gout[:self.out_ch * self.in_ch * 9] = (dy2.T @ cols).ravel()
        gout[self.out_ch * self.in_ch * 9:] = dy2.sum(axis=0)
        # input gradient: correlate padded dy with the flipped kernel
        dyp = np.pad(dy, ((0, 0), (1, 1), (1, 1), (0, 0)))
        win = sliding_window_view(dyp, (3, 3), axis=(1, 2))
        cols_dy = win.reshape(bsz * h * wd, self.out_ch * 9)
        kf = k[:, :, ::-1, ::-1].transpose(0, 2, 3, 1)  # (O,3,3,C)
        dx = cols_dy @ kf.reshape(self.out_ch * 9, self.in_ch)
        return dx.reshape(bsz, h, wd, self.in_ch)


class ReLU:
    n_params = 0
    name = "relu"

    def init(self, rng):
        return np.empty(0)

    def forward(self, x, w):
        y = np.maximum(x, 0)
        return y, x > 0

    def backward(self, dy, w, cache, gout):
        return dy * cache


class MaxPool2:
    """2x2 max pooling, stride 2; ties route to the first window slot."""

    n_params = 0
    name = "maxpool2"

    def init(self, rng):
        return np.empty(0)

    def forward(self, x, w):
        bsz, h, wd, c = x.shape
        xr = (x.reshape(bsz, h // 2, 2, wd // 2, 2, c)
               .transpose(0, 1, 3, 5, 2, 4)
               .reshape(bsz, h // 2, wd // 2, c, 4))
        idx = xr.argmax(axis=-1)
        y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, dy, w, cache, gout):
        idx, xshape = cache
        bsz, h2, w2, c = dy.shape
        dxr = np.zeros((bsz, h2, w2, c, 4), dtype=dy.dtype)
        np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=-1)
        dx = (dxr.reshape(bsz, h2, w2, c, 2, 2)
                 .transpose(0, 1, 4, 2, 5, 3)
                 .reshape(xshape))
        return dx


class Flatten:
    n_params = 0
    name = "flatten"

    def init(self, rng):
        return np.empty(0)

    def forward(self, x, w):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, w, cache, gout):
        return dy.reshape(cache)


class Dense:
    def __init__(self, n_in: int, n_out: int):
        self.n_in = n_in
        self.n_out = n_out
        self.n_params = n_in * n_out + n_out
        self.name = f"dense({n_in}->{n_out})"

    def init(self, rng: np.random.Generator) -> np.ndarray:
        std = np.sqrt(2.0 / self.n_in)
        weight = rng.normal(0.0, std, size=self.n_in * self.n_out)
        return np.concatenate([weight, np.zeros(self.n_out)])

    def _views(self, w: np.ndarray):
        return w[:self.n_in * self.n_out].reshape(self.n_out, self.n_in), \
            w[self.n_in * self.n_out:]

    def forward(self, x, w):
        mat, b = self._views(w)
        return x @ mat.T + b, x

    def backward(self, dy, w, cache, gout):
        mat, _ = self._views(w)
        x = cache
        gout[:self.n_in * self.n_out] = (dy.T @ x).ravel()
        gout[self.n_in * self.n_out:] = dy.sum(axis=0)
        return dy @ mat


class Network:
    """Layer stack operating on a single flat weight vector."""

    def __init__(self, layers: list, input_shape: tuple[int, int, int],
                 out_dim: int):
        self.layers = layers
        self.input_shape = input_shape  # (H, W, C)
        self.out_dim = out_dim
        self.slices: list[slice] = []
        offset = 0
        for layer in layers:
            self.slices.append(slice(offset, offset + layer.n_params))
            offset += layer.n_params
        self.n_params = offset

    def init_weights(self, rng: np.random.Generator, dtype: str) -> np.ndarray:
        w = np.empty(self.n_params, dtype=np.float64)
        for layer, sl in zip(self.layers, self.slices):
            if layer.n_params:
                w[sl] = layer.init(rng)
        return w.astype(dtype)

    def forward(self, w: np.ndarray, x: np.ndarray, need_cache: bool = False,
                validate: bool = False):
        caches = [] if need_cache else None
        out = x
        for layer, sl in zip(self.layers, self.slices):
            out, cache = layer.forward(out, w[sl])
            if validate and not np.all(np.isfinite(out)):
                raise NumericError(f"non-finite activations in layer "
                                   f"{layer.name}")
            if need_cache:
                caches.append(cache)
        return out, caches

    def backward(self, w: np.ndarray, caches: list, dout: np.ndarray,
                 ) -> np.ndarray:
        grad = np.zeros_like(w)
        d = dout
        for layer, sl, cache in zip(reversed(self.layers),
                                    reversed(self.slices),
                                    reversed(caches)):
            d = layer.backward(d, w[sl], cache, grad[sl])
        return grad


def build_network(input_size: int, channels: int,
                  conv_stages: tuple[tuple[int, int], ...],
                  dense: tuple[int, ...], out_dim: int) -> Network:
    """Assemble the backbone: per stage, `count` 3x3 convs then a 2x2
    max pool; then dense layers with ReLU; then the linear output head."""
    if input_size % (2 ** len(conv_stages)) != 0:
        raise ConfigError(
            f"input size {input_size} not divisible by 2^{len(conv_stages)} "
            f"(one 2x pool per stage)")
    layers: list = []
    ch = channels
    size = input_size
    for width, count in conv_stages:
        if width < 1 or count < 1:
            raise ConfigError(f"bad conv stage ({width}, {count})")
        for _ in range(count):
            layers.append(Conv3x3(ch, width))
            layers.append(ReLU())
            ch = width
        layers.append(MaxPool2())
        size //= 2
    if size < 1:
        raise ConfigError("too many pooling stages for the input size")
    layers.append(Flatten())
    feat = size * size * ch
    for width in dense:
        layers.append(Dense(feat, width))
        layers.append(ReLU())
        feat = width
    layers.append(Dense(feat, out_dim))
    return Network(layers, (input_size, input_size, channels), out_dim)

"""Differentiable CNN building blocks and the two concrete towers.

Feature maps are laid out [N, C, H, W].  Builder functions take the image
shape in (height, width, channels) order, matching how datasets report it,
and convert once at the boundary.

Convolution is cross-correlation (no kernel flip) without padding unless
asked for; pooling is max with gradient routed to the first occurrence of
the window maximum.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ShapeError
from .rng import derive_rng


def _pair(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ShapeError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _out_extent(size, k, stride, pad):
    span = size + 2 * pad - k
    if span < 0:
        return 0
    return span // stride + 1


def conv2d(x, weights, bias, stride=1, padding=0):
    """Batched 2-D cross-correlation with bias, recorded on the tape.

    x: [N, C, H, W]; weights: [O, C, kh, kw]; bias: [O].
    Forward runs as one im2col matrix product; backward reuses the saved
    column matrix for the weight gradient and scatters the column gradient
    back per kernel tap.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [N,C,H,W], got {x.shape}")
    if weights.ndim != 4:
        raise ShapeError(f"conv2d weights must be [O,C,kh,kw], got {weights.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weights.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weights expect {cw}")
    sh, sw = _pair(stride)
    pad = int(padding)
    oh = _out_extent(h, kh, sh, pad)
    ow = _out_extent(w, kw, sw, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d output would be {oh}x{ow} for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {sh}x{sw}, padding {pad}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw)
    w2 = weights.data.reshape(o, -1)
    out = cols @ w2.T + bias.data
    out = out.transpose(0, 2, 1).reshape(n, o, oh, ow)

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n, oh * ow, o)
        dw = np.einsum("nio,nik->ok", g2, cols, optimize=True).reshape(o, c, kh, kw)
        db = g2.sum(axis=(0, 1))
        dwin = (g2 @ w2).reshape(n, oh, ow, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw] += (
                    dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        return dx, dw, db

    return T.from_op("conv2d", out, (x, weights, bias), bwd)


def maxpool2d(x, window, stride=None):
    """Max pooling over [N, C, H, W]; ties go to the first window element."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d input must be [N,C,H,W], got {x.shape}")
    ph, pw = _pair(window)
    sh, sw = _pair(stride if stride is not None else (ph, pw))
    n, c, h, w = x.shape
    if ph > h or pw > w:
        raise ShapeError(f"pool window {ph}x{pw} does not fit input {h}x{w}")
    oh = (h - ph) // sh + 1
    ow = (w - pw) // sw + 1

    win = sliding_window_view(x.data, (ph, pw), axis=(2, 3))[:, :, ::sh, ::sw]
    flat = win.reshape(n, c, oh, ow, ph * pw)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        rows = idx // pw + (np.arange(oh) * sh)[None, None, :, None]
        cols_ = idx % pw + (np.arange(ow) * sw)[None, None, None, :]
        dx = np.zeros_like(x.data)
        np.add.at(
            dx,
            (np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None], rows, cols_),
            g,
        )
        return (dx,)

    return T.from_op("maxpool2d", out, (x,), bwd)


def _he_uniform(rng, fan_in, shape):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Conv2d:
    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=0, rng=None):
        kh, kw = _pair(kernel)
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kh, kw)
        self.stride = _pair(stride)
        self.padding = int(padding)
        self.weights = T.Tensor(
            _he_uniform(rng, in_channels * kh * kw, (out_channels, in_channels, kh, kw)),
            requires_grad=True,
        )
        self.bias = T.Tensor(np.zeros(out_channels), requires_grad=True)

    def params(self):
        return [("weights", self.weights), ("bias", self.bias)]

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"conv expects (C,H,W) input, got {in_shape}")
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} channels, got {c}")
        kh, kw = self.kernel
        sh, sw = self.stride
        oh = _out_extent(h, kh, sh, self.padding)
        ow = _out_extent(w, kw, sw, self.padding)
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv output {oh}x{ow} invalid for input {h}x{w}")
        return (self.out_channels, oh, ow)

    def forward(self, x):
        return conv2d(x, self.weights, self.bias, self.stride, self.padding)

    __call__ = forward


class MaxPool2d:
    kind = "maxpool"

    def __init__(self, window=2, stride=None):
        self.window = _pair(window)
        self.stride = _pair(stride if stride is not None else self.window)

    def params(self):
        return []

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"pool expects (C,H,W) input, got {in_shape}")
        c, h, w = in_shape
        ph, pw = self.window
        if ph > h or pw > w:
            raise ShapeError(f"pool window {ph}x{pw} does not fit input {h}x{w}")
        sh, sw = self.stride
        return (c, (h - ph) // sh + 1, (w - pw) // sw + 1)

    def forward(self, x):
        return maxpool2d(x, self.window, self.stride)

    __call__ = forward


class Dense:
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weights = T.Tensor(
            _he_uniform(rng, in_features, (in_features, out_features)), requires_grad=True
        )
        self.bias = T.Tensor(np.zeros(out_features), requires_grad=True)

    def params(self):
        return [("weights", self.weights), ("bias", self.bias)]

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise ShapeError(f"dense expects ({self.in_features},) input, got {in_shape}")
        return (self.out_features,)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dense expects [N,{self.in_features}], got {x.shape}")
        return T.add(T.matmul(x, self.weights), self.bias)

    __call__ = forward


class Activation:
    kind = "act"

    _names = ("relu", "leaky_relu", "sigmoid")

    def __init__(self, name, alpha=0.01):
        if name not in self._names:
            raise ShapeError(f"unknown activation {name!r}")
        self.name = name
        self.alpha = alpha

    def params(self):
        return []

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        if self.name == "relu":
            return T.relu(x)
        if self.name == "leaky_relu":
            return T.leaky_relu(x, self.alpha)
        return T.sigmoid(x)

    __call__ = forward


class Flatten:
    kind = "flatten"

    def params(self):
        return []

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return T.reshape(x, (x.shape[0], -1))

    __call__ = forward


class LayerStack:
    """Sequential layers validated against a declared input shape.

    ``input_shape`` excludes the batch axis.  Construction propagates
    shapes through every layer, so incompatible configurations fail before
    any data is seen.
    """

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.out_shape(shapes[-1]))
        self.shapes = shapes
        self.output_shape = shapes[-1]

    def forward(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"stack expects trailing shape {self.input_shape}, got {tuple(x.shape[1:])}"
            )
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def named_params(self):
        out = []
        for i, layer in enumerate(self.layers):
            for pname, p in layer.params():
                out.append((f"{i}.{layer.kind}.{pname}", p))
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def count_params(self):
        return sum(p.size for p in self.params())


def _hwc(input_shape):
    if len(input_shape) != 3:
        raise ShapeError(f"input shape must be (H, W, C), got {input_shape}")
    h, w, c = (int(v) for v in input_shape)
    if h < 1 or w < 1 or c < 1:
        raise ShapeError(f"input shape must be positive, got {input_shape}")
    return h, w, c


def _conv_tower(input_shape, channels, pool_after, dense_sizes, seed, scope):
    """Shared builder: 3x3 stride-1 ReLU convs with 2x2/2 pools after the
    conv indices in ``pool_after`` (1-based), then flatten and dense layers
    with ReLU between them and a linear final layer."""
    h, w, c = _hwc(input_shape)
    layers = []
    shape = (c, h, w)
    for i, ch in enumerate(channels, start=1):
        conv = Conv2d(shape[0], ch, kernel=3, stride=1, padding=0,
                      rng=derive_rng(seed, scope, "conv", i))
        layers.append(conv)
        shape = conv.out_shape(shape)
        layers.append(Activation("relu"))
        if i in pool_after:
            pool = MaxPool2d(2, 2)
            layers.append(pool)
            shape = pool.out_shape(shape)
    layers.append(Flatten())
    feat = int(np.prod(shape))
    for j, size in enumerate(dense_sizes, start=1):
        layers.append(Dense(feat, size, rng=derive_rng(seed, scope, "dense", j)))
        if j < len(dense_sizes):
            layers.append(Activation("relu"))
        feat = size
    return LayerStack(layers, (c, h, w))


def build_merged_cnn(input_shape, seed=0, pool_after=(2, 4)):
    """Classifier tower for merged image pairs.

    Four 3x3 stride-1 ReLU convolutions with 32, 32, 64, 64 feature maps,
    max pooling after the second and fourth (configurable), then dense
    layers of 128 and 2; the final two units are same/different logits.
    ``input_shape`` is (H, W, C) of the merged image.
    """
    return _conv_tower(input_shape, (32, 32, 64, 64), tuple(pool_after), (128, 2),
                       seed, "merged_cnn")


def build_siamese_tower(input_shape, seed=0, pool_after=(1, 2)):
    """Embedding tower shared by both branches of the distance network.

    Three 3x3 stride-1 ReLU convolutions with 4, 8, 8 feature maps, max
    pooling after the first and second, then dense layers of 500, 500 and
    5; the 5-unit output is the embedding and has no activation so the
    distance lives in an unconstrained space.  ``input_shape`` is
    (H, W, C) with a single channel in normal use.
    """
    return _conv_tower(input_shape, (4, 8, 8), tuple(pool_after), (500, 500, 5),
                       seed, "siamese_tower")

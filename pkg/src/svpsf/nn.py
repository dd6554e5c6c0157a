"""Minimal CNN building blocks with explicit backpropagation.

Everything runs on numpy arrays in NHWC layout (batch, height, width,
channels). A k x k convolution is lowered to k^2 tap matrices: the forward
pass copies each shifted input view into a contiguous per-tap buffer and
accumulates one BLAS GEMM per tap directly into the output (``beta=1``),
which avoids the memory traffic of a full im2col matrix. Buffers persist
across calls of the same layer, so steady-state training does no large
allocations.

Because of that reuse, arrays returned by conv layers alias internal
buffers and are only valid until the layer runs again; the provided
``Network`` heads end in dense layers, whose outputs are fresh arrays.
Call ``forward`` then ``backward`` exactly once per step. ``params()``
yields ``(name, value, grad)`` triples whose value arrays are updated in
place by the optimizer.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import blas as _blas

_GEMM = {np.dtype(np.float32): _blas.sgemm, np.dtype(np.float64): _blas.dgemm}


def _mm(a, b, c, beta=0.0):
    """c = beta * c + a @ b for C-contiguous 2D arrays, no copies."""
    gemm = _GEMM[a.dtype]
    gemm(1.0, b.T, a.T, beta=beta, c=c.T, overwrite_c=True)
    return c


def _mm_at_b(a, b, c, beta=0.0):
    """c = beta * c + a.T @ b."""
    gemm = _GEMM[a.dtype]
    gemm(1.0, b.T, a.T, trans_b=True, beta=beta, c=c.T, overwrite_c=True)
    return c


def _mm_a_bt(a, b, c, beta=0.0):
    """c = beta * c + a @ b.T."""
    gemm = _GEMM[a.dtype]
    gemm(1.0, b.T, a.T, trans_a=True, beta=beta, c=c.T, overwrite_c=True)
    return c


class Conv2d:
    """2D convolution with square kernels, zero padding, He init.

    Weights are stored as (k*k, cin, cout): one ready-to-use matrix per
    kernel tap. Set ``needs_input_grad=False`` on the first layer of a
    network to skip the useless input-gradient pass.
    """

    def __init__(self, cin, cout, ksize=3, stride=1, pad=None, *, rng,
                 dtype=np.float32, name="conv", needs_input_grad=True):
        self.cin, self.cout, self.k, self.stride = cin, cout, ksize, stride
        self.pad = (ksize // 2) if pad is None else pad
        self.name = name
        self.needs_input_grad = needs_input_grad
        self.dtype = np.dtype(dtype)
        fan_in = cin * ksize * ksize
        self.W = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                            size=(ksize * ksize, cin, cout)).astype(dtype)
        self.b = np.zeros(cout, dtype=dtype)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self._key = None

    def _buffers(self, B, H, W):
        k, s, p = self.k, self.stride, self.pad
        Ho = (H + 2 * p - k) // s + 1
        Wo = (W + 2 * p - k) // s + 1
        key = (B, H, W)
        if self._key != key:
            n = B * Ho * Wo
            self._taps = np.empty((k * k, n, self.cin), dtype=self.dtype)
            self._out = np.empty((n, self.cout), dtype=self.dtype)
            if p:
                self._xp = np.zeros((B, H + 2 * p, W + 2 * p, self.cin), dtype=self.dtype)
            if self.needs_input_grad:
                self._dtaps = np.empty_like(self._taps)
                self._dxp = np.zeros((B, H + 2 * p, W + 2 * p, self.cin), dtype=self.dtype)
            self._key = key
        return Ho, Wo

    def forward(self, x):
        B, H, W, C = x.shape
        k, s, p = self.k, self.stride, self.pad
        Ho, Wo = self._buffers(B, H, W)
        if p:
            self._xp[:, p : p + H, p : p + W] = x
            xp = self._xp
        else:
            xp = x
        for t in range(k * k):
            dy, dx = divmod(t, k)
            np.copyto(
                self._taps[t].reshape(B, Ho, Wo, C),
                xp[:, dy : dy + s * (Ho - 1) + 1 : s, dx : dx + s * (Wo - 1) + 1 : s],
            )
            _mm(self._taps[t], self.W[t], self._out, beta=0.0 if t == 0 else 1.0)
        self._out += self.b
        self._hw = (H, W)
        return self._out.reshape(B, Ho, Wo, self.cout)

    def backward(self, dout):
        B = dout.shape[0]
        H, W = self._hw
        k, s, p = self.k, self.stride, self.pad
        Ho, Wo = self._buffers(B, H, W)
        dflat = np.ascontiguousarray(dout.reshape(-1, self.cout))
        self.db[...] = dflat.sum(axis=0)
        if self.cin == 1:
            # single-channel taps collapse to one (k*k, n) @ (n, cout) GEMM,
            # reading dflat once instead of k*k times
            n = self._taps.shape[1]
            _mm(self._taps.reshape(k * k, n), dflat, self.dW.reshape(k * k, self.cout))
        else:
            for t in range(k * k):
                _mm_at_b(self._taps[t], dflat, self.dW[t])
        if not self.needs_input_grad:
            return None
        self._dxp.fill(0.0)
        for t in range(k * k):
            dy, dx = divmod(t, k)
            _mm_a_bt(dflat, self.W[t], self._dtaps[t])
            self._dxp[:, dy : dy + s * (Ho - 1) + 1 : s,
                      dx : dx + s * (Wo - 1) + 1 : s] += \
                self._dtaps[t].reshape(B, Ho, Wo, self.cin)
        if p:
            return self._dxp[:, p : p + H, p : p + W]
        return self._dxp

    def params(self):
        yield f"{self.name}.W", self.W, self.dW
        yield f"{self.name}.b", self.b, self.db


class ReLU:
    def forward(self, x):
        self._mask = x > 0
        # intermediates are owned by the graph, safe to clip in place
        np.multiply(x, self._mask, out=x)
        return x

    def backward(self, dout):
        if dout.flags.writeable:
            np.multiply(dout, self._mask, out=dout)
            out = dout
        else:
            out = dout * self._mask
        self._mask = None
        return out

    def params(self):
        return ()


class GlobalAvgPool:
    """(B, H, W, C) -> (B, C) mean over the spatial axes."""

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dout):
        B, H, W, C = self._shape
        return np.broadcast_to(dout[:, None, None, :], self._shape) / (H * W)

    def params(self):
        return ()


class Dense:
    def __init__(self, n_in, n_out, *, rng, dtype=np.float32, name="dense"):
        self.name = name
        self.W = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)).astype(dtype)
        self.b = np.zeros(n_out, dtype=dtype)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)

    def forward(self, x):
        self._x = x
        return x @ self.W + self.b

    def backward(self, dout):
        self.dW[...] = self._x.T @ dout
        self.db[...] = dout.sum(axis=0)
        dx = dout @ self.W.T
        self._x = None
        return dx

    def params(self):
        yield f"{self.name}.W", self.W, self.dW
        yield f"{self.name}.b", self.b, self.db


class ResidualBlock:
    """conv-relu-conv plus a skip path, ReLU after the sum.

    When the block changes resolution or width, the skip path is a 1x1
    strided convolution; otherwise it is the identity.
    """

    def __init__(self, cin, cout, stride=1, *, rng, dtype=np.float32, name="block"):
        self.conv1 = Conv2d(cin, cout, 3, stride, rng=rng, dtype=dtype, name=f"{name}.conv1")
        self.relu1 = ReLU()
        self.conv2 = Conv2d(cout, cout, 3, 1, rng=rng, dtype=dtype, name=f"{name}.conv2")
        self.relu_out = ReLU()
        if stride != 1 or cin != cout:
            self.skip = Conv2d(cin, cout, 1, stride, pad=0, rng=rng, dtype=dtype, name=f"{name}.skip")
        else:
            self.skip = None

    def forward(self, x):
        main = self.conv2.forward(self.relu1.forward(self.conv1.forward(x)))
        # conv outputs alias per-layer buffers: the sum must go to fresh memory
        out = main + (self.skip.forward(x) if self.skip is not None else x)
        return self.relu_out.forward(out)

    def backward(self, dout):
        d = self.relu_out.backward(dout)
        dx = self.conv1.backward(self.relu1.backward(self.conv2.backward(d)))
        dskip = self.skip.backward(d) if self.skip is not None else d
        if dx is None:
            return None
        return dx + dskip

    def params(self):
        yield from self.conv1.params()
        yield from self.conv2.params()
        if self.skip is not None:
            yield from self.skip.params()


class Network:
    """A plain sequential stack of layers."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def params(self):
        for layer in self.layers:
            yield from layer.params()

    def get_weights(self):
        return [value.copy() for _, value, _ in self.params()]

    def set_weights(self, weights):
        own = list(self.params())
        if len(weights) != len(own):
            raise ValueError(f"expected {len(own)} arrays, got {len(weights)}")
        for (_, value, _), new in zip(own, weights):
            if value.shape != tuple(new.shape):
                raise ValueError(f"shape mismatch {value.shape} vs {new.shape}")
            value[...] = new

    def n_weights(self):
        return sum(value.size for _, value, _ in self.params())


def build_regressor_net(
    n_out: int,
    *,
    stem: int = 16,
    blocks: tuple[int, ...] = (16, 32, 64),
    dense: int = 64,
    seed: int = 0,
    dtype=np.float32,
) -> Network:
    """Assemble the compact residual regressor.

    Stem convolution, then one stride-2 residual block per entry of
    ``blocks``, global average pooling, and a two-layer head producing
    ``n_out`` values. Input is (B, H, W, 1).
    """
    rng = np.random.default_rng(seed)
    layers = [
        Conv2d(1, stem, 3, 1, rng=rng, dtype=dtype, name="stem", needs_input_grad=False),
        ReLU(),
    ]
    cin = stem
    for i, cout in enumerate(blocks):
        layers.append(ResidualBlock(cin, cout, stride=2, rng=rng, dtype=dtype, name=f"block{i + 1}"))
        cin = cout
    layers += [
        GlobalAvgPool(),
        Dense(cin, dense, rng=rng, dtype=dtype, name="head1"),
        ReLU(),
        Dense(dense, n_out, rng=rng, dtype=dtype, name="head2"),
    ]
    return Network(layers)


class Adam:
    """Adam optimizer updating network weights in place."""

    def __init__(self, net: Network, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.net = net
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(v) for _, v, _ in net.params()]
        self.v = [np.zeros_like(v) for _, v, _ in net.params()]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for (_, value, grad), m, v in zip(self.net.params(), self.m, self.v):
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

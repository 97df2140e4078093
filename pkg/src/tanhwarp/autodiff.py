"""Minimal dense-tensor reverse-mode differentiation engine.

Provides exactly the operators the hybrid parsing network needs: conv2d,
relu, sigmoid, fully connected, global average pooling, x2 bilinear
upsampling, elementwise arithmetic, channel softmax, cross-entropy and L1
losses, a differentiable RoI align, and SGD with momentum.

Tensors store float32 by default; every op preserves the input dtype, so
gradient checks can run end to end in float64. Reductions accumulate in
float64 regardless of storage dtype.
"""

from __future__ import annotations

import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ClassOutOfRange, GraphConsumed, ShapeMismatch
from .sampler import Box, roi_gather_matrix

CHECKPOINT_MAGIC = b"TWCK"
CHECKPOINT_VERSION = 1


class Tensor:
    """Dense array with an optional gradient slot and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_swept")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._swept = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __getitem__(self, key) -> "Tensor":
        out = _result(self.data[key], (self,))
        if out._parents:

            def bwd(g, key=key, shape=self.data.shape):
                dx = np.zeros(shape, dtype=g.dtype)
                dx[key] = g
                _accumulate(self, dx)

            out._backward = bwd
        return out

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _accumulate(t: Tensor, g: np.ndarray):
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g.astype(t.data.dtype, copy=False)


def _result(data: np.ndarray, parents: tuple) -> Tensor:
    """Result tensor; records parent links only when a parent is on the tape."""
    tracked = tuple(p for p in parents if p.requires_grad or p._parents)
    out = Tensor(data)
    if tracked:
        out._parents = tracked
    return out


def backward(loss: Tensor):
    """Reverse sweep from a scalar loss, accumulating grads into leaf tensors.

    The graph is single-use: closures are released during the sweep and a
    second sweep through any part of it raises :class:`GraphConsumed`.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.data.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        if node._swept:
            raise GraphConsumed("part of this graph was already swept by a previous backward")
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            if node.grad is not None:
                node._backward(node.grad)
            node._swept = True
            node._backward = None
            node._parents = ()
            node.grad = None  # intermediates only; leaves have no closure


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def add(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise ShapeMismatch(f"add: {x.shape} vs {y.shape}")
    out = _result(x.data + y.data, (x, y))
    if out._parents:

        def bwd(g):
            _accumulate(x, g)
            _accumulate(y, g)

        out._backward = bwd
    return out


def sub(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise ShapeMismatch(f"sub: {x.shape} vs {y.shape}")
    out = _result(x.data - y.data, (x, y))
    if out._parents:

        def bwd(g):
            _accumulate(x, g)
            _accumulate(y, -g)

        out._backward = bwd
    return out


def mul(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise ShapeMismatch(f"mul: {x.shape} vs {y.shape}")
    out = _result(x.data * y.data, (x, y))
    if out._parents:

        def bwd(g):
            _accumulate(x, g * y.data)
            _accumulate(y, g * x.data)

        out._backward = bwd
    return out


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    out = _result(x.data * c, (x,))
    if out._parents:
        out._backward = lambda g: _accumulate(x, g * c)
    return out


def minimum(x, y) -> Tensor:
    """Elementwise min; at ties the gradient routes to the first argument."""
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise ShapeMismatch(f"minimum: {x.shape} vs {y.shape}")
    take_x = x.data <= y.data
    out = _result(np.where(take_x, x.data, y.data), (x, y))
    if out._parents:

        def bwd(g):
            _accumulate(x, g * take_x)
            _accumulate(y, g * ~take_x)

        out._backward = bwd
    return out


def maximum(x, y) -> Tensor:
    """Elementwise max; at ties the gradient routes to the first argument."""
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise ShapeMismatch(f"maximum: {x.shape} vs {y.shape}")
    take_x = x.data >= y.data
    out = _result(np.where(take_x, x.data, y.data), (x, y))
    if out._parents:

        def bwd(g):
            _accumulate(x, g * take_x)
            _accumulate(y, g * ~take_x)

        out._backward = bwd
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = _result(np.concatenate([t.data for t in ts], axis=axis), tuple(ts))
    if out._parents:
        sizes = [t.shape[axis] for t in ts]

        def bwd(g):
            pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
            for t, piece in zip(ts, pieces):
                _accumulate(t, piece)

        out._backward = bwd
    return out


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = _result(x.data.reshape(shape), (x,))
    if out._parents:
        out._backward = lambda g: _accumulate(x, g.reshape(x.data.shape))
    return out


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = _result(np.maximum(x.data, 0), (x,))
    if out._parents:
        mask = x.data > 0
        out._backward = lambda g: _accumulate(x, g * mask)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    y = y.astype(d.dtype)
    out = _result(y, (x,))
    if out._parents:
        out._backward = lambda g: _accumulate(x, g * y * (1.0 - y))
    return out


# ---------------------------------------------------------------------------
# network layers
# ---------------------------------------------------------------------------


def conv2d(x, w, b, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (N,Cin,H,W) with (Cout,Cin,kh,kw) plus bias, zero padding."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: x {x.shape}, w {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeMismatch(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatch(f"conv2d: kernel sizes must be odd, got {kh}x{kw}")
    if b.shape != (cout,):
        raise ShapeMismatch(f"conv2d: bias {b.shape} != ({cout},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: (N, Cin, Ho, Wo, kh, kw)
    out_data = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3]))
    out_data = np.ascontiguousarray(out_data.transpose(0, 3, 1, 2))
    out_data += b.data[None, :, None, None]
    out = _result(out_data, (x, w, b))
    if out._parents:
        ho, wo = out_data.shape[2:]

        def bwd(g):
            _accumulate(b, g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype))
            _accumulate(w, np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])))
            if x.requires_grad or x._parents:
                dcols = np.tensordot(g, w.data, axes=([1], [0]))  # (N,Ho,Wo,Cin,kh,kw)
                dxp = np.zeros_like(xp)
                for ki in range(kh):
                    for kj in range(kw):
                        dxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += (
                            dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                        )
                dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
                _accumulate(x, dx)

        out._backward = bwd
    return out


def fully_connected(x, w, b) -> Tensor:
    """(N, F) @ (F, O) + (O,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"fully_connected: x {x.shape}, w {w.shape}, b {b.shape}")
    out = _result(x.data @ w.data + b.data, (x, w, b))
    if out._parents:

        def bwd(g):
            _accumulate(x, g @ w.data.T)
            _accumulate(w, x.data.T @ g)
            _accumulate(b, g.sum(axis=0, dtype=np.float64).astype(g.dtype))

        out._backward = bwd
    return out


def global_avg_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool: expected 4D, got {x.shape}")
    n, c, h, w = x.shape
    out = _result(x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype), (x,))
    if out._parents:
        out._backward = lambda g: _accumulate(
            x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape)
        )
    return out


_INTERP_CACHE: dict = {}


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) linear interpolation matrix.

    Aligns the corners of the pixel-center grids: output position i samples
    input position i * (n_in - 1) / (n_out - 1).
    """
    key = (n_in, n_out)
    if key not in _INTERP_CACHE:
        m = np.zeros((n_out, n_in), dtype=np.float64)
        if n_in == 1 or n_out == 1:
            m[:, 0] = 1.0
        else:
            src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
            i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 2)
            f = src - i0
            m[np.arange(n_out), i0] += 1.0 - f
            m[np.arange(n_out), i0 + 1] += f
        _INTERP_CACHE[key] = m
    return _INTERP_CACHE[key]


def upsample_bilinear_x2(x) -> Tensor:
    """Double the spatial size of (N, C, H, W) by bilinear interpolation."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeMismatch(f"upsample_bilinear_x2: expected 4D, got {x.shape}")
    n, c, h, w = x.shape
    uy = _interp_matrix(h, 2 * h).astype(x.dtype)
    ux = _interp_matrix(w, 2 * w).astype(x.dtype)
    flat = x.data.reshape(n * c, h, w)
    out_data = np.matmul(np.matmul(uy, flat), ux.T).reshape(n, c, 2 * h, 2 * w)
    out = _result(out_data, (x,))
    if out._parents:

        def bwd(g):
            gf = g.reshape(n * c, 2 * h, 2 * w)
            _accumulate(x, np.matmul(np.matmul(uy.T, gf), ux).reshape(n, c, h, w))

        out._backward = bwd
    return out


def softmax_channels(x) -> Tensor:
    """Per-pixel softmax over the channel axis of (N, C, H, W)."""
    x = _as_tensor(x)
    if x.data.ndim != 4 or x.shape[1] < 2:
        raise ShapeMismatch(f"softmax_channels: need (N, C>=2, H, W), got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = _result(y, (x,))
    if out._parents:

        def bwd(g):
            dot = (g * y).sum(axis=1, keepdims=True, dtype=np.float64).astype(g.dtype)
            _accumulate(x, y * (g - dot))

        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy_loss(scores, target: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax probability of the target class.

    ``scores`` is (N, C, H, W) logits; ``target`` is an (N, H, W) integer map.
    """
    scores = _as_tensor(scores)
    if scores.data.ndim != 4:
        raise ShapeMismatch(f"cross_entropy_loss: expected 4D scores, got {scores.shape}")
    target = np.asarray(target)
    n, c, h, w = scores.shape
    if target.shape != (n, h, w):
        raise ShapeMismatch(f"cross_entropy_loss: target {target.shape} vs scores {scores.shape}")
    if not np.issubdtype(target.dtype, np.integer):
        raise ClassOutOfRange(f"target must be integer class indices, got {target.dtype}")
    if target.min() < 0 or target.max() >= c:
        raise ClassOutOfRange(f"target classes in [{target.min()}, {target.max()}], scores have {c} channels")

    z = scores.data - scores.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    picked = np.take_along_axis(logp, target[:, None], axis=1)[:, 0]
    count = n * h * w
    loss_val = -picked.sum(dtype=np.float64) / count
    out = _result(np.asarray(loss_val, dtype=scores.dtype), (scores,))
    if out._parents:

        def bwd(g):
            p = e / denom
            flat = np.ascontiguousarray(p.transpose(0, 2, 3, 1)).reshape(-1, c)
            flat[np.arange(flat.shape[0]), target.ravel()] -= 1.0
            dx = flat.reshape(n, h, w, c).transpose(0, 3, 1, 2) * (float(g) / count)
            _accumulate(scores, dx.astype(scores.dtype))

        out._backward = bwd
    return out


def l1_loss(pred, gt) -> Tensor:
    """Mean absolute difference; subgradient 0 at exact ties."""
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"l1_loss: {pred.shape} vs {gt.shape}")
    diff = pred.data - gt.data
    count = diff.size
    out = _result(np.asarray(np.abs(diff).sum(dtype=np.float64) / count, dtype=pred.dtype), (pred, gt))
    if out._parents:

        def bwd(g):
            d = np.sign(diff) * (float(g) / count)
            _accumulate(pred, d.astype(pred.dtype))
            _accumulate(gt, -d.astype(gt.dtype))

        out._backward = bwd
    return out


def weighted_sum(x, weights: np.ndarray) -> Tensor:
    """Scalar sum(x * weights) with a constant weight array."""
    x = _as_tensor(x)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != x.shape:
        raise ShapeMismatch(f"weighted_sum: weights {weights.shape} vs x {x.shape}")
    out = _result(np.asarray((x.data * weights).sum(dtype=np.float64), dtype=x.dtype), (x,))
    if out._parents:
        out._backward = lambda g: _accumulate(x, (weights * float(g)).astype(x.dtype))
    return out


def roi_align_tensor(feat, rois: list, p: int) -> Tensor:
    """Differentiable RoI align on (N, C, H, W) features.

    ``rois`` is a list of (sample_index, Box) pairs; the output stacks one
    (C, P, P) patch per roi. Gradients flow to the features only; boxes are
    constants.
    """
    feat = _as_tensor(feat)
    if feat.data.ndim != 4:
        raise ShapeMismatch(f"roi_align_tensor: expected 4D features, got {feat.shape}")
    n, c, h, w = feat.shape
    mats = []
    patches = np.empty((len(rois), c, p, p), dtype=feat.dtype)
    for r, (idx, box) in enumerate(rois):
        g = roi_gather_matrix(h, w, box, p).astype(feat.dtype)
        mats.append((idx, g))
        patches[r] = (feat.data[idx].reshape(c, h * w) @ g).reshape(c, p, p)
    out = _result(patches, (feat,))
    if out._parents:

        def bwd(grad):
            dfeat = np.zeros_like(feat.data)
            for r, (idx, g) in enumerate(mats):
                dfeat[idx] += (grad[r].reshape(c, p * p) @ g.T).reshape(c, h, w)
            _accumulate(feat, dfeat)

        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# optimizer and checkpointing
# ---------------------------------------------------------------------------


class SgdMomentum:
    """SGD with classical momentum: v <- mu*v - lr*grad; theta <- theta + v."""

    def __init__(self, params: dict, lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(t.data) for k, t in params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def step(self):
        for k, t in self.params.items():
            if t.grad is None:
                continue
            v = self.velocity[k]
            v *= self.momentum
            v -= self.lr * t.grad
            t.data += v


def save_checkpoint(path, tensors: dict):
    """Write named tensors as float32 little-endian to the TWCK container."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, t in tensors.items():
            data = t.data if isinstance(t, Tensor) else np.asarray(t)
            data = np.ascontiguousarray(data, dtype="<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path) -> dict:
    """Read a TWCK container back as a name -> float32 ndarray dict."""
    from .errors import MalformedFile

    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise MalformedFile(path, "bad magic, not a checkpoint file", offset=0)
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise MalformedFile(path, f"unsupported checkpoint version {version}", offset=4)
    off = 12
    out = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as e:
        raise MalformedFile(path, f"truncated or corrupt checkpoint: {e}", offset=off) from e
    return out

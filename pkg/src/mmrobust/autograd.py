"""A small tape-based reverse-mode differentiation engine.

Only the operations the detectors and attacks need are provided. Each
:class:`Graph` records one forward pass; tensors created on it know their node
id, and :meth:`Graph.backward` walks the tape in reverse filling ``grad`` on
every tensor that requires it (parameters *and* designated inputs).

Parameters live outside any graph as plain arrays and are registered per pass
with :meth:`Graph.leaf`, so independent graphs over the same parameters can be
evaluated concurrently.

Example::

    g = Graph()
    x = g.leaf(images, name="image")
    W, b = g.leaf(w_arr), g.leaf(b_arr)
    loss = g.softmax_ce(g.affine(x, W, b), labels)
    g.backward(loss)
    x.grad  # dJ/dx
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphStateError, ShapeError, ValidationError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense array bound to one graph node, with an optional gradient buffer."""

    __slots__ = ("data", "grad", "graph", "node_id", "requires_grad", "name")

    def __init__(self, data: np.ndarray, graph: "Graph", node_id: int,
                 requires_grad: bool, name: str | None = None):
        self.data = data
        self.grad: np.ndarray | None = None
        self.graph = graph
        self.node_id = node_id
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor(#{self.node_id}{tag}, shape={self.shape})"


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    out: Tensor
    backward: BackwardFn | None


def _check_shape(cond: bool, what: str, *shapes) -> None:
    if not cond:
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        raise ShapeError(f"{what}: incompatible shapes {joined}")


class Graph:
    """One forward pass worth of operation records, in topological order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.loss_id: int | None = None

    # -- construction helpers -------------------------------------------------

    def _record(self, op: str, inputs: Sequence[Tensor], data: np.ndarray,
                backward: BackwardFn | None, name: str | None = None) -> Tensor:
        for t in inputs:
            if t.graph is not self:
                raise GraphStateError(f"{op}: operand {t!r} belongs to another graph")
        data = np.asarray(data, dtype=self.dtype)
        requires = any(t.requires_grad for t in inputs)
        out = Tensor(data, self, len(self.nodes), requires, name)
        data.flags.writeable = False
        self.nodes.append(Node(op, tuple(t.node_id for t in inputs), out,
                               backward if requires else None))
        return out

    def leaf(self, array, requires_grad: bool = True, name: str | None = None) -> Tensor:
        """Register an input or parameter array as a graph leaf."""
        data = np.asarray(array, dtype=self.dtype)
        out = Tensor(data, self, len(self.nodes), requires_grad, name)
        self.nodes.append(Node("leaf", (), out, None))
        return out

    def constant(self, array, name: str | None = None) -> Tensor:
        return self.leaf(array, requires_grad=False, name=name)

    def tensor(self, node_id: int) -> Tensor:
        return self.nodes[node_id].out

    def grad_of(self, node_id: int) -> np.ndarray | None:
        return self.nodes[node_id].out.grad

    # -- operations -----------------------------------------------------------

    def affine(self, x: Tensor, W: Tensor, b: Tensor) -> Tensor:
        """``x @ W + b`` for ``x[n, d]``, ``W[d, k]``, ``b[k]``."""
        _check_shape(x.data.ndim == 2 and W.data.ndim == 2 and x.shape[1] == W.shape[0],
                     "affine x@W", x.shape, W.shape)
        _check_shape(b.data.ndim == 1 and b.shape[0] == W.shape[1], "affine bias", W.shape, b.shape)
        xd, Wd = x.data, W.data
        need_x = x.requires_grad

        def backward(g):
            return (g @ Wd.T if need_x else None), xd.T @ g, g.sum(axis=0)

        return self._record("affine", (x, W, b), xd @ Wd + b.data, backward)

    def conv2d(self, x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
        """Valid, stride-1 cross-correlation.

        ``x`` is ``[c, h, w]`` or batched ``[n, c, h, w]``; ``kernels`` is
        ``[k, c, kh, kw]``. Output spatial size is ``(h - kh + 1, w - kw + 1)``.
        """
        batched = x.data.ndim == 4
        _check_shape(x.data.ndim in (3, 4) and kernels.data.ndim == 4, "conv2d", x.shape, kernels.shape)
        xd = x.data if batched else x.data[None]
        n, c, h, w = xd.shape
        k, kc, kh, kw = kernels.shape
        _check_shape(kc == c, "conv2d channels", x.shape, kernels.shape)
        if h < kh or w < kw:
            raise ShapeError(f"conv2d: image {tuple(x.shape)} smaller than kernel {tuple(kernels.shape)}")
        if bias is not None:
            _check_shape(bias.shape == (k,), "conv2d bias", kernels.shape, bias.shape)
        ho, wo = h - kh + 1, w - kw + 1
        offsets = [(i, j) for i in range(kh) for j in range(kw)]
        # im2col: cols[n, c, kh*kw, ho, wo], flattened to [n, c*kh*kw, ho*wo]
        cols = np.empty((n, c, kh * kw, ho, wo), dtype=xd.dtype)
        for t, (i, j) in enumerate(offsets):
            cols[:, :, t] = xd[:, :, i:i + ho, j:j + wo]
        cols = cols.reshape(n, c * kh * kw, ho * wo)
        Kmat = kernels.data.reshape(k, c * kh * kw)
        out = Kmat @ cols
        if bias is not None:
            out += bias.data[:, None]
        out = out.reshape(n, k, ho, wo)
        if not batched:
            out = out[0]
        need_x = x.requires_grad

        def backward(g):
            gb = (g if batched else g[None]).reshape(n, k, ho * wo)
            gK = np.matmul(gb, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernels.shape)
            gx = None
            if need_x:
                gcols = (Kmat.T @ gb).reshape(n, c, kh * kw, ho, wo)
                gx = np.zeros_like(xd)
                for t, (i, j) in enumerate(offsets):
                    gx[:, :, i:i + ho, j:j + wo] += gcols[:, :, t]
                if not batched:
                    gx = gx[0]
            grads = [gx, gK]
            if bias is not None:
                grads.append(gb.sum(axis=(0, 2)))
            return grads

        inputs = (x, kernels) if bias is None else (x, kernels, bias)
        return self._record("conv2d", inputs, out, backward)

    def conv1d(self, x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
        """Zero-padded ("same") 1-D convolution over the sequence axis.

        ``x[n, L, d]``, ``kernels[k, d, width]`` with odd width, ``bias[k]``
        -> ``[n, L, k]``.
        """
        _check_shape(x.data.ndim == 3 and kernels.data.ndim == 3 and x.shape[2] == kernels.shape[1],
                     "conv1d", x.shape, kernels.shape)
        k, d, width = kernels.shape
        if width % 2 != 1:
            raise ShapeError(f"conv1d: kernel width must be odd, got {width}")
        _check_shape(bias.shape == (k,), "conv1d bias", kernels.shape, bias.shape)
        half = width // 2
        n, L, _ = x.shape
        xp = np.pad(x.data, ((0, 0), (half, half), (0, 0)))
        cols = sliding_window_view(xp, width, axis=1)  # [n, L, d, width]
        cols = cols.reshape(n, L, d * width)
        Kmat = kernels.data.reshape(k, d * width)
        out = cols @ Kmat.T + bias.data
        Kd = kernels.data

        def backward(g):
            gK = np.tensordot(g, cols, axes=([0, 1], [0, 1])).reshape(Kd.shape)
            gxp = np.zeros_like(xp)
            for j in range(width):
                gxp[:, j:j + L, :] += g @ Kd[:, :, j]
            return gxp[:, half:half + L, :], gK, g.sum(axis=(0, 1))

        return self._record("conv1d", (x, kernels, bias), out, backward)

    def embedding(self, table: Tensor, indices) -> Tensor:
        """Row lookup; index ``-1`` yields a zero vector (padding)."""
        idx = np.asarray(indices)
        if idx.dtype.kind not in "iu":
            raise ValidationError("embedding indices must be integers")
        V = table.shape[0]
        if idx.size and (idx.max() >= V or idx.min() < -1):
            raise ValidationError(f"embedding index out of range for table of {V} rows")
        valid = idx >= 0
        out = np.where(valid[..., None], table.data[np.where(valid, idx, 0)], 0)

        def backward(g):
            gT = np.zeros_like(table.data)
            np.add.at(gT, idx[valid], g[valid])
            return (gT,)

        return self._record("embedding", (table,), out, backward)

    def leaky_relu(self, x: Tensor, slope: float) -> Tensor:
        if not 0.0 < slope < 1.0:
            raise ValidationError(f"leaky_relu slope must lie in (0, 1), got {slope}")
        # max(x, slope*x) == leaky_relu(x) for slope in (0, 1)
        out = np.maximum(x.data, x.data * np.asarray(slope, self.dtype))

        def backward(g):
            return (g * np.where(x.data >= 0, np.asarray(1.0, self.dtype), np.asarray(slope, self.dtype)),)

        return self._record("leaky_relu", (x,), out, backward)

    def sigmoid(self, x: Tensor) -> Tensor:
        xd = x.data
        e = np.exp(-np.abs(xd))
        out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(self.dtype)

        def backward(g):
            return (g * out * (1.0 - out),)

        return self._record("sigmoid", (x,), out, backward)

    def mean_pool(self, x: Tensor, lengths) -> Tensor:
        """Mean over the first ``lengths[i]`` positions of ``x[i]`` (``x[n, L, d]``)."""
        lengths = np.asarray(lengths)
        _check_shape(x.data.ndim == 3 and lengths.shape == (x.shape[0],), "mean_pool",
                     x.shape, lengths.shape)
        if np.any(lengths < 1) or np.any(lengths > x.shape[1]):
            raise ValidationError("mean_pool lengths must lie in [1, L]")
        mask = (np.arange(x.shape[1])[None, :] < lengths[:, None]).astype(self.dtype)
        weights = mask / lengths[:, None].astype(self.dtype)
        out = np.einsum("nl,nld->nd", weights, x.data)

        def backward(g):
            return (weights[:, :, None] * g[:, None, :],)

        return self._record("mean_pool", (x,), out, backward)

    def concat(self, tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
        shapes = [t.shape for t in tensors]
        ax = axis % tensors[0].data.ndim
        for s in shapes[1:]:
            _check_shape(len(s) == len(shapes[0]) and all(
                a == b for i, (a, b) in enumerate(zip(s, shapes[0])) if i != ax), "concat", shapes[0], s)
        sizes = [s[ax] for s in shapes]
        splits = np.cumsum(sizes)[:-1]

        def backward(g):
            return np.split(g, splits, axis=ax)

        return self._record("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=ax),
                            backward)

    def reshape(self, x: Tensor, shape: Sequence[int]) -> Tensor:
        src = x.shape
        try:
            out = x.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot view {tuple(src)} as {tuple(shape)}") from exc

        def backward(g):
            return (g.reshape(src),)

        return self._record("reshape", (x,), out, backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        _check_shape(a.shape == b.shape, "add", a.shape, b.shape)

        def backward(g):
            return g, g

        return self._record("add", (a, b), a.data + b.data, backward)

    def add_bias(self, x: Tensor, b: Tensor) -> Tensor:
        """``x + b`` broadcasting ``b`` over leading axes (the one broadcast allowed)."""
        _check_shape(x.shape[-1:] == b.shape, "add_bias", x.shape, b.shape)
        lead = tuple(range(x.data.ndim - 1))

        def backward(g):
            return g, g.sum(axis=lead)

        return self._record("add_bias", (x, b), x.data + b.data, backward)

    def scale(self, x: Tensor, c: float) -> Tensor:
        c = float(c)

        def backward(g):
            return (g * c,)

        return self._record("scale", (x,), x.data * c, backward)

    def mul_const(self, x: Tensor, mask) -> Tensor:
        """Elementwise product with a constant array of identical shape (dropout masks)."""
        m = np.asarray(mask, dtype=self.dtype)
        _check_shape(m.shape == x.shape, "mul_const", x.shape, m.shape)

        def backward(g):
            return (g * m,)

        return self._record("mul_const", (x,), x.data * m, backward)

    def row_scale(self, x: Tensor, s: Tensor) -> Tensor:
        """Scale row ``i`` of ``x[n, d]`` by ``s[i, 0]`` (attention gate)."""
        _check_shape(x.data.ndim == 2 and s.shape == (x.shape[0], 1), "row_scale", x.shape, s.shape)
        xd, sd = x.data, s.data

        def backward(g):
            return g * sd, (g * xd).sum(axis=1, keepdims=True)

        return self._record("row_scale", (x, s), xd * sd, backward)

    def l2_normalize(self, x: Tensor, eps: float = 1e-6) -> Tensor:
        """Rows of ``x[n, d]`` divided by ``sqrt(|row|^2 + eps)``."""
        _check_shape(x.data.ndim == 2, "l2_normalize", x.shape)
        xd = x.data
        norm = np.sqrt((xd * xd).sum(axis=1, keepdims=True) + eps).astype(xd.dtype)
        out = xd / norm

        def backward(g):
            return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norm,)

        return self._record("l2_normalize", (x,), out, backward)

    def grad_reverse(self, x: Tensor, lam: float = 1.0) -> Tensor:
        """Identity forward; multiplies the incoming gradient by ``-lam``."""
        lam = float(lam)

        def backward(g):
            return (-lam * g,)

        return self._record("grad_reverse", (x,), x.data.copy(), backward)

    def margin(self, logits: Tensor, pos: int = 1, neg: int = 0) -> Tensor:
        """Per-row ``logits[:, pos] - logits[:, neg]``."""
        _check_shape(logits.data.ndim == 2 and logits.shape[1] > max(pos, neg), "margin", logits.shape)
        C = logits.shape[1]

        def backward(g):
            gl = np.zeros((g.shape[0], C), dtype=g.dtype)
            gl[:, pos] += g
            gl[:, neg] -= g
            return (gl,)

        return self._record("margin", (logits,), logits.data[:, pos] - logits.data[:, neg], backward)

    def sum(self, x: Tensor) -> Tensor:
        shape = x.shape

        def backward(g):
            return (np.broadcast_to(g, shape).copy(),)

        return self._record("sum", (x,), np.asarray(x.data.sum()), backward)

    def softmax_ce(self, logits: Tensor, labels, reduction: str = "mean") -> Tensor:
        """Cross-entropy of row-softmax(logits) against integer labels.

        The row max is subtracted before exponentiation. ``reduction`` is
        ``"mean"`` or ``"sum"``.
        """
        _check_shape(logits.data.ndim == 2, "softmax_ce", logits.shape)
        n, C = logits.shape
        y = np.asarray(labels)
        if y.shape != (n,):
            raise ShapeError(f"softmax_ce: {n} logit rows vs labels of shape {y.shape}")
        if n and (y.dtype.kind not in "iu" or y.min() < 0 or y.max() >= C):
            raise ValidationError(f"softmax_ce: labels must be integers in [0, {C})")
        if reduction not in ("mean", "sum"):
            raise ValidationError(f"unknown reduction {reduction!r}")
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        nll = lse - z[np.arange(n), y]
        denom = n if reduction == "mean" else 1
        out = nll.sum() / denom
        probs = np.exp(z - lse[:, None])

        def backward(g):
            gl = probs.copy()
            gl[np.arange(n), y] -= 1.0
            return (gl * (g / denom),)

        return self._record("softmax_ce", (logits,), np.asarray(out), backward)

    # -- differentiation ------------------------------------------------------

    def set_loss(self, loss: Tensor) -> None:
        if loss.graph is not self:
            raise GraphStateError("loss tensor belongs to another graph")
        if loss.data.size != 1:
            raise GraphStateError(f"loss must be scalar, got shape {tuple(loss.shape)}")
        self.loss_id = loss.node_id

    def backward(self, loss: Tensor | None = None) -> None:
        """Fill ``grad`` of every tensor that requires it with d(loss)/d(tensor)."""
        if loss is not None:
            self.set_loss(loss)
        if self.loss_id is None:
            raise GraphStateError("backward called before a forward pass designated a loss")
        for node in self.nodes:
            node.out.grad = None
        root = self.nodes[self.loss_id].out
        if not root.requires_grad:
            return
        root.grad = np.ones_like(root.data)
        for node_id in range(self.loss_id, -1, -1):
            node = self.nodes[node_id]
            g = node.out.grad
            if g is None or node.backward is None:
                continue
            for in_id, gin in zip(node.inputs, node.backward(g)):
                target = self.nodes[in_id].out
                if gin is None or not target.requires_grad:
                    continue
                gin = np.asarray(gin, dtype=self.dtype)
                target.grad = gin.copy() if target.grad is None else target.grad + gin

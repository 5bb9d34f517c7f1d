"""Reverse-mode differentiation over the tensor primitives.

A :class:`Tape` records every forward operation as a node (op name, input
node ids, saved values needed for backward).  ``backward`` walks the nodes in
reverse, dispatching each op name to its backward rule, and deposits
gradients both per node and into the bound :class:`Parameter` slots.

Fixed kernels (the sharpening block) are passed as raw arrays, never as
nodes, so no gradient slot for them can even exist.

A tape is single-owner: recording and backward happen on one thread.
Distinct tapes (for example parallel cross-validation folds) may run
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import ops
from .ops import ConvWeights, ShapeError


class Parameter:
    """Named trainable array with a gradient slot."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value)
        self.grad: Optional[np.ndarray] = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    saved: dict = field(default_factory=dict)
    param: Optional[Parameter] = None


class Tape:
    """Ordered operation record; inputs of every node precede it."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_ids: dict[int, int] = {}

    def _push(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    # ------------------------------------------------------------ leaves

    def input(self, x: np.ndarray) -> int:
        return self._push(Node("input", (), np.asarray(x)))

    def parameter(self, p: Parameter) -> int:
        """Leaf bound to a parameter; reusing a parameter reuses its node."""
        nid = self._param_ids.get(id(p))
        if nid is None:
            nid = self._push(Node("param", (), p.value, param=p))
            self._param_ids[id(p)] = nid
        return nid

    # ----------------------------------------------------- recorded ops

    def conv2d(self, x: int, kernel: int, bias: int, stride: int = 1,
               padding: str = "same") -> int:
        w = ConvWeights(self.value(kernel), self.value(bias))
        out = ops.conv2d(self.value(x), w, stride=stride, padding=padding)
        return self._push(Node("conv2d", (x, kernel, bias), out,
                               {"stride": stride, "padding": padding}))

    def transposed_conv2d(self, x: int, kernel: int, bias: int) -> int:
        w = ConvWeights(self.value(kernel), self.value(bias))
        out = ops.transposed_conv2d(self.value(x), w)
        return self._push(Node("transposed_conv2d", (x, kernel, bias), out))

    def depthwise_sharp(self, x: int, kernel: np.ndarray) -> int:
        out = ops.depthwise_sharp(self.value(x), kernel)
        return self._push(Node("depthwise_sharp", (x,), out,
                               {"kernel": np.asarray(kernel)}))

    def maxpool2x2(self, x: int) -> int:
        out, winners = ops.maxpool2x2(self.value(x))
        return self._push(Node("maxpool2x2", (x,), out, {"winners": winners}))

    def relu(self, x: int) -> int:
        return self._push(Node("relu", (x,), ops.relu(self.value(x))))

    def sigmoid(self, x: int) -> int:
        return self._push(Node("sigmoid", (x,), ops.sigmoid(self.value(x))))

    def softmax_channels(self, x: int) -> int:
        return self._push(Node("softmax_channels", (x,),
                               ops.softmax_channels(self.value(x))))

    def concat_channels(self, a: int, b: int) -> int:
        out = ops.concat_channels(self.value(a), self.value(b))
        return self._push(Node("concat_channels", (a, b), out,
                               {"split": self.value(a).shape[1]}))

    def softmax_cross_entropy(self, logits: int, target: np.ndarray) -> int:
        """Fused per-pixel softmax + categorical cross-entropy, mean over
        all pixels in the batch; backward is (probs - target) / pixels."""
        probs = ops.softmax_channels(self.value(logits))
        p64 = np.clip(probs.astype(np.float64), 1e-7, None)
        n, _, h, w = probs.shape
        count = n * h * w
        loss = -(target.astype(np.float64) * np.log(p64)).sum() / count
        value = np.asarray(loss, dtype=self.value(logits).dtype)
        return self._push(Node("softmax_cross_entropy", (logits,), value,
                               {"probs": probs, "target": target, "count": count}))

    def sigmoid_binary_cross_entropy(self, logits: int, target: np.ndarray) -> int:
        """Fused sigmoid + binary cross-entropy with the same mean reduction
        and the same fused (probs - target) / pixels backward."""
        probs = ops.sigmoid(self.value(logits))
        p64 = np.clip(probs.astype(np.float64), 1e-7, 1.0 - 1e-7)
        t64 = target.astype(np.float64)
        n, _, h, w = probs.shape
        count = n * h * w
        loss = -(t64 * np.log(p64) + (1.0 - t64) * np.log1p(-p64)).sum() / count
        value = np.asarray(loss, dtype=self.value(logits).dtype)
        return self._push(Node("sigmoid_binary_cross_entropy", (logits,), value,
                               {"probs": probs, "target": target, "count": count}))

    def class_score(self, logits: int, class_index: int) -> int:
        """Scalar sum of one class's logits over batch and pixels (the
        Grad-CAM target)."""
        v = self.value(logits)
        if not 0 <= class_index < v.shape[1]:
            raise ShapeError(f"class index {class_index} out of range for "
                             f"{v.shape[1]} channels")
        value = np.asarray(v.astype(np.float64)[:, class_index].sum(), dtype=v.dtype)
        return self._push(Node("class_score", (logits,), value,
                               {"class_index": class_index}))

    def weighted_sum(self, x: int, weights: np.ndarray) -> int:
        """Scalar <x, weights>; turns any op output into a loss for checks."""
        v = self.value(x)
        value = np.asarray((v.astype(np.float64) * weights).sum(), dtype=v.dtype)
        return self._push(Node("weighted_sum", (x,), value, {"weights": weights}))

    # ----------------------------------------------------------- backward

    def backward(self, loss: int) -> dict[int, np.ndarray]:
        """Propagate from a scalar loss node; returns node id -> gradient and
        fills the ``grad`` slot of every parameter reached."""
        root = self.nodes[loss]
        if root.value.ndim != 0:
            raise ValueError(f"backward needs a scalar loss node, got shape "
                             f"{root.value.shape}")
        grads: dict[int, np.ndarray] = {loss: np.ones((), dtype=np.float64)}
        for nid in range(loss, -1, -1):
            node = self.nodes[nid]
            g = grads.get(nid)
            if g is None or not node.inputs:
                continue
            rule = _BACKWARD[node.op]
            for input_id, contrib in rule(self, node, g):
                if input_id in grads:
                    grads[input_id] = grads[input_id] + contrib
                else:
                    grads[input_id] = contrib
        out: dict[int, np.ndarray] = {}
        for nid, g in grads.items():
            node = self.nodes[nid]
            out[nid] = np.asarray(g, dtype=node.value.dtype)
            if node.param is not None:
                node.param.grad = out[nid]
        return out


# ------------------------------------------------------------------ rules

def _bwd_conv2d(tape, node, g):
    x = tape.value(node.inputs[0])
    kernel = tape.value(node.inputs[1])
    stride, padding = node.saved["stride"], node.saved["padding"]
    kh, kw = kernel.shape[2], kernel.shape[3]
    pad = ops._same_pad(kh, kw) if padding == "same" else ((0, 0), (0, 0))
    g = np.asarray(g, dtype=np.float64)

    # input grad: full correlation of the (dilated) output grad with the
    # 180-degree-rotated, channel-transposed kernel, cropped by the forward pad
    g_dil = ops.dilate2d(g, stride)
    k_t = ops.rot180(kernel).transpose(1, 0, 2, 3)
    full = ((kh - 1, kh - 1), (kw - 1, kw - 1))
    dx_pad = ops.correlate_nchw(g_dil, k_t, stride=1, pad=full)
    (pt, _), (pl, _) = pad
    dx = dx_pad[:, :, pt:pt + x.shape[2], pl:pl + x.shape[3]]

    # weight grad: correlation of the padded input with the output grad
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), pad[0], pad[1]))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, -1)
    dk = (gmat.T @ cols).reshape(kernel.shape)

    db = g.sum(axis=(0, 2, 3))
    return [(node.inputs[0], dx), (node.inputs[1], dk), (node.inputs[2], db)]


def _bwd_transposed_conv2d(tape, node, g):
    x = tape.value(node.inputs[0]).astype(np.float64)
    kernel = tape.value(node.inputs[1]).astype(np.float64)
    n, oc, h2, w2 = g.shape
    tiles = np.asarray(g, dtype=np.float64).reshape(n, oc, h2 // 2, 2, w2 // 2, 2)
    tiles = tiles.transpose(0, 1, 2, 4, 3, 5)  # (n, o, h, w, 2, 2)
    dx = np.einsum("nohwuv,iouv->nihw", tiles, kernel)
    dk = np.einsum("nihw,nohwuv->iouv", x, tiles)
    db = np.asarray(g, dtype=np.float64).sum(axis=(0, 2, 3))
    return [(node.inputs[0], dx), (node.inputs[1], dk), (node.inputs[2], db)]


def _bwd_depthwise_sharp(tape, node, g):
    # depthwise full correlation with the rotated kernel; the frozen kernel
    # itself receives no gradient
    dx = ops.depthwise_sharp(np.asarray(g, dtype=np.float64),
                             ops.rot180(node.saved["kernel"]))
    return [(node.inputs[0], dx)]


def _bwd_maxpool2x2(tape, node, g):
    x = tape.value(node.inputs[0])
    dx = np.zeros(x.size, dtype=np.float64)
    dx[node.saved["winners"].ravel()] = np.asarray(g, dtype=np.float64).ravel()
    return [(node.inputs[0], dx.reshape(x.shape))]


def _bwd_relu(tape, node, g):
    mask = tape.value(node.inputs[0]) > 0
    return [(node.inputs[0], np.asarray(g, dtype=np.float64) * mask)]


def _bwd_sigmoid(tape, node, g):
    y = node.value.astype(np.float64)
    return [(node.inputs[0], np.asarray(g, dtype=np.float64) * y * (1.0 - y))]


def _bwd_softmax_channels(tape, node, g):
    y = node.value.astype(np.float64)
    g = np.asarray(g, dtype=np.float64)
    inner = (g * y).sum(axis=1, keepdims=True)
    return [(node.inputs[0], y * (g - inner))]


def _bwd_concat_channels(tape, node, g):
    split = node.saved["split"]
    g = np.asarray(g, dtype=np.float64)
    return [(node.inputs[0], g[:, :split]), (node.inputs[1], g[:, split:])]


def _bwd_fused_ce(tape, node, g):
    p = node.saved["probs"].astype(np.float64)
    t = node.saved["target"].astype(np.float64)
    scale = float(g) / node.saved["count"]
    return [(node.inputs[0], (p - t) * scale)]


def _bwd_class_score(tape, node, g):
    v = tape.value(node.inputs[0])
    dx = np.zeros(v.shape, dtype=np.float64)
    dx[:, node.saved["class_index"]] = float(g)
    return [(node.inputs[0], dx)]


def _bwd_weighted_sum(tape, node, g):
    return [(node.inputs[0], float(g) * node.saved["weights"].astype(np.float64))]


_BACKWARD: dict[str, Callable] = {
    "conv2d": _bwd_conv2d,
    "transposed_conv2d": _bwd_transposed_conv2d,
    "depthwise_sharp": _bwd_depthwise_sharp,
    "maxpool2x2": _bwd_maxpool2x2,
    "relu": _bwd_relu,
    "sigmoid": _bwd_sigmoid,
    "softmax_channels": _bwd_softmax_channels,
    "concat_channels": _bwd_concat_channels,
    "softmax_cross_entropy": _bwd_fused_ce,
    "sigmoid_binary_cross_entropy": _bwd_fused_ce,
    "class_score": _bwd_class_score,
    "weighted_sum": _bwd_weighted_sum,
}


# -------------------------------------------------------------- grad check

def grad_check(apply: Callable, inputs: list[np.ndarray], eps: float = 1e-3,
               seed: int = 0) -> float:
    """Compare analytic gradients against central finite differences.

    ``apply(tape, *input_ids) -> output id`` builds the op under test.  The
    inputs are promoted to float64 so both the recorded forward and the
    difference quotients run as 64-bit shadow computations.  Returns the
    worst relative error over every scalar element of every input, with a
    1e-8 denominator floor.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]

    def run(xs):
        tape = Tape()
        ids = [tape.input(x) for x in xs]
        out_id = apply(tape, *ids)
        return tape, ids, out_id

    tape, ids, out_id = run(inputs)
    out = tape.value(out_id)
    weights = None
    if out.ndim:
        weights = np.random.default_rng(seed).standard_normal(out.shape)
        loss_id = tape.weighted_sum(out_id, weights)
    else:
        loss_id = out_id
    grads = tape.backward(loss_id)

    def loss_at(xs) -> float:
        t, _, oid = run(xs)
        v = t.value(oid)
        return float((v * weights).sum()) if weights is not None else float(v)

    worst = 0.0
    for pos, x in enumerate(inputs):
        analytic = grads.get(ids[pos])
        if analytic is None:
            analytic = np.zeros_like(x)
        numeric = np.zeros_like(x)
        flat = x.ravel()
        for j in range(flat.size):
            orig = flat[j]
            probe = [a.copy() for a in inputs]
            probe[pos].ravel()[j] = orig + eps
            up = loss_at(probe)
            probe[pos].ravel()[j] = orig - eps
            down = loss_at(probe)
            numeric.ravel()[j] = (up - down) / (2.0 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        worst = max(worst, float((np.abs(analytic - numeric) / denom).max()))
    return worst

"""Dense NCHW tensor primitives.

All arrays are rank-4 ``(batch, channels, height, width)``, stored as 32-bit
floats in production.  Every operation is a pure function: inputs are never
mutated and results are freshly allocated.  Reductions (convolution sums,
softmax sums) accumulate in 64-bit floats; outputs are cast back to the input
dtype, so feeding float64 arrays yields a full 64-bit shadow computation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """An input violates a shape or dimension contract."""


def tensor(data, dtype=np.float32) -> np.ndarray:
    """Build a validated rank-4 (n, c, h, w) array, copying if needed."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    check_tensor(arr)
    return arr


def check_tensor(x: np.ndarray, name: str = "tensor") -> None:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 (n, c, h, w) array, got "
                         f"{getattr(x, 'shape', type(x))}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} dimensions must all be >= 1, got {x.shape}")


@dataclass(frozen=True)
class ConvWeights:
    """Kernel/bias pair for a convolution layer.

    ``kernel`` is rank-4; for plain convolution the layout is
    (out_ch, in_ch, kh, kw), for the 2x2 transposed convolution it is
    (in_ch, out_ch, 2, 2).  ``bias`` is rank-1 with one entry per output
    channel.
    """

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be rank-4, got {self.kernel.shape}")
        if self.bias.ndim != 1:
            raise ShapeError(f"bias must be rank-1, got {self.bias.shape}")


def _out_dtype(*arrays) -> np.dtype:
    return np.result_type(*[a.dtype for a in arrays])


def correlate_nchw(x: np.ndarray, kernel: np.ndarray, stride: int = 1,
                   pad: tuple[tuple[int, int], tuple[int, int]] = ((0, 0), (0, 0))
                   ) -> np.ndarray:
    """Cross-correlate (n,c,h,w) with (o,c,kh,kw) kernels, 64-bit accumulation.

    Shared workhorse for the forward and backward convolution paths.  Returns
    a float64 array of shape (n, o, ho, wo); callers add bias and cast.
    """
    kh, kw = kernel.shape[2], kernel.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), pad[0], pad[1]))
    # (n, c, ho, wo, kh, kw) view, stride applied on the output grid
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    cols = cols.astype(np.float64)
    kmat = kernel.reshape(kernel.shape[0], c * kh * kw).astype(np.float64)
    out = cols @ kmat.T
    return out.reshape(n, ho, wo, kernel.shape[0]).transpose(0, 3, 1, 2)


def _same_pad(kh: int, kw: int) -> tuple[tuple[int, int], tuple[int, int]]:
    return ((kh - 1) // 2, kh - 1 - (kh - 1) // 2), ((kw - 1) // 2, kw - 1 - (kw - 1) // 2)


def conv2d(x: np.ndarray, w: ConvWeights, stride: int = 1,
           padding: str = "same") -> np.ndarray:
    """2D cross-correlation plus bias.

    ``padding="same"`` zero-pads so output height/width equal the input's
    (stride must be 1); ``"valid"`` applies no padding.
    """
    check_tensor(x, "conv2d input")
    out_ch, in_ch, kh, kw = w.kernel.shape
    if w.bias.shape[0] != out_ch:
        raise ShapeError(f"bias shape {w.bias.shape} does not match kernel "
                         f"out_ch {out_ch}")
    if x.shape[1] != in_ch:
        raise ShapeError(f"conv2d channel mismatch: input has shape {x.shape} "
                         f"(c={x.shape[1]}) but kernel has shape "
                         f"{w.kernel.shape} (in_ch={in_ch})")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        if stride != 1:
            raise ShapeError("padding='same' requires stride == 1")
        pad = _same_pad(kh, kw)
    elif padding == "valid":
        pad = ((0, 0), (0, 0))
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    out = correlate_nchw(x, w.kernel, stride, pad)
    out += w.bias.astype(np.float64)[None, :, None, None]
    return out.astype(_out_dtype(x, w.kernel))


def transposed_conv2d(x: np.ndarray, w: ConvWeights) -> np.ndarray:
    """2x2 stride-2 up-convolution: each input pixel scatters value * kernel
    into its own disjoint 2x2 output tile, plus bias.  Kernel layout is
    (in_ch, out_ch, 2, 2); output height/width are doubled.
    """
    check_tensor(x, "transposed_conv2d input")
    in_ch, out_ch, kh, kw = w.kernel.shape
    if (kh, kw) != (2, 2):
        raise ShapeError(f"transposed_conv2d kernel must be (in, out, 2, 2), "
                         f"got {w.kernel.shape}")
    if w.bias.shape[0] != out_ch:
        raise ShapeError(f"bias shape {w.bias.shape} does not match kernel "
                         f"out_ch {out_ch}")
    if x.shape[1] != in_ch:
        raise ShapeError(f"transposed_conv2d channel mismatch: input has shape "
                         f"{x.shape} (c={x.shape[1]}) but kernel has shape "
                         f"{w.kernel.shape} (in_ch={in_ch})")
    n, _, h, ww = x.shape
    tiles = np.einsum("nihw,iouv->nohwuv", x.astype(np.float64),
                      w.kernel.astype(np.float64))
    out = tiles.transpose(0, 1, 2, 4, 3, 5).reshape(n, out_ch, 2 * h, 2 * ww)
    out = out + w.bias.astype(np.float64)[None, :, None, None]
    return out.astype(_out_dtype(x, w.kernel))


def depthwise_sharp(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate every channel independently with one shared 3x3 kernel.

    Zero same-padding, stride 1, no bias: output shape equals input shape.
    """
    check_tensor(x, "depthwise_sharp input")
    kernel = np.asarray(kernel)
    if kernel.shape != (3, 3):
        raise ShapeError(f"depthwise kernel must be 3x3, got {kernel.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    out = np.tensordot(win.astype(np.float64), kernel.astype(np.float64),
                       axes=([4, 5], [0, 1]))
    return out.astype(x.dtype)


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling with stride 2.

    Returns ``(pooled, winners)`` where ``winners`` holds, for each output
    element, the flat index of the winning input element (ties go to the
    first maximum in row-major window order), for backward routing.
    """
    check_tensor(x, "maxpool2x2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even height and width, got {x.shape}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    ni, ci, yi, xi = np.ogrid[:n, :c, :h // 2, :w // 2]
    row = 2 * yi + local // 2
    col = 2 * xi + local % 2
    winners = ((ni * c + ci) * h + row) * w + col
    return np.ascontiguousarray(out), winners


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, np.asarray(0, dtype=x.dtype))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    out = np.empty_like(x64)
    pos = x64 >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x64[pos]))
    e = np.exp(x64[~pos])
    out[~pos] = e / (1.0 + e)
    return out.astype(x.dtype)


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    check_tensor(x, "softmax input")
    x64 = x.astype(np.float64)
    e = np.exp(x64 - x64.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).astype(x.dtype)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Concatenate along the channel axis, a's channels first."""
    check_tensor(a, "concat input a")
    check_tensor(b, "concat input b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels needs matching batch and spatial "
                         f"dims, got {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def dilate2d(x: np.ndarray, step: int) -> np.ndarray:
    """Insert ``step - 1`` zeros between neighbouring pixels (both axes)."""
    if step == 1:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, (h - 1) * step + 1, (w - 1) * step + 1), dtype=x.dtype)
    out[:, :, ::step, ::step] = x
    return out


def rot180(kernel: np.ndarray) -> np.ndarray:
    """Flip a (..., kh, kw) kernel 180 degrees in its spatial axes."""
    return kernel[..., ::-1, ::-1]

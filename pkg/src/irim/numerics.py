"""Dense-tensor substrate: 2D convolutions, unitary DFTs, seeded randomness, tensor files.

Tensors are plain numpy arrays laid out as ``(batch, channel, height, width)``.
Complex fields are carried as two real channels ``(..., 2, H, W)`` holding the
real and imaginary parts; :func:`to_complex` / :func:`from_complex` convert.
"""
from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "NumericalError",
    "check_finite",
    "to_complex",
    "from_complex",
    "conv2d",
    "conv2d_transpose",
    "conv2d_kernel_grad",
    "conv_output_size",
    "dft2",
    "idft2",
    "seeded_rng",
    "write_tensor",
    "read_tensor",
    "save_tensor",
    "load_tensor",
    "sha256_file",
]


class NumericalError(ArithmeticError):
    """Raised when a NaN or Inf reaches a checked boundary."""


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


def to_complex(x):
    """``(..., 2, H, W)`` real pair -> ``(..., H, W)`` complex."""
    x = np.asarray(x)
    if x.ndim < 3 or x.shape[-3] != 2:
        raise ValueError(f"expected a (..., 2, H, W) real pair, got shape {x.shape}")
    return x[..., 0, :, :] + 1j * x[..., 1, :, :]


def from_complex(z, dtype=np.float64):
    z = np.asarray(z)
    return np.stack([z.real, z.imag], axis=-3).astype(dtype, copy=False)


# -- convolutions -----------------------------------------------------------


def conv_output_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _check_conv_args(x, kernel, stride, padding):
    if x.ndim != 4:
        raise ValueError(f"input must be (N, C, H, W), got shape {x.shape}")
    if kernel.ndim != 4:
        raise ValueError(f"kernel must be (C_out, C_in, kh, kw), got shape {kernel.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")


def _windows(x, kh, kw, stride, padding):
    """Strided patch view ``(N, C, Ho, Wo, kh, kw)`` of the zero-padded input."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ValueError(
            f"kernel {kh}x{kw} larger than padded input {x.shape[2]}x{x.shape[3]}"
        )
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of ``x`` (N, C_in, H, W) with ``kernel`` (C_out, C_in, kh, kw).

    Zero padding of ``padding`` pixels on every side. Output spatial extent is
    ``floor((n + 2*padding - k) / stride) + 1``.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    _check_conv_args(x, kernel, stride, padding)
    if kernel.shape[1] != x.shape[1]:
        raise ValueError(
            f"kernel expects {kernel.shape[1]} input channels, input has {x.shape[1]}"
        )
    _, _, kh, kw = kernel.shape
    if kh == kw == 1 and padding == 0:
        out = np.tensordot(kernel[:, :, 0, 0], x[:, :, ::stride, ::stride], axes=([1], [1]))
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    win = _windows(x, kh, kw, stride, padding)
    out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, C_out)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_transpose(y, kernel, stride=1, padding=0, output_size=None):
    """Adjoint of :func:`conv2d` with the same kernel, stride and padding.

    ``y`` has ``C_out`` channels and the result ``C_in``. ``output_size`` picks the
    spatial extent of the result when the forward size map is not injective; by
    default it is ``(n - 1) * stride - 2 * padding + k``.
    """
    y = np.asarray(y)
    kernel = np.asarray(kernel)
    _check_conv_args(y, kernel, stride, padding)
    if kernel.shape[0] != y.shape[1]:
        raise ValueError(
            f"kernel has {kernel.shape[0]} output channels, cotangent has {y.shape[1]}"
        )
    n, _, ho, wo = y.shape
    c_out, c_in, kh, kw = kernel.shape
    if output_size is None:
        output_size = ((ho - 1) * stride - 2 * padding + kh, (wo - 1) * stride - 2 * padding + kw)
    H, W = output_size
    if conv_output_size(H, kh, stride, padding) != ho or conv_output_size(W, kw, stride, padding) != wo:
        raise ValueError(
            f"output size {H}x{W} is inconsistent with input {ho}x{wo} "
            f"(kernel {kh}x{kw}, stride {stride}, padding {padding})"
        )
    # (N, Ho, Wo, C_in, kh, kw): every input pixel's contribution to its patch
    contrib = np.tensordot(y, kernel, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    Hp, Wp = H + 2 * padding, W + 2 * padding
    out = np.zeros((n, c_in, Hp, Wp), dtype=np.result_type(y, kernel))
    if stride == kh and stride == kw and Hp == ho * kh and Wp == wo * kw:
        # non-overlapping patches tile the output exactly
        tiled = contrib.transpose(0, 1, 2, 4, 3, 5).reshape(n, c_in, Hp, Wp)
        out[...] = tiled
    else:
        for i in range(kh):
            for j in range(kw):
                out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib[
                    :, :, :, :, i, j
                ]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


def conv2d_kernel_grad(x, cotangent, kernel_shape, stride=1, padding=0):
    """Gradient of ``<conv2d(x, k), cotangent>`` with respect to ``k``."""
    _, _, kh, kw = kernel_shape
    win = _windows(np.asarray(x), kh, kw, stride, padding)
    ho, wo = cotangent.shape[2:]
    win = win[:, :, :ho, :wo]
    return np.tensordot(cotangent, win, axes=([0, 2, 3], [0, 2, 3]))


# -- Fourier transforms -----------------------------------------------------


def dft2(x):
    """Unitary 2D DFT of a real-pair field ``(..., 2, H, W)``; DC sits at index (0, 0)."""
    x = np.asarray(x)
    return from_complex(np.fft.fft2(to_complex(x), norm="ortho"), dtype=x.dtype)


def idft2(y):
    y = np.asarray(y)
    return from_complex(np.fft.ifft2(to_complex(y), norm="ortho"), dtype=y.dtype)


# -- randomness -------------------------------------------------------------


def seeded_rng(seed, *stream):
    """PCG64 generator keyed by ``seed`` and optional sub-stream integers.

    numpy's ``SeedSequence`` + ``PCG64`` pair is a fixed, documented algorithm, so
    identical keys give identical streams on every platform.
    """
    key = [int(seed) & (2**64 - 1), *(int(s) for s in stream)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


# -- tensor container -------------------------------------------------------
#
# layout: b"IRT1" | dtype tag (1 byte) | rank (u32) | extents (u64 * rank) | payload
# all little-endian

MAGIC = b"IRT1"
_DTYPE_TAGS = {b"f": np.dtype("<f4"), b"d": np.dtype("<f8"), b"b": np.dtype("u1"), b"q": np.dtype("<i8")}
_TAG_OF = {v: k for k, v in _DTYPE_TAGS.items()}


class ContainerError(ValueError):
    pass


def write_tensor(fh, array):
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<") if array.dtype.itemsize > 1 else array.dtype
    if dtype == np.dtype(bool):
        dtype = np.dtype("u1")
    if dtype not in _TAG_OF:
        raise ContainerError(f"unsupported dtype {array.dtype}")
    fh.write(MAGIC)
    fh.write(_TAG_OF[dtype])
    fh.write(struct.pack("<I", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def read_tensor(fh):
    head = fh.read(4)
    if head != MAGIC:
        raise ContainerError(f"bad magic {head!r}")
    tag = fh.read(1)
    if tag not in _DTYPE_TAGS:
        raise ContainerError(f"unknown dtype tag {tag!r}")
    dtype = _DTYPE_TAGS[tag]
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise ContainerError("truncated payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path, array):
    """Atomically write one tensor container to ``path``."""
    path = Path(path)
    buf = io.BytesIO()
    write_tensor(buf, array)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_tensor(path):
    with open(path, "rb") as fh:
        return read_tensor(fh)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

"""Stochastic norm/sign/level quantizer and its bit-exact wire codec.

A vector x is sent as its l2 norm plus, per coordinate, a sign and an integer
level in [0, s] with s = 2**(z-1) - 1.  Levels are rounded stochastically so
the dequantized vector is an unbiased estimate of x.
"""
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError, InvalidBitWidth, InvalidInput

NORM_BYTES = 4


def _check_bit_width(z):
    if int(z) != z or z < 2:
        raise InvalidBitWidth(f"bit width must be an integer >= 2, got {z!r}")
    return int(z)


def levels_for(z):
    """Number of nonzero magnitude levels s for bit width z."""
    z = _check_bit_width(z)
    return (1 << (z - 1)) - 1


def variance_coeff(z, l):
    """Relative variance bound phi(z) = l / (4 s^2) of the quantizer."""
    s = levels_for(z)
    if l < 1:
        raise InvalidInput(f"dimension must be >= 1, got {l!r}")
    return l / (4.0 * s * s)


def payload_bytes(l, z):
    return NORM_BYTES + (l * z + 7) // 8


@dataclass(frozen=True, eq=False)
class QuantizedMessage:
    norm: float
    signs: np.ndarray
    levels: np.ndarray
    bit_width: int

    def __post_init__(self):
        s = levels_for(self.bit_width)
        signs = np.asarray(self.signs, dtype=np.int8).ravel()
        levels = np.asarray(self.levels, dtype=np.int64).ravel()
        if signs.shape != levels.shape:
            raise InvalidInput("signs and levels must have equal length")
        if not np.all((signs == 1) | (signs == -1)):
            raise InvalidInput("signs must be +1 or -1")
        if levels.size and (levels.min() < 0 or levels.max() > s):
            raise InvalidInput(f"levels must lie in [0, {s}]")
        norm = float(self.norm)
        if not np.isfinite(norm) or norm < 0:
            raise InvalidInput(f"norm must be finite and >= 0, got {norm!r}")
        if norm == 0 and levels.any():
            raise InvalidInput("zero-norm message must have all-zero levels")
        signs.setflags(write=False)
        levels.setflags(write=False)
        object.__setattr__(self, "norm", norm)
        object.__setattr__(self, "signs", signs)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "bit_width", int(self.bit_width))

    @property
    def dim(self):
        return self.levels.size

    @property
    def s(self):
        return levels_for(self.bit_width)

    def __eq__(self, other):
        if not isinstance(other, QuantizedMessage):
            return NotImplemented
        return (self.bit_width == other.bit_width and self.norm == other.norm
                and np.array_equal(self.signs, other.signs)
                and np.array_equal(self.levels, other.levels))

    __hash__ = None

    def __repr__(self):
        return (f"QuantizedMessage(norm={self.norm!r}, dim={self.dim}, "
                f"bit_width={self.bit_width})")


def stochastic_levels(u, s, uniforms):
    """Round s*u up with probability equal to its fractional part.

    ``u`` holds normalized magnitudes in [0, 1]; ``s`` broadcasts against it.
    Grid points (zero fractional part) never round up.
    """
    scaled = np.minimum(u * s, s)
    low = np.floor(scaled)
    return low + (uniforms < scaled - low)


def quantize_rows(X, s, uniforms):
    """Quantize-dequantize every vector along the last axis of ``X`` in one pass.

    ``s`` (levels per row) broadcasts against ``X.shape[:-1]``; ``uniforms``
    matches ``X``.  Norms are rounded to float32 as on the wire.
    """
    norms = np.linalg.norm(X, axis=-1, keepdims=True).astype(np.float32).astype(np.float64)
    s = np.asarray(s, dtype=np.float64)[..., None]
    safe = np.where(norms > 0, norms, 1.0)
    levels = stochastic_levels(np.abs(X) / safe, s, uniforms)
    return np.where(norms > 0, np.copysign(levels / s, X) * safe, 0.0)


def quantize(x, z, rng):
    """Quantize vector ``x`` at bit width ``z`` using one uniform per coordinate."""
    s = levels_for(z)
    x = np.asarray(x, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise InvalidInput("cannot quantize a vector with non-finite entries")
    uniforms = rng.random(x.size)
    # the norm travels as float32, so the receiver only ever sees this value
    norm = float(np.float32(np.linalg.norm(x)))
    signs = np.where(x < 0, -1, 1).astype(np.int8)
    if norm == 0.0:
        levels = np.zeros(x.size, dtype=np.int64)
    else:
        u = np.abs(x) / norm
        levels = stochastic_levels(u, s, uniforms).astype(np.int64)
    return QuantizedMessage(norm, signs, levels, z)


def dequantize(msg):
    return msg.norm * msg.signs * (msg.levels / msg.s)


def pack(msg):
    """Serialize: float32 LE norm, then per coordinate 1 sign bit + z-1 level bits."""
    z = msg.bit_width
    codes = (msg.signs < 0).astype(np.int64) << (z - 1) | msg.levels
    shifts = np.arange(z - 1, -1, -1, dtype=np.int64)
    bits = ((codes[:, None] >> shifts) & 1).astype(np.uint8).ravel()
    return struct.pack("<f", msg.norm) + np.packbits(bits).tobytes()


def unpack(data, z, l):
    z = _check_bit_width(z)
    expected = payload_bytes(l, z)
    if len(data) != expected:
        raise DecodeError(f"expected {expected} bytes for l={l}, z={z}, got {len(data)}")
    (norm,) = struct.unpack("<f", bytes(data[:NORM_BYTES]))
    bits = np.unpackbits(np.frombuffer(bytes(data[NORM_BYTES:]), dtype=np.uint8))
    bits = bits[: l * z].reshape(l, z).astype(np.int64)
    codes = bits @ (1 << np.arange(z - 1, -1, -1, dtype=np.int64))
    signs = np.where(codes >> (z - 1), -1, 1).astype(np.int8)
    levels = codes & ((1 << (z - 1)) - 1)
    try:
        return QuantizedMessage(float(norm), signs, levels, z)
    except InvalidInput as exc:
        raise DecodeError(f"corrupt payload: {exc}") from exc

"""Binary datagram format for streaming CSI frames.

Layout, all integers little-endian::

    magic     4s   b"CIUW"
    version   u16
    sensor_id u16
    seq       u32
    timestamp u64  microseconds
    gain      i16  AGC gain in centi-dB
    n_sub     u16
    payload   n_sub x (i16 real, i16 imag), fixed point with scale 2**-8
    crc32     u32  over every preceding byte

A frame with ``n_sub == 0`` is the end-of-stream marker; its ``seq`` carries
the number of data frames the sensor produced.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from ..core import CsiFrame

MAGIC = b"CIUW"
VERSION = 1
HEADER = struct.Struct("<4sHHIQhH")
CRC = struct.Struct("<I")
MAX_SUBCARRIERS = 4096
FIXED_POINT_BITS = 8
FIXED_POINT_SCALE = float(1 << FIXED_POINT_BITS)
I16_MIN, I16_MAX = -32768, 32767
MIN_FRAME_BYTES = HEADER.size + CRC.size


class WireError(ValueError):
    """Base class for every encode/decode failure."""


class TruncationError(WireError):
    """Input shorter or longer than its header declares."""


class ProtocolError(WireError):
    """Wrong magic or unsupported version."""


class CorruptionError(WireError):
    """CRC mismatch."""


class FrameSizeError(WireError):
    """Frame cannot be represented in the wire format."""


def frame_length(n_sub: int) -> int:
    return HEADER.size + 4 * n_sub + CRC.size


def quantize(values: np.ndarray) -> tuple[np.ndarray, bool]:
    """Round real values onto the i16 fixed-point grid.

    Returns the integers and whether any value had to be clamped.
    """
    scaled = np.rint(np.asarray(values, dtype=np.float64) * FIXED_POINT_SCALE)
    clipped = np.clip(scaled, I16_MIN, I16_MAX)
    return clipped.astype(np.int16), bool((clipped != scaled).any())


def dequantize(ints: np.ndarray) -> np.ndarray:
    return np.asarray(ints, dtype=np.float64) / FIXED_POINT_SCALE


@dataclass(frozen=True)
class EncodedFrame:
    data: bytes
    saturated: bool


def encode_frame_ex(frame: CsiFrame) -> EncodedFrame:
    """Encode and report whether any component saturated."""
    n = frame.n_sub
    if n > MAX_SUBCARRIERS:
        raise FrameSizeError(f"{n} subcarriers exceeds the limit of {MAX_SUBCARRIERS}")
    if not 0 <= frame.sensor_id <= 0xFFFF:
        raise FrameSizeError(f"sensor_id {frame.sensor_id} does not fit in u16")
    if not 0 <= frame.seq <= 0xFFFFFFFF:
        raise FrameSizeError(f"seq {frame.seq} does not fit in u32")
    if not 0 <= frame.timestamp_us <= 0xFFFFFFFFFFFFFFFF:
        raise FrameSizeError(f"timestamp {frame.timestamp_us} does not fit in u64")
    centi = round(frame.agc_gain_db * 100.0)
    if not I16_MIN <= centi <= I16_MAX:
        raise FrameSizeError(f"gain {frame.agc_gain_db} dB outside the i16 centi-dB range")

    pairs = np.empty((n, 2), dtype=np.float64)
    pairs[:, 0] = frame.subcarriers.real
    pairs[:, 1] = frame.subcarriers.imag
    ints, saturated = quantize(pairs)
    body = HEADER.pack(MAGIC, VERSION, frame.sensor_id, frame.seq, frame.timestamp_us, centi, n)
    body += ints.astype("<i2").tobytes()
    return EncodedFrame(body + CRC.pack(zlib.crc32(body)), saturated)


def encode_frame(frame: CsiFrame) -> bytes:
    return encode_frame_ex(frame).data


def end_of_stream(sensor_id: int, total_frames: int, timestamp_us: int) -> bytes:
    marker = CsiFrame(sensor_id, total_frames, timestamp_us, 0.0, np.zeros(0, dtype=np.complex128))
    return encode_frame(marker)


def is_end_of_stream(frame: CsiFrame) -> bool:
    return frame.n_sub == 0


def decode_frame(data: bytes) -> CsiFrame:
    data = bytes(data)
    if len(data) < MIN_FRAME_BYTES:
        raise TruncationError(f"{len(data)} bytes is shorter than the minimum frame of {MIN_FRAME_BYTES}")
    magic, version, sensor_id, seq, ts, centi, n = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if len(data) != frame_length(n):
        raise TruncationError(f"header declares {frame_length(n)} bytes, got {len(data)}")
    (crc,) = CRC.unpack_from(data, len(data) - CRC.size)
    if zlib.crc32(data[: -CRC.size]) != crc:
        raise CorruptionError("crc32 mismatch")
    ints = np.frombuffer(data, dtype="<i2", count=2 * n, offset=HEADER.size).reshape(n, 2)
    comps = dequantize(ints)
    return CsiFrame(sensor_id, seq, ts, centi / 100.0, comps[:, 0] + 1j * comps[:, 1])

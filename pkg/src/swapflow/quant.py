"""Symmetric 4-bit block quantization (``q4b32``).

Values are quantized per block of 32 consecutive elements *within a
channel* (a channel is one input column of a weight matrix). Each block
gets one float32 scale ``max(|v|) / 7`` and signed codes in [-8, 7];
dequantized value = code * scale. Codes are stored biased by +8 so two
codes pack into one byte (low nibble = even element).

Scales live next to their channel's code bytes so a single channel read
retrieves everything needed to dequantize it.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError

BLOCK = 32
SCALE_BYTES = 4  # float32 scale per block


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # np.round ties to even; half-away keeps the codes language-agnostic
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_q4(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quantize a (rows, cols) float32 matrix column-blockwise.

    Returns ``(codes, scales)`` with codes int8 of shape (rows, cols) in
    [-8, 7] and scales float32 of shape (rows // 32, cols).
    """
    if values.ndim == 1:
        values = values[:, None]
    rows, cols = values.shape
    if rows % BLOCK != 0:
        raise FormatError(f"rows ({rows}) not divisible by block size {BLOCK}")
    blocks = values.reshape(rows // BLOCK, BLOCK, cols).astype(np.float32)
    absmax = np.abs(blocks).max(axis=1)  # (n_blocks, cols)
    scales = (absmax / 7.0).astype(np.float32)
    safe = np.where(scales > 0.0, scales, np.float32(1.0))
    codes = _round_half_away(blocks / safe[:, None, :])
    codes = np.clip(codes, -8, 7)
    codes = np.where(scales[:, None, :] > 0.0, codes, 0.0)
    return codes.reshape(rows, cols).astype(np.int8), scales


def dequantize_q4(codes: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quantize_q4`; exact given the stored scales."""
    if codes.ndim == 1:
        codes = codes[:, None]
    rows, cols = codes.shape
    if rows % BLOCK != 0:
        raise FormatError(f"rows ({rows}) not divisible by block size {BLOCK}")
    blocks = codes.reshape(rows // BLOCK, BLOCK, cols).astype(np.float32)
    out = blocks * scales[:, None, :].astype(np.float32)
    return out.reshape(rows, cols).astype(np.float32)


def channel_bytes_q4(rows: int) -> int:
    """Serialized size of one q4b32 channel: packed codes plus scales."""
    return rows // 2 + (rows // BLOCK) * SCALE_BYTES


def pack_channel_q4(codes: np.ndarray, scales: np.ndarray) -> bytes:
    """Serialize one channel (codes (rows,), scales (rows//32,)) to bytes."""
    biased = (codes.astype(np.int16) + 8).astype(np.uint8)
    lo = biased[0::2]
    hi = biased[1::2]
    packed = (lo | (hi << 4)).astype(np.uint8)
    return packed.tobytes() + scales.astype("<f4").tobytes()


def unpack_channel_q4(raw: bytes, rows: int) -> tuple[np.ndarray, np.ndarray]:
    """Deserialize one channel; returns (codes (rows,), scales (rows//32,))."""
    n_code_bytes = rows // 2
    expected = channel_bytes_q4(rows)
    if len(raw) != expected:
        raise FormatError(f"q4 channel payload is {len(raw)} bytes, expected {expected}")
    packed = np.frombuffer(raw, dtype=np.uint8, count=n_code_bytes)
    codes = np.empty(rows, dtype=np.int8)
    codes[0::2] = (packed & 0x0F).astype(np.int16) - 8
    codes[1::2] = (packed >> 4).astype(np.int16) - 8
    scales = np.frombuffer(raw, dtype="<f4", offset=n_code_bytes)
    return codes, scales.astype(np.float32)

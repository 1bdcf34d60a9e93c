"""Radiance RGBE (.hdr) reader and writer.

Reads flat and new-style run-length encoded scanlines; always writes RLE.
Images are float arrays of shape (H, W, 3), linear radiance.
"""
import re
from pathlib import Path

import numpy as np

__all__ = ["HDRFormatError", "read_hdr", "write_hdr", "float_to_rgbe", "rgbe_to_float"]

_MAGICS = (b"#?RADIANCE", b"#?RGBE")
_RES_RE = re.compile(rb"^([-+])Y\s+(\d+)\s+([-+])X\s+(\d+)$")


class HDRFormatError(ValueError):
    pass


def float_to_rgbe(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    if np.any(img < 0) or not np.all(np.isfinite(img)):
        raise ValueError("RGBE can only store finite non-negative values")
    brightest = img.max(axis=2)
    mant, exp = np.frexp(brightest)
    out = np.zeros(img.shape[:2] + (4,), dtype=np.uint8)
    nz = brightest > 1e-38
    scale = np.zeros_like(brightest)
    scale[nz] = mant[nz] * 256.0 / brightest[nz]
    # mantissa bytes in [0, 255]: value * 2^-e * 256 < 256
    out[..., :3] = np.clip(np.floor(img * scale[..., None]), 0, 255).astype(np.uint8)
    out[..., 3] = np.where(nz, exp + 128, 0).astype(np.uint8)
    return out


def rgbe_to_float(rgbe):
    rgbe = np.asarray(rgbe, dtype=np.uint8)
    e = rgbe[..., 3].astype(np.int32)
    f = np.where(e > 0, np.ldexp(1.0, e - (128 + 8)), 0.0)
    out = (rgbe[..., :3].astype(np.float64) + 0.5) * f[..., None]
    return np.where(e[..., None] > 0, out, 0.0).astype(np.float32)


def _read_header(data: bytes):
    if not data.startswith(_MAGICS):
        raise HDRFormatError("missing Radiance magic '#?RADIANCE' / '#?RGBE'")
    pos = 0
    fmt = None
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise HDRFormatError("header not terminated")
        line = data[pos:end].strip()
        pos = end + 1
        if not line:
            break
        if line.startswith(b"FORMAT="):
            fmt = line[7:]
    if fmt is not None and fmt != b"32-bit_rle_rgbe":
        raise HDRFormatError(f"unsupported pixel format {fmt.decode(errors='replace')}")
    end = data.find(b"\n", pos)
    if end < 0:
        raise HDRFormatError("missing resolution line")
    m = _RES_RE.match(data[pos:end].strip())
    if not m or m.group(1) != b"-" or m.group(3) != b"+":
        raise HDRFormatError(f"unsupported resolution line {data[pos:end]!r}")
    return int(m.group(2)), int(m.group(4)), end + 1


def _decode_scanline(buf, pos, width):
    """Return (scanline (W, 4) uint8, new position)."""
    if pos + 4 > len(buf):
        raise HDRFormatError("pixel data truncated")
    b0, b1, b2, b3 = buf[pos:pos + 4]
    rle = 8 <= width < 0x8000 and b0 == 2 and b1 == 2 and not (b2 & 0x80)
    if not rle:
        n = width * 4
        if pos + n > len(buf):
            raise HDRFormatError("pixel data truncated")
        return np.frombuffer(buf, np.uint8, n, pos).reshape(width, 4), pos + n
    if (b2 << 8 | b3) != width:
        raise HDRFormatError(f"scanline width {(b2 << 8) | b3} does not match header width {width}")
    pos += 4
    line = np.empty((4, width), dtype=np.uint8)
    for c in range(4):
        x = 0
        while x < width:
            if pos >= len(buf):
                raise HDRFormatError("pixel data truncated")
            count = buf[pos]
            pos += 1
            if count > 128:
                count -= 128
                if x + count > width or pos >= len(buf):
                    raise HDRFormatError("bad run length")
                line[c, x:x + count] = buf[pos]
                pos += 1
            else:
                if count == 0 or x + count > width or pos + count > len(buf):
                    raise HDRFormatError("bad literal length")
                line[c, x:x + count] = np.frombuffer(buf, np.uint8, count, pos)
                pos += count
            x += count
    return line.T, pos


def read_hdr(path):
    data = Path(path).read_bytes()
    height, width, pos = _read_header(data)
    rgbe = np.empty((height, width, 4), dtype=np.uint8)
    for y in range(height):
        rgbe[y], pos = _decode_scanline(data, pos, width)
    if pos != len(data):
        raise HDRFormatError(f"{len(data) - pos} trailing bytes after {height} scanlines")
    return rgbe_to_float(rgbe)


def _encode_channel(row: np.ndarray) -> bytes:
    out = bytearray()
    n = len(row)
    x = 0
    while x < n:
        # find the next run of at least 4 equal bytes
        run_start = x
        run_len = 0
        while run_start < n:
            run_len = 1
            while run_start + run_len < n and run_len < 127 and row[run_start + run_len] == row[run_start]:
                run_len += 1
            if run_len >= 4:
                break
            run_start += 1
        while x < run_start:
            k = min(128, run_start - x)
            out.append(k)
            out.extend(row[x:x + k].tobytes())
            x += k
        if run_start < n and run_len >= 4:
            out.append(128 + run_len)
            out.append(int(row[run_start]))
            x = run_start + run_len
    return bytes(out)


def write_hdr(path, img):
    rgbe = float_to_rgbe(img)
    height, width = rgbe.shape[:2]
    parts = [b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n", f"-Y {height} +X {width}\n".encode()]
    use_rle = 8 <= width < 0x8000
    for y in range(height):
        line = rgbe[y]
        if not use_rle:
            parts.append(line.tobytes())
            continue
        parts.append(bytes((2, 2, width >> 8, width & 0xFF)))
        for c in range(4):
            parts.append(_encode_channel(line[:, c]))
    Path(path).write_bytes(b"".join(parts))

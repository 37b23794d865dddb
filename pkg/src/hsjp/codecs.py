"""8-bit PNG and binary PPM (P6) codecs for float images in [0, 1].

Decoding errors carry the byte offset where the stream stopped making sense.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_PNG_COLOR_CHANNELS = {0: 1, 2: 3}  # gray, RGB; 8-bit only


class ImageDecodeError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def _as_hwc(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ValueError(f"expected H x W x {{1,3}} image, got shape {image.shape}")
    return image


# --------------------------------------------------------------------- PPM


def encode_ppm(image: np.ndarray) -> bytes:
    image = _as_hwc(image)
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    h, w, _ = image.shape
    return b"P6\n%d %d\n255\n" % (w, h) + to_uint8(image).tobytes()


def _ppm_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageDecodeError("unexpected end of PPM header", pos)
    return data[start:pos], pos


def decode_ppm(data: bytes) -> np.ndarray:
    if not data.startswith(b"P6"):
        raise ImageDecodeError("not a binary PPM (missing P6 magic)", 0)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        start = pos
        token, pos = _ppm_token(data, pos)
        if not token.isdigit():
            raise ImageDecodeError(f"bad PPM {name} {token!r}", start)
        fields.append(int(token))
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise ImageDecodeError(f"bad PPM dimensions {w}x{h}", pos)
    if maxval != 255:
        raise ImageDecodeError(f"only 8-bit PPM supported, maxval={maxval}", pos)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageDecodeError("missing whitespace after PPM header", pos)
    pos += 1
    need = w * h * 3
    body = data[pos:pos + need]
    if len(body) < need:
        raise ImageDecodeError(f"truncated PPM body: need {need} bytes, have {len(body)}",
                               pos + len(body))
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return pixels.astype(np.float64) / 255.0


# --------------------------------------------------------------------- PNG


def _chunk(kind: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(kind + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + kind + payload + struct.pack(">I", crc)


def encode_png(image: np.ndarray) -> bytes:
    """Encode as 8-bit gray or RGB PNG, filter type 0 on every row."""
    image = _as_hwc(image)
    h, w, c = image.shape
    pixels = to_uint8(image).reshape(h, w * c)
    raw = np.concatenate([np.zeros((h, 1), np.uint8), pixels], axis=1).tobytes()
    color_type = 0 if c == 1 else 2
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    return (PNG_SIGNATURE + _chunk(b"IHDR", ihdr)
            + _chunk(b"IDAT", zlib.compress(raw, 9)) + _chunk(b"IEND", b""))


def _paeth_row(line: np.ndarray, prev: np.ndarray, bpp: int) -> np.ndarray:
    out = line.astype(np.int16)
    up = prev.astype(np.int16)
    for i in range(len(out)):
        a = int(out[i - bpp]) if i >= bpp else 0
        b = int(up[i])
        c = int(up[i - bpp]) if i >= bpp else 0
        p = a + b - c
        pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
        pred = a if (pa <= pb and pa <= pc) else (b if pb <= pc else c)
        out[i] = (out[i] + pred) & 0xFF
    return out.astype(np.uint8)


def _unfilter(raw: bytes, h: int, w: int, bpp: int, data_offset: int) -> np.ndarray:
    stride = w * bpp
    if len(raw) != h * (stride + 1):
        raise ImageDecodeError(
            f"decompressed size {len(raw)} != expected {h * (stride + 1)}", data_offset)
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(h, stride + 1)
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    for y in range(h):
        ftype = rows[y, 0]
        line = rows[y, 1:]
        if ftype == 0:
            cur = line.copy()
        elif ftype == 1:  # Sub: running sum per channel
            cur = np.cumsum(line.reshape(w, bpp).astype(np.int64), axis=0).astype(np.uint8).ravel()
        elif ftype == 2:
            cur = (line.astype(np.uint16) + prev).astype(np.uint8)
        elif ftype == 3:
            cur = line.astype(np.int16)
            for i in range(stride):
                left = int(cur[i - bpp]) if i >= bpp else 0
                cur[i] = (int(cur[i]) + ((left + int(prev[i])) >> 1)) & 0xFF
            cur = cur.astype(np.uint8)
        elif ftype == 4:
            cur = _paeth_row(line, prev, bpp)
        else:
            raise ImageDecodeError(f"unknown PNG filter type {ftype} on row {y}", data_offset)
        out[y] = cur
        prev = cur
    return out


def decode_png(data: bytes) -> np.ndarray:
    if not data.startswith(PNG_SIGNATURE):
        raise ImageDecodeError("missing PNG signature", 0)
    pos = len(PNG_SIGNATURE)
    header = None
    idat = []
    idat_offset = None
    while True:
        if pos + 8 > len(data):
            raise ImageDecodeError("truncated PNG chunk header", pos)
        length, kind = struct.unpack(">I4s", data[pos:pos + 8])
        end = pos + 8 + length + 4
        if end > len(data):
            raise ImageDecodeError(f"truncated PNG chunk {kind!r}", pos)
        payload = data[pos + 8:pos + 8 + length]
        (crc,) = struct.unpack(">I", data[end - 4:end])
        if zlib.crc32(kind + payload) & 0xFFFFFFFF != crc:
            raise ImageDecodeError(f"CRC mismatch in chunk {kind!r}", pos)
        if kind == b"IHDR":
            if length != 13:
                raise ImageDecodeError("bad IHDR length", pos)
            header = struct.unpack(">IIBBBBB", payload)
            w, h, depth, color, comp, filt, interlace = header
            if depth != 8 or color not in _PNG_COLOR_CHANNELS:
                raise ImageDecodeError(
                    f"unsupported PNG depth={depth} color_type={color}", pos + 8)
            if comp != 0 or filt != 0 or interlace != 0:
                raise ImageDecodeError("unsupported PNG compression/filter/interlace", pos + 8)
        elif kind == b"IDAT":
            if header is None:
                raise ImageDecodeError("IDAT before IHDR", pos)
            if idat_offset is None:
                idat_offset = pos
            idat.append(payload)
        elif kind == b"IEND":
            break
        elif kind[:1].isupper():  # critical chunk we do not understand
            raise ImageDecodeError(f"unsupported critical chunk {kind!r}", pos)
        pos = end
    if header is None or not idat:
        raise ImageDecodeError("PNG without IHDR/IDAT", pos)
    w, h, _, color, *_ = header
    channels = _PNG_COLOR_CHANNELS[color]
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise ImageDecodeError(f"corrupt IDAT stream: {exc}", idat_offset) from None
    pixels = _unfilter(raw, h, w, channels, idat_offset)
    return pixels.reshape(h, w, channels).astype(np.float64) / 255.0


def decode_image(data: bytes, fmt: str) -> np.ndarray:
    """Decode PNG or PPM bytes to an ``H x W x C`` float64 image in [0, 1]."""
    fmt = fmt.upper()
    if fmt == "PNG":
        return decode_png(data)
    if fmt == "PPM":
        return decode_ppm(data)
    raise ValueError(f"unsupported format {fmt!r}; expected PNG or PPM")


def encode_image(image: np.ndarray, fmt: str) -> bytes:
    fmt = fmt.upper()
    if fmt == "PNG":
        return encode_png(image)
    if fmt == "PPM":
        return encode_ppm(image)
    raise ValueError(f"unsupported format {fmt!r}; expected PNG or PPM")


def read_image(path) -> np.ndarray:
    path = str(path)
    fmt = "PPM" if path.lower().endswith((".ppm", ".pnm")) else "PNG"
    with open(path, "rb") as fh:
        return decode_image(fh.read(), fmt)


def write_image(path, image: np.ndarray) -> None:
    path = str(path)
    fmt = "PPM" if path.lower().endswith((".ppm", ".pnm")) else "PNG"
    with open(path, "wb") as fh:
        fh.write(encode_image(image, fmt))

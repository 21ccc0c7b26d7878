"""Binary PPM (P6) and plain PBM (P1) reading/writing."""

from __future__ import annotations

import numpy as np


def write_ppm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError("write_ppm expects an HxWx3 uint8 array")
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _header_fields(data: bytes, count: int) -> tuple[list[bytes], int]:
    fields, pos = [], 0
    while len(fields) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    return fields, pos + 1


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    (magic, w, h, maxval), pos = _header_fields(data, 4)
    if magic != b"P6" or int(maxval) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(w), int(h)
    return np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def format_pbm(bits: np.ndarray) -> str:
    bits = np.asarray(bits, dtype=bool)
    rows = [" ".join("1" if b else "0" for b in row) for row in bits]
    return f"P1\n{bits.shape[1]} {bits.shape[0]}\n" + "\n".join(rows) + "\n"


def parse_pbm(text: str) -> np.ndarray:
    body = [ln.split("#", 1)[0] for ln in text.splitlines()]
    tokens = " ".join(body).split()
    if not tokens or tokens[0] != "P1":
        raise ValueError("not a plain PBM (P1) image")
    w, h = int(tokens[1]), int(tokens[2])
    digits = "".join(tokens[3:])
    if len(digits) != w * h or set(digits) - {"0", "1"}:
        raise ValueError("PBM body does not match its dimensions")
    return np.array([c == "1" for c in digits], dtype=bool).reshape(h, w)

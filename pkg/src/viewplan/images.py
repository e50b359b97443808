"""Image I/O and fidelity metrics.

Images are float arrays of shape (H, W, 3) with channel values in [0, 1].
PPM (binary P6) is read and written with no dependency beyond numpy; PNG is
handled through Pillow.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from viewplan.errors import ConfigError, IOFailure


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / np.float32(255.0)


def write_ppm(path, img: np.ndarray):
    a = to_uint8(img)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ConfigError("expected an (H, W, 3) image")
    header = f"P6\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii")
    try:
        Path(path).write_bytes(header + a.tobytes())
    except OSError as e:
        raise IOFailure(f"cannot write {path}: {e}") from e


def read_ppm(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IOFailure(f"cannot read {path}: {e}") from e
    fields = []
    pos = 0
    # header: magic, width, height, maxval; '#' starts a comment
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P6":
        raise ConfigError(f"{path}: not a binary PPM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ConfigError(f"{path}: only maxval 255 supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return from_uint8(data.reshape(h, w, 3))


def write_image(path, img: np.ndarray):
    """Write PNG or PPM depending on the file extension."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        write_ppm(path, img)
        return
    from PIL import Image as PILImage

    try:
        PILImage.fromarray(to_uint8(img), mode="RGB").save(path)
    except OSError as e:
        raise IOFailure(f"cannot write {path}: {e}") from e


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    from PIL import Image as PILImage

    try:
        with PILImage.open(path) as im:
            return from_uint8(np.asarray(im.convert("RGB")))
    except OSError as e:
        raise IOFailure(f"cannot read {path}: {e}") from e


def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images."""
    m = mse(a, b)
    if m == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / m))

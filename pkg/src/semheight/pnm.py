"""Minimal binary PGM (P5) reader/writer for 8- and 16-bit grey images."""

import numpy as np


def write_pgm(path, image, comments=()):
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM image must be 2-D")
    if image.dtype == np.uint8:
        maxval, data = 255, image.tobytes()
    elif image.dtype == np.uint16:
        maxval, data = 65535, image.astype(">u2").tobytes()
    else:
        raise TypeError(f"unsupported PGM dtype {image.dtype}")
    header = ["P5"]
    header += [f"# {c}" for c in comments]
    header.append(f"{image.shape[1]} {image.shape[0]}")
    header.append(str(maxval))
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data)


def read_pgm(path):
    """Return ``(image, comments)``; 16-bit data is decoded big-endian."""
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0
    tokens, comments = [], []
    while len(tokens) < 4:
        # skip whitespace
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            end = raw.index(b"\n", pos)
            comments.append(raw[pos + 1:end].decode("ascii").strip())
            pos = end + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    image = np.frombuffer(raw, dtype=dtype, count=width * height, offset=pos)
    return image.reshape(height, width).astype(np.uint8 if maxval < 256 else np.uint16), comments

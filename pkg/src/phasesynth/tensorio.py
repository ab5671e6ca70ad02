"""On-disk tensor formats.

Single tensor: one ASCII header line ``TNSR v1 <rank> <d0> <d1> ...``
followed by the flat little-endian float64 payload in row-major order.

Named-tensor archive: magic line, an 8-byte little-endian index length,
a JSON index (tensor names, offsets, metadata), then concatenated TNSR
payloads. Byte-for-byte reproducible for identical contents.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import ContractError

ARCHIVE_MAGIC = b"NTAR v1\n"


def tensor_bytes(arr):
    arr = np.asarray(arr, dtype="<f8", order="C")
    header = "TNSR v1 {} {}\n".format(arr.ndim, " ".join(str(d) for d in arr.shape))
    if arr.ndim == 0:
        header = "TNSR v1 0\n"
    return header.encode("ascii") + arr.tobytes()


def tensor_from_bytes(blob):
    newline = blob.index(b"\n")
    fields = blob[:newline].decode("ascii").split()
    if fields[:2] != ["TNSR", "v1"]:
        raise ContractError("not a TNSR v1 payload")
    rank = int(fields[2])
    shape = tuple(int(d) for d in fields[3:3 + rank])
    data = np.frombuffer(blob[newline + 1:], dtype="<f8")
    expected = int(np.prod(shape)) if shape else 1
    if data.size != expected:
        raise ContractError(f"TNSR payload size {data.size} != product of shape {shape}")
    return data.reshape(shape).astype(np.float64)


def save_tensor(path, arr):
    with open(path, "wb") as f:
        f.write(tensor_bytes(arr))


def load_tensor(path):
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())


def save_archive(path, named, meta=None):
    """Write a named-tensor archive. ``named`` maps name -> ndarray."""
    payloads = []
    index = {"schema_version": 1, "meta": meta or {}, "tensors": []}
    offset = 0
    for name in sorted(named):
        blob = tensor_bytes(named[name])
        index["tensors"].append({"name": name, "offset": offset, "length": len(blob)})
        payloads.append(blob)
        offset += len(blob)
    index_bytes = json.dumps(index, sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(ARCHIVE_MAGIC)
        f.write(struct.pack("<Q", len(index_bytes)))
        f.write(index_bytes)
        for blob in payloads:
            f.write(blob)
    os.replace(tmp, path)


def load_archive(path):
    """Return (dict name -> ndarray, meta dict)."""
    with open(path, "rb") as f:
        magic = f.read(len(ARCHIVE_MAGIC))
        if magic != ARCHIVE_MAGIC:
            raise ContractError(f"{path} is not a named-tensor archive")
        (index_len,) = struct.unpack("<Q", f.read(8))
        index = json.loads(f.read(index_len).decode("utf-8"))
        body = f.read()
    named = {}
    for entry in index["tensors"]:
        blob = body[entry["offset"]:entry["offset"] + entry["length"]]
        named[entry["name"]] = tensor_from_bytes(blob)
    return named, index.get("meta", {})


def save_pgm(path, image):
    """Export a [0,1] grayscale image as binary 8-bit PGM (P5)."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    pixels = np.round(img * 255.0).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())

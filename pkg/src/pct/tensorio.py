"""PCT1 on-disk tensor format and the checkpoint container.

A PCT1 record is: 4-byte magic ``PCT1``, uint32-LE rank, rank uint32-LE
extents, then row-major IEEE-754 float32-LE values. Tensors are float64 in
memory but always 32-bit on disk.

A checkpoint is a single file: uint32-LE manifest length, a JSON manifest
(name -> {offset, shape}, offsets relative to the end of the manifest),
then the named PCT1 records concatenated.
"""

import json
import struct

import numpy as np

from .errors import PctError

MAGIC = b"PCT1"


def tensor_bytes(array):
    arr = np.ascontiguousarray(array, dtype=np.float32)
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f4").tobytes()


def tensor_from_bytes(buf, offset=0):
    """Decode one PCT1 record; returns (float64 array, bytes consumed)."""
    if buf[offset : offset + 4] != MAGIC:
        raise PctError(f"bad PCT1 magic at offset {offset}: {buf[offset:offset + 4]!r}")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    shape = struct.unpack_from(f"<{rank}I", buf, offset + 8)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    start = offset + 8 + 4 * rank
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=start)
    return values.astype(np.float64).reshape(shape), (start + 4 * count) - offset


def write_tensor(path, array):
    with open(path, "wb") as f:
        f.write(tensor_bytes(array))


def read_tensor(path):
    with open(path, "rb") as f:
        buf = f.read()
    array, used = tensor_from_bytes(buf)
    if used != len(buf):
        raise PctError(f"{path}: {len(buf) - used} trailing bytes after PCT1 record")
    return array


def save_checkpoint(path, tensors, meta=None):
    """Write named arrays (dict, saved in sorted-name order) plus metadata."""
    blob = b""
    entries = {}
    for name in sorted(tensors):
        entries[name] = {"offset": len(blob), "shape": list(tensors[name].shape)}
        blob += tensor_bytes(tensors[name])
    manifest = {"tensors": entries, "meta": meta or {}}
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(mbytes)))
        f.write(mbytes)
        f.write(blob)


def load_checkpoint(path):
    """Returns (name -> float64 array, meta dict)."""
    with open(path, "rb") as f:
        (mlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(mlen).decode())
        blob = f.read()
    tensors = {}
    for name, entry in manifest["tensors"].items():
        array, _ = tensor_from_bytes(blob, entry["offset"])
        if list(array.shape) != entry["shape"]:
            raise PctError(
                f"{path}: tensor {name} shape {list(array.shape)} != manifest {entry['shape']}"
            )
        tensors[name] = array
    return tensors, manifest["meta"]

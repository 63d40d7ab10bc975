"""Binary tensor file format shared by datasets and checkpoints.

Layout: magic "PCSD", u32 version, u32 rank, rank * u64 dims, then the values
as little-endian float32, row-major.
"""

import struct

import numpy as np

TENSOR_MAGIC = b"PCSD"
TENSOR_VERSION = 1


def tensor_bytes(array):
    arr = np.ascontiguousarray(array, dtype="<f4")
    head = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + dims + arr.tobytes()


def write_tensor(path, array):
    with open(path, "wb") as fh:
        fh.write(tensor_bytes(array))


def tensor_from_buffer(buf, offset=0):
    """Parse one tensor; returns (array, next_offset)."""
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise ValueError("not a tensor blob (bad magic)")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor version {version}")
    dims = struct.unpack_from(f"<{rank}Q", buf, offset + 12)
    start = offset + 12 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start)
    return arr.reshape(dims).copy(), start + 4 * count


def read_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_buffer(buf)
    if end != len(buf):
        raise ValueError(f"trailing bytes in {path}")
    return arr

"""Binary payload encoding, used for byte accounting and file dumps.

Layout (little endian):

    header   version u64 | source u8 | n_items u32 | n_user_features u32 | k u32
    sig      16 raw bytes
    body     q_grad float64 row-major, then u_grad float64 row-major
             (u_grad omitted when n_user_features = 0)

A client payload with both gradient blocks is therefore exactly
21 + 16 + 8 * (n_items + n_user_features) * k bytes.
"""

from __future__ import annotations

import struct

import numpy as np

HEADER_FORMAT = "<QBIII"
HEADER_BYTES = struct.calcsize(HEADER_FORMAT)  # 21
SIGNATURE_BYTES = 16

SOURCE_CLIENT = 0
SOURCE_ITEM_SERVER = 1


def payload_num_bytes(n_items: int, n_user_features: int, k: int) -> int:
    """Exact serialized size; pass n_user_features=0 for payloads without u_grad."""
    return HEADER_BYTES + SIGNATURE_BYTES + 8 * (n_items + n_user_features) * k


def serialize_payload(version: int, source: int, signature: bytes, q_grad, u_grad=None) -> bytes:
    if len(signature) != SIGNATURE_BYTES:
        raise ValueError(f"signature must be {SIGNATURE_BYTES} bytes, got {len(signature)}")
    q_grad = np.ascontiguousarray(q_grad, dtype=np.float64)
    n_items, k = q_grad.shape
    d_u = 0
    body = q_grad.astype("<f8", copy=False).tobytes()
    if u_grad is not None:
        u_grad = np.ascontiguousarray(u_grad, dtype=np.float64)
        if u_grad.shape[1] != k:
            raise ValueError(f"u_grad has {u_grad.shape[1]} columns, q_grad has {k}")
        d_u = u_grad.shape[0]
        body += u_grad.astype("<f8", copy=False).tobytes()
    header = struct.pack(HEADER_FORMAT, version, source, n_items, d_u, k)
    return header + signature + body


def deserialize_payload(buf: bytes):
    """Inverse of serialize_payload; returns (version, source, signature, q_grad, u_grad)."""
    if len(buf) < HEADER_BYTES + SIGNATURE_BYTES:
        raise ValueError(f"payload truncated at {len(buf)} bytes")
    version, source, n_items, d_u, k = struct.unpack_from(HEADER_FORMAT, buf)
    expected = payload_num_bytes(n_items, d_u, k)
    if len(buf) != expected:
        raise ValueError(f"payload is {len(buf)} bytes, header implies {expected}")
    signature = buf[HEADER_BYTES : HEADER_BYTES + SIGNATURE_BYTES]
    body = np.frombuffer(buf, dtype="<f8", offset=HEADER_BYTES + SIGNATURE_BYTES)
    q_grad = body[: n_items * k].reshape(n_items, k).astype(np.float64)
    u_grad = None
    if d_u:
        u_grad = body[n_items * k :].reshape(d_u, k).astype(np.float64)
    return version, source, signature, q_grad, u_grad

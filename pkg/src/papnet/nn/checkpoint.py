"""Single-file checkpoints.

Layout::

    b"PAPNETCK"            magic, 8 bytes
    uint32 LE              format version
    uint64 LE              header length in bytes
    header                 UTF-8 JSON: spec, tensor table, metadata
    payload                little-endian float32 tensors, C order, back to back

The tensor table maps each name to its shape and element offset. Parameters
use their network names; optimizer velocity is stored under ``velocity/<name>``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from .network import Network, build_network

MAGIC = b"PAPNETCK"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
VELOCITY = "velocity/"


@dataclass
class Checkpoint:
    network: Network
    metadata: dict = field(default_factory=dict)
    velocity: dict[str, np.ndarray] | None = None

    @property
    def parameters(self) -> dict[str, np.ndarray]:
        return self.network.parameters()


def checkpoint_bytes(net: Network, metadata: dict | None = None, velocity: dict[str, np.ndarray] | None = None) -> bytes:
    tensors = dict(net.parameters())
    if velocity:
        tensors.update({VELOCITY + k: v for k, v in velocity.items()})
    table = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.size
    header = json.dumps(
        {"spec": net.spec, "tensors": table, "metadata": metadata or {}}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def save_checkpoint(path: str | Path, net: Network, metadata: dict | None = None,
                    velocity: dict[str, np.ndarray] | None = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(net, metadata, velocity))
    return path


def _layer_of(name: str) -> str:
    return name.rsplit(".", 1)[0]


def load_checkpoint(path: str | Path, expected_spec: dict | None = None) -> Checkpoint:
    """Read a checkpoint; nothing is returned unless the whole file checks out.

    With ``expected_spec`` the stored tensors must fit that architecture, and
    the network is built from it rather than from the stored spec.
    """
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a papnet checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(blob[_PREFIX.size : start].decode("utf-8"))
        table = header["tensors"]
        spec = header["spec"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header: {exc}") from exc

    payload = np.frombuffer(blob, dtype="<f4", offset=start) if (len(blob) - start) % 4 == 0 else None
    total = sum(int(np.prod(t["shape"], dtype=np.int64)) for t in table)
    if payload is None or payload.size != total:
        raise CheckpointError(f"{path}: payload has {len(blob) - start} bytes, table needs {4 * total}")

    tensors = {}
    for t in table:
        n = int(np.prod(t["shape"], dtype=np.int64))
        tensors[t["name"]] = payload[t["offset"] : t["offset"] + n].reshape(t["shape"]).astype(np.float32)

    net = build_network(expected_spec if expected_spec is not None else spec)
    params = {k: v for k, v in tensors.items() if not k.startswith(VELOCITY)}
    expected = net.parameters()
    for key, cur in expected.items():
        if key not in params:
            raise CheckpointError(f"layer '{_layer_of(key)}': {key} missing from checkpoint")
        if params[key].shape != cur.shape:
            raise CheckpointError(
                f"layer '{_layer_of(key)}': checkpoint shape {params[key].shape} != network shape {cur.shape}"
            )
    extra = sorted(set(params) - set(expected))
    if extra:
        raise CheckpointError(f"layer '{_layer_of(extra[0])}': not present in network spec")
    net.set_parameters(params)
    velocity = {k[len(VELOCITY):]: v for k, v in tensors.items() if k.startswith(VELOCITY)} or None
    return Checkpoint(net, header.get("metadata", {}), velocity)

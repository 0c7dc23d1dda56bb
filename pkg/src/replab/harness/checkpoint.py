"""Binary checkpoints: UTF-8 JSON header plus a raw little-endian payload.

Layout:

    REPLAB-CKPT <format_version> <header_bytes>\\n
    <header JSON, UTF-8>
    <payload: concatenated little-endian IEEE-754 arrays in manifest order>

The header carries the flavor (dynamic | deploy), arbitrary meta (including
the network spec needed to rebuild a dynamic net), and the tensor manifest
(name, shape, dtype, byte offset into the payload). Offsets are contiguous
and non-overlapping; loading validates the whole file before constructing
anything, and a reload reproduces every tensor bitwise.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..builder import Network, NetworkSpec, StageSpec, build_network
from ..deploy import DeployModel, DeployOp

MAGIC = "REPLAB-CKPT"
FORMAT_VERSION = 1

_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


@dataclass
class LoadedCheckpoint:
    flavor: str
    network: Network | None
    deploy: DeployModel | None
    meta: dict
    extra: dict

    @property
    def obj(self):
        return self.network if self.flavor == "dynamic" else self.deploy


def _dtype_tag(arr: np.ndarray) -> str:
    tag = {"float64": "<f8", "float32": "<f4"}.get(arr.dtype.name)
    if tag is None:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    return tag


def spec_to_dict(spec: NetworkSpec) -> dict:
    return dataclasses.asdict(spec)


def spec_from_dict(data: dict) -> NetworkSpec:
    data = dict(data)
    data["stages"] = [StageSpec(**s) for s in data["stages"]]
    return NetworkSpec(**data)


def _write(path, flavor: str, meta: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    manifest = []
    offset = 0
    chunks = []
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape),
                         "dtype": _dtype_tag(arr), "offset": offset})
        offset += len(raw)
        chunks.append(raw)
    header = json.dumps({"flavor": flavor, "meta": meta, "manifest": manifest},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {FORMAT_VERSION} {len(header)}\n".encode("ascii"))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def checkpoint_save(obj, path, extra: dict | None = None, meta: dict | None = None) -> None:
    """Serialize a dynamic Network or a DeployModel (flavor-tagged)."""
    meta = dict(meta or {})
    if isinstance(obj, Network):
        meta["spec"] = spec_to_dict(obj.spec)
        tensors = [(pid, p.data) for pid, p in obj.registry.params.items()]
        tensors += [(bid, b.data) for bid, b in obj.registry.buffers.items()]
        for name, arr in (extra or {}).items():
            tensors.append((f"extra.{name}", np.asarray(arr)))
        _write(path, "dynamic", meta, tensors)
        return
    if isinstance(obj, DeployModel):
        program = []
        tensors = []
        for i, op in enumerate(obj.ops):
            keys = sorted(op.arrays)
            program.append({"kind": op.kind, "source": op.source,
                            "meta": op.meta, "arrays": keys})
            for key in keys:
                tensors.append((f"op{i}.{key}", op.arrays[key]))
        meta["program"] = program
        meta["num_classes"] = obj.num_classes
        meta["flavor_meta"] = obj.flavor_meta
        if extra:
            raise CheckpointError("deploy checkpoints carry no extra tensors")
        _write(path, "deploy", meta, tensors)
        return
    raise CheckpointError(f"cannot checkpoint object of type {type(obj).__name__}")


def _read_tensors(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointError("checkpoint missing header line")
    try:
        magic, version, header_len = raw[:newline].decode("ascii").split()
        header_len = int(header_len)
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"malformed checkpoint header line: {e}") from e
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if int(version) != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} != supported {FORMAT_VERSION}")
    header_start = newline + 1
    header_end = header_start + header_len
    if len(raw) < header_end:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[header_start:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from e
    payload = raw[header_end:]

    tensors: dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in header["manifest"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"unknown manifest dtype {entry['dtype']!r}")
        if entry["offset"] != expected_offset:
            raise CheckpointError(
                f"manifest offsets not contiguous at {entry['name']!r}")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        if entry["offset"] + nbytes > len(payload):
            raise CheckpointError(f"truncated payload at {entry['name']!r}")
        arr = np.frombuffer(payload, dtype=dtype, count=count,
                            offset=entry["offset"]).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr
        expected_offset += nbytes
    if expected_offset != len(payload):
        raise CheckpointError(
            f"manifest/payload length disagreement: manifest ends at "
            f"{expected_offset}, payload has {len(payload)} bytes")
    return header["flavor"], header["meta"], tensors


def checkpoint_load(path) -> LoadedCheckpoint:
    """Validate and restore a checkpoint; no partial object on error.

    Dynamic checkpoints rebuild the network from the embedded spec, so anchor
    references are re-wired to the restored neighbor parameters, not copies.
    """
    flavor, meta, tensors = _read_tensors(path)
    if flavor == "dynamic":
        net = build_network(spec_from_dict(meta["spec"]), seed=0)
        extra = {}
        for name, arr in tensors.items():
            if name in net.registry.params:
                net.registry.params[name].data = arr
            elif name in net.registry.buffers:
                net.registry.buffers[name].data = arr
            elif name.startswith("extra."):
                extra[name[len("extra."):]] = arr
            else:
                raise CheckpointError(f"checkpoint tensor {name!r} not in network")
        missing = [pid for pid in net.registry.params if pid not in tensors]
        missing += [bid for bid in net.registry.buffers if bid not in tensors]
        if missing:
            raise CheckpointError(f"checkpoint missing tensors: {missing[:5]}")
        return LoadedCheckpoint("dynamic", net, None, meta, extra)
    if flavor == "deploy":
        ops = []
        for i, entry in enumerate(meta["program"]):
            arrays = {key: tensors[f"op{i}.{key}"] for key in entry["arrays"]}
            ops.append(DeployOp(entry["kind"], entry["source"], arrays, entry["meta"]))
        model = DeployModel(ops, meta["num_classes"], meta.get("flavor_meta", {}))
        return LoadedCheckpoint("deploy", None, model, meta, {})
    raise CheckpointError(f"unknown checkpoint flavor {flavor!r}")

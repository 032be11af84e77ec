"""Self-describing checkpoint files.

Layout (all text lines end in ``\\n``)::

    CEEMKIT-CKPT
    format_version 1
    header_bytes <n>
    <n bytes of UTF-8 JSON: {"model": <graph config>, "training": {...}|null, "blobs": [names]}>
    then, for every name in header["blobs"], in order:
    BLOB <name> <count>
    <count little-endian float64 values>
    END

Blob names are ``param/<layer>/<name>`` for weights and
``adam_m/...`` / ``adam_v/...`` for optimiser moments. JSON is written with
sorted keys and no floats outside the blobs are needed to rebuild the model,
so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointLengthError, CheckpointMalformedError, CheckpointVersionError
from .graph import KINDS, GraphError, ModelGraph
from .train import AdamState

MAGIC = b"CEEMKIT-CKPT\n"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    graph: ModelGraph
    training: dict | None = None  # epoch, lr, seed, config ...
    adam: AdamState | None = None


def _blob(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return f"BLOB {name} {arr.size}\n".encode() + data


def dumps(ckpt: Checkpoint) -> bytes:
    g = ckpt.graph
    blobs: list[tuple[str, np.ndarray]] = [(f"param/{l}/{n}", a) for l, n, a in g.parameters()]
    if ckpt.adam is not None:
        for key in (f"{l}/{n}" for l, n, _ in g.parameters()):
            if key in ckpt.adam.m:
                blobs.append((f"adam_m/{key}", ckpt.adam.m[key]))
                blobs.append((f"adam_v/{key}", ckpt.adam.v[key]))
    training = dict(ckpt.training) if ckpt.training is not None else None
    if ckpt.adam is not None:
        training = training or {}
        training["adam_t"] = ckpt.adam.t
    header = json.dumps({"model": g.to_config(), "training": training, "blobs": [n for n, _ in blobs]},
                        sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, f"format_version {FORMAT_VERSION}\n".encode(), f"header_bytes {len(header)}\n".encode(),
             header, b"\n"]
    parts += [_blob(n, a) for n, a in blobs]
    parts.append(b"END\n")
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint | ModelGraph, path) -> None:
    """Write atomically (temp file in the target directory, then rename)."""
    if isinstance(ckpt, ModelGraph):
        ckpt = Checkpoint(ckpt)
    data = dumps(ckpt)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def line(self) -> str:
        end = self.data.find(b"\n", self.pos)
        if end < 0:
            raise CheckpointMalformedError("unexpected end of file")
        out = self.data[self.pos:end]
        self.pos = end + 1
        try:
            return out.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointMalformedError("non-text header line") from None

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointMalformedError("unexpected end of file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if not data.startswith(MAGIC):
        raise CheckpointMalformedError("not a ceemkit checkpoint (bad magic)")
    r.pos = len(MAGIC)
    key, _, value = r.line().partition(" ")
    if key != "format_version" or not value.isdigit():
        raise CheckpointMalformedError("missing format_version line")
    if int(value) != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {value} is not supported (expected {FORMAT_VERSION})")
    key, _, value = r.line().partition(" ")
    if key != "header_bytes" or not value.isdigit():
        raise CheckpointMalformedError("missing header_bytes line")
    try:
        header = json.loads(r.take(int(value)).decode("utf-8"))
        model_cfg, training, names = header["model"], header["training"], header["blobs"]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointMalformedError(f"bad header: {e}") from None
    if r.take(1) != b"\n":
        raise CheckpointMalformedError("header not terminated")
    for layer in model_cfg.get("layers", []):
        if layer.get("kind") not in KINDS:
            raise CheckpointVersionError(f"unknown layer kind {layer.get('kind')!r}")
    try:
        graph = ModelGraph.from_config(model_cfg, init=False)
    except GraphError as e:
        raise CheckpointMalformedError(f"bad model config: {e}") from None
    expected = {f"param/{l}/{n}": a.shape for l, n, a in graph.parameters()}
    missing = [n for n in expected if n not in names]
    if missing:
        raise CheckpointMalformedError(f"parameter blobs missing from header: {missing[:3]}")
    arrays: dict[str, np.ndarray] = {}
    for name in names:
        tag, bname, count = (r.line().split(" ") + ["", "", ""])[:3]
        if tag != "BLOB" or bname != name or not count.isdigit():
            raise CheckpointMalformedError(f"expected blob {name!r}")
        count = int(count)
        shape = expected.get(name) or expected.get("param/" + name.split("/", 1)[1])
        if shape is None:
            raise CheckpointMalformedError(f"blob {name!r} matches no parameter")
        if count != int(np.prod(shape)):
            raise CheckpointLengthError(f"blob {name!r} holds {count} values, spec needs {int(np.prod(shape))}")
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if r.line() != "END" or r.pos != len(data):
        raise CheckpointMalformedError("missing END marker or trailing bytes")
    for l, n, _ in list(graph.parameters()):
        graph.set_parameter(l, n, arrays[f"param/{l}/{n}"])
    adam = None
    if any(n.startswith("adam_m/") for n in names):
        adam = AdamState(t=int((training or {}).get("adam_t", 0)))
        for n, a in arrays.items():
            kind, _, key = n.partition("/")
            if kind == "adam_m":
                adam.m[key] = a
            elif kind == "adam_v":
                adam.v[key] = a
    if training is not None:
        training = {k: v for k, v in training.items() if k != "adam_t"}
    return Checkpoint(graph, training, adam)


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointMalformedError(f"{path}: {e.strerror or e}") from None
    return loads(data)

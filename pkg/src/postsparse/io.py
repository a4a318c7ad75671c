"""On-disk formats.

All binary files share one layout: a UTF-8 text header of ``key value`` lines
terminated by a blank line, followed by a little-endian payload.

* ``.ptsm`` model: topology + attrs + parameter shapes, float32 weight blob.
* ``.ptsk`` mask: per-layer element counts, MSB-first packed bits, each layer
  padded to a byte boundary.
* ``.ptsc`` calibration set and ``.ptsd`` dataset: count/shape header,
  float32 blob (datasets append int32 labels or float32 targets).
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

import numpy as np

from .graph import KINDS, PARAM_NAMES, GraphError, LayerNode, ModelGraph
from .tensor import Tensor

MODEL_MAGIC, MASK_MAGIC, CALIB_MAGIC, DATA_MAGIC = "PTSM", "PTSK", "PTSC", "PTSD"
FORMAT_VERSION = 1
F32 = np.dtype("<f4")
I32 = np.dtype("<i4")


class FormatError(ValueError):
    """A file does not follow the expected layout."""


def _write(path, header_lines: list[str], payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header_lines) + "\n\n").encode("utf-8"))
        fh.write(payload)
    os.replace(tmp, path)


def _read(path, magic: str) -> tuple[list[list[str]], bytes]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\n\n")
    if end < 0:
        raise FormatError(f"{path}: header not terminated by a blank line")
    try:
        lines = raw[:end].decode("utf-8").split("\n")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: header is not UTF-8") from exc
    first = lines[0].split()
    if len(first) != 2 or first[0] != magic:
        raise FormatError(f"{path}: bad magic line {lines[0]!r}, expected {magic}")
    if first[1] != str(FORMAT_VERSION):
        raise FormatError(f"{path}: format version {first[1]} unsupported (want {FORMAT_VERSION})")
    return [ln.split() for ln in lines[1:] if ln.strip()], raw[end + 2 :]


def _shape(text: str) -> tuple[int, ...]:
    if text in ("-", ""):
        return ()
    try:
        return tuple(int(d) for d in text.split(","))
    except ValueError as exc:
        raise FormatError(f"bad shape {text!r}") from exc


def _shape_text(shape) -> str:
    return ",".join(str(int(d)) for d in shape) or "-"


def _attr_text(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _attr_value(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _take(payload: bytes, offset: int, count: int, dtype, path) -> np.ndarray:
    nbytes = count * dtype.itemsize
    if offset + nbytes > len(payload):
        raise FormatError(f"{path}: blob length mismatch (truncated payload)")
    return np.frombuffer(payload, dtype=dtype, count=count, offset=offset)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


def save_model(graph: ModelGraph, path) -> None:
    lines = [
        f"{MODEL_MAGIC} {FORMAT_VERSION}",
        f"name {graph.name}",
        f"input_shape {_shape_text(graph.input_shape)}",
        f"entry {graph.entry}",
        f"exit {graph.exit}",
    ]
    blobs = []
    total = 0
    for node in graph.nodes.values():
        parts = ["node", node.id, node.kind, "inputs=" + (",".join(node.inputs) or "-")]
        parts += [f"attr.{k}={_attr_text(v)}" for k, v in sorted(node.attrs.items())]
        for pname in PARAM_NAMES.get(node.kind, ()):
            t = node.params[pname]
            parts.append(f"param.{pname}={_shape_text(t.shape)}")
            blobs.append(np.ascontiguousarray(t.data, dtype=F32).tobytes())
            total += t.size
        lines.append(" ".join(parts))
    lines.append(f"blob {total}")
    _write(path, lines, b"".join(blobs))


def load_model(path) -> ModelGraph:
    rows, payload = _read(path, MODEL_MAGIC)
    meta: dict[str, str] = {}
    nodes: dict[str, LayerNode] = {}
    pending: list[tuple[LayerNode, str, tuple[int, ...]]] = []
    declared = None
    for row in rows:
        key = row[0]
        if key == "node":
            if len(row) < 4:
                raise FormatError(f"{path}: malformed node line {' '.join(row)!r}")
            nid, kind = row[1], row[2]
            if kind not in KINDS:
                raise FormatError(f"{path}: unknown layer kind {kind!r}")
            inputs: list[str] = []
            attrs: dict = {}
            params: list[tuple[str, tuple[int, ...]]] = []
            for tok in row[3:]:
                k, sep, v = tok.partition("=")
                if not sep:
                    raise FormatError(f"{path}: bad token {tok!r}")
                if k == "inputs":
                    inputs = [] if v == "-" else v.split(",")
                elif k.startswith("attr."):
                    attrs[k[5:]] = _attr_value(v)
                elif k.startswith("param."):
                    params.append((k[6:], _shape(v)))
                else:
                    raise FormatError(f"{path}: bad token {tok!r}")
            if [p for p, _ in params] != list(PARAM_NAMES.get(kind, ())):
                raise FormatError(f"{path}: node {nid} has params {params}, kind {kind}")
            node = LayerNode(nid, kind, inputs, {}, attrs)
            if nid in nodes:
                raise FormatError(f"{path}: duplicate node id {nid!r}")
            nodes[nid] = node
            pending += [(node, p, s) for p, s in params]
        elif key == "blob":
            declared = int(row[1])
        elif len(row) == 2:
            meta[key] = row[1]
        else:
            raise FormatError(f"{path}: malformed header line {' '.join(row)!r}")
    for req in ("input_shape", "entry", "exit"):
        if req not in meta:
            raise FormatError(f"{path}: header missing {req!r}")
    needed = sum(int(np.prod(s)) for _, _, s in pending)
    if declared is None or declared != needed:
        raise FormatError(f"{path}: header declares {declared} floats, nodes need {needed}")
    if len(payload) != needed * F32.itemsize:
        raise FormatError(
            f"{path}: blob length mismatch ({len(payload)} bytes, expected {needed * F32.itemsize})"
        )
    offset = 0
    for node, pname, shape in pending:
        n = int(np.prod(shape))
        arr = _take(payload, offset, n, F32, path).astype(np.float64).reshape(shape)
        node.params[pname] = Tensor(arr)
        offset += n * F32.itemsize
    graph = ModelGraph(nodes, meta["entry"], meta["exit"], _shape(meta["input_shape"]),
                       meta.get("name", Path(path).stem))
    try:
        graph.validate()
    except GraphError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return graph


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------


def save_masks(masks: dict[str, np.ndarray], path) -> None:
    lines = [f"{MASK_MAGIC} {FORMAT_VERSION}"]
    chunks = []
    for lid, m in masks.items():
        lines.append(f"layer {lid} {m.size} {_shape_text(m.shape)}")
        chunks.append(np.packbits(np.asarray(m, dtype=bool).ravel(), bitorder="big").tobytes())
    _write(path, lines, b"".join(chunks))


def load_masks(path) -> dict[str, np.ndarray]:
    rows, payload = _read(path, MASK_MAGIC)
    masks = {}
    offset = 0
    for row in rows:
        if row[0] != "layer" or len(row) not in (3, 4):
            raise FormatError(f"{path}: malformed header line {' '.join(row)!r}")
        lid, count = row[1], int(row[2])
        shape = _shape(row[3]) if len(row) == 4 else (count,)
        if int(np.prod(shape)) != count:
            raise FormatError(f"{path}: layer {lid} shape {shape} != count {count}")
        nbytes = (count + 7) // 8
        packed = _take(payload, offset, nbytes, np.dtype(np.uint8), path)
        masks[lid] = np.unpackbits(packed, count=count, bitorder="big").astype(bool).reshape(shape)
        offset += nbytes
    if offset != len(payload):
        raise FormatError(f"{path}: blob length mismatch ({len(payload)} bytes, expected {offset})")
    return masks


# ---------------------------------------------------------------------------
# Calibration sets and datasets
# ---------------------------------------------------------------------------


def save_calibration(x: np.ndarray, path, batch_size: Optional[int] = None) -> None:
    x = np.asarray(x)
    lines = [f"{CALIB_MAGIC} {FORMAT_VERSION}", f"count {len(x)}", f"shape {_shape_text(x.shape[1:])}"]
    if batch_size:
        lines.append(f"batch_size {batch_size}")
    _write(path, lines, np.ascontiguousarray(x, dtype=F32).tobytes())


def load_calibration(path) -> tuple[np.ndarray, Optional[int]]:
    rows, payload = _read(path, CALIB_MAGIC)
    meta = {r[0]: r[1] for r in rows if len(r) == 2}
    try:
        count, shape = int(meta["count"]), _shape(meta["shape"])
    except KeyError as exc:
        raise FormatError(f"{path}: header missing {exc}") from exc
    n = count * int(np.prod(shape))
    if len(payload) != n * F32.itemsize:
        raise FormatError(f"{path}: blob length mismatch")
    x = np.frombuffer(payload, dtype=F32).astype(np.float64).reshape((count, *shape))
    bs = int(meta["batch_size"]) if "batch_size" in meta else None
    return x, bs


def save_dataset(path, task: str, split: str, x: np.ndarray, y: np.ndarray, **meta) -> None:
    lines = [
        f"{DATA_MAGIC} {FORMAT_VERSION}",
        f"task {task}",
        f"split {split}",
        f"count {len(x)}",
        f"x_shape {_shape_text(x.shape[1:])}",
        f"y_shape {_shape_text(y.shape[1:])}",
        f"y_dtype {'int32' if task == 'cls' else 'float32'}",
    ]
    lines += [f"{k} {v}" for k, v in sorted(meta.items())]
    ydt = I32 if task == "cls" else F32
    payload = np.ascontiguousarray(x, dtype=F32).tobytes() + np.ascontiguousarray(y, dtype=ydt).tobytes()
    _write(path, lines, payload)


def load_dataset(path) -> dict:
    rows, payload = _read(path, DATA_MAGIC)
    meta = {r[0]: r[1] for r in rows if len(r) == 2}
    try:
        count = int(meta["count"])
        xs, ys = _shape(meta["x_shape"]), _shape(meta["y_shape"])
        ydt = I32 if meta["y_dtype"] == "int32" else F32
    except KeyError as exc:
        raise FormatError(f"{path}: header missing {exc}") from exc
    nx, ny = count * int(np.prod(xs)), count * int(np.prod(ys))
    if len(payload) != nx * F32.itemsize + ny * ydt.itemsize:
        raise FormatError(f"{path}: blob length mismatch")
    x = np.frombuffer(payload, dtype=F32, count=nx).astype(np.float64).reshape((count, *xs))
    y = np.frombuffer(payload, dtype=ydt, count=ny, offset=nx * F32.itemsize)
    y = y.astype(np.int64 if ydt == I32 else np.float64).reshape((count, *ys))
    out = {k: _attr_value(v) for k, v in meta.items() if k not in ("x_shape", "y_shape", "y_dtype")}
    out.update(x=x, y=y)
    return out


# ---------------------------------------------------------------------------
# Custom allocation plans
# ---------------------------------------------------------------------------


def read_plan(path) -> dict[str, float]:
    """Parse ``<layer_id> <rate>`` lines; ``#`` starts a comment."""
    rates: dict[str, float] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected '<layer_id> <rate>'")
        try:
            rates[parts[0]] = float(parts[1])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad rate {parts[1]!r}") from exc
    return rates


def write_plan(rates: dict[str, float], path, comment: str = "") -> None:
    lines = [f"# {comment}"] if comment else []
    lines += [f"{lid} {rate!r}" for lid, rate in rates.items()]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")

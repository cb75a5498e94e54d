"""Binary model container.

Layout (little endian)::

    b"CPRM"  u32 format_version  u64 header_length  header (UTF-8 JSON)  blob

The header describes the model and lists every array as
``{name, dtype, shape, offset}`` with offsets into the blob. Arrays start on
8-byte boundaries.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .cascade import MODEL_FORMAT_VERSION, SECTION_ORDER, CascadeModel, StageModel
from .features import DescriptorTable
from .forest import Forest, Tree

MAGIC = b"CPRM"
_PREFIX = struct.Struct("<4sIQ")
_TREE_FIELDS = ("feature", "threshold", "right", "value", "count")
_DTYPES = {"i8": "<i8", "f8": "<f8"}


class ModelFormatError(ValueError):
    pass


def _tree_arrays(tree: Tree) -> dict:
    return {f: getattr(tree, f) for f in _TREE_FIELDS}


def _model_arrays(model: CascadeModel):
    arrays = {"canonical_pose": model.canonical_pose, "initial_pose": model.initial_pose,
              "root_offset": model.root_offset}
    stages = []
    for i, st in enumerate(model.stages):
        arrays[f"s{i}.subset"] = st.subset
        arrays[f"s{i}.descriptors"] = st.descriptors.to_rows()
        for t, tree in enumerate(st.forest.trees):
            for f, a in _tree_arrays(tree).items():
                arrays[f"s{i}.t{t}.{f}"] = a
        stages.append({"section": st.section, "beta": st.beta, "n_trees": st.forest.n_trees,
                       "max_depth": st.forest.max_depth, "n_outputs": st.forest.n_outputs})
    header = {"format_version": model.format_version, "skeleton_hash": model.skeleton_hash,
              "objective": model.objective, "stage_counts": list(model.stage_counts),
              "bandwidth": model.bandwidth, "config": model.config, "stages": stages}
    return header, arrays


def to_bytes(model: CascadeModel) -> bytes:
    header, arrays = _model_arrays(model)
    index, chunks, offset = [], [], 0
    for name, a in arrays.items():
        a = np.asarray(a)
        kind = "i8" if np.issubdtype(a.dtype, np.integer) else "f8"
        raw = np.ascontiguousarray(a, dtype=_DTYPES[kind]).tobytes()
        index.append({"name": name, "dtype": kind, "shape": list(a.shape), "offset": offset})
        pad = (-len(raw)) % 8
        chunks.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    header["arrays"] = index
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    text += b" " * ((-(len(text) + _PREFIX.size)) % 8)
    return _PREFIX.pack(MAGIC, MODEL_FORMAT_VERSION, len(text)) + text + b"".join(chunks)


def _parse(blob: bytes):
    if len(blob) < _PREFIX.size:
        raise ModelFormatError("file too short for a model header")
    magic, version, n = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}; not a model file")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version} (expected {MODEL_FORMAT_VERSION})")
    try:
        header = json.loads(blob[_PREFIX.size:_PREFIX.size + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupt model header: {exc}") from None
    base = _PREFIX.size + n
    arrays = {}
    for rec in header["arrays"]:
        dt = np.dtype(_DTYPES[rec["dtype"]])
        count = int(np.prod(rec["shape"], dtype=np.int64))
        start = base + rec["offset"]
        if start + count * dt.itemsize > len(blob):
            raise ModelFormatError(f"array {rec['name']} runs past the end of the file")
        arrays[rec["name"]] = np.frombuffer(blob, dt, count, start).reshape(rec["shape"]).astype(dt.newbyteorder("="))
    return header, arrays


def from_bytes(blob: bytes) -> CascadeModel:
    header, arrays = _parse(blob)
    stages = []
    try:
        for i, rec in enumerate(header["stages"]):
            if rec["section"] not in SECTION_ORDER:
                raise ModelFormatError(f"unknown section tag {rec['section']!r}")
            trees = [Tree(*(arrays[f"s{i}.t{t}.{f}"] for f in _TREE_FIELDS)) for t in range(rec["n_trees"])]
            stages.append(StageModel(rec["section"], arrays[f"s{i}.subset"],
                                     DescriptorTable.from_rows(arrays[f"s{i}.descriptors"]),
                                     Forest(trees, rec["max_depth"], rec["n_outputs"]), rec["beta"]))
        return CascadeModel(header["skeleton_hash"], header["objective"], arrays["canonical_pose"],
                            arrays["initial_pose"], arrays["root_offset"], tuple(header["stage_counts"]),
                            stages, header["bandwidth"], header["config"], header["format_version"])
    except KeyError as exc:
        raise ModelFormatError(f"model file lacks {exc}") from None


def save_model(model: CascadeModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load_model(path) -> CascadeModel:
    return from_bytes(Path(path).read_bytes())


def export_json(model: CascadeModel) -> dict:
    """Plain JSON view of a model (debug dump; not loadable)."""
    header, arrays = _model_arrays(model)
    header["arrays"] = {k: np.asarray(v).tolist() for k, v in arrays.items()}
    return header

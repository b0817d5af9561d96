"""Flat binary tensor files and checkpoint directories.

File layout (all integers little-endian):

    bytes 0..3   magic ``DMWA``
    bytes 4..7   format version (u32), currently 1
    bytes 8..11  rank (u32)
    then         one u32 extent per axis
    then         float32 values, C order

A checkpoint is a directory of one ``.dmwa`` file per named tensor plus a
``manifest`` text file listing tensor names, shapes and config key/values.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError, UnsupportedVersionError

MAGIC = b"DMWA"
VERSION = 1
_MAX_RANK = 16


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError(f"bad magic in {path}: expected {MAGIC!r}", offset=0)
    if len(blob) < 8:
        raise FormatError(f"truncated header in {path}", offset=len(blob))
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version} in {path}", offset=4)
    (rank,) = struct.unpack_from("<I", blob, 8)
    if rank > _MAX_RANK:
        raise FormatError(f"implausible rank {rank} in {path}", offset=8)
    header_end = 12 + 4 * rank
    if len(blob) < header_end:
        raise FormatError(f"truncated extents in {path}", offset=len(blob))
    extents = struct.unpack_from(f"<{rank}I", blob, 12)
    count = int(np.prod(extents)) if rank else 1
    expected = header_end + 4 * count
    if len(blob) != expected:
        raise FormatError(
            f"payload size mismatch in {path}: expected {expected} bytes, found {len(blob)}",
            offset=min(len(blob), expected),
        )
    values = np.frombuffer(blob, dtype="<f4", offset=header_end, count=count)
    return values.reshape(extents).copy()


def save_checkpoint(directory: str | Path, tensors: Mapping[str, np.ndarray], config: Mapping[str, str]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["[config]"]
    for key in sorted(config):
        lines.append(f"{key} = {config[key]}")
    lines.append("[tensors]")
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        fname = name.replace("/", ".") + ".dmwa"
        write_tensor(directory / fname, arr)
        shape = "x".join(str(e) for e in arr.shape)
        lines.append(f"{name} {shape} {fname}")
    (directory / "manifest").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    directory = Path(directory)
    manifest = directory / "manifest"
    if not manifest.is_file():
        raise FormatError(f"missing manifest in {directory}")
    config: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    section = None
    for raw in manifest.read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line in ("[config]", "[tensors]"):
            section = line
            continue
        if section == "[config]":
            key, _, value = line.partition(" = ")
            config[key] = value
        elif section == "[tensors]":
            name, shape_s, fname = line.split(" ")
            arr = read_tensor(directory / fname)
            declared = tuple(int(e) for e in shape_s.split("x") if e)
            if arr.shape != declared:
                raise FormatError(f"manifest shape {declared} != stored shape {arr.shape} for {name!r}")
            tensors[name] = arr
        else:
            raise FormatError(f"manifest line outside any section: {line!r}")
    return tensors, config

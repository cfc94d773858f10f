"""Binary container shared by model and dataset files.

Layout::

    magic        8 bytes   b"GFCSMODL" or b"GFCSDATA"
    header_size  4 bytes   unsigned little-endian
    header       header_size bytes of UTF-8 JSON (an object with a "version")
    payload      raw little-endian array blocks, in the order the header lists

Files whose name ends in ``.gz``, ``.bz2`` or ``.xz`` are transparently
(de)compressed.
"""
from __future__ import annotations

import bz2
import gzip
import json
import lzma
import struct
import zlib
from pathlib import Path
from typing import IO, Any, Callable, Dict, Sequence, Tuple, Union

import numpy as np

from .errors import FormatError, UnsupportedVersionError

PathLike = Union[str, Path]

_HEADER_SIZE = struct.Struct("<I")


def _opener(filename: Path) -> Callable[[Path, str], IO[bytes]]:
    if filename.suffix in {".gz", ".gzip"}:
        # fixed mtime keeps compressed output byte-identical across runs
        return lambda fname, mode: gzip.GzipFile(fname, mode, mtime=0)
    if filename.suffix in {".bz2", ".bzip2"}:
        return lambda fname, mode: bz2.open(fname, mode)  # type: ignore[return-value]
    if filename.suffix == ".xz":
        return lambda fname, mode: lzma.open(fname, mode)  # type: ignore[return-value]
    return lambda fname, mode: open(fname, mode)  # type: ignore[return-value]


def write_container(
    filename: PathLike,
    magic: bytes,
    header: Dict[str, Any],
    blocks: Sequence[np.ndarray],
) -> None:
    filename = Path(filename)
    encoded = json.dumps(header, sort_keys=True).encode("utf8")
    with _opener(filename)(filename, "wb") as f:
        f.write(magic)
        f.write(_HEADER_SIZE.pack(len(encoded)))
        f.write(encoded)
        for block in blocks:
            f.write(np.ascontiguousarray(block).tobytes())


class ContainerReader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def read(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(
                f"Unexpected end of file while reading {what}:"
                f" needed {size} bytes, {len(self.data) - self.offset} left",
                self.offset,
            )
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def expect_magic(self, magic: bytes) -> None:
        found = self.read(len(magic), "magic")
        if found != magic:
            raise FormatError(f"Bad magic: {found!r}, expected {magic!r}", 0)

    def read_header(self, supported_version: int) -> Dict[str, Any]:
        (size,) = _HEADER_SIZE.unpack(self.read(_HEADER_SIZE.size, "header size"))
        start = self.offset
        raw = self.read(size, "header")
        try:
            header = json.loads(raw.decode("utf8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"Malformed header: {e}", start) from e
        if not isinstance(header, dict):
            raise FormatError("Malformed header: expected a JSON object", start)
        version = header.get("version")
        if version != supported_version:
            raise UnsupportedVersionError(
                f"Unsupported format version: {version!r},"
                f" expected {supported_version!r}",
                start,
            )
        return header

    def read_array(self, dtype: str, shape: Tuple[int, ...], what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        count = int(np.prod(shape)) if shape else 1
        raw = self.read(count * itemsize, what)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    def expect_end(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(
                f"Unexpected trailing data: {len(self.data) - self.offset} bytes",
                self.offset,
            )


def read_container(filename: PathLike, magic: bytes) -> ContainerReader:
    filename = Path(filename)
    with _opener(filename)(filename, "rb") as f:
        try:
            data = f.read()
        except (EOFError, OSError, lzma.LZMAError, zlib.error) as e:
            raise FormatError(f"Corrupt compressed file {filename}: {e}", 0) from e
    reader = ContainerReader(data)
    reader.expect_magic(magic)
    return reader


__all__ = ["ContainerReader", "read_container", "write_container"]

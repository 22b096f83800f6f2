"""Little-endian binary block helpers used by the artifact file formats."""
import struct

import numpy as np

from .errors import FormatError


class Reader:
    def __init__(self, buf: bytes, name: str = "<buffer>"):
        self.buf = memoryview(buf)
        self.pos = 0
        self.name = name

    def _take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.name}: truncated at byte {self.pos} (need {n} more bytes)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def magic(self, expected: bytes) -> None:
        got = bytes(self._take(len(expected)))
        if got != expected:
            raise FormatError(f"{self.name}: bad magic {got!r} at byte {self.pos - len(expected)}, expected {expected!r}")

    def i32(self) -> int:
        return struct.unpack("<i", self._take(4))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self._take(8))[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        if count < 0:
            raise FormatError(f"{self.name}: negative element count {count} at byte {self.pos}")
        dt = np.dtype(dtype).newbyteorder("<")
        raw = self._take(dt.itemsize * count)
        return np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="))

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.name}: {len(self.buf) - self.pos} trailing bytes after byte {self.pos}")


def i32(*values: int) -> bytes:
    return struct.pack(f"<{len(values)}i", *values)


def i64(*values: int) -> bytes:
    return struct.pack(f"<{len(values)}q", *values)


def arr(a, dtype: str) -> bytes:
    return np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


def read_file(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def write_file(path, payload: bytes) -> None:
    try:
        with open(path, "wb") as f:
            f.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc

#!/usr/bin/env python3
"""
Time-tag streams and their on-disk formats.

.qtags layout (all little-endian):

    magic          8 bytes  b"QTAGS\\0\\0\\1"
    resolution_ps  uint64
    channel_count  uint8
    label_length   uint16, followed by that many bytes of UTF-8 station label
    config_digest  32 bytes (SHA-256 of the producing config, zeros for external data)
    records        9 bytes each: uint8 channel, uint64 picosecond timestamp

Timestamps count from an arbitrary per-stream epoch. Aligning two stations is
the correlation module's job, never the reader's.

Records store uint64 timestamps, but streams are held as int64 so that
offsets t_b - t_a stay signed: readers reject timestamps at or above 2**63 ps
(about 106 days from the epoch).
"""

import csv
import io
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from config import READ_CHUNK_RECORDS, TAG_MAGIC

logger = logging.getLogger(__name__)

RECORD_DTYPE = np.dtype([("channel", "<u1"), ("t_ps", "<u8")])
RECORD_SIZE = RECORD_DTYPE.itemsize  # 9
_INT64_MAX = np.iinfo(np.int64).max
ZERO_DIGEST = bytes(32)


class TagFileError(ValueError):
    """Base class for malformed tag files; carries the byte offset or line number."""

    def __init__(self, message: str, offset: Optional[int] = None, line: Optional[int] = None):
        where = []
        if offset is not None:
            where.append(f"byte offset {offset}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.line = line


class BadMagicError(TagFileError):
    pass


class TruncatedRecordError(TagFileError):
    pass


class MonotonicityError(TagFileError):
    def __init__(self, message: str, record_index: Optional[int] = None, offset: Optional[int] = None,
                 line: Optional[int] = None):
        super().__init__(message, offset=offset, line=line)
        self.record_index = record_index


class CsvParseError(TagFileError):
    pass


class TimeTag(NamedTuple):
    channel: int
    t_ps: int


@dataclass(frozen=True)
class TagStream:
    """Tags of one station: parallel channel / picosecond arrays plus metadata.

    Times are int64 picoseconds, so a stream covers at most 2**63 ps from its epoch.
    """
    channels: np.ndarray
    times: np.ndarray
    resolution_ps: int = 1
    station: str = ""
    config_digest: bytes = ZERO_DIGEST
    channel_count: int = 2

    def __post_init__(self):
        channels = np.ascontiguousarray(self.channels, dtype=np.uint8)
        times = np.ascontiguousarray(self.times, dtype=np.int64)
        if channels.shape != times.shape or channels.ndim != 1:
            raise ValueError("channels and times must be 1-D arrays of equal length")
        if self.resolution_ps < 1:
            raise ValueError(f"resolution_ps must be >= 1, got {self.resolution_ps}")
        if len(self.config_digest) != 32:
            raise ValueError("config_digest must be 32 bytes")
        channels.setflags(write=False)
        times.setflags(write=False)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "times", times)

    def __len__(self) -> int:
        return int(self.times.shape[0])

    def tags(self) -> Iterator[TimeTag]:
        for channel, t in zip(self.channels.tolist(), self.times.tolist()):
            yield TimeTag(channel, t)

    def first_unsorted_index(self) -> Optional[int]:
        bad = np.flatnonzero(np.diff(self.times) < 0)
        return int(bad[0]) + 1 if bad.size else None

    def is_sorted(self) -> bool:
        return self.first_unsorted_index() is None

    def require_sorted(self):
        index = self.first_unsorted_index()
        if index is not None:
            raise MonotonicityError(f"{self.station or 'stream'} is not sorted at record {index}",
                                    record_index=index)

    @property
    def span_ps(self) -> int:
        return int(self.times[-1] - self.times[0]) if len(self) else 0

    def window(self, start_ps: int, stop_ps: int) -> "TagStream":
        """Tags with start_ps <= t < stop_ps (stream must be sorted)."""
        lo, hi = np.searchsorted(self.times, [start_ps, stop_ps], side="left")
        return TagStream(self.channels[lo:hi], self.times[lo:hi], self.resolution_ps, self.station,
                         self.config_digest, self.channel_count)

    @classmethod
    def from_tags(cls, tags: Sequence[Tuple[int, int]], **meta) -> "TagStream":
        if len(tags) == 0:
            return cls(np.zeros(0, np.uint8), np.zeros(0, np.int64), **meta)
        arr = np.asarray(tags, dtype=np.int64)
        return cls(arr[:, 0].astype(np.uint8), arr[:, 1], **meta)


# --- Binary format ---

def _header_bytes(stream: TagStream) -> bytes:
    label = stream.station.encode("utf-8")
    if len(label) > 0xFFFF:
        raise ValueError("station label is too long")
    return (TAG_MAGIC
            + struct.pack("<QBH", stream.resolution_ps, stream.channel_count, len(label))
            + label
            + stream.config_digest)


def _open_for(destination, mode: str):
    if hasattr(destination, "write" if "w" in mode else "read"):
        return destination, False
    return open(destination, mode), True


def write_tags(stream: TagStream, destination) -> int:
    """Write a sorted stream to a path or binary file object; returns the byte count."""
    stream.require_sorted()
    if len(stream) and stream.times[0] < 0:
        raise ValueError("timestamps must be non-negative to be stored as unsigned picoseconds")
    f, owned = _open_for(destination, "wb")
    try:
        header = _header_bytes(stream)
        f.write(header)
        written = len(header)
        for lo in range(0, len(stream), READ_CHUNK_RECORDS):
            hi = min(lo + READ_CHUNK_RECORDS, len(stream))
            records = np.empty(hi - lo, dtype=RECORD_DTYPE)
            records["channel"] = stream.channels[lo:hi]
            records["t_ps"] = stream.times[lo:hi]
            f.write(records.tobytes())
            written += records.nbytes
        return written
    except OSError as e:
        raise TagFileError(f"cannot write tags: {e}") from e
    finally:
        if owned:
            f.close()


@dataclass(frozen=True)
class TagFileHeader:
    resolution_ps: int
    channel_count: int
    station: str
    config_digest: bytes
    size: int


def _read_exact(f, n: int, offset: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedRecordError(f"file ends inside the {what}", offset=offset + len(data))
    return data


def read_header(f) -> TagFileHeader:
    magic = f.read(len(TAG_MAGIC))
    if magic != TAG_MAGIC:
        raise BadMagicError(f"not a .qtags file (magic {magic!r})", offset=0)
    offset = len(TAG_MAGIC)
    resolution, channel_count, label_len = struct.unpack("<QBH", _read_exact(f, 11, offset, "header"))
    offset += 11
    if resolution < 1:
        raise TagFileError("resolution_ps must be >= 1", offset=len(TAG_MAGIC))
    try:
        label = _read_exact(f, label_len, offset, "station label").decode("utf-8")
    except UnicodeDecodeError as e:
        raise TagFileError(f"station label is not UTF-8: {e}", offset=offset) from e
    offset += label_len
    digest = _read_exact(f, 32, offset, "config digest")
    offset += 32
    return TagFileHeader(resolution, channel_count, label, digest, offset)


class TagFileReader:
    """Streaming reader: yields validated (channels, times) chunks of bounded size."""

    def __init__(self, source, chunk_records: int = READ_CHUNK_RECORDS):
        self.source = source
        self.chunk_records = chunk_records
        self._f = None
        self._owned = False
        self.header: Optional[TagFileHeader] = None

    def __enter__(self):
        self._f, self._owned = _open_for(self.source, "rb")
        self.header = read_header(self._f)
        return self

    def __exit__(self, *exc):
        if self._owned and self._f is not None:
            self._f.close()
        self._f = None

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        record_index = 0
        last_t = -1
        offset = self.header.size
        while True:
            data = self._f.read(self.chunk_records * RECORD_SIZE)
            if not data:
                return
            full, partial = divmod(len(data), RECORD_SIZE)
            if partial:
                raise TruncatedRecordError(f"truncated record {record_index + full}",
                                           offset=offset + full * RECORD_SIZE)
            records = np.frombuffer(data, dtype=RECORD_DTYPE)
            raw_times = records["t_ps"]
            if raw_times.size and raw_times.max() > _INT64_MAX:
                bad = int(np.flatnonzero(raw_times > _INT64_MAX)[0])
                raise TagFileError(f"timestamp of record {record_index + bad} exceeds 2**63 ps",
                                   offset=offset + bad * RECORD_SIZE)
            times = raw_times.astype(np.int64)
            step = np.diff(times, prepend=last_t)
            if step.size and step.min() < 0:
                bad = int(np.flatnonzero(step < 0)[0])
                raise MonotonicityError(f"timestamp decreases at record {record_index + bad}",
                                        record_index=record_index + bad,
                                        offset=offset + bad * RECORD_SIZE)
            channels = records["channel"].copy()
            if channels.size and channels.max() >= self.header.channel_count:
                bad = int(np.flatnonzero(channels >= self.header.channel_count)[0])
                raise TagFileError(f"channel {channels[bad]} of record {record_index + bad} exceeds "
                                   f"channel_count {self.header.channel_count}",
                                   offset=offset + bad * RECORD_SIZE)
            last_t = int(times[-1])
            record_index += full
            offset += len(data)
            yield channels, times


def iter_tag_chunks(source, chunk_records: int = READ_CHUNK_RECORDS) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    with TagFileReader(source, chunk_records) as reader:
        yield from reader


def read_tags(source, chunk_records: int = READ_CHUNK_RECORDS) -> TagStream:
    with TagFileReader(source, chunk_records) as reader:
        chunks = list(reader)
        header = reader.header
    channels = np.concatenate([c for c, _ in chunks]) if chunks else np.zeros(0, np.uint8)
    times = np.concatenate([t for _, t in chunks]) if chunks else np.zeros(0, np.int64)
    logger.info("Read %d tags for station %r", times.size, header.station)
    return TagStream(channels, times, header.resolution_ps, header.station, header.config_digest,
                     header.channel_count)


# --- CSV ingest ---

DEFAULT_COLUMNS = {"channel": 0, "t_ps": 1}


def _resolve_columns(column_map: Dict[str, Any], header: Optional[List[str]]) -> Tuple[int, int]:
    resolved = []
    for name in ("channel", "t_ps"):
        col = column_map.get(name, DEFAULT_COLUMNS[name])
        if isinstance(col, str):
            if header is None or col not in header:
                raise CsvParseError(f"column {col!r} not found in CSV header", line=1)
            col = header.index(col)
        resolved.append(int(col))
    return resolved[0], resolved[1]


def _header_names(column_map: Dict[str, Any]) -> List[str]:
    """Names a header row must carry: the configured name of each column, or its default name."""
    names = []
    for name in ("channel", "t_ps"):
        col = column_map.get(name, DEFAULT_COLUMNS[name])
        names.append(col if isinstance(col, str) else name)
    return names


def read_tags_csv(source, column_map: Optional[Dict[str, Any]] = None, resolution_ps: int = 1,
                  station: str = "", channel_count: int = 2) -> TagStream:
    """Parse `channel,t_ps` rows with the same checks as the binary reader.

    The first row is a header only when it names the configured columns (or
    `channel` and `t_ps`); otherwise it is parsed as data.
    """
    column_map = column_map or DEFAULT_COLUMNS
    if hasattr(source, "read"):
        text = source.read()
    else:
        text = Path(source).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    channels: List[int] = []
    times: List[int] = []
    header = None
    ch_col = t_col = None
    last_t = -1
    for lineno, row in enumerate(reader, 1):
        if not row or all(not cell.strip() for cell in row):
            continue
        cells = [cell.strip() for cell in row]
        if ch_col is None and header is None and all(name in cells for name in _header_names(column_map)):
            header = cells
            continue
        if ch_col is None:
            ch_col, t_col = _resolve_columns(column_map, header)
        try:
            channel = int(cells[ch_col])
            t = int(cells[t_col])
        except (ValueError, IndexError):
            raise CsvParseError(f"cannot parse row {row!r}", line=lineno) from None
        if not 0 <= channel < channel_count:
            raise CsvParseError(f"channel {channel} outside 0..{channel_count - 1}", line=lineno)
        if t < 0 or t > _INT64_MAX:
            raise CsvParseError(f"timestamp {t} outside the representable range", line=lineno)
        if t < last_t:
            raise MonotonicityError(f"timestamp decreases ({t} < {last_t})", record_index=len(times),
                                    line=lineno)
        last_t = t
        channels.append(channel)
        times.append(t)
    return TagStream(np.array(channels, dtype=np.uint8), np.array(times, dtype=np.int64), resolution_ps,
                     station, ZERO_DIGEST, channel_count)


def write_tags_csv(stream: TagStream, destination, header: bool = True) -> None:
    stream.require_sorted()
    if hasattr(destination, "write"):
        f, owned = destination, False
    else:
        f, owned = open(destination, "w", newline="", encoding="utf-8"), True
    try:
        writer = csv.writer(f, lineterminator="\n")
        if header:
            writer.writerow(["channel", "t_ps"])
        writer.writerows(zip(stream.channels.tolist(), stream.times.tolist()))
    finally:
        if owned:
            f.close()


# --- Reports and tables ---

def _format_number(value: float) -> str:
    if not math.isfinite(value):
        return "null"
    text = format(value, ".17g")
    if "e" not in text and "." not in text and "n" not in text:
        text += ".0"
    return text


def _encode(obj: Any, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    close = " " * (indent * level)
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _format_number(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, (bytes, bytearray)):
        return json.dumps(bytes(obj).hex())
    if hasattr(obj, "to_dict"):
        return _encode(obj.to_dict(), indent, level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k), ensure_ascii=False)}: {_encode(obj[k], indent, level + 1)}"
                 for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + close + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        if not seq:
            return "[]"
        return "[\n" + ",\n".join(f"{pad}{_encode(v, indent, level + 1)}" for v in seq) + "\n" + close + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__} to a report")


def dumps_report(report: Any, indent: int = 2) -> str:
    """Stable-key-order JSON with 17 significant digits; non-finite numbers become null."""
    return _encode(report, indent, 0) + "\n"


def write_report(report: Any, destination) -> None:
    text = dumps_report(report)
    if hasattr(destination, "write"):
        destination.write(text)
        return
    Path(destination).write_text(text, encoding="utf-8")


def read_report(source) -> Dict[str, Any]:
    if hasattr(source, "read"):
        return json.load(source)
    with open(source, "r", encoding="utf-8") as f:
        return json.load(f)


def write_table_csv(destination, header: Sequence[str], rows) -> None:
    """Plain CSV table for external plotting of the figure analogues."""
    with open(destination, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_number(v) if isinstance(v, float) else v for v in row])

"""Event stream ingestion, fixed-interval slicing and dense encodings.

Events are kept as a structured numpy array with fields ``x, y, t, p`` so that
slices and encodings stay vectorised. ``Event`` is the scalar record type used
when individual events are inspected.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import IO, Iterable, List, NamedTuple, Union

import numpy as np

EVENT_DTYPE = np.dtype([("x", np.int64), ("y", np.int64), ("t", np.int64), ("p", np.int8)])

ENCODING_TAGS = {"frame": 0, "voxel": 1}
_TAG_NAMES = {v: k for k, v in ENCODING_TAGS.items()}

DEFAULT_INTERVAL_US = 10_000


class EventParseError(ValueError):
    """Malformed line in an event CSV stream."""

    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class EventBoundsError(EventParseError):
    """Event coordinate outside the sensor."""


class EventOrderError(ValueError):
    """Events are not sorted by timestamp."""


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


def empty_events() -> np.ndarray:
    return np.zeros(0, dtype=EVENT_DTYPE)


def events_from_records(records: Iterable[tuple]) -> np.ndarray:
    """Pack ``(x, y, t, p)`` tuples into the structured event array."""
    return np.array([tuple(r) for r in records], dtype=EVENT_DTYPE)


def as_events(arr: np.ndarray) -> List[Event]:
    return [Event(int(e["x"]), int(e["y"]), int(e["t"]), int(e["p"])) for e in arr]


def parse_events(source: Union[str, bytes, IO], width: int, height: int) -> np.ndarray:
    """Parse ``x,y,t,p`` lines into a structured event array, in file order.

    Args:
        source: text/bytes content or a readable (text or binary) stream.
        width: sensor width; every ``x`` must be below it.
        height: sensor height; every ``y`` must be below it.

    Raises:
        EventParseError: malformed line or polarity outside {-1, 1}.
        EventBoundsError: coordinate outside the sensor.
    """
    if width <= 0 or height <= 0:
        raise ValueError("sensor width and height must be positive")
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    if isinstance(source, str):
        source = io.StringIO(source)

    records = []
    for lineno, raw in enumerate(source, start=1):
        line = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise EventParseError(lineno, f"expected 4 fields, got {len(parts)}")
        try:
            x, y, t, p = (int(v) for v in parts)
        except ValueError:
            raise EventParseError(lineno, f"non-integer field in {line!r}") from None
        if p not in (-1, 1):
            raise EventParseError(lineno, f"polarity must be -1 or 1, got {p}")
        if t < 0:
            raise EventParseError(lineno, f"negative timestamp {t}")
        if not (0 <= x < width and 0 <= y < height):
            raise EventBoundsError(lineno, f"({x}, {y}) outside {width}x{height} sensor")
        records.append((x, y, t, p))
    if not records:
        return empty_events()
    return np.array(records, dtype=EVENT_DTYPE)


def format_events(events: np.ndarray) -> str:
    """Inverse of :func:`parse_events`."""
    return "".join(f"{e['x']},{e['y']},{e['t']},{e['p']}\n" for e in events)


@dataclass(frozen=True)
class EventSlice:
    events: np.ndarray
    t_start: int
    t_end: int

    @property
    def interval(self) -> int:
        return self.t_end - self.t_start

    def __len__(self) -> int:
        return len(self.events)


def slice_stream(events: np.ndarray, interval: int = DEFAULT_INTERVAL_US) -> List[EventSlice]:
    """Cut a time-sorted stream into windows ``[i*interval, (i+1)*interval)``.

    Every window from 0 up to the one holding the last event is returned, so
    empty windows in the middle of the stream are kept.
    """
    if interval <= 0:
        raise ValueError("interval must be positive")
    if len(events) == 0:
        return []
    t = events["t"]
    if np.any(np.diff(t) < 0):
        first = int(np.argmax(np.diff(t) < 0)) + 1
        raise EventOrderError(f"event {first} has timestamp {t[first]} < {t[first - 1]}")
    n_slices = int(t[-1] // interval) + 1
    cuts = np.searchsorted(t, np.arange(1, n_slices) * interval, side="left")
    chunks = np.split(events, cuts)
    return [EventSlice(chunk, i * interval, (i + 1) * interval) for i, chunk in enumerate(chunks)]


@dataclass
class EventTensor:
    """Channel-major dense encoding of one slice.

    ``frame``: channel 0 counts ``p=+1``, channel 1 counts ``p=-1``.
    ``voxel``: channel ``pol * bins + b`` counts polarity ``pol`` in time bin ``b``.
    """

    data: np.ndarray
    encoding: str = "frame"

    @property
    def shape(self):
        return self.data.shape

    def to_bytes(self) -> bytes:
        c, h, w = self.data.shape
        header = struct.pack("<4i", c, h, w, ENCODING_TAGS[self.encoding])
        return header + np.ascontiguousarray(self.data, dtype="<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "EventTensor":
        c, h, w, tag = struct.unpack_from("<4i", buf)
        if tag not in _TAG_NAMES:
            raise ValueError(f"unknown encoding tag {tag}")
        data = np.frombuffer(buf, dtype="<f4", offset=16)
        if data.size != c * h * w:
            raise ValueError(f"payload holds {data.size} values, header says {c}x{h}x{w}")
        return cls(data.reshape(c, h, w).astype(np.float32), _TAG_NAMES[tag])


def _check_bounds(events: np.ndarray, height: int, width: int) -> None:
    if len(events) and (
        events["x"].min() < 0 or events["y"].min() < 0 or events["x"].max() >= width or events["y"].max() >= height
    ):
        raise ValueError(f"event outside {width}x{height} sensor")


def _accumulate(sl: EventSlice, height: int, width: int, bins: int) -> np.ndarray:
    ev = sl.events
    _check_bounds(ev, height, width)
    data = np.zeros((2 * bins, height, width), dtype=np.float32)
    if len(ev):
        span = max(sl.interval, 1)
        b = ((ev["t"] - sl.t_start) * bins) // span
        b = np.clip(b, 0, bins - 1)
        pol = (ev["p"] < 0).astype(np.int64)
        np.add.at(data, (pol * bins + b, ev["y"], ev["x"]), 1.0)
    return data


def encode_frame(sl: EventSlice, height: int, width: int) -> EventTensor:
    """Per-pixel, per-polarity event counts."""
    return EventTensor(_accumulate(sl, height, width, 1), "frame")


def encode_voxel(sl: EventSlice, height: int, width: int, bins: int) -> EventTensor:
    """Counts split over ``bins`` equal sub-windows of the slice, per polarity."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    return EventTensor(_accumulate(sl, height, width, bins), "voxel")

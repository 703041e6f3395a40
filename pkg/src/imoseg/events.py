"""Event streams: temporal slicing, projection and bilinear event volumes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

EVENT_DTYPE = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])


class EventError(ValueError):
    pass


class EventOrderError(EventError):
    pass


class EventBoundsError(EventError):
    pass


class Event(NamedTuple):
    t: float
    x: int
    y: int
    p: int


def as_events(events) -> np.ndarray:
    """Coerce a list of ``Event``/tuples or a structured array to ``EVENT_DTYPE``."""
    if isinstance(events, np.ndarray) and events.dtype == EVENT_DTYPE:
        return events
    if isinstance(events, np.ndarray) and events.dtype.names:
        out = np.empty(events.shape[0], dtype=EVENT_DTYPE)
        for name in EVENT_DTYPE.names:
            out[name] = events[name]
        return out
    return np.array([tuple(e) for e in events], dtype=EVENT_DTYPE)


def make_events(t, x, y, p) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    out = np.empty(t.shape[0], dtype=EVENT_DTYPE)
    out["t"], out["x"], out["y"], out["p"] = t, x, y, p
    return out


@dataclass(frozen=True, eq=False)
class EventSlice:
    events: np.ndarray
    t_start: float
    t_end: float

    def __post_init__(self):
        if not self.t_end > self.t_start:
            raise EventError(f"empty time window [{self.t_start}, {self.t_end})")
        ev = as_events(self.events)
        if ev.size and (ev["t"].min() < self.t_start or ev["t"].max() >= self.t_end):
            raise EventError("events fall outside the slice window")
        object.__setattr__(self, "events", ev)

    def __len__(self):
        return self.events.size

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start


@dataclass(frozen=True, eq=False)
class EventVolume:
    bins: np.ndarray
    t_start: float
    t_end: float


def check_ordered(events: np.ndarray):
    if events.size > 1 and np.any(np.diff(events["t"]) < 0):
        raise EventOrderError("event timestamps must be non-decreasing")


def slice_stream(events, period: float = 0.025, t0: float | None = None) -> list[EventSlice]:
    """Cut an ordered stream into contiguous half-open windows of ``period``.

    Windows start at ``t0`` (the first timestamp by default) and run up to the
    one containing the last event; empty windows in between are kept so that
    slice ``k`` always covers ``[t0 + k*period, t0 + (k+1)*period)``.
    """
    ev = as_events(events)
    if not period > 0:
        raise EventError(f"period must be positive, got {period}")
    check_ordered(ev)
    if ev.size == 0:
        return []
    if t0 is None:
        t0 = float(ev["t"][0])
    if ev["t"][0] < t0:
        raise EventError(f"events precede the stream origin {t0}")
    k = np.floor((ev["t"] - t0) / period).astype(np.int64)
    # guard the float division at window edges
    edges_lo = t0 + k * period
    k[ev["t"] < edges_lo] -= 1
    k[ev["t"] >= t0 + (k + 1) * period] += 1
    n = int(k[-1]) + 1
    bounds = np.searchsorted(k, np.arange(n + 1))
    return [
        EventSlice(ev[bounds[i] : bounds[i + 1]], t0 + i * period, t0 + (i + 1) * period)
        for i in range(n)
    ]


def _kernel_corners(coord):
    lo = np.floor(coord).astype(np.int64)
    frac = coord - lo
    return ((lo, 1.0 - frac), (lo + 1, frac))


def build_volume(sl: EventSlice, bins: int = 15, width: int = 160, height: int = 120) -> EventVolume:
    """Signed event volume with a bilinear kernel in x, y and normalised time.

    Timestamps map affinely from ``[t_start, t_end)`` onto ``[0, bins - 1]``.
    """
    if bins < 1:
        raise EventError(f"bins must be >= 1, got {bins}")
    ev = sl.events
    volume = np.zeros(bins * height * width)
    if ev.size:
        x = ev["x"].astype(np.float64)
        y = ev["y"].astype(np.float64)
        if np.any(x < 0) or np.any(x > width - 1) or np.any(y < 0) or np.any(y > height - 1):
            raise EventBoundsError(f"event outside the {width}x{height} sensor")
        p = ev["p"].astype(np.float64)
        if bins == 1:
            ts = np.zeros_like(x)
        else:
            ts = (ev["t"] - sl.t_start) * (bins - 1) / (sl.t_end - sl.t_start)
        for bi, wt in _kernel_corners(ts):
            for yi, wy in _kernel_corners(y):
                for xi, wx in _kernel_corners(x):
                    w = p * wt * wy * wx
                    ok = (bi < bins) & (yi < height) & (xi < width) & (w != 0)
                    flat = (bi[ok] * height + yi[ok]) * width + xi[ok]
                    volume += np.bincount(flat, weights=w[ok], minlength=volume.size)
    return EventVolume(volume.reshape(bins, height, width), sl.t_start, sl.t_end)


def project_events(sl: EventSlice, width: int, height: int) -> np.ndarray:
    """Boolean raster marking every pixel that received at least one event."""
    out = np.zeros((height, width), dtype=bool)
    ev = sl.events
    if ev.size:
        out[ev["y"].astype(np.intp), ev["x"].astype(np.intp)] = True
    return out

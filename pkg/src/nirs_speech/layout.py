"""Probe geometry: two 3x5 optode grids giving 44 source-detector channels.

Only five channels carry named 10-20 anchors; every other channel is
described by its grid-relative position alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

N_CHANNELS = 44
CHANNELS_PER_GRID = 22
GRIDS = ("left", "right")
SEPARATION_MM = 30.0

# optode rows x cols in each grid
GRID_ROWS = 3
GRID_COLS = 5

NAMED_ANCHORS = {
    2: ("CP5",),
    5: ("CP5", "TP7"),
    7: ("CP5", "C5"),
    8: ("C3", "C1"),
    20: ("F7",),
}

_REQUIRED = ("id", "grid", "row", "col", "source", "detector", "separation_mm")


class LayoutError(ValueError):
    """Raised when a layout file is malformed; ``problems`` lists every violation."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid channel layout:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class Channel:
    id: int
    grid: str
    row: int
    col: int
    source: int
    detector: int
    separation_mm: float = SEPARATION_MM
    anchors: tuple[str, ...] = ()

    @property
    def ten20_label(self) -> str:
        return "/".join(self.anchors)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "grid": self.grid,
            "row": self.row,
            "col": self.col,
            "source": self.source,
            "detector": self.detector,
            "separation_mm": self.separation_mm,
            "anchors": list(self.anchors),
        }


@dataclass(frozen=True)
class ChannelLayout:
    channels: tuple[Channel, ...]
    version: int = 1

    def __len__(self) -> int:
        return len(self.channels)

    def __iter__(self):
        return iter(self.channels)

    def channel(self, channel_id: int) -> Channel:
        for ch in self.channels:
            if ch.id == channel_id:
                return ch
        raise KeyError(channel_id)

    def grid(self, name: str) -> list[Channel]:
        return [ch for ch in self.channels if ch.grid == name]

    def to_dict(self) -> dict:
        return {"version": self.version, "channels": [ch.to_dict() for ch in self.channels]}


def build_grid_layout() -> ChannelLayout:
    """Enumerate nearest-neighbour optode pairs of two checkerboard 3x5 grids.

    Optodes alternate source/detector, so each grid holds 8 sources and 7
    detectors (16 and 14 overall). Channels are numbered row by row over a
    5x9 lattice: horizontal pairs sit on even lattice rows, vertical pairs on
    odd ones. Left grid gets ids 1-22, right grid 23-44.
    """
    channels = []
    next_id = 1
    source_base = detector_base = 0
    for grid in GRIDS:
        sources, detectors = {}, {}
        for r in range(GRID_ROWS):
            for c in range(GRID_COLS):
                if (r + c) % 2 == 0:
                    sources[(r, c)] = source_base + len(sources) + 1
                else:
                    detectors[(r, c)] = detector_base + len(detectors) + 1

        def pair(a, b):
            return (sources[a], detectors[b]) if a in sources else (sources[b], detectors[a])

        for lattice_row in range(2 * GRID_ROWS - 1):
            r = lattice_row // 2
            if lattice_row % 2 == 0:
                links = [((r, c), (r, c + 1), 2 * c + 1) for c in range(GRID_COLS - 1)]
            else:
                links = [((r, c), (r + 1, c), 2 * c) for c in range(GRID_COLS)]
            for a, b, lattice_col in links:
                src, det = pair(a, b)
                channels.append(
                    Channel(
                        id=next_id,
                        grid=grid,
                        row=lattice_row,
                        col=lattice_col,
                        source=src,
                        detector=det,
                        anchors=NAMED_ANCHORS.get(next_id, ()),
                    )
                )
                next_id += 1
        source_base += len(sources)
        detector_base += len(detectors)
    return ChannelLayout(tuple(channels))


def _parse(payload: object) -> ChannelLayout:
    problems: list[str] = []
    if not isinstance(payload, dict) or not isinstance(payload.get("channels"), list):
        raise LayoutError(["top level must be an object with a 'channels' list"])
    records = payload["channels"]
    channels = []
    for pos, rec in enumerate(records):
        if not isinstance(rec, dict):
            problems.append(f"record {pos}: not an object")
            continue
        missing = [key for key in _REQUIRED if key not in rec]
        if missing:
            problems.append(f"record {pos}: missing fields {missing}")
            continue
        try:
            ch = Channel(
                id=int(rec["id"]),
                grid=str(rec["grid"]),
                row=int(rec["row"]),
                col=int(rec["col"]),
                source=int(rec["source"]),
                detector=int(rec["detector"]),
                separation_mm=float(rec["separation_mm"]),
                anchors=tuple(str(a) for a in rec.get("anchors", [])),
            )
        except (TypeError, ValueError) as exc:
            problems.append(f"record {pos}: bad field value ({exc})")
            continue
        if ch.grid not in GRIDS:
            problems.append(f"channel {ch.id}: unknown grid {ch.grid!r}")
        if ch.separation_mm != SEPARATION_MM:
            problems.append(f"channel {ch.id}: separation {ch.separation_mm} mm, expected {SEPARATION_MM}")
        channels.append(ch)

    ids = [ch.id for ch in channels]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        problems.append(f"duplicate channel ids {dupes}")
    if len(records) != N_CHANNELS:
        problems.append(f"expected {N_CHANNELS} channels, found {len(records)}")
    for grid in GRIDS:
        count = sum(ch.grid == grid for ch in channels)
        if count != CHANNELS_PER_GRID:
            problems.append(f"grid {grid!r} has {count} channels, expected {CHANNELS_PER_GRID}")
    if not dupes and channels and sorted(ids) != list(range(1, len(ids) + 1)):
        problems.append("channel ids must run 1..N without gaps")
    pairs = [(ch.source, ch.detector) for ch in channels]
    if len(set(pairs)) != len(pairs):
        problems.append("some source-detector pair appears twice")

    if problems:
        raise LayoutError(problems)
    channels.sort(key=lambda ch: ch.id)
    return ChannelLayout(tuple(channels), version=int(payload.get("version", 1)))


def load_layout(path: str | Path | None = None) -> ChannelLayout:
    """Load and validate a layout file; ``None`` loads the bundled default."""
    if path is None:
        text = resources.files("nirs_speech.data").joinpath("layout_default.json").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LayoutError([f"not valid JSON: {exc}"]) from exc
    return _parse(payload)


def default_layout() -> ChannelLayout:
    return load_layout(None)

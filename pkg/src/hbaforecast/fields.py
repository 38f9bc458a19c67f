"""Count and forcing fields, their text file format, anomalies and time alignment.

Matrix files are whitespace-delimited text. The first line is a header::

    n_rows n_cols resolution first_stamp

where ``resolution`` is one of ``M`` (monthly), ``Q`` (quarterly) or ``Y``
(yearly) and ``first_stamp`` is ``YYYY-MM``. An optional second line starting
with the token ``stamps`` lists one ``YYYY-MM`` stamp per column. The remaining
lines hold one row per location. Location metadata lives in a sidecar file
(default: the matrix path with suffix ``.coords``) with ``id lon lat`` rows.

All time and location indices in this package are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FieldFormatError, InsufficientHistoryError

RESOLUTION_MONTHS = {"M": 1, "Q": 3, "Y": 12, "A": 12}


@dataclass(frozen=True)
class Location:
    id: str
    lon: float
    lat: float


def _as_months(stamps) -> np.ndarray:
    return np.asarray(stamps, dtype="datetime64[M]")


def _check_even(times: np.ndarray, step: int, what: str) -> None:
    if times.size == 0:
        raise FieldFormatError(f"{what}: no time stamps")
    d = np.diff(times.astype(np.int64))
    if d.size and (d <= 0).any():
        raise FieldFormatError(f"{what}: time stamps not strictly increasing")
    bad = np.flatnonzero(d != step)
    if bad.size:
        i = bad[0]
        missing = times[i] + np.timedelta64(step, "M")
        raise FieldFormatError(f"{what}: time gap, missing stamp {missing}")


@dataclass(frozen=True, eq=False)
class CountField:
    """Counts (n_y x T) of nonnegative integers at response resolution."""

    counts: np.ndarray
    locations: tuple
    times: np.ndarray
    resolution: str = "Y"

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] < 1 or counts.shape[1] < 1:
            raise FieldFormatError("counts must be a non-empty 2-d matrix")
        if not np.all(np.isfinite(counts)):
            raise FieldFormatError("counts contain non-finite entries")
        if (counts < 0).any() or (counts != np.round(counts)).any():
            r, c = np.argwhere((counts < 0) | (counts != np.round(counts)))[0]
            raise FieldFormatError(f"invalid count {counts[r, c]!r} at row {r}, col {c}")
        object.__setattr__(self, "counts", counts.astype(np.int64))
        object.__setattr__(self, "times", _as_months(self.times))
        object.__setattr__(self, "locations", tuple(self.locations))
        if len(self.locations) != counts.shape[0]:
            raise FieldFormatError("number of locations does not match count rows")
        if self.times.size != counts.shape[1]:
            raise FieldFormatError("number of time stamps does not match count columns")
        _check_even(self.times, self.step_months, "counts")

    @property
    def n_y(self) -> int:
        return self.counts.shape[0]

    @property
    def T(self) -> int:
        return self.counts.shape[1]

    @property
    def step_months(self) -> int:
        return RESOLUTION_MONTHS[self.resolution]

    def stamp(self, t: int) -> np.datetime64:
        """Stamp of response index ``t``; ``t`` may run past the record (forecasting)."""
        return self.times[0] + np.timedelta64(t * self.step_months, "M")

    def index_of_year(self, year: int) -> int:
        years = self.times.astype("datetime64[Y]").astype(int) + 1970
        hits = np.flatnonzero(years == year)
        if hits.size == 0:
            raise KeyError(f"year {year} not in count record")
        return int(hits[0])

    def __eq__(self, other):
        if not isinstance(other, CountField):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and self.locations == other.locations
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.counts, other.counts)
        )


@dataclass(frozen=True, eq=False)
class ForcingField:
    """Real-valued forcing (n_x x T') at a finer resolution than the counts."""

    values: np.ndarray
    locations: tuple
    times: np.ndarray
    resolution: str = "M"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise FieldFormatError("forcing must be a non-empty 2-d matrix")
        if np.isnan(values).any():
            r, c = np.argwhere(np.isnan(values))[0]
            raise FieldFormatError(f"missing forcing value at row {r}, col {c}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "times", _as_months(self.times))
        object.__setattr__(self, "locations", tuple(self.locations))
        if len(self.locations) != values.shape[0]:
            raise FieldFormatError("number of locations does not match forcing rows")
        if self.times.size != values.shape[1]:
            raise FieldFormatError("number of time stamps does not match forcing columns")
        _check_even(self.times, self.step_months, "forcing")

    @property
    def n_x(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def step_months(self) -> int:
        return RESOLUTION_MONTHS[self.resolution]

    def periods_per_response(self, counts: CountField) -> int:
        ratio, rem = divmod(counts.step_months, self.step_months)
        if rem or ratio < 1:
            raise ValueError("count resolution is not a multiple of forcing resolution")
        return ratio

    def index_of(self, stamp) -> int:
        offset = (np.datetime64(stamp, "M") - self.times[0]).astype(int)
        idx, rem = divmod(int(offset), self.step_months)
        if rem:
            raise ValueError(f"stamp {stamp} is not on the forcing grid")
        return idx

    def with_values(self, values) -> "ForcingField":
        return ForcingField(values, self.locations, self.times, self.resolution)

    def __eq__(self, other):
        if not isinstance(other, ForcingField):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and self.locations == other.locations
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class AlignmentSpec:
    """Map response index ``t`` to the forcing index ``tau`` steps before its stamp.

    ``anchor_offset`` shifts the anchor by further forcing steps (positive
    values move it earlier); 0 reproduces "May of year Y-1" for a May-Y
    target with monthly forcing and ``tau=12``.
    """

    tau: int = 12
    anchor_offset: int = 0

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")


# ---------------------------------------------------------------------------
# file format


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".coords")


def _read_header(lines, path):
    try:
        n_rows, n_cols, resolution, first = lines[0].split()
        n_rows, n_cols = int(n_rows), int(n_cols)
        first = np.datetime64(first, "M")
    except ValueError as exc:
        raise FieldFormatError(f"{path}: bad header line {lines[0]!r}") from exc
    if resolution not in RESOLUTION_MONTHS:
        raise FieldFormatError(f"{path}: unknown resolution {resolution!r}")
    return n_rows, n_cols, resolution, first


def _read_matrix(path, delimiter=None):
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise FieldFormatError(f"{path}: empty file")
    n_rows, n_cols, resolution, first = _read_header(lines, path)
    body = lines[1:]
    step = RESOLUTION_MONTHS[resolution]
    if body and body[0].split()[0] == "stamps":
        stamps = _as_months(body[0].split()[1:])
        body = body[1:]
        if stamps.size != n_cols:
            raise FieldFormatError(f"{path}: stamps line has {stamps.size} entries, expected {n_cols}")
        if stamps[0] != first:
            raise FieldFormatError(f"{path}: first stamp {stamps[0]} disagrees with header {first}")
        _check_even(stamps, step, str(path))
    else:
        stamps = first + np.arange(n_cols) * np.timedelta64(step, "M")
    if len(body) != n_rows:
        raise FieldFormatError(f"{path}: expected {n_rows} rows, found {len(body)}")
    cells = []
    for r, ln in enumerate(body):
        row = ln.split(delimiter) if delimiter else ln.split()
        if len(row) != n_cols:
            raise FieldFormatError(f"{path}: ragged row {r}: {len(row)} cells, expected {n_cols}")
        cells.append(row)
    return cells, stamps, resolution


def read_locations(path) -> tuple:
    path = Path(path)
    if not path.exists():
        raise FieldFormatError(f"missing location sidecar {path}")
    locs = []
    for i, ln in enumerate(path.read_text().splitlines()):
        if not ln.strip() or ln.startswith("#"):
            continue
        parts = ln.split()
        if len(parts) != 3:
            raise FieldFormatError(f"{path}: line {i} should be 'id lon lat'")
        locs.append(Location(parts[0], float(parts[1]), float(parts[2])))
    return tuple(locs)


def write_locations(path, locations) -> None:
    lines = [f"{loc.id} {float(loc.lon)!r} {float(loc.lat)!r}" for loc in locations]
    Path(path).write_text("\n".join(lines) + "\n")


def load_count_field(path, coords=None, delimiter=None) -> CountField:
    cells, stamps, resolution = _read_matrix(path, delimiter)
    counts = np.empty((len(cells), stamps.size), dtype=np.int64)
    for r, row in enumerate(cells):
        for c, tok in enumerate(row):
            try:
                v = float(tok)
            except ValueError:
                raise FieldFormatError(f"{path}: non-numeric cell {tok!r} at row {r}, col {c}") from None
            if not np.isfinite(v) or v < 0 or v != int(v):
                raise FieldFormatError(f"{path}: invalid count {tok!r} at row {r}, col {c}")
            counts[r, c] = int(v)
    locs = read_locations(coords or sidecar_path(path))
    return CountField(counts, locs, stamps, resolution)


def load_forcing_field(path, coords=None, delimiter=None) -> ForcingField:
    cells, stamps, resolution = _read_matrix(path, delimiter)
    values = np.empty((len(cells), stamps.size))
    for r, row in enumerate(cells):
        for c, tok in enumerate(row):
            try:
                v = float(tok)
            except ValueError:
                v = np.nan
            if np.isnan(v):
                raise FieldFormatError(
                    f"{path}: missing forcing value at row {r}, col {c} ({stamps[c]})"
                )
            values[r, c] = v
    locs = read_locations(coords or sidecar_path(path))
    return ForcingField(values, locs, stamps, resolution)


def _write_matrix(path, matrix, times, resolution, fmt) -> None:
    header = f"{matrix.shape[0]} {matrix.shape[1]} {resolution} {times[0]}"
    stamps = "stamps " + " ".join(str(s) for s in times)
    rows = [" ".join(fmt(v) for v in row) for row in matrix]
    Path(path).write_text("\n".join([header, stamps, *rows]) + "\n")


def write_count_field(cf: CountField, path, coords=None) -> None:
    _write_matrix(path, cf.counts, cf.times, cf.resolution, lambda v: str(int(v)))
    write_locations(coords or sidecar_path(path), cf.locations)


def write_forcing_field(ff: ForcingField, path, coords=None) -> None:
    _write_matrix(path, ff.values, ff.times, ff.resolution, lambda v: repr(float(v)))
    write_locations(coords or sidecar_path(path), ff.locations)


# ---------------------------------------------------------------------------
# anomalies and alignment


def anomalize(f: ForcingField, ref_start=None, ref_end=None) -> ForcingField:
    """Subtract location-specific seasonal means computed over a reference window.

    The window defaults to the full record. Seasons are calendar months for
    monthly data (quarters for quarterly data); yearly forcing has a single
    season, so anomalies are deviations from the window mean.
    """
    start = f.times[0] if ref_start is None else np.datetime64(ref_start, "M")
    end = f.times[-1] if ref_end is None else np.datetime64(ref_end, "M")
    if start < f.times[0] or end > f.times[-1] or end < start:
        raise ValueError(
            f"reference window {start}..{end} outside data range {f.times[0]}..{f.times[-1]}"
        )
    n_season = 12 // f.step_months
    in_ref = (f.times >= start) & (f.times <= end)
    if in_ref.sum() < n_season:
        raise ValueError("reference window shorter than one seasonal cycle")
    month = f.times.astype(int) % 12
    season = month // f.step_months
    out = np.empty_like(f.values)
    for s in range(n_season):
        cols = season == s
        ref = cols & in_ref
        if not ref.any():
            raise ValueError(f"reference window has no data for season {s}")
        out[:, cols] = f.values[:, cols] - f.values[:, ref].mean(axis=1, keepdims=True)
    return f.with_values(out)


def align(t: int, spec: AlignmentSpec, f: ForcingField, counts: CountField, q: int = 1) -> int:
    """Forcing index of the first (most recent) embedding column for response ``t``.

    ``t`` may equal ``counts.T`` (the period after the record). Raises
    :class:`InsufficientHistoryError` when fewer than ``q`` forcing steps are
    available up to and including the aligned index, or when the aligned
    index lies beyond the forcing record.
    """
    stamp = counts.stamp(t)
    steps = spec.tau + spec.anchor_offset
    anchor = stamp - np.timedelta64(steps * f.step_months, "M")
    offset = int((anchor - f.times[0]).astype(int))
    idx, rem = divmod(offset, f.step_months)
    if rem:
        raise ValueError("response stamp does not fall on the forcing grid")
    if idx - (q - 1) < 0:
        raise InsufficientHistoryError(
            f"response index {t} ({stamp}) aligns to forcing index {idx}; "
            f"need at least {q - 1} earlier steps"
        )
    if idx >= f.T:
        raise InsufficientHistoryError(
            f"response index {t} ({stamp}) aligns to {anchor}, beyond the forcing record"
        )
    return idx

"""UJIIndoorLoc-format fingerprint datasets.

A :class:`Dataset` keeps its observations column-wise in read-only numpy
arrays. :attr:`Dataset.observations` gives the row view as
:class:`Fingerprint` records when one is needed.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from seqloc.exceptions import InvalidArgumentError, ParseError, SchemaError

NONDETECT_RAW = 100
NONDETECT = -105
RSSI_MIN = -104
RSSI_MAX = 0

LABEL_COLUMNS = (
    "LONGITUDE",
    "LATITUDE",
    "FLOOR",
    "BUILDINGID",
    "SPACEID",
    "RELATIVEPOSITION",
    "USERID",
    "PHONEID",
    "TIMESTAMP",
)
N_FLOORS = 5
N_BUILDINGS = 3


def wap_columns(r: int) -> list[str]:
    return [f"WAP{j + 1:03d}" for j in range(r)]


@dataclass(frozen=True)
class LocationLabel:
    longitude: float
    latitude: float
    floor: int
    building: int

    def __post_init__(self):
        if not 0 <= self.floor < N_FLOORS:
            raise InvalidArgumentError(f"floor {self.floor} outside [0, {N_FLOORS - 1}]")
        if not 0 <= self.building < N_BUILDINGS:
            raise InvalidArgumentError(f"building {self.building} outside [0, {N_BUILDINGS - 1}]")


@dataclass(frozen=True)
class AuxInfo:
    space_id: int
    user_id: int
    phone_id: int
    timestamp: int


@dataclass(frozen=True)
class Fingerprint:
    rssi: np.ndarray
    label: LocationLabel
    aux: AuxInfo


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Fingerprints plus labels, stored column-wise.

    ``rssi`` has shape ``(n, r)``; every other array has shape ``(n,)``.
    ``columns`` holds the original (0-based) AP index of each rssi column so
    filtered datasets still know where their features came from.
    """

    rssi: np.ndarray
    longitude: np.ndarray
    latitude: np.ndarray
    floor: np.ndarray
    building: np.ndarray
    space_id: np.ndarray
    user_id: np.ndarray
    phone_id: np.ndarray
    timestamp: np.ndarray
    role: str = "train"
    columns: np.ndarray | None = None

    def __post_init__(self):
        rssi = np.asarray(self.rssi, dtype=np.float64)
        if rssi.ndim != 2:
            raise InvalidArgumentError(f"rssi must be 2-D, got shape {rssi.shape}")
        n, r = rssi.shape
        object.__setattr__(self, "rssi", _frozen(rssi, np.float64))
        for name, dtype in (
            ("longitude", np.float64),
            ("latitude", np.float64),
            ("floor", np.int64),
            ("building", np.int64),
            ("space_id", np.int64),
            ("user_id", np.int64),
            ("phone_id", np.int64),
            ("timestamp", np.int64),
        ):
            arr = _frozen(getattr(self, name), dtype)
            if arr.shape != (n,):
                raise InvalidArgumentError(f"{name} has shape {arr.shape}, expected ({n},)")
            object.__setattr__(self, name, arr)
        cols = np.arange(r) if self.columns is None else self.columns
        cols = _frozen(cols, np.int64)
        if cols.shape != (r,):
            raise InvalidArgumentError(f"columns has shape {cols.shape}, expected ({r},)")
        object.__setattr__(self, "columns", cols)
        if self.role not in ("train", "validation"):
            raise InvalidArgumentError(f"role must be 'train' or 'validation', got {self.role!r}")

    @property
    def n(self) -> int:
        return self.rssi.shape[0]

    @property
    def r(self) -> int:
        return self.rssi.shape[1]

    def __len__(self) -> int:
        return self.n

    @property
    def coords(self) -> np.ndarray:
        return np.column_stack([self.longitude, self.latitude])

    def label(self, i: int) -> LocationLabel:
        return LocationLabel(
            float(self.longitude[i]), float(self.latitude[i]), int(self.floor[i]), int(self.building[i])
        )

    def __getitem__(self, i: int) -> Fingerprint:
        return Fingerprint(
            rssi=self.rssi[i],
            label=self.label(i),
            aux=AuxInfo(
                int(self.space_id[i]), int(self.user_id[i]), int(self.phone_id[i]), int(self.timestamp[i])
            ),
        )

    def __iter__(self) -> Iterator[Fingerprint]:
        return (self[i] for i in range(self.n))

    @property
    def observations(self) -> list[Fingerprint]:
        return list(self)

    def subset(self, idx) -> "Dataset":
        """Rows selected by an index array or boolean mask, order preserved."""
        idx = np.asarray(idx)
        return Dataset(
            rssi=self.rssi[idx],
            longitude=self.longitude[idx],
            latitude=self.latitude[idx],
            floor=self.floor[idx],
            building=self.building[idx],
            space_id=self.space_id[idx],
            user_id=self.user_id[idx],
            phone_id=self.phone_id[idx],
            timestamp=self.timestamp[idx],
            role=self.role,
            columns=self.columns,
        )

    def with_rssi(self, rssi: np.ndarray, columns=None) -> "Dataset":
        return Dataset(
            rssi=rssi,
            longitude=self.longitude,
            latitude=self.latitude,
            floor=self.floor,
            building=self.building,
            space_id=self.space_id,
            user_id=self.user_id,
            phone_id=self.phone_id,
            timestamp=self.timestamp,
            role=self.role,
            columns=self.columns if columns is None else columns,
        )

    def with_role(self, role: str) -> "Dataset":
        return Dataset(
            rssi=self.rssi,
            longitude=self.longitude,
            latitude=self.latitude,
            floor=self.floor,
            building=self.building,
            space_id=self.space_id,
            user_id=self.user_id,
            phone_id=self.phone_id,
            timestamp=self.timestamp,
            role=role,
            columns=self.columns,
        )

    @classmethod
    def from_arrays(cls, rssi, longitude, latitude, floor, building, *, timestamp=None,
                    space_id=None, user_id=None, phone_id=None, role="train") -> "Dataset":
        n = np.asarray(rssi).shape[0]
        zeros = np.zeros(n, dtype=np.int64)
        return cls(
            rssi=rssi,
            longitude=longitude,
            latitude=latitude,
            floor=floor,
            building=building,
            space_id=zeros if space_id is None else space_id,
            user_id=zeros if user_id is None else user_id,
            phone_id=zeros if phone_id is None else phone_id,
            timestamp=np.arange(n) if timestamp is None else timestamp,
            role=role,
        )


def _parse_number(text: str, row: int, column: str, integer: bool):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"row {row}: non-numeric value {text!r} in column {column}", row=row) from None
    if integer:
        if not value.is_integer():
            raise ParseError(f"row {row}: non-integer value {text!r} in column {column}", row=row)
        return int(value)
    return value


def _check_header(header: Sequence[str]) -> int:
    header = [h.strip() for h in header]
    missing = [c for c in LABEL_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"missing header column(s): {', '.join(missing)}")
    r = 0
    while r < len(header) and header[r].startswith("WAP"):
        r += 1
    expected = wap_columns(r) + list(LABEL_COLUMNS)
    if r == 0 or header != expected:
        bad = next((i for i, (a, b) in enumerate(zip(header, expected)) if a != b), len(expected))
        got = header[bad] if bad < len(header) else "<end of header>"
        want = expected[bad] if bad < len(expected) else "<end of header>"
        raise SchemaError(f"header column {bad}: expected {want}, got {got}")
    return r


def read_csv(stream, role: str = "train") -> Dataset:
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty file: no header row") from None
    r = _check_header(header)
    width = r + len(LABEL_COLUMNS)

    rssi, lon, lat, flo, bld, space, user, phone, ts = ([] for _ in range(9))
    for i, row in enumerate(reader):
        if not row:
            continue
        if len(row) != width:
            raise ParseError(f"row {i}: expected {width} fields, got {len(row)}", row=i)
        rssi.append([_parse_number(row[j], i, f"WAP{j + 1:03d}", True) for j in range(r)])
        rest = row[r:]
        lon.append(_parse_number(rest[0], i, "LONGITUDE", False))
        lat.append(_parse_number(rest[1], i, "LATITUDE", False))
        flo.append(_parse_number(rest[2], i, "FLOOR", True))
        bld.append(_parse_number(rest[3], i, "BUILDINGID", True))
        space.append(_parse_number(rest[4], i, "SPACEID", True))
        _parse_number(rest[5], i, "RELATIVEPOSITION", True)
        user.append(_parse_number(rest[6], i, "USERID", True))
        phone.append(_parse_number(rest[7], i, "PHONEID", True))
        ts.append(_parse_number(rest[8], i, "TIMESTAMP", True))

    return Dataset(
        rssi=np.array(rssi, dtype=np.float64).reshape(len(rssi), r),
        longitude=lon,
        latitude=lat,
        floor=flo,
        building=bld,
        space_id=space,
        user_id=user,
        phone_id=phone,
        timestamp=ts,
        role=role,
    )


def parse_csv(path: str | os.PathLike, role: str = "train") -> Dataset:
    """Read a UJIIndoorLoc CSV file; RSSI values are returned unrecoded."""
    with open(path, newline="", encoding="utf-8") as fh:
        return read_csv(fh, role=role)


def _fmt_rssi(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_csv(ds: Dataset, stream, raw_sentinel: bool = False) -> None:
    """Serialize in the UJIIndoorLoc schema.

    RELATIVEPOSITION is not retained at parse time and is written as 0.
    With ``raw_sentinel`` the -105 non-detection code is written as 100, as
    in the published files.
    """
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(wap_columns(ds.r) + list(LABEL_COLUMNS))
    rssi = ds.rssi
    if raw_sentinel:
        rssi = np.where(rssi == NONDETECT, NONDETECT_RAW, rssi)
    for i in range(ds.n):
        w.writerow(
            [_fmt_rssi(v) for v in rssi[i]]
            + [
                repr(float(ds.longitude[i])),
                repr(float(ds.latitude[i])),
                int(ds.floor[i]),
                int(ds.building[i]),
                int(ds.space_id[i]),
                0,
                int(ds.user_id[i]),
                int(ds.phone_id[i]),
                int(ds.timestamp[i]),
            ]
        )


def save_csv(ds: Dataset, path: str | os.PathLike, raw_sentinel: bool = False) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_csv(ds, fh, raw_sentinel=raw_sentinel)


def to_csv_string(ds: Dataset) -> str:
    buf = io.StringIO()
    write_csv(ds, buf)
    return buf.getvalue()


def split_by_time(ds: Dataset, m: int) -> list[Dataset]:
    """Sort by timestamp (stable) and cut into ``m`` contiguous folds.

    Fold sizes differ by at most one; earlier folds take the remainder.
    """
    if m < 2:
        raise InvalidArgumentError(f"m must be >= 2, got {m}")
    if ds.n < m:
        raise InvalidArgumentError(f"cannot split {ds.n} observations into {m} folds")
    order = np.argsort(ds.timestamp, kind="stable")
    base, extra = divmod(ds.n, m)
    folds, start = [], 0
    for k in range(m):
        size = base + (1 if k < extra else 0)
        folds.append(ds.subset(order[start:start + size]))
        start += size
    return folds

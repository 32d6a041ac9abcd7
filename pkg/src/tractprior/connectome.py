"""Parcellations and the connectome matrices defined over them.

All file formats are comma-delimited UTF-8; lines starting with ``#`` are skipped.
"""

from __future__ import annotations

import csv
import enum
import io
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SYMMETRY_TOL = 1e-12


class ConnectomeError(ValueError):
    """Malformed input table or matrix."""


class Hemisphere(str, enum.Enum):
    LEFT = "Left"
    RIGHT = "Right"
    MIDLINE = "Midline"

    @classmethod
    def parse(cls, token: str) -> "Hemisphere":
        t = token.strip().lower()
        for h in cls:
            if h.value.lower() == t:
                return h
        raise ConnectomeError(f"unknown hemisphere token {token!r}")


class ConnectomeKind(str, enum.Enum):
    STREAMLINE_COUNT = "StreamlineCount"
    COMMIT2_WEIGHT_SUM = "Commit2WeightSum"
    BINARY = "Binary"
    PRIOR_CONFIDENCE = "PriorConfidence"


class PairScope(str, enum.Enum):
    WITHIN_HEMISPHERE = "within_hemisphere"
    ALL = "all"


@dataclass(frozen=True)
class Region:
    name: str
    hemisphere: Hemisphere
    index: int


@dataclass(frozen=True)
class RegionPair:
    """Two distinct regions. ``a`` is named first in a forward prompt."""

    a: Region
    b: Region

    def __post_init__(self):
        if self.a.name == self.b.name:
            raise ConnectomeError(f"a region cannot pair with itself: {self.a.name}")

    def canonical(self) -> "RegionPair":
        if self.a.name <= self.b.name:
            return self
        return RegionPair(self.b, self.a)

    @property
    def key(self) -> tuple[str, str]:
        c = self.canonical()
        return (c.a.name, c.b.name)

    def reversed(self) -> "RegionPair":
        return RegionPair(self.b, self.a)

    def __str__(self) -> str:
        return f"{self.a.name} & {self.b.name}"


@dataclass(frozen=True)
class Parcellation:
    id: str
    regions: tuple[Region, ...]
    _by_name: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if len(self.regions) < 2:
            raise ConnectomeError("a parcellation needs at least 2 regions")
        by_name = {}
        for i, r in enumerate(self.regions):
            if not r.name:
                raise ConnectomeError("region names must be non-empty")
            if r.index != i:
                raise ConnectomeError(f"region {r.name!r} has index {r.index}, expected {i}")
            if r.name in by_name:
                raise ConnectomeError(f"duplicate region name {r.name!r}")
            by_name[r.name] = r
        object.__setattr__(self, "_by_name", by_name)

    @classmethod
    def from_names(cls, id: str, entries: Iterable[tuple[str, Hemisphere | str]]) -> "Parcellation":
        regions = []
        for i, (name, hemi) in enumerate(entries):
            if not isinstance(hemi, Hemisphere):
                hemi = Hemisphere.parse(hemi)
            regions.append(Region(name, hemi, i))
        return cls(id, tuple(regions))

    def __len__(self) -> int:
        return len(self.regions)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    @property
    def names(self) -> list[str]:
        return [r.name for r in self.regions]

    def region(self, name: str) -> Region:
        try:
            return self._by_name[name]
        except KeyError:
            raise ConnectomeError(f"region {name!r} not in parcellation {self.id!r}") from None

    def pair(self, a: str, b: str) -> RegionPair:
        return RegionPair(self.region(a), self.region(b))


def _data_rows(text: str) -> list[list[str]]:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    return [[c.strip() for c in row] for row in csv.reader(lines)]


def load_parcellation(path: str | Path, id: str | None = None) -> Parcellation:
    """Read a ``name,hemisphere`` CSV; a header row is optional."""
    path = Path(path)
    rows = _data_rows(path.read_text(encoding="utf-8"))
    if rows and [c.lower() for c in rows[0][:2]] == ["name", "hemisphere"]:
        rows = rows[1:]
    if not rows:
        raise ConnectomeError(f"{path}: no regions")
    entries = []
    for row in rows:
        if len(row) < 2:
            raise ConnectomeError(f"{path}: expected 'name,hemisphere', got {row!r}")
        entries.append((row[0], Hemisphere.parse(row[1])))
    return Parcellation.from_names(id or path.stem, entries)


def save_parcellation(p: Parcellation, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "hemisphere"])
        for r in p.regions:
            w.writerow([r.name, r.hemisphere.value])


def same_hemisphere(a: Region, b: Region) -> bool:
    # Midline regions partner with both hemispheres.
    if Hemisphere.MIDLINE in (a.hemisphere, b.hemisphere):
        return True
    return a.hemisphere == b.hemisphere


def enumerate_pairs(p: Parcellation, scope: PairScope | str = PairScope.ALL) -> list[RegionPair]:
    scope = PairScope(scope)
    pairs = []
    for a, b in itertools.combinations(p.regions, 2):
        if scope is PairScope.WITHIN_HEMISPHERE and not same_hemisphere(a, b):
            continue
        pairs.append(RegionPair(a, b).canonical())
    pairs.sort(key=lambda pr: pr.key)
    return pairs


@dataclass(frozen=True, eq=False)
class Connectome:
    parcellation: Parcellation
    weights: np.ndarray
    kind: ConnectomeKind

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        n = len(self.parcellation)
        if w.shape != (n, n):
            raise ConnectomeError(f"matrix shape {w.shape} does not match {n} regions")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ConnectomeError("connectome weights must be finite and non-negative")
        if np.any(np.abs(w - w.T) > SYMMETRY_TOL):
            raise ConnectomeError("connectome weights must be symmetric")
        if np.any(np.diag(w) != 0):
            raise ConnectomeError("connectome diagonal must be zero")
        if self.kind is ConnectomeKind.BINARY and not np.all((w == 0) | (w == 1)):
            raise ConnectomeError("binary connectome holds values other than 0/1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __eq__(self, other):
        if not isinstance(other, Connectome):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.parcellation.names == other.parcellation.names
            and np.array_equal(self.weights, other.weights)
        )

    def weight(self, a: str, b: str) -> float:
        p = self.parcellation
        return float(self.weights[p.region(a).index, p.region(b).index])

    def edges(self) -> list[RegionPair]:
        """Nonzero edges in canonical order."""
        iu = np.argwhere(np.triu(self.weights, 1) > 0)
        regs = self.parcellation.regions
        pairs = [RegionPair(regs[i], regs[j]).canonical() for i, j in iu]
        return sorted(pairs, key=lambda pr: pr.key)

    @property
    def n_edges(self) -> int:
        return int(np.count_nonzero(np.triu(self.weights, 1)))


@dataclass(frozen=True)
class EndpointRow:
    region_a: str
    region_b: str
    count: int


def load_endpoints(path: str | Path) -> list[EndpointRow]:
    rows = _data_rows(Path(path).read_text(encoding="utf-8"))
    if rows and rows[0][:3] == ["region_a", "region_b", "count"]:
        rows = rows[1:]
    out = []
    for row in rows:
        if len(row) != 3:
            raise ConnectomeError(f"{path}: expected 'region_a,region_b,count', got {row!r}")
        count = int(row[2])
        if count < 0:
            raise ConnectomeError(f"{path}: negative streamline count in {row!r}")
        out.append(EndpointRow(row[0], row[1], count))
    return out


def connectome_from_endpoints(table: Sequence[EndpointRow], p: Parcellation) -> Connectome:
    n = len(p)
    w = np.zeros((n, n))
    for row in table:
        i = p.region(row.region_a).index
        j = p.region(row.region_b).index
        if i == j:
            continue
        w[i, j] += row.count
        w[j, i] += row.count
    return Connectome(p, w, ConnectomeKind.STREAMLINE_COUNT)


def binarize(c: Connectome, threshold: float = 0.0) -> Connectome:
    if threshold < 0:
        raise ConnectomeError("threshold must be non-negative")
    return Connectome(c.parcellation, (c.weights > threshold).astype(float), ConnectomeKind.BINARY)


def _format_value(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def write_matrix_csv(path: str | Path, names: Sequence[str], cells: Sequence[Sequence[str]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["region", *names])
    for name, row in zip(names, cells):
        w.writerow([name, *row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_matrix_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    rows = _data_rows(Path(path).read_text(encoding="utf-8"))
    if not rows:
        raise ConnectomeError(f"{path}: empty matrix file")
    header = rows[0][1:]
    body = rows[1:]
    if [r[0] for r in body] != header:
        raise ConnectomeError(f"{path}: row labels do not match column labels")
    for r in body:
        if len(r) != len(header) + 1:
            raise ConnectomeError(f"{path}: ragged row for {r[0]!r}")
    return header, [r[1:] for r in body]


def save_connectome(c: Connectome, path: str | Path) -> None:
    cells = [[_format_value(v) for v in row] for row in c.weights]
    write_matrix_csv(path, c.parcellation.names, cells)


def load_connectome(path: str | Path, p: Parcellation, kind: ConnectomeKind | str) -> Connectome:
    """Load a header-labelled dense matrix, checked against the parcellation."""
    names, cells = read_matrix_csv(path)
    if names != p.names:
        raise ConnectomeError(f"{path}: region labels do not match parcellation {p.id!r}")
    try:
        w = np.array([[float(v) if v else 0.0 for v in row] for row in cells])
    except ValueError as exc:
        raise ConnectomeError(f"{path}: {exc}") from None
    return Connectome(p, w, ConnectomeKind(kind))

"""Panel index space and observation-file ingestion.

Cells are laid out country-major, then population (MSM, FSW, PWID), then
year.  With the default 2011-2021 window each country owns a contiguous
block of 33 cells.  Internally everything is zero-based; ``flat_index`` and
``unflat_index`` expose the one-based convention used in reports.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateConflict,
    IndexOutOfRange,
    IoError,
    MalformedRow,
    PrevalenceOutOfRange,
    UnknownCountry,
)

POPULATIONS = ("MSM", "FSW", "PWID")
N_POP = len(POPULATIONS)

REGIONS = (
    "Eastern and Southern Africa",
    "Western and Central Africa",
    "Middle East and North Africa",
    "Asia and the Pacific",
    "Eastern Europe and Central Asia",
    "Western and Central Europe and North America",
    "Latin America and the Caribbean",
)
REGION_CODES = ("ESA", "WCA", "MENA", "AP", "EECA", "WCENA", "LAC")
N_REGION = len(REGIONS)

FIRST_YEAR = 2011
LAST_YEAR = 2021

OBS_HEADER = ["country", "population", "year", "prevalence"]
COUNTRY_HEADER = ["country", "region"]


def population_index(name):
    try:
        return POPULATIONS.index(name.strip().upper())
    except ValueError:
        raise ValueError(f"unknown population {name!r}") from None


def region_index(name):
    key = name.strip()
    if key in REGIONS:
        return REGIONS.index(key)
    if key.upper() in REGION_CODES:
        return REGION_CODES.index(key.upper())
    raise ValueError(f"unknown region {name!r}")


@dataclass(frozen=True)
class CountryTable:
    codes: tuple
    region: np.ndarray  # region index per country

    def __post_init__(self):
        self.region.setflags(write=False)

    def __len__(self):
        return len(self.codes)

    def position(self, code):
        return self.codes.index(code)


def default_country_table_path():
    return resources.files("kpgmrf") / "data" / "countries.csv"


def load_country_table(path=None) -> CountryTable:
    """Read a ``country,region`` file.  Order of rows defines country order."""
    if path is None:
        text = default_country_table_path().read_text(encoding="utf-8")
        source = "<bundled countries.csv>"
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot read country table {path}: {exc}") from exc
        source = str(path)
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip().lower() for h in header] != COUNTRY_HEADER:
        raise MalformedRow(1, f"{source}: expected header {','.join(COUNTRY_HEADER)}")
    codes, regions = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise MalformedRow(lineno, f"{source}: expected 2 fields, got {len(row)}")
        code = row[0].strip()
        if code in codes:
            raise MalformedRow(lineno, f"{source}: duplicate country {code}")
        try:
            regions.append(region_index(row[1]))
        except ValueError as exc:
            raise MalformedRow(lineno, f"{source}: {exc}") from None
        codes.append(code)
    return CountryTable(tuple(codes), np.asarray(regions, dtype=np.int64))


@dataclass(frozen=True)
class PanelData:
    """Log-prevalence panel with an observed-cell mask.

    ``y`` holds log prevalence at observed cells and NaN elsewhere.
    Arrays are marked read-only; derive new panels with :meth:`with_mask`.
    """

    countries: tuple
    region: np.ndarray
    first_year: int
    last_year: int
    y: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        for arr in (self.region, self.y, self.mask):
            arr.setflags(write=False)

    @property
    def n_countries(self):
        return len(self.countries)

    @property
    def n_years(self):
        return self.last_year - self.first_year + 1

    @property
    def block(self):
        return N_POP * self.n_years

    @property
    def n_cells(self):
        return self.n_countries * self.block

    @property
    def n_observed(self):
        return int(self.mask.sum())

    @property
    def years(self):
        return range(self.first_year, self.last_year + 1)

    def obs_count(self):
        """Observed cells per (country, population), shape (N, 3)."""
        m = self.mask.reshape(self.n_countries, N_POP, self.n_years)
        return m.sum(axis=2)

    def y_matrix(self):
        """Values reshaped to (N, block); NaN where unobserved."""
        return self.y.reshape(self.n_countries, self.block)

    def mask_matrix(self):
        return self.mask.reshape(self.n_countries, self.block)

    def cell(self, flat):
        i, k, t = unflat_index(flat + 1, self.n_countries, self.n_years, self.first_year)
        return self.countries[i - 1], POPULATIONS[k], t

    def with_mask(self, mask):
        """A panel with only the cells in ``mask`` (a subset) kept observed."""
        mask = np.asarray(mask, dtype=bool)
        if np.any(mask & ~self.mask):
            raise ValueError("new mask must be a subset of the observed cells")
        y = np.where(mask, self.y, np.nan)
        return PanelData(self.countries, self.region.copy(), self.first_year,
                         self.last_year, y, mask.copy())

    def subset_countries(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        ym = self.y_matrix()[idx].ravel()
        mm = self.mask_matrix()[idx].ravel()
        return PanelData(tuple(self.countries[j] for j in idx), self.region[idx].copy(),
                         self.first_year, self.last_year, ym.copy(), mm.copy())


def empty_panel(table: CountryTable, first_year=FIRST_YEAR, last_year=LAST_YEAR) -> PanelData:
    n = len(table) * N_POP * (last_year - first_year + 1)
    return PanelData(table.codes, table.region.copy(), first_year, last_year,
                     np.full(n, np.nan), np.zeros(n, dtype=bool))


def flat_index(country, population, year, n_countries, n_years=LAST_YEAR - FIRST_YEAR + 1,
               first_year=FIRST_YEAR):
    """One-based flat position of (country, population, year).

    ``country`` is one-based; ``population`` is a name or zero-based ordinal.
    """
    k = population_index(population) if isinstance(population, str) else int(population)
    t = int(year) - first_year
    if not (1 <= country <= n_countries) or not (0 <= k < N_POP) or not (0 <= t < n_years):
        raise IndexOutOfRange(f"cell ({country}, {population}, {year}) outside panel")
    return (country - 1) * N_POP * n_years + k * n_years + t + 1


def unflat_index(flat, n_countries, n_years=LAST_YEAR - FIRST_YEAR + 1, first_year=FIRST_YEAR):
    """Inverse of :func:`flat_index`: returns (country, population ordinal, year)."""
    block = N_POP * n_years
    if not (1 <= flat <= n_countries * block):
        raise IndexOutOfRange(f"flat index {flat} outside [1, {n_countries * block}]")
    q, r = divmod(flat - 1, block)
    k, t = divmod(r, n_years)
    return q + 1, k, first_year + t


def load_panel(path, country_table=None, *, first_year=FIRST_YEAR, last_year=LAST_YEAR,
               percent=False, dup_tol=1e-12) -> PanelData:
    """Ingest an observation file into a :class:`PanelData`.

    Duplicate rows for one cell are averaged on the log scale when their
    prevalences differ by at most ``dup_tol``; otherwise DuplicateConflict.
    With ``percent=True`` prevalences are read as percentages.
    """
    table = country_table if isinstance(country_table, CountryTable) else load_country_table(country_table)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read observation file {path}: {exc}") from exc

    n_years = last_year - first_year + 1
    lookup = {c: i for i, c in enumerate(table.codes)}
    seen = {}
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip().lower() for h in header] != OBS_HEADER:
        raise MalformedRow(1, f"expected header {','.join(OBS_HEADER)}")
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise MalformedRow(lineno, f"expected 4 fields, got {len(row)}")
        code, pop, year_s, prev_s = (c.strip() for c in row)
        try:
            k = population_index(pop)
        except ValueError as exc:
            raise MalformedRow(lineno, str(exc)) from None
        try:
            year = int(year_s)
            prev = float(prev_s)
        except ValueError:
            raise MalformedRow(lineno, f"unparseable year/prevalence {year_s!r}, {prev_s!r}") from None
        if not first_year <= year <= last_year:
            raise MalformedRow(lineno, f"year {year} outside {first_year}-{last_year}")
        if code not in lookup:
            raise UnknownCountry(f"line {lineno}: country {code!r} not in country table")
        if percent:
            prev = prev / 100.0
        if not (0.0 < prev < 1.0) or not math.isfinite(prev):
            raise PrevalenceOutOfRange(f"line {lineno}: prevalence {prev!r} not in (0, 1)")
        flat = lookup[code] * N_POP * n_years + k * n_years + (year - first_year)
        seen.setdefault(flat, []).append((lineno, prev))

    n = len(table) * N_POP * n_years
    y = np.full(n, np.nan)
    mask = np.zeros(n, dtype=bool)
    for flat in sorted(seen):
        vals = seen[flat]
        prevs = [v for _, v in vals]
        if max(prevs) - min(prevs) > dup_tol:
            lines = ", ".join(str(ln) for ln, _ in vals)
            raise DuplicateConflict(f"lines {lines}: conflicting prevalences {prevs}")
        y[flat] = float(np.mean(np.log(prevs)))
        mask[flat] = True
    return PanelData(table.codes, table.region.copy(), first_year, last_year, y, mask)


def write_panel(panel: PanelData, path):
    """Write observed cells in the observation-file schema (proportions)."""
    n_years = panel.n_years
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OBS_HEADER)
        for flat in np.flatnonzero(panel.mask):
            i, r = divmod(int(flat), N_POP * n_years)
            k, t = divmod(r, n_years)
            w.writerow([panel.countries[i], POPULATIONS[k], panel.first_year + t,
                        repr(float(np.exp(panel.y[flat])))])


def write_country_table(panel: PanelData, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COUNTRY_HEADER)
        for code, r in zip(panel.countries, panel.region):
            w.writerow([code, REGIONS[int(r)]])


def sparsity_profile(panel: PanelData):
    """Countries with 0, 1-4 and >=5 observations, one row per population.

    Returns a dict ``{population: (n_zero, n_1_to_4, n_5_plus)}``.
    """
    counts = panel.obs_count()
    out = {}
    for k, name in enumerate(POPULATIONS):
        c = counts[:, k]
        out[name] = (int((c == 0).sum()), int(((c >= 1) & (c <= 4)).sum()), int((c >= 5).sum()))
    return out

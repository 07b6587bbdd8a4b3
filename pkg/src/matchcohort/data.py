"""Paired-data model, ingestion and tabulation.

A :class:`PairedCohort` stores one row per pair with the two members side by
side.  Everything the estimators need apart from covariates is captured by two
small summaries:

* :class:`DiscordantTable` -- the (T, U, V, W) cross-classification of
  exposure-discordant pairs by the outcomes of the exposed and unexposed member.
* :class:`AllPairSummary` -- pair counts by exposure pattern and number of
  events, from which the individual-level 2x2 table and the pair-structure
  moments follow.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import warnings
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .errors import ConcordantPairError, DataError, PairingError

logger = logging.getLogger(__name__)

__all__ = [
    "SubjectRecord",
    "PairedCohort",
    "Schema",
    "DiscordantTable",
    "AllPairSummary",
    "ingest_pairs",
    "write_cohort",
    "tabulate_discordant",
    "filter_discordant",
    "tabulate_all",
    "parse_counts",
]


@dataclass(frozen=True)
class SubjectRecord:
    """One subject of a pair."""

    pair_id: str
    member: int
    exposure: int
    outcome: int
    covariates: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.member not in (1, 2):
            raise DataError(f"pair {self.pair_id!r}: member must be 1 or 2, got {self.member!r}")
        for name in ("exposure", "outcome"):
            value = getattr(self, name)
            if value not in (0, 1):
                raise DataError(f"pair {self.pair_id!r}: {name} must be 0 or 1, got {value!r}")


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PairedCohort:
    """Complete 1:1 pairs with binary exposure and outcome.

    Attributes
    ----------
    pair_ids : tuple of str
    exposure, outcome : ndarray of shape (n, 2)
        Column ``j`` holds member ``j + 1``.
    covariates : dict of name -> ndarray of shape (n, 2)
    source : str
        Free-text description of where the data came from.
    """

    pair_ids: tuple
    exposure: np.ndarray
    outcome: np.ndarray
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)
    source: str = ""

    def __post_init__(self):
        ids = tuple(str(p) for p in self.pair_ids)
        n = len(ids)
        x = _frozen(self.exposure, np.int8).reshape(n, 2)
        y = _frozen(self.outcome, np.int8).reshape(n, 2)
        if not (np.isin(x, (0, 1)).all() and np.isin(y, (0, 1)).all()):
            raise DataError("exposure and outcome must be coded 0/1")
        if len(set(ids)) != n:
            seen, dup = set(), []
            for p in ids:
                if p in seen:
                    dup.append(p)
                seen.add(p)
            raise PairingError(f"duplicate pair ids: {', '.join(dup[:10])}", dup)
        cov = {}
        for name, values in dict(self.covariates).items():
            arr = _frozen(values, float).reshape(n, 2)
            cov[str(name)] = arr
        object.__setattr__(self, "pair_ids", ids)
        object.__setattr__(self, "exposure", x)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "covariates", cov)

    def __len__(self):
        return len(self.pair_ids)

    def __eq__(self, other):
        if not isinstance(other, PairedCohort):
            return NotImplemented
        return (
            self.pair_ids == other.pair_ids
            and np.array_equal(self.exposure, other.exposure)
            and np.array_equal(self.outcome, other.outcome)
            and self.covariates.keys() == other.covariates.keys()
            and all(np.array_equal(v, other.covariates[k]) for k, v in self.covariates.items())
        )

    __hash__ = None

    @property
    def n_pairs(self) -> int:
        return len(self.pair_ids)

    @property
    def covariate_names(self) -> tuple:
        return tuple(self.covariates)

    @property
    def discordant(self) -> np.ndarray:
        """Boolean mask of exposure-discordant pairs."""
        return self.exposure[:, 0] != self.exposure[:, 1]

    def subset(self, mask) -> PairedCohort:
        mask = np.asarray(mask)
        if mask.dtype == bool:
            idx = np.flatnonzero(mask)
        else:
            idx = mask.astype(int)
        return PairedCohort(
            pair_ids=tuple(self.pair_ids[i] for i in idx),
            exposure=self.exposure[idx],
            outcome=self.outcome[idx],
            covariates={k: v[idx] for k, v in self.covariates.items()},
            source=self.source,
        )

    def records(self) -> Iterator[SubjectRecord]:
        names = self.covariate_names
        for i, pid in enumerate(self.pair_ids):
            for j in range(2):
                yield SubjectRecord(
                    pair_id=pid,
                    member=j + 1,
                    exposure=int(self.exposure[i, j]),
                    outcome=int(self.outcome[i, j]),
                    covariates={k: float(self.covariates[k][i, j]) for k in names},
                )

    def pairs(self) -> Iterator[tuple]:
        it = self.records()
        return zip(it, it)

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord], source: str = "") -> PairedCohort:
        """Group subject records into pairs.

        Members are ordered by their ``member`` index.  Raises
        :class:`PairingError` when a pair id does not occur exactly twice or a
        member index repeats.
        """
        groups: dict = {}
        for rec in records:
            groups.setdefault(rec.pair_id, []).append(rec)
        bad = [pid for pid, recs in groups.items() if len(recs) != 2]
        if bad:
            raise PairingError(
                f"pair ids not occurring exactly twice: {', '.join(map(str, bad[:10]))}", bad
            )
        bad = [pid for pid, (a, b) in groups.items() if a.member == b.member]
        if bad:
            raise PairingError(f"duplicate member index in pairs: {', '.join(map(str, bad[:10]))}", bad)
        names: list = []
        for recs in groups.values():
            for rec in recs:
                for k in rec.covariates:
                    if k not in names:
                        names.append(k)
        ids, x, y = [], [], []
        cov = {k: [] for k in names}
        for pid, recs in groups.items():
            a, b = sorted(recs, key=lambda r: r.member)
            ids.append(pid)
            x.append((a.exposure, b.exposure))
            y.append((a.outcome, b.outcome))
            for k in names:
                try:
                    cov[k].append((a.covariates[k], b.covariates[k]))
                except KeyError:
                    raise DataError(f"pair {pid!r}: covariate {k!r} missing") from None
        n = len(ids)
        return cls(
            pair_ids=tuple(ids),
            exposure=np.array(x, dtype=np.int8).reshape(n, 2),
            outcome=np.array(y, dtype=np.int8).reshape(n, 2),
            covariates={k: np.array(v, dtype=float).reshape(n, 2) for k, v in cov.items()},
            source=source,
        )


# --------------------------------------------------------------------------
# ingestion


@dataclass(frozen=True)
class Schema:
    """Column mapping for delimited input.

    In wide format (one row per pair) the per-member columns are the base
    names suffixed with ``_1`` and ``_2``; every other suffixed column pair is
    read as a covariate.
    """

    pair_id: str = "pair_id"
    member: str = "member"
    exposure: str = "exposure"
    outcome: str = "outcome"
    wide: bool = False
    delimiter: str | None = None


def _open_text(source):
    """Return (stream, owned, display name); empty strings and strings containing a newline are content."""
    if isinstance(source, os.PathLike) or (isinstance(source, str) and source and "\n" not in source):
        return open(source, newline=""), True, str(source)
    if isinstance(source, str):
        return io.StringIO(source), True, "<text>"
    return source, False, getattr(source, "name", "<stream>")


def _binary(value, what, lineno):
    v = value.strip()
    if v == "":
        raise DataError(f"line {lineno}: missing {what}")
    try:
        f = float(v)
    except ValueError:
        raise DataError(f"line {lineno}: {what} {v!r} is not numeric") from None
    if f not in (0.0, 1.0):
        raise DataError(f"line {lineno}: {what} must be 0 or 1, got {v}")
    return int(f)


def _real(value, what, lineno):
    try:
        return float(value)
    except ValueError:
        raise DataError(f"line {lineno}: covariate {what} value {value!r} is not a real number") from None


def ingest_pairs(source, schema: Schema | None = None) -> PairedCohort:
    """Read a delimited text stream into a validated :class:`PairedCohort`.

    Parameters
    ----------
    source : path, text or file object
        A header row is required.  The delimiter is taken from ``schema`` or
        detected from the header (tab if present, else comma).
    schema : Schema, optional
        Column names; defaults to ``pair_id, member, exposure, outcome`` in
        long format.  When the member column is absent the order of appearance
        within a pair defines the member index.
    """
    schema = schema or Schema()
    stream, owned, name = _open_text(source)
    try:
        text = stream.read()
    finally:
        if owned:
            stream.close()
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DataError("input is empty or has no header row")
    delim = schema.delimiter or ("\t" if "\t" in lines[0] else ",")
    reader = csv.reader(lines, delimiter=delim)
    header = [h.strip() for h in next(reader)]
    if schema.wide:
        cohort = _read_wide(reader, header, schema)
    else:
        cohort = _read_long(reader, header, schema)
    if cohort.n_pairs == 0:
        raise DataError("input contains no pairs")
    return PairedCohort(cohort.pair_ids, cohort.exposure, cohort.outcome, cohort.covariates, source=name)


def _require(header, cols):
    missing = [c for c in cols if c not in header]
    if missing:
        raise DataError(f"missing required column(s): {', '.join(missing)}")


def _read_long(reader, header, schema):
    _require(header, [schema.pair_id, schema.exposure, schema.outcome])
    col = {h: i for i, h in enumerate(header)}
    reserved = {schema.pair_id, schema.member, schema.exposure, schema.outcome}
    cov_names = [h for h in header if h not in reserved]
    has_member = schema.member in col
    records = []
    counter: dict = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        pid = row[col[schema.pair_id]].strip()
        if has_member:
            try:
                member = int(float(row[col[schema.member]]))
            except ValueError:
                raise DataError(f"line {lineno}: member {row[col[schema.member]]!r} is not an integer") from None
            if member not in (1, 2):
                raise PairingError(f"line {lineno}: member must be 1 or 2 (pair {pid!r})", [pid])
        else:
            counter[pid] = counter.get(pid, 0) + 1
            member = min(counter[pid], 2)
        records.append(
            SubjectRecord(
                pair_id=pid,
                member=member,
                exposure=_binary(row[col[schema.exposure]], "exposure", lineno),
                outcome=_binary(row[col[schema.outcome]], "outcome", lineno),
                covariates={c: _real(row[col[c]], c, lineno) for c in cov_names},
            )
        )
    return PairedCohort.from_records(records)


def _read_wide(reader, header, schema):
    s = ("_1", "_2")
    need = [schema.pair_id] + [b + k for b in (schema.exposure, schema.outcome) for k in s]
    _require(header, need)
    col = {h: i for i, h in enumerate(header)}
    cov_names = [
        h[:-2] for h in header
        if h.endswith("_1") and h[:-2] + "_2" in col and h[:-2] not in (schema.exposure, schema.outcome)
    ]
    ids, x, y = [], [], []
    cov = {c: [] for c in cov_names}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        ids.append(row[col[schema.pair_id]].strip())
        x.append([_binary(row[col[schema.exposure + k]], "exposure", lineno) for k in s])
        y.append([_binary(row[col[schema.outcome + k]], "outcome", lineno) for k in s])
        for c in cov_names:
            cov[c].append([_real(row[col[c + k]], c, lineno) for k in s])
    n = len(ids)
    return PairedCohort(
        tuple(ids),
        np.array(x, dtype=np.int8).reshape(n, 2),
        np.array(y, dtype=np.int8).reshape(n, 2),
        {c: np.array(v, dtype=float).reshape(n, 2) for c, v in cov.items()},
    )


def write_cohort(cohort: PairedCohort, stream: TextIO, delimiter: str = ",") -> None:
    """Write ``cohort`` in the canonical long format (one row per subject)."""
    w = csv.writer(stream, delimiter=delimiter, lineterminator="\n")
    names = cohort.covariate_names
    w.writerow(["pair_id", "member", "exposure", "outcome", *names])
    x, y = cohort.exposure, cohort.outcome
    covs = [cohort.covariates[k] for k in names]
    for i, pid in enumerate(cohort.pair_ids):
        for j in range(2):
            w.writerow([pid, j + 1, int(x[i, j]), int(y[i, j]), *(repr(float(c[i, j])) for c in covs)])


# --------------------------------------------------------------------------
# summaries


@dataclass(frozen=True)
class DiscordantTable:
    """Counts of exposure-discordant pairs.

    ``t``: both members had the event; ``u``: only the exposed member;
    ``v``: only the unexposed member; ``w``: neither.
    """

    t: int
    u: int
    v: int
    w: int

    def __post_init__(self):
        for k in ("t", "u", "v", "w"):
            value = getattr(self, k)
            if int(value) != value or value < 0:
                raise DataError(f"count {k} must be a nonnegative integer, got {value!r}")
            object.__setattr__(self, k, int(value))

    @property
    def n(self) -> int:
        return self.t + self.u + self.v + self.w

    # individual-level margins n_yx
    @property
    def n11(self) -> int:
        return self.u + self.t

    @property
    def n10(self) -> int:
        return self.v + self.t

    @property
    def n01(self) -> int:
        return self.v + self.w

    @property
    def n00(self) -> int:
        return self.u + self.w

    def as_dict(self) -> dict:
        return {"t": self.t, "u": self.u, "v": self.v, "w": self.w}


@dataclass(frozen=True)
class AllPairSummary:
    """Pair counts by exposure pattern and outcome, for all pairs.

    Parameters
    ----------
    unexposed : (int, int, int)
        Number of both-unexposed pairs with 0, 1 and 2 events.
    exposed : (int, int, int)
        Same for both-exposed pairs.
    discordant : DiscordantTable
    """

    unexposed: tuple = (0, 0, 0)
    exposed: tuple = (0, 0, 0)
    discordant: DiscordantTable = DiscordantTable(0, 0, 0, 0)

    def __post_init__(self):
        for k in ("unexposed", "exposed"):
            counts = tuple(int(c) for c in getattr(self, k))
            if len(counts) != 3 or min(counts) < 0:
                raise DataError(f"{k} must hold three nonnegative counts")
            object.__setattr__(self, k, counts)

    @property
    def n_pairs(self) -> int:
        return sum(self.unexposed) + sum(self.exposed) + self.discordant.n

    @property
    def r(self) -> np.ndarray:
        """Individual counts ``r[y, x]``."""
        a0, a1, a2 = self.unexposed
        b0, b1, b2 = self.exposed
        d = self.discordant
        r = np.empty((2, 2), dtype=np.int64)
        r[1, 1] = b1 + 2 * b2 + d.n11
        r[0, 1] = b1 + 2 * b0 + d.n01
        r[1, 0] = a1 + 2 * a2 + d.n10
        r[0, 0] = a1 + 2 * a0 + d.n00
        return r

    @property
    def q_hat(self) -> float:
        return (2 * sum(self.exposed) + self.discordant.n) / (2 * self.n_pairs)

    @property
    def q00_hat(self) -> float:
        return sum(self.unexposed) / self.n_pairs

    @property
    def q11_hat(self) -> float:
        return sum(self.exposed) / self.n_pairs

    @property
    def qd_hat(self) -> float:
        return self.discordant.n / self.n_pairs

    @property
    def p0_hat(self) -> float:
        r = self.r
        return r[1, 0] / (r[1, 0] + r[0, 0])

    @property
    def p1_hat(self) -> float:
        r = self.r
        return r[1, 1] / (r[1, 1] + r[0, 1])

    # Stratum means and within-pair covariances (plug-in, divide by m).
    # Concordant strata use the pooled member mean so that the value does not
    # depend on which member is listed first.

    @staticmethod
    def _concordant_moments(counts):
        m = sum(counts)
        if m == 0:
            return 0.0, 0.0
        mean = (counts[1] + 2 * counts[2]) / (2 * m)
        return mean, counts[2] / m - mean * mean

    @property
    def mean00(self) -> float:
        return self._concordant_moments(self.unexposed)[0]

    @property
    def mean11(self) -> float:
        return self._concordant_moments(self.exposed)[0]

    @property
    def c00_hat(self) -> float:
        return self._concordant_moments(self.unexposed)[1]

    @property
    def c11_hat(self) -> float:
        return self._concordant_moments(self.exposed)[1]

    @property
    def mean_d(self) -> tuple:
        """Outcome means of the (exposed, unexposed) members of discordant pairs."""
        d = self.discordant
        if d.n == 0:
            return 0.0, 0.0
        return d.n11 / d.n, d.n10 / d.n

    @property
    def cd_hat(self) -> float:
        d = self.discordant
        if d.n == 0:
            return 0.0
        m1, m0 = self.mean_d
        return d.t / d.n - m1 * m0

    def as_dict(self) -> dict:
        a, b = self.unexposed, self.exposed
        out = {f"conc0_{k}": a[k] for k in range(3)}
        out.update({f"conc1_{k}": b[k] for k in range(3)})
        out.update(self.discordant.as_dict())
        r = self.r
        out.update({f"r{y}{x}": int(r[y, x]) for y in (0, 1) for x in (0, 1)})
        return out


def _pair_order(cohort: PairedCohort):
    """Outcomes of discordant pairs as (exposed, unexposed) columns."""
    d = cohort.discordant
    x = cohort.exposure[d]
    y = cohort.outcome[d]
    first_exposed = x[:, 0] == 1
    ye = np.where(first_exposed, y[:, 0], y[:, 1])
    yu = np.where(first_exposed, y[:, 1], y[:, 0])
    return ye, yu


def _table_from(ye, yu) -> DiscordantTable:
    ye = ye.astype(bool)
    yu = yu.astype(bool)
    return DiscordantTable(
        t=int(np.count_nonzero(ye & yu)),
        u=int(np.count_nonzero(ye & ~yu)),
        v=int(np.count_nonzero(~ye & yu)),
        w=int(np.count_nonzero(~ye & ~yu)),
    )


def tabulate_discordant(cohort: PairedCohort) -> DiscordantTable:
    """Cross-classify exposure-discordant pairs into (T, U, V, W).

    Raises :class:`ConcordantPairError` if any pair is exposure-concordant;
    filter first with :func:`filter_discordant` for twin data.
    """
    conc = ~cohort.discordant
    if conc.any():
        ids = [cohort.pair_ids[i] for i in np.flatnonzero(conc)]
        shown = ", ".join(ids[:10]) + (" ..." if len(ids) > 10 else "")
        raise ConcordantPairError(f"{len(ids)} exposure-concordant pair(s): {shown}", ids)
    return _table_from(*_pair_order(cohort))


def filter_discordant(cohort: PairedCohort) -> PairedCohort:
    """Keep only exposure-discordant pairs."""
    mask = cohort.discordant
    removed = int(np.count_nonzero(~mask))
    if removed == 0:
        return cohort
    logger.info("removed %d exposure-concordant pair(s), %d retained", removed, cohort.n_pairs - removed)
    if removed == cohort.n_pairs:
        warnings.warn("all pairs are exposure-concordant; the filtered cohort is empty", stacklevel=2)
    return cohort.subset(mask)


def tabulate_all(cohort: PairedCohort) -> AllPairSummary:
    """Summarize all pairs by exposure pattern and outcome."""
    if cohort.n_pairs == 0:
        raise DataError("cannot tabulate an empty cohort")
    xs = cohort.exposure.sum(axis=1)
    ys = cohort.outcome.sum(axis=1)
    unexposed = tuple(int(c) for c in np.bincount(ys[xs == 0], minlength=3))
    exposed = tuple(int(c) for c in np.bincount(ys[xs == 2], minlength=3))
    return AllPairSummary(unexposed, exposed, _table_from(*_pair_order(cohort)))


# --------------------------------------------------------------------------
# summary-count input

_TABLE_KEYS = ("t", "u", "v", "w")
_PATTERN_KEYS = tuple(f"conc{e}_{k}" for e in (0, 1) for k in range(3))
_R_KEYS = ("r00", "r01", "r10", "r11")


def parse_counts(text: str | Mapping):
    """Parse summary counts from JSON, ``key=value`` pairs or a mapping.

    ``{t, u, v, w}`` alone yields a :class:`DiscordantTable`; adding any of the
    concordant-pattern keys ``conc0_0 .. conc1_2`` (both-unexposed /
    both-exposed pairs with 0, 1, 2 events) yields an :class:`AllPairSummary`.
    Optional ``r00 .. r11`` individual counts are checked for consistency.
    """
    if isinstance(text, Mapping):
        raw = dict(text)
    else:
        s = text.strip()
        if s.startswith("{"):
            try:
                raw = json.loads(s)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON counts: {exc}") from None
        else:
            raw = {}
            for item in s.replace("\n", ",").replace(";", ",").split(","):
                if not item.strip():
                    continue
                if "=" not in item:
                    raise DataError(f"count item {item!r} is not of the form key=value")
                k, v = item.split("=", 1)
                raw[k.strip()] = v.strip()
    unknown = set(raw) - set(_TABLE_KEYS) - set(_PATTERN_KEYS) - set(_R_KEYS)
    if unknown:
        raise DataError(f"unknown count keys: {', '.join(sorted(unknown))}")

    def count(k):
        v = raw.get(k, 0)
        try:
            f = float(v)
        except (TypeError, ValueError):
            raise DataError(f"count {k}={v!r} is not a number") from None
        if f != int(f) or f < 0:
            raise DataError(f"count {k}={v!r} must be a nonnegative integer")
        return int(f)

    table = DiscordantTable(*(count(k) for k in _TABLE_KEYS))
    if not any(k in raw for k in _PATTERN_KEYS):
        if any(k in raw for k in _R_KEYS):
            raise DataError("individual counts r_yx require the concordant pattern counts conc0_*/conc1_*")
        return table
    summary = AllPairSummary(
        tuple(count(f"conc0_{k}") for k in range(3)),
        tuple(count(f"conc1_{k}") for k in range(3)),
        table,
    )
    r = summary.r
    for k in _R_KEYS:
        if k in raw and count(k) != r[int(k[1]), int(k[2])]:
            raise DataError(f"{k}={count(k)} is inconsistent with the pair-pattern counts (implied {r[int(k[1]), int(k[2])]})")
    return summary

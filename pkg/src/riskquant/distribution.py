"""Empirical loss distributions: ingestion and probability primitives.

Every solver in the toolkit consumes the same immutable weighted-atom
representation. The internal sign convention is losses-positive; signed PnL
input is negated once at ingestion (loss = -PnL). Profits (negative losses)
are kept as-is by the loader so tail measures see the full distribution;
quantizers clamp them into a single atom at zero via :meth:`clamp_profits`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from typing import IO, Iterable, Sequence

import numpy as np

from .errors import EmptyConditioningEvent, InputError

LOSSES_POSITIVE = "losses-positive"
PNL_SIGNED = "pnl-signed"

# Near-duplicate atoms (Monte Carlo output) are merged at this relative
# value tolerance; merging stabilizes conditional means.
_MERGE_RTOL = 1e-12
_WEIGHT_TOL = 1e-12
_DELIMITERS = (",", ";", "\t")


def _merge_atoms(values: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = weights[order]
    if v.size <= 1:
        return v.copy(), w.copy()
    gap = np.diff(v)
    thresh = _MERGE_RTOL * np.maximum(np.abs(v[:-1]), np.abs(v[1:]))
    group_id = np.concatenate(([0], np.cumsum(gap > thresh)))
    n_groups = int(group_id[-1]) + 1
    merged_w = np.bincount(group_id, weights=w, minlength=n_groups)
    merged_wv = np.bincount(group_id, weights=w * v, minlength=n_groups)
    return merged_wv / merged_w, merged_w


@dataclass(frozen=True)
class EmpiricalDistribution:
    """Weighted atoms of a loss sample, sorted ascending with ties merged.

    ``sample_size`` is the number of underlying (unmerged) observations; the
    k-of-S empirical quantile convention needs it even after tie merging.
    Instances are immutable and safe to share across threads.
    """

    values: np.ndarray
    weights: np.ndarray
    sample_size: int
    sign_convention: str = LOSSES_POSITIVE

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("distribution needs at least one atom")
        if values.shape != weights.shape:
            raise ValueError("values and weights must have equal length")
        if not (np.all(np.isfinite(values)) and np.all(np.isfinite(weights))):
            raise ValueError("atoms must be finite")
        if np.any(weights <= 0.0):
            raise ValueError("weights must be strictly positive")
        total = float(weights.sum())
        if abs(total - 1.0) > _WEIGHT_TOL:
            raise ValueError(f"weights must sum to 1 within {_WEIGHT_TOL} (got {total!r})")
        if np.any(np.diff(values) <= 0.0):
            raise ValueError("values must be strictly ascending (merge ties first)")
        if int(self.sample_size) < 1:
            raise ValueError("sample_size must be a positive integer")
        values.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "sample_size", int(self.sample_size))

    # -- construction -----------------------------------------------------

    @classmethod
    def from_samples(
        cls,
        samples: Iterable[float],
        sample_size: int | None = None,
        sign_convention: str = LOSSES_POSITIVE,
    ) -> "EmpiricalDistribution":
        """Equal-weight distribution (mass 1/S per observation), ties merged."""
        arr = np.asarray(list(samples) if not isinstance(samples, np.ndarray) else samples, dtype=float)
        if arr.size == 0:
            raise ValueError("empty sample")
        weights = np.full(arr.size, 1.0 / arr.size)
        v, w = _merge_atoms(arr, weights)
        return cls(v, w, sample_size if sample_size is not None else arr.size, sign_convention)

    @classmethod
    def from_atoms(
        cls,
        pairs: Iterable[tuple[float, float]],
        sample_size: int | None = None,
        sign_convention: str = LOSSES_POSITIVE,
    ) -> "EmpiricalDistribution":
        """Distribution from (value, weight) pairs; weights must sum to 1."""
        items = list(pairs)
        if not items:
            raise ValueError("empty atom list")
        values = np.array([v for v, _ in items], dtype=float)
        weights = np.array([w for _, w in items], dtype=float)
        v, w = _merge_atoms(values, weights)
        return cls(v, w, sample_size if sample_size is not None else len(v), sign_convention)

    # -- cached prefix statistics ------------------------------------------

    @cached_property
    def cum_weights(self) -> np.ndarray:
        """Prefix masses with a leading zero; final entry is exactly 1."""
        cw = np.concatenate(([0.0], np.cumsum(self.weights)))
        cw /= cw[-1]
        cw.flags.writeable = False
        return cw

    @cached_property
    def cum_weighted_values(self) -> np.ndarray:
        s = np.concatenate(([0.0], np.cumsum(self.weights * self.values)))
        s.flags.writeable = False
        return s

    @cached_property
    def cum_weighted_squares(self) -> np.ndarray:
        s = np.concatenate(([0.0], np.cumsum(self.weights * self.values**2)))
        s.flags.writeable = False
        return s

    # -- probability primitives ---------------------------------------------

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @property
    def n_atoms(self) -> int:
        return int(self.values.size)

    @property
    def min_value(self) -> float:
        return float(self.values[0])

    @property
    def max_value(self) -> float:
        return float(self.values[-1])

    def mean(self) -> float:
        return float(self.cum_weighted_values[-1])

    def second_moment(self) -> float:
        return float(self.cum_weighted_squares[-1])

    def variance(self) -> float:
        return max(self.second_moment() - self.mean() ** 2, 0.0)

    def cdf(self, z: float) -> float:
        """Right-continuous step function F(z) = P(X <= z)."""
        idx = int(np.searchsorted(self.values, z, side="right"))
        return float(self.cum_weights[idx])

    def tail_probability(self, a: float) -> float:
        """P(X > a)."""
        return 1.0 - self.cdf(a)

    def quantile(self, u: float) -> float:
        """Smallest atom value v with F(v) >= u, for u in (0, 1)."""
        if not 0.0 < u < 1.0:
            raise ValueError(f"quantile level must lie in (0, 1), got {u!r}")
        idx = int(np.searchsorted(self.cum_weights[1:], u, side="left"))
        return float(self.values[min(idx, self.n_atoms - 1)])

    def interval_moments(self, lower: float, upper: float = np.inf) -> tuple[float, float, float]:
        """(mass, sum w*x, sum w*x^2) over atoms in the half-open cell (lower, upper]."""
        i = int(np.searchsorted(self.values, lower, side="right"))
        j = self.n_atoms if np.isinf(upper) else int(np.searchsorted(self.values, upper, side="right"))
        if i >= j:
            return 0.0, 0.0, 0.0
        return (
            float(self.cum_weights[j] - self.cum_weights[i]),
            float(self.cum_weighted_values[j] - self.cum_weighted_values[i]),
            float(self.cum_weighted_squares[j] - self.cum_weighted_squares[i]),
        )

    def conditional_mean(self, lower: float, upper: float = np.inf) -> float:
        """E[X | lower < X <= upper]; upper may be +inf (meaning X > lower).

        Raises :class:`EmptyConditioningEvent` when no atom falls in the cell,
        so fixed-point iterations can trigger their re-initialization path.
        """
        if not lower < upper:
            raise ValueError("conditional_mean requires lower < upper")
        mass, first, _ = self.interval_moments(lower, upper)
        if mass <= 0.0:
            raise EmptyConditioningEvent(f"no mass in ({lower!r}, {upper!r}]")
        return first / mass

    # -- transforms ----------------------------------------------------------

    def clamp_profits(self) -> "EmpiricalDistribution":
        """Merge all negative (profit) atoms into a single atom at zero.

        Quantizers operate on the loss half-line; the pre-clamp distribution
        stays available to tail measures on the original object.
        """
        if self.values[0] >= 0.0:
            return self
        clipped = np.maximum(self.values, 0.0)
        v, w = _merge_atoms(clipped, self.weights)
        return EmpiricalDistribution(v, w, self.sample_size, self.sign_convention)

    def scale(self, c: float) -> "EmpiricalDistribution":
        if not c > 0.0:
            raise ValueError("scale factor must be positive")
        return EmpiricalDistribution(self.values * c, self.weights, self.sample_size, self.sign_convention)


# -- ingestion ---------------------------------------------------------------


def _read_text(source: str | IO[str]) -> str:
    if hasattr(source, "read"):
        return source.read()
    try:
        with open(source, "r", encoding="utf-8-sig") as fh:
            return fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {source!r}: {exc}") from exc


def _detect_delimiter(line: str) -> str | None:
    counts = {d: line.count(d) for d in _DELIMITERS}
    best = max(counts, key=counts.get)
    return best if counts[best] > 0 else None


def _is_number(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def load_pnl(
    source: str | IO[str],
    column: str | None = None,
    convention: str = PNL_SIGNED,
) -> EmpiricalDistribution:
    """Load a PnL/loss sample from delimited text into losses-positive form.

    The delimiter is auto-detected among comma, semicolon and tab; a
    one-column headerless file is accepted. With ``convention="pnl-signed"``
    each loss is the negated PnL; ``"losses-positive"`` takes values as-is.
    Every observation receives mass 1/S and ties are merged.
    """
    if convention not in (PNL_SIGNED, LOSSES_POSITIVE):
        raise InputError(f"unknown convention {convention!r}")
    text = _read_text(source)
    lines = [(n, ln) for n, ln in enumerate(text.splitlines(), start=1) if ln.strip()]
    if not lines:
        raise InputError("empty input: no data rows")

    delim = _detect_delimiter(lines[0][1])
    if delim is None:
        rows = [(n, [ln.strip()]) for n, ln in lines]
    else:
        reader = csv.reader((ln for _, ln in lines), delimiter=delim)
        rows = [(lines[i][0], [c.strip() for c in row]) for i, row in enumerate(reader)]

    header_row = rows[0][1]
    headerless = all(_is_number(c) for c in header_row if c != "")
    if headerless:
        if len(header_row) != 1:
            raise InputError("headerless input must have exactly one column")
        names = ["loss"]
        data_rows = rows
    else:
        names = header_row
        data_rows = rows[1:]
        if not data_rows:
            raise InputError("empty input: header only")

    if column is None:
        if len(names) != 1:
            raise InputError(f"column must be named for multi-column input (available: {names})")
        col_idx = 0
    else:
        if column not in names:
            raise InputError(f"unknown column {column!r} (available: {names})")
        col_idx = names.index(column)

    out = np.empty(len(data_rows))
    for k, (line_no, cells) in enumerate(data_rows):
        if col_idx >= len(cells):
            raise InputError(f"row {line_no}: missing column {names[col_idx]!r}")
        cell = cells[col_idx]
        try:
            out[k] = float(cell)
        except ValueError:
            raise InputError(
                f"non-numeric value {cell!r} at row {line_no}, column {names[col_idx]!r}"
            ) from None
    if convention == PNL_SIGNED:
        out = -out
    return EmpiricalDistribution.from_samples(out)


def dump_pnl(dist: EmpiricalDistribution, target: str | IO[str]) -> None:
    """Write the distribution back to a one-column losses-positive CSV.

    Atom weights are expanded into observation counts (weight times
    sample_size), so ``load_pnl(dump_pnl(d), convention="losses-positive")``
    reproduces ``d`` for any sample-born distribution.
    """
    counts = dist.weights * dist.sample_size
    rounded = np.rint(counts)
    if np.max(np.abs(counts - rounded)) > 1e-6:
        raise ValueError("weights are not multiples of 1/sample_size; cannot expand to rows")
    lines = ["loss"]
    for v, c in zip(dist.values, rounded.astype(int)):
        lines.extend([repr(float(v))] * c)
    payload = "\n".join(lines) + "\n"
    if hasattr(target, "write"):
        target.write(payload)
    else:
        with open(target, "w", encoding="utf-8") as fh:
            fh.write(payload)

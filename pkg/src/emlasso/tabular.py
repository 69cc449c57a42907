"""Observational data tables, term-based model specifications, CSV ingestion.

A table holds named covariate columns W, a binary treatment column A and a
real outcome column Y.  Model specifications are ordered lists of product
terms (optionally multiplied by the treatment) from which design matrices
are built, with the treatment value overridable so that fitted outcome
models can be evaluated at both treatment arms.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TabularError",
    "ObservationTable",
    "Term",
    "ModelSpec",
    "EmCandidateSet",
    "load_csv",
    "build_design",
    "parse_formula",
]


class TabularError(ValueError):
    """Raised for invalid tables, specs, or malformed CSV input."""


@dataclass(frozen=True)
class ObservationTable:
    """Immutable (W, A, Y) dataset with named covariate columns.

    Invariants enforced at construction: all columns share length n >= 2,
    treatment values are exactly 0 or 1, no missing values, and covariate
    names are unique and nonempty.
    """

    covariate_names: tuple[str, ...]
    covariates: np.ndarray  # shape (n, d), float
    treatment: np.ndarray   # shape (n,), values in {0, 1}
    outcome: np.ndarray     # shape (n,), float

    def __post_init__(self):
        cov = np.asarray(self.covariates, dtype=float)
        a = np.asarray(self.treatment, dtype=float)
        y = np.asarray(self.outcome, dtype=float)
        if cov.ndim != 2:
            raise TabularError("covariates must be a 2-d array")
        n = cov.shape[0]
        if n < 2:
            raise TabularError(f"need at least 2 rows, got {n}")
        if len(self.covariate_names) != cov.shape[1]:
            raise TabularError("covariate name count does not match column count")
        if len(set(self.covariate_names)) != len(self.covariate_names):
            raise TabularError("covariate names must be unique")
        if any(not name for name in self.covariate_names):
            raise TabularError("covariate names must be nonempty")
        if a.shape != (n,) or y.shape != (n,):
            raise TabularError("treatment/outcome length does not match covariates")
        if not np.all(np.isfinite(cov)) or not np.all(np.isfinite(y)):
            raise TabularError("missing or non-finite values are not allowed")
        bad = np.nonzero((a != 0.0) & (a != 1.0))[0]
        if bad.size:
            raise TabularError(f"treatment must be 0 or 1; bad value in row {bad[0]}")
        cov.setflags(write=False)
        a.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "treatment", a)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise TabularError(f"unknown covariate {name!r}") from None
        return self.covariates[:, j]

    def subset_columns(self, names) -> np.ndarray:
        """Covariate columns in the given order, as an (n, len(names)) matrix."""
        return np.column_stack([self.column(nm) for nm in names])


@dataclass(frozen=True)
class Term:
    """One design-matrix column: a product of covariates, optionally times A.

    The empty product with ``with_treatment=False`` is the intercept; with
    ``with_treatment=True`` it is the main treatment effect.
    """

    covariates: tuple[str, ...] = ()
    with_treatment: bool = False

    def label(self) -> str:
        parts = (["A"] if self.with_treatment else []) + list(self.covariates)
        return "*".join(parts) if parts else "1"


@dataclass(frozen=True)
class ModelSpec:
    """Ordered term list plus a response family ('linear' or 'logistic')."""

    terms: tuple[Term, ...]
    family: str = "linear"

    def __post_init__(self):
        terms = tuple(self.terms)
        if self.family not in ("linear", "logistic"):
            raise TabularError(f"unknown family {self.family!r}")
        n_intercept = sum(1 for t in terms if not t.covariates and not t.with_treatment)
        if n_intercept > 1:
            raise TabularError("at most one intercept term allowed")
        object.__setattr__(self, "terms", terms)

    def labels(self) -> list[str]:
        return [t.label() for t in self.terms]

    @property
    def uses_treatment(self) -> bool:
        return any(t.with_treatment for t in self.terms)


@dataclass(frozen=True)
class EmCandidateSet:
    """Ordered candidate effect modifiers; order is preserved in all outputs."""

    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        if len(set(names)) != len(names):
            raise TabularError("candidate names must be unique")
        object.__setattr__(self, "names", names)

    def validate_against(self, table: ObservationTable) -> None:
        for nm in self.names:
            if nm not in table.covariate_names:
                raise TabularError(f"candidate {nm!r} is not a covariate of the table")

    @property
    def p(self) -> int:
        return len(self.names)

    def matrix(self, table: ObservationTable) -> np.ndarray:
        return table.subset_columns(self.names)


def load_csv(path, treatment_name: str, outcome_name: str) -> ObservationTable:
    """Load a header-first CSV into an ObservationTable.

    All non-treatment, non-outcome columns become covariates, in file order.
    Errors name the offending row (1-based, excluding the header) and column.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TabularError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for required in (treatment_name, outcome_name):
            if required not in header:
                raise TabularError(f"{path}: missing column {required!r}")
        rows = []
        for irow, rec in enumerate(reader, start=1):
            if len(rec) != len(header):
                raise TabularError(
                    f"{path}: row {irow} has {len(rec)} fields, expected {len(header)}")
            vals = []
            for jcol, cell in enumerate(rec):
                cell = cell.strip()
                if cell == "":
                    raise TabularError(
                        f"{path}: missing value in row {irow}, column {header[jcol]!r}")
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise TabularError(
                        f"{path}: unparseable value {cell!r} in row {irow}, "
                        f"column {header[jcol]!r}") from None
            rows.append(vals)
    if not rows:
        raise TabularError(f"{path}: no data rows")
    data = np.array(rows, dtype=float)
    a_idx = header.index(treatment_name)
    y_idx = header.index(outcome_name)
    a = data[:, a_idx]
    bad = np.nonzero((a != 0.0) & (a != 1.0))[0]
    if bad.size:
        raise TabularError(
            f"{path}: treatment {treatment_name!r} must be 0 or 1; "
            f"bad value {a[bad[0]]!r} in row {bad[0] + 1}")
    cov_idx = [j for j in range(len(header)) if j not in (a_idx, y_idx)]
    return ObservationTable(
        covariate_names=tuple(header[j] for j in cov_idx),
        covariates=data[:, cov_idx],
        treatment=a,
        outcome=data[:, y_idx],
    )


def build_design(table: ObservationTable, spec: ModelSpec,
                 a_override: int | None = None) -> np.ndarray:
    """Design matrix with one column per spec term, in spec order.

    If ``a_override`` is 0 or 1, every treatment factor is replaced by that
    constant, so fitted outcome models can be evaluated at either arm.
    """
    if a_override not in (None, 0, 1):
        raise TabularError(f"a_override must be 0, 1 or None, got {a_override!r}")
    n = table.n
    if a_override is None:
        a_col = table.treatment
    else:
        a_col = np.full(n, float(a_override))
    cols = []
    for term in spec.terms:
        col = a_col.copy() if term.with_treatment else np.ones(n)
        for name in term.covariates:
            col = col * table.column(name)
        cols.append(col)
    return np.column_stack(cols) if cols else np.empty((n, 0))


def parse_formula(formula: str, family: str = "linear") -> ModelSpec:
    """Parse the term mini-language into a ModelSpec.

    Terms are separated by '+', factors within a term by '*'.  'A' is the
    reserved treatment symbol, '1' the intercept.  Example:
    ``1 + A + X + V1*V2*V3 + A*V1 + A*V3``.
    """
    terms = []
    for raw in formula.split("+"):
        raw = raw.strip()
        if not raw:
            raise TabularError(f"empty term in formula {formula!r}")
        factors = [f.strip() for f in raw.split("*")]
        if any(not f for f in factors):
            raise TabularError(f"empty factor in term {raw!r}")
        with_a = False
        covs = []
        for f in factors:
            if f == "1":
                if len(factors) > 1:
                    raise TabularError(f"'1' cannot appear in a product: {raw!r}")
            elif f == "A":
                if with_a:
                    raise TabularError(f"treatment appears twice in term {raw!r}")
                with_a = True
            else:
                covs.append(f)
        terms.append(Term(covariates=tuple(covs), with_treatment=with_a))
    return ModelSpec(terms=tuple(terms), family=family)

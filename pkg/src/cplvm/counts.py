"""Count matrices, gene sets, and count-level preprocessing.

Matrices are stored genes x cells. A :class:`ContrastivePair` holds the
background (control) and foreground (treatment) matrices over one shared
gene index.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.io
import scipy.sparse as sp

logger = logging.getLogger(__name__)

SIZE_VAR_FLOOR = 1e-6


class CountDataError(ValueError):
    """Raised for malformed count matrices, pairs, or gene-set files."""


def _check_unique(ids: Sequence[str], kind: str) -> None:
    seen: dict[str, int] = {}
    for pos, name in enumerate(ids):
        if name in seen:
            raise CountDataError(
                f"duplicate {kind} id {name!r} at positions {seen[name]} and {pos}"
            )
        seen[name] = pos


@dataclass(frozen=True, eq=False)
class CountMatrix:
    """Nonnegative integer genes x cells matrix with identifiers."""

    values: np.ndarray
    gene_ids: tuple[str, ...]
    cell_ids: tuple[str, ...]
    condition_tag: str = ""

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 2:
            raise CountDataError(f"expected a 2-D matrix, got shape {vals.shape}")
        if vals.shape[0] == 0:
            raise CountDataError("no genes")
        if not np.issubdtype(vals.dtype, np.integer):
            if not np.all(np.isfinite(vals)) or not np.all(vals == np.round(vals)):
                bad = np.argwhere(~np.isfinite(vals) | (vals != np.round(vals)))[0]
                raise CountDataError(
                    f"non-integer entry at gene row {bad[0]}, cell column {bad[1]}"
                )
        if vals.size and vals.min() < 0:
            bad = np.argwhere(vals < 0)[0]
            raise CountDataError(
                f"negative entry at gene row {bad[0]}, cell column {bad[1]}"
            )
        vals = vals.astype(np.int64)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "gene_ids", tuple(str(g) for g in self.gene_ids))
        object.__setattr__(self, "cell_ids", tuple(str(c) for c in self.cell_ids))
        if len(self.gene_ids) != vals.shape[0]:
            raise CountDataError(
                f"{len(self.gene_ids)} gene ids for {vals.shape[0]} rows"
            )
        if len(self.cell_ids) != vals.shape[1]:
            raise CountDataError(
                f"{len(self.cell_ids)} cell ids for {vals.shape[1]} columns"
            )
        _check_unique(self.gene_ids, "gene")
        _check_unique(self.cell_ids, "cell")

    @classmethod
    def from_array(cls, values, condition_tag: str = "", gene_prefix: str = "g",
                   cell_prefix: str | None = None) -> "CountMatrix":
        """Wrap an array with generated identifiers."""
        values = np.asarray(values)
        cell_prefix = cell_prefix if cell_prefix is not None else (condition_tag or "c") + "_"
        return cls(
            values,
            tuple(f"{gene_prefix}{i}" for i in range(values.shape[0])),
            tuple(f"{cell_prefix}{j}" for j in range(values.shape[1])),
            condition_tag,
        )

    @property
    def n_genes(self) -> int:
        return self.values.shape[0]

    @property
    def n_cells(self) -> int:
        return self.values.shape[1]

    @property
    def totals(self) -> np.ndarray:
        """Per-cell library sizes."""
        return self.values.sum(axis=0)

    def subset_genes(self, rows: Sequence[int]) -> "CountMatrix":
        rows = list(rows)
        return CountMatrix(
            self.values[rows], tuple(self.gene_ids[r] for r in rows),
            self.cell_ids, self.condition_tag,
        )

    def subset_cells(self, cols: Sequence[int]) -> "CountMatrix":
        cols = list(cols)
        return CountMatrix(
            self.values[:, cols], self.gene_ids,
            tuple(self.cell_ids[c] for c in cols), self.condition_tag,
        )

    def __eq__(self, other):
        if not isinstance(other, CountMatrix):
            return NotImplemented
        return (
            self.gene_ids == other.gene_ids
            and self.cell_ids == other.cell_ids
            and self.condition_tag == other.condition_tag
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass(frozen=True)
class ContrastivePair:
    """Background and foreground count matrices over the same genes."""

    background: CountMatrix
    foreground: CountMatrix

    def __post_init__(self):
        bg, fg = self.background, self.foreground
        if bg.gene_ids != fg.gene_ids:
            mismatches = [
                (i, a, b) for i, (a, b) in enumerate(zip(bg.gene_ids, fg.gene_ids)) if a != b
            ]
            msg = f"gene ids differ between background ({bg.n_genes}) and foreground ({fg.n_genes})"
            if mismatches:
                shown = ", ".join(f"row {i}: {a!r} vs {b!r}" for i, a, b in mismatches[:10])
                msg += f"; first discrepancies: {shown}"
            raise CountDataError(msg)
        if bg.n_cells < 1 or fg.n_cells < 1:
            raise CountDataError("both conditions need at least one cell")

    @classmethod
    def from_arrays(cls, background, foreground) -> "ContrastivePair":
        return cls(
            CountMatrix.from_array(background, "background", cell_prefix="b"),
            CountMatrix.from_array(foreground, "foreground", cell_prefix="f"),
        )

    @property
    def Y(self) -> np.ndarray:
        """Background counts, p x n."""
        return self.background.values

    @property
    def X(self) -> np.ndarray:
        """Foreground counts, p x m."""
        return self.foreground.values

    @property
    def gene_ids(self) -> tuple[str, ...]:
        return self.background.gene_ids

    @property
    def p(self) -> int:
        return self.background.n_genes

    @property
    def n(self) -> int:
        return self.background.n_cells

    @property
    def m(self) -> int:
        return self.foreground.n_cells

    def pooled(self) -> CountMatrix:
        """Column concatenation background | foreground."""
        return CountMatrix(
            np.hstack([self.Y, self.X]), self.gene_ids,
            self.background.cell_ids + self.foreground.cell_ids, "pooled",
        )

    def subset_genes(self, rows: Sequence[int]) -> "ContrastivePair":
        return ContrastivePair(self.background.subset_genes(rows),
                               self.foreground.subset_genes(rows))


@dataclass(frozen=True)
class SizeFactorPrior:
    """Log-normal prior over the per-cell size factors of one condition."""

    log_mean: float
    log_var: float

    def __post_init__(self):
        if not np.isfinite(self.log_mean):
            raise CountDataError("size prior log_mean must be finite")
        if not np.isfinite(self.log_var) or self.log_var < 0:
            raise CountDataError("size prior log_var must be finite and >= 0")

    def to_dict(self) -> dict:
        return {"log_mean": float(self.log_mean), "log_var": float(self.log_var)}


@dataclass(frozen=True)
class GeneSetCollection:
    """Named, ordered gene-id lists, as read from a GMT file."""

    sets: Mapping[str, tuple[str, ...]]
    descriptions: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name, genes in self.sets.items():
            if len(genes) == 0:
                raise CountDataError(f"gene set {name!r} is empty")

    def __len__(self):
        return len(self.sets)

    def __iter__(self):
        return iter(self.sets)

    def __getitem__(self, name: str) -> tuple[str, ...]:
        return self.sets[name]

    def resolve(self, name: str, gene_ids: Sequence[str]) -> tuple[list[int], list[str]]:
        """Map one set onto row indices; returns (sorted rows, unmatched ids)."""
        index = {g: i for i, g in enumerate(gene_ids)}
        rows, unmatched = set(), []
        for g in self.sets[name]:
            if g in index:
                rows.add(index[g])
            else:
                unmatched.append(g)
        return sorted(rows), unmatched


# -- I/O ---------------------------------------------------------------------


def _parse_count(token: str, row: int, col: int, path) -> int:
    token = token.strip()
    try:
        value = int(token)
    except ValueError:
        try:
            fval = float(token)
        except ValueError:
            raise CountDataError(
                f"{path}: unparseable entry {token!r} at gene row {row}, cell column {col}"
            ) from None
        if not np.isfinite(fval) or fval != round(fval):
            raise CountDataError(
                f"{path}: non-integer entry {token!r} at gene row {row}, cell column {col}"
            )
        value = int(fval)
    if value < 0:
        raise CountDataError(
            f"{path}: negative entry {value} at gene row {row}, cell column {col}"
        )
    return value


def _read_csv(path: Path, condition_tag: str) -> CountMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise CountDataError(f"{path}: no genes")
    header, data = rows[0], rows[1:]
    width = len(data[0])
    if len(header) == width:
        cell_ids = header[1:]
    elif len(header) == width - 1:
        cell_ids = header
    else:
        raise CountDataError(
            f"{path}: header has {len(header)} fields but rows have {width}"
        )
    gene_ids, values = [], []
    for r, line in enumerate(data):
        if len(line) != width:
            raise CountDataError(f"{path}: gene row {r} has {len(line)} fields, expected {width}")
        gene_ids.append(line[0])
        values.append([_parse_count(tok, r, c, path) for c, tok in enumerate(line[1:])])
    try:
        return CountMatrix(np.array(values, dtype=np.int64).reshape(len(data), width - 1),
                           tuple(gene_ids), tuple(cell_ids), condition_tag)
    except CountDataError as exc:
        raise CountDataError(f"{path}: {exc}") from None


def _sidecars(path: Path) -> tuple[Path, Path]:
    stem = path.with_suffix("")
    return Path(f"{stem}.rows.txt"), Path(f"{stem}.cols.txt")


def _read_ids(path: Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\r\n") for line in fh if line.strip()]


def _read_mtx(path: Path, condition_tag: str) -> CountMatrix:
    rows_path, cols_path = _sidecars(path)
    for side in (rows_path, cols_path):
        if not side.exists():
            raise CountDataError(f"{path}: missing id sidecar {side}")
    try:
        mat = scipy.io.mmread(str(path))
    except Exception as exc:  # scipy raises several types for bad headers
        raise CountDataError(f"{path}: cannot parse Matrix Market file ({exc})") from None
    dense = mat.toarray() if sp.issparse(mat) else np.asarray(mat)
    if dense.shape[0] == 0:
        raise CountDataError(f"{path}: no genes")
    try:
        return CountMatrix(dense, tuple(_read_ids(rows_path)), tuple(_read_ids(cols_path)),
                           condition_tag)
    except CountDataError as exc:
        raise CountDataError(f"{path}: {exc}") from None


def load_counts(path, format: str | None = None, condition_tag: str = "",
                drop_zero_cells: bool = False) -> CountMatrix:
    """Read a genes x cells count matrix from CSV or Matrix Market.

    Parameters
    ----------
    path : path-like
        CSV with a header of cell ids and gene ids in the first column, or a
        ``.mtx`` file with ``<stem>.rows.txt`` / ``<stem>.cols.txt`` sidecars.
    format : {"csv", "mtx"}, optional
        Inferred from the suffix when omitted.
    drop_zero_cells : bool
        Cells with zero total count are rejected unless this is set, in which
        case they are dropped with a warning.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "csv":
        matrix = _read_csv(path, condition_tag)
    elif fmt == "mtx":
        matrix = _read_mtx(path, condition_tag)
    else:
        raise CountDataError(f"unknown count format {fmt!r}")
    zero = np.flatnonzero(matrix.totals == 0)
    if zero.size:
        names = [matrix.cell_ids[c] for c in zero[:10]]
        if not drop_zero_cells:
            raise CountDataError(
                f"{path}: {zero.size} cell(s) with zero total count, e.g. {names}"
            )
        logger.warning("dropping %d zero-total cells from %s", zero.size, path)
        matrix = matrix.subset_cells(np.flatnonzero(matrix.totals > 0))
    return matrix


def save_counts(matrix: CountMatrix, path, format: str | None = None) -> None:
    """Write a count matrix; the inverse of :func:`load_counts`."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["gene", *matrix.cell_ids])
            for gid, row in zip(matrix.gene_ids, matrix.values):
                writer.writerow([gid, *row.tolist()])
    elif fmt == "mtx":
        rows_path, cols_path = _sidecars(path)
        coo = sp.coo_matrix(matrix.values)
        order = np.lexsort((coo.row, coo.col))
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("%%MatrixMarket matrix coordinate integer general\n")
            fh.write(f"{matrix.n_genes} {matrix.n_cells} {coo.nnz}\n")
            for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
                fh.write(f"{r + 1} {c + 1} {v}\n")
        rows_path.write_text("".join(f"{g}\n" for g in matrix.gene_ids), encoding="utf-8")
        cols_path.write_text("".join(f"{c}\n" for c in matrix.cell_ids), encoding="utf-8")
    else:
        raise CountDataError(f"unknown count format {fmt!r}")


def load_gene_sets(path) -> GeneSetCollection:
    """Parse a GMT file: ``name<TAB>description<TAB>gene<TAB>gene...`` per line."""
    sets: dict[str, tuple[str, ...]] = {}
    descriptions: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise CountDataError(
                    f"{path}:{lineno}: malformed GMT line ({len(fields)} fields, need >= 3)"
                )
            name = fields[0]
            genes = tuple(g for g in fields[2:] if g)
            if name in sets:
                raise CountDataError(f"{path}:{lineno}: duplicate set {name!r}")
            if not genes:
                raise CountDataError(f"{path}:{lineno}: gene set {name!r} is empty")
            sets[name] = genes
            descriptions[name] = fields[1]
    return GeneSetCollection(sets, descriptions)


def save_gene_sets(collection: GeneSetCollection, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for name, genes in collection.sets.items():
            desc = collection.descriptions.get(name, "")
            fh.write("\t".join([name, desc, *genes]) + "\n")


# -- preprocessing -----------------------------------------------------------


def poisson_deviance_per_gene(matrix: CountMatrix | np.ndarray) -> np.ndarray:
    """Deviance of the intercept-only Poisson model with library-size offsets.

    Gene ``g`` is fitted as ``mu[g, i] = n_i * pi_g`` with ``pi_g`` the gene's
    share of all counts; genes with no counts get deviance 0.
    """
    Y = np.asarray(matrix.values if isinstance(matrix, CountMatrix) else matrix, dtype=float)
    totals = Y.sum(axis=0)
    grand = totals.sum()
    if grand <= 0:
        raise CountDataError("all-zero matrix: deviance undefined")
    share = Y.sum(axis=1) / grand
    mu = share[:, None] * totals[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        log_term = np.where(Y > 0, Y * np.log(Y / mu), 0.0)
    dev = 2.0 * np.sum(log_term - (Y - mu), axis=1)
    return np.maximum(dev, 0.0)


def select_top_genes(pair: ContrastivePair, k: int = 500, using: str = "pooled") -> ContrastivePair:
    """Keep the ``k`` genes with the largest Poisson deviance.

    ``using`` picks the cells the deviance is computed on: ``"pooled"``,
    ``"background"`` or ``"foreground"``. Survivors keep their original order;
    ties go to the lower row index.
    """
    if k < 1 or k > pair.p:
        raise CountDataError(f"cannot select {k} genes from {pair.p}")
    source = {
        "pooled": lambda: pair.pooled(),
        "background": lambda: pair.background,
        "foreground": lambda: pair.foreground,
    }
    if using not in source:
        raise CountDataError(f"unknown gene-selection source {using!r}")
    dev = poisson_deviance_per_gene(source[using]())
    order = np.lexsort((np.arange(pair.p), -dev))
    keep = np.sort(order[:k])
    return pair.subset_genes(keep.tolist())


def empirical_size_prior(matrix: CountMatrix | np.ndarray) -> SizeFactorPrior:
    """Log-normal size prior from the mean and variance of log library sizes."""
    Y = matrix.values if isinstance(matrix, CountMatrix) else np.asarray(matrix)
    totals = Y.sum(axis=0).astype(float)
    if np.any(totals <= 0):
        raise CountDataError(
            f"{int(np.sum(totals <= 0))} cell(s) with zero total count; drop them first"
        )
    logs = np.log(totals)
    return SizeFactorPrior(float(logs.mean()), float(max(logs.var(), SIZE_VAR_FLOOR)))


def shuffle_conditions(pair: ContrastivePair, seed: int) -> ContrastivePair:
    """Pool all cells and repartition them at random, keeping n and m fixed."""
    rng = np.random.default_rng(seed)
    pooled = pair.pooled()
    perm = rng.permutation(pair.n + pair.m)
    bg = pooled.subset_cells(perm[: pair.n])
    fg = pooled.subset_cells(perm[pair.n:])
    return ContrastivePair(
        CountMatrix(bg.values, bg.gene_ids, bg.cell_ids, pair.background.condition_tag),
        CountMatrix(fg.values, fg.gene_ids, fg.cell_ids, pair.foreground.condition_tag),
    )


def resolve_gene_set(genes: Iterable[str], gene_ids: Sequence[str]) -> list[int]:
    """Row indices for ``genes``; raises listing every unmatched id."""
    index = {g: i for i, g in enumerate(gene_ids)}
    genes = list(genes)
    missing = [g for g in genes if g not in index]
    if missing:
        raise CountDataError(f"unresolved gene ids: {missing}")
    return sorted({index[g] for g in genes})

"""Datasets, file readers and train/val/test splitting.

Two dataset flavours share one small interface (``profile``, ``n_samples``,
``n_features``, ``batch(rows)``, ``labels``, ``subset(rows)``):

* :class:`CountMatrix` keeps integer counts sparse and densifies per batch.
* :class:`DenseDataset` holds values in [0, 1] for the binary profile.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from dgd.errors import DataError, DimensionError, ParseError


def encode_labels(labels):
    """Map free-form labels to contiguous ids in first-seen order."""
    names = []
    index = {}
    ids = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        lab = str(lab)
        if lab not in index:
            index[lab] = len(names)
            names.append(lab)
        ids[i] = index[lab]
    return ids, names


class CountMatrix:
    """Samples x genes nonnegative integer counts.

    ``scale`` holds each sample's maximum count; ``gene_mask`` marks the genes
    the model sees (by default those with a nonzero total).
    """

    profile = "counts"

    def __init__(self, matrix, gene_names=None, labels=None, gene_mask=None,
                 label_names=None):
        m = sp.csr_matrix(matrix, dtype=np.float64)
        m.sum_duplicates()
        m.eliminate_zeros()
        if m.shape[0] == 0:
            raise DataError("no samples")
        if m.nnz and (m.data.min() < 0 or np.any(m.data != np.round(m.data))):
            raise DataError("counts must be nonnegative integers")
        self.matrix = m
        self.scale = np.asarray(m.max(axis=1).todense()).ravel().astype(np.float64)
        empty = np.flatnonzero(self.scale <= 0)
        if empty.size:
            raise DataError(f"sample(s) with all-zero counts at index {empty.tolist()}")
        if gene_mask is None:
            gene_mask = np.asarray(m.sum(axis=0)).ravel() > 0
        gene_mask = np.asarray(gene_mask, dtype=bool)
        if gene_mask.shape != (m.shape[1],):
            raise DimensionError(f"gene mask length {gene_mask.size} != {m.shape[1]} genes")
        self.gene_mask = gene_mask
        self._cols = np.flatnonzero(gene_mask)
        self._masked = m[:, self._cols].tocsr()
        self.gene_names = list(gene_names) if gene_names is not None else None
        if labels is not None and label_names is None:
            labels, label_names = encode_labels(labels)
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (m.shape[0],):
                raise DataError(f"{labels.size} labels for {m.shape[0]} samples")
        self.labels = labels
        self.label_names = label_names

    @property
    def n_samples(self):
        return self.matrix.shape[0]

    @property
    def n_genes(self):
        return self.matrix.shape[1]

    @property
    def n_features(self):
        return self._cols.size

    def batch(self, rows):
        rows = np.asarray(rows, dtype=np.intp)
        return self._masked[rows].toarray(), self.scale[rows]

    def dense(self):
        return self._masked.toarray()

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.intp)
        labels = self.labels[rows] if self.labels is not None else None
        return CountMatrix(self.matrix[rows], self.gene_names, labels, self.gene_mask,
                           self.label_names)

    def with_mask(self, gene_mask):
        return CountMatrix(self.matrix, self.gene_names, self.labels, gene_mask,
                           self.label_names)

    def triplets(self):
        """Sorted (row, col, count) triplets of the full matrix."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return [(int(coo.row[i]), int(coo.col[i]), int(coo.data[i])) for i in order]


class DenseDataset:
    """Dense samples x features matrix with values in [0, 1]."""

    profile = "binary"

    def __init__(self, values, labels=None, label_names=None):
        v = np.array(values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] == 0:
            raise DataError("no samples")
        if np.any(np.isnan(v)) or v.min() < 0 or v.max() > 1:
            raise DataError("values must lie in [0, 1]")
        self.values = v
        if labels is not None and label_names is None:
            labels, label_names = encode_labels(labels)
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (v.shape[0],):
                raise DataError(f"{labels.size} labels for {v.shape[0]} samples")
        self.labels = labels
        self.label_names = label_names
        self.scale = None

    @property
    def n_samples(self):
        return self.values.shape[0]

    @property
    def n_features(self):
        return self.values.shape[1]

    def batch(self, rows):
        return self.values[np.asarray(rows, dtype=np.intp)], None

    def dense(self):
        return self.values

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.intp)
        labels = self.labels[rows] if self.labels is not None else None
        return DenseDataset(self.values[rows], labels, self.label_names)


def read_lines(path):
    """Newline-delimited entries (first tab-separated field); trailing blanks dropped."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\r\n") for ln in fh]
    while lines and not lines[-1].strip():
        lines.pop()
    return [ln.split("\t")[0] if "\t" in ln else ln for ln in lines]


def _parse_mtx(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        lineno = 1
        parts = header.strip().split()
        if len(parts) != 5 or parts[0].lower() != "%%matrixmarket":
            raise ParseError("missing %%MatrixMarket header", 1)
        obj, fmt, field, symmetry = (p.lower() for p in parts[1:])
        if obj != "matrix" or fmt != "coordinate":
            raise ParseError(f"unsupported format '{obj} {fmt}', need 'matrix coordinate'", 1)
        if field not in ("integer", "real"):
            raise ParseError(f"unsupported field type {field!r}", 1)
        if symmetry != "general":
            raise ParseError(f"unsupported symmetry {symmetry!r}", 1)
        size = None
        for line in fh:
            lineno += 1
            s = line.strip()
            if not s or s.startswith("%"):
                continue
            size = s.split()
            break
        if size is None or len(size) != 3:
            raise ParseError("missing size line", lineno)
        try:
            n_rows, n_cols, nnz = (int(x) for x in size)
        except ValueError:
            raise ParseError(f"bad size line {' '.join(size)!r}", lineno) from None
        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz, dtype=np.float64)
        k = 0
        for line in fh:
            lineno += 1
            s = line.strip()
            if not s or s.startswith("%"):
                continue
            if k >= nnz:
                raise ParseError(f"more entries than the declared {nnz}", lineno)
            fields = s.split()
            if len(fields) != 3:
                raise ParseError(f"expected 3 fields, got {len(fields)}", lineno)
            try:
                i, j = int(fields[0]), int(fields[1])
                v = float(fields[2])
            except ValueError:
                raise ParseError(f"non-numeric entry {s!r}", lineno) from None
            if not (1 <= i <= n_rows and 1 <= j <= n_cols):
                raise ParseError(f"index ({i}, {j}) outside {n_rows}x{n_cols}", lineno)
            if not math.isfinite(v) or v != round(v):
                raise ParseError(f"non-integral value {fields[2]}", lineno)
            if v < 0:
                raise ParseError(f"negative count {fields[2]}", lineno)
            rows[k], cols[k], vals[k] = i - 1, j - 1, v
            k += 1
        if k != nnz:
            raise ParseError(f"expected {nnz} entries, found {k}", lineno)
    return sp.coo_matrix((vals, (rows, cols)), shape=(n_rows, n_cols)).tocsr()


def load_mtx(matrix_path, genes_path=None, labels_path=None, orientation="auto"):
    """Read a Matrix Market coordinate file into a samples x genes CountMatrix.

    ``orientation`` is "auto", "samples-rows" or "samples-cols".  In auto
    mode the sample axis is inferred from the label / gene file lengths and
    defaults to rows.
    """
    m = _parse_mtx(matrix_path)
    genes = read_lines(genes_path) if genes_path else None
    labels = read_lines(labels_path) if labels_path else None
    n_rows, n_cols = m.shape
    if orientation == "auto":
        transpose = False
        if labels is not None and len(labels) != n_rows and len(labels) == n_cols:
            transpose = True
        elif labels is None and genes is not None and len(genes) != n_cols \
                and len(genes) == n_rows:
            transpose = True
    elif orientation in ("samples-rows", "samples-cols"):
        transpose = orientation == "samples-cols"
    else:
        raise ValueError(f"unknown orientation {orientation!r}")
    if transpose:
        m = m.T.tocsr()
    if m.shape[0] == 0 or m.nnz == 0:
        raise DataError("no samples")
    if labels is not None and len(labels) != m.shape[0]:
        raise ParseError(f"label file has {len(labels)} lines for {m.shape[0]} samples",
                         len(labels))
    if genes is not None and len(genes) != m.shape[1]:
        raise ParseError(f"gene file has {len(genes)} lines for {m.shape[1]} genes",
                         len(genes))
    return CountMatrix(m, gene_names=genes, labels=labels)


def save_mtx(counts, path):
    """Write the full (unmasked) counts as integer coordinate Matrix Market."""
    trip = counts.triplets()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("%%MatrixMarket matrix coordinate integer general\n")
        fh.write(f"{counts.n_samples} {counts.n_genes} {len(trip)}\n")
        for i, j, v in trip:
            fh.write(f"{i + 1} {j + 1} {v}\n")


def load_dense_csv(path, rescale_255=False, labels_path=None, header="auto"):
    """Numeric CSV, one sample per row.  A non-numeric first row is a header
    when ``header="auto"``."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            try:
                rows.append([float(c) for c in rec])
            except ValueError:
                if lineno == 1 and header in ("auto", True):
                    continue
                raise ParseError(f"non-numeric cell in {rec!r}", lineno) from None
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(f"expected {len(rows[0])} columns, got {len(rows[-1])}",
                                 lineno)
    if not rows:
        raise DataError("no samples")
    values = np.asarray(rows, dtype=np.float64)
    if rescale_255:
        values = values / 255.0
    if values.min() < 0 or values.max() > 1:
        raise DataError(
            f"values outside [0, 1] (range {values.min()}..{values.max()}); "
            "use rescale_255 for 0-255 data")
    labels = read_lines(labels_path) if labels_path else None
    if labels is not None and len(labels) != values.shape[0]:
        raise ParseError(f"label file has {len(labels)} lines for {values.shape[0]} samples",
                         len(labels))
    return DenseDataset(values, labels=labels)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if min(fr) < 0:
            raise DataError(f"split fractions must be >= 0, got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise DataError(f"split fractions must sum to 1, got {fr}")


def split(n_samples, spec, rng):
    """Seeded partition into sorted (train, val, test) index arrays.

    Sizes: floor(train * N), floor(val * N), remainder to test.
    """
    if not isinstance(spec, SplitSpec):
        spec = SplitSpec(*spec)
    n = int(n_samples)
    n_train = int(math.floor(spec.train * n + 1e-9))
    n_val = int(math.floor(spec.val * n + 1e-9))
    n_val = min(n_val, n - n_train)
    perm = rng.permutation(n)
    return (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
            np.sort(perm[n_train + n_val:]))

"""Clustering and reconstruction metrics, and the evaluation report."""

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from dgd import autodiff as ad
from dgd.decoder import nb_point_metrics, per_cell_rmse
from dgd.errors import ContractError
from dgd.gmm import hard_assign

REPORT_COLUMNS = ("model", "split", "ARI", "NLL_mean", "NLL_sem", "RMSE_mean", "RMSE_sem",
                  "seconds")


@dataclass
class ContingencyTable:
    table: np.ndarray
    row_sums: np.ndarray
    col_sums: np.ndarray
    n: int

    @classmethod
    def from_labels(cls, labels_a, labels_b):
        a = np.asarray(labels_a)
        b = np.asarray(labels_b)
        if a.shape != b.shape or a.ndim != 1:
            raise ContractError(f"label arrays must be 1-d and equal length, got {a.shape} vs {b.shape}")
        _, ia = np.unique(a, return_inverse=True)
        _, ib = np.unique(b, return_inverse=True)
        table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
        np.add.at(table, (ia, ib), 1)
        return cls(table, table.sum(axis=1), table.sum(axis=0), int(a.size))


def _pairs(x):
    x = np.asarray(x, dtype=np.int64)
    return int((x * (x - 1) // 2).sum())


def adjusted_rand_index(labels_a, labels_b):
    """Adjusted Rand index from the contingency table.

    All pair counts are exact integers and the result is formed by a single
    final division.
    """
    if len(labels_a) != len(labels_b):
        raise ContractError(f"label lengths differ: {len(labels_a)} vs {len(labels_b)}")
    if len(labels_a) < 2:
        raise ContractError("ARI needs at least two samples")
    ct = ContingencyTable.from_labels(labels_a, labels_b)
    index = _pairs(ct.table.ravel())
    sa = _pairs(ct.row_sums)
    sb = _pairs(ct.col_sums)
    total = ct.n * (ct.n - 1) // 2
    # (index - sa*sb/total) / ((sa+sb)/2 - sa*sb/total), scaled by 2*total
    num = 2 * (index * total - sa * sb)
    den = (sa + sb) * total - 2 * sa * sb
    if den == 0:
        return 1.0
    return num / den


def sem(x):
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        return 0.0
    return float(np.std(x, ddof=1) / np.sqrt(x.size))


def evaluate(bundle, dataset, Z, model_name="dgd", split_name="train",
             rmse_space="normalized", seconds=None, chunk=1024):
    """Metrics row for one split given fitted representations ``Z``.

    ARI is "n/a" when the dataset has no labels.  NLL is the per-sample
    negative log-likelihood (negative binomial for counts, BCE for binary).
    """
    t0 = time.perf_counter()
    Z = np.asarray(Z, dtype=np.float64)
    N = dataset.n_samples
    nll = np.empty(N)
    rmse = np.empty(N)
    with ad.no_grad():
        for start in range(0, N, chunk):
            rows = np.arange(start, min(N, start + chunk))
            x, scale = dataset.batch(rows)
            pred = bundle.decoder(Z[rows]).values
            if dataset.profile == "counts":
                nll[rows], _ = nb_point_metrics(pred, x, scale, bundle.head, rmse_space)
                rmse[rows] = per_cell_rmse(pred, x, scale, rmse_space)
            else:
                p = np.clip(pred, ad.PROB_EPS, 1.0 - ad.PROB_EPS)
                nll[rows] = -(x * np.log(p) + (1.0 - x) * np.log(1.0 - p)).sum(axis=1)
                rmse[rows] = np.sqrt(np.mean((pred - x) ** 2, axis=1))
    if dataset.labels is not None and N >= 2:
        ari = adjusted_rand_index(dataset.labels, hard_assign(bundle.gmm, Z))
    else:
        ari = "n/a"
    if seconds is None:
        seconds = time.perf_counter() - t0
    return {
        "model": model_name,
        "split": split_name,
        "ARI": ari,
        "NLL_mean": float(nll.mean()),
        "NLL_sem": sem(nll),
        "RMSE_mean": float(rmse.mean()),
        "RMSE_sem": sem(rmse),
        "seconds": float(seconds),
    }


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report_csv(rows, path_or_buf):
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="", encoding="utf-8") if own else path_or_buf
    try:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
    finally:
        if own:
            fh.close()


def format_report(rows):
    """Fixed-width table for terminal output."""
    out = io.StringIO()
    header = f"{'model':<12}{'split':<8}{'ARI':>8}{'NLL':>22}{'RMSE':>24}{'sec':>9}"
    out.write(header + "\n")
    for r in rows:
        ari = r["ARI"] if isinstance(r["ARI"], str) else f"{r['ARI']:.4f}"
        nll = f"{r['NLL_mean']:.3f} +- {r['NLL_sem']:.3f}"
        rmse = f"{r['RMSE_mean']:.4f} +- {r['RMSE_sem']:.4f}"
        out.write(f"{r['model']:<12}{r['split']:<8}{ari:>8}{nll:>22}{rmse:>24}"
                  f"{r['seconds']:>9.2f}\n")
    return out.getvalue()

import csv
import io
import itertools
from fractions import Fraction

import numpy as np
import pytest

from dgd.errors import ContractError
from dgd.metrics import (REPORT_COLUMNS, ContingencyTable, adjusted_rand_index, format_report,
                         sem, write_report_csv)


def pair_count_ari(a, b):
    """ARI from an explicit loop over all sample pairs (exact rationals)."""
    n = len(a)
    both = only_a = only_b = 0
    for i, j in itertools.combinations(range(n), 2):
        sa, sb = a[i] == a[j], b[i] == b[j]
        both += sa and sb
        only_a += sa and not sb
        only_b += sb and not sa
    total = n * (n - 1) // 2
    pairs_a, pairs_b = both + only_a, both + only_b
    expected = Fraction(pairs_a * pairs_b, total)
    max_index = Fraction(pairs_a + pairs_b, 2)
    if max_index == expected:
        return 1.0
    return float((both - expected) / (max_index - expected))


def test_identical_partitions():
    assert adjusted_rand_index([0, 0, 1, 2, 2], [5, 5, 3, 9, 9]) == 1.0


def test_four_sevenths_exact():
    assert adjusted_rand_index([0, 0, 1, 1], [0, 0, 1, 2]) == 4 / 7


def test_one_cluster_vs_singletons_is_zero():
    assert adjusted_rand_index([0, 0, 0, 0], [0, 1, 2, 3]) == 0.0


def test_against_pair_count_oracle():
    rng = np.random.default_rng(7)
    for _ in range(200):
        n = int(rng.integers(2, 61))
        a = rng.integers(0, rng.integers(1, 8), size=n)
        b = rng.integers(0, rng.integers(1, 8), size=n)
        assert abs(adjusted_rand_index(a, b) - pair_count_ari(a, b)) <= 1e-12


def test_symmetry_and_relabeling():
    rng = np.random.default_rng(3)
    a = rng.integers(0, 4, size=40)
    b = rng.integers(0, 3, size=40)
    assert adjusted_rand_index(a, b) == adjusted_rand_index(b, a)
    relabel = np.array([7, 2, 9, 0])
    assert adjusted_rand_index(relabel[a], b) == adjusted_rand_index(a, b)


def test_string_labels():
    assert adjusted_rand_index(["x", "x", "y", "y"], [1, 1, 0, 0]) == 1.0


def test_errors():
    with pytest.raises(ContractError):
        adjusted_rand_index([0, 1], [0, 1, 2])
    with pytest.raises(ContractError):
        adjusted_rand_index([0], [0])


def test_contingency_margins():
    ct = ContingencyTable.from_labels([0, 0, 1, 1, 1], [1, 0, 0, 0, 2])
    assert ct.table.sum() == ct.n == 5
    np.testing.assert_array_equal(ct.row_sums, [2, 3])
    np.testing.assert_array_equal(ct.col_sums, [3, 1, 1])


def test_sem_definition():
    x = np.array([1.0, 2.0, 4.0, 7.0])
    assert sem(x) == pytest.approx(np.std(x, ddof=1) / 2)
    assert sem([3.0]) == 0.0


def test_report_csv_schema_and_table():
    row = {"model": "dgd", "split": "test", "ARI": "n/a", "NLL_mean": 1.5, "NLL_sem": 0.1,
           "RMSE_mean": 0.2, "RMSE_sem": 0.01, "seconds": 3.0}
    buf = io.StringIO()
    write_report_csv([row], buf)
    lines = list(csv.reader(io.StringIO(buf.getvalue())))
    assert tuple(lines[0]) == REPORT_COLUMNS
    assert lines[1][2] == "n/a" and float(lines[1][3]) == 1.5
    assert "n/a" in format_report([row])

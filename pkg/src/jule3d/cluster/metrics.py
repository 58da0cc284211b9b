"""Partition comparison and plain-text partition dumps."""

from pathlib import Path

import numpy as np

from ..exceptions import IoFailure, LengthMismatch


def contingency(a, b):
    """Joint counts of two labelings; rows follow sorted ids of ``a``."""
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def _entropy(counts, total):
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def nmi(a, b):
    """Normalized mutual information ``I(a; b) / sqrt(H(a) H(b))`` (natural log).

    Two single-cluster labelings score 1; if exactly one is single-cluster
    the score is 0.
    """
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise LengthMismatch(f"labelings have {a.size} and {b.size} entries")
    if a.size == 0:
        raise LengthMismatch("labelings are empty")
    table = contingency(a, b)
    n = float(a.size)
    ha = _entropy(table.sum(axis=1), n)
    hb = _entropy(table.sum(axis=0), n)
    if ha == 0.0 and hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    nz = table > 0
    pij = table[nz] / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))[nz] / (n * n)
    mi = float((pij * np.log(pij / outer)).sum())
    return float(np.clip(mi / np.sqrt(ha * hb), 0.0, 1.0))


def save_partition(labels, path):
    """One label per line, preceded by a ``# n=<count> m=<clusters>`` header."""
    labels = np.asarray(labels, dtype=np.int64)
    lines = [f"# n={labels.size} m={np.unique(labels).size}"] + [str(v) for v in labels.tolist()]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_partition(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    return np.array([int(v) for v in rows], dtype=np.int64)

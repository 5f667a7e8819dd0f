"""Pedigrees and additive relationship matrices.

The dense relationship matrix is built with the recursive tabular method;
its inverse is assembled directly from parent triplets (Henderson's rules
with Meuwissen-Luo inbreeding coefficients), so A never has to be inverted.
"""

from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import PedigreeError

UNKNOWN = ("", "0")


@dataclass(frozen=True)
class Pedigree:
    """Individuals in topological order (parents precede offspring).

    ``sire`` and ``dam`` hold integer positions, ``-1`` for unknown.
    """

    ids: tuple
    sire: np.ndarray
    dam: np.ndarray
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "index", {k: i for i, k in enumerate(self.ids)})
        for i in range(len(self.ids)):
            if self.sire[i] >= i or self.dam[i] >= i:
                raise PedigreeError("pedigree is not topologically sorted")

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[Hashable, Hashable | None, Hashable | None]]) -> "Pedigree":
        """Build a pedigree from ``(id, sire, dam)`` rows in any order.

        Unknown parents may be given as ``None``, ``""`` or ``"0"``.
        """
        rows = list(rows)
        order: list = []
        parents: dict = {}
        for ind, s, d in rows:
            if ind in parents:
                raise PedigreeError(f"duplicate individual: {ind}")
            order.append(ind)
            parents[ind] = tuple(None if _is_unknown(p) else p for p in (s, d))
        for ind, (s, d) in parents.items():
            for p in (s, d):
                if p is not None and p not in parents:
                    raise PedigreeError(f"unknown parent: {p} (of {ind})")

        # Kahn's algorithm; ties resolved by input position for a stable order
        pos = {ind: i for i, ind in enumerate(order)}
        children: dict = {ind: [] for ind in order}
        pending = {}
        for ind, (s, d) in parents.items():
            known = {p for p in (s, d) if p is not None}
            pending[ind] = len(known)
            for p in known:
                children[p].append(ind)
        heap = [pos[ind] for ind in order if pending[ind] == 0]
        heapq.heapify(heap)
        sorted_ids = []
        while heap:
            ind = order[heapq.heappop(heap)]
            sorted_ids.append(ind)
            for c in children[ind]:
                pending[c] -= 1
                if pending[c] == 0:
                    heapq.heappush(heap, pos[c])
        if len(sorted_ids) != len(order):
            raise PedigreeError("cyclic pedigree")

        index = {ind: i for i, ind in enumerate(sorted_ids)}
        sire = np.array([index[parents[i][0]] if parents[i][0] is not None else -1 for i in sorted_ids], dtype=np.int64)
        dam = np.array([index[parents[i][1]] if parents[i][1] is not None else -1 for i in sorted_ids], dtype=np.int64)
        return cls(tuple(sorted_ids), sire, dam)

    def rows(self) -> list[tuple]:
        return [
            (ind, self.ids[s] if s >= 0 else None, self.ids[d] if d >= 0 else None)
            for ind, s, d in zip(self.ids, self.sire, self.dam)
        ]

    def with_ancestors(self, ids: Iterable[Hashable]) -> "Pedigree":
        """Sub-pedigree holding ``ids`` and all their ancestors."""
        keep = set()
        stack = []
        for ind in ids:
            if ind not in self.index:
                raise PedigreeError(f"unknown individual: {ind}")
            stack.append(self.index[ind])
        while stack:
            i = stack.pop()
            if i in keep:
                continue
            keep.add(i)
            for p in (self.sire[i], self.dam[i]):
                if p >= 0:
                    stack.append(int(p))
        return Pedigree.from_rows([r for i, r in enumerate(self.rows()) if i in keep])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "sire", "dam"])
            for ind, s, d in self.rows():
                w.writerow([ind, "" if s is None else s, "" if d is None else d])


def _is_unknown(p) -> bool:
    if p is None:
        return True
    if isinstance(p, str):
        return p.strip() in UNKNOWN
    return False


def load_pedigree(path: str | Path) -> Pedigree:
    """Read a ``id,sire,dam`` CSV; empty field or ``0`` marks an unknown parent."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"id", "sire", "dam"} - set(reader.fieldnames or ())
        if missing:
            raise PedigreeError(f"column not found: {', '.join(sorted(missing))}")
        rows = [(r["id"].strip(), r["sire"].strip(), r["dam"].strip()) for r in reader]
    return Pedigree.from_rows(rows)


@dataclass(frozen=True)
class RelationshipMatrix:
    """Symmetric sparse matrix stored as its lower triangle (CSC).

    Rows and columns follow pedigree order.
    """

    lower: sp.csc_matrix
    ids: tuple

    @property
    def shape(self):
        return self.lower.shape

    def full(self) -> sp.csc_matrix:
        diag = sp.diags(self.lower.diagonal())
        return (self.lower + self.lower.T - diag).tocsc()

    def toarray(self) -> np.ndarray:
        return self.full().toarray()

    def subset(self, ids: Sequence[Hashable]) -> "RelationshipMatrix":
        pos = {k: i for i, k in enumerate(self.ids)}
        sel = np.array([pos[k] for k in ids], dtype=np.int64)
        sub = self.full()[sel][:, sel]
        return RelationshipMatrix(sp.tril(sub, format="csc"), tuple(ids))

    def write_coo(self, path: str | Path) -> None:
        """Write ``i j value`` lines (1-based, lower triangle, column-major)."""
        coo = self.lower.tocoo()
        order = np.lexsort((coo.row, coo.col))
        with open(path, "w", encoding="utf-8") as fh:
            for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
                fh.write(f"{r + 1} {c + 1} {v:.17g}\n")


def additive_relationship_dense(ped: Pedigree) -> np.ndarray:
    """Tabular method; O(n^2) memory."""
    n = len(ped)
    A = np.zeros((n, n))
    for i in range(n):
        s, d = ped.sire[i], ped.dam[i]
        if i:
            row = np.zeros(i)
            if s >= 0:
                row += 0.5 * A[:i, s]
            if d >= 0:
                row += 0.5 * A[:i, d]
            A[i, :i] = row
            A[:i, i] = row
        A[i, i] = 1.0 + (0.5 * A[s, d] if s >= 0 and d >= 0 else 0.0)
    return A


def additive_relationship(ped: Pedigree) -> RelationshipMatrix:
    A = additive_relationship_dense(ped)
    return RelationshipMatrix(sp.tril(sp.csc_matrix(A), format="csc"), ped.ids)


def inbreeding(ped: Pedigree) -> np.ndarray:
    """Inbreeding coefficients by the Meuwissen-Luo ancestor walk.

    Uses ``A = L D L'``: for each individual the nonzero entries of its row
    of ``L`` are accumulated over ancestors, visited from youngest to oldest.
    """
    n = len(ped)
    F = np.zeros(n)
    D = np.zeros(n)
    for i in range(n):
        s, d = ped.sire[i], ped.dam[i]
        Fs = F[s] if s >= 0 else -1.0
        Fd = F[d] if d >= 0 else -1.0
        D[i] = 0.5 - 0.25 * (Fs + Fd)
        if s < 0 or d < 0:
            continue
        acc = {i: 1.0}
        heap = [-i]
        total = 0.0
        while heap:
            j = -heapq.heappop(heap)
            lij = acc.pop(j)
            total += lij * lij * D[j]
            for p in (ped.sire[j], ped.dam[j]):
                if p < 0:
                    continue
                p = int(p)
                if p not in acc:
                    acc[p] = 0.0
                    heapq.heappush(heap, -p)
                acc[p] += 0.5 * lij
        F[i] = total - 1.0
    return F


def mendelian_variances(ped: Pedigree, F: np.ndarray | None = None) -> np.ndarray:
    if F is None:
        F = inbreeding(ped)
    Fs = np.where(ped.sire >= 0, F[np.maximum(ped.sire, 0)], -1.0)
    Fd = np.where(ped.dam >= 0, F[np.maximum(ped.dam, 0)], -1.0)
    return 0.5 - 0.25 * (Fs + Fd)


def a_inverse(ped: Pedigree) -> RelationshipMatrix:
    """Sparse inverse of A from parent-triplet contributions."""
    n = len(ped)
    alpha = 1.0 / mendelian_variances(ped)
    rows, cols, vals = [], [], []
    for i in range(n):
        a = alpha[i]
        members = [(i, 1.0)] + [(int(p), -0.5) for p in (ped.sire[i], ped.dam[i]) if p >= 0]
        for r, wr in members:
            for c, wc in members:
                if r >= c:
                    rows.append(r)
                    cols.append(c)
                    vals.append(a * wr * wc)
    lower = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
    lower.sum_duplicates()
    return RelationshipMatrix(lower, ped.ids)

"""Exact K-nearest-neighbor search under the Euclidean metric.

Three interchangeable backends return bit-identical results:

* ``brute``: all-pairs distances, chunked over queries.
* ``grid``: uniform cell hashing with ring expansion; a query is settled once
  its k-th candidate is strictly closer than every unsearched cell.
* ``kdtree``: scipy KD-tree candidates re-ranked exactly, brute force for
  rows whose k-th neighbor sits on the candidate boundary.

Rows are ordered by (distance, reference index), so coincident points come
out lowest index first.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError

BRUTE_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class NeighborIndex:
    indices: np.ndarray  # Q x K int64
    distances: np.ndarray  # Q x K float64, ascending per row

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def __len__(self) -> int:
        return self.indices.shape[0]


def _as_points(x) -> np.ndarray:
    pos = getattr(x, "positions", x)
    pos = np.asarray(pos)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ArgumentError(f"expected N x 3 coordinates, got shape {pos.shape}")
    return pos


def squared_distances(queries: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Q x N squared distances, evaluated coordinate by coordinate.

    The fixed evaluation order is what lets the two backends agree bit for bit.
    """
    dx = queries[:, None, 0] - reference[None, :, 0]
    d2 = dx * dx
    dy = queries[:, None, 1] - reference[None, :, 1]
    d2 += dy * dy
    dz = queries[:, None, 2] - reference[None, :, 2]
    d2 += dz * dz
    return d2


def knn_brute(reference, queries, k: int) -> NeighborIndex:
    ref = _as_points(reference)
    qry = _as_points(queries)
    _check(ref, qry, k)
    q = qry.shape[0]
    idx = np.empty((q, k), dtype=np.int64)
    d2k = np.empty((q, k), dtype=ref.dtype)
    step = max(1, BRUTE_CHUNK_ELEMS // max(1, ref.shape[0]))
    for s in range(0, q, step):
        d2 = squared_distances(qry[s:s + step], ref)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        idx[s:s + step] = order
        d2k[s:s + step] = np.take_along_axis(d2, order, axis=1)
    return NeighborIndex(idx, np.sqrt(d2k))


def _check(ref, qry, k):
    if ref.shape[0] == 0:
        raise ArgumentError("reference cloud is empty")
    if qry.shape[0] == 0:
        raise ArgumentError("query cloud is empty")
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    if k > ref.shape[0]:
        raise ArgumentError(f"k={k} exceeds reference size {ref.shape[0]}")


class UniformGrid:
    """Cell hash over a fixed reference set; build once, query from any thread."""

    def __init__(self, reference, points_per_cell: float = 8.0):
        ref = _as_points(reference)
        if ref.shape[0] == 0:
            raise ArgumentError("reference cloud is empty")
        self.ref = ref
        n = ref.shape[0]
        lo = ref.min(axis=0)
        span = ref.max(axis=0) - lo
        live = span > 0
        if not live.any():
            h = 1.0
        else:
            vol = float(np.prod(span[live]))
            h = (vol * points_per_cell / n) ** (1.0 / int(live.sum()))
            h = max(h, float(span[live].max()) / 1024.0)
        self.origin = lo
        self.h = h
        cells = np.floor((ref - lo) / h).astype(np.int64)
        self.dims = cells.max(axis=0) + 1
        lin = self._linear(cells)
        self.order = np.argsort(lin, kind="stable")
        sorted_lin = lin[self.order]
        self.cell_ids, self.starts = np.unique(sorted_lin, return_index=True)
        self.ends = np.append(self.starts[1:], n)
        self.cell_coords = cells[self.order[self.starts]]

    def _linear(self, cells):
        return (cells[:, 0] * self.dims[1] + cells[:, 1]) * self.dims[2] + cells[:, 2]

    def _members(self, lo, hi):
        """Reference indices in the cell box [lo, hi] (inclusive, clipped), ascending."""
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, self.dims - 1)
        if (lo > hi).any():
            return np.empty(0, dtype=np.int64)
        if np.prod(hi - lo + 1) > len(self.cell_ids):
            inside = ((self.cell_coords >= lo) & (self.cell_coords <= hi)).all(axis=1)
            pos = np.flatnonzero(inside)
            if len(pos) == 0:
                return np.empty(0, dtype=np.int64)
            parts = [self.order[self.starts[p]:self.ends[p]] for p in pos]
            return np.sort(np.concatenate(parts))
        xs = np.arange(lo[0], hi[0] + 1)
        ys = np.arange(lo[1], hi[1] + 1)
        zs = np.arange(lo[2], hi[2] + 1)
        lin = ((xs[:, None, None] * self.dims[1] + ys[None, :, None]) * self.dims[2]
               + zs[None, None, :]).ravel()
        pos = np.minimum(np.searchsorted(self.cell_ids, lin), len(self.cell_ids) - 1)
        pos = pos[self.cell_ids[pos] == lin]
        if len(pos) == 0:
            return np.empty(0, dtype=np.int64)
        parts = [self.order[self.starts[p]:self.ends[p]] for p in pos]
        return np.sort(np.concatenate(parts))

    def query(self, queries, k: int, deadline=None) -> NeighborIndex:
        qry = _as_points(queries)
        _check(self.ref, qry, k)
        q = qry.shape[0]
        out_idx = np.empty((q, k), dtype=np.int64)
        out_d2 = np.empty((q, k), dtype=self.ref.dtype)
        qcell = np.floor((qry - self.origin) / self.h).astype(np.int64)
        occupancy = int((self.ends - self.starts).max())
        if 27 * occupancy >= self.ref.shape[0]:
            # degenerate clustering: the padded table would beat brute force in size only
            res = knn_brute(self.ref, qry, k)
            return res
        pending = self._query_block(qry, qcell, k, out_idx, out_d2, deadline)
        if len(pending):
            self._query_rings(qry, qcell, k, out_idx, out_d2, pending, deadline)
        return NeighborIndex(out_idx, np.sqrt(out_d2))

    def _table(self):
        if getattr(self, "_padded", None) is None:
            counts = self.ends - self.starts
            table = np.full((len(counts) + 1, int(counts.max())), -1, dtype=np.int64)
            col = np.arange(self.ref.shape[0]) - np.repeat(self.starts, counts)
            table[np.repeat(np.arange(len(counts)), counts), col] = self.order
            self._padded = table
        return self._padded

    def _query_block(self, qry, qcell, k, out_idx, out_d2, deadline):
        """Single 3x3x3 pass for every query; returns the rows it could not certify."""
        table = self._table()
        empty = table.shape[0] - 1
        offs = np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij"), -1).reshape(-1, 3)
        width = table.shape[1] * 27
        if k > width:
            return np.arange(qry.shape[0])
        chunk = max(1, (1 << 21) // width)
        pending = []
        for s in range(0, qry.shape[0], chunk):
            if deadline is not None:
                deadline.check()
            rows = np.arange(s, min(s + chunk, qry.shape[0]))
            c = qcell[rows][:, None, :] + offs[None, :, :]  # m x 27 x 3
            inside = ((c >= 0) & (c < self.dims)).all(axis=2)
            lin = (c[..., 0] * self.dims[1] + c[..., 1]) * self.dims[2] + c[..., 2]
            pos = np.minimum(np.searchsorted(self.cell_ids, lin), len(self.cell_ids) - 1)
            hit = inside & (self.cell_ids[pos] == lin)
            pos = np.where(hit, pos, empty)
            cand = table[pos].reshape(len(rows), -1)  # m x (27*M), -1 padded
            valid = cand >= 0
            rc = self.ref[np.where(valid, cand, 0)]
            p = qry[rows]
            dx = p[:, None, 0] - rc[:, :, 0]
            d2 = dx * dx
            dy = p[:, None, 1] - rc[:, :, 1]
            d2 += dy * dy
            dz = p[:, None, 2] - rc[:, :, 2]
            d2 += dz * dz
            d2[~valid] = np.inf
            enough = valid.sum(axis=1) >= k
            part = np.argpartition(d2, k - 1, axis=1)[:, :k]
            d2k = np.take_along_axis(d2, part, axis=1)
            kth = d2k.max(axis=1)
            unique_edge = (d2 <= kth[:, None]).sum(axis=1) == k
            box_lo = self.origin + (qcell[rows] - 1) * self.h
            box_hi = self.origin + (qcell[rows] + 2) * self.h
            margin = np.minimum(p - box_lo, box_hi - p).min(axis=1)
            margin = margin * (1.0 - 1e-9) - 1e-12 * (1.0 + np.abs(p).max(axis=1))
            ok = enough & unique_edge & (margin > 0) & (kth < margin * margin)
            ck = np.take_along_axis(cand, part, axis=1)
            srt = np.lexsort((ck, d2k), axis=-1)
            out_idx[rows[ok]] = np.take_along_axis(ck, srt, axis=1)[ok]
            out_d2[rows[ok]] = np.take_along_axis(d2k, srt, axis=1)[ok]
            pending.append(rows[~ok])
        return np.concatenate(pending)

    def _query_rings(self, qry, qcell, k, out_idx, out_d2, pending, deadline):
        # rings needed before a query's box covers the whole grid
        reach = np.maximum(qcell, self.dims - 1 - qcell).max(axis=1)
        shift = max(0, -int(qcell.min()))
        width = self.dims + shift + int(max(0, (qcell - self.dims + 1).max())) + 1

        ring = 1
        while len(pending):
            if deadline is not None:
                deadline.check()
            cells = qcell[pending] + shift
            lin = (cells[:, 0] * width[1] + cells[:, 1]) * width[2] + cells[:, 2]
            grp_order = np.argsort(lin, kind="stable")
            _, grp_start = np.unique(lin[grp_order], return_index=True)
            grp_end = np.append(grp_start[1:], len(pending))
            unresolved = []
            for gs, ge in zip(grp_start, grp_end):
                members = pending[grp_order[gs:ge]]
                c = qcell[members[0]]
                exhaustive = ring >= reach[members[0]]
                cand = self._members(c - ring, c + ring)
                if len(cand) < k:
                    unresolved.append(members)
                    continue
                d2 = squared_distances(qry[members], self.ref[cand])
                top = np.argsort(d2, axis=1, kind="stable")[:, :k]
                d2top = np.take_along_axis(d2, top, axis=1)
                if exhaustive:
                    ok = np.ones(len(members), dtype=bool)
                else:
                    box_lo = self.origin + (c - ring) * self.h
                    box_hi = self.origin + (c + ring + 1) * self.h
                    p = qry[members]
                    margin = np.minimum(p - box_lo, box_hi - p).min(axis=1)
                    margin = margin * (1.0 - 1e-9) - 1e-12 * (1.0 + np.abs(p).max(axis=1))
                    ok = (margin > 0) & (d2top[:, -1] < margin * margin)
                done = members[ok]
                out_idx[done] = cand[top[ok]]
                out_d2[done] = d2top[ok]
                if not ok.all():
                    unresolved.append(members[~ok])
            pending = np.concatenate(unresolved) if unresolved else np.empty(0, dtype=np.int64)
            ring += max(1, ring // 2)


def knn_grid(reference, queries, k: int, deadline=None) -> NeighborIndex:
    return UniformGrid(reference).query(queries, k, deadline=deadline)


KDTREE_EXTRA = 8


def knn_kdtree(reference, queries, k: int) -> NeighborIndex:
    """KD-tree candidates, re-ranked with the shared distance formula.

    The tree returns ``k + KDTREE_EXTRA`` candidates per query. A row is kept
    when its k-th exact distance is strictly below the farthest candidate
    (so no outside point can tie or beat it); other rows go to brute force.
    """
    from scipy.spatial import cKDTree

    ref = _as_points(reference)
    qry = _as_points(queries)
    _check(ref, qry, k)
    n = ref.shape[0]
    m = min(n, k + KDTREE_EXTRA)
    _, cand = cKDTree(ref).query(qry, k=[*range(1, m + 1)])
    cand = cand.astype(np.int64)
    d2 = np.zeros(cand.shape, dtype=ref.dtype)
    for c in range(3):
        t = qry[:, None, c] - ref[cand, c]
        d2 += t * t
    order = np.lexsort((cand, d2), axis=-1)
    cand = np.take_along_axis(cand, order, axis=1)
    d2 = np.take_along_axis(d2, order, axis=1)
    idx, dist = cand[:, :k].copy(), np.sqrt(d2[:, :k])
    if m < n:
        bad = np.flatnonzero(~(d2[:, k - 1] < d2[:, -1] * (1.0 - 1e-9)))
        if len(bad):
            fix = knn_brute(ref, qry[bad], k)
            idx[bad] = fix.indices
            dist[bad] = fix.distances
    return NeighborIndex(idx, dist)


BACKENDS = {"brute": knn_brute, "grid": knn_grid, "kdtree": knn_kdtree}


def knn(reference, queries, k: int, backend: str = "auto") -> NeighborIndex:
    """Exact k nearest reference points for every query.

    ``backend="auto"`` picks brute force for small problems and the KD-tree
    otherwise; every backend produces identical output.
    """
    ref = _as_points(reference)
    qry = _as_points(queries)
    if backend == "auto":
        backend = "brute" if ref.shape[0] * qry.shape[0] <= 1 << 16 else "kdtree"
    try:
        fn = BACKENDS[backend]
    except KeyError:
        raise ArgumentError(f"unknown knn backend {backend!r}") from None
    return fn(ref, qry, k)


def nearest_one(reference, queries, backend: str = "auto") -> NeighborIndex:
    return knn(reference, queries, 1, backend=backend)

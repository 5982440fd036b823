"""Finite abstractions of a perturbed discrete-time vehicle on uniform grids.

The state box is partitioned into half-open cells of uniform width per
dimension.  A one-step reachable set is over-approximated per (cell, input)
pair by exact interval arithmetic on the vehicle dynamics; the abstract
transition relation maps each pair to the set of cells that intersect the
image box, with a distinguished OUT flag when the image leaves the box in a
non-periodic dimension.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import GridMismatch, PointOutOfDomain

TWO_PI = 2.0 * np.pi

_TILE_RTOL = 1e-9


class GridSpec:
    """Uniform hyper-rectangular partition of a box, with periodic dimensions.

    Cells are half-open [lo, lo + eta) along every dimension.  In non-periodic
    dimensions the top face of the box belongs to the last cell, so every
    point of the closed box has exactly one cell.  Periodic dimensions wrap
    points into [lower, upper) before quantization.
    """

    def __init__(self, lower, upper, eta, periodic=None):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=np.float64)).copy()
        self.upper = np.atleast_1d(np.asarray(upper, dtype=np.float64)).copy()
        self.eta = np.atleast_1d(np.asarray(eta, dtype=np.float64)).copy()
        self.dims = self.lower.size
        if periodic is None:
            periodic = [False] * self.dims
        self.periodic = np.atleast_1d(np.asarray(periodic, dtype=bool)).copy()
        if not (self.upper.size == self.eta.size == self.periodic.size == self.dims):
            raise GridMismatch("lower/upper/eta/periodic lengths disagree")
        if np.any(self.upper <= self.lower):
            raise GridMismatch("upper must exceed lower in every dimension")
        if np.any(self.eta <= 0):
            raise GridMismatch("eta must be positive in every dimension")
        span = self.upper - self.lower
        n = np.rint(span / self.eta)
        if np.any(n < 1) or np.any(np.abs(n * self.eta - span) > _TILE_RTOL * span):
            raise GridMismatch(
                f"eta {tuple(self.eta)} does not tile the box spans {tuple(span)}"
            )
        self.shape = tuple(int(k) for k in n)
        self.n_cells = int(np.prod(self.shape))
        # row-major strides
        strides = np.ones(self.dims, dtype=np.int64)
        for d in range(self.dims - 2, -1, -1):
            strides[d] = strides[d + 1] * self.shape[d + 1]
        self.strides = strides

    @classmethod
    def from_target_eta(cls, lower, upper, eta, periodic=None):
        """Build a grid whose cell count per dimension is round(span / eta).

        The realized eta is span / n, the closest exactly-tiling width to the
        requested one.  Nominal widths like 0.25 on a 2*pi span are accepted
        this way.
        """
        lower = np.atleast_1d(np.asarray(lower, dtype=np.float64))
        upper = np.atleast_1d(np.asarray(upper, dtype=np.float64))
        eta = np.atleast_1d(np.asarray(eta, dtype=np.float64))
        span = upper - lower
        n = np.maximum(1, np.floor(span / eta + 0.5).astype(np.int64))
        return cls(lower, upper, span / n, periodic)

    def multi(self, flat):
        """Multi-index of a flat cell index."""
        return tuple(int(i) for i in np.unravel_index(int(flat), self.shape))

    def flat(self, multi):
        """Flat index of a multi-index."""
        return int(np.ravel_multi_index(tuple(int(i) for i in multi), self.shape))

    def wrap_point(self, point):
        """Wrap periodic coordinates into [lower, upper); others unchanged."""
        p = np.asarray(point, dtype=np.float64).copy()
        span = self.upper - self.lower
        w = self.periodic
        p[w] = self.lower[w] + np.mod(p[w] - self.lower[w], span[w])
        return p

    def quantize(self, point):
        """Flat index of the cell containing `point`.

        Boundary points at a cell's upper face belong to the next cell, except
        the box's top face in non-periodic dimensions, which belongs to the
        last cell.  Raises PointOutOfDomain when a non-periodic coordinate
        falls outside the closed box.
        """
        p = self.wrap_point(point)
        if p.size != self.dims:
            raise PointOutOfDomain(f"point has {p.size} coordinates, grid has {self.dims}")
        rel = p - self.lower
        span = self.upper - self.lower
        bad = ~self.periodic & ((rel < 0) | (rel > span))
        if np.any(bad):
            d = int(np.nonzero(bad)[0][0])
            raise PointOutOfDomain(f"coordinate {p[d]} outside [{self.lower[d]}, {self.upper[d]}] in dimension {d}")
        idx = np.floor(rel / self.eta).astype(np.int64)
        # top face of the box and float overshoot land in the last cell
        idx = np.minimum(idx, np.asarray(self.shape) - 1)
        idx = np.maximum(idx, 0)
        return int((idx * self.strides).sum())

    def quantize_many(self, points):
        """Vectorized quantize for an (n, dims) array of in-box points."""
        p = np.asarray(points, dtype=np.float64)
        rel = p - self.lower
        span = self.upper - self.lower
        w = self.periodic
        rel[:, w] = np.mod(rel[:, w], span[w])
        if np.any(~w & ((rel < 0) | (rel > span))):
            raise PointOutOfDomain("some points fall outside the box")
        idx = np.floor(rel / self.eta).astype(np.int64)
        idx = np.clip(idx, 0, np.asarray(self.shape) - 1)
        return idx @ self.strides

    def cell_interval(self, flat):
        """Closed axis-aligned box [lo, lo + eta] of a cell."""
        m = np.asarray(self.multi(flat), dtype=np.float64)
        lo = self.lower + m * self.eta
        hi = self.lower + (m + 1.0) * self.eta
        return lo, hi

    def cell_center(self, flat):
        lo, hi = self.cell_interval(flat)
        return (lo + hi) / 2.0

    def __eq__(self, other):
        return (
            isinstance(other, GridSpec)
            and self.shape == other.shape
            and np.array_equal(self.lower, other.lower)
            and np.array_equal(self.upper, other.upper)
            and np.array_equal(self.eta, other.eta)
            and np.array_equal(self.periodic, other.periodic)
        )

    def __repr__(self):
        return f"GridSpec(shape={self.shape}, lower={self.lower.tolist()}, upper={self.upper.tolist()})"

    def _canonical_bytes(self):
        return b"".join([
            struct.pack("<i", self.dims),
            self.lower.tobytes(),
            self.upper.tobytes(),
            self.eta.tobytes(),
            self.periodic.astype(np.uint8).tobytes(),
        ])


class InputGrid:
    """Finite list of input points, in a fixed lexicographic order."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if len(np.unique(pts, axis=0)) != len(pts):
            raise ValueError("input points must be pairwise distinct")
        self.points = pts

    @classmethod
    def from_values(cls, *value_lists):
        """Cartesian product of per-dimension value lists, lexicographic order."""
        grids = np.meshgrid(*[np.asarray(v, dtype=np.float64) for v in value_lists], indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        return cls(pts)

    def nearest(self, point):
        """Index of the grid point closest to `point` (Euclidean, ties to the lowest index)."""
        p = np.asarray(point, dtype=np.float64)
        d2 = ((self.points - p) ** 2).sum(axis=1)
        return int(np.argmin(d2))

    def __len__(self):
        return len(self.points)

    def __getitem__(self, i):
        return self.points[int(i)]

    def __eq__(self, other):
        return isinstance(other, InputGrid) and np.array_equal(self.points, other.points)

    def _canonical_bytes(self):
        return struct.pack("<ii", *self.points.shape) + self.points.tobytes()


@dataclass
class DisturbanceBox:
    """Centered box of additive disturbances, one half-width per dimension."""

    radius: np.ndarray

    def __init__(self, radius):
        self.radius = np.atleast_1d(np.asarray(radius, dtype=np.float64)).copy()
        if np.any(self.radius < 0):
            raise ValueError("disturbance half-widths must be nonnegative")

    def sample(self, rng, n=None):
        if n is None:
            return rng.uniform(-self.radius, self.radius)
        return rng.uniform(-self.radius, self.radius, size=(n, self.radius.size))


@dataclass
class DubinsParams:
    """Sampling time and disturbance box of the vehicle model."""

    tau: float
    disturbance: DisturbanceBox

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def wrap_angle(theta):
    """Wrap an angle (or array) into [-pi, pi)."""
    return np.mod(theta + np.pi, TWO_PI) - np.pi


def dubins_step(state, u, w, params: DubinsParams):
    """One exact step of the vehicle: planar position plus heading.

    x' = x + v cos(theta) tau + w1, y' = y + v sin(theta) tau + w2,
    theta' = theta + a tau + w3 wrapped into [-pi, pi).
    """
    x, y, th = float(state[0]), float(state[1]), float(state[2])
    v, a = float(u[0]), float(u[1])
    w1, w2, w3 = float(w[0]), float(w[1]), float(w[2])
    t = params.tau
    th_new = th + a * t + w3
    if not (-np.pi <= th_new < np.pi):  # wrap only off-range: zero motion stays exact
        th_new = float(wrap_angle(th_new))
    return (
        x + v * np.cos(th) * t + w1,
        y + v * np.sin(th) * t + w2,
        th_new,
    )


def _contains_angle(lo, hi, c):
    # true where some c + 2*pi*k lies in [lo, hi]
    return np.floor((hi - c) / TWO_PI) >= np.ceil((lo - c) / TWO_PI)


def cos_bounds(lo, hi):
    """Tight [min, max] of cos over the closed interval [lo, hi] (vectorized)."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    cl, ch = np.cos(lo), np.cos(hi)
    mx = np.where(_contains_angle(lo, hi, 0.0), 1.0, np.maximum(cl, ch))
    mn = np.where(_contains_angle(lo, hi, np.pi), -1.0, np.minimum(cl, ch))
    return mn, mx


def sin_bounds(lo, hi):
    """Tight [min, max] of sin over the closed interval [lo, hi]."""
    return cos_bounds(lo - np.pi / 2.0, hi - np.pi / 2.0)


def reach_overapprox(cell_box, u, params: DubinsParams):
    """Interval image of a state box under one vehicle step, all disturbances.

    `cell_box` is a (lo, hi) pair of length-3 vectors.  The returned (lo, hi)
    box contains every dubins_step(x, u, w) with x in the box and w in the
    disturbance box.  The heading interval of the result is not wrapped.
    """
    lo = np.asarray(cell_box[0], dtype=np.float64)
    hi = np.asarray(cell_box[1], dtype=np.float64)
    v, a = float(u[0]), float(u[1])
    t = params.tau
    w = params.disturbance.radius
    cmin, cmax = cos_bounds(lo[2], hi[2])
    smin, smax = sin_bounds(lo[2], hi[2])
    dx = np.array([v * cmin, v * cmax]) * t
    dy = np.array([v * smin, v * smax]) * t
    out_lo = np.array([
        lo[0] + dx.min() - w[0],
        lo[1] + dy.min() - w[1],
        lo[2] + a * t - w[2],
    ])
    out_hi = np.array([
        hi[0] + dx.max() + w[0],
        hi[1] + dy.max() + w[1],
        hi[2] + a * t + w[2],
    ])
    return out_lo, out_hi


class BoxedAbstraction:
    """Grid abstraction whose post-sets are boxes of cells.

    The image of every (cell, input) pair is an axis-aligned box, so the
    successor set is stored as per-dimension index ranges: a clipped
    [start, start + length) range for non-periodic dimensions and a wrapped
    start plus length for periodic ones.  Containment and intersection tests
    against a state set are box sums over a prefix-sum table, with periodic
    axes tiled twice so wrapped ranges stay contiguous.
    """

    def __init__(self, grid: GridSpec, inputs: InputGrid, params: DubinsParams,
                 starts, lengths, out, reach_radius=None):
        self.grid = grid
        self.inputs = inputs
        self.params = params
        self.n_states = grid.n_cells
        self.n_inputs = len(inputs)
        self.starts = starts          # (n_states, n_inputs, dims) int16, in-box
        self.lengths = lengths        # (n_states, n_inputs, dims) int16, >= 0
        self.out = out                # (n_states, n_inputs) bool
        self.volumes = lengths.astype(np.int64).prod(axis=2)
        # per-dimension reach radius bounding how far any successor box extends
        # from its source cell; dilation-restricted rescans rely on it
        shape = np.asarray(grid.shape, dtype=np.int64)
        if reach_radius is None:
            reach_radius = self._radius_from_ranges()
        radius = np.asarray(reach_radius, dtype=np.int64).copy()
        per = grid.periodic
        radius[per] = np.minimum(radius[per], shape[per] // 2 + 1)
        radius[~per] = np.minimum(radius[~per], shape[~per] - 1)
        self.reach_radius = radius
        # flat corner indices into the (fixed-shape) prefix table, precomputed
        # so box sums are pure gathers
        pre_shape = np.where(per, 2 * shape, shape) + 1
        pstrides = np.ones(grid.dims, dtype=np.int64)
        for d in range(grid.dims - 2, -1, -1):
            pstrides[d] = pstrides[d + 1] * pre_shape[d + 1]
        self._pre_shape = tuple(int(v) for v in pre_shape)
        self._corner_lo = (starts.astype(np.int32) * pstrides.astype(np.int32)).reshape(-1, grid.dims)
        self._corner_hi = ((starts + lengths).astype(np.int32) * pstrides.astype(np.int32)).reshape(-1, grid.dims)
        self._hash = None

    def _radius_from_ranges(self):
        # conservative fallback: exact offsets for non-periodic dimensions,
        # full circle for periodic ones (wrapped starts hide the true offset)
        shape = np.asarray(self.grid.shape, dtype=np.int64)
        radius = shape.copy()
        per = self.grid.periodic
        cell_multi = np.stack(np.unravel_index(np.arange(self.n_states), self.grid.shape), axis=1)
        for d in range(self.grid.dims):
            if per[d]:
                continue
            lo_off = self.starts[:, :, d].astype(np.int64) - cell_multi[:, d][:, None]
            hi_off = lo_off + self.lengths[:, :, d].astype(np.int64) - 1
            radius[d] = max(int(np.abs(lo_off).max()), int(np.abs(hi_off).max()))
        return radius

    # -- bulk primitives used by the synthesis fixed points ---------------

    def _prefix(self, member):
        """Flat zero-padded prefix sums of a membership array, periodic axes doubled."""
        a = member.reshape(self.grid.shape).astype(np.int32)
        for d in range(self.grid.dims):
            if self.grid.periodic[d]:
                a = np.concatenate([a, a], axis=d)
        p = np.zeros(self._pre_shape, dtype=np.int32)
        p[tuple(slice(1, None) for _ in range(self.grid.dims))] = a
        for d in range(self.grid.dims):
            np.cumsum(p, axis=d, out=p)
        return p.reshape(-1)

    def _box_sums(self, flat, pair_idx):
        """Inclusion-exclusion box sums for the given flat pair indices."""
        dims = self.grid.dims
        lo = self._corner_lo[pair_idx]
        hi = self._corner_hi[pair_idx]
        total = np.zeros(lo.shape[0], dtype=np.int32)
        for corner in range(1 << dims):
            idx = np.zeros(lo.shape[0], dtype=np.int32)
            bits = 0
            for d in range(dims):
                if corner >> d & 1:
                    idx += hi[:, d]
                    bits += 1
                else:
                    idx += lo[:, d]
            if (dims - bits) % 2 == 0:
                total += flat[idx]
            else:
                total -= flat[idx]
        return total

    def _pair_indices(self, rows):
        return (rows[:, None] * self.n_inputs + np.arange(self.n_inputs)).reshape(-1)

    def pair_subset_mask(self, member, rows=None):
        """Per-pair test: every in-box successor lies in `member`.

        OUT pairs report on their clipped in-box part only; callers mask OUT
        separately.  With `rows`, only those state rows are tested and other
        rows report False.
        """
        flat = self._prefix(member)
        if rows is None:
            sums = self._box_sums(flat, slice(None))
            return sums.reshape(self.n_states, self.n_inputs) == self.volumes
        res = np.zeros((self.n_states, self.n_inputs), dtype=bool)
        sums = self._box_sums(flat, self._pair_indices(rows)).reshape(len(rows), self.n_inputs)
        res[rows] = sums == self.volumes[rows]
        return res

    def pair_hits(self, removed, within=None, row_alive=None):
        """Pairs whose successor box intersects `removed`, as (rows, hits).

        `rows` are the state indices that can possibly be affected (a dilation
        of the removed set by the reach radius, optionally restricted to
        `within`); `hits` is (len(rows), n_inputs).  States outside `rows`
        cannot hit.  `row_alive(rows) -> (len(rows), n_inputs) bool` narrows
        the test to pairs the caller still cares about; untested pairs report
        no hit.
        """
        cand = self._dilate(removed)
        if within is not None:
            cand &= within
        rows = np.nonzero(cand)[0]
        if len(rows) == 0:
            return rows, np.zeros((0, self.n_inputs), dtype=bool)
        flat = self._prefix(removed)
        if row_alive is None:
            sums = self._box_sums(flat, self._pair_indices(rows)).reshape(len(rows), self.n_inputs)
            return rows, sums > 0
        alive = row_alive(rows)
        pos_r, pos_u = np.nonzero(alive)
        pair_idx = rows[pos_r] * self.n_inputs + pos_u
        hits = np.zeros((len(rows), self.n_inputs), dtype=bool)
        hits[pos_r, pos_u] = self._box_sums(flat, pair_idx) > 0
        return rows, hits

    def _dilate(self, member):
        """Box dilation of a state set by the reach radius, wrapping periodic axes."""
        a = member.reshape(self.grid.shape)
        for d in range(self.grid.dims):
            r = int(self.reach_radius[d])
            if r == 0:
                continue
            acc = a.copy()
            if self.grid.periodic[d]:
                for s in range(1, r + 1):
                    acc |= np.roll(a, s, axis=d)
                    acc |= np.roll(a, -s, axis=d)
            else:
                for s in range(1, r + 1):
                    src_fwd = [slice(None)] * self.grid.dims
                    dst_fwd = [slice(None)] * self.grid.dims
                    src_fwd[d] = slice(0, a.shape[d] - s)
                    dst_fwd[d] = slice(s, None)
                    acc[tuple(dst_fwd)] |= a[tuple(src_fwd)]
                    src_bwd = [slice(None)] * self.grid.dims
                    dst_bwd = [slice(None)] * self.grid.dims
                    src_bwd[d] = slice(s, None)
                    dst_bwd[d] = slice(0, a.shape[d] - s)
                    acc[tuple(dst_bwd)] |= a[tuple(src_bwd)]
            a = acc
        return a.reshape(-1)

    # -- per-pair queries --------------------------------------------------

    def post(self, cell, u):
        """Successor set of one (cell, input) pair as (sorted flat indices, out flag)."""
        st = self.starts[cell, u]
        ln = self.lengths[cell, u]
        if np.any(ln == 0):
            return np.empty(0, dtype=np.int64), bool(self.out[cell, u])
        axes = []
        for d in range(self.grid.dims):
            idx = np.arange(st[d], st[d] + ln[d], dtype=np.int64)
            if self.grid.periodic[d]:
                idx %= self.grid.shape[d]
            axes.append(idx)
        mesh = np.meshgrid(*axes, indexing="ij")
        flat = sum(m.astype(np.int64) * s for m, s in zip(mesh, self.grid.strides)).ravel()
        return np.sort(flat), bool(self.out[cell, u])

    def successor_blocks(self, block=4096):
        """Yield (counts, out_flags, values) over pair blocks for serialization.

        `values` concatenates the successor lists of the block's pairs in pair
        order, each list sorted; flat indices are expanded from the stored
        per-dimension ranges a block at a time.
        """
        dims = self.grid.dims
        shape = np.asarray(self.grid.shape, dtype=np.int64)
        periodic = self.grid.periodic
        strides = self.grid.strides
        starts = self.starts.reshape(-1, dims)
        lengths = self.lengths.reshape(-1, dims)
        out = self.out.reshape(-1)
        n_pairs = starts.shape[0]
        for ofs in range(0, n_pairs, block):
            st = starts[ofs:ofs + block].astype(np.int64)
            ln = lengths[ofs:ofs + block].astype(np.int64)
            counts = ln.prod(axis=1)
            caps = tuple(int(c) for c in ln.max(axis=0))
            mesh = np.meshgrid(*[np.arange(c, dtype=np.int64) for c in caps], indexing="ij")
            flat = np.zeros((st.shape[0],) + caps, dtype=np.int64)
            valid = np.ones_like(flat, dtype=bool)
            expand = (slice(None),) + (None,) * dims
            for d in range(dims):
                idx = st[:, d][expand] + mesh[d][None]
                if periodic[d]:
                    idx = idx % shape[d]
                flat += idx * strides[d]
                valid &= mesh[d][None] < ln[:, d][expand]
            k = st.shape[0]
            values = flat.reshape(k, -1)[valid.reshape(k, -1)]
            pair_of = np.repeat(np.arange(k, dtype=np.int64), counts)
            order = np.lexsort((values, pair_of))
            yield counts, out[ofs:ofs + block], values[order]

    @property
    def content_hash(self):
        """Hex digest identifying the transition relation; lazy."""
        if self._hash is None:
            h = hashlib.sha256()
            h.update(b"PSHD-boxed")
            h.update(self.grid._canonical_bytes())
            h.update(self.inputs._canonical_bytes())
            h.update(self.starts.tobytes())
            h.update(self.lengths.tobytes())
            h.update(self.out.tobytes())
            self._hash = h.hexdigest()
        return self._hash


class ExplicitAbstraction:
    """Abstract system with explicitly listed successor sets.

    Used for hand-built automata, randomized test systems, and abstractions
    loaded back from disk.  Successor lists are stored in one flat array with
    per-pair offsets.
    """

    def __init__(self, n_states, n_inputs, indptr, succ, out,
                 inputs: InputGrid | None = None, grid: GridSpec | None = None):
        self.n_states = int(n_states)
        self.n_inputs = int(n_inputs)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.succ = np.asarray(succ, dtype=np.int64)
        self.out = np.asarray(out, dtype=bool).reshape(self.n_states, self.n_inputs)
        self.inputs = inputs if inputs is not None else InputGrid(np.arange(self.n_inputs, dtype=np.float64))
        self.grid = grid
        n_pairs = self.n_states * self.n_inputs
        if self.indptr.size != n_pairs + 1:
            raise ValueError("indptr must have one entry per pair plus one")
        counts = np.diff(self.indptr)
        self._pair_of = np.repeat(np.arange(n_pairs, dtype=np.int64), counts)
        empty = (counts == 0) & ~self.out.reshape(-1)
        if np.any(empty):
            raise ValueError("post must be non-empty unless OUT is flagged")
        self._hash = None

    @classmethod
    def from_map(cls, n_states, n_inputs, post_map, out_pairs=(), inputs=None, grid=None):
        """Build from {(state, input): iterable of successors} plus OUT pairs."""
        out = np.zeros((n_states, n_inputs), dtype=bool)
        for (x, u) in out_pairs:
            out[x, u] = True
        indptr = np.zeros(n_states * n_inputs + 1, dtype=np.int64)
        chunks = []
        for x in range(n_states):
            for u in range(n_inputs):
                succ = np.asarray(sorted(set(post_map.get((x, u), ()))), dtype=np.int64)
                if succ.size == 0 and not out[x, u]:
                    raise ValueError(f"pair ({x}, {u}) has empty post and no OUT flag")
                if succ.size and (succ.min() < 0 or succ.max() >= n_states):
                    raise ValueError("successor index out of range")
                chunks.append(succ)
                indptr[x * n_inputs + u + 1] = indptr[x * n_inputs + u] + succ.size
        succ = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
        return cls(n_states, n_inputs, indptr, succ, out, inputs=inputs, grid=grid)

    def pair_subset_mask(self, member, rows=None):
        bad = np.zeros(self.n_states * self.n_inputs, dtype=bool)
        miss = ~member[self.succ]
        bad[self._pair_of[miss]] = True
        res = (~bad).reshape(self.n_states, self.n_inputs)
        if rows is not None:
            keep = np.zeros(self.n_states, dtype=bool)
            keep[rows] = True
            res = res & keep[:, None]
        return res

    def pair_hits(self, removed, within=None, row_alive=None):
        hit = np.zeros(self.n_states * self.n_inputs, dtype=bool)
        flags = removed[self.succ]
        hit[self._pair_of[flags]] = True
        hit = hit.reshape(self.n_states, self.n_inputs)
        keep = hit.any(axis=1)
        if within is not None:
            keep &= within
        rows = np.nonzero(keep)[0]
        hits = hit[rows]
        if row_alive is not None:
            hits &= row_alive(rows)
        return rows, hits

    def post(self, cell, u):
        i = cell * self.n_inputs + u
        return self.succ[self.indptr[i]:self.indptr[i + 1]].copy(), bool(self.out[cell, u])

    @property
    def content_hash(self):
        if self._hash is None:
            h = hashlib.sha256()
            h.update(b"PSHD-explicit")
            h.update(struct.pack("<qq", self.n_states, self.n_inputs))
            h.update(self.indptr.tobytes())
            h.update(self.succ.tobytes())
            h.update(self.out.tobytes())
            self._hash = h.hexdigest()
        return self._hash


def build_abstraction(grid: GridSpec, inputs: InputGrid, params: DubinsParams) -> BoxedAbstraction:
    """Abstract the vehicle over a 3-d grid (x, y periodic-free, heading periodic).

    For every (cell, input) pair the interval image of the cell is computed
    and converted to successor index ranges.  Shifts are evaluated in index
    space, floor(delta_lo / eta) and ceil(delta_hi / eta), which keeps the
    zero-motion case exact: a cell maps to itself alone.  Images exiting the
    box in x or y set the OUT flag; the stored ranges are the clipped in-box
    part.
    """
    if grid.dims != 3 or grid.periodic[0] or grid.periodic[1] or not grid.periodic[2]:
        raise GridMismatch("vehicle abstraction expects (x, y, heading) with only the heading periodic")
    if max(grid.shape) >= np.iinfo(np.int16).max:
        raise GridMismatch("grid too fine for int16 successor ranges")
    nx, ny, nt = grid.shape
    t = params.tau
    w = params.disturbance.radius
    eta = grid.eta

    th_lo = grid.lower[2] + np.arange(nt) * eta[2]
    th_hi = th_lo + eta[2]
    cmin, cmax = cos_bounds(th_lo, th_hi)
    smin, smax = sin_bounds(th_lo, th_hi)

    ix, iy, it = np.unravel_index(np.arange(grid.n_cells), grid.shape)
    n_inputs = len(inputs)
    starts = np.zeros((grid.n_cells, n_inputs, 3), dtype=np.int16)
    lengths = np.zeros((grid.n_cells, n_inputs, 3), dtype=np.int16)
    out = np.zeros((grid.n_cells, n_inputs), dtype=bool)
    radius = np.zeros(3, dtype=np.int64)

    for u in range(n_inputs):
        v, a = inputs[u]
        dx_lo = t * np.minimum(v * cmin, v * cmax) - w[0]
        dx_hi = t * np.maximum(v * cmin, v * cmax) + w[0]
        dy_lo = t * np.minimum(v * smin, v * smax) - w[1]
        dy_hi = t * np.maximum(v * smin, v * smax) + w[1]
        # per-heading-row integer shifts; the image interval is half-open at
        # the top because cells are, so the upper shift uses ceil
        sx_lo = np.floor(dx_lo / eta[0]).astype(np.int64)
        sx_hi = np.ceil(dx_hi / eta[0]).astype(np.int64)
        sy_lo = np.floor(dy_lo / eta[1]).astype(np.int64)
        sy_hi = np.ceil(dy_hi / eta[1]).astype(np.int64)
        st_lo = int(np.floor((a * t - w[2]) / eta[2]))
        st_hi = int(np.ceil((a * t + w[2]) / eta[2]))

        x_lo = ix + sx_lo[it]
        x_hi = ix + sx_hi[it]
        y_lo = iy + sy_lo[it]
        y_hi = iy + sy_hi[it]
        out[:, u] = (x_lo < 0) | (x_hi > nx - 1) | (y_lo < 0) | (y_hi > ny - 1)

        cx_lo = np.clip(x_lo, 0, nx - 1)
        cx_hi = np.clip(x_hi, 0, nx - 1)
        cy_lo = np.clip(y_lo, 0, ny - 1)
        cy_hi = np.clip(y_hi, 0, ny - 1)
        starts[:, u, 0] = cx_lo
        lengths[:, u, 0] = np.maximum(cx_hi - cx_lo + 1, 0) * (x_hi >= 0) * (x_lo <= nx - 1)
        starts[:, u, 1] = cy_lo
        lengths[:, u, 1] = np.maximum(cy_hi - cy_lo + 1, 0) * (y_hi >= 0) * (y_lo <= ny - 1)

        t_len = min(st_hi - st_lo + 1, nt)
        starts[:, u, 2] = (it + st_lo) % nt
        lengths[:, u, 2] = t_len

        radius[0] = max(radius[0], int(np.abs(sx_lo).max()), int(np.abs(sx_hi).max()))
        radius[1] = max(radius[1], int(np.abs(sy_lo).max()), int(np.abs(sy_hi).max()))
        radius[2] = max(radius[2], abs(st_lo), abs(st_hi))

    return BoxedAbstraction(grid, inputs, params, starts, lengths, out, reach_radius=radius)


# -- serialization ----------------------------------------------------------

_MAGIC = b"PSHD1"


def save_abstraction(sys, path):
    """Write the transition relation: header, then per pair a length-prefixed
    sorted successor list with an OUT bit folded into the prefix's top bit."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        has_grid = getattr(sys, "grid", None) is not None
        f.write(struct.pack("<B", 1 if has_grid else 0))
        if has_grid:
            g = sys.grid
            f.write(struct.pack("<i", g.dims))
            f.write(g.lower.tobytes())
            f.write(g.upper.tobytes())
            f.write(g.eta.tobytes())
            f.write(g.periodic.astype(np.uint8).tobytes())
        pts = sys.inputs.points
        f.write(struct.pack("<ii", *pts.shape))
        f.write(pts.tobytes())
        f.write(struct.pack("<qq", sys.n_states, sys.n_inputs))
        for counts, outs, values in _successor_stream(sys):
            # interleave one length-prefix word (OUT bit on top) per pair with
            # its sorted successor indices
            rec = np.empty(int(counts.sum()) + len(counts), dtype=np.uint32)
            ppos = np.arange(len(counts), dtype=np.int64) + np.concatenate(
                ([0], np.cumsum(counts[:-1])))
            rec[ppos] = counts.astype(np.uint32) | (outs.astype(np.uint32) << 31)
            fill = np.ones(rec.size, dtype=bool)
            fill[ppos] = False
            rec[fill] = values.astype(np.uint32)
            f.write(rec.tobytes())


def _successor_stream(sys, block=4096):
    if hasattr(sys, "successor_blocks"):
        yield from sys.successor_blocks(block)
        return
    n_pairs = sys.n_states * sys.n_inputs
    for ofs in range(0, n_pairs, block):
        hi = min(ofs + block, n_pairs)
        counts = np.empty(hi - ofs, dtype=np.int64)
        outs = np.empty(hi - ofs, dtype=bool)
        chunks = []
        for i in range(ofs, hi):
            succ, is_out = sys.post(i // sys.n_inputs, i % sys.n_inputs)
            counts[i - ofs] = len(succ)
            outs[i - ofs] = is_out
            chunks.append(succ)
        yield counts, outs, (np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64))


def load_abstraction(path) -> ExplicitAbstraction:
    """Read a file written by save_abstraction back into an explicit system."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:5] != _MAGIC:
        raise ValueError("not an abstraction file (bad magic)")
    off = 5
    (has_grid,) = struct.unpack_from("<B", data, off)
    off += 1
    grid = None
    if has_grid:
        (dims,) = struct.unpack_from("<i", data, off)
        off += 4
        lower = np.frombuffer(data, dtype=np.float64, count=dims, offset=off).copy()
        off += dims * 8
        upper = np.frombuffer(data, dtype=np.float64, count=dims, offset=off).copy()
        off += dims * 8
        eta = np.frombuffer(data, dtype=np.float64, count=dims, offset=off).copy()
        off += dims * 8
        periodic = np.frombuffer(data, dtype=np.uint8, count=dims, offset=off).astype(bool)
        off += dims
        grid = GridSpec(lower, upper, eta, periodic)
    m, k = struct.unpack_from("<ii", data, off)
    off += 8
    pts = np.frombuffer(data, dtype=np.float64, count=m * k, offset=off).reshape(m, k).copy()
    off += m * k * 8
    n_states, n_inputs = struct.unpack_from("<qq", data, off)
    off += 16
    n_pairs = n_states * n_inputs
    indptr = np.zeros(n_pairs + 1, dtype=np.int64)
    out = np.zeros(n_pairs, dtype=bool)
    chunks = []
    for i in range(n_pairs):
        (prefix,) = struct.unpack_from("<I", data, off)
        off += 4
        count = prefix & 0x7FFFFFFF
        out[i] = bool(prefix >> 31)
        chunk = np.frombuffer(data, dtype=np.uint32, count=count, offset=off).astype(np.int64)
        off += 4 * count
        chunks.append(chunk)
        indptr[i + 1] = indptr[i] + count
    succ = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
    return ExplicitAbstraction(n_states, n_inputs, indptr, succ,
                               out.reshape(n_states, n_inputs),
                               inputs=InputGrid(pts), grid=grid)


def dump_abstraction(sys, fh):
    """Debug dump, one line per (cell, input)."""
    for cell in range(sys.n_states):
        label = str(sys.grid.multi(cell)) if getattr(sys, "grid", None) is not None else str(cell)
        for u in range(sys.n_inputs):
            succ, is_out = sys.post(cell, u)
            tail = " OUT" if is_out else ""
            fh.write(f"{label} u={u} : {' '.join(str(int(s)) for s in succ)}{tail}\n")

"""Safety-game solving over finite abstractions.

Everything here is a fixed point over two bulk tests provided by the
abstraction: "every successor of this pair lies in S" and "some successor of
this pair lies in R".  Greatest fixed points are computed by monotone
narrowing: once a pair fails containment it can never pass again while the
candidate set shrinks, so each sweep only re-tests pairs whose successor box
meets the freshly removed cells.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .errors import AbstractionMismatch, UniverseMismatch


class StateSet:
    """Set of abstract states, dense boolean membership over flat indices."""

    __slots__ = ("mask",)

    def __init__(self, mask):
        self.mask = np.asarray(mask, dtype=bool)

    @classmethod
    def empty(cls, n):
        return cls(np.zeros(n, dtype=bool))

    @classmethod
    def full(cls, n):
        return cls(np.ones(n, dtype=bool))

    @classmethod
    def from_indices(cls, n, indices):
        m = np.zeros(n, dtype=bool)
        m[np.asarray(list(indices), dtype=np.int64)] = True
        return cls(m)

    @property
    def n(self):
        return self.mask.size

    def _check(self, other):
        if self.n != other.n:
            raise UniverseMismatch(f"state sets over universes of size {self.n} and {other.n}")

    def __and__(self, other):
        self._check(other)
        return StateSet(self.mask & other.mask)

    def __or__(self, other):
        self._check(other)
        return StateSet(self.mask | other.mask)

    def __sub__(self, other):
        self._check(other)
        return StateSet(self.mask & ~other.mask)

    def __invert__(self):
        return StateSet(~self.mask)

    def __le__(self, other):
        self._check(other)
        return bool(np.all(~self.mask | other.mask))

    def __eq__(self, other):
        return isinstance(other, StateSet) and self.n == other.n and np.array_equal(self.mask, other.mask)

    def __contains__(self, cell):
        return bool(self.mask[int(cell)])

    def __len__(self):
        return int(self.mask.sum())

    def indices(self):
        return np.nonzero(self.mask)[0]

    def __repr__(self):
        return f"StateSet({len(self)}/{self.n})"


class SafetySpec:
    """Stay forever inside a set of safe states."""

    def __init__(self, safe: StateSet):
        self.safe = safe


def _pack_bool(allowed):
    n, m = allowed.shape
    words = (m + 63) // 64
    out = np.zeros((n, words), dtype=np.uint64)
    for w in range(words):
        chunk = allowed[:, w * 64:(w + 1) * 64]
        bits = np.uint64(1) << np.arange(chunk.shape[1], dtype=np.uint64)
        out[:, w] = np.bitwise_or.reduce(np.where(chunk, bits, np.uint64(0)), axis=1)
    return out


def _unpack_bool(masks, m):
    n, words = masks.shape
    out = np.zeros((n, m), dtype=bool)
    for w in range(words):
        k = min(64, m - w * 64)
        bits = np.arange(k, dtype=np.uint64)
        out[:, w * 64:w * 64 + k] = (masks[:, w][:, None] >> bits) & np.uint64(1) != 0
    return out


class ControllerTable:
    """Per-state allowed-input sets with an explicit domain.

    A state can be undefined (outside the domain) or defined with an empty
    allowed set; products keep such blocking states so the deadlock-removal
    pass sees them.  Allowed sets are packed into 64-bit words.
    """

    def __init__(self, n_states, n_inputs, defined, masks):
        self.n_states = int(n_states)
        self.n_inputs = int(n_inputs)
        self.defined = np.asarray(defined, dtype=bool)
        self.masks = np.asarray(masks, dtype=np.uint64)
        self.masks[~self.defined] = 0  # canonical: undefined rows carry no bits

    @classmethod
    def from_bool(cls, defined, allowed):
        return cls(allowed.shape[0], allowed.shape[1], defined, _pack_bool(allowed))

    @classmethod
    def full_permissive(cls, n_states, n_inputs, domain=None):
        defined = np.ones(n_states, dtype=bool) if domain is None else np.asarray(domain, bool).copy()
        allowed = np.tile(defined[:, None], (1, n_inputs))
        return cls.from_bool(defined, allowed)

    @property
    def words(self):
        return self.masks.shape[1]

    def allowed_bool(self):
        return _unpack_bool(self.masks, self.n_inputs) & self.defined[:, None]

    def allowed_indices(self, cell):
        row = _unpack_bool(self.masks[int(cell)][None, :], self.n_inputs)[0]
        return np.nonzero(row)[0]

    def allows(self, cell, u):
        w, b = divmod(int(u), 64)
        return bool((self.masks[int(cell), w] >> np.uint64(b)) & np.uint64(1))

    def domain(self) -> StateSet:
        return StateSet(self.defined.copy())

    def domain_size(self):
        return int(self.defined.sum())

    def blocking(self) -> StateSet:
        """Defined states whose allowed set is empty."""
        return StateSet(self.defined & ~(self.masks != 0).any(axis=1))

    def _check(self, other):
        if self.n_states != other.n_states or self.n_inputs != other.n_inputs:
            raise UniverseMismatch("controller tables over different universes")

    def copy(self):
        return ControllerTable(self.n_states, self.n_inputs, self.defined.copy(), self.masks.copy())


def controller_equal(c1: ControllerTable, c2: ControllerTable) -> bool:
    """True iff domains and every allowed set coincide."""
    c1._check(c2)
    return np.array_equal(c1.defined, c2.defined) and np.array_equal(c1.masks, c2.masks)


def is_sub_controller(sub: ControllerTable, sup: ControllerTable) -> bool:
    """Domain containment plus pointwise allowed-set containment."""
    sub._check(sup)
    if np.any(sub.defined & ~sup.defined):
        return False
    return not np.any(sub.masks & ~sup.masks)


def _check_universe(sys, s: StateSet):
    if s.n != sys.n_states:
        raise UniverseMismatch(f"set over {s.n} states, system has {sys.n_states}")


def cpre(sys, s: StateSet) -> StateSet:
    """Controllable predecessor: states with an input forcing all successors into s."""
    _check_universe(sys, s)
    ok = sys.pair_subset_mask(s.mask) & ~sys.out
    return StateSet(ok.any(axis=1))


def safety_control(sys, spec: SafetySpec, iteration_sizes=None, warm_start=None) -> ControllerTable:
    """Maximally permissive safety controller of the abstraction.

    Iterates S <- CPre(S) & safe from the full state set down to the greatest
    fixed point, then allows exactly the inputs whose successors stay inside.
    OUT transitions count as leaving S.  The returned table is nonblocking on
    its domain (possibly empty).

    `warm_start` may name a previously computed table whose safe set contained
    this one's: iteration then starts from that table's fixed point instead of
    the universe.  The greatest fixed point is unchanged (it is contained in
    any such starting set and the update is monotone), only the descent is
    shorter.
    """
    _check_universe(sys, spec.safe)
    if warm_start is not None:
        alive = warm_start.allowed_bool()
        s = warm_start.defined.copy()
    else:
        alive = ~sys.out  # post(x, u) is a subset of the current S, initially everything
        s = np.ones(sys.n_states, dtype=bool)
    has_input = alive.any(axis=1)
    while True:
        s_new = has_input & spec.safe.mask
        if iteration_sizes is not None:
            iteration_sizes.append(int(s_new.sum()))
        removed = s & ~s_new
        s = s_new
        if not removed.any():
            break
        rows, hits = sys.pair_hits(removed, within=s, row_alive=lambda r: alive[r])
        alive[rows] &= ~hits
        has_input[rows] = alive[rows].any(axis=1)
    return ControllerTable.from_bool(s, alive & s[:, None])


def product(c1: ControllerTable, c2: ControllerTable) -> ControllerTable:
    """Pointwise intersection of allowed sets on the intersection of domains.

    Blocking states (defined, empty intersection) are kept, not dropped.
    """
    c1._check(c2)
    return ControllerTable(c1.n_states, c1.n_inputs, c1.defined & c2.defined, c1.masks & c2.masks)


def largest_nonblocking(sys, table: ControllerTable, _trusted_closed=False) -> ControllerTable:
    """Largest sub-controller in which every domain state keeps some input.

    Greatest fixed point of D -> {x in D : some allowed input keeps all
    successors in D}, starting from the table's domain.  With
    `_trusted_closed` the initial containment sweep is skipped; valid only
    when every allowed input of the table already maps into the domain, as
    holds for products of safety controllers.
    """
    if table.n_states != sys.n_states or table.n_inputs != sys.n_inputs:
        raise UniverseMismatch("table does not match the system")
    d = table.defined.copy()
    alive = table.allowed_bool() & ~sys.out
    if not _trusted_closed:
        alive &= sys.pair_subset_mask(d)
    has_input = alive.any(axis=1)
    while True:
        d_new = d & has_input
        removed = d & ~d_new
        d = d_new
        if not removed.any():
            break
        rows, hits = sys.pair_hits(removed, within=d, row_alive=lambda r: alive[r])
        alive[rows] &= ~hits
        has_input[rows] = alive[rows].any(axis=1)
    return ControllerTable.from_bool(d, alive & d[:, None])


def closure_holds(sys, table: ControllerTable) -> bool:
    """Check that every allowed input maps entirely into the table's domain."""
    alive = table.allowed_bool()
    ok = sys.pair_subset_mask(table.defined) & ~sys.out
    return not np.any(alive & ~ok)


# -- serialization ------------------------------------------------------------

_MAGIC = b"PSHC1"


def save_controller(table: ControllerTable, sys, path):
    """Write a controller keyed to the abstraction that produced it."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        digest = sys.content_hash.encode("ascii")
        f.write(struct.pack("<B", len(digest)))
        f.write(digest)
        f.write(struct.pack("<qqq", table.n_states, table.n_inputs, table.words))
        f.write(np.packbits(table.defined).tobytes())
        f.write(table.masks.tobytes())


def load_controller(path, sys) -> ControllerTable:
    """Read a controller; rejects files keyed to a different abstraction."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:5] != _MAGIC:
        raise ValueError("not a controller file (bad magic)")
    off = 5
    (hlen,) = struct.unpack_from("<B", data, off)
    off += 1
    digest = data[off:off + hlen].decode("ascii")
    off += hlen
    if digest != sys.content_hash:
        raise AbstractionMismatch("controller was synthesized for a different abstraction")
    n_states, n_inputs, words = struct.unpack_from("<qqq", data, off)
    off += 24
    nbytes = (n_states + 7) // 8
    defined = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=off))[:n_states].astype(bool)
    off += nbytes
    masks = np.frombuffer(data, dtype=np.uint64, count=n_states * words, offset=off).reshape(n_states, words).copy()
    return ControllerTable(n_states, n_inputs, defined, masks)


def dump_controller(table: ControllerTable, fh, grid=None):
    """Text dump: one `cell : sorted inputs` line per domain state."""
    for cell in np.nonzero(table.defined)[0]:
        label = str(grid.multi(int(cell))) if grid is not None else str(int(cell))
        inputs = " ".join(str(int(u)) for u in table.allowed_indices(cell))
        fh.write(f"{label} : {inputs}\n")


def controller_fingerprint(table: ControllerTable) -> str:
    h = hashlib.sha256()
    h.update(np.packbits(table.defined).tobytes())
    h.update(table.masks.tobytes())
    return h.hexdigest()

"""Output-matrix compaction: condensing, coarse sorting, and block merging.

A masked matmul output is processed in stripes of ``lanes`` rows. Within a
stripe, columns with no required elements are dropped (condensing), the
survivors are coarsely sorted by density into a bounded-class buffer, drained
densest-first into blocks of at most ``p`` columns, and then blocks are
merged: a dense base block absorbs up to two sparser blocks by overlaying
their lane masks position by position. Colliding elements are relocated to
free lanes of the same physical column and fed through a per-lane conflict
vector that names the substitute input row; each physical column tracks up to
three origin columns selectable per element.

The result is a list of merged tiles whose execution is bit-exact with the
dense matmul at every required position, plus compaction statistics.
Column/row counts in :class:`CompactionStats` are stripe-normalized (a column
is counted once per stripe it survives in), which keeps
``physical <= condensed <= total`` true by construction; whole-matrix
condensing ratios are reported separately by :func:`condense`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .qtensor import INT32_MAX, INT32_MIN, AccumulatorOverflowError, Bitmask, QTensor

ORIGINAL = 0  # input switch: lane's own broadcast row
CONFLICT = 1  # input switch: row named by the lane's conflict vector

MAX_ORIGINS = 3  # one base block plus two merges; matches 3 weight lines


class TileConsistencyError(RuntimeError):
    """Tile placements disagree with the mask or with each other."""


@dataclass(frozen=True)
class ColumnRecord:
    """One surviving column of one stripe: its lane occupancy as a bitset."""

    orig_col: int
    mask: int  # bit r set = lane r required
    nnz: int

    def __post_init__(self) -> None:
        if self.mask <= 0:
            raise ValueError("all-zero columns must be condensed away, not recorded")
        if self.nnz != int(self.mask).bit_count():
            raise ValueError("nnz does not match mask popcount")


@dataclass(frozen=True)
class Placement:
    """One required output element mapped onto the DPU array."""

    lane: int
    pcol: int
    input_line: int  # ORIGINAL or CONFLICT
    w_slot: int  # index into the physical column's origin list


@dataclass(frozen=True)
class MergedTile:
    """A compacted execution tile.

    ``origins[p]`` lists the weight columns multiplexed onto physical column
    p (at most three). ``cv[lane]`` is the absolute input row fed on that
    lane's conflict line, if any. An original-line placement at lane r reads
    input row ``stripe_base + r``; a conflict-line placement reads
    ``cv[lane]``.
    """

    stripe_base: int
    lanes: int
    width: int
    origins: tuple[tuple[int, ...], ...]
    cv: tuple[int | None, ...]
    placements: tuple[Placement, ...]

    def element_row(self, p: Placement) -> int:
        if p.input_line == ORIGINAL:
            return self.stripe_base + p.lane
        row = self.cv[p.lane]
        if row is None:
            raise TileConsistencyError(
                f"conflict placement at lane {p.lane} without a conflict vector"
            )
        return row

    def element_col(self, p: Placement) -> int:
        return self.origins[p.pcol][p.w_slot]

    def occupied_slots(self) -> int:
        return len(self.placements)


@dataclass(frozen=True)
class MergeFailure:
    """Why a candidate block could not be merged onto a base tile."""

    reason: str  # "no_free_lane" or "cv_incompatible"
    pcol: int
    lane: int
    relocated_before_fail: int = 0


@dataclass(frozen=True)
class CompactionConfig:
    num_classes: int = 4
    class_capacity: int | None = None  # default: stripe column count / num_classes
    sort: bool = True

    def capacity_for(self, cols: int) -> int:
        if self.class_capacity is not None:
            return self.class_capacity
        return max(1, cols // self.num_classes)


@dataclass
class CompactionStats:
    cols_total: int = 0
    cols_after_condense: int = 0
    physical_cols_after_merge: int = 0
    merge_attempts: int = 0
    merge_successes: int = 0
    conflict_relocations: int = 0
    tiles: int = 0
    full_column_survivors: int = 0
    full_column_remaining_ratio: float = 0.0

    @property
    def remaining_ratio_condense(self) -> float:
        return self.cols_after_condense / self.cols_total if self.cols_total else 0.0

    @property
    def remaining_ratio_merge(self) -> float:
        return (
            self.physical_cols_after_merge / self.cols_total if self.cols_total else 0.0
        )


def condense(mask: Bitmask) -> tuple[list[int], dict]:
    """Whole-matrix condensing: keep columns with at least one required element.

    Removed columns' weights never need to be fetched; the surviving index
    list drives memory-traffic accounting.
    """
    surviving = [int(c) for c in np.flatnonzero(mask.bits.any(axis=0))]
    stats = {
        "cols_total": mask.cols,
        "cols_surviving": len(surviving),
        "remaining_ratio": len(surviving) / mask.cols if mask.cols else 0.0,
    }
    return surviving, stats


def classify_sparsity(rec: ColumnRecord, lanes: int, num_classes: int) -> int:
    """Density class of a record; higher class index = denser."""
    if not 1 <= rec.nnz <= lanes:
        raise ValueError(f"record nnz {rec.nnz} outside [1, {lanes}]")
    return (rec.nnz - 1) * num_classes // lanes


@dataclass(frozen=True)
class InsertPlacement:
    kind: str  # "class" or "extra"
    class_index: int | None
    position: int


class SortBuffer:
    """Coarse density sorter: bounded per-class queues plus an overflow queue.

    An insert lands in its density class; if that class is full it goes to
    the next sparser class, and if that is also full (or does not exist) it
    goes to the unbounded extra queue.
    """

    def __init__(self, lanes: int, num_classes: int, class_capacity: int):
        self.lanes = lanes
        self.num_classes = num_classes
        self.class_capacity = class_capacity
        self.classes: list[list[ColumnRecord]] = [[] for _ in range(num_classes)]
        self.extra: list[ColumnRecord] = []

    def insert(self, rec: ColumnRecord) -> InsertPlacement:
        c = classify_sparsity(rec, self.lanes, self.num_classes)
        for ci in (c, c - 1):
            if ci >= 0 and len(self.classes[ci]) < self.class_capacity:
                self.classes[ci].append(rec)
                return InsertPlacement("class", ci, len(self.classes[ci]) - 1)
        self.extra.append(rec)
        return InsertPlacement("extra", None, len(self.extra) - 1)

    def drain_dense_first(self) -> list[ColumnRecord]:
        out: list[ColumnRecord] = []
        for ci in range(self.num_classes - 1, -1, -1):
            out.extend(self.classes[ci])
        out.extend(self.extra)
        return out


def form_blocks(buf: SortBuffer, p: int) -> list[list[ColumnRecord]]:
    """Drain the buffer densest-first into blocks of at most p columns."""
    if p < 1:
        raise ValueError("block width must be >= 1")
    ordered = buf.drain_dense_first()
    return [ordered[i : i + p] for i in range(0, len(ordered), p)]


def tile_from_block(
    block: list[ColumnRecord], stripe_base: int, lanes: int
) -> MergedTile:
    placements = []
    origins = []
    for j, rec in enumerate(block):
        origins.append((rec.orig_col,))
        m = rec.mask
        while m:
            lane = (m & -m).bit_length() - 1
            placements.append(Placement(lane, j, ORIGINAL, 0))
            m &= m - 1
    return MergedTile(
        stripe_base=stripe_base,
        lanes=lanes,
        width=len(block),
        origins=tuple(origins),
        cv=(None,) * lanes,
        placements=tuple(placements),
    )


def try_merge(
    base: MergedTile, cand: list[ColumnRecord], lanes: int
) -> MergedTile | MergeFailure:
    """Overlay a candidate block onto a base tile, relocating conflicts.

    Candidate column j lands on physical column j. Conflicting elements are
    resolved iteratively: the conflicted column with the fewest compatible
    lanes (empty slot, conflict vector free or already naming the needed
    source row) is handled first, its lowest conflicted lane relocating to
    the lowest compatible lane. Failure leaves the base untouched and names
    the blocking column.
    """
    if len(cand) > base.width:
        raise ValueError("candidate block wider than base tile")
    if any(len(base.origins[j]) >= MAX_ORIGINS for j in range(len(cand))):
        raise ValueError("base tile already has three origins on a merged column")

    # Current occupancy per physical column as lane bitsets.
    occ = [0] * base.width
    for pl in base.placements:
        occ[pl.pcol] |= 1 << pl.lane
    cv = list(base.cv)
    new_placements = list(base.placements)
    relocations = 0

    # Overlay non-conflicting bits first; queue conflicts per column.
    pending: dict[int, list[int]] = {}
    for j, rec in enumerate(cand):
        w_slot = len(base.origins[j])
        free_bits = rec.mask & ~occ[j]
        m = free_bits
        while m:
            lane = (m & -m).bit_length() - 1
            new_placements.append(Placement(lane, j, ORIGINAL, w_slot))
            m &= m - 1
        occ[j] |= free_bits
        conf = rec.mask & occ[j] & ~free_bits
        if conf:
            lanes_conf = []
            m = conf
            while m:
                lanes_conf.append((m & -m).bit_length() - 1)
                m &= m - 1
            pending[j] = lanes_conf

    full = (1 << lanes) - 1
    while pending:
        # Degree of freedom per conflicted column, for its first conflict.
        best_j, best_dof, best_lane = -1, None, -1
        for j in sorted(pending):
            rc = pending[j][0]
            needed_row = base.stripe_base + rc
            free = ~occ[j] & full
            dof = 0
            first = -1
            m = free
            while m:
                lane = (m & -m).bit_length() - 1
                if cv[lane] is None or cv[lane] == needed_row:
                    dof += 1
                    if first < 0:
                        first = lane
                m &= m - 1
            if best_dof is None or dof < best_dof:
                best_j, best_dof, best_lane = j, dof, first
        if best_dof == 0:
            reason = "no_free_lane" if occ[best_j] == full else "cv_incompatible"
            return MergeFailure(reason, best_j, pending[best_j][0], relocations)
        rc = pending[best_j].pop(0)
        if not pending[best_j]:
            del pending[best_j]
        needed_row = base.stripe_base + rc
        w_slot = len(base.origins[best_j])
        new_placements.append(Placement(best_lane, best_j, CONFLICT, w_slot))
        occ[best_j] |= 1 << best_lane
        if cv[best_lane] is None:
            cv[best_lane] = needed_row
        relocations += 1

    origins = tuple(
        base.origins[j] + (cand[j].orig_col,) if j < len(cand) else base.origins[j]
        for j in range(base.width)
    )
    return MergedTile(
        stripe_base=base.stripe_base,
        lanes=lanes,
        width=base.width,
        origins=origins,
        cv=tuple(cv),
        placements=tuple(new_placements),
    )


def _stripe_records(
    stripe_bits: np.ndarray, order: np.ndarray | None = None
) -> list[ColumnRecord]:
    """Column records for one stripe, skipping columns empty in the stripe."""
    h, c = stripe_bits.shape
    weights = (np.uint64(1) << np.arange(h, dtype=np.uint64))[:, None]
    packed = (stripe_bits.astype(np.uint64) * weights).sum(axis=0)
    nnz = stripe_bits.sum(axis=0)
    cols = range(c) if order is None else order
    return [
        ColumnRecord(int(j), int(packed[j]), int(nnz[j])) for j in cols if nnz[j] > 0
    ]


def compact(
    mask: Bitmask, lanes: int, p: int, cfg: CompactionConfig | None = None
) -> tuple[list[MergedTile], CompactionStats]:
    """Full pipeline: per-stripe condense, sort, block, and greedy merge.

    Merging takes the densest unmerged block as a base and tries candidates
    sparsest-first; after a success it attempts one more merge (two absorbed
    blocks per tile at most), then emits the tile. Every surviving
    (stripe, column) lands in exactly one tile.
    """
    cfg = cfg or CompactionConfig()
    bits = mask.bits
    rows, c = bits.shape
    n_stripes = math.ceil(rows / lanes) if rows else 0
    stats = CompactionStats(cols_total=n_stripes * c)
    _, full_stats = condense(mask)
    stats.full_column_survivors = full_stats["cols_surviving"]
    stats.full_column_remaining_ratio = full_stats["remaining_ratio"]

    tiles: list[MergedTile] = []
    for s in range(n_stripes):
        s0 = s * lanes
        stripe = bits[s0 : min(rows, s0 + lanes)]
        records = _stripe_records(stripe)
        stats.cols_after_condense += len(records)
        if not records:
            continue
        if cfg.sort:
            buf = SortBuffer(lanes, cfg.num_classes, cfg.capacity_for(c))
            for rec in records:
                buf.insert(rec)
            blocks = form_blocks(buf, p)
        else:
            blocks = [records[i : i + p] for i in range(0, len(records), p)]

        alive = list(range(len(blocks)))
        while alive:
            tile = tile_from_block(blocks[alive.pop(0)], s0, lanes)
            merges = 0
            ci = len(alive) - 1
            while merges < MAX_ORIGINS - 1 and ci >= 0:
                stats.merge_attempts += 1
                result = try_merge(tile, blocks[alive[ci]], lanes)
                if isinstance(result, MergedTile):
                    stats.merge_successes += 1
                    stats.conflict_relocations += (
                        sum(pl.input_line == CONFLICT for pl in result.placements)
                        - sum(pl.input_line == CONFLICT for pl in tile.placements)
                    )
                    tile = result
                    alive.pop(ci)
                    merges += 1
                    ci = len(alive) - 1
                else:
                    stats.conflict_relocations += result.relocated_before_fail
                    ci -= 1
            tiles.append(tile)
            stats.physical_cols_after_merge += tile.width
    stats.tiles = len(tiles)
    return tiles, stats


def merge_effort(
    mask: Bitmask, lanes: int, p: int, cfg: CompactionConfig | None = None, *,
    sort: bool = True,
) -> int:
    """try_merge invocation count under sorted or original-order blocking."""
    cfg = cfg or CompactionConfig()
    _, stats = compact(mask, lanes, p, replace(cfg, sort=sort))
    return stats.merge_attempts


def validate_tiles(tiles: list[MergedTile], mask: Bitmask) -> None:
    """Structural check: tiles cover exactly the mask's required elements."""
    produced = np.zeros(mask.bits.shape, dtype=bool)
    for tile in tiles:
        seen_slots: set[tuple[int, int]] = set()
        cv_used: dict[int, int] = {}
        for pcols in tile.origins:
            if len(pcols) > MAX_ORIGINS:
                raise TileConsistencyError("physical column with more than 3 origins")
        for pl in tile.placements:
            if (pl.lane, pl.pcol) in seen_slots:
                raise TileConsistencyError(
                    f"duplicate placement at lane {pl.lane}, column {pl.pcol}"
                )
            seen_slots.add((pl.lane, pl.pcol))
            row = tile.element_row(pl)
            col = tile.element_col(pl)
            if pl.input_line == CONFLICT:
                cv_used[pl.lane] = row
            if produced[row, col]:
                raise TileConsistencyError(f"element ({row}, {col}) produced twice")
            produced[row, col] = True
        for lane, row in cv_used.items():
            if tile.cv[lane] != row:
                raise TileConsistencyError("conflict placement row disagrees with cv")
    if not np.array_equal(produced, mask.bits):
        missing = np.argwhere(mask.bits & ~produced)
        extra = np.argwhere(produced & ~mask.bits)
        raise TileConsistencyError(
            f"coverage mismatch: {len(missing)} missing, {len(extra)} extra elements"
        )


def execute_merged(
    inp: QTensor,
    weights: QTensor,
    tiles: list[MergedTile],
    mask: Bitmask,
    *,
    validate: bool = True,
) -> QTensor:
    """Execute merged tiles: exact integer dot products at required positions.

    Output is dense storage with zeros at skipped positions, 32-bit at the
    summed scale. The produced position set must equal the mask exactly.
    """
    if validate:
        validate_tiles(tiles, mask)
    rows_idx: list[int] = []
    cols_idx: list[int] = []
    for tile in tiles:
        for pl in tile.placements:
            rows_idx.append(tile.element_row(pl))
            cols_idx.append(tile.element_col(pl))
    out = np.zeros((mask.rows, mask.cols), dtype=np.int64)
    if rows_idx:
        ri = np.asarray(rows_idx)
        ci = np.asarray(cols_idx)
        a = inp.data
        w = weights.data
        for lo in range(0, len(ri), 4096):
            hi = lo + 4096
            prod = a[ri[lo:hi], :] * w[:, ci[lo:hi]].T  # (n, D)
            psum = np.cumsum(prod, axis=1)
            if psum.size and (psum.max() > INT32_MAX or psum.min() < INT32_MIN):
                raise AccumulatorOverflowError(
                    "32-bit accumulator overflow in merged-tile execution"
                )
            out[ri[lo:hi], ci[lo:hi]] = psum[:, -1] if psum.size else 0
    return QTensor(out, 32, inp.scale + weights.scale)

"""Viewport geometry and per-chunk field-of-view distributions."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from math import comb
from pathlib import Path

import numpy as np

from .model import VideoConfig

PROB_TOL = 1e-9


@dataclass(frozen=True)
class Viewport:
    tiles: frozenset
    top_left: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "tiles", frozenset(self.tiles))


def viewport_at(top_left: int, config: VideoConfig) -> Viewport:
    """Rectangle of vrows x vcols tiles anchored at ``top_left``; wraps horizontally."""
    r0, c0 = divmod(top_left, config.cols)
    if r0 + config.vrows > config.rows:
        raise ValueError(f"viewport at tile {top_left} falls off the bottom of the grid")
    tiles = {
        (r0 + dr) * config.cols + (c0 + dc) % config.cols
        for dr in range(config.vrows)
        for dc in range(config.vcols)
    }
    return Viewport(frozenset(tiles), top_left)


def enumerate_viewports(config: VideoConfig) -> list[Viewport]:
    """All distinct viewport rectangles, row-major by top-left tile."""
    if config.vrows > config.rows or config.vcols > config.cols:
        raise ValueError("viewport larger than grid")
    seen = set()
    out = []
    for r0 in range(config.rows - config.vrows + 1):
        for c0 in range(config.cols):
            vp = viewport_at(r0 * config.cols + c0, config)
            if vp.tiles not in seen:
                seen.add(vp.tiles)
                out.append(vp)
    return out


@dataclass
class FovDistribution:
    """``chunks[k]`` is a list of ``(Viewport, probability)`` pairs."""

    chunks: list

    def __post_init__(self):
        for k, support in enumerate(self.chunks):
            probs = [p for _, p in support]
            if any(p < 0 for p in probs):
                raise ValueError(f"negative probability in chunk {k}")
            if abs(sum(probs) - 1.0) > PROB_TOL:
                raise ValueError(f"probabilities of chunk {k} sum to {sum(probs)}, not 1")

    @property
    def num_chunks(self) -> int:
        return len(self.chunks)

    def window(self, start: int, stop: int) -> "FovDistribution":
        return FovDistribution(self.chunks[start:stop])

    def to_json(self, config: VideoConfig) -> dict:
        chunks = []
        for support in self.chunks:
            entries = []
            for vp, p in support:
                if vp.top_left is None:
                    raise ValueError("only rectangle viewports can be serialized")
                entries.append({"top_left_tile": vp.top_left, "probability": p})
            chunks.append(entries)
        return {
            "grid": {"rows": config.rows, "cols": config.cols},
            "viewport": {"rows": config.vrows, "cols": config.vcols},
            "chunks": chunks,
        }

    @classmethod
    def from_json(cls, doc: dict, config: VideoConfig) -> "FovDistribution":
        grid, view = doc.get("grid"), doc.get("viewport")
        if grid and (grid["rows"], grid["cols"]) != (config.rows, config.cols):
            raise ValueError("FoV document grid does not match the video config")
        if view and (view["rows"], view["cols"]) != (config.vrows, config.vcols):
            raise ValueError("FoV document viewport does not match the video config")
        chunks = [
            [(viewport_at(int(e["top_left_tile"]), config), float(e["probability"])) for e in entries]
            for entries in doc["chunks"]
        ]
        return cls(chunks)


def load_distribution(path, config: VideoConfig) -> FovDistribution:
    return FovDistribution.from_json(json.loads(Path(path).read_text()), config)


def synthetic_support(designated: Viewport, beta: float, config: VideoConfig) -> list:
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must be a probability")
    others = [vp for vp in enumerate_viewports(config) if vp.tiles != designated.tiles]
    if not others or beta == 1.0:
        return [(designated, 1.0)]
    rest = (1.0 - beta) / len(others)
    support = [(designated, beta)]
    support.extend((vp, rest) for vp in others)
    return support


def synthetic_distribution(designated, beta: float, config: VideoConfig) -> FovDistribution:
    """Designated viewport gets ``beta``; the remainder is uniform over the other viewports."""
    return FovDistribution([synthetic_support(vp, beta, config) for vp in designated])


def random_walk_viewports(num_chunks: int, config: VideoConfig, rng: np.random.Generator) -> list[Viewport]:
    """Designated viewport per chunk: top-left tile moves by -1/0/+1 in each direction.

    Columns wrap around, rows are clamped to keep the rectangle on the grid.
    """
    max_row = config.rows - config.vrows
    r = int(rng.integers(0, max_row + 1))
    c = int(rng.integers(0, config.cols))
    out = []
    for _ in range(num_chunks):
        out.append(viewport_at(r * config.cols + c, config))
        dr, dc = rng.integers(-1, 2, size=2)
        r = min(max(r + int(dr), 0), max_row)
        c = (c + int(dc)) % config.cols
    return out


def containment_probability(dist: FovDistribution, k: int, tiles) -> float:
    """Pr(FoV of chunk k is a subset of ``tiles``)."""
    s = frozenset(tiles)
    return sum(p for vp, p in dist.chunks[k] if vp.tiles <= s)


def robust_set(dist: FovDistribution, k: int, alpha: float) -> frozenset:
    """Small tile set containing the chunk-k FoV with probability >= alpha.

    Viewports are taken by descending probability until their mass reaches
    alpha; tiles are then dropped, highest index first, while coverage stays
    >= alpha.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    support = [(vp, p) for vp, p in dist.chunks[k] if p > 0]
    order = sorted(range(len(support)), key=lambda i: (-support[i][1], i))
    chosen: set = set()
    mass = 0.0
    for i in order:
        vp, p = support[i]
        chosen |= vp.tiles
        mass += p
        if mass >= alpha - PROB_TOL:
            break
    for tile in sorted(chosen, reverse=True):
        trial = chosen - {tile}
        if containment_probability(dist, k, trial) >= alpha - PROB_TOL:
            chosen = trial
    return frozenset(chosen)


def minimal_robust_set(dist: FovDistribution, k: int, alpha: float, num_tiles: int) -> frozenset:
    """Exhaustive minimum-cardinality cover (lexicographically first); small grids only."""
    tiles = sorted(set().union(*(vp.tiles for vp, p in dist.chunks[k] if p > 0)))
    for size in range(len(tiles) + 1):
        for cand in itertools.combinations(tiles, size):
            if containment_probability(dist, k, cand) >= alpha - PROB_TOL:
                return frozenset(cand)
    return frozenset(range(num_tiles))


_EXHAUSTIVE_LIMIT = 20_000
_NODE_LIMIT = 5_000


def most_likely_set(dist: FovDistribution, k: int, q: int, num_tiles: int) -> frozenset:
    """The q-tile set with the highest probability of containing the FoV.

    For q below the viewport size no set can contain the FoV and the
    lexicographically smallest q-set is returned.  Small instances are
    solved by enumerating all q-subsets; larger ones by branch and bound
    over unions of viewports (with a node cap, falling back to the best
    union found).
    """
    if not 0 <= q <= num_tiles:
        raise ValueError(f"q={q} outside [0, {num_tiles}]")
    support = [(vp, p) for vp, p in dist.chunks[k] if p > 0]
    min_size = min((len(vp.tiles) for vp, _ in support), default=num_tiles + 1)
    if q < min_size:
        return frozenset(range(q))
    if comb(num_tiles, q) <= _EXHAUSTIVE_LIMIT:
        best, best_p = None, -1.0
        for cand in itertools.combinations(range(num_tiles), q):
            p = containment_probability(dist, k, cand)
            if p > best_p + PROB_TOL:
                best, best_p = cand, p
        return frozenset(best)
    return _viewport_union_search(support, q, num_tiles)


def _viewport_union_search(support: list, q: int, num_tiles: int) -> frozenset:
    order = sorted(range(len(support)), key=lambda i: (-support[i][1], i))
    masks = [sum(1 << t for t in support[i][0].tiles) for i in order]
    probs = [support[i][1] for i in order]
    n = len(masks)

    def covered(tiles):
        return sum(p for m, p in zip(masks, probs) if m & ~tiles == 0)

    # incumbent: repeatedly add the fitting viewport with the best mass per new tile
    inc = 0
    while True:
        pick, pick_key = None, None
        for idx, (m, p) in enumerate(zip(masks, probs)):
            new = (m & ~inc).bit_count()
            if new == 0 or inc.bit_count() + new > q:
                continue
            key = (-p / new, -p, idx)
            if pick_key is None or key < pick_key:
                pick, pick_key = m, key
        if pick is None:
            break
        inc |= pick
    best = [inc, covered(inc)]
    nodes = [0]

    # branch on "viewport idx fully inside the set or not"; the bound adds
    # every uncovered viewport that still fits to the mass already covered
    def visit(idx, tiles):
        nodes[0] += 1
        if nodes[0] > _NODE_LIMIT:
            return
        mass = covered(tiles)
        if mass > best[1] + PROB_TOL:
            best[0], best[1] = tiles, mass
        size = tiles.bit_count()
        bound = mass
        for j in range(n):
            extra = masks[j] & ~tiles
            if extra and size + extra.bit_count() <= q:
                bound += probs[j]
        if bound <= best[1] + PROB_TOL:
            return
        while idx < n and masks[idx] & ~tiles == 0:
            idx += 1
        if idx == n:
            return
        union = tiles | masks[idx]
        if union.bit_count() <= q:
            visit(idx + 1, union)
        visit(idx + 1, tiles)

    visit(0, 0)
    chosen = {t for t in range(num_tiles) if best[0] >> t & 1}
    for tile in range(num_tiles):
        if len(chosen) >= q:
            break
        chosen.add(tile)
    return frozenset(chosen)


@dataclass
class FovTrace:
    viewports: list

    @property
    def num_chunks(self) -> int:
        return len(self.viewports)


def sample_trace(dist: FovDistribution, seed) -> FovTrace:
    """Independent per-chunk draws from the distribution."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for support in dist.chunks:
        probs = np.array([p for _, p in support], dtype=float)
        idx = int(rng.choice(len(support), p=probs / probs.sum()))
        out.append(support[idx][0])
    return FovTrace(out)

"""Perfect-maze generation, BFS solving and a compact binary dataset format.

Grids use a wall lattice: cells with both coordinates odd are rooms, the
cells between two rooms are knocked out by a randomized depth-first walk.
The result is a spanning tree over rooms, so every pair of passage cells is
joined by exactly one simple path.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CorruptFile, Unreachable

WALL, PASSAGE, START, GOAL, PATH = range(5)
VOCAB = ("wall", "passage", "start", "goal", "path")

MAGIC = b"LASR1"
_HEAD = struct.Struct("<III")

_STEPS = ((-1, 0), (1, 0), (0, -1), (0, 1))

Cell = tuple[int, int]


@dataclass
class MazeInstance:
    width: int
    height: int
    grid: np.ndarray  # height x width input tokens
    target: np.ndarray  # grid with the solution path painted in
    start: Cell
    goal: Cell

    @property
    def input_tokens(self) -> np.ndarray:
        return self.grid.reshape(-1)

    @property
    def target_tokens(self) -> np.ndarray:
        return self.target.reshape(-1)

    @property
    def seq_len(self) -> int:
        return self.width * self.height

    def __eq__(self, other) -> bool:
        if not isinstance(other, MazeInstance):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.start == other.start
            and self.goal == other.goal
            and np.array_equal(self.grid, other.grid)
            and np.array_equal(self.target, other.target)
        )


def _carve(width: int, height: int, rng: np.random.Generator) -> np.ndarray:
    grid = np.full((height, width), WALL, dtype=np.int8)
    rooms = [(r, c) for r in range(1, height, 2) for c in range(1, width, 2)]
    first = rooms[rng.integers(len(rooms))]
    grid[first] = PASSAGE
    stack = [first]
    while stack:
        r, c = stack[-1]
        options = []
        for dr, dc in _STEPS:
            nr, nc = r + 2 * dr, c + 2 * dc
            if 0 < nr < height and 0 < nc < width and grid[nr, nc] == WALL:
                options.append((nr, nc, r + dr, c + dc))
        if not options:
            stack.pop()
            continue
        nr, nc, wr, wc = options[rng.integers(len(options))]
        grid[wr, wc] = PASSAGE
        grid[nr, nc] = PASSAGE
        stack.append((nr, nc))
    return grid


def solve_bfs(maze, start: Cell | None = None, goal: Cell | None = None) -> list[Cell]:
    """Shortest path from ``start`` to ``goal`` through non-wall cells, inclusive.

    ``maze`` is a MazeInstance (endpoints taken from it) or a raw token grid.
    """
    if isinstance(maze, MazeInstance):
        grid = maze.grid
        start = maze.start if start is None else start
        goal = maze.goal if goal is None else goal
    else:
        grid = np.asarray(maze)
    h, w = grid.shape
    prev: dict[Cell, Cell | None] = {start: None}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        if cur == goal:
            break
        r, c = cur
        for dr, dc in _STEPS:
            nxt = (r + dr, c + dc)
            if 0 <= nxt[0] < h and 0 <= nxt[1] < w and grid[nxt] != WALL and nxt not in prev:
                prev[nxt] = cur
                queue.append(nxt)
    if goal not in prev:
        raise Unreachable(f"goal {goal} unreachable from {start}")
    path = [goal]
    while path[-1] != start:
        path.append(prev[path[-1]])
    return path[::-1]


def paint_path(grid: np.ndarray, path: Sequence[Cell]) -> np.ndarray:
    target = grid.copy()
    for cell in path[1:-1]:
        target[cell] = PATH
    return target


def generate(width: int, height: int, seed) -> MazeInstance:
    """Random perfect maze with distinct random start and goal passage cells."""
    if width % 2 == 0 or height % 2 == 0 or width < 5 or height < 5:
        raise ValueError("maze width and height must be odd and >= 5")
    rng = np.random.default_rng(seed)
    grid = _carve(width, height, rng)
    cells = np.argwhere(grid == PASSAGE)
    i, j = rng.choice(len(cells), size=2, replace=False)
    start, goal = tuple(int(v) for v in cells[i]), tuple(int(v) for v in cells[j])
    grid[start] = START
    grid[goal] = GOAL
    target = paint_path(grid, solve_bfs(grid, start, goal))
    return MazeInstance(width, height, grid, target, start, goal)


def generate_dataset(count: int, size: int, seed: int) -> list[MazeInstance]:
    """``count`` distinct ``size x size`` mazes, deterministic in ``seed``."""
    seq = np.random.SeedSequence(seed)
    seen: set[bytes] = set()
    out: list[MazeInstance] = []
    attempts = 0
    while len(out) < count:
        child = seq.spawn(1)[0]
        attempts += 1
        if attempts > 50 * count + 1000:
            raise ValueError(f"could not find {count} distinct {size}x{size} mazes")
        m = generate(size, size, child)
        key = m.grid.tobytes()
        if key in seen:
            continue
        seen.add(key)
        out.append(m)
    return out


def split_dataset(instances: Sequence[MazeInstance], val_count: int, seed: int):
    """Seeded disjoint (train, val) split."""
    if not 0 < val_count < len(instances):
        raise ValueError("val_count must leave both splits nonempty")
    perm = np.random.default_rng(seed).permutation(len(instances))
    val = [instances[i] for i in perm[:val_count]]
    train = [instances[i] for i in perm[val_count:]]
    return train, val


def _from_tokens(width: int, height: int, inp: np.ndarray, tgt: np.ndarray, offset: int) -> MazeInstance:
    grid = inp.reshape(height, width).astype(np.int8)
    target = tgt.reshape(height, width).astype(np.int8)
    starts = np.argwhere(grid == START)
    goals = np.argwhere(grid == GOAL)
    if len(starts) != 1 or len(goals) != 1 or grid.max() > GOAL or target.max() > PATH:
        raise CorruptFile("instance does not decode to a valid maze", offset)
    return MazeInstance(width, height, grid, target, tuple(int(v) for v in starts[0]), tuple(int(v) for v in goals[0]))


def write_dataset(instances: Sequence[MazeInstance], path) -> None:
    """Write ``LASR1`` magic, ``count, width, height`` (u32 LE) then token bytes."""
    if not instances:
        raise ValueError("cannot write an empty dataset")
    w, h = instances[0].width, instances[0].height
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEAD.pack(len(instances), w, h))
        for m in instances:
            if (m.width, m.height) != (w, h):
                raise ValueError("all instances must share one grid size")
            fh.write(m.input_tokens.astype(np.uint8).tobytes())
            fh.write(m.target_tokens.astype(np.uint8).tobytes())


def read_dataset(path) -> list[MazeInstance]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CorruptFile("missing LASR1 magic", 0)
    pos = len(MAGIC)
    if len(data) < pos + _HEAD.size:
        raise CorruptFile("truncated header", len(data))
    count, w, h = _HEAD.unpack_from(data, pos)
    pos += _HEAD.size
    L = w * h
    out = []
    for _ in range(count):
        if len(data) < pos + 2 * L:
            raise CorruptFile(f"truncated after {len(out)} of {count} instances", len(data))
        inp = np.frombuffer(data, dtype=np.uint8, count=L, offset=pos)
        tgt = np.frombuffer(data, dtype=np.uint8, count=L, offset=pos + L)
        out.append(_from_tokens(w, h, inp, tgt, pos))
        pos += 2 * L
    if pos != len(data):
        raise CorruptFile("trailing bytes after last instance", pos)
    return out


def stack_tokens(instances: Sequence[MazeInstance]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays ``(inputs, targets)`` of shape ``(N, L)``."""
    inputs = np.stack([m.input_tokens for m in instances]).astype(np.int64)
    targets = np.stack([m.target_tokens for m in instances]).astype(np.int64)
    return inputs, targets

"""Marching cubes over the occupancy channel and colored OBJ export.

The 256-case table is generated rather than transcribed: on every cube face the
crossing points are joined so that inside corners stay separated (the ambiguous
diagonal face is split into two corner cuts). Because that choice depends only on
the four values of the face, neighbouring cubes always agree on shared faces and
the surface is watertight. Segments are chained into oriented loops and each loop
is triangulated as a fan. The fan apex is chosen so that no diagonal joins two
points on a common cube face; a neighbouring cube could otherwise emit the same
diagonal and the edge would end up in four triangles.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .data import OCCUPANCY

# corner c sits at offset (c & 1, c >> 1 & 1, c >> 2 & 1)
CORNERS = np.array([(c & 1, (c >> 1) & 1, (c >> 2) & 1) for c in range(8)])
EDGES = tuple((a, b) for a in range(8) for b in range(a + 1, 8)
              if bin(a ^ b).count("1") == 1)
_EDGE_INDEX = {e: i for i, e in enumerate(EDGES)}


def _faces():
    """Six faces, each as four corners in counter-clockwise order seen from outside."""
    faces = []
    for axis in range(3):
        u, w = (axis + 1) % 3, (axis + 2) % 3
        for side in (0, 1):
            ring = []
            for du, dw in ((0, 0), (1, 0), (1, 1), (0, 1)):
                off = [0, 0, 0]
                off[axis], off[u], off[w] = side, du, dw
                ring.append(off[0] + 2 * off[1] + 4 * off[2])
            faces.append(ring if side == 1 else ring[::-1])
    return faces


FACES = _faces()


def _edge(a, b):
    return _EDGE_INDEX[(min(a, b), max(a, b))]


def _case_loops(case: int) -> list[list[int]]:
    inside = [(case >> c) & 1 for c in range(8)]
    nxt: dict[int, int] = {}
    for ring in FACES:
        b = [inside[c] for c in ring]
        for i in range(4):
            # each inside corner whose predecessor is outside starts a run; the run
            # is cut by a segment from the entering crossing to the leaving one
            if b[i] and not b[i - 1]:
                j = i
                while b[(j + 1) % 4]:
                    j += 1
                enter = _edge(ring[i - 1], ring[i])
                leave = _edge(ring[j % 4], ring[(j + 1) % 4])
                # this direction makes triangle normals point out of the solid
                nxt[enter] = leave
    loops = []
    while nxt:
        start = min(nxt)
        loop = [start]
        cur = nxt.pop(start)
        while cur != start:
            loop.append(cur)
            cur = nxt.pop(cur)
        loops.append(loop)
    return loops


_EDGE_FACES = [frozenset(f for f, ring in enumerate(FACES) if a in ring and b in ring) for a, b in EDGES]


def _fan(loop: list[int]) -> list[tuple[int, int, int]]:
    n = len(loop)
    for k in range(n):
        if all(not (_EDGE_FACES[loop[k]] & _EDGE_FACES[loop[(k + i) % n]]) for i in range(2, n - 1)):
            r = loop[k:] + loop[:k]
            return [(r[0], r[i], r[i + 1]) for i in range(1, n - 1)]
    raise AssertionError(f"no safe fan apex for loop {loop}")  # never happens for the generated table


@lru_cache(maxsize=None)
def case_table() -> tuple[tuple[tuple[int, int, int], ...], ...]:
    """Triangles (as cube-edge index triples) for each of the 256 corner configurations."""
    table = []
    for case in range(256):
        tris = []
        for loop in _case_loops(case):
            tris.extend(_fan(loop))
        table.append(tuple(tris))
    return tuple(table)


@dataclass
class TriangleMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    vertex_colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    @property
    def edges(self) -> dict[tuple[int, int], int]:
        """Undirected edge -> number of incident triangles."""
        counts: dict[tuple[int, int], int] = {}
        for tri in self.triangles.tolist():
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (a, b) if a < b else (b, a)
                counts[key] = counts.get(key, 0) + 1
        return counts

    def euler_characteristic(self) -> int:
        return len(self.vertices) - len(self.edges) + len(self.triangles)

    def is_watertight(self) -> bool:
        return all(n == 2 for n in self.edges.values())

    def signed_volume(self) -> float:
        if len(self.triangles) == 0:
            return 0.0
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


# crossings are kept at least this far (in voxels) from the edge endpoints
T_MIN = 1e-3


def marching_cubes(grid, iso: float = 0.5) -> TriangleMesh:
    """Extract the ``iso`` surface of the occupancy channel of a [4, R, R, R] grid.

    Vertices are in voxel index coordinates (voxel centres at integers). The grid
    is padded with one empty voxel on every side first, so shapes touching the
    boundary still close up. Vertex colours are the RGB of the two edge endpoints,
    linearly interpolated and weighted by occupancy.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 4 or grid.shape[0] != 4:
        raise ValueError(f"expected a [4, D, H, W] voxel grid, got shape {grid.shape}")
    if not 0.0 < iso < 1.0:
        raise ValueError(f"iso must lie in (0, 1), got {iso}")
    vol = np.pad(grid, ((0, 0), (1, 1), (1, 1), (1, 1)))
    occ = vol[OCCUPANCY]
    rgb = np.moveaxis(vol[:OCCUPANCY], 0, -1)
    inside = occ > iso

    cases = np.zeros(tuple(s - 1 for s in occ.shape), dtype=np.int64)
    for c, (x, y, z) in enumerate(CORNERS):
        cases |= inside[x:x + cases.shape[0], y:y + cases.shape[1], z:z + cases.shape[2]].astype(np.int64) << c
    table = case_table()

    index: dict[tuple, int] = {}
    verts, colors, tris = [], [], []

    def vertex(cell, e):
        a, b = EDGES[e]
        pa = tuple(int(v) for v in np.add(cell, CORNERS[a]))
        pb = tuple(int(v) for v in np.add(cell, CORNERS[b]))
        key = (pa, pb)
        if key not in index:
            va, vb = occ[pa], occ[pb]
            # a corner sitting exactly at iso would put the crossings of all its edges
            # on one point; keeping t off the endpoints keeps every triangle proper
            t = min(max((iso - va) / (vb - va), T_MIN), 1.0 - T_MIN)
            wa, wb = (1 - t) * va, t * vb
            if wa + wb > 0:
                col = (wa * rgb[pa] + wb * rgb[pb]) / (wa + wb)
            else:
                col = (1 - t) * rgb[pa] + t * rgb[pb]
            index[key] = len(verts)
            verts.append((1 - t) * np.array(pa, float) + t * np.array(pb, float) - 1.0)
            colors.append(np.clip(col, 0.0, 1.0))
        return index[key]

    for cell in zip(*np.nonzero((cases != 0) & (cases != 255))):
        for tri in table[cases[cell]]:
            tris.append([vertex(cell, e) for e in tri])

    if not tris:
        return TriangleMesh()
    return TriangleMesh(np.array(verts), np.array(colors), np.array(tris, dtype=np.int64))


def obj_text(mesh: TriangleMesh) -> str:
    lines = ["# voxelforge mesh: v x y z r g b, faces 1-indexed",
             f"# vertices {len(mesh.vertices)} triangles {len(mesh.triangles)}"]
    for (x, y, z), (r, g, b) in zip(mesh.vertices.tolist(), mesh.vertex_colors.tolist()):
        lines.append(f"v {x:.6f} {y:.6f} {z:.6f} {r:.6f} {g:.6f} {b:.6f}")
    for a, b, c in mesh.triangles.tolist():
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    return "\n".join(lines) + "\n"


def write_obj(mesh: TriangleMesh, path) -> None:
    Path(path).write_text(obj_text(mesh))


def read_obj(path) -> TriangleMesh:
    """Parse a file written by :func:`write_obj` (also tolerates plain ``v x y z`` lines)."""
    verts, colors, tris = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            nums = [float(v) for v in parts[1:]]
            verts.append(nums[:3])
            colors.append(nums[3:6] if len(nums) >= 6 else [1.0, 1.0, 1.0])
        elif parts[0] == "f":
            tris.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    if not tris and not verts:
        return TriangleMesh()
    return TriangleMesh(np.array(verts, float).reshape(-1, 3), np.array(colors, float).reshape(-1, 3),
                        np.array(tris, dtype=np.int64).reshape(-1, 3))

"""Zero-level-set extraction via marching cubes, mesh diagnostics and export.

The classic 256-case tables are used as published (ambiguous cases may
produce non-manifold spots; diagnostics report them, nothing repairs them).
Sampling streams two z-planes at a time so memory stays flat in the grid
resolution, and crossing vertices are shared through canonical grid-edge
keys, which makes closed surfaces watertight by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mc_tables import EDGE_TABLE, TRI_TABLE


class MeshError(ValueError):
    """Raised for invalid fields, bounds, or malformed mesh files."""


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def face_normals(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        lengths = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(lengths, 1e-300)

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return 0.5 * np.linalg.norm(n, axis=1)


# cube corner offsets in table order and the canonical grid edge behind each
# cube edge: (corner a, corner b, axis, lattice offset of the edge origin)
_CORNERS = np.array([
    (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
], dtype=np.int64)

_EDGES = [
    (0, 1, 0, (0, 0, 0)), (1, 2, 1, (1, 0, 0)), (3, 2, 0, (0, 1, 0)),
    (0, 3, 1, (0, 0, 0)), (4, 5, 0, (0, 0, 1)), (5, 6, 1, (1, 0, 1)),
    (7, 6, 0, (0, 1, 1)), (4, 7, 1, (0, 0, 1)), (0, 4, 2, (0, 0, 0)),
    (1, 5, 2, (1, 0, 0)), (2, 6, 2, (1, 1, 0)), (3, 7, 2, (0, 1, 0)),
]


def marching_cubes(field, bounds, resolution) -> TriangleMesh:
    """Extract the zero isosurface of `field` over axis-aligned `bounds`.

    `field` maps an (N,3) position batch to N scalars; `bounds` is a
    (lo, hi) pair; `resolution` is the cell count per axis (int or triple).
    Vertices are linear interpolations of the sampled values along grid
    edges; triangles are oriented so normals point along the field gradient
    (from negative toward positive values).
    """
    lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in bounds)
    res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,)).copy()
    if np.any(res < 2):
        raise MeshError(f"resolution must be >= 2 per axis, got {res.tolist()}")
    if np.any(hi <= lo):
        raise MeshError(f"degenerate bounds {lo.tolist()} .. {hi.tolist()}")
    nx, ny, nz = (int(r) for r in res)
    xs = np.linspace(lo[0], hi[0], nx + 1)
    ys = np.linspace(lo[1], hi[1], ny + 1)
    zs = np.linspace(lo[2], hi[2], nz + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    plane_pts = np.stack([gx.ravel(), gy.ravel()], axis=1)

    def sample_plane(k):
        pts = np.concatenate([plane_pts, np.full((len(plane_pts), 1), zs[k])], axis=1)
        vals = np.asarray(field(pts), dtype=np.float64)
        if np.any(np.isnan(vals)):
            at = pts[int(np.argmax(np.isnan(vals)))]
            raise MeshError(f"field returned NaN at sample {at.tolist()}")
        return vals.reshape(nx + 1, ny + 1)

    vertices: list = []
    triangles: list = []
    edge_cache: dict = {}

    steps = ((hi - lo) / res).astype(np.float64)

    def edge_vertex(axis, i, j, k, va, vb):
        key = (axis, i, j, k)
        idx = edge_cache.get(key)
        if idx is not None:
            return idx
        t = va / (va - vb) if va != vb else 0.5
        pos = np.array([xs[i], ys[j], zs[k]])
        pos[axis] += t * steps[axis]
        idx = len(vertices)
        vertices.append(pos)
        edge_cache[key] = idx
        return idx

    below = sample_plane(0)
    for k in range(nz):
        above = sample_plane(k + 1)
        corner_vals = (
            below[:-1, :-1], below[1:, :-1], below[1:, 1:], below[:-1, 1:],
            above[:-1, :-1], above[1:, :-1], above[1:, 1:], above[:-1, 1:],
        )
        case = np.zeros((nx, ny), dtype=np.uint16)
        for bit, cv in enumerate(corner_vals):
            case |= (cv < 0.0).astype(np.uint16) << bit
        active = np.argwhere((case != 0) & (case != 255))
        for i, j in active:
            c = int(case[i, j])
            crossings = EDGE_TABLE[c]
            if crossings == 0:
                continue
            everts = [-1] * 12
            for e, (ca, cb, axis, off) in enumerate(_EDGES):
                if not crossings & (1 << e):
                    continue
                va = float(corner_vals[ca][i, j])
                vb = float(corner_vals[cb][i, j])
                everts[e] = edge_vertex(axis, i + off[0], j + off[1], k + off[2],
                                        va, vb)
            tri = TRI_TABLE[c]
            for t0 in range(0, len(tri), 3):
                a, b, d = everts[tri[t0]], everts[tri[t0 + 1]], everts[tri[t0 + 2]]
                triangles.append((a, d, b))  # swapped to orient along +grad
        below = above

    if not triangles:
        return TriangleMesh.empty()
    mesh = TriangleMesh(np.array(vertices), np.array(triangles, dtype=np.int64))
    return _cleanup(mesh)


def _cleanup(mesh: TriangleMesh) -> TriangleMesh:
    """Weld bitwise-duplicate vertices and drop degenerate triangles."""
    if len(mesh.vertices) == 0:
        return mesh
    keys = {}
    remap = np.empty(len(mesh.vertices), dtype=np.int64)
    kept = []
    for i, v in enumerate(mesh.vertices):
        key = v.tobytes()
        hit = keys.get(key)
        if hit is None:
            keys[key] = len(kept)
            remap[i] = len(kept)
            kept.append(v)
        else:
            remap[i] = hit
    tris = remap[mesh.triangles]
    distinct = ((tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2])
                & (tris[:, 0] != tris[:, 2]))
    mesh2 = TriangleMesh(np.array(kept), tris[distinct])
    areas = mesh2.face_areas()
    return TriangleMesh(mesh2.vertices, mesh2.triangles[areas > 0.0])


def weld_vertices(mesh: TriangleMesh, tol: float = 1e-9) -> TriangleMesh:
    """Merge vertices closer than `tol` (bucketed by quantized coordinates,
    checking neighbor buckets so near-boundary pairs are not missed)."""
    if len(mesh.vertices) == 0:
        return mesh
    q = np.floor(mesh.vertices / tol + 0.5).astype(np.int64)
    buckets: dict = {}
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    kept: list = []
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1)
               for dz in (-1, 0, 1)]
    for i, v in enumerate(mesh.vertices):
        key = tuple(q[i])
        found = -1
        for off in offsets:
            nb = buckets.get((key[0] + off[0], key[1] + off[1], key[2] + off[2]))
            if nb is None:
                continue
            for j in nb:
                if np.sum((kept[j] - v) ** 2) <= tol * tol:
                    found = j
                    break
            if found >= 0:
                break
        if found < 0:
            found = len(kept)
            kept.append(v)
            buckets.setdefault(key, []).append(found)
        remap[i] = found
    tris = remap[mesh.triangles]
    distinct = ((tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2])
                & (tris[:, 0] != tris[:, 2]))
    return TriangleMesh(np.array(kept), tris[distinct])


def extract_chunked(field, bounds, chunk_grid, resolution_per_chunk) -> TriangleMesh:
    """Marching cubes per chunk of a partitioned volume, then a weld pass.

    Adjacent chunks share their boundary sample plane, so their crossing
    vertices coincide and the weld (tolerance 1e-9) stitches the chunks into
    the same mesh a single pass at the matched effective resolution yields.
    """
    lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in bounds)
    grid = np.broadcast_to(np.asarray(chunk_grid, dtype=np.int64), (3,)).copy()
    if np.any(grid < 1):
        raise MeshError(f"chunk grid must be >= 1 per axis, got {grid.tolist()}")
    width = (hi - lo) / grid
    pieces = []
    for cx in range(grid[0]):
        for cy in range(grid[1]):
            for cz in range(grid[2]):
                clo = lo + width * np.array([cx, cy, cz])
                chi = lo + width * np.array([cx + 1, cy + 1, cz + 1])
                part = marching_cubes(field, (clo, chi), resolution_per_chunk)
                pieces.append(part)
    verts = [p.vertices for p in pieces if len(p.vertices)]
    if not verts:
        return TriangleMesh.empty()
    tris = []
    base = 0
    for p in pieces:
        if len(p.triangles):
            tris.append(p.triangles + base)
        base += len(p.vertices)
    merged = TriangleMesh(np.concatenate(verts), np.concatenate(tris))
    return weld_vertices(merged, tol=1e-9)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

@dataclass
class MeshStats:
    vertex_count: int
    triangle_count: int
    edge_count: int
    boundary_edge_count: int
    euler_characteristic: int
    watertight: bool


def mesh_stats(mesh: TriangleMesh) -> MeshStats:
    if mesh.is_empty:
        return MeshStats(0, 0, 0, 0, 0, False)
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    boundary = int(np.sum(counts == 1))
    v = len(np.unique(t))
    e = len(uniq)
    f = len(t)
    return MeshStats(vertex_count=v, triangle_count=f, edge_count=e,
                     boundary_edge_count=boundary,
                     euler_characteristic=v - e + f,
                     watertight=boundary == 0)


# ---------------------------------------------------------------------------
# export / import
# ---------------------------------------------------------------------------

def export_mesh(mesh: TriangleMesh, path, fmt: str | None = None,
                transform=None) -> None:
    """Write OBJ (ascii) or binary little-endian PLY.

    `transform` (optional SceneTransform) maps vertices back to original
    scene coordinates on the way out.
    """
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    verts = mesh.vertices
    if transform is not None:
        verts = transform.to_world(verts)
    if fmt == "obj":
        with open(path, "w") as f:
            f.write("# splatfield mesh\n")
            for v in verts:
                f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for t in mesh.triangles:
                f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
    elif fmt == "ply":
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(verts)}\n"
            "property float x\nproperty float y\nproperty float z\n"
            f"element face {len(mesh.triangles)}\n"
            "property list uchar int vertex_indices\nend_header\n"
        )
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(verts.astype("<f4").tobytes())
            if len(mesh.triangles):
                counts = np.full((len(mesh.triangles), 1), 3, dtype=np.uint8)
                tri = mesh.triangles.astype("<i4")
                rec = np.zeros(len(tri), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
                rec["n"] = counts[:, 0]
                rec["idx"] = tri
                f.write(rec.tobytes())
    else:
        raise MeshError(f"unknown mesh format {fmt!r} (use 'obj' or 'ply')")


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    fmt = path.suffix.lstrip(".").lower()
    if fmt == "obj":
        verts, tris = [], []
        for line in open(path):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for k in range(1, len(idx) - 1):
                    tris.append([idx[0], idx[k], idx[k + 1]])
        if not verts:
            return TriangleMesh.empty()
        return TriangleMesh(np.array(verts), np.array(tris or np.zeros((0, 3))))
    if fmt == "ply":
        raw = open(path, "rb").read()
        end = raw.find(b"end_header\n")
        if end < 0:
            raise MeshError(f"{path}: missing PLY header terminator")
        header = raw[:end].decode("ascii").splitlines()
        nv = nf = 0
        for line in header:
            parts = line.split()
            if parts[:2] == ["element", "vertex"]:
                nv = int(parts[2])
            elif parts[:2] == ["element", "face"]:
                nf = int(parts[2])
        off = end + len(b"end_header\n")
        verts = np.frombuffer(raw, dtype="<f4", count=nv * 3, offset=off)
        off += nv * 12
        rec = np.frombuffer(raw, dtype=[("n", "u1"), ("idx", "<i4", (3,))],
                            count=nf, offset=off)
        return TriangleMesh(verts.reshape(nv, 3).astype(np.float64),
                            rec["idx"].astype(np.int64))
    raise MeshError(f"unknown mesh format {fmt!r} (use 'obj' or 'ply')")

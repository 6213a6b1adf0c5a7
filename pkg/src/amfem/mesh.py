"""Conforming triangulations refined by newest vertex bisection.

A triangle is stored as a vertex triple ``(a, b, c)`` in counterclockwise
order; the edge ``(a, b)`` is its reference (refinement) edge and ``c`` is
its newest vertex.  Local edge ``i`` is the edge opposite local vertex ``i``
and runs from vertex ``i+1`` to vertex ``i+2``, so local edge 2 is always
the reference edge.

Every triangle also carries its refinement lineage: the index of its
initial-mesh ancestor, its generation (number of bisections since the
ancestor) and a bisection path whose bits record which child was taken at
each step.  Lineage is what lets a fine mesh be matched against any coarser
mesh it was refined from.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "ClosureError",
    "EdgeTable",
    "Mesh",
    "MeshError",
    "edge_tables",
    "generate_lshape",
    "generate_unit_square",
    "locate",
    "min_angle",
    "refine",
    "refined_elements",
    "refined_neighborhood",
    "similarity_classes",
    "tag_longest_edge",
    "uniform_refine",
]

_MAX_GENERATION = 62


class MeshError(ValueError):
    """Invalid, nonconforming, or unrelated meshes."""


class ClosureError(MeshError):
    """Conformity closure of a refinement did not terminate."""


@dataclass(frozen=True, eq=False)
class EdgeTable:
    """Edge connectivity of a conforming mesh.

    Edges are sorted by their canonical ``(lo, hi)`` vertex pair and are
    directed from the lower to the higher vertex index.  ``tris[:, 0]`` is
    the K+ element (smaller triangle index), ``tris[:, 1]`` is K- or -1 on
    the boundary.  ``normal`` is the right-hand normal of the edge direction
    for interior edges and the outward normal on boundary edges.
    """

    vertices: np.ndarray
    length: np.ndarray
    tris: np.ndarray
    local: np.ndarray
    boundary: np.ndarray
    tangent: np.ndarray
    normal: np.ndarray
    tri_edges: np.ndarray
    tri_signs: np.ndarray

    @property
    def n(self) -> int:
        return len(self.vertices)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable 2D triangulation with reference-edge tags and lineage."""

    vertices: np.ndarray
    triangles: np.ndarray
    generation: np.ndarray | None = None
    ancestor: np.ndarray | None = None
    path: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 2)
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        m = len(t)
        gen = np.zeros(m, np.int64) if self.generation is None else np.array(self.generation, np.int64)
        anc = np.arange(m, dtype=np.int64) if self.ancestor is None else np.array(self.ancestor, np.int64)
        pth = np.zeros(m, np.int64) if self.path is None else np.array(self.path, np.int64)
        if not (gen.shape == anc.shape == pth.shape == (m,)):
            raise MeshError("lineage arrays must have one entry per triangle")
        for name, arr in (("vertices", v), ("triangles", t), ("generation", gen),
                          ("ancestor", anc), ("path", pth)):
            object.__setattr__(self, name, _readonly(arr))

    # -- sizes and geometry -------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def __len__(self) -> int:
        return self.n_triangles

    @cached_property
    def jacobian(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Affine map data ``(J, detJ, Jinv)`` of x = v0 + J xhat."""
        p = self.vertices[self.triangles]
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        Jinv = np.empty_like(J)
        with np.errstate(divide="ignore", invalid="ignore"):
            Jinv[:, 0, 0] = J[:, 1, 1] / det
            Jinv[:, 1, 1] = J[:, 0, 0] / det
            Jinv[:, 0, 1] = -J[:, 0, 1] / det
            Jinv[:, 1, 0] = -J[:, 1, 0] / det
        return _readonly(J), _readonly(det), _readonly(Jinv)

    @property
    def signed_areas(self) -> np.ndarray:
        return 0.5 * self.jacobian[1]

    @property
    def areas(self) -> np.ndarray:
        return np.abs(self.signed_areas)

    @property
    def h(self) -> np.ndarray:
        """Element sizes h_K = |K|^(1/2)."""
        return np.sqrt(self.areas)

    @cached_property
    def local_edge_lengths(self) -> np.ndarray:
        """(M, 3) lengths of local edges, edge i opposite vertex i."""
        p = self.vertices[self.triangles]
        return _readonly(np.stack(
            [np.linalg.norm(p[:, (i + 2) % 3] - p[:, (i + 1) % 3], axis=1) for i in range(3)],
            axis=1))

    def to_physical(self, ref_points: np.ndarray) -> np.ndarray:
        """Map reference points (npts, 2) to every element: (M, npts, 2)."""
        J = self.jacobian[0]
        v0 = self.vertices[self.triangles[:, 0]]
        return v0[:, None, :] + np.einsum("mij,qj->mqi", J, ref_points)

    # -- topology -----------------------------------------------------------

    @cached_property
    def edges(self) -> EdgeTable:
        return edge_tables(self)

    @property
    def boundary_flags(self) -> np.ndarray:
        return self.edges.boundary

    def validate(self) -> "Mesh":
        """Check indices, orientation, and conformity; return self."""
        t = self.triangles
        if t.size and (t.min() < 0 or t.max() >= self.n_vertices):
            raise MeshError("triangle references a missing vertex")
        if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise MeshError("triangle with repeated vertex")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("non-finite vertex coordinates")
        bad = np.flatnonzero(self.signed_areas <= 0)
        if bad.size:
            raise MeshError(f"triangles {bad[:5].tolist()} are degenerate or clockwise")
        tbl = self.edges
        hanging = _hanging_vertices(self.vertices, tbl.vertices[tbl.boundary])
        if hanging.size:
            raise MeshError(f"nonconforming mesh: hanging vertices {hanging[:5].tolist()}")
        return self

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        tbl = self.edges
        return {
            "vertices": self.vertices.tolist(),
            "triangles": self.triangles.tolist(),
            "boundary": tbl.vertices[tbl.boundary].tolist(),
            "generation": self.generation.tolist(),
            "ancestor": self.ancestor.tolist(),
            "path": self.path.tolist(),
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict())
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, data: dict) -> "Mesh":
        allowed = {"vertices", "triangles", "boundary", "generation", "ancestor", "path"}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise MeshError(f"unknown mesh keys: {unknown}")
        if "vertices" not in data or "triangles" not in data:
            raise MeshError("mesh JSON needs 'vertices' and 'triangles'")
        mesh = cls(data["vertices"], data["triangles"], data.get("generation"),
                   data.get("ancestor"), data.get("path")).validate()
        if "boundary" in data:
            given = {tuple(sorted(e)) for e in data["boundary"]}
            tbl = mesh.edges
            actual = {tuple(e) for e in tbl.vertices[tbl.boundary].tolist()}
            if given != actual:
                raise MeshError("'boundary' does not match the boundary of the triangulation")
        return mesh

    @classmethod
    def from_json(cls, source: str | Path) -> "Mesh":
        """Load from a JSON file path or a JSON document string."""
        if isinstance(source, str) and source.lstrip().startswith("{"):
            return cls.from_dict(json.loads(source))
        return cls.from_dict(json.loads(Path(source).read_text()))


# -- edge tables ----------------------------------------------------------------


def edge_tables(mesh: Mesh) -> EdgeTable:
    """Build the edge table of a conforming mesh."""
    t = mesh.triangles
    m = len(t)
    # local edge i joins vertices i+1 and i+2
    start = t[:, [1, 2, 0]]
    end = t[:, [2, 0, 1]]
    lo = np.minimum(start, end).ravel()
    hi = np.maximum(start, end).ravel()
    pairs = np.stack([lo, hi], axis=1)
    uniq, inverse, counts = np.unique(pairs, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    if np.any(counts > 2):
        raise MeshError("nonconforming mesh: an edge is shared by more than two triangles")
    n_e = len(uniq)
    tri_edges = inverse.reshape(m, 3)
    tri_signs = np.where(start < end, 1, -1).astype(np.int64)

    # each slot is (triangle, local edge); sort by edge then by triangle index
    slot_tri = np.repeat(np.arange(m), 3)
    slot_loc = np.tile(np.arange(3), m)
    order = np.lexsort((slot_tri, inverse))
    first = np.zeros(n_e, np.int64)
    first[1:] = np.cumsum(counts)[:-1]
    tris = np.full((n_e, 2), -1, np.int64)
    local = np.full((n_e, 2), -1, np.int64)
    tris[:, 0] = slot_tri[order[first]]
    local[:, 0] = slot_loc[order[first]]
    two = counts == 2
    tris[two, 1] = slot_tri[order[first[two] + 1]]
    local[two, 1] = slot_loc[order[first[two] + 1]]
    boundary = counts == 1

    d = mesh.vertices[uniq[:, 1]] - mesh.vertices[uniq[:, 0]]
    length = np.linalg.norm(d, axis=1)
    tangent = d / length[:, None]
    normal = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1)
    # on the boundary the right-hand normal of the local (counterclockwise)
    # direction is outward; flip where the global direction is reversed
    bsign = tri_signs[tris[boundary, 0], local[boundary, 0]]
    normal[boundary] *= bsign[:, None]
    arrays = [uniq, length, tris, local, boundary, tangent, normal, tri_edges, tri_signs]
    return EdgeTable(*[_readonly(np.ascontiguousarray(a)) for a in arrays])


def _hanging_vertices(vertices: np.ndarray, single_edges: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Vertices lying strictly inside an edge that has only one triangle."""
    if len(single_edges) == 0:
        return np.empty(0, np.int64)
    cand = np.unique(single_edges)
    pv = vertices[cand]
    found = []
    for s in range(0, len(single_edges), chunk):
        e = single_edges[s:s + chunk]
        p, q = vertices[e[:, 0]], vertices[e[:, 1]]
        d = q - p
        l2 = np.einsum("ij,ij->i", d, d)
        r = pv[:, None, :] - p[None, :, :]
        cross = r[..., 0] * d[None, :, 1] - r[..., 1] * d[None, :, 0]
        dot = np.einsum("vei,ei->ve", r, d)
        tol = 1e-12 * l2[None, :]
        inside = (np.abs(cross) <= tol * 1e2) & (dot > tol) & (dot < l2[None, :] - tol)
        found.append(cand[inside.any(axis=1)])
    return np.unique(np.concatenate(found))


# -- generators -----------------------------------------------------------------


def tag_longest_edge(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Reorder each triangle counterclockwise with its longest edge first.

    Ties between equally long edges go to the edge whose opposite vertex has
    the lowest global index.
    """
    v = np.asarray(vertices, dtype=np.float64)
    t = np.array(triangles, dtype=np.int64).reshape(-1, 3)
    p = v[t]
    area2 = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
             - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    cw = area2 < 0
    t[cw] = t[cw][:, [0, 2, 1]]
    p = v[t]
    lengths = np.stack(
        [np.linalg.norm(p[:, (i + 2) % 3] - p[:, (i + 1) % 3], axis=1) for i in range(3)], axis=1)
    longest = lengths.max(axis=1, keepdims=True)
    is_long = lengths >= longest * (1 - 1e-12)
    key = np.where(is_long, t, np.iinfo(np.int64).max)
    opp = np.argmin(key, axis=1)
    rows = np.arange(len(t))
    return np.stack([t[rows, (opp + 1) % 3], t[rows, (opp + 2) % 3], t[rows, opp]], axis=1)


def _grid_mesh(xs, ys, keep_cell) -> Mesh:
    nx, ny = len(xs), len(ys)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    tris = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            if not keep_cell(xs[i], ys[j]):
                continue
            p00 = i + j * nx
            p10, p01, p11 = p00 + 1, p00 + nx, p00 + nx + 1
            tris.append((p00, p10, p11))
            tris.append((p00, p11, p01))
    tris = np.array(tris, dtype=np.int64)
    used = np.unique(tris)
    renum = np.full(len(pts), -1, np.int64)
    renum[used] = np.arange(len(used))
    verts, tris = pts[used], renum[tris]
    return Mesh(verts, tag_longest_edge(verts, tris))


def generate_unit_square(n: int) -> Mesh:
    """Uniform mesh of [0,1]^2 with 2n^2 right isosceles triangles."""
    if int(n) != n or n < 1:
        raise ValueError(f"subdivision count must be a positive integer, got {n!r}")
    xs = np.linspace(0.0, 1.0, n + 1)
    return _grid_mesh(xs, xs, lambda x, y: True)


def generate_lshape(n: int) -> Mesh:
    """Mesh of (-1,1)^2 minus [0,1)x(-1,0) with 6n^2 triangles."""
    if int(n) != n or n < 1:
        raise ValueError(f"subdivision count must be a positive integer, got {n!r}")
    xs = np.linspace(-1.0, 1.0, 2 * n + 1)
    return _grid_mesh(xs, xs, lambda x, y: not (x >= 0 and y < 0))


# -- refinement -----------------------------------------------------------------


def refine(mesh: Mesh, marked, rule: str = "nvb") -> Mesh:
    """Refine marked triangles by newest vertex bisection and close conformity.

    Parameters
    ----------
    mesh : Mesh
    marked : iterable of int
        Triangle indices to refine.
    rule : {"nvb", "bisec3"}
        ``"nvb"`` bisects each marked triangle once across its reference
        edge.  ``"bisec3"`` bisects all three edges of each marked triangle
        (three bisections, four children).

    Returns
    -------
    Mesh
        A new conforming mesh.  Vertices of ``mesh`` keep their indices;
        triangles outside the refinement closure keep their relative order.
    """
    marked = np.unique(np.asarray(list(marked) if not isinstance(marked, np.ndarray) else marked,
                                  dtype=np.int64))
    if marked.size and (marked[0] < 0 or marked[-1] >= mesh.n_triangles):
        raise MeshError("marked index out of range")
    if rule not in ("nvb", "bisec3"):
        raise ValueError(f"unknown refinement rule {rule!r}")
    if marked.size == 0:
        return mesh

    tbl = mesh.edges
    te = tbl.tri_edges
    emark = np.zeros(tbl.n, dtype=bool)
    if rule == "nvb":
        emark[te[marked, 2]] = True
    else:
        emark[te[marked].ravel()] = True

    # a triangle with any bisected edge must bisect its reference edge first
    for _ in range(mesh.n_triangles + 1):
        need = emark[te].any(axis=1) & ~emark[te[:, 2]]
        if not need.any():
            break
        emark[te[need, 2]] = True
    else:
        raise ClosureError("conformity closure did not terminate")

    new_edges = np.flatnonzero(emark)
    nv = mesh.n_vertices
    mid = np.full(tbl.n, -1, np.int64)
    mid[new_edges] = nv + np.arange(len(new_edges))
    ev = tbl.vertices[new_edges]
    new_pts = 0.5 * (mesh.vertices[ev[:, 0]] + mesh.vertices[ev[:, 1]])
    vertices = np.concatenate([mesh.vertices, new_pts])

    t, gen, anc, pth = mesh.triangles, mesh.generation, mesh.ancestor, mesh.path
    if gen.max(initial=0) + 2 > _MAX_GENERATION:
        raise MeshError("bisection depth exceeds lineage capacity")
    bis = emark[te[:, 2]]
    keep = ~bis
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    m = mid[te[:, 2]]
    split1 = bis & emark[te[:, 1]]  # child (c, a, m) bisects edge c-a
    split2 = bis & emark[te[:, 0]]  # child (b, c, m) bisects edge b-c
    m1 = mid[te[:, 1]]
    m0 = mid[te[:, 0]]

    parts = []  # (mask, triangles, order, generation, path)
    idx = np.arange(len(t))
    parts.append((keep, t, 0, gen, pth))
    one = bis & ~split1
    parts.append((one, np.stack([c, a, m], 1), 0, gen + 1, 2 * pth))
    parts.append((split1, np.stack([m, c, m1], 1), 0, gen + 2, 4 * pth))
    parts.append((split1, np.stack([a, m, m1], 1), 1, gen + 2, 4 * pth + 1))
    two = bis & ~split2
    parts.append((two, np.stack([b, c, m], 1), 2, gen + 1, 2 * pth + 1))
    parts.append((split2, np.stack([m, b, m0], 1), 2, gen + 2, 4 * pth + 2))
    parts.append((split2, np.stack([c, m, m0], 1), 3, gen + 2, 4 * pth + 3))

    parent = np.concatenate([idx[mask] for mask, *_ in parts])
    order = np.concatenate([np.full(mask.sum(), o) for mask, _, o, _, _ in parts])
    tris = np.concatenate([tri[mask] for mask, tri, *_ in parts])
    gens = np.concatenate([g[mask] for mask, _, _, g, _ in parts])
    paths = np.concatenate([p[mask] for mask, *_, p in parts])
    ancs = np.concatenate([anc[mask] for mask, *_ in parts])
    perm = np.lexsort((order, parent))
    return Mesh(vertices, tris[perm], gens[perm], ancs[perm], paths[perm])


def uniform_refine(mesh: Mesh, times: int = 1) -> Mesh:
    """Mark every triangle and refine ``times`` times by single bisection."""
    for _ in range(times):
        mesh = refine(mesh, np.arange(mesh.n_triangles))
    return mesh


def locate(coarse: Mesh, fine: Mesh) -> np.ndarray:
    """Index of the coarse triangle containing each fine triangle.

    Raises MeshError unless ``fine`` was produced from ``coarse`` by
    refinement.
    """
    nc = coarse.n_vertices
    if fine.n_vertices < nc or not np.array_equal(fine.vertices[:nc], coarse.vertices):
        raise MeshError("fine mesh does not extend the coarse mesh's vertices")
    table = {key: i for i, key in enumerate(zip(coarse.ancestor.tolist(),
                                                coarse.generation.tolist(),
                                                coarse.path.tolist()))}
    out = np.full(fine.n_triangles, -1, np.int64)
    anc, gen, pth = fine.ancestor.tolist(), fine.generation.tolist(), fine.path.tolist()
    gmin = int(coarse.generation.min(initial=0))
    for i in range(fine.n_triangles):
        g, p = gen[i], pth[i]
        while g >= gmin:
            j = table.get((anc[i], g, p))
            if j is not None:
                out[i] = j
                break
            g -= 1
            p >>= 1
    if np.any(out < 0):
        raise MeshError("fine mesh is not a refinement of the coarse mesh")
    return out


def refined_elements(coarse: Mesh, fine: Mesh) -> np.ndarray:
    """Coarse triangles that do not survive in ``fine`` (the refined set)."""
    parent = locate(coarse, fine)
    survives = np.zeros(coarse.n_triangles, dtype=bool)
    same = coarse.generation[parent] == fine.generation
    survives[parent[same]] = True
    return np.flatnonzero(~survives)


def refined_neighborhood(coarse: Mesh, fine: Mesh) -> np.ndarray:
    """Coarse triangles sharing at least a vertex with a refined triangle."""
    refined = refined_elements(coarse, fine)
    touched = np.zeros(coarse.n_vertices, dtype=bool)
    touched[coarse.triangles[refined].ravel()] = True
    return np.flatnonzero(touched[coarse.triangles].any(axis=1))


# -- shape quality --------------------------------------------------------------


def _angles(mesh: Mesh) -> np.ndarray:
    p = mesh.vertices[mesh.triangles]
    out = np.empty((mesh.n_triangles, 3))
    for i in range(3):
        u = p[:, (i + 1) % 3] - p[:, i]
        w = p[:, (i + 2) % 3] - p[:, i]
        cos = np.einsum("ij,ij->i", u, w) / (np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1))
        out[:, i] = np.arccos(np.clip(cos, -1.0, 1.0))
    return out


def min_angle(mesh: Mesh) -> float:
    """Smallest interior angle in degrees."""
    return float(np.degrees(_angles(mesh).min()))


def similarity_classes(mesh: Mesh, decimals: int = 8) -> dict[int, int]:
    """Number of distinct triangle shapes per initial ancestor."""
    key = np.round(np.sort(_angles(mesh), axis=1), decimals)
    out: dict[int, set] = {}
    for a, k in zip(mesh.ancestor.tolist(), map(tuple, key.tolist())):
        out.setdefault(a, set()).add(k)
    return {a: len(s) for a, s in out.items()}

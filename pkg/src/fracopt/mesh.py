"""Triangulations with newest-vertex bisection, graded intervals, extrusion.

Triangles are stored as vertex triples ``(newest, a, b)``: the newest
vertex comes first and the refinement edge is the opposite edge ``(a, b)``.
All meshes are treated as immutable; :func:`bisect` returns a new mesh.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ClosureOverflow, UnsupportedDomain

NAMED_DOMAINS = {
    "unit-square": [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)],
    "square": [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)],
    "l-shape": [(-1.0, -1.0), (0.0, -1.0), (0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (-1.0, 1.0)],
}
NAMED_DOMAINS["square(-1,1)^2"] = NAMED_DOMAINS["square"]
NAMED_DOMAINS["square(−1,1)²"] = NAMED_DOMAINS["square"]


def _freeze(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _edge_keys(a, b, n):
    lo = np.minimum(a, b).astype(np.int64)
    hi = np.maximum(a, b).astype(np.int64)
    return lo * n + hi


class BaseMesh:
    """Conforming triangulation of a polygonal domain.

    Parameters
    ----------
    vertices : (N, 2) array
    triangles : (T, 3) int array
        Positively oriented, newest vertex first.
    boundary : (N,) bool array
        Vertices on the domain boundary.
    generation : (T,) int array, optional
    parent : (T,) int array, optional
        Index of the triangle of the previous mesh each triangle descends from.
    perimeter : float, optional
        Length of the domain boundary, used by :meth:`is_conforming`.
    """

    def __init__(self, vertices, triangles, boundary, generation=None, parent=None,
                 perimeter=None):
        self.vertices = _freeze(np.asarray(vertices, dtype=float))
        self.triangles = _freeze(np.asarray(triangles, dtype=np.int64))
        self.boundary = _freeze(np.asarray(boundary, dtype=bool))
        nt = len(self.triangles)
        self.generation = _freeze(np.zeros(nt, dtype=np.int64) if generation is None
                                  else np.asarray(generation, dtype=np.int64))
        self.parent = _freeze(np.arange(nt) if parent is None
                              else np.asarray(parent, dtype=np.int64))
        self.perimeter = perimeter

    def __repr__(self):
        return f"BaseMesh(n_vertices={self.n_vertices}, n_triangles={self.n_triangles})"

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @cached_property
    def _edge_data(self):
        t = self.triangles
        # local edge i is opposite local vertex i
        a = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
        b = np.concatenate([t[:, 2], t[:, 0], t[:, 1]])
        keys = _edge_keys(a, b, self.n_vertices)
        uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
        elem2edge = inverse.reshape(3, -1).T
        edges = np.stack([uniq // self.n_vertices, uniq % self.n_vertices], axis=1)
        return uniq, edges, elem2edge, counts

    @property
    def edges(self):
        """(E, 2) vertex pairs, sorted by key."""
        return self._edge_data[1]

    @property
    def elem2edge(self):
        """(T, 3) edge index of the edge opposite each local vertex."""
        return self._edge_data[2]

    @property
    def edge_multiplicity(self):
        return self._edge_data[3]

    @cached_property
    def boundary_edges(self):
        return np.flatnonzero(self.edge_multiplicity == 1)

    @cached_property
    def signed_areas(self):
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self):
        return np.abs(self.signed_areas)

    @cached_property
    def diameters(self):
        """Longest edge of every triangle."""
        p = self.vertices[self.triangles]
        lengths = np.stack([np.linalg.norm(p[:, (i + 1) % 3] - p[:, (i + 2) % 3], axis=1)
                            for i in range(3)], axis=1)
        return lengths.max(axis=1)

    @cached_property
    def vertex_triangles(self):
        """CSR pair ``(indptr, indices)``: triangles containing each vertex."""
        nt = self.n_triangles
        flat = self.triangles.ravel()
        tri = np.repeat(np.arange(nt), 3)
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=self.n_vertices)
        indptr = np.concatenate([[0], np.cumsum(counts)])
        return indptr, tri[order]

    @cached_property
    def free_vertices(self):
        return np.flatnonzero(~self.boundary)

    def is_conforming(self):
        """No edge shared by more than two triangles and no hanging nodes."""
        if np.any(self.edge_multiplicity > 2) or np.any(self.signed_areas <= 0):
            return False
        if self.perimeter is None:
            return True
        e = self.edges[self.boundary_edges]
        length = np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).sum()
        return abs(length - self.perimeter) <= 1e-10 * self.perimeter

    def dump(self, path):
        """Write the plain-text mesh format."""
        with open(path, "w") as fh:
            fh.write(f"vertices {self.n_vertices} triangles {self.n_triangles}\n")
            for (x, y), flag in zip(self.vertices, self.boundary):
                fh.write(f"{float(x)!r} {float(y)!r} {int(flag)}\n")
            bflag = self.edge_multiplicity[self.elem2edge] == 1
            for tri, (f0, f1, f2) in zip(self.triangles, bflag):
                fh.write(f"{tri[0]} {tri[1]} {tri[2]} {int(f0)} {int(f1)} {int(f2)}\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            header = fh.readline().split()
            nv, nt = int(header[1]), int(header[3])
            verts, bnd, tris = [], [], []
            for _ in range(nv):
                x, y, f = fh.readline().split()
                verts.append((float(x), float(y)))
                bnd.append(bool(int(f)))
            for _ in range(nt):
                tris.append([int(v) for v in fh.readline().split()[:3]])
        mesh = cls(verts, tris, bnd)
        e = mesh.edges[mesh.boundary_edges]
        mesh.perimeter = float(np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]],
                                              axis=1).sum())
        return mesh

    def write_vtk(self, path, cell_data=None, point_data=None):
        """Legacy VTK (ASCII) unstructured grid, for visualization only."""
        with open(path, "w") as fh:
            fh.write("# vtk DataFile Version 3.0\nfracopt mesh\nASCII\nDATASET UNSTRUCTURED_GRID\n")
            fh.write(f"POINTS {self.n_vertices} double\n")
            for x, y in self.vertices:
                fh.write(f"{float(x)!r} {float(y)!r} 0.0\n")
            fh.write(f"CELLS {self.n_triangles} {4 * self.n_triangles}\n")
            for a, b, c in self.triangles:
                fh.write(f"3 {a} {b} {c}\n")
            fh.write(f"CELL_TYPES {self.n_triangles}\n" + "5\n" * self.n_triangles)
            if cell_data:
                fh.write(f"CELL_DATA {self.n_triangles}\n")
                for name, values in cell_data.items():
                    fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    fh.writelines(f"{float(v)!r}\n" for v in np.asarray(values, dtype=float))
            if point_data:
                fh.write(f"POINT_DATA {self.n_vertices}\n")
                for name, values in point_data.items():
                    fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    fh.writelines(f"{float(v)!r}\n" for v in np.asarray(values, dtype=float))


def _check_polygon(poly):
    poly = np.asarray(poly, dtype=float)
    if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 4:
        raise UnsupportedDomain("polygon needs at least four (x, y) corners")
    nxt = np.roll(poly, -1, axis=0)
    d = nxt - poly
    if np.any(np.all(d == 0, axis=1)):
        raise UnsupportedDomain("polygon has repeated consecutive corners")
    if np.any((d[:, 0] != 0) & (d[:, 1] != 0)):
        raise UnsupportedDomain("only axis-aligned polygon edges are supported")
    n = len(poly)
    # pairwise intersection test of non-adjacent axis-aligned segments
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            (ax0, ay0), (ax1, ay1) = poly[i], nxt[i]
            (bx0, by0), (bx1, by1) = poly[j], nxt[j]
            if (max(min(ax0, ax1), min(bx0, bx1)) <= min(max(ax0, ax1), max(bx0, bx1))
                    and max(min(ay0, ay1), min(by0, by1)) <= min(max(ay0, ay1), max(by0, by1))):
                raise UnsupportedDomain("polygon is not simple")
    area2 = np.sum(poly[:, 0] * nxt[:, 1] - nxt[:, 0] * poly[:, 1])
    if area2 < 0:
        poly = poly[::-1]
    return poly


def _inside(poly, pts):
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    nxt = np.roll(poly, -1, axis=0)
    for (x0, y0), (x1, y1) in zip(poly, nxt):
        crosses = (y0 > y) != (y1 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < xc)
    return inside


def initial_mesh(domain):
    """Coarse triangulation of a named domain or an axis-aligned polygon.

    The polygon's corner coordinates span a tensor grid; every grid cell
    inside the domain is split along its south-west/north-east diagonal,
    which is the longest edge of both halves and is used as their common
    refinement edge.

    Parameters
    ----------
    domain : str or sequence of (x, y)
        ``"unit-square"``, ``"square"`` (i.e. (-1,1)^2), ``"l-shape"`` or an
        explicit simple polygon with axis-aligned edges.
    """
    if isinstance(domain, str):
        try:
            poly = NAMED_DOMAINS[domain.strip().lower()]
        except KeyError:
            raise UnsupportedDomain(f"unknown domain {domain!r}") from None
    else:
        poly = domain
    poly = _check_polygon(poly)

    xs = np.unique(poly[:, 0])
    ys = np.unique(poly[:, 1])
    X, Yg = np.meshgrid(xs, ys, indexing="xy")
    grid_index = -np.ones(X.shape, dtype=np.int64)
    cx = 0.5 * (xs[:-1] + xs[1:])
    cy = 0.5 * (ys[:-1] + ys[1:])
    CX, CY = np.meshgrid(cx, cy, indexing="xy")
    cell_in = _inside(poly, np.stack([CX.ravel(), CY.ravel()], axis=1)).reshape(CX.shape)

    used = np.zeros(X.shape, dtype=bool)
    used[:-1, :-1] |= cell_in
    used[1:, :-1] |= cell_in
    used[:-1, 1:] |= cell_in
    used[1:, 1:] |= cell_in
    grid_index[used] = np.arange(used.sum())
    vertices = np.stack([X[used], Yg[used]], axis=1)

    tris = []
    for j, i in zip(*np.nonzero(cell_in)):
        sw, se = grid_index[j, i], grid_index[j, i + 1]
        nw, ne = grid_index[j + 1, i], grid_index[j + 1, i + 1]
        tris.append([se, ne, sw])
        tris.append([nw, sw, ne])
    tris = np.array(tris, dtype=np.int64)

    nxt = np.roll(poly, -1, axis=0)
    perimeter = float(np.abs(nxt - poly).sum())
    mesh = BaseMesh(vertices, tris, np.zeros(len(vertices), dtype=bool), perimeter=perimeter)
    bnd = np.zeros(len(vertices), dtype=bool)
    bnd[mesh.edges[mesh.boundary_edges].ravel()] = True
    mesh = BaseMesh(vertices, tris, bnd, perimeter=perimeter)
    mesh.domain = domain
    return mesh


def bisect(mesh, marked, max_depth=10_000):
    """Newest-vertex bisection of ``marked`` triangles with conforming closure.

    Returns a new :class:`BaseMesh`; its ``parent`` array maps each triangle
    to the triangle of ``mesh`` it came from.

    Raises
    ------
    ClosureOverflow
        The closure did not stabilize within ``max_depth`` sweeps.
    """
    marked = np.unique(np.asarray(list(marked) if not isinstance(marked, np.ndarray) else marked,
                                  dtype=np.int64))
    if marked.size == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.n_triangles:
        raise IndexError("marked triangle index out of range")

    keys, edges, elem2edge, mult = mesh._edge_data
    cut = np.zeros(len(edges), dtype=bool)
    cut[elem2edge[marked, 0]] = True
    for _ in range(max_depth):
        has_cut = cut[elem2edge].any(axis=1)
        need = has_cut & ~cut[elem2edge[:, 0]]
        if not need.any():
            break
        cut[elem2edge[need, 0]] = True
    else:
        raise ClosureOverflow(f"closure did not terminate within {max_depth} sweeps")

    nv = mesh.n_vertices
    cut_ids = np.flatnonzero(cut)
    midpoint = -np.ones(len(edges), dtype=np.int64)
    midpoint[cut_ids] = nv + np.arange(len(cut_ids))
    ce = edges[cut_ids]
    vertices = np.concatenate([mesh.vertices, 0.5 * (mesh.vertices[ce[:, 0]] + mesh.vertices[ce[:, 1]])])
    boundary = np.concatenate([mesh.boundary, mult[cut_ids] == 1])

    tris = np.array(mesh.triangles)
    gen = np.array(mesh.generation)
    parent = np.arange(mesh.n_triangles)
    # keys over the enlarged vertex range: child edges may touch new vertices
    nall = len(vertices)
    keys = edges[:, 0] * nall + edges[:, 1]
    for _ in range(max_depth):
        ek = _edge_keys(tris[:, 1], tris[:, 2], nall)
        pos = np.searchsorted(keys, ek)
        pos = np.minimum(pos, len(keys) - 1)
        found = keys[pos] == ek
        mids = np.where(found, midpoint[pos], -1)
        split = mids >= 0
        if not split.any():
            break
        t = tris[split]
        m = mids[split]
        c1 = np.stack([m, t[:, 0], t[:, 1]], axis=1)
        c2 = np.stack([m, t[:, 2], t[:, 0]], axis=1)
        keep = ~split
        g = gen[split] + 1
        p = parent[split]
        tris = np.concatenate([tris[keep], c1, c2])
        gen = np.concatenate([gen[keep], g, g])
        parent = np.concatenate([parent[keep], p, p])
    else:
        raise ClosureOverflow("bisection did not terminate")

    # deterministic ordering: children stay grouped by ancestor
    order = np.argsort(parent, kind="stable")
    new = BaseMesh(vertices, tris[order], boundary, generation=gen[order], parent=parent[order],
                   perimeter=mesh.perimeter)
    new.domain = getattr(mesh, "domain", None)
    return new


def uniform_refine(mesh, times=1):
    """Bisect every triangle ``times`` times."""
    for _ in range(times):
        mesh = bisect(mesh, np.arange(mesh.n_triangles))
    return mesh


@dataclass(frozen=True)
class IntervalMesh:
    """Partition ``0 = y_0 < ... < y_M = Y`` graded towards ``y = 0``."""

    Y: float
    points: np.ndarray
    gamma: float

    @property
    def M(self):
        return len(self.points) - 1

    @property
    def lengths(self):
        return np.diff(self.points)

    @property
    def h_max(self):
        return float(self.lengths.max())

    def satisfies_grading(self, s):
        return self.gamma > 3.0 / (2.0 * s)


def graded_interval(Y, M, gamma):
    """Points ``y_l = (l / M)**gamma * Y`` for ``l = 0..M``."""
    if not Y > 0:
        raise ValueError("Y must be positive")
    if int(M) != M or M < 1:
        raise ValueError("M must be a positive integer")
    if gamma < 1:
        raise ValueError("gamma must be at least 1")
    M = int(M)
    points = (np.arange(M + 1) / M) ** gamma * Y
    points[-1] = Y
    points.setflags(write=False)
    return IntervalMesh(float(Y), points, float(gamma))


@dataclass(frozen=True)
class ExtrudedMesh:
    """Tensor product of a base triangulation and a graded interval partition.

    Degrees of freedom of the tensor P1 space live on (free base vertex,
    level) pairs with level ``0..M-1``; the lateral boundary and the top
    ``y = Y`` are Dirichlet. Global index ``i * M + l`` for the ``i``-th free
    vertex and level ``l``.
    """

    base: BaseMesh
    interval: IntervalMesh
    alpha: float

    def __post_init__(self):
        if not -1.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (-1, 1)")

    @property
    def s(self):
        return 0.5 * (1.0 - self.alpha)

    @property
    def M(self):
        return self.interval.M

    @property
    def Y(self):
        return self.interval.Y

    @property
    def n_cells(self):
        return self.base.n_triangles * self.M

    @property
    def n_free_base(self):
        return len(self.base.free_vertices)

    @property
    def n_dofs(self):
        return self.n_free_base * self.M

    def dof_index(self, vertex, level):
        """Global DOF of ``(vertex, level)`` or -1 on the Dirichlet boundary."""
        if level >= self.M or self.base.boundary[vertex]:
            return -1
        k = int(np.searchsorted(self.base.free_vertices, vertex))
        return k * self.M + level


def extrude(base, interval, alpha):
    return ExtrudedMesh(base, interval, float(alpha))


@dataclass(frozen=True)
class Star:
    """Triangles sharing the vertex ``center`` and their smallest diameter."""

    center: int
    triangles: np.ndarray = field(repr=False)
    h: float


def star(base, z):
    indptr, tri = base.vertex_triangles
    ts = tri[indptr[z]:indptr[z + 1]]
    return Star(int(z), ts, float(base.diameters[ts].min()))


def star_sizes(base):
    """Minimal diameter ``h_z`` of the star of every vertex."""
    indptr, tri = base.vertex_triangles
    d = base.diameters[tri]
    return np.minimum.reduceat(d, indptr[:-1])


def check_grading(mesh, C):
    """``h_Y <= C * h_z`` for every vertex ``z`` of the base mesh."""
    if not C > 0:
        raise ValueError("C must be positive")
    return bool(mesh.interval.h_max <= C * mesh.base.diameters.min())

"""Cameras, rays, triangle meshes and the mesh queries used by the local surface.

Pixel convention: continuous pixel coordinates with the centre of pixel
(row i, column j) at (j + 0.5, i + 0.5). Camera frame is x right, y down,
z forward; depth means camera-frame z.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

RAY_EPS = 1e-9


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# cameras


@dataclass
class Camera:
    K: np.ndarray
    c2w: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        R = self.c2w[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-8) or np.linalg.det(R) < 0:
            raise GeometryError("camera rotation is not a proper rotation")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise GeometryError("focal lengths must be positive")
        cx, cy = self.K[0, 2], self.K[1, 2]
        if not (0 <= cx <= self.width and 0 <= cy <= self.height):
            raise GeometryError("principal point outside the image")

    @classmethod
    def look_at(cls, eye, target, up, focal, width, height):
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-12:
            raise GeometryError("up vector parallel to viewing direction")
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        c2w = np.eye(4)
        c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = x, y, z, eye
        K = np.array([[focal, 0, width / 2], [0, focal, height / 2], [0, 0, 1.0]])
        return cls(K, c2w, width, height)

    @property
    def R(self):
        return self.c2w[:3, :3]

    @property
    def center(self):
        return self.c2w[:3, 3]

    @property
    def w2c(self):
        w2c = np.eye(4)
        w2c[:3, :3] = self.R.T
        w2c[:3, 3] = -self.R.T @ self.center
        return w2c

    def to_dict(self):
        return {"K": self.K.tolist(), "c2w": self.c2w.tolist(),
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["K"]), np.array(d["c2w"]), int(d["width"]), int(d["height"]))

    def pixel_centers(self):
        """(H*W, 2) pixel-centre coordinates in row-major order."""
        jj, ii = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([jj.ravel() + 0.5, ii.ravel() + 0.5], axis=1)

    def directions(self, pixels):
        """Unit world-space ray directions and the cosine to the optical axis."""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        x = (pixels[:, 0] - self.K[0, 2]) / self.K[0, 0]
        y = (pixels[:, 1] - self.K[1, 2]) / self.K[1, 1]
        d_cam = np.stack([x, y, np.ones_like(x)], axis=1)
        n = np.linalg.norm(d_cam, axis=1, keepdims=True)
        d_world = (d_cam / n) @ self.R.T
        return d_world, 1.0 / n[:, 0]


def unproject(camera, pixels, depths):
    """World points at camera-frame depth ``depths`` behind ``pixels``."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    depths = np.atleast_1d(np.asarray(depths, dtype=np.float64))
    if np.any(depths <= 0):
        raise GeometryError("depth must be positive")
    x = (pixels[:, 0] - camera.K[0, 2]) / camera.K[0, 0] * depths
    y = (pixels[:, 1] - camera.K[1, 2]) / camera.K[1, 1] * depths
    p_cam = np.stack([x, y, depths], axis=1)
    return p_cam @ camera.R.T + camera.center


def project(camera, points):
    """Pixel coordinates (N,2) and depths (N,) of world points."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    p_cam = (points - camera.center) @ camera.R
    z = p_cam[:, 2]
    if np.any(z <= 0):
        raise GeometryError("point at or behind the camera plane")
    u = camera.K[0, 0] * p_cam[:, 0] / z + camera.K[0, 2]
    v = camera.K[1, 1] * p_cam[:, 1] / z + camera.K[1, 2]
    return np.stack([u, v], axis=1), z


def project_tensor(camera, points):
    """Differentiable projection of a (N,3) Tensor; returns (pixels (N,2), depth (N,))."""
    from .autodiff import concat

    p_cam = (points - camera.center) @ camera.R
    z = p_cam[:, 2]
    u = p_cam[:, 0] / z * camera.K[0, 0] + camera.K[0, 2]
    v = p_cam[:, 1] / z * camera.K[1, 1] + camera.K[1, 2]
    return concat([u.reshape(-1, 1), v.reshape(-1, 1)], axis=1), z


# ---------------------------------------------------------------------------
# rays


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float = 0.0
    far: float = np.inf

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise GeometryError("ray direction must be a unit vector")
        if not 0 <= self.near < self.far:
            raise GeometryError("need 0 <= near < far")


@dataclass
class HitRecord:
    face: int
    bary: np.ndarray
    distance: float


# ---------------------------------------------------------------------------
# meshes


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray = None
    opacities: np.ndarray = None
    _bvh: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        k = len(self.vertices)
        if self.colors is None:
            self.colors = np.ones((k, 3))
        if self.opacities is None:
            self.opacities = np.ones(k)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(-1)
        if len(self.colors) != k or len(self.opacities) != k:
            raise GeometryError("colour/opacity arrays must have one entry per vertex")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= k):
            raise GeometryError("face index out of range")

    def with_vertices(self, vertices):
        return TriMesh(vertices, self.faces, self.colors, self.opacities)

    def triangles(self):
        return self.vertices[self.faces]

    def face_areas(self):
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def drop_degenerate(self, tol=1e-14):
        keep = self.face_areas() > tol
        return TriMesh(self.vertices, self.faces[keep], self.colors, self.opacities)

    def edges(self):
        """Unique undirected edges as (E,2) sorted index pairs."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def neighbors(self):
        nb = [[] for _ in range(len(self.vertices))]
        for a, b in self.edges():
            nb[a].append(b)
            nb[b].append(a)
        return [np.array(sorted(n), dtype=np.int64) for n in nb]

    @property
    def bvh(self):
        if self._bvh is None:
            self._bvh = BVH(self.triangles())
        return self._bvh


# ---------------------------------------------------------------------------
# primitive tests (vectorised)


def ray_triangle(origins, dirs, tri, eps=RAY_EPS):
    """Möller–Trumbore for paired rows: returns (t, u, v, hit) arrays."""
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    p = np.cross(dirs, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = origins - v0
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = np.einsum("ij,ij->i", dirs, q) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    hit = ok & (u >= -eps) & (v >= -eps) & (u + v <= 1 + eps)
    return t, u, v, hit


def closest_point_triangle(p, tri):
    """Closest points on triangles to points, paired rows (Ericson's region test)."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def assign(mask, val):
        m = mask & ~done
        out[m] = val[m] if val.ndim == 2 else val
        done[:] |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), a)
        assign((d3 >= 0) & (d4 <= d3), b)
        w = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + w[:, None] * ab)
        assign((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = va + vb + vc
        denom = np.where(denom == 0, 1.0, denom)
        v = vb / denom
        w = vc / denom
        assign(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


def point_triangle_distance(p, tri):
    return np.linalg.norm(closest_point_triangle(p, tri) - p, axis=1)


def _tie_tol(t):
    return 1e-10 * (1.0 + np.abs(t))


def _prefer(t, f, bt, bf):
    """True where hit (t, f) beats (bt, bf): nearer, or a tie won by lower face index."""
    with np.errstate(invalid="ignore"):
        tie = np.abs(t - bt) <= _tie_tol(t)
    return ((t < bt) & ~tie) | (tie & (f < bf))


def _select_nearest(q, f, t, u, v, n):
    # per query: smallest t, then lowest face among hits tied with it
    tmin = np.full(n, np.inf)
    np.minimum.at(tmin, q, t)
    cand = t <= tmin[q] + _tie_tol(tmin[q])
    fmin = np.full(n, np.iinfo(np.int64).max)
    np.minimum.at(fmin, q[cand], f[cand])
    pick = cand & (f == fmin[q])
    # a face can appear once per query, so pick is unique per query
    return f[pick], t[pick], u[pick], v[pick], q[pick]


# ---------------------------------------------------------------------------
# bounding volume hierarchy


class BVH:
    """Median-split AABB tree over triangles, traversed breadth-first for batches."""

    leaf_size = 4

    def __init__(self, triangles):
        self.tri = np.asarray(triangles, dtype=np.float64)
        self._kd = None
        n = len(self.tri)
        lo, hi, left, right, start, count = [], [], [], [], [], []
        order = np.arange(n)
        cent = self.tri.mean(axis=1) if n else np.zeros((0, 3))
        tmin = self.tri.min(axis=1) if n else np.zeros((0, 3))
        tmax = self.tri.max(axis=1) if n else np.zeros((0, 3))

        def build(idx):
            node = len(lo)
            lo.append(tmin[idx].min(axis=0))
            hi.append(tmax[idx].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(0)
            count.append(0)
            if len(idx) <= self.leaf_size:
                start[node] = len(leaf_faces)
                count[node] = len(idx)
                leaf_faces.extend(idx.tolist())
                return node
            ext = cent[idx].max(axis=0) - cent[idx].min(axis=0)
            ax = int(np.argmax(ext))
            srt = idx[np.argsort(cent[idx, ax], kind="stable")]
            mid = len(srt) // 2
            l_node = build(srt[:mid])
            r_node = build(srt[mid:])
            left[node], right[node] = l_node, r_node
            return node

        leaf_faces = []
        if n:
            build(order)
        self.lo = np.array(lo).reshape(-1, 3)
        self.hi = np.array(hi).reshape(-1, 3)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.count = np.array(count, dtype=np.int64)
        self.leaf_faces = np.array(leaf_faces, dtype=np.int64)

    def _leaf_pairs(self, qi, nodes):
        # expand (query, leaf node) pairs into (query, face) pairs
        cnt = self.count[nodes]
        q = np.repeat(qi, cnt)
        offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        f = self.leaf_faces[np.repeat(self.start[nodes], cnt) + offs]
        return q, f

    def intersect(self, origins, dirs, near, far):
        """Nearest hit per ray; ties broken by lowest face index. Returns (face, t, u, v)."""
        R = len(origins)
        best_t = np.full(R, np.inf)
        best_f = np.full(R, -1, dtype=np.int64)
        best_u = np.zeros(R)
        best_v = np.zeros(R)
        if len(self.lo) == 0:
            return best_f, best_t, best_u, best_v
        near = np.broadcast_to(np.asarray(near, dtype=np.float64), (R,))
        far = np.broadcast_to(np.asarray(far, dtype=np.float64), (R,))
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
        qi = np.arange(R)
        nodes = np.zeros(R, dtype=np.int64)
        while len(qi):
            o, iv = origins[qi], inv[qi]
            with np.errstate(invalid="ignore"):
                t1 = (self.lo[nodes] - o) * iv
                t2 = (self.hi[nodes] - o) * iv
            t1 = np.nan_to_num(t1, nan=-np.inf)
            t2 = np.nan_to_num(t2, nan=np.inf)
            tmin = np.minimum(t1, t2).max(axis=1)
            tmax = np.maximum(t1, t2).min(axis=1)
            slack = 1e-9 * (1 + np.abs(tmax))
            keep = (tmax + slack >= np.maximum(tmin, near[qi])) & (tmin - slack <= np.minimum(far[qi], best_t[qi]))
            qi, nodes = qi[keep], nodes[keep]
            leaf = self.left[nodes] < 0
            if np.any(leaf):
                q, f = self._leaf_pairs(qi[leaf], nodes[leaf])
                t, u, v, hit = ray_triangle(origins[q], dirs[q], self.tri[f])
                hit &= (t >= near[q]) & (t <= far[q])
                q, f, t, u, v = q[hit], f[hit], t[hit], u[hit], v[hit]
                if len(q):
                    f, t, u, v, q = _select_nearest(q, f, t, u, v, R)
                    better = _prefer(t, f, best_t[q], best_f[q])
                    q, f, t, u, v = q[better], f[better], t[better], u[better], v[better]
                    best_t[q], best_f[q], best_u[q], best_v[q] = t, f, u, v
            inner = ~leaf
            qi, nodes = qi[inner], nodes[inner]
            qi = np.concatenate([qi, qi])
            nodes = np.concatenate([self.left[nodes], self.right[nodes]])
        return best_f, best_t, best_u, best_v

    def distance(self, points):
        """Unsigned distance from each point to the nearest triangle."""
        P = len(points)
        if len(self.lo) == 0:
            raise GeometryError("empty mesh")
        # exact distance to the triangle with the nearest centroid bounds the search
        if self._kd is None:
            self._kd = cKDTree(self.tri.mean(axis=1))
        _, near_f = self._kd.query(points)
        best = point_triangle_distance(points, self.tri[near_f])
        qi = np.arange(P)
        nodes = np.zeros(P, dtype=np.int64)
        while len(qi):
            p = points[qi]
            gap = np.maximum(np.maximum(self.lo[nodes] - p, p - self.hi[nodes]), 0.0)
            lb = np.sqrt(np.sum(gap * gap, axis=1))
            keep = lb <= best[qi]
            qi, nodes = qi[keep], nodes[keep]
            leaf = self.left[nodes] < 0
            if np.any(leaf):
                q, f = self._leaf_pairs(qi[leaf], nodes[leaf])
                d = point_triangle_distance(points[q], self.tri[f])
                np.minimum.at(best, q, d)
            inner = ~leaf
            qi, nodes = qi[inner], nodes[inner]
            qi = np.concatenate([qi, qi])
            nodes = np.concatenate([self.left[nodes], self.right[nodes]])
        return best


# ---------------------------------------------------------------------------
# mesh queries


def intersect_rays(mesh, origins, dirs, near=0.0, far=np.inf):
    """Batched nearest-hit query. Returns (face, t, bary) with face = -1 on miss."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    f, t, u, v = mesh.bvh.intersect(origins, dirs, near, far)
    bary = np.stack([1 - u - v, u, v], axis=1)
    bary = np.clip(bary, 0.0, None)
    bary /= bary.sum(axis=1, keepdims=True)
    return f, t, bary


def intersect_rays_brute(mesh, origins, dirs, near=0.0, far=np.inf):
    """Reference implementation testing every face; same tie-break as the BVH."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    R, F = len(origins), len(mesh.faces)
    face = np.full(R, -1, dtype=np.int64)
    dist = np.full(R, np.inf)
    bary = np.zeros((R, 3))
    tri = mesh.triangles()
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (R,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (R,))
    for k in range(F):
        t, u, v, hit = ray_triangle(origins, dirs, np.broadcast_to(tri[k], (R, 3, 3)))
        hit &= (t >= near) & (t <= far)
        hit &= (t < dist) & (np.abs(t - dist) > _tie_tol(t))
        face[hit], dist[hit] = k, t[hit]
        bary[hit] = np.stack([1 - u[hit] - v[hit], u[hit], v[hit]], axis=1)
    bary = np.clip(bary, 0.0, None)
    s = bary.sum(axis=1, keepdims=True)
    bary = np.divide(bary, s, out=np.zeros_like(bary), where=s > 0)
    return face, dist, bary


def intersect(mesh, ray):
    """Nearest hit of a single ray as a HitRecord, or None."""
    f, t, b = intersect_rays(mesh, ray.origin[None], ray.direction[None], ray.near, ray.far)
    if f[0] < 0:
        return None
    return HitRecord(int(f[0]), b[0], float(t[0]))


def interpolate_color(mesh, hit):
    """Barycentric blend of the hit face's vertex colours and opacities."""
    if not 0 <= hit.face < len(mesh.faces):
        raise GeometryError(f"invalid face index {hit.face}")
    idx = mesh.faces[hit.face]
    w = np.asarray(hit.bary, dtype=np.float64)
    return w @ mesh.colors[idx], float(w @ mesh.opacities[idx])


def interpolate_attributes(mesh, faces, bary):
    """Vectorised colour/opacity interpolation; rows with face < 0 get zeros."""
    ok = faces >= 0
    col = np.zeros((len(faces), 3))
    opa = np.zeros(len(faces))
    idx = mesh.faces[faces[ok]]
    col[ok] = np.einsum("ij,ijk->ik", bary[ok], mesh.colors[idx])
    opa[ok] = np.einsum("ij,ij->i", bary[ok], mesh.opacities[idx])
    return col, opa


def point_to_mesh_distance(mesh, points):
    """Unsigned Euclidean distance from point(s) to the mesh surface."""
    if len(mesh.faces) == 0:
        raise GeometryError("empty mesh")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = mesh.bvh.distance(pts)
    return d if np.ndim(points) > 1 else float(d[0])


def point_to_mesh_distance_brute(mesh, points):
    if len(mesh.faces) == 0:
        raise GeometryError("empty mesh")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri = mesh.triangles()
    P, F = len(pts), len(tri)
    best = np.full(P, np.inf)
    for k in range(F):
        best = np.minimum(best, point_triangle_distance(pts, np.broadcast_to(tri[k], (P, 3, 3))))
    return best


# ---------------------------------------------------------------------------
# PLY


def write_ply(path, mesh):
    """ASCII PLY with per-vertex colour (uchar and float) and opacity."""
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\n")
        for name in ("x", "y", "z", "r", "g", "b", "opacity"):
            fh.write(f"property double {name}\n")
        fh.write(f"element face {len(mesh.faces)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v, c, o in zip(mesh.vertices, mesh.colors, mesh.opacities):
            fh.write(" ".join(repr(float(x)) for x in (*v, *c, o)) + "\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def read_ply(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise GeometryError(f"{path}: not a PLY file")
    nv = nf = 0
    props = []
    i = 1
    current = None
    while lines[i].strip() != "end_header":
        parts = lines[i].split()
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                nv = int(parts[2])
            elif current == "face":
                nf = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            props.append(parts[-1])
        i += 1
    body = lines[i + 1:]
    vals = np.array([[float(x) for x in ln.split()] for ln in body[:nv]]).reshape(nv, len(props))
    col = {name: vals[:, k] for k, name in enumerate(props)}
    verts = np.stack([col["x"], col["y"], col["z"]], axis=1)
    colors = np.stack([col["r"], col["g"], col["b"]], axis=1) if "r" in col else None
    opac = col.get("opacity")
    faces = np.array([[int(x) for x in ln.split()[1:4]] for ln in body[nv:nv + nf]], dtype=np.int64)
    return TriMesh(verts, faces.reshape(-1, 3), colors, opac)

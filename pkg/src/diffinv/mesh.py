"""Structured simplicial meshes of the unit interval and the unit square.

All computations in this package run on uniform meshes of Omega = (0,1)
(intervals) or Omega = (0,1)^2 (each grid cell split into two triangles
along the lower-left to upper-right diagonal).  Meshes are immutable
after construction and safe to share between threads.
"""

import numpy as np

__all__ = [
    "Mesh",
    "build_interval_mesh",
    "build_unit_square_mesh",
    "transfer_nodal",
    "dist_to_boundary",
]


class Mesh:
    """Simplicial mesh with precomputed per-element geometry.

    Attributes
    ----------
    dim : 1 or 2
    n_cells : cells per side of the structured grid
    node_coords : (n_nodes, dim) float array
    elements : (n_elements, dim+1) int array, positively oriented
    is_boundary : (n_nodes,) bool array
    h : mesh size (max element diameter)
    interior : indices of interior nodes
    measures : (n_elements,) element length/area
    grads : (n_elements, dim+1, dim) constant P1 basis gradients
    """

    def __init__(self, dim, n_cells, node_coords, elements, is_boundary, h):
        self.dim = dim
        self.n_cells = n_cells
        self.node_coords = np.ascontiguousarray(node_coords, dtype=float)
        self.elements = np.ascontiguousarray(elements, dtype=np.int64)
        self.is_boundary = np.ascontiguousarray(is_boundary, dtype=bool)
        self.h = float(h)
        self.interior = np.flatnonzero(~self.is_boundary)
        self.measures, self.grads = _element_geometry(
            dim, self.node_coords, self.elements
        )
        for arr in (
            self.node_coords,
            self.elements,
            self.is_boundary,
            self.interior,
            self.measures,
            self.grads,
        ):
            arr.flags.writeable = False
        # scratch space for assembly structures etc., filled lazily by fem
        self._cache = {}

    @property
    def n_nodes(self):
        return self.node_coords.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    def centroids(self):
        """(n_elements, dim) element centroids."""
        return self.node_coords[self.elements].mean(axis=1)

    def __repr__(self):
        return (
            f"Mesh(dim={self.dim}, n_cells={self.n_cells}, "
            f"n_nodes={self.n_nodes}, n_elements={self.n_elements}, h={self.h:g})"
        )


def _element_geometry(dim, coords, elements):
    pts = coords[elements]  # (n_el, dim+1, dim)
    if dim == 1:
        lengths = pts[:, 1, 0] - pts[:, 0, 0]
        if np.any(lengths <= 0):
            raise ValueError("non-positive element length")
        grads = np.empty((elements.shape[0], 2, 1))
        grads[:, 0, 0] = -1.0 / lengths
        grads[:, 1, 0] = 1.0 / lengths
        return lengths.copy(), grads
    x = pts[..., 0]
    y = pts[..., 1]
    det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (
        y[:, 1] - y[:, 0]
    )
    if np.any(det <= 0):
        raise ValueError("non-positive triangle orientation")
    areas = 0.5 * det
    grads = np.empty((elements.shape[0], 3, 2))
    grads[:, 0, 0] = y[:, 1] - y[:, 2]
    grads[:, 0, 1] = x[:, 2] - x[:, 1]
    grads[:, 1, 0] = y[:, 2] - y[:, 0]
    grads[:, 1, 1] = x[:, 0] - x[:, 2]
    grads[:, 2, 0] = y[:, 0] - y[:, 1]
    grads[:, 2, 1] = x[:, 1] - x[:, 0]
    grads /= det[:, None, None]
    return areas, grads


def build_interval_mesh(n):
    """Uniform mesh of (0,1) with nodes i/n, i = 0..n."""
    if n < 2:
        raise ValueError(f"need at least 2 cells, got n={n}")
    coords = (np.arange(n + 1) / n)[:, None]
    elements = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    is_boundary = np.zeros(n + 1, dtype=bool)
    is_boundary[[0, -1]] = True
    return Mesh(1, n, coords, elements, is_boundary, 1.0 / n)


def build_unit_square_mesh(n):
    """Uniform triangulation of (0,1)^2: n x n cells, two triangles each.

    Node (i, j) sits at (i/n, j/n) with index j*(n+1)+i.  Every cell is
    split along the same (lower-left to upper-right) diagonal, giving
    2*n^2 positively oriented triangles.
    """
    if n < 2:
        raise ValueError(f"need at least 2 cells per side, got n={n}")
    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
    coords = np.column_stack([ii.ravel() / n, jj.ravel() / n])
    is_boundary = (
        (ii.ravel() == 0) | (ii.ravel() == n) | (jj.ravel() == 0) | (jj.ravel() == n)
    )
    ci, cj = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    v00 = (cj.ravel() * (n + 1) + ci.ravel()).astype(np.int64)
    v10 = v00 + 1
    v01 = v00 + (n + 1)
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    elements = np.empty((2 * n * n, 3), dtype=np.int64)
    elements[0::2] = lower
    elements[1::2] = upper
    return Mesh(2, n, coords, elements, is_boundary, np.sqrt(2.0) / n)


def subsample_indices(fine, coarse):
    """Fine-mesh node indices that coincide with the coarse-mesh nodes."""
    if fine.dim != coarse.dim:
        raise ValueError("meshes have different dimensions")
    if fine.n_cells % coarse.n_cells != 0:
        raise ValueError(
            f"coarse cell count {coarse.n_cells} does not divide "
            f"fine cell count {fine.n_cells}"
        )
    r = fine.n_cells // coarse.n_cells
    nc = coarse.n_cells
    if fine.dim == 1:
        return np.arange(nc + 1) * r
    ii, jj = np.meshgrid(np.arange(nc + 1), np.arange(nc + 1), indexing="xy")
    return (jj.ravel() * r) * (fine.n_cells + 1) + ii.ravel() * r


def transfer_nodal(fine_fn, coarse_mesh):
    """Restrict a nodal function on a fine mesh to a nested coarse mesh.

    Exact subsampling at coinciding nodes; requires the coarse cell count
    to divide the fine one.
    """
    from .fem import FeFunction

    idx = subsample_indices(fine_fn.mesh, coarse_mesh)
    return FeFunction(coarse_mesh, fine_fn.values[idx], space=fine_fn.space)


def dist_to_boundary(mesh, node):
    """Euclidean distance from a node to the boundary of the unit domain."""
    return dist_to_boundary_points(mesh.node_coords[node])


def dist_to_boundary_points(points):
    """Distance to the boundary of (0,1)^d for points of shape (..., d)."""
    pts = np.asarray(points)
    return np.minimum(pts, 1.0 - pts).min(axis=-1)

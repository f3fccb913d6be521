"""P1 finite element assembly and discrete operators.

Houses the nodal function type, mass/stiffness/load assembly (exact for
piecewise linear data), the L^2 projection onto the zero-trace space,
Lagrange interpolation, and the discrete norms used throughout.

Scalar fields are plain callables mapping an (m, dim) array of points to
an (m,) array of values; :func:`constant_field` lifts a constant.
Per-mesh assembly structures (sparsity pattern, local blocks, interior
restriction) are computed once and cached on the mesh, so re-assembling
the stiffness matrix for a new coefficient costs one weighted bincount.
"""

import numpy as np

from .linalg import SparseMatrix, cg_solve

__all__ = [
    "FeFunction",
    "constant_field",
    "assemble_mass",
    "assemble_stiffness",
    "assemble_load",
    "l2_project",
    "lagrange_interpolate",
    "norm_l2",
    "seminorm_h1",
    "norm_linf",
    "evaluate",
]

FULL = "full"
ZERO_TRACE = "zero_trace"


class FeFunction:
    """Nodal coefficient vector over a mesh.

    ``space`` is "full" (V_h, unconstrained) or "zero_trace" (X_h, zero
    on the boundary); zero-trace membership is validated on construction.
    """

    __slots__ = ("mesh", "values", "space")

    def __init__(self, mesh, values, space=FULL):
        values = np.ascontiguousarray(values, dtype=float)
        if values.shape != (mesh.n_nodes,):
            raise ValueError(
                f"expected {mesh.n_nodes} nodal values, got {values.shape}"
            )
        if space not in (FULL, ZERO_TRACE):
            raise ValueError(f"unknown space tag {space!r}")
        if space == ZERO_TRACE and np.any(values[mesh.is_boundary] != 0.0):
            raise ValueError("zero_trace function has nonzero boundary values")
        self.mesh = mesh
        self.values = values
        self.space = space

    def copy(self):
        return FeFunction(self.mesh, self.values.copy(), self.space)

    def __repr__(self):
        return f"FeFunction(space={self.space}, n={self.values.shape[0]})"


def constant_field(c):
    c = float(c)

    def field(points):
        return np.full(np.asarray(points).shape[0], c)

    return field


# 1D element mass block  h/6 * [[2,1],[1,2]],
# 2D triangle mass block |T|/12 * [[2,1,1],[1,2,1],[1,1,2]]
_MASS_BLOCK = {
    1: np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0,
    2: np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0,
}


class _Structures:
    """Per-mesh assembly data, built once and cached on the mesh."""

    def __init__(self, mesh):
        n = mesh.n_nodes
        elems = mesh.elements
        nv = mesh.dim + 1
        self.mesh = mesh
        self.n = n
        self.nv = nv

        rows = np.repeat(elems, nv, axis=1).ravel()
        cols = np.tile(elems, (1, nv)).ravel()
        keys = rows * n + cols
        uniq, inverse = np.unique(keys, return_inverse=True)
        self.inverse = inverse
        self.nnz = uniq.shape[0]
        self.col_idx = uniq % n
        row_ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(uniq // n, minlength=n), out=row_ptr[1:])
        self.row_ptr = row_ptr

        # local blocks, flattened per element in (i, j) order
        block = _MASS_BLOCK[mesh.dim].ravel()
        self.mass_data = np.bincount(
            inverse,
            weights=(mesh.measures[:, None] * block).ravel(),
            minlength=self.nnz,
        )
        g_outer = np.einsum("eid,ejd->eij", mesh.grads, mesh.grads)
        self.k1_local = (mesh.measures[:, None, None] * g_outer).reshape(
            elems.shape[0], nv * nv
        )
        self.k1_data = np.bincount(
            inverse, weights=self.k1_local.ravel(), minlength=self.nnz
        )

        # vertex-rule (lumped) load weights: sum_T |T|/(d+1) per vertex
        self.lumped = np.bincount(
            elems.ravel(),
            weights=np.repeat(mesh.measures / nv, nv),
            minlength=n,
        )

        # restriction of the full pattern to interior x interior
        interior = mesh.interior
        renumber = np.full(n, -1, dtype=np.int64)
        renumber[interior] = np.arange(interior.shape[0])
        full_rows = np.repeat(np.arange(n), np.diff(row_ptr))
        keep = (renumber[full_rows] >= 0) & (renumber[self.col_idx] >= 0)
        self.interior_sel = np.flatnonzero(keep)
        irows = renumber[full_rows[self.interior_sel]]
        self.i_col_idx = renumber[self.col_idx[self.interior_sel]]
        ni = interior.shape[0]
        i_row_ptr = np.zeros(ni + 1, dtype=np.int64)
        np.cumsum(np.bincount(irows, minlength=ni), out=i_row_ptr[1:])
        self.i_row_ptr = i_row_ptr
        self.n_int = ni
        # element connectivity in interior numbering; boundary vertices
        # point at the padding slot ni (their value is always zero)
        elem_int = renumber[elems]
        elem_int[elem_int < 0] = ni
        self.elem_int = elem_int

    def stiffness_data(self, qvals):
        qbar = qvals[self.mesh.elements].mean(axis=1)
        return np.bincount(
            self.inverse,
            weights=(qbar[:, None] * self.k1_local).ravel(),
            minlength=self.nnz,
        )

    def full_matrix(self, data):
        return SparseMatrix(self.n, self.row_ptr, self.col_idx, data)

    def interior_matrix(self, data):
        return SparseMatrix(
            self.n_int, self.i_row_ptr, self.i_col_idx, data[self.interior_sel]
        )


def structures(mesh):
    st = mesh._cache.get("structures")
    if st is None:
        st = _Structures(mesh)
        mesh._cache["structures"] = st
    return st


def assemble_mass(mesh):
    """Full-space mass matrix M_ij = (phi_i, phi_j), exact for P1."""
    M = mesh._cache.get("mass")
    if M is None:
        st = structures(mesh)
        M = st.full_matrix(st.mass_data)
        mesh._cache["mass"] = M
    return M


def mass_interior(mesh):
    M = mesh._cache.get("mass_interior")
    if M is None:
        st = structures(mesh)
        M = st.interior_matrix(st.mass_data)
        mesh._cache["mass_interior"] = M
    return M


def unit_stiffness(mesh):
    """Full-space stiffness with coefficient 1 (H^1 seminorm matrix)."""
    K = mesh._cache.get("unit_stiffness")
    if K is None:
        st = structures(mesh)
        K = st.full_matrix(st.k1_data)
        mesh._cache["unit_stiffness"] = K
    return K


def _check_coefficient(mesh, q):
    if not isinstance(q, FeFunction) or q.mesh is not mesh:
        raise ValueError("coefficient must be an FeFunction on the same mesh")
    if q.space != FULL:
        raise ValueError("coefficient must live in the full space")
    if np.any(q.values <= 0.0):
        raise ValueError("coefficient has nonpositive nodal values")


def assemble_stiffness(mesh, q):
    """Full-space stiffness K_ij = sum_T (int_T q) grad(phi_i).grad(phi_j).

    The coefficient integral uses the elementwise vertex average of q,
    which is exact for piecewise linear q.
    """
    _check_coefficient(mesh, q)
    st = structures(mesh)
    return st.full_matrix(st.stiffness_data(q.values))


def stiffness_interior(mesh, q):
    """Stiffness restricted to interior nodes (Dirichlet reduction)."""
    _check_coefficient(mesh, q)
    st = structures(mesh)
    return st.interior_matrix(st.stiffness_data(q.values))


def assemble_load(mesh, f):
    """Load vector b_i = int f phi_i by the vertex quadrature rule."""
    st = structures(mesh)
    return st.lumped * np.asarray(f(mesh.node_coords), dtype=float)


def l2_project(mesh, f, cg_opts=None):
    """L^2 projection of f onto the zero-trace space X_h."""
    st = structures(mesh)
    b = assemble_load(mesh, f)[mesh.interior]
    x = cg_solve(mass_interior(mesh), b, cg_opts)
    values = np.zeros(mesh.n_nodes)
    values[mesh.interior] = x
    return FeFunction(mesh, values, ZERO_TRACE)


def lagrange_interpolate(mesh, f):
    """Nodal interpolant of f in the full space V_h."""
    return FeFunction(mesh, np.asarray(f(mesh.node_coords), dtype=float), FULL)


def norm_l2(v):
    """Mass-matrix L^2 norm sqrt(v' M v)."""
    M = assemble_mass(v.mesh)
    return np.sqrt(max(v.values @ (M @ v.values), 0.0))


def seminorm_h1(v):
    """H^1 seminorm sqrt(v' K1 v) with unit-coefficient stiffness K1."""
    K = unit_stiffness(v.mesh)
    return np.sqrt(max(v.values @ (K @ v.values), 0.0))


def norm_linf(v):
    return float(np.max(np.abs(v.values)))


def evaluate(fn, points):
    """Evaluate a P1 function at arbitrary points of the closed domain.

    Relies on the structured layout of the meshes built in this package.
    """
    mesh = fn.mesh
    v = fn.values
    n = mesh.n_cells
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    x = np.clip(pts[:, 0], 0.0, 1.0)
    tx = x * n
    i = np.minimum(tx.astype(np.int64), n - 1)
    lx = tx - i
    if mesh.dim == 1:
        return v[i] * (1.0 - lx) + v[i + 1] * lx
    y = np.clip(pts[:, 1], 0.0, 1.0)
    ty = y * n
    j = np.minimum(ty.astype(np.int64), n - 1)
    ly = ty - j
    v00 = v[j * (n + 1) + i]
    v10 = v[j * (n + 1) + i + 1]
    v01 = v[(j + 1) * (n + 1) + i]
    v11 = v[(j + 1) * (n + 1) + i + 1]
    # lower triangle (ly <= lx): barycentric on (v00, v10, v11),
    # upper triangle: barycentric on (v00, v11, v01)
    lower = v00 * (1.0 - lx) + v10 * (lx - ly) + v11 * ly
    upper = v00 * (1.0 - ly) + v11 * lx + v01 * (ly - lx)
    return np.where(ly <= lx, lower, upper)

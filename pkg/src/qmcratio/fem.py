"""P1 Galerkin discretization and residual a-posteriori error estimators.

For a fixed parameter vector y the diffusion problem is assembled with an
order-4 symmetric triangle rule (the P1 hat gradients are constant per
element, so only element averages of the coefficient enter the stiffness
matrix) and solved either by a sparse direct factorization or, for large
systems with a refinement ancestry, by conjugate gradients preconditioned
with a geometric multigrid V-cycle (damped Jacobi smoothing, direct solve on
the coarsest ancestor).  All paths are deterministic.

Three residual estimators are provided: the energy-norm indicator (weights
h_T^2, h_e), the duality-weighted L2 indicator (h_T^4, h_e^3) and its
adjoint variant with the additional coupling term (max_T h_T^4) times the
squared state indicator.

Per-mesh sparsity patterns and per-(coefficient, mesh) mode tables are
cached so that repeated solves at new parameter vectors reduce to matrix
refills; caches above a size cap fall back to chunked direct evaluation.
"""

from __future__ import annotations

import csv
import weakref
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .coefficient import AffineCoefficient
from .mesh import TriangleMesh

# Symmetric 6-point triangle rule, exact for polynomials of degree 4.
_TRI_A1 = 0.445948490915965
_TRI_A2 = 0.091576213509771
_TRI_W1 = 0.223381589678011
_TRI_W2 = 0.109951743655322
TRI_QUAD_BARY = np.array(
    [
        [1 - 2 * _TRI_A1, _TRI_A1, _TRI_A1],
        [_TRI_A1, 1 - 2 * _TRI_A1, _TRI_A1],
        [_TRI_A1, _TRI_A1, 1 - 2 * _TRI_A1],
        [1 - 2 * _TRI_A2, _TRI_A2, _TRI_A2],
        [_TRI_A2, 1 - 2 * _TRI_A2, _TRI_A2],
        [_TRI_A2, _TRI_A2, 1 - 2 * _TRI_A2],
    ]
)
TRI_QUAD_W = np.array([_TRI_W1, _TRI_W1, _TRI_W1, _TRI_W2, _TRI_W2, _TRI_W2])

# 3-point Gauss rule on [0, 1], exact for degree 5.
_G = np.sqrt(3.0 / 5.0) / 2.0
EDGE_QUAD_T = np.array([0.5 - _G, 0.5, 0.5 + _G])
EDGE_QUAD_W = np.array([5.0, 8.0, 5.0]) / 18.0

RhsLike = Union[float, np.ndarray, Callable[[np.ndarray], np.ndarray]]

#: caches larger than this many bytes are not kept
CACHE_BYTE_CAP = 400_000_000
#: free-dof count above which a direct factorization is never attempted
DIRECT_SOLVE_LIMIT = 600_000
#: free-dof count above which meshes with a refinement ancestry use multigrid
MG_SOLVE_THRESHOLD = 3000
#: triangle chunk size for streamed quadrature evaluations
CHUNK = 262_144


@dataclass(frozen=True, eq=False)
class FieldSolution:
    """P1 coefficient vector of a state or adjoint solve on a given mesh."""

    mesh: TriangleMesh
    values: np.ndarray
    y: np.ndarray
    role: str = "state"


# ---------------------------------------------------------------------------
# Per-mesh assembly pattern and exact mass matrix
# ---------------------------------------------------------------------------


class _MeshAssembly:
    """Sparsity pattern of the P1 element scatter, built once per mesh."""

    def __init__(self, mesh: TriangleMesh):
        self.mesh = mesh
        t = mesh.triangles
        nv = mesh.num_vertices
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        keys = rows.astype(np.int64) * nv + cols
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        new_seg = np.empty(sorted_keys.size, dtype=bool)
        new_seg[0] = True
        np.not_equal(sorted_keys[1:], sorted_keys[:-1], out=new_seg[1:])
        seg_starts = np.flatnonzero(new_seg)
        unique_keys = sorted_keys[seg_starts]
        self.order = order.astype(np.int32) if order.size < 2**31 else order
        self.seg_starts = seg_starts.astype(np.int32) if keys.size < 2**31 else seg_starts
        unique_rows = (unique_keys // nv).astype(np.int64)
        self.indices = (unique_keys % nv).astype(np.int32)
        self.indptr = np.zeros(nv + 1, dtype=np.int64)
        np.add.at(self.indptr, unique_rows + 1, 1)
        np.cumsum(self.indptr, out=self.indptr)

        free_mask = ~mesh.boundary_vertex
        entry_rows = unique_rows
        entry_cols = self.indices
        keep = free_mask[entry_rows] & free_mask[entry_cols]
        self.free_sel = np.flatnonzero(keep).astype(np.int32)
        renum = np.cumsum(free_mask) - 1
        self.free_indices = renum[entry_cols[keep]].astype(np.int32)
        free_rows = renum[entry_rows[keep]]
        nfree = int(free_mask.sum())
        self.free_indptr = np.zeros(nfree + 1, dtype=np.int64)
        np.add.at(self.free_indptr, free_rows + 1, 1)
        np.cumsum(self.free_indptr, out=self.free_indptr)
        self._mass: Optional[sparse.csr_matrix] = None
        self._quad_pts: Optional[np.ndarray] = None
        self._lumped: Optional[np.ndarray] = None

    def quad_pts(self) -> Optional[np.ndarray]:
        """Cached (nt, nq, 2) quadrature points, or None above the cache cap."""
        if self._quad_pts is None:
            nt = self.mesh.num_triangles
            if nt * TRI_QUAD_BARY.shape[0] * 2 * 8 > CACHE_BYTE_CAP:
                return None
            self._quad_pts = quad_points(self.mesh, 0, nt)
        return self._quad_pts

    def lumped_load(self) -> np.ndarray:
        """Load vector of the constant source 1 (row sums of the mass matrix)."""
        if self._lumped is None:
            self._lumped = np.asarray(self.mass().sum(axis=1)).ravel()
        return self._lumped

    def assemble(self, local_vals: np.ndarray) -> sparse.csr_matrix:
        """(nt, 3, 3) local matrices -> global CSR with duplicate summing."""
        data = np.add.reduceat(local_vals.ravel()[self.order], self.seg_starts)
        nv = self.mesh.num_vertices
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=(nv, nv))

    def free_part(self, mat: sparse.csr_matrix) -> sparse.csr_matrix:
        nfree = self.free_indptr.size - 1
        return sparse.csr_matrix(
            (mat.data[self.free_sel], self.free_indices, self.free_indptr),
            shape=(nfree, nfree),
        )

    def mass(self) -> sparse.csr_matrix:
        if self._mass is None:
            local = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
            vals = self.mesh.geometry.areas[:, None, None] * local
            self._mass = self.assemble(vals)
        return self._mass


_assembly_cache: "weakref.WeakKeyDictionary[TriangleMesh, _MeshAssembly]" = (
    weakref.WeakKeyDictionary()
)


def _mesh_assembly(mesh: TriangleMesh) -> _MeshAssembly:
    asm = _assembly_cache.get(mesh)
    if asm is None:
        asm = _MeshAssembly(mesh)
        _assembly_cache[mesh] = asm
    return asm


def mass_matrix(mesh: TriangleMesh) -> sparse.csr_matrix:
    """Exact P1 mass matrix (cached per mesh)."""
    return _mesh_assembly(mesh).mass()


def l2_norm(mesh: TriangleMesh, values: np.ndarray) -> float:
    """Discrete L2 norm of a P1 field via the mass matrix."""
    values = np.asarray(values, dtype=float)
    return float(np.sqrt(max(values @ (mass_matrix(mesh) @ values), 0.0)))


def _tri_chunks(nt: int):
    for start in range(0, nt, CHUNK):
        yield start, min(start + CHUNK, nt)


def quad_points(mesh: TriangleMesh, lo: int = 0, hi: Optional[int] = None) -> np.ndarray:
    """(n, nq, 2) physical coordinates of the order-4 rule on elements lo:hi."""
    p = mesh.vertices[mesh.triangles[lo:hi]]
    return np.einsum("qb,tbd->tqd", TRI_QUAD_BARY, p)


def _rhs_at_quad(mesh: TriangleMesh, rhs: RhsLike, lo: int, hi: int) -> np.ndarray:
    """(hi-lo, nq) values of the source term at element quadrature points."""
    nq = TRI_QUAD_BARY.shape[0]
    if np.isscalar(rhs):
        return np.full((hi - lo, nq), float(rhs))
    if callable(rhs):
        cached = _mesh_assembly(mesh).quad_pts()
        if cached is not None:
            pts = cached[lo:hi].reshape(-1, 2)
        else:
            pts = quad_points(mesh, lo, hi).reshape(-1, 2)
        return np.asarray(rhs(pts), dtype=float).reshape(hi - lo, nq)
    vals = np.asarray(rhs, dtype=float)
    if vals.shape != (mesh.num_vertices,):
        raise ValueError("nodal source term has wrong length")
    nodal = vals[mesh.triangles[lo:hi]]
    return np.einsum("qb,tb->tq", TRI_QUAD_BARY, nodal)


def as_nodal(mesh: TriangleMesh, f: RhsLike) -> np.ndarray:
    """Vertex interpolant of a constant, callable or nodal field."""
    if np.isscalar(f):
        return np.full(mesh.num_vertices, float(f))
    if callable(f):
        return np.asarray(f(mesh.vertices), dtype=float)
    vals = np.asarray(f, dtype=float)
    if vals.shape != (mesh.num_vertices,):
        raise ValueError("nodal field has wrong length")
    return vals


# ---------------------------------------------------------------------------
# Per-(coefficient, mesh) tables
# ---------------------------------------------------------------------------


class _CoeffTables:
    """Mode integrals/values on a fixed mesh, enabling per-sample matvecs.

    Components whose storage exceeds the cache cap are left unset; callers
    then evaluate the coefficient directly in triangle chunks.
    """

    def __init__(self, coeff: AffineCoefficient, mesh: TriangleMesh):
        self.coeff = coeff
        self.mesh = mesh
        s = coeff.dimension
        nt = mesh.num_triangles

        self.elem_integrals: Optional[np.ndarray] = None
        if nt * (s + 1) * 8 <= CACHE_BYTE_CAP:
            table = np.empty((nt, s + 1))
            for lo, hi in _tri_chunks(nt):
                pts = quad_points(mesh, lo, hi)
                flat = pts.reshape(-1, 2)
                nq = pts.shape[1]
                psi0 = coeff.psi0.value(flat).reshape(-1, nq)
                table[lo:hi, 0] = psi0 @ TRI_QUAD_W
                if s:
                    modes = coeff.modes_matrix(flat).reshape(-1, nq, s)
                    table[lo:hi, 1:] = np.einsum("tqs,q->ts", modes, TRI_QUAD_W)
            table *= mesh.geometry.areas[:, None]
            self.elem_integrals = table

        int_idx = np.flatnonzero(mesh.interior_edge_mask)
        self.interior_idx = int_idx
        n_int = int_idx.size
        self.edge_values: Optional[np.ndarray] = None
        if n_int * EDGE_QUAD_T.size * (s + 1) * 8 <= CACHE_BYTE_CAP:
            epts = self._edge_points(int_idx)
            flat = epts.reshape(-1, 2)
            vals = np.empty((flat.shape[0], s + 1))
            vals[:, 0] = coeff.psi0.value(flat)
            if s:
                vals[:, 1:] = coeff.modes_matrix(flat)
            self.edge_values = vals.reshape(n_int, EDGE_QUAD_T.size, s + 1)

        # Pre-assembled stiffness data per mode: sample assembly is a matvec.
        self.stiffness_data: Optional[np.ndarray] = None
        if self.elem_integrals is not None:
            asm = _mesh_assembly(mesh)
            nnz = asm.indices.size
            if nnz * (s + 1) * 8 <= CACHE_BYTE_CAP:
                grads = mesh.geometry.hat_gradients
                data = np.empty((nnz, s + 1))
                for j in range(s + 1):
                    local = np.einsum(
                        "t,tid,tjd->tij", self.elem_integrals[:, j], grads, grads
                    )
                    data[:, j] = asm.assemble(local).data
                self.stiffness_data = data

        # Mode gradients at the volume quadrature points (for estimators).
        self._grad_table: Optional[np.ndarray] = None
        self._grad_table_tried = False

    def gradient_table(self) -> Optional[np.ndarray]:
        """Cached (nt*nq*2, s) mode gradients at quad points, or None."""
        if not self._grad_table_tried:
            self._grad_table_tried = True
            nt = self.mesh.num_triangles
            nq = TRI_QUAD_BARY.shape[0]
            s = self.coeff.dimension
            if s and nt * nq * s * 2 * 8 <= CACHE_BYTE_CAP:
                table = np.empty((nt * nq * 2, s))
                for lo, hi in _tri_chunks(nt):
                    flat = quad_points(self.mesh, lo, hi).reshape(-1, 2)
                    block = self.coeff.modes_gradient_matrix(flat)  # (n, s, 2)
                    table[lo * nq * 2 : hi * nq * 2] = block.transpose(0, 2, 1).reshape(
                        -1, s
                    )
                self._grad_table = table
        return self._grad_table

    def gradient_at_quads(self, y: np.ndarray, lo: int, hi: int) -> np.ndarray:
        """grad a(., y) at the quad points of elements lo:hi, (n*nq, 2)."""
        nq = TRI_QUAD_BARY.shape[0]
        table = self.gradient_table()
        if table is not None:
            psi0_grad = self._psi0_grad_table()
            out = psi0_grad[lo * nq : hi * nq].copy()
            if y.size:
                out += (table[lo * nq * 2 : hi * nq * 2] @ y).reshape(-1, 2)
            return out
        asm = _mesh_assembly(self.mesh)
        pts = asm.quad_pts()
        if pts is not None:
            flat = pts[lo:hi].reshape(-1, 2)
        else:
            flat = quad_points(self.mesh, lo, hi).reshape(-1, 2)
        return self.coeff.gradient(flat, y)

    def _psi0_grad_table(self) -> np.ndarray:
        cached = getattr(self, "_psi0_grads", None)
        if cached is None:
            nt = self.mesh.num_triangles
            nq = TRI_QUAD_BARY.shape[0]
            cached = np.empty((nt * nq, 2))
            for lo, hi in _tri_chunks(nt):
                flat = quad_points(self.mesh, lo, hi).reshape(-1, 2)
                cached[lo * nq : hi * nq] = self.coeff.psi0.gradient(flat)
            self._psi0_grads = cached
        return cached

    def _edge_points(self, idx: np.ndarray) -> np.ndarray:
        edges = self.mesh.edges[idx]
        p0 = self.mesh.vertices[edges[:, 0]]
        p1 = self.mesh.vertices[edges[:, 1]]
        return (
            p0[:, None, :] * (1.0 - EDGE_QUAD_T)[None, :, None]
            + p1[:, None, :] * EDGE_QUAD_T[None, :, None]
        )

    def element_coeff_integrals(self, y: np.ndarray) -> np.ndarray:
        """(nt,) integrals of a(., y) over each element."""
        if self.elem_integrals is not None:
            out = self.elem_integrals[:, 0].copy()
            if y.size:
                out += self.elem_integrals[:, 1:] @ y
            return out
        mesh = self.mesh
        nt = mesh.num_triangles
        out = np.empty(nt)
        for lo, hi in _tri_chunks(nt):
            pts = quad_points(mesh, lo, hi)
            aq = self.coeff.value(pts.reshape(-1, 2), y).reshape(pts.shape[:2])
            out[lo:hi] = aq @ TRI_QUAD_W
        out *= mesh.geometry.areas
        return out

    def edge_coeff_values(self, y: np.ndarray) -> np.ndarray:
        """(n_int, 3) coefficient values at the interior-edge Gauss points."""
        if self.edge_values is not None:
            out = self.edge_values[:, :, 0].copy()
            if y.size:
                out += self.edge_values[:, :, 1:] @ y
            return out
        idx = self.interior_idx
        out = np.empty((idx.size, EDGE_QUAD_T.size))
        step = max(CHUNK // 2, 1)
        for lo in range(0, idx.size, step):
            hi = min(lo + step, idx.size)
            epts = self._edge_points(idx[lo:hi])
            out[lo:hi] = self.coeff.value(epts.reshape(-1, 2), y).reshape(
                hi - lo, EDGE_QUAD_T.size
            )
        return out


_tables_cache: "weakref.WeakKeyDictionary[AffineCoefficient, weakref.WeakKeyDictionary]" = (
    weakref.WeakKeyDictionary()
)


def _coeff_tables(coeff: AffineCoefficient, mesh: TriangleMesh) -> _CoeffTables:
    per_mesh = _tables_cache.get(coeff)
    if per_mesh is None:
        per_mesh = weakref.WeakKeyDictionary()
        _tables_cache[coeff] = per_mesh
    tables = per_mesh.get(mesh)
    if tables is None:
        tables = _CoeffTables(coeff, mesh)
        per_mesh[mesh] = tables
    return tables


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------


_transfer_cache: "weakref.WeakKeyDictionary[TriangleMesh, sparse.csr_matrix]" = (
    weakref.WeakKeyDictionary()
)


def _free_transfer(mesh: TriangleMesh) -> sparse.csr_matrix:
    """Free-dof prolongation from the parent mesh (cached)."""
    mat = _transfer_cache.get(mesh)
    if mat is None:
        mat = (
            mesh.parent_interp[mesh.free_vertices][:, mesh.parent.free_vertices]
            .tocsr()
        )
        _transfer_cache[mesh] = mat
    return mat


class _GeometricSolver:
    """CG with a geometric multigrid V-cycle preconditioner.

    The hierarchy follows the mesh refinement ancestry; coarse operators
    are re-assembled from the coefficient at the same parameter vector, the
    smoother is damped Jacobi (deterministic) and the coarsest level is
    factored directly.
    """

    def __init__(self, system: "StiffnessSystem", coarse_limit: int = 2000):
        mats = [system.free_matrix]
        transfers = []
        mesh = system.mesh
        while mesh.parent is not None and mats[-1].shape[0] > coarse_limit:
            transfers.append(_free_transfer(mesh))
            parent = mesh.parent
            coarse = StiffnessSystem(parent, system.coeff, system.y, solver="none")
            mats.append(coarse.free_matrix)
            mesh = parent
        self.mats = mats
        self.transfers = transfers
        self.diags = [np.asarray(m.diagonal()) for m in mats]
        self.coarse_lu = splu(mats[-1].tocsc())
        self.omega = 2.0 / 3.0
        self.sweeps = 2

    def _vcycle(self, level: int, b: np.ndarray) -> np.ndarray:
        if level == len(self.mats) - 1:
            return self.coarse_lu.solve(b)
        a = self.mats[level]
        d = self.diags[level]
        x = np.zeros_like(b)
        for _ in range(self.sweeps):
            x += self.omega * (b - a @ x) / d
        r = b - a @ x
        rc = self.transfers[level].T @ r
        xc = self._vcycle(level + 1, rc)
        x += self.transfers[level] @ xc
        for _ in range(self.sweeps):
            x += self.omega * (b - a @ x) / d
        return x

    def solve(self, b: np.ndarray, tol: float = 1e-12, maxiter: int = 300) -> np.ndarray:
        a = self.mats[0]
        x = np.zeros_like(b)
        r = b.copy()
        z = self._vcycle(0, r)
        p = z.copy()
        rz = float(r @ z)
        bnorm = max(float(np.linalg.norm(b)), 1e-300)
        for _ in range(maxiter):
            ap = a @ p
            alpha = rz / float(p @ ap)
            x += alpha * p
            r -= alpha * ap
            if float(np.linalg.norm(r)) <= tol * bnorm:
                return x
            z = self._vcycle(0, r)
            rz_new = float(r @ z)
            p = z + (rz_new / rz) * p
            rz = rz_new
        raise RuntimeError("multigrid-preconditioned CG did not converge")


class StiffnessSystem:
    """Assembled diffusion operator for one (mesh, coefficient, y) triple.

    ``solver`` is "direct", "mg", "auto" (direct below DIRECT_SOLVE_LIMIT
    free dofs, multigrid above when a refinement ancestry exists) or "none"
    (assemble only).  The factorization or hierarchy is prepared once and
    reused for state and adjoint solves at the same parameter vector.
    """

    def __init__(
        self,
        mesh: TriangleMesh,
        coeff: AffineCoefficient,
        y: np.ndarray,
        solver: str = "auto",
    ):
        self.mesh = mesh
        self.coeff = coeff
        self.y = np.asarray(y, dtype=float)

        tables = _coeff_tables(coeff, mesh)
        s_int = tables.element_coeff_integrals(self.y)
        if np.min(s_int) <= 0.0:
            raise ValueError(
                "coefficient is not positive on the mesh at this parameter vector"
            )
        self.coeff_element_integral = s_int

        asm = _mesh_assembly(mesh)
        if tables.stiffness_data is not None:
            data = tables.stiffness_data[:, 0].copy()
            if self.y.size:
                data += tables.stiffness_data[:, 1:] @ self.y
            nv = mesh.num_vertices
            self.matrix = sparse.csr_matrix(
                (data, asm.indices, asm.indptr), shape=(nv, nv)
            )
        else:
            grads = mesh.geometry.hat_gradients
            local = np.einsum("t,tid,tjd->tij", s_int, grads, grads)
            self.matrix = asm.assemble(local)
        self.free = mesh.free_vertices
        self.free_matrix = asm.free_part(self.matrix)

        self._lu = None
        self._mg: Optional[_GeometricSolver] = None
        if solver == "none":
            return
        nfree = self.free_matrix.shape[0]
        use_mg = solver == "mg" or (
            solver == "auto"
            and mesh.parent is not None
            and (nfree > MG_SOLVE_THRESHOLD or nfree > DIRECT_SOLVE_LIMIT)
        )
        if use_mg:
            self._mg = _GeometricSolver(self)
        else:
            try:
                self._lu = splu(self.free_matrix.tocsc())
            except RuntimeError as exc:
                raise ValueError(f"diffusion system is singular: {exc}") from exc

    def load_vector(self, rhs: RhsLike) -> np.ndarray:
        """Assembled load vector for a constant, callable or P1 source."""
        asm = _mesh_assembly(self.mesh)
        if np.isscalar(rhs):
            return float(rhs) * asm.lumped_load()
        if isinstance(rhs, np.ndarray) and rhs.shape == (self.mesh.num_vertices,):
            return asm.mass() @ rhs
        areas = self.mesh.geometry.areas
        out = np.zeros(self.mesh.num_vertices)
        for lo, hi in _tri_chunks(self.mesh.num_triangles):
            vals = _rhs_at_quad(self.mesh, rhs, lo, hi)
            contrib = np.einsum("t,tq,qb->tb", areas[lo:hi], vals * TRI_QUAD_W, TRI_QUAD_BARY)
            np.add.at(out, self.mesh.triangles[lo:hi].ravel(), contrib.ravel())
        return out

    def solve(self, load: np.ndarray) -> np.ndarray:
        """Solve on free dofs; relative residual is verified to 1e-10."""
        b = load[self.free]
        if self._lu is not None:
            u = self._lu.solve(b)
            r = b - self.free_matrix @ u
            u = u + self._lu.solve(r)
        elif self._mg is not None:
            u = self._mg.solve(b)
        else:
            raise RuntimeError("system was assembled without a solver backend")
        r = b - self.free_matrix @ u
        scale = max(float(np.linalg.norm(b)), 1e-30)
        if float(np.linalg.norm(r)) > 1e-10 * scale:
            raise RuntimeError("solve did not reach the residual tolerance")
        full = np.zeros(self.mesh.num_vertices)
        full[self.free] = u
        return full

    def solve_field(self, rhs: RhsLike, role: str = "state") -> FieldSolution:
        return FieldSolution(
            mesh=self.mesh, values=self.solve(self.load_vector(rhs)), y=self.y, role=role
        )

    def energy(self, u: np.ndarray, v: np.ndarray) -> float:
        """Bilinear form value u^T A v on full dof vectors."""
        return float(u @ (self.matrix @ v))


def solve_state(
    mesh: TriangleMesh,
    coeff: AffineCoefficient,
    y: np.ndarray,
    rhs: RhsLike,
    system: Optional[StiffnessSystem] = None,
) -> FieldSolution:
    """Galerkin solution of the diffusion problem at parameter vector y."""
    if system is None:
        system = StiffnessSystem(mesh, coeff, y)
    return system.solve_field(rhs, role="state")


def solve_adjoint(
    mesh: TriangleMesh,
    coeff: AffineCoefficient,
    y: np.ndarray,
    u_h: FieldSolution,
    u_hat: RhsLike,
    alpha1: float,
    system: Optional[StiffnessSystem] = None,
) -> FieldSolution:
    """Adjoint solve with right-hand side alpha1 (u_h - u_hat)."""
    if u_h.mesh is not mesh:
        raise ValueError("state field lives on a different mesh")
    if system is None:
        system = StiffnessSystem(mesh, coeff, y)
    rhs = alpha1 * (u_h.values - as_nodal(mesh, u_hat))
    return system.solve_field(rhs, role="adjoint")


# ---------------------------------------------------------------------------
# Residual estimators
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ResidualBreakdown:
    """Squared, weight-included estimator contributions and their total.

    ``element_terms`` holds the weighted squared volume residuals per
    element, ``edge_terms`` the weighted squared flux jumps per interior
    edge, and ``extra`` an optional coupling addend; the total satisfies
    total^2 = sum(element_terms) + sum(edge_terms) + extra.
    """

    mesh: TriangleMesh
    element_terms: np.ndarray
    edge_terms: np.ndarray
    extra: float
    variant: str
    reliability_constant: float

    @property
    def total(self) -> float:
        s = float(np.sum(self.element_terms) + np.sum(self.edge_terms) + self.extra)
        return float(np.sqrt(max(s, 0.0)))

    def dump_csv(self, path: str) -> None:
        """One row per element: id, volume term, half-share of edge terms."""
        share = np.zeros(self.mesh.num_triangles)
        int_edges = np.flatnonzero(self.mesh.interior_edge_mask)
        tris = self.mesh.edge_tris[int_edges]
        np.add.at(share, tris[:, 0], 0.5 * self.edge_terms)
        np.add.at(share, tris[:, 1], 0.5 * self.edge_terms)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["element", "volume_term", "jump_term"])
            for i, (v, j) in enumerate(zip(self.element_terms, share)):
                w.writerow([i, repr(float(v)), repr(float(j))])


def _residual_parts(
    mesh: TriangleMesh,
    coeff: AffineCoefficient,
    y: np.ndarray,
    field: np.ndarray,
    rhs: RhsLike,
    vol_weight: np.ndarray,
    edge_weight: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted squared volume and jump terms of the strong residual.

    For P1 fields div(a grad u_h) reduces to grad a . grad u_h per element;
    the jump is the normal component of a grad u_h across interior edges.
    Evaluations stream over triangle chunks to bound memory.
    """
    geo = mesh.geometry
    y = np.asarray(y, dtype=float)
    nt = mesh.num_triangles

    grad_field = np.einsum("tid,ti->td", geo.hat_gradients, field[mesh.triangles])

    tables = _coeff_tables(coeff, mesh)
    nq = TRI_QUAD_BARY.shape[0]
    vol_sq = np.empty(nt)
    for lo, hi in _tri_chunks(nt):
        grad_a = tables.gradient_at_quads(y, lo, hi).reshape(hi - lo, nq, 2)
        resid = _rhs_at_quad(mesh, rhs, lo, hi)
        resid += np.einsum("tqd,td->tq", grad_a, grad_field[lo:hi])
        vol_sq[lo:hi] = np.einsum("tq,q->t", resid**2, TRI_QUAD_W)
    vol_sq *= geo.areas
    element_terms = vol_weight * vol_sq
    int_idx = tables.interior_idx
    if int_idx.size == 0:
        return element_terms, np.zeros(0)
    tris = mesh.edge_tris[int_idx]
    normals = geo.edge_normals[int_idx]
    lengths = geo.edge_lengths[int_idx]

    jump_grad = grad_field[tris[:, 0]] - grad_field[tris[:, 1]]
    jump_normal = np.einsum("ed,ed->e", jump_grad, normals)

    a_edge = tables.edge_coeff_values(y)
    jump_sq = lengths * (((a_edge * jump_normal[:, None]) ** 2) @ EDGE_QUAD_W)
    # Each interior edge appears in two element boundaries with factor 1/2,
    # so its net weight in the estimator is edge_weight * jump_sq.
    edge_terms = edge_weight * jump_sq
    return element_terms, edge_terms


def h1_residual(
    mesh: TriangleMesh,
    coeff: AffineCoefficient,
    y: np.ndarray,
    u_h: FieldSolution,
    rhs: RhsLike,
    c_star: float = 1.0,
) -> ResidualBreakdown:
    """Energy-norm residual indicator with weights h_T^2 and h_e."""
    geo = mesh.geometry
    int_len = geo.edge_lengths[mesh.interior_edge_mask]
    elem, edge = _residual_parts(
        mesh, coeff, y, u_h.values, rhs, vol_weight=geo.h_t**2, edge_weight=int_len
    )
    return ResidualBreakdown(
        mesh=mesh,
        element_terms=elem,
        edge_terms=edge,
        extra=0.0,
        variant="h1",
        reliability_constant=c_star,
    )


def l2_residual(
    mesh: TriangleMesh,
    coeff: AffineCoefficient,
    y: np.ndarray,
    u_h: FieldSolution,
    rhs: RhsLike,
    c_star: float = 1.0,
    convex_domain: bool = True,
) -> ResidualBreakdown:
    """Duality-weighted residual indicator with weights h_T^4 and h_e^3.

    Requires a convex polygonal domain; non-convex domains would need
    corner-weighted norms and are rejected.
    """
    if not convex_domain:
        raise ValueError("L2 residual weights require a convex domain")
    geo = mesh.geometry
    int_len = geo.edge_lengths[mesh.interior_edge_mask]
    elem, edge = _residual_parts(
        mesh, coeff, y, u_h.values, rhs, vol_weight=geo.h_t**4, edge_weight=int_len**3
    )
    return ResidualBreakdown(
        mesh=mesh,
        element_terms=elem,
        edge_terms=edge,
        extra=0.0,
        variant="l2",
        reliability_constant=c_star,
    )


def l2_dual_residual(
    mesh: TriangleMesh,
    coeff: AffineCoefficient,
    y: np.ndarray,
    q_h: FieldSolution,
    u_h: FieldSolution,
    u_hat: RhsLike,
    alpha1: float,
    state_l2: ResidualBreakdown,
    c_star: float = 1.0,
) -> ResidualBreakdown:
    """Adjoint L2 residual indicator with the state coupling term.

    The squared total is the L2-weighted residual of the adjoint solve
    (right-hand side alpha1 (u_h - u_hat)) plus (max_T h_T^4) times the
    squared state indicator.  The recorded reliability constant is
    2 max(c*, 1) c*.
    """
    if q_h.mesh is not mesh or u_h.mesh is not mesh:
        raise ValueError("adjoint and state fields must live on the given mesh")
    if state_l2.mesh is not mesh or state_l2.variant != "l2":
        raise ValueError("state indicator must be the L2 variant on the same mesh")
    geo = mesh.geometry
    int_len = geo.edge_lengths[mesh.interior_edge_mask]
    rhs = alpha1 * (u_h.values - as_nodal(mesh, u_hat))
    elem, edge = _residual_parts(
        mesh, coeff, y, q_h.values, rhs, vol_weight=geo.h_t**4, edge_weight=int_len**3
    )
    coupling = float(np.max(geo.h_t) ** 4) * state_l2.total**2
    return ResidualBreakdown(
        mesh=mesh,
        element_terms=elem,
        edge_terms=edge,
        extra=coupling,
        variant="l2_dual",
        reliability_constant=2.0 * max(c_star, 1.0) * c_star,
    )

"""Real even spherical harmonics up to degree 2, rotations and the icosphere.

Basis order and normalisation (orthonormal on the unit sphere, u = (x, y, z)):

====  =====  ==================================
idx   (l,m)  Y(u)
====  =====  ==================================
0     (0,0)  1 / (2 sqrt(pi))
1     (2,-2) 1/2 sqrt(15/pi) x y
2     (2,-1) 1/2 sqrt(15/pi) y z
3     (2,0)  1/4 sqrt(5/pi) (3 z^2 - 1)
4     (2,1)  1/2 sqrt(15/pi) x z
5     (2,2)  1/4 sqrt(15/pi) (x^2 - y^2)
====  =====  ==================================

These equal sqrt(2) (-1)^m Re/Im of the Condon-Shortley complex harmonics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DegenerateGeometryError, UnderdeterminedError, UsageError

N_COEFFS = 6
Y00 = 0.5 / np.sqrt(np.pi)
_K1 = 0.5 * np.sqrt(15.0 / np.pi)
_K0 = 0.25 * np.sqrt(5.0 / np.pi)
_K2 = 0.25 * np.sqrt(15.0 / np.pi)
L2_SLICE = slice(1, 6)
DEFAULT_RIDGE_LAMBDA = 1e-6


def eval_real_sh_basis(direction, check: bool = True) -> np.ndarray:
    """Evaluate the six basis functions at unit direction(s) ``(..., 3)``."""
    u = np.asarray(direction, dtype=np.float64)
    if check:
        norms = np.linalg.norm(u, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise UsageError("SH basis evaluation needs unit-norm directions")
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    return np.stack(
        [
            np.full_like(x, Y00),
            _K1 * x * y,
            _K1 * y * z,
            _K0 * (3.0 * z * z - 1.0),
            _K1 * x * z,
            _K2 * (x * x - y * y),
        ],
        axis=-1,
    )


def sh_power(coeffs) -> np.ndarray:
    """Per-degree power ``(p0, p2)`` along the last axis."""
    c = np.asarray(coeffs, dtype=np.float64)
    return np.stack([c[..., 0] ** 2, np.sum(c[..., L2_SLICE] ** 2, axis=-1)], axis=-1)


def sh_evaluate(coeffs, directions) -> np.ndarray:
    """Function values ``(..., n)`` of coefficient fields at ``n`` directions."""
    basis = eval_real_sh_basis(np.asarray(directions).reshape(-1, 3))
    return np.asarray(coeffs, dtype=np.float64) @ basis.T


def fit_sh(signals, directions) -> np.ndarray:
    """Least-squares SH coefficients for samples ``(..., n)`` on ``n`` directions."""
    dirs = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    basis = eval_real_sh_basis(dirs)
    if np.linalg.matrix_rank(basis, tol=1e-10) < N_COEFFS:
        raise DegenerateGeometryError(
            f"{len(dirs)} directions do not span the even degree<=2 harmonics"
        )
    return np.asarray(signals, dtype=np.float64) @ np.linalg.pinv(basis).T


# ---------------------------------------------------------------- rotations

def euler_zyz_matrix(alpha: float, beta: float, gamma: float) -> np.ndarray:
    """R = Rz(alpha) Ry(beta) Rz(gamma)."""

    def rz(t):
        c, s = np.cos(t), np.sin(t)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def ry(t):
        c, s = np.cos(t), np.sin(t)
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])

    return rz(alpha) @ ry(beta) @ rz(gamma)


def matrix_to_euler_zyz(rot: np.ndarray) -> tuple[float, float, float]:
    r = np.asarray(rot, dtype=np.float64)
    beta = float(np.arccos(np.clip(r[2, 2], -1.0, 1.0)))
    if abs(np.sin(beta)) > 1e-10:
        alpha = float(np.arctan2(r[1, 2], r[0, 2]))
        gamma = float(np.arctan2(r[2, 1], -r[2, 0]))
    else:
        # gimbal lock: only alpha +/- gamma is defined
        alpha = float(np.arctan2(r[1, 0], r[0, 0]))
        gamma = 0.0
        if r[2, 2] < 0:
            alpha = float(np.arctan2(-r[1, 0], -r[0, 0]))
    return alpha, beta, gamma


def reduced_wigner_d2(beta: float) -> np.ndarray:
    """Reduced Wigner matrix d^2_{m,m'}(beta), rows/cols m = -2..2.

    Closed-form polynomials in c = cos(beta/2), s = sin(beta/2); remaining
    entries follow from d_{m',m} = (-1)^(m-m') d_{m,m'} = d_{-m,-m'}.
    """
    c, s = np.cos(beta / 2.0), np.sin(beta / 2.0)
    r6 = np.sqrt(6.0)
    base = {
        (2, 2): c**4,
        (2, 1): -2.0 * c**3 * s,
        (2, 0): r6 * c**2 * s**2,
        (2, -1): -2.0 * c * s**3,
        (2, -2): s**4,
        (1, 1): c**2 * (c**2 - 3.0 * s**2),
        (1, 0): -r6 * c * s * (c**2 - s**2),
        (1, -1): s**2 * (3.0 * c**2 - s**2),
        (0, 0): 1.0 - 6.0 * c**2 * s**2,
    }
    d = np.full((5, 5), np.nan)
    for (m, mp), val in base.items():
        sign = (-1.0) ** (m - mp)
        for a, b, v in ((m, mp, val), (mp, m, sign * val), (-m, -mp, sign * val), (-mp, -m, val)):
            d[a + 2, b + 2] = v
    assert not np.any(np.isnan(d))
    return d


@lru_cache(maxsize=1)
def _complex_to_real_l2() -> np.ndarray:
    """Unitary C with Y_real = C Y_complex for degree 2 (m = -2..2 both sides)."""
    r = 1.0 / np.sqrt(2.0)
    c = np.zeros((5, 5), dtype=np.complex128)
    c[0, 0], c[0, 4] = 1j * r, -1j * r
    c[1, 1], c[1, 3] = 1j * r, 1j * r
    c[2, 2] = 1.0
    c[3, 1], c[3, 3] = r, -r
    c[4, 0], c[4, 4] = r, r
    return c


def wigner_d2_real(alpha: float, beta: float, gamma: float) -> np.ndarray:
    """Real 5x5 rotation block acting on degree-2 coefficients."""
    m = np.arange(-2, 3)
    dcomplex = (
        np.exp(-1j * m * alpha)[:, None] * reduced_wigner_d2(beta) * np.exp(-1j * m * gamma)[None, :]
    )
    cmat = _complex_to_real_l2()
    dreal = np.conj(cmat) @ dcomplex @ cmat.T
    return dreal.real


@lru_cache(maxsize=1)
def _l2_quadratic_forms() -> np.ndarray:
    """Symmetric traceless B_m with Y_2m(u) = u^T B_m u, shape (5, 3, 3)."""
    b = np.zeros((5, 3, 3))
    b[0, 0, 1] = b[0, 1, 0] = _K1 / 2
    b[1, 1, 2] = b[1, 2, 1] = _K1 / 2
    b[2] = _K0 * np.diag([-1.0, -1.0, 2.0])
    b[3, 0, 2] = b[3, 2, 0] = _K1 / 2
    b[4] = _K2 * np.diag([1.0, -1.0, 0.0])
    return b


def rotation_block_l2(rot: np.ndarray) -> np.ndarray:
    """Degree-2 block for rotation matrices ``(..., 3, 3)`` via quadratic forms.

    Independent of the Euler/Wigner route; used for voxelwise rotations.
    """
    b = _l2_quadratic_forms()
    rot = np.asarray(rot, dtype=np.float64)
    rotated = np.einsum("...ij,njk,...lk->...nil", rot, b, rot)
    norms = np.einsum("mij,mij->m", b, b)
    return np.einsum("...nil,mil->...mn", rotated, b) / norms[:, None]


@dataclass(frozen=True)
class WignerRotation:
    """ZYZ Euler rotation acting block-diagonally on (l=0, l=2) coefficients."""

    alpha: float
    beta: float
    gamma: float

    @property
    def matrix(self) -> np.ndarray:
        return euler_zyz_matrix(self.alpha, self.beta, self.gamma)

    @property
    def d2(self) -> np.ndarray:
        return wigner_d2_real(self.alpha, self.beta, self.gamma)

    @property
    def block(self) -> np.ndarray:
        out = np.zeros((6, 6))
        out[0, 0] = 1.0
        out[1:, 1:] = self.d2
        return out

    def inverse(self) -> "WignerRotation":
        return WignerRotation(-self.gamma, -self.beta, -self.alpha)

    @classmethod
    def from_matrix(cls, rot) -> "WignerRotation":
        return cls(*matrix_to_euler_zyz(rot))

    @classmethod
    def random(cls, rng: np.random.Generator) -> "WignerRotation":
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        return cls.from_matrix(_quat_to_matrix(q))


def _quat_to_matrix(q) -> np.ndarray:
    a, b, c, d = q
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ])


def wigner_rotate(coeffs, rotation: WignerRotation) -> np.ndarray:
    """Rotate coefficient fields so that S'(R r) = S(r)."""
    return np.asarray(coeffs, dtype=np.float64) @ rotation.block.T


def low_rank_mix(coeffs, v, q) -> np.ndarray:
    """c + V (Q c); ``v`` is (..., 6, 2), ``q`` is (..., 2, 6)."""
    c = np.asarray(coeffs, dtype=np.float64)
    qc = np.einsum("...ij,...j->...i", np.asarray(q, dtype=np.float64), c)
    return c + np.einsum("...ij,...j->...i", np.asarray(v, dtype=np.float64), qc)


# ---------------------------------------------------------------- sphere sets

def fibonacci_sphere(n: int) -> np.ndarray:
    """``n`` near-uniform unit vectors on the full sphere."""
    if n < 1:
        raise UsageError("need at least one direction")
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = np.pi * (1.0 + np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def electrostatic_directions(n: int, seed: int = 0, iterations: int = 2000) -> np.ndarray:
    """``n`` axial directions spread by antipodally-symmetric Coulomb repulsion.

    Returned vectors are sign-canonical (upper hemisphere, z >= 0).
    """
    if n < 1:
        raise UsageError("need at least one direction")
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    step = 0.1
    for it in range(iterations):
        force = np.zeros_like(u)
        for sgn in (1.0, -1.0):
            diff = u[:, None, :] - sgn * u[None, :, :]
            dist = np.linalg.norm(diff, axis=-1)
            np.fill_diagonal(dist, np.inf)
            force += np.sum(diff / dist[..., None] ** 3, axis=1)
        force -= np.sum(force * u, axis=1, keepdims=True) * u
        u = u + step * force / max(n, 1) / (1.0 + it / 200.0)
        u /= np.linalg.norm(u, axis=1, keepdims=True)
    u[u[:, 2] < 0] *= -1
    return u


@dataclass(frozen=True)
class Icosphere:
    vertices: np.ndarray
    knn: np.ndarray
    projection: np.ndarray = field(repr=False)
    k: int = 6

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_vertices, self.n_vertices))
        rows = np.repeat(np.arange(self.n_vertices), self.k)
        a[rows, self.knn.reshape(-1)] = 1.0
        return a

    @property
    def pinv(self) -> np.ndarray:
        """Deprojection (P^T)^+ of shape 6 x 42, so that ``pinv @ P^T = I``."""
        return np.linalg.pinv(self.projection.T)


def _icosahedron():
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = []
    for a in (-1.0, 1.0):
        for b in (-phi, phi):
            verts += [(0.0, a, b), (a, b, 0.0), (b, 0.0, a)]
    verts = np.array(verts)
    d = np.linalg.norm(verts[:, None] - verts[None], axis=-1)
    edges = [(i, j) for i in range(12) for j in range(i + 1, 12) if abs(d[i, j] - 2.0) < 1e-9]
    assert len(edges) == 30
    return verts, edges


@lru_cache(maxsize=4)
def build_icosphere(k: int = 6) -> Icosphere:
    """Level-1 icosphere: 12 icosahedron vertices plus 30 edge midpoints."""
    verts, edges = _icosahedron()
    mids = np.array([(verts[i] + verts[j]) / 2.0 for i, j in edges])
    allv = np.concatenate([verts, mids])
    allv /= np.linalg.norm(allv, axis=1, keepdims=True)
    dist = np.linalg.norm(allv[:, None] - allv[None], axis=-1)
    np.fill_diagonal(dist, np.inf)
    # round so numerically tied distances break by lowest index (stable sort)
    order = np.argsort(np.round(dist, 12), axis=1, kind="stable")
    knn = order[:, :k].copy()
    proj = eval_real_sh_basis(allv).T
    for arr in (allv, knn, proj):
        arr.setflags(write=False)
    return Icosphere(vertices=allv, knn=knn, projection=proj, k=k)


def icosphere_edges() -> list[tuple[int, int]]:
    """Natural mesh edges of the level-1 subdivision (vertex indices)."""
    _, edges = _icosahedron()
    out = []
    for e, (i, j) in enumerate(edges):
        m = 12 + e
        out += [(i, m), (j, m)]
    # midpoint-midpoint edges: midpoints of two edges sharing a face
    faces = _icosahedron_faces()
    eidx = {frozenset(e): 12 + n for n, e in enumerate(edges)}
    for a, b, c in faces:
        mab, mbc, mca = eidx[frozenset((a, b))], eidx[frozenset((b, c))], eidx[frozenset((c, a))]
        out += [(mab, mbc), (mbc, mca), (mca, mab)]
    return sorted({tuple(sorted(e)) for e in out})


def _icosahedron_faces():
    verts, edges = _icosahedron()
    es = {frozenset(e) for e in edges}
    faces = []
    for i in range(12):
        for j in range(i + 1, 12):
            for k in range(j + 1, 12):
                if {frozenset((i, j)), frozenset((j, k)), frozenset((i, k))} <= es:
                    faces.append((i, j, k))
    assert len(faces) == 20
    return faces


def project_to_icosphere(coeffs, sphere: Icosphere | None = None) -> np.ndarray:
    """Vertex amplitudes h = P^T c, shape ``(..., 42)``."""
    sphere = sphere or build_icosphere()
    return np.asarray(coeffs, dtype=np.float64) @ sphere.projection


def deproject_ridge(amplitudes, selection, sphere: Icosphere | None = None,
                    lam: float = DEFAULT_RIDGE_LAMBDA) -> np.ndarray:
    """Ridge-regularised recovery of coefficients from a vertex subset.

    Solves ``argmin ||B c - h||^2 + lam ||c||^2`` with ``B = (P[:, sel])^T``
    through the normal equations.
    """
    sphere = sphere or build_icosphere()
    sel = np.asarray(selection, dtype=int).reshape(-1)
    if len(sel) < 1:
        raise UsageError("need at least one selected vertex")
    if lam < 0:
        raise UsageError("ridge lambda must be non-negative")
    if len(sel) < N_COEFFS and lam == 0:
        raise UnderdeterminedError(f"{len(sel)} vertices cannot determine 6 coefficients without ridge")
    b = sphere.projection[:, sel].T
    normal = b.T @ b + lam * np.eye(N_COEFFS)
    if lam == 0 and np.linalg.matrix_rank(normal, tol=1e-12) < N_COEFFS:
        raise UnderdeterminedError("selected vertices leave the normal matrix singular")
    solve = np.linalg.solve(normal, b.T)
    return np.asarray(amplitudes, dtype=np.float64) @ solve.T

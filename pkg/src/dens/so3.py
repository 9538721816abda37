"""Real SO(3) representations for small equivariant networks.

Conventions
-----------
* Degree 1 uses the Cartesian basis (x, y, z): ``D1(R) = R`` and ``Y1(u) = u``.
* Degree L >= 2 lives in the degree-L invariant subspace of ``(L-1) (x) 1``.
  The subspace is isolated with the Casimir operator of the product
  representation, and an orthonormal basis ``Q_L`` is picked by Gram-Schmidt
  over the projector's columns (deterministic, basis-free up to that order).
  ``Y_L(u)`` is the normalised contraction ``Q_L^T (Y_{L-1}(u) (x) u)`` and
  ``D_L(R) = Q_L^T (D_{L-1}(R) (x) R) Q_L``.
* Features of C channels are stored packed as ``(nodes, C, (L_max+1)**2)``;
  the component axis is degree-major (index ``L*L + m``).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numcore as nc
from .numcore import Tensor

_LEVI = np.zeros((3, 3, 3))
_LEVI[0, 1, 2] = _LEVI[1, 2, 0] = _LEVI[2, 0, 1] = 1.0
_LEVI[0, 2, 1] = _LEVI[2, 1, 0] = _LEVI[1, 0, 2] = -1.0

# generators of rotations acting on Cartesian vectors: (J_k)_ij = -eps_kij
_J1 = -_LEVI


def dim(L: int) -> int:
    return 2 * L + 1


def num_components(lmax: int) -> int:
    return (lmax + 1) ** 2


def degree_slice(L: int) -> slice:
    return slice(L * L, (L + 1) * (L + 1))


def degree_index(lmax: int) -> np.ndarray:
    """Degree of each packed component, e.g. [0, 1, 1, 1, 2, ...]."""
    return np.concatenate([np.full(dim(L), L) for L in range(lmax + 1)])


def degree_indicator(lmax: int) -> np.ndarray:
    """(lmax+1, K) matrix with ones where component k belongs to degree L."""
    idx = degree_index(lmax)
    return (idx[None, :] == np.arange(lmax + 1)[:, None]).astype(float)


def _sign_fix(a: np.ndarray) -> np.ndarray:
    flat = a.reshape(-1)
    nz = np.flatnonzero(np.abs(flat) > 1e-9)
    if nz.size and flat[nz[0]] < 0:
        return -a
    return a


@lru_cache(maxsize=None)
def _basis(L: int) -> tuple[np.ndarray, np.ndarray]:
    """(Q_L, generators J^(L)) for L >= 1."""
    if L == 1:
        return np.eye(3), _J1.copy()
    _, jprev = _basis(L - 1)
    n = dim(L - 1)
    jprod = np.stack([np.kron(jprev[k], np.eye(3)) + np.kron(np.eye(n), _J1[k]) for k in range(3)])
    casimir = -np.einsum("kij,kjl->il", jprod, jprod)
    casimir = 0.5 * (casimir + casimir.T)
    evals, evecs = np.linalg.eigh(casimir)
    sel = np.abs(evals - L * (L + 1)) < 1e-6
    if sel.sum() != dim(L):
        raise RuntimeError(f"degree-{L} subspace has dimension {sel.sum()}")
    proj = evecs[:, sel] @ evecs[:, sel].T
    cols: list[np.ndarray] = []
    for v in proj.T:
        w = v - sum((c @ v) * c for c in cols) if cols else v.copy()
        nrm = np.linalg.norm(w)
        if nrm > 1e-6:
            cols.append(w / nrm)
        if len(cols) == dim(L):
            break
    q = np.stack(cols, axis=1)
    # re-orthogonalise once for accuracy
    q, r = np.linalg.qr(q)
    q = q * np.sign(np.diag(r))
    q = _sign_fix(q.reshape(n, 3, dim(L))).reshape(n * 3, dim(L))
    jl = np.einsum("ai,kab,bj->kij", q, jprod, q)
    return q, jl


@lru_cache(maxsize=None)
def _sph_scale(L: int) -> float:
    if L < 2:
        return 1.0
    q, _ = _basis(L)
    ez = np.array([0.0, 0.0, 1.0])
    raw = q.T @ np.outer(_sph_poly_np(L - 1, ez), ez).ravel()
    return 1.0 / float(np.linalg.norm(raw))


def _sph_poly_np(L: int, r: np.ndarray) -> np.ndarray:
    """Homogeneous degree-L polynomial with value Y_L(u) on unit vectors (any leading dims)."""
    r = np.asarray(r, dtype=float)
    if L == 0:
        return np.ones(r.shape[:-1] + (1,))
    if L == 1:
        return r.copy()
    q, _ = _basis(L)
    prev = _sph_poly_np(L - 1, r)
    outer = (prev[..., :, None] * r[..., None, :]).reshape(r.shape[:-1] + (-1,))
    return _sph_scale(L) * outer @ q


def real_sph_harm(L: int, u) -> np.ndarray:
    """Unit-norm real spherical harmonic of degree L at unit vector ``u``."""
    if L < 0:
        raise ValueError("degree must be non-negative")
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != 3:
        raise ValueError(f"expected 3-vectors, got shape {u.shape}")
    if np.any(np.abs(np.linalg.norm(u, axis=-1) - 1.0) > 1e-9):
        raise ValueError("real_sph_harm needs unit vectors; normalise explicitly")
    return _sph_poly_np(L, u)


def sph_harm_all(lmax: int, u) -> np.ndarray:
    """Packed [Y_0, Y_1, ..., Y_lmax] along the last axis."""
    u = np.asarray(u, dtype=float)
    return np.concatenate([real_sph_harm(L, u) for L in range(lmax + 1)], axis=-1)


def sph_harm_tensor(lmax: int, u: Tensor) -> Tensor:
    """Differentiable packed harmonics of (already normalised) vectors ``u`` of shape (E, 3)."""
    parts = [Tensor(np.ones(u.shape[:-1] + (1,)))]
    if lmax >= 1:
        parts.append(u)
    prev = u
    for L in range(2, lmax + 1):
        q, _ = _basis(L)
        cg = (_sph_scale(L) * q).reshape(dim(L - 1), 3, dim(L))
        prev = nc.einsum("ea,eb,abk->ek", prev, u, cg)
        parts.append(prev)
    return nc.concat(parts, axis=-1)


def check_rotation(R, tol: float = 1e-9) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("matrix is not a proper rotation")
    return R


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed rotation from the QR decomposition of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def wigner_d(L: int, R) -> np.ndarray:
    R = check_rotation(R)
    return _wigner_d(L, R)


def _wigner_d(L: int, R: np.ndarray) -> np.ndarray:
    if L == 0:
        return np.ones((1, 1))
    if L == 1:
        return R.copy()
    q, _ = _basis(L)
    return q.T @ np.kron(_wigner_d(L - 1, R), R) @ q


def wigner_d_full(lmax: int, R) -> np.ndarray:
    """Block-diagonal (K, K) matrix acting on packed components."""
    R = check_rotation(R)
    K = num_components(lmax)
    out = np.zeros((K, K))
    for L in range(lmax + 1):
        s = degree_slice(L)
        out[s, s] = _wigner_d(L, R)
    return out


@lru_cache(maxsize=None)
def _cg_cached(l1: int, l2: int, l3: int) -> np.ndarray:
    n1, n2, n3 = dim(l1), dim(l2), dim(l3)
    if not abs(l1 - l2) <= l3 <= l1 + l2:
        return np.zeros((n1, n2, n3))
    rng = np.random.default_rng(1234)
    eye = np.eye(n1 * n2 * n3)
    blocks = []
    for _ in range(4):
        R = random_rotation(rng)
        big = np.kron(np.kron(_wigner_d(l1, R), _wigner_d(l2, R)), _wigner_d(l3, R))
        blocks.append(big.T - eye)
    _, s, vt = np.linalg.svd(np.concatenate(blocks, axis=0))
    if s[-1] > 1e-8 or (len(s) > 1 and s[-2] < 1e-6):
        raise RuntimeError(f"CG null space for ({l1},{l2},{l3}) is not one-dimensional")
    k = vt[-1].reshape(n1, n2, n3)
    k = k / np.linalg.norm(k)
    k[np.abs(k) < 1e-13] = 0.0
    return _sign_fix(k)


def cg_coefficients(l1: int, l2: int, l3: int) -> np.ndarray:
    """Real coupling coefficients K[a, b, c] with unit Frobenius norm (zeros if forbidden)."""
    if min(l1, l2, l3) < 0:
        raise ValueError("degrees must be non-negative")
    return _cg_cached(l1, l2, l3).copy()


# --------------------------------------------------------------------------
# features

@dataclass(frozen=True)
class IrrepsLayout:
    lmax: int
    channels: int

    @property
    def num_components(self) -> int:
        return num_components(self.lmax)

    @property
    def total_length(self) -> int:
        return sum(self.channels * dim(L) for L in range(self.lmax + 1))


@dataclass
class IrrepsFeature:
    layout: IrrepsLayout
    data: Tensor  # (nodes, channels, (lmax+1)**2)

    def __post_init__(self):
        expect = (self.layout.channels, self.layout.num_components)
        if self.data.ndim != 3 or self.data.shape[1:] != expect:
            raise nc.ShapeError(f"feature data shape {self.data.shape} does not match layout {expect}")

    @property
    def num_nodes(self) -> int:
        return self.data.shape[0]

    def block(self, L: int) -> np.ndarray:
        return self.data.value[:, :, degree_slice(L)]

    def flat(self) -> np.ndarray:
        """(nodes, total_length), degree-major then channel-major."""
        n = self.num_nodes
        return np.concatenate([self.block(L).reshape(n, -1) for L in range(self.layout.lmax + 1)], axis=1)

    @classmethod
    def from_flat(cls, layout: IrrepsLayout, flat) -> "IrrepsFeature":
        flat = np.asarray(flat, dtype=float)
        n, C = flat.shape[0], layout.channels
        if flat.shape[1] != layout.total_length:
            raise nc.ShapeError(f"flat feature width {flat.shape[1]} != layout length {layout.total_length}")
        out = np.zeros((n, C, layout.num_components))
        off = 0
        for L in range(layout.lmax + 1):
            w = C * dim(L)
            out[:, :, degree_slice(L)] = flat[:, off:off + w].reshape(n, C, dim(L))
            off += w
        return cls(layout, Tensor(out))


def rotate_feature(x: IrrepsFeature, R) -> IrrepsFeature:
    D = wigner_d_full(x.layout.lmax, R)
    return IrrepsFeature(x.layout, nc.einsum("kj,ncj->nck", D, x.data))


def rotate_packed(y, lmax: int, R) -> np.ndarray:
    """Rotate a single-channel packed irreps array (..., K)."""
    return np.asarray(y) @ wigner_d_full(lmax, R).T


def so3_linear(weights: Tensor, x: IrrepsFeature, bias: Tensor | None = None) -> IrrepsFeature:
    """Channel mixing per degree; ``weights`` is (lmax+1, C_out, C_in), ``bias`` (C_out,) for degree 0."""
    lmax, cin = x.layout.lmax, x.layout.channels
    if weights.ndim != 3 or weights.shape[0] != lmax + 1 or weights.shape[2] != cin:
        raise nc.ShapeError(f"so3_linear weights {weights.shape} do not fit layout (lmax={lmax}, C={cin})")
    cout = weights.shape[1]
    wexp = nc.gather(weights, degree_index(lmax))
    out = nc.einsum("nck,koc->nok", x.data, wexp)
    if bias is not None:
        if bias.shape != (cout,):
            raise nc.ShapeError(f"so3_linear bias {bias.shape} must be ({cout},)")
        e0 = np.zeros(num_components(lmax))
        e0[0] = 1.0
        out = out + nc.einsum("o,k->ok", bias, e0)
    return IrrepsFeature(IrrepsLayout(lmax, cout), out)


def gate_activation(x: IrrepsFeature, gates: Tensor) -> IrrepsFeature:
    """SiLU on degree-0 channels; degree-L channels scaled by sigmoid of their gate.

    ``gates`` has shape (nodes, C, lmax): one invariant scalar per channel and
    nonzero degree.  Gates do not appear in the output.
    """
    lmax, C = x.layout.lmax, x.layout.channels
    if gates.shape != (x.num_nodes, C, lmax):
        raise nc.ShapeError(f"gate_activation needs gates of shape {(x.num_nodes, C, lmax)}, got {gates.shape}")
    e0 = np.zeros(num_components(lmax))
    e0[0] = 1.0
    out = nc.silu(x.data) * e0
    if lmax > 0:
        spread = degree_indicator(lmax)[1:]
        mult = nc.einsum("ncl,lk->nck", nc.sigmoid(gates), spread)
        out = out + x.data * mult
    return IrrepsFeature(x.layout, out)


def equivariant_rms_norm(x: IrrepsFeature, eps: float = 1e-6) -> IrrepsFeature:
    if eps <= 0:
        raise ValueError("eps must be positive")
    lmax, C = x.layout.lmax, x.layout.channels
    ind = degree_indicator(lmax)
    counts = C * ind.sum(axis=1)
    ms = nc.einsum("nck,nck,lk->nl", x.data, x.data, ind / counts[:, None])
    inv = 1.0 / (nc.sqrt(ms) + eps)
    per_comp = nc.einsum("nl,lk->nk", inv, ind)
    return IrrepsFeature(x.layout, x.data * nc.reshape(per_comp, (x.num_nodes, 1, ind.shape[1])))


# --------------------------------------------------------------------------
# depthwise tensor product

class TensorProductPlan:
    """Paths (l1, l2 -> l3) of a channel-wise tensor product.

    ``kernel[p, i, j, k]`` holds the CG block of path ``p`` embedded in the
    packed component space.
    """

    def __init__(self, lmax: int, paths: list[tuple[int, int, int]] | None = None):
        self.lmax = lmax
        if paths is None:
            paths = [(l1, l2, l3)
                     for l1 in range(lmax + 1) for l2 in range(lmax + 1) for l3 in range(lmax + 1)
                     if abs(l1 - l2) <= l3 <= l1 + l2]
        for l1, l2, l3 in paths:
            if not (abs(l1 - l2) <= l3 <= l1 + l2) or max(l1, l2, l3) > lmax:
                raise ValueError(f"illegal tensor-product path ({l1},{l2}->{l3}) for lmax={lmax}")
        self.paths = list(paths)
        K = num_components(lmax)
        kern = np.zeros((len(self.paths), K, K, K))
        for p, (l1, l2, l3) in enumerate(self.paths):
            kern[p, degree_slice(l1), degree_slice(l2), degree_slice(l3)] = _cg_cached(l1, l2, l3)
        self.kernel = kern
        self.kernel_flat = kern.reshape(len(self.paths), -1)

    @property
    def num_paths(self) -> int:
        return len(self.paths)


def depthwise_tensor_product(x: IrrepsFeature, y, path_weights, plan: TensorProductPlan,
                             edge_scale=None) -> IrrepsFeature:
    """out[n, c, l3] = s[n, c] * sum_paths w[c, p] * CG(x[n, c, l1], y[n, l2]).

    ``y`` is (nodes, K) single-channel irreps, ``path_weights`` is (C, P) and
    the optional ``edge_scale`` (nodes, C) multiplies each channel (the model
    feeds radial-MLP outputs here).  Fused into one tape node.
    """
    if x.layout.lmax != plan.lmax:
        raise nc.ShapeError("tensor product plan and feature disagree on lmax")
    E, C = x.data.shape[:2]
    s = nc.Tensor(np.ones((E, C))) if edge_scale is None else nc.as_tensor(edge_scale)
    out = _tp_primitive(x.data, nc.as_tensor(y), nc.as_tensor(path_weights), s, plan)
    return IrrepsFeature(x.layout, out)


def _tp_primitive(x: Tensor, y: Tensor, w: Tensor, s: Tensor, plan: TensorProductPlan) -> Tensor:
    E, C, K = x.shape
    P = plan.num_paths
    if y.shape != (E, K):
        raise nc.ShapeError(f"tensor product: y shape {y.shape} vs x shape {x.shape}")
    if w.shape != (C, P):
        raise nc.ShapeError(f"tensor product: path weights {w.shape} vs expected {(C, P)}")
    if s.shape != (E, C):
        raise nc.ShapeError(f"tensor product: edge scale {s.shape} vs expected {(E, C)}")
    # per-channel coupling tensor M[c, i, j, k]
    m = (w.value @ plan.kernel_flat).reshape(C, K, K, K)
    m_jcik = m.transpose(2, 0, 1, 3).reshape(K, C * K * K)
    nt = (y.value @ m_jcik).reshape(E, C, K, K)         # [e, c, i, k]
    u = np.matmul(x.value[:, :, None, :], nt)[:, :, 0, :]
    sv = s.value
    out = u * sv[:, :, None]

    def vjp(g):
        gu = g * sv[:, :, None]
        ds = (g * u).sum(axis=2) if s.requires_grad else None
        dx = np.matmul(nt, gu[:, :, :, None])[:, :, :, 0] if x.requires_grad else None
        dw = dy = None
        if w.requires_grad or y.requires_grad:
            dnt = (x.value[:, :, :, None] * gu[:, :, None, :]).reshape(E, C * K * K)
            if w.requires_grad:
                dm = (y.value.T @ dnt).reshape(K, C, K, K).transpose(1, 2, 0, 3)
                dw = dm.reshape(C, -1) @ plan.kernel_flat.T
            if y.requires_grad:
                dy = dnt @ m_jcik.T
        return dx, dy, dw, ds
    return nc.emit("tensor_product", out, (x, y, w, s), vjp)


nc.register_primitive("tensor_product", _tp_primitive)

"""EquiLite: a small tensor-field message-passing network.

Shared trunk of ``num_blocks`` equivariant blocks with three heads:
energy (sum of per-atom scalars), direct forces (one degree-1 channel) and
noise (one extra block, then one degree-1 channel).
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .encode import force_embedding
from .numcore import NonFiniteError, Tensor
from .so3 import (
    IrrepsFeature,
    IrrepsLayout,
    TensorProductPlan,
    depthwise_tensor_product,
    equivariant_rms_norm,
    gate_activation,
    num_components,
    so3_linear,
    sph_harm_tensor,
)


class ModelDivergence(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    lmax: int = 2
    channels: int = 16
    num_blocks: int = 2
    num_radial: int = 16
    radial_hidden: int = 16
    cutoff: float = 2.5
    max_neighbors: int = 12
    num_species: int = 3  # species ids 1..2 plus padding row 0
    norm_eps: float = 1e-6

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# graphs

@dataclass
class Graph:
    num_nodes: int
    src: np.ndarray       # neighbour j of each edge
    dst: np.ndarray       # centre i of each edge (messages flow j -> i)
    vec: np.ndarray       # r_ij = p_j - p_i
    dist: np.ndarray
    segment: np.ndarray   # node -> structure id
    num_graphs: int
    in_degree: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.in_degree is None:
            self.in_degree = np.bincount(self.dst, minlength=self.num_nodes)


def build_graph(positions, cutoff: float, max_neighbors: int, segment=None, warn: bool = True) -> Graph:
    """All ordered pairs within ``cutoff`` of the same structure, capped per centre.

    Neighbours of each centre are ranked by (distance, index) and the first
    ``max_neighbors`` kept.
    """
    pos = np.asarray(positions, dtype=float)
    n = pos.shape[0]
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    if segment is None:
        if n < 2:
            raise ValueError("a structure needs at least 2 atoms")
        segment = np.zeros(n, dtype=np.int64)
    segment = np.asarray(segment, dtype=np.int64)
    diff = pos[None, :, :] - pos[:, None, :]          # [i, j] = p_j - p_i
    dist = np.sqrt((diff * diff).sum(-1))
    allowed = (segment[:, None] == segment[None, :]) & (dist <= cutoff)
    np.fill_diagonal(allowed, False)
    masked = np.where(allowed, dist, np.inf)
    order = np.argsort(masked, axis=1, kind="stable")[:, :max_neighbors]
    keep = np.isfinite(np.take_along_axis(masked, order, axis=1))
    dst = np.repeat(np.arange(n), order.shape[1])[keep.ravel()]
    src = order.ravel()[keep.ravel()]
    g = Graph(n, src, dst, diff[dst, src], dist[dst, src], segment, int(segment.max()) + 1 if n else 0)
    if warn and n and (g.in_degree == 0).any():
        isolated = np.flatnonzero(g.in_degree == 0)
        warnings.warn(f"atoms without neighbours within cutoff: {isolated.tolist()}", stacklevel=2)
    return g


def radial_basis(d, cutoff: float, num_basis: int) -> Tensor:
    """Gaussian basis on [0, cutoff] times a cosine envelope; (E,) -> (E, B)."""
    d = nc.as_tensor(d)
    if (d.value > cutoff + 1e-12).any() or (d.value < 0).any():
        raise ValueError("radial_basis: distance outside [0, cutoff]")
    centers = np.linspace(0.0, cutoff, num_basis)
    width = centers[1] - centers[0]
    col = nc.reshape(d, (d.shape[0], 1))
    diff = col - centers
    gauss = nc.exp(nc.scale(diff * diff, -0.5 / width ** 2))
    env = nc.scale(nc.cos(nc.scale(col, np.pi / cutoff)) + 1.0, 0.5)
    return gauss * env


# --------------------------------------------------------------------------
# parameters

def block_names(cfg: ModelConfig) -> list[str]:
    return [f"block{b}" for b in range(cfg.num_blocks)] + ["noise_block"]


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameters: per-degree weights ~ N(0, 1/C_in), path weights ~ N(0, 1/#paths into l3)."""
    C, L, B, H = cfg.channels, cfg.lmax, cfg.num_radial, cfg.radial_hidden
    plan = TensorProductPlan(L)
    fan_in = np.bincount([p[2] for p in plan.paths], minlength=L + 1)
    path_std = np.array([1.0 / np.sqrt(fan_in[l3]) for (_, _, l3) in plan.paths])
    params: dict[str, np.ndarray] = {
        "embed": rng.standard_normal((cfg.num_species, C)),
        "force_enc": rng.standard_normal((L + 1, C, 1)),
    }
    for name in block_names(cfg):
        params[f"{name}.rad_w1"] = rng.standard_normal((B, H)) / np.sqrt(B)
        params[f"{name}.rad_b1"] = np.zeros(H)
        params[f"{name}.rad_w2"] = rng.standard_normal((H, C)) / np.sqrt(H)
        params[f"{name}.path"] = rng.standard_normal((C, plan.num_paths)) * path_std
        params[f"{name}.lin"] = rng.standard_normal((L + 1, C, C)) / np.sqrt(C)
        params[f"{name}.lin_b"] = np.zeros(C)
        params[f"{name}.gate"] = rng.standard_normal((C, C * L)) / np.sqrt(C)
        params[f"{name}.gate_b"] = np.zeros(C * L)
    params["energy.w"] = rng.standard_normal(C) / np.sqrt(C)
    params["energy.b"] = np.zeros(1)
    params["force.w"] = rng.standard_normal(C) / np.sqrt(C)
    params["noise.w"] = rng.standard_normal(C) / np.sqrt(C)
    return params


def as_tensors(params: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad) for k, v in params.items()}


# --------------------------------------------------------------------------
# forward

@dataclass
class ModelOutput:
    energy: Tensor          # (S,) normalised units
    forces: Tensor          # (N, 3) normalised units
    noise: Tensor | None    # (N, 3) units of eps / sigma


@dataclass
class _EdgeGeometry:
    graph: Graph
    sh: Tensor        # (E, K)
    rbf: Tensor       # (E, B)
    inv_deg: np.ndarray


class EquiLite:
    """Stateless model definition; parameters are passed to :meth:`forward`."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.layout = IrrepsLayout(cfg.lmax, cfg.channels)
        self.plan = TensorProductPlan(cfg.lmax)

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return init_params(self.cfg, rng)

    def geometry(self, positions, segment, graph: Graph | None = None) -> _EdgeGeometry:
        cfg = self.cfg
        pos = nc.as_tensor(positions)
        if graph is None:
            graph = build_graph(pos.value, cfg.cutoff, cfg.max_neighbors, segment, warn=False)
        if pos.requires_grad:
            vec = nc.gather(pos, graph.src) - nc.gather(pos, graph.dst)
            dist = nc.norm(vec)
            unit = vec / nc.reshape(dist, (-1, 1))
        else:
            dist = Tensor(graph.dist)
            unit = Tensor(graph.vec / graph.dist[:, None])
        sh = sph_harm_tensor(cfg.lmax, unit)
        rbf = radial_basis(dist, cfg.cutoff, cfg.num_radial)
        inv_deg = 1.0 / np.maximum(graph.in_degree, 1)
        return _EdgeGeometry(graph, sh, rbf, inv_deg)

    def embed(self, p: dict[str, Tensor], species) -> IrrepsFeature:
        species = np.asarray(species, dtype=np.int64)
        if species.size and (species.min() < 0 or species.max() >= self.cfg.num_species):
            raise ValueError(f"species id outside embedding table of size {self.cfg.num_species}")
        e0 = np.zeros(num_components(self.cfg.lmax))
        e0[0] = 1.0
        scalars = nc.gather(p["embed"], species)
        return IrrepsFeature(self.layout, nc.einsum("nc,k->nck", scalars, e0))

    def block(self, p: dict[str, Tensor], name: str, x: IrrepsFeature, geo: _EdgeGeometry) -> IrrepsFeature:
        cfg = self.cfg
        g = geo.graph
        hidden = nc.silu(geo.rbf @ p[f"{name}.rad_w1"] + p[f"{name}.rad_b1"])
        radial = hidden @ p[f"{name}.rad_w2"]
        xj = IrrepsFeature(self.layout, nc.gather(x.data, g.src))
        msg = depthwise_tensor_product(xj, geo.sh, p[f"{name}.path"], self.plan, edge_scale=radial)
        agg = nc.scatter_add(msg.data, g.dst, g.num_nodes) * geo.inv_deg[:, None, None]
        agg = IrrepsFeature(self.layout, agg)
        h = so3_linear(p[f"{name}.lin"], agg, p[f"{name}.lin_b"])
        scalars = agg.data[:, :, 0]
        gates = scalars @ p[f"{name}.gate"] + p[f"{name}.gate_b"]
        gates = nc.reshape(gates, (g.num_nodes, cfg.channels, cfg.lmax))
        h = gate_activation(h, gates)
        return equivariant_rms_norm(IrrepsFeature(self.layout, x.data + h.data), cfg.norm_eps)

    def forward(self, p: dict[str, Tensor], species, positions, segment, num_graphs: int | None = None,
                force_inputs=None, with_noise: bool = True, graph: Graph | None = None) -> ModelOutput:
        """Predict energy per structure, forces and (optionally) noise per atom.

        ``force_inputs`` are normalised forces to encode, zero where nothing is
        encoded; ``None`` skips the force embedding entirely.
        """
        segment = np.asarray(segment, dtype=np.int64)
        if num_graphs is None:
            num_graphs = int(segment.max()) + 1
        stage = "embedding"
        try:
            geo = self.geometry(positions, segment, graph)
            x = self.embed(p, species)
            if force_inputs is not None:
                emb = force_embedding(force_inputs, p["force_enc"])
                x = IrrepsFeature(self.layout, x.data + emb.data)
            for b in range(self.cfg.num_blocks):
                stage = f"block {b}"
                x = self.block(p, f"block{b}", x, geo)
            stage = "heads"
            atom_e = x.data[:, :, 0] @ p["energy.w"] + p["energy.b"]
            energy = nc.scatter_add(atom_e, segment, num_graphs)
            forces = nc.einsum("nck,c->nk", x.data[:, :, 1:4], p["force.w"])
            noise = None
            if with_noise:
                stage = "noise block"
                xn = self.block(p, "noise_block", x, geo)
                noise = nc.einsum("nck,c->nk", xn.data[:, :, 1:4], p["noise.w"])
        except NonFiniteError as err:
            raise ModelDivergence(f"non-finite value in {stage} (primitive '{err.primitive}')") from err
        return ModelOutput(energy, forces, noise)

    def predict_forces_gradient(self, p: dict[str, Tensor], species, positions, segment,
                                num_graphs: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(energies, -dE/dp) with positions as tracked leaves; returns numpy arrays."""
        pos = Tensor(np.array(positions, dtype=float), requires_grad=True)
        frozen = {k: Tensor(v.value) for k, v in p.items()}
        with nc.Tape():
            out = self.forward(frozen, species, pos, segment, num_graphs, with_noise=False)
            total = nc.sum(out.energy)
        grads = nc.backward(total)
        if pos not in grads:
            return out.energy.value, np.zeros_like(pos.value)
        return out.energy.value, -grads[pos]

"""Force encoding: per-atom force vectors -> irreps node embeddings."""
from __future__ import annotations

import numpy as np

from . import numcore as nc
from .numcore import Tensor
from .so3 import IrrepsFeature, IrrepsLayout, num_components, so3_linear, sph_harm_all


def force_irreps(forces, lmax: int) -> np.ndarray:
    """|f| * Y(f/|f|) for every degree up to lmax, packed (N, K); zero rows for zero forces."""
    f = np.asarray(forces, dtype=float)
    if f.ndim != 2 or f.shape[1] != 3:
        raise nc.ShapeError(f"forces must be (N, 3), got {f.shape}")
    if not np.isfinite(f).all():
        raise ValueError("non-finite force input")
    out = np.zeros((f.shape[0], num_components(lmax)))
    mag = np.linalg.norm(f, axis=1)
    nz = mag > 0
    if nz.any():
        out[nz] = mag[nz, None] * sph_harm_all(lmax, f[nz] / mag[nz, None])
    return out


def force_embedding(forces, weights: Tensor) -> IrrepsFeature:
    """Project forces (normalised units) into irreps and expand 1 -> C channels.

    ``weights`` is the (lmax+1, C, 1) per-degree channel expansion.  There is
    no bias, so atoms with zero force get exactly zero rows.
    """
    lmax = weights.shape[0] - 1
    raw = force_irreps(forces, lmax)
    x = IrrepsFeature(IrrepsLayout(lmax, 1), Tensor(raw[:, None, :]))
    return so3_linear(weights, x)


def encode_into_nodes(node_embeds: IrrepsFeature, forces, mask, weights: Tensor) -> IrrepsFeature:
    """node_embeds + force_embedding(forces * mask)."""
    f = np.asarray(forces, dtype=float)
    m = np.asarray(mask, dtype=float)
    n = node_embeds.num_nodes
    if f.shape != (n, 3) or m.shape != (n,):
        raise nc.ShapeError(f"encode_into_nodes: {n} nodes but forces {f.shape}, mask {m.shape}")
    emb = force_embedding(f * m[:, None], weights)
    if emb.layout != node_embeds.layout:
        raise nc.ShapeError(f"force embedding layout {emb.layout} != node layout {node_embeds.layout}")
    return IrrepsFeature(node_embeds.layout, node_embeds.data + emb.data)

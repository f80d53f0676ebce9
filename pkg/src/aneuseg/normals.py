"""Vertex normal estimation.

Meshes get area-weighted triangle normals.  Bare point clouds get PCA
tangent-plane normals over k nearest neighbors, with signs made consistent by
propagation along a minimum spanning tree of the neighbor graph (flip a
neighbor when it disagrees with its parent).  Both paths are deterministic;
ties break toward the smallest point index.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree


def triangle_vertex_normals(positions: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals; isolated vertices copy their nearest
    connected vertex's normal."""
    positions = np.asarray(positions, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    a, b, c = positions[triangles[:, 0]], positions[triangles[:, 1]], positions[triangles[:, 2]]
    face = np.cross(b - a, c - a)  # magnitude = 2 * area, so summing is area weighting
    acc = np.zeros_like(positions)
    for col in range(3):
        np.add.at(acc, triangles[:, col], face)
    lens = np.linalg.norm(acc, axis=1)
    good = lens > 1e-20
    out = np.zeros_like(acc)
    out[good] = acc[good] / lens[good, None]
    if not good.all():
        if not good.any():
            raise ValueError("all accumulated vertex normals are degenerate")
        tree = cKDTree(positions[good])
        _, nearest = tree.query(positions[~good])
        out[~good] = out[np.flatnonzero(good)[nearest]]
    return out


def _canonical_sign(normals: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude component non-negative (removes the
    arbitrary eigenvector sign before orientation propagation)."""
    lead = np.take_along_axis(normals, np.abs(normals).argmax(axis=1)[:, None], axis=1)[:, 0]
    flip = lead < 0
    normals = normals.copy()
    normals[flip] *= -1.0
    return normals


def pca_normals(positions: np.ndarray, k: int = 10) -> np.ndarray:
    """Unoriented PCA normals made globally consistent along an MST.

    Roots (smallest index per component) are oriented away from the cloud
    centroid so closed shapes come out pointing outward.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if n == 1:
        return np.array([[0.0, 0.0, 1.0]])
    k = min(k, n - 1)
    tree = cKDTree(positions)
    _, idx = tree.query(positions, k=k + 1)
    neighbors = idx[:, 1:]

    local = positions[neighbors] - positions[:, None, :]
    cov = np.einsum("nki,nkj->nij", local, local)
    _, vecs = np.linalg.eigh(cov)          # ascending eigenvalues
    normals = _canonical_sign(vecs[:, :, 0])

    # MST over the kNN graph, weighted by normal disagreement
    rows = np.repeat(np.arange(n), k)
    cols = neighbors.ravel()
    agree = np.abs(np.einsum("ij,ij->i", normals[rows], normals[cols]))
    weights = np.maximum(1.0 + 1e-9 - agree, 1e-12)
    graph = coo_matrix((weights, (rows, cols)), shape=(n, n)).tocsr()
    graph = graph.maximum(graph.T)
    mst = minimum_spanning_tree(graph)
    mst = mst.maximum(mst.T).tocsr()

    n_comp, comp = connected_components(mst, directed=False)
    centroid = positions.mean(axis=0)
    for c in range(n_comp):
        root = int(np.flatnonzero(comp == c)[0])
        outward = positions[root] - centroid
        if normals[root] @ outward < 0:
            normals[root] *= -1.0
        order, parents = breadth_first_order(mst, root, directed=False)
        for node in order[1:]:
            if normals[node] @ normals[parents[node]] < 0:
                normals[node] *= -1.0
    return normals

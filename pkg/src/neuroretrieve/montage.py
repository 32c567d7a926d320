"""Sensor graph: electrode positions, k-NN adjacency, random-walk transitions and
the learned (self-adaptive) adjacency."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch


@dataclass
class SensorMontage:
    positions: np.ndarray  # (V, 3)
    k: int
    W: np.ndarray  # (V, V) {0,1}
    P: np.ndarray  # (V, V) row-stochastic

    @classmethod
    def from_positions(cls, positions, k: int = 8) -> "SensorMontage":
        positions = np.asarray(positions, dtype=np.float64)
        k = min(k, positions.shape[0] - 1)
        W = build_knn_adjacency(positions, k)
        return cls(positions=positions, k=k, W=W, P=transition_matrix(W))

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]


def build_knn_adjacency(positions, k: int) -> np.ndarray:
    """Binary adjacency: edge i-j if j is among i's k nearest nodes or vice versa,
    plus self-loops. Equal distances are resolved by the lower node index."""
    pos = np.asarray(positions, dtype=np.float64)
    V = pos.shape[0]
    if V == 1:
        return np.ones((1, 1))
    if not 1 <= k <= V - 1:
        raise ValueError(f"k must lie in [1, {V - 1}], got {k}")
    dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    off = ~np.eye(V, dtype=bool)
    if np.any(dist[off] == 0):
        i, j = np.argwhere((dist == 0) & off)[0]
        raise ValueError(f"duplicate sensor positions for nodes {i} and {j}")
    W = np.eye(V)
    for i in range(V):
        others = [j for j in range(V) if j != i]
        # lexsort: primary key distance, secondary key index
        order = np.lexsort((others, dist[i, others]))
        for j in np.asarray(others)[order[:k]]:
            W[i, j] = W[j, i] = 1.0
    return W


def transition_matrix(W) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    return W / W.sum(axis=1, keepdims=True)


def adaptive_adjacency(theta_x: torch.Tensor, theta_x2: torch.Tensor) -> torch.Tensor:
    """Row-softmax of relu(theta_x @ theta_x2.T)."""
    if not (torch.isfinite(theta_x).all() and torch.isfinite(theta_x2).all()):
        raise ValueError("node embeddings contain non-finite values")
    return torch.softmax(torch.relu(theta_x @ theta_x2.T), dim=1)


def default_montage(V: int) -> np.ndarray:
    """Deterministic layout of ``V`` points on the upper cap of the unit sphere.

    Points follow a golden-angle spiral from the vertex down to 30 degrees
    below the equator (z = -0.5), a rough stand-in for 10-20 scalp coverage.
    """
    if V < 1:
        raise ValueError("need at least one sensor")
    golden = np.pi * (3.0 - np.sqrt(5.0))
    idx = np.arange(V)
    z_min = -0.5
    z = 1.0 - (idx + 0.5) / V * (1.0 - z_min)
    r = np.sqrt(1.0 - z**2)
    phi = golden * idx
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def load_positions(path) -> np.ndarray:
    """Read ``node_id x y z`` lines; rows are ordered by appearance."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"bad coordinate line {line!r}: expected 'node_id x y z'")
        rows.append([float(v) for v in parts[1:]])
    return np.asarray(rows)


def save_positions(positions, path, names=None) -> None:
    positions = np.asarray(positions)
    names = names or [f"ch{i}" for i in range(len(positions))]
    with open(path, "w") as f:
        for name, (x, y, z) in zip(names, positions):
            f.write(f"{name} {float(x)!r} {float(y)!r} {float(z)!r}\n")

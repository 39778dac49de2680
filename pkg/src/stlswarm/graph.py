"""Radius-based observation graph over agents, goals and LiDAR hits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import EnvConfig, lidar_hits, pairwise_distances

AGENT, GOAL, LIDAR = 0, 1, 2


@dataclass
class GraphObs:
    node_features: np.ndarray  # (M, 3) one-hot node type
    edges: np.ndarray  # (E, 2) int, columns (src, dst)
    edge_features: np.ndarray  # (E, edge_dim)
    agent_index: np.ndarray  # node ids of the agents, in agent order
    node_pos: np.ndarray  # (M, 2)

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def incidence(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Dense (src, dst, mean) operators.

        ``src @ h`` and ``dst @ h`` gather per-edge endpoint rows; ``mean @ m``
        averages incoming edge messages per node, with zero for isolated nodes.
        """
        M, E = self.n_nodes, self.n_edges
        src = np.zeros((E, M))
        dst = np.zeros((E, M))
        src[np.arange(E), self.edges[:, 0]] = 1.0
        dst[np.arange(E), self.edges[:, 1]] = 1.0
        indeg = dst.sum(axis=0)
        mean = dst.T / np.where(indeg > 0, indeg, 1.0)[:, None]
        return src, dst, mean


def edge_embedding(states: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """Per-node vector whose differences give edge features."""
    s = np.asarray(states, dtype=np.float64)
    if cfg.env_kind != "dubins":
        return s.copy()
    th, v = s[:, 2], s[:, 3]
    return np.stack([s[:, 0], s[:, 1], v * np.cos(th), v * np.sin(th)], axis=1)


def build_graph(
    states: np.ndarray,
    cfg: EnvConfig,
    include_lidar: bool = True,
    goals: np.ndarray | None = None,
) -> GraphObs:
    """Agents connect j -> i when within the sensing radius. LiDAR hit nodes
    (rays shorter than R) and optional per-agent goal nodes only send to
    their owning agent.
    """
    s = np.asarray(states, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 1:
        raise ValueError("states must be (N, state_dim) with N >= 1")
    N = s.shape[0]
    emb = edge_embedding(s, cfg)
    pos = s[:, :2]

    d = pairwise_distances(s)
    close = (d <= cfg.sensing_radius) & ~np.eye(N, dtype=bool)
    dst, src = np.nonzero(close)  # row i receives from column j
    edges = [np.stack([src, dst], axis=1)]
    feats = [emb[src] - emb[dst]]
    kinds = [np.full(N, AGENT)]
    node_pos = [pos]
    next_id = N

    def attach(owner: np.ndarray, pts: np.ndarray, kind: int):
        nonlocal next_id
        m = len(owner)
        ids = np.arange(next_id, next_id + m)
        next_id += m
        e = np.zeros((m, emb.shape[1]))
        e[:, :2] = pts
        edges.append(np.stack([ids, owner], axis=1))
        feats.append(e - emb[owner])
        kinds.append(np.full(m, kind))
        node_pos.append(pts)

    if goals is not None:
        attach(np.arange(N), np.asarray(goals, dtype=np.float64).reshape(N, 2), GOAL)
    if include_lidar and cfg.obstacles and cfg.n_rays > 0:
        owner, pts = lidar_hits(s, cfg)
        attach(owner, pts, LIDAR)

    kinds_all = np.concatenate(kinds)
    onehot = np.zeros((kinds_all.size, 3))
    onehot[np.arange(kinds_all.size), kinds_all] = 1.0
    return GraphObs(
        node_features=onehot,
        edges=np.concatenate(edges).astype(int).reshape(-1, 2),
        edge_features=np.concatenate(feats).reshape(-1, emb.shape[1]),
        agent_index=np.arange(N),
        node_pos=np.concatenate(node_pos).reshape(-1, 2),
    )

"""Dynamic directed vehicle-interaction graph built from a world state.

Nodes carry 8-d normalized features, directed edges carry 4-d features with a
type tag (proximity 0.0, lane 0.5, EMV 1.0; highest type wins on overlap).
Self-loops with identity features are added by default so every node has at
least one incoming edge for attention normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sim import VehicleKind, VehicleState, WorldState

PROXIMITY_RADIUS = 50.0     # m, Euclidean with lane-center lateral offsets
LANE_EDGE_RADIUS = 30.0     # m, longitudinal
LOCAL_RADIUS = 30.0         # m, local subgraph cut
SELF_LOOP_FEATURES = (0.0, 0.0, 1.0, 0.5)

TYPE_PROXIMITY = 0.0
TYPE_LANE = 0.5
TYPE_EMV = 1.0


class GraphError(ValueError):
    pass


@dataclass
class TrafficGraph:
    node_ids: list[int]                 # vehicle id per node index
    node_features: np.ndarray           # N x 8
    edges: np.ndarray                   # |E| x 2 (src, dst) node indices
    edge_features: np.ndarray           # |E| x 4
    emv_node: int                       # -1 when the EMV is outside the graph

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def to_dict(self) -> dict:
        """JSON-compatible debug dump."""
        return {
            "nodes": list(self.node_ids),
            "edges": [[int(s), int(d)] for s, d in self.edges],
            "x": self.node_features.tolist(),
            "e": self.edge_features.tolist(),
        }


@dataclass
class LocalSubgraph(TrafficGraph):
    ego_node: int = 0


def node_features(vehicle: VehicleState, world: WorldState) -> np.ndarray:
    """[x/L, lane-center-y/width, v/v_lim, a/4, lane/N_lane, is_cv, is_emv,
    signed distance to the EMV / L]."""
    geom = world.geometry
    emv = world.emv
    return np.array([
        vehicle.x / geom.length,
        (vehicle.lane + 0.5) * geom.lane_width / geom.lane_width,
        vehicle.v / geom.speed_limit,
        vehicle.a / 4.0,
        vehicle.lane / geom.lane_count,
        1.0 if vehicle.kind is VehicleKind.CV else 0.0,
        1.0 if vehicle.kind is VehicleKind.EMV else 0.0,
        (vehicle.x - emv.x) / geom.length,
    ])


def _edge_types(vehicles: list[VehicleState],
                lane_width: float) -> dict[tuple[int, int], float]:
    """Directed (src, dst) node-index pairs mapped to their type tag.

    Proximity and lane predicates are symmetric so both directions appear;
    EMV edges connect the EMV with every other node in both directions.  On
    multi-membership the highest tag wins (EMV > lane > proximity).
    """
    n = len(vehicles)
    edges: dict[tuple[int, int], float] = {}

    def put(i: int, j: int, tag: float) -> None:
        key = (i, j)
        if key not in edges or edges[key] < tag:
            edges[key] = tag

    for i in range(n):
        for j in range(i + 1, n):
            vi, vj = vehicles[i], vehicles[j]
            dx = vi.x - vj.x
            dy = (vi.lane - vj.lane) * lane_width
            if np.hypot(dx, dy) < PROXIMITY_RADIUS:
                put(i, j, TYPE_PROXIMITY)
                put(j, i, TYPE_PROXIMITY)
            if abs(vi.lane - vj.lane) <= 1 and abs(dx) < LANE_EDGE_RADIUS:
                put(i, j, TYPE_LANE)
                put(j, i, TYPE_LANE)
    emv_idx = next((i for i, v in enumerate(vehicles) if v.kind is VehicleKind.EMV), None)
    if emv_idx is not None:
        for j in range(n):
            if j != emv_idx:
                put(emv_idx, j, TYPE_EMV)
                put(j, emv_idx, TYPE_EMV)
    return edges


def build_edges(world: WorldState) -> dict[tuple[int, int], float]:
    """Directed edge set over vehicles in id order, tagged by type."""
    vehicles = sorted(world.vehicles, key=lambda v: v.id)
    return _edge_types(vehicles, world.geometry.lane_width)


def edge_features(src: VehicleState, dst: VehicleState, world: WorldState,
                  type_tag: float) -> np.ndarray:
    geom = world.geometry
    return np.array([
        (dst.x - src.x) / geom.length,
        (dst.v - src.v) / geom.speed_limit,
        1.0 if src.lane == dst.lane else 0.0,
        type_tag,
    ])


def _assemble(vehicles: list[VehicleState], world: WorldState,
              self_loops: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(vehicles)
    feats = np.stack([node_features(v, world) for v in vehicles]) if n else np.zeros((0, 8))
    typed = _edge_types(vehicles, world.geometry.lane_width)
    pairs = sorted(typed)
    edges = list(pairs)
    efeat = [edge_features(vehicles[i], vehicles[j], world, typed[(i, j)])
             for i, j in pairs]
    if self_loops:
        for i in range(n):
            edges.append((i, i))
            efeat.append(np.array(SELF_LOOP_FEATURES))
    edges_arr = np.array(edges, dtype=np.int64) if edges else np.zeros((0, 2), dtype=np.int64)
    efeat_arr = np.stack(efeat) if efeat else np.zeros((0, 4))
    return feats, edges_arr, efeat_arr


def build_graph(world: WorldState, self_loops: bool = True) -> TrafficGraph:
    vehicles = sorted(world.vehicles, key=lambda v: v.id)
    feats, edges, efeat = _assemble(vehicles, world, self_loops)
    emv_node = next(i for i, v in enumerate(vehicles) if v.kind is VehicleKind.EMV)
    return TrafficGraph(
        node_ids=[v.id for v in vehicles],
        node_features=feats,
        edges=edges,
        edge_features=efeat,
        emv_node=emv_node,
    )


def build_local(world: WorldState, ego_id: int,
                radius: float = LOCAL_RADIUS, self_loops: bool = True) -> LocalSubgraph:
    """Subgraph of vehicles with |x - x_ego| <= radius; edges are rebuilt
    within the subset (induced restriction of the global rules)."""
    ego = world.vehicle(ego_id)
    if ego.kind is not VehicleKind.CV:
        raise GraphError(f"ego {ego_id} is not a CV")
    members = [v for v in sorted(world.vehicles, key=lambda v: v.id)
               if abs(v.x - ego.x) <= radius]
    feats, edges, efeat = _assemble(members, world, self_loops)
    ego_node = next(i for i, v in enumerate(members) if v.id == ego_id)
    emv_node = next((i for i, v in enumerate(members) if v.kind is VehicleKind.EMV), -1)
    return LocalSubgraph(
        node_ids=[v.id for v in members],
        node_features=feats,
        edges=edges,
        edge_features=efeat,
        emv_node=emv_node,
        ego_node=ego_node,
    )

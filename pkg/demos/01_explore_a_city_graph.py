"""A first look at the synthetic road graphs.

Generates one graph, pokes at its attributes, solves the congestion
fixed point, and prices a trip with and without traffic.  Run it top to
bottom; everything is seeded.
"""

import numpy as np

from fleetmap import (
    congestion_factor,
    dense_distance,
    generate_graph,
    shortest_path,
    traffic_equilibrium,
)

g = generate_graph(25, seed=7)
print(f"graph: {g.n} nodes, {len(g.edges)} directed edges")

degrees = np.array([len(g.out_edges[v]) for v in range(g.n)])
print(f"out-degree: min {degrees.min()}  mean {degrees.mean():.2f}  max {degrees.max()}")

lengths = np.array([a.length_m for a in g.nodes])
speeds = np.array([a.speed_mps for a in g.nodes])
print(f"segment lengths: {lengths.min():.0f}..{lengths.max():.0f} m")
print(f"speed limits in use: {sorted({float(s) for s in speeds})} m/s")

# every edge u -> v is priced by the time to traverse the *destination*
# segment, so a node's base cost is length / speed
base_time = lengths / speeds
print(f"free-flow traversal times: {base_time.min():.1f}..{base_time.max():.1f} s")

# all-pairs minimum travel times, plus the z-scored copy the planner eats
dd = dense_distance(g)
print(f"\nall-pairs travel time D: shape {dd.D.shape}, "
      f"diameter {dd.D.max():.0f} s ({dd.D.max() / 3600:.2f} h)")
print(f"z-scored D: mean {dd.A.mean():+.3f}, std {dd.A.std():.3f}")

free_weights = g.base_edge_weights()
route = shortest_path(g, free_weights, 0, g.n - 1)
print(f"shortest 0 -> {g.n - 1}: {route} ({dd.D[0, g.n - 1]:.0f} s)")

# the hidden congestion is a damped fixed point of a flow balance:
# free capacity pours onto successor segments until demand settles
rho, converged = traffic_equilibrium(g, seed=7)
print(f"\ncongestion solved: converged={converged}, "
      f"rho in [{rho.min():.2f}, {rho.max():.2f}], mean {rho.mean():.2f}")

factors = np.array([congestion_factor(r) for r in rho])
print(f"travel-time multipliers: {factors.min():.2f}..{factors.max():.2f} "
      f"(jams are capped at 4x)")

worst = int(np.argmax(factors))
print(f"worst segment is node {worst}: rho={rho[worst]:.2f}, "
      f"{base_time[worst]:.0f} s free-flow -> {base_time[worst] * factors[worst]:.0f} s congested")

# price the same trip under traffic: the weight of edge (u, v) scales
# with the congestion of its destination segment v
jam_weights = np.array([base_time[v] * factors[v] for _, v in g.edges])
dd_jam = dense_distance(g, jam_weights)
trip_free = dd.D[0, g.n - 1]
trip_jam = dd_jam.D[0, g.n - 1]
print(f"\ntrip 0 -> {g.n - 1}: {trip_free:.0f} s free-flow, "
      f"{trip_jam:.0f} s in traffic (+{100 * (trip_jam / trip_free - 1):.0f}%)")
detour = shortest_path(g, jam_weights, 0, g.n - 1)
if detour != route:
    print(f"traffic reroutes the trip: {detour}")
else:
    print("the free-flow route survives the traffic")

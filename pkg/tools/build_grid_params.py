#!/usr/bin/env python3
"""Build the packaged 3-machine grid parameter file.

Starts from the standard published WSCC 9-bus test-case data (100 MVA base),
solves the AC power flow, attaches classical-model generator internal nodes
behind transient reactances, folds loads in as constant admittances, and
Kron-reduces to the 3 internal nodes. The same reduction is repeated for each
outage scenario (single line trips and partial load losses). Everything the
runtime simulator needs is written to src/gridssl/data/wscc9.json; the
reduction itself never runs at simulation time.

Usage: python tools/build_grid_params.py [--out PATH] [--load-loss 0.4]
"""

from __future__ import annotations

import argparse
import json
import math
from pathlib import Path

import numpy as np
from scipy.optimize import root

OMEGA_S = 2.0 * math.pi * 60.0

# Bus data: loads (P, Q) in pu.
N_BUS = 9
LOADS = {4: (1.25, 0.50), 5: (0.90, 0.30), 7: (1.00, 0.35)}  # 0-based bus index
# Generation schedule: bus index -> (P, V setpoint); bus 0 is the slack at V=1.04.
PV = {1: (1.63, 1.025), 2: (0.85, 1.025)}
SLACK_V = 1.04

# Branches: (from, to, R, X, total line charging B), 0-based bus indices.
BRANCHES = [
    (0, 3, 0.0, 0.0576, 0.0),     # step-up transformer G1
    (1, 6, 0.0, 0.0625, 0.0),     # step-up transformer G2
    (2, 8, 0.0, 0.0586, 0.0),     # step-up transformer G3
    (3, 4, 0.010, 0.085, 0.176),
    (3, 5, 0.017, 0.092, 0.158),
    (4, 6, 0.032, 0.161, 0.306),
    (5, 8, 0.039, 0.170, 0.358),
    (6, 7, 0.0085, 0.072, 0.149),
    (7, 8, 0.0119, 0.1008, 0.209),
]

# Machine constants on the 100 MVA system base.
H = np.array([23.64, 6.4, 3.01])          # inertia, s
XDP = np.array([0.0608, 0.1198, 0.1813])  # transient reactance, pu
# Damping in pu power per pu speed deviation; includes a governor-droop-like
# contribution so post-event frequency offsets settle inside a short window.
D_PU = np.array([20.0, 16.0, 12.0])


def build_ybus(branches, load_admittance=None):
    y = np.zeros((N_BUS, N_BUS), dtype=complex)
    for f, t, r, x, b in branches:
        ys = 1.0 / complex(r, x)
        y[f, f] += ys + 0.5j * b
        y[t, t] += ys + 0.5j * b
        y[f, t] -= ys
        y[t, f] -= ys
    if load_admittance:
        for bus, yl in load_admittance.items():
            y[bus, bus] += yl
    return y


def solve_power_flow():
    """Newton solve via scipy root; returns complex bus voltages."""
    ybus = build_ybus(BRANCHES)
    p_spec = np.zeros(N_BUS)
    q_spec = np.zeros(N_BUS)
    for bus, (p, q) in LOADS.items():
        p_spec[bus] -= p
        q_spec[bus] -= q
    for bus, (p, _v) in PV.items():
        p_spec[bus] += p
    pq_buses = [b for b in range(N_BUS) if b != 0 and b not in PV]

    def unpack(x):
        theta = np.zeros(N_BUS)
        vmag = np.empty(N_BUS)
        vmag[0] = SLACK_V
        for bus, (_p, v) in PV.items():
            vmag[bus] = v
        theta[1:] = x[: N_BUS - 1]
        for i, bus in enumerate(pq_buses):
            vmag[bus] = x[N_BUS - 1 + i]
        return vmag * np.exp(1j * theta)

    def mismatch(x):
        v = unpack(x)
        s = v * np.conj(ybus @ v)
        dp = [s[b].real - p_spec[b] for b in range(1, N_BUS)]
        dq = [s[b].imag - q_spec[b] for b in pq_buses]
        return np.array(dp + dq)

    x0 = np.concatenate([np.zeros(N_BUS - 1), np.ones(len(pq_buses))])
    sol = root(mismatch, x0, method="hybr", tol=1e-13)
    if not sol.success or np.max(np.abs(mismatch(sol.x))) > 1e-10:
        raise RuntimeError(f"power flow failed: {sol.message}")
    return unpack(sol.x), ybus


def kron_reduce(branches, load_admittance, e_internal):
    """Reduce the machine-augmented network to the 3 internal nodes."""
    n_gen = 3
    gen_bus = [0, 1, 2]
    y_gen = 1.0 / (1j * XDP)
    n = n_gen + N_BUS
    y = np.zeros((n, n), dtype=complex)
    y[n_gen:, n_gen:] = build_ybus(branches, load_admittance)
    for i in range(n_gen):
        t = n_gen + gen_bus[i]
        y[i, i] += y_gen[i]
        y[t, t] += y_gen[i]
        y[i, t] -= y_gen[i]
        y[t, i] -= y_gen[i]
    y_gg = y[:n_gen, :n_gen]
    y_gb = y[:n_gen, n_gen:]
    y_bb = y[n_gen:, n_gen:]
    y_red = y_gg - y_gb @ np.linalg.solve(y_bb, y_gb.T)
    return y_red


def electrical_power(g, b, e_mag, delta):
    """Injected power at each internal node for the reduced model."""
    n = len(e_mag)
    p = np.empty(n)
    for i in range(n):
        acc = e_mag[i] ** 2 * g[i, i]
        for j in range(n):
            if j == i:
                continue
            pij = e_mag[i] * e_mag[j] * math.hypot(g[i, j], b[i, j])
            phi = math.atan2(g[i, j], b[i, j])
            acc += pij * math.sin(delta[i] - delta[j] + phi)
        p[i] = acc
    return p


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "src/gridssl/data/wscc9.json"))
    ap.add_argument("--load-loss", type=float, default=0.4, help="fraction of load admittance dropped in load-loss scenarios")
    args = ap.parse_args()

    v, _ = solve_power_flow()
    print("power flow |V|:", np.round(np.abs(v), 4))
    print("power flow angle (deg):", np.round(np.degrees(np.angle(v)), 3))

    # Internal EMFs behind transient reactance from the solved flow.
    s_gen = (v * np.conj(build_ybus(BRANCHES) @ v))[:3]
    for bus, (p, q) in LOADS.items():
        if bus < 3:
            s_gen[bus] += complex(p, q)
    i_gen = np.conj(s_gen / v[:3])
    e = v[:3] + 1j * XDP * i_gen
    e_mag = np.abs(e)
    delta0 = np.angle(e)
    print("E:", np.round(e_mag, 4), "delta0 (deg):", np.round(np.degrees(delta0), 3))

    load_y = {bus: complex(p, -q) / abs(v[bus]) ** 2 for bus, (p, q) in LOADS.items()}

    y_base = kron_reduce(BRANCHES, load_y, e)
    g_base, b_base = y_base.real, y_base.imag
    p_m = electrical_power(g_base, b_base, e_mag, delta0)
    print("P_m:", np.round(p_m, 4))

    base = {
        "n_gen": 3,
        "M": (2.0 * H / OMEGA_S).tolist(),
        "D": (D_PU / OMEGA_S).tolist(),
        "E_mag": e_mag.tolist(),
        "P_m": p_m.tolist(),
        "G": g_base.tolist(),
        "B": b_base.tolist(),
    }

    scenarios = []
    line_trips = [(3, 4), (3, 5), (4, 6), (5, 8), (6, 7), (7, 8)]
    for cid, (f, t) in enumerate(line_trips):
        kept = [br for br in BRANCHES if not (br[0] == f and br[1] == t)]
        if len(kept) != len(BRANCHES) - 1:
            raise RuntimeError(f"line ({f},{t}) not found")
        y_red = kron_reduce(kept, load_y, e)
        scenarios.append(
            {
                "class_id": cid,
                "description": f"trip of line {f + 1}-{t + 1}",
                "G": y_red.real.tolist(),
                "B": y_red.imag.tolist(),
                "P_m": p_m.tolist(),
            }
        )
    for k, bus in enumerate(sorted(LOADS)):
        scaled = dict(load_y)
        scaled[bus] = load_y[bus] * (1.0 - args.load_loss)
        y_red = kron_reduce(BRANCHES, scaled, e)
        scenarios.append(
            {
                "class_id": len(line_trips) + k,
                "description": f"loss of {args.load_loss:.0%} of load at bus {bus + 1}",
                "G": y_red.real.tolist(),
                "B": y_red.imag.tolist(),
                "P_m": p_m.tolist(),
            }
        )

    out = {
        "format": "gridssl grid parameters v1",
        "notes": (
            "Kron-reduced 3-machine equivalent of the WSCC 9-bus test case, "
            "loads folded in as constant admittances at the solved operating point. "
            "Units: per unit on 100 MVA; angles rad; M = 2H/omega_s and D in pu "
            "power per rad/s so that M*domega/dt and D*omega are per-unit powers "
            "with omega the speed deviation in rad/s. theta0 is the equilibrium "
            "internal angle vector; P_m is computed from the reduced base network "
            "at theta0 so (theta0, omega=0) is an exact equilibrium."
        ),
        "omega_s": OMEGA_S,
        "base": base,
        "theta0": delta0.tolist(),
        "scenarios": scenarios,
    }
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as fh:
        json.dump(out, fh, indent=1)
        fh.write("\n")
    print(f"wrote {out_path} ({len(scenarios)} scenarios)")

    # Verify the stored equilibrium against the stored reduced model.
    resid = p_m - electrical_power(g_base, b_base, e_mag, delta0)
    print("equilibrium residual:", np.max(np.abs(resid)))


if __name__ == "__main__":
    main()

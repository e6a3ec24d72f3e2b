"""Domain-knowledge constraints evaluated on speed-trace windows.

Three constraint kinds over a window of per-generator speed deviations and a
9-entry physical parameter estimate z = [p_1 p_2 p_3, P_12 P_13 P_23,
phi_12 phi_13 phi_23] (effective powers, pairwise coupling magnitudes,
pairwise phase offsets):

  swing_residual   mean squared residual of the rotor dynamics,
                   r_i = M_i domega_i + D_i omega_i - p_i
                         + sum_{j!=i} P_ij sin(theta_i - theta_j + phi_ij),
                   with domega by central differences and theta rebuilt from
                   omega by trapezoidal integration
  freq_sync        max_{i,j,t>settle} |omega_i - omega_j|
  phase_cohesive   max_{i,j,t} |theta_i - theta_j| on the rebuilt angles

Terms combine through an AND/OR tree of hinges h_i = max(0, g_i - c_i)
(AND = sum, OR = min); the penalty is gamma * ||combined vector||_norm with
the batch expectation taken before the hinge by default.

Angle reconstruction starts from KnownParams.theta_start (zeros when the true
window-start angles are unknown, as during training; exact self-consistency
against a simulated trace requires the true values, since a shared per-pair
phi cannot absorb an antisymmetric initial-angle offset).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkit import Matrix

Z_DIM = 9
# Unordered machine pairs behind z entries 3..5 (couplings) and 6..8 (phases).
PAIRS = ((0, 1), (0, 2), (1, 2))
TERM_KINDS = ("swing_residual", "freq_sync", "phase_cohesive")
DEFAULT_SYNC_SETTLE_FRAC = 0.4


@dataclass
class KnownParams:
    """Per-machine constants that are available rather than estimated."""

    M: np.ndarray
    D: np.ndarray
    dt: float
    theta_start: np.ndarray | None = None

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=np.float64)
        self.D = np.asarray(self.D, dtype=np.float64)
        if np.any(self.M <= 0):
            raise ValueError("require M > 0")
        if self.theta_start is not None:
            self.theta_start = np.asarray(self.theta_start, dtype=np.float64)


@dataclass
class ConstraintTerm:
    kind: str
    bound: float

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.bound < 0:
            raise ValueError("bounds must be >= 0")


@dataclass
class ConstraintSpec:
    """Constraint set plus its penalty shape.

    `tree` is a list of root nodes; each node is ["term", i], ["and", ...]
    or ["or", ...]. Root nodes form the vector the norm is taken over.
    """

    terms: list[ConstraintTerm]
    tree: list = field(default_factory=list)
    gamma: float = 0.1
    norm: str = "l2"
    per_sample: bool = False
    sync_settle: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.norm not in ("l1", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if not self.tree:
            self.tree = [["term", i] for i in range(len(self.terms))]
        for node in self.tree:
            _check_node(node, len(self.terms))

    def to_dict(self) -> dict:
        return {
            "terms": [{"kind": t.kind, "bound": t.bound} for t in self.terms],
            "tree": self.tree,
            "gamma": self.gamma,
            "norm": self.norm,
            "per_sample": self.per_sample,
            "sync_settle": self.sync_settle,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConstraintSpec":
        return cls(
            terms=[ConstraintTerm(t["kind"], t["bound"]) for t in d["terms"]],
            tree=d.get("tree") or [],
            gamma=d.get("gamma", 0.1),
            norm=d.get("norm", "l2"),
            per_sample=d.get("per_sample", False),
            sync_settle=d.get("sync_settle", 0),
        )


def _check_node(node, n_terms):
    if not isinstance(node, (list, tuple)) or not node:
        raise ValueError(f"malformed combinator node: {node!r}")
    op = node[0]
    if op == "term":
        if len(node) != 2 or not isinstance(node[1], int) or not 0 <= node[1] < n_terms:
            raise ValueError(f"malformed term node: {node!r}")
    elif op in ("and", "or"):
        if len(node) < 2:
            raise ValueError(f"{op} node needs children: {node!r}")
        for child in node[1:]:
            _check_node(child, n_terms)
    else:
        raise ValueError(f"unknown combinator {op!r}")


def default_constraint_spec(
    c_swing: float = 1e-2,
    c_sync: float = 1.0,
    c_phase: float = 1.0,
    gamma: float = 0.1,
    norm: str = "l2",
    sync_settle: int = 24,
    per_sample: bool = False,
) -> ConstraintSpec:
    """Swing residual alongside the AND of the two stability predicates."""
    return ConstraintSpec(
        terms=[
            ConstraintTerm("swing_residual", c_swing),
            ConstraintTerm("freq_sync", c_sync),
            ConstraintTerm("phase_cohesive", c_phase),
        ],
        tree=[["term", 0], ["and", ["term", 1], ["term", 2]]],
        gamma=gamma,
        norm=norm,
        sync_settle=sync_settle,
        per_sample=per_sample,
    )


def _as_windows(traces) -> np.ndarray:
    """Accept (T, 3) or (B, T, 3); return (B, T, 3)."""
    w = np.asarray(traces, dtype=np.float64)
    if w.ndim == 2:
        w = w[None]
    if w.ndim != 3 or w.shape[2] != 3:
        raise ValueError(f"expected windows shaped (B, T, 3), got {w.shape}")
    return w


def reconstruct_theta(windows: np.ndarray, known: KnownParams) -> np.ndarray:
    """Trapezoidal integration of omega; anchored at known.theta_start or 0."""
    w = _as_windows(windows)
    theta = np.empty_like(w)
    start = known.theta_start if known.theta_start is not None else np.zeros(3)
    theta[:, 0, :] = start
    increments = 0.5 * known.dt * (w[:, 1:, :] + w[:, :-1, :])
    theta[:, 1:, :] = start + np.cumsum(increments, axis=1)
    return theta


def _residual_fields(windows: np.ndarray, z_hat: np.ndarray, known: KnownParams):
    """Interior-time residuals r (B, T-2, 3) plus the angle-difference tables
    needed for the analytic gradient."""
    w = _as_windows(windows)
    b, t, _ = w.shape
    if t < 3:
        raise ValueError("window too short: need at least 3 samples for central differences")
    z = np.asarray(z_hat, dtype=np.float64).reshape(b, Z_DIM)
    theta = reconstruct_theta(w, known)
    omega_dot = (w[:, 2:, :] - w[:, :-2, :]) / (2.0 * known.dt)
    omega_in = w[:, 1:-1, :]
    theta_in = theta[:, 1:-1, :]

    p_eff = z[:, 0:3]
    p_pair = z[:, 3:6]
    phi = z[:, 6:9]
    # sin/cos of (theta_a - theta_b + phi_q) per pair q = (a, b)
    args = np.empty((b, t - 2, 3))
    for q, (a, bb) in enumerate(PAIRS):
        args[:, :, q] = theta_in[:, :, a] - theta_in[:, :, bb] + phi[:, q][:, None]
    sin_fwd = np.sin(args)
    # pair q seen from its second machine: sin(theta_b - theta_a + phi_q)
    args_rev = np.empty_like(args)
    for q, (a, bb) in enumerate(PAIRS):
        args_rev[:, :, q] = theta_in[:, :, bb] - theta_in[:, :, a] + phi[:, q][:, None]
    sin_rev = np.sin(args_rev)

    coupling = np.zeros((b, t - 2, 3))
    for q, (a, bb) in enumerate(PAIRS):
        coupling[:, :, a] += p_pair[:, q][:, None] * sin_fwd[:, :, q]
        coupling[:, :, bb] += p_pair[:, q][:, None] * sin_rev[:, :, q]

    r = known.M[None, None, :] * omega_dot + known.D[None, None, :] * omega_in - p_eff[:, None, :] + coupling
    return r, sin_fwd, sin_rev, np.cos(args), np.cos(args_rev), p_pair


def swing_residual_batch(windows, z_hat, known: KnownParams) -> np.ndarray:
    """Mean over interior times and machines of r^2, per sample."""
    r, *_ = _residual_fields(windows, z_hat, known)
    return (r**2).mean(axis=(1, 2))


def swing_residual_grad_batch(windows, z_hat, known: KnownParams) -> tuple[np.ndarray, np.ndarray]:
    """(residuals (B,), d residual / d z (B, 9)) with the sin/cos chain rule."""
    r, sin_fwd, sin_rev, cos_fwd, cos_rev, p_pair = _residual_fields(windows, z_hat, known)
    b, ti, g = r.shape
    scale = 2.0 / (ti * g)
    grad = np.empty((b, Z_DIM))
    grad[:, 0:3] = -scale * r.sum(axis=1)
    for q, (a, bb) in enumerate(PAIRS):
        grad[:, 3 + q] = scale * (r[:, :, a] * sin_fwd[:, :, q] + r[:, :, bb] * sin_rev[:, :, q]).sum(axis=1)
        grad[:, 6 + q] = scale * (
            p_pair[:, q] * (r[:, :, a] * cos_fwd[:, :, q] + r[:, :, bb] * cos_rev[:, :, q]).sum(axis=1)
        )
    return (r**2).mean(axis=(1, 2)), grad


def swing_residual(trace_window, z_hat, known: KnownParams) -> float:
    """Single-sample convenience form of swing_residual_batch."""
    return float(swing_residual_batch(trace_window, z_hat, known)[0])


def freq_sync(trace_window, settle: int = 0) -> float:
    """Worst pairwise speed disagreement after the settling offset."""
    w = _as_windows(trace_window)[0]
    if w.shape[0] == 0:
        raise ValueError("empty window")
    tail = w[min(settle, w.shape[0] - 1) :]
    worst = 0.0
    for a, b in PAIRS:
        worst = max(worst, float(np.max(np.abs(tail[:, a] - tail[:, b]))))
    return worst


def phase_cohesive(trace_window, known: KnownParams) -> float:
    """Worst pairwise angle spread over the whole window (rebuilt angles)."""
    theta = reconstruct_theta(trace_window, known)[0]
    worst = 0.0
    for a, b in PAIRS:
        worst = max(worst, float(np.max(np.abs(theta[:, a] - theta[:, b]))))
    return worst


def true_param_vector(model) -> np.ndarray:
    """Map a GridModel into the z layout (exact when the residual is evaluated
    with theta_start set to the true window-start angles)."""
    p_pair_full, phi_full = model.coupling()
    p_eff = model.P_m - model.E_mag**2 * np.diag(model.G)
    z = np.empty(Z_DIM)
    z[0:3] = p_eff
    for q, (a, b) in enumerate(PAIRS):
        z[3 + q] = p_pair_full[a, b]
        z[6 + q] = phi_full[a, b]
    return z


def _term_samples(spec: ConstraintSpec, z_hat, windows, known: KnownParams, with_grad: bool):
    """Per-sample raw term values (n_terms, B); swing gradient if requested."""
    w = _as_windows(windows)
    b = w.shape[0]
    values = np.zeros((len(spec.terms), b))
    swing_grad = None
    theta = None
    for i, term in enumerate(spec.terms):
        if term.kind == "swing_residual":
            if with_grad:
                res, swing_grad = swing_residual_grad_batch(w, z_hat, known)
            else:
                res = swing_residual_batch(w, z_hat, known)
            values[i] = res
        elif term.kind == "freq_sync":
            tail = w[:, min(spec.sync_settle, w.shape[1] - 1) :, :]
            diffs = [np.abs(tail[:, :, a] - tail[:, :, bb]).max(axis=1) for a, bb in PAIRS]
            values[i] = np.max(diffs, axis=0)
        else:  # phase_cohesive
            if theta is None:
                theta = reconstruct_theta(w, known)
            diffs = [np.abs(theta[:, :, a] - theta[:, :, bb]).max(axis=1) for a, bb in PAIRS]
            values[i] = np.max(diffs, axis=0)
    return values, swing_grad


def _eval_node(node, hinges, hinge_grads):
    """Evaluate one combinator node on hinge columns.

    hinges: (n_terms, K). Returns (value (K,), d value / d raw g (n_terms, K)).
    """
    op = node[0]
    if op == "term":
        i = node[1]
        grad = np.zeros_like(hinges)
        grad[i] = hinge_grads[i]
        return hinges[i], grad
    child_vals, child_grads = zip(*(_eval_node(c, hinges, hinge_grads) for c in node[1:]))
    stacked = np.stack(child_vals)  # (n_children, K)
    if op == "and":
        return stacked.sum(axis=0), sum(child_grads)
    # or: min over children, subgradient from the first minimizing child
    pick = np.argmin(stacked, axis=0)
    val = stacked[pick, np.arange(stacked.shape[1])]
    grad = np.zeros_like(child_grads[0])
    for ci, cg in enumerate(child_grads):
        sel = pick == ci
        grad[:, sel] = cg[:, sel]
    return val, grad


def _penalty_from_raw(spec: ConstraintSpec, raw: np.ndarray):
    """Penalty scalar and d penalty / d raw term values.

    raw: (n_terms, K) where K is 1 (batch-expectation mode) or B (per-sample).
    The total is the mean over columns of gamma * ||root vector||_norm.
    """
    bounds = np.array([t.bound for t in spec.terms])
    hinges = np.maximum(0.0, raw - bounds[:, None])
    hinge_grads = (raw > bounds[:, None]).astype(np.float64)
    vals, grads = zip(*(_eval_node(node, hinges, hinge_grads) for node in spec.tree))
    v = np.stack(vals)  # (R, K)
    jac = np.stack(grads)  # (R, n_terms, K)
    k = v.shape[1]
    if spec.norm == "l2":
        norms = np.sqrt((v**2).sum(axis=0))
        safe = np.where(norms > 0.0, norms, 1.0)
        dnorm_dv = np.where(norms[None, :] > 0.0, v / safe[None, :], 0.0)
    else:
        norms = np.abs(v).sum(axis=0)
        dnorm_dv = np.sign(v)
    total = spec.gamma * norms.mean()
    draw = spec.gamma / k * np.einsum("rk,rik->ik", dnorm_dv, jac)
    return float(total), draw


def penalty(spec: ConstraintSpec, values) -> float:
    """Penalty of already-aggregated per-term values (one float per term)."""
    raw = np.asarray(values, dtype=np.float64).reshape(len(spec.terms), 1)
    total, _ = _penalty_from_raw(spec, raw)
    return total


def penalty_batch(spec: ConstraintSpec, z_hat, windows, known: KnownParams):
    """(penalty, d penalty / d z_hat (B, 9), per-term aggregates).

    Batch mode averages each raw term over the batch before the hinge,
    matching a bound on the batch expectation; per_sample mode hinges each
    sample and averages the resulting penalties.
    """
    values, swing_grad = _term_samples(spec, z_hat, windows, known, with_grad=True)
    b = values.shape[1]
    if spec.per_sample:
        total, draw = _penalty_from_raw(spec, values)
        dz = np.zeros((b, Z_DIM))
        if swing_grad is not None:
            for i, term in enumerate(spec.terms):
                if term.kind == "swing_residual":
                    dz += draw[i][:, None] * swing_grad
        agg = values.mean(axis=1)
    else:
        agg = values.mean(axis=1)
        total, draw = _penalty_from_raw(spec, agg[:, None])
        dz = np.zeros((b, Z_DIM))
        if swing_grad is not None:
            for i, term in enumerate(spec.terms):
                if term.kind == "swing_residual":
                    dz += (draw[i, 0] / b) * swing_grad
    return total, dz, agg


def penalty_grad(spec: ConstraintSpec, z_hat, traces, known: KnownParams) -> Matrix:
    """Analytic d penalty / d z_hat for a batch of windows."""
    _, dz, _ = penalty_batch(spec, z_hat, traces, known)
    return dz

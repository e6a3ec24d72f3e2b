"""Kron-reduced 3-machine transient simulator and dataset generation.

The rotor dynamics are the classical second-order model

    dtheta_i/dt = omega_i
    M_i domega_i/dt = -D_i omega_i + P_mi - |E_i|^2 G_ii
                      - sum_{j != i} P_ij sin(theta_i - theta_j + phi_ij)

with P_ij = |E_i||E_j| sqrt(G_ij^2 + B_ij^2) and phi_ij = arctan(G_ij/B_ij),
omega the speed deviation from synchronous in rad/s. Grid constants and the
per-scenario post-outage reductions are precomputed offline (tools/
build_grid_params.py) and shipped as a JSON parameter file; this module never
performs a network reduction.

A dataset sample is one simulated outage: integrate the base model, swap in
the scenario's post-outage model at the event time, downsample the post-event
speed traces to `window` points per generator, and flatten generator-major.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .numkit import Matrix, Rng

OMEGA_LIMIT = 10.0 * 2.0 * np.pi * 60.0  # divergence guard, rad/s

# Child-stream tags for the dataset master seed.
TAG_SPLIT = 101
TAG_MASK = 102
TAG_SAMPLE_BASE = 1 << 32


class InstabilityError(RuntimeError):
    """Simulated speeds left the physically plausible envelope."""


@dataclass
class GridModel:
    M: np.ndarray  # inertia, per machine
    D: np.ndarray  # damping, per machine
    E_mag: np.ndarray  # internal voltage magnitudes
    P_m: np.ndarray  # mechanical power inputs
    G: np.ndarray  # reduced conductance, n_gen x n_gen
    B: np.ndarray  # reduced susceptance, n_gen x n_gen

    def __post_init__(self):
        for name in ("M", "D", "E_mag", "P_m", "G", "B"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.n_gen
        if self.G.shape != (n, n) or self.B.shape != (n, n):
            raise ValueError("G/B must be n_gen x n_gen")
        if not (np.allclose(self.G, self.G.T) and np.allclose(self.B, self.B.T)):
            raise ValueError("G/B must be symmetric")
        if np.any(self.M <= 0) or np.any(self.D < 0) or np.any(self.E_mag <= 0):
            raise ValueError("require M > 0, D >= 0, E_mag > 0")

    @property
    def n_gen(self) -> int:
        return self.M.shape[0]

    def coupling(self) -> tuple[np.ndarray, np.ndarray]:
        """(P_ij, phi_ij) with zeroed diagonals."""
        p = self.E_mag[:, None] * self.E_mag[None, :] * np.hypot(self.G, self.B)
        phi = np.arctan2(self.G, self.B)
        np.fill_diagonal(p, 0.0)
        np.fill_diagonal(phi, 0.0)
        return p, phi

    def with_pm(self, p_m: np.ndarray) -> "GridModel":
        return GridModel(M=self.M, D=self.D, E_mag=self.E_mag, P_m=p_m, G=self.G, B=self.B)


@dataclass
class OutageScenario:
    class_id: int
    post_outage_model: GridModel
    event_time: float
    description: str


@dataclass
class Trace:
    dt: float
    omega: Matrix  # (steps + 1) x n_gen
    theta: Matrix


@dataclass
class GridCase:
    base: GridModel
    theta0: np.ndarray  # equilibrium internal angles of the base model
    scenarios: list[OutageScenario]


@dataclass
class Dataset:
    features: Matrix  # samples x (3 * window)
    labels: np.ndarray  # int vector, -1 marks unlabeled
    class_count: int
    manifest: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    def labels_true(self) -> np.ndarray:
        return np.asarray(self.manifest["labels_true"], dtype=np.int64)

    def val_indices(self) -> np.ndarray:
        return np.asarray(self.manifest["val_indices"], dtype=np.int64)

    def train_indices(self) -> np.ndarray:
        mask = np.ones(self.n_samples, dtype=bool)
        mask[self.val_indices()] = False
        return np.nonzero(mask)[0]

    def labeled_indices(self) -> np.ndarray:
        return np.asarray(self.manifest["labeled_indices"], dtype=np.int64)


def default_grid_path() -> Path:
    return Path(resources.files("gridssl").joinpath("data/wscc9.json"))


def load_case(path=None, event_time: float = 0.5) -> GridCase:
    """Load the packaged (or a custom) grid parameter file."""
    path = Path(path) if path is not None else default_grid_path()
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read grid parameter file {path}: {exc}") from exc
    if raw.get("format") != "gridssl grid parameters v1":
        raise ValueError(f"unrecognized grid parameter file format in {path}")
    b = raw["base"]
    base = GridModel(M=b["M"], D=b["D"], E_mag=b["E_mag"], P_m=b["P_m"], G=b["G"], B=b["B"])
    scenarios = []
    for sc in raw["scenarios"]:
        post = GridModel(M=b["M"], D=b["D"], E_mag=b["E_mag"], P_m=sc["P_m"], G=sc["G"], B=sc["B"])
        scenarios.append(
            OutageScenario(
                class_id=int(sc["class_id"]),
                post_outage_model=post,
                event_time=event_time,
                description=sc["description"],
            )
        )
    ids = sorted(s.class_id for s in scenarios)
    if ids != list(range(len(scenarios))):
        raise ValueError("scenario class_ids must be 0..C-1 exactly once")
    scenarios.sort(key=lambda s: s.class_id)
    return GridCase(base=base, theta0=np.asarray(raw["theta0"], dtype=np.float64), scenarios=scenarios)


def build_wscc_scenarios(path=None, event_time: float = 0.5) -> tuple[GridModel, list[OutageScenario]]:
    case = load_case(path, event_time)
    return case.base, case.scenarios


def swing_rhs(model: GridModel, theta: np.ndarray, omega: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Time derivatives (dtheta, domega) at one state."""
    theta = np.asarray(theta, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    p, phi = model.coupling()
    coup = (p * np.sin(theta[:, None] - theta[None, :] + phi)).sum(axis=1)
    domega = (-model.D * omega + model.P_m - model.E_mag**2 * np.diag(model.G) - coup) / model.M
    return omega.copy(), domega


def _rhs_batch(theta, omega, m_vec, d_vec, p_eff, p_pair, phi):
    """Batched RHS: theta/omega/p_eff are (n, g); p_eff = P_m - E^2 G_ii."""
    coup = (p_pair[None, :, :] * np.sin(theta[:, :, None] - theta[:, None, :] + phi[None, :, :])).sum(axis=2)
    return omega, (-d_vec * omega + p_eff - coup) / m_vec


def _model_tables(model: GridModel, p_m: np.ndarray):
    """Per-sample constant tables for a batch sharing one topology."""
    p_pair, phi = model.coupling()
    p_eff = p_m - (model.E_mag**2 * np.diag(model.G))[None, :]
    return model.M[None, :], model.D[None, :], p_eff, p_pair, phi


def _integrate_batch(model, theta0, omega0, dt, steps, event_step=None, post_model=None, p_m=None, post_p_m=None):
    """Classic RK4 over a batch of independent samples.

    States are (n, g). The model swaps to `post_model` for steps starting at
    t >= event_step * dt. Raises InstabilityError if any speed exceeds the
    guard limit.
    """
    n, g = theta0.shape
    if p_m is None:
        p_m = np.broadcast_to(model.P_m, (n, g))
    pre = _model_tables(model, p_m)
    post = None
    if event_step is not None:
        post = _model_tables(post_model, post_p_m if post_p_m is not None else p_m)
    omega_hist = np.empty((steps + 1, n, g))
    theta_hist = np.empty((steps + 1, n, g))
    theta, omega = theta0.copy(), omega0.copy()
    theta_hist[0], omega_hist[0] = theta, omega
    half = 0.5 * dt
    for k in range(steps):
        tab = post if (post is not None and k >= event_step) else pre
        k1t, k1w = _rhs_batch(theta, omega, *tab)
        k2t, k2w = _rhs_batch(theta + half * k1t, omega + half * k1w, *tab)
        k3t, k3w = _rhs_batch(theta + half * k2t, omega + half * k2w, *tab)
        k4t, k4w = _rhs_batch(theta + dt * k3t, omega + dt * k3w, *tab)
        theta = theta + (dt / 6.0) * (k1t + 2.0 * k2t + 2.0 * k3t + k4t)
        omega = omega + (dt / 6.0) * (k1w + 2.0 * k2w + 2.0 * k3w + k4w)
        if np.max(np.abs(omega)) > OMEGA_LIMIT:
            raise InstabilityError(f"|omega| exceeded {OMEGA_LIMIT:.1f} rad/s at step {k + 1}")
        theta_hist[k + 1], omega_hist[k + 1] = theta, omega
    return theta_hist, omega_hist


def integrate_rk4(model: GridModel, theta0, omega0, dt: float, steps: int, event=None) -> Trace:
    """Integrate one sample; `event` is an optional (time, post_model) pair."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    theta0 = np.asarray(theta0, dtype=np.float64).reshape(1, -1)
    omega0 = np.asarray(omega0, dtype=np.float64).reshape(1, -1)
    event_step, post_model = None, None
    if event is not None:
        event_time, post_model = event
        event_step = int(round(event_time / dt))
    theta_hist, omega_hist = _integrate_batch(
        model, theta0, omega0, dt, steps, event_step=event_step, post_model=post_model
    )
    trace = Trace(dt=dt, omega=omega_hist[:, 0, :], theta=theta_hist[:, 0, :])
    if not (np.all(np.isfinite(trace.omega)) and np.all(np.isfinite(trace.theta))):
        raise InstabilityError("non-finite state in trace")
    return trace


def generate_dataset(
    case: GridCase,
    rng: Rng,
    samples_per_class: int = 800,
    window: int = 60,
    label_fraction: float = 0.0125,
    val_fraction: float = 0.2,
    dt: float = 1.0 / 600.0,
    duration: float = 3.0,
    pm_jitter: float = 0.05,
) -> Dataset:
    """Simulate every scenario and assemble the labeled/unlabeled dataset.

    Each sample perturbs the mechanical powers by a per-machine uniform factor
    in [1-pm_jitter, 1+pm_jitter] drawn from the sample's own child stream, so
    a parallel map over samples would reproduce the sequential output exactly.
    Features are the post-event speed deviations, downsampled to `window`
    points per generator and flattened generator-major.

    The validation subset (stratified, never label-masked) is fixed at
    generation time; the labeled subset of size round(label_fraction * total)
    is drawn stratified from the remaining training rows.
    """
    if not 0.0 < label_fraction <= 1.0:
        raise ValueError("label_fraction must be in (0, 1]")
    c = len(case.scenarios)
    steps = int(round(duration / dt))
    event_time = case.scenarios[0].event_time
    event_step = int(round(event_time / dt))
    if any(s.event_time != event_time for s in case.scenarios):
        raise ValueError("all scenarios must share one event time")
    stride = (steps - event_step) // window
    if stride < 1:
        raise ValueError("window too long for the post-event trace")
    ds_idx = event_step + stride * np.arange(1, window + 1)

    n_total = c * samples_per_class
    features = np.empty((n_total, 3 * window))
    labels_true = np.repeat(np.arange(c), samples_per_class)
    base_pm = case.base.P_m
    for sc in case.scenarios:
        lo = sc.class_id * samples_per_class
        factors = np.stack(
            [
                rng.child(TAG_SAMPLE_BASE + lo + k).uniform(1, 3, 1.0 - pm_jitter, 1.0 + pm_jitter)[0]
                for k in range(samples_per_class)
            ]
        )
        theta0 = np.broadcast_to(case.theta0, (samples_per_class, 3)).copy()
        omega0 = np.zeros((samples_per_class, 3))
        try:
            _, omega_hist = _integrate_batch(
                case.base,
                theta0,
                omega0,
                dt,
                steps,
                event_step=event_step,
                post_model=sc.post_outage_model,
                p_m=base_pm[None, :] * factors,
                post_p_m=sc.post_outage_model.P_m[None, :] * factors,
            )
        except InstabilityError as exc:
            raise InstabilityError(f"class {sc.class_id} ({sc.description}): {exc}") from exc
        # (window, n, 3) -> per sample generator-major flatten
        win = omega_hist[ds_idx]
        features[lo : lo + samples_per_class] = win.transpose(1, 2, 0).reshape(samples_per_class, 3 * window)

    split_rng = rng.child(TAG_SPLIT)
    val_idx = _stratified_subset(labels_true, c, val_fraction, split_rng)
    mask_rng = rng.child(TAG_MASK)
    n_labeled = min(int(round(label_fraction * n_total)), n_total - len(val_idx))
    labeled_idx = _stratified_labels(labels_true, c, n_labeled, val_idx, mask_rng)
    labels = _apply_mask(labels_true, labeled_idx, val_idx)

    from .constraints import DEFAULT_SYNC_SETTLE_FRAC, freq_sync, phase_cohesive, KnownParams

    feature_dt = stride * dt
    known = KnownParams(M=case.base.M, D=case.base.D, dt=feature_dt)
    settle = int(DEFAULT_SYNC_SETTLE_FRAC * window)
    sync_vals = np.array([freq_sync(w, settle=settle) for w in features.reshape(n_total, 3, window).transpose(0, 2, 1)])
    phase_vals = np.array(
        [phase_cohesive(w, known) for w in features.reshape(n_total, 3, window).transpose(0, 2, 1)]
    )

    manifest = {
        "format": "gridssl dataset v1",
        "class_count": c,
        "samples_per_class": samples_per_class,
        "n_samples": n_total,
        "window": window,
        "dt": dt,
        "duration": duration,
        "event_time": event_time,
        "stride": int(stride),
        "feature_dt": feature_dt,
        "flatten": "generator-major",
        "pm_jitter": pm_jitter,
        "seed": rng.seed,
        "M": case.base.M.tolist(),
        "D": case.base.D.tolist(),
        "label_fraction": label_fraction,
        "n_labeled": int(len(labeled_idx)),
        "labeled_indices": [int(i) for i in labeled_idx],
        "val_fraction": val_fraction,
        "val_indices": [int(i) for i in val_idx],
        "labels_true": [int(v) for v in labels_true],
        "feature_std": float(features.std()),
        "sync_settle": settle,
        "c_sync": float(1.5 * np.percentile(sync_vals, 95)),
        "c_phase": float(1.5 * np.percentile(phase_vals, 95)),
        "scenarios": [s.description for s in case.scenarios],
    }
    return Dataset(features=features, labels=labels, class_count=c, manifest=manifest)


def _stratified_subset(labels_true, c, fraction, rng: Rng) -> np.ndarray:
    picks = []
    for cls in range(c):
        idx = np.nonzero(labels_true == cls)[0]
        n_pick = int(round(fraction * len(idx)))
        perm = rng.permutation(len(idx))
        picks.append(idx[perm[:n_pick]])
    return np.sort(np.concatenate(picks))


def _stratified_labels(labels_true, c, n_labeled, val_idx, rng: Rng) -> np.ndarray:
    val_mask = np.zeros(len(labels_true), dtype=bool)
    val_mask[val_idx] = True
    per_class = np.full(c, n_labeled // c)
    per_class[: n_labeled % c] += 1
    picks = []
    for cls in range(c):
        idx = np.nonzero((labels_true == cls) & ~val_mask)[0]
        if per_class[cls] > len(idx):
            raise ValueError(f"class {cls} has too few train samples for the requested labels")
        perm = rng.permutation(len(idx))
        picks.append(idx[perm[: per_class[cls]]])
    return np.sort(np.concatenate(picks))


def _apply_mask(labels_true, labeled_idx, val_idx) -> np.ndarray:
    labels = np.full(len(labels_true), -1, dtype=np.int64)
    labels[labeled_idx] = labels_true[labeled_idx]
    labels[val_idx] = labels_true[val_idx]
    return labels


def relabel(dataset: Dataset, label_fraction: float, rng: Rng) -> Dataset:
    """New label mask at a different fraction; features are shared, not copied."""
    if not 0.0 < label_fraction <= 1.0:
        raise ValueError("label_fraction must be in (0, 1]")
    labels_true = dataset.labels_true()
    val_idx = dataset.val_indices()
    c = dataset.class_count
    n_total = dataset.n_samples
    n_labeled = min(int(round(label_fraction * n_total)), n_total - len(val_idx))
    labeled_idx = _stratified_labels(labels_true, c, n_labeled, val_idx, rng)
    manifest = dict(dataset.manifest)
    manifest.update(
        {
            "label_fraction": label_fraction,
            "n_labeled": int(len(labeled_idx)),
            "labeled_indices": [int(i) for i in labeled_idx],
            "mask_seed": [rng.seed, rng.tag],
        }
    )
    return Dataset(
        features=dataset.features,
        labels=_apply_mask(labels_true, labeled_idx, val_idx),
        class_count=c,
        manifest=manifest,
    )


def augment(batch: Matrix, rng: Rng, noise_std: float, max_shift: int) -> Matrix:
    """Additive Gaussian noise plus a circular time shift per generator channel.

    Draw order is fixed: shifts first, then the noise field.
    """
    n, d = batch.shape
    w = d // 3
    if 3 * w != d:
        raise ValueError("feature width must be 3 * window")
    x = batch.reshape(n, 3, w)
    if max_shift > 0:
        shifts = rng.integers(-max_shift, max_shift + 1, size=n * 3).reshape(n, 3)
        idx = (np.arange(w)[None, None, :] - shifts[:, :, None]) % w
        x = np.take_along_axis(x, idx, axis=2)
    noise = rng.gaussian(n, d, 0.0, 1.0) * noise_std
    return x.reshape(n, d) + noise


def write_dataset(dataset: Dataset, outdir, fmt: str = "bin") -> Path:
    """Write features (+ manifest.json) under outdir; returns the manifest path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = dict(dataset.manifest)
    if fmt == "bin":
        feat_file = "features.f64"
        (outdir / feat_file).write_bytes(np.ascontiguousarray(dataset.features, dtype="<f8").tobytes())
    elif fmt == "csv":
        feat_file = "features.csv"
        np.savetxt(outdir / feat_file, dataset.features, delimiter=",", fmt="%.17g")
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    manifest["features_file"] = feat_file
    manifest["features_format"] = "f64le" if fmt == "bin" else "csv"
    path = outdir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return path


def read_dataset(path) -> Dataset:
    """Load a dataset from its manifest path (or the directory holding it)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "gridssl dataset v1":
        raise ValueError(f"unrecognized dataset manifest {path}")
    n = manifest["n_samples"]
    d = 3 * manifest["window"]
    feat_path = path.parent / manifest["features_file"]
    if manifest["features_format"] == "f64le":
        features = np.frombuffer(feat_path.read_bytes(), dtype="<f8").reshape(n, d).copy()
    else:
        features = np.loadtxt(feat_path, delimiter=",").reshape(n, d)
    labels_true = np.asarray(manifest["labels_true"], dtype=np.int64)
    labels = _apply_mask(
        labels_true,
        np.asarray(manifest["labeled_indices"], dtype=np.int64),
        np.asarray(manifest["val_indices"], dtype=np.int64),
    )
    return Dataset(features=features, labels=labels, class_count=manifest["class_count"], manifest=manifest)

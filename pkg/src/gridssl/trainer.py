"""Training loops, evaluation, and the label-fraction sweep harness.

One unified per-batch schedule covers every mode (per-batch alternation of
the EM-style steps):

  step 3   k_e updates of the latent encoder/decoder on the constraint loss,
           student frozen                                  (hybrid only)
  step 4   k_m updates of the student's hidden layers on the constraint
           loss, latent pair frozen                        (hybrid only)
  step 5   one update of the whole student on the supervised loss plus the
           ramped unlabeled loss (consistency or pseudo-label, teacher
           forward perturbed by dropout/dropconnect)
  step 6   EMA update of the teacher

Modes: hybrid (3-6), baseline_meanteacher / baseline_pseudolabel (5-6, so a
hybrid run with k_e = k_m = 0 is the mean-teacher baseline bit for bit),
supervised_only (step 5 without the unlabeled term). Every random draw comes
from a purpose-keyed child stream of the run seed, so modes that skip a step
consume nothing from the streams other modes rely on.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import constraints as cn
from .gridsim import Dataset, augment, relabel
from .hybrid import (
    HybridModel,
    LossBreakdown,
    RampUp,
    build_hybrid,
    loss_consistency,
    loss_constraint,
    loss_supervised,
    baseline_loss,
    ramp,
)
from .neural import (
    Network,
    NoiseMasks,
    Optimizer,
    backward,
    backward_latent,
    dropconnect_mask,
    dropout_mask,
    ema_update,
    forward,
    optimizer_step,
)
from .numkit import Rng

MODES = ("hybrid", "baseline_meanteacher", "baseline_pseudolabel", "supervised_only")

# Purpose-keyed child streams of the run seed.
TAG_SHUFFLE = 1
TAG_AUGMENT = 2
TAG_NOISE = 3
TAG_RELABEL = 4


class TrainingDivergence(RuntimeError):
    """Loss became non-finite; carries a diagnostic state dump."""

    def __init__(self, message: str, state: dict):
        super().__init__(f"{message}; state: {state}")
        self.state = state


@dataclass
class TrainConfig:
    mode: str = "hybrid"
    epochs: int = 150
    batch_size: int = 128
    # fixed labeled sub-batch (labels cycle with reshuffling, i.e. oversampled);
    # None mixes labeled/unlabeled by plain shuffling
    labeled_per_batch: int | None = 8
    seed: int = 0
    # optimizer
    optimizer: str = "adam"
    learning_rate: float = 3e-4
    lr_decay: float = 1.0  # per-epoch multiplicative decay, applied to every role
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    # unlabeled-loss ramp and the EMA teacher
    alpha_max: float = 1.0
    ramp_epochs: int = 30
    ramp_shape: str = "sigmoid_exp"
    ema_beta: float = 0.99
    ema_step6_literal: bool = False
    # constraint loss; step 4 gets its own gradient-proportional optimizer so
    # the latent pull cannot outmuscle the supervised signal (Adam's
    # scale-free steps collapse the representation here)
    l3_optimizer: str = "adam"
    l3_learning_rate: float = 1e-5
    l3_momentum: float = 0.0
    gamma: float = 3.0
    sigma: float = 1.0
    c_swing: float = 1e-2
    c_sync: float | None = None  # None: calibrated bound from the dataset manifest
    c_phase: float | None = None
    constraint_norm: str = "l2"
    per_sample_constraints: bool = False
    k_e: int = 1
    k_m: int = 1
    # teacher perturbation
    dropout: float = 0.1
    dropconnect: float = 0.05
    # student-input augmentation
    augment_noise: float = 0.05  # fraction of the dataset feature std
    augment_shift: int = 2
    # architecture
    hidden: tuple = (128, 64, 32)
    enc_hidden: tuple = (64, 32)
    z_dim: int = 9
    # stopping rule: fixed budget plus plateau detection
    early_stop_window: int = 20
    early_stop_tol: float | None = 1e-4
    # bookkeeping for sweeps
    label_fraction: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if isinstance(self.hidden, list):
            self.hidden = tuple(self.hidden)
        if isinstance(self.enc_hidden, list):
            self.enc_hidden = tuple(self.enc_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["enc_hidden"] = list(self.enc_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochMetrics:
    epoch: int
    losses: LossBreakdown
    accuracy: float
    error_rate: float
    teacher_accuracy: float
    wall_time: float

    def to_dict(self) -> dict:
        d = {"epoch": self.epoch}
        d.update(asdict(self.losses))
        d.update(
            {
                "accuracy": self.accuracy,
                "error_rate": self.error_rate,
                "teacher_accuracy": self.teacher_accuracy,
                "wall_time": self.wall_time,
            }
        )
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpochMetrics":
        return cls(
            epoch=d["epoch"],
            losses=LossBreakdown(d["l1"], d["l2"], d["l3_kl"], d["l3_penalty"], d["total"]),
            accuracy=d["accuracy"],
            error_rate=d["error_rate"],
            teacher_accuracy=d["teacher_accuracy"],
            wall_time=d["wall_time"],
        )


def _build_constraint_spec(cfg: TrainConfig, manifest: dict) -> cn.ConstraintSpec:
    c_sync = cfg.c_sync if cfg.c_sync is not None else manifest.get("c_sync", 1.0)
    c_phase = cfg.c_phase if cfg.c_phase is not None else manifest.get("c_phase", 1.0)
    return cn.default_constraint_spec(
        c_swing=cfg.c_swing,
        c_sync=c_sync,
        c_phase=c_phase,
        gamma=cfg.gamma,
        norm=cfg.constraint_norm,
        sync_settle=manifest.get("sync_settle", 0),
        per_sample=cfg.per_sample_constraints,
    )


def _epoch_batches(train_idx, labels, cfg: TrainConfig, shuffle_rng: Rng) -> list:
    """Batch index arrays for one epoch.

    With labeled_per_batch set, every batch carries that many labeled rows
    (labels cycle through reshuffled permutations, so small label sets are
    oversampled) and the rest is a pass over the unlabeled rows. Otherwise one
    shuffled pass over all training rows.
    """
    lab = train_idx[labels[train_idx] >= 0]
    unl = train_idx[labels[train_idx] < 0]
    k = cfg.labeled_per_batch
    if not k or len(lab) == 0 or len(unl) == 0 or k >= cfg.batch_size:
        perm = shuffle_rng.permutation(len(train_idx))
        return [
            train_idx[perm[s : s + cfg.batch_size]] for s in range(0, len(train_idx), cfg.batch_size)
        ]
    k = min(k, len(lab))
    u = cfg.batch_size - k
    perm_u = shuffle_rng.permutation(len(unl))
    n_batches = (len(unl) + u - 1) // u
    lab_order: list[int] = []
    while len(lab_order) < n_batches * k:
        lab_order.extend(lab[shuffle_rng.permutation(len(lab))].tolist())
    batches = []
    for b in range(n_batches):
        chunk = unl[perm_u[b * u : (b + 1) * u]]
        lab_chunk = np.asarray(lab_order[b * k : (b + 1) * k], dtype=np.int64)
        batches.append(np.concatenate([chunk, lab_chunk]))
    return batches


def _teacher_masks(net: Network, batch: int, rng: Rng, p_drop: float, p_dc: float) -> NoiseMasks:
    """Draw order is fixed: dropconnect on the first layer, then one dropout
    mask per hidden activation."""
    dc = dropconnect_mask(rng, net.layers[0].weights.shape, p_dc) if p_dc > 0 else None
    drops: list = []
    for layer in net.layers[:-1]:
        drops.append(dropout_mask(rng, (batch, layer.out_width), p_drop) if p_drop > 0 else None)
    return NoiseMasks(dropout=drops, dropconnect=dc)


def _make_optimizer(cfg: TrainConfig) -> Optimizer:
    return Optimizer(
        kind=cfg.optimizer,
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        beta1=cfg.adam_beta1,
        beta2=cfg.adam_beta2,
        epsilon=cfg.adam_epsilon,
    )


def accuracy_of(net: Network, features, labels) -> float:
    probs = forward(net, features).output
    return float((probs.argmax(axis=1) == labels).mean())


def evaluate(net: Network, data: Dataset, split: str = "val") -> dict:
    """Inference-mode metrics on a dataset split (true labels, never masked)."""
    if split == "val":
        idx = data.val_indices()
    elif split == "train":
        idx = data.train_indices()
    elif split == "all":
        idx = np.arange(data.n_samples)
    else:
        raise ValueError(f"unknown split {split!r}")
    labels = data.labels_true()[idx]
    acc = accuracy_of(net, data.features[idx], labels)
    return {"split": split, "n": int(len(idx)), "accuracy": acc, "error_rate": 1.0 - acc}


def train(data: Dataset, cfg: TrainConfig, model: HybridModel | None = None, step_log: list | None = None):
    """Run one training job; returns (model, per-epoch metrics)."""
    if cfg.mode not in MODES:
        raise ValueError(f"unknown mode {cfg.mode!r}")
    manifest = data.manifest
    window = manifest["window"]
    rng = Rng(cfg.seed)
    if model is None:
        model = build_hybrid(
            data.features.shape[1],
            data.class_count,
            rng,
            hidden=cfg.hidden,
            enc_hidden=cfg.enc_hidden,
            z_dim=cfg.z_dim,
        )
    primary, secondary = model.primary, model.secondary
    encoder, decoder = model.latent_encoder, model.latent_decoder

    train_idx = data.train_indices()
    val_idx = data.val_indices()
    if np.intersect1d(train_idx, val_idx).size:
        raise AssertionError("train/validation splits overlap")
    labels = data.labels
    if not np.any(labels[train_idx] >= 0):
        raise ValueError("dataset has no labeled training samples")
    val_features = data.features[val_idx]
    val_labels = data.labels_true()[val_idx]

    known = cn.KnownParams(M=np.asarray(manifest["M"]), D=np.asarray(manifest["D"]), dt=manifest["feature_dt"])
    spec = _build_constraint_spec(cfg, manifest)
    ramp_up = RampUp(alpha_max=cfg.alpha_max, ramp_epochs=cfg.ramp_epochs, shape=cfg.ramp_shape)
    noise_abs = cfg.augment_noise * manifest.get("feature_std", 1.0)

    shuffle_rng = rng.child(TAG_SHUFFLE)
    augment_rng = rng.child(TAG_AUGMENT)
    noise_rng = rng.child(TAG_NOISE)

    opt_p = _make_optimizer(cfg)
    opt_p_l3 = Optimizer(
        kind=cfg.l3_optimizer,
        learning_rate=cfg.l3_learning_rate,
        momentum=cfg.l3_momentum,
        beta1=cfg.adam_beta1,
        beta2=cfg.adam_beta2,
        epsilon=cfg.adam_epsilon,
    )
    opt_enc = _make_optimizer(cfg)
    opt_dec = _make_optimizer(cfg)

    hybrid_steps = cfg.mode == "hybrid"
    uses_teacher_loss = cfg.mode in ("hybrid", "baseline_meanteacher", "baseline_pseudolabel")

    metrics: list[EpochMetrics] = []
    errors: list[float] = []
    n_train = len(train_idx)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        alpha_t = ramp(ramp_up, epoch)
        if cfg.lr_decay != 1.0:
            decay = cfg.lr_decay**epoch
            opt_p.learning_rate = cfg.learning_rate * decay
            opt_enc.learning_rate = cfg.learning_rate * decay
            opt_dec.learning_rate = cfg.learning_rate * decay
            opt_p_l3.learning_rate = cfg.l3_learning_rate * decay
        sums = np.zeros(4)
        n_batches = 0
        for idx in _epoch_batches(train_idx, labels, cfg, shuffle_rng):
            x = data.features[idx]
            y = labels[idx]
            labeled_mask = y >= 0
            b = len(idx)
            l3_kl = l3_pen = 0.0
            primary_at_start = primary  # theta_p^t for the literal step-6 rule

            if hybrid_steps and (cfg.k_e > 0 or cfg.k_m > 0):
                windows = x.reshape(b, 3, window).transpose(0, 2, 1)
                if cfg.k_e > 0:
                    latent = forward(primary, x).latent
                    for _ in range(cfg.k_e):
                        l3_kl, l3_pen, enc_g, dec_g, _ = loss_constraint(
                            latent, encoder, decoder, spec, windows, known, cfg.sigma
                        )
                        encoder = optimizer_step(opt_enc, encoder, enc_g)
                        decoder = optimizer_step(opt_dec, decoder, dec_g)
                        if step_log is not None:
                            step_log.append(("step3", epoch, n_batches))
                for _ in range(cfg.k_m):
                    trace_p = forward(primary, x)
                    l3_kl, l3_pen, _, _, grad_latent = loss_constraint(
                        trace_p.latent, encoder, decoder, spec, windows, known, cfg.sigma
                    )
                    pgrads = backward_latent(primary, trace_p, grad_latent)
                    primary = optimizer_step(opt_p_l3, primary, pgrads)
                    if step_log is not None:
                        step_log.append(("step4", epoch, n_batches))

            x_student = augment(x, augment_rng, noise_abs, cfg.augment_shift)
            trace_s = forward(primary, x_student)
            probs_s = trace_s.output
            l1, grad_logits = loss_supervised(probs_s, y, labeled_mask)
            l2 = 0.0
            if uses_teacher_loss and alpha_t > 0.0:
                masks = _teacher_masks(secondary, b, noise_rng, cfg.dropout, cfg.dropconnect)
                probs_t = forward(secondary, x, masks).output
                if cfg.mode == "baseline_pseudolabel":
                    unl = ~labeled_mask
                    pseudo = probs_t[unl].argmax(axis=1)
                    l2, _, grad_unl = baseline_loss(
                        np.zeros((0, probs_s.shape[1])), np.zeros(0, dtype=np.int64), probs_s[unl], pseudo, alpha_t
                    )
                    grad_logits = grad_logits.copy()
                    grad_logits[unl] += grad_unl
                else:
                    l2, grad_cons = loss_consistency(probs_s, probs_t, alpha_t)
                    grad_logits = grad_logits + grad_cons
            pgrads = backward(primary, trace_s, grad_logits)
            primary = optimizer_step(opt_p, primary, pgrads)
            if step_log is not None:
                step_log.append(("step5", epoch, n_batches))

            if cfg.ema_step6_literal:
                secondary = ema_update(primary, primary_at_start, cfg.ema_beta)
            else:
                secondary = ema_update(secondary, primary, cfg.ema_beta)
            if step_log is not None:
                step_log.append(("step6", epoch, n_batches))

            total = l1 + l2 + l3_kl + l3_pen
            if not np.isfinite(total):
                raise TrainingDivergence(
                    "non-finite loss",
                    {
                        "epoch": epoch,
                        "batch": n_batches,
                        "l1": l1,
                        "l2": l2,
                        "l3_kl": l3_kl,
                        "l3_penalty": l3_pen,
                        "mode": cfg.mode,
                        "seed": cfg.seed,
                    },
                )
            sums += (l1, l2, l3_kl, l3_pen)
            n_batches += 1

        means = sums / max(n_batches, 1)
        acc = accuracy_of(primary, val_features, val_labels)
        teacher_acc = accuracy_of(secondary, val_features, val_labels)
        metrics.append(
            EpochMetrics(
                epoch=epoch,
                losses=LossBreakdown.make(*means),
                accuracy=acc,
                error_rate=1.0 - acc,
                teacher_accuracy=teacher_acc,
                wall_time=time.perf_counter() - t0,
            )
        )
        errors.append(1.0 - acc)
        w = cfg.early_stop_window
        if cfg.early_stop_tol is not None and len(errors) > w:
            recent = errors[-(w + 1) :]
            if max(recent) - min(recent) < cfg.early_stop_tol:
                break

    return (
        HybridModel(primary=primary, secondary=secondary, latent_encoder=encoder, latent_decoder=decoder),
        metrics,
    )


def train_hybrid(model: HybridModel | None, data: Dataset, cfg: TrainConfig, rng: Rng | None = None):
    if cfg.mode != "hybrid":
        cfg = replace(cfg, mode="hybrid")
    if rng is not None:
        cfg = replace(cfg, seed=rng.seed)
    return train(data, cfg, model=model)


def train_baseline(model: HybridModel | None, data: Dataset, cfg: TrainConfig, rng: Rng | None = None):
    if cfg.mode not in ("baseline_meanteacher", "baseline_pseudolabel", "supervised_only"):
        raise ValueError(f"train_baseline expects a baseline mode, got {cfg.mode!r}")
    if rng is not None:
        cfg = replace(cfg, seed=rng.seed)
    return train(data, cfg, model=model)


def mean_std(values) -> tuple[float, float]:
    """Population mean and std, the convention for all reported tables."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


# --- sweep -----------------------------------------------------------------

_WORKER_DATASET: Dataset | None = None


def _worker_init(dataset: Dataset):
    global _WORKER_DATASET
    _WORKER_DATASET = dataset


def _run_cell(args):
    mode, fraction, seed, cfg_dict = args
    cfg = TrainConfig.from_dict(cfg_dict)
    cfg = replace(cfg, mode=mode, seed=seed, label_fraction=fraction)
    ds = relabel(_WORKER_DATASET, fraction, Rng(seed, TAG_RELABEL))
    _, metrics = train(ds, cfg)
    return (mode, fraction, seed), [m.to_dict() for m in metrics]


def sweep(
    dataset: Dataset,
    base_cfg: TrainConfig,
    label_fractions=(0.0125, 0.025, 0.05, 0.10),
    seeds=(0, 1, 2, 3, 4),
    modes=("baseline_meanteacher", "hybrid"),
    jobs: int = 1,
    outdir=None,
):
    """Mode x fraction x seed grid; returns (rows, per-cell metrics dicts).

    Cells are independent apart from the shared immutable dataset, so they may
    run in parallel; results are keyed and assembled in a fixed order, making
    the output independent of scheduling. The label mask for a (fraction,
    seed) pair is shared by every mode so methods compete on identical data.
    """
    cells = [(m, f, s, base_cfg.to_dict()) for m in modes for f in label_fractions for s in seeds]
    results: dict = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init, initargs=(dataset,)) as pool:
            for key, metrics in pool.map(_run_cell, cells):
                results[key] = metrics
    else:
        _worker_init(dataset)
        for cell in cells:
            key, metrics = _run_cell(cell)
            results[key] = metrics

    rows = []
    for mode in modes:
        for fraction in label_fractions:
            finals = [results[(mode, fraction, s)][-1]["accuracy"] for s in seeds]
            mean, std = mean_std(finals)
            rows.append(
                {
                    "mode": mode,
                    "label_fraction": fraction,
                    "n_labels": int(round(fraction * dataset.n_samples)),
                    "mean_acc": mean,
                    "std_acc": std,
                    "seeds": ";".join(str(s) for s in seeds),
                }
            )
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        for (mode, fraction, seed), metrics in results.items():
            path = outdir / f"metrics_{mode}_{fraction:g}_{seed}.jsonl"
            write_metrics(path, metrics, header={"mode": mode, "label_fraction": fraction, "seed": seed})
        write_results_csv(outdir / "results.csv", rows)
    return rows, results


def write_results_csv(path, rows) -> None:
    lines = ["mode,label_fraction,n_labels,mean_acc,std_acc,seeds"]
    for r in rows:
        lines.append(
            f"{r['mode']},{r['label_fraction']!r},{r['n_labels']},{r['mean_acc']!r},{r['std_acc']!r},{r['seeds']}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_metrics(path, metrics, header: dict | None = None) -> None:
    """One JSON object per line; optional leading run-header object."""
    rows = []
    if header is not None:
        rows.append(json.dumps({"run": header}))
    for m in metrics:
        rows.append(json.dumps(m.to_dict() if isinstance(m, EpochMetrics) else m))
    Path(path).write_text("\n".join(rows) + "\n")


def read_metrics(path) -> tuple[dict, list[dict]]:
    header: dict = {}
    records: list[dict] = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if "run" in obj and "epoch" not in obj:
            header = obj["run"]
        else:
            records.append(obj)
    return header, records

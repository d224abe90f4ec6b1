"""Loss, splits, the optimization loop, and the evaluation protocols."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .datagen import Dataset, DeformationSample
from .errors import ConfigError, DivergenceError, EmptyInputError, SplitError
from .geometry import PointCloud, rotate_z
from .model import (
    ModelConfig,
    forward_batch,
    make_batch,
    model_forward,
)
from .phantom import (
    ProbeCondition,
    TissueVolume,
    condition_features,
    point_features,
    rotate_volume_quarter_turns,
)
from .tensor import AdamState, Tape, adam_step

__all__ = [
    "LossConfig",
    "SplitPlan",
    "EvalReport",
    "weighted_displacement_loss",
    "total_loss",
    "displacement_weights",
    "make_splits",
    "make_folds",
    "train",
    "TrainResult",
    "evaluate",
    "rotate_sample",
]


@dataclass
class LossConfig:
    alpha: float = 1000.0      # displacement weight
    beta: float = 100.0        # force weight
    eps: float = 1e-8          # guard in the weight normalizer

    def validate(self):
        if self.alpha <= 0 or self.beta <= 0 or self.eps <= 0:
            raise ConfigError("loss weights and eps must be positive")


# --------------------------------------------------------------------- #
# losses


def displacement_weights(x: np.ndarray, y: np.ndarray,
                         eps: float = 1e-8) -> np.ndarray:
    """Per-point weights: gt displacement magnitude over the sample max."""
    mag = np.linalg.norm(y - x, axis=1)
    return mag / (mag.max() + eps)


def weighted_displacement_loss(tape: Tape, x: np.ndarray, y: np.ndarray,
                               yhat, eps: float = 1e-8):
    """Mean weighted Euclidean distance between predicted and gt points.

    Differentiable w.r.t. yhat (a tape tensor); x and y are constants.
    With all-zero ground truth displacement the weights vanish and the loss
    is ~0 regardless of the prediction (degenerate by construction).
    """
    if y.shape[0] == 0:
        raise EmptyInputError("empty batch in displacement loss")
    w = displacement_weights(x, y, eps).astype(yhat.data.dtype)
    dist = tape.l2norm_rows(tape.add_const(yhat, -np.asarray(
        y, dtype=yhat.data.dtype)))
    return tape.mean_all(tape.mul_const(dist, w))


def total_loss(tape: Tape, loss_disp, loss_force, cfg: LossConfig):
    """alpha * L_d + beta * L_f."""
    return tape.add(tape.scale(loss_disp, cfg.alpha),
                    tape.scale(loss_force, cfg.beta))


def _batch_losses(tape: Tape, samples, params, model_cfg: ModelConfig,
                  loss_cfg: LossConfig, train_mode: bool, seed: int):
    """Forward a batch of equal-N samples and build (L_d, L_f, total)."""
    dt = model_cfg.np_dtype
    batch = make_batch([(s.cloud, s.probe) for s in samples], dtype=dt)
    _, yhat, f = forward_batch(tape, params, model_cfg, batch,
                               train=train_mode, seed=seed)
    x0 = np.concatenate([s.cloud.positions for s in samples])
    y = np.concatenate([s.deformed for s in samples])
    w = np.concatenate([
        displacement_weights(s.cloud.positions, s.deformed, loss_cfg.eps)
        for s in samples]).astype(dt)
    dist = tape.l2norm_rows(tape.add_const(yhat, -y.astype(dt)))
    loss_disp = tape.mean_all(tape.mul_const(dist, w))
    forces = np.array([[s.force] for s in samples], dtype=dt)
    df = tape.add_const(f, -forces)
    loss_force = tape.mean_all(tape.mul(df, df))
    return loss_disp, loss_force, total_loss(tape, loss_disp, loss_force,
                                             loss_cfg)


# --------------------------------------------------------------------- #
# splits


@dataclass
class SplitPlan:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def sets(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def _locations(samples) -> dict:
    by_loc = {}
    for i, s in enumerate(samples):
        by_loc.setdefault(s.location_id, []).append(i)
    return by_loc


def make_splits(samples, ratios=(7, 2, 1), seed: int = 0) -> SplitPlan:
    """Partition probe locations (never samples) into train/val/test.

    Location counts follow the ratios with the rounding remainder going to
    train; every sample of a location lands in exactly one set.
    """
    by_loc = _locations(samples)
    locs = sorted(by_loc)
    if len(locs) < 3:
        raise SplitError(f"need at least 3 locations, got {len(locs)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(locs))
    total = sum(ratios)
    n_val = int(len(locs) * ratios[1] / total)
    n_test = int(len(locs) * ratios[2] / total)
    if n_val == 0 or n_test == 0:
        raise SplitError("too few locations for the requested ratios")
    val_locs = {locs[i] for i in order[:n_val]}
    test_locs = {locs[i] for i in order[n_val:n_val + n_test]}

    def collect(pred):
        out = []
        for loc, idxs in by_loc.items():
            if pred(loc):
                out.extend(idxs)
        return np.sort(np.array(out, dtype=np.int64))
    return SplitPlan(
        train=collect(lambda l: l not in val_locs and l not in test_locs),
        val=collect(lambda l: l in val_locs),
        test=collect(lambda l: l in test_locs),
    )


def make_folds(samples, fold_count: int = 5, seed: int = 0) -> list:
    """Rotating location folds: each location is the test set exactly once;
    the next group in rotation is validation, the rest train."""
    by_loc = _locations(samples)
    locs = sorted(by_loc)
    if len(locs) < fold_count:
        raise SplitError(f"need >= {fold_count} locations, got {len(locs)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(locs))
    groups = [set() for _ in range(fold_count)]
    for pos, loc_i in enumerate(order):
        groups[pos % fold_count].add(locs[loc_i])
    plans = []
    for f in range(fold_count):
        test_locs = groups[f]
        val_locs = groups[(f + 1) % fold_count]

        def collect(pred):
            out = []
            for loc, idxs in by_loc.items():
                if pred(loc):
                    out.extend(idxs)
            return np.sort(np.array(out, dtype=np.int64))
        plans.append(SplitPlan(
            train=collect(lambda l: l not in test_locs and l not in val_locs),
            val=collect(lambda l: l in val_locs),
            test=collect(lambda l: l in test_locs),
        ))
    return plans


# --------------------------------------------------------------------- #
# training loop


@dataclass
class TrainResult:
    params: dict               # best-validation parameters
    final_params: dict
    log: list
    best_epoch: int
    best_val: float


def _snapshot(params: dict) -> dict:
    from .tensor import Tensor
    return {n: Tensor(p.data.copy(), requires_grad=True)
            for n, p in params.items()}


def _epoch_seed(base: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence(
        [base & (2**63 - 1), epoch, step]).generate_state(1)[0])


def train(samples, params, model_cfg: ModelConfig,
          split: SplitPlan, loss_cfg: LossConfig | None = None,
          epochs: int = 200, batch_size: int = 64, lr: float = 1e-3,
          seed: int = 0, log_path=None, start_epoch: int = 0,
          on_epoch=None) -> TrainResult:
    """Adam training with per-epoch validation and best-checkpoint tracking.

    Deterministic for a fixed seed in single-worker mode: batch order,
    dropout masks and initialization all derive from explicit seeds.
    """
    loss_cfg = loss_cfg or LossConfig()
    loss_cfg.validate()
    model_cfg.validate()
    if len(split.train) == 0 or len(split.val) == 0:
        raise ConfigError("train and val splits must be nonempty")
    n_points = {len(samples[i].cloud) for i in
                np.concatenate([split.train, split.val])}
    if len(n_points) != 1:
        raise ConfigError(f"mixed cloud sizes in one training run: {n_points}")
    state = AdamState(lr=lr)
    log = []
    best_val = np.inf
    best_epoch = -1
    best = _snapshot(params)
    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(start_epoch, start_epoch + epochs):
            t0 = time.perf_counter()
            rng = np.random.default_rng(
                np.random.SeedSequence([seed & (2**63 - 1), epoch]))
            order = rng.permutation(split.train)
            train_tot = train_disp = train_force = 0.0
            batches = 0
            for step, lo in enumerate(range(0, len(order), batch_size)):
                chunk = [samples[i] for i in order[lo:lo + batch_size]]
                tape = Tape()
                ld, lf, tot = _batch_losses(tape, chunk, params, model_cfg,
                                            loss_cfg, True,
                                            _epoch_seed(seed, epoch, step))
                if not np.isfinite(tot.data):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch} step {step}")
                tape.backward(tot)
                adam_step(params, {n: p.grad for n, p in params.items()},
                          state)
                train_tot += float(tot.data)
                train_disp += float(ld.data)
                train_force += float(lf.data)
                batches += 1
            val_tot = val_disp = val_force = 0.0
            vbatches = 0
            for lo in range(0, len(split.val), batch_size):
                chunk = [samples[i] for i in split.val[lo:lo + batch_size]]
                tape = Tape(recording=False)
                ld, lf, tot = _batch_losses(tape, chunk, params, model_cfg,
                                            loss_cfg, False, 0)
                val_tot += float(tot.data)
                val_disp += float(ld.data)
                val_force += float(lf.data)
                vbatches += 1
            record = {
                "epoch": epoch,
                "train_loss": train_tot / max(batches, 1),
                "val_loss": val_tot / max(vbatches, 1),
                "loss_disp": val_disp / max(vbatches, 1),
                "loss_force": val_force / max(vbatches, 1),
                "wall_time_s": time.perf_counter() - t0,
            }
            log.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if record["val_loss"] < best_val:
                best_val = record["val_loss"]
                best_epoch = epoch
                best = _snapshot(params)
            if on_epoch:
                on_epoch(record)
    finally:
        if log_file:
            log_file.close()
    return TrainResult(params=best, final_params=params, log=log,
                       best_epoch=best_epoch, best_val=best_val)


# --------------------------------------------------------------------- #
# evaluation


@dataclass
class EvalReport:
    protocol: str
    n_samples: int
    force_abs_error: tuple      # (mean, std) [N]
    mean_euclidean: tuple       # (mean, std) [mm]
    max_euclidean: tuple        # (mean, std) [mm]
    rel_tip_error_pct: tuple    # (mean, std) [%]
    forward_time_s: tuple       # (mean, std) [s]
    per_angle: dict = field(default_factory=dict)

    COLUMNS = (
        ("Force Absolute Error [N]", "force_abs_error"),
        ("Mean Euclidean Distance [mm]", "mean_euclidean"),
        ("Max Euclidean Distance [mm]", "max_euclidean"),
        ("Mean Relative Tip Error [%]", "rel_tip_error_pct"),
        ("Time [s]", "forward_time_s"),
    )

    def to_dict(self) -> dict:
        d = {"protocol": self.protocol, "n_samples": self.n_samples}
        for title, attr in self.COLUMNS:
            mean, std = getattr(self, attr)
            d[attr] = {"title": title, "mean": mean, "std": std}
        if self.per_angle:
            d["per_angle"] = {str(k): v.to_dict()
                              for k, v in self.per_angle.items()}
        return d

    def to_text(self) -> str:
        lines = [f"protocol: {self.protocol}  (n={self.n_samples})"]
        for title, attr in self.COLUMNS:
            mean, std = getattr(self, attr)
            lines.append(f"  {title:<32} {mean:10.4f} +/- {std:.4f}")
        for angle, rep in self.per_angle.items():
            lines.append(f"-- rotated {angle} deg --")
            lines.append(rep.to_text())
        return "\n".join(lines)


def _metrics_from_predictions(records) -> dict:
    force_err = np.array([r["force_err"] for r in records])
    mean_d = np.array([r["mean_d"] for r in records])
    max_d = np.array([r["max_d"] for r in records])
    tips = np.array([r["tip_pct"] for r in records if r["tip_pct"] is not None])
    times = np.array([r["time"] for r in records])

    def ms(a):
        return (float(a.mean()), float(a.std())) if a.size else (0.0, 0.0)
    return {
        "force_abs_error": ms(force_err),
        "mean_euclidean": ms(mean_d),
        "max_euclidean": ms(max_d),
        "rel_tip_error_pct": ms(tips),
        "forward_time_s": ms(times),
    }


def prediction_metrics(sample: DeformationSample, yhat: np.ndarray,
                       force_pred: float, elapsed: float) -> dict:
    """Unweighted per-sample metrics; the training weights are never used.

    The tip is the rest point nearest to the probe contact point; its
    relative error is the tip prediction error over the gt tip distance.
    """
    y = sample.deformed
    d = np.linalg.norm(yhat - y, axis=1)
    tip = int(np.argmin(np.linalg.norm(
        sample.cloud.positions - sample.probe.c_s[None, :], axis=1)))
    denom = np.linalg.norm(y[tip] - sample.cloud.positions[tip])
    tip_pct = (float(np.linalg.norm(yhat[tip] - y[tip]) / denom * 100.0)
               if denom > 1e-12 else None)
    return {
        "force_err": abs(float(force_pred) - sample.force),
        "mean_d": float(d.mean()),
        "max_d": float(d.max()),
        "tip_pct": tip_pct,
        "time": elapsed,
    }


def _eval_samples(params, cfg, samples) -> list:
    records = []
    for s in samples:
        t0 = time.perf_counter()
        _, yhat, f = model_forward(params, cfg, s.cloud, s.probe)
        records.append(prediction_metrics(s, yhat, f,
                                          time.perf_counter() - t0))
    return records


def rotate_sample(sample: DeformationSample, degrees: float,
                  pivot: np.ndarray, volume: TissueVolume) -> DeformationSample:
    """Physically consistent rotated copy: positions, probe, and gt rotate;
    tissue features are recomputed against the rotated volume."""
    turns = int(round(degrees / 90.0)) % 4
    if not np.isclose(degrees % 90.0, 0.0):
        raise ConfigError("rotated protocol supports 90-degree increments")
    rot_vol = rotate_volume_quarter_turns(volume, turns)
    pos = rotate_z(sample.cloud.positions, degrees, pivot=pivot)
    cloud = PointCloud(positions=pos, features=point_features(rot_vol, pos))
    c_s = rotate_z(sample.probe.c_s, degrees, pivot=pivot)
    c_e = rotate_z(sample.probe.c_e, degrees, pivot=pivot)
    probe = ProbeCondition(c_s=c_s, c_e=c_e,
                           c_h=condition_features(rot_vol, c_s, c_e))
    disp = rotate_z(sample.displacement, degrees, pivot=np.zeros(3))
    return DeformationSample(cloud=cloud, probe=probe, displacement=disp,
                             force=sample.force,
                             location_id=sample.location_id)


def evaluate(params, cfg: ModelConfig, samples, protocol: str = "plain",
             volume: TissueVolume | None = None,
             angles=(90.0, 180.0, 270.0)) -> EvalReport:
    """Evaluation protocols over a sample list.

    plain/cross_resolution: direct evaluation (the cross-resolution pairing
    is the caller's dataset choice). rotated: evaluates each angle against
    the rotated phantom and also aggregates all angles.
    """
    if not samples:
        raise EmptyInputError("evaluate needs at least one sample")
    if protocol in ("plain", "cross_resolution"):
        records = _eval_samples(params, cfg, samples)
        return EvalReport(protocol=protocol, n_samples=len(samples),
                          **_metrics_from_predictions(records))
    if protocol != "rotated":
        raise ConfigError(f"unknown protocol {protocol!r}")
    if volume is None:
        raise ConfigError("rotated protocol needs the tissue volume")
    center = volume.origin + volume.extent / 2.0
    pivot = np.array([center[0], center[1], 0.0])
    all_records = []
    per_angle = {}
    for angle in angles:
        rotated = [rotate_sample(s, angle, pivot, volume) for s in samples]
        records = _eval_samples(params, cfg, rotated)
        all_records.extend(records)
        per_angle[int(angle)] = EvalReport(
            protocol=f"rotated_{int(angle)}", n_samples=len(samples),
            **_metrics_from_predictions(records))
    return EvalReport(protocol="rotated", n_samples=len(all_records),
                      per_angle=per_angle,
                      **_metrics_from_predictions(all_records))

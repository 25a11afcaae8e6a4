"""Loss and metrics, TDD/FDD slicing, the two-stage training loop with
noise injection, reference baselines and sweep evaluation.

RNG stream tags (all keyed under the run seed): 0 model init, 1 batch
shuffling, 2 train noise, 3 dropout, 4 validation noise, 5 evaluation
noise. Every stream also mixes in epoch/step/sample indices, so results
never depend on iteration order or worker count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .channel.dataset import CsiDataset
from .channel.simulate import add_awgn
from .errors import ConfigError, DomainError, TrainingError
from .model import ModelState, forward, reshape_input, restore_output
from .numerics import AdamState, Tape, Tensor, adam_step, ops, stream

TAG_SHUFFLE, TAG_TRAIN_NOISE, TAG_DROPOUT, TAG_VAL_NOISE, TAG_EVAL_NOISE = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule and noise protocol."""

    batch_size: int = 32
    total_epochs: int = 40
    lr_start: float = 1e-3
    n_start: int = 30
    lr_end: float = 1e-4
    n_end: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    snr_range_db: tuple | None = (5.0, 20.0)  # train-time input noise; None = clean
    val_snr_db: float | None = 15.0
    mode: str = "tdd"
    seed: int = 0
    eval_batch: int = 64

    def __post_init__(self):
        if self.n_start + self.n_end != self.total_epochs:
            raise ConfigError(
                f"n_start + n_end must equal total_epochs "
                f"({self.n_start} + {self.n_end} != {self.total_epochs})"
            )
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.mode not in ("tdd", "fdd"):
            raise ConfigError(f"mode must be 'tdd' or 'fdd', got {self.mode!r}")
        if self.snr_range_db is not None and self.snr_range_db[0] > self.snr_range_db[1]:
            raise ConfigError(f"bad SNR range {self.snr_range_db}")

    @staticmethod
    def desk() -> "TrainConfig":
        return TrainConfig()

    @staticmethod
    def paper() -> "TrainConfig":
        return TrainConfig(batch_size=256, total_epochs=300, n_start=200, n_end=100)


# ---------------------------------------------------------------------------
# metrics


def nmse(pred: np.ndarray, truth: np.ndarray) -> float:
    """Error energy over truth energy, real or complex tensors."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    denom = float(np.sum(np.abs(truth) ** 2))
    if denom == 0.0:
        raise DomainError("nmse: reference tensor has zero energy")
    return float(np.sum(np.abs(pred - truth) ** 2) / denom)


def nmse_loss(pred: Tensor, truth: Tensor) -> Tensor:
    """Differentiable NMSE on the real-view representation; identical in
    value to the complex-view metric."""
    denom = float(np.sum(truth.data**2))
    if denom == 0.0:
        raise DomainError("nmse_loss: reference tensor has zero energy")
    diff = ops.sub(pred, truth)
    return ops.mul(ops.sum_(ops.square(diff)), 1.0 / denom)


def error_metrics(pred: np.ndarray, truth: np.ndarray) -> tuple:
    """(RMSE, MAE) over the element-wise complex modulus of the error."""
    err = np.abs(np.asarray(pred) - np.asarray(truth))
    return float(np.sqrt(np.mean(err**2))), float(np.mean(err))


# ---------------------------------------------------------------------------
# dataset slicing


def slice_mode(frames: np.ndarray, mode: str, history_len: int, horizon: int) -> tuple:
    """Split frames [..., T, N_t, K_total] into (input, target).

    TDD predicts the downlink band from its own history; FDD predicts the
    downlink band from the uplink band's history. The lower half of the
    subcarriers is the uplink, the upper half the downlink.
    """
    if mode not in ("tdd", "fdd"):
        raise ConfigError(f"mode must be 'tdd' or 'fdd', got {mode!r}")
    k_total = frames.shape[-1]
    if k_total % 2:
        raise ConfigError(f"k_total must be even, got {k_total}")
    if frames.shape[-3] < history_len + horizon:
        raise ConfigError(
            f"need at least {history_len + horizon} frames, got {frames.shape[-3]}"
        )
    k = k_total // 2
    uplink = frames[..., :k]
    downlink = frames[..., k:]
    past = slice(0, history_len)
    future = slice(history_len, history_len + horizon)
    if mode == "tdd":
        return downlink[..., past, :, :], downlink[..., future, :, :]
    return uplink[..., past, :, :], downlink[..., future, :, :]


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    return cfg.lr_start if epoch < cfg.n_start else cfg.lr_end


# ---------------------------------------------------------------------------
# baselines


def baseline_np(inputs: np.ndarray, horizon: int) -> np.ndarray:
    """No-prediction: repeat the last observed frame for every horizon step.

    In FDD the observed history is the uplink band, so this doubles as the
    cross-band copy baseline.
    """
    last = inputs[..., -1:, :, :]
    reps = [1] * inputs.ndim
    reps[-3] = horizon
    return np.tile(last, reps)


def baseline_linear(inputs: np.ndarray, horizon: int) -> np.ndarray:
    """Linear extrapolation of re/im from the last two frames."""
    if inputs.shape[-3] < 2:
        raise ConfigError("linear baseline needs at least two history frames")
    last = inputs[..., -1:, :, :]
    slope = last - inputs[..., -2:-1, :, :]
    steps = np.arange(1, horizon + 1).reshape([-1] + [1] * 2)
    return last + steps * slope


# ---------------------------------------------------------------------------
# prediction wrappers


def predict_with_model(state: ModelState, inputs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Run the network over complex inputs [S, L, N_t, K] -> [S, P, N_t, K].

    Normalization statistics are global per forward call, so the batch
    size is part of the evaluation protocol (fixed default 64).
    """
    n_t = inputs.shape[2]
    outs = []
    for lo in range(0, inputs.shape[0], batch_size):
        x = Tensor(reshape_input(inputs[lo : lo + batch_size]))
        y = forward(x, state, training=False)
        outs.append(restore_output(y.data, n_t))
    return np.concatenate(outs, axis=0)


def make_predictor(model, horizon: int, batch_size: int = 64):
    """Normalize model-or-callable into `inputs -> predictions`."""
    if isinstance(model, ModelState):
        return lambda inputs: predict_with_model(model, inputs, batch_size)
    if callable(model):
        return lambda inputs: model(inputs, horizon)
    raise ConfigError(f"cannot evaluate object of type {type(model).__name__}")


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsRow:
    condition_value: float
    nmse: float
    rmse: float
    mae: float
    n: int


@dataclass
class MetricsReport:
    axis: str  # 'speed' or 'snr'
    mode: str
    rows: list = field(default_factory=list)

    @property
    def mean_nmse(self) -> float:
        return float(np.mean([r.nmse for r in self.rows]))

    @property
    def mean_rmse(self) -> float:
        return float(np.mean([r.rmse for r in self.rows]))

    @property
    def mean_mae(self) -> float:
        return float(np.mean([r.mae for r in self.rows]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["condition_axis", "condition_value", "mode", "nmse", "rmse", "mae", "n"])
            for r in self.rows:
                w.writerow(
                    [self.axis, f"{r.condition_value:g}", self.mode,
                     f"{r.nmse:.10g}", f"{r.rmse:.10g}", f"{r.mae:.10g}", r.n]
                )


CSV_HEADER = "condition_axis,condition_value,mode,nmse,rmse,mae,n"


# ---------------------------------------------------------------------------
# evaluation


def _noisy_copy(inputs: np.ndarray, snr_db, rng_for) -> np.ndarray:
    """Per-sample AWGN with per-sample streams; None passes through."""
    if snr_db is None:
        return inputs
    out = np.empty_like(inputs)
    for i in range(inputs.shape[0]):
        out[i] = add_awgn(inputs[i], snr_db, rng_for(i))
    return out


def _group_metrics(pred: np.ndarray, truth: np.ndarray) -> tuple:
    """Mean over the group of per-sample NMSE / RMSE / MAE."""
    vals = np.array(
        [(nmse(pred[i], truth[i]), *error_metrics(pred[i], truth[i])) for i in range(len(pred))]
    )
    return tuple(vals.mean(axis=0))


def evaluate(
    model,
    data: CsiDataset,
    axis: str,
    history_len: int,
    horizon: int,
    grid=None,
    mode: str = "tdd",
    eval_snr_db: float | None = 15.0,
    snr_axis_speed_kmh: float = 60.0,
    seed: int = 0,
    batch_size: int = 64,
    workers: int = 1,
) -> MetricsReport:
    """Sweep NMSE/RMSE/MAE over speed groups or SNR conditions.

    speed axis: group test samples by generation speed, fixed input SNR.
    snr axis: fix the speed subset, inject noise at each grid SNR.
    Targets stay clean in both.
    """
    predictor = make_predictor(model, horizon, batch_size)
    inputs, targets = slice_mode(data.frames, mode, history_len, horizon)
    report = MetricsReport(axis=axis, mode=mode)

    if axis == "speed":
        speeds = np.asarray(grid, dtype=float) if grid is not None else np.unique(data.speeds_kmh)
        conditions = []
        for ci, s in enumerate(speeds):
            idx = np.flatnonzero(data.speeds_kmh == s)
            if idx.size == 0:
                raise DomainError(f"no test samples at speed {s} km/h")
            conditions.append((float(s), ci, idx, eval_snr_db))
    elif axis == "snr":
        idx = np.flatnonzero(data.speeds_kmh == snr_axis_speed_kmh)
        if idx.size == 0:
            raise DomainError(
                f"no test samples at the SNR-sweep speed {snr_axis_speed_kmh} km/h "
                f"(available: {np.unique(data.speeds_kmh)})"
            )
        snrs = np.asarray(grid, dtype=float) if grid is not None else np.arange(0.0, 26.0, 5.0)
        conditions = [(float(s), ci, idx, float(s)) for ci, s in enumerate(snrs)]
    else:
        raise ConfigError(f"axis must be 'speed' or 'snr', got {axis!r}")

    def run(cond):
        value, ci, idx, snr_db = cond
        noisy = _noisy_copy(
            inputs[idx], snr_db, lambda i: stream(seed, TAG_EVAL_NOISE, ci, int(idx[i]))
        )
        pred = predictor(noisy)
        m_nmse, m_rmse, m_mae = _group_metrics(pred, targets[idx])
        return MetricsRow(value, m_nmse, m_rmse, m_mae, int(idx.size))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            report.rows = list(pool.map(run, conditions))
    else:
        report.rows = [run(c) for c in conditions]
    return report


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)  # (epoch, lr, train_nmse, val_nmse)
    step_losses: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_nmse: float = math.inf

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "lr", "train_nmse", "val_nmse"])
            for epoch, lr, tr, va in self.epochs:
                w.writerow([epoch, f"{lr:g}", f"{tr:.10g}", "" if va is None else f"{va:.10g}"])


def _val_nmse(state: ModelState, inputs, targets, cfg: TrainConfig, epoch: int) -> float:
    noisy = _noisy_copy(
        inputs, cfg.val_snr_db, lambda i: stream(cfg.seed, TAG_VAL_NOISE, epoch, i)
    )
    pred = predict_with_model(state, noisy, cfg.eval_batch)
    vals = [nmse(pred[i], targets[i]) for i in range(len(pred))]
    return float(np.mean(vals))


def train(
    state: ModelState,
    train_data: CsiDataset,
    val_data: CsiDataset | None,
    cfg: TrainConfig,
    log=None,
) -> tuple:
    """Two-stage Adam training with per-step input noise injection.

    Returns (best_state, history); best = lowest validation NMSE, or the
    final state when no validation split is given. Fully deterministic in
    (seed, config, data).
    """
    mcfg = state.config
    inputs, targets = slice_mode(train_data.frames, cfg.mode, mcfg.history_len, mcfg.horizon)
    if val_data is not None:
        v_inputs, v_targets = slice_mode(val_data.frames, cfg.mode, mcfg.history_len, mcfg.horizon)
    n_samples = inputs.shape[0]
    params = state.parameters()
    names = sorted(params)
    tensors = [params[k] for k in names]
    opt = AdamState(tensors, beta1=cfg.beta1, beta2=cfg.beta2)
    history = TrainHistory()
    best_state = None
    last_grad_norm = math.nan

    for epoch in range(cfg.total_epochs):
        lr = lr_schedule(epoch, cfg)
        order = stream(cfg.seed, TAG_SHUFFLE, epoch).permutation(n_samples)
        epoch_losses = []
        for step, lo in enumerate(range(0, n_samples, cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            noise_rng = stream(cfg.seed, TAG_TRAIN_NOISE, epoch, step)
            batch_in = np.empty_like(inputs[idx])
            for j, si in enumerate(idx):
                snr = None if cfg.snr_range_db is None else noise_rng.uniform(*cfg.snr_range_db)
                batch_in[j] = add_awgn(inputs[si], snr, noise_rng)
            x = Tensor(reshape_input(batch_in))
            y = Tensor(reshape_input(targets[idx]))
            with Tape() as tape:
                pred = forward(
                    x, state, training=True, dropout_rng=stream(cfg.seed, TAG_DROPOUT, epoch, step)
                )
                loss = nmse_loss(pred, y)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} step {step} "
                        f"(lr {lr:g}, last grad norm {last_grad_norm:g})"
                    )
                tape.backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in tensors]
            last_grad_norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            adam_step(tensors, grads, opt, lr)
            for p in tensors:
                p.grad = None
            state.step += 1
            epoch_losses.append(loss_val)
            history.step_losses.append(loss_val)
        train_nmse = float(np.mean(epoch_losses))
        val = None
        if val_data is not None:
            val = _val_nmse(state, v_inputs, v_targets, cfg, epoch)
            if val < history.best_val_nmse:
                history.best_val_nmse = val
                history.best_epoch = epoch
                best_state = state.copy()
        history.epochs.append((epoch, lr, train_nmse, val))
        if log is not None:
            log(f"epoch {epoch:3d}  lr {lr:g}  train {train_nmse:.5f}"
                + (f"  val {val:.5f}" if val is not None else ""))
    if best_state is None:
        best_state = state.copy()
        history.best_epoch = cfg.total_epochs - 1
    return best_state, history

"""End-to-end model: stage-aware LSTM, stage-adaptive convolution, residual
sigmoid head, masked cross-entropy, Adam and checkpointing."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Value
from .data import Batch, Normalizer, PatientSequence, batches, make_batch
from .evaluation import MetricError, auprc, auroc, min_re_p
from .stage_conv import (StageConvParams, StageWindow, bottleneck_size,
                         init_conv_params, stage_module)
from .stage_lstm import (StageCellParams, StageCellState, carry, cell_step,
                         check_dims, init_cell_params)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
VARIANTS = ("stagenet", "lstm")


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class CheckpointError(ValueError):
    """A checkpoint file does not match what the reader expects."""


@dataclass
class ModelConfig:
    n_features: int
    hidden: int = 16
    chunk: int = 2
    window: int = 10
    bottleneck: int | None = None
    dropout_p: float = 0.3
    dropconnect_p: float = 0.3
    delta_scale: float = 1.0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    label_clip: float = 1e-7
    grad_clip: float = 5.0
    max_len: int = 400
    variant: str = "stagenet"

    def __post_init__(self):
        if self.bottleneck is None:
            self.bottleneck = bottleneck_size(self.hidden)

    @property
    def n_master(self) -> int:
        return self.hidden // self.chunk

    def validate(self) -> None:
        if self.n_features < 1:
            raise ValueError(f"n_features must be >= 1, got {self.n_features}")
        check_dims(self.hidden, self.chunk)
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if not 1 <= self.bottleneck < self.hidden:
            raise ValueError(f"bottleneck must be in [1, {self.hidden}), got {self.bottleneck}")
        for name in ("dropout_p", "dropconnect_p"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        if self.delta_scale <= 0 or self.learning_rate <= 0:
            raise ValueError("delta_scale and learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.max_len < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and max_len >= 1 required")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PredictionTrace:
    """Per valid visit outputs for one patient."""

    patient_id: str
    y_hat: np.ndarray      # (T,)
    s: np.ndarray          # (T,)
    s_norm: np.ndarray     # (T,)
    u_tilde: np.ndarray    # (T, N_h)
    h: np.ndarray          # (T, N_h)
    labels: np.ndarray     # (T,)
    steps: np.ndarray      # (T,) visit index in the original sequence

    def __len__(self) -> int:
        return len(self.y_hat)


@dataclass
class BatchOutput:
    """Graph outputs for a padded batch; lists are indexed by time step."""

    y_hat: list[Value]
    s: list[Value]
    s_norm: list[Value]
    u_tilde: list[Value]
    h: list[Value]

    def stacked(self, name: str) -> np.ndarray:
        """``(B, T)`` for scalars, ``(B, T, N)`` for vectors."""
        arr = np.stack([v.data for v in getattr(self, name)], axis=1)
        return arr[..., 0] if arr.shape[-1] == 1 and name in ("y_hat", "s", "s_norm") else arr


class StageNet:
    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed) if rng is None else rng
        self.cell = init_cell_params(config.n_features, config.hidden, config.chunk, rng)
        self.conv = init_conv_params(config.hidden, config.window, rng, config.bottleneck)
        bound = 1.0 / np.sqrt(config.hidden)
        self.W_y = Param(rng.uniform(-bound, bound, size=(config.hidden, 1)), "W_y")
        self.b_y = Param(np.zeros(1), "b_y")

    @property
    def stage_aware(self) -> bool:
        return self.config.variant == "stagenet"

    def parameters(self) -> dict[str, Param]:
        out = dict(self.cell.weights)
        if self.stage_aware:
            out.update(self.conv.weights)
        out["W_y"] = self.W_y
        out["b_y"] = self.b_y
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def set_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(arrays) != set(params):
            raise CheckpointError(
                f"parameter names differ: missing {sorted(set(params) - set(arrays))}, "
                f"unexpected {sorted(set(arrays) - set(params))}")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=float)
            if arr.shape != p.shape:
                raise CheckpointError(f"parameter {name}: shape {arr.shape} != expected {p.shape}")
            p.data[...] = arr

    # masks ---------------------------------------------------------------------

    def sample_dropconnect(self, rng: np.random.Generator) -> dict[str, np.ndarray] | None:
        p = self.config.dropconnect_p
        if p == 0:
            return None
        return {n: (rng.random(self.cell[n].shape) >= p) / (1.0 - p)
                for n in self.cell.recurrent_names()}

    # forward ---------------------------------------------------------------------

    def forward_batch(self, batch: Batch, mode: str = "eval",
                      rng: np.random.Generator | None = None) -> BatchOutput:
        """Run every time step of a padded batch.

        In ``train`` mode dropconnect masks (one draw per batch) gate the
        recurrent matrices and inverted dropout is applied to the residual sum
        feeding the output layer; both need ``rng``.
        """
        cfg = self.config
        if batch.visits.shape[-1] != cfg.n_features:
            raise ValueError(
                f"batch has {batch.visits.shape[-1]} features, model expects {cfg.n_features}")
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        train = mode == "train"
        if train and rng is None:
            raise ValueError("train mode needs an rng for dropout masks")
        dc_masks = self.sample_dropconnect(rng) if train else None

        b, t_len = batch.mask.shape
        state = StageCellState.zeros(b, cfg.hidden, cfg.n_master)
        window = StageWindow.empty(b, cfg.hidden, cfg.window)
        out = BatchOutput([], [], [], [], [])
        for t in range(t_len):
            valid = batch.mask[:, t]
            new = cell_step(batch.visits[:, t], batch.deltas[:, t:t + 1] / cfg.delta_scale,
                            state, self.cell, dc_masks, self.stage_aware)
            state = carry(new, state, valid)
            if self.stage_aware:
                pushed = window.push(state.h, state.s_norm)
                window = pushed if np.all(valid == 1) else _carry_window(pushed, window, valid)
                u_tilde = stage_module(window, self.conv)[0]
                rep = u_tilde + state.h
            else:
                u_tilde = state.h
                rep = state.h
            if train and cfg.dropout_p > 0:
                keep = (rng.random(rep.shape) >= cfg.dropout_p) / (1.0 - cfg.dropout_p)
                rep = rep * keep
            y_hat = ad.sigmoid(rep @ self.W_y + self.b_y)
            out.y_hat.append(y_hat)
            out.s.append(state.s)
            out.s_norm.append(state.s_norm)
            out.u_tilde.append(u_tilde)
            out.h.append(state.h)
        return out

    def forward(self, seq: PatientSequence, mode: str = "eval",
                rng: np.random.Generator | None = None) -> PredictionTrace:
        batch = make_batch([seq], self.config.max_len)
        if mode == "eval":
            with ad.no_grad():
                out = self.forward_batch(batch, mode)
        else:
            out = self.forward_batch(batch, mode, rng)
        return traces_from_batch(batch, out)[0]

    def predict(self, dataset: Sequence[PatientSequence],
                batch_size: int | None = None) -> list[PredictionTrace]:
        """Eval-mode traces, in dataset order."""
        size = batch_size or max(self.config.batch_size, 64)
        traces = []
        with ad.no_grad():
            for batch in batches(dataset, size, self.config.max_len):
                traces.extend(traces_from_batch(batch, self.forward_batch(batch, "eval")))
        return traces


def _carry_window(new: StageWindow, old: StageWindow, valid: np.ndarray) -> StageWindow:
    m = np.asarray(valid, float).reshape(-1, 1)
    keep = 1.0 - m
    return StageWindow([a * m + b * keep for a, b in zip(new.hidden, old.hidden)],
                       [a * m + b * keep for a, b in zip(new.stage, old.stage)])


def traces_from_batch(batch: Batch, out: BatchOutput) -> list[PredictionTrace]:
    y_hat, s, s_norm = out.stacked("y_hat"), out.stacked("s"), out.stacked("s_norm")
    u_tilde, h = out.stacked("u_tilde"), out.stacked("h")
    traces = []
    for r, pid in enumerate(batch.patient_ids):
        sel = np.flatnonzero(batch.mask[r] > 0)
        traces.append(PredictionTrace(pid, y_hat[r, sel], s[r, sel], s_norm[r, sel],
                                      u_tilde[r, sel], h[r, sel], batch.labels[r, sel],
                                      sel + batch.offsets[r]))
    return traces


# loss ------------------------------------------------------------------------------

def sequence_loss(y_hat: Sequence[Value] | Value, labels: np.ndarray, mask: np.ndarray,
                  clip: float = 1e-7) -> Value:
    """Masked cross-entropy, averaged over each patient's valid steps, then
    over patients.

    ``y_hat`` is a list of ``(B, 1)`` values (one per step) or a ``(B, T)``
    value; ``labels`` and ``mask`` are ``(B, T)``.
    """
    labels = np.atleast_2d(np.asarray(labels, float))
    mask = np.atleast_2d(np.asarray(mask, float))
    pred = y_hat if isinstance(y_hat, Value) else ad.concat(list(y_hat))
    if pred.data.ndim == 1:
        pred = ad.constant(pred.data[None]) if not pred.requires_grad else pred
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("every patient needs at least one valid step")
    p = ad.clip(pred, clip, 1.0 - clip)
    ll = labels * ad.log(p) + (1.0 - labels) * ad.log(1.0 - p)
    weights = mask / counts[:, None] / len(counts)
    return -ad.total(ll * weights)


def batch_loss(model: StageNet, batch: Batch, mode: str = "eval",
               rng: np.random.Generator | None = None) -> Value:
    out = model.forward_batch(batch, mode, rng)
    return sequence_loss(out.y_hat, batch.labels, batch.mask, model.config.label_clip)


# optimiser ------------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Param], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


# checkpoints -----------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: AdamState
    normalizer: Normalizer | None = None
    epoch: int = 0
    format_version: int = FORMAT_VERSION

    @classmethod
    def capture(cls, model: StageNet, optimizer: AdamState,
                normalizer: Normalizer | None = None, epoch: int = 0) -> Checkpoint:
        return cls(copy.deepcopy(model.config),
                   {n: p.data.copy() for n, p in model.parameters().items()},
                   copy.deepcopy(optimizer), normalizer, epoch)

    def build_model(self) -> StageNet:
        model = StageNet(copy.deepcopy(self.config))
        model.set_state(self.params)
        return model

    def to_dict(self) -> dict:
        def arr(a):
            return {"shape": list(a.shape), "data": a.ravel().tolist()}
        return {
            "format_version": self.format_version,
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "params": {n: arr(a) for n, a in self.params.items()},
            "optimizer": {
                "step": self.optimizer.step,
                "m": {n: arr(a) for n, a in self.optimizer.m.items()},
                "v": {n: arr(a) for n, a in self.optimizer.v.items()},
            },
            "normalizer": None if self.normalizer is None else self.normalizer.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Checkpoint:
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint format_version {version!r} is not supported (expected {FORMAT_VERSION})")
        try:
            config = ModelConfig.from_dict(d["config"])
            config.validate()
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"invalid config: {e}") from None
        expected = {n: p.shape for n, p in StageNet(copy.deepcopy(config)).parameters().items()}

        def unpack(section: dict, what: str) -> dict[str, np.ndarray]:
            out = {}
            for name, rec in section.items():
                if name not in expected:
                    raise CheckpointError(f"{what} {name}: unknown parameter")
                shape = tuple(rec["shape"])
                if shape != expected[name]:
                    raise CheckpointError(
                        f"{what} {name}: shape {list(shape)} != expected {list(expected[name])}")
                data = np.asarray(rec["data"], dtype=float)
                if data.size != int(np.prod(shape)):
                    raise CheckpointError(f"{what} {name}: {data.size} values for shape {list(shape)}")
                out[name] = data.reshape(shape)
            return out

        params = unpack(d["params"], "parameter")
        missing = set(expected) - set(params)
        if missing:
            raise CheckpointError(f"missing parameters {sorted(missing)}")
        opt = d.get("optimizer") or {}
        state = AdamState(int(opt.get("step", 0)), unpack(opt.get("m", {}), "optimizer m"),
                          unpack(opt.get("v", {}), "optimizer v"))
        norm = d.get("normalizer")
        return cls(config, params, state,
                   None if norm is None else Normalizer.from_dict(norm), int(d.get("epoch", 0)))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    return (json.dumps(ckpt.to_dict(), sort_keys=True, indent=1) + "\n").encode()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: malformed checkpoint ({e.msg})") from None
    if not isinstance(d, dict):
        raise CheckpointError(f"{path}: checkpoint must be a JSON object")
    return Checkpoint.from_dict(d)


# training ------------------------------------------------------------------------

def evaluate_traces(traces: Sequence[PredictionTrace]) -> dict[str, float]:
    y = np.concatenate([t.y_hat for t in traces])
    lab = np.concatenate([t.labels for t in traces])
    out = {}
    for name, fn in (("auprc", auprc), ("auroc", auroc), ("min_re_p", min_re_p)):
        try:
            out[name] = fn(y, lab)
        except MetricError:
            out[name] = float("nan")
    return out


def train(config: ModelConfig, train_set: Sequence[PatientSequence],
          valid_set: Sequence[PatientSequence], init: Checkpoint | None = None,
          normalizer: Normalizer | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Train with Adam and keep the epoch with the best validation AUPRC.

    Returns the best checkpoint and one metrics row per epoch.
    """
    if not train_set or not valid_set:
        raise ValueError("training and validation sets must be nonempty")
    config.validate()
    rng = np.random.default_rng(config.seed)
    model = StageNet(config, rng)
    opt = AdamState()
    start_epoch = 0
    if init is not None:
        if init.config.to_dict() | {"epochs": 0, "seed": 0} != \
                config.to_dict() | {"epochs": 0, "seed": 0}:
            raise CheckpointError("initial checkpoint was trained with a different architecture")
        model.set_state(init.params)
        opt = copy.deepcopy(init.optimizer)
        start_epoch = init.epoch
        normalizer = normalizer or init.normalizer

    params = model.parameters()
    best: Checkpoint | None = None
    best_score = -np.inf
    rows = []
    for epoch in range(start_epoch + 1, start_epoch + config.epochs + 1):
        tic = time.perf_counter()
        losses = []
        for b_idx, batch in enumerate(batches(train_set, config.batch_size, config.max_len, rng)):
            model.zero_grad()
            loss = batch_loss(model, batch, "train", rng)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b_idx}")
            loss.backward()
            grads = {n: p.grad for n, p in params.items()}
            for n, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise TrainingError(
                        f"non-finite gradient for {n} at epoch {epoch}, batch {b_idx}")
            clip_by_global_norm(grads, config.grad_clip)
            adam_step(params, grads, opt, config.learning_rate, config.beta1,
                      config.beta2, config.adam_eps)
            losses.append(float(loss.data))
        metrics = evaluate_traces(model.predict(valid_set))
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "valid_auprc": metrics["auprc"], "valid_auroc": metrics["auroc"],
               "valid_min_re_p": metrics["min_re_p"],
               "wall_time": time.perf_counter() - tic}
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.info("epoch %d loss %.4f valid auprc %.4f", epoch, row["train_loss"], row["valid_auprc"])
        score = metrics["auprc"] if np.isfinite(metrics["auprc"]) else -1.0
        if best is None or score > best_score:
            best_score = score
            best = Checkpoint.capture(model, opt, normalizer, epoch)
    if best is None:
        best = Checkpoint.capture(model, opt, normalizer, start_epoch)
    return best, rows


# gradient check ---------------------------------------------------------------------

def check_gradients(n_features: int = 4, hidden: int = 8, chunk: int = 2, window: int = 3,
                    n_patients: int = 2, n_steps: int = 6, seed: int = 0,
                    eps: float = 1e-5, tol_rel: float = 1e-4,
                    param_scale: float = 1.0, extended: bool = True) -> ad.GradCheckReport:
    """Finite-difference check of every parameter on a random eval-mode batch.

    Parameters are drawn from N(0, param_scale^2) so that every block,
    including the small-initialised convolution weights, carries a gradient
    of ordinary size. The difference quotients are taken in extended
    precision by default (see ``grad_check``).
    """
    cfg = ModelConfig(n_features=n_features, hidden=hidden, chunk=chunk, window=window,
                      dropout_p=0.0, dropconnect_p=0.0)
    cfg.validate()
    rng = np.random.default_rng(seed)
    model = StageNet(cfg, rng)
    model.set_state({n: rng.normal(0.0, param_scale, p.shape)
                     for n, p in model.parameters().items()})
    seqs = []
    for i in range(n_patients):
        deltas = rng.exponential(1.0, n_steps)
        deltas[0] = 0.0
        seqs.append(PatientSequence(f"g{i}", rng.normal(size=(n_steps, n_features)), deltas,
                                    (rng.random(n_steps) < 0.5).astype(float)))
    batch = make_batch(seqs)
    return ad.grad_check(lambda: batch_loss(model, batch, "eval"), model.parameters(),
                         eps, tol_rel, extended)

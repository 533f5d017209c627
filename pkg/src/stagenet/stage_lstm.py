"""Stage-aware LSTM cell.

Two extra "master" gates built from cumulative softmaxes split the cell
state into a high-ranking block that keeps old history and a low-ranking
block that takes the fresh candidate. Every gate sees the visit features
and the previous hidden state, both augmented with the elapsed time since
the previous visit.

All functions work on row batches: ``v`` is ``(B, N_v)``, ``delta`` is
``(B, 1)`` and state vectors are ``(B, N_h)``. One-dimensional inputs are
treated as a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, NumericError, Param, Value

# master gates produce N_m-wide distributions; the standard gates are N_h wide
MASTER_GATES = ("mf", "mi")
STANDARD_GATES = ("f", "i", "o", "c")


@dataclass
class StageCellParams:
    """Affine maps for the two master gates and the four standard LSTM maps.

    Each map ``g`` owns ``W_g`` of shape ``(N_v + 1, out)`` acting on the
    time-augmented visit, ``U_g`` of shape ``(N_h + 1, out)`` acting on the
    time-augmented hidden state, and a bias ``b_g``. Master maps emit
    ``N_m = N_h / C`` logits.
    """

    n_features: int
    hidden: int
    chunk: int
    weights: dict[str, Param]

    @property
    def n_master(self) -> int:
        return self.hidden // self.chunk

    def __getitem__(self, name: str) -> Param:
        return self.weights[name]

    def recurrent_names(self) -> list[str]:
        return [n for n in self.weights if n.startswith("U_")]


def check_dims(hidden: int, chunk: int) -> None:
    if chunk < 1 or hidden % chunk:
        raise ValueError(f"hidden size {hidden} is not divisible by chunk factor {chunk}")
    if hidden // chunk < 2:
        raise ValueError(
            f"hidden size {hidden} / chunk {chunk} leaves fewer than 2 master-gate levels")


def init_cell_params(n_features: int, hidden: int, chunk: int,
                     rng: np.random.Generator) -> StageCellParams:
    check_dims(hidden, chunk)
    n_master = hidden // chunk
    weights: dict[str, Param] = {}
    for gate in MASTER_GATES + STANDARD_GATES:
        out = n_master if gate in MASTER_GATES else hidden
        for side, fan_in in (("W", n_features + 1), ("U", hidden + 1)):
            bound = 1.0 / np.sqrt(fan_in)
            name = f"{side}_{gate}"
            weights[name] = Param(rng.uniform(-bound, bound, size=(fan_in, out)), name)
        weights[f"b_{gate}"] = Param(np.zeros(out), f"b_{gate}")
    return StageCellParams(n_features, hidden, chunk, weights)


@dataclass
class StageCellState:
    """Hidden/cell state plus the stage-variation readout for one step."""

    h: Value
    c: Value
    s: Value
    s_norm: Value
    master_forget: Value | None = None
    master_input: Value | None = None

    @classmethod
    def zeros(cls, batch: int, hidden: int, n_master: int) -> StageCellState:
        z = np.zeros((batch, hidden))
        return cls(ad.constant(z), ad.constant(z.copy()),
                   ad.constant(np.ones((batch, 1))), ad.constant(np.zeros((batch, 1))))


def _rows(x, width: int | None = None, what: str = "input") -> Value:
    v = x if isinstance(x, Value) else ad.constant(x)
    if v.data.ndim == 0:
        v = ad.constant(v.data.reshape(1, 1))
    elif v.data.ndim == 1:
        if isinstance(x, Value):
            raise DimensionError(f"{what}: expected a (batch, n) value, got {v.shape}")
        v = ad.constant(v.data[None, :])
    if width is not None and v.shape[-1] != width:
        raise DimensionError(f"{what}: expected width {width}, got shape {v.shape}")
    if not np.all(np.isfinite(v.data)):
        raise NumericError(f"{what} contains non-finite entries")
    return v


def _augment(v: Value, delta: Value) -> Value:
    return ad.concat([v, delta])


def _affine(gate: str, x_aug: Value, h_aug: Value, params: StageCellParams,
            train_masks: dict[str, np.ndarray] | None) -> Value:
    u = params[f"U_{gate}"]
    if train_masks is not None and f"U_{gate}" in train_masks:
        u = ad.mul(u, train_masks[f"U_{gate}"])
    return x_aug @ params[f"W_{gate}"] + h_aug @ u + params[f"b_{gate}"]


def _prepare(v_t, delta_t, h_prev, params: StageCellParams):
    v = _rows(v_t, params.n_features, "visit features")
    delta = _rows(delta_t, 1, "time interval")
    if np.any(delta.data < 0):
        raise ValueError("time intervals must be non-negative")
    h = _rows(h_prev, params.hidden, "previous hidden state")
    if v.shape[0] != h.shape[0] or delta.shape[0] != h.shape[0]:
        raise DimensionError(
            f"batch sizes disagree: visits {v.shape}, deltas {delta.shape}, hidden {h.shape}")
    return _augment(v, delta), _augment(h, delta), h


def master_gates(v_t, delta_t, h_prev, params: StageCellParams,
                 train_masks: dict[str, np.ndarray] | None = None):
    """Return ``(f_master, i_master, p_forget)``, each ``(B, N_m)``.

    ``f_master`` is the left-to-right cumulative sum of the forget
    distribution (rises to 1), ``i_master`` the right-to-left cumulative sum
    of the input distribution (falls from 1).
    """
    x_aug, h_aug, _ = _prepare(v_t, delta_t, h_prev, params)
    return _master_from_aug(x_aug, h_aug, params, train_masks)


def _cumsum_unit(p: Value, direction: str) -> Value:
    # a cumulative sum of a softmax can overshoot 1 by an ulp
    return ad.clip(ad.cumsum(p, direction), 0.0, 1.0)


def _master_from_aug(x_aug, h_aug, params, train_masks):
    p_f = ad.softmax(_affine("mf", x_aug, h_aug, params, train_masks))
    p_i = ad.softmax(_affine("mi", x_aug, h_aug, params, train_masks))
    return _cumsum_unit(p_f, "forward"), _cumsum_unit(p_i, "backward"), p_f


def master_from_distributions(p_forget, p_input) -> tuple[Value, Value]:
    """Master gates from given distributions (no parameters involved)."""
    return _cumsum_unit(_rows(p_forget), "forward"), _cumsum_unit(_rows(p_input), "backward")


def stage_variation(f_master: Value) -> tuple[Value, Value]:
    """Expected forget-split position ``s`` and its normalised form.

    ``s_norm = 1 - mean(f_master)`` and ``s = N_m * s_norm + 1``; ``s`` runs
    from 1 (all history kept) towards ``N_m + 1`` (history dropped).
    """
    f_master = f_master if isinstance(f_master, Value) else _rows(f_master)
    n_master = f_master.shape[-1]
    s_norm = 1.0 - ad.mean(f_master, axis=-1)
    s = ad.scale(s_norm, float(n_master)) + 1.0
    return s, s_norm


def combine_cell(f_master: Value, i_master: Value, f: Value, i: Value,
                 c_prev: Value, c_hat: Value) -> Value:
    """Cell update: overlap block mixes like a plain LSTM, the rest is copied."""
    w = f_master * i_master
    return (w * (f * c_prev + i * c_hat)
            + (f_master - w) * c_prev
            + (i_master - w) * c_hat)


def cell_step(v_t, delta_t, state_prev: StageCellState, params: StageCellParams,
              train_masks: dict[str, np.ndarray] | None = None,
              stage_aware: bool = True) -> StageCellState:
    """Advance one visit.

    ``train_masks`` maps recurrent weight names (``U_*``) to dropconnect
    masks. With ``stage_aware=False`` the master gates are fixed to ones and
    the update is a plain LSTM (used for ablations); ``s`` is then 1.
    """
    x_aug, h_aug, _ = _prepare(v_t, delta_t, state_prev.h, params)
    f = ad.sigmoid(_affine("f", x_aug, h_aug, params, train_masks))
    i = ad.sigmoid(_affine("i", x_aug, h_aug, params, train_masks))
    o = ad.sigmoid(_affine("o", x_aug, h_aug, params, train_masks))
    c_hat = ad.tanh(_affine("c", x_aug, h_aug, params, train_masks))
    c_prev = state_prev.c

    if stage_aware:
        f_m, i_m, _ = _master_from_aug(x_aug, h_aug, params, train_masks)
        s, s_norm = stage_variation(f_m)
        f_full = ad.repeat_chunks(f_m, params.chunk)
        i_full = ad.repeat_chunks(i_m, params.chunk)
        c = combine_cell(f_full, i_full, f, i, c_prev, c_hat)
    else:
        f_m = i_m = None
        batch = c_prev.shape[0]
        s, s_norm = ad.constant(np.ones((batch, 1))), ad.constant(np.zeros((batch, 1)))
        c = f * c_prev + i * c_hat

    h = o * ad.tanh(c)
    return StageCellState(h, c, s, s_norm, f_m, i_m)


def carry(new: StageCellState, old: StageCellState, valid: np.ndarray) -> StageCellState:
    """Keep ``new`` on rows where ``valid`` is 1 and ``old`` elsewhere."""
    m = np.asarray(valid, dtype=float).reshape(-1, 1)
    if np.all(m == 1):
        return new
    keep = 1.0 - m

    def mix(a: Value, b: Value) -> Value:
        return a * m + b * keep

    return StageCellState(mix(new.h, old.h), mix(new.c, old.c),
                          mix(new.s, old.s), mix(new.s_norm, old.s_norm),
                          new.master_forget, new.master_input)


def unroll(visits: np.ndarray, deltas: np.ndarray, params: StageCellParams,
           mask: np.ndarray | None = None, delta_scale: float = 1.0,
           train_masks: dict[str, np.ndarray] | None = None,
           stage_aware: bool = True) -> list[StageCellState]:
    """Run the cell over one sequence from zero state.

    Padded steps (``mask == 0``) are skipped; only valid-step states are
    returned.
    """
    visits = np.asarray(visits, dtype=float)
    deltas = np.asarray(deltas, dtype=float)
    if visits.ndim != 2 or visits.shape[0] == 0:
        raise ValueError("sequence must contain at least one visit")
    mask = np.ones(len(visits)) if mask is None else np.asarray(mask)
    state = StageCellState.zeros(1, params.hidden, params.n_master)
    states = []
    for t in range(len(visits)):
        if not mask[t]:
            continue
        state = cell_step(visits[t], deltas[t] / delta_scale, state, params,
                          train_masks, stage_aware)
        states.append(state)
    if not states:
        raise ValueError("sequence has no valid visits")
    return states

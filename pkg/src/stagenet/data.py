"""Patient sequences: schema, file I/O, missing-value handling, batching and a
synthetic generator with planted stage change-points."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

DEFAULT_MAX_LEN = 400


class DataError(ValueError):
    """A dataset file or record violates the schema."""


class StatsError(ValueError):
    """Normalisation statistics cannot be computed."""


class ConfigError(ValueError):
    """Generator configuration is unusable."""


@dataclass
class PatientSequence:
    patient_id: str
    visits: np.ndarray          # (T, N_v), NaN marks a missing value
    deltas: np.ndarray          # (T,), deltas[0] == 0
    labels: np.ndarray          # (T,), 0/1
    mask: np.ndarray | None = None
    change_points: list[int] | None = None
    archetype: int | None = None

    def __post_init__(self):
        self.visits = np.asarray(self.visits, dtype=float)
        if self.visits.ndim == 1:
            self.visits = self.visits[:, None]
        self.deltas = np.asarray(self.deltas, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        if self.mask is None:
            self.mask = np.ones(len(self.visits))
        self.mask = np.asarray(self.mask, dtype=float)

    def __len__(self) -> int:
        return len(self.visits)

    @property
    def n_features(self) -> int:
        return self.visits.shape[1]

    def validate(self, allow_nan: bool = True) -> None:
        pid = self.patient_id
        t = len(self.visits)
        if t < 1:
            raise DataError(f"patient {pid}: visits: sequence is empty")
        for name in ("deltas", "labels", "mask"):
            if len(getattr(self, name)) != t:
                raise DataError(
                    f"patient {pid}: {name}: length {len(getattr(self, name))} != {t} visits")
        if not np.all(np.isfinite(self.deltas)) or np.any(self.deltas < 0):
            raise DataError(f"patient {pid}: deltas: must be finite and non-negative")
        if self.deltas[0] != 0:
            raise DataError(f"patient {pid}: deltas: first interval must be 0")
        if not np.all(np.isin(self.labels, (0.0, 1.0))):
            raise DataError(f"patient {pid}: labels: must be 0 or 1")
        if not allow_nan and np.any(np.isnan(self.visits)):
            raise DataError(f"patient {pid}: visits: missing values remain after filling")
        if np.any(np.isinf(self.visits)):
            raise DataError(f"patient {pid}: visits: infinite value")
        if self.change_points is not None:
            cps = list(self.change_points)
            if cps != sorted(cps) or any(not 0 <= c < t for c in cps):
                raise DataError(f"patient {pid}: change_points: must be sorted indices in [0, {t})")

    def to_record(self) -> dict:
        rec = {
            "patient_id": self.patient_id,
            "deltas": self.deltas.tolist(),
            "labels": [int(y) for y in self.labels],
            "visits": [[None if math.isnan(x) else x for x in row]
                       for row in self.visits.tolist()],
        }
        if self.change_points is not None:
            rec["change_points"] = [int(c) for c in self.change_points]
        if self.archetype is not None:
            rec["archetype"] = int(self.archetype)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> PatientSequence:
        pid = str(rec.get("patient_id", "?"))
        try:
            visits = np.array([[np.nan if x is None else float(x) for x in row]
                               for row in rec["visits"]], dtype=float)
            seq = cls(pid, visits, rec["deltas"], rec["labels"],
                      change_points=rec.get("change_points"),
                      archetype=rec.get("archetype"))
        except KeyError as e:
            raise DataError(f"patient {pid}: {e.args[0]}: missing field") from None
        except (TypeError, ValueError) as e:
            raise DataError(f"patient {pid}: visits: {e}") from None
        if visits.ndim != 2:
            raise DataError(f"patient {pid}: visits: rows have unequal lengths")
        return seq


Dataset = list[PatientSequence]


# file I/O ------------------------------------------------------------------

def save_dataset(dataset: Iterable[PatientSequence], path) -> None:
    with open(path, "w") as fh:
        for seq in dataset:
            fh.write(json.dumps(seq.to_record()) + "\n")


def load_dataset(path) -> Dataset:
    """Read a JSON-lines dataset and validate every record."""
    out = []
    n_features = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"line {lineno}: malformed JSON ({e.msg})") from None
            seq = PatientSequence.from_record(rec)
            seq.validate()
            if n_features is None:
                n_features = seq.n_features
            elif seq.n_features != n_features:
                raise DataError(
                    f"patient {seq.patient_id}: visits: {seq.n_features} features, "
                    f"expected {n_features}")
            out.append(seq)
    if not out:
        raise DataError(f"{path}: no patients")
    return out


def import_csv(path, label_column: str = "label", id_column: str = "patient_id",
               time_column: str = "time") -> Dataset:
    """Long-format CSV (one row per visit) to sequences.

    Remaining columns are features in file order; empty cells are missing.
    Visits are ordered by time and deltas are differences of consecutive times.
    """
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        missing = {id_column, time_column, label_column} - set(fields)
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        feats = [c for c in fields if c not in (id_column, time_column, label_column)]
        for row in reader:
            def num(x):
                return np.nan if x is None or x.strip() == "" else float(x)
            rows.setdefault(row[id_column], []).append(
                (float(row[time_column]), [num(row[c]) for c in feats],
                 int(float(row[label_column]))))
    out = []
    for pid, recs in rows.items():
        recs.sort(key=lambda r: r[0])
        times = np.array([r[0] for r in recs])
        deltas = np.concatenate([[0.0], np.diff(times)])
        seq = PatientSequence(pid, np.array([r[1] for r in recs], dtype=float).reshape(len(recs), -1),
                              deltas, [r[2] for r in recs])
        seq.validate()
        out.append(seq)
    return out


# missing values and scaling -----------------------------------------------------

@dataclass
class Normalizer:
    fill_value: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> Normalizer:
        return cls(*(np.asarray(d[k], dtype=float) for k in ("fill_value", "mean", "std")))


def forward_fill(visits: np.ndarray, fill_value: np.ndarray) -> np.ndarray:
    """Carry the last observation forward; leading gaps take ``fill_value``."""
    out = np.array(visits, dtype=float)
    last = np.array(fill_value, dtype=float)
    for t in range(len(out)):
        row = out[t]
        gap = np.isnan(row)
        row[gap] = last[gap]
        last = row
    return out


def fit_normalizer(train: Sequence[PatientSequence], std_floor: float = 1e-6) -> Normalizer:
    """Statistics from the training split only."""
    stacked = np.concatenate([s.visits for s in train])
    observed = ~np.isnan(stacked)
    if np.any(observed.sum(axis=0) == 0):
        bad = np.flatnonzero(observed.sum(axis=0) == 0).tolist()
        raise StatsError(f"features {bad} are missing in every training visit")
    fill = np.nanmean(stacked, axis=0)
    filled = np.concatenate([forward_fill(s.visits, fill) for s in train])
    mean = filled.mean(axis=0)
    std = np.maximum(filled.std(axis=0), std_floor)
    return Normalizer(fill, mean, std)


def forward_fill_and_normalize(dataset: Sequence[PatientSequence],
                               stats: Normalizer) -> Dataset:
    out = []
    for s in dataset:
        if s.n_features != len(stats.mean):
            raise DataError(f"patient {s.patient_id}: visits: {s.n_features} features, "
                            f"normalizer expects {len(stats.mean)}")
        visits = (forward_fill(s.visits, stats.fill_value) - stats.mean) / stats.std
        seq = PatientSequence(s.patient_id, visits, s.deltas.copy(), s.labels.copy(),
                              s.mask.copy(), s.change_points, s.archetype)
        seq.validate(allow_nan=False)
        out.append(seq)
    return out


# batching -----------------------------------------------------------------------

@dataclass
class Batch:
    patient_ids: list[str]
    visits: np.ndarray    # (B, T, N_v)
    deltas: np.ndarray    # (B, T)
    labels: np.ndarray    # (B, T)
    mask: np.ndarray      # (B, T)
    offsets: np.ndarray   # (B,) index of the first kept visit in the original sequence

    def __len__(self) -> int:
        return len(self.patient_ids)


def truncate(seq: PatientSequence, max_len: int = DEFAULT_MAX_LEN) -> PatientSequence:
    """Keep the most recent ``max_len`` visits."""
    if len(seq) <= max_len:
        return seq
    cut = len(seq) - max_len
    cps = None if seq.change_points is None else [c - cut for c in seq.change_points if c >= cut]
    return PatientSequence(seq.patient_id, seq.visits[cut:], seq.deltas[cut:],
                           seq.labels[cut:], seq.mask[cut:], cps, seq.archetype)


def make_batch(seqs: Sequence[PatientSequence], max_len: int = DEFAULT_MAX_LEN) -> Batch:
    kept = [truncate(s, max_len) for s in seqs]
    t = max(len(s) for s in kept)
    b, nv = len(kept), kept[0].n_features
    visits = np.zeros((b, t, nv))
    deltas = np.zeros((b, t))
    labels = np.zeros((b, t))
    mask = np.zeros((b, t))
    for r, s in enumerate(kept):
        n = len(s)
        visits[r, :n] = s.visits
        deltas[r, :n] = s.deltas
        labels[r, :n] = s.labels
        mask[r, :n] = s.mask
    offsets = np.array([len(s) - len(k) for s, k in zip(seqs, kept)])
    return Batch([s.patient_id for s in kept], visits, deltas, labels, mask, offsets)


def batches(dataset: Sequence[PatientSequence], batch_size: int,
            max_len: int = DEFAULT_MAX_LEN,
            rng: np.random.Generator | None = None) -> Iterator[Batch]:
    """Yield padded batches; shuffled when ``rng`` is given."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(dataset)) if rng is None else rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        yield make_batch([dataset[i] for i in order[start:start + batch_size]], max_len)


def split(dataset: Sequence[PatientSequence], fractions: Sequence[float],
          seed: int) -> list[Dataset]:
    """Random patient-level split into consecutive fractions."""
    order = np.random.default_rng(seed).permutation(len(dataset))
    cuts = np.round(np.cumsum(fractions)[:-1] * len(dataset)).astype(int)
    return [[dataset[i] for i in part] for part in np.split(order, cuts)]


# synthetic generator ---------------------------------------------------------------

@dataclass
class GeneratorConfig:
    """Piecewise-stationary patients with jumps at stage boundaries.

    Each stage has a severity level. Moving into a worse stage shifts the
    first ``n_severity_features`` features up by ``jump_magnitude`` noise
    standard deviations; at every boundary each remaining feature also
    moves by the same amount, in a random direction, with probability
    ``shift_prob``. The outcome probability rises with severity and for
    ``instability_window`` visits after each boundary. Inter-visit times are
    exponential with mean ``delta_mean``; the visit opening a new stage
    waits ``boundary_gap_scale`` times longer on average. With
    ``n_archetypes > 1`` every patient draws an archetype whose baseline
    raises its own share of the non-severity features by ``archetype_offset``
    and lowers the others.
    """

    n_patients: int = 200
    n_features: int = 6
    length_range: tuple[int, int] = (20, 40)
    stage_range: tuple[int, int] = (2, 4)
    min_stage_length: int = 4
    drift_range: tuple[float, float] = (0.0, 0.0)
    volatility_range: tuple[float, float] = (0.3, 0.5)
    jump_magnitude: float = 3.0
    n_severity_features: int = 2
    shift_prob: float = 0.5
    deteriorate_prob: float = 0.6
    risk_intercept: float = -3.0
    risk_per_severity: float = 1.5
    instability_boost: float = 1.5
    instability_window: int = 2
    deterministic_labels: bool = False
    delta_mean: float = 1.0
    boundary_gap_scale: float = 1.0
    missing_rate: float = 0.0
    n_archetypes: int = 1
    archetype_offset: float = 2.0
    archetype_deteriorate: tuple[float, ...] = ()
    seed: int = 0

    def __post_init__(self):
        self.length_range = tuple(self.length_range)
        self.stage_range = tuple(self.stage_range)
        self.drift_range = tuple(self.drift_range)
        self.volatility_range = tuple(self.volatility_range)
        self.archetype_deteriorate = tuple(self.archetype_deteriorate)

    def validate(self) -> None:
        def rng_ok(r, lo_bound):
            return len(r) == 2 and lo_bound <= r[0] <= r[1]
        if self.n_patients < 1:
            raise ConfigError(f"n_patients must be >= 1, got {self.n_patients}")
        if self.n_features < 1:
            raise ConfigError(f"n_features must be >= 1, got {self.n_features}")
        if not rng_ok(self.length_range, 1):
            raise ConfigError(f"length_range {self.length_range} is empty")
        if not rng_ok(self.stage_range, 1):
            raise ConfigError(f"stage_range {self.stage_range} is empty")
        if not rng_ok(self.volatility_range, 0.0) or self.volatility_range[1] <= 0:
            raise ConfigError(f"volatility_range {self.volatility_range} is empty or zero")
        if not rng_ok(self.drift_range, -math.inf):
            raise ConfigError(f"drift_range {self.drift_range} is empty")
        if self.stage_range[1] * self.min_stage_length > self.length_range[0]:
            raise ConfigError(
                f"{self.stage_range[1]} stages of >= {self.min_stage_length} visits do not fit "
                f"in sequences of length {self.length_range[0]}")
        if self.jump_magnitude < 0 or self.delta_mean <= 0 or self.boundary_gap_scale <= 0:
            raise ConfigError("jump_magnitude must be >= 0; delta_mean and boundary_gap_scale > 0")
        if not 0 <= self.missing_rate < 1 or not 0 <= self.deteriorate_prob <= 1 \
                or not 0 <= self.shift_prob <= 1:
            raise ConfigError("missing_rate must be in [0, 1); deteriorate_prob and shift_prob in [0, 1]")
        if not 0 <= self.n_severity_features <= self.n_features:
            raise ConfigError("n_severity_features must be between 0 and n_features")
        if self.n_archetypes < 1:
            raise ConfigError("n_archetypes must be >= 1")
        if self.n_archetypes > 1 and self.n_features - self.n_severity_features < self.n_archetypes:
            raise ConfigError(
                f"{self.n_archetypes} archetypes need at least {self.n_archetypes} non-severity "
                f"features, got {self.n_features - self.n_severity_features}")
        if self.archetype_deteriorate and len(self.archetype_deteriorate) != self.n_archetypes:
            raise ConfigError("archetype_deteriorate needs one probability per archetype")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _change_points(rng, length: int, n_stages: int, min_len: int) -> list[int]:
    # stage lengths >= min_len: distribute the slack uniformly
    slack = length - n_stages * min_len
    cuts = np.sort(rng.integers(0, slack + 1, size=n_stages - 1))
    return [int(min_len * (k + 1) + cuts[k]) for k in range(n_stages - 1)]


def _archetype_profile(cfg: GeneratorConfig, archetype: int) -> np.ndarray:
    base = np.zeros(cfg.n_features)
    if cfg.n_archetypes > 1:
        # non-severity feature j belongs to archetype j mod n: raised for its
        # owner, lowered for the rest, so every profile is centred on zero
        idx = np.arange(cfg.n_severity_features, cfg.n_features)
        owner = (idx - cfg.n_severity_features) % cfg.n_archetypes
        base[idx] = np.where(owner == archetype, cfg.archetype_offset,
                             -cfg.archetype_offset / (cfg.n_archetypes - 1))
    return base


def generate_patient(cfg: GeneratorConfig, rng: np.random.Generator,
                     patient_id: str) -> PatientSequence:
    length = int(rng.integers(cfg.length_range[0], cfg.length_range[1] + 1))
    n_stages = int(rng.integers(cfg.stage_range[0], cfg.stage_range[1] + 1))
    cps = _change_points(rng, length, n_stages, cfg.min_stage_length)
    archetype = int(rng.integers(cfg.n_archetypes))
    p_det = (cfg.archetype_deteriorate[archetype] if cfg.archetype_deteriorate
             else cfg.deteriorate_prob)

    sigma = rng.uniform(*cfg.volatility_range)
    level = _archetype_profile(cfg, archetype) + rng.normal(0, sigma, cfg.n_features)
    jump = cfg.jump_magnitude * sigma
    sev_idx = np.arange(cfg.n_severity_features)
    other_idx = np.arange(cfg.n_severity_features, cfg.n_features)

    bounds = [0] + cps + [length]
    visits = np.empty((length, cfg.n_features))
    risk = np.empty(length)
    severity = 0
    for k in range(n_stages):
        lo, hi = bounds[k], bounds[k + 1]
        if k > 0:
            if rng.random() < p_det:
                severity += 1
                level[sev_idx] += jump
            elif severity > 0:
                severity -= 1
                level[sev_idx] -= jump
            else:
                level[sev_idx] -= 0.5 * jump
            if len(other_idx):
                moved = other_idx[rng.random(len(other_idx)) < cfg.shift_prob]
                level[moved] += jump * rng.choice((-1.0, 1.0), size=len(moved))
        drift = rng.uniform(*cfg.drift_range, size=cfg.n_features)
        steps = np.arange(hi - lo)[:, None]
        visits[lo:hi] = level + drift * steps + rng.normal(0, sigma, (hi - lo, cfg.n_features))
        since = np.arange(hi - lo)
        recent = (since < cfg.instability_window) & (k > 0)
        risk[lo:hi] = cfg.risk_intercept + cfg.risk_per_severity * severity \
            + cfg.instability_boost * recent

    prob = 1.0 / (1.0 + np.exp(-risk))
    if cfg.deterministic_labels:
        labels = (prob > 0.5).astype(float)
    else:
        labels = (rng.random(length) < prob).astype(float)
    deltas = rng.exponential(cfg.delta_mean, length)
    if cps:
        deltas[cps] *= cfg.boundary_gap_scale
    deltas[0] = 0.0
    if cfg.missing_rate > 0:
        gaps = rng.random(visits.shape) < cfg.missing_rate
        gaps[0] = False
        visits[gaps] = np.nan
    return PatientSequence(patient_id, visits, deltas, labels, change_points=cps,
                           archetype=archetype if cfg.n_archetypes > 1 else None)


def generate_synthetic(cfg: GeneratorConfig) -> Dataset:
    """One independent child stream per patient, all derived from ``cfg.seed``."""
    cfg.validate()
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_patients)
    return [generate_patient(cfg, np.random.default_rng(child), f"p{i:05d}")
            for i, child in enumerate(children)]

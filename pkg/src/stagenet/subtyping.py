"""Patient subtyping from the learned last-step representation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import PatientSequence, forward_fill, forward_fill_and_normalize
from .evaluation import ClusterResult, kmeans
from .model import Checkpoint, PredictionTrace


@dataclass
class SubtypeResult:
    patient_ids: list[str]
    clusters: ClusterResult
    representations: np.ndarray

    def to_dict(self) -> dict:
        d = self.clusters.to_dict()
        d["assignments"] = {pid: int(a) for pid, a in zip(self.patient_ids, self.clusters.assignments)}
        return d


def prepare(checkpoint: Checkpoint, dataset: Sequence[PatientSequence]) -> list[PatientSequence]:
    """Apply the checkpoint's stored normaliser, if it has one."""
    if checkpoint.normalizer is None:
        return list(dataset)
    return forward_fill_and_normalize(dataset, checkpoint.normalizer)


def last_step(traces: Sequence[PredictionTrace], field: str = "u_tilde") -> np.ndarray:
    return np.stack([getattr(t, field)[-1] for t in traces])


def raw_last_visit(dataset: Sequence[PatientSequence]) -> np.ndarray:
    """Last observed visit per patient (forward-filled, zeros before any observation)."""
    return np.stack([forward_fill(s.visits, np.zeros(s.n_features))[-1] for s in dataset])


def _per_cluster(assign: np.ndarray, k: int, values: Sequence[np.ndarray]) -> list[float]:
    out = []
    for c in range(k):
        members = [values[i] for i in np.flatnonzero(assign == c)]
        out.append(float(np.concatenate(members).mean()) if members else float("nan"))
    return out


def subtype(checkpoint: Checkpoint, dataset: Sequence[PatientSequence], k: int,
            seed: int = 0, n_init: int = 10) -> SubtypeResult:
    """Cluster patients on u_tilde at their last valid visit.

    ``dataset`` is raw (unnormalised) data. Each cluster reports the pooled
    ground-truth label rate of its patients' visits and their mean
    predicted risk.
    """
    data = prepare(checkpoint, dataset)
    if k > len(data):
        raise ValueError(f"k={k} exceeds the number of patients ({len(data)})")
    traces = checkpoint.build_model().predict(data)
    reps = last_step(traces)
    res = kmeans(reps, k, seed=seed, n_init=n_init)
    res.cluster_risk = _per_cluster(res.assignments, k, [t.labels for t in traces])
    res.cluster_predicted_risk = _per_cluster(res.assignments, k, [t.y_hat for t in traces])
    return SubtypeResult([t.patient_id for t in traces], res, reps)

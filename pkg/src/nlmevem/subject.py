"""Subjects, dose events and lane-vectorised batches of subjects."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, ModelShapeError


@dataclass(frozen=True)
class DoseEvent:
    """Bolus of ``amount`` into state ``compartment`` (0-based) at ``time``.

    ``lag_name`` optionally names an individual parameter whose value (hours)
    delays this dose.
    """

    time: float
    amount: float
    compartment: int = 0
    lag_name: str | None = None

    def __post_init__(self):
        if not np.isfinite(self.time) or self.time < 0:
            raise DataError(f"dose time must be finite and >= 0, got {self.time}")
        if not np.isfinite(self.amount) or self.amount < 0:
            raise DataError(f"dose amount must be finite and >= 0, got {self.amount}")
        if self.compartment < 0:
            raise DataError(f"negative dose compartment {self.compartment}")


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Subject:
    """One individual's design and data.

    Missing observations are stored as NaN.
    """

    id: str
    observation_times: np.ndarray
    observations: Mapping[str, np.ndarray] = field(default_factory=dict)
    dose_events: tuple = ()
    covariates: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        times = _frozen(self.observation_times).reshape(-1)
        object.__setattr__(self, "observation_times", times)
        if np.any(~np.isfinite(times)) or np.any(times < 0):
            raise DataError(f"subject {self.id}: observation times must be finite and >= 0")
        if np.any(np.diff(times) <= 0):
            raise DataError(f"subject {self.id}: observation times must be strictly increasing")
        obs = {}
        for name, vals in self.observations.items():
            v = _frozen(vals).reshape(-1)
            if v.shape != times.shape:
                raise DataError(
                    f"subject {self.id}: response {name!r} has {v.size} values for {times.size} times"
                )
            obs[name] = v
        object.__setattr__(self, "observations", obs)
        doses = tuple(sorted(self.dose_events, key=lambda d: d.time))
        object.__setattr__(self, "dose_events", doses)
        object.__setattr__(self, "covariates", {k: float(v) for k, v in self.covariates.items()})

    @property
    def n_obs(self) -> int:
        """Number of non-missing observations over all responses."""
        return int(sum(np.sum(~np.isnan(v)) for v in self.observations.values()))

    def design(self) -> "Subject":
        """Copy with all observations removed (missing)."""
        return Subject(
            self.id,
            self.observation_times,
            {k: np.full(v.shape, np.nan) for k, v in self.observations.items()},
            self.dose_events,
            self.covariates,
        )

    def with_observations(self, observations) -> "Subject":
        return Subject(self.id, self.observation_times, observations, self.dose_events, self.covariates)

    def signature(self):
        """Design key: subjects with equal keys can share a batch."""
        return (
            tuple(self.observation_times.tolist()),
            tuple((d.compartment, d.lag_name) for d in self.dose_events),
            tuple(sorted(self.observations)),
            tuple(sorted(self.covariates)),
        )


@dataclass
class SubjectBatch:
    """Subjects sharing a design, each replicated over ``lanes_per_subject`` lanes.

    Lane ``i * lanes_per_subject + j`` belongs to local subject ``i``.  Every
    per-subject quantity is exposed as an array whose last axis runs over
    lanes, so model code evaluates all subjects and draws at once.
    """

    subjects: Sequence[Subject]
    lanes_per_subject: int = 1
    indices: Sequence[int] | None = None
    steps: object = None  # ODE step schedule, fixed at fit setup

    def __post_init__(self):
        if not self.subjects:
            raise ModelShapeError("empty batch")
        sig = self.subjects[0].signature()
        for s in self.subjects[1:]:
            if s.signature() != sig:
                raise ModelShapeError("subjects in one batch must share a design")
        if self.indices is None:
            self.indices = list(range(len(self.subjects)))
        m = self.lanes_per_subject
        self.lane_subject = np.repeat(np.arange(len(self.subjects)), m)
        first = self.subjects[0]
        self.times = first.observation_times
        self.responses = tuple(first.observations)
        self.obs = {}
        self.mask = {}
        for name in self.responses:
            y = np.stack([s.observations[name] for s in self.subjects], axis=-1)  # (n_t, B)
            y = np.repeat(y, m, axis=-1)
            present = ~np.isnan(y)
            self.mask[name] = present
            self.obs[name] = np.where(present, y, 0.0)
        self.covariates = {
            k: np.repeat(np.array([s.covariates[k] for s in self.subjects]), m) for k in first.covariates
        }
        self.doses = []
        for j, d in enumerate(first.dose_events):
            self.doses.append(
                (
                    np.repeat(np.array([s.dose_events[j].time for s in self.subjects]), m),
                    np.repeat(np.array([s.dose_events[j].amount for s in self.subjects]), m),
                    d.compartment,
                    d.lag_name,
                )
            )

    @property
    def n_subjects(self):
        return len(self.subjects)

    @property
    def n_lanes(self):
        return len(self.subjects) * self.lanes_per_subject


def make_batches(subjects, lanes_per_subject=1, max_batch=64):
    """Group subjects by design and split into batches of at most ``max_batch``.

    The grouping depends only on the data, so results never depend on how
    batches are later scheduled across threads.
    """
    groups = {}
    for i, s in enumerate(subjects):
        groups.setdefault(s.signature(), []).append(i)
    batches = []
    for idx in sorted(groups.values(), key=lambda g: g[0]):
        for start in range(0, len(idx), max_batch):
            part = idx[start : start + max_batch]
            batches.append(SubjectBatch([subjects[i] for i in part], lanes_per_subject, part))
    return batches

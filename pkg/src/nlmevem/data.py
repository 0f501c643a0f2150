"""Dataset CSV I/O and simulation of populations from a model.

CSV layout (one row per observation time or dose)::

    id,time,evid,amt,cmt,<response columns...>,cov.<name>...

``evid`` is 0 for observation rows and 1 for dose rows.  ``cmt`` is the
1-based index of the dosed state.  Missing values are written as ``.``.
Covariates are constant within a subject and repeated on every row.
"""

from __future__ import annotations

import csv
import io

import numpy as np

from .errors import DataError, ModelShapeError
from .subject import DoseEvent, Subject, SubjectBatch

HEADER = ("id", "time", "evid", "amt", "cmt")
MISSING = "."


def _fmt(x):
    x = float(x)
    if np.isnan(x):
        return MISSING
    return format(x, ".17g")


def write_csv(subjects, path_or_buf, responses=None, covariates=None):
    """Write subjects in the dataset layout (17 significant digits)."""
    subjects = list(subjects)
    if responses is None:
        responses = list(subjects[0].observations) if subjects else []
    if covariates is None:
        covariates = sorted(subjects[0].covariates) if subjects else []
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(HEADER) + list(responses) + [f"cov.{c}" for c in covariates])
        for s in subjects:
            covs = [_fmt(s.covariates[c]) for c in covariates]
            rows = []
            for d in s.dose_events:
                rows.append((d.time, 0, [s.id, _fmt(d.time), "1", _fmt(d.amount), str(d.compartment + 1)]
                             + [MISSING] * len(responses) + covs))  # fmt: skip
            for j, t in enumerate(s.observation_times):
                vals = [_fmt(s.observations[r][j]) for r in responses]
                rows.append((t, 1, [s.id, _fmt(t), "0", MISSING, MISSING] + vals + covs))
            rows.sort(key=lambda r: (r[0], r[1]))  # doses before observations at equal times
            for _, _, row in rows:
                w.writerow(row)
    finally:
        if own:
            fh.close()


def _num(text, line, what, allow_missing=False):
    text = text.strip()
    if text == MISSING:
        if allow_missing:
            return np.nan
        raise DataError(f"missing value not allowed in column {what!r}", line)
    try:
        return float(text)
    except ValueError:
        raise DataError(f"cannot parse {what!r} value {text!r}", line) from None


def read_csv(path_or_buf, responses=None):
    """Read a dataset; subjects are returned in order of first appearance."""
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, newline="") if own else path_or_buf
    try:
        text = fh.read()
    finally:
        if own:
            fh.close()
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty file", 1) from None
    if tuple(header[:5]) != HEADER:
        raise DataError(f"header must start with {','.join(HEADER)}", 1)
    rest = header[5:]
    resp_cols = [h for h in rest if not h.startswith("cov.")]
    cov_cols = [h for h in rest if h.startswith("cov.")]
    if any(h.startswith("cov.") for h in rest[: len(resp_cols)]) or rest != resp_cols + cov_cols:
        raise DataError("response columns must precede cov.<name> columns", 1)
    if responses is not None and set(resp_cols) != set(responses):
        raise DataError(f"response columns {resp_cols} do not match model responses {list(responses)}", 1)
    order, recs = [], {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"expected {len(header)} fields, found {len(row)}", lineno)
        sid = row[0].strip()
        if not sid:
            raise DataError("empty id", lineno)
        t = _num(row[1], lineno, "time")
        evid = row[2].strip()
        covs = {c[4:]: _num(v, lineno, c) for c, v in zip(cov_cols, row[5 + len(resp_cols):])}
        if sid not in recs:
            order.append(sid)
            recs[sid] = {"times": [], "obs": {r: [] for r in resp_cols}, "doses": [], "cov": covs}
        rec = recs[sid]
        if covs != rec["cov"]:
            raise DataError(f"covariates of subject {sid!r} change over time", lineno)
        if evid == "1":
            amt = _num(row[3], lineno, "amt")
            cmt = _num(row[4], lineno, "cmt")
            if cmt != int(cmt) or cmt < 1:
                raise DataError(f"cmt must be a positive integer, got {row[4]!r}", lineno)
            try:
                rec["doses"].append(DoseEvent(t, amt, int(cmt) - 1))
            except DataError as exc:
                raise DataError(str(exc), lineno) from None
        elif evid == "0":
            if rec["times"] and t <= rec["times"][-1]:
                raise DataError(f"observation times of subject {sid!r} must be strictly increasing", lineno)
            if t < 0 or not np.isfinite(t):
                raise DataError("observation time must be finite and >= 0", lineno)
            rec["times"].append(t)
            for r, v in zip(resp_cols, row[5 : 5 + len(resp_cols)]):
                rec["obs"][r].append(_num(v, lineno, r, allow_missing=True))
        else:
            raise DataError(f"evid must be 0 or 1, got {evid!r}", lineno)
    return [
        Subject(sid, recs[sid]["times"], recs[sid]["obs"], tuple(recs[sid]["doses"]), recs[sid]["cov"])
        for sid in order
    ]


def check_subjects(model, subjects):
    """Raise ModelShapeError if the data do not fit the model's contract."""
    for s in subjects:
        if set(s.observations) != set(model.responses):
            raise ModelShapeError(
                f"subject {s.id}: responses {sorted(s.observations)} != model responses {sorted(model.responses)}"
            )
        for c in model.covariate_names:
            if c not in s.covariates:
                raise ModelShapeError(f"subject {s.id}: missing covariate {c!r}")
        for d in s.dose_events:
            if model.n_states and d.compartment >= model.n_states:
                raise ModelShapeError(f"subject {s.id}: dose compartment {d.compartment + 1} out of range")


def simulate_population(model, n_subjects, design, theta, seed, return_eta=False):
    """Draw ``n_subjects`` subjects from the model on the ``design`` template.

    Subject ``i`` uses its own random stream keyed by ``(seed, i)``: first any
    covariates the design lacks, then the standardized random effects, then
    the residual noise for each response in model order.
    """
    theta = np.asarray(theta, dtype=float)
    n_t = len(design.observation_times)
    r = model.n_eta
    subjects, us, noises = [], [], []
    for i in range(n_subjects):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        covs = dict(design.covariates)
        missing = [c for c in model.covariate_names if c not in covs]
        if missing:
            drawn = model.sample_covariates(rng, 1)
            covs.update({c: float(np.asarray(drawn[c]).ravel()[0]) for c in missing})
        us.append(rng.standard_normal(r))
        noises.append({resp: rng.standard_normal(n_t) for resp in model.responses})
        empty = {resp: np.full(n_t, np.nan) for resp in model.responses}
        subjects.append(Subject(str(i + 1), design.observation_times, empty, design.dose_events, covs))
    if n_subjects == 0:
        return ([], np.zeros((0, r))) if return_eta else []
    batch = SubjectBatch(subjects, 1)
    model.prepare(batch, theta)
    u = np.array(us)  # (n, r)
    eta = model.transform_eta([u[:, k] for k in range(r)], theta)
    noise = {resp: np.stack([nz[resp] for nz in noises], axis=-1) for resp in model.responses}
    obs = model.simulate(batch, eta, theta, noise)
    out = [s.with_observations({resp: obs[resp][:, i] for resp in model.responses}) for i, s in enumerate(subjects)]
    if return_eta:
        return out, np.stack([np.asarray(e, dtype=float) * np.ones(n_subjects) for e in eta], axis=-1)
    return out

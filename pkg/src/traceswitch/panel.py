"""Panel data containers and file formats.

A panel holds one record per individual: a span of half-year time indices,
a (possibly partially missing) binary career state per period, a fully
observed binary trace indicator per period, and named real covariates.

State coding: 0 = public sector, 1 = private sector. Missingness of the
state is carried by an explicit per-cell boolean mask, never by sentinel
values, so that hold-out masking is an overlay on copies rather than a
mutation of the data.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PanelError",
    "IndividualRecord",
    "PanelData",
    "PackedPanel",
    "load_panel_csv",
    "save_panel_csv",
    "load_panel_json",
    "save_panel_json",
]


class PanelError(ValueError):
    """Raised when panel data violate a structural invariant."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class IndividualRecord:
    """One individual's span, states, traces, and covariates.

    Arrays all have length ``t_max - t_min + 1`` and are immutable after
    construction. ``states[k]`` is only meaningful where ``observed[k]``
    is True.
    """

    id: str
    t_min: int
    t_max: int
    states: np.ndarray      # int8, 0/1; value at unobserved cells is 0 and ignored
    observed: np.ndarray    # bool, True where the state is known
    traces: np.ndarray      # int8, 0/1, fully observed
    covariates: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.t_min > self.t_max:
            raise PanelError(f"individual {self.id!r}: t_min {self.t_min} > t_max {self.t_max}")
        n = self.length
        states = np.asarray(self.states, dtype=np.int8)
        observed = np.asarray(self.observed, dtype=bool)
        traces = np.asarray(self.traces, dtype=np.int8)
        for name, arr in (("states", states), ("observed", observed), ("traces", traces)):
            if arr.shape != (n,):
                raise PanelError(f"individual {self.id!r}: {name} has length {arr.shape}, span needs {n}")
        if np.any((traces != 0) & (traces != 1)):
            raise PanelError(f"individual {self.id!r}: traces must be 0/1 with no missing values")
        obs_states = states[observed]
        if np.any((obs_states != 0) & (obs_states != 1)):
            raise PanelError(f"individual {self.id!r}: observed states must be 0 or 1")
        # private sector cannot emit a trace
        bad = observed & (states == 1) & (traces == 1)
        if np.any(bad):
            t = self.t_min + int(np.flatnonzero(bad)[0])
            raise PanelError(
                f"individual {self.id!r}, t={t}: state is private (1) but a trace is present; "
                "private periods cannot leave traces"
            )
        states = states.copy()
        states[~observed] = 0
        covs = {}
        for name, arr in self.covariates.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != (n,):
                raise PanelError(f"individual {self.id!r}: covariate {name!r} has length {arr.shape}, span needs {n}")
            if not np.all(np.isfinite(arr)):
                raise PanelError(f"individual {self.id!r}: covariate {name!r} contains non-finite values")
            covs[name] = _freeze(arr.copy())
        object.__setattr__(self, "states", _freeze(states))
        object.__setattr__(self, "observed", _freeze(observed.copy()))
        object.__setattr__(self, "traces", _freeze(traces.copy()))
        object.__setattr__(self, "covariates", covs)

    @property
    def length(self) -> int:
        return self.t_max - self.t_min + 1

    def state_at(self, t: int):
        """State at absolute time t, or None if missing."""
        k = t - self.t_min
        if not (0 <= k < self.length):
            raise IndexError(f"t={t} outside span [{self.t_min}, {self.t_max}]")
        return int(self.states[k]) if self.observed[k] else None


@dataclass(frozen=True)
class PanelData:
    """An immutable collection of individual records with a common covariate set."""

    individuals: tuple[IndividualRecord, ...]

    def __post_init__(self):
        recs = tuple(self.individuals)
        if not recs:
            raise PanelError("panel contains no individuals")
        ids = [r.id for r in recs]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise PanelError(f"duplicate individual ids: {dup}")
        names = set(recs[0].covariates)
        for r in recs[1:]:
            if set(r.covariates) != names:
                raise PanelError(
                    f"individual {r.id!r}: covariate columns {sorted(r.covariates)} differ "
                    f"from {sorted(names)}"
                )
        object.__setattr__(self, "individuals", recs)

    @property
    def n_individuals(self) -> int:
        return len(self.individuals)

    @property
    def covariate_names(self) -> list[str]:
        return sorted(self.individuals[0].covariates)

    @property
    def n_cells(self) -> int:
        return sum(r.length for r in self.individuals)

    @property
    def n_missing(self) -> int:
        return sum(int(np.sum(~r.observed)) for r in self.individuals)

    def by_id(self, id_: str) -> IndividualRecord:
        for r in self.individuals:
            if r.id == id_:
                return r
        raise KeyError(id_)

    def fully_observed_ids(self) -> list[str]:
        """Ids of individuals whose state is observed on the whole span."""
        return [r.id for r in self.individuals if bool(np.all(r.observed))]

    def mask_individuals(self, ids) -> "PanelData":
        """Hide the states of the given individuals (traces kept).

        Returns a new panel in which the masked cells carry no state value
        at all, so nothing downstream can read the withheld states.
        """
        ids = set(ids)
        unknown = ids - {r.id for r in self.individuals}
        if unknown:
            raise PanelError(f"cannot mask unknown ids: {sorted(unknown)}")
        out = []
        for r in self.individuals:
            if r.id in ids:
                n = r.length
                out.append(IndividualRecord(
                    id=r.id, t_min=r.t_min, t_max=r.t_max,
                    states=np.zeros(n, dtype=np.int8),
                    observed=np.zeros(n, dtype=bool),
                    traces=r.traces, covariates=dict(r.covariates),
                ))
            else:
                out.append(r)
        return PanelData(tuple(out))

    def pack(self) -> "PackedPanel":
        return PackedPanel.from_panel(self)


@dataclass(frozen=True)
class PackedPanel:
    """Dense padded-array view of a panel, used by the numerical engine.

    All [n, L] arrays are padded with zeros past each individual's length;
    ``valid`` marks real cells. Row order follows the panel's record order.
    """

    ids: tuple[str, ...]
    t0: np.ndarray          # int64 [n], absolute t of each span start
    lengths: np.ndarray     # int64 [n]
    y: np.ndarray           # int8 [n, L]
    x: np.ndarray           # int8 [n, L], 0 at unobserved cells
    x_obs: np.ndarray       # bool [n, L]
    valid: np.ndarray       # bool [n, L]
    covariates: dict[str, np.ndarray]   # each float64 [n, L]

    @staticmethod
    def from_panel(panel: PanelData) -> "PackedPanel":
        n = panel.n_individuals
        lengths = np.array([r.length for r in panel.individuals], dtype=np.int64)
        L = int(lengths.max())
        y = np.zeros((n, L), dtype=np.int8)
        x = np.zeros((n, L), dtype=np.int8)
        x_obs = np.zeros((n, L), dtype=bool)
        valid = np.zeros((n, L), dtype=bool)
        covs = {name: np.zeros((n, L), dtype=np.float64) for name in panel.covariate_names}
        t0 = np.empty(n, dtype=np.int64)
        for i, r in enumerate(panel.individuals):
            m = r.length
            t0[i] = r.t_min
            y[i, :m] = r.traces
            x[i, :m] = r.states
            x_obs[i, :m] = r.observed
            valid[i, :m] = True
            for name in covs:
                covs[name][i, :m] = r.covariates[name]
        for a in (t0, lengths, y, x, x_obs, valid, *covs.values()):
            _freeze(a)
        return PackedPanel(
            ids=tuple(r.id for r in panel.individuals),
            t0=t0, lengths=lengths, y=y, x=x, x_obs=x_obs, valid=valid, covariates=covs,
        )

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def L(self) -> int:
        return self.y.shape[1]

    def abs_t(self) -> np.ndarray:
        """Absolute time index per cell, [n, L]."""
        return self.t0[:, None] + np.arange(self.L)[None, :]


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------
#
# Columnar text (CSV): one row per (individual, t), columns
#   id, t, x, y, <covariate columns...>
# with x in {0, 1, NA}. Rows of one individual are contiguous with t
# ascending by 1. Floats are written with repr so the round trip is
# bit-exact.
#
# Structured records (JSON): {"individuals": [{"id", "t_min", "states"
# (0/1/null), "traces", "covariates": {name: [...]}}, ...]}.


def _fmt_float(v: float) -> str:
    return repr(float(v))


def save_panel_csv(panel: PanelData, path) -> None:
    cov_names = panel.covariate_names
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "t", "x", "y", *cov_names])
        for r in panel.individuals:
            for k in range(r.length):
                xcell = str(int(r.states[k])) if r.observed[k] else "NA"
                row = [r.id, str(r.t_min + k), xcell, str(int(r.traces[k]))]
                row.extend(_fmt_float(r.covariates[name][k]) for name in cov_names)
                w.writerow(row)


def load_panel_csv(path) -> PanelData:
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelError(f"{path}: empty file") from None
        if header[:4] != ["id", "t", "x", "y"]:
            raise PanelError(f"{path}: header must start with id,t,x,y (got {header[:4]})")
        cov_names = header[4:]
        rows = list(reader)
    return _panel_from_rows(rows, cov_names, str(path))


def _panel_from_rows(rows, cov_names, where: str) -> PanelData:
    recs = []
    i = 0
    while i < len(rows):
        id_ = rows[i][0]
        j = i
        while j < len(rows) and rows[j][0] == id_:
            j += 1
        chunk = rows[i:j]
        try:
            ts = [int(r[1]) for r in chunk]
        except ValueError as e:
            raise PanelError(f"{where}: individual {id_!r}: bad time index ({e})") from None
        t_min, t_max = ts[0], ts[-1]
        if ts != list(range(t_min, t_max + 1)):
            raise PanelError(f"{where}: individual {id_!r}: time indices not contiguous ascending")
        n = len(chunk)
        states = np.zeros(n, dtype=np.int8)
        observed = np.zeros(n, dtype=bool)
        traces = np.zeros(n, dtype=np.int8)
        covs = {name: np.zeros(n, dtype=np.float64) for name in cov_names}
        for k, r in enumerate(chunk):
            if len(r) != 4 + len(cov_names):
                raise PanelError(f"{where}: individual {id_!r}, t={ts[k]}: expected {4+len(cov_names)} fields, got {len(r)}")
            if r[2] != "NA":
                states[k] = int(r[2])
                observed[k] = True
            traces[k] = int(r[3])
            for c, name in enumerate(cov_names):
                covs[name][k] = float(r[4 + c])
        recs.append(IndividualRecord(id=id_, t_min=t_min, t_max=t_max, states=states,
                                     observed=observed, traces=traces, covariates=covs))
        i = j
    ids = [r.id for r in recs]
    if len(set(ids)) != len(ids):
        raise PanelError(f"{where}: individual ids are not grouped into contiguous row blocks")
    return PanelData(tuple(recs))


def save_panel_json(panel: PanelData, path) -> None:
    obj = {"individuals": []}
    for r in panel.individuals:
        obj["individuals"].append({
            "id": r.id,
            "t_min": int(r.t_min),
            "states": [int(s) if o else None for s, o in zip(r.states, r.observed)],
            "traces": [int(v) for v in r.traces],
            "covariates": {name: [float(v) for v in arr] for name, arr in sorted(r.covariates.items())},
        })
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def load_panel_json(path) -> PanelData:
    with open(path) as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict) or "individuals" not in obj:
        raise PanelError(f"{path}: expected an object with an 'individuals' list")
    recs = []
    for item in obj["individuals"]:
        try:
            states_raw = item["states"]
            n = len(states_raw)
            states = np.array([0 if s is None else int(s) for s in states_raw], dtype=np.int8)
            observed = np.array([s is not None for s in states_raw], dtype=bool)
            recs.append(IndividualRecord(
                id=str(item["id"]),
                t_min=int(item["t_min"]),
                t_max=int(item["t_min"]) + n - 1,
                states=states,
                observed=observed,
                traces=np.asarray(item["traces"], dtype=np.int8),
                covariates={k: np.asarray(v, dtype=np.float64) for k, v in item.get("covariates", {}).items()},
            ))
        except (KeyError, TypeError) as e:
            raise PanelError(f"{path}: malformed individual record ({e})") from None
    return PanelData(tuple(recs))


def panel_content_hash(panel: PanelData) -> str:
    """Stable content hash of everything the sampler can see."""
    import hashlib

    h = hashlib.sha256()
    buf = io.StringIO()
    w = csv.writer(buf)
    for r in panel.individuals:
        for k in range(r.length):
            xcell = str(int(r.states[k])) if r.observed[k] else "NA"
            w.writerow([r.id, r.t_min + k, xcell, int(r.traces[k]),
                        *(_fmt_float(r.covariates[n][k]) for n in sorted(r.covariates))])
    h.update(buf.getvalue().encode())
    return h.hexdigest()

"""Design-matrix assembly from raw covariates and trace history.

A DesignConfig lists, for each of the three coefficient blocks, an ordered
sequence of term strings:

    "1"                     intercept
    "cohort"                a named covariate column
    "spline(age, df=5)"     B-spline basis of a [0,1] covariate (degree 2,
                            clamped boundary knots, equally spaced interior
                            knots; df columns including the basis intercept)
    "A(0.8)" / "A(1)"       exponentially weighted average of past traces
    "L"                     sqrt of periods elapsed since the last trace
    "I(A1=0)"               indicator that no past trace exists yet
    "election()"            half-year election dummy derived from t
    "a:b" / "a:b:c"         interactions (elementwise column products)

Trace-history terms (A, L, I(A1=0)) describe the self-exciting behaviour of
the trace process and normally belong to the emission design only; putting
them in a transition design requires an explicit opt-in flag.

Because the first trace of an individual defines panel membership, it is
uninformative about the emission process; by default it is zeroed before
any history feature is computed (``zero_first_trace``). Synthetic panels
have no membership-defining trace, so their configs disable this.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .panel import PackedPanel, PanelData

__all__ = [
    "FeatureError",
    "DesignConfig",
    "AssembledDesigns",
    "decay_average",
    "last_trace_gap",
    "spline_basis",
    "bspline_basis_matrix",
    "assemble_designs",
    "FRENCH_PRESIDENTIAL_HALF_YEARS",
]

# Jan-Jun 1995, 2002, 2007, 2012, 2017, 2022 on the half-year grid with
# t=1 being Jan-Jun 1990.
FRENCH_PRESIDENTIAL_HALF_YEARS = (11, 25, 35, 45, 55, 65)

BLOCKS = ("exit", "return", "emission")


class FeatureError(ValueError):
    """Raised for invalid design configurations or assembly inputs."""


# ---------------------------------------------------------------------------
# Scalar history encodings
# ---------------------------------------------------------------------------

def decay_average(history, phi: float) -> float:
    """Weighted average of past traces, most recent first, weights phi**s.

    Returns 0 for an empty history; the boundary indicator I(A1=0) is meant
    to absorb that regime.
    """
    if not (0.0 < phi <= 1.0):
        raise FeatureError(f"decay parameter must lie in (0, 1], got {phi}")
    h = np.asarray(history, dtype=np.float64)
    if h.size == 0:
        return 0.0
    if np.any((h != 0.0) & (h != 1.0)):
        raise FeatureError("trace history entries must be 0 or 1")
    w = phi ** np.arange(1, h.size + 1, dtype=np.float64)
    return float((w @ h) / w.sum())


def last_trace_gap(history) -> float:
    """sqrt(p - 1) where p is the offset of the most recent trace; 0 if none."""
    for p, h in enumerate(history, start=1):
        if h not in (0, 1):
            raise FeatureError("trace history entries must be 0 or 1")
        if h == 1:
            return math.sqrt(p - 1)
    return 0.0


# ---------------------------------------------------------------------------
# B-spline basis
# ---------------------------------------------------------------------------

def bspline_basis_matrix(u, df: int = 5, degree: int = 2) -> np.ndarray:
    """Evaluate the clamped B-spline basis on [0, 1] at points u.

    Boundary knots at 0 and 1 with multiplicity degree+1; df - degree - 1
    interior knots equally spaced. Returns shape u.shape + (df,); rows are
    nonnegative and sum to 1.
    """
    if degree < 1:
        raise FeatureError(f"spline degree must be >= 1, got {degree}")
    n_interior = df - degree - 1
    if n_interior < 0:
        raise FeatureError(f"spline df={df} too small for degree {degree} (need >= {degree + 1})")
    u = np.asarray(u, dtype=np.float64)
    if np.any((u < 0.0) | (u > 1.0)):
        bad = u[(u < 0.0) | (u > 1.0)]
        raise FeatureError(f"spline inputs must lie in [0, 1]; got e.g. {bad.flat[0]!r}")
    interior = np.arange(1, n_interior + 1, dtype=np.float64) / (n_interior + 1)
    knots = np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])
    m = knots.size
    # order 0: half-open interval indicators, closed at the right boundary
    B = np.zeros(u.shape + (m - 1,))
    for j in range(m - 1):
        if knots[j] == knots[j + 1]:
            continue
        inside = (knots[j] <= u) & (u < knots[j + 1])
        if knots[j + 1] == knots[-1]:
            inside |= u == knots[j + 1]
        B[..., j] = inside
    for k in range(1, degree + 1):
        nxt = np.zeros(u.shape + (m - 1 - k,))
        for j in range(m - 1 - k):
            acc = 0.0
            d1 = knots[j + k] - knots[j]
            if d1 > 0.0:
                acc = (u - knots[j]) / d1 * B[..., j]
            d2 = knots[j + k + 1] - knots[j + 1]
            if d2 > 0.0:
                acc = acc + (knots[j + k + 1] - u) / d2 * B[..., j + 1]
            nxt[..., j] = acc
        B = nxt
    return B


def spline_basis(u: float) -> np.ndarray:
    """The default degree-2, df=5 basis at a single point (vector of 5)."""
    return bspline_basis_matrix(np.float64(u))


# ---------------------------------------------------------------------------
# Term grammar
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Intercept:
    def canon(self):
        return "1"

    def width(self):
        return 1


@dataclass(frozen=True)
class _Covariate:
    name: str

    def canon(self):
        return self.name

    def width(self):
        return 1


@dataclass(frozen=True)
class _Spline:
    cov: str
    df: int = 5
    degree: int = 2

    def canon(self):
        return f"spline({self.cov},df={self.df})" if self.degree == 2 \
            else f"spline({self.cov},df={self.df},degree={self.degree})"

    def width(self):
        return self.df


@dataclass(frozen=True)
class _Decay:
    phi: float

    def canon(self):
        return f"A({self.phi:g})"

    def width(self):
        return 1


@dataclass(frozen=True)
class _Gap:
    def canon(self):
        return "L"

    def width(self):
        return 1


@dataclass(frozen=True)
class _Boundary:
    def canon(self):
        return "I(A1=0)"

    def width(self):
        return 1


@dataclass(frozen=True)
class _Election:
    times: tuple[int, ...] = FRENCH_PRESIDENTIAL_HALF_YEARS
    shift: int = 0

    def canon(self):
        inner = [] if self.times == FRENCH_PRESIDENTIAL_HALF_YEARS else [
            "times=" + "|".join(str(t) for t in self.times)]
        if self.shift:
            inner.append(f"shift={self.shift}")
        return f"election({','.join(inner)})"

    def width(self):
        return 1


_TRACE_ATOMS = (_Decay, _Gap, _Boundary)
_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")


def _split_top(s: str, sep: str) -> list[str]:
    parts, depth, cur = [], 0, []
    for ch in s:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise FeatureError(f"unbalanced parentheses in term {s!r}")
        if ch == sep and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if depth != 0:
        raise FeatureError(f"unbalanced parentheses in term {s!r}")
    parts.append("".join(cur))
    return parts


def _parse_kwargs(parts: list[str], spec: str) -> dict:
    out = {}
    for p in parts:
        p = p.strip()
        if not p:
            continue
        if "=" not in p:
            raise FeatureError(f"expected key=value in {spec!r}, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _parse_atom(s: str):
    s = s.strip()
    if s == "1":
        return _Intercept()
    if s == "L":
        return _Gap()
    if s in ("I(A1=0)", "I(A(1)=0)"):
        return _Boundary()
    m = re.fullmatch(r"A\(([^)]+)\)", s)
    if m:
        try:
            phi = float(m.group(1))
        except ValueError:
            raise FeatureError(f"bad decay parameter in {s!r}") from None
        if not (0.0 < phi <= 1.0):
            raise FeatureError(f"decay parameter must lie in (0, 1], got {phi} in {s!r}")
        return _Decay(phi=phi)
    m = re.fullmatch(r"spline\((.*)\)", s)
    if m:
        parts = _split_top(m.group(1), ",")
        if not parts or not parts[0].strip():
            raise FeatureError(f"spline term needs a covariate name: {s!r}")
        cov = parts[0].strip()
        if not _NAME_RE.match(cov):
            raise FeatureError(f"bad covariate name {cov!r} in {s!r}")
        kw = _parse_kwargs(parts[1:], s)
        df = int(kw.pop("df", 5))
        degree = int(kw.pop("degree", 2))
        if kw:
            raise FeatureError(f"unknown spline options {sorted(kw)} in {s!r}")
        if df < degree + 1:
            raise FeatureError(f"spline df={df} too small for degree {degree} in {s!r}")
        return _Spline(cov=cov, df=df, degree=degree)
    m = re.fullmatch(r"election\((.*)\)", s)
    if m:
        kw = _parse_kwargs(_split_top(m.group(1), ","), s)
        times = FRENCH_PRESIDENTIAL_HALF_YEARS
        if "times" in kw:
            times = tuple(int(v) for v in kw.pop("times").split("|"))
            if not times:
                raise FeatureError(f"empty election times in {s!r}")
        shift = int(kw.pop("shift", 0))
        if shift < 0:
            raise FeatureError(f"election shift must be >= 0 in {s!r}")
        if kw:
            raise FeatureError(f"unknown election options {sorted(kw)} in {s!r}")
        return _Election(times=times, shift=shift)
    if _NAME_RE.match(s):
        return _Covariate(name=s)
    raise FeatureError(f"cannot parse design term atom {s!r}")


def parse_term(s: str) -> tuple:
    """Parse one term string into a tuple of atoms (interaction factors)."""
    atoms = tuple(_parse_atom(a) for a in _split_top(s, ":"))
    if len(atoms) > 1 and any(isinstance(a, _Intercept) for a in atoms):
        raise FeatureError(f"intercept cannot appear inside an interaction: {s!r}")
    return atoms


def _term_canon(atoms: tuple) -> str:
    return ":".join(a.canon() for a in atoms)


def _term_width(atoms: tuple) -> int:
    w = 1
    for a in atoms:
        w *= a.width()
    return w


def _term_labels(atoms: tuple) -> list[str]:
    def atom_labels(a):
        if isinstance(a, _Spline):
            return [f"{a.canon()}[{j}]" for j in range(1, a.df + 1)]
        return [a.canon()]

    labels = [""]
    for a in atoms:
        labels = [f"{l}:{al}" if l else al for l in labels for al in atom_labels(a)]
    return labels


# ---------------------------------------------------------------------------
# DesignConfig
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DesignConfig:
    """Declarative recipe for the three design matrices.

    Term order is significant: it defines coefficient order. ``normalization``
    maps covariate names to (lo, hi) range endpoints applied as
    (value - lo) / (hi - lo) wherever the covariate is used, so that hold-out
    splits cannot shift covariate scales.
    """

    exit_terms: tuple[str, ...]
    return_terms: tuple[str, ...]
    emission_terms: tuple[str, ...]
    zero_first_trace: bool = True
    allow_trace_terms_in_transitions: bool = False
    normalization: tuple[tuple[str, tuple[float, float]], ...] = ()
    phi_default: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "exit_terms", tuple(self.exit_terms))
        object.__setattr__(self, "return_terms", tuple(self.return_terms))
        object.__setattr__(self, "emission_terms", tuple(self.emission_terms))
        norm = tuple((str(k), (float(v[0]), float(v[1]))) for k, v in
                     (self.normalization.items() if isinstance(self.normalization, dict)
                      else self.normalization))
        for k, (lo, hi) in norm:
            if not hi > lo:
                raise FeatureError(f"normalization range for {k!r} must have hi > lo, got ({lo}, {hi})")
        object.__setattr__(self, "normalization", norm)
        if not (0.0 < self.phi_default <= 1.0):
            raise FeatureError(f"phi_default must lie in (0, 1], got {self.phi_default}")
        for block in BLOCKS:
            terms = self.parsed(block)
            if not terms:
                raise FeatureError(f"{block} design has no terms")
            canons = [_term_canon(t) for t in terms]
            if len(set(canons)) != len(canons):
                dup = sorted({c for c in canons if canons.count(c) > 1})
                raise FeatureError(f"duplicate terms in {block} design: {dup}")
            if block in ("exit", "return") and not self.allow_trace_terms_in_transitions:
                for t, c in zip(terms, canons):
                    if any(isinstance(a, _TRACE_ATOMS) for a in t):
                        raise FeatureError(
                            f"trace-history term {c!r} in the {block} design; these describe the "
                            "emission process - set allow_trace_terms_in_transitions to override"
                        )

    def _terms(self, block: str) -> tuple[str, ...]:
        try:
            return {"exit": self.exit_terms, "return": self.return_terms,
                    "emission": self.emission_terms}[block]
        except KeyError:
            raise FeatureError(f"unknown design block {block!r}; expected one of {BLOCKS}") from None

    def parsed(self, block: str) -> list[tuple]:
        return [parse_term(s) for s in self._terms(block)]

    def columns(self, block: str) -> list[str]:
        out = []
        for t in self.parsed(block):
            out.extend(_term_labels(t))
        return out

    def widths(self) -> dict[str, int]:
        return {b: sum(_term_width(t) for t in self.parsed(b)) for b in BLOCKS}

    def coefficient_names(self) -> list[str]:
        return [f"{b}:{c}" for b in BLOCKS for c in self.columns(b)]

    def with_phi(self, phi: float) -> "DesignConfig":
        """Replace the decay parameter of every A(phi<1) term (A(1) is kept)."""
        if not (0.0 < phi <= 1.0):
            raise FeatureError(f"phi must lie in (0, 1], got {phi}")

        def rewrite(term: str) -> str:
            atoms = parse_term(term)
            new = tuple(_Decay(phi=phi) if isinstance(a, _Decay) and a.phi < 1.0 else a
                        for a in atoms)
            return _term_canon(new)

        return replace(
            self,
            exit_terms=tuple(rewrite(t) for t in self.exit_terms),
            return_terms=tuple(rewrite(t) for t in self.return_terms),
            emission_terms=tuple(rewrite(t) for t in self.emission_terms),
            phi_default=phi,
        )

    def to_dict(self) -> dict:
        return {
            "exit": list(self.exit_terms),
            "return": list(self.return_terms),
            "emission": list(self.emission_terms),
            "zero_first_trace": self.zero_first_trace,
            "allow_trace_terms_in_transitions": self.allow_trace_terms_in_transitions,
            "normalization": {k: list(v) for k, v in self.normalization},
            "phi_default": self.phi_default,
        }

    @staticmethod
    def from_dict(obj: dict) -> "DesignConfig":
        if not isinstance(obj, dict):
            raise FeatureError(f"design config must be an object, got {type(obj).__name__}")
        missing = [k for k in ("exit", "return", "emission") if k not in obj]
        if missing:
            raise FeatureError(f"design config is missing blocks: {missing}")
        known = {"exit", "return", "emission", "zero_first_trace",
                 "allow_trace_terms_in_transitions", "normalization", "phi_default"}
        unknown = set(obj) - known
        if unknown:
            raise FeatureError(f"unknown design config fields: {sorted(unknown)}")
        return DesignConfig(
            exit_terms=tuple(obj["exit"]),
            return_terms=tuple(obj["return"]),
            emission_terms=tuple(obj["emission"]),
            zero_first_trace=bool(obj.get("zero_first_trace", True)),
            allow_trace_terms_in_transitions=bool(obj.get("allow_trace_terms_in_transitions", False)),
            normalization=tuple((k, (float(v[0]), float(v[1])))
                                for k, v in obj.get("normalization", {}).items()),
            phi_default=float(obj.get("phi_default", 0.8)),
        )


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

class _FeatureContext:
    """Caches per-cell history features and normalized covariates for one panel."""

    def __init__(self, packed: PackedPanel, config: DesignConfig):
        self.packed = packed
        self.config = config
        self.norm = dict(config.normalization)
        y = packed.y.astype(np.float64)
        if config.zero_first_trace:
            y = y.copy()
            y[:, 0] = 0.0   # membership-defining trace carries no emission information
        self._y_hist = y
        self._decay_cache: dict[float, np.ndarray] = {}
        self._gap = None
        self._boundary = None

    def decay(self, phi: float) -> np.ndarray:
        if phi not in self._decay_cache:
            y = self._y_hist
            n, L = y.shape
            out = np.zeros((n, L))
            num = np.zeros(n)
            den = np.zeros(n)
            for t in range(L):
                if t > 0:
                    out[:, t] = np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), 0.0)
                num = phi * (num + y[:, t])
                den = phi * (den + 1.0)
            self._decay_cache[phi] = out
        return self._decay_cache[phi]

    def _scan_gap(self):
        if self._gap is None:
            y = self._y_hist
            n, L = y.shape
            gap = np.zeros((n, L))
            boundary = np.zeros((n, L))
            p = np.zeros(n)
            seen = np.zeros(n, dtype=bool)
            for t in range(L):
                gap[:, t] = np.where(seen, np.sqrt(np.maximum(p - 1.0, 0.0)), 0.0)
                boundary[:, t] = ~seen
                hit = y[:, t] > 0.0
                p = np.where(hit, 1.0, p + 1.0)
                seen |= hit
            self._gap, self._boundary = gap, boundary
        return self._gap, self._boundary

    def gap(self) -> np.ndarray:
        return self._scan_gap()[0]

    def boundary(self) -> np.ndarray:
        return self._scan_gap()[1]

    def covariate(self, name: str) -> np.ndarray:
        try:
            v = self.packed.covariates[name]
        except KeyError:
            raise FeatureError(
                f"design references covariate {name!r} but the panel has "
                f"{sorted(self.packed.covariates)}"
            ) from None
        if name in self.norm:
            lo, hi = self.norm[name]
            return (v - lo) / (hi - lo)
        return v

    def atom_columns(self, atom) -> np.ndarray:
        """Column stack for one atom, shape [n, L, width]."""
        p = self.packed
        if isinstance(atom, _Intercept):
            return np.ones(p.valid.shape + (1,))
        if isinstance(atom, _Covariate):
            return self.covariate(atom.name)[..., None]
        if isinstance(atom, _Decay):
            return self.decay(atom.phi)[..., None]
        if isinstance(atom, _Gap):
            return self.gap()[..., None]
        if isinstance(atom, _Boundary):
            return self.boundary()[..., None]
        if isinstance(atom, _Election):
            t = p.abs_t()
            e = np.zeros(p.valid.shape)
            pts = set(atom.times)
            hit = np.isin(t + atom.shift, list(pts)) | np.isin(t + 1 + atom.shift, list(pts))
            e[hit] = 1.0
            return e[..., None]
        if isinstance(atom, _Spline):
            u = self.covariate(atom.cov)
            vals = np.where(p.valid, u, 0.0)
            if np.any((vals < 0.0) | (vals > 1.0)):
                i, k = np.argwhere(p.valid & ((u < 0.0) | (u > 1.0)))[0]
                raise FeatureError(
                    f"covariate {atom.cov!r} must lie in [0, 1] after normalization for "
                    f"{atom.canon()}; individual {p.ids[i]!r} t={p.t0[i]+k} has {u[i, k]!r}"
                )
            return bspline_basis_matrix(vals, df=atom.df, degree=atom.degree)
        raise FeatureError(f"unhandled atom {atom!r}")

    def term_columns(self, atoms: tuple) -> np.ndarray:
        blocks = [self.atom_columns(a) for a in atoms]
        out = blocks[0]
        for b in blocks[1:]:
            out = out[..., :, None] * b[..., None, :]
            out = out.reshape(out.shape[:-2] + (-1,))
        return out


@dataclass(frozen=True)
class AssembledDesigns:
    """Padded design matrices for the three blocks plus their column names."""

    exit_rows: np.ndarray       # [n, L, p_exit]
    return_rows: np.ndarray     # [n, L, p_return]
    emission_rows: np.ndarray   # [n, L, p_emission]
    exit_names: tuple[str, ...]
    return_names: tuple[str, ...]
    emission_names: tuple[str, ...]

    def rows(self, block: str) -> np.ndarray:
        return {"exit": self.exit_rows, "return": self.return_rows,
                "emission": self.emission_rows}[block]

    def names(self, block: str) -> tuple[str, ...]:
        return {"exit": self.exit_names, "return": self.return_names,
                "emission": self.emission_names}[block]


def _correlation_warning(block: str, names, mat: np.ndarray, valid: np.ndarray) -> None:
    cells = mat[valid]
    if cells.shape[0] < 8 or cells.shape[1] < 2:
        return
    sd = cells.std(axis=0)
    keep = np.flatnonzero(sd > 1e-12)
    if keep.size < 2:
        return
    corr = np.corrcoef(cells[:, keep], rowvar=False)
    for a in range(keep.size):
        for b in range(a + 1, keep.size):
            if abs(corr[a, b]) > 0.99:
                warnings.warn(
                    f"{block} design columns {names[keep[a]]!r} and {names[keep[b]]!r} have "
                    f"correlation {corr[a, b]:.4f} (> 0.99); the implied system may be "
                    "ill-conditioned", stacklevel=3,
                )


def assemble_designs(panel, config: DesignConfig, warn_collinear: bool = True) -> AssembledDesigns:
    """Build the exit/return/emission design matrices for a panel.

    Deterministic: identical (panel, config) inputs produce bit-identical
    matrices. Cells outside an individual's span are zero-filled.
    """
    packed = panel if isinstance(panel, PackedPanel) else PanelData.pack(panel)
    ctx = _FeatureContext(packed, config)
    built = {}
    for block in BLOCKS:
        cols = [ctx.term_columns(t) for t in config.parsed(block)]
        mat = np.concatenate(cols, axis=-1)
        mat = np.where(packed.valid[..., None], mat, 0.0)
        names = tuple(config.columns(block))
        if warn_collinear:
            _correlation_warning(block, names, mat, packed.valid)
        mat.setflags(write=False)
        built[block] = (mat, names)
    return AssembledDesigns(
        exit_rows=built["exit"][0], return_rows=built["return"][0],
        emission_rows=built["emission"][0],
        exit_names=built["exit"][1], return_names=built["return"][1],
        emission_names=built["emission"][1],
    )

"""Probability model: transition and emission GLMs and their log-likelihoods.

Two career states (0 = public, 1 = private). Per (individual, period):

* exit probability   P(X_{t+1}=1 | X_t=0) = logistic(w' beta0)
* return probability P(X_{t+1}=0 | X_t=1) = logistic(w' beta1)
* trace probability  P(Y_t=1 | X_t=0)     = logistic(w~' eta0)

while the private state emits no traces: P(Y_t=0 | X_t=1) = 1. With the
binary state space the multinomial transition GLM with "stay" as the
reference category reduces to these two logistic regressions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .panel import PackedPanel, PanelData

__all__ = [
    "PROB_FLOOR",
    "ModelError",
    "ConstraintViolation",
    "logistic",
    "transition_probability",
    "emission_mean",
    "ParameterSet",
    "TransitionField",
    "EmissionField",
    "compute_fields",
    "transition_log_likelihood",
    "emission_log_likelihood",
]

# probabilities are clamped into [PROB_FLOOR, 1 - PROB_FLOOR] before any log
PROB_FLOOR = 1e-12


class ModelError(ValueError):
    """Raised on invalid model inputs (dimension or finiteness violations)."""


class ConstraintViolation(ModelError):
    """A private-state period carries a trace, which the model forbids."""


def logistic(u):
    """Numerically stable logistic function, clamped away from {0, 1}."""
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return np.clip(out, PROB_FLOOR, 1.0 - PROB_FLOOR)


def _check_pair(w, coef, what: str):
    w = np.asarray(w, dtype=np.float64)
    coef = np.asarray(coef, dtype=np.float64)
    if w.ndim != 1 or coef.ndim != 1 or w.shape != coef.shape:
        raise ModelError(f"{what}: design row has shape {w.shape}, coefficients {coef.shape}")
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(coef))):
        raise ModelError(f"{what}: non-finite entries")
    return w, coef


def transition_probability(w, beta) -> float:
    """Probability of changing state given design row w and coefficients beta."""
    w, beta = _check_pair(w, beta, "transition_probability")
    return float(logistic(w @ beta))


def emission_mean(w_tilde, eta) -> float:
    """Probability of a trace in a public-state period."""
    w_tilde, eta = _check_pair(w_tilde, eta, "emission_mean")
    return float(logistic(w_tilde @ eta))


@dataclass(frozen=True)
class ParameterSet:
    """Coefficients for the exit, return, and public-emission GLMs."""

    beta0: np.ndarray   # exit block (public -> private)
    beta1: np.ndarray   # return block (private -> public)
    eta0: np.ndarray    # trace emission while public

    def __post_init__(self):
        for name in ("beta0", "beta1", "eta0"):
            v = np.asarray(getattr(self, name), dtype=np.float64).copy()
            if v.ndim != 1:
                raise ModelError(f"{name} must be a vector, got shape {v.shape}")
            if not np.all(np.isfinite(v)):
                raise ModelError(f"{name} contains non-finite entries")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    def validate_against(self, design_config) -> None:
        """Check coefficient lengths against the widths a DesignConfig implies."""
        widths = design_config.widths()
        got = {"exit": len(self.beta0), "return": len(self.beta1), "emission": len(self.eta0)}
        for block, need in widths.items():
            key = {"exit": "beta0", "return": "beta1", "emission": "eta0"}[block]
            if got[block] != need:
                raise ModelError(
                    f"{key} has {got[block]} coefficients but the {block} design has {need} columns"
                )

    def concat(self) -> np.ndarray:
        return np.concatenate([self.beta0, self.beta1, self.eta0])


@dataclass(frozen=True)
class TransitionField:
    """Per-cell exit/return probabilities; index [i, k] is the step k -> k+1."""

    gamma0: np.ndarray  # [n, L] exit probability from public
    gamma1: np.ndarray  # [n, L] return probability from private

    def __post_init__(self):
        for a in (self.gamma0, self.gamma1):
            if np.any((a <= 0.0) | (a >= 1.0)):
                raise ModelError("transition probabilities must lie strictly in (0, 1)")


@dataclass(frozen=True)
class EmissionField:
    """Per-cell trace probability for the public state."""

    lam: np.ndarray  # [n, L]

    def __post_init__(self):
        if np.any((self.lam <= 0.0) | (self.lam >= 1.0)):
            raise ModelError("emission means must lie strictly in (0, 1)")


def compute_fields(packed: PackedPanel, designs, params: ParameterSet):
    """Evaluate the three GLMs on assembled designs -> (TransitionField, EmissionField)."""
    g0 = logistic(designs.exit_rows @ params.beta0)
    g1 = logistic(designs.return_rows @ params.beta1)
    lam = logistic(designs.emission_rows @ params.eta0)
    return TransitionField(gamma0=g0, gamma1=g1), EmissionField(lam=lam)


def _as_packed(panel) -> PackedPanel:
    if isinstance(panel, PackedPanel):
        return panel
    if isinstance(panel, PanelData):
        return panel.pack()
    raise ModelError(f"expected PanelData or PackedPanel, got {type(panel).__name__}")


def _complete_x(packed: PackedPanel, x_full=None) -> np.ndarray:
    """Return the complete state matrix, requiring every valid cell to be known."""
    if x_full is not None:
        x_full = np.asarray(x_full, dtype=np.int8)
        if x_full.shape != packed.valid.shape:
            raise ModelError(f"paths have shape {x_full.shape}, panel needs {packed.valid.shape}")
        return x_full
    if np.any(packed.valid & ~packed.x_obs):
        i, k = np.argwhere(packed.valid & ~packed.x_obs)[0]
        raise ModelError(
            f"state missing for individual {packed.ids[i]!r} at t={packed.t0[i] + k}; "
            "likelihoods need complete paths (observed or imputed)"
        )
    return packed.x


def _norm_weights(weights, packed: PackedPanel) -> np.ndarray:
    if weights is None:
        return np.ones(packed.valid.shape, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != packed.valid.shape:
        raise ModelError(f"weights have shape {w.shape}, panel needs {packed.valid.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ModelError("weights must be finite and nonnegative")
    return w


def transition_log_likelihood(params: ParameterSet, panel, designs, weights=None,
                              x_full=None) -> float:
    """Weighted log-likelihood of all state-to-state steps.

    The step from period t to t+1 contributes the Bernoulli log-mass of the
    realized move under the exit GLM (if the period-t state is public) or the
    return GLM (if private), weighted by the weight attached to cell (i, t).
    The two coefficient blocks enter separate terms, so each can be profiled
    on its own.
    """
    packed = _as_packed(panel)
    x = _complete_x(packed, x_full)
    w = _norm_weights(weights, packed)
    step = packed.valid[:, 1:] & packed.valid[:, :-1]    # both endpoints real
    if not np.any(step):
        return 0.0
    g0 = logistic(designs.exit_rows @ params.beta0)[:, :-1]
    g1 = logistic(designs.return_rows @ params.beta1)[:, :-1]
    x_now = x[:, :-1]
    moved = (x[:, 1:] != x_now)
    p_move = np.where(x_now == 0, g0, g1)
    term = np.where(moved, np.log(p_move), np.log1p(-p_move))
    return float(np.sum(w[:, :-1][step] * term[step]))


def emission_log_likelihood(eta, panel, designs, weights=None, x_full=None) -> float:
    """Weighted Bernoulli log-likelihood of traces on public-state periods.

    Private-state periods contribute nothing when consistent (their trace is
    deterministically 0) and raise ConstraintViolation otherwise.
    """
    packed = _as_packed(panel)
    x = _complete_x(packed, x_full)
    w = _norm_weights(weights, packed)
    eta = np.asarray(eta, dtype=np.float64)
    bad = packed.valid & (x == 1) & (packed.y == 1)
    if np.any(bad):
        i, k = np.argwhere(bad)[0]
        raise ConstraintViolation(
            f"individual {packed.ids[i]!r} at t={packed.t0[i] + k}: "
            "private state with a trace has probability zero"
        )
    pub = packed.valid & (x == 0)
    if not np.any(pub):
        return 0.0
    lam = logistic(designs.emission_rows @ eta)
    term = np.where(packed.y == 1, np.log(lam), np.log1p(-lam))
    return float(np.sum(w[pub] * term[pub]))

"""First-principles pH neutralization reactor.

Two-tank neutralization process: the reactor receives an acid stream q1, a
buffer stream q2 (disturbance d) and an alkaline stream q3 (control u); the
measured output is the pH of the effluent.  States are the two reaction
invariants x1, x2 and the liquid level x3:

    dx1 = q1/(A1 x3) (Wa1 - x1) + u/(A1 x3) (Wa3 - x1) + d/(A1 x3) (Wa2 - x1)
    dx2 = q1/(A1 x3) (Wb1 - x2) + u/(A1 x3) (Wb3 - x2) + d/(A1 x3) (Wb2 - x2)
    dx3 = (q1 + u + d - Cv4 (x3 + z)^n) / A1

and the pH solves the implicit charge balance

    c(x, y) = x1 + 10^(y-14) - 10^(-y)
              + x2 (1 + 2*10^(y-pK2)) / (1 + 10^(pK1-y) + 10^(y-pK2)) = 0.

Published tables of this benchmark circulate with inconsistent exponent
notation for the concentration parameters; `calibrate_params` settles the
interpretation at startup by checking the authoritative nominal condition
(pH = 7.0 at the nominal flow rates) and is the single source of the
default parameter record.
"""

import json
import logging
from dataclasses import dataclass, asdict

import numpy as np

from . import kernels
from .sysid import TimeSeries

log = logging.getLogger(__name__)


class LevelCollapseError(RuntimeError):
    """Liquid level reached zero; the model divides by x3."""


class OutputSolveError(RuntimeError):
    """The charge balance has no root in [0, 14] for this state."""


PARAM_KEYS = ("z", "Cv4", "n", "pK1", "pK2", "h1", "A1",
              "Wa1", "Wa2", "Wa3", "Wa4", "Wb1", "Wb2", "Wb3", "Wb4",
              "q1", "q2", "q3", "q4", "pH")


@dataclass(frozen=True)
class PhParams:
    """Reactor geometry, chemistry and nominal operating condition."""

    z: float
    Cv4: float
    n: float
    pK1: float
    pK2: float
    h1: float
    A1: float
    Wa1: float
    Wa2: float
    Wa3: float
    Wa4: float
    Wb1: float
    Wb2: float
    Wb3: float
    Wb4: float
    q1: float
    q2: float
    q3: float
    q4: float
    pH: float

    def __post_init__(self):
        if self.A1 <= 0 or self.Cv4 <= 0:
            raise ValueError("A1 and Cv4 must be positive")
        if not (0.0 < self.n <= 1.0):
            raise ValueError("valve exponent must lie in (0, 1]")
        if not (self.pK1 < self.pK2):
            raise ValueError("pK1 < pK2 required")

    def rhs_args(self):
        return (self.q1, self.A1, self.z, self.Cv4, self.n,
                self.Wa1, self.Wb1, self.Wa2, self.Wb2, self.Wa3, self.Wb3)


@dataclass
class PlantState:
    x1: float
    x2: float
    x3: float

    def __post_init__(self):
        if self.x3 <= 0.0:
            raise LevelCollapseError(f"liquid level x3 = {self.x3} is not positive")

    def as_array(self):
        return np.array([self.x1, self.x2, self.x3])


_COMMON = dict(z=11.5, Cv4=4.59, n=0.607, pK1=6.35, pK2=10.25, h1=14.0,
               A1=207.0, q1=16.6, q2=0.55, q3=15.6, q4=32.8, pH=7.0)

# Concentrations exactly as printed in circulating tables (dimensionless "eN"
# magnitudes) -- physically absurd molarities, kept for the calibration check.
PRINTED_CONCENTRATIONS = dict(Wa1=3e3, Wb1=0.0, Wa2=-3e3, Wb2=3e3,
                              Wa3=3.05e3, Wb3=5e1, Wa4=-4.32e2, Wb4=5.28e2)

# Same table with every exponent read as negative.
FLIPPED_CONCENTRATIONS = dict(Wa1=3e-3, Wb1=0.0, Wa2=-3e-3, Wb2=3e-3,
                              Wa3=3.05e-3, Wb3=5e-1, Wa4=-4.32e-2, Wb4=5.28e-2)

# Standard benchmark molarities; these reproduce the printed Wa4/Wb4
# mantissas (-4.32e-4, 5.28e-4), q4 = 32.8 mL/s and the level h1 = 14 cm.
STANDARD_CONCENTRATIONS = dict(Wa1=3e-3, Wb1=0.0, Wa2=-3e-2, Wb2=3e-2,
                               Wa3=-3.05e-3, Wb3=5e-5, Wa4=-4.32e-4, Wb4=5.28e-4)


def params_with(concentrations) -> PhParams:
    return PhParams(**_COMMON, **concentrations)


def output_residual(x1, x2, y, p: PhParams) -> float:
    """Charge balance c(x, y); strictly increasing in y for x2 >= 0."""
    return float(kernels.ph_c_residual(x1, x2, y, p.pK1, p.pK2))


def _mixing_equilibrium(p: PhParams, q3):
    """Closed-form steady state at flows (q1, q2, q3)."""
    qt = p.q1 + p.q2 + q3
    x1 = (p.q1 * p.Wa1 + p.q2 * p.Wa2 + q3 * p.Wa3) / qt
    x2 = (p.q1 * p.Wb1 + p.q2 * p.Wb2 + q3 * p.Wb3) / qt
    x3 = (qt / p.Cv4) ** (1.0 / p.n) - p.z
    return x1, x2, x3


@dataclass
class CalibrationReport:
    interpretation: str
    nominal_q3: float
    nominal_state: PlantState
    nominal_ph: float
    ph_at_table_q3: float


def _equilibrium_ph(p: PhParams, q3):
    x1, x2, x3 = _mixing_equilibrium(p, q3)
    if x3 <= 0:
        return np.nan
    return float(kernels.ph_output_solve(x1, x2, p.pK1, p.pK2))


def calibrate_params(tol=0.1) -> tuple[PhParams, CalibrationReport]:
    """Select the parameter interpretation consistent with pH 7 at nominal.

    Tries the printed concentration magnitudes, the sign-flipped exponents
    and the standard benchmark molarities; the first whose implied nominal
    equilibrium sits within `tol` of pH 7.0 wins.  The nominal base flow is
    then refined so the equilibrium pH is exactly 7.0 (the printed q3 is a
    rounded value).
    """
    candidates = [("printed", PRINTED_CONCENTRATIONS),
                  ("exponent-flipped", FLIPPED_CONCENTRATIONS),
                  ("standard-benchmark", STANDARD_CONCENTRATIONS)]
    for name, conc in candidates:
        p = params_with(conc)
        ph_table = _equilibrium_ph(p, p.q3)
        if np.isfinite(ph_table) and abs(ph_table - p.pH) < tol:
            from scipy.optimize import brentq
            q3_star = brentq(lambda q: _equilibrium_ph(p, q) - p.pH,
                             11.2, 17.2, xtol=1e-13, rtol=8.9e-16)
            x1, x2, x3 = _mixing_equilibrium(p, q3_star)
            state = PlantState(x1, x2, x3)
            ph_star = output_solve(state, p)
            log.info("pH parameter calibration: interpretation %r passes "
                     "(pH %.6f at table q3, nominal q3 refined to %.6f)",
                     name, ph_table, q3_star)
            return p, CalibrationReport(name, q3_star, state, ph_star, ph_table)
        log.info("pH parameter calibration: interpretation %r rejected "
                 "(equilibrium pH %s)", name, ph_table)
    raise ValueError("no parameter interpretation reproduces the nominal pH")


_CALIBRATED: tuple[PhParams, CalibrationReport] | None = None


def default_params() -> PhParams:
    global _CALIBRATED
    if _CALIBRATED is None:
        _CALIBRATED = calibrate_params()
    return _CALIBRATED[0]


def nominal_point(p: PhParams | None = None) -> tuple[PlantState, float]:
    """Calibrated nominal operating point: (state, base flow q3).

    The state solves xdot = 0 and the pH there is 7.0 to solver accuracy.
    """
    if p is None:
        p = default_params()
    if _CALIBRATED is not None and p is _CALIBRATED[0]:
        rep = _CALIBRATED[1]
        return PlantState(rep.nominal_state.x1, rep.nominal_state.x2,
                          rep.nominal_state.x3), rep.nominal_q3
    from scipy.optimize import brentq
    q3_star = brentq(lambda q: _equilibrium_ph(p, q) - p.pH,
                     11.2, 17.2, xtol=1e-13, rtol=8.9e-16)
    x1, x2, x3 = _mixing_equilibrium(p, q3_star)
    return PlantState(x1, x2, x3), q3_star


def ph_dynamics(s: PlantState, u, d, p: PhParams) -> np.ndarray:
    """State derivative at base flow u and buffer flow d."""
    if s.x3 <= 0.0:
        raise LevelCollapseError(f"liquid level x3 = {s.x3} is not positive")
    dx = kernels.ph_rhs(s.x1, s.x2, s.x3, float(u), float(d), *p.rhs_args())
    return np.array(dx)


def output_solve(s: PlantState, p: PhParams) -> float:
    """pH from the charge balance (bisection then Newton polish)."""
    y = kernels.ph_output_solve(s.x1, s.x2, p.pK1, p.pK2)
    if not np.isfinite(y):
        raise OutputSolveError(
            f"charge balance has no sign change on [0, 14] at state {s}")
    return float(y)


def integrate_step(s: PlantState, u, d, p: PhParams, tau_s, substeps=10) -> PlantState:
    """Classical RK4 over one sampling period with zero-order-hold inputs."""
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    x1, x2, x3 = kernels.rk4_ph(s.x1, s.x2, s.x3, float(u), float(d),
                                float(tau_s), int(substeps), *p.rhs_args())
    if x3 <= 0.0:
        raise LevelCollapseError("liquid level collapsed during integration")
    return PlantState(x1, x2, x3)


KNOWN_CHANNELS = ("output-additive", "input-additive", "q2-override")


@dataclass(frozen=True)
class DisturbanceEntry:
    start: float
    end: float
    channel: str
    value: float

    def __post_init__(self):
        if self.channel not in KNOWN_CHANNELS:
            raise ValueError(f"unknown disturbance channel {self.channel!r}")
        if not (self.start < self.end):
            raise ValueError("disturbance start must precede its end")


@dataclass
class DisturbanceSchedule:
    entries: list

    def __post_init__(self):
        self.entries = [e if isinstance(e, DisturbanceEntry) else DisturbanceEntry(*e)
                        for e in self.entries]
        for ch in KNOWN_CHANNELS:
            spans = sorted((e.start, e.end) for e in self.entries if e.channel == ch)
            for (s0, e0), (s1, _) in zip(spans, spans[1:]):
                if s1 < e0:
                    raise ValueError(f"overlapping {ch} disturbances")

    def at(self, t, channel, default=0.0):
        for e in self.entries:
            if e.channel == channel and e.start <= t < e.end:
                return e.value
        return default

    @classmethod
    def empty(cls):
        return cls([])


def run_experiment(u_signal, schedule: DisturbanceSchedule, p: PhParams,
                   tau_s=10.0, substeps=10, x0: PlantState | None = None,
                   noise_std_u=0.0, noise_std_y=0.0, seed=None) -> TimeSeries:
    """Open-loop ZOH simulation returning the measured record.

    The plant is driven by the commanded u plus any input-additive
    disturbance; q2-override replaces the buffer flow.  Measurement noise
    (physical units) and output-additive disturbances affect only the
    recorded channels.  Sample k holds t = k tau_s and the pH after the
    k-th hold period.
    """
    u_signal = np.asarray(u_signal, dtype=np.float64).ravel()
    K = u_signal.shape[0]
    if x0 is None:
        x0, _ = nominal_point(p)
    t = np.arange(K) * tau_s
    u_applied = np.array([u_signal[k] + schedule.at(t[k], "input-additive")
                          for k in range(K)])
    d_seq = np.array([schedule.at(t[k], "q2-override", p.q2) for k in range(K)])
    states, ys = kernels.ph_run(x0.x1, x0.x2, x0.x3, u_applied, d_seq,
                                float(tau_s), int(substeps),
                                *p.rhs_args(), p.pK1, p.pK2)
    if states[-1, 2] <= 0.0:
        raise LevelCollapseError("liquid level collapsed during the experiment")
    if np.any(~np.isfinite(ys)):
        raise OutputSolveError("charge balance lost its root during the experiment")
    y_meas = ys + np.array([schedule.at(t[k], "output-additive") for k in range(K)])
    rng = np.random.default_rng(seed)
    u_meas = u_signal.copy()
    if noise_std_u > 0.0:
        u_meas = u_meas + rng.normal(0.0, noise_std_u, K)
    if noise_std_y > 0.0:
        y_meas = y_meas + rng.normal(0.0, noise_std_y, K)
    return TimeSeries(t, u_meas.reshape(-1, 1), y_meas.reshape(-1, 1))


def save_params(p: PhParams, path):
    with open(path, "w") as fh:
        json.dump({k: asdict(p)[k] for k in PARAM_KEYS}, fh, indent=1)
        fh.write("\n")


def load_params(path) -> PhParams:
    with open(path) as fh:
        doc = json.load(fh)
    return PhParams(**{k: float(doc[k]) for k in PARAM_KEYS})

"""Plug-in functionals of the targeted survival curves with delta-method
inference.

Every functional is implemented as a smooth map of the stacked curve values
S(t, a); its influence values are the gradient-weighted combination of the
per-(t, a) survival influence values, which is exactly the functional delta
method. Ratio estimands get log-scale confidence intervals and p-values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .data import TrialDataset
from .errors import EstimationError, UndefinedEstimandError
from .tmle import TargetedFit, VariancePair, variance_pair

KINDS = ("survival", "rd", "rmst", "rr", "or", "wr")
_RATIO_KINDS = {"rr", "or", "wr"}
_DEFAULT_NULL = {"rd": 0.0, "rmst": 0.0, "rr": 1.0, "or": 1.0, "wr": 1.0, "survival": None}


@dataclass
class EstimandSpec:
    kind: str
    time: int                  # target time t*, or horizon tau for rmst/wr
    arm: int = 1               # used by 'survival' only
    alpha: float = 0.05
    null: float | None = None

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimand kind '{self.kind}'; expected one of {KINDS}")
        if self.null is None:
            self.null = _DEFAULT_NULL[self.kind]

    @property
    def required_times(self) -> list[int]:
        if self.kind in ("rmst", "wr"):
            return list(range(1, self.time + 1))
        return [self.time]

    def label(self) -> str:
        return f"{self.kind.upper()}(t={self.time})"


@dataclass
class EstimandResult:
    estimate: float
    if_values: np.ndarray
    variance_simple: float
    variance_stratified: float
    correction: float
    ci_low: float
    ci_high: float
    p_value: float | None
    metadata: dict = field(default_factory=dict)


def _curve(fit: TargetedFit, arm: int, times) -> np.ndarray:
    try:
        return np.array([fit.surv[(t, arm)] for t in times])
    except KeyError as exc:
        raise EstimationError(f"fit is missing target time {exc.args[0]}") from None


def _grad_and_value(fit: TargetedFit, spec: EstimandSpec):
    """Return (value, {(t, a): dg/dS(t,a)}) for the requested functional."""
    t = spec.time
    if spec.kind == "survival":
        s = _curve(fit, spec.arm, [t])[0]
        return s, {(t, spec.arm): 1.0}

    if spec.kind == "rd":
        s1 = _curve(fit, 1, [t])[0]
        s0 = _curve(fit, 0, [t])[0]
        return s1 - s0, {(t, 1): 1.0, (t, 0): -1.0}

    if spec.kind == "rmst":
        times = spec.required_times
        s1 = _curve(fit, 1, times)
        s0 = _curve(fit, 0, times)
        grad = {}
        for k, tt in enumerate(times):
            grad[(tt, 1)] = 1.0
            grad[(tt, 0)] = -1.0
        return float(np.sum(s1 - s0)), grad

    if spec.kind == "rr":
        s1 = _curve(fit, 1, [t])[0]
        s0 = _curve(fit, 0, [t])[0]
        if s0 < 1e-10:
            raise UndefinedEstimandError(f"risk ratio undefined: S(t={t}, a=0) = {s0:.3e}")
        return s1 / s0, {(t, 1): 1.0 / s0, (t, 0): -s1 / s0**2}

    if spec.kind == "or":
        s1 = _curve(fit, 1, [t])[0]
        s0 = _curve(fit, 0, [t])[0]
        if s0 < 1e-10 or (1.0 - s1) < 1e-10:
            raise UndefinedEstimandError(
                f"odds ratio undefined: S(t,0) = {s0:.3e}, 1 - S(t,1) = {1 - s1:.3e}"
            )
        value = (s1 / (1.0 - s1)) / (s0 / (1.0 - s0))
        grad = {
            (t, 1): (1.0 - s0) / (s0 * (1.0 - s1) ** 2),
            (t, 0): -s1 / (s0**2 * (1.0 - s1)),
        }
        return value, grad

    if spec.kind == "wr":
        times = spec.required_times
        tau = spec.time
        s1 = _curve(fit, 1, times)
        s0 = _curve(fit, 0, times)
        # S(t-1) with S(0) = 1
        s1_prev = np.concatenate([[1.0], s1[:-1]])
        s0_prev = np.concatenate([[1.0], s0[:-1]])
        df0 = s0_prev - s0            # P(T_0 = t), the plug-in marginal increment
        df1 = s1_prev - s1
        win = float(np.sum(s1 * df0))
        loss = float(np.sum(s0 * df1))
        if loss < 1e-10:
            raise UndefinedEstimandError(f"win ratio undefined: loss probability = {loss:.3e}")
        value = win / loss
        grad = {}
        for k, tt in enumerate(times):
            s1_next = s1[k + 1] if k + 1 < len(times) else 0.0
            s0_next = s0[k + 1] if k + 1 < len(times) else 0.0
            next_in_range = 1.0 if tt < tau else 0.0
            dw_ds1 = df0[k]
            dw_ds0 = next_in_range * s1_next - s1[k]
            dl_ds0 = df1[k]
            dl_ds1 = next_in_range * s0_next - s0[k]
            grad[(tt, 1)] = dw_ds1 / loss - win / loss**2 * dl_ds1
            grad[(tt, 0)] = dw_ds0 / loss - win / loss**2 * dl_ds0
        return value, grad

    raise ValueError(spec.kind)


def functional_value(fit: TargetedFit, spec: EstimandSpec) -> float:
    value, _ = _grad_and_value(fit, spec)
    return value


def functional_if(fit: TargetedFit, spec: EstimandSpec) -> np.ndarray:
    """Per-subject influence values: sum over (t, a) of dg/dS(t,a) * phi(t,a)."""
    _, grad = _grad_and_value(fit, spec)
    out = np.zeros(fit.n)
    for (t, a), coef in grad.items():
        out += coef * fit.eif[(t, a)]
    return out


def _aggregate_corrections(fit: TargetedFit, grad: dict) -> dict:
    """Arm-wise gradient-weighted correction aggregates: D~_i(a) = sum_t c_{t,a} D_i(t,a)."""
    by_arm: dict[int, np.ndarray] = {}
    for (t, a), coef in grad.items():
        by_arm.setdefault(a, np.zeros(fit.n))
        by_arm[a] += coef * fit.correction_values[(t, a)]
    return by_arm


def estimand_variance(fit: TargetedFit, spec: EstimandSpec) -> tuple[np.ndarray, VariancePair]:
    _, grad = _grad_and_value(fit, spec)
    if_values = np.zeros(fit.n)
    for (t, a), coef in grad.items():
        if_values += coef * fit.eif[(t, a)]
    vp = variance_pair(fit, if_values, _aggregate_corrections(fit, grad))
    return if_values, vp


def estimate(fit: TargetedFit, ds: TrialDataset, spec: EstimandSpec,
             flavor: str = "stratified") -> EstimandResult:
    """Point estimate, CI, and two-sided p-value for one functional.

    ``flavor`` selects which variance enters the CI ('simple' or
    'stratified'); both values are always reported. Ratio estimands build
    the CI on the log scale and exponentiate.
    """
    if flavor not in ("simple", "stratified"):
        raise ValueError("flavor must be 'simple' or 'stratified'")
    value, grad = _grad_and_value(fit, spec)
    if_values = np.zeros(fit.n)
    for (t, a), coef in grad.items():
        if_values += coef * fit.eif[(t, a)]
    vp = variance_pair(fit, if_values, _aggregate_corrections(fit, grad))
    v_used = vp.v_stratified if flavor == "stratified" else vp.v_simple
    n = fit.n
    z = ndtri(1.0 - spec.alpha / 2.0)
    se = np.sqrt(v_used / n)

    metadata = {"flavor": flavor, "kind": spec.kind, "time": spec.time, "alpha": spec.alpha}
    if spec.kind == "rmst":
        times = spec.required_times
        metadata["rmst_arm1"] = float(np.sum(_curve(fit, 1, times)))
        metadata["rmst_arm0"] = float(np.sum(_curve(fit, 0, times)))

    if spec.kind in _RATIO_KINDS:
        if value <= 0.0:
            raise UndefinedEstimandError(f"{spec.kind} estimate {value:.3e} is not positive")
        se_log = se / value
        log_val = np.log(value)
        ci_low = float(np.exp(log_val - z * se_log))
        ci_high = float(np.exp(log_val + z * se_log))
        if spec.null is not None and se_log > 0:
            z_stat = (log_val - np.log(spec.null)) / se_log
            p_value = float(2.0 * (1.0 - ndtr(abs(z_stat))))
        else:
            p_value = None
        metadata["ci_scale"] = "log"
    else:
        ci_low = float(value - z * se)
        ci_high = float(value + z * se)
        if spec.null is not None and se > 0:
            z_stat = (value - spec.null) / se
            p_value = float(2.0 * (1.0 - ndtr(abs(z_stat))))
        else:
            p_value = None
        metadata["ci_scale"] = "natural"

    return EstimandResult(
        estimate=float(value),
        if_values=if_values,
        variance_simple=vp.v_simple,
        variance_stratified=vp.v_stratified,
        correction=vp.correction,
        ci_low=ci_low,
        ci_high=ci_high,
        p_value=p_value,
        metadata=metadata,
    )

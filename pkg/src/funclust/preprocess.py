"""Per-subject preparation of raw series: rescale, landmark warp, center.

The covariate vector of a subject is assembled from its raw series (mean
level and length) plus externally supplied fields such as ``min_ar``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DomainError, InvalidSpecError, MissingCovariateError

logger = logging.getLogger(__name__)

DEFAULT_WARP_TARGET = 0.2944

# order of the covariates as the derived quantities are introduced
COVARIATE_ORDER = ("mean_gray", "width", "min_ar")
# order used for the covariance-matrix labelling (indices p+1..p+3)
FIGURE_COVARIATE_ORDER = ("min_ar", "width", "mean_gray")


class TooShortError(InvalidSpecError):
    pass


@dataclass
class RawSeries:
    subject_id: Hashable
    values: NDArray
    landmark: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    @property
    def n(self) -> int:
        return len(self.values)

    def is_complete(self) -> bool:
        return self.n > 0 and bool(np.all(np.isfinite(self.values)))


@dataclass
class CurveObservation:
    """One subject: its time grid on [0, 1], values and optional covariates."""

    subject_id: Hashable
    times: NDArray
    values: NDArray
    covariates: NDArray | None = None
    covariate_names: tuple = field(default=())

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.covariates is not None:
            self.covariates = np.atleast_1d(np.asarray(self.covariates, dtype=float))
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise InvalidSpecError(f"subject {self.subject_id!r}: times and values differ in shape")
        if len(self.times) == 0:
            raise InvalidSpecError(f"subject {self.subject_id!r}: no observations")
        if np.any(self.times < 0) or np.any(self.times > 1) or np.any(np.diff(self.times) <= 0):
            raise DomainError(f"subject {self.subject_id!r}: times must increase strictly within [0, 1]")

    @property
    def n(self) -> int:
        return len(self.times)

    @property
    def r(self) -> int:
        return 0 if self.covariates is None else len(self.covariates)


def rescale_times(n: int) -> NDArray:
    """Evenly spaced positions ``(j - 1) / (n - 1)``, ``j = 1..n``."""
    if n < 2:
        raise TooShortError(f"a series needs at least 2 observations, got {n}")
    return np.arange(n) / (n - 1.0)


def landmark_warp(t_tilde: ArrayLike, landmark: float, target: float = DEFAULT_WARP_TARGET):
    """Piecewise-linear warp sending 0 -> 0, ``landmark`` -> ``target``, 1 -> 1."""
    if not 0.0 < landmark < 1.0:
        raise DomainError(f"landmark must lie in (0, 1), got {landmark!r}")
    if not 0.0 < target < 1.0:
        raise DomainError(f"warp target must lie in (0, 1), got {target!r}")
    t = np.asarray(t_tilde, dtype=float)
    below = target / landmark
    above = (1.0 - target) / (1.0 - landmark)
    out = np.where(t < landmark, t * below, (t - 1.0) * above + 1.0)
    return float(out) if out.ndim == 0 else out


def center_values(values: ArrayLike) -> tuple[NDArray, float]:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise InvalidSpecError("cannot center an empty series")
    mean = float(np.mean(values))
    centered = values - mean
    # a second pass removes the rounding left by the first subtraction
    return centered - np.mean(centered), mean


def build_covariates(
    raw: RawSeries,
    extra: Mapping[str, float] | None = None,
    order: Sequence[str] = COVARIATE_ORDER,
) -> NDArray:
    """Covariate vector of one subject.

    ``mean_gray`` and ``width`` are derived from the series; every other
    name in ``order`` must be present in ``extra``.
    """
    extra = {} if extra is None else extra
    derived = {"mean_gray": float(np.mean(raw.values)), "width": float(raw.n)}
    out = []
    for name in order:
        if name in derived:
            out.append(derived[name])
            continue
        value = extra.get(name)
        if value is None or not np.isfinite(value):
            raise MissingCovariateError(name, raw.subject_id)
        out.append(float(value))
    return np.array(out)


@dataclass
class PrepareReport:
    total: int = 0
    retained: int = 0
    dropped_missing: list = field(default_factory=list)
    dropped_short: list = field(default_factory=list)
    dropped_no_landmark: list = field(default_factory=list)
    dropped_no_covariate: list = field(default_factory=list)
    unwarped: list = field(default_factory=list)

    @property
    def dropped(self) -> int:
        return (
            len(self.dropped_missing)
            + len(self.dropped_short)
            + len(self.dropped_no_landmark)
            + len(self.dropped_no_covariate)
        )

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "retained": self.retained,
            "dropped": self.dropped,
            "dropped_missing": [str(s) for s in self.dropped_missing],
            "dropped_short": [str(s) for s in self.dropped_short],
            "dropped_no_landmark": [str(s) for s in self.dropped_no_landmark],
            "dropped_no_covariate": [str(s) for s in self.dropped_no_covariate],
            "unwarped": len(self.unwarped),
        }


def standardize_covariates(observations: Sequence[CurveObservation]):
    """Z-score every covariate column across subjects.

    Returns the rescaled observations with the column means and standard
    deviations. Constant columns are centered only.
    """
    if not observations or observations[0].covariates is None:
        return list(observations), np.zeros(0), np.zeros(0)
    X = np.array([o.covariates for o in observations])
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    out = [
        CurveObservation(o.subject_id, o.times, o.values, (x - center) / scale, o.covariate_names)
        for o, x in zip(observations, X)
    ]
    return out, center, scale


def prepare_subject(
    raw: RawSeries,
    warp_target: float | None = DEFAULT_WARP_TARGET,
    covariates: NDArray | None = None,
    covariate_names: tuple = (),
    center: bool = True,
) -> CurveObservation:
    """Rescale, warp (when a landmark is known) and center one series."""
    times = rescale_times(raw.n)
    if raw.landmark is not None and warp_target is not None:
        times = landmark_warp(times, raw.landmark, warp_target)
    values = center_values(raw.values)[0] if center else raw.values.copy()
    return CurveObservation(raw.subject_id, times, values, covariates, tuple(covariate_names))


def prepare_all(
    raws: Sequence[RawSeries],
    extras: Mapping[Hashable, Mapping[str, float]] | None = None,
    covariate_order: Sequence[str] | None = None,
    warp_target: float | None = DEFAULT_WARP_TARGET,
    min_obs: int = 4,
    landmark_policy: str = "bypass",
    center: bool = True,
) -> tuple[list[CurveObservation], PrepareReport]:
    """Run the pipeline over many subjects.

    Subjects with any non-finite value, fewer than ``min_obs`` points, or (when
    covariates are requested) a missing external covariate are dropped, never
    imputed. ``landmark_policy`` is ``"bypass"`` (keep the rescaled grid) or
    ``"exclude"`` for subjects without a landmark.
    """
    if landmark_policy not in ("bypass", "exclude"):
        raise InvalidSpecError(f"unknown landmark policy {landmark_policy!r}")
    min_obs = max(int(min_obs), 2)
    extras = {} if extras is None else extras
    report = PrepareReport(total=len(raws))
    out = []
    for raw in raws:
        sid = raw.subject_id
        if not raw.is_complete():
            report.dropped_missing.append(sid)
            continue
        if raw.n < min_obs:
            report.dropped_short.append(sid)
            continue
        if raw.landmark is None and warp_target is not None:
            if landmark_policy == "exclude":
                report.dropped_no_landmark.append(sid)
                continue
            report.unwarped.append(sid)
        cov = None
        if covariate_order:
            try:
                cov = build_covariates(raw, extras.get(sid, {}), covariate_order)
            except MissingCovariateError:
                report.dropped_no_covariate.append(sid)
                continue
        out.append(prepare_subject(raw, warp_target, cov, tuple(covariate_order or ()), center))
    report.retained = len(out)
    if report.dropped_short:
        logger.warning("dropped %d subjects as too short (fewer than %d observations)", len(report.dropped_short), min_obs)
    if report.dropped_missing:
        logger.warning("dropped %d subjects with missing values", len(report.dropped_missing))
    if report.dropped_no_covariate:
        logger.warning("dropped %d subjects lacking a required covariate", len(report.dropped_no_covariate))
    if report.unwarped:
        logger.warning("%d subjects have no landmark and were not warped", len(report.unwarped))
    return out, report

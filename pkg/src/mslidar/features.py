"""Spectral features and feature-matrix assembly.

Reflectance arrives in decibels; the vegetation index is computed in
linear units (conversion 10^(dB/10)), so a common dB offset on both
channels cancels. Spectral columns are then made comparable by robust
scaling: clip to the training split's [p1, p99] and min-max to [0, 1].
Coordinate columns are not normalized: XY is recentered per assembled
cloud and z is replaced by height above terrain.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .cloud import PointCloud
from .errors import DataError, NumericError

logger = logging.getLogger(__name__)

# Fixed ordering of spectral columns everywhere: green, NIR, index.
SPECTRAL_ORDER = ("refl_green_db", "refl_nir_db", "pndvi")


def db_to_linear(r_db):
    """Convert reflectance from decibels to linear units: 10^(r/10).

    Strictly positive and strictly increasing. Raises NumericError on
    non-finite input; NaN missing-value markers must be handled by the
    caller (see :func:`pndvi`).
    """
    arr = np.asarray(r_db, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("db_to_linear requires finite dB values")
    out = np.power(10.0, arr / 10.0)
    return float(out) if np.isscalar(r_db) else out


def linear_to_db(r_lin):
    """Inverse of :func:`db_to_linear`: 10*log10(r)."""
    arr = np.asarray(r_lin, dtype=np.float64)
    if not np.all(arr > 0):
        raise NumericError("linear reflectance must be strictly positive")
    out = 10.0 * np.log10(arr)
    return float(out) if np.isscalar(r_lin) else out


def pndvi(nir_db, green_db):
    """Pseudo-NDVI from dB reflectances: (NIR - green)/(NIR + green) in
    linear units.

    The denominator is strictly positive because 10^x > 0, so the result
    lies in (-1, 1). NaN inputs (missing cross-channel reflectance) yield
    NaN, the missing marker imputed later; infinities are rejected.
    """
    n = np.asarray(nir_db, dtype=np.float64)
    g = np.asarray(green_db, dtype=np.float64)
    if np.any(np.isinf(n)) or np.any(np.isinf(g)):
        raise NumericError("pndvi requires finite dB values (NaN = missing)")
    n_lin = np.power(10.0, n / 10.0)
    g_lin = np.power(10.0, g / 10.0)
    out = (n_lin - g_lin) / (n_lin + g_lin)
    if np.isscalar(nir_db) and np.isscalar(green_db):
        return float(out)
    return out


def add_pndvi(cloud: PointCloud) -> PointCloud:
    """Attach the pndvi column computed from the merged spectral columns."""
    cloud.require("refl_green_db", "refl_nir_db")
    values = pndvi(
        cloud.refl_nir_db.astype(np.float64), cloud.refl_green_db.astype(np.float64)
    )
    return cloud.with_column("pndvi", values.astype(np.float32))


class FeatureConfig(Enum):
    """The six ablation feature sets: coordinates plus spectral subsets."""

    XYZ = ()
    XYZ_GREEN = ("refl_green_db",)
    XYZ_NIR = ("refl_nir_db",)
    XYZ_PNDVI = ("pndvi",)
    XYZ_GREEN_NIR = ("refl_green_db", "refl_nir_db")
    XYZ_GREEN_NIR_PNDVI = ("refl_green_db", "refl_nir_db", "pndvi")

    @property
    def spectral_columns(self) -> tuple[str, ...]:
        return self.value

    @property
    def dimension(self) -> int:
        return 3 + len(self.value)

    @classmethod
    def from_name(cls, name: str) -> "FeatureConfig":
        key = name.strip().upper().replace("+", "_").replace("-", "_")
        if key.startswith("XYZ_") or key == "XYZ":
            pass
        else:
            key = "XYZ_" + key if key else "XYZ"
        try:
            return cls[key]
        except KeyError:
            valid = ", ".join(c.name for c in cls)
            raise DataError(f"unknown feature config {name!r}; one of: {valid}") from None


ALL_CONFIGS = tuple(FeatureConfig)


@dataclass(frozen=True)
class NormalizationParams:
    """Robust per-column scaling fitted on the training split only."""

    columns: tuple[str, ...]
    p_low: float
    p_high: float
    lo: np.ndarray       # value at p_low per column
    hi: np.ndarray       # value at p_high per column
    impute: np.ndarray   # training median per column, fills NaN

    def to_json(self) -> str:
        return json.dumps(
            {
                "columns": list(self.columns),
                "p_low": self.p_low,
                "p_high": self.p_high,
                "lo": [float(v) for v in self.lo],
                "hi": [float(v) for v in self.hi],
                "impute": [float(v) for v in self.impute],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "NormalizationParams":
        d = json.loads(text)
        return cls(
            columns=tuple(d["columns"]),
            p_low=float(d["p_low"]),
            p_high=float(d["p_high"]),
            lo=np.asarray(d["lo"], dtype=np.float64),
            hi=np.asarray(d["hi"], dtype=np.float64),
            impute=np.asarray(d["impute"], dtype=np.float64),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NormalizationParams":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def fit_normalization(
    features: np.ndarray,
    columns: tuple[str, ...] | None = None,
    p_low: float = 1.0,
    p_high: float = 99.0,
) -> NormalizationParams:
    """Fit robust scaling on training features (one column per feature).

    NaN entries (missing markers) are excluded from the percentiles and
    the imputation median. A constant column gets lo == hi and maps to
    0.5 under apply, with a warning here.
    """
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if feats.shape[0] < 2:
        raise DataError("need at least 2 rows to fit normalization")
    if not p_low < p_high:
        raise DataError("p_low must be below p_high")
    if columns is None:
        columns = tuple(f"col{i}" for i in range(feats.shape[1]))
    if np.isnan(feats).all(axis=0).any():
        raise DataError("a feature column holds no observed values at all")
    lo = np.nanpercentile(feats, p_low, axis=0)
    hi = np.nanpercentile(feats, p_high, axis=0)
    impute = np.nanmedian(feats, axis=0)
    for j in np.nonzero(hi <= lo)[0]:
        logger.warning(
            "feature column %r is constant on the training split; "
            "it will normalize to 0.5", columns[j],
        )
    return NormalizationParams(
        columns=tuple(columns), p_low=p_low, p_high=p_high,
        lo=lo, hi=hi, impute=impute,
    )


def apply_normalization(features: np.ndarray, params: NormalizationParams) -> np.ndarray:
    """Impute NaN with the training median, clip to [lo, hi], scale to [0, 1]."""
    feats = np.array(np.atleast_2d(features), dtype=np.float64)
    if feats.shape[1] != params.lo.shape[0]:
        raise DataError(
            f"feature count {feats.shape[1]} does not match fitted params "
            f"({params.lo.shape[0]} columns)"
        )
    nan_mask = np.isnan(feats)
    if nan_mask.any():
        feats[nan_mask] = np.broadcast_to(params.impute, feats.shape)[nan_mask]
    span = params.hi - params.lo
    out = np.empty_like(feats)
    for j in range(feats.shape[1]):
        if span[j] > 0:
            out[:, j] = (np.clip(feats[:, j], params.lo[j], params.hi[j]) - params.lo[j]) / span[j]
        else:
            out[:, j] = 0.5
    return out


@dataclass(frozen=True)
class FeatureMatrix:
    """Finite n x d matrix plus the provenance needed to rebuild it."""

    values: np.ndarray
    columns: tuple[str, ...]
    config: FeatureConfig
    center: tuple[float, float]
    params: NormalizationParams | None

    @property
    def dimension(self) -> int:
        return int(self.values.shape[1])


def spectral_matrix(cloud: PointCloud, config: FeatureConfig) -> np.ndarray:
    """Raw (possibly NaN-holding) spectral columns for a config, in order."""
    cols = []
    for name in config.spectral_columns:
        if not cloud.has(name):
            raise DataError(
                f"feature config {config.name} requires column {name!r}, "
                "which is missing from the cloud"
            )
        cols.append(cloud.column(name).astype(np.float64))
    if not cols:
        return np.empty((cloud.count, 0), dtype=np.float64)
    return np.column_stack(cols)


def fit_config_normalization(
    train_cloud: PointCloud, config: FeatureConfig,
    p_low: float = 1.0, p_high: float = 99.0,
) -> NormalizationParams:
    """Fit spectral-column normalization on the training split."""
    return fit_normalization(
        spectral_matrix(train_cloud, config), config.spectral_columns,
        p_low=p_low, p_high=p_high,
    )


def assemble_features(
    cloud: PointCloud,
    config: FeatureConfig,
    params: NormalizationParams | None = None,
    center: tuple[float, float] | None = None,
) -> FeatureMatrix:
    """Build the feature matrix [x_centered, y_centered, h_norm, spectral...].

    Spectral columns are normalized with `params` (fitted on train);
    configs without spectral columns need no params. The result holds no
    NaN or Inf.
    """
    cloud.require("h_norm")
    if config.spectral_columns and params is None:
        raise DataError(f"config {config.name} requires normalization params")
    if params is not None and tuple(params.columns) != config.spectral_columns:
        raise DataError(
            f"params fitted for columns {params.columns}, "
            f"config {config.name} needs {config.spectral_columns}"
        )
    if center is None:
        center = (float(cloud.x.mean()), float(cloud.y.mean()))
    base = np.column_stack(
        (cloud.x - center[0], cloud.y - center[1], cloud.h_norm.astype(np.float64))
    )
    if config.spectral_columns:
        spec = apply_normalization(spectral_matrix(cloud, config), params)
        values = np.column_stack((base, spec))
    else:
        values = base
    if not np.all(np.isfinite(values)):
        raise NumericError("feature matrix contains non-finite values")
    columns = ("x_centered", "y_centered", "h_norm") + config.spectral_columns
    return FeatureMatrix(
        values=values, columns=columns, config=config, center=center, params=params
    )

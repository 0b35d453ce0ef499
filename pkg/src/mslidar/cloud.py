"""Columnar point-cloud data model and exact spatial indexing.

A :class:`PointCloud` is a struct-of-arrays container: coordinates are
float64, spectral attributes float32, enums uint8. Optional columns are
either present for every point or absent entirely; missing *values*
inside a present spectral column (e.g. no cross-channel neighbor during
merging) are encoded as NaN.

:class:`SpatialIndex` wraps a k-d tree and guarantees results identical
to a brute-force scan, including deterministic tie-breaking by point id.
"""

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError


class Channel(IntEnum):
    """Scanner wavelength of a point: 532 nm (green) or 1064 nm (NIR)."""

    GREEN_532 = 0
    NIR_1064 = 1


class Label(IntEnum):
    NON_TREE = 0
    TREE = 1
    UNLABELED = 255


# Optional attribute columns and their storage dtypes. Order matters: it is
# the canonical column order of the MST1 file format.
OPTIONAL_COLUMNS: dict[str, np.dtype] = {
    "reflectance_db": np.dtype(np.float32),
    "label": np.dtype(np.uint8),
    "ground_flag": np.dtype(bool),
    "h_norm": np.dtype(np.float32),
    "refl_green_db": np.dtype(np.float32),
    "refl_nir_db": np.dtype(np.float32),
    "pndvi": np.dtype(np.float32),
}

# Spectral columns where NaN marks a missing value (no cross-channel
# neighbor within the merge radius).
NAN_OK_COLUMNS = ("refl_green_db", "refl_nir_db", "pndvi")


def _as_column(name: str, values, dtype: np.dtype, n: int) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=dtype)
    if arr.ndim != 1:
        raise DataError(f"column {name!r} must be one-dimensional")
    if arr.shape[0] != n:
        raise DataError(
            f"column {name!r} has length {arr.shape[0]}, expected {n}"
        )
    return arr


@dataclass
class PointCloud:
    """Columnar point cloud. All present columns have identical length."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    channel: np.ndarray
    reflectance_db: np.ndarray | None = None
    label: np.ndarray | None = None
    ground_flag: np.ndarray | None = None
    h_norm: np.ndarray | None = None
    refl_green_db: np.ndarray | None = None
    refl_nir_db: np.ndarray | None = None
    pndvi: np.ndarray | None = None
    crs_note: str = ""

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64).ravel()
        n = self.x.shape[0]
        self.y = _as_column("y", self.y, np.dtype(np.float64), n)
        self.z = _as_column("z", self.z, np.dtype(np.float64), n)
        self.channel = _as_column("channel", self.channel, np.dtype(np.uint8), n)
        for name, dtype in OPTIONAL_COLUMNS.items():
            col = getattr(self, name)
            if col is not None:
                setattr(self, name, _as_column(name, col, dtype, n))

    @property
    def count(self) -> int:
        return int(self.x.shape[0])

    def __len__(self) -> int:
        return self.count

    @property
    def xyz(self) -> np.ndarray:
        """Coordinates as an (n, 3) float64 array (copies)."""
        return np.column_stack((self.x, self.y, self.z))

    def has(self, name: str) -> bool:
        return getattr(self, name, None) is not None

    @property
    def present_columns(self) -> tuple[str, ...]:
        return tuple(c for c in OPTIONAL_COLUMNS if self.has(c))

    def require(self, *names: str) -> None:
        for name in names:
            if not self.has(name):
                raise DataError(f"point cloud lacks required column {name!r}")

    def column(self, name: str) -> np.ndarray:
        if name in ("x", "y", "z", "channel"):
            return getattr(self, name)
        self.require(name)
        return getattr(self, name)

    def with_column(self, name: str, values) -> "PointCloud":
        """Return a copy of the cloud with one column added or replaced."""
        cols = self._column_dict()
        cols[name] = values
        return PointCloud(crs_note=self.crs_note, **cols)

    def _column_dict(self) -> dict[str, np.ndarray]:
        cols = {"x": self.x, "y": self.y, "z": self.z, "channel": self.channel}
        for name in OPTIONAL_COLUMNS:
            if self.has(name):
                cols[name] = getattr(self, name)
        return cols

    def take(self, indices) -> "PointCloud":
        """Subset by an index array or boolean mask; keeps all columns."""
        indices = np.asarray(indices)
        cols = {k: v[indices] for k, v in self._column_dict().items()}
        return PointCloud(crs_note=self.crs_note, **cols)

    def validate(self) -> None:
        """Check the data-model invariants; raise DataError on violation."""
        for name in ("x", "y", "z"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"non-finite values in coordinate column {name!r}")
        bad = ~np.isin(self.channel, (int(Channel.GREEN_532), int(Channel.NIR_1064)))
        if bad.any():
            raise DataError("channel column contains values other than 532/1064 tags")
        if self.has("label"):
            valid = (int(Label.NON_TREE), int(Label.TREE), int(Label.UNLABELED))
            if not np.all(np.isin(self.label, valid)):
                raise DataError("label column contains undefined class values")
        if self.has("h_norm") and not np.all(np.isfinite(self.h_norm)):
            raise DataError("h_norm column contains non-finite values")
        if self.has("pndvi"):
            vals = self.pndvi[~np.isnan(self.pndvi)]
            if vals.size and (vals.min() < -1.0 or vals.max() > 1.0):
                raise DataError("pndvi values outside [-1, 1]")


def concat(clouds: Sequence[PointCloud]) -> PointCloud:
    """Concatenate clouds with identical column presence."""
    if not clouds:
        raise DataError("cannot concatenate zero clouds")
    present = clouds[0].present_columns
    for c in clouds[1:]:
        if c.present_columns != present:
            raise DataError(
                "cannot concatenate clouds with differing columns: "
                f"{present} vs {c.present_columns}"
            )
    cols = {
        k: np.concatenate([c._column_dict()[k] for c in clouds])
        for k in clouds[0]._column_dict()
    }
    return PointCloud(crs_note=clouds[0].crs_note, **cols)


# Relative slack applied when collecting tie candidates from the k-d tree.
# Own-formula distances and the tree's internal distances agree to a few
# ulps; 1e-9 is orders of magnitude above that.
_TIE_SLACK = 1e-9


@dataclass(frozen=True)
class SpatialIndex:
    """Immutable exact-neighbor index over a PointCloud snapshot.

    Queries return original point ids of the indexed cloud, sorted by
    ascending 3D Euclidean distance with ties broken by lower id, and are
    bit-identical to a brute-force scan.
    """

    ids: np.ndarray            # original point ids of indexed points
    points: np.ndarray         # (m, 3) coordinates of indexed points
    tree: cKDTree = field(repr=False)

    @property
    def size(self) -> int:
        return int(self.ids.shape[0])

    def _exact_sorted(self, q: np.ndarray, cand: np.ndarray):
        """Distances to candidate rows, sorted by (distance, id)."""
        d = np.sqrt(np.sum((self.points[cand] - q) ** 2, axis=1))
        order = np.lexsort((self.ids[cand], d))
        return cand[order], d[order]

    def radius_neighbors(
        self, q, r: float, k_max: int | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """All indexed points within distance <= r of q.

        Returns (ids, distances) sorted ascending by distance, ties by
        lower id, truncated to the k_max nearest when k_max is given.
        """
        if not r > 0:
            raise ValueError("radius must be positive")
        if k_max is not None and k_max < 1:
            raise ValueError("k_max must be >= 1")
        q = np.asarray(q, dtype=np.float64).ravel()
        cand = np.asarray(
            self.tree.query_ball_point(q, r * (1.0 + _TIE_SLACK) + 1e-12),
            dtype=np.int64,
        )
        if cand.size == 0:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
        sub, d = self._exact_sorted(q, cand)
        keep = d <= r
        sub, d = sub[keep], d[keep]
        if k_max is not None:
            sub, d = sub[:k_max], d[:k_max]
        return self.ids[sub], d

    def knn(self, q, k: int) -> tuple[np.ndarray, np.ndarray]:
        """The k nearest indexed points to q (fewer if the index is smaller)."""
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(q, dtype=np.float64).ravel()
        k_eff = min(k, self.size)
        d_tree, _ = self.tree.query(q, k=k_eff)
        dmax = float(np.max(np.atleast_1d(d_tree)))
        cand = np.asarray(
            self.tree.query_ball_point(q, dmax * (1.0 + _TIE_SLACK) + 1e-12),
            dtype=np.int64,
        )
        sub, d = self._exact_sorted(q, cand)
        sub, d = sub[:k_eff], d[:k_eff]
        return self.ids[sub], d

    def knn_batch(
        self, qs: np.ndarray, k: int, radius: float | None = None, workers: int = 1
    ) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized up-to-k-nearest query for many points at once.

        Returns (distances, ids) of shape (n, k); entries beyond the number
        of neighbors found (or outside `radius`, inclusive) hold inf and -1.
        Tie ordering at the k-th rank follows the k-d tree traversal; use
        :meth:`knn` where id tie-breaking must match the brute-force oracle.
        """
        qs = np.asarray(qs, dtype=np.float64)
        if qs.ndim != 2:
            raise ValueError("knn_batch expects an (n, 3) query array")
        k_eff = min(k, self.size)
        bound = np.inf if radius is None else np.nextafter(radius, np.inf)
        d, idx = self.tree.query(
            qs, k=k_eff, distance_upper_bound=bound, workers=workers
        )
        if k_eff == 1:  # scipy squeezes the k axis for scalar k=1
            d = d[:, None]
            idx = idx[:, None]
        missing = ~np.isfinite(d)
        if radius is not None:
            missing |= d > radius
        out_ids = np.where(missing, -1, self.ids[np.where(missing, 0, idx)])
        d = np.where(missing, np.inf, d)
        if k_eff < k:
            pad = ((0, 0), (0, k - k_eff))
            d = np.pad(d, pad, constant_values=np.inf)
            out_ids = np.pad(out_ids, pad, constant_values=-1)
        return d, out_ids


def build_index(
    cloud: PointCloud, channel_filter: Channel | int | None = None
) -> SpatialIndex:
    """Build an exact spatial index, optionally over one channel only."""
    if cloud.count == 0:
        raise DataError("cannot index an empty point cloud")
    if channel_filter is None:
        ids = np.arange(cloud.count, dtype=np.int64)
    else:
        ids = np.nonzero(cloud.channel == int(channel_filter))[0].astype(np.int64)
        if ids.size == 0:
            raise DataError(
                f"no points with channel {int(channel_filter)} to index"
            )
    pts = cloud.xyz[ids]
    return SpatialIndex(ids=ids, points=pts, tree=cKDTree(pts))

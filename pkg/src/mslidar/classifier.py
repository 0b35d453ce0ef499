"""Binary tree/non-tree point classification.

A point-wise MLP over the assembled features plus local neighborhood
aggregates (means/stds of the spectral columns, height range and point
count over the <=16 nearest neighbors within 2 m). The aggregates hand
the point-wise learner the spatial context a point-cloud network gets
architecturally, which is all the ablation logic needs.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import Label, PointCloud, build_index
from .columnar import read_labels
from .errors import DataError
from .features import FeatureConfig, FeatureMatrix
from .mlp import Mlp

CHECKPOINT_MAGIC = b"MSTM"
CHECKPOINT_VERSION = 1


def compute_class_weights(labels: np.ndarray) -> np.ndarray:
    """Inverse-frequency class weights, normalized to mean 1.

    w_c = N_total / (2 * N_c), then divided by mean(w). The minority
    class is up-weighted; the w_tree/w_nontree ratio equals the inverse
    frequency ratio.
    """
    labels = np.asarray(labels)
    counts = np.array(
        [(labels == int(Label.NON_TREE)).sum(), (labels == int(Label.TREE)).sum()],
        dtype=np.float64,
    )
    if np.any(counts == 0):
        raise DataError("class weights need both classes in the training labels")
    w = counts.sum() / (2.0 * counts)
    return w / w.mean()


def neighborhood_graph(
    cloud: PointCloud, k: int = 16, radius: float = 2.0, workers: int = 1
) -> np.ndarray:
    """Indices of the <=k nearest points within `radius`, self included.

    Returns an (n, k) int64 array padded with -1. Row i always contains
    i itself (distance zero), so every neighborhood has >= 1 member.
    Depends only on the geometry, so one graph serves every feature
    config of the same cloud.
    """
    index = build_index(cloud)
    _, ids = index.knn_batch(cloud.xyz, k=k, radius=radius, workers=workers)
    return ids


def neighborhood_stats(fm: FeatureMatrix, graph: np.ndarray) -> FeatureMatrix:
    """Append per-point neighborhood aggregates to a feature matrix.

    For each spectral column: mean and population std over the
    neighborhood. Always: local h_norm range (max - min) and neighbor
    count. Statistics are computed on the normalized feature values, so
    every appended column is already scale-comparable.
    """
    if graph.shape[0] != fm.values.shape[0]:
        raise DataError("neighborhood graph and features disagree on point count")
    valid = graph >= 0
    safe = np.where(valid, graph, 0)
    counts = valid.sum(axis=1).astype(np.float64)

    cols = [fm.values]
    names = list(fm.columns)
    for ci in range(3, fm.values.shape[1]):
        vals = fm.values[:, ci][safe]
        vals = np.where(valid, vals, 0.0)
        mean = vals.sum(axis=1) / counts
        sq = np.where(valid, np.square(fm.values[:, ci][safe]), 0.0)
        var = np.maximum(sq.sum(axis=1) / counts - np.square(mean), 0.0)
        cols.append(np.column_stack((mean, np.sqrt(var))))
        names += [f"{fm.columns[ci]}_nmean", f"{fm.columns[ci]}_nstd"]

    h = fm.values[:, 2][safe]
    hmax = np.where(valid, h, -np.inf).max(axis=1)
    hmin = np.where(valid, h, np.inf).min(axis=1)
    cols.append(np.column_stack((hmax - hmin, counts)))
    names += ["h_norm_range", "n_count"]
    return FeatureMatrix(
        values=np.column_stack(cols), columns=tuple(names),
        config=fm.config, center=fm.center, params=fm.params,
    )


@dataclass(frozen=True)
class Prediction:
    """Per-point class probabilities and hard labels."""

    probabilities: np.ndarray   # (n, 2), rows sum to 1
    labels: np.ndarray          # (n,) uint8
    source: str                 # "internal" | "imported:<path>"

    def __post_init__(self):
        if self.probabilities.shape != (self.labels.shape[0], 2):
            raise DataError("probabilities must be (n, 2) matching labels")

    @property
    def count(self) -> int:
        return int(self.labels.shape[0])


def predict(features: FeatureMatrix | np.ndarray, model: Mlp) -> Prediction:
    """Deterministic softmax prediction; probability ties go to non-tree."""
    values = features.values if isinstance(features, FeatureMatrix) else np.asarray(features)
    if values.ndim != 2 or values.shape[1] != model.d_in:
        raise DataError(
            f"model expects {model.d_in} features, got "
            f"{values.shape[1] if values.ndim == 2 else 'non-matrix input'}"
        )
    proba = model.predict_proba(values)
    labels = (proba[:, int(Label.TREE)] > proba[:, int(Label.NON_TREE)]).astype(np.uint8)
    return Prediction(probabilities=proba, labels=labels, source="internal")


def import_predictions(path, cloud: PointCloud) -> Prediction:
    """Score-ready prediction from an external label file (one 0/1 per line,
    row-aligned with the cloud's columnar file)."""
    labels = read_labels(path, expected_count=cloud.count)
    if not np.all((labels == 0) | (labels == 1)):
        bad = labels[~((labels == 0) | (labels == 1))][0]
        raise DataError(f"{path}: labels must be 0 or 1, found {bad}")
    proba = np.zeros((labels.shape[0], 2), dtype=np.float64)
    proba[np.arange(labels.shape[0]), labels] = 1.0
    return Prediction(
        probabilities=proba, labels=labels.astype(np.uint8),
        source=f"imported:{Path(path).name}",
    )


def height_threshold_postprocess(
    prediction: Prediction, cloud: PointCloud, t: float = 2.0
) -> Prediction:
    """Relabel predicted trees below t meters of normalized height.

    Low "trees" are overwhelmingly facade/fence/low-vegetation errors;
    only the hard labels change, probabilities stay as the model said.
    """
    cloud.require("h_norm")
    if prediction.count != cloud.count:
        raise DataError("prediction and cloud disagree on point count")
    labels = prediction.labels.copy()
    demote = (labels == int(Label.TREE)) & (cloud.h_norm < t)
    labels[demote] = int(Label.NON_TREE)
    return Prediction(
        probabilities=prediction.probabilities, labels=labels,
        source=prediction.source,
    )


def save_checkpoint(
    path, model: Mlp, config: FeatureConfig, class_weights, seed: int,
    norm_sidecar: str = "",
) -> None:
    """Write a versioned binary checkpoint (weights in f32).

    Contents are a pure function of the arguments: reruns produce
    identical bytes.
    """
    path = Path(path)
    cfg_name = config.name.encode("ascii")
    sidecar = norm_sidecar.encode("utf-8")
    cw = np.asarray(class_weights, dtype=np.float64)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HqH", CHECKPOINT_VERSION, seed, len(cfg_name)))
        fh.write(cfg_name)
        fh.write(struct.pack("<H", len(sidecar)))
        fh.write(sidecar)
        fh.write(struct.pack("<2d", float(cw[0]), float(cw[1])))
        fh.write(struct.pack("<H", len(model.sizes)))
        fh.write(struct.pack(f"<{len(model.sizes)}I", *model.sizes))
        for w, b in zip(model.weights, model.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[Mlp, dict]:
    """Inverse of save_checkpoint: model plus metadata."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a model checkpoint")
    off = 4
    version, seed, n_cfg = struct.unpack_from("<HqH", raw, off)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off += struct.calcsize("<HqH")
    cfg_name = raw[off : off + n_cfg].decode("ascii")
    off += n_cfg
    (n_side,) = struct.unpack_from("<H", raw, off)
    off += 2
    sidecar = raw[off : off + n_side].decode("utf-8")
    off += n_side
    cw = struct.unpack_from("<2d", raw, off)
    off += 16
    (n_sizes,) = struct.unpack_from("<H", raw, off)
    off += 2
    sizes = struct.unpack_from(f"<{n_sizes}I", raw, off)
    off += 4 * n_sizes

    model = Mlp(sizes[0], tuple(sizes[1:-1]), sizes[-1], seed=seed)
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        n_w = fan_in * fan_out
        model.weights[i] = (
            np.frombuffer(raw, dtype="<f4", count=n_w, offset=off)
            .reshape(fan_in, fan_out).copy()
        )
        off += 4 * n_w
        model.biases[i] = np.frombuffer(
            raw, dtype="<f4", count=fan_out, offset=off
        ).copy()
        off += 4 * fan_out
    meta = {
        "feature_config": FeatureConfig[cfg_name],
        "class_weights": np.asarray(cw),
        "seed": seed,
        "norm_sidecar": sidecar,
    }
    return model, meta

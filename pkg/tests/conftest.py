"""Shared fixtures and brute-force reference implementations.

The oracles here are deliberately naive O(n^2) scans; production code
must match them exactly, including tie handling.
"""

import numpy as np
import pytest

from mslidar.cloud import PointCloud
from mslidar import csf, dtm, features, preprocess, synth


def brute_knn(points: np.ndarray, q: np.ndarray, k: int):
    """k nearest by (distance, id) lexicographic order."""
    d = np.sqrt(((points - q) ** 2).sum(axis=1))
    order = np.lexsort((np.arange(len(points)), d))[:k]
    return order, d[order]


def brute_radius(points: np.ndarray, q: np.ndarray, r: float, k_max=None):
    """All points with distance <= r, sorted by (distance, id)."""
    d = np.sqrt(((points - q) ** 2).sum(axis=1))
    ids = np.nonzero(d <= r)[0]
    order = np.lexsort((ids, d[ids]))
    ids = ids[order]
    dd = d[ids]
    if k_max is not None:
        ids, dd = ids[:k_max], dd[:k_max]
    return ids, dd


def brute_sor_removed(points: np.ndarray, k: int, n_sigma: float) -> np.ndarray:
    """Ids removed by the SOR rule, via full pairwise distances."""
    n = len(points)
    d = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2))
    np.fill_diagonal(d, np.inf)
    mean_d = np.sort(d, axis=1)[:, :k].mean(axis=1)
    thr = mean_d.mean() + n_sigma * mean_d.std()
    return np.nonzero(mean_d > thr)[0]


def brute_confusion(pred: np.ndarray, truth: np.ndarray):
    tp = fp = fn = tn = 0
    for p, t in zip(pred, truth):
        if p == 1 and t == 1:
            tp += 1
        elif p == 1 and t == 0:
            fp += 1
        elif p == 0 and t == 1:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def brute_voxel(cloud: PointCloud, grid: float):
    """(kept ids, vote labels) per voxel, by the documented rules."""
    keys = {}
    for i in range(cloud.count):
        key = (
            int(np.floor(cloud.x[i] / grid)),
            int(np.floor(cloud.y[i] / grid)),
            int(np.floor(cloud.z[i] / grid)),
        )
        keys.setdefault(key, []).append(i)
    kept, votes = [], []
    for members in keys.values():
        pts = np.column_stack(
            (cloud.x[members], cloud.y[members], cloud.z[members])
        )
        centroid = pts.mean(axis=0)
        d = ((pts - centroid) ** 2).sum(axis=1)
        best = members[int(np.lexsort((members, d))[0])]
        kept.append(best)
        if cloud.has("label"):
            labs = cloud.label[members]
            n_tree = int((labs == 1).sum())
            n_non = int((labs == 0).sum())
            if n_tree >= n_non and n_tree > 0:
                votes.append(1)
            elif n_non > 0:
                votes.append(0)
            else:
                votes.append(int(cloud.label[best]))
    order = np.argsort(kept)
    kept = np.asarray(kept)[order]
    votes = np.asarray(votes)[order] if votes else None
    return kept, votes


def random_cloud(rng, n=200, extent=10.0, with_label=True) -> PointCloud:
    cols = {}
    if with_label:
        cols["label"] = rng.integers(0, 2, n).astype(np.uint8)
    return PointCloud(
        x=rng.uniform(0, extent, n),
        y=rng.uniform(0, extent, n),
        z=rng.uniform(0, extent / 2, n),
        channel=rng.integers(0, 2, n).astype(np.uint8),
        reflectance_db=rng.normal(-10, 3, n).astype(np.float32),
        **cols,
    )


@pytest.fixture(scope="session")
def tiny_scene():
    cfg = synth.SyntheticSceneConfig(
        extent=50.0, density=6.0, n_trees=12, n_buildings=2, n_cables=1,
        n_low_veg=3, n_crown_decoys=2, seed=11,
    )
    return synth.generate_scene(cfg)


@pytest.fixture(scope="session")
def prepared_scene(tiny_scene):
    """Tiny scene taken through the full preprocessing chain."""
    cloud = tiny_scene
    g = cloud.take(cloud.channel == 0)
    n = cloud.take(cloud.channel == 1)
    gk, _ = preprocess.sor_filter(g)
    nk, _ = preprocess.sor_filter(n)
    merged = preprocess.merge_channels(gk, nk)
    merged = merged.with_column("ground_flag", csf.csf_ground(merged, csf.CsfParams()))
    grid = dtm.build_dtm(merged)
    merged = dtm.normalize_height(merged, grid)
    merged = features.add_pndvi(merged)
    return preprocess.voxel_subsample(merged)

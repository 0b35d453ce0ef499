"""Segmentation metrics, error rates, and the spectral ablation protocol.

Tree is the positive class throughout. Reports carry both per-class
IoUs, their mean, overall accuracy, and mean per-class recall, plus the
misclassification rate restricted to points above a normalized-height
threshold. Percentages are reported to two decimals in exported tables.
"""

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .cloud import Label, PointCloud
from .errors import DataError
from .features import (
    ALL_CONFIGS,
    FeatureConfig,
    assemble_features,
    fit_config_normalization,
)
from .mlp import TrainConfig, train
from . import classifier as clf

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionMatrix:
    """2x2 counts with Tree as the positive class."""

    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionMatrix:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DataError(
            f"prediction ({pred.shape}) and truth ({truth.shape}) lengths differ"
        )
    for name, arr in (("pred", pred), ("truth", truth)):
        if not np.all((arr == 0) | (arr == 1)):
            raise DataError(f"{name} labels must be binary 0/1")
    t = truth == int(Label.TREE)
    p = pred == int(Label.TREE)
    return ConfusionMatrix(
        tp=int(np.sum(p & t)),
        fp=int(np.sum(p & ~t)),
        fn=int(np.sum(~p & t)),
        tn=int(np.sum(~p & ~t)),
    )


def _safe_ratio(num: int, den: int, what: str) -> float:
    if den == 0:
        logger.warning("%s has a zero denominator; reporting 0", what)
        return 0.0
    return num / den


@dataclass(frozen=True)
class EvalReport:
    """Metric bundle in percent, mirroring the comparison-table layout."""

    iou_nontree: float
    iou_tree: float
    miou: float
    macc: float
    oa: float
    counts: ConfusionMatrix
    error_rate_above: float | None = None   # None = undefined (no points above t)
    threshold: float | None = None
    manifest: dict = field(default_factory=dict)

    METRIC_COLUMNS = ("IoU_nontree", "IoU_tree", "mIoU", "mAcc", "OA", "error_rate_above")

    def row(self) -> dict:
        return {
            "IoU_nontree": round(self.iou_nontree, 2),
            "IoU_tree": round(self.iou_tree, 2),
            "mIoU": round(self.miou, 2),
            "mAcc": round(self.macc, 2),
            "OA": round(self.oa, 2),
            "error_rate_above": (
                "N/A" if self.error_rate_above is None else round(self.error_rate_above, 2)
            ),
        }


def metrics(cm: ConfusionMatrix, manifest: dict | None = None) -> EvalReport:
    """Per-class IoU, mIoU, OA, mAcc from a confusion matrix, in percent."""
    if cm.total == 0:
        raise DataError("cannot compute metrics of an empty confusion matrix")
    iou_tree = _safe_ratio(cm.tp, cm.tp + cm.fp + cm.fn, "IoU_tree")
    iou_nontree = _safe_ratio(cm.tn, cm.tn + cm.fn + cm.fp, "IoU_nontree")
    recall_tree = _safe_ratio(cm.tp, cm.tp + cm.fn, "tree recall")
    recall_nontree = _safe_ratio(cm.tn, cm.tn + cm.fp, "non-tree recall")
    return EvalReport(
        iou_nontree=100.0 * iou_nontree,
        iou_tree=100.0 * iou_tree,
        miou=100.0 * (iou_tree + iou_nontree) / 2.0,
        macc=100.0 * (recall_tree + recall_nontree) / 2.0,
        # same association as error_rate_above so the t=0 identity is exact
        oa=100.0 * ((cm.tp + cm.tn) / cm.total),
        counts=cm,
        manifest=manifest or {},
    )


def error_rate_above(
    pred: np.ndarray,
    truth: np.ndarray,
    h_norm: np.ndarray,
    t: float = 2.0,
    predicted_tree_only: bool = False,
) -> float | None:
    """Misclassification rate (percent) among points with h_norm > t.

    Default reading: all points above t. With predicted_tree_only, the
    population is instead the points *predicted* tree above t (the
    alternative reading of this error statistic). Returns None when
    no point lies above the threshold.

    Computed as 100 - 100*correct/n so that t=0 over non-negative
    heights reproduces 100 - OA exactly, bit for bit.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    h = np.asarray(h_norm)
    if not (pred.shape == truth.shape == h.shape):
        raise DataError("pred, truth and h_norm must have equal lengths")
    above = h > t
    if predicted_tree_only:
        above &= pred == int(Label.TREE)
    n = int(above.sum())
    if n == 0:
        return None
    correct = int(np.sum((pred == truth) & above))
    return 100.0 - 100.0 * (correct / n)


def evaluate(
    pred: np.ndarray,
    truth: np.ndarray,
    h_norm: np.ndarray | None = None,
    t: float = 2.0,
    predicted_tree_only: bool = False,
    manifest: dict | None = None,
) -> EvalReport:
    """Full report: confusion metrics plus the above-threshold error rate."""
    report = metrics(confusion(pred, truth), manifest=manifest)
    rate = None
    if h_norm is not None:
        rate = error_rate_above(
            pred, truth, h_norm, t=t, predicted_tree_only=predicted_tree_only
        )
    return EvalReport(
        iou_nontree=report.iou_nontree, iou_tree=report.iou_tree,
        miou=report.miou, macc=report.macc, oa=report.oa,
        counts=report.counts, error_rate_above=rate, threshold=t,
        manifest=report.manifest,
    )


@dataclass
class AblationResult:
    reports: dict[FeatureConfig, EvalReport]
    best: dict[str, FeatureConfig] = field(default_factory=dict)

    def __post_init__(self):
        if self.reports and not self.best:
            for key, attr in (
                ("mIoU", "miou"), ("OA", "oa"), ("mAcc", "macc"),
            ):
                self.best[key] = max(
                    self.reports, key=lambda c: getattr(self.reports[c], attr)
                )

    def table(self) -> list[dict]:
        rows = []
        for cfg, rep in self.reports.items():
            row = {"config": cfg.name}
            row.update(rep.row())
            rows.append(row)
        return rows


def run_ablation(
    train_cloud: PointCloud,
    test_cloud: PointCloud,
    configs: tuple[FeatureConfig, ...] = ALL_CONFIGS,
    train_config: TrainConfig = TrainConfig(),
    postprocess_threshold: float | None = 2.0,
    eval_threshold: float = 2.0,
    neighbor_k: int = 16,
    neighbor_radius: float = 2.0,
    workers: int = 1,
    on_report=None,
) -> AblationResult:
    """Train and evaluate one model per feature config, same seed for all.

    The geometric neighbor graphs depend only on the coordinates, so
    they are computed once per cloud and reused across configs. Raises
    after saving partial results via `on_report` if one config fails.
    """
    for name, cloud in (("train", train_cloud), ("test", test_cloud)):
        cloud.require("label", "h_norm")
        if cloud.count == 0:
            raise DataError(f"{name} cloud is empty")
    graph_train = clf.neighborhood_graph(
        train_cloud, k=neighbor_k, radius=neighbor_radius, workers=workers
    )
    graph_test = clf.neighborhood_graph(
        test_cloud, k=neighbor_k, radius=neighbor_radius, workers=workers
    )
    class_weights = clf.compute_class_weights(train_cloud.label)

    reports: dict[FeatureConfig, EvalReport] = {}
    for cfg in configs:
        params = None
        if cfg.spectral_columns:
            params = fit_config_normalization(train_cloud, cfg)
        fm_train = clf.neighborhood_stats(
            assemble_features(train_cloud, cfg, params), graph_train
        )
        fm_test = clf.neighborhood_stats(
            assemble_features(test_cloud, cfg, params), graph_test
        )
        result = train(
            fm_train.values, train_cloud.label, class_weights, train_config
        )
        pred = clf.predict(fm_test, result.model)
        if postprocess_threshold is not None:
            pred = clf.height_threshold_postprocess(
                pred, test_cloud, t=postprocess_threshold
            )
        report = evaluate(
            pred.labels, test_cloud.label, test_cloud.h_norm, t=eval_threshold,
            manifest={
                "feature_config": cfg.name,
                "seed": train_config.seed,
                "epochs": train_config.epochs,
                "final_train_loss": result.loss_curve[-1],
                "class_weights": [float(w) for w in class_weights],
                "postprocess_threshold": postprocess_threshold,
            },
        )
        reports[cfg] = report
        logger.info("ablation %s: mIoU=%.2f OA=%.2f", cfg.name, report.miou, report.oa)
        if on_report is not None:
            on_report(cfg, report)
    return AblationResult(reports=reports)


def report_to_json(obj: EvalReport | AblationResult) -> str:
    if isinstance(obj, EvalReport):
        payload = _report_payload(obj)
    else:
        payload = {
            "reports": {c.name: _report_payload(r) for c, r in obj.reports.items()},
            "best": {k: v.name for k, v in obj.best.items()},
        }
    return json.dumps(payload, indent=2, sort_keys=True)


def _report_payload(r: EvalReport) -> dict:
    return {
        "iou_nontree": r.iou_nontree,
        "iou_tree": r.iou_tree,
        "miou": r.miou,
        "macc": r.macc,
        "oa": r.oa,
        "error_rate_above": r.error_rate_above,
        "threshold": r.threshold,
        "counts": {"tp": r.counts.tp, "fp": r.counts.fp, "fn": r.counts.fn, "tn": r.counts.tn},
        "manifest": r.manifest,
    }


def report_from_json(text: str) -> dict:
    """Re-parse an exported report; numeric round-trip is exact."""
    return json.loads(text)


def report_to_csv(obj: EvalReport | AblationResult) -> str:
    """One row per config (or a single row), columns as in the ablation table."""
    rows = obj.table() if isinstance(obj, AblationResult) else [
        {"config": obj.manifest.get("feature_config", "-"), **obj.row()}
    ]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["config", *EvalReport.METRIC_COLUMNS])
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def export_error_las(cloud: PointCloud, pred: np.ndarray, path) -> None:
    """Write a LAS file for visual inspection: classification holds the
    predicted label and the "error" extra attribute is 1 on misclassified
    points (the red-highlight convention)."""
    from .lasio import write_las

    cloud.require("label")
    pred = np.asarray(pred, dtype=np.uint8)
    if pred.shape[0] != cloud.count:
        raise DataError("prediction and cloud disagree on point count")
    errors = (pred != cloud.label).astype(np.float32)
    write_las(cloud.with_column("label", pred), path, extra={"error": errors})

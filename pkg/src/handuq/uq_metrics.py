"""Uncertainty-evaluation protocol: sparsification curves, AUSC/AUSE,
Pearson correlation, MPJPE and Procrustes-aligned MPJPE.

Joint coordinates are meters on input; every error is reported in mm.
Sparsification pools all (sample, joint) entries, sorts them by estimated
uncertainty (ascending, ties broken by (sample_id, joint_id)) and records
the mean error of the most-certain x% for x in {2, 4, ..., 100}.  AUSC is
the mean of the 50 curve values; AUSE subtracts the oracle curve obtained
by sorting on the true error instead.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import gaussian_core
from .errors import (
    DegenerateConfiguration,
    EmptyInput,
    InsufficientData,
    ParseError,
    ShapeError,
    UndefinedCorrelation,
)

FRACTIONS_PERCENT = tuple(range(2, 101, 2))
MM_PER_M = 1000.0


@dataclass
class JointPrediction:
    """One joint of one sample: predicted/true position (m) plus the
    scalar uncertainty attached to the prediction."""

    sample_id: int
    joint_id: int
    pred: np.ndarray  # (3,)
    gt: np.ndarray  # (3,)
    uncertainty: float

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64).reshape(3)
        self.gt = np.asarray(self.gt, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.pred)) and np.all(np.isfinite(self.gt))):
            raise ValueError("coordinates must be finite")
        if not np.isfinite(self.uncertainty) or self.uncertainty < 0:
            raise ValueError("uncertainty must be finite and >= 0")


@dataclass
class SparsificationCurve:
    fractions: np.ndarray  # percents 2..100
    errors: np.ndarray  # mean error (mm) of the most-certain x%
    ausc: float
    ause: float | None = None


def _errors_mm(preds: list[JointPrediction]) -> np.ndarray:
    pred = np.stack([p.pred for p in preds])
    gt = np.stack([p.gt for p in preds])
    return np.linalg.norm(pred - gt, axis=1) * MM_PER_M


def mpjpe(preds: list[JointPrediction]) -> float:
    """Mean Euclidean distance between predicted and true joints, in mm."""
    if not preds:
        raise EmptyInput("mpjpe needs at least one prediction")
    return float(_errors_mm(preds).mean())


def pa_mpjpe(pred_set, gt_set) -> float:
    """MPJPE (mm) after optimal similarity alignment of the predicted
    21-joint set to the true one (rotation, translation, isotropic scale;
    reflections excluded)."""
    pred = gaussian_core.as_flat_joints(pred_set).reshape(-1, 3)
    gt = gaussian_core.as_flat_joints(gt_set).reshape(-1, 3)
    mu_gt = gt.mean(axis=0)
    mu_pred = pred.mean(axis=0)
    x0 = gt - mu_gt
    y0 = pred - mu_pred
    norm_x = np.linalg.norm(x0)
    norm_y = np.linalg.norm(y0)
    if norm_x < 1e-12:
        raise DegenerateConfiguration("ground-truth points coincide")
    if norm_y < 1e-12:
        # a collapsed prediction cannot be rotated; only translation helps
        aligned = np.tile(mu_gt, (pred.shape[0], 1))
        return float(np.linalg.norm(aligned - gt, axis=1).mean() * MM_PER_M)
    x0 = x0 / norm_x
    y0 = y0 / norm_y
    h = x0.T @ y0
    u, s, vt = np.linalg.svd(h)
    v = vt.T
    det_sign = np.sign(np.linalg.det(v @ u.T))
    if det_sign < 0:
        v[:, -1] *= -1.0
        s[-1] *= -1.0
    rot = v @ u.T  # maps centered pred into gt frame, det +1
    scale = s.sum() * norm_x / norm_y
    aligned = scale * (pred - mu_pred) @ rot + mu_gt
    return float(np.linalg.norm(aligned - gt, axis=1).mean() * MM_PER_M)


def _sorted_prefix_means(order: np.ndarray, errors: np.ndarray) -> np.ndarray:
    """Mean error of the first ceil(x% * n) entries for each fraction."""
    n = errors.shape[0]
    csum = np.cumsum(errors[order])
    sizes = np.array([(n * x + 99) // 100 for x in FRACTIONS_PERCENT], dtype=int)
    return csum[sizes - 1] / sizes


def _entry_order(keys_primary, sample_ids, joint_ids) -> np.ndarray:
    # last key of lexsort is the primary sort key
    return np.lexsort((joint_ids, sample_ids, keys_primary))


def sparsification(preds: list[JointPrediction]) -> SparsificationCurve:
    """Curve of mean error over the most-certain x% entries, plus AUSC/AUSE."""
    if len(preds) < len(FRACTIONS_PERCENT):
        raise InsufficientData(
            f"need at least {len(FRACTIONS_PERCENT)} predictions, got {len(preds)}"
        )
    errors = _errors_mm(preds)
    unc = np.array([p.uncertainty for p in preds])
    sample_ids = np.array([p.sample_id for p in preds])
    joint_ids = np.array([p.joint_id for p in preds])
    order = _entry_order(unc, sample_ids, joint_ids)
    curve = _sorted_prefix_means(order, errors)
    oracle_order = _entry_order(errors, sample_ids, joint_ids)
    oracle = _sorted_prefix_means(oracle_order, errors)
    ausc = float(curve.mean())
    return SparsificationCurve(
        fractions=np.array(FRACTIONS_PERCENT, dtype=np.float64),
        errors=curve,
        ausc=ausc,
        ause=float((curve - oracle).mean()),
    )


def oracle_curve(preds: list[JointPrediction]) -> np.ndarray:
    """Sparsification curve of the error-sorted (best possible) ranking."""
    if len(preds) < len(FRACTIONS_PERCENT):
        raise InsufficientData(
            f"need at least {len(FRACTIONS_PERCENT)} predictions, got {len(preds)}"
        )
    errors = _errors_mm(preds)
    sample_ids = np.array([p.sample_id for p in preds])
    joint_ids = np.array([p.joint_id for p in preds])
    order = _entry_order(errors, sample_ids, joint_ids)
    return _sorted_prefix_means(order, errors)


def ause(preds: list[JointPrediction]) -> float:
    """Area between the uncertainty-sorted curve and the oracle curve."""
    curve = sparsification(preds)
    assert curve.ause is not None
    return curve.ause


def per_sample_sparsification(preds: list[JointPrediction]) -> SparsificationCurve:
    """Alternative protocol: one curve per sample, averaged across samples."""
    by_sample: dict[int, list[JointPrediction]] = {}
    for p in preds:
        by_sample.setdefault(p.sample_id, []).append(p)
    curves = []
    gaps = []
    for sid in sorted(by_sample):
        group = by_sample[sid]
        errors = _errors_mm(group)
        unc = np.array([p.uncertainty for p in group])
        joint_ids = np.array([p.joint_id for p in group])
        sids = np.array([p.sample_id for p in group])
        order = _entry_order(unc, sids, joint_ids)
        curve = _sorted_prefix_means(order, errors)
        oracle = _sorted_prefix_means(_entry_order(errors, sids, joint_ids), errors)
        curves.append(curve)
        gaps.append(curve - oracle)
    mean_curve = np.mean(curves, axis=0)
    return SparsificationCurve(
        fractions=np.array(FRACTIONS_PERCENT, dtype=np.float64),
        errors=mean_curve,
        ausc=float(mean_curve.mean()),
        ause=float(np.mean(gaps)),
    )


def pearson(u, e) -> float:
    """Product-moment correlation between two equal-length lists."""
    u = np.asarray(u, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if u.shape != e.shape or u.ndim != 1:
        raise ShapeError("inputs must be equal-length vectors")
    if u.shape[0] < 2:
        raise UndefinedCorrelation("need at least 2 entries")
    du = u - u.mean()
    de = e - e.mean()
    su = np.sqrt(np.sum(du * du))
    se = np.sqrt(np.sum(de * de))
    if su == 0.0 or se == 0.0:
        raise UndefinedCorrelation("zero variance input")
    return float(np.clip(np.sum(du * de) / (su * se), -1.0, 1.0))


PREDICTIONS_HEADER = "sample_id,joint_id,px,py,pz,gx,gy,gz,uncertainty"


def save_predictions(path, preds: list[JointPrediction]) -> None:
    """Delimited text, coordinates in meters; floats via repr for
    byte-stable round trips."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(PREDICTIONS_HEADER + "\n")
        for p in preds:
            row = [str(p.sample_id), str(p.joint_id)]
            row.extend(repr(v) for v in p.pred)
            row.extend(repr(v) for v in p.gt)
            row.append(repr(p.uncertainty))
            fh.write(",".join(row) + "\n")


def load_predictions(path) -> list[JointPrediction]:
    preds = []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n")
        if header != PREDICTIONS_HEADER:
            raise ParseError(f"bad predictions header: {header!r}", line=1)
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(",")
            if len(parts) != 9:
                raise ParseError(f"expected 9 fields, got {len(parts)}", line=lineno)
            try:
                preds.append(
                    JointPrediction(
                        sample_id=int(parts[0]),
                        joint_id=int(parts[1]),
                        pred=np.array(parts[2:5], dtype=np.float64),
                        gt=np.array(parts[5:8], dtype=np.float64),
                        uncertainty=float(parts[8]),
                    )
                )
            except ValueError as exc:
                raise ParseError(f"bad field ({exc})", line=lineno) from exc
    return preds


def save_report(path_prefix, metrics: dict) -> tuple[str, str]:
    """Write metrics both as `key = value` text and as JSON."""
    txt_path = f"{path_prefix}.txt"
    json_path = f"{path_prefix}.json"
    with open(txt_path, "w", encoding="ascii") as fh:
        for key in sorted(metrics):
            fh.write(f"{key} = {metrics[key]!r}\n")
    with open(json_path, "w", encoding="ascii") as fh:
        json.dump(metrics, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return txt_path, json_path


def load_report(json_path) -> dict:
    with open(json_path, "r", encoding="ascii") as fh:
        return json.load(fh)

"""Segmentation metrics over integer label maps.

Label maps use 0 for background and positive ids for instances. Per-sequence
metrics pool pixels across time before scoring. Everything is plain numpy;
matching uses the exact rectangular assignment solver.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln


def hungarian_match(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment covering min(K, K') pairs."""
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return []
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist()))


def _as_3d(labels) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (H, W) or (T, H, W) labels, got shape {arr.shape}")
    if (arr < 0).any():
        raise ValueError("label maps must be non-negative integers")
    return arr.astype(np.int64)


def _instance_ids(labels: np.ndarray) -> np.ndarray:
    ids = np.unique(labels)
    return ids[ids > 0]


def _iou_matrix(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pairwise IoU between gt instances (rows) and pred instances (cols)."""
    gt_ids = _instance_ids(gt)
    pred_ids = _instance_ids(pred)
    iou = np.zeros((len(gt_ids), len(pred_ids)))
    for i, g in enumerate(gt_ids):
        gmask = gt == g
        gsum = gmask.sum()
        for j, p in enumerate(pred_ids):
            pmask = pred == p
            inter = np.logical_and(gmask, pmask).sum()
            union = gsum + pmask.sum() - inter
            iou[i, j] = inter / union if union > 0 else 0.0
    return iou, gt_ids, pred_ids


def sequence_miou(pred, gt) -> float:
    """Mean IoU over gt instances after optimal track matching.

    IoU is computed over pixels pooled across the whole sequence; unmatched
    gt instances score 0. Empty gt scores 1 when pred is also empty, else 0.
    """
    pred3, gt3 = _as_3d(pred), _as_3d(gt)
    if pred3.shape != gt3.shape:
        raise ValueError(f"shape mismatch: {pred3.shape} vs {gt3.shape}")
    iou, gt_ids, pred_ids = _iou_matrix(pred3, gt3)
    if len(gt_ids) == 0:
        return 1.0 if len(pred_ids) == 0 else 0.0
    if len(pred_ids) == 0:
        return 0.0
    pairs = hungarian_match(-iou)
    return float(sum(iou[i, j] for i, j in pairs) / len(gt_ids))


def _pair_confusion(pred: np.ndarray, gt: np.ndarray):
    """Contingency counts for adjusted indices: nij, row/col sums, n."""
    gt_ids, gt_inv = np.unique(gt, return_inverse=True)
    pred_ids, pred_inv = np.unique(pred, return_inverse=True)
    table = np.zeros((len(gt_ids), len(pred_ids)), dtype=np.int64)
    np.add.at(table, (gt_inv, pred_inv), 1)
    return table, table.sum(axis=1), table.sum(axis=0), table.sum()


def _comb2(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    return x * (x - 1.0) / 2.0


def adjusted_rand_index(pred_labels: np.ndarray, gt_labels: np.ndarray) -> float:
    """ARI over two flat label vectors (pair-counting with the permutation null)."""
    table, a, b, n = _pair_confusion(pred_labels, gt_labels)
    if n < 2:
        return 1.0
    index = _comb2(table).sum()
    sum_a = _comb2(a).sum()
    sum_b = _comb2(b).sum()
    expected = sum_a * sum_b / _comb2(np.array([n])).item()
    max_index = 0.5 * (sum_a + sum_b)
    denom = max_index - expected
    if abs(denom) < 1e-12:
        return 1.0 if _partitions_identical(table) else 0.0
    return float((index - expected) / denom)


def _partitions_identical(table: np.ndarray) -> bool:
    return ((table > 0).sum(axis=0) <= 1).all() and ((table > 0).sum(axis=1) <= 1).all()


def fg_ari(pred, gt) -> float:
    """ARI over gt-foreground pixels pooled across the sequence.

    The predicted background (label 0) counts as a cluster of its own; gt
    background pixels are excluded from the pixel set.
    """
    pred3, gt3 = _as_3d(pred), _as_3d(gt)
    if pred3.shape != gt3.shape:
        raise ValueError(f"shape mismatch: {pred3.shape} vs {gt3.shape}")
    fg = gt3 > 0
    if fg.sum() < 2:
        return 1.0
    return adjusted_rand_index(pred3[fg].ravel(), gt3[fg].ravel())


def ari(pred, gt, scope: str = "all") -> float:
    """ARI on one label map. scope='all' keeps every pixel; 'objects' keeps gt>0."""
    pred3, gt3 = _as_3d(pred), _as_3d(gt)
    if scope == "all":
        return adjusted_rand_index(pred3.ravel(), gt3.ravel())
    if scope == "objects":
        fg = gt3 > 0
        if fg.sum() < 2:
            return 1.0
        return adjusted_rand_index(pred3[fg].ravel(), gt3[fg].ravel())
    raise ValueError(f"unknown scope {scope!r}")


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def _expected_mutual_information(a: np.ndarray, b: np.ndarray, n: int) -> float:
    """Expected MI of two label-count vectors under the permutation model."""
    emi = 0.0
    log_n = np.log(n)
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            if hi < lo:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            term_mi = nij / n * (np.log(nij) + log_n - np.log(ai) - np.log(bj))
            log_prob = (
                gammaln(ai + 1)
                + gammaln(bj + 1)
                + gammaln(n - ai + 1)
                + gammaln(n - bj + 1)
                - gammaln(n + 1)
                - gammaln(nij + 1)
                - gammaln(ai - nij + 1)
                - gammaln(bj - nij + 1)
                - gammaln(n - ai - bj + nij + 1)
            )
            emi += float((term_mi * np.exp(log_prob)).sum())
    return emi


def adjusted_mutual_information(pred_labels: np.ndarray, gt_labels: np.ndarray) -> float:
    """AMI with expected-MI correction, arithmetic-mean normalizer."""
    table, a, b, n = _pair_confusion(pred_labels, gt_labels)
    if n < 2:
        return 1.0
    nz = table > 0
    nij = table[nz].astype(np.float64)
    outer = np.outer(a, b)[nz].astype(np.float64)
    mi = float((nij / n * np.log(n * nij / outer)).sum())
    emi = _expected_mutual_information(a, b, int(n))
    h_u = _entropy(a, int(n))
    h_v = _entropy(b, int(n))
    denom = 0.5 * (h_u + h_v) - emi
    if abs(denom) < 1e-12:
        return 1.0 if _partitions_identical(table) else 0.0
    return float((mi - emi) / denom)


def ami(pred, gt, scope: str = "all") -> float:
    """AMI on one label map; scopes as for `ari`."""
    pred3, gt3 = _as_3d(pred), _as_3d(gt)
    if scope == "all":
        return adjusted_mutual_information(pred3.ravel(), gt3.ravel())
    if scope == "objects":
        fg = gt3 > 0
        if fg.sum() < 2:
            return 1.0
        return adjusted_mutual_information(pred3[fg].ravel(), gt3[fg].ravel())
    raise ValueError(f"unknown scope {scope!r}")


def f1_and_counts(pred, gt, iou_thresh: float = 0.5) -> tuple[float, bool]:
    """Instance detection F1 at an IoU threshold, plus the count-accuracy hit.

    Matched pairs with IoU >= threshold are true positives; remaining
    predicted instances are false positives, remaining gt false negatives.
    """
    pred3, gt3 = _as_3d(pred), _as_3d(gt)
    iou, gt_ids, pred_ids = _iou_matrix(pred3, gt3)
    oca_hit = len(pred_ids) == len(gt_ids)
    if len(gt_ids) == 0 and len(pred_ids) == 0:
        return 1.0, oca_hit
    tp = 0
    if iou.size > 0:
        for i, j in hungarian_match(-iou):
            if iou[i, j] >= iou_thresh:
                tp += 1
    fp = len(pred_ids) - tp
    fn = len(gt_ids) - tp
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom > 0 else 0.0
    return float(f1), bool(oca_hit)


def slots_to_labelmap(
    visibility: np.ndarray, background_weight: np.ndarray, min_mass_frac: float = 0.001
) -> np.ndarray:
    """Per-pixel argmax over (background, slot 1..K) weights -> label map.

    Slots claiming fewer pixels than min_mass_frac of the image are cleared
    to background so near-empty slots do not count as instances.
    """
    vis = np.asarray(visibility, dtype=np.float64)
    if vis.ndim == 4:
        vis = vis[:, 0]
    bg = np.asarray(background_weight, dtype=np.float64)
    if bg.ndim == 3:
        bg = bg[0]
    stacked = np.concatenate([bg[None], vis], axis=0)  # (K+1, H, W)
    labels = stacked.argmax(axis=0)
    h, w = labels.shape
    min_pixels = max(1, int(round(min_mass_frac * h * w)))
    for k in range(1, vis.shape[0] + 1):
        if (labels == k).sum() < min_pixels:
            labels[labels == k] = 0
    return labels.astype(np.int64)


METRIC_KEYS = ("mIoU", "FG-ARI", "AMI-A", "ARI-A", "AMI-O", "ARI-O", "IoU", "F1", "OCA")
REPORT_HEADER = "sequence_id,miou,fg_ari,ami_a,ari_a,ami_o,ari_o,iou,f1,oca"


def evaluate_sequence(pred, gt) -> dict[str, float]:
    """All per-sequence metrics; frame-level scores are averaged over time."""
    pred3, gt3 = _as_3d(pred), _as_3d(gt)
    per_frame = {"AMI-A": [], "ARI-A": [], "AMI-O": [], "ARI-O": [], "IoU": [], "F1": [], "OCA": []}
    for t in range(pred3.shape[0]):
        p, g = pred3[t], gt3[t]
        per_frame["AMI-A"].append(ami(p, g, "all"))
        per_frame["ARI-A"].append(ari(p, g, "all"))
        per_frame["AMI-O"].append(ami(p, g, "objects"))
        per_frame["ARI-O"].append(ari(p, g, "objects"))
        per_frame["IoU"].append(sequence_miou(p, g))
        f1, hit = f1_and_counts(p, g)
        per_frame["F1"].append(f1)
        per_frame["OCA"].append(1.0 if hit else 0.0)
    out = {k: float(np.mean(v)) for k, v in per_frame.items()}
    out["mIoU"] = sequence_miou(pred3, gt3)
    out["FG-ARI"] = fg_ari(pred3, gt3)
    return out


def aggregate_reports(per_sequence: list[dict[str, float]]) -> dict[str, float]:
    return {
        key: float(np.mean([rep[key] for rep in per_sequence])) if per_sequence else 0.0
        for key in METRIC_KEYS
    }


def format_report(summary: dict[str, float]) -> str:
    return "\n".join(f"{key}={summary[key]:.6f}" for key in METRIC_KEYS) + "\n"


def format_table(seq_ids: list[str], per_sequence: list[dict[str, float]]) -> str:
    lines = [REPORT_HEADER]
    for sid, rep in zip(seq_ids, per_sequence):
        lines.append(
            f"{sid},{rep['mIoU']:.6f},{rep['FG-ARI']:.6f},{rep['AMI-A']:.6f},"
            f"{rep['ARI-A']:.6f},{rep['AMI-O']:.6f},{rep['ARI-O']:.6f},"
            f"{rep['IoU']:.6f},{rep['F1']:.6f},{rep['OCA']:.6f}"
        )
    return "\n".join(lines) + "\n"

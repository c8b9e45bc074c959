"""Box overlap measures and the normalized L1 regression distance."""

import numpy as np

from .validation import ContractError


def _check(*boxes):
    for b in boxes:
        if not b.is_valid():
            raise ContractError(f"degenerate box {b.as_list()}")


def _inter_union_hull(a, b):
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    hull = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    return inter, union, hull


def iou(a, b):
    _check(a, b)
    inter, union, _ = _inter_union_hull(a, b)
    return inter / union


def giou(a, b):
    """Generalized IoU: IoU minus the fraction of the enclosing hull not covered by the union."""
    _check(a, b)
    inter, union, hull = _inter_union_hull(a, b)
    return inter / union - (hull - union) / hull


def box_l1(a, b, width, height):
    """Sum of absolute differences of the two boxes in normalized (cx, cy, w, h) form."""
    if not (width > 0 and height > 0):
        raise ContractError(f"image size must be positive, got {width}x{height}")
    _check(a, b)
    return float(sum(abs(p - q) for p, q in
                     zip(a.to_cxcywh(width, height), b.to_cxcywh(width, height))))


def pairwise_iou(boxes_a, boxes_b):
    """IoU matrix between two (n, 4) / (m, 4) arrays of x1y1x2y2 boxes."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)

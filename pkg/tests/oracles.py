"""Independent scalar-loop reimplementations used as test oracles."""

import numpy as np


def soft_iou(agg, m):
    inter = union = 0.0
    for a, b in zip(np.ravel(agg), np.ravel(m)):
        inter += min(a, b)
        union += max(a, b)
    return 0.0 if union == 0 else inter / union


def conflict_cells(iou_row, eta, panoptic, m_o):
    h, w = m_o.shape
    out = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            if m_o[r, c] == 1:
                continue
            for score, pan in zip(iou_row, panoptic):
                if score > eta and pan[r, c] == 1:
                    out[r, c] = 1.0
    return out


def overlap_cells(tau):
    n, h, w = tau.shape
    out = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            if sum(1 for i in range(n) if tau[i, r, c] > 0) >= 2:
                out[r, c] = 1.0
    return out


def fusion_loss(tau, feats, canvas, source, m):
    n, h, w = tau.shape
    d = canvas.shape[2]
    total = 0.0
    for r in range(h):
        for c in range(w):
            s = sum(tau[i, r, c] for i in range(n))
            for ch in range(d):
                fused = sum(tau[i, r, c] * feats[i, r, c, ch] for i in range(n)) + (1 - s) * canvas[r, c, ch]
                total += ((fused - source[r, c, ch]) * m[r, c]) ** 2
            for i in range(n):
                total += max(0.0, -tau[i, r, c]) ** 2
            total += ((1 - s) * m[r, c]) ** 2
    return total


def random_panoptic(g, h, w, k):
    """``k`` disjoint binary regions: a random labelling, some cells unlabelled."""
    labels = g.integers(-1, k, size=(h, w))
    return [(labels == j).astype(float) for j in range(k)]

"""Masked cross-entropy.

Label volumes are dominated by background; a plain cross-entropy lets the net
win by predicting background everywhere.  The masked variant scores only
voxels that are true foreground or predicted foreground (the union of TP, FP
and FN): a correctly rejected background voxel contributes exactly zero, to
the loss and to the gradient.

The mask is computed once from the forward pass and then held fixed while the
gradient is taken, i.e. no gradient flows through the mask indicator itself.
"""

from __future__ import annotations

import numpy as np

PROB_FLOOR = 1e-7


def loss_masked_ce(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed masked cross-entropy.

    probs: (..., 2) softmax output, channel 1 = foreground.
    labels: (...) binary ground truth for the same ROI voxels.
    Returns (loss, mask); the mask must be passed to masked_ce_logit_grad so
    both use the identical voxel set.
    """
    p = probs[..., 1]
    y = np.asarray(labels)
    if y.shape != p.shape:
        raise ValueError(f"labels {y.shape} do not match probs {p.shape}")
    y = y.astype(bool)
    mask = y | (p > 0.5)
    pc = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    terms = np.where(y, -np.log(pc), -np.log1p(-pc))
    return float((terms * mask).sum()), mask


def masked_ce_logit_grad(
    probs: np.ndarray, labels: np.ndarray, mask: np.ndarray
) -> np.ndarray:
    """d(loss)/d(logits) for the masked cross-entropy, shape (..., 2).

    The clip in the loss saturates: outside (floor, 1-floor) the clipped
    probability is constant, so the gradient there is exactly zero.
    """
    p = probs[..., 1]
    y = np.asarray(labels).astype(np.float64)
    pc = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    inside = (p > PROB_FLOOR) & (p < 1.0 - PROB_FLOOR)
    dldp = np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0) * mask
    # two-way softmax: dp/dz_fg = p(1-p), dp/dz_bg = -p(1-p)
    g_fg = dldp * p * (1.0 - p)
    return np.stack([-g_fg, g_fg], axis=-1).astype(probs.dtype)

"""Relation distillation: match the geometry of one image's GI feature set.

Instead of comparing features one-to-one, this compares pairwise Euclidean
distances between pooled GI features, each side normalized by its mean
off-diagonal distance. The normalization makes the loss invariant to uniform
scaling of either feature set, so only the *shape* of the constellation is
transferred.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

__all__ = ["pairwise_distances", "relation_loss"]

PHI_EPS = 1e-8


def pairwise_distances(feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Distance matrix and normalization factor for a ``[K, ...]`` stack.

    Features are flattened per instance. Returns the symmetric ``[K, K]``
    matrix of Euclidean distances (zero diagonal) and phi, the mean over the
    off-diagonal entries. K < 2 gives an empty-diagonal matrix and phi = 0.
    """
    k = feats.shape[0]
    flat = feats.reshape(k, -1)
    if k < 2:
        dist = torch.zeros((k, k), dtype=feats.dtype, device=feats.device)
        return dist, torch.zeros((), dtype=feats.dtype, device=feats.device)
    iu, ju = torch.triu_indices(k, k, offset=1)
    pair = (flat[iu] - flat[ju]).norm(dim=1)
    dist = torch.zeros((k, k), dtype=feats.dtype, device=feats.device)
    dist[iu, ju] = pair
    dist = dist + dist.T
    phi = pair.mean()
    return dist, phi


def relation_loss(
    teacher_feats: torch.Tensor,
    adapted_student_feats: torch.Tensor,
    smooth_l1_beta: float = 1.0,
) -> torch.Tensor:
    """Smooth-L1 between phi-normalized pairwise distances, summed over all
    ordered pairs i != j.

    Degenerate inputs (K < 2, or either side with phi below ``PHI_EPS``,
    i.e. all features identical) return exactly 0. The teacher side is
    detached; gradients flow through student distances and the student phi.
    """
    k = teacher_feats.shape[0] if teacher_feats.numel() else 0
    ks = adapted_student_feats.shape[0] if adapted_student_feats.numel() else 0
    if k != ks:
        raise ValueError(f"teacher K ({k}) != student K ({ks})")
    zero = torch.zeros(
        (),
        dtype=adapted_student_feats.dtype if ks else torch.float32,
    )
    if k < 2:
        return zero

    t_flat = teacher_feats.detach().reshape(k, -1)
    s_flat = adapted_student_feats.reshape(k, -1)
    iu, ju = torch.triu_indices(k, k, offset=1)
    t_pair = (t_flat[iu] - t_flat[ju]).norm(dim=1)
    s_pair = (s_flat[iu] - s_flat[ju]).norm(dim=1)
    t_phi = t_pair.mean()
    s_phi = s_pair.mean()
    if float(t_phi) < PHI_EPS or float(s_phi) < PHI_EPS:
        return zero

    per_pair = F.smooth_l1_loss(
        s_pair / s_phi, t_pair / t_phi, beta=smooth_l1_beta, reduction="sum"
    )
    # ordered pairs count each unordered pair twice
    return 2.0 * per_pair

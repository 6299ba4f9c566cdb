"""Whitening plus triplet-margin refinement of the linear projection.

The embedding is f(u) = normalize(W u) over whitened features u. W is
refined with a margin loss over anchor/positive pairs, the negative
being the hardest one inside the batch (the closest positive embedding
belonging to a different point). Gradients are worked out by hand; the
whole run is a deterministic function of the data and the seed.
"""

import numpy as np

from .container import Container, ContainerError, read_container
from .features import patch_features
from .model import OUT_DIM, PluginModel


class TrainingError(Exception):
    pass


def fit_whitening(feats: np.ndarray, shrinkage: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Mean and shrunk ZCA transform.

    Eigenvalues are damped by a fraction of their mean before inversion;
    full whitening would blow noise-only directions up to unit variance
    and the projection would have to unlearn them. ZCA (E diag(s) E^T)
    is invariant to eigenvector sign flips, so the result does not
    depend on LAPACK's sign conventions.
    """
    mean = feats.mean(axis=0)
    centered = feats - mean
    cov = centered.T @ centered / max(len(feats) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    scale = 1.0 / np.sqrt(evals + shrinkage * float(evals.mean()) + 1e-18)
    return mean, (evecs * scale) @ evecs.T


def _embed(w: np.ndarray, u: np.ndarray):
    v = u @ w.T
    n = np.linalg.norm(v, axis=1, keepdims=True)
    n = np.maximum(n, 1e-12)
    return v / n, n


def _norm_backward(g: np.ndarray, f: np.ndarray, n: np.ndarray) -> np.ndarray:
    # d/dv of f = v/|v|, applied to upstream gradient g
    return (g - (g * f).sum(axis=1, keepdims=True) * f) / n


def refine_projection(
    white: np.ndarray,
    pos_pairs: np.ndarray,
    point_ids: np.ndarray,
    seed: int,
    out_dim: int = OUT_DIM,
    epochs: int = 40,
    batch_size: int = 64,
    lr: float = 0.05,
    margin: float = 0.5,
) -> tuple[np.ndarray, list]:
    """Returns the refined (D, F) projection and per-epoch mean losses."""
    f_dim = white.shape[1]
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((out_dim, f_dim)) / np.sqrt(f_dim)
    pair_pids = point_ids[pos_pairs[:, 0]]
    history = []
    for epoch in range(epochs):
        step = lr / (1.0 + epoch / 8.0)
        order = rng.permutation(len(pos_pairs))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 8:
                continue
            ua = white[pos_pairs[idx, 0]]
            up = white[pos_pairs[idx, 1]]
            fa, na = _embed(w, ua)
            fp, npn = _embed(w, up)

            d = np.sqrt(np.maximum(2.0 - 2.0 * fa @ fp.T, 1e-12))
            pos = d.diagonal().copy()
            same = pair_pids[idx][:, None] == pair_pids[idx][None, :]
            d_masked = np.where(same, np.inf, d)
            neg_j = np.argmin(d_masked, axis=1)
            neg = d_masked[np.arange(len(idx)), neg_j]

            ok = np.isfinite(neg)
            active = ok & (margin + pos - neg > 0)
            losses.append(float(np.where(ok, np.maximum(margin + pos - neg, 0.0), 0.0).mean()))
            if not active.any():
                continue

            scale = 1.0 / active.sum()
            fn = fp[neg_j]
            dap = np.maximum(pos, 1e-9)[:, None]
            dan = np.maximum(neg, 1e-9)[:, None]
            act = active[:, None]

            g_fa = np.where(act, (fa - fp) / dap - (fa - fn) / dan, 0.0) * scale
            g_fp = np.where(act, -(fa - fp) / dap, 0.0) * scale
            g_fn = np.where(act, (fa - fn) / dan, 0.0) * scale

            # fn rows are views into fp; scatter their gradient back
            g_fp_total = g_fp.copy()
            np.add.at(g_fp_total, neg_j, g_fn)

            gv_a = _norm_backward(g_fa, fa, na)
            gv_p = _norm_backward(g_fp_total, fp, npn)
            dw = gv_a.T @ ua + gv_p.T @ up
            w -= step * dw
        history.append(float(np.mean(losses)) if losses else 0.0)
    return w, history


def load_training_set(container_dirs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Patches, per-patch point ids (globally unique across containers),
    and positive index pairs, concatenated over containers."""
    all_patches, all_pids, all_pairs = [], [], []
    base = 0
    pid_base = 0
    for d in container_dirs:
        c: Container = read_container(d)
        if len(c.patches) == 0:
            continue
        all_patches.append(c.patches)
        all_pids.append(c.point_ids + pid_base)
        if len(c.positives):
            all_pairs.append(c.positives + base)
        base += len(c.patches)
        pid_base += int(c.point_ids.max()) + 1 if len(c.point_ids) else 0
    if not all_patches:
        raise TrainingError("no patches in any train container")
    patches = np.concatenate(all_patches)
    pids = np.concatenate(all_pids)
    pairs = (
        np.concatenate(all_pairs)
        if all_pairs
        else np.zeros((0, 2), dtype=np.int64)
    )
    return patches, pids, pairs


def train_model(container_dirs, seed: int) -> PluginModel:
    try:
        patches, pids, pairs = load_training_set(container_dirs)
    except ContainerError as exc:
        raise TrainingError(str(exc))
    if len(pairs) < 32:
        raise TrainingError(f"need at least 32 positive pairs, got {len(pairs)}")

    feats = patch_features(patches)
    mean, transform = fit_whitening(feats)
    white = (feats - mean) @ transform.T
    w, history = refine_projection(white, pairs, pids, seed)

    log = "\n".join(
        [
            f"patches={len(patches)} points={len(np.unique(pids))} pairs={len(pairs)}",
            f"feature_dim={feats.shape[1]} out_dim={len(w)} seed={seed}",
            "loss_per_epoch=" + ",".join(f"{h:.6f}" for h in history),
        ]
    )
    return PluginModel(mean, transform, w, log)

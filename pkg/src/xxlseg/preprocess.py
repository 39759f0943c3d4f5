"""Intensity denoising and reference-label conditioning for the 3-class pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .labels import erode

BACKGROUND, OBJECT, BORDER = 0, 1, 2

# Step size of the dual fixed-point iteration. Convergence needs
# tau <= 1 / ||div||^2 and ||div||^2 <= 4 * ndim = 12 in 3D.
TV_STEP = 1.0 / 12.0


def gradient(u: np.ndarray) -> np.ndarray:
    """Forward differences, zero across the far boundary (Neumann)."""
    g = np.zeros((u.ndim,) + u.shape, dtype=u.dtype)
    for ax in range(u.ndim):
        d = np.diff(u, axis=ax)
        sl = [slice(None)] * u.ndim
        sl[ax] = slice(0, u.shape[ax] - 1)
        g[(ax,) + tuple(sl)] = d
    return g


def divergence(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`gradient`."""
    ndim = p.shape[0]
    out = np.zeros(p.shape[1:], dtype=p.dtype)
    for ax in range(ndim):
        comp = p[ax]
        n = comp.shape[ax]
        if n < 2:
            continue  # no differences along a single-voxel axis
        sl = [slice(None)] * ndim
        first = list(sl)
        first[ax] = slice(0, 1)
        out[tuple(first)] += comp[tuple(first)]
        mid = list(sl)
        mid[ax] = slice(1, n - 1)
        prev = list(sl)
        prev[ax] = slice(0, n - 2)
        out[tuple(mid)] += comp[tuple(mid)] - comp[tuple(prev)]
        last = list(sl)
        last[ax] = slice(n - 1, n)
        before = list(sl)
        before[ax] = slice(n - 2, n - 1)
        out[tuple(last)] -= comp[tuple(before)]
    return out


def total_variation(u: np.ndarray) -> float:
    g = gradient(np.asarray(u, dtype=np.float64))
    return float(np.sqrt((g**2).sum(axis=0)).sum())


def rof_objective(u: np.ndarray, f: np.ndarray, weight: float) -> float:
    """0.5 * ||u - f||^2 + weight * TV(u), isotropic TV."""
    u = np.asarray(u, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    return 0.5 * float(((u - f) ** 2).sum()) + weight * total_variation(u)


@dataclass
class DenoiseResult:
    """Output of :func:`tv_denoise` with ``return_info``.

    ``objective`` holds the ROF objective of the accepted iterates (starting
    with the input itself), ``candidate_objective`` that of every raw dual
    step and ``dual_objective`` the quantity ``0.5 * ||f - weight * div p||^2``
    that the dual iteration decreases.
    """

    image: np.ndarray
    iterations: int
    converged: bool
    objective: list[float] = field(default_factory=list)
    candidate_objective: list[float] = field(default_factory=list)
    dual_objective: list[float] = field(default_factory=list)


def tv_denoise(
    volume: np.ndarray,
    weight: float = 0.1,
    max_iterations: int = 100,
    tolerance: float = 1e-4,
    return_info: bool = False,
):
    """Total-variation (ROF) denoising by Chambolle's dual projection iteration.

    Works for any dimensionality; the step size is fixed for the 3D bound.
    The dual iteration decreases its own objective but the primal images it
    yields need not decrease the ROF objective at every step, so a candidate
    image replaces the current one only when it does not increase it. The
    candidates converge to the minimiser, hence so do the accepted images.
    Iteration stops once the largest voxel change between consecutive
    candidates falls below ``tolerance``.
    With ``return_info`` a :class:`DenoiseResult` is returned instead of the array.
    """
    if weight <= 0:
        raise ValueError("weight must be positive")
    if max_iterations < 1:
        raise ValueError("max_iterations must be positive")
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    f = np.asarray(volume, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise ValueError("input volume contains non-finite values")

    def objective(u, grad):
        # grad is gradient(u); reused by the next dual step
        return 0.5 * float(((u - f) ** 2).sum()) + weight * float(np.sqrt((grad**2).sum(axis=0)).sum())

    p = np.zeros((f.ndim,) + f.shape)
    cand = f
    grad = gradient(f)
    best, best_obj = f, objective(f, grad)
    history, raw, dual = [best_obj], [best_obj], [0.5 * float((f**2).sum())]
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        # div p - f / weight == -cand / weight
        g = -grad / weight
        norm = np.sqrt((g**2).sum(axis=0))
        p = (p + TV_STEP * g) / (1.0 + TV_STEP * norm)
        cand_next = f - weight * divergence(p)
        change = float(np.abs(cand_next - cand).max())
        cand = cand_next
        grad = gradient(cand)
        obj = objective(cand, grad)
        if obj <= best_obj:
            best, best_obj = cand, obj
        if return_info:
            history.append(best_obj)
            raw.append(obj)
            dual.append(0.5 * float((cand**2).sum()))
        if change < tolerance:
            converged = True
            break

    out = best.astype(np.float32)
    if return_info:
        return DenoiseResult(out, it, converged, history, raw, dual)
    return out


def labels_to_three_class(labels: np.ndarray, border_thickness: int = 1, connectivity: int = 6) -> np.ndarray:
    """Background / object / border map from an instance labelling.

    Foreground voxels within ``border_thickness`` steps (6-neighbourhood steps
    by default) of a voxel with a different label, background included, become
    border. Out-of-bounds neighbours do not count. Segments at least
    ``2 * border_thickness + 1`` voxels thick keep an object core.
    """
    if border_thickness < 1:
        raise ValueError("border_thickness must be positive")
    labels = np.asarray(labels)
    core = erode(labels, connectivity=connectivity, iterations=border_thickness)
    classes = np.zeros(labels.shape, dtype=np.uint32)
    classes[labels != 0] = BORDER
    classes[core != 0] = OBJECT
    return classes

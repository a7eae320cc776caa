"""Weighted point-cloud probability measures."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MASS_TOL = 1e-9


class NotProbabilityMeasureError(ValueError):
    """Raised when an operation needs a probability measure and gets something else."""


def order_free_sum(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum along ``axis`` after sorting, so the result does not depend on element order.

    Floating point addition is not associative; sorting first makes sums over
    particles exactly invariant under index permutations.
    """
    # np.sum's reduction order depends on memory layout, so fix the layout too
    ordered = np.ascontiguousarray(np.moveaxis(np.sort(values, axis=axis), axis, -1))
    return np.sum(ordered, axis=-1)


@dataclass(frozen=True)
class WeightedSampleMeasure:
    """A discrete measure sum_i w_i delta_{x_i}.

    ``points`` has shape ``(..., M, d)``; leading axes are batch axes (one
    measure per replication, say). ``weights`` must broadcast to ``(..., M)``.
    """

    points: np.ndarray
    weights: np.ndarray
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        if self.validate:
            try:
                np.broadcast_shapes(w.shape, pts.shape[:-1])
            except ValueError as exc:
                raise ValueError(
                    f"weights of shape {w.shape} do not match points of shape {pts.shape}"
                ) from exc
            if np.any(w < 0):
                raise NotProbabilityMeasureError("weights must be nonnegative")
            if not np.all(np.abs(self.mass - 1.0) <= MASS_TOL):
                raise NotProbabilityMeasureError(
                    f"total mass must be 1, got {np.ravel(self.mass)[:5]}"
                )

    @classmethod
    def empirical(cls, points, validate: bool = True) -> "WeightedSampleMeasure":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        m = pts.shape[-2]
        return cls(pts, np.full(m, 1.0 / m), validate=validate)

    @classmethod
    def dirac(cls, x) -> "WeightedSampleMeasure":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(x[None, :], np.ones(1))

    @classmethod
    def mixture(cls, measures, coefs) -> "WeightedSampleMeasure":
        """Convex combination of unbatched measures."""
        coefs = np.asarray(coefs, dtype=float)
        pts = np.concatenate([mu.points for mu in measures], axis=-2)
        w = np.concatenate(
            [c * np.broadcast_to(mu.weights, mu.points.shape[:-1]) for c, mu in zip(coefs, measures)],
            axis=-1,
        )
        return cls(pts, w)

    @property
    def d(self) -> int:
        return self.points.shape[-1]

    @property
    def size(self) -> int:
        return self.points.shape[-2]

    @property
    def batch_shape(self) -> tuple:
        return self.points.shape[:-2]

    @property
    def mass(self) -> np.ndarray:
        return np.sum(np.broadcast_to(self.weights, self.points.shape[:-1]), axis=-1)

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Return lambda[f] from the values ``(..., M)`` of a scalar f at the support points."""
        values = np.asarray(values, dtype=float)
        return order_free_sum(values * self.weights, axis=-1)

    def integrate_vector(self, values: np.ndarray) -> np.ndarray:
        """Componentwise lambda[f] for vector-valued f given as ``(..., M, k)``."""
        values = np.asarray(values, dtype=float)
        return order_free_sum(values * self.weights[..., None], axis=-2)

    def permuted(self, perm) -> "WeightedSampleMeasure":
        perm = np.asarray(perm)
        w = np.broadcast_to(self.weights, self.points.shape[:-1])
        return WeightedSampleMeasure(self.points[..., perm, :], w[..., perm], validate=False)

    def batch_item(self, index) -> "WeightedSampleMeasure":
        w = np.broadcast_to(self.weights, self.points.shape[:-1])
        return WeightedSampleMeasure(self.points[index], w[index], validate=False)

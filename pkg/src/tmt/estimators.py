"""scikit-learn style wrappers around the reconstruction solvers.

Only the inversion steps follow the estimator protocol: hyperparameters
go to ``__init__``, ``fit`` takes the data and returns ``self``, fitted
state ends in an underscore.  ``X`` is a list of sinogram value arrays
(``I^0 .. I^m``); the fan, metric and grid are hyperparameters because
they define the operator, not the data.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .fields import Grid
from .geometry import DomainSpec, MetricSpec, make_fan
from .reconstruct import BOUNDARY_WEIGHT, TIKHONOV, assemble_forward, cascade_reconstruct, solenoidal_invert

__all__ = ["SolenoidalInverter", "MomentCascadeReconstructor"]


class _FanMixin:
    def _setup(self):
        g = self.metric if self.metric is not None else MetricSpec.euclidean()
        dom = DomainSpec(self.radius)
        fan = self.fan if self.fan is not None else make_fan(g, dom, self.n_points, self.n_dirs, self.step)
        return g, fan, Grid(self.n_grid, self.radius)


class SolenoidalInverter(_FanMixin, TransformerMixin, BaseEstimator):
    """δ-penalized least-squares inversion of ``I^0`` data of tensor order ``order``."""

    def __init__(
        self,
        order=1,
        metric=None,
        fan=None,
        n_grid=64,
        n_points=64,
        n_dirs=64,
        step=5e-3,
        radius=1.0,
        lam=1e-3,
        rtol=1e-8,
        max_iter=5000,
        boundary_weight=BOUNDARY_WEIGHT,
        tikhonov=TIKHONOV,
    ):
        self.order = order
        self.metric = metric
        self.fan = fan
        self.n_grid = n_grid
        self.n_points = n_points
        self.n_dirs = n_dirs
        self.step = step
        self.radius = radius
        self.lam = lam
        self.rtol = rtol
        self.max_iter = max_iter
        self.boundary_weight = boundary_weight
        self.tikhonov = tikhonov

    def _solve(self, X):
        data = np.asarray(X[0] if isinstance(X, (list, tuple)) else X, dtype=float)
        return solenoidal_invert(
            data, self.operator_, self.metric_, self.mask_, self.lam, self.rtol, self.max_iter,
            self.boundary_weight, self.tikhonov,
        )

    def fit(self, X, y=None):
        g, fan, grid = self._setup()
        self.metric_ = g
        self.mask_ = grid.disk_mask(self.radius)
        self.operator_ = assemble_forward(fan, grid, g, 0, self.order)
        res = self._solve(X)
        self.field_ = res.field
        self.n_iter_ = res.iterations
        self.residual_history_ = res.residual_history
        return self

    def transform(self, X):
        """Grid values of the inversion of ``X`` with the fitted operator."""
        check_is_fitted(self, "operator_")
        return self._solve(X).field.values

    def fit_transform(self, X, y=None):
        return self.fit(X, y).field_.values

    def predict(self, X=None):
        """Sinogram of the fitted field."""
        check_is_fitted(self, "field_")
        return self.operator_.apply(self.field_)


class MomentCascadeReconstructor(_FanMixin, TransformerMixin, BaseEstimator):
    """Stage-wise recovery of ``v_0 .. v_m`` from ``I^0 .. I^m``."""

    def __init__(
        self,
        metric=None,
        fan=None,
        n_grid=64,
        n_points=64,
        n_dirs=64,
        step=5e-3,
        radius=1.0,
        lam=1e-3,
        rtol=1e-8,
        max_iter=5000,
    ):
        self.metric = metric
        self.fan = fan
        self.n_grid = n_grid
        self.n_points = n_points
        self.n_dirs = n_dirs
        self.step = step
        self.radius = radius
        self.lam = lam
        self.rtol = rtol
        self.max_iter = max_iter

    def _solve(self, X, truth=None):
        return cascade_reconstruct(
            [np.asarray(x, dtype=float) for x in X], self.fan_, self.metric_, self.grid_, self.lam,
            radius=self.radius, truth=truth, rtol=self.rtol, max_iter=self.max_iter,
        )

    def fit(self, X, y=None):
        """``y`` optionally holds the ground-truth field for ``rel_error_``."""
        self.metric_, self.fan_, self.grid_ = self._setup()
        rec = self._solve(X, y)
        self.parts_ = rec.parts
        self.field_ = rec.f_hat
        self.stage_residuals_ = rec.stage_residuals
        self.rel_error_ = rec.rel_error
        return self

    def transform(self, X):
        """Grid values of ``f̂`` reconstructed from moment data ``X``."""
        check_is_fitted(self, "fan_")
        return self._solve(X).f_hat.values

    def fit_transform(self, X, y=None):
        return self.fit(X, y).field_.values

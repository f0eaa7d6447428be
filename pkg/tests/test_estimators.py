import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from tmt.estimators import MomentCascadeReconstructor, SolenoidalInverter
from tmt.fields import Grid
from tmt.geometry import DomainSpec, MetricSpec, make_fan
from tmt.recipes import curl_field, gaussian_bump
from tmt.reconstruct import cascade_reconstruct
from tmt.transforms import moment_values

GRID = Grid(32)


@pytest.fixture(scope="module")
def fan32():
    return make_fan(MetricSpec.euclidean(), DomainSpec(1.0), 32, 32, 5e-3)


def test_params_roundtrip():
    est = SolenoidalInverter(order=0, lam=2e-3, n_grid=16)
    params = est.get_params()
    assert params["lam"] == 2e-3 and params["order"] == 0
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(lam=5e-3)
    assert est.lam == 5e-3


@pytest.mark.parametrize("cls", [SolenoidalInverter, MomentCascadeReconstructor])
def test_unfitted_raises(cls):
    with pytest.raises(NotFittedError):
        cls().transform([np.zeros(4)])


def test_solenoidal_inverter_scalar(fan32):
    f = gaussian_bump((0.1, -0.2), 0.25, 1.0, 0)
    data = moment_values(f, fan32, [0])[0]
    est = SolenoidalInverter(order=0, fan=fan32, n_grid=32)
    assert est.fit(data) is est
    vals = est.field_.values
    assert vals.shape == (32, 32, 1)
    mask = GRID.disk_mask(1.0)
    truth = f.sample(GRID).values
    assert np.linalg.norm((vals - truth)[mask]) <= 0.05 * np.linalg.norm(truth[mask])
    assert np.abs(est.predict() - data).max() <= 0.05 * np.abs(data).max()
    assert est.n_iter_ <= len(est.residual_history_)
    # transform inverts new data with the fitted operator
    np.testing.assert_allclose(est.transform(-2.0 * data), -2.0 * vals, atol=1e-4 * np.abs(vals).max())
    assert np.array_equal(clone(est).fit_transform(data), vals)


def test_cascade_reconstructor_matches_function(fan32):
    g = MetricSpec.euclidean()
    f = curl_field(power=4)
    data = list(moment_values(f, fan32, [0, 1]))
    est = MomentCascadeReconstructor(fan=fan32, n_grid=32).fit(data, f)
    ref = cascade_reconstruct(data, fan32, g, GRID, truth=f)
    assert np.array_equal(est.field_.values, ref.f_hat.values)
    assert np.array_equal(est.transform(data), ref.f_hat.values)
    assert est.rel_error_ == ref.rel_error
    assert [p.order for p in est.parts_] == [1, 0]
    assert len(est.stage_residuals_) == 2


def test_cascade_reconstructor_without_truth(fan32):
    data = [np.zeros(len(fan32))] * 2
    est = MomentCascadeReconstructor(fan=fan32, n_grid=32)
    vals = est.fit_transform(data)
    assert est.rel_error_ is None
    assert np.linalg.norm(vals) <= 1e-6

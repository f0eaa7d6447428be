import numpy as np
import pytest

from tmt.geometry import DomainSpec, MetricSpec

CONFORMAL_EXPR = "0.1*(x1^2 + x2^2)"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def euclid():
    return MetricSpec.euclidean()


@pytest.fixture(scope="session")
def conformal():
    return MetricSpec.conformal(CONFORMAL_EXPR)


@pytest.fixture(scope="session")
def dom():
    return DomainSpec(1.0)


def conformal_christoffel(x):
    """Closed form for g = exp(2λ)δ, λ = 0.1|x|²: Γ^k_ij = δ_ki ∂_jλ + δ_kj ∂_iλ − δ_ij ∂_kλ."""
    x = np.asarray(x, dtype=float)
    dl = 0.2 * x
    eye = np.eye(2)
    return (
        np.einsum("ki,...j->...kij", eye, dl)
        + np.einsum("kj,...i->...kij", eye, dl)
        - np.einsum("ij,...k->...kij", eye, dl)
    )


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

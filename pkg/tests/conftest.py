import pytest

from promptpix import autodiff


@pytest.fixture(autouse=True)
def finiteness_checks():
    """Every op result is checked for NaN/Inf while tests run."""
    autodiff.set_debug(True)
    yield
    autodiff.set_debug(False)

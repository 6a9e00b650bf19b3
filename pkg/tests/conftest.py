import pytest

from lord.autograd import set_debug_checks


@pytest.fixture(autouse=True, scope="session")
def _debug_nan_checks():
    set_debug_checks(True)
    yield
    set_debug_checks(False)

import pytest

from stackstream.core import ALLOC


@pytest.fixture(autouse=True)
def leak_guard():
    """Every test starts clean and must end with zero live slices."""
    assert ALLOC.live_slices == 0, "leak from a previous test"
    assert ALLOC.internal_bytes == 0
    ALLOC.reset_peaks()
    yield
    assert ALLOC.live_slices == 0, "slice leak"
    assert ALLOC.live_refs == 0, "reference count drift"
    assert ALLOC.internal_bytes == 0, "internal buffer leak"

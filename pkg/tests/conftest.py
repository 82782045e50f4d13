import sys

import pytest

from lidtree import Store
from lidtree.audit import assert_valid


@pytest.fixture
def make_store():
    """Factory for stores that are closed (and audited) at teardown."""
    stores = []

    def build(**overrides):
        overrides.setdefault("threaded_channel", False)
        overrides.setdefault("background_sweep", False)
        store = Store(**overrides)
        stores.append(store)
        return store

    yield build
    for store in stores:
        store.quiesce()
        assert_valid(store)
        store.close()


@pytest.fixture
def fast_switching():
    old = sys.getswitchinterval()
    sys.setswitchinterval(1e-5)
    yield
    sys.setswitchinterval(old)

import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidtree import OutOfMemory, WriteResult
from lidtree.audit import assert_valid, audit
from lidtree.errors import EmptyKey, KeyTooLong, ValueTooLong
from lidtree.node_format import MAX_KEY, MAX_VALUE, latest_items, read_header


def key(i: int) -> bytes:
    return b"k%07d" % i


def all_items(store):
    return audit(store).contents


def root_leaf_header(store):
    lid, _ = store.table.root
    return read_header(store.arena.buffer(store.table.resolve(lid)))


def test_result_codes(make_store):
    store = make_store()
    assert store.put(b"a", b"1") == WriteResult.INSERTED
    assert store.put(b"a", b"2") == WriteResult.UPDATED
    assert store.update(b"a", b"3") == WriteResult.UPDATED
    assert store.update(b"b", b"3") == WriteResult.NOT_FOUND
    assert store.delete(b"b") == WriteResult.NOT_FOUND
    assert store.get(b"a") == b"3"
    assert store.delete(b"a") == WriteResult.DELETED
    assert store.get(b"a") is None
    assert store.delete(b"a") == WriteResult.NOT_FOUND


def test_input_limits(make_store):
    store = make_store()
    with pytest.raises(EmptyKey):
        store.put(b"", b"v")
    with pytest.raises(KeyTooLong):
        store.put(b"k" * (MAX_KEY + 1), b"v")
    with pytest.raises(ValueTooLong):
        store.put(b"k", b"v" * (MAX_VALUE + 1))
    store.put(b"k" * MAX_KEY, b"v" * MAX_VALUE)
    assert store.get(b"k" * MAX_KEY) == b"v" * MAX_VALUE


def test_twelfth_small_put_triggers_the_only_merge(make_store):
    store = make_store(log_threshold=512)
    rng = random.Random(3)
    for _ in range(12):
        store.put(rng.randbytes(16), rng.randbytes(16))
    metrics = store.writer.metrics
    assert metrics.fast_path == 11
    assert metrics.merges == 1
    assert store.table.remaps == 1
    header = root_leaf_header(store)
    assert header.bytes_used == header.log_boundary  # log emptied by the merge


def test_zero_threshold_merges_every_write(make_store):
    store = make_store(log_threshold=0)
    for i in range(20):
        store.put(key(i), b"v")
    assert store.writer.metrics.fast_path == 0
    assert store.writer.metrics.merges == 20


def test_fast_path_publishes_one_version_per_write(make_store):
    store = make_store()
    seen = []
    store.writer.hooks["fast_path.appended"] = lambda key, version: seen.append(version)
    for i in range(5):
        store.put(key(i), b"v")
    assert seen == [1, 2, 3, 4, 5]
    assert store.versions.read_version == 5


def test_leaf_split_grows_root(make_store):
    store = make_store()
    items = {key(i): b"x" * 100 for i in range(200)}
    for k, v in items.items():
        store.put(k, v)
    metrics = store.writer.metrics
    assert metrics.splits >= 2 and metrics.root_grows == 1
    assert store.height == 2
    assert all_items(store) == sorted(items.items())


def test_cascading_splits_reach_height_three(make_store):
    store = make_store(log_threshold=2048)
    rng = random.Random(5)
    items = {}
    for _ in range(3000):
        k = rng.randbytes(200)
        items[k] = rng.randbytes(8)
        store.put(k, items[k])
    assert store.height >= 3
    assert store.writer.metrics.interior_splits >= 1
    assert all_items(store) == sorted(items.items())


def build_leaves(store, items, leaf_reserve):
    store.writer.bulk_load(items, leaf_reserve=leaf_reserve)
    store.quiesce()


def leaf_sizes(store):
    """Item counts of the leaves in key order."""
    report = audit(store)
    assert report.ok, report.problems
    counts = []
    lid = store.table.root[0]
    while True:
        header = read_header(store.arena.buffer(store.table.resolve(lid)))
        if header.is_leaf:
            break
        lid = header.leftmost_child
    while lid:
        buf = store.arena.buffer(store.table.resolve(lid))
        counts.append(len(latest_items(buf)))
        lid = read_header(buf).right_sibling
    return counts


def big_items(n, size=400):
    return [(key(i), b"v" * size) for i in range(n)]


def test_underflow_merges_adjacent_leaves(make_store):
    store = make_store(log_threshold=0)
    build_leaves(store, big_items(18), leaf_reserve=5000)
    assert leaf_sizes(store) == [6, 6, 6]
    for i in (6, 7, 8):
        store.delete(key(i))
    assert store.writer.metrics.node_merges == 1
    assert leaf_sizes(store) == [6, 9]
    root = read_header(store.arena.buffer(store.table.resolve(store.table.root[0])))
    assert not root.is_leaf and root.shortcut_count == 0
    assert [k for k, _ in all_items(store)] == [key(i) for i in range(18) if i not in (6, 7, 8)]


def test_underflow_borrows_when_merge_would_overflow(make_store):
    store = make_store(log_threshold=0)
    build_leaves(store, big_items(19, size=430), leaf_reserve=768)
    assert leaf_sizes(store) == [15, 4]
    store.delete(key(18))
    metrics = store.writer.metrics
    assert metrics.borrows == 1 and metrics.node_merges == 0
    assert leaf_sizes(store) == [9, 9]


def test_delete_everything_shrinks_root(make_store):
    store = make_store()
    keys = [key(i) for i in range(3000)]
    for k in keys:
        store.put(k, b"y" * 40)
    assert store.height >= 2
    random.Random(1).shuffle(keys)
    for n, k in enumerate(keys):
        assert store.delete(k) == WriteResult.DELETED
        if n % 500 == 0:
            store.quiesce()
            assert_valid(store)
    assert store.height == 1
    assert store.writer.metrics.root_shrinks >= 1
    assert all_items(store) == []
    store.put(b"again", b"1")
    assert store.get(b"again") == b"1"


def test_exhausted_arena_is_retried_after_reclaim(make_store):
    store = make_store(log_threshold=0, arena_capacity=8)
    for i in range(50):
        store.put(key(i), b"v")
    assert store.writer.metrics.oom_retries > 0
    assert len(all_items(store)) == 50


def test_out_of_memory_leaves_store_intact(make_store):
    store = make_store(arena_capacity=4)
    written = {}
    with pytest.raises(OutOfMemory):
        for i in range(10000):
            store.put(key(i), b"z" * 200)
            written[key(i)] = b"z" * 200
    store.quiesce()
    assert all_items(store) == sorted(written.items())


def test_bulk_load_rejects_unsorted_and_nonempty(make_store):
    store = make_store()
    with pytest.raises(ValueError):
        store.load([(b"b", b""), (b"a", b"")])
    store.put(b"a", b"1")
    with pytest.raises(ValueError):
        store.load([(b"c", b"")])


def test_bulk_load_then_writes(make_store):
    store = make_store()
    items = [(key(i), b"%d" % i) for i in range(5000)]
    height = store.load(items)
    assert height == store.height >= 2
    for i in range(0, 5000, 7):
        store.update(key(i), b"new")
    store.put(b"k0000000a", b"mid")
    expected = dict(items)
    for i in range(0, 5000, 7):
        expected[key(i)] = b"new"
    expected[b"k0000000a"] = b"mid"
    assert all_items(store) == sorted(expected.items())


def test_writers_restart_instead_of_waiting(make_store):
    store = make_store(threaded_channel=True, log_threshold=0)
    for i in range(100):
        store.put(key(i), b"0")
    hold = threading.Event()
    entered = threading.Event()

    def slow_hook(plan, version):
        entered.set()
        hold.wait(2)
    store.writer.hooks["before_swap"] = slow_hook
    t = threading.Thread(target=lambda: store.put(b"k0000050", b"x" * 460))
    t.start()
    assert entered.wait(2)
    del store.writer.hooks["before_swap"]
    blocked = threading.Thread(target=lambda: store.put(b"k0000051", b"1"))
    blocked.start()
    blocked.join(0.1)
    assert blocked.is_alive()  # spinning on restart while the leaf is locked
    hold.set()
    t.join()
    blocked.join(2)
    assert not blocked.is_alive()
    assert store.writer.metrics.restarts > 0
    assert store.get(b"k0000051") == b"1"


OPS = st.lists(st.tuples(st.sampled_from(["put", "update", "delete"]),
                         st.integers(0, 300), st.integers(0, 300)), max_size=400)


@settings(max_examples=40, deadline=None)
@given(OPS, st.sampled_from([0, 128, 512, 2048]))
def test_matches_reference_dict(ops, threshold):
    from lidtree import Store
    with Store(log_threshold=threshold, threaded_channel=False,
               background_sweep=False) as store:
        ref = {}
        for op, k, size in ops:
            kb, value = key(k), bytes([k % 251]) * size
            if op == "put":
                expect = WriteResult.UPDATED if kb in ref else WriteResult.INSERTED
                ref[kb] = value
                assert store.put(kb, value) == expect
            elif op == "update":
                expect = WriteResult.UPDATED if kb in ref else WriteResult.NOT_FOUND
                if kb in ref:
                    ref[kb] = value
                assert store.update(kb, value) == expect
            else:
                expect = WriteResult.DELETED if kb in ref else WriteResult.NOT_FOUND
                ref.pop(kb, None)
                assert store.delete(kb) == expect
        store.quiesce()
        assert assert_valid(store).contents == sorted(ref.items())
        for kb in list(ref)[:20]:
            assert store.get(kb) == ref[kb]

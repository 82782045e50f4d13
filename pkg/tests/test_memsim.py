import random

import pytest

from lidtree import Store
from lidtree.memsim import (
    Channel,
    MemoryModel,
    SimBackend,
    SimConfig,
    Simulator,
    TraceRecord,
    chunk_mask,
    flatten_stats,
    nat_violations,
    read_trace,
    write_trace,
)
from lidtree.node_format import NODE_SIZE


@pytest.fixture(scope="module")
def loaded():
    store = Store(threaded_channel=False, background_sweep=False)
    rng = random.Random(4)
    keys = sorted({rng.randbytes(96) for _ in range(20000)})
    store.load([(k, b"v" * 16) for k in keys])
    assert store.height == 3
    ops = [("get", keys[rng.randrange(len(keys))]) for _ in range(6000)]
    yield store, keys, ops
    store.close()


def simulate(store, ops, warmup=2000, trace=False, **config):
    sim = Simulator(SimConfig(**config), store)
    try:
        return sim.run(ops, warmup=warmup, trace=trace)
    finally:
        sim.close()


class Events:
    def __init__(self):
        self.queue = []

    def __call__(self, at, fn):
        self.queue.append((at, fn))

    def run_until(self, t):
        due = sorted((e for e in self.queue if e[0] <= t), key=lambda e: e[0])
        self.queue = [e for e in self.queue if e[0] > t]
        for _, fn in due:
            fn()


def test_channel_is_fifo_with_latency():
    ch = Channel("host", bandwidth=1e9, latency=1e-6)
    first = ch.submit(0.0, 1000)
    second = ch.submit(0.0, 1000)
    assert first == pytest.approx(1e-6 + 1e-6)
    assert second == pytest.approx(2e-6 + 1e-6)
    assert ch.projected(0.0, 1000) == pytest.approx(3e-6 + 1e-6)
    assert ch.inflight(0.0) == (2, 2000)
    assert ch.inflight(1.0) == (0, 0)
    summary = ch.summary(1e-3)
    assert summary["read_bytes"] == 2000 and summary["ops"] == 2
    assert summary["utilization"] == pytest.approx(2e-6 / 1e-3)


def test_channel_fills_idle_gaps():
    ch = Channel("host", bandwidth=1e9, latency=0.0)
    late = ch.submit(5e-6, 1000)  # ready later, reserves [5us, 6us)
    early = ch.submit(0.0, 1000)  # served before it rather than queued behind
    assert early == pytest.approx(1e-6) and late == pytest.approx(6e-6)
    assert ch.submit(0.0, 5000) == pytest.approx(11e-6)  # no 5us gap left before it
    ch.advance(7e-6)
    assert ch.projected(0.0, 1000) == pytest.approx(12e-6)


def test_chunk_mask():
    assert chunk_mask(0, 512) == 0b11
    assert chunk_mask(300, 10) == 0b10
    assert chunk_mask(250, 10) == 0b11
    assert chunk_mask(510, 300) == 0b1110
    assert chunk_mask(0, 0) == 0
    assert chunk_mask(0, NODE_SIZE) == (1 << 32) - 1


def test_leaves_always_use_host_link():
    model = MemoryModel(SimConfig(), Events())
    for _ in range(3):
        _, channel = model.access(0.0, 7, 100, 0, 512, interior=False)
        assert channel == "host"
    assert model.stats.interior_accesses == 0


def test_header_miss_allocates_and_fills_by_chunk():
    events = Events()
    model = MemoryModel(SimConfig(root_cache=False), events)
    done, channel = model.access(0.0, 5, 100, 0, 512, interior=True)
    assert channel == "host" and model.stats.misses == 1
    # before the write-back lands the segment is still a miss
    _, channel = model.access(done, 5, 100, 0, 512, interior=True)
    assert channel == "host"
    events.run_until(1.0)
    _, channel = model.access(1.0, 5, 100, 0, 512, interior=True)
    assert channel == "board" and model.stats.hits == 1
    # a segment never fetched is a miss; it is filled without reallocating
    _, channel = model.access(1.0, 5, 100, 1024, 300, interior=True)
    assert channel == "host"
    events.run_until(2.0)
    _, channel = model.access(2.0, 5, 100, 1024, 300, interior=True)
    assert channel == "board"
    assert model.board.write_bytes["node"] == 512 + 512 + 512


def test_non_header_miss_does_not_allocate():
    events = Events()
    model = MemoryModel(SimConfig(root_cache=False), events)
    model.access(0.0, 5, 100, 1024, 300, interior=True)
    events.run_until(1.0)
    assert model.cache.lookup(5) is None


@pytest.mark.parametrize("invalidate_first", [True, False])
def test_invalidation_beats_write_back(invalidate_first):
    events = Events()
    model = MemoryModel(SimConfig(root_cache=False), events)
    model.access(0.0, 9, 100, 0, 512, interior=True)
    if invalidate_first:
        model.invalidate(9)
        events.run_until(1.0)
        assert model.stats.discarded_writebacks == 1
    else:
        events.run_until(1.0)
        model.invalidate(9)
    assert model.cache.lookup(9) is None
    _, channel = model.access(2.0, 9, 100, 0, 512, interior=True)
    assert channel == "host"


def test_remapped_node_misses_on_address():
    events = Events()
    model = MemoryModel(SimConfig(root_cache=False), events)
    model.access(0.0, 9, 100, 0, 512, interior=True)
    events.run_until(1.0)
    _, channel = model.access(1.0, 9, 200, 0, 512, interior=True)
    assert channel == "host" and model.stats.address_mismatches == 1


def test_root_tier_serves_on_chip():
    model = MemoryModel(SimConfig(), Events())
    model.access(0.0, 1, 100, 0, 512, interior=True, root=True)
    done, channel = model.access(1.0, 1, 100, 0, 512, interior=True, root=True)
    assert channel == "chip" and done == 1.0
    model.invalidate(1)
    _, channel = model.access(2.0, 1, 100, 0, 512, interior=True, root=True)
    assert channel == "host"


def test_balancer_diverts_only_when_board_is_behind():
    events = Events()
    model = MemoryModel(SimConfig(root_cache=False, board_bandwidth=1e6), events)
    model.access(0.0, 5, 100, 0, 512, interior=True)
    events.run_until(10.0)
    model.board.reserve(10.0, 20.0)  # a long board backlog
    _, channel = model.access(10.0, 5, 100, 0, 512, interior=True)
    assert channel == "host" and model.stats.diverted == 1
    off = MemoryModel(SimConfig(root_cache=False, board_bandwidth=1e6, balancer=False),
                      events)
    off.access(0.0, 5, 100, 0, 512, interior=True)
    events.run_until(30.0)
    off.board.reserve(30.0, 40.0)
    _, channel = off.access(30.0, 5, 100, 0, 512, interior=True)
    assert channel == "board" and off.stats.diverted == 0


def test_nat_miss_charges_page_table_read():
    model = MemoryModel(SimConfig(), Events())
    model.access(0.0, 3, 100, 0, 512, interior=False, nat_miss=True)
    assert model.board.read_bytes["page_table"] == 8


def test_results_match_direct_backend(loaded):
    store, _, ops = loaded
    result = simulate(store, ops[:500], warmup=0)
    assert result.results == [store.get(k) for _, k in ops[:500]]


def test_full_cache_hits_every_interior_fetch(loaded):
    store, _, ops = loaded
    stats = simulate(store, ops).stats
    assert stats["cache"]["hit_rate"] == 1.0
    assert stats["requests"] == len(ops) - 2000


def test_balancer_never_hurts_and_only_it_diverts(loaded):
    store, _, ops = loaded
    for board in (34e9, 1e9):
        on = simulate(store, ops, board_bandwidth=board).stats
        off = simulate(store, ops, board_bandwidth=board, balancer=False).stats
        assert on["throughput"] >= off["throughput"]
        assert off["cache"]["diverted"] == 0
        if board == 1e9:
            assert on["cache"]["diverted"] > 0
            assert on["throughput"] > 1.5 * off["throughput"]


def test_hit_rate_grows_with_cache_size(loaded):
    store, _, ops = loaded
    rates = [simulate(store, ops, cache_bytes=size, root_cache=False).stats["cache"]["hit_rate"]
             for size in (0, 4 * NODE_SIZE, 8 * NODE_SIZE, 256 << 20)]
    assert rates[0] == 0.0 and rates[-1] == 1.0
    assert all(a <= b + 0.01 for a, b in zip(rates, rates[1:]))


def test_small_cache_writes_fills_to_board(loaded):
    store, _, ops = loaded
    stats = simulate(store, ops, cache_bytes=4 * NODE_SIZE, root_cache=False).stats
    assert stats["board"]["write_bytes_by_category"]["node"] > 0
    assert stats["cache"]["evictions"] > 0


def test_root_cache_beats_no_cache(loaded):
    store, _, ops = loaded
    none = simulate(store, ops, cache_bytes=0, root_cache=False).stats
    root = simulate(store, ops, cache_bytes=0, root_cache=True).stats
    assert root["throughput"] > none["throughput"]


def test_zero_requests_report_zeros(loaded):
    store, _, _ = loaded
    stats = simulate(store, [], warmup=0).stats
    assert stats["requests"] == 0 and stats["throughput"] == 0.0
    assert stats["host"]["bandwidth"] == 0.0 and stats["cache"]["hit_rate"] == 0.0


def test_trace_round_trip_and_replay(loaded, tmp_path):
    store, _, ops = loaded
    result = simulate(store, ops[:3000], warmup=0, trace=True)
    assert nat_violations(result.trace) == 0
    path = tmp_path / "trace.csv"
    write_trace(result.trace, path)
    records = read_trace(path)
    assert records == result.trace
    replay = Simulator(SimConfig()).replay(records, warmup=1000)
    assert replay.stats["requests"] == 2000
    assert replay.stats["cache"]["hit_rate"] == 1.0


def test_nat_violation_detected():
    records = [TraceRecord(1, 5, 0, 512, True, 100), TraceRecord(1, 5, 512, 64, True, 200),
               TraceRecord(1, 5, 0, 512, True, 300, chain=True)]
    assert nat_violations(records) == 1


def test_config_loading(tmp_path):
    path = tmp_path / "sim.yaml"
    path.write_text("cache_bytes: 1048576\nbalancer: false\n")
    cfg = SimConfig.load(path)
    assert cfg.cache_bytes == 1 << 20 and cfg.balancer is False
    with pytest.raises(ValueError):
        SimConfig.from_mapping({"cache_size": 1})


def test_flatten_stats():
    assert flatten_stats({"a": {"b": 1, "c": {"d": 2}}, "e": 3}) == {"a_b": 1, "a_c_d": 2,
                                                                     "e": 3}


def test_live_backend_serves_store_reads(make_store):
    store = make_store()
    for i in range(2000):
        store.put(b"key%05d" % i, b"v%d" % i)
    backend = SimBackend(store)
    previous, store.reader.backend = store.reader.backend, backend
    try:
        for i in range(0, 2000, 7):
            assert store.get(b"key%05d" % i) == b"v%d" % i
        store.put(b"key00007", b"changed")
        assert store.get(b"key00007") == b"changed"
    finally:
        store.reader.backend = previous
        backend.detach()
    stats = backend.stats()
    assert stats["host"]["read_bytes"] > 0 and stats["elapsed"] > 0
    assert backend._invalidate not in store.table.read.listeners


def test_zero_byte_cache_handles_invalidation():
    model = MemoryModel(SimConfig(cache_bytes=0, root_cache=False), Events())
    model.invalidate(3)
    _, channel = model.access(0.0, 3, 100, 0, 512, interior=True)
    assert channel == "host"

"""Acceptance checks at their full stated sizes.

Each test prints one ``criterion N: PASS|FAIL`` line with its measurements.
Run just these with ``pytest -m acceptance -s``.
"""

import bisect
import itertools
import random
import sys
import threading
import time
from collections import defaultdict

import pytest
from support import Stepper, VersionedMap, leaf_lids

from lidtree import Store, WriteResult
from lidtree.audit import audit
from lidtree.lincheck import Operation, Recorder, check
from lidtree.memsim import SimConfig, Simulator
from lidtree.node_format import (
    EntryKind,
    LogEntry,
    latest_items,
    order_hint_for,
    read_header,
    sort_log,
)
from lidtree.service import (
    Client,
    Opcode,
    Request,
    Response,
    ServerThread,
    Status,
    decode_request,
    decode_response,
    encode_request,
    encode_response,
)

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}", flush=True)
    return emit


@pytest.fixture
def switching():
    old = sys.getswitchinterval()
    sys.setswitchinterval(1e-4)
    yield
    sys.setswitchinterval(old)


# 1. linearizability of concurrent histories

KEYS64 = [b"key%013d" % i for i in range(64)]


def test_concurrent_histories_are_linearizable(verdict, switching):
    histories, writers, readers, per_client = 10_000, 8, 8, 3
    store = Store(log_threshold=128)
    rec = Recorder()
    start_gate = threading.Barrier(writers + readers + 1)
    end_gate = threading.Barrier(writers + readers + 1)
    stop = threading.Event()
    failures = []

    def writer(c):
        rng = random.Random(c)
        while True:
            start_gate.wait()
            if stop.is_set():
                return
            try:
                for _ in range(per_client):
                    key, r = rng.choice(KEYS64), rng.random()
                    if r < 0.5:
                        rec.call(c, store, "put", key, rng.randbytes(rng.randrange(1, 470)))
                    elif r < 0.7:
                        rec.call(c, store, "update", key, rng.randbytes(rng.randrange(1, 470)))
                    else:
                        rec.call(c, store, "delete", key)
            except BaseException as exc:
                failures.append(exc)
            end_gate.wait()

    def reader(c):
        rng = random.Random(c)
        while True:
            start_gate.wait()
            if stop.is_set():
                return
            try:
                for _ in range(per_client):
                    if rng.random() < 0.5:
                        rec.call(c, store, "get", rng.choice(KEYS64))
                    else:
                        lo, hi = sorted(rng.sample(range(64), 2))
                        rec.call(c, store, "scan", KEYS64[lo], KEYS64[hi])
            except BaseException as exc:
                failures.append(exc)
            end_gate.wait()

    threads = [threading.Thread(target=writer, args=(c,)) for c in range(writers)]
    threads += [threading.Thread(target=reader, args=(writers + c,)) for c in range(readers)]
    for t in threads:
        t.start()
    violations, started = 0, time.perf_counter()
    structural = 0
    try:
        for _ in range(histories):
            initial = dict(store.scan(KEYS64[0], KEYS64[-1]))
            splits = store.writer.metrics.splits + store.writer.metrics.node_merges
            rec.history = []
            start_gate.wait()
            end_gate.wait()
            structural += store.writer.metrics.splits + store.writer.metrics.node_merges > splits
            if failures:
                raise failures[0]
            if not check(rec.history, initial).ok:
                violations += 1
    finally:
        stop.set()
        start_gate.wait()
        for t in threads:
            t.join()
        store.quiesce()
        report = audit(store)
        store.close()
    elapsed = time.perf_counter() - started
    ok = violations == 0 and elapsed < 600 and report.ok
    verdict(1, ok, f"{histories} histories of {(writers + readers) * per_client} ops, "
                   f"{violations} violations, {structural} with splits/merges, "
                   f"{elapsed:.0f}s (limit 600s)")
    assert ok


# 2. directed split race with and without snapshots

def split_race_trial(mvcc: bool, seed: int) -> bool:
    """True when the scan history linearizes."""
    rng = random.Random(seed)
    with Store(mvcc=mvcc, threaded_channel=False, background_sweep=False) as store:
        items = [(b"k%05d" % (i * 100), rng.randbytes(rng.randrange(250, 350)))
                 for i in range(rng.randrange(30, 50))]
        store.load(items)
        left, right = leaf_lids(store)[:2]
        left_keys = [k for k, _ in latest_items(store.arena.buffer(store.table.resolve(left)))]
        right_keys = [k for k, _ in latest_items(store.arena.buffer(store.table.resolve(right)))]
        clock = itertools.count()
        history = []

        def put(key, value):
            call = next(clock)
            result = store.put(key, value)
            history.append(Operation(1, "put", (key, value), result, call, next(clock)))

        lower, upper = items[0][0], b"k99999"
        scan = Stepper(store, "scan", lower, upper)
        scan_call = next(clock)
        scan.run_until(lambda f: f.lid == right)  # left leaf fully read
        splits = store.writer.metrics.splits
        n = 0
        while store.writer.metrics.splits == splits:
            put(rng.choice(left_keys) + b"s%03d" % n, b"s" * 469)
            n += 1
        put(left_keys[-1] + b"k", b"K")  # right half of the split left leaf
        put(rng.choice(right_keys) + b"j", b"J")  # strictly after k
        result = scan.finish()
        history.append(Operation(0, "scan", (lower, upper), result, scan_call, next(clock)))
        return check(history, dict(items)).ok


def test_split_race_needs_snapshots(verdict):
    trials = 100_000
    off = sum(not split_race_trial(False, seed) for seed in range(trials))
    on = sum(not split_race_trial(True, seed) for seed in range(trials))
    ok = off >= 1 and on == 0
    verdict(2, ok, f"{trials} trials: {off} non-linearizable scans with snapshots off, "
                   f"{on} with snapshots on")
    assert ok


# 3. snapshot reads against a versioned reference

def oracle_key(n: int) -> bytes:
    return b"o%05d" % n + b"x" * (n % 24)


def test_snapshot_reads_match_versioned_reference(verdict):
    ops, space = 100_000, 4000
    rng = random.Random(3)
    ref = VersionedMap()
    pending: list[Stepper] = []
    checked = mismatches = 0
    with Store() as store:
        def settle(req):
            nonlocal checked, mismatches
            got = req.finish()
            meta = req.meta
            if meta.op == "get":
                want = ref.value_at(meta.lower, meta.read_version)
            else:
                want = ref.scan_at(meta.lower, meta.upper, meta.read_version)
            checked += 1
            mismatches += got != want

        for i in range(ops):
            key, r = oracle_key(rng.randrange(space)), rng.random()
            if i // 20_000 % 2 and r < 0.45:
                r = 0.45 + r / 0.45 * 0.2  # shrinking phase: writes become deletes
            if r < 0.35:
                value = rng.randbytes(rng.randrange(1, 200))
                store.put(key, value)
                ref.record(store.versions.write_version, key, value)
            elif r < 0.45:
                value = rng.randbytes(rng.randrange(1, 200))
                if store.update(key, value) == WriteResult.UPDATED:
                    ref.record(store.versions.write_version, key, value)
            elif r < 0.65:
                if store.delete(key) == WriteResult.DELETED:
                    ref.record(store.versions.write_version, key, None)
            elif r < 0.8:
                other = oracle_key(rng.randrange(space))
                pending.append(Stepper(store, "scan", min(key, other), max(key, other)))
            else:
                pending.append(Stepper(store, "get", key))
            for req in rng.sample(pending, min(len(pending), 2)):
                if not req.done:
                    req.step()  # leave requests part-way through
            if pending and (rng.random() < 0.3 or len(pending) > 48):
                settle(pending.pop(rng.randrange(len(pending))))
        for req in pending:
            settle(req)
        metrics = store.writer.metrics
        structure = (metrics.splits, metrics.node_merges, metrics.borrows)
    ok = mismatches == 0
    verdict(3, ok, f"{ops} ops, {checked} snapshot reads checked, {mismatches} mismatches, "
                   f"splits/merges/borrows {structure}")
    assert ok


# 4. order-hint sort

def hinted_log(keys):
    log = []
    for i, key in enumerate(keys):
        log.append(LogEntry(i, EntryKind.INSERT, 0, order_hint_for(log, key), 0, key, b"", 0))
    return log


def test_order_hint_sort(verdict):
    example = hinted_log([bytes([90]), bytes([60]), bytes([30]), bytes([45])])
    hints = [e.order_hint for e in example]
    order = [example[o].key[0] for o in sort_log(example)]
    example_ok = hints == [0, 0, 0, 1] and order == [30, 45, 60, 90]

    exhaustive = failures = 0
    for n in range(7):
        for perm in itertools.permutations(bytes([10 * (i + 1)]) for i in range(n)):
            log = hinted_log(perm)
            exhaustive += 1
            failures += [log[o].key for o in sort_log(log)] != sorted(perm)

    rng = random.Random(4)
    randomized = 100_000
    for r in range(randomized):
        n = rng.randint(1, 256)
        keys = [rng.randbytes(rng.randint(1, 3)) for _ in range(n)]
        if r % 1000 == 0:
            log = hinted_log(keys)  # cross-check the hint rule on a sample
        else:
            seen, log = [], []
            for i, key in enumerate(keys):
                hint = bisect.bisect_right(seen, key)
                seen.insert(hint, key)
                log.append(LogEntry(i, EntryKind.INSERT, 0, hint, 0, key, b"", 0))
        failures += sort_log(log) != sorted(range(n), key=lambda i: (keys[i], i))

    ok = example_ok and failures == 0
    verdict(4, ok, f"worked example hints {hints} order {order}; {exhaustive} permutations "
                   f"and {randomized} random logs, {failures} mismatches")
    assert ok


# 5 and 6 share one 128K-pair tree of 16-byte keys and values

@pytest.fixture(scope="module")
def loaded_128k():
    rng = random.Random(5)
    items = sorted({rng.randbytes(16): rng.randbytes(16) for _ in range(128 * 1024)}.items())
    store = Store(trace_reads=True, threaded_channel=False, background_sweep=False)
    store.load(items)
    footprint = store.footprint_bytes
    yield store, items, footprint
    store.close()


def test_get_bytes_per_node(verdict, loaded_128k):
    store, items, _ = loaded_128k
    rng = random.Random(6)
    keys = [k for k, _ in items]
    for _ in range(30_000):  # fill leaf log blocks first
        key = rng.choice(keys) if rng.random() < 0.5 else rng.randbytes(16)
        store.put(key, rng.randbytes(16))
    gets, violations, worst = 10_000, 0, 0
    for _ in range(gets):
        meta = store.reader.admit("get", rng.choice(keys))
        store.reader.execute(meta)
        per_node = defaultdict(int)
        for entry in meta.trace:
            per_node[entry.lid] += entry.length
        worst = max(worst, *per_node.values())
        violations += sum(total > 1536 for total in per_node.values())
    ok = violations == 0
    verdict(5, ok, f"{gets} gets after 30000 writes, worst node {worst} B (bound 1536), "
                   f"{violations} violations")
    assert ok


def test_memory_footprint_ratio(verdict, loaded_128k):
    _, items, footprint = loaded_128k
    data = sum(len(k) + len(v) for k, v in items)
    ratio = footprint / data
    ok = 1.30 <= ratio <= 1.60
    verdict(6, ok, f"{len(items)} pairs: {footprint} B for {data} B of data, "
                   f"ratio {ratio:.3f} (bounds 1.30-1.60)")
    assert ok


# 7. readers never wait on a held leaf lock

def test_reads_proceed_while_a_leaf_is_locked(verdict):
    hold_for, requests, in_flight = 5.0, 1000, 16
    with Store(log_threshold=0) as store:
        keys = [b"w%05d" % i for i in range(3000)]
        store.load([(k, b"v" * 16) for k in keys])
        target = keys[1500]
        held, entered = threading.Event(), threading.Event()
        locked_seen = []

        def stall(plan, version):
            locked_seen.extend(lid for lid in leaf_lids(store)
                               if read_header(store.arena.buffer(store.table.resolve(lid))).locked)
            entered.set()
            held.wait(hold_for)
        store.writer.hooks["before_swap"] = stall
        writer = threading.Thread(target=store.put, args=(target, b"new"))
        locked_at = time.perf_counter()
        writer.start()
        assert entered.wait(2)
        # requests are interleaved fetch by fetch, many in flight at once
        rng = random.Random(7)
        latencies, errors, pending, issued = [], [], [], 0
        while len(latencies) < requests:
            while issued < requests and len(pending) < in_flight:
                n = 1500 + rng.randrange(-60, 60)
                req = (Stepper(store, "get", keys[n]) if issued % 2
                       else Stepper(store, "scan", keys[n], keys[n + 40]))
                pending.append((req, time.perf_counter()))
                issued += 1
            for req, t0 in list(pending):
                req.step()
                if req.done:
                    latencies.append(time.perf_counter() - t0)
                    pending.remove((req, t0))
                    good = (req.result == b"v" * 16 if req.meta.op == "get"
                            else len(req.result) == 41)
                    if not good:
                        errors.append(req.meta.lower)
        readers_done = time.perf_counter() - locked_at
        still_held = writer.is_alive()
        writer.join()
        held_for = time.perf_counter() - locked_at
        assert store.get(target) == b"new"
    worst = max(latencies)
    ok = (len(latencies) == requests and not errors and worst < 0.010 and still_held
          and len(locked_seen) == 1 and held_for >= hold_for)
    verdict(7, ok, f"{len(latencies)} gets/scans ({in_flight} in flight) finished "
                   f"{readers_done:.2f}s into a {held_for:.1f}s hold of {len(locked_seen)} "
                   f"leaf lock; worst {worst * 1e3:.2f} ms (bound 10 ms), "
                   f"{len(errors)} wrong results")
    assert ok


# 8. log-block threshold tradeoff

def test_log_block_threshold_tradeoff(verdict):
    rows = []
    for threshold in (0, 128, 512, 2048):
        rng = random.Random(8)
        items = sorted({rng.randbytes(16): rng.randbytes(16)
                        for _ in range(64 * 1024)}.items())
        with Store(log_threshold=threshold) as store:
            store.load(items)
            store.quiesce()
            w = store.writer.metrics
            merges, remaps = w.merges, store.table.remaps
            inserts = 20_000
            for _ in range(inserts):
                assert store.put(rng.randbytes(16), rng.randbytes(16)) == WriteResult.INSERTED
            store.quiesce()
            before = (store.reader.metrics.bytes_fetched, store.reader.metrics.completed)
            keys = [k for k, _ in items]
            for _ in range(10_000):
                store.get(rng.choice(keys))
            fetched = store.reader.metrics.bytes_fetched - before[0]
            reads = store.reader.metrics.completed - before[1]
            rows.append((threshold, (w.merges - merges) / inserts,
                         fetched / reads, (store.table.remaps - remaps) / inserts))
    merges = [r[1] for r in rows]
    bytes_per_get = [r[2] for r in rows]
    commands = rows[2][3]
    epsilon = 0.005
    ok = (all(a >= b for a, b in zip(merges, merges[1:]))
          and all(a <= b for a, b in zip(bytes_per_get, bytes_per_get[1:]))
          and commands <= 1 / 11 + epsilon)
    table = ", ".join(f"{t}B: {m:.4f} merges/insert {b:.0f} B/get" for t, m, b, _ in rows)
    verdict(8, ok, f"{table}; mapping updates per insert at 512 B {commands:.4f} "
                   f"(bound {1 / 11:.4f} + {epsilon})")
    assert ok


# 9. interior cache and balancer

def test_cache_and_balancer(verdict):
    rng = random.Random(9)
    items = sorted({rng.randbytes(16): rng.randbytes(16) for _ in range(128 * 1024)}.items())
    keys = [k for k, _ in items]
    with Store(threaded_channel=False, background_sweep=False) as store:
        store.load(items)
        ops = [("get", rng.choice(keys)) for _ in range(20_000)]
        sim = Simulator(SimConfig(), store)
        trace = sim.run(ops, warmup=0, trace=True).trace
        sim.close()

    def replay(**config):
        return Simulator(SimConfig(**config)).replay(trace, warmup=5000).stats

    full = replay()
    lines, ok = [f"full cache hit rate {full['cache']['hit_rate']:.3f}"], \
        full["cache"]["hit_rate"] == 1.0
    for board in (34e9, 1e9):
        on = replay(board_bandwidth=board)
        off = replay(board_bandwidth=board, balancer=False)
        ok &= on["throughput"] >= off["throughput"] and off["cache"]["diverted"] == 0
        lines.append(f"board {board / 1e9:g} GB/s: LB {on['throughput']:,.0f}/s "
                     f"NoLB {off['throughput']:,.0f}/s, diverted LB {on['cache']['diverted']} "
                     f"NoLB {off['cache']['diverted']}")
    ok &= on["cache"]["diverted"] > 0  # a saturated board makes the balancer divert
    none = replay(cache_bytes=0, root_cache=False)
    root = replay(cache_bytes=0, root_cache=True)
    ok &= root["throughput"] > none["throughput"]
    lines.append(f"root-cached {root['throughput']:,.0f}/s vs no cache "
                 f"{none['throughput']:,.0f}/s")
    verdict(9, ok, "; ".join(lines))
    assert ok


# 10. structural audit after a long mixed run

def test_structure_survives_a_million_operations(verdict):
    ops, rng = 1_000_000, random.Random(10)
    ref: dict[bytes, bytes] = {}
    audits, problems = 0, []
    with Store(log_threshold=256) as store:
        done = 0
        while done < ops:
            # grow: inserts of mixed sizes until the tree is several levels deep
            grow = rng.randrange(20_000, 60_000)
            for _ in range(min(grow, ops - done)):
                key = b"a%06d" % rng.randrange(200_000) + rng.randbytes(rng.randrange(0, 40))
                r = rng.random()
                if r < 0.75 or not ref:
                    value = rng.randbytes(rng.randrange(1, 120))
                    store.put(key, value)
                    ref[key] = value
                elif r < 0.9:
                    store.update(key, b"u")
                    if key in ref:
                        ref[key] = b"u"
                else:
                    store.get(key)
                done += 1
            # shrink: delete nearly everything, forcing underflows and root shrinks
            victims = list(ref)
            rng.shuffle(victims)
            for key in victims[: min(len(victims) - rng.randrange(0, 50), ops - done)]:
                assert store.delete(key) == WriteResult.DELETED
                del ref[key]
                done += 1
            store.quiesce()
            report = audit(store)
            audits += 1
            problems += report.problems
            if report.contents != sorted(ref.items()):
                problems.append("contents differ from the reference")
        metrics = store.writer.metrics
    counts = {name: getattr(metrics, name) for name in
              ("splits", "interior_splits", "node_merges", "borrows", "root_grows",
               "root_shrinks")}
    ok = (not problems and all(counts[n] > 0 for n in
                               ("node_merges", "root_grows", "root_shrinks", "interior_splits")))
    verdict(10, ok, f"{done} ops, {audits} audits, {len(problems)} problems, {counts}")
    assert ok


# 11. protocol

def random_request(rng: random.Random) -> Request:
    op = rng.choice(list(Opcode))
    key = rng.randbytes(rng.randint(1, 64))
    key2 = rng.randbytes(rng.randint(1, 64)) if op == Opcode.SCAN else b""
    value = rng.randbytes(rng.randint(0, 469)) if op in (Opcode.PUT, Opcode.UPDATE) else b""
    return Request(rng.getrandbits(64), op, key, key2, value)


def random_response(rng: random.Random) -> Response:
    items = [(rng.randbytes(rng.randint(0, 64)), rng.randbytes(rng.randint(0, 469)))
             for _ in range(rng.randint(0, 8))]
    return Response(rng.getrandbits(64), rng.choice(list(Status)), items)


def test_protocol(verdict):
    rng = random.Random(11)
    frames, codec_failures = 100_000, 0
    for i in range(frames):
        if i % 2:
            msg = random_request(rng)
            frame = encode_request(msg)
            back = decode_request(frame)
            codec_failures += back != msg or encode_request(back) != frame
        else:
            msg = random_response(rng)
            frame = encode_response(msg)
            back = decode_response(frame)
            codec_failures += back != msg or encode_response(back) != frame

    pairs, stale = 10_000, 0
    with Store() as store, ServerThread(store, workers=4) as srv, \
            Client(*srv.address, window=64) as client:
        expected = {}

        def source():
            for i in range(pairs):
                req = client.request(Opcode.PUT, b"ryw%06d" % i, value=b"%d" % i)
                yield req

        def follow_up(req, resp):
            if req.opcode != Opcode.PUT:
                return None
            get = client.request(Opcode.GET, req.key)
            expected[get.request_id] = req.value
            return get

        out = client.pipeline(source(), follow_up=follow_up)
        gets = [r for r in out if r.request_id in expected]
        stale = sum(r.status != Status.OK or r.value != expected[r.request_id] for r in gets)
    ok = codec_failures == 0 and len(gets) == pairs and stale == 0
    verdict(11, ok, f"{frames} frames, {codec_failures} codec mismatches; {len(gets)} "
                    f"pipelined PUT->GET pairs, {stale} stale reads")
    assert ok

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plugcell.core.emit import Emitter, FileBackend, HttpBackend, WindowLimiter, make_backend
from plugcell.core.validate import REASONS, OutputValidator, ValidationError, is_record, validate_output
from plugcell.errors import BackendUnreachable, InvalidOpts
from plugcell.policy import Endpoint
from plugcell.records import PAYLOAD_MAX, CollectionRecord


def rec(ts="2026-01-01T00:00:00.000000Z", **kw):
    d = {"namespace_label": "g", "feature_type": "process", "feature_key": "1", "timestamp": ts,
         "cycle": 0, "payload": {"comm": "init"}}
    d.update(kw)
    return d


def line(**kw):
    return json.dumps(rec(**kw))


class FakeClock:
    def __init__(self):
        self.t = 0.0

    def now(self):
        return self.t


class ListBackend:
    def __init__(self):
        self.got = []
        self.down = False

    def deliver(self, records):
        if self.down:
            raise BackendUnreachable("down")
        self.got.extend(records)


# --- validate_output ---------------------------------------------------------

def test_accepts_well_formed():
    r = validate_output(line())
    assert is_record(r) and r.feature_type == "process"


@pytest.mark.parametrize("text,reason", [
    ("{not json", "malformed"),
    ("[1,2]", "not_object"),
    (json.dumps({k: v for k, v in rec().items() if k != "cycle"}), "missing_field"),
    (line(cycle="3"), "bad_type"),
    (line(cycle=True), "bad_type"),
    (line(feature_type="kernel_module"), "unknown_type"),
    (json.dumps({**rec(), "extra": 1}), "unknown_field"),
    (line(ts="yesterday"), "bad_timestamp"),
    (line(payload={"x": "a" * (PAYLOAD_MAX + 1)}), "oversize"),
    ('{"a": NaN}', "malformed"),
])
def test_typed_rejections(text, reason):
    r = validate_output(text)
    assert isinstance(r, ValidationError) and r.reason == reason


def test_non_monotone_per_stream():
    v = OutputValidator()
    assert is_record(v(line(ts="2026-01-01T00:00:02Z")))
    assert v(line(ts="2026-01-01T00:00:01Z")).reason == "non_monotone"
    # a different plugin is a different stream
    assert is_record(v(line(ts="2026-01-01T00:00:01Z", plugin="other")))


def test_deep_nesting_is_typed():
    r = validate_output('{"payload":' + "[" * 100000 + "]" * 100000 + "}")
    assert isinstance(r, ValidationError)


def _fuzz_lines(n, seed=7):
    rnd = random.Random(seed)
    good = [line(ts=f"2026-01-01T00:00:{i % 60:02d}.{i:06d}Z") for i in range(64)]
    alphabet = '{}[]":,0123456789abcdefnulltrue\\ \t\x00\xff☃e-+.'
    for i in range(n):
        kind = i % 5
        if kind == 0:
            yield "".join(rnd.choice(alphabet) for _ in range(rnd.randint(0, 80)))
        elif kind == 1:
            base = bytearray(rnd.choice(good).encode())
            for _ in range(rnd.randint(1, 6)):
                pos = rnd.randrange(len(base))
                op = rnd.random()
                if op < 0.4:
                    base[pos] = rnd.randrange(256)
                elif op < 0.7:
                    del base[pos]
                else:
                    base.insert(pos, rnd.randrange(256))
            yield bytes(base)
        elif kind == 2:
            d = rec()
            key = rnd.choice(list(d))
            d[key] = rnd.choice([None, 1, -1, 1.5, "", [], {}, True, "x" * rnd.randint(0, 300)])
            yield json.dumps(d)
        elif kind == 3:
            yield rnd.choice(good)
        else:
            yield rnd.randbytes(rnd.randint(0, 120))


def test_fuzz_100k_total():
    v = OutputValidator()
    seen = {"record": 0}
    for text in _fuzz_lines(100_000):
        r = v(text)
        if is_record(r):
            seen["record"] += 1
        else:
            assert isinstance(r, ValidationError) and r.reason in REASONS
            seen[r.reason] = seen.get(r.reason, 0) + 1
    assert sum(seen.values()) == 100_000
    assert seen["record"] > 0 and seen["malformed"] > 0


@settings(max_examples=500, deadline=None)
@given(st.one_of(st.text(max_size=200), st.binary(max_size=200),
                 st.recursive(st.none() | st.booleans() | st.integers() | st.text(max_size=10),
                              lambda c: st.lists(c, max_size=4) | st.dictionaries(st.text(max_size=8), c, max_size=4),
                              max_leaves=20).map(json.dumps)))
def test_validate_never_raises(text):
    r = validate_output(text)
    assert is_record(r) or r.reason in REASONS


# --- emit ---------------------------------------------------------------

def test_throttle_exactly_rate_limit_under_fake_clock():
    clock = FakeClock()
    backend = ListBackend()
    em = Emitter(backend, rate=1000, clock=clock)
    r = CollectionRecord("g", "metric", "k", "2026-01-01T00:00:00Z", 0)
    for i in range(10_000):
        clock.t = i / 10_000  # all within one second
        em.emit([r])
    assert em.stats.throttle_drops == 9_000
    assert em.stats.delivered == len(backend.got) == 1_000


def test_window_limiter_slides():
    clock = FakeClock()
    lim = WindowLimiter(10, clock=clock)
    assert sum(lim.take() for _ in range(20)) == 10
    clock.t = 0.5
    assert sum(lim.take() for _ in range(20)) == 0
    clock.t = 1.0
    assert sum(lim.take() for _ in range(20)) == 10


def test_second_window_admits_again():
    clock = FakeClock()
    em = Emitter(ListBackend(), rate=1000, clock=clock)
    r = CollectionRecord("g", "metric", "k", "2026-01-01T00:00:00Z", 0)
    for i in range(20_000):
        clock.t = i / 10_000
        em.emit([r])
    assert em.stats.delivered == 2_000 and em.stats.throttle_drops == 18_000


def test_bounded_queue_drops_oldest():
    clock = FakeClock()
    backend = ListBackend()
    backend.down = True
    em = Emitter(backend, rate=1e9, queue_max=5, clock=clock)
    recs = [CollectionRecord("g", "metric", str(i), "2026-01-01T00:00:00Z", i) for i in range(12)]
    for r in recs:
        em.emit([r])
    assert em.stats.queue_drops == 7 and em.stats.queued == 5
    assert em.stats.failures >= 1
    backend.down = False
    em.flush()
    assert [r.feature_key for r in backend.got] == [str(i) for i in range(7, 12)]
    assert em.stats.delivered == 5 and em.stats.queued == 0


def test_backoff_defers_retry():
    clock = FakeClock()
    backend = ListBackend()
    backend.down = True
    em = Emitter(backend, rate=1e9, clock=clock, backoff_s=1.0)
    r = CollectionRecord("g", "metric", "k", "2026-01-01T00:00:00Z", 0)
    em.emit([r])
    backend.down = False
    clock.t = 0.5
    em.emit([r])
    assert backend.got == []
    clock.t = 1.1
    em.emit([r])
    assert len(backend.got) == 3


def test_http_backend_must_match_policy():
    with pytest.raises(InvalidOpts):
        HttpBackend("10.0.0.9:80", Endpoint("10.0.0.5", 4433))
    with pytest.raises(InvalidOpts):
        HttpBackend("10.0.0.5:4433", None)
    HttpBackend("10.0.0.5:4433", Endpoint("10.0.0.5", 4433))


def test_file_backend_in_order(tmp_path):
    b = make_backend(f"file:{tmp_path}")
    assert isinstance(b, FileBackend)
    recs = [CollectionRecord("web/1", "metric", str(i), "2026-01-01T00:00:00Z", i) for i in range(5)]
    Emitter(b).emit(recs)
    lines = open(b.path_for("web/1")).read().splitlines()
    assert [json.loads(x)["feature_key"] for x in lines] == ["0", "1", "2", "3", "4"]

"""Delivery of validated records to a backend, with host-side throttling."""

import collections
import http.client
import logging
import os
import threading
import time
from dataclasses import dataclass

from plugcell.errors import BackendUnreachable, InvalidOpts
from plugcell.policy.model import Endpoint

log = logging.getLogger(__name__)

DEFAULT_RATE = 1000.0
DEFAULT_QUEUE_MAX = 10000


class MonotonicClock:
    def now(self):
        return time.monotonic()


class WindowLimiter:
    """Admits at most ``rate`` events in any trailing ``window_s`` seconds."""

    def __init__(self, rate, clock=None, window_s=1.0):
        if rate < 1:
            raise InvalidOpts("throttle rate must be at least 1 per window")
        self.limit = int(rate)
        self.window_s = window_s
        self.clock = clock or MonotonicClock()
        self._admitted = collections.deque()

    def take(self):
        now = self.clock.now()
        while self._admitted and self._admitted[0] <= now - self.window_s:
            self._admitted.popleft()
        if len(self._admitted) < self.limit:
            self._admitted.append(now)
            return True
        return False


class FileBackend:
    """Appends records as NDJSON to ``<dir>/<label>.ndjson``."""

    def __init__(self, directory):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)
        self._lock = threading.Lock()

    def path_for(self, label):
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in label) or "guest"
        return os.path.join(self.directory, f"{safe}.ndjson")

    def deliver(self, records):
        by_label = collections.defaultdict(list)
        for r in records:
            by_label[r.namespace_label].append(r.to_line())
        try:
            with self._lock:
                for label, lines in by_label.items():
                    with open(self.path_for(label), "a") as f:
                        f.write("".join(line + "\n" for line in lines))
        except OSError as e:
            raise BackendUnreachable(f"file backend: {e}") from e


class HttpBackend:
    """POSTs NDJSON batches to ``http://<endpoint><path>``.

    The endpoint must be the policy's backend endpoint: records never go
    anywhere the sandbox policy does not name.
    """

    def __init__(self, endpoint, policy_endpoint, path="/ingest", timeout=5.0):
        ep = Endpoint.parse(endpoint) if isinstance(endpoint, str) else endpoint
        allowed = Endpoint.parse(policy_endpoint) if isinstance(policy_endpoint, str) else policy_endpoint
        if allowed is None or (ep.host, ep.port) != (allowed.host, allowed.port):
            raise InvalidOpts(f"http backend {ep} does not match the policy backend endpoint {allowed}")
        self.endpoint, self.path, self.timeout = ep, path, timeout

    def deliver(self, records):
        body = "".join(r.to_line() + "\n" for r in records).encode()
        conn = http.client.HTTPConnection(self.endpoint.host, self.endpoint.port, timeout=self.timeout)
        try:
            conn.request("POST", self.path, body=body, headers={"Content-Type": "application/x-ndjson"})
            resp = conn.getresponse()
            resp.read()
            if resp.status >= 300:
                raise BackendUnreachable(f"backend answered {resp.status}")
        except OSError as e:
            raise BackendUnreachable(f"http backend {self.endpoint}: {e}") from e
        finally:
            conn.close()


@dataclass
class EmitStats:
    delivered: int = 0
    throttle_drops: int = 0
    queue_drops: int = 0
    queued: int = 0
    failures: int = 0

    def to_dict(self):
        return dict(self.__dict__)


class Emitter:
    """Throttles, queues and delivers records in order.

    Records over the rate limit are dropped and counted.  When the backend is
    unreachable, records wait in a bounded queue; once full, the oldest are
    dropped.  Delivery is retried with exponential backoff on later calls.
    """

    def __init__(self, backend, rate=DEFAULT_RATE, queue_max=DEFAULT_QUEUE_MAX,
                 clock=None, backoff_s=0.5, backoff_max_s=30.0):
        self.backend = backend
        self.clock = clock or MonotonicClock()
        self.limiter = WindowLimiter(rate, self.clock)
        self.queue = collections.deque()
        self.queue_max = queue_max
        self.stats = EmitStats()
        self.backoff_s, self.backoff_max_s = backoff_s, backoff_max_s
        self._delay = 0.0
        self._retry_at = 0.0
        self._lock = threading.Lock()

    def emit(self, records):
        with self._lock:
            for r in records:
                if not self.limiter.take():
                    self.stats.throttle_drops += 1
                    continue
                if len(self.queue) >= self.queue_max:
                    self.queue.popleft()
                    self.stats.queue_drops += 1
                self.queue.append(r)
            self._flush()
            self.stats.queued = len(self.queue)
            return self.stats

    def flush(self):
        with self._lock:
            self._flush(force=True)
            self.stats.queued = len(self.queue)
            return self.stats

    def _flush(self, force=False):
        if not self.queue:
            return
        if not force and self.clock.now() < self._retry_at:
            return
        batch = list(self.queue)
        try:
            self.backend.deliver(batch)
        except BackendUnreachable as e:
            self.stats.failures += 1
            self._delay = min(self.backoff_max_s, self._delay * 2 if self._delay else self.backoff_s)
            self._retry_at = self.clock.now() + self._delay
            log.warning("backend unreachable (%s); %d queued, retry in %.1fs", e, len(batch), self._delay)
            return
        self.queue.clear()
        self.stats.delivered += len(batch)
        self._delay = 0.0
        self._retry_at = 0.0


def make_backend(spec, policy_endpoint=None):
    """``file:<dir>`` or ``http:<host:port>``."""
    kind, _, rest = spec.partition(":")
    if kind == "file" and rest:
        return FileBackend(rest)
    if kind == "http" and rest:
        return HttpBackend(rest, policy_endpoint)
    raise InvalidOpts(f"backend must be file:<dir> or http:<host:port>, got {spec!r}")


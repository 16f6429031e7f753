"""Host-side validation of runner output lines."""

import json
import threading
from dataclasses import dataclass

from plugcell.records import PAYLOAD_MAX, CollectionRecord, SchemaError, check_record, parse_ts

# a line longer than this cannot hold a payload under the cap plus envelope
MAX_LINE = PAYLOAD_MAX + 16 * 1024
REASONS = (
    "oversize", "malformed", "not_object", "missing_field", "bad_type", "unknown_type",
    "unknown_field", "bad_timestamp", "non_monotone",
)


@dataclass(frozen=True)
class ValidationError:
    reason: str
    detail: str = ""

    def to_dict(self):
        return {"reason": self.reason, "detail": self.detail}


def _reject_constant(name):
    raise ValueError(f"non-standard JSON constant {name}")


def _decode(line):
    text = line.decode("utf-8") if isinstance(line, (bytes, bytearray)) else line
    return json.loads(text, parse_constant=_reject_constant)


class OutputValidator:
    """Validates lines and tracks per-stream timestamp order.

    A stream is one plugin's output for one guest.  Thread-safe, but lines of
    one session should come from one thread to keep their order meaningful.
    """

    def __init__(self):
        self._last = {}
        self._lock = threading.Lock()

    def __call__(self, line):
        return self.validate(line)

    def validate(self, line):
        if not isinstance(line, (bytes, bytearray, str)):
            return ValidationError("malformed", f"unsupported input type {type(line).__name__}")
        if len(line) > MAX_LINE:
            return ValidationError("oversize", f"line of {len(line)} bytes")
        try:
            obj = _decode(line)
        except (ValueError, RecursionError) as e:
            return ValidationError("malformed", str(e)[:200])
        try:
            rec = check_record(obj)
        except SchemaError as e:
            return ValidationError(e.reason, e.detail)
        except (RecursionError, ValueError, TypeError) as e:
            # deeply nested or otherwise unencodable payloads
            return ValidationError("malformed", str(e)[:200])
        ts = parse_ts(rec.timestamp)
        with self._lock:
            last = self._last.get(rec.stream)
            if last is not None and ts < last:
                return ValidationError("non_monotone", rec.timestamp)
            self._last[rec.stream] = ts
        return rec


def validate_output(line, validator=None):
    """Validate one output line; returns a CollectionRecord or a ValidationError.

    Pass the same ``validator`` for every line of a session so that
    timestamp order is enforced per stream; without one each line is judged
    on its own.
    """
    return (validator or OutputValidator()).validate(line)


def is_record(result):
    return isinstance(result, CollectionRecord)

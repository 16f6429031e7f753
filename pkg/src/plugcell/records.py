"""CollectionRecord: the unit of data a plugin emits, and its schema check."""

import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone

FEATURE_TYPES = frozenset({
    "os", "package", "config_file", "process", "connection", "open_file", "metric", "error",
})
PAYLOAD_MAX = 64 * 1024
REQUIRED_FIELDS = ("namespace_label", "feature_type", "feature_key", "timestamp", "cycle", "payload")
OPTIONAL_FIELDS = ("plugin",)
_RFC3339_UTC = re.compile(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}(\.\d{1,9})?Z$")


def utc_now():
    return format_ts(datetime.now(timezone.utc))


def format_ts(dt):
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def parse_ts(text):
    """Parse an RFC3339 UTC ``...Z`` timestamp; returns a sortable tuple."""
    if not isinstance(text, str) or not _RFC3339_UTC.match(text):
        raise ValueError(f"not an RFC3339 UTC timestamp: {text!r}")
    head, _, frac = text[:-1].partition(".")
    dt = datetime.strptime(head, "%Y-%m-%dT%H:%M:%S")
    return (dt, int((frac or "0").ljust(9, "0")))


@dataclass(frozen=True)
class CollectionRecord:
    namespace_label: str
    feature_type: str
    feature_key: str
    timestamp: str
    cycle: int
    payload: dict = field(default_factory=dict)
    plugin: str = ""

    def to_dict(self):
        d = {
            "namespace_label": self.namespace_label, "feature_type": self.feature_type,
            "feature_key": self.feature_key, "timestamp": self.timestamp,
            "cycle": self.cycle, "payload": self.payload,
        }
        if self.plugin:
            d["plugin"] = self.plugin
        return d

    def to_line(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def stream(self):
        return (self.namespace_label, self.plugin)


class SchemaError(ValueError):
    def __init__(self, reason, detail=""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


def payload_size(payload):
    return len(json.dumps(payload, separators=(",", ":"), ensure_ascii=False).encode())


def check_record(obj):
    """Return a CollectionRecord for a decoded JSON value or raise SchemaError.

    Monotonicity is a property of a stream and is checked by the caller.
    """
    if not isinstance(obj, dict):
        raise SchemaError("not_object", type(obj).__name__)
    for name in REQUIRED_FIELDS:
        if name not in obj:
            raise SchemaError("missing_field", name)
    extra = set(obj) - set(REQUIRED_FIELDS) - set(OPTIONAL_FIELDS)
    if extra:
        raise SchemaError("unknown_field", ",".join(sorted(extra)))
    for name in ("namespace_label", "feature_type", "feature_key", "timestamp"):
        if not isinstance(obj[name], str):
            raise SchemaError("bad_type", name)
    if not isinstance(obj.get("plugin", ""), str):
        raise SchemaError("bad_type", "plugin")
    cycle = obj["cycle"]
    if isinstance(cycle, bool) or not isinstance(cycle, int) or cycle < 0:
        raise SchemaError("bad_type", "cycle")
    if not isinstance(obj["payload"], dict):
        raise SchemaError("bad_type", "payload")
    if obj["feature_type"] not in FEATURE_TYPES:
        raise SchemaError("unknown_type", obj["feature_type"][:64])
    try:
        parse_ts(obj["timestamp"])
    except ValueError:
        raise SchemaError("bad_timestamp", obj["timestamp"][:64]) from None
    if payload_size(obj["payload"]) > PAYLOAD_MAX:
        raise SchemaError("oversize", "payload")
    return CollectionRecord(
        namespace_label=obj["namespace_label"], feature_type=obj["feature_type"],
        feature_key=obj["feature_key"], timestamp=obj["timestamp"], cycle=cycle,
        payload=obj["payload"], plugin=obj.get("plugin", ""),
    )

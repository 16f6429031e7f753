"""The plugins-to-run manifest: one JSON object per line, ``#`` comments."""

import json
import math
from dataclasses import dataclass, field

from plugcell.errors import DuplicateName, ParseError

ENTRY_FIELDS = {"name", "source", "args", "freq_s", "sha256"}
DEFAULT_TIMEOUT_S = 10.0


@dataclass(frozen=True)
class PluginEntry:
    name: str
    source: str
    freq_s: float
    args: dict = field(default_factory=dict)
    sha256: str = ""

    @property
    def timeout_s(self):
        return float(self.args.get("timeout_s", DEFAULT_TIMEOUT_S))

    def to_dict(self):
        d = {"name": self.name, "source": self.source, "freq_s": self.freq_s, "args": self.args}
        if self.sha256:
            d["sha256"] = self.sha256
        return d


@dataclass(frozen=True)
class PluginManifest:
    entries: tuple = ()

    def names(self):
        return [e.name for e in self.entries]

    def to_bytes(self):
        return b"".join(json.dumps(e.to_dict()).encode() + b"\n" for e in self.entries)


def _entry(obj, lineno):
    if not isinstance(obj, dict):
        raise ParseError(lineno, "entry must be a JSON object")
    extra = set(obj) - ENTRY_FIELDS
    if extra:
        raise ParseError(lineno, f"unknown field(s): {', '.join(sorted(extra))}")
    name = obj.get("name")
    if not isinstance(name, str) or not name or "/" in name or name.startswith("."):
        raise ParseError(lineno, "name must be a non-empty string without '/'")
    source = obj.get("source")
    if not isinstance(source, str) or not source:
        raise ParseError(lineno, "source must be a non-empty string")
    freq = obj.get("freq_s")
    if isinstance(freq, bool) or not isinstance(freq, (int, float)) or not math.isfinite(freq) or freq <= 0:
        raise ParseError(lineno, "freq_s must be a positive number")
    args = obj.get("args", {})
    if not isinstance(args, dict):
        raise ParseError(lineno, "args must be an object")
    if "timeout_s" in args:
        t = args["timeout_s"]
        if isinstance(t, bool) or not isinstance(t, (int, float)) or not math.isfinite(t) or t <= 0:
            raise ParseError(lineno, "args.timeout_s must be a positive number")
    digest = obj.get("sha256", "")
    if not isinstance(digest, str) or (digest and (len(digest) != 64 or
                                                    any(c not in "0123456789abcdef" for c in digest))):
        raise ParseError(lineno, "sha256 must be 64 lowercase hex digits")
    return PluginEntry(name=name, source=source, freq_s=float(freq), args=args, sha256=digest)


def parse_manifest(data):
    """Parse manifest bytes.  Blank lines and ``#`` lines are ignored."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParseError(0, f"not UTF-8: {e}") from None
    entries = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            obj = json.loads(stripped)
        except ValueError as e:
            raise ParseError(lineno, f"invalid JSON: {e}") from None
        entry = _entry(obj, lineno)
        if entry.name in seen:
            raise DuplicateName(f"duplicate plugin name {entry.name!r} on line {lineno}")
        seen.add(entry.name)
        entries.append(entry)
    return PluginManifest(tuple(entries))

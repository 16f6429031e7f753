"""Stage plugins into the staging area before the network block closes."""

import hashlib
import logging
import os
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Callable, Optional

from plugcell.errors import DigestMismatch, FetchFailed

log = logging.getLogger(__name__)

STORE_PREFIX = "store:"
DEFAULT_STORE = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "store")
MAX_PLUGIN_BYTES = 32 * 1024 * 1024


@dataclass(frozen=True)
class StagedPlugin:
    name: str
    path: str
    digest: str
    freq_s: float = 1.0
    timeout_s: float = 10.0
    args: tuple = ()

    @property
    def args_dict(self):
        return dict(self.args)


@dataclass
class FetchPolicy:
    staging_dir: str
    store_dir: str = DEFAULT_STORE
    timeout_s: float = 10.0
    max_bytes: int = MAX_PLUGIN_BYTES
    # called once everything is staged; must leave staging_dir read-only
    seal: Optional[Callable[[list], None]] = None


def _read_store(store_dir, ident):
    if not ident or "/" in ident or ident.startswith("."):
        raise ValueError(f"bad store id {ident!r}")
    with open(os.path.join(store_dir, ident), "rb") as f:
        return f.read()


def _read_url(url, timeout, limit):
    req = urllib.request.Request(url, headers={"User-Agent": "plugcell-runner"})
    # no proxies: the only permitted route is the fetch-window exception
    opener = urllib.request.build_opener(urllib.request.ProxyHandler({}))
    with opener.open(req, timeout=timeout) as resp:
        data = resp.read(limit + 1)
    if len(data) > limit:
        raise ValueError(f"plugin larger than {limit} bytes")
    return data


def fetch_one(entry, policy):
    src = entry.source
    try:
        if src.startswith(STORE_PREFIX):
            return _read_store(policy.store_dir, src[len(STORE_PREFIX):])
        if src.startswith(("http://", "https://")):
            return _read_url(src, policy.timeout_s, policy.max_bytes)
        raise ValueError(f"unsupported source scheme: {src}")
    except (OSError, ValueError, urllib.error.URLError) as e:
        raise FetchFailed(entry.name, f"{type(e).__name__}: {e}") from e


def staging_sealed(path):
    return bool(os.statvfs(path).f_flag & os.ST_RDONLY)


def fetch_plugins(manifest, policy):
    """Fetch, verify and stage every manifest entry, then seal the staging area.

    Pinned digests are checked before anything is written, so a mismatching
    plugin is never staged.
    """
    staged = []
    os.makedirs(policy.staging_dir, exist_ok=True)
    for entry in manifest.entries:
        data = fetch_one(entry, policy)
        digest = hashlib.sha256(data).hexdigest()
        if entry.sha256 and digest != entry.sha256:
            raise DigestMismatch(entry.name, entry.sha256, digest)
        path = os.path.join(policy.staging_dir, entry.name)
        tmp = path + ".part"
        with open(tmp, "wb") as f:
            f.write(data)
        os.chmod(tmp, 0o555)
        os.replace(tmp, path)
        log.info("staged %s (%d bytes, sha256 %s)", entry.name, len(data), digest)
        staged.append(StagedPlugin(
            name=entry.name, path=path, digest=digest, freq_s=entry.freq_s,
            timeout_s=entry.timeout_s, args=tuple(sorted(entry.args.items())),
        ))
    if policy.seal is not None:
        policy.seal(staged)
        if not staging_sealed(policy.staging_dir):
            raise FetchFailed("staging", "staging area is still writable after sealing")
    return staged


"""JSON round-trip for SandboxPolicy.  Field names mirror the dataclasses."""

import json

from plugcell.errors import InvalidOpts
from plugcell.policy.model import (
    CapabilitySet,
    Direction,
    Endpoint,
    FirewallRule,
    LocalhostMode,
    MountMode,
    MountSpec,
    NamespaceSharing,
    ResourceLimits,
    SandboxPolicy,
    SeccompAction,
    SeccompRule,
    Sharing,
    UidMapping,
    Verdict,
)


def _endpoint(e):
    if e is None:
        return None
    return {"host": e.host, "port": e.port, "proto": e.proto}


def policy_to_dict(p):
    return {
        "sharing": {k: getattr(p.sharing, k).value for k in ("mount", "user", "ipc", "uts", "pid", "net")},
        "uid_map": {"inside_uid": p.uid_map.inside_uid, "host_uid": p.uid_map.host_uid, "count": p.uid_map.count},
        "caps": sorted(p.caps.caps),
        "seccomp": [
            {"syscall_name": r.syscall_name, "action": r.action.value, "errno_code": r.errno_code}
            for r in p.seccomp
        ],
        "firewall": [
            {
                "classid": r.classid,
                "direction": r.direction.value,
                "verdict": r.verdict.value,
                "destination": _endpoint(r.destination),
                "loopback": r.loopback,
            }
            for r in p.firewall
        ],
        "limits": {
            "cpu_quota": p.limits.cpu_quota,
            "memory_bytes": p.limits.memory_bytes,
            "pids_max": p.limits.pids_max,
            "blkio_bps": p.limits.blkio_bps,
            "cpu_shares": p.limits.cpu_shares,
        },
        "mounts": [{"source": m.source, "target": m.target, "mode": m.mode.value} for m in p.mounts],
        "localhost_mode": p.localhost_mode.value,
        "passive_capture": p.passive_capture,
        "allow_bind": p.allow_bind,
        "bind_port_allowlist": list(p.bind_port_allowlist),
        "backend_endpoint": _endpoint(p.backend_endpoint),
        "classid": p.classid,
        "guest_owner_uid": p.guest_owner_uid,
        "proxy_port": p.proxy_port,
    }


def _load_endpoint(d):
    if d is None:
        return None
    return Endpoint(d["host"], int(d["port"]), d.get("proto", "tcp"))


def policy_from_dict(d):
    try:
        return SandboxPolicy(
            sharing=NamespaceSharing(**{k: Sharing(v) for k, v in d["sharing"].items()}),
            uid_map=UidMapping(**d["uid_map"]),
            caps=CapabilitySet(frozenset(d["caps"])),
            seccomp=tuple(
                SeccompRule(r["syscall_name"], SeccompAction(r["action"]), int(r.get("errno_code", 1)))
                for r in d["seccomp"]
            ),
            firewall=tuple(
                FirewallRule(
                    int(r["classid"]), Direction(r["direction"]), Verdict(r["verdict"]),
                    _load_endpoint(r.get("destination")), bool(r.get("loopback", False)),
                )
                for r in d["firewall"]
            ),
            limits=ResourceLimits(**d["limits"]),
            mounts=tuple(MountSpec(m["source"], m["target"], MountMode(m["mode"])) for m in d["mounts"]),
            localhost_mode=LocalhostMode(d["localhost_mode"]),
            passive_capture=bool(d["passive_capture"]),
            allow_bind=bool(d["allow_bind"]),
            bind_port_allowlist=tuple(d.get("bind_port_allowlist", ())),
            backend_endpoint=_load_endpoint(d.get("backend_endpoint")),
            classid=int(d["classid"]),
            guest_owner_uid=int(d.get("guest_owner_uid", 0)),
            proxy_port=int(d.get("proxy_port", 3128)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidOpts(f"malformed policy document: {e!r}") from e


def dumps(p):
    return json.dumps(policy_to_dict(p), indent=2, sort_keys=True)


def loads(text):
    try:
        d = json.loads(text)
    except ValueError as e:
        raise InvalidOpts(f"policy is not valid JSON: {e}") from e
    if not isinstance(d, dict):
        raise InvalidOpts("policy document must be a JSON object")
    return policy_from_dict(d)

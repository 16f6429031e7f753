"""Command-line entry point: ``plugcell attach|detach|sessions|policy|suite``."""

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time

from plugcell import errors
from plugcell.policy.model import LocalhostMode

log = logging.getLogger("plugcell")

EXIT_OK, EXIT_FAIL, EXIT_VALIDATION, EXIT_BUILD = 0, 1, 2, 3
_VALIDATION = (errors.PolicyInvalid, errors.InvalidOpts, errors.ParseError, errors.DuplicateName,
               errors.UnknownSyscall)
_BUILD = (errors.BuildFailed, errors.ExecFailed, errors.FetchFailed, errors.FetchDeadline,
          errors.DigestMismatch)
_LOCALHOST = {"block": LocalhostMode.BLOCK_ALL, "get-only": LocalhostMode.HTTP_GET_ONLY,
              "allow-all": LocalhostMode.ALLOW_ALL}


def exit_code_for(exc):
    if isinstance(exc, _VALIDATION):
        return EXIT_VALIDATION
    if isinstance(exc, _BUILD):
        return EXIT_BUILD
    return EXIT_FAIL


def _emit(obj, stream=None):
    (stream or sys.stdout).write(json.dumps(obj, sort_keys=True) + "\n")
    (stream or sys.stdout).flush()


def _guest_flags(p):
    p.add_argument("--guest-pid", type=int, help="guest init pid (engine-less mode)")
    p.add_argument("--guest-rootfs", help="guest rootfs path (engine-less mode)")
    p.add_argument("--engine-socket", default="/var/run/docker.sock")


def _resolve(args):
    from plugcell.guest import DockerAdapter, ExplicitAdapter, resolve_guest

    if args.guest_pid is not None:
        return resolve_guest(args.guest or f"pid-{args.guest_pid}",
                             ExplicitAdapter(args.guest_pid, args.guest_rootfs or "/"))
    if not args.guest:
        # no guest named: the host's pid 1 stands in, or this process when
        # pid 1 is out of reach (e.g. inside a restricted container)
        for pid in (1, os.getpid()):
            try:
                return resolve_guest(f"pid-{pid}", ExplicitAdapter(pid, "/"))
            except PermissionError:
                continue
        raise errors.NotFound("no stand-in guest is accessible")
    return resolve_guest(args.guest, DockerAdapter(args.engine_socket))


# -- attach / detach --------------------------------------------------------------

def cmd_attach(args):
    from plugcell.core.session import AttachOptions, attach, detach

    if (args.guest_pid is None) != (args.guest_rootfs is None):
        raise errors.InvalidOpts("--guest-pid and --guest-rootfs go together")
    opts = AttachOptions(
        guest_pid=args.guest_pid, guest_rootfs=args.guest_rootfs, engine_socket=args.engine_socket,
        plugins_file=args.plugins_file, policy_file=args.policy, backend=args.backend,
        localhost_mode=_LOCALHOST[args.localhost_mode] if args.localhost_mode else None,
        fetch_deadline_s=args.fetch_deadline_s, base_dir=args.base_dir, event_log=args.event_log,
    )
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    session = attach(args.guest, opts)
    _emit({"session": session.id, "sandbox": session.sandbox.sandbox_id, "phase": session.phase.value})
    deadline = time.monotonic() + args.duration_s if args.duration_s else None
    while not stop.is_set() and session.collecting:
        if deadline is not None and time.monotonic() >= deadline:
            break
        stop.wait(0.2)
    stats = detach(session)
    _emit({"session": session.id, "stopped": session.stop_reason or "requested", "stats": stats.to_dict()})
    return EXIT_OK


def cmd_detach(args):
    from plugcell.core.session import detach_by_id

    res = detach_by_id(args.session, base_dir=args.base_dir)
    if res is None:
        raise errors.NotFound(f"no session {args.session}")
    _emit(res)
    return EXIT_OK


def cmd_sessions(args):
    from plugcell.core.session import list_sessions

    for sid in list_sessions(args.base_dir):
        print(sid)
    return EXIT_OK


# -- policy ----------------------------------------------------------------------

def cmd_policy_print_default(args):
    from plugcell.policy import PolicyOptions, default_policy, dumps

    guest = _resolve(args)
    opts = PolicyOptions(localhost_mode=_LOCALHOST[args.localhost_mode])
    sys.stdout.write(dumps(default_policy(guest, opts)) + "\n")
    return EXIT_OK


def cmd_policy_validate(args):
    from plugcell.policy import loads, validate_policy

    with open(args.file) as f:
        report = validate_policy(loads(f.read()))
    for v in report.violations:
        _emit({"invariant": v.invariant, "field": v.field, "detail": v.detail})
    return EXIT_OK if report.ok else EXIT_VALIDATION


# -- harness -----------------------------------------------------------------------

def cmd_suite_run(args):
    from plugcell.harness.attacks import ATTACKS, HarnessEnv, RunContext, run_suite

    for name in args.attack or ():
        if name not in ATTACKS:
            raise errors.InvalidOpts(f"unknown attack {name!r}; known: {', '.join(sorted(ATTACKS))}")
    contexts = tuple(RunContext(c.upper()) for c in args.context.split(","))
    env = HarnessEnv(ablate=args.ablate, localhost_mode=_LOCALHOST[args.localhost_mode])

    def progress(v):
        log.info("%-22s %-8s %s %s", v.attack, v.run_context.value, v.outcome.value, v.blocker_observed)

    report = run_suite(env, attacks=args.attack, contexts=contexts, progress=progress)
    text = report.to_ndjson()
    if args.report:
        with open(args.report, "w") as f:
            f.write(text)
    summary = report.summary()
    _emit({k: summary[k] for k in ("attacks", "sandbox_contained", "sandbox_escaped", "guest_escaped",
                                   "guest_contained", "mismatches", "errors", "host_restored")})
    ok = not summary["mismatches"] and not summary["errors"] and summary["host_restored"]
    return EXIT_OK if ok else EXIT_FAIL


def cmd_suite_perf(args):
    from plugcell.harness.attacks import HarnessEnv
    from plugcell.harness.perf import measure_perf

    report = measure_perf(HarnessEnv(), cycles=args.cycles, runs=args.runs,
                          progress=lambda m: log.info("perf: %s", m))
    text = json.dumps(report.to_dict(), sort_keys=True, indent=1)
    if args.report:
        with open(args.report, "w") as f:
            f.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_suite_equivalence(args):
    from plugcell.harness.equivalence import compare_contexts
    from plugcell.harness.fixture import FixtureGuest, GuestSpec

    specs = [
        GuestSpec(name="eq-debian", services=("sleeper", "holder", "web")),
        GuestSpec(name="eq-alpine", os_id="alpine", os_version="3.19", hostname="alp",
                  services=("holder", "web", "victim")),
        GuestSpec(name="eq-ubuntu", os_id="ubuntu", os_version="22.04", hostname="ubu",
                  services=("web", "vulnsvc", "holder", "sleeper")),
    ][:args.guests]
    ok = True
    for spec in specs:
        with FixtureGuest(spec) as g:
            res = compare_contexts(g)
        ok = ok and res.equal
        _emit({"guest": spec.name, "equal": res.equal, "records": res.per_collector(), "diffs": res.diffs[:20]})
    return EXIT_OK if ok else EXIT_FAIL


# -- parser ----------------------------------------------------------------------

def build_parser():
    from plugcell.runtime.sandbox import DEFAULT_BASE_DIR

    ap = argparse.ArgumentParser(prog="plugcell", description="Run monitoring plugins in a sandbox beside a guest.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("attach", help="attach a sandboxed plugin runner to a guest (foreground)")
    p.add_argument("--guest", required=True, help="container id or name")
    _guest_flags(p)
    p.add_argument("--plugins-file")
    p.add_argument("--policy", help="policy JSON file (default: the generated default policy)")
    p.add_argument("--backend", default="file:/var/lib/plugcell/records")
    p.add_argument("--localhost-mode", choices=("block", "get-only"))
    p.add_argument("--fetch-deadline-s", type=float, default=60.0)
    p.add_argument("--event-log")
    p.add_argument("--base-dir", default=DEFAULT_BASE_DIR)
    p.add_argument("--duration-s", type=float, default=0.0, help="detach after this long (0: until signalled)")
    p.set_defaults(func=cmd_attach)

    p = sub.add_parser("detach", help="detach a running session")
    p.add_argument("session")
    p.add_argument("--base-dir", default=DEFAULT_BASE_DIR)
    p.set_defaults(func=cmd_detach)

    p = sub.add_parser("sessions", help="list live sessions")
    p.add_argument("--base-dir", default=DEFAULT_BASE_DIR)
    p.set_defaults(func=cmd_sessions)

    pol = sub.add_parser("policy").add_subparsers(dest="policy_cmd", required=True)
    p = pol.add_parser("print-default", help="print the default policy for a guest")
    p.add_argument("--guest", help="container id (default: the host's pid 1 as a stand-in guest)")
    _guest_flags(p)
    p.add_argument("--localhost-mode", choices=tuple(_LOCALHOST), default="block")
    p.set_defaults(func=cmd_policy_print_default)
    p = pol.add_parser("validate", help="check a policy file against the safety invariants")
    p.add_argument("file")
    p.set_defaults(func=cmd_policy_validate)

    suite = sub.add_parser("suite").add_subparsers(dest="suite_cmd", required=True)
    p = suite.add_parser("run", help="run the containment battery")
    p.add_argument("--attack", action="append", help="run only this attack (repeatable)")
    p.add_argument("--ablate", choices=("seccomp", "firewall", "cgroup", "ro-rootfs"))
    p.add_argument("--localhost-mode", choices=tuple(_LOCALHOST), default="block")
    p.add_argument("--context", default="sandbox,guest", help="comma list of sandbox, guest, host")
    p.add_argument("--report", help="write NDJSON verdicts plus a summary object here")
    p.set_defaults(func=cmd_suite_run)
    p = suite.add_parser("perf", help="measure sandbox overhead")
    p.add_argument("--cycles", type=int, default=300)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--report")
    p.set_defaults(func=cmd_suite_perf)
    p = suite.add_parser("equivalence", help="compare collector output in the sandbox and in the guest")
    p.add_argument("--guests", type=int, choices=(1, 2, 3), default=3)
    p.set_defaults(func=cmd_suite_equivalence)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    logging.getLogger("pyroute2").setLevel(logging.WARNING)
    try:
        return args.func(args)
    except errors.PlugcellError as e:
        _emit({"error": e.code, "detail": str(e)}, sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())

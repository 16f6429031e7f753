"""Exception hierarchy.  Each error carries a stable ``code`` matching the
names used in logs, CLI output and the event log."""


class PlugcellError(Exception):
    code = "ERROR"

    def __init__(self, message="", **details):
        super().__init__(message or self.code)
        self.details = details

    def to_dict(self):
        return {"code": self.code, "message": str(self), **self.details}


class InvalidOpts(PlugcellError):
    code = "INVALID_OPTS"


class PolicyInvalid(PlugcellError):
    code = "POLICY_INVALID"

    def __init__(self, report):
        super().__init__("; ".join(str(v) for v in report.violations))
        self.report = report


class UnknownSyscall(PlugcellError):
    code = "UNKNOWN_SYSCALL"


class NotFound(PlugcellError):
    code = "NOT_FOUND"


class NotRunning(PlugcellError):
    code = "NOT_RUNNING"


class EngineUnavailable(PlugcellError):
    code = "ENGINE_UNAVAILABLE"


class BuildFailed(PlugcellError):
    code = "BUILD_FAILED"

    def __init__(self, step, cause):
        super().__init__(f"sandbox build failed at {step}: {cause}", step=step, cause=str(cause))
        self.step = step
        self.cause = cause


class GuestGone(BuildFailed):
    code = "GUEST_GONE"

    def __init__(self, step, cause="guest exited during build"):
        super().__init__(step, cause)


class ExecFailed(PlugcellError):
    code = "EXEC_FAILED"


class SandboxNotReady(PlugcellError):
    code = "SANDBOX_NOT_READY"


class TornDown(PlugcellError):
    code = "TORN_DOWN"


class ParseError(PlugcellError):
    code = "PARSE_ERROR"

    def __init__(self, line, cause):
        super().__init__(f"line {line}: {cause}", line=line, cause=str(cause))
        self.line = line
        self.cause = cause


class DuplicateName(PlugcellError):
    code = "DUPLICATE_NAME"


class FetchFailed(PlugcellError):
    code = "FETCH_FAILED"

    def __init__(self, name, cause=""):
        super().__init__(f"fetch of {name!r} failed: {cause}", name=name)
        self.name = name


class DigestMismatch(PlugcellError):
    code = "DIGEST_MISMATCH"

    def __init__(self, name, expected, actual):
        super().__init__(
            f"{name}: expected sha256 {expected}, got {actual}",
            name=name, expected=expected, actual=actual,
        )
        self.name = name


class ChrootFailed(PlugcellError):
    code = "CHROOT_FAILED"


class BackendUnreachable(PlugcellError):
    code = "BACKEND_UNREACHABLE"


class FetchDeadline(PlugcellError):
    code = "FETCH_DEADLINE"


class FixtureSetupFailed(PlugcellError):
    code = "FIXTURE_SETUP_FAILED"

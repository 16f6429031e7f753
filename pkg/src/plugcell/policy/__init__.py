"""Sandbox policy: what a plugin sandbox grants and denies."""

from plugcell.policy.build import (
    SeccompProgram,
    ValidationReport,
    Violation,
    default_policy,
    render_firewall,
    render_seccomp,
    validate_policy,
)
from plugcell.policy.model import (
    CapabilitySet,
    Direction,
    Endpoint,
    FirewallRule,
    LocalhostMode,
    MountMode,
    MountSpec,
    NamespaceSharing,
    PolicyOptions,
    ResourceLimits,
    SandboxPolicy,
    SeccompAction,
    SeccompRule,
    Sharing,
    UidMapping,
    Verdict,
)
from plugcell.policy.serialize import dumps, loads

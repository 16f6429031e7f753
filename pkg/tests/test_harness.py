import pytest

from conftest import needs_kernel
from plugcell.harness.attacks import (ABLATIONS, ATTACKS, CATALOG, ContainmentReport, HarnessEnv, Outcome,
                                      RunContext, Verdict, run_attack)
from plugcell.harness.perf import distribution
from plugcell.policy import LocalhostMode

HENV = dict(workdir="/run/plugcell-test/harness", base_dir="/run/plugcell-test/harness/sb",
            cell_parent="plugcell-test-harness")


def env(**kw):
    return HarnessEnv(**{**HENV, **kw})


# --- bookkeeping, no kernel -------------------------------------------------------

def test_catalog_shape():
    assert len(CATALOG) == 15 and len(ATTACKS) == 15
    by_ablation = {a: sorted(f.name for f in CATALOG if f.ablation == a) for a in ABLATIONS}
    assert by_ablation == {
        "seccomp": ["code_inject_ptrace", "procmem_write"],
        "firewall": ["loopback_attack", "reverse_shell_exfil"],
        "cgroup": ["cpu_hog", "fork_bomb", "mem_hog", "zip_bomb"],
        "ro-rootfs": ["disk_privesc_tmpfile", "ld_preload_hook", "rootfs_tamper"],
    }


def test_unknown_ablation_rejected():
    with pytest.raises(ValueError):
        HarnessEnv(ablate="everything")


def _report(ablate=None, mode=LocalhostMode.BLOCK_ALL, outcome=Outcome.CONTAINED):
    rep = ContainmentReport(ablate=ablate, localhost_mode=mode.value)
    for f in CATALOG:
        rep.verdicts.append(Verdict(f.name, RunContext.SANDBOX, outcome, {"host_restored": True}))
        rep.verdicts.append(Verdict(f.name, RunContext.GUEST, f.guest_baseline, {"host_restored": True}))
    return rep


def test_expected_matrix_without_ablation():
    rep = _report()
    assert rep.mismatches() == []
    s = rep.summary()
    assert s["sandbox_contained"] == 15 and s["host_restored"]


@pytest.mark.parametrize("ablate", ABLATIONS)
def test_expected_flips_under_ablation(ablate):
    rep = _report(ablate)
    flipped = sorted(a.split("/")[0] for a in rep.mismatches())
    assert flipped == sorted(f.name for f in CATALOG if f.ablation == ablate)


def test_allow_all_expects_loopback_escape():
    rep = _report(mode=LocalhostMode.ALLOW_ALL)
    assert [m.split("/")[0] for m in rep.mismatches()] == ["loopback_attack"]


def test_distribution():
    d = distribution([5, 1, 3, 2, 4])
    assert (d["n"], d["median"], d["min"], d["max"], d["mean"]) == (5, 3, 1, 5, 3)
    assert distribution([])["n"] == 0


# --- live runs -------------------------------------------------------------------------

@needs_kernel
def test_fork_bomb_contained_by_pids():
    v = run_attack(ATTACKS["fork_bomb"], RunContext.SANDBOX, env())
    assert v.outcome is Outcome.CONTAINED
    assert v.blocker_observed.startswith("pids cgroup limit")
    assert v.evidence["host_restored"]


@needs_kernel
def test_rootfs_tamper_both_contexts():
    e = env()
    sandbox = run_attack(ATTACKS["rootfs_tamper"], RunContext.SANDBOX, e)
    guest = run_attack(ATTACKS["rootfs_tamper"], RunContext.GUEST, e)
    assert sandbox.outcome is Outcome.CONTAINED and sandbox.evidence["rootfs_unchanged"]
    assert guest.outcome is Outcome.ESCAPED and not guest.evidence["rootfs_unchanged"]
    assert sandbox.evidence["host_restored"] and guest.evidence["host_restored"]


@needs_kernel
def test_loopback_flips_with_allow_all():
    f = ATTACKS["loopback_attack"]
    assert run_attack(f, RunContext.SANDBOX, env()).outcome is Outcome.CONTAINED
    assert run_attack(f, RunContext.SANDBOX, env(localhost_mode=LocalhostMode.ALLOW_ALL)).outcome \
        is Outcome.ESCAPED


@needs_kernel
def test_seccomp_ablation_flips_ptrace():
    v = run_attack(ATTACKS["code_inject_ptrace"], RunContext.SANDBOX, env(ablate="seccomp"))
    assert v.outcome is Outcome.ESCAPED and v.evidence["host_restored"]


@needs_kernel
@pytest.mark.parametrize("name", ["signal_kill_guest", "port_hoard"])
def test_verdicts_are_deterministic(name):
    outcomes = {run_attack(ATTACKS[name], RunContext.SANDBOX, env()).outcome for _ in range(3)}
    assert outcomes == {Outcome.CONTAINED}

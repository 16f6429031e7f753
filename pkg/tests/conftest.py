import os

import pytest

from plugcell.guest import GuestTarget


def _kernel_ready():
    if os.geteuid() != 0 or not os.path.isdir("/sys/fs/cgroup/memory"):
        return False
    from plugcell.kernel.nft import NftSocket

    try:
        with NftSocket() as nl:
            nl.tables()
    except OSError:
        return False
    return True


KERNEL = _kernel_ready()
needs_kernel = pytest.mark.skipif(not KERNEL, reason="needs root, cgroup v1 and nf_tables")


def fake_guest(owner_uid=0, controllers=("cpu", "cpuacct", "memory", "pids", "blkio"), rootfs="/srv/guest"):
    return GuestTarget(
        container_id="c0ffee",
        rootfs_path=rootfs,
        pid_ns_ref="/proc/4242/ns/pid",
        net_ns_ref="/proc/4242/ns/net",
        cgroup_paths={c: f"/sys/fs/cgroup/{c}/docker/c0ffee" for c in controllers},
        owner_uid=owner_uid,
        init_pid=4242,
        pid_ns_id=4026531836,
        net_ns_id=4026531840,
        start_time=123456,
    )


@pytest.fixture
def guest():
    return fake_guest()


@pytest.fixture(scope="module")
def live_guest():
    if not KERNEL:
        pytest.skip("needs root, cgroup v1 and nf_tables")
    from plugcell.harness.fixture import FixtureGuest, GuestSpec

    with FixtureGuest(GuestSpec(name="t", services=("sleeper", "holder", "web", "victim"))) as g:
        yield g


@pytest.fixture
def fresh_guest():
    if not KERNEL:
        pytest.skip("needs root, cgroup v1 and nf_tables")
    from plugcell.harness.fixture import FixtureGuest, GuestSpec

    g = FixtureGuest(GuestSpec(name="f"))
    g.start()
    yield g
    g.stop()


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def report_criterion(number, title, ok, detail=""):
    ACCEPTANCE[number] = f"CRITERION {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])

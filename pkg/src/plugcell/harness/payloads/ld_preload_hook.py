"""Plants a hooking library and wires it into the guest app's loader
environment and the global preload list."""

from plugcell.harness.payloads._common import attempt, hold, in_guest

LIB = b"\x7fELF-fixture-hook-library"


def write(path, data, mode="wb"):
    with open(in_guest(path), mode) as f:
        f.write(data)


if __name__ == "__main__":
    attempt("plant-library", write, "/srv/app/libhook.so", LIB)
    attempt("app-env", write, "/srv/app/app.env", b"LD_PRELOAD=/srv/app/libhook.so\n", "ab")
    attempt("ld.so.preload", write, "/etc/ld.so.preload", b"/srv/app/libhook.so\n")
    hold(1)

"""Decompression bomb: a few MiB of gzip members that inflate to GiBs,
decompressed into memory."""

import zlib

from plugcell.harness.payloads._common import report
from plugcell.harness.payloads.mem_hog import respawn

MEMBER_RAW = 64 * 1024 * 1024
MEMBERS = 64


def build_bomb():
    comp = zlib.compressobj(9, zlib.DEFLATED, 31)
    member = comp.compress(bytes(MEMBER_RAW)) + comp.flush()
    return member * MEMBERS


def inflate(blob):
    out = []
    while blob:
        d = zlib.decompressobj(31)
        while True:
            chunk = d.decompress(blob, 8 * 1024 * 1024)
            out.append(chunk)
            blob = d.unconsumed_tail
            if d.eof or not blob:
                break
        blob = d.unused_data
    return out


if __name__ == "__main__":
    bomb = build_bomb()
    report("build", True, compressed=len(bomb), inflated=MEMBER_RAW * MEMBERS)
    respawn(lambda: inflate(bomb))

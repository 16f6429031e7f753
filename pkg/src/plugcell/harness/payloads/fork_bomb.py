"""The classic shell fork bomb.  bash retries a failed fork instead of
giving up, so the bomb keeps its population at whatever limit it meets."""

import os

from plugcell.harness.payloads._common import report

if __name__ == "__main__":
    report("exec-bomb", True)
    os.execv("/bin/bash", ["bash", "-c", ":(){ :|:& };:"])

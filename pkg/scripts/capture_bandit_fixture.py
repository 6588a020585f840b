#!/usr/bin/env python3
"""Regenerate the committed Bandit JSON fixture from a real Bandit install.

Runs `bandit -f json` over tests/fixtures/listing1.py.txt (written to a
scratch directory as candidate.py so the payload carries a stable relative
filename) and rewrites tests/fixtures/bandit_listing1.json with the verbatim
output. Run this whenever the pinned Bandit version changes; the fidelity
tests compare against whatever payload is committed.

Usage: python scripts/capture_bandit_fixture.py
"""

from __future__ import annotations

import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
LISTING = ROOT / "tests" / "fixtures" / "listing1.py.txt"
FIXTURE = ROOT / "tests" / "fixtures" / "bandit_listing1.json"


def main() -> int:
    if shutil.which("bandit") is None:
        print("bandit is not installed; install it and re-run", file=sys.stderr)
        return 1
    scratch = Path(tempfile.mkdtemp(prefix="bandit-capture-"))
    target = scratch / "candidate.py"
    target.write_text(LISTING.read_text(encoding="utf-8"), encoding="utf-8")
    proc = subprocess.run(
        ["bandit", "-f", "json", "candidate.py"],
        cwd=scratch,
        capture_output=True,
        text=True,
    )
    if proc.returncode not in (0, 1):
        print(f"bandit exited with {proc.returncode}: {proc.stderr}", file=sys.stderr)
        return 1
    FIXTURE.write_text(proc.stdout, encoding="utf-8")
    print(f"wrote {FIXTURE} ({len(proc.stdout)} bytes)")
    print("review the diff, re-run the test suite, then commit the new payload")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Stand-in coverage runner.

Each test file declares what it covers in ``// covers: path:a-b ...``
comments; every line of the ``--universe`` ranges is reported, covered
or not, as ``path,line,covered`` rows.
"""

from pathlib import Path

import argparse
import re


def expand(spec: str) -> list[tuple[str, int]]:
    path, _, span = spec.rpartition(":")
    first, _, last = span.partition("-")
    return [(path, line) for line in range(int(first), int(last or first) + 1)]


parser = argparse.ArgumentParser()
parser.add_argument("--universe", action="append", default=[])
parser.add_argument("--out", type=Path, required=True)
parser.add_argument("tests", nargs="*", type=Path)
args = parser.parse_args()

universe = [key for spec in args.universe for key in expand(spec)]
covered = set()
for test in args.tests:
    for match in re.finditer(r"//\s*covers:(.*)", test.read_text(encoding="utf-8")):
        for spec in match.group(1).split():
            covered.update(expand(spec))

rows = ["path,line,covered"] + [f"{path},{line},{int((path, line) in covered)}" for path, line in universe]
args.out.write_text("\n".join(rows) + "\n", encoding="utf-8")

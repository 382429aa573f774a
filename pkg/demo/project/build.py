"""Stub build step for the demo mini-project.

Stands in for compiling the PoC against the vulnerable project. A PoC
containing ``//! compile-error <message>`` fails to build.
"""
import re
import sys

source = open(sys.argv[1], encoding="utf-8").read()
m = re.search(r"^\s*//! compile-error (.*)$", source, re.M)
if m:
    print(f"error: {m.group(1)}")
    sys.exit(1)
if "class " not in source:
    print("error: no class declaration found")
    sys.exit(1)
print("build ok")

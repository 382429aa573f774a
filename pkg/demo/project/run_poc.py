"""Stub run step for the demo mini-project.

Executes the directive comments of a PoC in order, standing in for running
an instrumented JVM:

    //! call <class_fqn>.<method> <File.java>:<line>   record an instrumented method execution
    //! print <text>                                   write a line to stdout
    //! sleep <seconds>
    //! exit <status>
"""
import sys
import time

source_path, log_path = sys.argv[1], sys.argv[2]
status = 0
with open(log_path, "w", encoding="utf-8") as log:
    for raw in open(source_path, encoding="utf-8"):
        line = raw.strip()
        if not line.startswith("//! "):
            continue
        op, _, arg = line[4:].partition(" ")
        if op == "call":
            log.write(f"EVT {arg}\n")
            log.flush()
        elif op == "print":
            print(arg, flush=True)
        elif op == "sleep":
            time.sleep(float(arg))
        elif op == "exit":
            status = int(arg)
            break
sys.exit(status)

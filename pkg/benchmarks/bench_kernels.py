"""Compare the compiled and interpreted simulator kernels.

Runs the same seeded random-action simulation in two subprocesses, one with
``GRIDSIGNAL_NO_NUMBA=1``, and reports steps per second plus whether the final
vehicle state matches bit for bit.

    python3 benchmarks/bench_kernels.py --rows 3 --cols 5 --steps 2000
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import hashlib, json, sys, time
import numpy as np
from gridsignal import _jit
from gridsignal.netmodel import grid_scenario
from gridsignal.simcore import apply_signal_action, sim_reset, sim_step

rows, cols, steps = map(int, sys.argv[1:4])
scen = grid_scenario(rows, cols, period=1.0, horizon=steps)
rng = np.random.default_rng(0)

def run(n):
    s = sim_reset(scen)
    for _ in range(n):
        apply_signal_action(s, [rng.integers(k) for k in s.phase_count])
        sim_step(s)
    return s

run(20)  # compile / warm caches
rng = np.random.default_rng(0)
t0 = time.perf_counter()
s = run(steps)
dt = time.perf_counter() - t0
h = hashlib.sha256()
for a in (s.pos, s.speed, s.wt, s.st, s.status):
    h.update(np.ascontiguousarray(a).tobytes())
print(json.dumps({"numba": _jit.HAS_NUMBA, "seconds": dt, "digest": h.hexdigest()}))
"""


def measure(rows, cols, steps, no_numba):
    env = dict(os.environ)
    env.pop("GRIDSIGNAL_NO_NUMBA", None)
    if no_numba:
        env["GRIDSIGNAL_NO_NUMBA"] = "1"
    out = subprocess.run([sys.executable, "-c", WORKER, str(rows), str(cols), str(steps)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=3)
    ap.add_argument("--cols", type=int, default=5)
    ap.add_argument("--steps", type=int, default=2000)
    args = ap.parse_args(argv)

    fast = measure(args.rows, args.cols, args.steps, no_numba=False)
    slow = measure(args.rows, args.cols, args.steps, no_numba=True)
    for name, r in (("numba", fast), ("python", slow)):
        print(f"{name:<8} active={str(r['numba']):<5} {args.steps / r['seconds']:10.1f} steps/s"
              f"  ({r['seconds']:.3f} s)")
    print(f"speedup  {slow['seconds'] / fast['seconds']:.1f}x")
    same = fast["digest"] == slow["digest"]
    print(f"identical final state: {same}")
    return 0 if same else 1


if __name__ == "__main__":
    sys.exit(main())

"""Smoke test for the cpokit Python extension.

Build and install first:

    pip install --no-build-isolation -e crates/python
    python python/smoke_test.py
"""

import json
import math
import pathlib
import sys

import cpokit

ROOT = pathlib.Path(__file__).resolve().parent.parent


def check(cond, msg):
    if not cond:
        print(f"FAIL: {msg}")
        sys.exit(1)
    print(f"ok: {msg}")


def main():
    check("pcpo-kl" in cpokit.ALGORITHMS, f"algorithms exposed: {cpokit.ALGORITHMS}")

    # Identity curvature, violated constraint: the update must land on the
    # linearised constraint boundary a^T (x - theta) + b = 0.
    theta, g, a, b = [0.0, 0.0], [1.0, 0.0], [0.0, 1.0], 0.5
    eye = [[1.0, 0.0], [0.0, 1.0]]
    res = cpokit.pcpo_update(theta, g, a, b, eye, 0.02, metric="l2")
    x = res["theta_next"]
    check(res["projection_active"], "projection active when b > 0")
    check(abs(a[0] * x[0] + a[1] * x[1] + b) < 1e-9, f"lands on boundary: {x}")

    step = cpokit.trpo_update(theta, g, eye, 0.02)
    check(abs(math.hypot(*step) - math.sqrt(0.04)) < 1e-9, f"trpo step on trust-region boundary: {step}")

    try:
        cpokit.pcpo_update(theta, g, a, b, eye, 0.02, metric="l1")
    except ValueError:
        check(True, "bad metric raises ValueError")
    else:
        check(False, "bad metric raises ValueError")

    cfg = cpokit.RunConfig((ROOT / "configs" / "chain.json").read_text())
    cfg.iterations = 10
    cfg.seed = 4
    result = cfg.train()
    check(len(result) == 10, f"{len(result)} records for 10 iterations")
    check(result.summary["seed"] == 4, "summary carries the seed")
    check(abs(result.records[-1]["jc_hat"] - result.summary["final_jc"]) < 1e-12, "summary final_jc matches last record")
    again = cfg.train()
    check(again.final_theta == result.final_theta, "reruns are bit-identical")
    json.loads(cfg.to_json())

    try:
        cpokit.RunConfig('{"algorithm": "pcpo-kl", "bogus": 1}')
    except ValueError:
        check(True, "unknown config field raises ValueError")
    else:
        check(False, "unknown config field raises ValueError")

    report = cpokit.verify("cg")
    check(report["passed"], f"cg suite: {len(report['checks'])} checks")
    print("smoke test passed")


if __name__ == "__main__":
    main()

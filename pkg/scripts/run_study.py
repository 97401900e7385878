"""Run one of the bundled 14-bus study scenarios and print the metrics.

Usage:
    python scripts/run_study.py loadstep [--out trace.csv]
    python scripts/run_study.py derloss
    python scripts/run_study.py commloss
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from microgridctl import data as bundled
from microgridctl.netmodel import build_admittance
from microgridctl.sim import metrics, run_scenario, write_trace_csv

SCENARIOS = {
    "loadstep": bundled.SCENARIO_LOADSTEP,
    "derloss": bundled.SCENARIO_DERLOSS,
    "commloss": bundled.SCENARIO_COMMLOSS,
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("study", choices=sorted(SCENARIOS))
    ap.add_argument("--out", help="write the trace CSV here")
    args = ap.parse_args()

    case = bundled.bundled_case()
    gains = bundled.bundled_gains()
    scenario = bundled.bundled_scenario(SCENARIOS[args.study])
    t0 = time.perf_counter()
    trace = run_scenario(case, gains, scenario, Y=build_admittance(case))
    wall = time.perf_counter() - t0
    print(f"{args.study}: {trace.n_rows} recorded rows, {wall:.1f} s wall")
    print(metrics(trace, case).format())
    if args.out:
        write_trace_csv(trace, args.out)
        print(f"trace written to {args.out}")


if __name__ == "__main__":
    main()

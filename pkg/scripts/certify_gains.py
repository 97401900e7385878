"""Check block feasibility of a gains file and search for a certificate.

Usage:
    python scripts/certify_gains.py <case.json> <gains.json> [--out cert.json]
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from microgridctl.netmodel import build_admittance, load_case
from microgridctl.controller import load_gains
from microgridctl.certify import (
    SynthesisError,
    block_feasibility,
    build_hull,
    certificate_for_gains,
    certificate_to_json,
    verify_certificate,
)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("case")
    ap.add_argument("gains")
    ap.add_argument("--out")
    args = ap.parse_args()

    case = load_case(args.case)
    gains = load_gains(args.gains)
    hull = build_hull(case, build_admittance(case))
    feas = block_feasibility(gains, hull, d=1e-9)
    print(f"block feasibility: worst eigenvalue {feas.worst:.6e} "
          f"({'definite' if feas.passed else 'NOT definite'})")
    for blk, worst in zip(hull.blocks, feas.per_block_worst):
        print(f"  block {list(blk)}: worst {worst:.6e}")
    if not feas.passed:
        sys.exit(1)
    t0 = time.perf_counter()
    try:
        cert = certificate_for_gains(case, gains, hull)
    except SynthesisError as exc:
        print(f"no certificate: {exc}")
        sys.exit(1)
    report = verify_certificate(case, gains, cert)
    print(f"certificate found in {time.perf_counter() - t0:.1f} s: "
          f"xi={cert.xi:.6g}, eps={cert.eps:.6g}, zeta={cert.zeta:.6g} "
          f"(requested {cert.meta['zeta_requested']:.6g})")
    print(report.format())
    if args.out:
        Path(args.out).write_text(certificate_to_json(cert) + "\n")
        print(f"written {args.out}")


if __name__ == "__main__":
    main()

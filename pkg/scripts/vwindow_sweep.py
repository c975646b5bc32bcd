#!/usr/bin/env python3
"""Vulnerability-window sweep: how the blind spot scales with quote time.

The monitoring loop is blind while a quote is read; files opened in that
interval are only caught after their log entries and a verify round catch
up.  This sweeps the quote-read time and prints the resulting window, with
the reference point (155 ms quote, 58 us event read, 100 ms verify, 40 us
file-open floor) marked.

Run:  python scripts/vwindow_sweep.py [--tre 58us] [--tvp 100ms] [--floor 40us]
"""

import argparse
import sys

from attestsim.controller import (
    VulnerabilityWindowParams,
    format_duration_ms,
    parse_duration,
    vulnerability_window_report,
)

REFERENCE_TRQ_US = 155_000


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tre", default="58us", help="per-event read time")
    ap.add_argument("--tvp", default="100ms", help="verify round trip")
    ap.add_argument("--floor", default="40us", help="minimum file-open time")
    args = ap.parse_args()

    tre = parse_duration(args.tre)
    tvp = parse_duration(args.tvp)
    floor = parse_duration(args.floor)

    print(f"{'t_rq':>10} {'n':>8} {'n*t_re':>14} {'t_vw':>14}")
    sweep = [us * 1000 for us in range(25, 525, 25)]
    if REFERENCE_TRQ_US not in sweep:
        sweep.append(REFERENCE_TRQ_US)
    for trq in sorted(sweep):
        report = vulnerability_window_report(
            VulnerabilityWindowParams(trq, tre, tvp, floor)
        )
        mark = "  <- reference" if trq == REFERENCE_TRQ_US else ""
        print(f"{format_duration_ms(trq):>10} {report['n']:>8} "
              f"{format_duration_ms(report['n_t_re_us']):>14} "
              f"{format_duration_ms(report['t_vw_us']):>14}{mark}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

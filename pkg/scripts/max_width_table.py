#!/usr/bin/env python3
"""Largest processable slice width per RAM budget and window size.

A single-pass sweep with a k-slice window producing one output slice
needs (k+1) slices resident, so the widest square slice that fits m
bytes is floor(sqrt(m / ((k+1) b))). The table shows how budget and
window trade off, including the 1 TiB / k=10 reference point near
316158 voxels.
"""

import argparse

from stackstream.planner import max_width

GIB = 1 << 30


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--bytes-per-voxel", type=int, default=1, choices=(1, 2, 4))
    args = ap.parse_args()
    budgets = [("4 GiB", 4 * GIB), ("16 GiB", 16 * GIB), ("64 GiB", 64 * GIB),
               ("256 GiB", 256 * GIB), ("1 TiB", 1 << 40)]
    windows = [1, 3, 5, 10, 25, 100]
    b = args.bytes_per_voxel
    header = "budget".ljust(10) + "".join(f"k={k}".rjust(12) for k in windows)
    print(f"max slice width n (voxels), {b} byte(s) per voxel")
    print(header)
    for label, m in budgets:
        row = label.ljust(10)
        for k in windows:
            row += f"{max_width(m, k, b):>12,}"
        print(row)
    print()
    n = max_width(1 << 40, 10, b)
    print(f"reference: 1 TiB budget, k=10, b={b} -> n = {n:,} "
          f"(a stack of a million such slices is ~{n * n * 10**6 * b / 2**50:.0f} PiB)")


if __name__ == "__main__":
    main()

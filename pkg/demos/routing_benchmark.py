"""Timing the three routing implementations across fan-in sizes.

All algorithms route the same seeded inputs; each point reports the median
of 15 timed repetitions with the interquartile range as the noise bar.  The
punchlines: agreement routing beats 3-iteration dynamic routing at every
size, the all-pairs oracle falls off a quadratic cliff, and doubling the
fan-in roughly doubles the agreement kernel's time (linear scaling).

Run: python3 demos/routing_benchmark.py        (~30 s, single thread)
"""

from capsroute.bench import check_monotone, run_bench

SIZES = (72, 144, 288, 576, 1152)
REPEATS = 15

records = []
print(f"{'n':>6} {'fm (ms)':>12} {'dynamic(3) (ms)':>17} {'all-pairs (ms)':>16}")
for n in SIZES:
    row = {}
    for algorithm in ("fm", "dynamic", "brute"):
        rec = run_bench(algorithm, n, m=10, k=16, repeats=REPEATS, seed=0)
        records.append(rec)
        row[algorithm] = rec
    print(
        f"{n:>6} {row['fm'].median_ns / 1e6:>12.3f} "
        f"{row['dynamic'].median_ns / 1e6:>17.3f} "
        f"{row['brute'].median_ns / 1e6:>16.3f}"
    )

print("\ndoubling behaviour of the agreement kernel (time ratio per 2x fan-in):")
fm_records = {r.n: r for r in records if r.algorithm == "fm"}
for small, big in zip(SIZES, SIZES[1:]):
    ratio = fm_records[big].median_ns / fm_records[small].median_ns
    print(f"  {small:>5} -> {big:<5} ratio {ratio:.2f}   (linear scaling would give ~2.0)")

violations = check_monotone(records)
if violations:
    print("\nmonotonicity warnings (medians decreasing beyond noise):")
    for v in violations:
        print(f"  {v}")
else:
    print("\nmedians grow monotonically with n for every algorithm (within noise)")

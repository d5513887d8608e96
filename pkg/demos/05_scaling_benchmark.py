"""Constant cost versus quadratic cost as the frame history grows.

Streams T frames through the recurrent fusion path (per-frame work and
state size independent of T) and through a softmax-attention baseline whose
kv history grows with every frame. Writes the measurements to bench.csv.
"""

from lindrive.harness import BenchConfig, run_scaling_bench, write_bench_csv


def main():
    grid = [2, 4, 8, 16, 32, 64]
    cfg = BenchConfig(trials=3)
    records = run_scaling_bench(grid, cfg=cfg)

    print(f"{'frames':>6} {'mode':>8} {'ms/frame':>10} {'state bytes':>12} {'total ms':>10}")
    for r in records:
        print(f"{r.frames:>6} {r.mode:>8} {r.latency_ms:>10.3f} "
              f"{r.state_bytes:>12} {r.wall_ms:>10.1f}")

    lin = {r.frames: r for r in records if r.mode == "linear"}
    soft = {r.frames: r for r in records if r.mode == "softmax"}
    t_lo, t_hi = grid[0], grid[-1]
    print(f"\nlinear:  per-frame latency grows "
          f"{lin[t_hi].latency_ms / lin[t_lo].latency_ms:.2f}x from T={t_lo} to T={t_hi}, "
          f"state bytes constant at {lin[t_hi].state_bytes}")
    print(f"softmax: total latency grows "
          f"{soft[t_hi].wall_ms / soft[t_lo].wall_ms:.1f}x, "
          f"kv cache grows {soft[t_hi].state_bytes / soft[t_lo].state_bytes:.0f}x")

    write_bench_csv("bench.csv", records)
    print("\nwrote bench.csv")


if __name__ == "__main__":
    main()

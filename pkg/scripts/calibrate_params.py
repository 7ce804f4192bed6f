"""Search the SSM/head knob grid for the parameter count closest to the 49,641 budget."""
import argparse
import itertools

from ulmv.arch import CALIBRATION_GRID, TARGET_PARAM_COUNT, ModelConfig, calibrate, count_parameters, init_params


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--top", type=int, default=10, help="print the N closest configurations")
    args = ap.parse_args()

    keys = list(CALIBRATION_GRID)
    rows = []
    for values in itertools.product(*(CALIBRATION_GRID[k] for k in keys)):
        cfg = ModelConfig(**dict(zip(keys, values)))
        rows.append((count_parameters(init_params(cfg))[0], values))
    rows.sort(key=lambda r: (abs(r[0] - TARGET_PARAM_COUNT), r[1]))
    print(" ".join(f"{k:>13}" for k in keys), f"{'params':>8} {'delta':>7}")
    for n, values in rows[:args.top]:
        print(" ".join(f"{v:>13}" for v in values), f"{n:>8d} {n - TARGET_PARAM_COUNT:>+7d}")

    res = calibrate()
    outside = sum(t.size for name, t in init_params(res.config).items()
                  if ".branch" not in name or name.endswith("skip_scale"))
    print(f"\nselected {res.count} (delta {res.delta:+d}); exact matches on grid: {len(res.exact_matches)}")
    print(f"parameters outside the Mamba blocks: {outside}")


if __name__ == "__main__":
    main()

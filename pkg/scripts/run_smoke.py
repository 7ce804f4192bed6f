"""Generate the synthetic texture set, train with the smoke preset and evaluate every split."""
import argparse
import json
import time
from pathlib import Path

from ulmv.cli import main as cli
from ulmv.data import make_synthetic_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/smoke")
    ap.add_argument("--n-per-class", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)

    make_synthetic_dataset(out / "data", n_per_class=args.n_per_class, seed=args.seed)
    t0 = time.perf_counter()
    code = cli(["train", "--preset", "smoke", "--manifest", str(out / "data" / "manifest.csv"),
                "--out", str(out / "run"), "--seed", str(args.seed)])
    if code:
        raise SystemExit(code)
    print(f"training took {time.perf_counter() - t0:.1f}s")
    for split in ("train", "val", "test"):
        code = cli(["eval", "--checkpoint", str(out / "run" / "swa.ulmv"),
                    "--manifest", str(out / "data" / "manifest.csv"), "--split", split,
                    "--out", str(out / "eval")])
        if code:
            raise SystemExit(code)
    for split in ("train", "val", "test"):
        m = json.loads((out / "eval" / f"metrics_{split}.json").read_text())
        print(f"{split:>5}: n={m['n']} acc={m['accuracy']:.3f} f1={m['f1']:.3f}")


if __name__ == "__main__":
    main()

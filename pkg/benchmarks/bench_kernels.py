"""Time the compiled kernels against the numpy fallback on realistic inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json]

Inputs mirror one default frame: 5000 red discs and 202 white discs on a
128x128 canvas, a blur of size 3, and one 112x112 clip crop resized to 32.
"""

import argparse
import json
import timeit

import numpy as np

from cellstream import kernels


def _frame_inputs(rng, side=128, n_rbc=5000, n_wbc=202):
    n = n_rbc + n_wbc
    xs = rng.uniform(0, side, n)
    ys = rng.uniform(0, side, n)
    radii = np.r_[np.full(n_rbc, 1.5), np.full(n_wbc, 4.0)]
    colors = np.r_[np.tile([200.0, 40, 40], (n_rbc, 1)), np.tile([235.0, 230, 240], (n_wbc, 1))]
    alphas = np.r_[np.full(n_rbc, 0.35), np.full(n_wbc, 0.8)]
    return xs, ys, radii, colors, alphas, np.array([120.0, 60, 70]), side, side


def _resample_inputs(rng, frames=9, side=128, crop=112, out=32):
    planes = rng.integers(0, 256, (3 * frames, side, side), dtype=np.uint8)
    scale = crop / out
    src = (np.arange(out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, crop - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, crop - 1)
    w = src - i0
    return planes, i0 + 8, i1 + 8, w, i0 + 8, i1 + 8, w


def run(repeat=5):
    rng = np.random.default_rng(0)
    disc_args = _frame_inputs(rng)
    image = rng.integers(0, 256, (3, 128, 128), dtype=np.uint8)
    res_args = _resample_inputs(rng)
    cases = {
        "render_discs": lambda impl: kernels.render_discs(*disc_args, impl=impl),
        "box_blur": lambda impl: kernels.box_blur(image, 3, impl=impl),
        "resample_bilinear": lambda impl: kernels.resample_bilinear(*res_args, impl=impl),
    }
    impls = kernels.backends()
    results = {}
    for name, fn in cases.items():
        row = {}
        outputs = {}
        for label, impl in impls.items():
            outputs[label] = fn(impl)
            number = max(1, int(0.2 / max(timeit.timeit(lambda: fn(impl), number=1), 1e-6)))
            best = min(timeit.repeat(lambda: fn(impl), number=number, repeat=repeat)) / number
            row[label] = best * 1e3
        vals = list(outputs.values())
        row["identical"] = all(np.array_equal(vals[0], v) for v in vals[1:])
        if "compiled" in row:
            row["speedup"] = row["python"] / row["compiled"]
        results[name] = row
    return results


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()
    results = run(args.repeat)
    if args.json:
        print(json.dumps(results, indent=2))
        return
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'kernel':<20}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}  identical")
    for name, row in results.items():
        comp = row.get("compiled")
        comp_s = f"{comp:.3f}" if comp else "n/a"
        speed_s = f"{row['speedup']:.1f}x" if comp else ""
        print(f"{name:<20}{row['python']:>12.3f}{comp_s:>14}{speed_s:>10}  {row['identical']}")


if __name__ == "__main__":
    main()

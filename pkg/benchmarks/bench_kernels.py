"""Compare the compiled image kernels with the numpy fallback.

Run from the repository root after building the extension::

    python benchmarks/bench_kernels.py --size 1000 --repeat 20

Both backends are imported directly, so the script needs the compiled module
to be present. Outputs are checked for bit equality before timing.
"""

import argparse
import sys
import timeit

import numpy as np

from mvclip._kernels import _fallback
from mvclip.preprocess.image import TARGET_SIZE, _axis_coefficients, nearest_rank

try:
    from mvclip._kernels import _fast
except ImportError:
    sys.exit("compiled kernels not built; run `pip install -e . --no-build-isolation` first")


def cases(plane: np.ndarray):
    n = plane.size
    lo_rank, hi_rank = nearest_rank(1, n), nearest_rank(99, n)
    lo, hi = _fallback.percentiles_u16(plane, lo_rank, hi_rank)
    u8 = _fallback.rescale_u16_to_u8(plane, float(lo), float(hi))
    side = min(plane.shape)
    y0, y1, wy = _axis_coefficients(side, TARGET_SIZE)
    square = np.ascontiguousarray(u8[:side, :side])
    return {
        "percentiles_u16": lambda m: m.percentiles_u16(plane, lo_rank, hi_rank),
        "rescale_u16_to_u8": lambda m: m.rescale_u16_to_u8(plane, float(lo), float(hi)),
        "bilinear_resize_u8": lambda m: m.bilinear_resize_u8(square, y0, y1, wy, y0, y1, wy),
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--size", type=int, default=1000, help="side of the square 16-bit test plane")
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    plane = rng.gamma(2.0, 600.0, size=(args.size, args.size)).clip(0, 65535).astype(np.uint16)

    print(f"plane {args.size}x{args.size} uint16, {args.repeat} repeats, best time per call")
    print(f"{'kernel':<20}{'cython ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, call in cases(plane).items():
        a, b = call(_fast), call(_fallback)
        if not np.array_equal(np.asarray(a), np.asarray(b)):
            print(f"{name}: outputs differ between backends", file=sys.stderr)
            return 1
        t_fast = min(timeit.repeat(lambda: call(_fast), number=1, repeat=args.repeat))
        t_slow = min(timeit.repeat(lambda: call(_fallback), number=1, repeat=args.repeat))
        print(f"{name:<20}{t_fast * 1e3:>12.2f}{t_slow * 1e3:>12.2f}{t_slow / t_fast:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())

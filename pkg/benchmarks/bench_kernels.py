"""Time the compiled kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs on inputs sized like one training batch of the toy model.
Outputs of the two backends are compared before timing.
"""
import argparse
import json
import timeit

import numpy as np

from vireid._kernels import _fallback

try:
    from vireid._kernels import _core
except ImportError:  # extension not built
    _core = None


def cases(rng):
    images = rng.random((64, 3, 64, 32))
    tokens = rng.standard_normal((64, 106, 32))
    hidden = rng.standard_normal((64, 106, 128))
    relevance = (rng.random((100, 240)) < 0.05).astype(np.uint8)
    relevance[:, -1] = 1
    xhat, rstd = _fallback.layer_norm_forward(tokens, 1e-6)
    grad = rng.standard_normal(tokens.shape)
    ghidden = rng.standard_normal(hidden.shape)
    return {
        "extract_patches": lambda k: k.extract_patches(images, 8, 4),
        "layer_norm_forward": lambda k: k.layer_norm_forward(tokens, 1e-6),
        "layer_norm_backward": lambda k: k.layer_norm_backward(grad, xhat, rstd),
        "gelu_forward": lambda k: k.gelu_forward(hidden),
        "gelu_backward": lambda k: k.gelu_backward(hidden, ghidden),
        "ranking_stats": lambda k: k.ranking_stats(relevance),
    }


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    both_nan = np.isnan(a) & np.isnan(b)
    return float(np.max(np.where(both_nan, 0.0, np.abs(a - b)), initial=0.0))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", help="write results to this file")
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':<22}{'python ms':>11}{'compiled ms':>13}{'speedup':>9}{'max |diff|':>12}")
    for name, run in cases(rng).items():
        py = min(timeit.repeat(lambda: run(_fallback), number=1, repeat=args.repeat)) * 1e3
        row = {"kernel": name, "python_ms": py}
        if _core is not None:
            c = min(timeit.repeat(lambda: run(_core), number=1, repeat=args.repeat)) * 1e3
            row.update(compiled_ms=c, speedup=py / c, max_diff=max_diff(run(_fallback), run(_core)))
            print(f"{name:<22}{py:11.2f}{c:13.2f}{py / c:9.2f}{row['max_diff']:12.1e}")
        else:
            print(f"{name:<22}{py:11.2f}{'n/a':>13}")
        rows.append(row)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()

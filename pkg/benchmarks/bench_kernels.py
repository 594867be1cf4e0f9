"""Benchmark the numba kernels against the pure-numpy fallbacks.

Runs each kernel on representative attention/normalization shapes and prints
per-call timings for both backends plus the speedup ratio. Numba warm-up
(JIT compilation) happens outside the timed region.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from etrcast.kernels import get_impl

SHAPES = {
    "softmax_rows": [(1024, 20), (8192, 20), (2048, 128)],
    "layer_norm": [(1024, 128), (8192, 128), (20480, 32)],
    "masked_softmax": [(128, 16, 20, 20), (1024, 4, 20, 20)],
}


def _args_for(name: str, shape: tuple, rng: np.random.Generator):
    if name == "softmax_rows":
        return (rng.normal(size=shape),)
    if name == "layer_norm":
        x = rng.normal(size=shape)
        gain = rng.normal(size=shape[-1]) * 0.1 + 1.0
        bias = rng.normal(size=shape[-1]) * 0.1
        return (x, gain, bias)
    if name == "masked_softmax":
        scores = rng.normal(size=shape)
        mask = np.ones((shape[0], shape[-1]), dtype=bool)
        # mask out a varying tail so the masked path does real work
        for b in range(shape[0]):
            mask[b, 1 + b % shape[-1] :] = False
        return (scores, mask)
    raise KeyError(name)


def _time_call(fn, args, repeats: int) -> float:
    fn(*args)  # warm-up (JIT for numba, cache touch for numpy)
    start = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - start) / repeats


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    numpy_impl = get_impl("numpy")
    try:
        numba_impl = get_impl("numba")
    except ValueError as exc:
        print(f"numba backend unavailable ({exc}); benchmarking numpy only")
        numba_impl = None

    rng = np.random.default_rng(0)
    header = f"{'kernel':<16} {'shape':<22} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, shapes in SHAPES.items():
        for shape in shapes:
            call_args = _args_for(name, shape, rng)
            t_np = _time_call(numpy_impl[name], call_args, args.repeats)
            if numba_impl is not None:
                t_nb = _time_call(numba_impl[name], call_args, args.repeats)
                a = numpy_impl[name](*call_args)
                b = numba_impl[name](*call_args)
                a0 = a[0] if isinstance(a, tuple) else a
                b0 = b[0] if isinstance(b, tuple) else b
                assert np.allclose(a0, b0, rtol=1e-12, atol=1e-12), name
                ratio = f"{t_np / t_nb:8.2f}x"
                nb_ms = f"{t_nb * 1e3:10.3f}"
            else:
                ratio, nb_ms = f"{'n/a':>8}", f"{'n/a':>10}"
            print(f"{name:<16} {str(shape):<22} {t_np * 1e3:10.3f} {nb_ms} {ratio}")


if __name__ == "__main__":
    main()

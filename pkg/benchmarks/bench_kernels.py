"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 128] [--genes 2000]

Also runs a short end-to-end training pass with each backend.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from dgd.backend import get_kernels


def kernel_inputs(rng, batch, genes, latent, K):
    x = rng.negative_binomial(2, 0.2, size=(batch, genes)).astype(np.float64)
    mu = rng.uniform(0.05, 30.0, size=(batch, genes))
    r = np.exp(rng.normal(0.0, 1.0, size=genes))
    g = rng.standard_normal((batch, genes))
    z = rng.standard_normal((batch, latent))
    means = rng.standard_normal((K, latent))
    nlv = rng.normal(2.0, 0.5, size=(K, latent))
    gk = rng.standard_normal((batch, K))
    return x, mu, r, g, z, means, nlv, gk


def bench(mod, inputs, repeat):
    x, mu, r, g, z, means, nlv, gk = inputs
    cases = {
        "nb_logpmf": lambda: mod.nb_logpmf(x, mu, r),
        "nb_logpmf_backward": lambda: mod.nb_logpmf_backward(x, mu, r, g),
        "gauss_logdens": lambda: mod.gauss_logdens(z, means, nlv),
        "gauss_logdens_backward": lambda: mod.gauss_logdens_backward(z, means, nlv, gk),
    }
    out = {}
    for name, fn in cases.items():
        fn()
        out[name] = min(timeit.repeat(fn, number=1, repeat=repeat))
    return out


TRAIN_SNIPPET = """
import time, numpy as np
from dgd import BACKEND
from dgd.data import CountMatrix
from dgd.synthetic import make_counts
from dgd.training import TrainConfig, Trainer
rng = np.random.default_rng(0)
counts, labels, _, _ = make_counts(1000, rng, n_genes=200)
tr = Trainer(CountMatrix(counts), TrainConfig(latent_dim=2, n_components=4, epochs=5), rng)
t = time.perf_counter(); tr.fit(); dt = time.perf_counter() - t
print(BACKEND, dt, tr.history[-1]["total_loss"])
"""


def bench_training():
    rows = []
    for forced in ("0", "1"):
        env = dict(os.environ, DGD_PURE_PYTHON=forced)
        res = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env,
                             capture_output=True, text=True, check=True)
        backend, secs, loss = res.stdout.split()
        rows.append((backend, float(secs), float(loss)))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--genes", type=int, default=2000)
    ap.add_argument("--latent", type=int, default=20)
    ap.add_argument("--components", type=int, default=9)
    ap.add_argument("--skip-training", action="store_true")
    args = ap.parse_args(argv)

    inputs = kernel_inputs(np.random.default_rng(0), args.batch, args.genes,
                           args.latent, args.components)
    py = bench(get_kernels("python"), inputs, args.repeat)
    try:
        cy = bench(get_kernels("cython"), inputs, args.repeat)
    except ImportError:
        print("compiled kernels not built; only the numpy fallback was timed")
        cy = None

    print(f"batch={args.batch} genes={args.genes} latent={args.latent} K={args.components}")
    print(f"{'kernel':<26}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for name, t_py in py.items():
        if cy is None:
            print(f"{name:<26}{1e3 * t_py:>10.3f}")
        else:
            print(f"{name:<26}{1e3 * t_py:>10.3f}{1e3 * cy[name]:>11.3f}"
                  f"{t_py / cy[name]:>9.2f}")

    if not args.skip_training:
        print("\n5 training epochs, 1000 samples x 200 genes:")
        for backend, secs, loss in bench_training():
            print(f"  {backend:<8}{secs:8.2f} s   final loss {loss:.10f}")


if __name__ == "__main__":
    main()

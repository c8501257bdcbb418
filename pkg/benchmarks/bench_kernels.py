"""Time the numba and numpy kernel backends on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints per-call medians for the LSTM forward/backward and prefix-mean kernels,
plus one full stage-2 iteration (generator step and three discriminator steps)
at the default model size, and the largest difference between backends.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from earlypred import _kernels
from earlypred.data import SynthSpec, synthesize
from earlypred.model import ModelBundle, ModelDims
from earlypred.train import AdversarialTrainer, TrainConfig


def _median_ms(fn, repeat: int) -> float:
    fn()  # warm-up (and numba compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def kernel_inputs(T=10, B=64, d_in=64, d_h=32, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(T, B, d_in))
    Wx = rng.normal(scale=0.2, size=(d_in, 4 * d_h))
    Wh = rng.normal(scale=0.2, size=(d_h, 4 * d_h))
    b = rng.normal(scale=0.1, size=4 * d_h)
    z = np.zeros((B, d_h))
    active = np.sort(rng.integers(1, B + 1, size=T))[::-1].copy()
    active[0] = B
    dH = rng.normal(size=(T, B, d_h))
    return X, Wx, Wh, b, z, active, dH


def bench(repeat: int) -> dict[str, dict[str, float]]:
    X, Wx, Wh, b, z, active, dH = kernel_inputs()
    tr, _ = synthesize(SynthSpec(n_train=200, n_test=0))
    results, outputs = {}, {}
    for name in _kernels.BACKENDS:
        if name == "numba" and not _kernels.HAVE_NUMBA:
            continue
        _kernels.set_backend(name)
        fwd = _kernels.lstm_forward(X, Wx, Wh, b, z, z, active)
        bwd = _kernels.lstm_backward(dH, X, Wx, Wh, *fwd, z, z, active)
        outputs[name] = (fwd, bwd, _kernels.prefix_mean(X))
        bundle = ModelBundle.create(ModelDims(), "full", seed=0)
        trainer = AdversarialTrainer(bundle, tr, TrainConfig())

        def stage2_iter():
            trainer.generator_step()
            for _ in range(3):
                trainer.discriminator_step()

        results[name] = {
            "lstm_forward": _median_ms(lambda: _kernels.lstm_forward(X, Wx, Wh, b, z, z, active), repeat),
            "lstm_backward": _median_ms(lambda: _kernels.lstm_backward(dH, X, Wx, Wh, *fwd, z, z, active), repeat),
            "prefix_mean": _median_ms(lambda: _kernels.prefix_mean(X), repeat),
            "prefix_mean_backward": _median_ms(lambda: _kernels.prefix_mean_backward(X), repeat),
            "stage2_iteration": _median_ms(stage2_iter, max(repeat // 5, 5)),
        }
    if len(outputs) == 2:
        a, c = outputs["numba"], outputs["numpy"]
        flat_a = [*a[0], *a[1], a[2]]
        flat_c = [*c[0], *c[1], c[2]]
        diff = max(float(np.max(np.abs(p - q))) for p, q in zip(flat_a, flat_c) if p is not None)
        print(f"max |numba - numpy| over all kernel outputs: {diff:.2e}")
    return results


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    res = bench(args.repeat)
    names = list(res)
    print(f"{'kernel (ms, median)':<24s}" + "".join(f"{n:>10s}" for n in names))
    for k in next(iter(res.values())):
        print(f"{k:<24s}" + "".join(f"{res[n][k]:10.3f}" for n in names))


if __name__ == "__main__":
    main()

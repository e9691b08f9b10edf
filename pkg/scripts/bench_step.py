"""Time forward+backward+Adam steps and inference for a given configuration."""

import argparse
import time
from fractions import Fraction

import numpy as np

from segkit.architectures import ModelSpec, build_model
from segkit.objectives import softmax_cross_entropy
from segkit.ops import INFER, TRAIN
from segkit.optim import adam_init, adam_step
from segkit.rng import RngStream
from segkit.tensor import Tape


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", default="modified_unet")
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--channels", type=int, default=1)
    ap.add_argument("--classes", type=int, default=2)
    ap.add_argument("--width", default="1/4")
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--steps", type=int, default=5)
    a = ap.parse_args()

    spec = ModelSpec(a.model, a.size, a.size, a.channels, a.classes, Fraction(a.width))
    m = build_model(spec)
    for p in m.params.values():
        p.requires_grad = True
    rng = RngStream(0)
    x = rng.uniform(0, 1, (a.batch, a.size, a.size, a.channels)).astype(np.float32)
    y = rng.integers(0, a.classes, (a.batch, a.size, a.size))
    adam = adam_init(m.params)
    times = []
    for _ in range(a.steps):
        t0 = time.perf_counter()
        with Tape() as tape:
            loss = softmax_cross_entropy(m.logits(x, TRAIN, rng), y)
        g = tape.backward(loss)
        adam_step(adam, {k: g[p] for k, p in m.params.items()}, m.params)
        times.append(time.perf_counter() - t0)
    t0 = time.perf_counter()
    m.logits(x, INFER)
    infer = time.perf_counter() - t0
    print(f"{spec.kind} {a.size}x{a.size}x{a.channels} width {spec.width_multiplier} batch {a.batch}: "
          f"{m.parameter_count()} params, train step {np.median(times):.3f}s, inference {infer:.3f}s")


if __name__ == "__main__":
    main()

"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--no-step]

Per-kernel timings run in this process with both implementations. The
end-to-end training-step timing runs in subprocesses, once per value of
TT2VFIN_NUMBA, since the active kernel set is chosen at import time.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from tt2vfin import _accel

STEP_SNIPPET = """
import time, numpy as np
from tt2vfin import model as M, training as T, numerics as nx, _accel
from tt2vfin.numerics import Tape
cfg = M.ModelConfig()
params = M.init_parameters(cfg, 0)
x = nx.make_rng(0).uniform(0, 1, (64, cfg.window)); y = x[:, -1]
state, tc, rng = T.AdamState(), T.TrainConfig(), nx.make_rng(0, 1)
def step():
    with Tape() as tape:
        loss = T.mse_loss(M.forward(x, params, cfg, True, rng), y)
    T.adam_step(params, tape.gradient(loss, params), state, tc)
step()
ts = []
for _ in range({repeat}):
    t0 = time.perf_counter(); step(); ts.append(time.perf_counter() - t0)
print(_accel.kernels.name, min(ts))
"""


def cases():
    rng = np.random.default_rng(0)
    scores = rng.standard_normal((64 * 4 * 32, 32))
    acts = rng.standard_normal((64 * 32, 64))
    xhat, inv = _accel.numpy_kernels.layer_norm_rows(acts, 1e-5)
    series = rng.uniform(10, 20, 20_000)
    group = rng.uniform(0.1, 1.0, (20_000, 4))
    group[rng.random(group.shape) < 0.1] = np.nan
    xc = series - series.mean()
    return [
        ("softmax_rows", (scores,)),
        ("softmax_rows_backward", (_accel.numpy_kernels.softmax_rows(scores), scores)),
        ("layer_norm_rows", (acts, 1e-5)),
        ("layer_norm_rows_backward", (acts, xhat, inv)),
        ("rolling_mean", (series, 14)),
        ("gmnn_rows", (group,)),
        ("lagged_cov", (xc, xc[::-1].copy(), 20)),
    ]


def time_kernels(repeat: int) -> list[tuple[str, float, float | None]]:
    rows = []
    for name, args in cases():
        f_np = getattr(_accel.numpy_kernels, name)
        t_np = min(timeit.repeat(lambda: f_np(*args), number=1, repeat=repeat))
        t_nb = None
        if _accel.HAVE_NUMBA:
            f_nb = getattr(_accel.numba_kernels, name)
            f_nb(*args)  # compile outside the timing
            t_nb = min(timeit.repeat(lambda: f_nb(*args), number=1, repeat=repeat))
        rows.append((name, t_np, t_nb))
    return rows


def time_training_step(repeat: int) -> dict[str, float]:
    code = STEP_SNIPPET.format(repeat=repeat)
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, TT2VFIN_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                             text=True, check=True)
        name, secs = res.stdout.split()
        out[name] = float(secs)
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--no-step", action="store_true", help="skip the training-step timing")
    args = ap.parse_args(argv)

    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, t_np, t_nb in time_kernels(args.repeat):
        nb = "-" if t_nb is None else f"{1e3 * t_nb:.3f}"
        sp = "-" if t_nb is None else f"{t_np / t_nb:.1f}x"
        print(f"{name:<26}{1e3 * t_np:>10.3f}{nb:>10}{sp:>9}")
    if not args.no_step:
        steps = time_training_step(max(3, args.repeat // 4))
        print("\ndefault-model training step (batch 64):")
        for name, secs in sorted(steps.items()):
            print(f"  {name:<6} {1e3 * secs:8.1f} ms")
    return 0


if __name__ == "__main__":
    sys.exit(main())

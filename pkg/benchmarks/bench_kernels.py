"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from riskreach import _kernels_py
from riskreach.navsim import ScenarioConfig, generate_arena

try:
    from riskreach import _kernels as compiled
except ImportError:
    compiled = None


def cases():
    arena, pose = generate_arena(0, ScenarioConfig())
    obs, h = arena.obstacles, arena.half_extent
    rng = np.random.default_rng(0)
    pred = rng.normal(size=(256, 32))
    target = rng.normal(size=(256, 32))
    return {
        "lidar_scan (20 rays)": lambda k: k.lidar_scan(pose.x, pose.y, pose.theta, h, obs, 20, 3.5),
        "min_obstacle_distance": lambda k: k.min_obstacle_distance(pose.x, pose.y, h, obs),
        "sweep_min_clearance (K=10)": lambda k: k.sweep_min_clearance(pose.x, pose.y, pose.theta,
                                                                       0.8, 0.3, 0.1, 10, h, obs),
        "quantile_huber (256x32)": lambda k: k.quantile_huber(pred, target, 1.0),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = {"python": _kernels_py}
    if compiled is not None:
        backends["cython"] = compiled
    else:
        print("compiled extension not built; timing the fallback only")
    print(f"{'kernel':<28} " + " ".join(f"{name + ' us':>12}" for name in backends) + "   speedup")
    for label, fn in cases().items():
        times = {}
        for name, mod in backends.items():
            timer = timeit.Timer(lambda: fn(mod))
            n, _ = timer.autorange()
            times[name] = min(timer.repeat(args.repeat, n)) / n * 1e6
        speed = f"{times['python'] / times['cython']:8.1f}x" if "cython" in times else ""
        print(f"{label:<28} " + " ".join(f"{t:12.2f}" for t in times.values()) + "  " + speed)


if __name__ == "__main__":
    main()

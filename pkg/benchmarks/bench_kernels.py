"""Time the compiled and numpy replay kernels on desk-scale shapes.

    python benchmarks/bench_kernels.py [--repeat 50] [--capacity 131072]

Prints one line per (kernel, backend) with the median call time, and checks
that both backends agree bit for bit on every input they are timed on.
"""

import argparse
import statistics
import time

import numpy as np

from riserl.kernels import backends


def _time(fn, repeat):
    out = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t)
    return statistics.median(out)


def make_inputs(capacity, batch, envs, seed):
    rng = np.random.default_rng(seed)
    per_env = capacity // envs
    # episodes of random length laid out contiguously in each env's ring
    episode = np.empty(capacity, dtype=np.int64)
    step = np.empty(capacity, dtype=np.int64)
    ep = 0
    for e in range(envs):
        t = 0
        for i in range(per_env):
            if t == 0:
                length = int(rng.integers(5, 40))
                ep += 1
            episode[e * per_env + i] = ep
            step[e * per_env + i] = t
            t = (t + 1) % length
    return {
        "leaves": rng.integers(0, capacity, size=batch),
        "values": rng.random(batch),
        "priorities": rng.random(capacity),
        "slots": rng.integers(0, capacity, size=batch),
        "episode": episode,
        "step": step,
        "per_env": per_env,
        "rewards": rng.random((batch, 3)),
        "terminals": rng.random((batch, 3)) < 0.1,
        "valid": rng.random((batch, 3)) < 0.95,
    }


def bench(mod, x, capacity, batch, context, repeat):
    tree = np.zeros(2 * capacity)
    mod.tree_set(tree, np.arange(capacity), x["priorities"])
    targets = np.random.default_rng(1).random(batch) * tree[1]
    results = {
        "tree_set": _time(lambda: mod.tree_set(tree, x["leaves"], x["values"]), repeat),
        "tree_find": _time(lambda: mod.tree_find(tree, targets), repeat),
        "window_index": _time(lambda: mod.window_index(x["episode"], x["step"], x["slots"], x["per_env"],
                                                       -(context - 1), 3), repeat),
        "nstep_returns": _time(lambda: mod.nstep_returns(x["rewards"], x["terminals"], x["valid"], 0.99), repeat),
    }
    outputs = (tree.copy(), mod.tree_find(tree, targets),
               *mod.window_index(x["episode"], x["step"], x["slots"], x["per_env"], -(context - 1), 3),
               *mod.nstep_returns(x["rewards"], x["terminals"], x["valid"], 0.99))
    return results, outputs


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--capacity", type=int, default=1 << 17)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--envs", type=int, default=8)
    ap.add_argument("--context", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args(argv)

    x = make_inputs(args.capacity, args.batch, args.envs, seed=0)
    mods = backends()
    if "cython" not in mods:
        print("compiled backend not built; timing the numpy backend only")
    table, outs = {}, {}
    for name, mod in mods.items():
        table[name], outs[name] = bench(mod, x, args.capacity, args.batch, args.context, args.repeat)
    if len(outs) == 2:
        same = all(np.array_equal(a, b) for a, b in zip(outs["python"], outs["cython"]))
        print(f"backends agree bit for bit: {same}")
    print(f"{'kernel':<15}" + "".join(f"{n:>14}" for n in table) + ("     speedup" if len(table) == 2 else ""))
    for k in table["python"]:
        row = f"{k:<15}" + "".join(f"{table[n][k] * 1e6:>11.1f} us" for n in table)
        if len(table) == 2:
            row += f"{table['python'][k] / table['cython'][k]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()

"""Compare the numba-compiled kernels against the pure-NumPy fallback.

Runs every case twice in subprocesses: once with numba enabled (default
import path) and once with GRUMPC_NO_NUMBA=1, then prints a speedup table.

    python3 benchmarks/bench_kernels.py
"""

import json
import os
import subprocess
import sys
import time


def build_inputs():
    import numpy as np
    from grumpc import gru_model

    rng = np.random.default_rng(42)
    w = gru_model.random_weights(10, 1, 1, rng, scale=0.15)
    n = w.n
    return {
        "w": w,
        "x0": rng.uniform(-1, 1, n),
        "useq": rng.uniform(-1, 1, (2000, 1)),
        "Ub": rng.uniform(-1, 1, (2, 200, 1)),
        "Yb": rng.uniform(-1, 1, (2, 200, 1)),
        "X0b": rng.uniform(-1, 1, (2, n)),
        "vplan": rng.uniform(-0.2, 0.2, 20),
        "rng": rng,
    }


def run_cases():
    import numpy as np
    from grumpc import kernels, mpc, plant_sim

    data = build_inputs()
    w = data["w"]
    p = plant_sim.default_params()
    s0, q3 = plant_sim.nominal_point(p)
    useq_ph = np.full(500, q3)
    dseq_ph = np.full(500, p.q2)

    eq = mpc.find_equilibrium(w, [0.0])
    lin = mpc.linearize_augmented(w, eq)
    K, _ = mpc.lq_gain(lin, np.eye(w.n + 1), np.eye(1))
    Qlq = np.eye(w.n + 1) + K.T @ K
    Pi = mpc.lyapunov_Pi(lin, K, 10 * np.eye(w.n + 1))
    xa0 = eq.xa0.copy()

    cases = {
        "gru_rollout[T=2000]": lambda: kernels.gru_rollout(
            data["x0"], data["useq"], *w.arrays()),
        "tbptt_loss_grad[B=2,T=200]": lambda: kernels.tbptt_loss_grad_batch(
            data["Ub"], data["Yb"], data["X0b"], 50, *w.arrays(), w.U_o, w.b_o),
        "ph_run[K=500]": lambda: kernels.ph_run(
            s0.x1, s0.x2, s0.x3, useq_ph, dseq_ph, 10.0, 10,
            *p.rhs_args(), p.pK1, p.pK2),
        "fhocp_grad[Np=40,Nf=300]": lambda: kernels.fhocp_forward_backward(
            data["vplan"], xa0, eq.u0, eq.y0, *w.arrays(), w.U_o, w.b_o,
            np.ascontiguousarray(K), xa0, np.eye(w.n + 1), np.eye(1),
            Qlq, Pi, 1.0, 20, 40, 300, 1e3, 1e3),
    }

    results = {}
    for name, fn in cases.items():
        fn()                                   # warm up / compile
        reps = 5
        t0 = time.perf_counter()
        for _ in range(reps):
            fn()
        results[name] = (time.perf_counter() - t0) / reps * 1e3
    print(json.dumps({"numba": kernels.NUMBA_ENABLED, "ms": results}))


def main():
    here = os.path.abspath(__file__)
    rows = {}
    for label, extra_env in (("numba", {}), ("numpy", {"GRUMPC_NO_NUMBA": "1"})):
        env = dict(os.environ, **extra_env)
        out = subprocess.run([sys.executable, here, "--worker"], env=env,
                             capture_output=True, text=True, check=True)
        doc = json.loads(out.stdout.strip().splitlines()[-1])
        assert doc["numba"] == (label == "numba"), "env flag was not honored"
        rows[label] = doc["ms"]

    names = list(rows["numba"])
    width = max(len(s) for s in names)
    print(f"{'kernel':<{width}}  {'numba ms':>10}  {'numpy ms':>10}  {'speedup':>8}")
    for name in names:
        a, b = rows["numba"][name], rows["numpy"][name]
        print(f"{name:<{width}}  {a:>10.3f}  {b:>10.3f}  {b / a:>7.1f}x")


if __name__ == "__main__":
    if "--worker" in sys.argv:
        run_cases()
    else:
        main()

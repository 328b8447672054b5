"""Explosion of dX = X^3 dt + dW, three ways.

The Feller test says the process reaches +-infinity with positive
probability. Monte Carlo estimates P[S > t] directly. The PDE route solves
absorbed problems on growing boxes (-10m, 10m); their values increase with m
and settle on the minimal solution, which matches the Monte Carlo curve and
stays below 1.

Run with ``python demos/cubic_explosion.py`` (about 15 s).
"""
from blowup import (PDEGrid, SimConfig, catalog_entry, estimate_u, feller_classify,
                    minimal_solution)


def main():
    e = catalog_entry("cubic_drift")

    rep = feller_classify(e.model)
    print(f"Feller test: {rep.classification}, v(-inf) = {rep.v_left:.6f}, "
          f"v(+inf) = {rep.v_right:.6f}\n")

    grid = PDEGrid(0.01, 1e-3, 1.0, theta=1.0, upwind=True, save_every=50)
    res = minimal_solution(e.model, e.fk, grid, range(1, 6), tol=1e-2, window=[(-2.0, 2.0)])
    print(f"{'m':>3} {'box':>14} {'sup |u_m - u_m-1| on [-2, 2]':>30}")
    for step in res.report:
        box = step["box"][0]
        diff = "" if step["sup_diff"] is None else f"{step['sup_diff']:.2e}"
        print(f"{step['m']:3d} {str(box):>14} {diff:>30}")
    print(f"converged: {res.converged}\n")

    ts = [0.25, 0.5, 0.75, 1.0]
    mc = estimate_u(e.model, [0.0], ts, 20_000, SimConfig(5e-4, 1.0, rng_seed=3))
    print(f"{'t':>5} {'minimal u(t, 0)':>16} {'MC':>8} {'SE':>8}")
    for t, est in zip(ts, mc):
        print(f"{t:5.2f} {res.solution.at(t, [0.0]):16.4f} {est.value:8.4f} {est.std_error:8.4f}")


if __name__ == "__main__":
    main()

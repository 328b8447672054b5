"""Pathwise and PDE residual diagnostics on Brownian motion in (0, 1).

The Ito residual compares phi(nu, X_nu) Y_nu with its Euler-Maruyama
decomposition. For phi = x^2 the residual is a sum of centred terms, so its
mean is zero at every dt and only noise is visible. For phi = (x - 1/2)^4 the
mean is 3 dt E[nu], which halves when dt halves.

The viscosity residual applies the generator to a computed solution on
refined grids; its median falls with the grid spacing.

Run with ``python demos/residual_checks.py`` (about 10 s).
"""
from blowup import (PDEGrid, SimConfig, catalog_entry, ito_residual, make_jet, solve_cauchy,
                    viscosity_residual)


def main():
    e = catalog_entry("bm_unit_interval")
    jets = {
        "x^2": (make_jet("x^2", "0", "2*x", "2"), 0.0),
        "(x-1/2)^4": (make_jet("(x-0.5)^4", "0", "4*(x-0.5)^3", "12*(x-0.5)^2"), 3.0),
    }
    print(f"{'phi':>10} {'dt':>8} {'mean D':>10} {'SE':>9} {'expected':>10}")
    for name, (jet, k) in jets.items():
        for dt in (1e-3, 5e-4, 2.5e-4):
            r = ito_residual(e.model, e.fk, jet, 0.2, [0.5], 10_000,
                             SimConfig(dt, 0.2, rng_seed=3), delta=0.1)
            print(f"{name:>10} {dt:8.1e} {r.mean:+10.2e} {r.std_error:9.1e} "
                  f"{k * dt * r.mean_nu:10.2e}")

    sol = solve_cauchy(e.model, e.fk, None, PDEGrid(0.05, 0.005, 0.2))
    tab = viscosity_residual(sol, e.model, e.fk, 3, (0.05, 0.2))
    print(f"\n{'level':>5} {'median':>10} {'max':>10}")
    for k, (med, mx) in enumerate(zip(tab.medians, tab.maxima)):
        print(f"{k:5d} {med:10.2e} {mx:10.2e}")
    print("median ratios: " + ", ".join(f"{r:.2f}" for r in tab.median_ratios))


if __name__ == "__main__":
    main()

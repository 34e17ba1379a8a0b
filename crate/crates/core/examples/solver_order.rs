//! Empirical convergence order of the Euler and midpoint solvers on
//! `dx/dt = -x`.

use pflux::flowode::{integrate, Solver};
use pflux::numerics::Tensor;

fn error(n: usize, solver: Solver) -> f64 {
    let x0 = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
    let x1 = integrate(|_, _, x: &Tensor<f64>| Ok(x.scale(-1.0)?), &x0, n, solver).unwrap();
    (x1.item() - (-1.0f64).exp()).abs()
}

fn main() {
    for solver in [Solver::Euler, Solver::Midpoint] {
        println!("{}", solver.name());
        let mut prev: Option<f64> = None;
        for n in [5, 10, 20, 40, 80] {
            let e = error(n, solver);
            match prev {
                Some(p) => println!("  N={n:<3} error {e:.3e}  ratio {:.3}", p / e),
                None => println!("  N={n:<3} error {e:.3e}"),
            }
            prev = Some(e);
        }
    }
}

//! Finite-difference helpers shared by the unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::Vector;
use crate::tensors::Tensors;

pub fn random_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Vector::from_vec((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest relative error between `grads` and central differences of `loss`
/// over every scalar in `params`.
pub fn fd_check<P: Tensors>(params: &P, grads: &P, eps: f64, loss: impl Fn(&P) -> f64) -> f64 {
    fd_check_with_floor(params, grads, eps, 0.0, loss)
}

/// As [`fd_check`], but elements whose analytic and numeric values differ by
/// at most `abs_floor` count as exact. Central differences at `eps = 1e-5`
/// carry up to about `1e-11` of roundoff, which swamps components below `1e-6`.
pub fn fd_check_with_floor<P: Tensors>(
    params: &P,
    grads: &P,
    eps: f64,
    abs_floor: f64,
    loss: impl Fn(&P) -> f64,
) -> f64 {
    let analytic: Vec<(String, Vec<f64>)> =
        grads.tensors().into_iter().map(|(n, t)| (n, t.data().to_vec())).collect();
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (ti, (name, g)) in analytic.iter().enumerate() {
        for (j, &gj) in g.iter().enumerate() {
            let orig = params.tensors()[ti].1.data()[j];
            set(&mut probe, ti, j, orig + eps);
            let up = loss(&probe);
            set(&mut probe, ti, j, orig - eps);
            let down = loss(&probe);
            set(&mut probe, ti, j, orig);
            let fd = (up - down) / (2.0 * eps);
            let e = if (gj - fd).abs() <= abs_floor { 0.0 } else { rel_err(gj, fd) };
            if e > worst {
                worst = e;
                if e > 1e-6 {
                    eprintln!("{name}[{j}]: analytic {gj:e} vs fd {fd:e} (rel {e:e})");
                }
            }
        }
    }
    worst
}

fn set<P: Tensors>(p: &mut P, tensor: usize, idx: usize, value: f64) {
    let mut ts = p.tensors_mut();
    ts[tensor].1.data_mut()[idx] = value;
}

use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The K rows picked for one target object.
#[derive(Clone, Debug)]
pub struct SelectedContext<T> {
    /// `K x D` matrix of selected value rows; its row-major flattening is the
    /// context vector fed to temporal attention.
    pub rows: Var,
    /// Row of the neighborhood chosen by each sample (repeats allowed).
    pub indices: Vec<usize>,
    /// Attention distribution over neighborhood rows the samples are drawn from.
    pub soft_weights: Vec<T>,
}

/// Standard Gumbel noise, `samples x rows`.
pub fn sample_gumbel_noise<T: Scalar>(samples: usize, rows: usize, rng: &mut impl Rng) -> Tensor<T> {
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    let data = (0..samples * rows).map(|_| T::lit(gumbel.sample(rng))).collect();
    Tensor::matrix(samples, rows, data).expect("noise shape")
}

/// Draws `k` straight-through Gumbel-Softmax samples over the neighborhood
/// of `x_i` (a `1 x D` row). `neighbors` holds `Z` and the matching encodings
/// `E`; keys and values are both `Z + E`. Without neighbors the context is
/// `k` copies of `x_i`.
pub fn gumbel_topk_select<T: Scalar>(
    g: &mut Graph<T>,
    x_i: Var,
    neighbors: Option<(Var, &Tensor<T>)>,
    k: usize,
    tau: T,
    rng: &mut impl Rng,
) -> Result<SelectedContext<T>> {
    if k == 0 {
        return Err(Error::contract("top-k selection needs k >= 1"));
    }
    match neighbors {
        None => fallback(g, x_i, k),
        Some((z, e)) => {
            let noise = sample_gumbel_noise(k, g.shape(z)[0], rng);
            select_with_noise(g, x_i, z, e, &noise, tau, true)
        }
    }
}

fn fallback<T: Scalar>(g: &mut Graph<T>, x_i: Var, k: usize) -> Result<SelectedContext<T>> {
    let rows = g.gather_rows(x_i, &vec![0; k])?;
    Ok(SelectedContext {
        rows,
        indices: vec![0; k],
        soft_weights: vec![T::one()],
    })
}

/// Deterministic core of [`gumbel_topk_select`] given the noise matrix
/// (`k x rows(Z)`). With `straight_through == false` the soft samples are used
/// in the forward pass as well, which makes the whole path smooth.
pub fn select_with_noise<T: Scalar>(
    g: &mut Graph<T>,
    x_i: Var,
    z: Var,
    encodings: &Tensor<T>,
    noise: &Tensor<T>,
    tau: T,
    straight_through: bool,
) -> Result<SelectedContext<T>> {
    if !(tau > T::zero()) {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    let (n, dim) = (g.shape(z)[0], g.shape(z)[1]);
    if g.shape(x_i) != [1, dim] {
        return Err(Error::shape("gumbel_topk_select", g.shape(x_i), g.shape(z)));
    }
    if encodings.shape() != [n, dim] {
        return Err(Error::shape("gumbel_topk_select", encodings.shape(), g.shape(z)));
    }
    if noise.cols() != n {
        return Err(Error::shape("gumbel_topk_select", noise.shape(), &[noise.rows(), n]));
    }
    let k = noise.rows();

    let e = g.constant(encodings.clone());
    let keys = g.add(z, e)?;
    let kt = g.transpose(keys)?;
    let raw = g.matmul(x_i, kt)?;
    let logits = g.scalar_mul(raw, T::one() / T::from_usize(dim).unwrap().sqrt());

    let ones = g.constant(Tensor::ones(k, 1));
    let tiled = g.matmul(ones, logits)?;
    let noise_v = g.constant(noise.clone());
    let perturbed = g.add(tiled, noise_v)?;
    let scaled = g.scalar_mul(perturbed, T::one() / tau);
    let soft = g.softmax(scaled, 1)?;

    let pv = g.value(scaled);
    let indices: Vec<usize> = (0..k)
        .map(|r| {
            let row = pv.row_slice(r);
            (0..n).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect();

    let weights = if straight_through {
        let mut hard = Tensor::zeros(k, n);
        for (r, &c) in indices.iter().enumerate() {
            hard.set(r, c, T::one());
        }
        let hard = g.constant(hard);
        g.straight_through(hard, soft)?
    } else {
        soft
    };
    let rows = g.matmul(weights, keys)?;

    let lv = g.value(logits).row_slice(0);
    let max = lv.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = lv.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let soft_weights = exps.into_iter().map(|v| v / total).collect();

    Ok(SelectedContext {
        rows,
        indices,
        soft_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_input_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Query and neighborhood whose scaled logits equal `logits` (D = 4, E = 0).
    fn fixture(g: &mut Graph<f64>, logits: &[f64]) -> (Var, Var, Tensor<f64>) {
        let n = logits.len();
        let x = g.constant(Tensor::row(vec![1.0, 0.0, 0.0, 0.0]));
        let mut z = Tensor::zeros(n, 4);
        for (r, &l) in logits.iter().enumerate() {
            z.set(r, 0, l * 2.0);
            z.set(r, 1 + r % 3, 0.25);
        }
        (x, g.constant(z), Tensor::zeros(n, 4))
    }

    #[test]
    fn one_row_neighborhood_repeats_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let (x, z, e) = fixture(&mut g, &[0.3]);
        let sel = gumbel_topk_select(&mut g, x, Some((z, &e)), 5, 1.0, &mut rng).unwrap();
        assert_eq!(sel.indices, vec![0; 5]);
        let rows = g.value(sel.rows);
        for r in 0..5 {
            assert_eq!(rows.row_slice(r), g.value(z).row_slice(0));
        }
    }

    #[test]
    fn empty_neighborhood_copies_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.5, -1.0]));
        let sel = gumbel_topk_select(&mut g, x, None, 3, 1.0, &mut rng).unwrap();
        assert_eq!(g.value(sel.rows), &Tensor::from_rows(&vec![vec![0.5, -1.0]; 3]).unwrap());
    }

    #[test]
    fn forward_rows_are_exact_gathers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let (x, z, e) = fixture(&mut g, &[0.1, 0.4, -0.2, 0.0]);
        let sel = gumbel_topk_select(&mut g, x, Some((z, &e)), 16, 1.0, &mut rng).unwrap();
        let total: f64 = sel.soft_weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        for (r, &i) in sel.indices.iter().enumerate() {
            assert_eq!(g.value(sel.rows).row_slice(r), g.value(z).row_slice(i));
        }
    }

    #[test]
    fn peaked_logits_select_the_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let (x, z, e) = fixture(&mut g, &[10.0, 0.0, 0.0]);
        let sel = gumbel_topk_select(&mut g, x, Some((z, &e)), 10_000, 0.1, &mut rng).unwrap();
        let hits = sel.indices.iter().filter(|&&i| i == 0).count();
        assert!(hits as f64 / 10_000.0 >= 0.999, "{hits}");
    }

    #[test]
    fn soft_path_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise: Tensor<f64> = sample_gumbel_noise(3, 4, &mut rng);
        let z = Tensor::matrix(4, 4, (0..16).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect()).unwrap();
        let e = Tensor::matrix(4, 4, (0..16).map(|i| (i as f64 * 0.37).sin() * 0.2).collect()).unwrap();
        let x = Tensor::row(vec![0.3, -0.8, 0.5, 0.1]);
        let err = check_input_gradient(&x, 1e-5, 1e-9, |g, xv| {
            let zv = g.constant(z.clone());
            let sel = select_with_noise(g, xv, zv, &e, &noise, 0.7, false)?;
            let sq = g.mul(sel.rows, sel.rows)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn straight_through_gradient_equals_soft_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise: Tensor<f64> = sample_gumbel_noise(3, 4, &mut rng);
        let z = Tensor::matrix(4, 4, (0..16).map(|i| (i as f64 * 0.61).cos()).collect()).unwrap();
        let e = Tensor::zeros(4, 4);
        let x = Tensor::row(vec![0.3, -0.8, 0.5, 0.1]);
        let readout = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.23).sin()).collect()).unwrap();
        let grad = |st: bool| {
            let mut g = Graph::new();
            let xv = g.variable(x.clone());
            let zv = g.constant(z.clone());
            let sel = select_with_noise(&mut g, xv, zv, &e, &noise, 1.0, st).unwrap();
            let r = g.constant(readout.clone());
            let prod = g.mul(sel.rows, r).unwrap();
            let l = g.sum(prod);
            g.backward(l).unwrap().wrt(&g, xv)
        };
        assert!(grad(true).max_abs_diff(&grad(false)) < 1e-15);
    }
}

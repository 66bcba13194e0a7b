//! Empirical Hilbert-Schmidt Independence Criterion with RBF kernels.
//!
//! `hsic_loss` builds the differentiable estimate on the compute graph
//! (used as the disentanglement loss); `hsic_plain` is an independent f64
//! implementation used by statistical tests and cross-checked against the
//! graph path.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Val};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance of the batch, treated as a constant with
    /// respect to gradients.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidth: Bandwidth,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec { bandwidth: Bandwidth::Median }
    }
}

impl KernelSpec {
    pub fn fixed(sigma: f64) -> Self {
        KernelSpec { bandwidth: Bandwidth::Fixed(sigma) }
    }
}

/// Bandwidth actually used for one batch, and whether the median heuristic
/// had to fall back to 1.0 on a zero-variance batch.
#[derive(Debug, Clone, Copy)]
pub struct ResolvedBandwidth {
    pub sigma: f64,
    pub fell_back: bool,
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn pairwise_distances(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * (rows - 1) / 2);
    for i in 0..rows {
        for j in i + 1..rows {
            let mut s = 0.0;
            for k in 0..cols {
                let d = data[i * cols + k] - data[j * cols + k];
                s += d * d;
            }
            out.push(s.sqrt());
        }
    }
    out
}

impl KernelSpec {
    /// Resolve the bandwidth for a `[n, d]` batch given as f64 values.
    pub fn resolve(&self, rows: usize, cols: usize, data: &[f64]) -> Result<ResolvedBandwidth> {
        match self.bandwidth {
            Bandwidth::Fixed(sigma) => {
                if sigma <= 0.0 {
                    return Err(Error::Param(format!("bandwidth must be positive, got {sigma}")));
                }
                Ok(ResolvedBandwidth { sigma, fell_back: false })
            }
            Bandwidth::Median => {
                let med = median(pairwise_distances(rows, cols, data));
                if med > 0.0 {
                    Ok(ResolvedBandwidth { sigma: med, fell_back: false })
                } else {
                    Ok(ResolvedBandwidth { sigma: 1.0, fell_back: true })
                }
            }
        }
    }
}

fn check_batch<S: Scalar>(g: &Graph<S>, v: Val, what: &str) -> Result<(usize, usize)> {
    let t = g.value(v);
    if t.shape().len() != 2 {
        return Err(Error::Shape(format!("{what} batch must be 2-D, got {:?}", t.shape())));
    }
    let (n, d) = (t.rows(), t.cols());
    if n < 2 {
        return Err(Error::Param(format!("{what} batch needs n >= 2 samples, got {n}")));
    }
    Ok((n, d))
}

/// RBF Gram matrix `K_ij = exp(-|x_i - x_j|^2 / (2 sigma^2))` on the graph.
/// Symmetric with unit diagonal by construction.
pub fn gram_matrix<S: Scalar>(
    g: &mut Graph<S>,
    batch: Val,
    spec: &KernelSpec,
) -> Result<(Val, ResolvedBandwidth)> {
    let (n, d) = check_batch(g, batch, "gram")?;
    let resolved = spec.resolve(n, d, &g.value(batch).to_f64_vec())?;
    let dist = g.pairwise_sqdist(batch)?;
    let scaled = g.scale(dist, -0.5 / (resolved.sigma * resolved.sigma));
    Ok((g.exp(scaled), resolved))
}

fn centering_matrix<S: Scalar>(n: usize) -> Tensor<S> {
    let inv = 1.0 / n as f64;
    let mut data = vec![S::from_f64(-inv); n * n];
    for i in 0..n {
        data[i * n + i] = S::from_f64(1.0 - inv);
    }
    Tensor::new(vec![n, n], data).expect("sized by construction")
}

/// Differentiable HSIC estimate `tr(K H L H) / (n - 1)^2` between two
/// batches with matching sample counts.
pub fn hsic_loss<S: Scalar>(
    g: &mut Graph<S>,
    mot: Val,
    app: Val,
    spec: &KernelSpec,
) -> Result<Val> {
    let (n_mot, _) = check_batch(g, mot, "motion")?;
    let (n_app, _) = check_batch(g, app, "appearance")?;
    if n_mot != n_app {
        return Err(Error::shape(
            "hsic sample counts",
            g.value(mot).shape(),
            g.value(app).shape(),
        ));
    }
    let n = n_mot;
    let (k, _) = gram_matrix(g, mot, spec)?;
    let (l, _) = gram_matrix(g, app, spec)?;
    let h = g.leaf(centering_matrix::<S>(n));
    // tr(K H L H) = sum((K H) o (H L)) since K, L, H are symmetric
    let kh = g.matmul(k, h)?;
    let hl = g.matmul(h, l)?;
    let prod = g.mul(kh, hl)?;
    let s = g.sum_all(prod);
    Ok(g.scale(s, 1.0 / ((n - 1) as f64 * (n - 1) as f64)))
}

/// Plain-f64 HSIC used by statistical tests; independent of the graph path.
/// Batches are row-major `[n, d]` slices.
pub fn hsic_plain(
    mot: (usize, usize, &[f64]),
    app: (usize, usize, &[f64]),
    spec: &KernelSpec,
) -> Result<f64> {
    let (n, dm, mot_data) = mot;
    let (n2, da, app_data) = app;
    if n != n2 {
        return Err(Error::Shape(format!("hsic sample counts: {n} vs {n2}")));
    }
    if n < 2 {
        return Err(Error::Param(format!("hsic needs n >= 2 samples, got {n}")));
    }
    let sig_k = spec.resolve(n, dm, mot_data)?.sigma;
    let sig_l = spec.resolve(n, da, app_data)?.sigma;
    let gram = |d: usize, data: &[f64], sigma: f64| -> Vec<f64> {
        let mut k = vec![1.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let mut s = 0.0;
                for c in 0..d {
                    let diff = data[i * d + c] - data[j * d + c];
                    s += diff * diff;
                }
                let v = (-0.5 * s / (sigma * sigma)).exp();
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        k
    };
    let k = gram(dm, mot_data, sig_k);
    let l = gram(da, app_data, sig_l);

    // double centering: C = H M H
    let center = |m: &[f64]| -> Vec<f64> {
        let mut row_mean = vec![0.0; n];
        let mut total = 0.0;
        for i in 0..n {
            let s: f64 = m[i * n..(i + 1) * n].iter().sum();
            row_mean[i] = s / n as f64;
            total += s;
        }
        let grand = total / (n * n) as f64;
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                c[i * n + j] = m[i * n + j] - row_mean[i] - row_mean[j] + grand;
            }
        }
        c
    };
    let kc = center(&k);
    let lc = center(&l);
    let tr: f64 = kc.iter().zip(&lc).map(|(a, b)| a * b).sum();
    Ok(tr / ((n - 1) as f64 * (n - 1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn batch(g: &mut Graph<f64>, rows: usize, cols: usize, data: &[f64]) -> Val {
        g.leaf(Tensor::matrix(rows, cols, data.to_vec()).unwrap())
    }

    #[test]
    fn identical_samples_give_all_ones_gram() {
        let mut g = Graph::new();
        let b = batch(&mut g, 2, 3, &[0.4, -1.0, 2.0, 0.4, -1.0, 2.0]);
        let (k, resolved) = gram_matrix(&mut g, b, &KernelSpec::default()).unwrap();
        assert!(resolved.fell_back, "zero-variance batch must fall back");
        assert_eq!(resolved.sigma, 1.0);
        assert_eq!(g.value(k).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn infinite_bandwidth_flattens_kernel() {
        let mut g = Graph::new();
        let b = batch(&mut g, 3, 2, &[0.0, 0.0, 5.0, -3.0, 2.0, 8.0]);
        let (k, _) = gram_matrix(&mut g, b, &KernelSpec::fixed(1e12)).unwrap();
        for &v in g.value(k).data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hand_evaluated_rbf_entry() {
        let mut g = Graph::new();
        let b = batch(&mut g, 2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let (k, _) = gram_matrix(&mut g, b, &KernelSpec::fixed(1.0)).unwrap();
        let expected = (-0.5f64).exp(); // 0.606531
        assert!((g.value(k).get2(0, 1) - expected).abs() < 1e-9);
        assert!((expected - 0.606531).abs() < 1e-6);
        assert_eq!(g.value(k).get2(0, 0), 1.0, "diagonal must be exactly one");
        assert_eq!(g.value(k).get2(1, 1), 1.0);
    }

    #[test]
    fn constant_appearance_batch_gives_zero() {
        // n = 4 keeps 1/n exact so the centered constant kernel vanishes
        let mut g = Graph::new();
        let mot = batch(&mut g, 4, 2, &[0.1, 0.2, -0.5, 1.0, 2.0, -1.0, 0.7, 0.3]);
        let app = batch(&mut g, 4, 2, &[3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0]);
        let h = hsic_loss(&mut g, mot, app, &KernelSpec::default()).unwrap();
        assert_eq!(g.value(h).item(), 0.0);
    }

    #[test]
    fn two_sample_closed_form() {
        // k = exp(-|d|^2/2), pick distances so k = 0.5 and l = 0.2
        let dk = (2.0f64 * (2.0f64).ln()).sqrt(); // => k = 0.5
        let dl = (2.0f64 * (5.0f64).ln()).sqrt(); // => l = 0.2
        let mut g = Graph::new();
        let mot = batch(&mut g, 2, 1, &[0.0, dk]);
        let app = batch(&mut g, 2, 1, &[0.0, dl]);
        let h = hsic_loss(&mut g, mot, app, &KernelSpec::fixed(1.0)).unwrap();
        // closed form for n = 2: (1 - k)(1 - l)
        assert!((g.value(h).item() - 0.4).abs() < 1e-9, "got {}", g.value(h).item());
    }

    #[test]
    fn self_dependence_is_positive() {
        let mut rng = Rng::new(17);
        let data: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let mut g = Graph::new();
        let a = batch(&mut g, 4, 3, &data);
        let b = batch(&mut g, 4, 3, &data);
        let h = hsic_loss(&mut g, a, b, &KernelSpec::default()).unwrap();
        assert!(g.value(h).item() > 0.0);
    }

    #[test]
    fn sample_count_mismatch_is_shape_error() {
        let mut g = Graph::new();
        let a = batch(&mut g, 2, 2, &[0.0, 1.0, 2.0, 3.0]);
        let b = batch(&mut g, 3, 2, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(matches!(
            hsic_loss(&mut g, a, b, &KernelSpec::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn graph_and_plain_paths_agree() {
        let mut rng = Rng::new(23);
        let mot: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let app: Vec<f64> = (0..15).map(|_| rng.normal()).collect();
        let spec = KernelSpec::default();
        let mut g = Graph::new();
        let a = batch(&mut g, 5, 4, &mot);
        let b = batch(&mut g, 5, 3, &app);
        let via_graph = {
            let h = hsic_loss(&mut g, a, b, &spec).unwrap();
            g.value(h).item()
        };
        let via_plain = hsic_plain((5, 4, &mot), (5, 3, &app), &spec).unwrap();
        assert!((via_graph - via_plain).abs() < 1e-10);
    }

    #[test]
    fn symmetry_and_nonnegativity_on_random_batches() {
        let mut rng = Rng::new(31);
        for trial in 0..20 {
            let n = 3 + (trial % 5);
            let mot: Vec<f64> = (0..n * 4).map(|_| rng.normal()).collect();
            let app: Vec<f64> = (0..n * 2).map(|_| rng.normal()).collect();
            let spec = KernelSpec::default();
            let ab = hsic_plain((n, 4, &mot), (n, 2, &app), &spec).unwrap();
            let ba = hsic_plain((n, 2, &app), (n, 4, &mot), &spec).unwrap();
            assert!((ab - ba).abs() < 1e-6, "trial {trial}: {ab} vs {ba}");
            assert!(ab >= -1e-9, "trial {trial}: negative hsic {ab}");
        }
    }

    #[test]
    fn permutation_covariance() {
        let mut rng = Rng::new(37);
        let n = 6;
        let mot: Vec<f64> = (0..n * 3).map(|_| rng.normal()).collect();
        let app: Vec<f64> = (0..n * 2).map(|_| rng.normal()).collect();
        let spec = KernelSpec::default();
        let base = hsic_plain((n, 3, &mot), (n, 2, &app), &spec).unwrap();

        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let permute = |d: usize, data: &[f64]| -> Vec<f64> {
            order.iter().flat_map(|&i| data[i * d..(i + 1) * d].to_vec()).collect()
        };
        let pm = permute(3, &mot);
        let pa = permute(2, &app);
        let permuted = hsic_plain((n, 3, &pm), (n, 2, &pa), &spec).unwrap();
        assert!((base - permuted).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences_with_fixed_bandwidth() {
        use crate::tensor::check::assert_gradients;
        let mut rng = Rng::new(41);
        let mot: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let app: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let spec = KernelSpec::fixed(1.3);
        assert_gradients(
            &[
                Tensor::matrix(4, 2, mot).unwrap(),
                Tensor::matrix(4, 2, app).unwrap(),
            ],
            |g, vars| hsic_loss(g, vars[0], vars[1], &spec),
        );
    }
}

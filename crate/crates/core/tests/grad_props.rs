//! Finite-difference checks for every differentiable primitive and for
//! randomly composed graphs, all in f64.

use phymotion::error::Result;
use phymotion::rng::Rng;
use phymotion::tensor::check::assert_gradients;
use phymotion::tensor::{Graph, Tensor, Val};

fn rand_t(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

#[test]
fn primitive_add_sub_mul_scale() {
    let mut rng = Rng::new(1);
    let a = rand_t(&mut rng, 3, 4);
    let b = rand_t(&mut rng, 3, 4);
    assert_gradients(&[a, b], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let m = g.mul(d, v[0])?;
        let k = g.scale(m, -1.7);
        Ok(g.sum_all(k))
    });
}

#[test]
fn primitive_matmul_transpose() {
    let mut rng = Rng::new(2);
    let a = rand_t(&mut rng, 3, 5);
    let b = rand_t(&mut rng, 5, 2);
    assert_gradients(&[a, b], |g, v| {
        let p = g.matmul(v[0], v[1])?;
        let t = g.transpose(p)?;
        let q = g.matmul(t, v[0])?;
        Ok(g.sum_all(q))
    });
}

#[test]
fn primitive_tanh_exp_gelu() {
    let mut rng = Rng::new(3);
    let a = rand_t(&mut rng, 2, 6);
    assert_gradients(&[a], |g, v| {
        let t = g.tanh(v[0]);
        let half = g.scale(t, 0.5);
        let e = g.exp(half);
        let u = g.gelu(e);
        Ok(g.sum_all(u))
    });
}

#[test]
fn primitive_layer_norm() {
    let mut rng = Rng::new(4);
    let x = rand_t(&mut rng, 4, 6);
    let gamma = rand_t(&mut rng, 1, 6);
    let beta = rand_t(&mut rng, 1, 6);
    assert_gradients(&[x, gamma, beta], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        let sq = g.mul(y, y)?;
        Ok(g.sum_all(sq))
    });
}

#[test]
fn primitive_softmax_rows() {
    let mut rng = Rng::new(5);
    let x = rand_t(&mut rng, 3, 5);
    let w = rand_t(&mut rng, 3, 5);
    assert_gradients(&[x, w], |g, v| {
        let s = g.softmax_rows(v[0]);
        let p = g.mul(s, v[1])?;
        Ok(g.sum_all(p))
    });
}

#[test]
fn primitive_reductions() {
    let mut rng = Rng::new(6);
    let x = rand_t(&mut rng, 4, 3);
    assert_gradients(&[x.clone()], |g, v| {
        let rs = g.row_sum(v[0]); // [4, 1]
        let mr = g.mean_rows(v[0]); // [1, 3]
        let outer = g.matmul(rs, mr)?; // [4, 3]
        let p = g.mul(outer, v[0])?;
        Ok(g.sum_all(p))
    });
    let y = rand_t(&mut rng, 4, 3);
    assert_gradients(&[x, y], |g, v| g.mse(v[0], v[1]));
}

#[test]
fn primitive_cross_entropy() {
    let mut rng = Rng::new(7);
    let logits = rand_t(&mut rng, 4, 5);
    assert_gradients(&[logits], |g, v| g.cross_entropy(v[0], &[0, 3, 2, 4]));
}

#[test]
fn primitive_broadcast_adds() {
    let mut rng = Rng::new(8);
    let m = rand_t(&mut rng, 4, 3);
    let r = rand_t(&mut rng, 1, 3);
    let c = rand_t(&mut rng, 4, 1);
    assert_gradients(&[m, r, c], |g, v| {
        let a = g.add_row_vec(v[0], v[1])?;
        let b = g.add_col_vec(a, v[2])?;
        let s = g.mul(b, b)?;
        Ok(g.sum_all(s))
    });
}

#[test]
fn primitive_concat_slice() {
    let mut rng = Rng::new(9);
    let a = rand_t(&mut rng, 2, 3);
    let b = rand_t(&mut rng, 3, 3);
    assert_gradients(&[a, b], |g, v| {
        let cat = g.concat_rows(&[v[0], v[1]])?;
        let top = g.slice_rows(cat, 1, 4)?;
        let left = g.slice_cols(top, 0, 2)?;
        let right = g.slice_cols(top, 1, 3)?;
        let cc = g.concat_cols(&[left, right])?;
        let sq = g.mul(cc, cc)?;
        Ok(g.sum_all(sq))
    });
}

#[test]
fn primitive_pairwise_sqdist() {
    let mut rng = Rng::new(10);
    let x = rand_t(&mut rng, 5, 3);
    let w = rand_t(&mut rng, 5, 5);
    assert_gradients(&[x, w], |g, v| {
        let d = g.pairwise_sqdist(v[0])?;
        let scaled = g.scale(d, -0.3);
        let e = g.exp(scaled);
        let p = g.mul(e, v[1])?;
        Ok(g.sum_all(p))
    });
}

/// Randomly composed graphs up to depth 8 over a pool of primitives.
#[test]
fn random_composed_graphs_to_depth_eight() {
    for seed in 0..12u64 {
        let mut rng = Rng::from_parts(seed, 0, 31);
        let rows = 2 + rng.below(3);
        let cols = 2 + rng.below(3);
        let a = rand_t(&mut rng, rows, cols);
        let b = rand_t(&mut rng, rows, cols);
        let ops: Vec<u64> = (0..8).map(|_| rng.next_u64() % 7).collect();
        let build = move |g: &mut Graph<f64>, v: &[Val]| -> Result<Val> {
            let mut cur = v[0];
            let other = v[1];
            for &op in &ops {
                cur = match op {
                    0 => g.add(cur, other)?,
                    1 => g.mul(cur, other)?,
                    2 => g.tanh(cur),
                    3 => {
                        let k = g.scale(cur, 0.7);
                        g.gelu(k)
                    }
                    4 => {
                        let t = g.transpose(cur)?;
                        g.transpose(t)?
                    }
                    5 => g.sub(cur, other)?,
                    _ => g.scale(cur, -0.9),
                };
            }
            let sq = g.mul(cur, cur)?;
            Ok(g.sum_all(sq))
        };
        assert_gradients(&[a, b], build);
    }
}

/// Two backward sweeps accumulate exactly twice the gradient into
/// parameter buffers.
#[test]
fn double_backward_doubles_param_grads() {
    use phymotion::nn::ParamSet;
    let mut ps = ParamSet::<f64>::new();
    let mut rng = Rng::new(11);
    let w = ps.add("w", rand_t(&mut rng, 2, 2)).unwrap();
    let x = rand_t(&mut rng, 2, 2);

    let mut g = Graph::new();
    let wv = ps.bind(&mut g, w);
    let xv = g.leaf(x);
    let p = g.matmul(wv, xv).unwrap();
    let loss = g.sum_all(p);
    ps.backward(&mut g, loss).unwrap();
    let once: Vec<f64> = ps.grad(w).data().to_vec();
    ps.backward(&mut g, loss).unwrap();
    for (a, b) in once.iter().zip(ps.grad(w).data()) {
        assert_eq!(*b, 2.0 * *a);
    }
}

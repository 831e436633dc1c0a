//! Graph operations and losses against independent loop implementations.

use car_core::analysis::{relation_from_features, similarity_matrix};
use car_core::centers::{centers_from_flat, distribute_centers, update_moving_centers, CenterValues};
use car_core::gradcheck::{central_difference, max_relative_error, Instance};
use car_core::metrics::ConfusionMatrix;
use car_core::{
    cross_entropy_loss, inter_c2c_loss, inter_c2p_loss, intra_c2p_loss, poly_lr, Graph, LabelMask,
    ReduceKind, Replacement, Tensor, Var,
};
use rand::Rng;

mod common;
use common::*;

const EPS0: f64 = 0.5;
const EPS1: f64 = 0.25;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

// ---------- loss and center oracles ----------

const INSTANCES: u64 = 60;

struct Built {
    g: Graph<f64>,
    x: Var,
    centers: car_core::ClassCenters,
}

fn build(inst: &Instance) -> Built {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(vec![inst.hw(), inst.channels], inst.features.clone()).unwrap());
    let centers = centers_from_flat(&mut g, x, &inst.mask, inst.n_class, false).unwrap();
    Built { g, x, centers }
}

#[test]
fn center_extraction_matches_loop() {
    for seed in 0..INSTANCES {
        let inst = Instance::random(&mut rng(seed));
        let b = build(&inst);
        let (mu, counts) = centers_oracle(&inst.features, &labels_of(&inst.mask), inst.n_class, inst.channels);
        assert_eq!(b.centers.counts, counts);
        let got = b.g.value(b.centers.mu).data();
        for k in 0..inst.n_class {
            for j in 0..inst.channels {
                assert!((got[k * inst.channels + j] - mu[k][j]).abs() <= 1e-10, "seed {seed}");
            }
        }
    }
}

#[test]
fn intra_loss_matches_loop() {
    for seed in 0..INSTANCES {
        let inst = Instance::random(&mut rng(seed));
        let mut b = build(&inst);
        let labels = labels_of(&inst.mask);
        let (mu, _) = centers_oracle(&inst.features, &labels, inst.n_class, inst.channels);
        let l = intra_c2p_loss(&mut b.g, b.x, &inst.mask, &b.centers).unwrap();
        let want = intra_oracle(&inst.features, &labels, &mu, inst.channels);
        assert!((b.g.item(l) - want).abs() <= 1e-10, "seed {seed}");
    }
}

#[test]
fn c2c_loss_matches_loop() {
    for seed in 0..INSTANCES {
        let inst = Instance::random(&mut rng(seed));
        let mut b = build(&inst);
        let (mu, counts) = centers_oracle(&inst.features, &labels_of(&inst.mask), inst.n_class, inst.channels);
        let l = inter_c2c_loss(&mut b.g, &b.centers, EPS0).unwrap();
        assert!((b.g.item(l) - c2c_oracle(&mu, &counts, EPS0)).abs() <= 1e-10, "seed {seed}");
    }
}

#[test]
fn c2p_loss_matches_loop_in_both_modes() {
    for seed in 0..INSTANCES {
        let inst = Instance::random(&mut rng(seed));
        let labels = labels_of(&inst.mask);
        let (mu, counts) = centers_oracle(&inst.features, &labels, inst.n_class, inst.channels);
        for (mode, literal) in [(Replacement::Masked, false), (Replacement::Literal, true)] {
            let mut b = build(&inst);
            let l = inter_c2p_loss(&mut b.g, b.x, &inst.mask, &b.centers, EPS1, mode).unwrap();
            let want = c2p_oracle(&inst.features, &labels, &mu, &counts, EPS1, literal);
            assert!((b.g.item(l) - want).abs() <= 1e-10, "seed {seed} {mode}");
        }
    }
}

#[test]
fn cross_entropy_matches_loop() {
    for seed in 0..INSTANCES {
        let inst = Instance::random(&mut rng(seed));
        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::new(vec![inst.hw(), inst.n_class], inst.logits.clone()).unwrap());
        let l = cross_entropy_loss(&mut g, z, &inst.mask).unwrap();
        let want = ce_oracle(&inst.logits, &labels_of(&inst.mask), inst.n_class);
        assert!((g.item(l) - want).abs() <= 1e-10, "seed {seed}");
    }
}

#[test]
fn distribution_equals_one_hot_product() {
    for seed in 0..20 {
        let inst = Instance::random(&mut rng(seed));
        let mut b = build(&inst);
        let placed = distribute_centers(&mut b.g, &b.centers, &inst.mask).unwrap();
        let mu = b.g.value(b.centers.mu).data().to_vec();
        let c = inst.channels;
        let got = b.g.value(placed).data();
        for i in 0..inst.hw() {
            for j in 0..c {
                let want = match inst.mask.class_at(i) {
                    Some(k) => mu[k * c + j],
                    None => 0.0,
                };
                assert_eq!(got[i * c + j], want);
            }
        }
    }
}

#[test]
fn moving_average_follows_closed_form() {
    let (n, c, d) = (3, 4, 0.7);
    let mut r = rng(5);
    let fresh: Vec<Vec<f64>> = (0..6).map(|_| normal(&mut r, n * c)).collect();
    let mut state = CenterValues::<f64>::empty(n, c);
    for f in &fresh {
        let f = CenterValues {
            mu: Tensor::new(vec![n, c], f.clone()).unwrap(),
            counts: vec![2; n],
        };
        state = update_moving_centers(&state, &f, d).unwrap();
    }
    // m_T = d^(T-1) f_1 + (1 - d) Σ_{s=2..T} d^(T-s) f_s
    let t = fresh.len();
    for e in 0..n * c {
        let mut want = d.powi(t as i32 - 1) * fresh[0][e];
        for s in 1..t {
            want += (1.0 - d) * d.powi((t - 1 - s) as i32) * fresh[s][e];
        }
        assert!((state.mu.data()[e] - want).abs() <= 1e-12);
    }
    assert_eq!(state.counts, vec![12; n]);
}

// ---------- primitive ops ----------

#[test]
fn matmul_matches_triple_loop() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let (m, k, n) = (r.random_range(1..7), r.random_range(1..7), r.random_range(1..7));
        let a = normal(&mut r, m * k);
        let b = normal(&mut r, k * n);
        let mut g = Graph::<f64>::new();
        let va = g.constant(Tensor::new(vec![m, k], a.clone()).unwrap());
        let vb = g.constant(Tensor::new(vec![k, n], b.clone()).unwrap());
        let p = g.matmul(va, vb).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a[i * k + t] * b[t * n + j];
                }
                assert!((g.value(p).data()[i * n + j] - s).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn conv_forward_matches_direct_loops() {
    for seed in 0..60 {
        let mut r = rng(200 + seed);
        let k = if r.random_bool(0.5) { 3 } else { 1 };
        let dims = (
            r.random_range(1..3),
            r.random_range(1..=5),
            r.random_range(1..=5),
            r.random_range(1..4),
            r.random_range(1..4),
            k,
        );
        let (bn, h, wd, ci, co, _) = dims;
        let x = normal(&mut r, bn * h * wd * ci);
        let w = normal(&mut r, k * k * ci * co);
        let bias = normal(&mut r, co);
        let mut g = Graph::<f64>::new();
        let vx = g.constant(Tensor::new(vec![bn, h, wd, ci], x.clone()).unwrap());
        let vw = g.constant(Tensor::new(vec![k, k, ci, co], w.clone()).unwrap());
        let vb = g.constant(Tensor::new(vec![co], bias.clone()).unwrap());
        let y = g.conv2d(vx, vw, vb).unwrap();
        let want = conv_oracle(&x, &w, &bias, dims);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-10, "seed {seed}");
        }
    }
}

#[test]
fn reductions_match_loops() {
    let mut r = rng(7);
    let (a, b, c) = (3, 4, 5);
    let x = normal(&mut r, a * b * c);
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::new(vec![a, b, c], x.clone()).unwrap());
    let s1 = g.reduce(v, ReduceKind::Sum, Some(1)).unwrap();
    let m2 = g.reduce(v, ReduceKind::Mean, Some(2)).unwrap();
    assert_eq!(g.shape(s1), &[a, c]);
    for i in 0..a {
        for k in 0..c {
            let want: f64 = (0..b).map(|j| x[(i * b + j) * c + k]).sum();
            assert!((g.value(s1).data()[i * c + k] - want).abs() <= 1e-12);
        }
        for j in 0..b {
            let want: f64 = (0..c).map(|k| x[(i * b + j) * c + k]).sum::<f64>() / c as f64;
            assert!((g.value(m2).data()[i * b + j] - want).abs() <= 1e-12);
        }
    }
    let total = g.sum(v);
    assert!((g.item(total) - x.iter().sum::<f64>()).abs() <= 1e-12);
}

/// Check d(sum(w ⊙ op(x)))/dx against central differences.
fn check_unary(seed: u64, shape: &[usize], op: impl Fn(&mut Graph<f64>, Var) -> Var) {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let x0 = normal(&mut r, n);
    let weights = normal(&mut r, n);
    let out_len = {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(shape.to_vec(), x0.clone()).unwrap());
        let y = op(&mut g, x);
        g.value(y).len()
    };
    let wts = weights.iter().cycle().take(out_len).cloned().collect::<Vec<_>>();
    let eval = |xs: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(shape.to_vec(), xs.to_vec()).unwrap());
        let y = op(&mut g, x);
        let w = g.constant(Tensor::new(g.shape(y).to_vec(), wts.clone()).unwrap());
        let p = g.mul(y, w).unwrap();
        let l = g.sum(p);
        let v = g.item(l);
        if want_grad {
            g.backward(l).unwrap();
            (v, g.grad(x).unwrap().to_vec())
        } else {
            (v, vec![])
        }
    };
    let (_, analytic) = eval(&x0, true);
    let numeric = central_difference(|xs| eval(xs, false).0, &x0, 1e-5);
    let err = max_relative_error(&analytic, &numeric);
    assert!(err <= 1e-6, "seed {seed}: relative error {err}");
}

#[test]
fn softmax_gradients_match_finite_differences() {
    for seed in 0..20 {
        check_unary(seed, &[3, 4], |g, x| g.softmax(x, 1).unwrap());
        check_unary(seed, &[3, 4], |g, x| g.softmax(x, 0).unwrap());
        check_unary(seed, &[2, 5], |g, x| g.log_softmax(x, 1).unwrap());
    }
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    for seed in 0..20 {
        let other = {
            let mut r = rng(seed + 1000);
            Tensor::new(vec![3, 4], normal(&mut r, 12)).unwrap()
        };
        let row = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        check_unary(seed, &[3, 4], |g, x| {
            let o = g.constant(other.clone());
            g.add(x, o).unwrap()
        });
        check_unary(seed, &[3, 4], |g, x| {
            let o = g.constant(other.clone());
            g.sub(o, x).unwrap()
        });
        check_unary(seed, &[3, 4], |g, x| g.mul(x, x).unwrap());
        check_unary(seed, &[3, 4], |g, x| {
            let o = g.constant(row.clone());
            g.mul(x, o).unwrap()
        });
        check_unary(seed, &[3, 4], |g, x| g.square(x));
        check_unary(seed, &[3, 4], |g, x| g.scale(x, -2.5));
        // kinks are measure-zero for Gaussian inputs and the step is 1e-5
        check_unary(seed, &[3, 4], |g, x| g.abs(x));
        check_unary(seed, &[3, 4], |g, x| g.relu(x));
        check_unary(seed, &[3, 4], |g, x| g.relu_max(x, 0.2));
        check_unary(seed, &[4], |g, x| g.broadcast_to(x, &[3, 4]).unwrap());
        check_unary(seed, &[3, 4], |g, x| g.transpose(x).unwrap());
        check_unary(seed, &[3, 4], |g, x| g.sum_axis(x, 0).unwrap());
        check_unary(seed, &[3, 4], |g, x| g.mean(x).unwrap());
        check_unary(seed, &[3, 4], |g, x| {
            let o = g.constant(other.clone());
            let t = g.transpose(o).unwrap();
            g.matmul(x, t).unwrap()
        });
        check_unary(seed, &[4, 3], |g, x| g.select_rows(x, &[2, 0, 2]).unwrap());
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    for seed in 0..5 {
        check_unary(seed, &[1, 4, 3, 2], |g, x| {
            let mut r = rng(seed + 50);
            let w = g.constant(Tensor::new(vec![3, 3, 2, 3], normal(&mut r, 54)).unwrap());
            let b = g.constant(Tensor::new(vec![3], normal(&mut r, 3)).unwrap());
            g.conv2d(x, w, b).unwrap()
        });
        check_unary(seed, &[3, 3, 2, 3], |g, w| {
            let mut r = rng(seed + 60);
            let x = g.constant(Tensor::new(vec![2, 4, 3, 2], normal(&mut r, 48)).unwrap());
            let b = g.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
            g.conv2d(x, w, b).unwrap()
        });
    }
}

// ---------- metrics and analysis ----------

#[test]
fn miou_matches_loop_confusion() {
    for seed in 0..60 {
        let mut r = rng(300 + seed);
        let n = r.random_range(2..6);
        let len = r.random_range(1..50);
        let labels: Vec<u8> = (0..len)
            .map(|_| if r.random_bool(0.1) { 255 } else { r.random_range(0..n) as u8 })
            .collect();
        let pred: Vec<u8> = (0..len).map(|_| r.random_range(0..n) as u8).collect();
        let mask = LabelMask::new(1, len, labels.clone()).unwrap();
        let mut cm = ConfusionMatrix::new(n);
        cm.add(&pred, &mask).unwrap();

        let mut ious = Vec::new();
        for k in 0..n as u8 {
            let (mut tp, mut fp, mut fnn, mut gt) = (0, 0, 0, 0);
            for i in 0..len {
                if labels[i] == 255 {
                    continue;
                }
                gt += (labels[i] == k) as u32;
                tp += (labels[i] == k && pred[i] == k) as u32;
                fp += (labels[i] != k && pred[i] == k) as u32;
                fnn += (labels[i] == k && pred[i] != k) as u32;
            }
            if gt > 0 {
                ious.push(tp as f64 / (tp + fp + fnn) as f64);
            }
        }
        let want = if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        };
        assert_eq!(cm.miou(), want, "seed {seed}");
    }
}

#[test]
fn dependency_similarity_matches_loop_cosine() {
    for seed in 0..20 {
        let mut r = rng(400 + seed);
        let (n, c) = (r.random_range(2..6), r.random_range(1..8));
        let mu = normal(&mut r, n * c);
        let present = vec![true; n];
        let cos = similarity_matrix(&mu, c, &present, true);
        let raw = similarity_matrix(&mu, c, &present, false);
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (&mu[i * c..(i + 1) * c], &mu[j * c..(j + 1) * c]);
                let want = dot(a, b) / (dot(a, a) * dot(b, b)).sqrt();
                assert!((cos[i * n + j] - want).abs() <= 1e-10);
                assert!((raw[i * n + j] - dot(a, b)).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn relation_map_matches_loop() {
    for seed in 0..20 {
        let mut r = rng(500 + seed);
        let (h, w, c) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..5));
        let f = normal(&mut r, h * w * c);
        let anchor = (r.random_range(0..h), r.random_range(0..w));
        let got = relation_from_features(&f, h, w, anchor).unwrap();
        let a = &f[(anchor.0 * w + anchor.1) * c..(anchor.0 * w + anchor.1 + 1) * c];
        for p in 0..h * w {
            let b = &f[p * c..(p + 1) * c];
            let want = dot(a, b) / (dot(a, a) * dot(b, b)).sqrt();
            assert!((got[p] - want).abs() <= 1e-10);
        }
        let at = anchor.0 * w + anchor.1;
        assert!((got[at] - 1.0).abs() <= 1e-12);
        assert!(got.iter().all(|&v| v <= got[at] + 1e-12));
    }
}

#[test]
fn poly_schedule_values() {
    assert_eq!(poly_lr(0, 2000, 0.01, 0.9).unwrap(), 0.01);
    assert_eq!(poly_lr(2000, 2000, 0.01, 0.9).unwrap(), 0.0);
    assert!(close(poly_lr(1000, 2000, 0.01, 0.9).unwrap(), 0.01 * 0.5f64.powf(0.9), 1e-15));
    assert!(poly_lr(0, 0, 0.01, 0.9).is_err());
}

#[test]
fn parallel_and_sequential_kernels_agree_bitwise() {
    use car_core::kernels::{self, ConvGeom};
    let mut r = rng(77);
    let g = ConvGeom {
        batch: 3,
        height: 6,
        width: 5,
        c_in: 2,
        c_out: 3,
        kernel: 3,
    };
    let x = normal(&mut r, 3 * 6 * 5 * 2);
    let w = normal(&mut r, g.weight_len());
    let b = normal(&mut r, 3);
    let dout = normal(&mut r, 3 * 6 * 5 * 3);
    assert_eq!(kernels::conv2d_forward(g, &x, &w, &b), kernels::conv2d_forward_seq(g, &x, &w, &b));
    let (p, s) = (kernels::conv2d_backward(g, &x, &w, &dout), kernels::conv2d_backward_seq(g, &x, &w, &dout));
    assert_eq!((p.dx, p.dw, p.db), (s.dx, s.dw, s.db));
    let a = normal(&mut r, 7 * 5);
    let c = normal(&mut r, 5 * 4);
    assert_eq!(kernels::matmul(&a, &c, 7, 5, 4), kernels::matmul_seq(&a, &c, 7, 5, 4));
}

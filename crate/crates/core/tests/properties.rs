use car_core::centers::{centers_from_flat, CenterAccumulator};
use car_core::netpbm::Image8;
use car_core::synth::{self, SceneSpec, Split};
use car_core::{
    checkpoint, inter_c2c_loss, inter_c2p_loss, intra_c2p_loss, Graph, LabelMask, Model, ModelConfig,
    Replacement, Tensor, IGNORE_LABEL,
};
use proptest::prelude::*;

/// Labels over `n_class` classes with some ignored pixels, plus `[HW, C]` features.
fn instance() -> impl Strategy<Value = (usize, usize, Vec<u8>, Vec<f64>)> {
    (2usize..5, 1usize..5, 2usize..14).prop_flat_map(|(n, c, hw)| {
        let label = prop_oneof![
            8 => 0..n as u8,
            1 => Just(IGNORE_LABEL),
        ];
        (
            Just(n),
            Just(c),
            prop::collection::vec(label, hw),
            prop::collection::vec(-3.0f64..3.0, hw * c),
        )
    })
}

struct Losses {
    intra: f64,
    c2c: f64,
    c2p: f64,
}

fn losses(n: usize, c: usize, labels: &[u8], x: &[f64], eps0: f64, mode: Replacement) -> Option<Losses> {
    let mask = LabelMask::new(1, labels.len(), labels.to_vec()).unwrap();
    if mask.supervised_count() == 0 {
        return None;
    }
    let mut g = Graph::<f64>::new();
    let xv = g.constant(Tensor::new(vec![labels.len(), c], x.to_vec()).unwrap());
    let centers = centers_from_flat(&mut g, xv, &mask, n, false).unwrap();
    let intra = intra_c2p_loss(&mut g, xv, &mask, &centers).unwrap();
    let c2c = inter_c2c_loss(&mut g, &centers, eps0).unwrap();
    let c2p = inter_c2p_loss(&mut g, xv, &mask, &centers, 0.25, mode).unwrap();
    Some(Losses {
        intra: g.item(intra),
        c2c: g.item(c2c),
        c2p: g.item(c2p),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions_at_large_magnitude(
        rows in 1usize..5,
        vals in prop::collection::vec(-1e4f64..1e4, 4..=20),
    ) {
        let cols = vals.len() / rows.min(vals.len());
        let data = vals[..rows * cols].to_vec();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn centers_ignore_pixel_order((n, c, labels, x) in instance(), shift in 0usize..13) {
        let hw = labels.len();
        let mask = LabelMask::new(1, hw, labels.clone()).unwrap();
        prop_assume!(mask.supervised_count() > 0);
        let rot = |i: usize| (i + shift) % hw;
        let labels2: Vec<u8> = (0..hw).map(|i| labels[rot(i)]).collect();
        let x2: Vec<f64> = (0..hw).flat_map(|i| x[rot(i) * c..(rot(i) + 1) * c].to_vec()).collect();
        let mut a = CenterAccumulator::new(n, c);
        a.add(&x, &mask).unwrap();
        let mut b = CenterAccumulator::new(n, c);
        b.add(&x2, &LabelMask::new(1, hw, labels2).unwrap()).unwrap();
        let (a, b) = (a.finish::<f64>().unwrap(), b.finish::<f64>().unwrap());
        prop_assert_eq!(&a.counts, &b.counts);
        for (u, v) in a.mu.data().iter().zip(b.mu.data()) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn center_counts_cover_supervised_pixels((n, c, labels, x) in instance()) {
        let mask = LabelMask::new(1, labels.len(), labels.clone()).unwrap();
        prop_assume!(mask.supervised_count() > 0);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::new(vec![labels.len(), c], x).unwrap());
        let centers = centers_from_flat(&mut g, xv, &mask, n, true).unwrap();
        prop_assert_eq!(centers.counts.iter().sum::<usize>(), mask.supervised_count());
    }

    #[test]
    fn losses_are_non_negative_and_finite((n, c, labels, x) in instance(), literal in any::<bool>()) {
        let mode = if literal { Replacement::Literal } else { Replacement::Masked };
        if let Some(l) = losses(n, c, &labels, &x, 0.5, mode) {
            for v in [l.intra, l.c2c, l.c2p] {
                prop_assert!(v.is_finite() && v >= 0.0);
            }
        }
    }

    #[test]
    fn losses_ignore_class_naming((n, c, labels, x) in instance(), turn in 1usize..4) {
        // a cyclic relabelling permutes centers but changes no loss
        let relabel: Vec<u8> = labels
            .iter()
            .map(|&l| if l == IGNORE_LABEL { l } else { ((l as usize + turn) % n) as u8 })
            .collect();
        let (Some(a), Some(b)) = (
            losses(n, c, &labels, &x, 0.5, Replacement::Masked),
            losses(n, c, &relabel, &x, 0.5, Replacement::Masked),
        ) else {
            return Ok(());
        };
        prop_assert!((a.intra - b.intra).abs() <= 1e-12);
        prop_assert!((a.c2c - b.c2c).abs() <= 1e-12);
        prop_assert!((a.c2p - b.c2p).abs() <= 1e-12);
    }

    #[test]
    fn c2c_does_not_grow_with_the_margin((n, c, labels, x) in instance(), e in 0.0f64..1.0, de in 0.0f64..1.0) {
        let (Some(lo), Some(hi)) = (
            losses(n, c, &labels, &x, e, Replacement::Masked),
            losses(n, c, &labels, &x, e + de, Replacement::Masked),
        ) else {
            return Ok(());
        };
        prop_assert!(hi.c2c <= lo.c2c + 1e-15);
    }

    #[test]
    fn netpbm_round_trip(w in 1usize..9, h in 1usize..9, rgb in any::<bool>(), seed in any::<u64>()) {
        let ch = if rgb { 3 } else { 1 };
        let data: Vec<u8> = (0..w * h * ch).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
        let img = Image8::new(w, h, ch, data).unwrap();
        prop_assert_eq!(Image8::decode(&img.encode()).unwrap(), img);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthetic_masks_use_declared_ids(seed in any::<u64>(), split in 0usize..3) {
        let spec = SceneSpec::default_with(16, seed);
        let samples = synth::generate(&spec, 4, Split::ALL[split]).unwrap();
        for s in &samples {
            prop_assert!(s.mask.labels().iter().all(|&l| l == IGNORE_LABEL || (l as usize) < spec.n_class));
            prop_assert!(s.mask.supervised_count() > 0);
        }
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), head3 in any::<bool>()) {
        let m = Model::<f32>::build(ModelConfig {
            channels: vec![3, 5],
            head_kernel: if head3 { 3 } else { 1 },
            n_class: 3,
            feature_dim: 4,
            seed,
        }).unwrap();
        let back = checkpoint::decode(&checkpoint::encode(&m)).unwrap();
        prop_assert_eq!(back.params(), m.params());
    }
}

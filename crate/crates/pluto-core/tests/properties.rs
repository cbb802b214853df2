//! Property tests over randomized inputs: numeric kernel invariants,
//! container round-trips, and selection arithmetic.

use proptest::prelude::*;
use pluto_core::engine::top_m_select;
use pluto_core::pet::{
    deserialize, quantize_f32, serialize, Container, ContainerKind,
};
use pluto_core::selector::{attention_weights, weighted_pseudo_label};
use pluto_core::synth::{corrupt, Corruption, DomainSpec};
use pluto_core::tensor::{self, Tensor};

fn finite_vec(len: std::ops::Range<usize>, bound: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-bound..bound, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_simplex_and_shift_invariance(zs in finite_vec(1..12, 30.0), c in -10.0..10.0f64) {
        let z = Tensor::vector(zs);
        let p = tensor::softmax(&z).unwrap();
        prop_assert!(p.data().iter().all(|&v| v >= 0.0));
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        let shifted = tensor::softmax(&z.map(|v| v + c)).unwrap();
        for (a, b) in p.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_bounded_by_ln_k(zs in finite_vec(1..12, 20.0)) {
        let p = tensor::softmax(&Tensor::vector(zs)).unwrap();
        let h = tensor::shannon_entropy(&p).unwrap();
        prop_assert!(h >= -1e-15);
        prop_assert!(h <= (p.numel() as f64).ln() + 1e-12);
    }

    #[test]
    fn layer_norm_standardizes(xs in finite_vec(2..16, 50.0)) {
        // skip near-constant rows where variance underflows the epsilon
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        prop_assume!(var > 1e-6);
        let d = xs.len();
        let x = Tensor::vector(xs);
        let y = tensor::layer_norm(
            &x,
            &Tensor::full(&[d], 1.0),
            &Tensor::zeros(&[d]),
            1e-12,
        )
        .unwrap();
        let m = y.data().iter().sum::<f64>() / d as f64;
        let v = y.data().iter().map(|e| (e - m) * (e - m)).sum::<f64>() / d as f64;
        prop_assert!(m.abs() < 1e-9, "mean {m}");
        prop_assert!((v - 1.0).abs() < 1e-6, "variance {v}");
    }

    #[test]
    fn attention_weights_live_on_the_simplex(
        hx in finite_vec(3..4, 2.0),
        sources in prop::collection::vec(finite_vec(3..4, 2.0), 1..6),
    ) {
        let h_x = Tensor::vector(hx);
        let h_ls: Vec<Tensor> = sources.into_iter().map(Tensor::vector).collect();
        let w = attention_weights(&h_x, &h_ls).unwrap();
        prop_assert!((w.sum() - 1.0).abs() < 1e-12);
        prop_assert!(w.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn weighted_pseudo_label_is_exactly_convex(
        wz in finite_vec(2..5, 4.0),
        k in 2usize..6,
        seed in 0u64..1000,
    ) {
        let weights = tensor::softmax(&Tensor::vector(wz)).unwrap();
        let mut rng = pluto_core::rng::Rng::new(seed);
        let probs: Vec<Tensor> = (0..weights.numel())
            .map(|_| {
                tensor::softmax(&Tensor::from_fn(&[k], |_| rng.uniform(-3.0, 3.0))).unwrap()
            })
            .collect();
        let y = weighted_pseudo_label(&weights, &probs).unwrap();
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
        prop_assert!((y.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn top_m_selection_invariants(wz in finite_vec(1..8, 5.0), m_frac in 0.0..1.0f64) {
        let avg = tensor::softmax(&Tensor::vector(wz)).unwrap();
        let n = avg.numel();
        let m = 1 + ((n - 1) as f64 * m_frac) as usize;
        let (selected, rescaled) = top_m_select(avg.data(), m).unwrap();
        prop_assert_eq!(selected.len(), m);
        prop_assert!((rescaled.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // descending with index tie-break
        for pair in selected.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            prop_assert!(
                avg.data()[a] > avg.data()[b] || (avg.data()[a] == avg.data()[b] && a < b)
            );
        }
        // every unselected weight is <= every selected weight
        let min_selected = selected.iter().map(|&j| avg.data()[j]).fold(f64::INFINITY, f64::min);
        for j in 0..n {
            if !selected.contains(&j) {
                prop_assert!(avg.data()[j] <= min_selected + 1e-15);
            }
        }
    }

    #[test]
    fn container_roundtrip_quantizes_once(
        rows in 1usize..5,
        cols in 1usize..6,
        seed in 0u64..10_000,
    ) {
        let mut rng = pluto_core::rng::Rng::new(seed);
        let container = Container {
            id: format!("prop:{seed}"),
            domain_label: "prop".into(),
            kind: ContainerKind::Selector,
            hyper: serde_json::json!({"rows": rows, "cols": cols}),
            meta: serde_json::json!({}),
            tensors: vec![
                ("a".to_string(), Tensor::from_fn(&[rows, cols], |_| rng.uniform(-100.0, 100.0))),
                ("b".to_string(), Tensor::from_fn(&[cols], |_| rng.normal())),
            ],
            labels: None,
        };
        let bytes = serialize(&container);
        let once = deserialize(&bytes).unwrap();
        for ((_, orig), (_, got)) in container.tensors.iter().zip(&once.tensors) {
            prop_assert_eq!(&quantize_f32(orig), got);
        }
        // second trip is bit-identical
        let bytes2 = serialize(&once);
        let twice = deserialize(&bytes2).unwrap();
        prop_assert_eq!(&once, &twice);
    }

    #[test]
    fn severity_zero_is_identity_for_every_kind(
        seed in 0u64..1000,
        kind_idx in 0usize..8,
    ) {
        let mut rng = pluto_core::rng::Rng::new(seed);
        let img = Tensor::from_fn(&[16, 16, 1], |_| rng.next_f64());
        let spec = DomainSpec::new(Corruption::ALL[kind_idx], 0, seed);
        let out = corrupt(&img, &spec).unwrap();
        prop_assert_eq!(&out, &img);
    }
}

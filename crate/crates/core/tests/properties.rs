#![allow(clippy::needless_range_loop)]

use nnwm_core::optim::sgd_update;
use nnwm_core::*;
use proptest::prelude::*;

fn kind_of(i: usize) -> KeyKind {
    [KeyKind::Direct, KeyKind::Diff, KeyKind::Random][i % 3]
}

/// Rank by Gaussian elimination with partial pivoting.
fn rank(rows: &[Vec<f64>]) -> usize {
    let mut a: Vec<Vec<f64>> = rows.to_vec();
    let cols = a.first().map_or(0, Vec::len);
    let mut r = 0;
    for c in 0..cols {
        let Some(p) = (r..a.len()).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())) else {
            break;
        };
        if a[p][c].abs() < 1e-9 {
            continue;
        }
        a.swap(r, p);
        for i in r + 1..a.len() {
            let f = a[i][c] / a[r][c];
            for k in c..cols {
                a[i][k] -= f * a[r][k];
            }
        }
        r += 1;
    }
    r
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn keys_depend_only_on_their_arguments(kind in 0usize..3, seed in any::<u64>(), t in 1usize..40, m in 2usize..40) {
        let a = make_key(kind_of(kind), seed, t, m).unwrap();
        let b = make_key(kind_of(kind), seed, t, m).unwrap();
        prop_assert_eq!(a.matrix(), b.matrix());
        prop_assert_eq!((a.bits(), a.target_len()), (t, m));
    }

    #[test]
    fn random_keys_have_full_row_rank_below_capacity(seed in any::<u64>(), m in 1usize..24, frac in 0.0f64..=1.0) {
        let t = 1 + ((m - 1) as f64 * frac) as usize;
        let key = make_key(KeyKind::Random, seed, t, m).unwrap();
        let rows: Vec<Vec<f64>> = key.rows().map(<[f64]>::to_vec).collect();
        prop_assert_eq!(rank(&rows), t);
    }

    #[test]
    fn cross_entropy_is_nonnegative_and_ln_c_for_uniform_logits(
        classes in 2usize..8, batch in 1usize..5, seed in any::<u64>(), scale in 0.0f64..10.0,
    ) {
        let input = FeatureShape::Flat { features: 3 };
        let specs = vec![
            LayerSpec::Dense { inputs: 3, outputs: classes },
            LayerSpec::SoftmaxOutput,
        ];
        let model = HostModel::new(input, specs.clone(), seed).unwrap();
        let x = Tensor::from_vec(vec![batch, 3], (0..3 * batch).map(|i| scale * ((i % 7) as f64 - 3.0)).collect()).unwrap();
        let labels = Targets::Classes((0..batch).map(|i| i % classes).collect());
        prop_assert!(forward(&model, &x, &labels).unwrap().loss() >= 0.0);

        let zero = HostModel::from_parts(
            input,
            specs,
            vec![Params { weight: Tensor::zeros(&[3, classes]), bias: Tensor::zeros(&[classes]) }],
            None,
            seed,
        ).unwrap();
        let loss = forward(&zero, &x, &labels).unwrap().loss();
        prop_assert!((loss - (classes as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn plain_sgd_step_is_exactly_minus_lr_times_gradient(
        w in proptest::collection::vec(-10.0f64..10.0, 1..32), lr in 1e-4f64..1.0, seed in any::<u64>(),
    ) {
        let g: Vec<f64> = w.iter().enumerate().map(|(i, v)| v * 0.5 - (seed % 13) as f64 + i as f64).collect();
        let mut updated = w.clone();
        let mut velocity = vec![0.0; w.len()];
        for nesterov in [false, true] {
            updated.copy_from_slice(&w);
            sgd_update(&mut updated, &g, &mut velocity, lr, 0.0, 0.0, nesterov);
            for i in 0..w.len() {
                prop_assert_eq!(updated[i], w[i] - lr * g[i]);
            }
        }
    }

    #[test]
    fn pruning_zeroes_round_alpha_p_and_is_deterministic(
        seed in any::<u64>(), rate in 0.0f64..=1.0, order in 0usize..3,
    ) {
        let shape = FeatureShape::Image { height: 4, width: 4, channels: 2 };
        let model = build_host(HostPreset::SmallCnn, shape, 3, seed).unwrap();
        let layer = model.embed_layer().unwrap();
        let spec = PruneSpec { rate, order: PruneOrder::ALL[order], seed: seed ^ 1 };
        let before = model.clone();
        let a = prune_layer(&model, layer, &spec).unwrap();
        let b = prune_layer(&model, layer, &spec).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(&model, &before);
        let total = model.conv_weight(layer).unwrap().len();
        let zeros = a.conv_weight(layer).unwrap().data().iter().filter(|&&v| v == 0.0).count();
        prop_assert_eq!(zeros, (rate * total as f64).round() as usize);
        for id in model.conv_layers() {
            if id != layer {
                prop_assert_eq!(a.conv_weight(id).unwrap(), model.conv_weight(id).unwrap());
            }
        }
    }
}

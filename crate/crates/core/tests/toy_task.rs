use nlroi_core::toy::{
    constant_prediction_rate, forward_model, gen_scene, gen_scene_with_classes, labels_for, positive_label_rate,
    Head, TrainConfig,
};
use nlroi_core::{nlroi_forward, BlockDims, NlRoiParams, Tensor};
use proptest::prelude::*;

#[test]
fn label_rate_matches_enumeration() {
    let (n, c) = (6usize, 8usize);
    let mut positives = 0u64;
    let mut total = 0u64;
    let mut classes = vec![0usize; n];
    for code in 0..c.pow(n as u32) {
        let mut k = code;
        for slot in classes.iter_mut() {
            *slot = k % c;
            k /= c;
        }
        let labels = labels_for(&classes);
        positives += labels.iter().filter(|&&y| y).count() as u64;
        total += n as u64;
    }
    let exact = positives as f64 / total as f64;
    assert!((exact - positive_label_rate(n, c)).abs() < 1e-12);
    assert!((constant_prediction_rate(n, c) - (1.0 - exact).max(exact)).abs() < 1e-12);
}

#[test]
fn empirical_label_rate_is_close() {
    let config = TrainConfig::default();
    let scenes = 10_000u64;
    let mut positives = 0usize;
    for seed in 0..scenes {
        positives += gen_scene::<f32>(&config, seed).unwrap().labels.iter().filter(|&&y| y).count();
    }
    let rate = positives as f64 / (scenes as usize * config.rois) as f64;
    let expected = positive_label_rate(config.rois, config.classes);
    assert!((rate - expected).abs() < 0.02, "empirical {rate}, analytic {expected}");
}

#[test]
fn labels_depend_only_on_class_collisions() {
    assert_eq!(labels_for(&[0, 1, 2]), vec![false; 3]);
    assert_eq!(labels_for(&[3, 1, 3]), vec![true, false, true]);
    assert_eq!(labels_for(&[2, 2, 2, 2]), vec![true; 4]);
}

fn planted_config() -> TrainConfig {
    TrainConfig {
        rois: 4,
        classes: 4,
        d: 5,
        d_f: 4,
        d_g: 1,
        noise: 1e-6,
        ..TrainConfig::default()
    }
}

/// phi = psi pick out (scaled) class channels, g passes the nonce channel
/// through, so each RoI's summary is the mean nonce of its class group.
fn planted_params(config: &TrainConfig) -> NlRoiParams<f64> {
    let (d, c) = (config.d, config.classes);
    let select = Tensor::from_fn([c, d], |k| if k / d == k % d { 2.0 } else { 0.0 });
    let g1_w = Tensor::from_fn([1, d], |k| if k == config.nonce_channel() { 1.0 } else { 0.0 });
    let mut tap = vec![0.0; 9];
    tap[4] = 1.0;
    NlRoiParams::new(
        select.clone(),
        select,
        g1_w,
        Tensor::full([1], 2.0),
        Tensor::new([1, 1, 3, 3], tap).unwrap(),
        Tensor::full([1], -2.0),
    )
    .unwrap()
}

#[test]
fn planted_block_reads_other_rois() {
    let config = planted_config();
    let p = planted_params(&config);
    let apart = gen_scene_with_classes::<f64>(&config, &[0, 1, 2, 3], 5).unwrap();
    let together = gen_scene_with_classes::<f64>(&config, &[0, 0, 2, 3], 5).unwrap();
    assert_eq!(apart.nonces, together.nonces);
    let nonces = &apart.nonces;

    let summary = |scene: &nlroi_core::toy::Scene<f64>, i: usize| {
        nlroi_forward(&scene.features, &p).unwrap().pooled_nl.at(&[i, 0])
    };
    assert!((summary(&apart, 0) - nonces[0]).abs() < 1e-3);
    let mean = (nonces[0] + nonces[1]) / 2.0;
    assert!((summary(&together, 0) - mean).abs() < 1e-3);
    // RoIs whose class did not change are unaffected.
    assert!((summary(&apart, 2) - summary(&together, 2)).abs() < 1e-3);

    // Through a head that reads the appended channel, the logit for RoI 0
    // moves; the baseline head sees only RoI 0's own features, which did not
    // change.
    let width = BlockDims::new(config.d, config.d_f, config.d_g).unwrap().out_channels();
    let head = Head {
        hidden_w: Tensor::from_fn([1, width], |k| if k == config.d { 1.0 } else { 0.0 }),
        hidden_b: Tensor::full([1], 2.0),
        out_w: Tensor::full([1, 1], 1.0),
        out_b: Tensor::zeros([1]),
    };
    let nl_apart = forward_model(&apart, Some(&p), &head).unwrap();
    let nl_together = forward_model(&together, Some(&p), &head).unwrap();
    assert!((nonces[0] - nonces[1]).abs() > 0.1);
    assert!((nl_apart[0] - nl_together[0]).abs() > 0.04);

    let base_head = Head::<f64>::init(config.d, 8, 3);
    let b_apart = forward_model(&apart, None, &base_head).unwrap();
    let b_together = forward_model(&together, None, &base_head).unwrap();
    assert_eq!(b_apart[0], b_together[0]);
}

proptest! {
    #[test]
    fn permuting_rois_permutes_logits(seed in 0u64..1000, rotate in 1usize..6) {
        let config = TrainConfig::default();
        let scene = gen_scene::<f64>(&config, seed).unwrap();
        let model = nlroi_core::toy::Model::<f64>::init(&config, true).unwrap();
        let n = config.rois;
        let perm: Vec<usize> = (0..n).map(|i| (i + rotate) % n).collect();
        let mut moved = scene.clone();
        moved.features = scene.features.permute_rois(&perm).unwrap();
        let a = forward_model(&scene, model.block.as_ref(), &model.head).unwrap();
        let b = forward_model(&moved, model.block.as_ref(), &model.head).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            prop_assert!((b[i] - a[src]).abs() <= 1e-10 * a[src].abs().max(1.0));
        }
    }

    #[test]
    fn label_set_is_permutation_invariant(classes in prop::collection::vec(0usize..5, 2..8)) {
        let labels = labels_for(&classes);
        let mut rev = classes.clone();
        rev.reverse();
        let mut rev_labels = labels_for(&rev);
        rev_labels.reverse();
        prop_assert_eq!(labels, rev_labels);
    }
}

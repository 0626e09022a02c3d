mod common;

use common::*;
use tce_core::baselines::{LayerKind, LayerVariant};
use tce_core::networks::{Model, NetworkConfig};
use tce_core::params::{Forward, Mode};
use tce_core::tensor::Tensor;
use tce_core::Error;

/// `din·dout` weights plus `dout` biases.
fn linear(din: usize, dout: usize) -> usize {
    din * dout + dout
}

/// A linear map followed by batch norm with a scale and shift per channel.
fn dense(din: usize, dout: usize) -> usize {
    linear(din, dout) + 2 * dout
}

/// Key map on (f_i, f_j − f_i), six value maps and the 1×1 convolution.
fn tce_layer(cin: usize, c: usize) -> usize {
    dense(2 * cin, c) + 6 * linear(c, c) + dense(c, c)
}

#[test]
fn default_classifier_matches_closed_form_tally() {
    let classes = 4;
    let (e1, e2, g1, g2, embed, h1, h2) = (64, 64, 128, 256, 1024, 512, 256);
    let want = tce_layer(3, e1)
        + tce_layer(e1, e2)
        + dense(2 * e2, g1)
        + dense(2 * g1, g2)
        + dense(e2 + g1 + g2, embed)
        + dense(embed, h1)
        + dense(h1, h2)
        + linear(h2, classes);
    let model = Model::<f32>::new(NetworkConfig::classification(classes), 0).unwrap();
    assert_eq!(model.param_count(), want);
    assert_eq!(want, 1_271_044);
    assert!((500_000..=4_000_000).contains(&want));
}

#[test]
fn default_segmenter_matches_closed_form_tally() {
    let parts = 4;
    let want = tce_layer(3, 64)
        + tce_layer(64, 64)
        + dense(128, 128)
        + dense(256, 256)
        + dense(512, 256)
        + dense(256 + 64, 256)
        + dense(256, 128)
        + linear(128, parts);
    let model = Model::<f32>::new(NetworkConfig::segmentation(parts), 0).unwrap();
    assert_eq!(model.param_count(), want);
}

#[test]
fn variants_change_counts_but_not_shapes() {
    let mut r = rng(70);
    let coords = random(&[2 * 40, 3], &mut r).cast::<f32>();
    let mut counts = Vec::new();
    for kind in LayerKind::ALL {
        let mut cfg = NetworkConfig::classification(4);
        cfg.variant = LayerVariant::of(kind);
        let model = Model::<f32>::new(cfg, 1).unwrap();
        counts.push(model.param_count());
        assert_eq!(model.infer(&coords, 2).unwrap().shape(), [2, 4]);
    }
    counts.dedup();
    assert_eq!(counts.len(), LayerKind::ALL.len());
}

#[test]
fn classifier_logits_ignore_point_order() {
    let n = 64;
    let model = Model::<f32>::new(NetworkConfig::classification(4), 2).unwrap();
    let mut r = rng(71);
    let mut worst: f32 = 0.0;
    for _ in 0..100 {
        let coords = random(&[n, 3], &mut r).cast::<f32>();
        let perm = permutation(n, &mut r);
        let moved = Tensor::new(vec![n, 3], permute_rows(coords.data(), 3, &perm)).unwrap();
        let a = model.infer(&coords, 1).unwrap();
        let b = model.infer(&moved, 1).unwrap();
        assert_eq!(a.shape(), [1, 4]);
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    assert!(worst < 1e-5, "largest logit change {worst:e}");
}

#[test]
fn segmenter_logits_follow_point_order() {
    let n = 128;
    let base = NetworkConfig::segmentation(4);
    let model = Model::<f32>::new(base.clone(), 3).unwrap();
    let mut r = rng(72);
    for _ in 0..100 {
        let coords = random(&[n, 3], &mut r).cast::<f32>();
        let perm = permutation(n, &mut r);
        let moved = Tensor::new(vec![n, 3], permute_rows(coords.data(), 3, &perm)).unwrap();
        let a = model.infer(&coords, 1).unwrap();
        // Sampling starts from the same physical point in both orders.
        let mut shifted = model.clone();
        shifted.config.fps_start = perm[base.fps_start];
        let b = shifted.infer(&moved, 1).unwrap();
        assert_eq!(a.shape(), [n, 4]);
        assert_eq!(permute_rows(a.data(), 4, &perm), b.data());
    }
}

#[test]
fn batch_statistics_ignore_point_order() {
    let n = 48;
    let model = Model::<f64>::new(NetworkConfig::classification(4), 4).unwrap();
    let mut r = rng(73);
    for _ in 0..10 {
        let coords = random(&[2 * n, 3], &mut r);
        let perms = [permutation(n, &mut r), permutation(n, &mut r)];
        let mut moved = Vec::with_capacity(coords.len());
        for (b, p) in perms.iter().enumerate() {
            moved.extend(permute_rows(&coords.data()[b * n * 3..(b + 1) * n * 3], 3, p));
        }
        let run = |c: &Tensor<f64>| {
            let mut m = model.clone();
            m.config.dropout = 0.0;
            let mut fwd = Forward::new(&m.params, Mode::Train, false, 0);
            let y = m.forward(&mut fwd, c, 2).unwrap();
            fwd.tape.value(y).to_vec()
        };
        let (a, b) = (run(&coords), run(&Tensor::new(vec![2 * n, 3], moved).unwrap()));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }
}

#[test]
fn inputs_too_small_for_the_graph_are_rejected() {
    let model = Model::<f32>::new(NetworkConfig::classification(4), 0).unwrap();
    let coords = Tensor::<f32>::zeros(&[20, 3]);
    assert!(matches!(model.infer(&coords, 1), Err(Error::Input(_))));
    let mut cfg = NetworkConfig::segmentation(4);
    cfg.fps_ratio = 1.5;
    assert!(matches!(Model::<f32>::new(cfg, 0), Err(Error::Config(_))));
}

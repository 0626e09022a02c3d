mod common;

use common::*;
use tce_core::baselines::{
    channel_attention_forward, edgeconv_forward, point_attention_forward, point_attention_weights, tce_pool_variant,
    ChannelGateParams, EdgeConvParams, EncoderLayer, LayerKind, LayerVariant, PointAttentionParams,
};
use tce_core::neighborhood::batch_knn;
use tce_core::params::{Forward, Mode, ModelParams, ParamBuilder};
use tce_core::tce::QUERY_CHANNELS;
use tce_core::tensor::{Pool, Tape, Tensor};

const DQ: usize = QUERY_CHANNELS;

#[test]
fn edgeconv_on_equal_features_is_constant() {
    let mut r = rng(51);
    let coords = random(&[8, 3], &mut r);
    let graph = batch_knn(&coords, 1, 4).unwrap();
    let mut params = ModelParams::<f64>::new();
    let p = EdgeConvParams::build(&mut ParamBuilder::new(&mut params, 1), "gc", 64, 128).unwrap();
    let row: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
    let feats: Vec<f64> = (0..8).flat_map(|_| row.iter().copied()).collect();
    let mut fwd = Forward::new(&params, Mode::Eval, false, 0);
    let f = fwd.tape.constant(Tensor::from_f64(&[8, 64], &feats).unwrap()).unwrap();
    let y = edgeconv_forward(&mut fwd, f, &graph, &p).unwrap();
    assert_eq!(fwd.tape.shape(y), [8, 128]);
    let out = fwd.tape.value(y).data();
    for r in out.chunks(128) {
        assert_eq!(r, &out[..128]);
    }
}

fn gate_fixture() -> (ModelParams<f64>, ChannelGateParams, Tensor<f64>, tce_core::neighborhood::BatchNeighbors) {
    let mut r = rng(52);
    let feats = random(&[20, 6], &mut r);
    let graph = batch_knn(&feats, 2, 3).unwrap();
    let mut params = ModelParams::new();
    let p = ChannelGateParams::build(&mut ParamBuilder::new(&mut params, 2), "cw", 6, 5).unwrap();
    (params, p, feats, graph)
}

#[test]
fn all_ones_gate_reduces_to_edgeconv() {
    let (params, mut p, feats, graph) = gate_fixture();
    p.forced_gate = Some(vec![1.0; 6]);
    let mut fwd = Forward::new(&params, Mode::Train, false, 0);
    let f = fwd.tape.constant(feats).unwrap();
    let gated = channel_attention_forward(&mut fwd, f, &graph, &p).unwrap();
    let plain = edgeconv_forward(&mut fwd, f, &graph, &p.conv).unwrap();
    assert_eq!(fwd.tape.value(gated).data(), fwd.tape.value(plain).data());
}

#[test]
fn zero_gate_hides_its_channel() {
    let (params, mut p, feats, graph) = gate_fixture();
    let mut gate = vec![0.7; 6];
    gate[2] = 0.0;
    p.forced_gate = Some(gate);
    let mut other = feats.to_vec();
    other.iter_mut().skip(2).step_by(6).for_each(|v| *v = *v * -3.0 + 1.5);
    let run = |x: Vec<f64>| {
        let mut fwd = Forward::new(&params, Mode::Train, false, 0);
        let f = fwd.tape.constant(Tensor::new(vec![20, 6], x).unwrap()).unwrap();
        let y = channel_attention_forward(&mut fwd, f, &graph, &p).unwrap();
        fwd.tape.value(y).to_vec()
    };
    assert_eq!(run(feats.to_vec()), run(other));
}

#[test]
fn point_attention_weights_are_normalized() {
    let mut r = rng(53);
    let feats = random(&[16, 4], &mut r);
    let graph = batch_knn(&feats, 2, 5).unwrap();
    let mut params = ModelParams::<f64>::new();
    let p = PointAttentionParams::build(&mut ParamBuilder::new(&mut params, 3), "pw", 4, 6).unwrap();
    let mut fwd = Forward::new(&params, Mode::Train, false, 0);
    let f = fwd.tape.constant(feats).unwrap();
    let w = point_attention_weights(&mut fwd, f, &graph, &p).unwrap();
    assert_eq!(fwd.tape.shape(w), [16, 5]);
    for row in fwd.tape.value(w).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&a| a > 0.0));
    }
    let y = point_attention_forward(&mut fwd, f, &graph, &p).unwrap();
    assert_eq!(fwd.tape.shape(y), [16, 6]);
}

#[test]
fn identical_neighbors_get_uniform_weights() {
    let mut r = rng(54);
    let coords = random(&[10, 3], &mut r);
    let graph = batch_knn(&coords, 1, 4).unwrap();
    let mut params = ModelParams::<f64>::new();
    let p = PointAttentionParams::build(&mut ParamBuilder::new(&mut params, 4), "pw", 3, 6).unwrap();
    let mut fwd = Forward::new(&params, Mode::Train, false, 0);
    let f = fwd.tape.constant(Tensor::filled(&[10, 3], 0.3)).unwrap();
    let w = point_attention_weights(&mut fwd, f, &graph, &p).unwrap();
    assert!(fwd.tape.value(w).data().iter().all(|&a| (a - 0.25).abs() < 1e-15));
}

fn pooled(b: &Tensor<f64>, pool: Pool) -> Vec<f64> {
    let mut t = Tape::<f64>::new();
    let attn = t.constant(Tensor::filled(b.shape(), 1.0)).unwrap();
    let v = t.constant(b.clone()).unwrap();
    let y = tce_pool_variant(&mut t, attn, v, pool).unwrap();
    t.value(y).to_vec()
}

#[test]
fn pool_variants_on_constant_and_random_slices() {
    let c = 3;
    let constant = Tensor::new(vec![2, 1, DQ, c], (0..2 * DQ * c).map(|i| ((i / (DQ * c)) * c + i % c) as f64 - 2.5).collect()).unwrap();
    let (mx, mean, sum) = (pooled(&constant, Pool::Max), pooled(&constant, Pool::Mean), pooled(&constant, Pool::Sum));
    let slice: Vec<f64> = (0..2).flat_map(|e| (0..c).map(move |ch| (e * c + ch) as f64 - 2.5)).collect();
    assert_eq!(mx, slice);
    assert_eq!(mean, slice);
    assert_eq!(sum, slice.iter().map(|v| v * DQ as f64).collect::<Vec<_>>());

    let mut r = rng(55);
    let b = random(&[4, 2, DQ, c], &mut r);
    let (mx, mean, sum) = (pooled(&b, Pool::Max), pooled(&b, Pool::Mean), pooled(&b, Pool::Sum));
    for (m, s) in mean.iter().zip(&sum) {
        assert_eq!(*m, s / DQ as f64);
    }
    for e in 0..8 {
        for ch in 0..c {
            let col: Vec<f64> = (0..DQ).map(|p| b.data()[(e * DQ + p) * c + ch]).collect();
            let want_max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let want_sum: f64 = col.iter().sum();
            assert_eq!(mx[e * c + ch], want_max);
            assert!((sum[e * c + ch] - want_sum).abs() < 1e-12);
        }
    }
}

#[test]
fn every_variant_shares_the_layer_interface() {
    let mut r = rng(56);
    let coords = random(&[24, 3], &mut r).cast::<f32>();
    let graph = batch_knn(&coords, 3, 4).unwrap();
    for kind in LayerKind::ALL {
        let mut params = ModelParams::<f32>::new();
        let layer = EncoderLayer::build(&mut ParamBuilder::new(&mut params, 5), "l", LayerVariant::of(kind), 3, 9, 4).unwrap();
        assert_eq!(layer.kind(), kind);
        let mut fwd = Forward::new(&params, Mode::Train, false, 0);
        let x = fwd.tape.constant(coords.clone()).unwrap();
        let y = layer.forward(&mut fwd, x, x, &graph).unwrap();
        assert_eq!(fwd.tape.shape(y), [24, 9], "{kind:?}");
    }
}

#[test]
fn baselines_match_finite_differences() {
    for (i, kind) in [LayerKind::GraphConv, LayerKind::ChannelAttention, LayerKind::PointAttention].into_iter().enumerate() {
        for seed in 0..3u64 {
            let seed = 60 + 10 * i as u64 + seed;
            let mut r = rng(seed);
            let coords = random(&[16, 3], &mut r);
            let feats = random(&[16, 4], &mut r);
            let graph = batch_knn(&coords, 2, 3).unwrap();
            let mut params = ModelParams::new();
            let layer =
                EncoderLayer::build(&mut ParamBuilder::new(&mut params, seed), "l", LayerVariant::of(kind), 4, 6, 3).unwrap();
            let report = layer_grad_check(&layer, &params, &coords, &feats, &graph);
            assert!(report.passed(), "{kind:?} seed {seed}: {}", report.max_rel_error);
        }
    }
}

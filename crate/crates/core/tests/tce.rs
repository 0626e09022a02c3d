mod common;

use common::*;
use rand::Rng;
use tce_core::baselines::{EncoderLayer, LayerVariant};
use tce_core::neighborhood::{batch_knn, BatchNeighbors, NeighborIndex, SourceSpace};
use tce_core::params::{Forward, Mode, ModelParams, ParamBuilder};
use tce_core::tce::{
    build_key, build_query, build_value, channel_attention, channel_response_pool, tce_forward, tce_forward_unfused,
    TceConfig, TceParams, QUERY_CHANNELS,
};
use tce_core::tensor::{grad_check, Pool, Tape, Tensor};

const DQ: usize = QUERY_CHANNELS;

/// Attention columns from the definition: `a[p][c] = q[p]·key[c]`, then
/// `exp(a[p][c]) / Σ_p' exp(a[p'][c])`.
fn attention_oracle(q: &[f64], key: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; DQ * c];
    for ch in 0..c {
        let logits: Vec<f64> = (0..DQ).map(|p| q[p] * key[ch]).collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
        for p in 0..DQ {
            out[p * c + ch] = (logits[p] - top).exp() / z;
        }
    }
    out
}

fn attention_of<T: tce_core::tensor::Scalar>(q: &Tensor<T>, key: &Tensor<T>) -> Tensor<T> {
    let mut t = Tape::<T>::new();
    let (qv, kv) = (t.constant(q.clone()).unwrap(), t.constant(key.clone()).unwrap());
    let a = channel_attention(&mut t, qv, kv).unwrap();
    t.value(a).clone()
}

fn column_sums_ok<T: tce_core::tensor::Scalar>(attn: &Tensor<T>, c: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for grid in attn.data().chunks(DQ * c) {
        for ch in 0..c {
            let s: f64 = (0..DQ).map(|p| grid[p * c + ch].as_f64()).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    worst
}

#[test]
fn attention_columns_sum_to_one_on_1000_inputs() {
    let mut r = rng(21);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let (p, k, c) = (r.random_range(1..6usize), r.random_range(1..5usize), r.random_range(1..17usize));
        let scale = r.random_range(0.1..30.0);
        let q = uniform(&[p, k, DQ], -scale, scale, &mut r);
        let key = uniform(&[p, k, c], -scale, scale, &mut r);
        let e = if case % 2 == 0 {
            column_sums_ok(&attention_of(&q, &key), c)
        } else {
            column_sums_ok(&attention_of(&q.cast::<f32>(), &key.cast::<f32>()), c)
        };
        worst = worst.max(e);
    }
    assert!(worst < 1e-6, "worst column sum error {worst:e}");
}

#[test]
fn attention_matches_direct_formula() {
    let mut r = rng(22);
    let (p, k, c) = (3, 2, 5);
    let q = uniform(&[p, k, DQ], -2.0, 2.0, &mut r);
    let key = uniform(&[p, k, c], -2.0, 2.0, &mut r);
    let attn = attention_of(&q, &key);
    for e in 0..p * k {
        let want = attention_oracle(&q.data()[e * DQ..(e + 1) * DQ], &key.data()[e * c..(e + 1) * c], c);
        for (a, b) in attn.data()[e * DQ * c..(e + 1) * DQ * c].iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let ones = attention_of(&Tensor::<f64>::filled(&[1, 1, DQ], 1.0), &Tensor::filled(&[1, 1, 4], 1.0));
    assert!(ones.data().iter().all(|&v| (v - 1.0 / DQ as f64).abs() < 1e-15));
}

fn pool_oracle(attn: &[f64], value: &[f64], c: usize, pool: Pool) -> Vec<f64> {
    let edges = attn.len() / (DQ * c);
    let mut out = Vec::with_capacity(edges * c);
    for e in 0..edges {
        for ch in 0..c {
            let col: Vec<f64> = (0..DQ)
                .map(|p| {
                    let i = (e * DQ + p) * c + ch;
                    attn[i] * value[i]
                })
                .collect();
            out.push(match pool {
                Pool::Max => col.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                Pool::Mean => col.iter().sum::<f64>() / DQ as f64,
                Pool::Sum => col.iter().sum(),
            });
        }
    }
    out
}

#[test]
fn response_pooling_matches_loop_oracle() {
    let mut r = rng(23);
    let (p, k, c) = (4, 3, 6);
    let attn = uniform(&[p, k, DQ, c], 0.0, 1.0, &mut r);
    let value = random(&[p, k, DQ, c], &mut r);
    for pool in [Pool::Max, Pool::Mean, Pool::Sum] {
        let mut t = Tape::<f64>::new();
        let (a, v) = (t.constant(attn.clone()).unwrap(), t.constant(value.clone()).unwrap());
        let y = channel_response_pool(&mut t, a, v, pool).unwrap();
        assert_eq!(t.shape(y), [p, k, c]);
        let want = pool_oracle(attn.data(), value.data(), c, pool);
        for (x, w) in t.value(y).data().iter().zip(&want) {
            assert!((x - w).abs() < 1e-12, "{pool:?}");
        }
    }
}

#[test]
fn response_max_picks_column_maxima() {
    // Two query channels shown; the rest are zero responses below them.
    let mut b = vec![-1.0; DQ * 2];
    b[..4].copy_from_slice(&[1.0, 5.0, 3.0, 2.0]);
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::filled(&[1, 1, DQ, 2], 1.0)).unwrap();
    let v = t.constant(Tensor::from_f64(&[1, 1, DQ, 2], &b).unwrap()).unwrap();
    let y = channel_response_pool(&mut t, a, v, Pool::Max).unwrap();
    assert_eq!(t.value(y).data(), [3.0, 5.0]);
}

#[test]
fn max_response_gradient_reaches_only_the_argmax() {
    let mut r = rng(24);
    let c = 3;
    let attn = uniform(&[2, 1, DQ, c], 0.1, 1.0, &mut r);
    let value = random(&[2, 1, DQ, c], &mut r);
    let mut t = Tape::<f64>::new();
    let a = t.constant(attn.clone()).unwrap();
    let v = t.leaf(value.clone(), true).unwrap();
    let y = channel_response_pool(&mut t, a, v, Pool::Max).unwrap();
    let s = t.sum_all(y).unwrap();
    let g = t.backward(s).unwrap();
    let g = g.get(v).unwrap();
    for e in 0..2 {
        for ch in 0..c {
            let idx = |p: usize| (e * DQ + p) * c + ch;
            let best = (0..DQ)
                .max_by(|&x, &y| (attn.data()[idx(x)] * value.data()[idx(x)]).total_cmp(&(attn.data()[idx(y)] * value.data()[idx(y)])))
                .unwrap();
            for p in 0..DQ {
                let want = if p == best { attn.data()[idx(p)] } else { 0.0 };
                assert_eq!(g[idx(p)], want);
            }
        }
    }
    let report = grad_check(
        |t, vars| {
            let a = t.constant(attn.clone())?;
            let y = channel_response_pool(t, a, vars[0], Pool::Max)?;
            project(t, y, 3)
        },
        &[value],
        EPS,
        TOL,
    )
    .unwrap();
    assert!(report.passed(), "{}", report.max_rel_error);
}

fn pair_graph() -> BatchNeighbors {
    let idx = NeighborIndex::new(vec![1, 0], 2, 1, SourceSpace::Coordinate).unwrap();
    BatchNeighbors::from_indices(&[idx]).unwrap()
}

#[test]
fn query_concatenates_center_and_offset() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64(&[2, 3], &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap()).unwrap();
    let q = build_query(&mut t, x, &pair_graph()).unwrap();
    assert_eq!(t.shape(q), [2, 1, 6]);
    assert_eq!(&t.value(q).data()[..6], [0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
    assert_eq!(&t.value(q).data()[6..], [1.0, 2.0, 3.0, -1.0, -2.0, -3.0]);
}

#[test]
fn query_offsets_ignore_translation() {
    // Dyadic coordinates and shifts keep every sum exact.
    let mut r = rng(25);
    let grid: Vec<f64> = (0..30).map(|_| r.random_range(-64i32..=64) as f64 / 64.0).collect();
    let coords = Tensor::new(vec![10, 3], grid).unwrap();
    let graph = batch_knn(&coords, 1, 3).unwrap();
    let shift = [0.25, -4.0, 8.0];
    let moved = Tensor::new(
        vec![10, 3],
        coords.data().iter().enumerate().map(|(i, v)| v + shift[i % 3]).collect(),
    )
    .unwrap();
    let q_of = |c: &Tensor<f64>| {
        let mut t = Tape::new();
        let x = t.constant(c.clone()).unwrap();
        let q = build_query(&mut t, x, &graph).unwrap();
        t.value(q).to_vec()
    };
    let (a, b) = (q_of(&coords), q_of(&moved));
    for (ra, rb) in a.chunks(6).zip(b.chunks(6)) {
        for d in 0..3 {
            assert!((rb[d] - ra[d] - shift[d]).abs() < 1e-12);
        }
        assert_eq!(ra[3..], rb[3..]);
    }
}

fn layer_params(cin: usize, cout: usize, k: usize, pool: Pool, seed: u64) -> (ModelParams<f64>, TceParams) {
    let mut params = ModelParams::new();
    let config = TceConfig { pool, ..TceConfig::new(cin, cout, k) };
    let p = TceParams::build(&mut ParamBuilder::new(&mut params, seed), "tce", config).unwrap();
    (params, p)
}

#[test]
fn key_shape_and_constant_output() {
    let mut r = rng(26);
    let coords = random(&[8, 3], &mut r);
    let graph = batch_knn(&coords, 1, 4).unwrap();
    let (mut params, p) = layer_params(3, 64, 4, Pool::Max, 1);
    let mut fwd = Forward::new(&params, Mode::Train, false, 0);
    let x = fwd.tape.constant(coords.clone()).unwrap();
    let key = build_key(&mut fwd, x, &graph, &p).unwrap();
    assert_eq!(fwd.tape.shape(key), [8, 4, 64]);

    // Zero weights with a bias give one constant per channel.
    params.set(p.key.linear.w, Tensor::zeros(&[6, 64])).unwrap();
    let bias: Vec<f64> = (0..64).map(|i| i as f64 * 0.1 - 3.0).collect();
    params.set(p.key.linear.b.unwrap(), Tensor::from_f64(&[64], &bias).unwrap()).unwrap();
    let mut fwd = Forward::new(&params, Mode::Eval, false, 0);
    let x = fwd.tape.constant(coords).unwrap();
    let key = build_key(&mut fwd, x, &graph, &p).unwrap();
    let v = fwd.tape.value(key).data();
    for row in v.chunks(64) {
        assert_eq!(row, &v[..64]);
    }
}

#[test]
fn identity_value_maps_copy_the_key() {
    let mut r = rng(27);
    let c = 5;
    let (mut params, p) = layer_params(3, c, 2, Pool::Max, 2);
    let mut eye = vec![0.0; c * c];
    (0..c).for_each(|i| eye[i * c + i] = 1.0);
    for lin in &p.value {
        params.set(lin.w, Tensor::from_f64(&[c, c], &eye).unwrap()).unwrap();
        params.set(lin.b.unwrap(), Tensor::zeros(&[c])).unwrap();
    }
    let key = random(&[4, 2, c], &mut r);
    let mut fwd = Forward::new(&params, Mode::Eval, false, 0);
    let kv = fwd.tape.constant(key.clone()).unwrap();
    let v = build_value(&mut fwd, kv, &p).unwrap();
    assert_eq!(fwd.tape.shape(v), [4, 2, DQ, c]);
    let vals = fwd.tape.value(v).data().to_vec();
    for e in 0..8 {
        for q in 0..DQ {
            assert_eq!(vals[(e * DQ + q) * c..(e * DQ + q + 1) * c], key.data()[e * c..(e + 1) * c]);
        }
    }
    // Uniform attention over identical slices collapses to key / Dq.
    let attn = fwd.tape.constant(Tensor::filled(&[4, 2, DQ, c], 1.0 / DQ as f64)).unwrap();
    for pool in [Pool::Max, Pool::Mean] {
        let b = channel_response_pool(&mut fwd.tape, attn, v, pool).unwrap();
        for (x, k) in fwd.tape.value(b).data().iter().zip(key.data()) {
            assert!((x - k / DQ as f64).abs() < 1e-15);
        }
    }
}

#[test]
fn fused_layer_matches_unfused_route() {
    for (seed, pool) in [(31, Pool::Max), (32, Pool::Mean), (33, Pool::Sum)] {
        let mut r = rng(seed);
        let coords = random(&[20, 3], &mut r);
        let feats = random(&[20, 4], &mut r);
        let graph = batch_knn(&feats, 2, 3).unwrap();
        let (params, p) = layer_params(4, 7, 3, pool, seed);
        let run = |fused: bool| {
            let mut fwd = Forward::new(&params, Mode::Train, true, 0);
            let c = fwd.tape.constant(coords.clone()).unwrap();
            let f = fwd.tape.leaf(feats.clone(), true).unwrap();
            let y = if fused {
                tce_forward(&mut fwd, c, f, &graph, &p).unwrap()
            } else {
                tce_forward_unfused(&mut fwd, c, f, &graph, &p).unwrap()
            };
            let out = fwd.tape.value(y).to_vec();
            let loss = project(&mut fwd.tape, y, 5).unwrap();
            let mut g = fwd.tape.backward(loss).unwrap();
            let df = g.get(f).unwrap().to_vec();
            let mut pg = fwd.param_grads(&mut g);
            pg.sort_by_key(|(id, _)| id.index());
            (out, df, pg)
        };
        let (a, b) = (run(true), run(false));
        assert_eq!(a.0.len(), 20 * 7);
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-12, "{pool:?} output");
        }
        for (x, y) in a.1.iter().zip(&b.1) {
            assert!((x - y).abs() < 1e-10, "{pool:?} input gradient");
        }
        assert_eq!(a.2.len(), b.2.len());
        for ((ia, ga), (ib, gb)) in a.2.iter().zip(&b.2) {
            assert_eq!(ia, ib);
            for (x, y) in ga.iter().zip(gb) {
                assert!((x - y).abs() < 1e-10, "{pool:?} {} gradient", params.name(*ia));
            }
        }
    }
}

#[test]
fn layer_output_shape() {
    let mut r = rng(28);
    let coords = random(&[8, 3], &mut r).cast::<f32>();
    let graph = batch_knn(&coords, 1, 4).unwrap();
    let mut params = ModelParams::<f32>::new();
    let p = TceParams::build(&mut ParamBuilder::new(&mut params, 3), "tce", TceConfig::new(3, 64, 4)).unwrap();
    let mut fwd = Forward::new(&params, Mode::Eval, false, 0);
    let x = fwd.tape.constant(coords).unwrap();
    let y = tce_forward(&mut fwd, x, x, &graph, &p).unwrap();
    assert_eq!(fwd.tape.shape(y), [8, 64]);
}

#[test]
fn layer_is_permutation_equivariant() {
    let mut r = rng(29);
    let n = 32;
    let mut params = ModelParams::<f32>::new();
    let p = TceParams::build(&mut ParamBuilder::new(&mut params, 4), "tce", TceConfig::new(3, 16, 5)).unwrap();
    for _ in 0..10 {
        let coords = random(&[n, 3], &mut r).cast::<f32>();
        let perm = permutation(n, &mut r);
        let moved = Tensor::new(vec![n, 3], permute_rows(coords.data(), 3, &perm)).unwrap();
        let run = |c: &Tensor<f32>| {
            let graph = batch_knn(c, 1, 5).unwrap();
            let mut fwd = Forward::new(&params, Mode::Train, false, 0);
            let x = fwd.tape.constant(c.clone()).unwrap();
            let y = tce_forward(&mut fwd, x, x, &graph, &p).unwrap();
            fwd.tape.value(y).to_vec()
        };
        let (a, b) = (run(&coords), run(&moved));
        let a = permute_rows(&a, 16, &perm);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

#[test]
fn layer_gradients_match_finite_differences() {
    for (seed, pool) in [(41, Pool::Max), (42, Pool::Mean), (43, Pool::Sum)] {
        let mut r = rng(seed);
        let coords = random(&[8, 3], &mut r);
        let feats = random(&[8, 3], &mut r);
        let graph = batch_knn(&coords, 1, 3).unwrap();
        let mut params = ModelParams::new();
        let layer = EncoderLayer::build(&mut ParamBuilder::new(&mut params, seed), "tce", LayerVariant::tce(pool), 3, 8, 3)
            .unwrap();
        let report = layer_grad_check(&layer, &params, &coords, &feats, &graph);
        assert!(report.passed(), "{pool:?}: {}", report.max_rel_error);
    }
}

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tce_core::neighborhood::{fps, interpolate_3nn, interpolation_plan, knn_by_feature, gather_neighbors, INTERP_EPS};
use tce_core::tensor::{Tape, Tensor};
use tce_core::Error;

/// Plain left-to-right squared distance.
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sorts every other point by (distance, index) and keeps the first k.
fn knn_oracle(values: &[f64], width: usize, k: usize) -> Vec<Vec<usize>> {
    let n = values.len() / width;
    let row = |i: usize| &values[i * width..(i + 1) * width];
    (0..n)
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist2(row(i), row(j)), j)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Random instance: continuous features, or small integers that tie often.
fn instance(rng: &mut ChaCha8Rng, n: usize, width: usize, integer: bool) -> Vec<f64> {
    (0..n * width)
        .map(|_| {
            if integer {
                rng.random_range(-3i32..=3) as f64
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
        .collect()
}

#[test]
fn knn_matches_brute_force_on_200_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..200 {
        let n = rng.random_range(2..=512usize);
        let width = rng.random_range(1..=9usize);
        let k = rng.random_range(1..n.min(33));
        let integer = case % 2 == 1;
        let values = instance(&mut rng, n, width, integer);
        let idx = knn_by_feature(&Tensor::<f64>::from_f64(&[n, width], &values).unwrap(), k).unwrap();
        let want = knn_oracle(&values, width, k);
        for (i, w) in want.iter().enumerate() {
            assert_eq!(idx.row(i), w.as_slice(), "case {case}, n {n}, width {width}, k {k}, row {i}");
        }
    }
}

#[test]
fn knn_rejects_k_at_or_above_n() {
    let f = Tensor::<f64>::zeros(&[4, 2]);
    assert!(matches!(knn_by_feature(&f, 4), Err(Error::Parameter(_))));
    assert!(matches!(knn_by_feature(&f, 0), Err(Error::Parameter(_))));
}

#[test]
fn knn_rows_follow_a_relabeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let n = 40;
        let values = instance(&mut rng, n, 3, false);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        // Point i of the original becomes point perm[i].
        let mut moved = vec![0.0; n * 3];
        for i in 0..n {
            moved[perm[i] * 3..perm[i] * 3 + 3].copy_from_slice(&values[i * 3..i * 3 + 3]);
        }
        let a = knn_by_feature(&Tensor::<f64>::from_f64(&[n, 3], &values).unwrap(), 6).unwrap();
        let b = knn_by_feature(&Tensor::<f64>::from_f64(&[n, 3], &moved).unwrap(), 6).unwrap();
        for i in 0..n {
            let mapped: Vec<usize> = a.row(i).iter().map(|&j| perm[j]).collect();
            assert_eq!(b.row(perm[i]), mapped.as_slice());
        }
    }
}

/// Checks every step of a sample against the greedy max-min rule with
/// lowest-index ties.
fn assert_greedy(coords: &[f64], selected: &[usize], start: usize) {
    let n = coords.len() / 3;
    let p = |i: usize| &coords[i * 3..i * 3 + 3];
    assert_eq!(selected[0], start);
    for t in 1..selected.len() {
        let chosen = &selected[..t];
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for j in (0..n).filter(|j| !chosen.contains(j)) {
            let d = chosen.iter().map(|&s| dist2(p(j), p(s))).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, j);
            }
        }
        assert_eq!(selected[t], best.1, "step {t}");
    }
}

#[test]
fn fps_matches_greedy_oracle_on_200_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..200 {
        let n = rng.random_range(1..=256usize);
        let m = rng.random_range(1..=n.min(64));
        let start = rng.random_range(0..n);
        let coords = instance(&mut rng, n, 3, case % 2 == 1);
        let s = fps(&coords, m, start).unwrap();
        assert_eq!(s.selected.len(), m);
        let mut distinct = s.selected.clone();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), m, "case {case}");
        assert_greedy(&coords, &s.selected, start);
    }
}

#[test]
fn fps_full_draw_and_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let coords = instance(&mut rng, 30, 3, false);
    let s = fps(&coords, 30, 7).unwrap();
    let mut all = s.selected.clone();
    all.sort_unstable();
    assert_eq!(all, (0..30).collect::<Vec<_>>());
    assert_greedy(&coords, &s.selected, 7);
    assert!(matches!(fps(&coords, 31, 0), Err(Error::Parameter(_))));
    assert!(matches!(fps(&coords, 0, 0), Err(Error::Parameter(_))));
}

#[test]
fn gather_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, c) = (12, 5);
    let feats = instance(&mut rng, n, c, false);
    let idx = knn_by_feature(&Tensor::<f64>::from_f64(&[n, c], &feats).unwrap(), 3).unwrap();
    let mut t = Tape::<f64>::new();
    let v = t.leaf(Tensor::from_f64(&[n, c], &feats).unwrap(), true).unwrap();
    let g = gather_neighbors(&mut t, v, &idx).unwrap();
    assert_eq!(t.shape(g), [n, 3, c]);
    let out = t.value(g).data().to_vec();
    for i in 0..n {
        for (slot, &j) in idx.row(i).iter().enumerate() {
            for ch in 0..c {
                assert_eq!(out[(i * 3 + slot) * c + ch], feats[j * c + ch]);
            }
        }
    }
    let s = t.sum_all(g).unwrap();
    let grads = t.backward(s).unwrap();
    let mut counts = vec![0.0; n];
    idx.indices().iter().for_each(|&j| counts[j] += 1.0);
    let grad = grads.get(v).unwrap();
    for i in 0..n {
        assert!(grad[i * c..(i + 1) * c].iter().all(|&x| x == counts[i]));
    }
}

fn interp_oracle(coarse: &[f64], feats: &[f64], c: usize, fine: &[f64]) -> Vec<f64> {
    let m = coarse.len() / 3;
    let arity = m.min(3);
    let mut out = Vec::new();
    for f in fine.chunks(3) {
        let mut d: Vec<(f64, usize)> = (0..m).map(|j| (dist2(f, &coarse[j * 3..j * 3 + 3]), j)).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let w: Vec<f64> = d[..arity].iter().map(|(dd, _)| 1.0 / (dd + INTERP_EPS)).collect();
        let total: f64 = w.iter().sum();
        for ch in 0..c {
            out.push(d[..arity].iter().zip(&w).map(|((_, j), wi)| wi / total * feats[j * c + ch]).sum());
        }
    }
    out
}

#[test]
fn interpolation_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for m in [1, 2, 8] {
        let c = 4;
        let coarse = instance(&mut rng, m, 3, false);
        let feats = instance(&mut rng, m, c, false);
        let fine = instance(&mut rng, 16, 3, false);
        let mut t = Tape::<f64>::new();
        let fv = t.constant(Tensor::from_f64(&[m, c], &feats).unwrap()).unwrap();
        let out = interpolate_3nn(&mut t, &coarse, fv, &fine).unwrap();
        let want = interp_oracle(&coarse, &feats, c, &fine);
        for (a, b) in t.value(out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "m {m}: {a} vs {b}");
        }
        let plan = interpolation_plan(&coarse, &fine).unwrap();
        for w in plan.weights.chunks(plan.arity) {
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn interpolation_special_points() {
    let coarse = [0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 5.0, 5.0, 5.0];
    let feats = [1.0, 2.0, 3.0, 4.0];
    let fine = [2.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    let mut t = Tape::<f64>::new();
    let fv = t.constant(Tensor::from_f64(&[4, 1], &feats).unwrap()).unwrap();
    let out = interpolate_3nn(&mut t, &coarse, fv, &fine).unwrap();
    let v = t.value(out).data();
    assert!((v[0] - 2.0).abs() < 1e-4);
    assert!((v[1] - 2.0).abs() < 1e-12);
}

//! Brute-force neighborhoods: feature-space kNN graphs, farthest point
//! sampling, neighbor gathering and inverse-distance interpolation.
//!
//! Distances are squared Euclidean, summed channel by channel in index order.
//! Every selection breaks ties by the lowest point index.

use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Neighbor count used when a configuration does not set one.
pub const DEFAULT_K: usize = 20;

/// Smoothing term added to squared distances in interpolation weights.
pub const INTERP_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceSpace {
    Coordinate,
    Feature,
}

/// `N × k` neighbor rows, each sorted by ascending distance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    indices: Vec<usize>,
    n: usize,
    k: usize,
    source: SourceSpace,
}

impl NeighborIndex {
    pub fn new(indices: Vec<usize>, n: usize, k: usize, source: SourceSpace) -> Result<Self> {
        if indices.len() != n * k {
            return Err(dim_err("neighbor_index", format!("{} entries for {n}x{k}", indices.len())));
        }
        for (i, row) in indices.chunks_exact(k.max(1)).enumerate() {
            if row.iter().any(|&j| j >= n || j == i) {
                return Err(Error::Internal(format!("invalid neighbor row {i}: {row:?}")));
            }
        }
        Ok(Self {
            indices,
            n,
            k,
            source,
        })
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn source(&self) -> SourceSpace {
        self.source
    }
}

/// Points chosen by farthest point sampling, in selection order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSet {
    pub selected: Vec<usize>,
}

/// Squared Euclidean distance, accumulated over four lanes.
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let mut tail = 0.0;
    for (&x, &y) in ac.remainder().iter().zip(bc.remainder()) {
        let d = x - y;
        tail += d * d;
    }
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn widen<T: Scalar>(values: &[T]) -> Vec<f64> {
    values.iter().map(|v| v.as_f64()).collect()
}

/// The `k` smallest `(distance, index)` pairs seen so far, ascending.
/// Candidates must be offered in increasing index order, so an equal
/// distance never displaces an earlier index.
struct Nearest {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl Nearest {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn clear(&mut self) {
        self.items.clear();
    }

    #[inline]
    fn offer(&mut self, d: f64, j: usize) {
        if self.items.len() == self.k && d >= self.items[self.k - 1].0 {
            return;
        }
        let at = self.items.partition_point(|&(e, _)| e <= d);
        self.items.insert(at, (d, j));
        self.items.truncate(self.k);
    }
}

fn check_rows<T: Scalar>(values: &[T], width: usize, op: &'static str) -> Result<usize> {
    if width == 0 || values.len() % width != 0 {
        return Err(dim_err(op, format!("{} values are not rows of width {width}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(values.len() / width)
}

/// kNN over row-major `n × width` values, excluding each point itself.
pub fn knn_rows<T: Scalar>(
    values: &[T],
    width: usize,
    k: usize,
    source: SourceSpace,
) -> Result<NeighborIndex> {
    let n = check_rows(values, width, "knn_by_feature")?;
    let values = widen(values);
    if k == 0 || k >= n {
        return Err(Error::Parameter(format!(
            "neighbor count k={k} must satisfy 1 <= k < N={n}"
        )));
    }
    let mut indices = Vec::with_capacity(n * k);
    let mut best = Nearest::new(k);
    for i in 0..n {
        let fi = &values[i * width..(i + 1) * width];
        best.clear();
        for j in (0..n).filter(|&j| j != i) {
            best.offer(squared_distance(fi, &values[j * width..(j + 1) * width]), j);
        }
        indices.extend(best.items.iter().map(|&(_, j)| j));
    }
    NeighborIndex::new(indices, n, k, source)
}

/// Feature-space kNN graph of an `N × C` feature map.
pub fn knn_by_feature<T: Scalar>(features: &Tensor<T>, k: usize) -> Result<NeighborIndex> {
    if features.rank() != 2 {
        return Err(dim_err("knn_by_feature", format!("expected N x C, got {:?}", features.shape())));
    }
    knn_rows(features.data(), features.last_dim(), k, SourceSpace::Feature)
}

/// Greedy farthest point sampling on `N × 3` coordinates.
pub fn fps<T: Scalar>(coords: &[T], m: usize, start: usize) -> Result<SampleSet> {
    let n = check_rows(coords, 3, "fps")?;
    if m == 0 || m > n {
        return Err(Error::Parameter(format!("sample count m={m} must satisfy 1 <= m <= N={n}")));
    }
    if start >= n {
        return Err(Error::Parameter(format!("start index {start} out of range for N={n}")));
    }
    let coords = widen(coords);
    let point = |i: usize| &coords[i * 3..i * 3 + 3];
    let mut taken = vec![false; n];
    let mut min_dist = vec![f64::INFINITY; n];
    let mut selected = Vec::with_capacity(m);
    let mut current = start;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == m {
            break;
        }
        let c = point(current);
        let mut best: Option<(f64, usize)> = None;
        for j in 0..n {
            if taken[j] {
                continue;
            }
            let d = squared_distance(point(j), c);
            if d < min_dist[j] {
                min_dist[j] = d;
            }
            match best {
                Some((bd, _)) if min_dist[j] <= bd => {}
                _ => best = Some((min_dist[j], j)),
            }
        }
        current = best.expect("m <= n leaves a candidate").1;
    }
    Ok(SampleSet { selected })
}

/// `N × k × C` neighbor values: `out[i][n] = values[idx[i][n]]`.
pub fn gather_neighbors<T: Scalar>(tape: &mut Tape<T>, values: Var, idx: &NeighborIndex) -> Result<Var> {
    let shape = tape.shape(values).to_vec();
    if shape.len() != 2 || shape[0] != idx.n() {
        return Err(dim_err(
            "gather_neighbors",
            format!("values {shape:?} for a {}-point index", idx.n()),
        ));
    }
    let g = tape.gather_rows(values, Arc::from(idx.indices().to_vec()))?;
    tape.reshape(g, &[idx.n(), idx.k(), shape[1]])
}

/// Neighbor rows for a batch of equally sized clouds stacked as `B·N` rows.
/// Entry `r = (b·N + i)·k + n` pairs center `b·N + i` with its `n`-th neighbor.
#[derive(Clone, Debug)]
pub struct BatchNeighbors {
    pub batch: usize,
    pub n: usize,
    pub k: usize,
    pub center: Arc<[usize]>,
    pub nbr: Arc<[usize]>,
}

impl BatchNeighbors {
    pub fn from_indices(per_cloud: &[NeighborIndex]) -> Result<Self> {
        let first = per_cloud
            .first()
            .ok_or_else(|| Error::Internal("empty batch".into()))?;
        let (n, k) = (first.n(), first.k());
        let mut center = Vec::with_capacity(per_cloud.len() * n * k);
        let mut nbr = Vec::with_capacity(per_cloud.len() * n * k);
        for (b, idx) in per_cloud.iter().enumerate() {
            if idx.n() != n || idx.k() != k {
                return Err(dim_err("batch_neighbors", "clouds in a batch differ in size"));
            }
            let offset = b * n;
            for i in 0..n {
                for &j in idx.row(i) {
                    center.push(offset + i);
                    nbr.push(offset + j);
                }
            }
        }
        Ok(Self {
            batch: per_cloud.len(),
            n,
            k,
            center: Arc::from(center),
            nbr: Arc::from(nbr),
        })
    }

    pub fn edges(&self) -> usize {
        self.center.len()
    }
}

/// kNN recomputed on the current features of every cloud in a batch.
pub fn batch_knn<T: Scalar>(features: &Tensor<T>, batch: usize, k: usize) -> Result<BatchNeighbors> {
    let width = features.last_dim();
    let rows = features.rows();
    if batch == 0 || rows % batch != 0 {
        return Err(dim_err("batch_knn", format!("{rows} rows for a batch of {batch}")));
    }
    let n = rows / batch;
    let per_cloud = features
        .data()
        .chunks_exact(n * width)
        .map(|cloud| knn_rows(cloud, width, k, SourceSpace::Feature))
        .collect::<Result<Vec<_>>>()?;
    BatchNeighbors::from_indices(&per_cloud)
}

/// Source rows and normalized weights for 3-nearest-neighbor interpolation.
#[derive(Clone, Debug)]
pub struct InterpolationPlan<T> {
    /// Neighbors per fine point: 3, or M when fewer coarse points exist.
    pub arity: usize,
    pub sources: Vec<usize>,
    pub weights: Vec<T>,
}

/// Weights `1/(d² + 1e-8)` over the nearest coarse points, normalized to one.
pub fn interpolation_plan<T: Scalar>(coarse: &[T], fine: &[T]) -> Result<InterpolationPlan<T>> {
    let m = check_rows(coarse, 3, "interpolate_3nn")?;
    let n = check_rows(fine, 3, "interpolate_3nn")?;
    let (coarse, fine) = (widen(coarse), widen(fine));
    if m == 0 {
        return Err(Error::Parameter("interpolation needs at least one coarse point".into()));
    }
    let arity = m.min(3);
    let mut sources = Vec::with_capacity(n * arity);
    let mut weights = Vec::with_capacity(n * arity);
    let mut best = Nearest::new(arity);
    for i in 0..n {
        let p = &fine[i * 3..i * 3 + 3];
        best.clear();
        for j in 0..m {
            best.offer(squared_distance(p, &coarse[j * 3..j * 3 + 3]), j);
        }
        let cand = &best.items;
        let raw: Vec<f64> = cand.iter().map(|&(d, _)| 1.0 / (d + INTERP_EPS)).collect();
        let total: f64 = raw.iter().sum();
        sources.extend(cand.iter().map(|&(_, j)| j));
        weights.extend(raw.iter().map(|&w| T::from_f64_lossy(w / total)));
    }
    Ok(InterpolationPlan {
        arity,
        sources,
        weights,
    })
}

/// Applies a plan to `M × C` coarse features, giving `N × C` fine features.
/// `offset` shifts source rows when the coarse features are batch-stacked.
pub fn apply_interpolation<T: Scalar>(
    tape: &mut Tape<T>,
    coarse_feats: Var,
    plans: &[(InterpolationPlan<T>, usize)],
) -> Result<Var> {
    let c = tape.value(coarse_feats).last_dim();
    let arity = plans
        .first()
        .map(|(p, _)| p.arity)
        .ok_or_else(|| Error::Internal("no interpolation plans".into()))?;
    let mut sources = Vec::new();
    let mut weights = Vec::new();
    for (plan, offset) in plans {
        if plan.arity != arity {
            return Err(dim_err("interpolate_3nn", "mixed interpolation arity in batch"));
        }
        sources.extend(plan.sources.iter().map(|&s| s + offset));
        weights.extend_from_slice(&plan.weights);
    }
    let fine = sources.len() / arity;
    let gathered = tape.gather_rows(coarse_feats, Arc::from(sources))?;
    let w = tape.constant(Tensor::new(vec![weights.len()], weights)?)?;
    let scaled = tape.mul_rows(gathered, w)?;
    let grouped = tape.reshape(scaled, &[fine, arity, c])?;
    tape.sum_reduce_axis(grouped, 1)
}

/// Interpolates `M × C` coarse features onto `N` fine points.
pub fn interpolate_3nn<T: Scalar>(
    tape: &mut Tape<T>,
    coarse_coords: &[T],
    coarse_feats: Var,
    fine_coords: &[T],
) -> Result<Var> {
    let plan = interpolation_plan(coarse_coords, fine_coords)?;
    if tape.value(coarse_feats).rows() * 3 != coarse_coords.len() {
        return Err(dim_err("interpolate_3nn", "coarse features and coordinates differ in length"));
    }
    apply_interpolation(tape, coarse_feats, &[(plan, 0)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_features() {
        let f = Tensor::<f64>::from_f64(&[4, 1], &[0.0, 0.1, 0.9, 1.0]).unwrap();
        let idx = knn_by_feature(&f, 1).unwrap();
        assert_eq!(idx.indices(), [1, 0, 3, 2]);
        assert_eq!(idx.source(), SourceSpace::Feature);
    }

    #[test]
    fn duplicate_rows_tie_to_lowest_index() {
        let f = Tensor::<f64>::from_f64(&[4, 2], &[5., 5., 1., 1., 1., 1., 1., 1.]).unwrap();
        let idx = knn_by_feature(&f, 2).unwrap();
        assert_eq!(idx.row(1), [2, 3]);
        assert_eq!(idx.row(3), [1, 2]);
        assert_eq!(idx.row(0), [1, 2]);
    }

    #[test]
    fn k_must_be_below_point_count() {
        let f = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matches!(knn_by_feature(&f, 4), Err(Error::Parameter(_))));
        assert!(knn_by_feature(&f, 3).is_ok());
    }

    #[test]
    fn fps_collinear_example() {
        let coords = [0., 0., 0., 1., 0., 0., 2., 0., 0., 10., 0., 0.];
        assert_eq!(fps(&coords, 2, 0).unwrap().selected, [0, 3]);
        let all = fps(&coords, 4, 1).unwrap().selected;
        assert_eq!(all[0], 1);
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, [0, 1, 2, 3]);
        assert!(matches!(fps(&coords, 5, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn fps_with_duplicates_stays_distinct() {
        let coords = [0.0f32; 12];
        let s = fps(&coords, 4, 2).unwrap().selected;
        assert_eq!(s, [2, 0, 1, 3]);
    }

    #[test]
    fn gather_swaps_rows() {
        let mut t = Tape::<f64>::new();
        let v = t.constant(Tensor::from_f64(&[2, 1], &[1.0, 2.0]).unwrap()).unwrap();
        let idx = NeighborIndex::new(vec![1, 0], 2, 1, SourceSpace::Feature).unwrap();
        let g = gather_neighbors(&mut t, v, &idx).unwrap();
        assert_eq!(t.shape(g), [2, 1, 1]);
        assert_eq!(t.value(g).data(), [2.0, 1.0]);
    }

    #[test]
    fn interpolation_special_cases() {
        let coarse = [0., 0., 0., 1., 0., 0., 0., 1., 0.];
        let mut t = Tape::<f64>::new();
        let feats = t.constant(Tensor::from_f64(&[3, 2], &[1., 10., 2., 20., 3., 30.]).unwrap()).unwrap();
        // coincident with the second coarse point
        let y = interpolate_3nn(&mut t, &coarse, feats, &[1., 0., 0.]).unwrap();
        let y = t.value(y).data().to_vec();
        assert!((y[0] - 2.0).abs() < 1e-4 && (y[1] - 20.0).abs() < 1e-3);

        // equidistant from all three
        let eq = [0., 0., 0., 2., 0., 0., 1., 3f64.sqrt(), 0.];
        let centroid = [1., 3f64.sqrt() / 3.0, 0.];
        let y = interpolate_3nn(&mut t, &eq, feats, &centroid).unwrap();
        let y = t.value(y).data().to_vec();
        assert!((y[0] - 2.0).abs() < 1e-9 && (y[1] - 20.0).abs() < 1e-8);

        // fewer than three coarse points uses all of them
        let plan = interpolation_plan(&[0.0f64, 0., 0.], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(plan.arity, 1);
        assert_eq!(plan.weights, [1.0]);
    }
}

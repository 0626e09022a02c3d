//! Transformer channel encoder.
//!
//! For every point `i` and neighbor `j` the layer builds
//!
//! * a query from coordinates only, `q = (x_i, x_j − x_i)` (six channels, no
//!   learned projection),
//! * a key from features, `key = MLP(f_i, f_j − f_i)`,
//! * one value map per query channel, `value[p] = MLP_p(key)`.
//!
//! The attention grid is the broadcast product `q[p]·key[c]`, normalized by a
//! softmax over the query axis `p` separately for each feature channel `c`.
//! The response `attention ⊙ value` is pooled over `p` (max by default),
//! passed through a 1×1 convolution with batch norm and LeakyReLU, and
//! finally max-aggregated over the neighborhood. There is no positional
//! encoding.

use crate::error::{dim_err, Error, Result};
use crate::neighborhood::BatchNeighbors;
use crate::params::{DenseParams, Forward, LinearParams, ParamBuilder};
use crate::tensor::{Pool, Scalar, Tape, Var};

/// Query channels: three absolute plus three relative coordinates.
pub const QUERY_CHANNELS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TceConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub k: usize,
    pub pool: Pool,
}

impl TceConfig {
    pub fn new(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            k,
            pool: Pool::Max,
        }
    }

    pub fn query_channels(&self) -> usize {
        QUERY_CHANNELS
    }
}

#[derive(Clone, Debug)]
pub struct TceParams {
    pub config: TceConfig,
    /// `2·C_in → C_out`, then batch norm and LeakyReLU.
    pub key: DenseParams,
    /// One `C_out → C_out` map per query channel.
    pub value: Vec<LinearParams>,
    /// The 1×1 convolution on the pooled response.
    pub conv: DenseParams,
}

impl TceParams {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, config: TceConfig) -> Result<Self> {
        if config.out_channels == 0 || config.in_channels == 0 {
            return Err(Error::Config(format!("{name}: channel counts must be positive")));
        }
        let c = config.out_channels;
        let key = b.dense(&format!("{name}.key"), 2 * config.in_channels, c)?;
        let value = (0..QUERY_CHANNELS)
            .map(|p| b.linear(&format!("{name}.value.{p}"), c, c, true))
            .collect::<Result<Vec<_>>>()?;
        let conv = b.dense(&format!("{name}.conv"), c, c)?;
        Ok(Self {
            config,
            key,
            value,
            conv,
        })
    }
}

fn check_graph(graph: &BatchNeighbors, points: usize, op: &'static str) -> Result<()> {
    if graph.batch * graph.n != points {
        return Err(dim_err(
            op,
            format!("graph over {} points, input has {points}", graph.batch * graph.n),
        ));
    }
    Ok(())
}

/// `q[i][n] = (x_i, x_j − x_i)` as `[P, k, 6]`.
pub fn build_query<T: Scalar>(tape: &mut Tape<T>, coords: Var, graph: &BatchNeighbors) -> Result<Var> {
    let shape = tape.shape(coords).to_vec();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(dim_err("build_query", format!("coordinates must be P x 3, got {shape:?}")));
    }
    check_graph(graph, shape[0], "build_query")?;
    let xi = tape.gather_rows(coords, graph.center.clone())?;
    let xj = tape.gather_rows(coords, graph.nbr.clone())?;
    let rel = tape.sub(xj, xi)?;
    let q = tape.concat(&[xi, rel], 1)?;
    tape.reshape(q, &[shape[0], graph.k, QUERY_CHANNELS])
}

/// `key = LeakyReLU(BN(MLP(f_i, f_j − f_i)))` as `[P, k, C_out]`.
pub fn build_key<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    feats: Var,
    graph: &BatchNeighbors,
    params: &TceParams,
) -> Result<Var> {
    let shape = fwd.tape.shape(feats).to_vec();
    if shape.len() != 2 || shape[1] != params.config.in_channels {
        return Err(dim_err(
            "build_key",
            format!("features {shape:?} for {} input channels", params.config.in_channels),
        ));
    }
    check_graph(graph, shape[0], "build_key")?;
    let w = fwd.param(params.key.linear.w)?;
    let b = params.key.linear.b.map(|b| fwd.param(b)).transpose()?;
    let y = fwd
        .tape
        .edge_linear(feats, w, b, graph.center.clone(), graph.nbr.clone())?;
    let y = fwd.norm_act(&params.key.bn, y)?;
    fwd.tape.reshape(y, &[shape[0], graph.k, params.config.out_channels])
}

/// Column-softmaxed attention grid `[P, k, 6, C]` from `q: [P, k, 6]` and
/// `key: [P, k, C]`.
pub fn channel_attention<T: Scalar>(tape: &mut Tape<T>, q: Var, key: Var) -> Result<Var> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(key).to_vec());
    if qs.len() != 3 || ks.len() != 3 || qs[..2] != ks[..2] {
        return Err(dim_err("channel_attention", format!("query {qs:?} vs key {ks:?}")));
    }
    let rows = qs[0] * qs[1];
    let q2 = tape.reshape(q, &[rows, qs[2]])?;
    let k2 = tape.reshape(key, &[rows, ks[2]])?;
    let grid = tape.outer(q2, k2)?;
    let attn = tape.softmax_axis(grid, 1)?;
    tape.reshape(attn, &[qs[0], qs[1], qs[2], ks[2]])
}

/// Stacks the per-query-channel value maps of `key` into `[P, k, 6, C]`.
pub fn build_value<T: Scalar>(fwd: &mut Forward<'_, T>, key: Var, params: &TceParams) -> Result<Var> {
    let ks = fwd.tape.shape(key).to_vec();
    let c = *ks.last().expect("rank >= 1");
    let (w, b) = stacked_value_params(fwd, params)?;
    let rows = fwd.tape.value(key).rows();
    let k2 = fwd.tape.reshape(key, &[rows, c])?;
    let v = fwd.tape.linear(k2, w, b)?;
    let mut shape = ks[..ks.len() - 1].to_vec();
    shape.extend([QUERY_CHANNELS, c]);
    fwd.tape.reshape(v, &shape)
}

/// Response `attention ⊙ value`, pooled over the query axis: `[P, k, C]`.
pub fn channel_response_pool<T: Scalar>(tape: &mut Tape<T>, attn: Var, value: Var, pool: Pool) -> Result<Var> {
    let shape = tape.shape(attn).to_vec();
    if shape.len() != 4 || tape.shape(value) != shape.as_slice() {
        return Err(dim_err(
            "channel_response_pool",
            format!("attention {shape:?} vs value {:?}", tape.shape(value)),
        ));
    }
    let response = tape.mul(attn, value)?;
    tape.pool_axis(response, 2, pool)
}

fn finish_layer<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    encoded: Var,
    points: usize,
    k: usize,
    params: &TceParams,
) -> Result<Var> {
    let y = fwd.dense(&params.conv, encoded)?;
    let c = params.config.out_channels;
    let y = fwd.tape.reshape(y, &[points, k, c])?;
    fwd.tape.max_reduce_axis(y, 1)
}

fn check_k(graph: &BatchNeighbors, params: &TceParams) -> Result<()> {
    if graph.k != params.config.k {
        return Err(dim_err(
            "tce_forward",
            format!("graph has k={}, layer expects k={}", graph.k, params.config.k),
        ));
    }
    Ok(())
}

/// `[R, C] → [R, C·6]` weight and bias of the stacked value maps.
fn stacked_value_params<T: Scalar>(fwd: &mut Forward<'_, T>, params: &TceParams) -> Result<(Var, Option<Var>)> {
    if params.value.len() != QUERY_CHANNELS {
        return Err(Error::Config(format!(
            "expected {QUERY_CHANNELS} value maps, found {}",
            params.value.len()
        )));
    }
    let mut ws = Vec::with_capacity(QUERY_CHANNELS);
    let mut bs = Vec::with_capacity(QUERY_CHANNELS);
    for lin in &params.value {
        ws.push(fwd.param(lin.w)?);
        if let Some(b) = lin.b {
            bs.push(fwd.param(b)?);
        }
    }
    let w = fwd.tape.concat(&ws, 1)?;
    let b = if bs.is_empty() {
        None
    } else if bs.len() == QUERY_CHANNELS {
        Some(fwd.tape.concat(&bs, 0)?)
    } else {
        return Err(Error::Config("value maps disagree on bias".into()));
    };
    Ok((w, b))
}

/// Full layer, `[P, C_in]` features to `[P, C_out]`.
pub fn tce_forward<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    coords: Var,
    feats: Var,
    graph: &BatchNeighbors,
    params: &TceParams,
) -> Result<Var> {
    check_k(graph, params)?;
    let points = fwd.tape.shape(feats)[0];
    let rows = graph.edges();
    let c = params.config.out_channels;
    let q = build_query(&mut fwd.tape, coords, graph)?;
    let key = build_key(fwd, feats, graph, params)?;
    let (w, b) = stacked_value_params(fwd, params)?;
    let q = fwd.tape.reshape(q, &[rows, QUERY_CHANNELS])?;
    let key = fwd.tape.reshape(key, &[rows, c])?;
    let encoded = fwd.tape.channel_encode_mapped(q, key, w, b, params.config.pool)?;
    finish_layer(fwd, encoded, points, graph.k, params)
}

/// Same layer built from the separate attention and pooling steps.
pub fn tce_forward_unfused<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    coords: Var,
    feats: Var,
    graph: &BatchNeighbors,
    params: &TceParams,
) -> Result<Var> {
    check_k(graph, params)?;
    let points = fwd.tape.shape(feats)[0];
    let q = build_query(&mut fwd.tape, coords, graph)?;
    let key = build_key(fwd, feats, graph, params)?;
    let value = build_value(fwd, key, params)?;
    let attn = channel_attention(&mut fwd.tape, q, key)?;
    let pooled = channel_response_pool(&mut fwd.tape, attn, value, params.config.pool)?;
    let flat = fwd.tape.reshape(pooled, &[graph.edges(), params.config.out_channels])?;
    finish_layer(fwd, flat, points, graph.k, params)
}

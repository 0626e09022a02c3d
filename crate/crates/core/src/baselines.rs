//! Alternative encoder layers sharing the TCE layer interface.
//!
//! These are compact stand-ins for the ablation layers: an EdgeConv graph
//! convolution, a squeeze-style channel gate in front of it, and scalar
//! attention over the neighbors of each point.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::neighborhood::BatchNeighbors;
use crate::params::{DenseParams, Forward, LinearParams, ParamBuilder};
use crate::tce::{channel_response_pool, tce_forward, TceConfig, TceParams};
use crate::tensor::{Pool, Scalar, Tape, Tensor, Var};

/// Channel reduction inside the squeeze gate.
pub const GATE_REDUCTION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Tce,
    GraphConv,
    ChannelAttention,
    PointAttention,
}

impl LayerKind {
    pub const ALL: [LayerKind; 4] = [
        LayerKind::GraphConv,
        LayerKind::PointAttention,
        LayerKind::ChannelAttention,
        LayerKind::Tce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Tce => "tce",
            LayerKind::GraphConv => "graphconv",
            LayerKind::ChannelAttention => "channel_attention",
            LayerKind::PointAttention => "point_attention",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tce" => Ok(LayerKind::Tce),
            "graphconv" | "edgeconv" => Ok(LayerKind::GraphConv),
            "channel_attention" | "cw_attn" => Ok(LayerKind::ChannelAttention),
            "point_attention" | "pw_attn" => Ok(LayerKind::PointAttention),
            other => Err(Error::Config(format!("unknown layer kind {other:?}"))),
        }
    }
}

pub fn pool_name(pool: Pool) -> &'static str {
    match pool {
        Pool::Max => "max",
        Pool::Mean => "mean",
        Pool::Sum => "sum",
    }
}

pub fn parse_pool(s: &str) -> Result<Pool> {
    match s {
        "max" => Ok(Pool::Max),
        "mean" => Ok(Pool::Mean),
        "sum" => Ok(Pool::Sum),
        other => Err(Error::Config(format!("unknown pooling {other:?}"))),
    }
}

/// Encoder layer choice. `pool` only matters for `LayerKind::Tce`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerVariant {
    pub kind: LayerKind,
    pub pool: Pool,
}

impl LayerVariant {
    pub fn tce(pool: Pool) -> Self {
        Self {
            kind: LayerKind::Tce,
            pool,
        }
    }

    pub fn of(kind: LayerKind) -> Self {
        Self { kind, pool: Pool::Max }
    }

    pub fn label(&self) -> String {
        match self.kind {
            LayerKind::Tce => format!("tce-{}", pool_name(self.pool)),
            k => k.name().to_string(),
        }
    }
}

impl Default for LayerVariant {
    fn default() -> Self {
        Self::tce(Pool::Max)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EdgeConvParams {
    pub dense: DenseParams,
    pub out_channels: usize,
}

impl EdgeConvParams {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            dense: b.dense(name, 2 * cin, cout)?,
            out_channels: cout,
        })
    }
}

fn check_feats<T: Scalar>(tape: &Tape<T>, feats: Var, graph: &BatchNeighbors, op: &'static str) -> Result<usize> {
    let shape = tape.shape(feats);
    if shape.len() != 2 || shape[0] != graph.batch * graph.n {
        return Err(dim_err(
            op,
            format!("features {shape:?} for a graph over {} points", graph.batch * graph.n),
        ));
    }
    Ok(shape[1])
}

/// `f'_i = max_j LeakyReLU(BN(W·(f_i, f_j − f_i) + b))`.
pub fn edgeconv_forward<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    feats: Var,
    graph: &BatchNeighbors,
    params: &EdgeConvParams,
) -> Result<Var> {
    let cin = check_feats(&fwd.tape, feats, graph, "edgeconv_forward")?;
    let w = fwd.param(params.dense.linear.w)?;
    if fwd.tape.shape(w)[0] != 2 * cin {
        return Err(dim_err(
            "edgeconv_forward",
            format!("{cin} input channels for weight {:?}", fwd.tape.shape(w)),
        ));
    }
    let b = params.dense.linear.b.map(|b| fwd.param(b)).transpose()?;
    let y = fwd
        .tape
        .edge_linear(feats, w, b, graph.center.clone(), graph.nbr.clone())?;
    let y = fwd.norm_act(&params.dense.bn, y)?;
    let y = fwd
        .tape
        .reshape(y, &[graph.batch * graph.n, graph.k, params.out_channels])?;
    fwd.tape.max_reduce_axis(y, 1)
}

#[derive(Clone, Debug)]
pub struct ChannelGateParams {
    pub squeeze: LinearParams,
    pub excite: LinearParams,
    pub conv: EdgeConvParams,
    /// Replaces the learned gate, one value per input channel.
    pub forced_gate: Option<Vec<f64>>,
}

impl ChannelGateParams {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let hidden = (cin / GATE_REDUCTION).max(1);
        Ok(Self {
            squeeze: b.linear(&format!("{name}.squeeze"), cin, hidden, true)?,
            excite: b.linear(&format!("{name}.excite"), hidden, cin, true)?,
            conv: EdgeConvParams::build(b, &format!("{name}.conv"), cin, cout)?,
            forced_gate: None,
        })
    }
}

fn cloud_rows(batch: usize, n: usize) -> Arc<[usize]> {
    (0..batch).flat_map(|b| std::iter::repeat_n(b, n)).collect()
}

/// Per-cloud channel gate in `(0, 1)`, shape `[B, C]`.
pub fn channel_gate<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    feats: Var,
    graph: &BatchNeighbors,
    params: &ChannelGateParams,
) -> Result<Var> {
    let c = check_feats(&fwd.tape, feats, graph, "channel_attention_forward")?;
    if let Some(gate) = &params.forced_gate {
        if gate.len() != c {
            return Err(dim_err(
                "channel_attention_forward",
                format!("forced gate of {} channels for {c}", gate.len()),
            ));
        }
        let data: Vec<f64> = (0..graph.batch).flat_map(|_| gate.iter().copied()).collect();
        return fwd.tape.constant(Tensor::from_f64(&[graph.batch, c], &data)?);
    }
    let grouped = fwd.tape.reshape(feats, &[graph.batch, graph.n, c])?;
    let pooled = fwd.tape.mean_reduce_axis(grouped, 1)?;
    let h = fwd.linear(&params.squeeze, pooled)?;
    let h = fwd.activation(h)?;
    let g = fwd.linear(&params.excite, h)?;
    fwd.tape.sigmoid(g)
}

/// Channel-gated features followed by `edgeconv_forward`.
pub fn channel_attention_forward<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    feats: Var,
    graph: &BatchNeighbors,
    params: &ChannelGateParams,
) -> Result<Var> {
    let gate = channel_gate(fwd, feats, graph, params)?;
    let per_point = fwd.tape.gather_rows(gate, cloud_rows(graph.batch, graph.n))?;
    let gated = fwd.tape.mul(feats, per_point)?;
    edgeconv_forward(fwd, gated, graph, &params.conv)
}

#[derive(Clone, Copy, Debug)]
pub struct PointAttentionParams {
    pub score: LinearParams,
    pub value: DenseParams,
    pub out_channels: usize,
}

impl PointAttentionParams {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            score: b.linear(&format!("{name}.score"), 2 * cin, 1, true)?,
            value: b.dense(&format!("{name}.value"), cin, cout)?,
            out_channels: cout,
        })
    }
}

/// Softmax over the `k` neighbors of each point, `[P, k]`.
pub fn point_attention_weights<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    feats: Var,
    graph: &BatchNeighbors,
    params: &PointAttentionParams,
) -> Result<Var> {
    check_feats(&fwd.tape, feats, graph, "point_attention_forward")?;
    let w = fwd.param(params.score.w)?;
    let b = params.score.b.map(|b| fwd.param(b)).transpose()?;
    let scores = fwd
        .tape
        .edge_linear(feats, w, b, graph.center.clone(), graph.nbr.clone())?;
    let scores = fwd.tape.reshape(scores, &[graph.batch * graph.n, graph.k])?;
    fwd.tape.softmax_axis(scores, 1)
}

/// `f'_i = Σ_j a_ij · LeakyReLU(BN(W_v f_j + b_v))`.
pub fn point_attention_forward<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    feats: Var,
    graph: &BatchNeighbors,
    params: &PointAttentionParams,
) -> Result<Var> {
    let weights = point_attention_weights(fwd, feats, graph, params)?;
    let values = fwd.dense(&params.value, feats)?;
    let gathered = fwd.tape.gather_rows(values, graph.nbr.clone())?;
    let flat = fwd.tape.reshape(weights, &[graph.edges()])?;
    let scaled = fwd.tape.mul_rows(gathered, flat)?;
    let grouped = fwd
        .tape
        .reshape(scaled, &[graph.batch * graph.n, graph.k, params.out_channels])?;
    fwd.tape.sum_reduce_axis(grouped, 1)
}

/// The TCE response pooled with `max`, `mean` or `sum` over the query axis.
pub fn tce_pool_variant<T: Scalar>(tape: &mut Tape<T>, attn: Var, value: Var, pool: Pool) -> Result<Var> {
    channel_response_pool(tape, attn, value, pool)
}

/// Any encoder layer: `(coords, feats, graph) → [P, C_out]`.
#[derive(Clone, Debug)]
pub enum EncoderLayer {
    Tce(TceParams),
    GraphConv(EdgeConvParams),
    ChannelAttention(ChannelGateParams),
    PointAttention(PointAttentionParams),
}

impl EncoderLayer {
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        variant: LayerVariant,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Result<Self> {
        Ok(match variant.kind {
            LayerKind::Tce => {
                let config = TceConfig {
                    pool: variant.pool,
                    ..TceConfig::new(cin, cout, k)
                };
                EncoderLayer::Tce(TceParams::build(b, name, config)?)
            }
            LayerKind::GraphConv => EncoderLayer::GraphConv(EdgeConvParams::build(b, name, cin, cout)?),
            LayerKind::ChannelAttention => {
                EncoderLayer::ChannelAttention(ChannelGateParams::build(b, name, cin, cout)?)
            }
            LayerKind::PointAttention => {
                EncoderLayer::PointAttention(PointAttentionParams::build(b, name, cin, cout)?)
            }
        })
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            EncoderLayer::Tce(_) => LayerKind::Tce,
            EncoderLayer::GraphConv(_) => LayerKind::GraphConv,
            EncoderLayer::ChannelAttention(_) => LayerKind::ChannelAttention,
            EncoderLayer::PointAttention(_) => LayerKind::PointAttention,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        fwd: &mut Forward<'_, T>,
        coords: Var,
        feats: Var,
        graph: &BatchNeighbors,
    ) -> Result<Var> {
        match self {
            EncoderLayer::Tce(p) => tce_forward(fwd, coords, feats, graph, p),
            EncoderLayer::GraphConv(p) => edgeconv_forward(fwd, feats, graph, p),
            EncoderLayer::ChannelAttention(p) => channel_attention_forward(fwd, feats, graph, p),
            EncoderLayer::PointAttention(p) => point_attention_forward(fwd, feats, graph, p),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_round_trip() {
        for k in LayerKind::ALL {
            assert_eq!(k.name().parse::<LayerKind>().unwrap(), k);
        }
        assert!("attention".parse::<LayerKind>().is_err());
        assert_eq!(parse_pool("sum").unwrap(), Pool::Sum);
        assert!(parse_pool("min").is_err());
    }

    #[test]
    fn cloud_rows_repeat() {
        assert_eq!(&*cloud_rows(2, 3), &[0, 0, 0, 1, 1, 1]);
    }
}

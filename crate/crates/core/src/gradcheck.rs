//! Registered finite-difference checks in fp64: every tape op, every
//! encoder layer, and tiny end-to-end networks.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{EncoderLayer, LayerKind, LayerVariant};
use crate::error::{Error, Result};
use crate::neighborhood::{batch_knn, BatchNeighbors};
use crate::networks::{Model, NetworkConfig, Task};
use crate::params::{Forward, Mode, ModelParams, ParamBuilder, ParamId};
use crate::tensor::{grad_check, GradCheckReport, Pool, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Op,
    Layer,
    Network,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Op, Scope::Layer, Scope::Network];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Op => "op",
            Scope::Layer => "layer",
            Scope::Network => "network",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scope {s:?}, expected op, layer or network")))
    }
}

#[derive(Clone, Debug)]
pub struct TargetReport {
    pub target: String,
    pub report: GradCheckReport,
}

impl TargetReport {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

type Check = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Target {
    name: String,
    inputs: Vec<Tensor<f64>>,
    f: Check,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// `Σ out ⊙ w` for fixed random `w`, so every output element matters.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&tape.shape(out).to_vec(), &mut rng);
    let w = tape.constant(w)?;
    let m = tape.mul(out, w)?;
    tape.sum_all(m)
}

fn op(name: impl Into<String>, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Target {
    Target {
        name: name.into(),
        inputs,
        f: Box::new(f),
    }
}

fn op_targets() -> Vec<Target> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    for (si, (r, c)) in [(3usize, 4usize), (6, 2)].into_iter().enumerate() {
        let seed = 100 + si as u64;
        let tag = format!("{r}x{c}");
        let a = random(&[r, c], &mut rng);
        let b = random(&[r, c], &mut rng);
        let w = random(&[c, 3], &mut rng);
        let bias = random(&[3], &mut rng);
        out.push(op(format!("linear[{tag}]"), vec![a.clone(), w.clone(), bias.clone()], move |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y, seed)
        }));
        out.push(op(format!("add[{tag}]"), vec![a.clone(), b.clone()], move |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, seed)
        }));
        out.push(op(format!("sub[{tag}]"), vec![a.clone(), b.clone()], move |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, seed)
        }));
        out.push(op(format!("mul[{tag}]"), vec![a.clone(), b.clone()], move |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, seed)
        }));
        out.push(op(format!("scale[{tag}]"), vec![a.clone()], move |t, v| {
            let y = t.scale(v[0], -1.7)?;
            project(t, y, seed)
        }));
        let s = random(&[r], &mut rng);
        out.push(op(format!("mul_rows[{tag}]"), vec![a.clone(), s], move |t, v| {
            let y = t.mul_rows(v[0], v[1])?;
            project(t, y, seed)
        }));
        for axis in 0..2 {
            out.push(op(format!("concat{axis}[{tag}]"), vec![a.clone(), b.clone()], move |t, v| {
                let y = t.concat(&[v[0], v[1]], axis)?;
                project(t, y, seed)
            }));
        }
        out.push(op(format!("reshape[{tag}]"), vec![a.clone()], move |t, v| {
            let y = t.reshape(v[0], &[c, r])?;
            project(t, y, seed)
        }));
        let idx: Arc<[usize]> = Arc::from(vec![0, r - 1, 0, r / 2]);
        out.push(op(format!("gather_rows[{tag}]"), vec![a.clone()], move |t, v| {
            let y = t.gather_rows(v[0], idx.clone())?;
            project(t, y, seed)
        }));
        out.push(op(format!("leaky_relu[{tag}]"), vec![a.clone()], move |t, v| {
            let y = t.leaky_relu(v[0], 0.2)?;
            project(t, y, seed)
        }));
        out.push(op(format!("sigmoid[{tag}]"), vec![a.clone()], move |t, v| {
            let y = t.sigmoid(v[0])?;
            project(t, y, seed)
        }));
        for axis in 0..2 {
            out.push(op(format!("softmax_axis{axis}[{tag}]"), vec![a.clone()], move |t, v| {
                let y = t.scale(v[0], 3.0)?;
                let y = t.softmax_axis(y, axis)?;
                project(t, y, seed)
            }));
        }
        let cube = random(&[r, 3, c], &mut rng);
        for axis in 0..3 {
            for pool in [Pool::Max, Pool::Mean, Pool::Sum] {
                let name = format!("{}_axis{axis}[{r}x3x{c}]", crate::baselines::pool_name(pool));
                out.push(op(name, vec![cube.clone()], move |t, v| {
                    let y = t.pool_axis(v[0], axis, pool)?;
                    project(t, y, seed)
                }));
            }
        }
        let gamma = random(&[c], &mut rng);
        let beta = random(&[c], &mut rng);
        out.push(op(
            format!("batch_norm_train[{tag}]"),
            vec![a.clone(), gamma.clone(), beta.clone()],
            move |t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, true, None)?;
                project(t, y, seed)
            },
        ));
        let (rm, rv) = (vec![0.1; c], vec![0.7; c]);
        out.push(op(
            format!("batch_norm_eval[{tag}]"),
            vec![a.clone(), gamma.clone(), beta.clone()],
            move |t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, false, Some((&rm, &rv)))?;
                project(t, y, seed)
            },
        ));
        out.push(op(
            format!("batch_norm_act[{tag}]"),
            vec![a.clone(), gamma.clone(), beta.clone()],
            move |t, v| {
                let (y, _) = t.batch_norm_act(v[0], v[1], v[2], 1e-5, true, None, 0.2)?;
                project(t, y, seed)
            },
        ));
        out.push(op(format!("dropout[{tag}]"), vec![a.clone()], move |t, v| {
            let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
            let y = t.dropout(v[0], 0.5, true, &mut drop_rng)?;
            project(t, y, seed)
        }));
        let labels: Vec<usize> = (0..r).map(|i| i % c).collect();
        out.push(op(format!("cross_entropy[{tag}]"), vec![a.clone()], move |t, v| {
            t.cross_entropy(v[0], &labels)
        }));
        out.push(op(format!("sum_all[{tag}]"), vec![a.clone()], |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum_all(y)
        }));
        let q = random(&[r, 4], &mut rng);
        out.push(op(format!("outer[{tag}]"), vec![q.clone(), a.clone()], move |t, v| {
            let y = t.outer(v[0], v[1])?;
            project(t, y, seed)
        }));
        let vals = random(&[r, 4, c], &mut rng);
        let wv = random(&[c, 4 * c], &mut rng);
        let bv = random(&[4 * c], &mut rng);
        for pool in [Pool::Max, Pool::Mean, Pool::Sum] {
            let pn = crate::baselines::pool_name(pool);
            out.push(op(
                format!("channel_encode_{pn}[{tag}]"),
                vec![q.clone(), a.clone(), vals.clone()],
                move |t, v| {
                    let y = t.channel_encode(v[0], v[1], v[2], pool)?;
                    project(t, y, seed)
                },
            ));
            out.push(op(
                format!("channel_encode_mapped_{pn}[{tag}]"),
                vec![q.clone(), a.clone(), wv.clone(), bv.clone()],
                move |t, v| {
                    let y = t.channel_encode_mapped(v[0], v[1], v[2], Some(v[3]), pool)?;
                    project(t, y, seed)
                },
            ));
        }
        let wedge = random(&[2 * c, 3], &mut rng);
        let center: Arc<[usize]> = Arc::from((0..2 * r).map(|i| i % r).collect::<Vec<_>>());
        let nbr: Arc<[usize]> = Arc::from((0..2 * r).map(|i| (i * 7 + 1) % r).collect::<Vec<_>>());
        out.push(op(format!("edge_linear[{tag}]"), vec![a.clone(), wedge, bias.clone()], move |t, v| {
            let y = t.edge_linear(v[0], v[1], Some(v[2]), center.clone(), nbr.clone())?;
            project(t, y, seed)
        }));
    }
    out
}

/// Checks `body` with respect to `extra` inputs and every trainable tensor
/// of `params`, all bound as tape leaves.
fn model_target(
    name: String,
    params: ModelParams<f64>,
    extra: Vec<Tensor<f64>>,
    seed: u64,
    body: impl Fn(&mut Forward<'_, f64>, &[Var]) -> Result<Var> + 'static,
) -> Target {
    let ids: Vec<ParamId> = params.trainable().collect();
    let mut inputs = extra.clone();
    inputs.extend(ids.iter().map(|&id| params.get(id).clone()));
    let n_extra = extra.len();
    let f = move |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let bound: Vec<(ParamId, Var)> = ids.iter().copied().zip(vars[n_extra..].iter().copied()).collect();
        let mut fwd = Forward::with_bound(std::mem::take(tape), &params, &bound, Mode::Train, seed);
        let result = body(&mut fwd, &vars[..n_extra]).and_then(|y| project(&mut fwd.tape, y, seed));
        *tape = fwd.into_parts().0;
        result
    };
    Target {
        name,
        inputs,
        f: Box::new(f),
    }
}

/// Two clouds of eight points with a coordinate kNN graph.
fn layer_fixture(seed: u64) -> (Tensor<f64>, Tensor<f64>, BatchNeighbors) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = random(&[16, 3], &mut rng);
    let feats = random(&[16, 3], &mut rng);
    let graph = batch_knn(&coords, 2, 4).expect("fixture graph");
    (coords, feats, graph)
}

fn layer_targets() -> Vec<Target> {
    let mut variants: Vec<LayerVariant> = [Pool::Max, Pool::Mean, Pool::Sum].map(LayerVariant::tce).to_vec();
    variants.extend(
        [LayerKind::GraphConv, LayerKind::ChannelAttention, LayerKind::PointAttention].map(LayerVariant::of),
    );
    variants
        .into_iter()
        .enumerate()
        .map(|(i, variant)| {
            let seed = 200 + i as u64;
            let (coords, feats, graph) = layer_fixture(seed);
            let mut params = ModelParams::new();
            let layer = EncoderLayer::build(&mut ParamBuilder::new(&mut params, seed), "layer", variant, 3, 5, 4)
                .expect("layer builds");
            model_target(variant.label(), params, vec![feats], seed, move |fwd, v| {
                let c = fwd.tape.constant(coords.clone())?;
                layer.forward(fwd, c, v[0], &graph)
            })
        })
        .collect()
}

/// Widths small enough for element-wise differencing.
pub fn tiny_network(task: Task) -> NetworkConfig {
    let mut c = match task {
        Task::Classification => NetworkConfig::classification(3),
        Task::Segmentation => NetworkConfig::segmentation(4),
    };
    c.k = 4;
    c.encoder_widths = vec![4, 4];
    c.extractor_widths = vec![5, 6];
    c.embed_dim = 8;
    c.head_widths = vec![6];
    c.fps_ratio = 0.5;
    c
}

fn network_targets() -> Vec<Target> {
    [Task::Classification, Task::Segmentation]
        .into_iter()
        .enumerate()
        .map(|(i, task)| {
            let seed = 300 + i as u64;
            let model = Model::<f64>::new(tiny_network(task), seed).expect("tiny network builds");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let coords = random(&[24, 3], &mut rng);
            let Model { config, arch, params } = model;
            let shell = Model {
                config,
                arch,
                params: ModelParams::new(),
            };
            model_target(format!("{task}-network"), params, Vec::new(), seed, move |fwd, _| {
                shell.forward(fwd, &coords, 2)
            })
        })
        .collect()
}

/// Runs the checks of `scope`.
pub fn check_scope(scope: Scope, eps: f64, tol: f64) -> Result<Vec<TargetReport>> {
    let targets = match scope {
        Scope::Op => op_targets(),
        Scope::Layer => layer_targets(),
        Scope::Network => network_targets(),
    };
    targets
        .into_iter()
        .map(|t| {
            let report = grad_check(&t.f, &t.inputs, eps, tol)?;
            Ok(TargetReport { target: t.name, report })
        })
        .collect()
}

//! Named parameter storage and the forward context that binds it to a tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{BatchNormStats, Gradients, Scalar, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in each batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable and counted.
    Weight,
    /// Running statistics: saved with the model, never differentiated.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered, uniquely named tensors of a model.
#[derive(Clone, Debug, Default)]
pub struct ModelParams<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Internal(format!("duplicate parameter name {name}")));
        }
        self.entries.push(ParamEntry { name, tensor, kind });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].kind == ParamKind::Weight)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.tensor.shape() != tensor.shape() {
            return Err(dim_err(
                "set_param",
                format!("{}: {:?} vs {:?}", entry.name, entry.tensor.shape(), tensor.shape()),
            ));
        }
        entry.tensor = tensor;
        Ok(())
    }

    /// Total element count of learnable tensors.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Blends batch statistics into running statistics:
    /// `running ← m·running + (1 − m)·batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: f64) -> Result<()> {
        let m = T::from_f64_lossy(momentum);
        let keep = T::one() - m;
        for u in updates {
            for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let blended: Vec<T> = self
                    .get(id)
                    .data()
                    .iter()
                    .zip(batch)
                    .map(|(&r, &b)| m * r + keep * b)
                    .collect();
                let shape = self.get(id).shape().to_vec();
                self.set(id, Tensor::new(shape, blended)?)?;
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    kind: e.kind,
                })
                .collect(),
        }
    }

    /// Bitwise equality of names, kinds and values.
    pub fn same_as(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.kind == b.kind
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
            })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

/// Linear map followed by batch norm and LeakyReLU.
#[derive(Clone, Copy, Debug)]
pub struct DenseParams {
    pub linear: LinearParams,
    pub bn: BnParams,
}

/// Allocates parameters with deterministic initialization.
pub struct ParamBuilder<'a, T> {
    params: &'a mut ModelParams<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(params: &'a mut ModelParams<T>, seed: u64) -> Self {
        Self {
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(self.rng.random_range(-bound..bound)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches generated length")
    }

    fn add(&mut self, name: String, tensor: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        self.params.add(name, tensor, kind)
    }

    /// `U(−1/√fan_in, 1/√fan_in)` for weight and bias.
    pub fn linear(&mut self, name: &str, din: usize, dout: usize, bias: bool) -> Result<LinearParams> {
        if din == 0 || dout == 0 {
            return Err(Error::Config(format!("{name}: zero-width linear {din}->{dout}")));
        }
        let bound = 1.0 / (din as f64).sqrt();
        let w = self.uniform(&[din, dout], bound);
        let w = self.add(format!("{name}.weight"), w, ParamKind::Weight)?;
        let b = if bias {
            let b = self.uniform(&[dout], bound);
            Some(self.add(format!("{name}.bias"), b, ParamKind::Weight)?)
        } else {
            None
        };
        Ok(LinearParams { w, b })
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> Result<BnParams> {
        Ok(BnParams {
            gamma: self.add(format!("{name}.gamma"), Tensor::filled(&[c], T::one()), ParamKind::Weight)?,
            beta: self.add(format!("{name}.beta"), Tensor::zeros(&[c]), ParamKind::Weight)?,
            mean: self.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer)?,
            var: self.add(format!("{name}.running_var"), Tensor::filled(&[c], T::one()), ParamKind::Buffer)?,
        })
    }

    pub fn dense(&mut self, name: &str, din: usize, dout: usize) -> Result<DenseParams> {
        Ok(DenseParams {
            linear: self.linear(name, din, dout, true)?,
            bn: self.batch_norm(&format!("{name}.bn"), dout)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchNormStats<T>,
}

/// One forward pass: a tape, the parameters it reads, and the mode.
pub struct Forward<'p, T> {
    pub tape: Tape<T>,
    params: &'p ModelParams<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    rng: ChaCha8Rng,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'p, T: Scalar> Forward<'p, T> {
    /// `dropout_seed` drives the dropout masks of this pass.
    pub fn new(params: &'p ModelParams<T>, mode: Mode, track_grads: bool, dropout_seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            mode,
            track_grads,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
            bn_updates: Vec::new(),
        }
    }

    /// Continues on an existing tape, with `vars` standing in for parameters.
    pub fn with_bound(
        tape: Tape<T>,
        params: &'p ModelParams<T>,
        vars: &[(ParamId, Var)],
        mode: Mode,
        dropout_seed: u64,
    ) -> Self {
        let mut f = Self::new(params, mode, true, dropout_seed);
        f.tape = tape;
        for &(id, v) in vars {
            f.bound[id.0] = Some(v);
        }
        f
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn params(&self) -> &'p ModelParams<T> {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let trainable = self.params.entries[id.0].kind == ParamKind::Weight;
        let v = self
            .tape
            .leaf(self.params.get(id).clone(), self.track_grads && trainable)?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn linear(&mut self, p: &LinearParams, x: Var) -> Result<Var> {
        let w = self.param(p.w)?;
        let b = p.b.map(|b| self.param(b)).transpose()?;
        self.tape.linear(x, w, b)
    }

    pub fn batch_norm(&mut self, p: &BnParams, x: Var) -> Result<Var> {
        self.normalize(p, x, None)
    }

    pub fn activation(&mut self, x: Var) -> Result<Var> {
        self.tape.leaky_relu(x, T::from_f64_lossy(LEAKY_SLOPE))
    }

    /// Batch norm then LeakyReLU, as one tape op.
    pub fn norm_act(&mut self, p: &BnParams, x: Var) -> Result<Var> {
        self.normalize(p, x, Some(T::from_f64_lossy(LEAKY_SLOPE)))
    }

    fn normalize(&mut self, p: &BnParams, x: Var, slope: Option<T>) -> Result<Var> {
        let gamma = self.param(p.gamma)?;
        let beta = self.param(p.beta)?;
        let eps = T::from_f64_lossy(BN_EPS);
        let train = self.training();
        let params = self.params;
        let running = (!train).then(|| (params.get(p.mean).data(), params.get(p.var).data()));
        let (y, stats) = match slope {
            Some(slope) => self.tape.batch_norm_act(x, gamma, beta, eps, train, running, slope)?,
            None => self.tape.batch_norm(x, gamma, beta, eps, train, running)?,
        };
        if let Some(stats) = stats {
            self.bn_updates.push(BnUpdate {
                mean: p.mean,
                var: p.var,
                stats,
            });
        }
        Ok(y)
    }

    pub fn dense(&mut self, p: &DenseParams, x: Var) -> Result<Var> {
        let y = self.linear(&p.linear, x)?;
        self.norm_act(&p.bn, y)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let train = self.training();
        self.tape.dropout(x, rate, train, &mut self.rng)
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    /// Gradients of every parameter leaf created by this pass.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, Vec<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.take(v).map(|g| (ParamId(i), g))))
            .collect()
    }

    pub fn into_parts(self) -> (Tape<T>, Vec<BnUpdate<T>>) {
        (self.tape, self.bn_updates)
    }
}

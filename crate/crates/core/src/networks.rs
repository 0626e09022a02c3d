//! Classification and segmentation networks.
//!
//! Both start with two channel-encoding layers on the full cloud. A feature
//! space kNN graph is rebuilt from the input of every layer. Classification
//! keeps all points; segmentation samples a subset with FPS, runs the graph
//! convolutions there and interpolates back.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::baselines::{EdgeConvParams, EncoderLayer, LayerVariant};
use crate::error::{dim_err, Error, Result};
use crate::neighborhood::{apply_interpolation, batch_knn, fps, interpolation_plan, BatchNeighbors};
use crate::params::{DenseParams, Forward, LinearParams, Mode, ModelParams, ParamBuilder};
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classification,
    Segmentation,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Segmentation => "segmentation",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" | "cls" => Ok(Task::Classification),
            "segmentation" | "seg" => Ok(Task::Segmentation),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub task: Task,
    /// Classes, or part labels for segmentation.
    pub num_classes: usize,
    pub k: usize,
    pub variant: LayerVariant,
    pub encoder_widths: Vec<usize>,
    pub extractor_widths: Vec<usize>,
    /// Width of the shared embedding before global pooling (classification).
    pub embed_dim: usize,
    pub head_widths: Vec<usize>,
    pub fps_ratio: f64,
    pub fps_start: usize,
    pub dropout: f64,
}

impl NetworkConfig {
    pub fn classification(num_classes: usize) -> Self {
        Self {
            task: Task::Classification,
            num_classes,
            k: crate::neighborhood::DEFAULT_K,
            variant: LayerVariant::default(),
            encoder_widths: vec![64, 64],
            extractor_widths: vec![128, 256],
            embed_dim: 1024,
            head_widths: vec![512, 256],
            fps_ratio: 0.25,
            fps_start: 0,
            dropout: 0.5,
        }
    }

    pub fn segmentation(num_parts: usize) -> Self {
        Self {
            task: Task::Segmentation,
            extractor_widths: vec![128, 256, 256],
            head_widths: vec![256, 128],
            ..Self::classification(num_parts)
        }
    }

    pub fn for_task(task: Task, num_classes: usize) -> Self {
        match task {
            Task::Classification => Self::classification(num_classes),
            Task::Segmentation => Self::segmentation(num_classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.encoder_widths.is_empty() || self.extractor_widths.is_empty() {
            return bad("encoder and extractor widths must be non-empty".into());
        }
        let widths = self
            .encoder_widths
            .iter()
            .chain(&self.extractor_widths)
            .chain(&self.head_widths);
        if widths.clone().any(|&w| w == 0) || self.embed_dim == 0 {
            return bad("layer widths must be positive".into());
        }
        if !(self.fps_ratio > 0.0 && self.fps_ratio <= 1.0) {
            return bad(format!("fps_ratio must lie in (0, 1], got {}", self.fps_ratio));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Points kept by FPS out of `n`.
    pub fn sampled_points(&self, n: usize) -> usize {
        ((n as f64 * self.fps_ratio).ceil() as usize).clamp(1, n)
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub hidden: Vec<DenseParams>,
    pub out: LinearParams,
}

impl Head {
    fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, cin: usize, widths: &[usize], classes: usize) -> Result<Self> {
        let mut hidden = Vec::new();
        let mut c = cin;
        for (i, &w) in widths.iter().enumerate() {
            hidden.push(b.dense(&format!("head.fc{i}"), c, w)?);
            c = w;
        }
        let out = b.linear("head.out", c, classes, true)?;
        Ok(Self { hidden, out })
    }

    fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, x: Var, dropout: f64) -> Result<Var> {
        let mut x = x;
        for d in &self.hidden {
            x = fwd.dense(d, x)?;
            x = fwd.dropout(x, dropout)?;
        }
        fwd.linear(&self.out, x)
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub encoders: Vec<EncoderLayer>,
    pub extractors: Vec<EdgeConvParams>,
    pub embed: DenseParams,
    pub head: Head,
}

#[derive(Clone, Debug)]
pub struct SegmenterParams {
    pub encoders: Vec<EncoderLayer>,
    pub extractors: Vec<EdgeConvParams>,
    pub head: Head,
}

#[derive(Clone, Debug)]
pub enum Arch {
    Classifier(ClassifierParams),
    Segmenter(SegmenterParams),
}

fn build_stack<T: Scalar>(
    b: &mut ParamBuilder<'_, T>,
    config: &NetworkConfig,
) -> Result<(Vec<EncoderLayer>, Vec<EdgeConvParams>)> {
    let mut c = 3;
    let mut encoders = Vec::new();
    for (i, &w) in config.encoder_widths.iter().enumerate() {
        encoders.push(EncoderLayer::build(b, &format!("enc{i}"), config.variant, c, w, config.k)?);
        c = w;
    }
    let mut extractors = Vec::new();
    for (i, &w) in config.extractor_widths.iter().enumerate() {
        extractors.push(EdgeConvParams::build(b, &format!("gc{i}"), c, w)?);
        c = w;
    }
    Ok((encoders, extractors))
}

impl Arch {
    pub fn build<T: Scalar>(params: &mut ModelParams<T>, config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new(params, seed);
        let (encoders, extractors) = build_stack(&mut b, config)?;
        let enc_out = *config.encoder_widths.last().expect("validated");
        Ok(match config.task {
            Task::Classification => {
                let concat = enc_out + config.extractor_widths.iter().sum::<usize>();
                let embed = b.dense("embed", concat, config.embed_dim)?;
                let head = Head::build(&mut b, config.embed_dim, &config.head_widths, config.num_classes)?;
                Arch::Classifier(ClassifierParams {
                    encoders,
                    extractors,
                    embed,
                    head,
                })
            }
            Task::Segmentation => {
                let concat = enc_out + config.extractor_widths.last().expect("validated");
                let head = Head::build(&mut b, concat, &config.head_widths, config.num_classes)?;
                Arch::Segmenter(SegmenterParams {
                    encoders,
                    extractors,
                    head,
                })
            }
        })
    }
}

fn check_input<T: Scalar>(coords: &Tensor<T>, batch: usize, k: usize) -> Result<usize> {
    if coords.rank() != 2 || coords.last_dim() != 3 {
        return Err(dim_err("network", format!("coordinates must be P x 3, got {:?}", coords.shape())));
    }
    if batch == 0 || coords.rows() % batch != 0 {
        return Err(dim_err("network", format!("{} points for a batch of {batch}", coords.rows())));
    }
    let n = coords.rows() / batch;
    if n < k + 1 {
        return Err(Error::Input(format!("clouds of {n} points cannot provide k={k} neighbors")));
    }
    Ok(n)
}

fn graph_of<T: Scalar>(fwd: &Forward<'_, T>, feats: Var, batch: usize, k: usize) -> Result<BatchNeighbors> {
    batch_knn(fwd.tape.value(feats), batch, k)
}

fn run_encoders<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    encoders: &[EncoderLayer],
    coords: Var,
    batch: usize,
    k: usize,
) -> Result<Var> {
    let mut feats = coords;
    for layer in encoders {
        let graph = graph_of(fwd, feats, batch, k)?;
        feats = layer.forward(fwd, coords, feats, &graph)?;
    }
    Ok(feats)
}

fn run_extractors<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    extractors: &[EdgeConvParams],
    input: Var,
    batch: usize,
    k: usize,
) -> Result<Vec<Var>> {
    let mut outs = Vec::with_capacity(extractors.len());
    let mut feats = input;
    for layer in extractors {
        let graph = graph_of(fwd, feats, batch, k)?;
        feats = crate::baselines::edgeconv_forward(fwd, feats, &graph, layer)?;
        outs.push(feats);
    }
    Ok(outs)
}

impl ClassifierParams {
    /// `coords: [B·N, 3]` → logits `[B, classes]`.
    pub fn forward<T: Scalar>(
        &self,
        fwd: &mut Forward<'_, T>,
        config: &NetworkConfig,
        coords: &Tensor<T>,
        batch: usize,
    ) -> Result<Var> {
        let n = check_input(coords, batch, config.k)?;
        let x = fwd.tape.constant(coords.clone())?;
        let enc = run_encoders(fwd, &self.encoders, x, batch, config.k)?;
        let mut parts = vec![enc];
        parts.extend(run_extractors(fwd, &self.extractors, enc, batch, config.k)?);
        let joined = fwd.tape.concat(&parts, 1)?;
        let embedded = fwd.dense(&self.embed, joined)?;
        let grouped = fwd.tape.reshape(embedded, &[batch, n, config.embed_dim])?;
        let global = fwd.tape.max_reduce_axis(grouped, 1)?;
        self.head.forward(fwd, global, config.dropout)
    }
}

impl SegmenterParams {
    /// `coords: [B·N, 3]` → per-point logits `[B·N, parts]`.
    pub fn forward<T: Scalar>(
        &self,
        fwd: &mut Forward<'_, T>,
        config: &NetworkConfig,
        coords: &Tensor<T>,
        batch: usize,
    ) -> Result<Var> {
        let n = check_input(coords, batch, config.k)?;
        let m = config.sampled_points(n);
        if m < config.k + 1 {
            return Err(Error::Input(format!(
                "{m} sampled points cannot provide k={} neighbors",
                config.k
            )));
        }
        if config.fps_start >= n {
            return Err(Error::Config(format!("fps_start {} outside a cloud of {n}", config.fps_start)));
        }
        let x = fwd.tape.constant(coords.clone())?;
        let skip = run_encoders(fwd, &self.encoders, x, batch, config.k)?;

        let mut selected = Vec::with_capacity(batch * m);
        let mut plans = Vec::with_capacity(batch);
        for b in 0..batch {
            let cloud = &coords.data()[b * n * 3..(b + 1) * n * 3];
            let sample = fps(cloud, m, config.fps_start)?;
            let coarse: Vec<T> = sample
                .selected
                .iter()
                .flat_map(|&i| cloud[i * 3..i * 3 + 3].iter().copied())
                .collect();
            plans.push((interpolation_plan(&coarse, cloud)?, b * m));
            selected.extend(sample.selected.iter().map(|&i| b * n + i));
        }
        let sub = fwd.tape.gather_rows(skip, Arc::from(selected))?;
        let outs = run_extractors(fwd, &self.extractors, sub, batch, config.k)?;
        let coarse = *outs.last().expect("validated");
        let fine = apply_interpolation(&mut fwd.tape, coarse, &plans)?;
        let joined = fwd.tape.concat(&[fine, skip], 1)?;
        self.head.forward(fwd, joined, config.dropout)
    }
}

/// Network configuration, layer layout and parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: NetworkConfig,
    pub arch: Arch,
    pub params: ModelParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut params = ModelParams::new();
        let arch = Arch::build(&mut params, &config, seed)?;
        Ok(Self { config, arch, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Builds the forward graph on `fwd`, which must read `self.params`.
    pub fn forward(&self, fwd: &mut Forward<'_, T>, coords: &Tensor<T>, batch: usize) -> Result<Var> {
        match &self.arch {
            Arch::Classifier(c) => c.forward(fwd, &self.config, coords, batch),
            Arch::Segmenter(s) => s.forward(fwd, &self.config, coords, batch),
        }
    }

    /// Evaluation-mode logits without gradient tracking.
    pub fn infer(&self, coords: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
        let mut fwd = Forward::new(&self.params, Mode::Eval, false, 0);
        let out = self.forward(&mut fwd, coords, batch)?;
        Ok(fwd.tape.value(out).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segmentation_defaults_differ_from_classification() {
        let c = NetworkConfig::segmentation(4);
        assert_eq!(c.extractor_widths, vec![128, 256, 256]);
        assert_eq!(c.head_widths, vec![256, 128]);
        assert_eq!(c.sampled_points(256), 64);
        assert_eq!(c.sampled_points(10), 3);
    }

    #[test]
    fn fps_ratio_is_validated() {
        let mut c = NetworkConfig::segmentation(4);
        c.fps_ratio = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.fps_ratio = 1.5;
        assert!(c.validate().is_err());
        c.fps_ratio = 1.0;
        assert!(c.validate().is_ok());
    }
}

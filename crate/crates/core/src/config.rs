//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::baselines::{parse_pool, pool_name, LayerKind};
use crate::data::{SynthSpec, DEFAULT_NOISE};
use crate::error::{Error, Result};
use crate::networks::{NetworkConfig, Task};
use crate::training::TrainConfig;

/// Where the training and test clouds come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic {
        points: usize,
        train_per_class: usize,
        test_per_class: usize,
        noise: f64,
        seed: u64,
    },
    /// A directory with `train/` and `test/` subdirectories of PCF1 files.
    Directory(PathBuf),
}

impl DataSource {
    pub fn synth_spec(&self, task: Task, train: bool) -> Option<SynthSpec> {
        match self {
            DataSource::Synthetic {
                points,
                train_per_class,
                test_per_class,
                noise,
                seed,
            } => Some(SynthSpec {
                task,
                per_class: if train { *train_per_class } else { *test_per_class },
                points: *points,
                noise: *noise,
                seed: *seed,
            }),
            DataSource::Directory(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataSource,
}

pub const KEYS: &[&str] = &[
    "task",
    "num_classes",
    "k",
    "layer",
    "pool",
    "encoder_widths",
    "extractor_widths",
    "embed_dim",
    "head_widths",
    "fps_ratio",
    "fps_start",
    "dropout",
    "epochs",
    "batch_size",
    "lr_start",
    "lr_end",
    "momentum",
    "seed",
    "scale_range",
    "translate_range",
    "early_stop",
    "augment",
    "bn_recalibration_batches",
    "eval_train",
    "data",
    "points",
    "train_per_class",
    "test_per_class",
    "noise",
    "data_seed",
];

impl RunConfig {
    /// Defaults for `task` on the synthetic benchmark.
    pub fn defaults(task: Task) -> Self {
        let classes = match task {
            Task::Classification => 4,
            Task::Segmentation => crate::data::parts::COUNT,
        };
        Self {
            network: NetworkConfig::for_task(task, classes),
            train: TrainConfig::default(),
            data: DataSource::Synthetic {
                points: 256,
                train_per_class: 64,
                test_per_class: 32,
                noise: DEFAULT_NOISE,
                seed: 1,
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, found {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("unknown key {key:?}"),
                });
            }
            if pairs.iter().any(|(_, k, _)| k == key) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate key {key:?}"),
                });
            }
            pairs.push((i + 1, key.to_string(), value.to_string()));
        }
        let task = match pairs.iter().find(|(_, k, _)| k == "task") {
            Some((line, _, v)) => v.parse::<Task>().map_err(|e| Error::Parse {
                line: *line,
                msg: e.to_string(),
            })?,
            None => Task::Classification,
        };
        let mut cfg = Self::defaults(task);
        for (line, key, value) in &pairs {
            cfg.set(key, value).map_err(|e| Error::Parse {
                line: *line,
                msg: format!("{key}: {e}"),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let n = &mut self.network;
        let t = &mut self.train;
        match key {
            "task" => {}
            "num_classes" => n.num_classes = num(value)?,
            "k" => n.k = num(value)?,
            "layer" => n.variant.kind = value.parse::<LayerKind>()?,
            "pool" => n.variant.pool = parse_pool(value)?,
            "encoder_widths" => n.encoder_widths = list(value)?,
            "extractor_widths" => n.extractor_widths = list(value)?,
            "embed_dim" => n.embed_dim = num(value)?,
            "head_widths" => n.head_widths = if value.is_empty() { Vec::new() } else { list(value)? },
            "fps_ratio" => n.fps_ratio = num(value)?,
            "fps_start" => n.fps_start = num(value)?,
            "dropout" => {
                t.dropout = num(value)?;
                n.dropout = t.dropout;
            }
            "epochs" => t.epochs = num(value)?,
            "batch_size" => t.batch_size = num(value)?,
            "lr_start" => t.lr_start = num(value)?,
            "lr_end" => t.lr_end = num(value)?,
            "momentum" => t.momentum = num(value)?,
            "seed" => t.seed = num(value)?,
            "scale_range" => t.scale_range = pair(value)?,
            "translate_range" => t.translate_range = pair(value)?,
            "early_stop" => t.early_stop = if value == "none" { None } else { Some(num(value)?) },
            "augment" => t.augment = flag(value)?,
            "bn_recalibration_batches" => t.bn_recalibration_batches = num(value)?,
            "eval_train" => t.eval_train = flag(value)?,
            "data" => {
                self.data = match value {
                    "synthetic" => match &self.data {
                        d @ DataSource::Synthetic { .. } => d.clone(),
                        DataSource::Directory(_) => Self::defaults(n.task).data,
                    },
                    path => DataSource::Directory(PathBuf::from(path)),
                }
            }
            "points" | "train_per_class" | "test_per_class" | "noise" | "data_seed" => {
                let DataSource::Synthetic {
                    points,
                    train_per_class,
                    test_per_class,
                    noise,
                    seed,
                } = &mut self.data
                else {
                    return Err(Error::Config("only synthetic data takes generator keys".into()));
                };
                match key {
                    "points" => *points = num(value)?,
                    "train_per_class" => *train_per_class = num(value)?,
                    "test_per_class" => *test_per_class = num(value)?,
                    "noise" => *noise = num(value)?,
                    _ => *seed = num(value)?,
                }
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if let DataSource::Synthetic {
            points,
            train_per_class,
            test_per_class,
            noise,
            ..
        } = &self.data
        {
            if *points <= self.network.k {
                return Err(Error::Config(format!("{points} points cannot provide k={} neighbors", self.network.k)));
            }
            if *train_per_class == 0 || *test_per_class == 0 {
                return Err(Error::Config("shapes per class must be positive".into()));
            }
            if !(*noise >= 0.0) {
                return Err(Error::Config(format!("noise {noise} must be non-negative")));
            }
        }
        Ok(())
    }

    /// Every effective key, one per line, in `KEYS` order. Parses back to
    /// the same configuration.
    pub fn echo(&self) -> String {
        let n = &self.network;
        let t = &self.train;
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("task", n.task.name().into());
        put("num_classes", n.num_classes.to_string());
        put("k", n.k.to_string());
        put("layer", n.variant.kind.name().into());
        put("pool", pool_name(n.variant.pool).into());
        put("encoder_widths", join(&n.encoder_widths));
        put("extractor_widths", join(&n.extractor_widths));
        put("embed_dim", n.embed_dim.to_string());
        put("head_widths", join(&n.head_widths));
        put("fps_ratio", n.fps_ratio.to_string());
        put("fps_start", n.fps_start.to_string());
        put("dropout", t.dropout.to_string());
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("lr_start", t.lr_start.to_string());
        put("lr_end", t.lr_end.to_string());
        put("momentum", t.momentum.to_string());
        put("seed", t.seed.to_string());
        put("scale_range", format!("{},{}", t.scale_range[0], t.scale_range[1]));
        put("translate_range", format!("{},{}", t.translate_range[0], t.translate_range[1]));
        put("early_stop", t.early_stop.map_or("none".into(), |v| v.to_string()));
        put("augment", t.augment.to_string());
        put("bn_recalibration_batches", t.bn_recalibration_batches.to_string());
        put("eval_train", t.eval_train.to_string());
        match &self.data {
            DataSource::Synthetic {
                points,
                train_per_class,
                test_per_class,
                noise,
                seed,
            } => {
                put("data", "synthetic".into());
                put("points", points.to_string());
                put("train_per_class", train_per_class.to_string());
                put("test_per_class", test_per_class.to_string());
                put("noise", noise.to_string());
                put("data_seed", seed.to_string());
            }
            DataSource::Directory(p) => put("data", p.display().to_string()),
        }
        s
    }
}

fn num<V: std::str::FromStr>(value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("cannot parse {value:?}: {e}")))
}

fn list(value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| num(v.trim())).collect()
}

fn pair(value: &str) -> Result<[f64; 2]> {
    let v: Vec<f64> = value.split(',').map(|v| num(v.trim())).collect::<Result<_>>()?;
    <[f64; 2]>::try_from(v).map_err(|_| Error::Config(format!("expected two numbers, found {value:?}")))
}

fn flag(value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!("expected a boolean, found {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let text = "task = seg\nk = 8 # neighbors\nlayer = cw_attn\npool = mean\nhead_widths = 32\nearly_stop = 90\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.network.k, 8);
        assert_eq!(cfg.network.variant.kind, LayerKind::ChannelAttention);
        assert_eq!(RunConfig::parse(&cfg.echo()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_duplicate_keys_fail() {
        assert!(matches!(RunConfig::parse("colour = red"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("k = 4\n\nk = 5"), Err(Error::Parse { line: 3, .. })));
    }
}

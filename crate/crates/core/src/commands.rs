//! The operations behind each command-line subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{pool_name, LayerKind, LayerVariant};
use crate::checkpoint::{load_model, save_model};
use crate::config::{DataSource, RunConfig};
use crate::data::{subsample, synth_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::networks::Model;
use crate::tensor::Pool;
use crate::training::{evaluate, metrics_csv, train, EpochReport, MetricsRow, TrainSummary};

pub const CONFIG_ECHO: &str = "config.echo";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const DEFAULT_ROBUSTNESS_POINTS: [usize; 4] = [1024, 512, 256, 128];
/// Seed of the subsampling stream in robustness sweeps.
pub const ROBUSTNESS_SEED: u64 = 0x5eed;

pub fn read_config(path: &Path) -> Result<RunConfig> {
    RunConfig::parse(&fs::read_to_string(path)?)
}

/// Test split for a `--data DIR` argument: `DIR/test` when present,
/// otherwise `DIR` itself.
pub fn load_test_dir(dir: &Path) -> Result<Dataset> {
    let sub = dir.join(Split::Test.name());
    let dir = if sub.is_dir() { sub } else { dir.to_path_buf() };
    Dataset::load_dir(&dir, Split::Test)
}

/// Train and test splits named by the configuration.
pub fn load_splits(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    let task = config.network.task;
    let (train_set, test_set) = match &config.data {
        DataSource::Synthetic { .. } => {
            let spec = |train| config.data.synth_spec(task, train).expect("synthetic source");
            (synth_dataset(&spec(true), Split::Train)?, synth_dataset(&spec(false), Split::Test)?)
        }
        DataSource::Directory(dir) => (
            Dataset::load_dir(&dir.join(Split::Train.name()), Split::Train)?,
            Dataset::load_dir(&dir.join(Split::Test.name()), Split::Test)?,
        ),
    };
    for d in [&train_set, &test_set] {
        if d.task != task {
            return Err(Error::Config(format!("{task} config given {} data", d.task)));
        }
        if d.num_classes() > config.network.num_classes {
            return Err(Error::Config(format!(
                "data has {} labels, network predicts {}",
                d.num_classes(),
                config.network.num_classes
            )));
        }
    }
    Ok((train_set, test_set))
}

/// Trains into `out`: the config echo, a CSV log rewritten after every
/// epoch, and the best and final checkpoints.
pub fn run_train(
    config: &RunConfig,
    out: &Path,
    mut progress: impl FnMut(&EpochReport),
) -> Result<TrainSummary> {
    config.validate()?;
    let (train_set, test_set) = load_splits(config)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_ECHO), config.echo())?;
    let mut model = Model::<f32>::new(config.network.clone(), config.train.seed)?;
    let mut rows: Vec<MetricsRow> = Vec::new();
    let summary = train(&mut model, &train_set, Some(&test_set), &config.train, |report, model, is_best| {
        rows.push(report.train.clone());
        rows.extend(report.test.clone());
        fs::write(out.join(TRAIN_LOG), metrics_csv(&rows))?;
        if is_best {
            save_model(&out.join(BEST_CHECKPOINT), config, model)?;
        }
        progress(report);
        Ok(())
    })?;
    save_model(&out.join(FINAL_CHECKPOINT), config, &model)?;
    Ok(summary)
}

/// Evaluates a checkpoint on `data`, or on the synthetic test split its
/// config describes.
pub fn run_eval(checkpoint: &Path, data: Option<&Path>) -> Result<MetricsRow> {
    let (config, model) = load_model::<f32>(checkpoint)?;
    let test = match data {
        Some(dir) => load_test_dir(dir)?,
        None => load_splits(&config)?.1,
    };
    evaluate(&model, &test, config.train.batch_size, 0, Split::Test)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub points: usize,
    pub accuracy: f64,
}

pub const ROBUSTNESS_HEADER: &str = "points,accuracy";

pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    let mut s = format!("{ROBUSTNESS_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{:.6}\n", r.points, r.accuracy));
    }
    s
}

/// Accuracy at each point count. Clouds are subsampled with a fixed stream;
/// a level at or above a cloud's size keeps it whole.
pub fn run_robustness(checkpoint: &Path, points: &[usize], data: Option<&Path>) -> Result<Vec<RobustnessRow>> {
    if points.is_empty() {
        return Err(Error::Config("no point counts requested".into()));
    }
    let (config, model) = load_model::<f32>(checkpoint)?;
    let test = match data {
        Some(dir) => load_test_dir(dir)?,
        None => load_splits(&config)?.1,
    };
    points
        .iter()
        .map(|&m| {
            if m <= config.network.k {
                return Err(Error::Config(format!("{m} points cannot provide k={} neighbors", config.network.k)));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(ROBUSTNESS_SEED ^ m as u64);
            let clouds = test
                .clouds
                .iter()
                .map(|c| if m >= c.len() { Ok(c.clone()) } else { subsample(c, m, &mut rng) })
                .collect::<Result<Vec<_>>>()?;
            let sparse = Dataset { clouds, ..test.clone() };
            let row = evaluate(&model, &sparse, config.train.batch_size, 0, Split::Test)?;
            Ok(RobustnessRow {
                points: m,
                accuracy: row.accuracy,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub study: &'static str,
    pub variant: LayerVariant,
    pub params: usize,
    pub epochs_run: usize,
    /// Final-epoch scores: accuracy, or instance mIoU for segmentation.
    pub train_score: f64,
    pub test_score: f64,
    pub best_test_score: f64,
}

pub const ABLATION_HEADER: &str = "study,layer,pool,params,epochs,train_score,test_score,best_test_score";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6}\n",
            r.study,
            r.variant.kind.name(),
            pool_name(r.variant.pool),
            r.params,
            r.epochs_run,
            r.train_score,
            r.test_score,
            r.best_test_score
        ));
    }
    s
}

/// The runs of an ablation: each layer kind with the configured pool, then
/// the channel encoder under every other pool.
pub fn ablation_plan(base: Pool, kinds: &[LayerKind], pools: &[Pool]) -> Vec<(&'static str, LayerVariant)> {
    let mut plan: Vec<(&'static str, LayerVariant)> = kinds
        .iter()
        .map(|&kind| ("layer", LayerVariant { kind, pool: base }))
        .collect();
    for &pool in pools {
        let v = LayerVariant {
            kind: LayerKind::Tce,
            pool,
        };
        if !plan.iter().any(|(_, p)| *p == v) {
            plan.push(("pool", v));
        }
    }
    plan
}

/// One training run per planned variant, each in its own subdirectory of
/// `out`, plus the comparison CSV.
pub fn run_ablate(
    config: &RunConfig,
    kinds: &[LayerKind],
    pools: &[Pool],
    out: &Path,
    mut progress: impl FnMut(&LayerVariant, &EpochReport),
) -> Result<Vec<AblationRow>> {
    if kinds.is_empty() && pools.is_empty() {
        return Err(Error::Config("nothing to ablate".into()));
    }
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for (study, variant) in ablation_plan(config.network.variant.pool, kinds, pools) {
        let mut cfg = config.clone();
        cfg.network.variant = variant;
        let dir: PathBuf = out.join(format!("{}-{}", variant.kind.name(), pool_name(variant.pool)));
        let params = Model::<f32>::new(cfg.network.clone(), cfg.train.seed)?.param_count();
        let summary = run_train(&cfg, &dir, |r| progress(&variant, r))?;
        let last_train = summary.rows.iter().rev().find(|r| r.split == Split::Train);
        let last_test = summary.rows.iter().rev().find(|r| r.split == Split::Test);
        rows.push(AblationRow {
            study,
            variant,
            params,
            epochs_run: summary.epochs_run,
            train_score: last_train.map_or(f64::NAN, MetricsRow::score),
            test_score: last_test.map_or(f64::NAN, MetricsRow::score),
            best_test_score: summary.best_score,
        });
        fs::write(out.join(ABLATION_CSV), ablation_csv(&rows))?;
    }
    Ok(rows)
}

/// Writes the synthetic splits of `config` under `out/train` and `out/test`.
pub fn run_synth(config: &RunConfig, out: &Path) -> Result<(usize, usize)> {
    if !matches!(config.data, DataSource::Synthetic { .. }) {
        return Err(Error::Config("synth needs a synthetic data source".into()));
    }
    let (train_set, test_set) = load_splits(config)?;
    train_set.save_dir(&out.join(Split::Train.name()))?;
    test_set.save_dir(&out.join(Split::Test.name()))?;
    Ok((train_set.len(), test_set.len()))
}

/// Trainable scalars of the configured network.
pub fn run_params(config: &RunConfig) -> Result<usize> {
    Ok(Model::<f32>::new(config.network.clone(), config.train.seed)?.param_count())
}

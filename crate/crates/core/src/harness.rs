//! Synthetic benchmark, ablation and sweep runners.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapter::{run_stream, write_records_csv, AdapterConfig, StepOutput, StreamItem, StreamRecord, StreamSummary};
use crate::error::{config, Error, Result};
use crate::metrics::mean;
use crate::nn::Model;
use crate::png::{save_png_normalized, save_prompt_png};
use crate::synth::{generate_dataset, generate_stream, shift_domain, DatasetShape, DomainSpec, SyntheticSample};
use crate::train::{evaluate, pretrain_source, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessSettings {
    pub shape: DatasetShape,
    pub source_samples: usize,
    pub heldout_samples: usize,
    pub samples_per_domain: usize,
    pub pretrain: TrainConfig,
    pub domains: Vec<DomainSpec>,
    pub seeds: Vec<u64>,
    pub rounds: usize,
}

impl Default for HarnessSettings {
    fn default() -> Self {
        Self {
            shape: DatasetShape::default(),
            source_samples: 200,
            heldout_samples: 50,
            samples_per_domain: 100,
            pretrain: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            domains: DomainSpec::benchmark_targets(),
            seeds: vec![0, 1, 2],
            rounds: 1,
        }
    }
}

/// Adapter settings plus an optional `"benchmark"` object for the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub adapter: AdapterConfig,
    pub benchmark: HarnessSettings,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            adapter: AdapterConfig {
                alpha: 0.08,
                ..AdapterConfig::default()
            },
            benchmark: HarnessSettings::default(),
        }
    }
}

impl BenchmarkConfig {
    /// Parses a flat object of adapter keys; harness keys go under
    /// `"benchmark"`. Missing keys take the benchmark defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text)?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| config("config must be a JSON object"))?;
        let defaults = Self::default();
        let benchmark = match obj.remove("benchmark") {
            Some(b) => serde_json::from_value(b)?,
            None => defaults.benchmark,
        };
        let mut merged = serde_json::to_value(&defaults.adapter)?;
        let m = merged.as_object_mut().expect("adapter config is an object");
        for (k, v) in obj.iter() {
            m.insert(k.clone(), v.clone());
        }
        for k in obj.keys() {
            if !serde_json::to_value(&defaults.adapter)?.as_object().unwrap().contains_key(k) {
                return Err(config(format!("unknown config key {k:?}")));
            }
        }
        let adapter: AdapterConfig = serde_json::from_value(merged)?;
        let cfg = Self { adapter, benchmark };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.adapter.validate()?;
        let b = &self.benchmark;
        if b.seeds.is_empty() || b.rounds == 0 || b.samples_per_domain == 0 || b.domains.is_empty() {
            return Err(config("benchmark needs seeds, rounds, domains and samples per domain"));
        }
        for d in &b.domains {
            d.validate()?;
        }
        Ok(())
    }
}

/// A model for one seed and how it was obtained.
#[derive(Debug, Clone)]
pub struct SeedModel {
    pub seed: u64,
    pub model: Model,
    pub train_dice: Option<f64>,
    pub heldout_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub train_dice: Option<f64>,
    pub heldout_dice: Option<f64>,
}

pub fn heldout_set(seed: u64, settings: &HarnessSettings) -> Result<Vec<SyntheticSample>> {
    generate_stream(seed, 1, settings.heldout_samples.max(1), settings.shape, "source")
}

/// Trains the toy network on the seed's source data.
pub fn pretrain_for_seed(seed: u64, settings: &HarnessSettings) -> Result<SeedModel> {
    let data = generate_dataset(seed, settings.source_samples, settings.shape)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut model = Model::toy(settings.shape.channels, &mut rng);
    let train = TrainConfig {
        seed,
        ..settings.pretrain
    };
    let report = pretrain_source(&mut model, &data, &train)?;
    let heldout = evaluate(&model, &heldout_set(seed, settings)?)?;
    Ok(SeedModel {
        seed,
        model,
        train_dice: Some(report.train_dice),
        heldout_dice: Some(heldout),
    })
}

/// Where each seed's model comes from.
#[derive(Debug, Clone)]
pub enum ModelSource {
    Pretrain,
    Fixed(Model),
}

impl ModelSource {
    pub fn from_path(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::Pretrain),
            Some(p) => Ok(Self::Fixed(Model::load(p)?)),
        }
    }

    pub fn resolve(&self, seed: u64, settings: &HarnessSettings) -> Result<SeedModel> {
        match self {
            Self::Pretrain => pretrain_for_seed(seed, settings),
            Self::Fixed(m) => Ok(SeedModel {
                seed,
                model: m.clone(),
                train_dice: None,
                heldout_dice: None,
            }),
        }
    }
}

/// The target stream for a seed: every domain in order, shifted copies of
/// fresh source-style samples.
pub fn target_stream(seed: u64, settings: &HarnessSettings) -> Result<Vec<StreamItem>> {
    let mut items = Vec::with_capacity(settings.domains.len() * settings.samples_per_domain);
    for (d, spec) in settings.domains.iter().enumerate() {
        for s in generate_stream(seed, 100 + d as u64, settings.samples_per_domain, settings.shape, &spec.name)? {
            let shifted = shift_domain(&s, spec)?;
            items.push(StreamItem {
                image: shifted.image,
                mask: Some(shifted.mask),
                domain: spec.name.clone(),
            });
        }
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub pretrain: PretrainSummary,
    pub model_checksum_before: String,
    pub model_checksum_after: String,
    pub source_only: f64,
    pub vptta: StreamSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub config: BenchmarkConfig,
    pub seeds: Vec<SeedResult>,
    pub source_only_mean: f64,
    pub vptta_mean: f64,
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub summary: BenchmarkSummary,
    pub records: Vec<(u64, Vec<StreamRecord>)>,
}

/// Dumps the adapted image and the normalized prompt of every step.
pub fn dump_step(dir: &Path, out: &StepOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let i = out.record.i;
    save_png_normalized(&out.adapted_image, dir.join(format!("step{i:05}_adapted.png")))?;
    save_prompt_png(&out.prompt, dir.join(format!("step{i:05}_prompt.png")))?;
    Ok(())
}

fn stream_for(
    seed_model: &SeedModel,
    cfg: &BenchmarkConfig,
    items: &[StreamItem],
    dump: Option<&Path>,
) -> Result<(StreamSummary, Vec<StreamRecord>, String)> {
    let adapter = AdapterConfig {
        seed: seed_model.seed,
        ..cfg.adapter.clone()
    };
    let dir: Option<PathBuf> = dump.map(|d| d.join(format!("seed{}", seed_model.seed)));
    let run = run_stream(items, &seed_model.model, &adapter, cfg.benchmark.rounds, |out| match &dir {
        Some(d) => dump_step(d, out),
        None => Ok(()),
    })?;
    Ok((run.summary, run.records, seed_model.model.checksum()))
}

/// Frozen-eval Dice over a stream.
pub fn source_only(model: &Model, items: &[StreamItem]) -> Result<f64> {
    let mut scores = Vec::with_capacity(items.len());
    for it in items {
        let mask = it.mask.as_ref().ok_or_else(|| config("source-only scoring needs masks"))?;
        scores.push(crate::metrics::dice(&model.predict(&it.image)?, mask)?);
    }
    Ok(mean(&scores))
}

pub fn run_benchmark(cfg: &BenchmarkConfig, models: &ModelSource, dump: Option<&Path>) -> Result<BenchmarkRun> {
    cfg.validate()?;
    let mut seeds = Vec::new();
    let mut records = Vec::new();
    for &seed in &cfg.benchmark.seeds {
        let sm = models.resolve(seed, &cfg.benchmark)?;
        let items = target_stream(seed, &cfg.benchmark)?;
        let before = sm.model.checksum();
        let src = source_only(&sm.model, &items)?;
        let (summary, recs, after) = stream_for(&sm, cfg, &items, dump)?;
        seeds.push(SeedResult {
            seed,
            pretrain: PretrainSummary {
                train_dice: sm.train_dice,
                heldout_dice: sm.heldout_dice,
            },
            model_checksum_before: before,
            model_checksum_after: after,
            source_only: src,
            vptta: summary,
        });
        records.push((seed, recs));
    }
    let source_only_mean = mean(&seeds.iter().map(|s| s.source_only).collect::<Vec<_>>());
    let vptta_mean = mean(&seeds.iter().map(|s| s.vptta.dice_post.unwrap_or(f64::NAN)).collect::<Vec<_>>());
    Ok(BenchmarkRun {
        summary: BenchmarkSummary {
            config: cfg.clone(),
            seeds,
            source_only_mean,
            vptta_mean,
            gap: vptta_mean - source_only_mean,
        },
        records,
    })
}

/// Writes `records_seed<N>.csv` per seed and `summary.json` into `dir`.
pub fn write_benchmark(run: &BenchmarkRun, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (seed, recs) in &run.records {
        let path = dir.join(format!("records_seed{seed}.csv"));
        write_records_csv(recs, std::fs::File::create(&path)?)?;
        written.push(path);
    }
    let path = dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&run.summary)?)?;
    written.push(path);
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    None,
    Prompt,
    PromptBank,
    PromptWarmup,
    Full,
}

impl AblationRow {
    pub const ALL: [Self; 5] = [Self::None, Self::Prompt, Self::PromptBank, Self::PromptWarmup, Self::Full];

    pub fn label(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Prompt => "prompt",
            Self::PromptBank => "prompt+bank",
            Self::PromptWarmup => "prompt+warmup",
            Self::Full => "prompt+bank+warmup",
        }
    }

    /// `(bank, warm-up)` switches, or `None` for the unadapted row.
    pub fn switches(self) -> Option<(bool, bool)> {
        match self {
            Self::None => None,
            Self::Prompt => Some((false, false)),
            Self::PromptBank => Some((true, false)),
            Self::PromptWarmup => Some((false, true)),
            Self::Full => Some((true, true)),
        }
    }

    pub fn apply(self, base: &AdapterConfig) -> Option<AdapterConfig> {
        self.switches().map(|(bank, warmup)| AdapterConfig {
            bank_capacity: if bank { base.bank_capacity.max(1) } else { 0 },
            warmup,
            ..base.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub label: String,
    pub per_seed: Vec<(u64, f64)>,
    pub mean_dice: f64,
}

pub fn run_ablation(cfg: &BenchmarkConfig, models: &ModelSource) -> Result<Vec<AblationResult>> {
    cfg.validate()?;
    let mut per_row: Vec<Vec<(u64, f64)>> = vec![Vec::new(); AblationRow::ALL.len()];
    for &seed in &cfg.benchmark.seeds {
        let sm = models.resolve(seed, &cfg.benchmark)?;
        let items = target_stream(seed, &cfg.benchmark)?;
        for (k, row) in AblationRow::ALL.iter().enumerate() {
            let dice = match row.apply(&cfg.adapter) {
                None => source_only(&sm.model, &items)?,
                Some(adapter) => {
                    let c = BenchmarkConfig {
                        adapter,
                        benchmark: cfg.benchmark.clone(),
                    };
                    stream_for(&sm, &c, &items, None)?.0.dice_post.unwrap_or(f64::NAN)
                }
            };
            per_row[k].push((seed, dice));
        }
    }
    Ok(AblationRow::ALL
        .iter()
        .zip(per_row)
        .map(|(&row, per_seed)| AblationResult {
            row,
            label: row.label().to_string(),
            mean_dice: mean(&per_seed.iter().map(|p| p.1).collect::<Vec<_>>()),
            per_seed,
        })
        .collect())
}

pub fn write_ablation_csv<W: std::io::Write>(rows: &[AblationResult], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let seeds: Vec<u64> = rows.first().map(|r| r.per_seed.iter().map(|p| p.0).collect()).unwrap_or_default();
    let mut header = vec!["configuration".to_string(), "bank".into(), "warmup".into(), "mean_dice".into()];
    header.extend(seeds.iter().map(|s| format!("dice_seed{s}")));
    out.write_record(&header)?;
    for r in rows {
        let (bank, warm) = r.row.switches().unwrap_or((false, false));
        let mut rec = vec![r.label.clone(), bank.to_string(), warm.to_string(), r.mean_dice.to_string()];
        rec.extend(r.per_seed.iter().map(|p| p.1.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "alpha")]
    Alpha,
    S,
    K,
    #[serde(rename = "tau")]
    Tau,
    #[serde(rename = "iterations")]
    Iterations,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "alpha" => Ok(Self::Alpha),
            "S" => Ok(Self::S),
            "K" => Ok(Self::K),
            "tau" => Ok(Self::Tau),
            "iterations" => Ok(Self::Iterations),
            _ => Err(config(format!(
                "unknown sweep parameter {name:?}; use alpha, S, K, tau or iterations"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::S => "S",
            Self::K => "K",
            Self::Tau => "tau",
            Self::Iterations => "iterations",
        }
    }

    pub fn apply(self, base: &AdapterConfig, value: f64) -> Result<AdapterConfig> {
        let count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
                Ok(v as usize)
            } else {
                Err(config(format!("{} needs a non-negative integer, got {v}", self.name())))
            }
        };
        let mut c = base.clone();
        match self {
            Self::Alpha => c.alpha = value,
            Self::S => c.bank_capacity = count(value)?,
            Self::K => c.support_size = count(value)?,
            Self::Tau => c.tau = value,
            Self::Iterations => c.iterations = count(value)?,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub mean_dice: f64,
    pub source_only: f64,
}

pub fn run_sweep(cfg: &BenchmarkConfig, models: &ModelSource, param: SweepParam, grid: &[f64]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if grid.is_empty() {
        return Err(config("sweep grid is empty"));
    }
    let configs = grid
        .iter()
        .map(|&v| param.apply(&cfg.adapter, v))
        .collect::<Result<Vec<_>>>()?;
    let mut dice = vec![Vec::new(); grid.len()];
    let mut src = Vec::new();
    for &seed in &cfg.benchmark.seeds {
        let sm = models.resolve(seed, &cfg.benchmark)?;
        let items = target_stream(seed, &cfg.benchmark)?;
        src.push(source_only(&sm.model, &items)?);
        for (k, adapter) in configs.iter().enumerate() {
            let c = BenchmarkConfig {
                adapter: adapter.clone(),
                benchmark: cfg.benchmark.clone(),
            };
            dice[k].push(stream_for(&sm, &c, &items, None)?.0.dice_post.unwrap_or(f64::NAN));
        }
    }
    let source = mean(&src);
    Ok(grid
        .iter()
        .zip(dice)
        .map(|(&value, d)| SweepRow {
            param: param.name().to_string(),
            value,
            mean_dice: mean(&d),
            source_only: source,
        })
        .collect())
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing_merges_defaults() {
        let cfg = BenchmarkConfig::from_json(r#"{"K": 8, "benchmark": {"seeds": [7], "rounds": 3}}"#).unwrap();
        assert_eq!(cfg.adapter.support_size, 8);
        assert_eq!(cfg.adapter.alpha, 0.08);
        assert_eq!(cfg.benchmark.seeds, vec![7]);
        assert_eq!(cfg.benchmark.rounds, 3);
        assert_eq!(cfg.benchmark.samples_per_domain, 100);
        assert!(BenchmarkConfig::from_json(r#"{"nope": 1}"#).is_err());
        assert!(BenchmarkConfig::from_json(r#"{"learning_rate": -1}"#).is_err());
        assert!(BenchmarkConfig::from_json("[]").is_err());
    }

    #[test]
    fn ablation_rows_switch_components() {
        let base = AdapterConfig::default();
        assert!(AblationRow::None.apply(&base).is_none());
        let p = AblationRow::Prompt.apply(&base).unwrap();
        assert_eq!((p.bank_capacity, p.warmup), (0, false));
        let f = AblationRow::Full.apply(&base).unwrap();
        assert_eq!((f.bank_capacity, f.warmup), (40, true));
    }

    #[test]
    fn sweep_params_apply() {
        let base = AdapterConfig::default();
        assert_eq!(SweepParam::S.apply(&base, 0.0).unwrap().bank_capacity, 0);
        assert_eq!(SweepParam::Tau.apply(&base, 9.0).unwrap().tau, 9.0);
        assert!(SweepParam::K.apply(&base, 1.5).is_err());
        assert!(SweepParam::Alpha.apply(&base, 0.0).is_err());
        assert!(SweepParam::parse("beta").is_err());
    }
}

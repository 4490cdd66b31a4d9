//! Stream-level behaviour on a briefly pretrained model and a short target stream.

use std::sync::OnceLock;

use fpta::adapter::{run_stream, write_records_csv, Adapter, AdapterConfig, StreamItem};
use fpta::harness::{
    heldout_set, pretrain_for_seed, run_ablation, run_sweep, source_only, target_stream, AblationRow, BenchmarkConfig,
    HarnessSettings, ModelSource, SweepParam,
};
use fpta::metrics::{dice, mean};
use fpta::nn::Model;
use fpta::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn settings() -> HarnessSettings {
    HarnessSettings {
        samples_per_domain: 12,
        seeds: vec![0],
        ..HarnessSettings::default()
    }
}

fn config() -> BenchmarkConfig {
    BenchmarkConfig {
        benchmark: settings(),
        ..BenchmarkConfig::default()
    }
}

fn model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| pretrain_for_seed(0, &settings()).unwrap().model)
}

fn stream() -> Vec<StreamItem> {
    target_stream(0, &settings()).unwrap()
}

fn csv_bytes(items: &[StreamItem], cfg: &AdapterConfig, rounds: usize) -> Vec<u8> {
    let run = run_stream(items, model(), cfg, rounds, |_| Ok(())).unwrap();
    let mut buf = Vec::new();
    write_records_csv(&run.records, &mut buf).unwrap();
    buf
}

#[test]
fn zero_shift_without_warmup_tracks_frozen_eval() {
    let cfg = AdapterConfig {
        warmup: false,
        ..config().adapter
    };
    let mut adapter = Adapter::new(model(), cfg).unwrap();
    let (mut frozen, mut adapted) = (Vec::new(), Vec::new());
    for s in heldout_set(0, &settings()).unwrap() {
        frozen.push(dice(&model().predict(&s.image).unwrap(), &s.mask).unwrap());
        let out = adapter.adapt(&s.image, Some(&s.mask), "source").unwrap();
        assert_eq!(out.record.lambda, 0.0);
        adapted.push(out.record.dice_post.unwrap());
    }
    let gap = (mean(&frozen) - mean(&adapted)).abs();
    assert!(gap < 0.02, "frozen {} adapted {}", mean(&frozen), mean(&adapted));
}

#[test]
fn replay_is_byte_identical() {
    let items = stream();
    let cfg = config().adapter;
    let a = csv_bytes(&items, &cfg, 1);
    assert_eq!(a, csv_bytes(&items, &cfg, 1));
    let header = String::from_utf8(a[..a.iter().position(|b| *b == b'\n').unwrap()].to_vec()).unwrap();
    assert_eq!(
        header,
        "i,domain,lambda,loss_pre,loss_post,dice_pre,dice_post,bank_size,prompt_dist,imag_residue"
    );
}

#[test]
fn shuffled_stream_differs_but_model_is_frozen() {
    let items = stream();
    let mut shuffled = items.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let before = model().checksum();
    let cfg = config().adapter;
    let a = run_stream(&items, model(), &cfg, 1, |_| Ok(())).unwrap();
    let b = run_stream(&shuffled, model(), &cfg, 1, |_| Ok(())).unwrap();
    assert_ne!(a.records, b.records);
    assert_eq!(model().checksum(), before);
}

#[test]
fn three_rounds_give_a_per_round_table() {
    let items = stream();
    let run = run_stream(&items, model(), &config().adapter, 3, |_| Ok(())).unwrap();
    let s = &run.summary;
    assert_eq!(s.rounds, 3);
    assert_eq!(s.steps, 3 * items.len());
    assert_eq!(s.per_round.len(), 3);
    for (r, round) in s.per_round.iter().enumerate() {
        assert_eq!(round.round, r + 1);
        let names: Vec<_> = round.domains.iter().map(|d| d.domain.as_str()).collect();
        assert_eq!(names, ["dim", "washed", "gamma", "tinted"]);
        assert!(round.domains.iter().all(|d| d.steps == 12));
    }
    let degradation = s.per_round[0].dice_post.unwrap() - s.dice_post.unwrap();
    assert!((s.degradation.unwrap() - degradation).abs() < 1e-12);
    // the bank persists, so later rounds start warm
    assert_eq!(run.records[items.len()].bank_size, 40);
}

#[test]
fn thousand_steps_leave_the_model_untouched() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let m = Model::toy(3, &mut r);
    let before = m.checksum();
    let cfg = AdapterConfig {
        alpha: 0.2,
        ..AdapterConfig::default()
    };
    let mut adapter = Adapter::new(&m, cfg).unwrap();
    for _ in 0..1000 {
        adapter.adapt(&Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut r), None, "x").unwrap();
    }
    assert_eq!(adapter.model().checksum(), before);
    assert_eq!(m.checksum(), before);
}

#[test]
fn ablation_none_is_source_only_and_s0_is_no_bank() {
    let cfg = config();
    let fixed = ModelSource::Fixed(model().clone());
    let rows = run_ablation(&cfg, &fixed).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0].row, AblationRow::None);
    assert_eq!(rows[0].mean_dice, source_only(model(), &stream()).unwrap());

    let sweep = run_sweep(&cfg, &fixed, SweepParam::S, &[0.0]).unwrap();
    let no_bank = rows.iter().find(|r| r.row == AblationRow::PromptWarmup).unwrap();
    assert_eq!(sweep[0].mean_dice, no_bank.mean_dice);
}

#[test]
fn alpha_grid_gives_one_row_per_value() {
    let mut cfg = config();
    cfg.benchmark.samples_per_domain = 3;
    let grid = [0.005, 0.01, 0.05, 0.1];
    let rows = run_sweep(&cfg, &ModelSource::Fixed(model().clone()), SweepParam::Alpha, &grid).unwrap();
    assert_eq!(rows.len(), 4);
    for (row, v) in rows.iter().zip(grid) {
        assert_eq!(row.param, "alpha");
        assert_eq!(row.value, v);
        assert!((0.0..=1.0).contains(&row.mean_dice));
    }
}

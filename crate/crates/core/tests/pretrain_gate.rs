//! Full-length source pretraining for three seeds. Slow: about two minutes per seed.

use fpta::harness::{pretrain_for_seed, HarnessSettings};
use fpta::train::TrainConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[test]
fn thirty_epochs_reach_the_dice_gates() {
    let settings = HarnessSettings {
        pretrain: TrainConfig {
            epochs: 30,
            learning_rate: 0.05,
            ..TrainConfig::default()
        },
        ..HarnessSettings::default()
    };
    for seed in 0..3 {
        let sm = pretrain_for_seed(seed, &settings).unwrap();
        let (train, held) = (sm.train_dice.unwrap(), sm.heldout_dice.unwrap());
        eprintln!("seed {seed}: train {train:.4} held-out {held:.4}");
        assert!(train >= 0.90, "seed {seed}: training Dice {train}");
        assert!(held >= 0.85, "seed {seed}: held-out Dice {held}");
        let bns: Vec<_> = sm.model.batch_norms().collect();
        assert_eq!(bns.len(), 4);
        for bn in bns {
            assert!(bn.sigma_s().data().iter().all(|s| *s > 0.0));
        }
    }
}

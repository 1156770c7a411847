use asdkit::dataset::Dataset;
use asdkit::encoder::{is_base_param, FinetuneMode};
use asdkit::synthdata::CorpusConfig;
use asdkit::train::{moving_average, train, train_items, TrainState};
use asdkit::RunConfig;
use diffcore::Checkpoint;

fn small_config(steps: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.encoder.num_layers = 1;
    cfg.encoder.model_dim = 32;
    cfg.encoder.ffn_dim = 64;
    cfg.encoder.embed_dim = 32;
    cfg.encoder.pool_hidden = 16;
    cfg.adapter.groups = 8;
    cfg.fclora.rank = 2;
    cfg.losses.bank_size = 128;
    cfg.losses.n_q = 16;
    cfg.training.steps = steps;
    cfg.training.batch_size = 16;
    cfg.training.warmup_steps = 50;
    cfg.training.lr = 1e-3;
    cfg.training.log_every = 0;
    cfg
}

fn tiny_data(cfg: &RunConfig) -> Dataset {
    let corpus = CorpusConfig {
        clip_seconds: 2.0,
        train_per_machine: 8,
        test_per_machine: 4,
        ..CorpusConfig::default()
    };
    Dataset::generate(&corpus, cfg.data.seed, &cfg.features).unwrap()
}

#[test]
fn loss_falls_over_500_steps_on_the_default_corpus() {
    let cfg = small_config(500);
    let data = Dataset::generate(&cfg.data.corpus, cfg.data.seed, &cfg.features).unwrap();
    let state = train(&cfg, &data, TrainState::init(&cfg, &data, None).unwrap(), |_, _| Ok(())).unwrap();
    let first = moving_average(&state.losses, 50, 50).unwrap();
    let last = moving_average(&state.losses, 500, 50).unwrap();
    assert!(last < first, "moving average {first} -> {last}");
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let full_cfg = small_config(12);
    let data = tiny_data(&full_cfg);
    let straight = train(&full_cfg, &data, TrainState::init(&full_cfg, &data, None).unwrap(), |_, _| Ok(())).unwrap();

    let half_cfg = small_config(6);
    let half = train(&half_cfg, &data, TrainState::init(&half_cfg, &data, None).unwrap(), |_, _| Ok(())).unwrap();
    let bytes = half.to_checkpoint().unwrap().to_bytes().unwrap();
    let restored = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), &full_cfg).unwrap();
    assert_eq!(restored.step, 6);
    let resumed = train(&full_cfg, &data, restored, |_, _| Ok(())).unwrap();

    assert_eq!(resumed.losses, straight.losses);
    for (name, t) in straight.store.iter() {
        assert_eq!(resumed.store.get(name).unwrap().data(), t.data(), "{name}");
    }
    assert_eq!(resumed.bank, straight.bank);
}

#[test]
fn modes_differ_only_in_the_frozen_set() {
    let mut cfg = small_config(3);
    let data = tiny_data(&cfg);
    let full = TrainState::init(&cfg, &data, None).unwrap();
    cfg.fclora.frozen = true;
    let lora = TrainState::init(&cfg, &data, None).unwrap();
    assert_eq!((full.meta.mode, lora.meta.mode), (FinetuneMode::Full, FinetuneMode::Lora));

    let names: Vec<_> = full.store.names().cloned().collect();
    assert_eq!(names, lora.store.names().cloned().collect::<Vec<_>>());
    for n in &names {
        assert_eq!(full.store.get(n).unwrap(), lora.store.get(n).unwrap(), "{n}");
        assert!(!full.store.is_frozen(n));
        assert_eq!(lora.store.is_frozen(n), is_base_param(n), "{n}");
    }

    let initial = lora.store.clone();
    let after = train(&cfg, &data, lora, |_, _| Ok(())).unwrap();
    for n in &names {
        let same = after.store.get(n).unwrap() == initial.get(n).unwrap();
        if is_base_param(n) {
            assert!(same, "{n} moved in LoRA mode");
        }
    }
    assert!(names.iter().any(|n| !is_base_param(n) && after.store.get(n).unwrap() != initial.get(n).unwrap()));
}

#[test]
fn labeled_items_only_without_dlcl() {
    let mut cfg = small_config(1);
    cfg.data.mask_attributes = vec!["fan".into()];
    let data = tiny_data(&cfg);
    let state = TrainState::init(&cfg, &data, None).unwrap();
    let with = train_items(&cfg, &state.meta, &data).unwrap();
    assert!(with.iter().any(|i| i.label.is_none()));
    cfg.losses.use_dlcl = false;
    let state = TrainState::init(&cfg, &data, None).unwrap();
    let without = train_items(&cfg, &state.meta, &data).unwrap();
    assert!(without.iter().all(|i| i.label.is_some()));
    assert_eq!(with.len() - without.len(), with.iter().filter(|i| i.label.is_none()).count());
}

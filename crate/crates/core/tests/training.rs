use vlp_core::model::ModelConfig;
use vlp_core::numerics::Tensor;
use vlp_core::objectives::Task;
use vlp_core::pipeline::{
    generate_synthetic, Checkpoint, Dataset, Pretrainer, StepEvent, SyntheticSpec, TrainConfig, METRICS_HEADER,
};
use vlp_core::Error;

fn data(records: usize) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        records,
        topics: 2,
        vocab_size: 16,
        frame_dim: 4,
        min_frames: 2,
        max_frames: 4,
        min_tokens: 3,
        max_tokens: 6,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model = ModelConfig {
        hidden: 8,
        enc_blocks: 1,
        dec_blocks: 1,
        heads: 2,
        max_text: 8,
        max_frames: 4,
        vocab_size: 16,
        frame_dim: 4,
        ff_mult: 2,
        ..ModelConfig::default()
    };
    cfg.batch_size = 4;
    cfg.min_negatives = 2;
    cfg.steps = 8;
    cfg.seed = 11;
    cfg
}

#[test]
fn step_milestones_happen_in_order() {
    let mut trainer = Pretrainer::new(config(), &data(8)).unwrap();
    trainer.trace = true;
    trainer.train_step().unwrap();
    assert_eq!(
        trainer.events,
        [
            StepEvent::Augment,
            StepEvent::KeyForward,
            StepEvent::Losses,
            StepEvent::Backward,
            StepEvent::OptimizerStep,
            StepEvent::MomentumUpdate,
            StepEvent::QueuePush,
        ]
    );
}

#[test]
fn resume_with_queues_continues_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.rec");
    let ds = data(10);
    ds.save(&path).unwrap();
    let mut cfg = config();
    cfg.data = Some(path);
    cfg.include_queues = true;
    cfg.checkpoint_every = 4;

    let full = Pretrainer::new(cfg.clone(), &ds).unwrap().run(&dir.path().join("full")).unwrap();
    let ckpt = Checkpoint::load_for(&dir.path().join("full/step-4.ckpt"), &cfg.model).unwrap();
    assert_eq!(ckpt.step, 4);
    let resumed = Pretrainer::resume(cfg, &ds, ckpt).unwrap().run(&dir.path().join("resumed")).unwrap();

    assert_eq!(resumed.reports, full.reports[4..]);
    let full_log = std::fs::read_to_string(&full.metrics).unwrap();
    let resumed_log = std::fs::read_to_string(&resumed.metrics).unwrap();
    let (header, rest) = full_log.split_once('\n').unwrap();
    let tail: Vec<&str> = rest.lines().skip(4).collect();
    assert_eq!(resumed_log.lines().next(), Some(header));
    assert_eq!(resumed_log.lines().skip(1).collect::<Vec<_>>(), tail);
    assert_eq!(std::fs::read(&full.checkpoint).unwrap(), std::fs::read(&resumed.checkpoint).unwrap());
}

#[test]
fn metrics_log_has_a_header_and_one_line_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut trainer = Pretrainer::new(config(), &data(8)).unwrap();
    let summary = trainer.run(dir.path()).unwrap();
    let text = std::fs::read_to_string(&summary.metrics).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    let columns = METRICS_HEADER.split('\t').count();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 8);
    for (i, row) in rows.iter().enumerate() {
        let fields: Vec<&str> = row.split('\t').collect();
        assert_eq!(fields.len(), columns);
        assert_eq!(fields[0], (i + 1).to_string());
        assert!(fields[1..].iter().all(|f| f.parse::<f64>().unwrap().is_finite()));
    }
}

#[test]
fn empty_dataset_is_an_immediate_error() {
    let empty = Dataset::new(4, Vec::new()).unwrap();
    assert!(matches!(Pretrainer::new(config(), &empty), Err(Error::EmptyDataset)));
}

#[test]
fn non_finite_loss_names_the_task() {
    let mut trainer = Pretrainer::new(config(), &data(8)).unwrap();
    for (name, t) in trainer.params.iter_mut() {
        if name.starts_with("head.mfom.") {
            *t = Tensor::new(t.shape().to_vec(), vec![f64::NAN; t.numel()]).unwrap();
        }
    }
    let err = trainer.train_step().unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { task: "mfom" }), "{err}");
    assert!(err.to_string().contains("mfom"));
}

#[test]
fn without_contrastive_tasks_queues_stay_empty() {
    let mut cfg = config();
    cfg.tasks = vlp_core::objectives::TaskFlags::preset("M2").unwrap();
    let mut trainer = Pretrainer::new(cfg, &data(8)).unwrap();
    for _ in 0..3 {
        let r = trainer.train_step().unwrap();
        assert!(r.total.is_finite() && r.total > 0.0);
        assert!(!r.queues_warm);
        assert_eq!(r.losses[&Task::InterMfm], 0.0);
    }
    assert_eq!(trainer.queues.min_len(), 0);
    assert_eq!(trainer.queues.text.len() + trainer.queues.visual.len() + trainer.queues.frames.len(), 0);
}

#[test]
fn training_reduces_the_loss() {
    let mut cfg = config();
    cfg.learning_rate = 3e-3;
    let mut trainer = Pretrainer::new(cfg, &data(8)).unwrap();
    let first = trainer.train_step().unwrap().total;
    let mut last = first;
    for _ in 0..60 {
        last = trainer.train_step().unwrap().total;
    }
    assert!(last < first, "{first} -> {last}");
}

use td2net::config::RunConfig;
use td2net::eval::{Mode, Task};
use td2net::model::{derived_rng, RngPurpose};
use td2net::synthdata::{generate_dataset, GeneratedData};
use td2net::train::{run_training, Checkpoint, Trainer};
use td2net::Error;

fn toy_run(seed: u64, task: Task) -> RunConfig {
    let mut run = RunConfig::default().with_seed(seed);
    run.task = task;
    run.generator.num_videos = 20;
    run.generator.num_test_videos = 5;
    run.generator.frames_per_video = 4;
    run.generator.feature_dim = 16;
    run.generator.union_dim = 16;
    run.model.dtrans.dim = 8;
    run.model.dtrans.heads = 2;
    run.model.dtrans.temporal_depth = 1;
    run.model.dtrans.spatial_depth = 1;
    run.model.dtrans.top_k = 3;
    run.optim.lr = 2e-3;
    run.optim.epochs = 2;
    run.eval.k = vec![10];
    run.eval.modes = vec![Mode::With, Mode::No];
    run
}

fn data(run: &RunConfig) -> GeneratedData {
    generate_dataset(&run.generator).unwrap()
}

#[test]
fn second_epoch_has_lower_loss_on_average() {
    let (mut first, mut second) = (0.0, 0.0);
    for seed in 0..5 {
        let run = toy_run(seed, Task::PredCls);
        let d = data(&run);
        let out = run_training::<f64>(&run, &d.train, None, None, None).unwrap();
        assert_eq!(out.epochs.len(), 2);
        first += out.epochs[0].mean_loss;
        second += out.epochs[1].mean_loss;
    }
    assert!(second < first, "epoch 1 {} vs epoch 2 {}", first / 5.0, second / 5.0);
}

#[test]
fn zero_learning_rate_freezes_the_model() {
    for use_dtrans in [true, false] {
        let mut run = toy_run(3, Task::SgCls);
        run.model.use_dtrans = use_dtrans;
        run.optim.lr = 0.0;
        run.optim.weight_decay = 0.0;
        run.optim.epochs = 3;
        let d = data(&run);
        let before = Trainer::<f64>::new(&run, &d.train).unwrap();
        let out = run_training::<f64>(&run, &d.train, None, None, None).unwrap();
        assert_eq!(out.trainer.model.params, before.model.params);

        let videos = before.model.prepare_all(&d.train).unwrap();
        for (i, v) in videos.iter().enumerate() {
            let a = before.video_loss(v, &mut derived_rng(1, RngPurpose::Train, 1, i)).unwrap();
            let b = out.trainer.video_loss(v, &mut derived_rng(1, RngPurpose::Train, 1, i)).unwrap();
            assert_eq!(a, b);
        }
        if !use_dtrans {
            // Without the sampler the forward pass is deterministic; only the
            // summation order of the epoch mean changes.
            let l0 = out.epochs[0].mean_loss;
            assert!(out.epochs.iter().all(|e| (e.mean_loss - l0).abs() <= 1e-12 * l0.abs()));
        }
    }
}

/// Interrupts after one epoch, resumes from the saved checkpoint, and
/// compares every artifact with an uninterrupted two-epoch run. Both runs
/// evaluate on the same schedule so their logs line up record for record.
fn check_resume(with_test: bool) {
    let mut run = toy_run(4, Task::SgCls);
    run.eval.eval_every = 1;
    let d = data(&run);
    let test = with_test.then_some(&d.test);
    let full_dir = tempfile::tempdir().unwrap();
    let full = run_training::<f64>(&run, &d.train, test, Some(full_dir.path()), None).unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    let mut first = run.clone();
    first.optim.epochs = 1;
    run_training::<f64>(&first, &d.train, test, Some(part_dir.path()), None).unwrap();
    let ckpt = Checkpoint::<f64>::load(part_dir.path().join("checkpoint_epoch_1.json")).unwrap();
    let resumed = run_training::<f64>(&run, &d.train, test, Some(part_dir.path()), Some(ckpt)).unwrap();

    assert_eq!(resumed.trainer.model.params, full.trainer.model.params);
    assert_eq!(resumed.report, full.report);
    for file in ["checkpoint_epoch_2.json", "train_log.jsonl"] {
        let a = std::fs::read(full_dir.path().join(file)).unwrap();
        let b = std::fs::read(part_dir.path().join(file)).unwrap();
        assert!(a == b, "{file} differs after resume");
    }
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    check_resume(true);
    check_resume(false);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let run = toy_run(5, Task::PredCls);
    let d = data(&run);
    let out = run_training::<f64>(&run, &d.train, None, None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let ckpt = out.trainer.checkpoint();
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::<f64>::load(&path).unwrap();
    assert_eq!(loaded.params, ckpt.params);
    assert_eq!(loaded.optimizer, ckpt.optimizer);
    assert_eq!(loaded.epoch, 2);
}

#[test]
fn resuming_into_another_task_is_a_contract_error() {
    let run = toy_run(6, Task::SgCls);
    let d = data(&run);
    let mut one = run.clone();
    one.optim.epochs = 1;
    let ckpt = run_training::<f64>(&one, &d.train, None, None, None).unwrap().trainer.checkpoint();
    let other = toy_run(6, Task::PredCls);
    let err = run_training::<f64>(&other, &d.train, None, None, Some(ckpt)).err().unwrap();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

#[test]
fn non_finite_loss_names_the_video() {
    let run = toy_run(7, Task::PredCls);
    let mut d = data(&run);
    let victim = d.train.videos[5].id.clone();
    d.train.videos[5].frames[0].appearance[0] = f32::NAN;
    let err = run_training::<f64>(&run, &d.train, None, None, None).err().unwrap();
    assert!(matches!(err, Error::Numerics(_)), "{err}");
    assert!(err.to_string().contains(&victim), "{err}");
}

#[test]
fn same_seed_same_metrics() {
    let run = toy_run(8, Task::SgCls);
    let d = data(&run);
    let a = run_training::<f64>(&run, &d.train, Some(&d.test), None, None).unwrap();
    let b = run_training::<f64>(&run, &d.train, Some(&d.test), None, None).unwrap();
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&b.report).unwrap()
    );
}

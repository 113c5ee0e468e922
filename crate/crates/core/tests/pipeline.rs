mod common;

use mtmed3d::dataio::{load_case, synth_case, write_case, case_rng, PhantomSpec};
use mtmed3d::datamodel::Grade;
use mtmed3d::metrics::Efficiency;
use mtmed3d::pipeline::{
    evaluate_cases, five_fold_split, infer_case, load_checkpoint, save_checkpoint, train_run, Balance, MultiTaskModel,
    PipelineError, RunConfig, Trainer, Variant, NUM_FOLDS,
};
use std::collections::BTreeSet;

#[test]
fn config_yaml_roundtrip() {
    for cfg in [RunConfig::default(), RunConfig::smoke()] {
        let back = RunConfig::from_yaml(&cfg.to_yaml()).unwrap();
        assert_eq!(back, cfg);
        back.validate().unwrap();
    }
}

#[test]
fn partial_yaml_fills_defaults() {
    let cfg = RunConfig::from_yaml("seed: 9\nbalance:\n  method: mgda\n").unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.balance.method, Balance::Mgda);
    assert_eq!(cfg.balance.alpha, RunConfig::default().balance.alpha);
}

#[test]
fn invalid_overrides_are_rejected() {
    let bad: [fn(&mut RunConfig); 4] = [
        |c| c.fold = NUM_FOLDS,
        |c| c.device = "cuda".into(),
        |c| c.data.crop_size = [40; 3],
        |c| c.optim.batch_size = 0,
    ];
    for f in bad {
        let mut c = RunConfig::smoke();
        f(&mut c);
        assert!(matches!(c.validate(), Err(PipelineError::Config(_))));
    }
}

#[test]
fn folds_are_stratified_and_disjoint() {
    let mut ids: Vec<(String, Grade)> = (0..10).map(|i| (format!("H{i}"), Grade::Hgg)).collect();
    ids.extend((0..5).map(|i| (format!("L{i}"), Grade::Lgg)));
    let folds = five_fold_split(&ids, 3).unwrap();
    assert_eq!(folds.len(), NUM_FOLDS);
    let mut seen = BTreeSet::new();
    for f in &folds {
        let hgg = f.val.iter().filter(|id| id.starts_with('H')).count();
        assert_eq!((hgg, f.val.len() - hgg), (2, 1));
        assert_eq!(f.train.len() + f.val.len(), 15);
        assert!(f.val.iter().all(|v| !f.train.contains(v)));
        seen.extend(f.val.iter().cloned());
    }
    assert_eq!(seen.len(), 15);
    assert_eq!(five_fold_split(&ids, 3).unwrap(), folds);
}

#[test]
fn too_few_cases_of_a_grade_fail_to_split() {
    let ids: Vec<(String, Grade)> = (0..6)
        .map(|i| (format!("c{i}"), if i < 3 { Grade::Hgg } else { Grade::Lgg }))
        .collect();
    assert!(matches!(five_fold_split(&ids, 0), Err(PipelineError::Split(_))));
}

#[test]
fn checkpoint_reload_is_bit_exact() {
    let cfg = RunConfig::smoke();
    let model = MultiTaskModel::<f32>::new(&cfg.model, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    save_checkpoint(&path, &model, &cfg, None).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, cfg);
    let (a, b) = (model.store.named(), back.model.store.named());
    assert_eq!(a.len(), b.len());
    for ((na, pa), (nb, pb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert_eq!(pa.value(), pb.value(), "{na}");
    }
}

#[test]
fn cosine_schedule_endpoints() {
    use autograd::optim::cosine_factor;
    assert_eq!(cosine_factor(0, 100, 0.1), 1.0);
    assert!((cosine_factor(100, 100, 0.1) - 0.1).abs() < 1e-12);
    assert!((cosine_factor(50, 100, 0.0) - 0.5).abs() < 1e-12);
    assert!((cosine_factor(500, 100, 0.1) - 0.1).abs() < 1e-12);
}

#[test]
fn nan_input_aborts_training() {
    let cfg = RunConfig::smoke();
    let mut cases = common::phantoms(1, 32, 1);
    cases[0].image[[0, 3, 3, 3]] = f32::NAN;
    let model = MultiTaskModel::<f32>::new(&cfg.model, 0).unwrap();
    let mut t = Trainer::new(&cfg, model, &cases).unwrap();
    assert!(matches!(t.train_step(&[&cases[0]]), Err(PipelineError::NonFinite { .. })));
}

#[test]
fn empty_split_cannot_be_evaluated() {
    let model = MultiTaskModel::<f32>::new(&RunConfig::smoke().model, 0).unwrap();
    let e = Efficiency::new(0, 0, 0.0, 0);
    assert!(matches!(evaluate_cases(&model, &[], 95.0, e), Err(PipelineError::EmptySplit)));
}

#[test]
fn single_task_models_report_only_their_task() {
    let mut cfg = RunConfig::smoke();
    cfg.model.variant = Variant::DetOnly;
    let model = MultiTaskModel::<f32>::new(&cfg.model, 0).unwrap();
    let cases = common::phantoms(1, 32, 2);
    let (r, _) = evaluate_cases(&model, &cases, 95.0, Efficiency::new(0, 0, 0.0, 0)).unwrap();
    assert!(r.map_sweep.is_some() && r.dice.is_none() && r.acc.is_none());
}

#[test]
fn short_training_run_writes_log_and_checkpoints() {
    let mut cfg = RunConfig::smoke();
    cfg.optim.epochs = 1;
    cfg.optim.max_steps = Some(2);
    let cases = common::phantoms(3, 32, 4);
    let dir = tempfile::tempdir().unwrap();
    let out = train_run(&cfg, &cases[..2], &cases[2..], dir.path()).unwrap();
    assert_eq!(out.steps, 2);
    let mut log = csv::Reader::from_path(&out.log).unwrap();
    let header: Vec<String> = log.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(header, ["step", "L_seg", "L_cls", "L_det", "w1", "w2", "w3", "L_grad", "lr"]);
    assert_eq!(log.records().count(), 2);
    let report = out.best_report.expect("validation ran");
    assert!(report.is_complete(), "{report:?}");
    assert!(report.problems().is_empty());
    let ck = load_checkpoint(&out.last_checkpoint).unwrap();
    assert_eq!(ck.step(), 2);
    assert_eq!(ck.task_weights().map(|w| w.w.iter().sum::<f64>().round()), Some(3.0));
}

#[test]
fn inference_pastes_back_into_full_volume() {
    let mut cfg = RunConfig::smoke();
    cfg.data.crop_size = [32; 3];
    let spec = PhantomSpec::for_extent([36, 40, 34]);
    let case = synth_case(&spec, "Inf_1", &mut case_rng(0, "Inf_1"));
    let dir = tempfile::tempdir().unwrap();
    write_case(&case, &dir.path().join("Inf_1")).unwrap();
    let model = MultiTaskModel::<f32>::new(&cfg.model, 0).unwrap();
    let out_dir = dir.path().join("out");
    let out = infer_case(&model, &cfg, &dir.path().join("Inf_1"), "Inf_1", &out_dir).unwrap();
    assert!(out.grade.is_some());
    let seg = out.seg_path.expect("multi-task model segments");
    assert!(seg.exists());
    assert!(out_dir.join("Inf_1_detections.json").exists());
    assert!(out_dir.join("Inf_1_grade.json").exists());
    // the written label map has the input's full extent: reuse the reader via a case folder
    let reread = dir.path().join("reread");
    std::fs::create_dir_all(&reread).unwrap();
    for m in ["t1", "t1ce", "t2", "flair"] {
        std::fs::copy(
            dir.path().join("Inf_1").join(format!("Inf_1_{m}.nii.gz")),
            reread.join(format!("Inf_1_{m}.nii.gz")),
        )
        .unwrap();
    }
    std::fs::copy(&seg, reread.join("Inf_1_seg.nii.gz")).unwrap();
    let back = load_case(&reread, "Inf_1").unwrap();
    assert_eq!(back.spatial_shape(), [36, 40, 34]);
    // nothing outside the crop window
    let off = [2usize, 4, 1];
    for ((_, z, y, x), &v) in back.mask.indexed_iter() {
        let inside = z >= off[0] && z < off[0] + 32 && y >= off[1] && y < off[1] + 32 && x >= off[2] && x < off[2] + 32;
        assert!(inside || v == 0);
    }
}

use std::fs;
use std::path::Path;

use facade_risk::ingest::{self, Split, SplitAssignment};
use facade_risk::model::checkpoint;
use facade_risk::pipeline::{run_eval, run_ingest, run_pipeline, run_train, Inputs, PipelineConfig, StageStatus, WorkLayout};
use facade_risk::synthgen::{self, SynthSpec};

fn small_config(work: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_toml(
        "seed = 3\n[synth]\nn_properties = 40\ninvalid_fraction = 0.1\n[train]\nepochs = 1\nbatch_size = 16\n",
    )
    .unwrap();
    cfg.work_dir = work.to_path_buf();
    cfg
}

fn statuses(o: &facade_risk::pipeline::PipelineOutcome) -> Vec<StageStatus> {
    o.stages.iter().map(|(_, s)| *s).collect()
}

#[test]
fn rerun_skips_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let first = run_pipeline(&cfg).unwrap();
    assert!(statuses(&first).iter().all(|s| *s == StageStatus::Ran));
    let names: Vec<&str> = first.stages.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["synth", "ingest", "dedup", "split", "train", "eval"]);
    let second = run_pipeline(&cfg).unwrap();
    assert!(statuses(&second).iter().all(|s| *s == StageStatus::Skipped));

    let w = WorkLayout::new(tmp.path());
    for f in [w.split(), w.checkpoint(), w.loss_trace(), w.report(), w.stage("train").join("config.toml")] {
        assert!(f.exists(), "{} missing", f.display());
    }
}

#[test]
fn changed_setting_reruns_only_downstream() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    run_pipeline(&cfg).unwrap();
    cfg.train.epochs = 2;
    let o = run_pipeline(&cfg).unwrap();
    assert_eq!(o.status("split"), Some(StageStatus::Skipped));
    assert_eq!(o.status("train"), Some(StageStatus::Ran));
    assert_eq!(o.status("eval"), Some(StageStatus::Ran));
    let trace = fs::read_to_string(WorkLayout::new(tmp.path()).loss_trace()).unwrap();
    assert_eq!(trace.lines().count(), 3);
}

#[test]
fn deleted_output_reruns_that_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    run_pipeline(&cfg).unwrap();
    fs::remove_file(WorkLayout::new(tmp.path()).report()).unwrap();
    let o = run_pipeline(&cfg).unwrap();
    assert_eq!(o.status("train"), Some(StageStatus::Skipped));
    assert_eq!(o.status("eval"), Some(StageStatus::Ran));
}

#[test]
fn external_inputs_track_file_contents() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let s = synthgen::generate(
        &SynthSpec {
            n_properties: 40,
            seed: 8,
            ..SynthSpec::default()
        },
        &data,
    )
    .unwrap();
    let mut cfg = small_config(&tmp.path().join("work"));
    cfg.inputs = Some(Inputs {
        properties: s.properties_path.clone(),
        images: s.images_path.clone(),
    });
    let o = run_pipeline(&cfg).unwrap();
    assert_eq!(o.status("synth"), Some(StageStatus::External));
    assert_eq!(o.status("ingest"), Some(StageStatus::Ran));

    // Replacing pixels leaves the manifests intact but invalidates dedup onward.
    let (images, _) = ingest::load_images(&s.images_path).unwrap();
    let victim = &images[0].path;
    let donor = &images.iter().find(|i| i.property_id != images[0].property_id).unwrap().path;
    fs::copy(donor, victim).unwrap();
    let o = run_pipeline(&cfg).unwrap();
    assert_eq!(o.status("ingest"), Some(StageStatus::Skipped));
    assert_eq!(o.status("dedup"), Some(StageStatus::Ran));
    assert_eq!(o.status("train"), Some(StageStatus::Ran));

    // A new property changes the manifest itself.
    let mut text = fs::read_to_string(&s.properties_path).unwrap();
    text.push_str("{\"property_id\":\"extra\",\"construction_year\":1990,\"structure\":\"wooden_like\",\"category\":\"house\"}\n");
    fs::write(&s.properties_path, text).unwrap();
    let o = run_pipeline(&cfg).unwrap();
    assert_eq!(o.status("ingest"), Some(StageStatus::Ran));
    assert_eq!(o.status("synth"), Some(StageStatus::External));
}

#[test]
fn ingest_train_eval_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let s = synthgen::generate(
        &SynthSpec {
            n_properties: 30,
            seed: 2,
            ..SynthSpec::default()
        },
        &tmp.path().join("raw"),
    )
    .unwrap();
    let ing = tmp.path().join("ingest");
    let summary = run_ingest(&s.properties_path, &s.images_path, &ing).unwrap();
    assert_eq!(summary.properties_in, 30);
    assert_eq!(summary.images_in, s.n_images);

    let props = ing.join("properties.jsonl");
    let images = ing.join("images.jsonl");
    let split = tmp.path().join("split.tsv");
    facade_risk::pipeline::run_split(&props, 2, 0.8, &split).unwrap();
    let cfg = facade_risk::model::train::TrainConfig {
        epochs: 1,
        batch_size: 8,
        ..Default::default()
    };
    let ckpt = tmp.path().join("train").join("model.ckpt");
    let trace = run_train(&props, &images, Some(&split), &cfg, &ckpt).unwrap();
    assert_eq!(trace.epochs.len(), 1);
    assert!(ckpt.with_file_name("loss_trace.jsonl").exists());

    let model = checkpoint::load(&ckpt).unwrap();
    assert_eq!(model.year_norm.anchor, cfg.year_anchor);

    let out = tmp.path().join("eval").join("report.jsonl");
    let r = run_eval(&ckpt, &images, &props, Some(&split), Split::Test, &out).unwrap();
    let a = SplitAssignment::read(&split).unwrap();
    let (records, _) = ingest::load_images(&images).unwrap();
    let (_, test) = a.partition_images(&records).unwrap();
    assert_eq!(r.n_images + r.n_excluded, test.len());
    for t in ["structure", "ptype", "fireproof"] {
        assert!(out.with_file_name(format!("confusion_{t}.tsv")).exists());
    }
}

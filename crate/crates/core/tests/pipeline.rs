use std::path::Path;

use sdgseg::pipeline::commands::*;
use sdgseg::pipeline::*;
use sdgseg::prompt::PromptTable;
use sdgseg::Error;

fn tiny(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.data.synthetic.root = dir.join("data");
    cfg.data.synthetic.samples_per_domain = 10;
    cfg.data.synthetic.image_size = (32, 32);
    cfg.agm.model.encoder_channels = vec![8, 16, 32];
    cfg.agm.model.input_size = (32, 32);
    cfg.agm.optim.iterations = 4;
    cfg.segmenter.model.image_size = (32, 32);
    cfg.segmenter.model.encoder_channels = vec![4, 8, 16];
    cfg.segmenter.model.tap_channels = [32, 16, 8];
    cfg.segmenter.model.ipef.fused_channels = [32, 16, 8];
    cfg.segmenter.optim.iterations = 4;
    cfg.eval.overlays_per_domain = 2;
    cfg.ablation.positions = ["0-1", "2", "3"].map(String::from).to_vec();
    cfg.output.dir = dir.join("out");
    cfg
}

fn run_all(cfg: &PipelineConfig) -> Vec<u8> {
    cmd_synth_data(cfg).unwrap();
    cmd_train_agm::<f32>(cfg).unwrap();
    let reports = cmd_gen_prompts::<f32>(cfg, None, &[]).unwrap();
    assert_eq!(reports.len(), 3);
    cmd_finetune::<f32>(cfg, None).unwrap();
    let (path, _) = cmd_eval::<f32>(cfg, None, &[]).unwrap();
    std::fs::read(path).unwrap()
}

#[test]
fn staged_pipeline_is_deterministic_and_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny(&dir.path().join("a"));
    let b = tiny(&dir.path().join("b"));
    let ma = run_all(&a);
    assert_eq!(ma, run_all(&b));
    let text = String::from_utf8(ma).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "domain,role,images,agm_dice,dice,fallbacks");
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[1].starts_with("source,source,2,"));
    assert!(lines[2].starts_with("target_a,target,10,"));
    assert!(lines[4].starts_with("average,target,20,"));
    for name in [AGM_CHECKPOINT, AGM_LOG, SEGMENTER_CHECKPOINT, FINETUNE_LOG, METRICS] {
        assert!(artifact(&a, name).exists(), "{name}");
    }
    let overlays = std::fs::read_dir(a.output.dir.join(OVERLAY_DIR).join("target_b")).unwrap().count();
    assert_eq!(overlays, 2);
    let log = std::fs::read_to_string(artifact(&a, AGM_LOG)).unwrap();
    assert!(log.starts_with("iteration,l_sup,dice"));
    assert_eq!(log.lines().count(), 5);
}

#[test]
fn prompt_tables_cover_every_image_with_quality() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cmd_synth_data(&cfg).unwrap();
    cfg.prompts.use_gt_boxes = true;
    let reports = cmd_gen_prompts::<f32>(&cfg, None, &["target_a".to_string()]).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].records, 10);
    assert_eq!(reports[0].fallbacks, 0);
    assert!((reports[0].mean_quality.unwrap() - 1.0).abs() < 1e-12, "tight boxes have IoU 1");
    let table = PromptTable::read_csv(&prompt_path(&cfg, "target_a")).unwrap();
    assert!(table.has_quality());
    assert_eq!(table.records.len(), 10);
    assert!(matches!(cmd_gen_prompts::<f32>(&cfg, None, &["nowhere".to_string()]), Err(Error::InvalidInput(_))));
}

#[test]
fn untrained_generator_falls_back_to_full_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.agm.optim.learning_rate = 0.0;
    cfg.eval.threshold = 0.99;
    let prepared = prepare_in_memory::<f32>(&cfg).unwrap();
    let (agm, _) = train_agm_stage(&cfg, &prepared).unwrap();
    let table = auto_prompts(&cfg, &agm, &prepared.targets[0]).unwrap();
    assert_eq!(table.records.len(), 10);
    assert_eq!(table.fallbacks, 10);
    assert!(table.records.iter().all(|r| r.bbox.area() == 32 * 32));
}

#[test]
fn missing_prerequisites_are_user_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let err = cmd_train_agm::<f32>(&cfg).unwrap_err();
    assert!(err.is_user_error(), "{err}");
    cmd_synth_data(&cfg).unwrap();
    assert!(cmd_gen_prompts::<f32>(&cfg, None, &[]).unwrap_err().is_user_error());
    assert!(cmd_eval::<f32>(&cfg, None, &[]).unwrap_err().is_user_error());
    cmd_finetune::<f32>(&cfg, None).unwrap();
    let err = cmd_eval::<f32>(&cfg, None, &[]).unwrap_err();
    assert!(err.to_string().contains("gen-prompts"), "{err}");
}

#[test]
fn empty_evaluation_domain_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.data.synthetic.train_fraction = 1.0;
    cfg.prompts.use_gt_boxes = true;
    cmd_synth_data(&cfg).unwrap();
    cmd_finetune::<f32>(&cfg, None).unwrap();
    let err = cmd_eval::<f32>(&cfg, None, &["source".to_string()]).unwrap_err();
    assert!(matches!(err, Error::InvalidInput(ref m) if m.contains("no images")), "{err}");
    assert!(!artifact(&cfg, METRICS).exists());
}

#[test]
fn config_files_resolve_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let text = "seed = 3\n[output]\ndir = \"runs/x\"\n[data.synthetic]\nroot = \"d\"\nsamples_per_domain = 7\n";
    let path = dir.path().join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    let cfg = PipelineConfig::load(&path).unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.output.dir, dir.path().join("runs/x"));
    assert_eq!(cfg.manifest_path(), dir.path().join("d/manifest.toml"));
    assert_eq!(cfg.data.synthetic.samples_per_domain, 7);
    std::fs::write(&path, "[segmenter]\nfreeze_image_encoder = false\n").unwrap();
    assert!(matches!(PipelineConfig::load(&path), Err(Error::Config(_))));
    std::fs::write(&path, "[agm]\nbogus = [").unwrap();
    assert!(matches!(PipelineConfig::load(&path), Err(Error::Parse { .. })));
    let mut zero = PipelineConfig::default();
    zero.data.synthetic.samples_per_domain = 0;
    assert!(matches!(zero.validate(), Err(Error::Config(_))));
}

#[test]
fn ablation_tables_mirror_their_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.agm.optim.iterations = 2;
    cfg.segmenter.optim.iterations = 2;
    let prepared = prepare_in_memory::<f32>(&cfg).unwrap();

    let pos = run_ablation(&cfg, &prepared, AblationAxis::Position).unwrap();
    assert_eq!(&pos.header[1..], ["0-1", "2", "3"]);
    assert!(pos.header[0].contains("agm 2 steps"));
    let labels: Vec<&str> = pos.rows.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(labels, ["preliminary prediction", "final prediction"]);
    assert!(pos.rows.iter().all(|r| r.1.len() == 3 && r.1.iter().all(|v| (0.0..=1.0).contains(v))));

    let dist = run_ablation(&cfg, &prepared, AblationAxis::Distribution).unwrap();
    assert_eq!(&dist.header[1..], ["gaussian", "poisson", "united"]);
    assert_eq!(dist.rows.len(), 2);

    let module = run_ablation(&cfg, &prepared, AblationAxis::Module).unwrap();
    assert_eq!(&module.header[1..], ["target_a", "target_b", "average"]);
    assert_eq!(module.rows.len(), 4);
    for (_, v) in &module.rows {
        assert!((v[2] - (v[0] + v[1]) / 2.0).abs() < 1e-12);
    }

    let jitter = run_ablation(&cfg, &prepared, AblationAxis::PromptJitter).unwrap();
    assert_eq!(jitter.rows.len(), 2);
    assert!(jitter.rows.iter().all(|r| r.1.len() == 3));

    let path = dir.path().join("t.csv");
    pos.write_csv(&path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 3);
}

#[test]
fn shipped_desk_config_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_small.toml");
    let cfg = PipelineConfig::load(&path).unwrap();
    assert_eq!(cfg.data.synthetic.image_size, (64, 64));
    assert_eq!(cfg.segmenter.model.image_size, (64, 64));
    assert_eq!(cfg.agm.model.encoder_channels, [8, 16, 32, 64]);
    assert!(cfg.output.dir.ends_with("runs/desk_small"));
}

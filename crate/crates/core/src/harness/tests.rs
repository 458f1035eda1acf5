use std::fs;
use std::path::Path;

use super::*;
use crate::contrast::Strategy;
use crate::diffcore::{grad_check_stencil, Stencil, Tape, HALVING_STEPS};
use crate::gaussmetric::Divergence;
use crate::nets::init_params;
use crate::par::Executor;
use crate::regionstats::CovarianceMode;
use crate::synthworld::{LabelSetting, WorldConfig};
use crate::Error;

fn tiny_world(seed: u64) -> WorldConfig {
    WorldConfig {
        height: 16,
        width: 16,
        num_classes: 3,
        min_shapes: 1,
        max_shapes: 2,
        seed,
        ..WorldConfig::default()
    }
}

fn tiny_dataset(dir: &Path, seed: u64, count: usize) {
    generate(
        &tiny_world(seed),
        count,
        LabelSetting::OneLabel,
        dir,
        &Executor::sequential(),
    )
    .unwrap();
}

fn tiny_config(data: &Path, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::new(data);
    cfg.out_dir = out.to_path_buf();
    cfg.epochs = 2;
    cfg.batch = 2;
    cfg.lr = 1e-2;
    cfg.seed = 7;
    cfg
}

#[test]
fn flag_overrides_file() {
    let over = vec![("tau".to_string(), "2.0".to_string())];
    let cfg = parse_config("data_dir = d\ntau = 0.5 # comment\n", &over).unwrap();
    assert_eq!(cfg.tau, 2.0);
    let cfg = parse_config("data_dir = d\ntau = 0.5\n", &[]).unwrap();
    assert_eq!(cfg.tau, 0.5);
}

#[test]
fn bad_enum_names_valid_set() {
    let err = parse_config("data_dir = d\nstrategy = gaussianish\n", &[]).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Config(_)));
    assert!(
        msg.contains("gaussian") && msg.contains("vector") && msg.contains("pixel"),
        "{msg}"
    );
}

#[test]
fn unknown_key_and_missing_data_dir_rejected() {
    assert!(matches!(
        parse_config("data_dir = d\nfoo = 1\n", &[]),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        parse_config("tau = 1\n", &[]),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        parse_config("data_dir = d\ntau = abc\n", &[]),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        parse_config("data_dir = d\ntau = -1\n", &[]),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        parse_config("data_dir = d\nnot a pair\n", &[]),
        Err(Error::Config(_))
    ));
}

#[test]
fn empty_file_gives_defaults() {
    let over = vec![("data_dir".to_string(), "d".to_string())];
    let cfg = parse_config("", &over).unwrap();
    let want = RunConfig::new("d");
    assert_eq!(cfg, want);
    assert_eq!(cfg.tau, 1.0);
    assert_eq!(cfg.eps, 1e-5);
    assert_eq!(cfg.lambda_rc, 1.0);
    assert_eq!(cfg.epochs, 30);
    assert_eq!(cfg.batch, 8);
    assert_eq!(cfg.lr, 1e-3);
    assert_eq!(cfg.setting, LabelSetting::OneLabel);
    assert_eq!(cfg.strategy, Strategy::Gaussian);
    assert_eq!(cfg.extraction, Extraction::Region);
    assert_eq!(
        cfg.patch_size,
        PatchSize {
            height: 4,
            width: 4
        }
    );
    assert_eq!(cfg.distance, Divergence::Wasserstein);
    assert_eq!(cfg.cov_mode, CovarianceMode::Diag);
}

#[test]
fn config_text_round_trips() {
    let mut cfg = RunConfig::new("some/dir");
    cfg.strategy = Strategy::Pixel;
    cfg.patch_size = PatchSize {
        height: 3,
        width: 5,
    };
    cfg.tau = 0.1 + 0.2;
    cfg.negative_source = crate::contrast::NegativeSource::BothMaps;
    assert_eq!(parse_config(&cfg.to_text(), &[]).unwrap(), cfg);
}

#[test]
fn seed_streams_are_distinct() {
    let s =
        [Stream::Init, Stream::Labels, Stream::Shuffle, Stream::Pixel].map(|st| derive_seed(3, st));
    for i in 0..4 {
        for j in i + 1..4 {
            assert_ne!(s[i], s[j]);
        }
    }
    assert_ne!(derive_seed(3, Stream::Init), derive_seed(4, Stream::Init));
}

#[test]
fn split_is_last_fifth() {
    assert_eq!(split_point(250), 200);
    assert_eq!(split_point(10), 8);
    assert_eq!(split_point(4), 4);
}

#[test]
fn axis_parsing() {
    assert_eq!(
        parse_axis("strategy").unwrap().values,
        ["gaussian", "vector", "pixel"]
    );
    let a = parse_axis("lambda_rc=0,1").unwrap();
    assert_eq!((a.key.as_str(), a.values.len()), ("lambda_rc", 2));
    assert!(parse_axis("tau").is_err());
    assert!(parse_axis("strategy=gaussianish").is_err());
    assert!(parse_axis("seed=1,2").is_err());
}

#[test]
fn train_is_deterministic_and_thread_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_dataset(&data, 1, 5);
    let run = |name: &str, threads: usize| {
        let mut cfg = tiny_config(&data, &tmp.path().join(name));
        cfg.threads = threads;
        train(&cfg).unwrap();
        fs::read(tmp.path().join(name).join(METRICS_FILE)).unwrap()
    };
    let a = run("a", 1);
    let b = run("b", 1);
    let c = run("c", 3);
    assert_eq!(a, b);
    assert_eq!(a, c);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next(), Some(METRICS_HEADER));
    assert_eq!(text.lines().count(), 1 + 2 * 2);
}

#[test]
fn loss_decomposition_and_pair_count() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_dataset(&data, 2, 5);
    let mut cfg = tiny_config(&data, &tmp.path().join("out"));
    cfg.lambda_rc = 0.7;
    let out = train(&cfg).unwrap();
    assert!(!out.batches.is_empty());
    for b in &out.batches {
        assert!(
            (b.total - (b.loss_sup + cfg.lambda_rc * b.loss_rc)).abs() <= 1e-9,
            "{b:?}"
        );
        assert!(b.loss_rc > 0.0);
    }
    let train_rows: Vec<_> = out
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .collect();
    for r in train_rows {
        assert!(r.regions_used > 0);
        assert!((0.0..=1.0).contains(&r.miou));
        assert!((0.0..=180.0).contains(&r.merr));
    }
}

#[test]
fn lambda_zero_full_setting_has_zero_contrast() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_dataset(&data, 3, 5);
    let mut cfg = tiny_config(&data, &tmp.path().join("out"));
    cfg.lambda_rc = 0.0;
    cfg.setting = LabelSetting::Full;
    let out = train(&cfg).unwrap();
    assert!(out
        .records
        .iter()
        .all(|r| r.loss_rc == 0.0 && r.regions_used == 0));
    assert!(out
        .batches
        .iter()
        .all(|b| b.loss_rc == 0.0 && b.total == b.loss_sup));
}

#[test]
fn evaluate_reproduces_final_row() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_dataset(&data, 4, 5);
    let cfg = tiny_config(&data, &tmp.path().join("out"));
    let out = train(&cfg).unwrap();
    let rec = evaluate(&cfg.out_dir.join(CHECKPOINT_FILE), &data, 1).unwrap();
    assert_eq!(rec.csv_row(), out.records.last().unwrap().csv_row());
}

#[test]
fn evaluate_rejects_class_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_dataset(&data, 4, 5);
    let ck = tmp.path().join("ck.rdc");
    crate::nets::save_checkpoint(&init_params(1, 4).unwrap(), &ck).unwrap();
    assert!(matches!(evaluate(&ck, &data, 1), Err(Error::Data(_))));
}

#[test]
fn too_few_scenes_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_dataset(&data, 4, 3);
    let cfg = tiny_config(&data, &tmp.path().join("out"));
    assert!(matches!(train(&cfg), Err(Error::Data(_))));
}

#[test]
fn ablate_counts_rows_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_dataset(&tmp.path().join("data1"), 1, 5);
    tiny_dataset(&tmp.path().join("data2"), 2, 5);
    let data = tmp.path().join("data{seed}");
    let mut cfg = tiny_config(&data, &tmp.path().join("grid"));
    cfg.epochs = 1;
    let axes = vec![
        parse_axis("extraction").unwrap(),
        parse_axis("lambda_rc=0,1").unwrap(),
    ];
    let report = ablate(&cfg, &axes, &[1, 2]).unwrap();
    let text = fs::read_to_string(&report).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.iter().filter(|r| r.starts_with("run,")).count(), 8);
    assert_eq!(rows.iter().filter(|r| r.starts_with("summary,")).count(), 4);

    // drop the last two runs, then resume: only those are retrained
    let runs = cfg.out_dir.join(RUNS_FILE);
    let full = fs::read_to_string(&runs).unwrap();
    let kept: Vec<&str> = full.lines().take(full.lines().count() - 2).collect();
    fs::write(&runs, kept.join("\n") + "\n").unwrap();
    let marker = cfg
        .out_dir
        .join("runs")
        .join("extraction-region_lambda_rc-0_seed1")
        .join(METRICS_FILE);
    fs::remove_file(&marker).unwrap();
    let report2 = ablate(&cfg, &axes, &[1, 2]).unwrap();
    assert!(!marker.exists());
    assert_eq!(fs::read_to_string(&report2).unwrap(), text);
    assert_eq!(fs::read_to_string(&runs).unwrap(), full);
}

/// Every loss term of one training item, differentiated through the whole
/// network, against central differences on a slice of parameters.
#[test]
fn end_to_end_gradient() {
    let world = tiny_world(9);
    let scene =
        crate::synthworld::generate_scene(&world, &mut crate::synthworld::scene_rng(9, 0)).unwrap();
    let params = init_params(5, world.num_classes).unwrap();
    for strategy in Strategy::ALL {
        for cov_mode in [CovarianceMode::Diag, CovarianceMode::Full] {
            for distance in [Divergence::Wasserstein, Divergence::Jeffreys] {
                let mut cfg = RunConfig::new("");
                cfg.strategy = strategy;
                cfg.cov_mode = cov_mode;
                cfg.distance = distance;
                cfg.setting = LabelSetting::Full;
                let report = end_to_end_check(&params, &scene, &cfg);
                assert!(report <= 1e-4, "{strategy} {cov_mode} {distance}: {report}");
            }
        }
    }
}

fn end_to_end_check(
    params: &crate::nets::ModelParams,
    scene: &crate::synthworld::Scene,
    cfg: &RunConfig,
) -> f64 {
    // the trunk's last kernel reaches the contrast only; encoder0 reaches every term
    let slot = 2 * crate::nets::Layer::ALL.len() - 2;
    let mut worst: f64 = 0.0;
    for idx in [0, slot] {
        let base = params.tensors()[idx].clone();
        let f = |tape: &mut Tape, x: crate::diffcore::Var| {
            let mask = feature_mask(cfg, scene)?;
            let item = BatchItem {
                scene,
                labeled: crate::task::TaskSet::first(3),
                mask: &mask,
                pixel_seed: 0,
            };
            item_loss_wrt(tape, params, idx, x, cfg, &item)
        };
        let coords: Vec<usize> = (0..base.len()).step_by(31).collect();
        let r = grad_check_stencil(f, &base, &HALVING_STEPS, &coords, Stencil::FivePoint).unwrap();
        worst = worst.max(r.max_rel_err);
    }
    worst
}

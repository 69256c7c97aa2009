//! Command-line workflows on a tiny configuration.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};

use objtraj::archive::file_digest;
use objtraj::backbone::load_backbone;
use objtraj::cli::{run_command, GENERATOR_FILE, PREDICTOR_FILE};
use objtraj::config::RunConfig;
use objtraj::generator::Generator;
use objtraj::image::{load_png, save_png};
use objtraj::predictor::{predict_map, Predictor};

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["objtraj"];
    argv.extend_from_slice(args);
    run_command(argv)
}

/// The smoke config cut down to a few steps and a two-point grid.
fn tiny_config(dir: &Path, gen_steps: u64) -> PathBuf {
    let fixtures = crate_dir().join("fixtures/toy");
    let text = std::fs::read_to_string(crate_dir().join("configs/smoke.toml"))
        .unwrap()
        .replace("gen_steps = 200", &format!("gen_steps = {gen_steps}"))
        .replace("pred_steps = 300", "pred_steps = 2")
        .replace("batch = 4", "batch = 2")
        .replace("grid = \"0:1:0.05\"", "grid = \"0,1\"")
        .replace("../fixtures/toy", fixtures.to_str().unwrap());
    let path = dir.join(format!("tiny{gen_steps}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

fn digests_in(dir: &Path) -> Vec<(String, String)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, file_digest(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn shipped_configs_validate() {
    for name in ["smoke", "desk"] {
        let p = crate_dir().join(format!("configs/{name}.toml"));
        assert_eq!(
            run(&["validate-config", "--config", p.to_str().unwrap()]),
            0,
            "{name}"
        );
    }
    // The full preset needs pretrained weights that are not shipped.
    let full = crate_dir().join("configs/full.toml");
    let code = run(&["validate-config", "--config", full.to_str().unwrap()]);
    let weights = RunConfig::from_toml(
        &std::fs::read_to_string(&full).unwrap(),
        full.parent().unwrap(),
    )
    .unwrap()
    .backbone_spec()
    .resolved_weights()
    .map(|p| p.is_file())
    .unwrap_or(false);
    assert_eq!(code, if weights { 0 } else { 1 });
}

#[test]
fn unknown_command_is_a_usage_error() {
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["train-gen"]), 2);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn commands_before_training_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let r = dir.path().join("run");
    let code = run(&[
        "build-oos-maps",
        "--config",
        cfg.to_str().unwrap(),
        "--run",
        r.to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let short = tiny_config(dir.path(), 2);
    let long = tiny_config(dir.path(), 4);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (a, b) = (a.to_str().unwrap(), b.to_str().unwrap());
    let (short, long) = (short.to_str().unwrap(), long.to_str().unwrap());
    assert_eq!(run(&["train-gen", "--config", short, "--run", a]), 0);
    assert_eq!(
        run(&["train-gen", "--config", long, "--run", a, "--resume"]),
        0
    );
    assert_eq!(run(&["train-gen", "--config", long, "--run", b]), 0);
    for f in [GENERATOR_FILE, "train_gen_log.csv"] {
        let da = file_digest(&Path::new(a).join(f)).unwrap();
        let db = file_digest(&Path::new(b).join(f)).unwrap();
        assert_eq!(da, db, "{f}");
    }
}

#[test]
fn pipeline_outputs_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path(), 2);
    let run_dir = dir.path().join("run");
    let (c, r) = (cfg_path.to_str().unwrap(), run_dir.to_str().unwrap());

    assert_eq!(run(&["train-gen", "--config", c, "--run", r]), 0);
    assert!(run_dir.join("train-gen.manifest.json").is_file());

    let maps = run_dir.join("oos_maps/train");
    assert_eq!(run(&["build-oos-maps", "--config", c, "--run", r]), 0);
    let first = digests_in(&maps);
    assert_eq!(
        first.iter().filter(|(n, _)| n.ends_with(".png")).count(),
        16
    );
    assert_eq!(run(&["build-oos-maps", "--config", c, "--run", r]), 0);
    assert_eq!(first, digests_in(&maps), "rebuilt maps differ");

    assert_eq!(run(&["train-predictor", "--config", c, "--run", r]), 0);

    let input = crate_dir().join("fixtures/toy/test");
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let backbone = load_backbone(&cfg.backbone_spec()).unwrap();
    let (gen, _) =
        Generator::load(&run_dir.join(GENERATOR_FILE), DType::F32, &Device::Cpu).unwrap();
    let (pred, _) = Predictor::load(
        &run_dir.join(PREDICTOR_FILE),
        &backbone,
        DType::F32,
        &Device::Cpu,
    )
    .unwrap();
    let hr = load_png(&input.join("toy_00.png")).unwrap();
    let lr = objtraj::data::degrade_bicubic(&hr, 4).unwrap();
    let lr_path = dir.path().join("lr.png");
    save_png(&lr_path, &lr).unwrap();
    let lr = load_png(&lr_path).unwrap();
    let lr_out = dir.path().join("sr_lr");
    assert_eq!(
        run(&[
            "infer",
            "--config",
            c,
            "--run",
            r,
            "--input",
            lr_path.to_str().unwrap(),
            "--out",
            lr_out.to_str().unwrap()
        ]),
        0
    );
    let expected = gen
        .super_resolve(&lr, &predict_map(&lr, &pred, &backbone).unwrap())
        .unwrap();
    let expected_path = dir.path().join("expected.png");
    save_png(&expected_path, &expected).unwrap();
    assert_eq!(
        file_digest(&lr_out.join("lr.png")).unwrap(),
        file_digest(&expected_path).unwrap()
    );

    assert_eq!(
        run(&["pd-curve", "--config", c, "--run", r, "--grid", "0:1:0.05"]),
        0
    );
    let curve = std::fs::read_to_string(run_dir.join("pd_curve_test.csv")).unwrap();
    let rows: Vec<&str> = curve.lines().collect();
    assert_eq!(rows[0], "t,psnr,lpips");
    assert_eq!(rows.len(), 22);
    assert!(
        rows[1].starts_with("0,") && rows[21].starts_with("1,"),
        "{curve}"
    );

    assert_eq!(run(&["evaluate", "--config", c, "--run", r]), 0);
    for t in ["t0", "t1", "ooe", "oos", "summary"] {
        assert!(run_dir.join(format!("eval/test/{t}.csv")).is_file(), "{t}");
    }
}

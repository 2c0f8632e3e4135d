//! CLI surface: subcommands, exit codes, and artifact layout, exercised
//! through the built binary.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flare-ssm"))
}

fn mini_config(dir: &Path) -> String {
    format!(
        "data.dir = {}\n\
         data.n_samples = 360\n\
         data.year_steps = 60\n\
         data.cycle_years = 1.5\n\
         data.horizon = 4\n\
         data.mega_period = 40\n\
         data.envelope_amp = 0.2\n\
         data.proportions = 0.30,0.25,0.25,0.20\n\
         data.gen_hw = 16\n\
         data.out_hw = 16\n\
         data.channels = 2\n\
         data.history = 2\n\
         data.pre_history = 8\n\
         model.feature_dim = 8\n\
         model.d_pre = 16\n\
         model.p_state = 4\n\
         model.l_enc = 1\n\
         model.l_dec = 1\n\
         model.heads = 2\n\
         model.patch = 8\n\
         model.mlp_ratio = 2\n\
         model.dcsm_reduction = 2\n\
         mae.epochs = 1\n\
         mae.batch = 16\n\
         train.epochs_stage1 = 1\n\
         train.epochs_stage2 = 1\n\
         train.batch = 16\n",
        dir.join("dataset").display()
    )
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("mini.cfg");
    std::fs::write(&cfg_path, mini_config(tmp.path())).unwrap();
    let out = tmp.path().join("runs");

    let status = bin()
        .args(["generate", "--config"])
        .arg(&cfg_path)
        .args(["--seed", "0"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(tmp.path().join("dataset/manifest.json").exists());
    assert!(tmp.path().join("dataset/resolved.cfg").exists());

    for sub in ["pretrain", "train"] {
        let status = bin()
            .args([sub, "--config"])
            .arg(&cfg_path)
            .args(["--seed", "0", "--fold", "1", "--out"])
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success(), "{sub} failed");
    }
    assert!(out.join("fold1/smae.ckpt").exists());
    assert!(out.join("fold1/model.ckpt").exists());
    assert!(out.join("fold1/resolved.cfg").exists());

    let output = bin()
        .args(["eval", "--config"])
        .arg(&cfg_path)
        .args(["--fold", "1", "--split", "test", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success());
    let preds = out.join("fold1/predictions_test.csv");
    assert!(preds.exists());
    assert!(out.join("fold1/report_test.json").exists());

    let output = bin().args(["metrics", "--pred"]).arg(&preds).output().unwrap();
    assert!(output.status.success());
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("\"gmgs\""));
}

#[test]
fn exit_codes_match_error_classes() {
    let tmp = tempfile::tempdir().unwrap();
    // Unknown key -> config error (2).
    let bad_cfg = tmp.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "train.bogus = 1\n").unwrap();
    let status = bin()
        .args(["train", "--config"])
        .arg(&bad_cfg)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // Missing dataset -> data error (3).
    let cfg = tmp.path().join("nodata.cfg");
    std::fs::write(&cfg, format!("data.dir = {}\n", tmp.path().join("nope").display())).unwrap();
    let status = bin()
        .args(["pretrain", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(tmp.path().join("runs"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));

    // Degenerate metrics -> numerical failure (4): all labels identical
    // leaves the Brier climatology at zero.
    let preds = tmp.path().join("preds.csv");
    std::fs::write(&preds, "0,0.7,0.1,0.1,0.1,X\n1,0.6,0.2,0.1,0.1,X\n").unwrap();
    let status = bin().args(["metrics", "--pred"]).arg(&preds).status().unwrap();
    assert_eq!(status.code(), Some(4));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use guidance_core::data::Split;
use guidance_core::eval::accuracy;
use guidance_core::pipeline::{DataRecipe, RunReport, TrainConfig};
use guidance_core::Model;
use tempfile::TempDir;

const QUICK: &str = r#"{
  "teacher_lr_schedule": [[0, 0.02], [3, 0.002]],
  "student_lr_schedule": [[0, 0.002]],
  "teacher_epochs": 4,
  "student_epochs": 2,
  "finetune_epochs": 1,
  "hidden_dims": [16],
  "classes": 4,
  "per_class": 60,
  "dim": 5,
  "clean_fraction": 0.1,
  "seed": 3
}
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_guidance-learn"));
    c.env_remove("GUIDANCE_LEARN_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    fs::write(&config, QUICK).unwrap();
    (dir, config)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_succeeds_and_usage_errors_fail() {
    let help = run(&["--help"]);
    assert!(help.status.success());
    assert!(stdout(&help).contains("train-teacher"));

    let (dir, config) = setup();
    let out = dir.path().join("r");
    let bogus = run(&["baseline", "--variant", "bogus", "--config", s(&config), "--out", s(&out)]);
    assert!(!bogus.status.success());
    assert!(stderr(&bogus).contains("guidance_finetuned"));
    assert!(!run(&["train-teacher", "--out", s(&out)]).status.success());
    assert!(!run(&["train-teacher", "--config", s(&config), "--out", s(&out), "--nope"]).status.success());
    assert!(!out.exists());
}

#[test]
fn config_errors_are_reported() {
    let (dir, _) = setup();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\n  \"alpha\": 0.1,\n  \"beta\": \n}\n").unwrap();
    let o = run(&["train-teacher", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 4 column 1"), "{}", stderr(&o));

    fs::write(&bad, "{\"alpha\": 0.1, \"alhpa\": 2}").unwrap();
    let o = run(&["train-teacher", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("alhpa"));

    fs::write(&bad, "{\"temperature\": 0}").unwrap();
    let o = run(&["train-teacher", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("temperature"));
}

#[test]
fn staged_run_writes_the_layout_and_eval_agrees() {
    let (dir, config) = setup();
    let out = dir.path().join("run");
    let t = run(&["train-teacher", "--config", s(&config), "--out", s(&out)]);
    assert!(t.status.success(), "{}", stderr(&t));
    assert!(stdout(&t).starts_with("train-teacher: test accuracy"));
    assert_eq!(stdout(&t).lines().count(), 1);

    let again = run(&["train-student", "--config", s(&config), "--out", s(&out)]);
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"));

    let st = run(&["train-student", "--config", s(&config), "--out", s(&out), "--force"]);
    assert!(st.status.success(), "{}", stderr(&st));
    for f in ["config.json", "teacher.ckpt", "guidance_cache.bin", "student.ckpt", "report.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(!out.join(".incomplete").exists());
    let report = RunReport::load(out.join("report.json")).unwrap();
    assert_eq!(report.stage, "student");

    let e = run(&["eval", "--model", s(&out.join("student.ckpt")), "--config", s(&config)]);
    assert!(e.status.success());
    let printed: f64 = stdout(&e).trim().rsplit(' ').next().unwrap().parse().unwrap();
    let train: TrainConfig = serde_json::from_str(QUICK).unwrap();
    let recipe: DataRecipe = serde_json::from_str(QUICK).unwrap();
    let ds = recipe.build::<f64>(train.seed).unwrap();
    let model = Model::load(out.join("student.ckpt")).unwrap();
    assert_eq!(printed, accuracy(&model, &ds, Split::Test).unwrap());
    assert_eq!(Some(printed), report.final_test_accuracy);

    let f = run(&["finetune", "--config", s(&config), "--out", s(&out), "--force"]);
    assert!(f.status.success(), "{}", stderr(&f));
    assert!(out.join("finetuned.ckpt").exists());
}

#[test]
fn failures_leave_an_incomplete_marker() {
    let (dir, config) = setup();
    let out = dir.path().join("run");
    let o = run(&["train-student", "--config", s(&config), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("teacher"));
    assert!(out.join(".incomplete").exists());
    assert!(!out.join("report.json").exists());
}

#[test]
fn reruns_are_byte_identical_and_reports_replay() {
    let (dir, config) = setup();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["baseline", "--variant", "guidance_finetuned", "--config", s(&config), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["report.json", "teacher.ckpt", "student.ckpt", "model.ckpt", "guidance_cache.bin", "manifest.json", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let replay = dir.path().join("replay");
    let o = run(&["baseline", "--variant", "guidance_finetuned", "--config", s(&a.join("report.json")), "--out", s(&replay)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(replay.join("report.json")).unwrap());

    let other = dir.path().join("seed");
    let o = run(&["baseline", "--variant", "mixed", "--config", s(&config), "--out", s(&other), "--seed", "9"]);
    assert!(o.status.success());
    assert_eq!(RunReport::load(other.join("report.json")).unwrap().config.seed, 9);
}

#[test]
fn sweep_writes_results() {
    let (dir, config) = setup();
    let out = dir.path().join("sweep");
    let o = bin()
        .args(["sweep", "--config", s(&config), "--out", s(&out), "--axis", "beta", "--values", "0,0.3", "--seeds", "1,2"])
        .env("GUIDANCE_LEARN_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["results.csv", "results.json", "plotdata.txt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "axis,value,seed,acc_teacher,acc_student,acc_finetuned");
    assert_eq!(csv.lines().count(), 5);
    assert!(!out.join(".incomplete").exists());

    let bad = bin()
        .args(["sweep", "--config", s(&config), "--out", s(&dir.path().join("t")), "--axis", "T", "--values", "0"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    let threads = bin()
        .args(["sweep", "--config", s(&config), "--out", s(&dir.path().join("u")), "--axis", "T", "--values", "5"])
        .env("GUIDANCE_LEARN_THREADS", "many")
        .output()
        .unwrap();
    assert!(!threads.status.success());
    assert!(stderr(&threads).contains("GUIDANCE_LEARN_THREADS"));
}

#[test]
fn data_export_and_noise_injection() {
    let (dir, config) = setup();
    let out = dir.path().join("data");
    let o = run(&["make-data", "--config", s(&config), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("240 samples"));
    let csv = out.join("dataset.csv");
    let header = fs::read_to_string(&csv).unwrap().lines().next().unwrap().to_owned();
    assert!(header.ends_with("true_label,label"), "{header}");
    assert!(out.join("manifest.json").exists());

    let noisy = dir.path().join("noisy");
    let o = run(&["inject-noise", "--config", s(&config), "--out", s(&noisy), "--data", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(noisy.join("dataset.csv").exists());
    assert!(noisy.join("manifest.json").exists());
}

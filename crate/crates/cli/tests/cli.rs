use std::path::Path;
use std::process::Command;

fn gdd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gdd"))
}

const CONFIG: &str = "\
variant = star
T = 5
K = 3
d_z = 3
d_b = 2
inner_iters = 6
lr_base = 0.2
seeds = 0..3
operator.name = blur
operator.blur_len = 3
operator.blur_std = 0.8
noise.sigma = 0.05
";

fn strip_wall_time(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| {
            let mut cols: Vec<&str> = l.split(',').collect();
            cols.pop();
            cols.join(",")
        })
        .collect()
}

fn run(config: &Path, out: &Path, workers: &str) -> String {
    let status = gdd()
        .args(["run", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--workers", workers])
        .status()
        .unwrap();
    assert!(status.success());
    std::fs::read_to_string(out).unwrap()
}

#[test]
fn run_twice_gives_identical_csv_except_wall_time() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    std::fs::write(&cfg, CONFIG).unwrap();
    let a = run(&cfg, &dir.path().join("a.csv"), "1");
    let b = run(&cfg, &dir.path().join("b.csv"), "3");
    assert_eq!(a.lines().count(), 4);
    assert!(a.starts_with(
        "seed,variant,T,inner_iters,gamma,eta_kl_base,lr_base,psnr_db,mse,token_accuracy,final_loss,wall_ms\n"
    ));
    assert_eq!(strip_wall_time(&a), strip_wall_time(&b));
}

#[test]
fn seed_offset_shifts_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = gdd()
        .args(["run", cfg.to_str().unwrap(), "--seed-offset", "10"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let seeds: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(seeds, ["10", "11", "12"]);
}

#[test]
fn malformed_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "T = 4\nK = 3\ninner_iters = lots\n").unwrap();
    let out = gdd().args(["run", cfg.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn verify_schedule_passes() {
    let out = gdd().args(["verify", "schedule"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("lambda = 0: w(0..=10) = 1.0000 1.0000"), "{text}");
    assert!(text.trim_end().ends_with("schedule: PASS"));
}

#[test]
fn verify_lemma_marginal_and_gradients_pass() {
    for check in ["lemma_marginal", "gradients"] {
        let out = gdd().args(["verify", check]).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    }
}

#[test]
fn unknown_verify_target_rejected() {
    let out = gdd().args(["verify", "everything"]).output().unwrap();
    assert!(!out.status.success());
}

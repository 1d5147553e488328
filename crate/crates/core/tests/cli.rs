use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pignn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pignn")).args(args).current_dir(cwd).env_remove("PIGNN_SEED").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn mesh_gen_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["mesh-gen", "--domain", "0,0,1,1", "--density", "10", "--jitter", "0.2", "--seed", "7", "--out"];
    ok(&pignn(&[&args[..], &["a.txt"]].concat(), dir.path()));
    ok(&pignn(&[&args[..], &["b.txt"]].concat(), dir.path()));
    let a = fs::read_to_string(dir.path().join("a.txt")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path().join("b.txt")).unwrap());
    let mesh = pignn::mesh::TriMesh::from_text(&a).unwrap();
    assert_eq!(mesh.nodes.len(), 121);
}

#[test]
fn usage_errors_exit_with_two_and_runtime_errors_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = pignn(&["mesh-gen", "--density", "10"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
    assert_eq!(pignn(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(pignn(&["train", "--pde", "wave", "--out-dir", "x"], dir.path()).status.code(), Some(2));

    let out = pignn(&["mesh-gen", "--density", "0", "--out", "m.txt"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = pignn(&["rollout", "--ckpt", "missing.bin", "--steps", "2", "--out", "r"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    fs::write(dir.path().join("junk.bin"), b"junk").unwrap();
    let out = pignn(&["rollout", "--ckpt", "junk.bin", "--steps", "2", "--out", "r"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn help_lists_flags() {
    let dir = tempfile::tempdir().unwrap();
    let h = ok(&pignn(&["train", "--help"], dir.path()));
    for flag in ["--pde", "--steps", "--dt", "--epochs", "--lr", "--lambda-lr", "--gamma-start", "--obs", "--k-init", "--seed", "--resume"] {
        assert!(h.contains(flag), "{flag} missing from help");
    }
    let h = ok(&pignn(&["--help"], dir.path()));
    for cmd in ["mesh-gen", "train", "rollout", "eval", "diffop-check", "obs-gen", "reference"] {
        assert!(h.contains(cmd));
    }
}

#[test]
fn train_rollout_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&pignn(&["mesh-gen", "--density", "4", "--seed", "1", "--out", "m.txt"], p));
    fs::write(p.join("run.cfg"), "# tiny run\nepochs = 2\nlatent = 8\nsteps = 3\n").unwrap();
    let train = ["train", "--config", "run.cfg", "--pde", "heat", "--mesh", "m.txt", "--dt", "1e-4", "--seed", "3", "--out-dir"];
    let stdout = ok(&pignn(&[&train[..], &["run"]].concat(), p));
    assert!(stdout.contains("best epoch"));
    let hist = fs::read_to_string(p.join("run/history.csv")).unwrap();
    assert!(hist.starts_with("epoch,loss_total,loss_pde,loss_data,lr,gamma\n"));
    assert_eq!(hist.lines().count(), 3);

    // Explicit flags override the config file.
    ok(&pignn(&[&train[..], &["run3", "--epochs", "3"]].concat(), p));
    assert_eq!(fs::read_to_string(p.join("run3/history.csv")).unwrap().lines().count(), 4);

    // Same flags, same history.
    ok(&pignn(&[&train[..], &["run_again"]].concat(), p));
    assert_eq!(hist, fs::read_to_string(p.join("run_again/history.csv")).unwrap());

    ok(&pignn(&["rollout", "--ckpt", "run/checkpoint.bin", "--steps", "6", "--out", "fields"], p));
    let files = fs::read_dir(p.join("fields")).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("step_")).count();
    assert_eq!(files, 7);

    let out = ok(&pignn(&["eval", "--pred", "fields", "--analytic", "heat", "--out", "err.csv"], p));
    assert!(out.contains("armse(6)"));
    let csv = fs::read_to_string(p.join("err.csv")).unwrap();
    assert!(csv.starts_with("step,armse\n1,"));
    assert_eq!(csv.lines().count(), 7);

    ok(&pignn(&["eval", "--pred", "fields", "--truth", "fields", "--out", "self.csv"], p));
    let zero = fs::read_to_string(p.join("self.csv")).unwrap();
    assert!(zero.lines().skip(1).all(|l| l.ends_with(",0.00000000000000000e0")), "{zero}");

    // Resume extends a run.
    ok(&pignn(&["train", "--pde", "heat", "--resume", "run/checkpoint.bin", "--epochs", "4", "--out-dir", "more"], p));
    assert_eq!(fs::read_to_string(p.join("more/history.csv")).unwrap().lines().count(), 5);
}

#[test]
fn inverse_pipeline_writes_k_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mesh = ["--density", "4", "--mesh-seed", "2"];
    ok(&pignn(&[&["obs-gen", "--pde", "heat_inverse", "--count", "5", "--steps", "3", "--dt", "1e-3", "--seed", "4", "--out", "obs.csv"][..], &mesh[..]].concat(), p));
    let obs = fs::read_to_string(p.join("obs.csv")).unwrap();
    assert!(obs.starts_with("x,y,t,u\n"));
    assert_eq!(obs.lines().count(), 16);
    let args = ["train", "--pde", "heat_inverse", "--obs", "obs.csv", "--k-init", "8", "--epochs", "3", "--steps", "3", "--dt", "1e-3", "--latent", "8", "--out-dir", "inv"];
    let out = ok(&pignn(&[&args[..], &mesh[..]].concat(), p));
    assert!(out.contains("final k ="));
    let hist = fs::read_to_string(p.join("inv/history.csv")).unwrap();
    assert!(hist.starts_with("epoch,loss_total,loss_pde,loss_data,lr,gamma,k\n"));
    let k = fs::read_to_string(p.join("inv/lambda.csv")).unwrap();
    assert!(k.starts_with("epoch,k\n0,8.0"));

    let bad = pignn(&["train", "--pde", "heat", "--k-init", "2", "--epochs", "1", "--out-dir", "x"], p);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn diffop_check_reports_operators() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&pignn(&["mesh-gen", "--density", "6", "--out", "m.txt"], p));
    let out = ok(&pignn(&["diffop-check", "--mesh", "m.txt"], p));
    assert!(out.contains("gradient affine max error"));
    assert!(out.lines().next().unwrap().starts_with("nodes 49"));
    assert!(out.contains("order slopes"));
    assert!(out.contains("eta"));
    ok(&pignn(&["diffop-check", "--density", "5", "--out", "report.txt"], p));
    assert!(fs::read_to_string(p.join("report.txt")).unwrap().contains("laplacian"));
}

#[test]
fn fn_reference_and_seed_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&pignn(&["reference", "--pde", "fn", "--density", "6", "--steps", "3", "--dt", "1e-3", "--out", "ref"], p));
    assert!(p.join("ref/step_00003.csv").is_file());
    let header = fs::read_to_string(p.join("ref/step_00000.csv")).unwrap();
    assert!(header.starts_with("node,x,y,u,v\n"));

    let run = |seed: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_pignn"))
            .args(["mesh-gen", "--density", "5", "--out", out])
            .env("PIGNN_SEED", seed)
            .current_dir(p)
            .output()
            .unwrap();
        assert!(o.status.success());
        fs::read_to_string(p.join(out)).unwrap()
    };
    assert_eq!(run("9", "a.txt"), run("9", "b.txt"));
    assert_ne!(run("9", "a.txt"), run("10", "c.txt"));
}

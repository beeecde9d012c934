use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"seed = 5
[grid]
ring_length_m = 40.0
dt_s = 0.5
horizon_s = 5.0
[solver]
eta_m = 4.0
substeps = 20
[kde]
n_vehicles = 4
[training]
density_layers = 1
density_width = 6
fd_layers = 1
fd_width = 4
adam_iters = 12
lbfgs_iters = 3
n_collocation = 30
n_detectors = 2
n_rho_cells = 20
checkpoint_every = 5
"#;

fn nlwr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlwr"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn nlwr")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(config: &str) -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("run.toml"), config).unwrap();
    d
}

fn simulate(d: &Path) {
    let o = nlwr(d, &["--config", "run.toml", "--out", "out", "simulate"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn simulate_writes_truth_and_is_reproducible() {
    let d = setup(TINY);
    simulate(d.path());
    let out = d.path().join("out");
    for f in [
        "truth_rho.csv",
        "truth_v.csv",
        "trajectories.csv",
        "effective_config.toml",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let first = fs::read(out.join("truth_rho.csv")).unwrap();
    let traj = fs::read(out.join("trajectories.csv")).unwrap();
    let o = nlwr(
        d.path(),
        &["--config", "run.toml", "--out", "again", "simulate"],
    );
    assert!(o.status.success());
    assert_eq!(
        first,
        fs::read(d.path().join("again/truth_rho.csv")).unwrap()
    );
    assert_eq!(
        traj,
        fs::read(d.path().join("again/trajectories.csv")).unwrap()
    );
    let header = String::from_utf8(first).unwrap();
    assert!(header.starts_with("t,x,value\n"));
}

#[test]
fn missing_kernel_length_names_the_field() {
    let d = setup(&TINY.replace("eta_m = 4.0\n", "kernel = \"linear\"\n"));
    let o = nlwr(
        d.path(),
        &["--config", "run.toml", "--out", "out", "simulate"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("solver.eta_m"), "{}", stderr(&o));
}

#[test]
fn seed_is_required() {
    let d = tempfile::tempdir().unwrap();
    let o = nlwr(d.path(), &["simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"));
}

#[test]
fn bad_flags_exit_two() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(nlwr(d.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        nlwr(d.path(), &["--seed", "x", "simulate"]).status.code(),
        Some(2)
    );
}

#[test]
fn reconstruct_from_simulated_vehicles() {
    let d = setup(TINY);
    simulate(d.path());
    let o = nlwr(
        d.path(),
        &["--config", "run.toml", "--out", "out", "reconstruct"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rho = fs::read_to_string(d.path().join("out/kde_rho.csv")).unwrap();
    // header + 11 rows of 40 cells
    assert_eq!(rho.lines().count(), 1 + 11 * 40);
    assert!(d.path().join("out/kde_v_fallback.csv").is_file());
}

#[test]
fn reconstruct_rejects_empty_trajectories() {
    let d = setup(TINY);
    fs::write(d.path().join("empty.csv"), "vehicle_id,t,x,v\n").unwrap();
    let o = nlwr(
        d.path(),
        &[
            "--config",
            "run.toml",
            "reconstruct",
            "--trajectories",
            "empty.csv",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no records"), "{}", stderr(&o));
}

#[test]
fn reconstruct_rejects_unsorted_times() {
    let d = setup(TINY);
    fs::write(
        d.path().join("bad.csv"),
        "vehicle_id,t,x,v\n7,0,1,10\n7,2,5,10\n7,1,3,10\n",
    )
    .unwrap();
    let o = nlwr(
        d.path(),
        &[
            "--config",
            "run.toml",
            "reconstruct",
            "--trajectories",
            "bad.csv",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains('7'), "{}", stderr(&o));
}

#[test]
fn train_resume_and_evaluate() {
    let d = setup(TINY);
    simulate(d.path());
    let o = nlwr(d.path(), &["--config", "run.toml", "--out", "out", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(stdout.contains("e_rho_pct = "));
    let out = d.path().join("out");
    for f in [
        "checkpoint.txt",
        "density_net.txt",
        "fd_net.txt",
        "report/summary.txt",
        "report/kernel.csv",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let summary = fs::read_to_string(out.join("report/summary.txt")).unwrap();

    // resuming a finished run changes nothing
    let o = nlwr(
        d.path(),
        &[
            "--config",
            "run.toml",
            "--out",
            "out",
            "train",
            "--resume",
            "out/checkpoint.txt",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        summary,
        fs::read_to_string(out.join("report/summary.txt")).unwrap()
    );

    let o = nlwr(
        d.path(),
        &["--config", "run.toml", "--out", "out", "evaluate"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        summary,
        fs::read_to_string(out.join("report/summary.txt")).unwrap()
    );
}

#[test]
fn train_with_fixed_kernel() {
    let d = setup(TINY);
    simulate(d.path());
    let o = nlwr(
        d.path(),
        &[
            "--config", "run.toml", "--out", "out", "train", "--kernel", "constant", "--eta", "2",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let k = fs::read_to_string(d.path().join("out/report/kernel.csv")).unwrap();
    assert_eq!(k.lines().count(), 3);
    assert!(k.contains(",0.5\n"));

    let o = nlwr(
        d.path(),
        &[
            "--config", "run.toml", "--out", "out", "train", "--kernel", "gaussian",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_without_truth_fails_cleanly() {
    let d = setup(TINY);
    let o = nlwr(d.path(), &["--config", "run.toml", "--out", "out", "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("truth_rho.csv"), "{}", stderr(&o));
}

#[test]
fn sweeps_write_tables() {
    let d = setup(TINY);
    simulate(d.path());
    let o = nlwr(
        d.path(),
        &[
            "--config", "run.toml", "--out", "out", "sweep", "--etas", "2,4",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(d.path().join("out/sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("eta_m,"));
    assert!(d.path().join("out/eta_2/report/summary.txt").is_file());

    let o = nlwr(
        d.path(),
        &[
            "--config",
            "run.toml",
            "--out",
            "out",
            "--jobs",
            "2",
            "sweep",
            "--alpha-grid",
            "0.5,1,2",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("best alpha = "));
    assert_eq!(
        fs::read_to_string(d.path().join("out/sweep.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let o = nlwr(d.path(), &["--config", "run.toml", "sweep"]);
    assert_eq!(o.status.code(), Some(2));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mfk(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfk"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("mfk runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Data rows (after the comment rows and the header) split into cells.
fn rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .find(|l| !l.starts_with('#'))
        .unwrap()
        .to_string()
}

#[test]
fn optimize_classical_recovers_tanh() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfk(&["optimize"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = rows(&dir.path().join("summary.csv"));
    let get = |k: &str| {
        summary
            .iter()
            .find(|r| r[0] == k)
            .map(|r| r[1].clone())
            .unwrap()
    };
    assert_eq!(get("termination"), "converged");
    let dev: f64 = get("max_gain_deviation_kalman_bucy").parse().unwrap();
    assert!(dev <= 5e-3, "deviation {dev}");
    for row in rows(&dir.path().join("gain.csv")) {
        let (t, g): (f64, f64) = (row[0].parse().unwrap(), row[1].parse().unwrap());
        assert!((g - t.tanh()).abs() <= 5e-3);
    }
    assert_eq!(
        header(&dir.path().join("optimizer.csv")),
        "iter,J,grad_norm"
    );
    assert_eq!(header(&dir.path().join("gradient.csv")), "t,g");
    assert_eq!(header(&dir.path().join("filter.csv")), "t,H,M,gain");
}

#[test]
fn simulate_rejects_zero_paths() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfk(&["simulate", "--paths", "0"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stage `simulate`"), "{}", stderr(&o));
    assert!(!dir.path().join("paths.csv").exists());
}

#[test]
fn gradcheck_unit_direction_at_zero_gain() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfk(&["gradcheck", "--gain", "zero"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = rows(&dir.path().join("gradcheck.csv"));
    assert_eq!(
        header(&dir.path().join("gradcheck.csv")),
        "direction,integral,fd,abs_diff"
    );
    assert_eq!(table.len(), 5);
    let one = &table[0];
    assert_eq!(one[0], "one");
    let integral: f64 = one[1].parse().unwrap();
    let diff: f64 = one[3].parse().unwrap();
    assert!((integral + 1.0 / 3.0).abs() < 1e-4, "{integral}");
    assert!(diff <= 1e-5, "{diff}");
    for row in &table {
        assert!(row[3].parse::<f64>().unwrap() <= 1e-4, "{row:?}");
    }
}

#[test]
fn kernels_and_covariance_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfk(
        &["kernels", "--steps", "20", "--gain", "tanh(t)"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let psi = dir.path().join("psi.csv");
    assert_eq!(header(&psi), "t,s,value");
    let psi = rows(&psi);
    assert_eq!(psi.len(), 21 * 22 / 2);
    for r in psi.iter().filter(|r| r[0] == r[1]) {
        assert_eq!(r[2].parse::<f64>().unwrap(), 1.0);
    }
    assert!(dir.path().join("residuals.csv").exists());

    let o = mfk(
        &["covariance", "--steps", "100", "--gain", "tanh(t)"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let cov = dir.path().join("covariance.csv");
    assert_eq!(header(&cov), "atom,t,K");
    let first = &rows(&cov)[0];
    assert_eq!(first[1].parse::<f64>().unwrap(), 0.0);
    assert_eq!(first[2].parse::<f64>().unwrap(), 0.0);
    let consistency = rows(&dir.path().join("consistency.csv"));
    let corrected: f64 = consistency.iter().find(|r| r[0] == "corrected").unwrap()[1]
        .parse()
        .unwrap();
    assert!(corrected < 0.02);
}

#[test]
fn simulate_is_reproducible_and_records_provenance() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "simulate",
        "--scenario",
        "normal-flow",
        "--steps",
        "50",
        "--paths",
        "200",
        "--seed",
        "7",
    ];
    assert!(mfk(&args, a.path()).status.success());
    assert!(mfk(&args, b.path()).status.success());
    for name in ["paths.csv", "statistics.csv"] {
        let x = fs::read(a.path().join(name)).unwrap();
        assert_eq!(x, fs::read(b.path().join(name)).unwrap(), "{name}");
        let text = String::from_utf8(x).unwrap();
        assert!(text.starts_with("# scenario_hash="));
        assert!(text.contains("\n# seed=7\n"));
        assert!(text.contains("\n# grid=[0,"));
        assert!(text.contains("\n# version="));
    }
    assert_eq!(header(&a.path().join("paths.csv")), "rep,atom,t,x,y,z,e");
    let reps: std::collections::BTreeSet<String> = rows(&a.path().join("paths.csv"))
        .into_iter()
        .map(|r| r[0].clone())
        .collect();
    assert_eq!(reps.len(), 20);
}

#[test]
fn refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["kernels", "--steps", "10"];
    assert!(mfk(&args, dir.path()).status.success());
    let before = fs::read(dir.path().join("phi.csv")).unwrap();
    let o = mfk(&["kernels", "--steps", "12"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--force"));
    assert_eq!(fs::read(dir.path().join("phi.csv")).unwrap(), before);
    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(mfk(&forced, dir.path()).status.success());
}

#[test]
fn scenario_file_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("drift.toml");
    fs::write(
        &file,
        "horizon = 1.0\nsteps = 50\ngain = \"0.5\"\n[coefficients]\nA = \"-0.5\"\nB = 0.3\nD = 0.2\nsigma = \"1 + 0.1 * u\"\n\
         [measure]\nkind = \"discrete\"\npoints = [[-1.0], [1.0]]\nweights = [0.5, 0.5]\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = mfk(&["covariance", "--scenario", file.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("J = "));
    assert_eq!(rows(&out.join("covariance.csv")).len(), 2 * 51);

    fs::write(&file, "[coefficients]\nA = \"t + w\"\n").unwrap();
    let o = mfk(&["kernels", "--scenario", file.to_str().unwrap()], &out);
    assert!(!o.status.success());
    assert!(
        stderr(&o).contains("stage `load`") && stderr(&o).contains("`w`"),
        "{}",
        stderr(&o)
    );

    let o = mfk(&["kernels", "--scenario", "/nonexistent.toml"], &out);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stage `load`"));
}

#[test]
fn thread_count_does_not_change_output() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "simulate",
        "--scenario",
        "normal-flow",
        "--steps",
        "40",
        "--paths",
        "300",
    ];
    let one = Command::new(env!("CARGO_BIN_EXE_mfk"))
        .env("MFK_THREADS", "1")
        .args(args)
        .arg("--out")
        .arg(a.path())
        .output()
        .unwrap();
    assert!(one.status.success(), "{}", stderr(&one));
    assert!(mfk(&args, b.path()).status.success());
    assert_eq!(
        fs::read(a.path().join("statistics.csv")).unwrap(),
        fs::read(b.path().join("statistics.csv")).unwrap()
    );

    let bad = Command::new(env!("CARGO_BIN_EXE_mfk"))
        .env("MFK_THREADS", "zero")
        .args(args)
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(stderr(&bad).contains("MFK_THREADS"));
}

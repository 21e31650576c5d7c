use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn imexpeer(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imexpeer"))
        .args(args)
        .env("IMEXPEER_OUT_DIR", out)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn builtin_text(name: &str) -> String {
    imexpeer::builtin(name).unwrap().to_text()
}

#[test]
fn verify_builtin_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = imexpeer(&["verify", "--method", "imex-peer3s"], dir.path());
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("alpha = 90"), "{text}");
    assert!(text.contains("5.52122"), "{text}");
    assert!(text.contains("result: PASS"));
}

#[test]
fn verify_with_duplicate_nodes_is_a_load_error() {
    let dir = tempfile::tempdir().unwrap();
    let good = builtin_text("imex-peer3s");
    let c_line = good.lines().find(|l| l.starts_with("c = ")).unwrap();
    let path = dir.path().join("bad.tab");
    fs::write(&path, good.replace(c_line, "c = 0.5, 0.5, 1")).unwrap();
    let o = imexpeer(&["verify", "--method", path.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_perturbed_gamma_fails_certification() {
    let dir = tempfile::tempdir().unwrap();
    let tab = imexpeer::builtin("imex-peer2s").unwrap();
    let bent = tab.with_gamma(tab.gamma() * 1.01).unwrap();
    let path = dir.path().join("bent.tab");
    fs::write(&path, bent.to_text()).unwrap();
    let o = imexpeer(
        &["verify", "--csv", "--method", path.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("super-convergence"));
    let csv = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .find(|e| {
            e.file_name()
                .to_string_lossy()
                .starts_with("certification_")
        });
    assert!(csv.is_some());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["verify"],
        vec!["frobnicate"],
        vec!["verify", "--method", "2s", "--unknown"],
        vec!["integrate", "--method", "2s", "--dt", "0.3"],
        vec!["convergence", "--experiment", "gravity"],
        vec!["search", "--preset", "s9"],
        vec!["--threads", "0", "verify", "--method", "2s"],
    ] {
        let o = imexpeer(&args, dir.path());
        assert_eq!(code(&o), 2, "{args:?}");
    }
}

#[test]
fn unwritable_output_directory_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = imexpeer(
        &[
            "verify",
            "--csv",
            "--method",
            "2s",
            "--out",
            blocker.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn explicit_stiff_run_is_a_domain_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = imexpeer(
        &[
            "convergence",
            "--experiment",
            "ar",
            "--methods",
            "2s",
            "--steps",
            "2e-3,1e-3",
            "--mode",
            "explicit",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
    let csv =
        fs::read_to_string(dir.path().join("convergence_advection-reaction_m48.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().skip(1).all(|l| l.contains(",1,")));
}

#[test]
fn integrate_writes_state_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let o = imexpeer(
        &[
            "integrate",
            "--method",
            "imex-peer2s",
            "--dt",
            "0.05",
            "--trace",
            trace.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let state = fs::read_to_string(dir.path().join("integrate_imex-peer2s_pr.csv")).unwrap();
    assert_eq!(state.lines().next(), Some("index,value,exact"));
    assert_eq!(state.lines().count(), 3);
    let trace = fs::read_to_string(trace).unwrap();
    // 100 steps of the grid, the first one taken by the starting block
    assert_eq!(trace.lines().count(), 1 + 99);
}

fn digits_ok(field: &str) -> bool {
    // d.dddddddddddddddde±x: 17 significant digits
    let mantissa = field.trim_start_matches('-').split('e').next().unwrap();
    mantissa.len() == 18 && mantissa.as_bytes()[1] == b'.'
}

#[test]
fn stability_outputs_are_full_precision_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["stability", "--method", "2s", "--nx", "30", "--ny", "20"];
    assert_eq!(code(&imexpeer(&args, a.path())), 0);
    let o = imexpeer(
        &[
            "--threads",
            "1",
            args[0],
            args[1],
            args[2],
            args[3],
            args[4],
            args[5],
            args[6],
        ],
        b.path(),
    );
    assert_eq!(code(&o), 0);
    for name in [
        "stability_imex-peer2s_summary.csv",
        "stability_imex-peer2s_explicit.csv",
        "stability_imex-peer2s_alpha.csv",
    ] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    let summary = fs::read_to_string(a.path().join("stability_imex-peer2s_summary.csv")).unwrap();
    let row = summary.lines().nth(1).unwrap();
    assert!(row.split(',').skip(1).all(digits_ok), "{row}");
    let grid = fs::read_to_string(a.path().join("stability_imex-peer2s_explicit.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 30 * 20);
}

#[test]
fn convergence_csv_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["convergence", "--experiment", "pr"];
    assert_eq!(code(&imexpeer(&args, a.path())), 0);
    assert_eq!(code(&imexpeer(&args, b.path())), 0);
    let name = "convergence_prothero-robinson.csv";
    let x = fs::read_to_string(a.path().join(name)).unwrap();
    assert_eq!(x, fs::read_to_string(b.path().join(name)).unwrap());
    assert_eq!(x.lines().count(), 1 + 3 * 9);
    let row: Vec<&str> = x.lines().nth(1).unwrap().split(',').collect();
    assert!(digits_ok(row[1]) && digits_ok(row[2]) && digits_ok(row[4]));
}

#[test]
fn search_writes_loadable_candidates_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "search",
        "--preset",
        "s2-seeded",
        "--seed",
        "4",
        "--multistart",
        "2",
    ];
    let o = imexpeer(&args, a.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(code(&imexpeer(&args, b.path())), 0);
    let sub = "search_s2-seeded_seed4";
    let cert = fs::read_to_string(a.path().join(sub).join("certification.csv")).unwrap();
    assert_eq!(
        cert,
        fs::read_to_string(b.path().join(sub).join("certification.csv")).unwrap()
    );
    let header: Vec<&str> = cert.lines().next().unwrap().split(',').collect();
    assert_eq!(header[0], "file");
    for line in cert.lines().skip(1) {
        let file = line.split(',').next().unwrap();
        let path = a.path().join(sub).join(file);
        let v = imexpeer(&["verify", "--method", path.to_str().unwrap()], a.path());
        assert_eq!(code(&v), 0, "{}", stdout(&v));
    }
}

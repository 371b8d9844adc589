use std::path::Path;
use std::process::{Command, Output};

use spde_gmrf::experiment::ConfigFile;
use spde_gmrf::io::{read_field, write_field};
use spde_gmrf::Field;

const CONFIG: &str = "[run]\nseed = 3\nout_dir = out\n\n[grid]\nnx = 6\nny = 6\nnt = 3\n\n[theta]\npreset = advected\n\n\
                      [obs]\ndensity = 0.3\n\n[solver]\nmode = joint\niterations = 5\nfixed = tau\nfirst_guess = isotropic\n\n\
                      [sample]\nmembers = 4\n\n[fit]\nsteps = 3\ntrajectories = 2\n\n[bench]\nsizes = 4, 5\nnt = 3\n";

fn spde(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spde-gmrf")).current_dir(dir).args(args).output().unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.cfg"), CONFIG).unwrap();
    dir
}

fn manifest(dir: &Path) -> ConfigFile {
    ConfigFile::load(dir.join("manifest.txt")).unwrap()
}

#[test]
fn every_command_succeeds_and_writes_manifest() {
    let dir = setup();
    let p = dir.path();
    let runs: [(&str, &[&str]); 6] = [
        ("simulate", &["truth.stgf", "obs.csv", "theta/kappa.stgf"]),
        ("interpolate", &["x_star.stgf", "metrics.csv", "slab_scores.csv"]),
        ("joint-solve", &["x_star.stgf", "diagnostics.csv", "theta/tau.stgf"]),
        ("sample-posterior", &["mean.stgf", "std.stgf"]),
        ("fit", &["loss.csv", "theta/diffusion.stgf"]),
        ("benchmark", &["benchmark.csv"]),
    ];
    for (cmd, files) in runs {
        let out_dir = format!("out/{cmd}");
        let o = spde(p, &["--config", "exp.cfg", "--out-dir", &out_dir, "--threads", "1", cmd]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        let d = p.join(&out_dir);
        for f in files {
            assert!(d.join(f).exists(), "{cmd}: missing {f}");
        }
        let m = manifest(&d);
        assert_eq!(m.get("manifest", "command"), Some(cmd));
        assert_eq!(m.get("run", "seed"), Some("3"));
        assert_eq!(m.get("manifest", "threads"), Some("1"));
    }
    let o = spde(
        p,
        &[
            "evaluate",
            "--estimate",
            "out/interpolate/x_star.stgf",
            "--truth",
            "out/simulate/truth.stgf",
            "--out-dir",
            "ev",
        ],
    );
    assert!(o.status.success());
    assert_eq!(
        std::fs::read_to_string(p.join("ev/metrics.csv")).unwrap(),
        std::fs::read_to_string(p.join("out/interpolate/metrics.csv")).unwrap()
    );
    assert!(manifest(&p.join("ev")).get("manifest", "truth").unwrap().contains("sha256="));
}

#[test]
fn reruns_are_bit_identical() {
    let dir = setup();
    let p = dir.path();
    for d in ["a", "b"] {
        assert!(spde(p, &["--config", "exp.cfg", "--out-dir", d, "sample-posterior"]).status.success());
    }
    for f in ["x_star.stgf", "mean.stgf", "std.stgf"] {
        assert_eq!(std::fs::read(p.join("a").join(f)).unwrap(), std::fs::read(p.join("b").join(f)).unwrap(), "{f}");
    }
    let (a, b) = (manifest(&p.join("a")), manifest(&p.join("b")));
    assert_eq!(a.get("run", "seed"), b.get("run", "seed"));
    assert_eq!(a.get("solver", "fixed"), Some("tau"));
    // the seed override lands in the manifest and changes the draw
    assert!(spde(p, &["--config", "exp.cfg", "--seed", "4", "--out-dir", "c", "simulate"]).status.success());
    assert!(spde(p, &["--config", "exp.cfg", "--out-dir", "d", "simulate"]).status.success());
    assert_eq!(manifest(&p.join("c")).get("run", "seed"), Some("4"));
    assert_ne!(std::fs::read(p.join("c/truth.stgf")).unwrap(), std::fs::read(p.join("d/truth.stgf")).unwrap());
}

#[test]
fn simulate_writes_prior_members() {
    let dir = setup();
    let p = dir.path();
    assert!(spde(p, &["--config", "exp.cfg", "--out-dir", "sim", "simulate", "--members", "3"]).status.success());
    let names: Vec<_> = (0..3).map(|i| p.join(format!("sim/members/member_{i:04}.stgf"))).collect();
    assert!(names.iter().all(|n| n.exists()));
    assert!(!p.join("sim/members/member_0003.stgf").exists());
    assert_eq!(std::fs::read(&names[0]).unwrap(), std::fs::read(p.join("sim/truth.stgf")).unwrap());
    assert_eq!(read_field(&names[1]).unwrap().dims(), &[3, 6, 6]);
}

#[test]
fn external_observations_are_used() {
    let dir = setup();
    let p = dir.path();
    assert!(spde(p, &["--config", "exp.cfg", "--out-dir", "sim", "simulate"]).status.success());
    let o = spde(
        p,
        &["--config", "exp.cfg", "--out-dir", "oi", "interpolate", "--obs", "sim/obs.csv", "--truth", "sim/truth.stgf"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(manifest(&p.join("oi")).get("manifest", "obs").unwrap().starts_with("sim/obs.csv sha256="));
    assert!(p.join("oi/metrics.csv").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = setup();
    let p = dir.path();
    for args in [
        &["simulate"][..],
        &["--config", "missing.cfg", "simulate"],
        &["--config", "exp.cfg", "--threads", "0", "simulate"],
        &["--config", "exp.cfg", "launch"],
        &["evaluate", "--estimate", "nope.stgf", "--truth", "nope.stgf"],
    ] {
        assert_eq!(spde(p, args).status.code(), Some(2), "{args:?}");
    }
    std::fs::write(p.join("bad.cfg"), "[run]\nseed = 1\n[obs]\npattern = spiral\n").unwrap();
    assert_eq!(spde(p, &["--config", "bad.cfg", "simulate"]).status.code(), Some(2));
    std::fs::write(p.join("noseed.cfg"), "[grid]\nnx = 4\n").unwrap();
    assert_eq!(spde(p, &["--config", "noseed.cfg", "simulate"]).status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_three() {
    let dir = setup();
    let p = dir.path();
    assert!(spde(p, &["--config", "exp.cfg", "--out-dir", "sim", "simulate"]).status.success());
    let tau = read_field(p.join("sim/theta/tau.stgf")).unwrap();
    write_field(&Field::filled(tau.dims().to_vec(), 1e-200), p.join("sim/theta/tau.stgf")).unwrap();
    let text = CONFIG.replace("preset = advected", "dir = sim/theta").replace("first_guess = isotropic\n", "");
    std::fs::write(p.join("tiny.cfg"), text).unwrap();
    let o = spde(p, &["--config", "tiny.cfg", "--out-dir", "oi", "interpolate"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

use std::path::Path;
use std::process::{Command, Output};

use pwgf::ParticleEnsemble;

fn pwgf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pwgf"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn pwgf")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_ensemble(path: &Path, rows: &[Vec<f64>]) {
    let ens = ParticleEnsemble::from_rows(rows).unwrap();
    ens.write_csv(std::fs::File::create(path).unwrap()).unwrap();
}

#[test]
fn malformed_config_exits_2_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        "experiment.preset = mean_quartic\nexperiment.outdir = out\nthis line is broken\n",
        "experiment.preset = mean_quartic\nexperiment.outdir = out\npwgf.etaa = 0.1\n",
        "experiment.preset = mean_quartic\nexperiment.outdir = out\npwgf.eta = -1\n",
        "experiment.preset = coulomb_mmd\nexperiment.outdir = out\nexperiment.modes = hessian\n",
    ];
    for (i, text) in cases.iter().enumerate() {
        let cfg = dir.path().join(format!("bad{i}.cfg"));
        std::fs::write(&cfg, text).unwrap();
        let o = pwgf(&["run", "--config", cfg.to_str().unwrap()], dir.path());
        assert_eq!(
            o.status.code(),
            Some(2),
            "case {i}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(
            !dir.path().join("out").exists(),
            "case {i} created the output directory"
        );
    }
    let o = pwgf(&["run", "--config", "/nonexistent.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = pwgf(&["run"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_writes_traces_manifest_and_ensembles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "experiment.preset = mean_quartic\nobjective.d = 2\nexperiment.n = 4\nexperiment.init = saddle\n\
         experiment.modes = static, hessian\nexperiment.seeds = 3\nexperiment.outdir = out\npwgf.max_iters = 50\n",
    )
    .unwrap();
    let o = pwgf(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let trace = std::fs::read_to_string(out.join("mean_quartic_hessian_seed3.csv")).unwrap();
    assert!(trace.starts_with("iter,f_value,grad_norm,event,elapsed_ms\n"));
    assert!(trace.lines().nth(1).unwrap().contains(",perturb,"));
    assert!(out.join("mean_quartic_static_seed3.csv").exists());
    assert!(out.join("ensembles/mean_quartic_hessian_seed3.csv").exists());

    // the manifest is itself a runnable config reproducing the same cells
    let manifest = out.join("mean_quartic_manifest.txt");
    let text = std::fs::read_to_string(&manifest).unwrap();
    assert!(text.contains("pwgf.hyper = manual"));
    let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
    assert!(keys.windows(2).all(|w| w[0] < w[1]));
    let again = dir.path().join("again");
    std::fs::create_dir(&again).unwrap();
    let o = pwgf(&["run", "--config", manifest.to_str().unwrap()], &again);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let strip = |s: String| -> Vec<String> {
        s.lines()
            .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
            .collect()
    };
    assert_eq!(
        strip(trace),
        strip(std::fs::read_to_string(again.join("out/mean_quartic_hessian_seed3.csv")).unwrap())
    );
}

#[test]
fn classify_reports_saddle_minimum_and_unsupported() {
    let dir = tempfile::tempdir().unwrap();
    let quartic = dir.path().join("quartic.cfg");
    std::fs::write(
        &quartic,
        "experiment.preset = mean_quartic\nobjective.d = 3\nexperiment.n = 4\n",
    )
    .unwrap();

    let saddle = dir.path().join("saddle.csv");
    write_ensemble(
        &saddle,
        &[
            vec![0.5, -1.0, 0.25],
            vec![-0.5, 1.0, -0.25],
            vec![2.0, 0.125, -1.5],
            vec![-2.0, -0.125, 1.5],
        ],
    );
    let args = |e: &Path| {
        vec![
            "classify".to_string(),
            "--config".into(),
            quartic.display().to_string(),
            "--ensemble".into(),
            e.display().to_string(),
            "--eps".into(),
            "1e-6".into(),
            "--delta".into(),
            "0.5".into(),
        ]
    };
    let run = |a: Vec<String>| pwgf(&a.iter().map(String::as_str).collect::<Vec<_>>(), dir.path());

    let o = run(args(&saddle));
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "Saddle, grad_norm=0, lambda_min=-1");

    let minimum = dir.path().join("minimum.csv");
    write_ensemble(&minimum, &vec![vec![1.0, 0.0, 0.0]; 4]);
    let o = run(args(&minimum));
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("SecondOrderStationary"), "{}", stdout(&o));

    let off = dir.path().join("off.csv");
    write_ensemble(&off, &vec![vec![0.5, 0.0, 0.0]; 4]);
    let o = run(args(&off));
    assert!(stdout(&o).starts_with("NonStationary"), "{}", stdout(&o));

    let spectrum = dir.path().join("spectrum.csv");
    let mut a = args(&saddle);
    a.extend(["--dump-spectrum".to_string(), spectrum.display().to_string()]);
    assert!(run(a).status.success());
    let sp = std::fs::read_to_string(&spectrum).unwrap();
    assert!(sp.starts_with("index,eigenvalue\n"));
    assert_eq!(sp.lines().count(), 13);

    let coulomb = dir.path().join("coulomb.cfg");
    std::fs::write(&coulomb, "experiment.preset = coulomb_mmd\nexperiment.n = 4\n").unwrap();
    let o = pwgf(
        &[
            "classify",
            "--config",
            coulomb.to_str().unwrap(),
            "--ensemble",
            saddle.to_str().unwrap(),
            "--eps",
            "1e-6",
            "--delta",
            "0.5",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("hessian"));
}

#[test]
fn defaults_prints_the_identity_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let consts = dir.path().join("consts.cfg");
    std::fs::write(
        &consts,
        "constants.L1 = 2\nconstants.L2 = 1\nconstants.L3 = 1\nconstants.R1 = 1\nconstants.R2 = 1\nconstants.zeta = 0.1\nconstants.delta_F = 1\n",
    )
    .unwrap();
    let c = consts.to_str().unwrap();
    let o = pwgf(
        &[
            "defaults",
            "--constants",
            c,
            "--eps",
            "1e-3",
            "--delta",
            "0.2",
            "--eta",
            "0.1",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for key in ["eta_p", "k_thres", "f_thres"] {
        assert!(text.contains(key), "{text}");
    }
    // (L2 + L3) eps > delta^2
    let o = pwgf(
        &[
            "defaults",
            "--constants",
            c,
            "--eps",
            "0.1",
            "--delta",
            "0.2",
            "--eta",
            "0.1",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("delta^2"));
}

#[test]
fn output_does_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("md.cfg");
    std::fs::write(
        &cfg,
        "experiment.preset = matdecomp\nobjective.k = 3\nobjective.l = 5\nobjective.samples = 100\nexperiment.n = 12\n\
         experiment.init_scale = 1e-6\nexperiment.modes = isotropic, hessian\nexperiment.seeds = 0..1\n\
         experiment.outdir = out\npwgf.eta = 0.1\npwgf.eta_p = 1\npwgf.eps = 1e-2\npwgf.k_thres = 20\n\
         pwgf.f_thres = 1e-9\npwgf.minibatch = 50\npwgf.max_iters = 120\n",
    )
    .unwrap();
    let mut traces = Vec::new();
    for threads in ["1", "3"] {
        let cwd = dir.path().join(threads);
        std::fs::create_dir(&cwd).unwrap();
        let o = Command::new(env!("CARGO_BIN_EXE_pwgf"))
            .args(["run", "--config", cfg.to_str().unwrap()])
            .env("PWGF_THREADS", threads)
            .current_dir(&cwd)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let t = std::fs::read_to_string(cwd.join("out/matdecomp_hessian_seed1.csv")).unwrap();
        assert!(t.contains(",perturb,"));
        let e = std::fs::read_to_string(cwd.join("out/ensembles/matdecomp_hessian_seed1.csv")).unwrap();
        let rows: Vec<String> = t.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect();
        traces.push((rows, e));
    }
    assert_eq!(traces[0], traces[1]);
}

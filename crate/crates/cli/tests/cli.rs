use std::fs;
use std::path::Path;
use std::process::Command;

use rlsac_cli::{run, EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};

fn call(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["rlsac"];
    full.extend_from_slice(args);
    let code = run(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = call(args);
    assert_eq!(code, EXIT_OK, "{args:?}: {err}");
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--n-points", "30", "--hidden-width", "4", "--head-width", "4", "--k-neighbors", "4",
    "--epochs", "2", "--scenes-per-epoch", "5", "--warmup", "8", "--batch-size", "4",
    "--eval-scenes", "4", "--episodes", "2", "--steps", "3", "--timing", "false",
];

fn tiny(extra: &[&str]) -> Vec<String> {
    TINY.iter().chain(extra).map(|a| a.to_string()).collect()
}

fn ok_owned(args: Vec<String>) -> String {
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn assert_csv(text: &str, header: &str) {
    assert!(!text.contains('\r'));
    assert!(text.ends_with('\n'));
    assert_eq!(text.lines().next(), Some(header));
}

#[test]
fn gen_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    let m1 = ok(&["gen", "--count", "3", "--seed", "7", "--out", s(&a)]);
    let m2 = ok(&["gen", "--count", "3", "--seed", "7", "--out", s(&b)]);
    assert_eq!(m1, m2);
    assert_eq!(m1.lines().count(), 4);
    for i in 0..3 {
        let name = format!("scene_{i:05}.txt");
        let x = fs::read(a.join(&name)).unwrap();
        assert_eq!(x, fs::read(b.join(&name)).unwrap());
        assert!(x.starts_with(b"SCENE v1 line2d"));
    }
    let f = d.path().join("f");
    ok(&["gen", "--task", "fundamental", "--n-points", "40", "--count", "1", "--out", s(&f)]);
    assert!(fs::read_to_string(f.join("scene_00000.txt")).unwrap().starts_with("SCENE v1 fundamental"));
}

#[test]
fn dump_config_round_trips_and_flags_win() {
    let d = tempfile::tempdir().unwrap();
    let dumped = ok(&["--dump-config", "--seed", "42", "--rates", "0.3,0.6"]);
    let path = d.path().join("run.conf");
    fs::write(&path, &dumped).unwrap();
    assert_eq!(ok(&["--config", s(&path), "--dump-config"]), dumped);
    let over = ok(&["--config", s(&path), "--seed", "5", "--dump-config"]);
    assert!(over.contains("\nseed = 5\n"));
    assert!(over.contains("\nrates = 0.3,0.6\n"));

    let (g1, g2) = (d.path().join("g1"), d.path().join("g2"));
    ok(&["gen", "--config", s(&path), "--count", "2", "--out", s(&g1)]);
    ok(&["gen", "--seed", "42", "--count", "2", "--out", s(&g2)]);
    assert_eq!(
        fs::read(g1.join("scene_00001.txt")).unwrap(),
        fs::read(g2.join("scene_00001.txt")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(call(&["--no-such-flag"]).0, EXIT_USAGE);
    assert_eq!(call(&["train"]).0, EXIT_USAGE);
    assert_eq!(call(&["gen", "--seed", "x", "--out", "o"]).0, EXIT_USAGE);
    assert_eq!(call(&[]).0, EXIT_USAGE);
    let bad = d.path().join("bad.conf");
    fs::write(&bad, "seed = 1\nnot a pair\n").unwrap();
    let (code, _, err) = call(&["gen", "--config", s(&bad)]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains(":2:"), "{err}");
    assert_eq!(call(&["gen", "--config", s(&d.path().join("missing.conf"))]).0, EXIT_IO);
    let out = d.path().join("e");
    assert_eq!(call(&["eval", "--model", s(&d.path().join("nope.txt")), "--out", s(&out)]).0, EXIT_IO);
    let garbage = d.path().join("garbage.txt");
    fs::write(&garbage, "RLSAC-MODEL v9\n").unwrap();
    assert_eq!(call(&["eval", "--model", s(&garbage), "--out", s(&out)]).0, EXIT_IO);

    // a model whose weights are not finite diverges at evaluation
    let model = d.path().join("m.txt");
    ok_owned(tiny(&["train", "--epochs", "0", "--out", s(&model)]));
    let text = fs::read_to_string(&model).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let at = lines.iter().position(|l| l == "DIFFMATH-PARAMS v1").unwrap() + 2;
    let mut first: Vec<String> = lines[at].split_whitespace().map(String::from).collect();
    first[0] = "NaN".into();
    lines[at] = first.join(" ");
    fs::write(&model, lines.join("\n") + "\n").unwrap();
    let args = tiny(&["eval", "--model", s(&model), "--out", s(&out)]);
    let (code, _, err) = call(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code, EXIT_NUMERIC, "{err}");
}

#[test]
fn train_eval_bench_are_byte_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let run_all = |root: &Path| {
        let model = root.join("model.txt");
        ok_owned(tiny(&["train", "--out", s(&model)]));
        ok_owned(tiny(&["eval", "--model", s(&model), "--out", s(&root.join("eval"))]));
        ok_owned(tiny(&["bench", "--rates", "0.3,0.6", "--shared-model", s(&model), "--out", s(&root.join("bench"))]));
    };
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    run_all(&a);
    run_all(&b);
    for f in [
        "model.txt",
        "model.txt.log.csv",
        "eval/results.csv",
        "eval/summary.csv",
        "eval/steps.csv",
        "bench/results.csv",
        "bench/summary.csv",
        "bench/plot.csv",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let log = fs::read_to_string(a.join("model.txt.log.csv")).unwrap();
    assert_csv(&log, "epoch,mean_reward,critic_loss,actor_loss,buffer_size");
    assert_eq!(log.lines().count(), 3);
    assert!(fs::read_to_string(a.join("model.txt")).unwrap().starts_with("RLSAC-MODEL v1\n"));

    let results = fs::read_to_string(a.join("eval/results.csv")).unwrap();
    assert_csv(&results, "scene_id,method,outlier_rate,error_deg,best_inlier_ratio,hypotheses_used,wall_ms");
    assert_eq!(results.lines().count(), 1 + 2 * 4);
    let row: Vec<&str> = results.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1], "rlsac");
    let mantissa = row[3].split('e').next().unwrap().replace(['-', '.'], "");
    assert_eq!(mantissa.len(), 17, "{}", row[3]);
    assert_eq!(row[5], "8");

    let summary = fs::read_to_string(a.join("eval/summary.csv")).unwrap();
    assert_csv(&summary, "method,outlier_rate,maa,median_deg,n_scenes");
    assert_csv(
        &fs::read_to_string(a.join("eval/steps.csv")).unwrap(),
        "scene_id,episode,step,action,reward,inlier_count,done_reason",
    );

    let plot = fs::read_to_string(a.join("bench/plot.csv")).unwrap();
    assert_csv(&plot, "rate,method,maa,median");
    assert_eq!(plot.lines().count(), 5);
    assert!(plot.lines().skip(1).any(|l| l.contains(",rlsac(transfer=true),")));
    let bench = fs::read_to_string(a.join("bench/summary.csv")).unwrap();
    assert_eq!(bench.lines().filter(|l| l.starts_with("rlsac(transfer=true),")).count(), 2);
}

#[test]
fn eval_reads_scene_files_and_checks_the_task() {
    let d = tempfile::tempdir().unwrap();
    let model = d.path().join("m.txt");
    ok_owned(tiny(&["train", "--epochs", "0", "--out", s(&model)]));
    let scenes = d.path().join("scenes");
    ok(&["gen", "--n-points", "30", "--count", "3", "--out", s(&scenes)]);
    ok_owned(tiny(&["eval", "--model", s(&model), "--scenes-dir", s(&scenes), "--out", s(&d.path().join("o"))]));
    let results = fs::read_to_string(d.path().join("o/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 2 * 3);
    let (code, _, _) = call(&["eval", "--task", "fundamental", "--model", s(&model), "--out", s(&d.path().join("p"))]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn thread_count_does_not_change_results() {
    let d = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_rlsac");
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = d.path().join(threads);
        let status = Command::new(exe)
            .args(["bench", "--rates", "0.5", "--eval-scenes", "6", "--timing", "false", "--out"])
            .arg(&out)
            .env("RLSAC_THREADS", threads)
            .output()
            .unwrap()
            .status;
        assert!(status.success());
        outputs.push(fs::read(out.join("results.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let status = Command::new(exe).arg("--bogus").output().unwrap().status;
    assert_eq!(status.code(), Some(EXIT_USAGE));
}

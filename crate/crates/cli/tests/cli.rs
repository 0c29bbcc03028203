use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn opt2i(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opt2i"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("run opt2i")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Every file under `root`, keyed by relative path.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Structured log events with the given name, parsed from stderr.
fn events(out: &Output, name: &str) -> Vec<Value> {
    stderr(out)
        .lines()
        .filter_map(|l| l.find('{').map(|i| &l[i..]))
        .filter_map(|j| serde_json::from_str::<Value>(j).ok())
        .filter(|v| v["event"] == name)
        .collect()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

const OPTIMIZE: [&str; 14] = [
    "optimize", "--backend", "sim", "--iters", "10", "--ppi", "5", "--images", "4", "--objective", "dsg",
    "--world-seed", "3", "--prompt-id",
];

#[test]
fn sim_runs_produce_identical_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let mut args = OPTIMIZE.to_vec();
        args.extend(["mona-lisa", "--out", path_str(dir)]);
        let out = opt2i(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert!(!stdout(&out).trim().is_empty());
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.contains_key(Path::new("runlog.json")));
    assert!(ta.contains_key(Path::new("settings.json")));
    assert!(ta.contains_key(Path::new("config.json")));
    assert!(ta.contains_key(Path::new("records/iter-0000.json")));
    assert!(!ta.contains_key(Path::new(".lock")));
    assert_eq!(ta, tb);

    // A different world seed changes the run.
    let c = tmp.path().join("c");
    let mut args = OPTIMIZE.to_vec();
    args[12] = "4";
    args.extend(["mona-lisa", "--out", path_str(&c)]);
    assert_eq!(code(&opt2i(&args)), 0);
    assert_ne!(tree(&c).get(Path::new("runlog.json")), ta.get(Path::new("runlog.json")));
}

#[test]
fn per_iteration_logs_carry_call_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = opt2i(&[
        "optimize", "--iters", "3", "--ppi", "2", "--prompt-id", "bike", "--out", path_str(tmp.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let its = events(&out, "iteration");
    assert_eq!(its.len(), 4);
    assert_eq!(its[0]["backends"]["llm"]["calls"], 0);
    assert_eq!(its[0]["backends"]["images"]["calls"], 4);
    for it in &its[1..] {
        assert_eq!(it["backends"]["llm"]["calls"], 1);
        assert_eq!(it["backends"]["images"]["calls"], 8);
    }
    assert_eq!(events(&out, "finished")[0]["backends"]["images"]["calls"], 28);
}

#[test]
fn interrupted_optimize_resumes_where_it_stopped() {
    let tmp = tempfile::tempdir().unwrap();
    let (full, cut) = (tmp.path().join("full"), tmp.path().join("cut"));
    let args = |dir: &Path| -> Vec<String> {
        ["optimize", "--objective", "dcs", "--iters", "4", "--ppi", "3", "--prompt-id", "hot-dog", "--out", path_str(dir)]
            .map(String::from)
            .to_vec()
    };
    let run = |dir: &Path| {
        let a = args(dir);
        opt2i(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    assert_eq!(code(&run(&full)), 0);
    assert_eq!(code(&run(&cut)), 0);
    std::fs::remove_file(cut.join("runlog.json")).unwrap();
    std::fs::remove_file(cut.join("records/iter-0004.json")).unwrap();
    std::fs::remove_file(cut.join("records/iter-0003.json")).unwrap();
    let out = run(&cut);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(events(&out, "iteration").len(), 2);
    assert_eq!(tree(&full), tree(&cut));

    // Same directory, different settings: refused.
    let out = opt2i(&[
        "optimize", "--iters", "5", "--prompt-id", "hot-dog", "--out", path_str(&cut),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("different settings"), "{}", stderr(&out));
}

#[test]
fn zero_iterations_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = opt2i(&[
        "optimize", "--iters", "0", "--ppi", "0", "--prompt", "a bike", "--out", path_str(&tmp.path().join("r")),
    ]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("max_iterations must be >= 1"), "{err}");
    assert!(err.contains("prompts_per_iter must be >= 1"), "{err}");
    assert!(!tmp.path().join("r").exists());
}

#[test]
fn missing_credential_stops_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("opt2i.toml");
    let endpoint = |name: &str| {
        format!(
            "[backend.{name}]\nurl = \"http://127.0.0.1:9/{name}\"\nmodel = \"m\"\napi_key_env = \"OPT2I_CLI_TEST_UNSET_KEY\"\n"
        )
    };
    let text = format!(
        "[backend]\nkind = \"http\"\n{}{}{}{}",
        endpoint("llm"),
        endpoint("images"),
        endpoint("embedder"),
        endpoint("vqa")
    );
    std::fs::write(&config, text).unwrap();
    let run = tmp.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_opt2i"))
        .args(["--config", path_str(&config), "optimize", "--prompt", "a bike", "--out", path_str(&run)])
        .env_remove("OPT2I_CLI_TEST_UNSET_KEY")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("OPT2I_CLI_TEST_UNSET_KEY"));
    assert!(!run.exists());

    // An http backend without endpoints names every missing section.
    let out = opt2i(&["optimize", "--backend", "http", "--prompt", "a bike", "--out", path_str(&run)]);
    assert_eq!(code(&out), 2);
    for name in ["llm", "images", "embedder", "vqa"] {
        assert!(stderr(&out).contains(&format!("[backend.{name}]")), "{}", stderr(&out));
    }
}

#[test]
fn flags_override_the_settings_file() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("opt2i.toml");
    std::fs::write(&config, "[run]\niterations = 2\nprompts_per_iter = 3\nobjective = \"dcs\"\n").unwrap();
    let run = tmp.path().join("run");
    let out = opt2i(&[
        "--config", path_str(&config), "optimize", "--iters", "1", "--prompt-id", "bike", "--out", path_str(&run),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cfg: Value = serde_json::from_slice(&std::fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["max_iterations"], 1);
    assert_eq!(cfg["prompts_per_iter"], 3);
    assert_eq!(cfg["objective"], "dcs");
    let settings: Value = serde_json::from_slice(&std::fs::read(run.join("settings.json")).unwrap()).unwrap();
    assert_eq!(settings["run"]["iterations"], 1);

    std::fs::write(&config, "[run]\niteration = 2\n").unwrap();
    let out = opt2i(&["--config", path_str(&config), "optimize", "--prompt-id", "bike", "--out", path_str(&run)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn locked_run_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join(".lock"), format!("{}\n", std::process::id())).unwrap();
    let out = opt2i(&["optimize", "--iters", "1", "--prompt-id", "bike", "--out", path_str(tmp.path())]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("locked"), "{}", stderr(&out));
}

const SWEEP: [&str; 8] = ["--world", "synthetic", "--world-prompts", "6", "--iters", "3", "--ppi", "2"];

#[test]
fn comparison_writes_one_report_per_method() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["benchmark", "--method", "opt2i,paraphrasing", "--out", path_str(tmp.path())];
    args.extend(SWEEP);
    let out = opt2i(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["opt2i/report.json", "opt2i/curves.csv", "paraphrasing/report.json", "comparison.json", "settings.json"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    let summary: Value = serde_json::from_slice(&std::fs::read(tmp.path().join("comparison.json")).unwrap()).unwrap();
    assert_eq!(summary["budget"], 6);
    assert!(stdout(&out).contains("budget 6"));
    assert!(stdout(&out).contains("paraphrasing\tmean improvement"));
}

#[test]
fn unequal_budgets_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("opt2i.toml");
    std::fs::write(
        &config,
        "[benchmark]\nmethods = [\"opt2i\", \"paraphrasing\"]\n[benchmark.overrides.paraphrasing]\nprompts_per_iter = 20\niterations = 1\n",
    )
    .unwrap();
    let out = opt2i(&["--config", path_str(&config), "benchmark", "--out", path_str(&tmp.path().join("sweep"))]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("opt2i = 150") && err.contains("paraphrasing = 20"), "{err}");
    assert!(!tmp.path().join("sweep").exists());
}

#[test]
fn resume_runs_only_the_missing_prompts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = path_str(tmp.path());
    let mut args = vec!["benchmark", "--out", dir];
    args.extend(SWEEP);
    let first = opt2i(&args);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let calls = |out: &Output| events(out, "calls")[0]["backends"]["llm"]["calls"].as_u64().unwrap();
    let full = calls(&first);
    let report = std::fs::read(tmp.path().join("opt2i/report.json")).unwrap();

    let runs = tmp.path().join("opt2i/runs");
    std::fs::remove_file(runs.join("syn-002/runlog.json")).unwrap();
    std::fs::remove_file(runs.join("syn-002/records/iter-0003.json")).unwrap();
    std::fs::remove_file(runs.join("syn-004/runlog.json")).unwrap();

    let resumed = opt2i(&["benchmark", "--resume", dir]);
    assert_eq!(code(&resumed), 0, "{}", stderr(&resumed));
    // One LLM call redoes the dropped iteration; the other prompt only
    // needs its run log rebuilt.
    assert_eq!(calls(&resumed), 1, "first run made {full}");
    assert_eq!(std::fs::read(tmp.path().join("opt2i/report.json")).unwrap(), report);

    let again = opt2i(&["benchmark", "--resume", dir]);
    assert_eq!(calls(&again), 0);

    // A new sweep in the same directory with other settings is refused.
    let out = opt2i(&["benchmark", "--out", dir, "--iters", "9"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn score_prints_normalized_element_table() {
    let out = opt2i(&[
        "score", "--prompt", "a bike lying on the ground, covered in snow", "--image", "sim:bike|ground|snow",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        stdout(&out),
        "dsg\tscore\nIs there a bike?\t100\nIs the bike lying on the ground?\t100\nIs the bike covered in snow?\t100\nglobal\t100\n"
    );

    let out = opt2i(&[
        "score", "--prompt", "a bike lying on the ground, covered in snow", "--image", "sim:bike|ground",
    ]);
    assert!(stdout(&out).ends_with("global\t67\n"), "{}", stdout(&out));

    let out = opt2i(&["score", "--prompt", "a bike", "--image", "sim:bike|dragon"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("sim:bike|dragon"));

    let out = opt2i(&["score", "--prompt", "a bike", "--image", "{\"payload\": 1}"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn decompose_prints_noun_phrases() {
    let out = opt2i(&["decompose", "A ginger cat is sleeping next to the window."]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out), "ginger cat, window\n");
}

#[test]
fn sim_world_lists_prompts() {
    let out = opt2i(&["sim-world", "--world", "synthetic", "--world-prompts", "3"]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).lines().count(), 3);
    assert!(stdout(&out).starts_with("syn-000\t"));
    let out = opt2i(&["sim-world", "--json"]);
    let spec: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(spec["lexicon"].as_array().unwrap().len() > 10);
}

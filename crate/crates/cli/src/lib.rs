//! Command-line front end: `gen`, `train`, `eval` and `bench`.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use rlsac::agent::{train, EpochLog, Model};
use rlsac::bench::{evaluate, Method, RunResult, Summary};
use rlsac::scenes::{gen_line_scene_with_noise, gen_scene, load_scene, save_scene, SceneData, Task};
use rlsac::Error;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Dimension(_) => EXIT_USAGE,
            Error::Io(_) | Error::Parse { .. } | Error::UnsupportedVersion(_) => EXIT_IO,
            _ => EXIT_NUMERIC,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError {
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Independent seed streams derived from the master seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Gen,
    Train,
    Agent,
    Eval(f64),
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    let tag = match stream {
        Stream::Gen => 1,
        Stream::Train => 2,
        Stream::Agent => 3,
        Stream::Eval(rate) => splitmix(4 ^ rate.to_bits()),
    };
    splitmix(splitmix(seed ^ splitmix(tag)) ^ index)
}

/// One synthetic scene under `cfg` at `rate`.
pub fn make_scene(cfg: &RunConfig, rate: f64, seed: u64) -> rlsac::Result<SceneData> {
    match cfg.task {
        Task::Line2d => gen_line_scene_with_noise(rate, cfg.n_points, cfg.line_noise, seed),
        Task::Fundamental => gen_scene(cfg.task, cfg.n_points, rate, cfg.pixel_sigma, seed),
    }
}

/// The evaluation scene set for one rate, shared by every method.
pub fn eval_scene_set(cfg: &RunConfig, rate: f64) -> rlsac::Result<Vec<SceneData>> {
    (0..cfg.eval_scenes)
        .map(|i| make_scene(cfg, rate, derive_seed(cfg.seed, Stream::Eval(rate), i as u64)))
        .collect()
}

/// Training scene `index` of `epoch`.
pub fn train_scene(cfg: &RunConfig, epoch: usize, index: usize) -> rlsac::Result<SceneData> {
    let i = (epoch * cfg.scenes_per_epoch + index) as u64;
    make_scene(cfg, cfg.outlier_rate, derive_seed(cfg.seed, Stream::Train, i))
}

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

pub const RESULTS_HEADER: &str =
    "scene_id,method,outlier_rate,error_deg,best_inlier_ratio,hypotheses_used,wall_ms";
pub const SUMMARY_HEADER: &str = "method,outlier_rate,maa,median_deg,n_scenes";
pub const PLOT_HEADER: &str = "rate,method,maa,median";
pub const STEP_LOG_HEADER: &str = "scene_id,episode,step,action,reward,inlier_count,done_reason";

fn push_results(out: &mut String, method: &str, rate: f64, results: &[RunResult], timing: bool) {
    for r in results {
        let _ = writeln!(
            out,
            "{},{method},{},{},{},{},{}",
            r.scene_id,
            real(rate),
            real(r.error.combined),
            real(r.best_inlier_ratio),
            r.hypotheses_used,
            real(if timing { r.wall_ms } else { 0.0 })
        );
    }
}

fn push_summary(out: &mut String, method: &str, rate: f64, s: &Summary) {
    let _ = writeln!(
        out,
        "{method},{},{},{},{}",
        real(rate),
        real(s.maa),
        real(s.median_deg),
        s.n_scenes
    );
}

fn push_steps(out: &mut String, results: &[RunResult]) {
    for r in results {
        for s in &r.step_log {
            let action: Vec<String> = s.action.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.scene_id,
                s.episode,
                s.step,
                action.join(" "),
                real(s.reward),
                s.inlier_count,
                s.done_reason.as_str()
            );
        }
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::usage(format!("--{} is required", key.replace('_', "-"))))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn describe(method: &str, rate: f64, s: &Summary) -> String {
    let mut line = format!(
        "{method:>22} rate {rate:.2}  mAA {:.4}  median {:.4} deg",
        s.maa, s.median_deg
    );
    if let (Some(r), Some(t)) = (s.median_rotation, s.median_translation) {
        let _ = write!(line, "  (rotation {r:.4}, translation {t:.4})");
    }
    line
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<String, CliError> {
    let dir = required(&cfg.out, "out")?;
    create_dir(dir)?;
    let mut manifest = String::from("file,seed\n");
    for i in 0..cfg.count {
        let seed = derive_seed(cfg.seed, Stream::Gen, i as u64);
        let scene = make_scene(cfg, cfg.outlier_rate, seed)?;
        let name = format!("scene_{i:05}.txt");
        save_scene(&scene, &dir.join(&name))?;
        let _ = writeln!(manifest, "{name},{seed}");
    }
    Ok(manifest)
}

pub fn model_for(cfg: &RunConfig, policy: rlsac::agent::PolicyNet) -> Model {
    Model {
        task: cfg.task,
        policy,
        train: cfg.train(),
        extra: vec![
            ("outlier_rate".into(), cfg.outlier_rate.to_string()),
            ("n_points".into(), cfg.n_points.to_string()),
            ("seed".into(), cfg.seed.to_string()),
        ],
    }
}

pub fn train_log_path(cfg: &RunConfig, model: &Path) -> PathBuf {
    cfg.log.clone().unwrap_or_else(|| {
        let mut s = model.as_os_str().to_owned();
        s.push(".log.csv");
        PathBuf::from(s)
    })
}

pub fn cmd_train(cfg: &RunConfig, progress: &mut dyn FnMut(&EpochLog)) -> Result<String, CliError> {
    let out = required(&cfg.out, "out")?;
    let log_path = train_log_path(cfg, out);
    for parent in [out.parent(), log_path.parent()].into_iter().flatten() {
        create_dir(parent)?;
    }
    let (policy, log) = train(
        cfg.policy(),
        cfg.train(),
        cfg.episode(),
        &mut |e, i| train_scene(cfg, e, i),
        derive_seed(cfg.seed, Stream::Agent, 0),
        progress,
    )?;
    model_for(cfg, policy).save(out).map_err(|e| match e {
        Error::Io(m) => CliError {
            code: EXIT_IO,
            message: format!("{}: {m}", out.display()),
        },
        other => other.into(),
    })?;
    write_file(&log_path, &rlsac::agent::train_log_csv(&log))?;
    Ok(match log.last() {
        Some(r) => format!(
            "epoch {}: mean_reward {:.4} critic_loss {:.4} actor_loss {:.4} buffer {}\n",
            r.epoch, r.mean_reward, r.critic_loss, r.actor_loss, r.buffer_size
        ),
        None => "no epochs run; wrote the initial model\n".to_string(),
    })
}

fn load_model(path: &Path, task: Task) -> Result<Model, CliError> {
    if !path.exists() {
        return Err(CliError {
            code: EXIT_IO,
            message: format!("{}: model file not found", path.display()),
        });
    }
    let model = Model::load(path)?;
    if model.task != task {
        return Err(Error::Config(format!(
            "{} was trained for {}, the run is configured for {}",
            path.display(),
            model.task.tag(),
            task.tag()
        ))
        .into());
    }
    Ok(model)
}

fn scenes_from_dir(dir: &Path) -> Result<Vec<SceneData>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            load_scene(p).map_err(|e| {
                let mut err = CliError::from(e);
                err.message = format!("{}: {}", p.display(), err.message);
                err
            })
        })
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<String, CliError> {
    let model = load_model(required(&cfg.model, "model")?, cfg.task)?;
    let dir = required(&cfg.out, "out")?;
    let scenes = match &cfg.scenes_dir {
        Some(d) => scenes_from_dir(d)?,
        None => eval_scene_set(cfg, cfg.outlier_rate)?,
    };
    if scenes.is_empty() {
        return Err(CliError::usage("no scenes to evaluate"));
    }
    if let Some(s) = scenes.iter().find(|s| s.task != cfg.task) {
        return Err(Error::Config(format!("scene of task {} in a {} run", s.task.tag(), cfg.task.tag())).into());
    }
    let eval = cfg.eval();
    let (rl, rl_sum) = evaluate(Method::Rlsac(&model.policy), &scenes, &eval)?;
    let (rs, rs_sum) = evaluate(Method::Ransac, &scenes, &eval)?;
    create_dir(dir)?;
    let rate = cfg.outlier_rate;
    let mut results = format!("{RESULTS_HEADER}\n");
    push_results(&mut results, "rlsac", rate, &rl, cfg.timing);
    push_results(&mut results, "ransac", rate, &rs, cfg.timing);
    let mut summary = format!("{SUMMARY_HEADER}\n");
    push_summary(&mut summary, "rlsac", rate, &rl_sum);
    push_summary(&mut summary, "ransac", rate, &rs_sum);
    let mut steps = format!("{STEP_LOG_HEADER}\n");
    push_steps(&mut steps, &rl);
    write_file(&dir.join("results.csv"), &results)?;
    write_file(&dir.join("summary.csv"), &summary)?;
    write_file(&dir.join("steps.csv"), &steps)?;
    Ok(format!(
        "{}\n{}\n",
        describe("rlsac", rate, &rl_sum),
        describe("ransac", rate, &rs_sum)
    ))
}

/// Label of learned-method rows; transfer rows come from one shared model.
pub fn rlsac_label(transfer: bool) -> &'static str {
    if transfer {
        "rlsac(transfer=true)"
    } else {
        "rlsac"
    }
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<String, CliError> {
    let dir = required(&cfg.out, "out")?;
    if cfg.rates.is_empty() {
        return Err(CliError::usage("--rates is empty"));
    }
    let shared = cfg
        .shared_model
        .as_deref()
        .map(|p| load_model(p, cfg.task))
        .transpose()?;
    let eval = cfg.eval();
    let mut results = format!("{RESULTS_HEADER}\n");
    let mut summary = format!("{SUMMARY_HEADER}\n");
    let mut plot = format!("{PLOT_HEADER}\n");
    let mut report = String::new();
    for &rate in &cfg.rates {
        let scenes = eval_scene_set(cfg, rate)?;
        if scenes.is_empty() {
            return Err(CliError::usage("--eval-scenes must be positive"));
        }
        let per_rate = match (&shared, &cfg.model_dir) {
            (Some(_), _) => None,
            (None, Some(d)) => Some(load_model(&d.join(format!("model_{rate}.txt")), cfg.task)?),
            (None, None) => None,
        };
        let mut runs: Vec<(&str, Method<'_>)> = vec![("ransac", Method::Ransac)];
        if let Some(m) = &shared {
            runs.push((rlsac_label(true), Method::Rlsac(&m.policy)));
        }
        if let Some(m) = &per_rate {
            runs.push((rlsac_label(false), Method::Rlsac(&m.policy)));
        }
        for (label, method) in runs {
            let (res, sum) = evaluate(method, &scenes, &eval)?;
            push_results(&mut results, label, rate, &res, cfg.timing);
            push_summary(&mut summary, label, rate, &sum);
            let _ = writeln!(plot, "{},{label},{},{}", real(rate), real(sum.maa), real(sum.median_deg));
            let _ = writeln!(report, "{}", describe(label, rate, &sum));
        }
    }
    create_dir(dir)?;
    write_file(&dir.join("results.csv"), &results)?;
    write_file(&dir.join("summary.csv"), &summary)?;
    write_file(&dir.join("plot.csv"), &plot)?;
    Ok(report)
}

fn command() -> Command {
    let mut args = vec![
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .global(true)
            .help("key = value file applied before flags"),
        Arg::new("dump-config")
            .long("dump-config")
            .action(ArgAction::SetTrue)
            .global(true)
            .help("print the effective configuration and exit"),
    ];
    for (key, help) in config::KEYS {
        args.push(
            Arg::new(*key)
                .long(key.replace('_', "-"))
                .value_name("VALUE")
                .global(true)
                .help(*help),
        );
    }
    Command::new("rlsac")
        .about("Train and benchmark learned sample consensus")
        .args(args)
        .subcommand(Command::new("gen").about("write seeded scene files to --out"))
        .subcommand(Command::new("train").about("train a policy and write the model to --out"))
        .subcommand(Command::new("eval").about("compare a model with RANSAC on one scene set"))
        .subcommand(Command::new("bench").about("sweep outlier rates and emit plot data"))
}

fn resolve(matches: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = matches.get_one::<String>("config") {
        let path = Path::new(path);
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        cfg.apply_file(&text, &path.display().to_string())?;
    }
    for (key, _) in config::KEYS {
        if let Some(v) = matches.get_one::<String>(key) {
            cfg.set(key, v)
                .map_err(|e| CliError::usage(format!("--{}: {e}", key.replace('_', "-"))))?;
        }
    }
    Ok(cfg)
}

/// Runs the command line and returns the exit code. Normal output goes to
/// `stdout`, diagnostics to `stderr`.
pub fn run<I, T>(args: I, stdout: &mut impl std::io::Write, stderr: &mut impl std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if code == EXIT_OK {
                write!(stdout, "{}", e.render())
            } else {
                write!(stderr, "{}", e.render())
            };
            return code;
        }
    };
    let outcome = match resolve(&matches) {
        Err(e) => Err(e),
        Ok(cfg) if matches.get_flag("dump-config") => Ok(cfg.dump()),
        Ok(cfg) => match matches.subcommand_name() {
            Some("gen") => cmd_gen(&cfg),
            Some("train") => cmd_train(&cfg, &mut |r| {
                let _ = writeln!(
                    stderr,
                    "epoch {} mean_reward {:.4} critic_loss {:.4} actor_loss {:.4}",
                    r.epoch, r.mean_reward, r.critic_loss, r.actor_loss
                );
            }),
            Some("eval") => cmd_eval(&cfg),
            Some("bench") => cmd_bench(&cfg),
            _ => Err(CliError::usage("a subcommand is required: gen, train, eval or bench")),
        },
    };
    match outcome {
        Ok(text) => {
            let _ = write!(stdout, "{text}");
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message);
            e.code
        }
    }
}

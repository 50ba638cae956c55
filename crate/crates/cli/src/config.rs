//! Run configuration: defaults, `key = value` files and flag overrides.

use std::fmt::Write as _;
use std::path::PathBuf;

use rlsac::agent::{PolicyConfig, TrainConfig};
use rlsac::bench::{EvalConfig, SamplingMode};
use rlsac::env::EpisodeConfig;
use rlsac::scenes::Task;

use crate::CliError;

/// A value that can appear on the right of `key = value`.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|_| format!("invalid value `{s}`"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(usize, u64, f64, bool);

impl ConfigValue for Task {
    fn parse_value(s: &str) -> Result<Self, String> {
        Task::parse(s).map_err(|e| e.to_string())
    }
    fn render(&self) -> String {
        self.tag().to_string()
    }
}

impl ConfigValue for SamplingMode {
    fn parse_value(s: &str) -> Result<Self, String> {
        SamplingMode::parse(s).map_err(|e| e.to_string())
    }
    fn render(&self) -> String {
        self.as_str().to_string()
    }
}

/// `auto` or a real.
impl ConfigValue for Option<f64> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s == "auto" {
            Ok(None)
        } else {
            f64::parse_value(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "auto".to_string(), |v| v.to_string())
    }
}

/// Empty means unset.
impl ConfigValue for Option<PathBuf> {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }
    fn render(&self) -> String {
        self.as_ref().map_or_else(String::new, |p| p.display().to_string())
    }
}

/// Comma-separated reals.
impl ConfigValue for Vec<f64> {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|t| f64::parse_value(t.trim()))
            .collect::<Result<Vec<_>, _>>()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! run_config {
    ($( $field:ident : $ty:ty = $default:expr, $help:literal; )*) => {
        /// Every tunable of a run. Keys in files use the field names; flags
        /// use the same names with dashes.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        /// `(key, help)` for every field, in file order.
        pub const KEYS: &[(&str, &str)] = &[ $( (stringify!($field), $help), )* ];

        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| format!("{key}: {e}"))?;
                    } )*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            /// The configuration as a file that parses back to itself.
            pub fn dump(&self) -> String {
                let mut s = String::new();
                $(
                    let _ = writeln!(s, "# {}", $help);
                    let _ = writeln!(s, "{} = {}", stringify!($field), self.$field.render());
                )*
                s
            }
        }
    };
}

run_config! {
    task: Task = Task::Line2d, "line2d or fundamental";
    seed: u64 = 1, "master seed; every scene and sampler seed derives from it";
    n_points: usize = 100, "points per scene";
    outlier_rate: f64 = 0.5, "outlier rate for gen, train and eval";
    rates: Vec<f64> = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7], "outlier rates swept by bench";
    line_noise: f64 = rlsac::scenes::LINE_NOISE, "half-width of the uniform inlier offset for lines";
    pixel_sigma: f64 = 0.5, "pixel noise of epipolar inliers";
    epsilon: Option<f64> = None, "inlier threshold, auto = the task default";
    count: usize = 10, "scene files written by gen";
    eval_scenes: usize = 1000, "scenes per rate for eval and bench";
    kappa: usize = 2, "training stop after this many steps with unchanged inliers";
    sigma_no_improve: usize = 3, "training stop after this many steps without a better ratio";
    max_steps: usize = 15, "steps per training episode";
    episodes: usize = 10, "episodes per scene at evaluation";
    steps: usize = 15, "steps per episode at evaluation";
    sampling: SamplingMode = SamplingMode::Max, "evaluation sampler: max or probabilistic";
    timing: bool = true, "record wall_ms; false writes zeros for byte-stable results";
    k_neighbors: usize = 15, "graph neighbors per point";
    edgeconv_layers: usize = 2, "edge-convolution layers";
    hidden_width: usize = 64, "edge-convolution width";
    head_width: usize = 64, "per-point head width";
    gamma: f64 = 0.95, "discount";
    polyak: f64 = 0.005, "target network rate";
    learning_rate: f64 = 3e-4, "Adam step size";
    batch_size: usize = 64, "transitions per update";
    alpha: f64 = 0.2, "entropy temperature";
    update_interval: usize = 1, "environment steps per gradient update";
    warmup: usize = 500, "transitions collected before the first update";
    epochs: usize = 100, "training epochs";
    scenes_per_epoch: usize = 1000, "training scenes per epoch";
    buffer_capacity: usize = 100_000, "replay capacity";
    out: Option<PathBuf> = None, "model file for train, directory for gen, eval and bench";
    log: Option<PathBuf> = None, "training log, default <out>.log.csv";
    model: Option<PathBuf> = None, "model evaluated by eval";
    shared_model: Option<PathBuf> = None, "one model for every bench rate";
    model_dir: Option<PathBuf> = None, "bench models named model_<rate>.txt";
    scenes_dir: Option<PathBuf> = None, "evaluate these scene files instead of generating";
}

impl RunConfig {
    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_file(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::usage(format!("{origin}:{}: expected `key = value`", no + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::usage(format!("{origin}:{}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn policy(&self) -> PolicyConfig {
        PolicyConfig {
            k_neighbors: self.k_neighbors,
            edgeconv_layers: self.edgeconv_layers,
            hidden_width: self.hidden_width,
            head_width: self.head_width,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            gamma: self.gamma,
            polyak: self.polyak,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            alpha: self.alpha,
            update_interval: self.update_interval,
            warmup: self.warmup,
            epochs: self.epochs,
            scenes_per_epoch: self.scenes_per_epoch,
            buffer_capacity: self.buffer_capacity,
        }
    }

    pub fn episode(&self) -> EpisodeConfig {
        EpisodeConfig {
            kappa: self.kappa,
            sigma_no_improve: self.sigma_no_improve,
            psi_max_steps: self.max_steps,
            epsilon: self.epsilon,
            train_mode: true,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            episodes_per_scene: self.episodes,
            steps_per_episode: self.steps,
            sampling: self.sampling,
            epsilon: self.epsilon,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let mut c = RunConfig {
            seed: 99,
            rates: vec![0.25, 0.7],
            epsilon: Some(0.2),
            out: Some(PathBuf::from("x/y.txt")),
            ..Default::default()
        };
        c.learning_rate = 1.0 / 3.0;
        let mut back = RunConfig::default();
        back.apply_file(&c.dump(), "dump").unwrap();
        assert_eq!(back, c);
        let mut d = RunConfig::default();
        d.apply_file(&RunConfig::default().dump(), "dump").unwrap();
        assert_eq!(d, RunConfig::default());
    }

    #[test]
    fn file_parsing_and_errors() {
        let mut c = RunConfig::default();
        c.apply_file("# header\nseed = 5  # trailing\n\ntask = fundamental\nepsilon = auto\n", "f")
            .unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.task, Task::Fundamental);
        let err = c.apply_file("bogus = 1\n", "f").unwrap_err();
        assert!(err.message.contains("bogus") && err.code == 1);
        assert!(c.apply_file("seed 5\n", "f").is_err());
        assert!(c.apply_file("seed = five\n", "f").is_err());
    }
}

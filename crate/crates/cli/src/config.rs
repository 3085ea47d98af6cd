//! Run configuration: defaults, `key=value` files and command-line flags.
//!
//! Every key has a flag of the same name (`final_queries` is
//! `--final-queries`). Precedence is flag over file over default.

use gpq_core::detector::{ModelConfig, SceneConfig};
use gpq_core::gpq::{Criterion, PruneSchedule};
use gpq_core::optim::TrainConfig;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration; nothing was run.
    Config { field: String, reason: String },
    Runtime(String),
}

impl CliError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config { field, reason } => write!(f, "config error in `{field}`: {reason}"),
            CliError::Runtime(msg) => write!(f, "error: {msg}"),
        }
    }
}

impl From<gpq_core::Error> for CliError {
    fn from(e: gpq_core::Error) -> Self {
        match e {
            gpq_core::Error::Config { field, reason } => CliError::Config { field, reason },
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// A config value that can be read from and written back to text.
pub trait Value: Sized {
    /// List keys collect every occurrence of a repeated flag.
    const LIST: bool = false;
    fn parse_value(s: &str) -> Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("cannot parse `{s}`: {e}"))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
from_str_value!(u64, usize, f64, String);

impl Value for bool {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(format!("expected true or false, got `{s}`")),
        }
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for Criterion {
    fn parse_value(s: &str) -> Result<Self, String> {
        Criterion::from_str(s).map_err(|e| e.to_string())
    }
    fn show(&self) -> String {
        self.as_str().to_string()
    }
}

impl<T: Value> Value for Option<T> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            Ok(None)
        } else {
            T::parse_value(s).map(Some)
        }
    }
    fn show(&self) -> String {
        self.as_ref().map(T::show).unwrap_or_default()
    }
}

impl Value for PathBuf {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn show(&self) -> String {
        self.display().to_string()
    }
}

impl Value for Vec<usize> {
    const LIST: bool = true;
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| usize::parse_value(p.trim()))
            .collect()
    }
    fn show(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr;)*) => {
        /// Fully resolved settings for one run.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $name: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($name: $default,)* }
            }
        }

        impl RunConfig {
            #[cfg_attr(not(test), allow(dead_code))]
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Assigns one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
                let key = key.trim().replace('-', "_");
                match key.as_str() {
                    $(stringify!($name) => {
                        self.$name = <$ty as Value>::parse_value(value.trim())
                            .map_err(|r| CliError::config(stringify!($name), r))?;
                    })*
                    _ => return Err(CliError::config(key, "unknown key")),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($name), Value::show(&self.$name)),)*]
            }
        }

        /// One flag per config key.
        #[derive(Debug, Default, clap::Args)]
        pub struct Flags {
            $(
                $(#[doc = $doc])*
                #[arg(long, value_name = "VALUE", num_args = 0..=1, default_missing_value = "true",
                      action = clap::ArgAction::Append)]
                pub $name: Vec<String>,
            )*
        }

        impl Flags {
            /// `(key, value)` pairs given on the command line. Repeated
            /// list flags are joined; for other keys the last one wins.
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                let mut out = Vec::new();
                $(
                    if !self.$name.is_empty() {
                        let v = if <$ty as Value>::LIST {
                            self.$name.join(",")
                        } else {
                            self.$name.last().unwrap().clone()
                        };
                        out.push((stringify!($name), v));
                    }
                )*
                out
            }
        }
    };
}

run_config! {
    /// Master seed for data, initialization and shuffling.
    seed: u64 = 0;
    /// Output directory for artifacts and the manifest.
    out: PathBuf = PathBuf::from("out");
    /// Dataset file; generated from `seed` when empty.
    data: Option<PathBuf> = None;
    /// Held-out dataset file; drawn from the evaluation stream when empty.
    eval_data: Option<PathBuf> = None;
    /// Input checkpoint for prune, eval, analyze and bench.
    checkpoint: Option<PathBuf> = None;
    /// Training scenes generated when no dataset file is given.
    scenes: usize = 2000;
    /// Evaluation scenes generated when no held-out file is given.
    eval_scenes: usize = 500;
    max_objects: usize = 8;
    num_queries: usize = 64;
    grid: usize = 8;
    /// Key count for FLOPs accounting; `grid * grid` when empty.
    num_keys: Option<usize> = None;
    embed_dim: usize = 32;
    heads: usize = 4;
    ffn_dim: usize = 64;
    layers: usize = 2;
    num_classes: usize = 4;
    frequencies: usize = 16;
    iterations: usize = 1000;
    batch_size: usize = 8;
    lr: f64 = 2e-3;
    weight_decay: f64 = 1e-2;
    warmup: usize = 50;
    /// Global gradient-norm clip; 0 disables clipping.
    grad_clip: f64 = 1.0;
    final_queries: usize = 16;
    /// Iterations between prune events; fitted into the first quarter of
    /// the run when empty.
    interval: Option<usize> = None;
    per_event_k: usize = 1;
    criterion: Criterion = Criterion::LowestScore;
    one_shot: bool = false;
    /// Prune while training a freshly initialized model.
    from_scratch: bool = false;
    /// Detections kept per scene for mAP.
    top_k: usize = 32;
    /// Top-k used for selection-frequency counts.
    select_k: usize = 10;
    /// Report FLOPs in `bench`.
    flops: bool = false;
    /// Report latency in `bench`.
    latency: bool = false;
    /// Query counts for `bench`; the model's own count when empty.
    nq: Vec<usize> = Vec::new();
    trials: usize = 30;
    warmup_trials: usize = 5;
}

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_file(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("line {}", n + 1), format!("expected key=value, got `{line}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults, then `file`, then `flags`. A run manifest is a valid
    /// file: its `task` must match and its checksum lines are skipped.
    pub fn resolve(file: Option<&Path>, flags: &Flags, task: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::config("config", format!("{}: {e}", path.display())))?;
            for (k, v) in parse_file(&text)? {
                if k == "task" {
                    if v != task {
                        return Err(CliError::config("task", format!("file is for `{v}`, not `{task}`")));
                    }
                } else if !k.starts_with("sha256.") {
                    cfg.set(&k, &v)?;
                }
            }
        }
        for (k, v) in flags.pairs() {
            cfg.set(k, &v)?;
        }
        Ok(cfg)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            num_queries: self.num_queries,
            grid: self.grid,
            embed_dim: self.embed_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            layers: self.layers,
            num_classes: self.num_classes,
            frequencies: self.frequencies,
        }
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            num_classes: self.num_classes,
            max_objects: self.max_objects,
            ..SceneConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup: self.warmup,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    /// Schedule for a model that starts with `initial` queries.
    pub fn schedule(&self, initial: usize) -> Result<PruneSchedule, CliError> {
        let mut s = PruneSchedule::new(self.iterations, initial, self.final_queries, self.interval.unwrap_or(1));
        s.per_event_k = self.per_event_k;
        s.criterion = self.criterion;
        s.one_shot = self.one_shot;
        if self.interval.is_none() {
            s.interval = (self.iterations / 4 / s.num_events().max(1)).max(1);
        }
        s.validate()?;
        Ok(s)
    }

    /// Checks that do not depend on the task.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model().validate()?;
        self.scene().validate()?;
        if self.scenes == 0 {
            return Err(CliError::config("scenes", "must be >= 1"));
        }
        if self.eval_scenes == 0 {
            return Err(CliError::config("eval_scenes", "must be >= 1"));
        }
        if self.grad_clip < 0.0 || !self.grad_clip.is_finite() {
            return Err(CliError::config("grad_clip", "must be >= 0"));
        }
        if self.select_k == 0 {
            return Err(CliError::config("select_k", "must be >= 1"));
        }
        if self.top_k == 0 {
            return Err(CliError::config("top_k", "must be >= 1"));
        }
        if self.nq.contains(&0) {
            return Err(CliError::config("nq", "query counts must be >= 1"));
        }
        if self.num_keys == Some(0) {
            return Err(CliError::config("num_keys", "must be >= 1"));
        }
        self.train().validate()?;
        Ok(())
    }
}

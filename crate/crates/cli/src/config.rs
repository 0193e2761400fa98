//! Flat `key = value` run configuration: defaults, then a file, then the
//! `DFAF_SEED` environment variable, then `--set` overrides.

use std::fmt;

use dfaf_core::attention::{AttentionType, InterOrder};
use dfaf_core::data::{Template, ToyTaskSpec};
use dfaf_core::model::{Fusion, ModelConfig};
use dfaf_core::train::{ClipMode, DecayMode, LrSchedule, TrainConfig};

pub const SEED_ENV: &str = "DFAF_SEED";

/// Every problem found while building a configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub issues: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} configuration error(s)", self.issues.len())?;
        for issue in &self.issues {
            write!(f, "\n  {issue}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! via_from_str {
    ($($t:ty),*) => {
        $(impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }

            fn render(&self) -> String {
                self.to_string()
            }
        })*
    };
}

via_from_str!(
    usize,
    u64,
    f64,
    Fusion,
    InterOrder,
    AttentionType,
    ClipMode,
    DecayMode
);

impl ConfigValue for Vec<Template> {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|t| t.trim().parse::<Template>().map_err(|e| e.to_string()))
            .collect()
    }

    fn render(&self) -> String {
        self.iter()
            .map(|t| t.as_str())
            .collect::<Vec<_>>()
            .join(",")
    }
}

macro_rules! schema {
    ($($section:literal { $($key:ident : $ty:ty = $default:expr;)* })*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(pub $key: $ty,)*)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($($key: $default,)*)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$($(stringify!($key),)*)*];

            fn set_raw(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $($(stringify!($key) => {
                        self.$key = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| format!("{key}: {e}"))?;
                    })*)*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            /// Canonical text form; parsing it gives back the same config.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(
                    out.push_str(concat!("# ", $section, "\n"));
                    $(out.push_str(&format!(
                        "{} = {}\n",
                        stringify!($key),
                        self.$key.render()
                    ));)*
                )*
                out
            }
        }
    };
}

schema! {
    "data" {
        n_instances: usize = 2000;
        n_regions: usize = 12;
        grid_size: usize = 6;
        n_colors: usize = 12;
        n_shapes: usize = 4;
        max_count: usize = 4;
        token_len: usize = 6;
        region_dim: usize = 64;
        word_dim: usize = 32;
        noise_std: f64 = 0.0;
        templates: Vec<Template> = Template::ALL.to_vec();
        data_seed: u64 = 0;
        codebook_seed: u64 = 7;
    }
    "model" {
        dim: usize = 64;
        heads: usize = 4;
        blocks: usize = 1;
        hidden: usize = 64;
        fusion: Fusion = Fusion::Multiply;
        order: InterOrder = InterOrder::Parallel;
        attention_type: AttentionType = AttentionType::Full;
    }
    "train" {
        base_lr: f64 = 1e-3;
        epochs: usize = 30;
        batch_size: usize = 32;
        clip: f64 = 0.25;
        clip_mode: ClipMode = ClipMode::GlobalNorm;
        dropout: f64 = 0.1;
        seed: u64 = 0;
        eval_split: f64 = 0.1;
        warmup_epochs: usize = 2;
        peak_until: usize = 10;
        peak_factor: f64 = 2.0;
        decay_factor: f64 = 0.25;
        decay: DecayMode = DecayMode::Once;
    }
}

/// Splits config text into `(line, key, value)` triples.
fn parse_lines(origin: &str, text: &str, issues: &mut Vec<String>) -> Vec<(usize, String, String)> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                out.push((i + 1, k.trim().to_string(), v.trim().to_string()))
            }
            _ => issues.push(format!(
                "{origin}:{}: expected `key = value`, got `{line}`",
                i + 1
            )),
        }
    }
    out
}

impl RunConfig {
    /// Small shapes for finite-difference checks.
    pub fn gradcheck_defaults() -> Self {
        RunConfig {
            n_regions: 5,
            grid_size: 3,
            n_colors: 5,
            n_shapes: 2,
            max_count: 2,
            token_len: 4,
            region_dim: 13,
            word_dim: 6,
            dim: 8,
            heads: 2,
            blocks: 2,
            hidden: 8,
            batch_size: 3,
            ..Default::default()
        }
    }

    /// Layers config text, a seed from the environment and `key=value`
    /// overrides over `base`, then validates. All problems are reported
    /// together.
    pub fn resolve(
        base: RunConfig,
        file: Option<(&str, &str)>,
        env_seed: Option<&str>,
        overrides: &[String],
    ) -> Result<RunConfig, ConfigError> {
        let mut cfg = base;
        let mut issues = Vec::new();
        if let Some((origin, text)) = file {
            let mut seen = std::collections::HashMap::new();
            for (line, key, value) in parse_lines(origin, text, &mut issues) {
                if let Some(first) = seen.insert(key.clone(), line) {
                    issues.push(format!(
                        "{origin}:{line}: `{key}` already set on line {first}"
                    ));
                }
                if let Err(e) = cfg.set_raw(&key, &value) {
                    issues.push(format!("{origin}:{line}: {e}"));
                }
            }
        }
        if let Some(seed) = env_seed {
            if let Err(e) = cfg.set_raw("seed", seed.trim()) {
                issues.push(format!("{SEED_ENV}: {e}"));
            }
        }
        for o in overrides {
            match o.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set_raw(k.trim(), v.trim()) {
                        issues.push(format!("--set {o}: {e}"));
                    }
                }
                None => issues.push(format!("--set {o}: expected key=value")),
            }
        }
        issues.extend(cfg.problems());
        if issues.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError { issues })
        }
    }

    pub fn from_text(text: &str) -> Result<RunConfig, ConfigError> {
        Self::resolve(RunConfig::default(), Some(("config", text)), None, &[])
    }

    /// Cross-field checks.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if let Err(e) = self.toy_spec().validate() {
            p.push(e.to_string());
        }
        let model = self.model_config(self.region_dim, self.word_dim, 1);
        if let Err(e) = model.validate() {
            p.push(e.to_string());
        }
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                p.push(msg.to_string());
            }
        };
        check(self.n_instances >= 1, "n_instances must be at least 1");
        check(
            self.base_lr > 0.0 && self.base_lr.is_finite(),
            "base_lr must be positive",
        );
        check(self.epochs >= 1, "epochs must be at least 1");
        check(self.batch_size >= 1, "batch_size must be at least 1");
        check(
            self.clip > 0.0 && self.clip.is_finite(),
            "clip must be positive",
        );
        check(
            (0.0..1.0).contains(&self.dropout),
            "dropout must be in [0, 1)",
        );
        check(
            (0.0..1.0).contains(&self.eval_split),
            "eval_split must be in [0, 1)",
        );
        check(
            self.warmup_epochs <= self.peak_until,
            "warmup_epochs must not exceed peak_until",
        );
        check(
            self.peak_factor > 0.0 && self.decay_factor > 0.0,
            "peak_factor and decay_factor must be positive",
        );
        p
    }

    pub fn toy_spec(&self) -> ToyTaskSpec {
        ToyTaskSpec {
            n_regions: self.n_regions,
            grid_size: self.grid_size,
            n_colors: self.n_colors,
            n_shapes: self.n_shapes,
            max_count: self.max_count,
            token_len: self.token_len,
            region_dim: self.region_dim,
            word_dim: self.word_dim,
            noise_std: self.noise_std,
            templates: self.templates.clone(),
            n_answers: None,
            seed: self.data_seed,
            codebook_seed: self.codebook_seed,
        }
    }

    /// Architecture for data with the given widths and answer count.
    pub fn model_config(
        &self,
        region_dim: usize,
        word_dim: usize,
        n_answers: usize,
    ) -> ModelConfig {
        ModelConfig {
            region_dim,
            word_dim,
            dim: self.dim,
            heads: self.heads,
            blocks: self.blocks,
            hidden: self.hidden,
            n_answers,
            fusion: self.fusion,
            order: self.order,
            attention_type: self.attention_type,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.base_lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            clip: self.clip,
            clip_mode: self.clip_mode,
            dropout: self.dropout,
            seed: self.seed,
            schedule: LrSchedule {
                warmup_epochs: self.warmup_epochs,
                peak_until: self.peak_until,
                peak_factor: self.peak_factor,
                decay_factor: self.decay_factor,
                decay: self.decay,
            },
            ..Default::default()
        }
    }

    /// Number of trailing instances held out for evaluation.
    pub fn eval_count(&self, n: usize) -> usize {
        ((n as f64) * self.eval_split).round() as usize
    }
}

/// Architecture keys on which `model` and `cfg` disagree.
pub fn architecture_differences(cfg: &RunConfig, model: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    let mut cmp = |key: &str, want: String, have: String| {
        if want != have {
            out.push(format!("{key}: config {want}, checkpoint {have}"));
        }
    };
    cmp("dim", cfg.dim.to_string(), model.dim.to_string());
    cmp("heads", cfg.heads.to_string(), model.heads.to_string());
    cmp("blocks", cfg.blocks.to_string(), model.blocks.to_string());
    cmp("hidden", cfg.hidden.to_string(), model.hidden.to_string());
    cmp("fusion", cfg.fusion.to_string(), model.fusion.to_string());
    cmp("order", cfg.order.to_string(), model.order.to_string());
    cmp(
        "attention_type",
        cfg.attention_type.to_string(),
        model.attention_type.to_string(),
    );
    out
}

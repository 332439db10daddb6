//! Flat key=value experiment configuration.
//!
//! Lines are `key = value`, `#` starts a comment, unknown keys are rejected.
//! Every default is tagged with its provenance: `method` for values taken
//! from the published recipe this artifact implements, `artifact` for values
//! this implementation had to choose.

use crate::error::{Error, Result};
use crate::project::{ProjectionConfig, VariantSpec};

#[derive(Debug, Clone, PartialEq)]
pub enum TargetSource {
    /// In-range synthetic target generated from the model itself.
    Synthetic,
    /// Target image loaded from a file.
    File(String),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    pub variants: Vec<VariantSpec>,
    pub equal_budget: bool,
    pub success_threshold: f64,
    pub target: TargetSource,
    pub target_shift_px: f64,
    pub shifts_px: Vec<f64>,
    pub scales: Vec<f64>,
    pub proj: ProjectionConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 10,
            variants: vec![
                VariantSpec::parse("adam").unwrap(),
                VariantSpec::parse("basincma").unwrap(),
            ],
            equal_budget: false,
            success_threshold: 1e-2,
            target: TargetSource::Synthetic,
            target_shift_px: 4.0,
            shifts_px: vec![0.0, 2.0, 4.0, 8.0],
            scales: vec![1.0],
            proj: ProjectionConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key {key}: cannot parse {v:?}")))
}

fn parse_list_f64(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|item| parse_num::<f64>(key, item))
        .collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::Config(format!("key {key}: cannot parse bool {other:?}"))),
    }
}

impl ExperimentConfig {
    /// Parses config text over the defaults. Unknown keys are an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.proj.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "trials" => self.trials = parse_num(key, value)?,
            "variants" => {
                self.variants = value
                    .split(',')
                    .map(|t| VariantSpec::parse(t.trim()))
                    .collect::<Result<Vec<_>>>()?;
                if self.variants.is_empty() {
                    return Err(Error::Config("variants list is empty".into()));
                }
            }
            "equal_budget" => self.equal_budget = parse_bool(key, value)?,
            "success_threshold" => self.success_threshold = parse_num(key, value)?,
            "target" => {
                self.target = match value {
                    "synthetic" => TargetSource::Synthetic,
                    other => match other.strip_prefix("file:") {
                        Some(path) => TargetSource::File(path.to_string()),
                        None => {
                            return Err(Error::Config(format!(
                                "target must be synthetic or file:<path>, got {other:?}"
                            )))
                        }
                    },
                };
            }
            "target_shift_px" => self.target_shift_px = parse_num(key, value)?,
            "shifts_px" => self.shifts_px = parse_list_f64(key, value)?,
            "scales" => self.scales = parse_list_f64(key, value)?,
            "population" => self.proj.population = parse_num(key, value)?,
            "beta" => self.proj.beta = parse_num(key, value)?,
            "n_transform_iters" => self.proj.n_transform_iters = parse_num(key, value)?,
            "m_inner_grad" => self.proj.m_inner_grad = parse_num(key, value)?,
            "p_latent_iters" => self.proj.p_latent_iters = parse_num(key, value)?,
            "q_inner_grad" => self.proj.q_inner_grad = parse_num(key, value)?,
            "final_grad_steps" => self.proj.final_grad_steps = parse_num(key, value)?,
            "adam_only_steps" => self.proj.adam_only_steps = parse_num(key, value)?,
            "cma_only_iters" => self.proj.cma_only_iters = parse_num(key, value)?,
            "cma_adam_cma_iters" => self.proj.cma_adam_cma_iters = parse_num(key, value)?,
            "cma_adam_adam_steps" => self.proj.cma_adam_adam_steps = parse_num(key, value)?,
            "warm_restart_variance" => self.proj.warm_restart_variance = parse_num(key, value)?,
            "lr_z" => self.proj.lrs.z = parse_num(key, value)?,
            "lr_c" => self.proj.lrs.c = parse_num(key, value)?,
            "lr_theta" => self.proj.lrs.theta = parse_num(key, value)?,
            "finetune_lambda" => self.proj.finetune_lambda = parse_num(key, value)?,
            "finetune_max_steps" => self.proj.finetune_max_steps = parse_num(key, value)?,
            "finetune_stop_loss" => self.proj.finetune_stop_loss = parse_num(key, value)?,
            "stats_samples" => self.proj.stats_samples = parse_num(key, value)?,
            "class" => self.proj.class_index = Some(parse_num(key, value)?),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Echo of the resolved configuration, one `key = value  # provenance`
    /// line per key. Reparsing the echo reproduces the configuration.
    pub fn echo(&self) -> String {
        let p = &self.proj;
        let variants =
            self.variants.iter().map(|v| v.token()).collect::<Vec<_>>().join(",");
        let target = match &self.target {
            TargetSource::Synthetic => "synthetic".to_string(),
            TargetSource::File(f) => format!("file:{f}"),
        };
        let mut lines = vec![
            format!("seed = {}  # artifact", self.seed),
            format!("trials = {}  # artifact", self.trials),
            format!("variants = {variants}  # artifact"),
            format!("equal_budget = {}  # artifact", self.equal_budget),
            format!("success_threshold = {}  # artifact", self.success_threshold),
            format!("target = {target}  # artifact"),
            format!("target_shift_px = {}  # artifact", self.target_shift_px),
            format!(
                "shifts_px = {}  # artifact",
                self.shifts_px.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
            ),
            format!(
                "scales = {}  # artifact",
                self.scales.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
            ),
            format!("population = {}  # method", p.population),
            format!("beta = {}  # method", p.beta),
            format!("n_transform_iters = {}  # method", p.n_transform_iters),
            format!("m_inner_grad = {}  # method", p.m_inner_grad),
            format!("p_latent_iters = {}  # method", p.p_latent_iters),
            format!("q_inner_grad = {}  # method", p.q_inner_grad),
            format!("final_grad_steps = {}  # method", p.final_grad_steps),
            format!("adam_only_steps = {}  # method", p.adam_only_steps),
            format!("cma_only_iters = {}  # method", p.cma_only_iters),
            format!("cma_adam_cma_iters = {}  # method", p.cma_adam_cma_iters),
            format!("cma_adam_adam_steps = {}  # method", p.cma_adam_adam_steps),
            format!("warm_restart_variance = {}  # method", p.warm_restart_variance),
            format!("lr_z = {}  # method", p.lrs.z),
            format!("lr_c = {}  # method", p.lrs.c),
            format!("lr_theta = {}  # method", p.lrs.theta),
            format!("finetune_lambda = {}  # method", p.finetune_lambda),
            format!("finetune_max_steps = {}  # artifact", p.finetune_max_steps),
            format!("finetune_stop_loss = {}  # method", p.finetune_stop_loss),
            format!("stats_samples = {}  # artifact", p.stats_samples),
        ];
        if let Some(k) = p.class_index {
            lines.push(format!("class = {k}  # artifact"));
        }
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_values() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.proj.population, 18);
        assert_eq!(cfg.proj.beta, 10.0);
        assert_eq!(cfg.proj.n_transform_iters, 30);
        assert_eq!(cfg.proj.m_inner_grad, 30);
        assert_eq!(cfg.proj.p_latent_iters, 30);
        assert_eq!(cfg.proj.q_inner_grad, 30);
        assert_eq!(cfg.proj.final_grad_steps, 300);
        assert_eq!(cfg.proj.adam_only_steps, 500);
        assert_eq!(cfg.proj.warm_restart_variance, 0.5);
        assert_eq!(cfg.proj.lrs.z, 0.05);
        assert_eq!(cfg.proj.lrs.c, 1e-4);
        assert_eq!(cfg.proj.lrs.theta, 1e-4);
        assert_eq!(cfg.proj.finetune_lambda, 1e3);
        assert_eq!(cfg.proj.finetune_stop_loss, 0.1);
    }

    #[test]
    fn parse_overrides_and_comments() {
        let cfg = ExperimentConfig::parse(
            "# comment\nseed = 42\ntrials=3\nvariants = adam, basincma+transform\nbeta = 5.0\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.trials, 3);
        assert_eq!(cfg.variants.len(), 2);
        assert!(cfg.variants[1].with_transform);
        assert_eq!(cfg.proj.beta, 5.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            ExperimentConfig::parse("bogus_key = 1\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn echo_reparses_to_same_config() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("seed", "9").unwrap();
        cfg.set("class", "3").unwrap();
        cfg.set("equal_budget", "true").unwrap();
        let echoed = ExperimentConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(echoed.seed, cfg.seed);
        assert_eq!(echoed.proj, cfg.proj);
        assert_eq!(echoed.variants, cfg.variants);
        assert_eq!(echoed.equal_budget, cfg.equal_budget);
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(ExperimentConfig::parse("population = 0\n").is_err());
        assert!(ExperimentConfig::parse("m_inner_grad = 0\n").is_err());
    }
}

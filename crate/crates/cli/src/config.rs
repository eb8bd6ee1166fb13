//! Flat key-value run configuration with profile defaults, file loading and
//! `--set key=value` overrides. Unknown keys are rejected; the resolved
//! config is echoed into every output artifact.

use std::collections::BTreeMap;
use std::path::Path;

use pke2_core::matcher::MatcherConfig;
use pke2_core::posesolver::BaConfig;
use pke2_core::synthdata::{RenderParams, SceneConfig};
use pke2_core::training::{AdamHyper, LabelThresholds, LossSchedule};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    // Matcher architecture.
    pub descriptor_dim: usize,
    pub heads: usize,
    pub sinkhorn_iters: usize,
    /// Layer schedule: "toy", "micro", "multiview" or "twoview".
    pub schedule: String,
    // Pose solver.
    pub ba_iters: usize,
    pub beta0: f64,
    // Training.
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_after: u64,
    pub lambda_rot: f64,
    pub lambda_pose_max: f64,
    pub lambda_match_min: f64,
    pub ramp_iters: usize,
    pub iterations: usize,
    pub val_tuples: usize,
    pub val_every: usize,
    pub grad_clip: f64,
    // Synthetic data.
    pub tuples: usize,
    pub landmarks: usize,
    pub keypoints: usize,
    pub noise_px: f64,
    pub desc_noise: f64,
    pub outliers: f64,
    pub match_px: f64,
    pub unmatched_px: f64,
    // Evaluation.
    pub conf_threshold: Option<f64>,
    pub auc_thresholds: Vec<f64>,
    pub jobs: usize,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn for_profile(profile: &str) -> Result<Self, ConfigError> {
        let toy = RunConfig {
            profile: "toy".into(),
            seed: 0,
            descriptor_dim: 32,
            heads: 4,
            sinkhorn_iters: 30,
            schedule: "toy".into(),
            ba_iters: 10,
            beta0: 0.1,
            lr: 1e-3,
            lr_decay_factor: 0.999992,
            lr_decay_after: 100_000,
            lambda_rot: 1.0,
            lambda_pose_max: 8.0,
            lambda_match_min: 0.3,
            ramp_iters: 300,
            iterations: 2500,
            val_tuples: 20,
            val_every: 400,
            grad_clip: 10.0,
            tuples: 100,
            landmarks: 100,
            keypoints: 24,
            noise_px: 1.0,
            desc_noise: 0.1,
            outliers: 0.0,
            match_px: 5.0,
            unmatched_px: 15.0,
            conf_threshold: None,
            auc_thresholds: vec![5.0, 10.0, 20.0],
            jobs: 1,
        };
        match profile {
            "toy" => Ok(toy),
            // Full-scale constants; not desk-runnable end to end but kept as
            // the reference configuration.
            "paper" => Ok(RunConfig {
                profile: "paper".into(),
                descriptor_dim: 256,
                heads: 4,
                sinkhorn_iters: 100,
                schedule: "multiview".into(),
                lr: 1e-4,
                lambda_rot: 3.0,
                lambda_pose_max: 242.0,
                lambda_match_min: 0.01,
                ramp_iters: 40_000,
                iterations: 40_000,
                ..toy
            }),
            other => Err(ConfigError(format!("unknown profile '{other}'"))),
        }
    }

    /// Applies one `key=value` override; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |what: &str| ConfigError(format!("invalid value '{value}' for {what}"));
        match key {
            "profile" => return Err(ConfigError("profile cannot be overridden; pass --profile".into())),
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "descriptor_dim" => {
                self.descriptor_dim = value.parse().map_err(|_| bad("descriptor_dim"))?
            }
            "heads" => self.heads = value.parse().map_err(|_| bad("heads"))?,
            "sinkhorn_iters" => {
                self.sinkhorn_iters = value.parse().map_err(|_| bad("sinkhorn_iters"))?
            }
            "schedule" => self.schedule = value.to_string(),
            "ba_iters" => self.ba_iters = value.parse().map_err(|_| bad("ba_iters"))?,
            "beta0" => self.beta0 = value.parse().map_err(|_| bad("beta0"))?,
            "lr" => self.lr = value.parse().map_err(|_| bad("lr"))?,
            "lr_decay_factor" => {
                self.lr_decay_factor = value.parse().map_err(|_| bad("lr_decay_factor"))?
            }
            "lr_decay_after" => {
                self.lr_decay_after = value.parse().map_err(|_| bad("lr_decay_after"))?
            }
            "lambda_rot" => self.lambda_rot = value.parse().map_err(|_| bad("lambda_rot"))?,
            "lambda_pose_max" => {
                self.lambda_pose_max = value.parse().map_err(|_| bad("lambda_pose_max"))?
            }
            "lambda_match_min" => {
                self.lambda_match_min = value.parse().map_err(|_| bad("lambda_match_min"))?
            }
            "ramp_iters" => self.ramp_iters = value.parse().map_err(|_| bad("ramp_iters"))?,
            "iterations" => self.iterations = value.parse().map_err(|_| bad("iterations"))?,
            "val_tuples" => self.val_tuples = value.parse().map_err(|_| bad("val_tuples"))?,
            "val_every" => self.val_every = value.parse().map_err(|_| bad("val_every"))?,
            "grad_clip" => self.grad_clip = value.parse().map_err(|_| bad("grad_clip"))?,
            "tuples" => self.tuples = value.parse().map_err(|_| bad("tuples"))?,
            "landmarks" => self.landmarks = value.parse().map_err(|_| bad("landmarks"))?,
            "keypoints" => self.keypoints = value.parse().map_err(|_| bad("keypoints"))?,
            "noise_px" => self.noise_px = value.parse().map_err(|_| bad("noise_px"))?,
            "desc_noise" => self.desc_noise = value.parse().map_err(|_| bad("desc_noise"))?,
            "outliers" => self.outliers = value.parse().map_err(|_| bad("outliers"))?,
            "match_px" => self.match_px = value.parse().map_err(|_| bad("match_px"))?,
            "unmatched_px" => {
                self.unmatched_px = value.parse().map_err(|_| bad("unmatched_px"))?
            }
            "conf_threshold" => {
                self.conf_threshold = Some(value.parse().map_err(|_| bad("conf_threshold"))?)
            }
            "auc_thresholds" => {
                self.auc_thresholds = value
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad("auc_thresholds"))?
            }
            "jobs" => self.jobs = value.parse().map_err(|_| bad("jobs"))?,
            other => return Err(ConfigError(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Loads `key = value` lines; '#' starts a comment.
    pub fn load_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError(format!(
                    "{}:{}: expected 'key = value'",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn matcher_config(&self) -> Result<MatcherConfig, ConfigError> {
        let mut cfg = match self.schedule.as_str() {
            "toy" => MatcherConfig::toy(),
            "micro" => MatcherConfig::micro(),
            "multiview" => MatcherConfig::multi_view(self.descriptor_dim),
            "twoview" => MatcherConfig::two_view(self.descriptor_dim),
            other => return Err(ConfigError(format!("unknown schedule '{other}'"))),
        };
        cfg.descriptor_dim = self.descriptor_dim;
        cfg.heads = self.heads;
        cfg.sinkhorn_iterations = self.sinkhorn_iters;
        cfg.validate()
            .map_err(|e| ConfigError(format!("matcher config: {e}")))?;
        Ok(cfg)
    }

    pub fn scene_config(&self) -> SceneConfig {
        let mut cfg = SceneConfig::toy();
        cfg.landmarks = self.landmarks;
        cfg.keypoints_per_frame = self.keypoints;
        cfg.descriptor_dim = self.descriptor_dim;
        cfg
    }

    pub fn render_params(&self) -> RenderParams {
        RenderParams {
            noise_px: self.noise_px,
            desc_noise: self.desc_noise,
            outlier_frac: self.outliers,
            thresholds: LabelThresholds {
                match_px: self.match_px,
                unmatched_px: self.unmatched_px,
            },
        }
    }

    pub fn ba_config(&self) -> BaConfig {
        BaConfig {
            iterations: self.ba_iters,
            beta0: self.beta0,
        }
    }

    pub fn loss_schedule(&self) -> LossSchedule {
        LossSchedule {
            lambda_pose_max: self.lambda_pose_max,
            lambda_match_min: self.lambda_match_min,
            ramp_iters: self.ramp_iters,
            lambda_rot: self.lambda_rot,
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            decay_factor: self.lr_decay_factor,
            decay_after: self.lr_decay_after,
            ..AdamHyper::default()
        }
    }

    /// Resolved config as an ordered JSON map for output artifacts.
    pub fn to_json(&self) -> serde_json::Value {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: serde_json::Value| {
            m.insert(k.to_string(), v);
        };
        put("profile", self.profile.clone().into());
        put("seed", self.seed.into());
        put("descriptor_dim", self.descriptor_dim.into());
        put("heads", self.heads.into());
        put("sinkhorn_iters", self.sinkhorn_iters.into());
        put("schedule", self.schedule.clone().into());
        put("ba_iters", self.ba_iters.into());
        put("beta0", self.beta0.into());
        put("lr", self.lr.into());
        put("lr_decay_factor", self.lr_decay_factor.into());
        put("lr_decay_after", self.lr_decay_after.into());
        put("lambda_rot", self.lambda_rot.into());
        put("lambda_pose_max", self.lambda_pose_max.into());
        put("lambda_match_min", self.lambda_match_min.into());
        put("ramp_iters", self.ramp_iters.into());
        put("iterations", self.iterations.into());
        put("val_tuples", self.val_tuples.into());
        put("val_every", self.val_every.into());
        put("grad_clip", self.grad_clip.into());
        put("tuples", self.tuples.into());
        put("landmarks", self.landmarks.into());
        put("keypoints", self.keypoints.into());
        put("noise_px", self.noise_px.into());
        put("desc_noise", self.desc_noise.into());
        put("outliers", self.outliers.into());
        put("match_px", self.match_px.into());
        put("unmatched_px", self.unmatched_px.into());
        put(
            "conf_threshold",
            match self.conf_threshold {
                Some(t) => t.into(),
                None => serde_json::Value::Null,
            },
        );
        put(
            "auc_thresholds",
            serde_json::Value::Array(self.auc_thresholds.iter().map(|&t| t.into()).collect()),
        );
        put("jobs", self.jobs.into());
        serde_json::Value::Object(m.into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::for_profile("toy").unwrap();
        assert!(cfg.set("no_such_key", "1").is_err());
        assert!(cfg.set("seed", "17").is_ok());
        assert_eq!(cfg.seed, 17);
    }

    #[test]
    fn paper_profile_carries_full_scale_constants() {
        let cfg = RunConfig::for_profile("paper").unwrap();
        assert_eq!(cfg.descriptor_dim, 256);
        assert_eq!(cfg.sinkhorn_iters, 100);
        assert_eq!(cfg.lambda_pose_max, 242.0);
        assert_eq!(cfg.lr, 1e-4);
        let mcfg = cfg.matcher_config().unwrap();
        assert_eq!(mcfg.schedule.len(), 28);
    }
}

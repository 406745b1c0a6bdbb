//! Flat `key = value` run configuration. Unknown keys are rejected so a
//! typo can't silently fall back to a default, and the canonical echo is
//! embedded into every artifact for provenance.

use std::fs;
use std::path::Path;

use spikewin::error::{Error, Result};
use spikewin::interact::KernelKind;
use spikewin::model::{ModelConfig, TrainCfg};
use spikewin::scene::SceneSpec;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub preset: String,
    pub frames_only: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    /// None → the preset's default.
    pub t_steps: Option<usize>,
    pub pairs: usize,
    pub start_stage: usize,
    pub kernel: String,
    /// Event threshold on log intensity.
    pub theta: f64,
    pub seed: u64,
    pub scene_height: usize,
    pub scene_width: usize,
    pub scene_objects: usize,
    pub scene_duration: f64,
    pub frame_hz: f64,
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub milestones: Vec<u64>,
    /// Final steps trained with frozen batch-norm statistics (0 disables).
    pub freeze_tail: u64,
    pub batch: usize,
    pub window_us: i64,
    pub stride_us: i64,
    pub e_a: f64,
    pub e_m: f64,
    pub data_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "toy".into(),
            frames_only: false,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.3,
            lambda4: 0.2,
            t_steps: None,
            pairs: 4,
            start_stage: 3,
            kernel: "head-mean".into(),
            theta: 0.25,
            seed: 7,
            scene_height: 32,
            scene_width: 32,
            scene_objects: 1,
            scene_duration: 0.5,
            frame_hz: 20.0,
            steps: 500,
            lr: 1e-3,
            weight_decay: 0.01,
            milestones: vec![350],
            freeze_tail: 0,
            batch: 4,
            window_us: 50_000,
            stride_us: 12_500,
            e_a: 0.9,
            e_m: 4.6,
            data_dir: "data".into(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad value '{value}' for key '{key}'"),
    })
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => RunConfig::parse(&fs::read_to_string(p)?),
        }
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((k, v)) = stripped.split_once('=') else {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected `key = value`, got '{raw}'"),
                });
            };
            cfg.apply(k.trim(), v.trim(), line)?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "preset" => match value {
                "toy" | "paper" => self.preset = value.into(),
                _ => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("preset must be 'toy' or 'paper', got '{value}'"),
                    })
                }
            },
            "frames_only" => self.frames_only = num(key, value, line)?,
            "lambda1" => self.lambda1 = num(key, value, line)?,
            "lambda2" => self.lambda2 = num(key, value, line)?,
            "lambda3" => self.lambda3 = num(key, value, line)?,
            "lambda4" => self.lambda4 = num(key, value, line)?,
            "t_steps" => self.t_steps = Some(num(key, value, line)?),
            "pairs" => self.pairs = num(key, value, line)?,
            "start_stage" => self.start_stage = num(key, value, line)?,
            "kernel" => self.kernel = value.into(),
            "theta" => self.theta = num(key, value, line)?,
            "seed" => self.seed = num(key, value, line)?,
            "scene_height" => self.scene_height = num(key, value, line)?,
            "scene_width" => self.scene_width = num(key, value, line)?,
            "scene_objects" => self.scene_objects = num(key, value, line)?,
            "scene_duration" => self.scene_duration = num(key, value, line)?,
            "frame_hz" => self.frame_hz = num(key, value, line)?,
            "steps" => self.steps = num(key, value, line)?,
            "lr" => self.lr = num(key, value, line)?,
            "weight_decay" => self.weight_decay = num(key, value, line)?,
            "milestones" => {
                self.milestones = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num("milestones", s.trim(), line))
                    .collect::<Result<_>>()?;
            }
            "freeze_tail" => self.freeze_tail = num(key, value, line)?,
            "batch" => self.batch = num(key, value, line)?,
            "window_us" => self.window_us = num(key, value, line)?,
            "stride_us" => self.stride_us = num(key, value, line)?,
            "e_a" => self.e_a = num(key, value, line)?,
            "e_m" => self.e_m = num(key, value, line)?,
            "data_dir" => self.data_dir = value.into(),
            _ => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown key '{key}'"),
                })
            }
        }
        Ok(())
    }

    pub fn resolved_t_steps(&self) -> usize {
        self.t_steps
            .unwrap_or(if self.preset == "paper" { 5 } else { 2 })
    }

    /// Canonical text form; parses back to the same config.
    pub fn echo(&self) -> String {
        let m: Vec<String> = self.milestones.iter().map(|v| v.to_string()).collect();
        [
            format!("preset = {}", self.preset),
            format!("frames_only = {}", self.frames_only),
            format!("lambda1 = {}", self.lambda1),
            format!("lambda2 = {}", self.lambda2),
            format!("lambda3 = {}", self.lambda3),
            format!("lambda4 = {}", self.lambda4),
            format!("t_steps = {}", self.resolved_t_steps()),
            format!("pairs = {}", self.pairs),
            format!("start_stage = {}", self.start_stage),
            format!("kernel = {}", self.kernel),
            format!("theta = {}", self.theta),
            format!("seed = {}", self.seed),
            format!("scene_height = {}", self.scene_height),
            format!("scene_width = {}", self.scene_width),
            format!("scene_objects = {}", self.scene_objects),
            format!("scene_duration = {}", self.scene_duration),
            format!("frame_hz = {}", self.frame_hz),
            format!("steps = {}", self.steps),
            format!("lr = {}", self.lr),
            format!("weight_decay = {}", self.weight_decay),
            format!("milestones = {}", m.join(",")),
            format!("freeze_tail = {}", self.freeze_tail),
            format!("batch = {}", self.batch),
            format!("window_us = {}", self.window_us),
            format!("stride_us = {}", self.stride_us),
            format!("e_a = {}", self.e_a),
            format!("e_m = {}", self.e_m),
            format!("data_dir = {}", self.data_dir),
        ]
        .join("\n")
            + "\n"
    }

    /// Echo as `#`-prefixed lines for embedding at the top of CSVs.
    pub fn comment_echo(&self) -> String {
        self.echo()
            .lines()
            .map(|l| format!("# {l}\n"))
            .collect()
    }

    /// The subset of the config that determines model structure; stored in
    /// checkpoints and compared on load.
    pub fn model_signature(&self) -> String {
        [
            format!("preset = {}", self.preset),
            format!("frames_only = {}", self.frames_only),
            format!("lambda1 = {}", self.lambda1),
            format!("lambda2 = {}", self.lambda2),
            format!("lambda3 = {}", self.lambda3),
            format!("lambda4 = {}", self.lambda4),
            format!("t_steps = {}", self.resolved_t_steps()),
            format!("pairs = {}", self.pairs),
            format!("start_stage = {}", self.start_stage),
            format!("kernel = {}", self.kernel),
            format!("scene_height = {}", self.scene_height),
            format!("scene_width = {}", self.scene_width),
        ]
        .join("\n")
    }

    pub fn to_model_config(&self) -> Result<ModelConfig> {
        let mut mc = match self.preset.as_str() {
            "paper" => ModelConfig::paper(),
            "toy" => ModelConfig::toy(),
            other => return Err(Error::config(format!("unknown preset '{other}'"))),
        };
        mc.input_h = self.scene_height;
        mc.input_w = self.scene_width;
        mc.t_steps = self.resolved_t_steps();
        mc.lambda1 = self.lambda1;
        mc.lambda2 = self.lambda2;
        mc.frames_only = self.frames_only;
        mc.seed = self.seed;
        let kernel = KernelKind::parse(&self.kernel)?;
        kernel.require_implemented()?;
        mc.interact.lambda3 = self.lambda3;
        mc.interact.lambda4 = self.lambda4;
        mc.interact.pairs = self.pairs;
        mc.interact.start_stage = self.start_stage;
        mc.interact.kernel = kernel;
        mc.validate()?;
        Ok(mc)
    }

    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let mut spec = SceneSpec::random(
            self.scene_height,
            self.scene_width,
            self.scene_objects,
            self.scene_duration,
            self.seed,
        )?;
        spec.frame_hz = self.frame_hz;
        spec.threshold = self.theta;
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_cfg(&self) -> TrainCfg {
        TrainCfg {
            lr: self.lr,
            weight_decay: self.weight_decay,
            milestones: self.milestones.clone(),
            frozen_stats: false,
        }
    }
}

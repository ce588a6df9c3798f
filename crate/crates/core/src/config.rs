//! Model and training configuration with a flat `key = value` text form
//! grouped under `[section]` headers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::rng::fnv1a;
use crate::shift::neighborhood8;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub shift_offsets: Vec<(i32, i32)>,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Frequency-spatial shifts; when off every block uses a single rightward shift.
    pub fso_shift: bool,
    /// Skip-connection enhancement; when off skips are passed through unchanged.
    pub sfeb: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            stage_widths: vec![32, 64, 128, 256],
            blocks_per_stage: vec![2, 2, 2, 2],
            shift_offsets: neighborhood8(),
            loss_weights: LossWeights::default(),
            seed: 0,
            fso_shift: true,
            sfeb: true,
        }
    }
}

impl ModelConfig {
    /// Two stages of widths 8 and 16 with one block each.
    pub fn smoke() -> Self {
        Self { stage_widths: vec![8, 16], blocks_per_stage: vec![1, 1], ..Self::default() }
    }

    pub fn stages(&self) -> usize {
        self.stage_widths.len()
    }

    /// Input sides must be multiples of this so every stage has an even size.
    pub fn size_multiple(&self) -> usize {
        1 << self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage_widths.len() < 2 {
            return bad(format!("need at least 2 stages, got {}", self.stage_widths.len()));
        }
        if self.stage_widths.len() != self.blocks_per_stage.len() {
            return bad(format!(
                "{} stage widths but {} block counts",
                self.stage_widths.len(),
                self.blocks_per_stage.len()
            ));
        }
        if self.stage_widths.contains(&0) {
            return bad("stage widths must be positive".into());
        }
        if self.blocks_per_stage.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if self.in_channels == 0 || self.in_channels != self.out_channels {
            return bad(format!(
                "the residual head maps {} input channels to the same number of outputs, got {}",
                self.in_channels, self.out_channels
            ));
        }
        if self.loss_weights.ssim < 0.0 || self.loss_weights.edge < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        Ok(())
    }

    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::dim("model input", format!("{h}x{w} is not a multiple of {m} on both sides")));
        }
        Ok(())
    }

    fn write(&self, out: &mut String) {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let offsets = self.shift_offsets.iter().map(|(dy, dx)| format!("{dy}:{dx}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(out, "[model]");
        let _ = writeln!(out, "in_channels = {}", self.in_channels);
        let _ = writeln!(out, "out_channels = {}", self.out_channels);
        let _ = writeln!(out, "stage_widths = {}", list(&self.stage_widths));
        let _ = writeln!(out, "blocks_per_stage = {}", list(&self.blocks_per_stage));
        let _ = writeln!(out, "shift_offsets = {offsets}");
        let _ = writeln!(out, "lambda_ssim = {}", self.loss_weights.ssim);
        let _ = writeln!(out, "lambda_edge = {}", self.loss_weights.edge);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "fso_shift = {}", self.fso_shift);
        let _ = writeln!(out, "sfeb = {}", self.sfeb);
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.write(&mut s);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc = Document::parse(text)?;
        Self::from_section(doc.section("model"))
    }

    fn from_section(sec: Section<'_>) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            in_channels: sec.parse_or("in_channels", d.in_channels)?,
            out_channels: sec.parse_or("out_channels", d.out_channels)?,
            stage_widths: sec.list_or("stage_widths", d.stage_widths)?,
            blocks_per_stage: sec.list_or("blocks_per_stage", d.blocks_per_stage)?,
            shift_offsets: match sec.get("shift_offsets") {
                Some(v) => parse_offsets(v)?,
                None => d.shift_offsets,
            },
            loss_weights: LossWeights {
                ssim: sec.parse_or("lambda_ssim", d.loss_weights.ssim)?,
                edge: sec.parse_or("lambda_edge", d.loss_weights.edge)?,
            },
            seed: sec.parse_or("seed", d.seed)?,
            fso_shift: sec.parse_or("fso_shift", d.fso_shift)?,
            sfeb: sec.parse_or("sfeb", d.sfeb)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable hash of the canonical text.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }
}

fn parse_offsets(v: &str) -> Result<Vec<(i32, i32)>> {
    v.split(',')
        .map(|p| {
            let (a, b) = p.trim().split_once(':').ok_or_else(|| Error::Config(format!("offset {p:?} is not dy:dx")))?;
            let n = |s: &str| s.trim().parse::<i32>().map_err(|e| Error::Config(format!("offset {p:?}: {e}")));
            Ok((n(a)?, n(b)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
    /// Side of the random training crops; 0 trains on full images.
    pub crop: usize,
    pub flip: bool,
    pub rotate: bool,
    /// Probability of mixing each training pair with a second one.
    pub mixup_prob: f64,
    pub mixup_alpha: f64,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            steps: 2000,
            batch_size: 1,
            lr: 2e-4,
            min_lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            eval_interval: 500,
            checkpoint_interval: 500,
            crop: 0,
            flip: true,
            rotate: true,
            mixup_prob: 0.5,
            mixup_alpha: 0.2,
            seed: 0,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad("min_lr must lie in [0, lr]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.mixup_prob) || self.mixup_alpha <= 0.0 {
            return bad("mixup_prob must lie in [0, 1] and mixup_alpha must be positive");
        }
        if self.crop != 0 && !self.crop.is_multiple_of(self.model.size_multiple()) {
            return bad("crop must be a multiple of 2^stages");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.model.write(&mut s);
        let _ = writeln!(s);
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "min_lr = {}", self.min_lr);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "eval_interval = {}", self.eval_interval);
        let _ = writeln!(s, "checkpoint_interval = {}", self.checkpoint_interval);
        let _ = writeln!(s, "crop = {}", self.crop);
        let _ = writeln!(s, "flip = {}", self.flip);
        let _ = writeln!(s, "rotate = {}", self.rotate);
        let _ = writeln!(s, "mixup_prob = {}", self.mixup_prob);
        let _ = writeln!(s, "mixup_alpha = {}", self.mixup_alpha);
        let _ = writeln!(s, "seed = {}", self.seed);
        if let Some(dir) = &self.out_dir {
            let _ = writeln!(s, "out_dir = {}", dir.display());
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc = Document::parse(text)?;
        let model = ModelConfig::from_section(doc.section("model"))?;
        let t = doc.section("train");
        let d = Self::default();
        let cfg = Self {
            model,
            steps: t.parse_or("steps", d.steps)?,
            batch_size: t.parse_or("batch_size", d.batch_size)?,
            lr: t.parse_or("lr", d.lr)?,
            min_lr: t.parse_or("min_lr", d.min_lr)?,
            beta1: t.parse_or("beta1", d.beta1)?,
            beta2: t.parse_or("beta2", d.beta2)?,
            weight_decay: t.parse_or("weight_decay", d.weight_decay)?,
            eval_interval: t.parse_or("eval_interval", d.eval_interval)?,
            checkpoint_interval: t.parse_or("checkpoint_interval", d.checkpoint_interval)?,
            crop: t.parse_or("crop", d.crop)?,
            flip: t.parse_or("flip", d.flip)?,
            rotate: t.parse_or("rotate", d.rotate)?,
            mixup_prob: t.parse_or("mixup_prob", d.mixup_prob)?,
            mixup_alpha: t.parse_or("mixup_alpha", d.mixup_alpha)?,
            seed: t.parse_or("seed", d.seed)?,
            out_dir: t.get("out_dir").map(PathBuf::from),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parsed `[section]` / `key = value` text. Blank lines and `#` comments are
/// ignored; keys before any header belong to the unnamed section.
#[derive(Debug, Default)]
pub struct Document {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Document {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Self::default();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = name.trim().to_string();
                doc.sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            let prev =
                doc.sections.entry(current.clone()).or_default().insert(k.trim().to_string(), v.trim().to_string());
            if prev.is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {:?}", i + 1, k.trim())));
            }
        }
        Ok(doc)
    }

    pub fn section(&self, name: &str) -> Section<'_> {
        Section { name: name.to_string(), map: self.sections.get(name) }
    }
}

pub struct Section<'a> {
    name: String,
    map: Option<&'a BTreeMap<String, String>>,
}

impl Section<'_> {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.and_then(|m| m.get(key)).map(String::as_str)
    }

    pub fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| Error::Config(format!("[{}] {key} = {v:?}: {e}", self.name))),
        }
    }

    pub fn list_or(&self, key: &str, default: Vec<usize>) -> Result<Vec<usize>> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|p| p.trim().parse().map_err(|e| Error::Config(format!("[{}] {key} = {v:?}: {e}", self.name))))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let mut cfg = TrainConfig {
            steps: 17,
            lr: 3.3e-4,
            mixup_prob: 0.25,
            out_dir: Some("runs/a".into()),
            ..TrainConfig::default()
        };
        cfg.model = ModelConfig { shift_offsets: vec![(0, 1), (-2, 1)], seed: 99, sfeb: false, ..ModelConfig::smoke() };
        let text = cfg.to_text();
        assert_eq!(TrainConfig::from_text(&text).unwrap(), cfg);
        assert_eq!(ModelConfig::from_text(&cfg.model.to_text()).unwrap(), cfg.model);
    }

    #[test]
    fn defaults_and_comments() {
        let cfg = TrainConfig::from_text("# nothing but a comment\n[train]\nsteps = 5 # inline\n").unwrap();
        assert_eq!(cfg.steps, 5);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::from_text("[train]\nsteps = -1\n").is_err());
        assert!(TrainConfig::from_text("[train]\nsteps\n").is_err());
        assert!(TrainConfig::from_text("[train]\nlr = 0\n").is_err());
        assert!(ModelConfig::from_text("[model]\nstage_widths = 8\nblocks_per_stage = 1\n").is_err());
        assert!(ModelConfig::from_text("[model]\nstage_widths = 8,16\nblocks_per_stage = 1\n").is_err());
        assert!(ModelConfig::from_text("[model]\nstage_widths = 8,16\nblocks_per_stage = 1,1\nseed = 1\nseed = 2\n")
            .is_err());
    }

    #[test]
    fn input_size_rule() {
        let cfg = ModelConfig::smoke();
        assert!(cfg.check_input_size(64, 64).is_ok());
        assert!(cfg.check_input_size(62, 64).is_err());
        assert!(ModelConfig::default().check_input_size(24, 24).is_err());
    }
}

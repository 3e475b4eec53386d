//! Experiment configuration: flat `section.key = value` lines with `#`
//! comments. Every key except `output.dir` has a default; unknown and
//! duplicate keys are rejected.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::Variant;
use crate::synthdata::{Corpus, CorpusConfig};
use crate::teacher::{build_teacher, Directionality, TeacherConfig, TeacherLM};
use crate::trainer::TrainConfig;

/// Teacher directionality, or the per-variant default.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherChoice {
    Auto,
    Fixed(Directionality),
}

impl TeacherChoice {
    /// Bidirectional for representation distillation, unidirectional for
    /// joint classification, unless fixed.
    pub fn resolve(self, variant: Variant) -> Directionality {
        match self {
            Self::Fixed(d) => d,
            Self::Auto if variant == Variant::KtCl => Directionality::Unidirectional,
            Self::Auto => Directionality::Bidirectional,
        }
    }
}

impl FromStr for TeacherChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            other => Ok(Self::Fixed(other.parse()?)),
        }
    }
}

impl std::fmt::Display for TeacherChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Auto => f.write_str("auto"),
            Self::Fixed(d) => d.fmt(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSettings {
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
    pub directionality: TeacherChoice,
    /// Epochs of the light fit on training transcripts; 0 keeps the random teacher.
    pub fit_epochs: usize,
    pub fit_lr: f64,
}

impl Default for TeacherSettings {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            seed: 7,
            directionality: TeacherChoice::Auto,
            fit_epochs: 2,
            fit_lr: 0.003,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeSettings {
    pub beam: usize,
    pub lm_weight: f64,
    /// CTC share of the joint CTC/classifier score.
    pub joint_gamma: f64,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            beam: 10,
            lm_weight: 0.3,
            joint_gamma: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    /// Model input width and class count follow the corpus.
    pub train: TrainConfig,
    pub teacher: TeacherSettings,
    pub decode: DecodeSettings,
    pub output_dir: PathBuf,
}

pub const REQUIRED_KEYS: &[&str] = &["output.dir"];

impl ExperimentConfig {
    /// All defaults, with the given output directory.
    pub fn defaults(output_dir: impl Into<PathBuf>) -> Self {
        let mut cfg = Self {
            corpus: CorpusConfig::default(),
            train: TrainConfig::default(),
            teacher: TeacherSettings::default(),
            decode: DecodeSettings::default(),
            output_dir: output_dir.into(),
        };
        cfg.sync();
        cfg
    }

    /// Copies the corpus-derived model dimensions (input width, class count).
    pub fn sync(&mut self) {
        self.train.model.d_in = self.corpus.d_in;
        self.train.model.classes = self.corpus.vocab_size + 1;
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate().map_err(as_config)?;
        if !(self.teacher.fit_lr > 0.0) {
            return Err(Error::Config("teacher.fit_lr must be positive".into()));
        }
        if self.decode.beam == 0 {
            return Err(Error::Config("decode.beam must be at least 1".into()));
        }
        if !(self.decode.lm_weight >= 0.0) {
            return Err(Error::Config("decode.lm_weight must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.decode.joint_gamma) {
            return Err(Error::Config("decode.joint_gamma must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// `(key, value)` pairs in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.corpus;
        let t = &self.train;
        let m = &t.model;
        let te = &self.teacher;
        let d = &self.decode;
        vec![
            ("corpus.vocab_size", c.vocab_size.to_string()),
            ("corpus.d_in", c.d_in.to_string()),
            ("corpus.train", c.train.to_string()),
            ("corpus.dev", c.dev.to_string()),
            ("corpus.test", c.test.to_string()),
            ("corpus.n_min", c.n_min.to_string()),
            ("corpus.n_max", c.n_max.to_string()),
            ("corpus.r_min", c.r_min.to_string()),
            ("corpus.r_max", c.r_max.to_string()),
            ("corpus.noise_sigma", c.noise_sigma.to_string()),
            ("corpus.markov_temperature", c.markov_temperature.to_string()),
            ("corpus.seed", c.seed.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.enc_layers", m.enc_layers.to_string()),
            ("model.d_ff", m.d_ff.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("train.variant", t.variant.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.base_lr", t.base_lr.to_string()),
            ("train.warmup", t.warmup.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.average_last", t.average_last.to_string()),
            ("train.seed", t.seed.to_string()),
            ("loss.k", t.loss.k.to_string()),
            ("loss.lambda", t.loss.lambda.to_string()),
            ("loss.beta", t.loss.beta.to_string()),
            ("loss.aux", t.loss.aux_kind.to_string()),
            ("teacher.layers", te.layers.to_string()),
            ("teacher.heads", te.heads.to_string()),
            ("teacher.seed", te.seed.to_string()),
            ("teacher.directionality", te.directionality.to_string()),
            ("teacher.fit_epochs", te.fit_epochs.to_string()),
            ("teacher.fit_lr", te.fit_lr.to_string()),
            ("decode.beam", d.beam.to_string()),
            ("decode.lm_weight", d.lm_weight.to_string()),
            ("decode.joint_gamma", d.joint_gamma.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let c = &mut self.corpus;
        let t = &mut self.train;
        let te = &mut self.teacher;
        let d = &mut self.decode;
        match key {
            "corpus.vocab_size" => c.vocab_size = num(key, value)?,
            "corpus.d_in" => c.d_in = num(key, value)?,
            "corpus.train" => c.train = num(key, value)?,
            "corpus.dev" => c.dev = num(key, value)?,
            "corpus.test" => c.test = num(key, value)?,
            "corpus.n_min" => c.n_min = num(key, value)?,
            "corpus.n_max" => c.n_max = num(key, value)?,
            "corpus.r_min" => c.r_min = num(key, value)?,
            "corpus.r_max" => c.r_max = num(key, value)?,
            "corpus.noise_sigma" => c.noise_sigma = num(key, value)?,
            "corpus.markov_temperature" => c.markov_temperature = num(key, value)?,
            "corpus.seed" => c.seed = num(key, value)?,
            "model.d_model" => t.model.d_model = num(key, value)?,
            "model.heads" => t.model.heads = num(key, value)?,
            "model.enc_layers" => t.model.enc_layers = num(key, value)?,
            "model.d_ff" => t.model.d_ff = num(key, value)?,
            "model.dropout" => t.model.dropout = num(key, value)?,
            "train.variant" => t.variant = value.parse()?,
            "train.epochs" => t.epochs = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.base_lr" => t.base_lr = num(key, value)?,
            "train.warmup" => t.warmup = num(key, value)?,
            "train.patience" => t.patience = num(key, value)?,
            "train.average_last" => t.average_last = num(key, value)?,
            "train.seed" => t.seed = num(key, value)?,
            "loss.k" => t.loss.k = num(key, value)?,
            "loss.lambda" => t.loss.lambda = num(key, value)?,
            "loss.beta" => t.loss.beta = num(key, value)?,
            "loss.aux" => t.loss.aux_kind = value.parse()?,
            "teacher.layers" => te.layers = num(key, value)?,
            "teacher.heads" => te.heads = num(key, value)?,
            "teacher.seed" => te.seed = num(key, value)?,
            "teacher.directionality" => te.directionality = value.parse()?,
            "teacher.fit_epochs" => te.fit_epochs = num(key, value)?,
            "teacher.fit_lr" => te.fit_lr = num(key, value)?,
            "decode.beam" => d.beam = num(key, value)?,
            "decode.lm_weight" => d.lm_weight = num(key, value)?,
            "decode.joint_gamma" => d.joint_gamma = num(key, value)?,
            "output.dir" => {
                if value.is_empty() {
                    return Err(Error::Config("output.dir must not be empty".into()));
                }
                self.output_dir = PathBuf::from(value)
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::defaults("");
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", i + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_config(e))))?;
            seen.push(key.to_owned());
        }
        for key in REQUIRED_KEYS {
            if !seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("missing required key {key}")));
            }
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let s = key.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "# {s}");
                section = s;
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn teacher_config(&self, directionality: Directionality) -> TeacherConfig {
        TeacherConfig {
            vocab_size: self.corpus.vocab_size + 1,
            d_model: self.train.model.d_model,
            layers: self.teacher.layers,
            heads: self.teacher.heads,
            directionality,
            seed: self.teacher.seed,
        }
    }

    /// Directionality of the teacher used by the configured variant.
    pub fn variant_directionality(&self) -> Directionality {
        self.teacher.directionality.resolve(self.train.variant)
    }

    /// Seeded teacher, lightly fit on the training transcripts when
    /// `teacher.fit_epochs > 0`.
    pub fn build_teacher(&self, directionality: Directionality, corpus: &Corpus) -> Result<TeacherLM> {
        let mut teacher = build_teacher(self.teacher_config(directionality))?;
        if self.teacher.fit_epochs > 0 {
            let transcripts: Vec<_> = corpus.train.iter().map(|u| u.transcript.clone()).collect();
            teacher.fit(&transcripts, self.teacher.fit_epochs, self.teacher.fit_lr, self.teacher.seed)?;
        }
        Ok(teacher)
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Contract(m) => Error::Config(m),
        other => other,
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = ExperimentConfig::defaults("/tmp/out dir");
        cfg.corpus.noise_sigma = 0.1 + 0.2;
        cfg.train.variant = Variant::KtCl;
        cfg.teacher.directionality = TeacherChoice::Fixed(Directionality::Bidirectional);
        let text = cfg.serialize();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.serialize(), text);
    }

    #[test]
    fn missing_output_dir_names_the_key() {
        let err = ExperimentConfig::parse("train.epochs = 3\n").unwrap_err();
        assert!(err.to_string().contains("output.dir"), "{err}");
    }

    #[test]
    fn unknown_and_duplicate_keys() {
        let err = ExperimentConfig::parse("output.dir = x\ntrain.epoch = 3\n").unwrap_err();
        assert!(err.to_string().contains("train.epoch"));
        assert!(ExperimentConfig::parse("output.dir = x\noutput.dir = y\n").is_err());
        assert!(ExperimentConfig::parse("output.dir = x\ntrain.epochs = many\n").is_err());
    }

    #[test]
    fn comments_and_derived_fields() {
        let cfg = ExperimentConfig::parse("# hi\noutput.dir = o  # trailing\ncorpus.vocab_size = 5\n").unwrap();
        assert_eq!(cfg.train.model.classes, 6);
        assert_eq!(cfg.output_dir, PathBuf::from("o"));
        assert_eq!(cfg.variant_directionality(), Directionality::Bidirectional);
    }
}

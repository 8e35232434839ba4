//! Pipeline configuration: defaults, overridden by a flat `key = value`
//! file, then by `PNSC_*` environment variables, then by CLI flags.

use crate::plpcnet::DecoderSizePreset;
use crate::{Error, Result};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Number of speaker groups C.
    pub group_count: usize,
    /// Base seed for every stage.
    pub seed: u64,
    pub embed_steps: usize,
    pub embed_batch: usize,
    /// Frames per utterance fed to the embedder.
    pub embed_max_frames: usize,
    pub decoder_preset: DecoderSizePreset,
    pub decoder_steps: usize,
    pub decoder_batch_chunks: usize,
    pub learning_rate: f64,
    pub clip_threshold: f64,
    /// Fraction of decoder training chunks drawn from other groups.
    pub leakage: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            group_count: 4,
            seed: 1,
            embed_steps: 200,
            embed_batch: 64,
            embed_max_frames: 100,
            decoder_preset: DecoderSizePreset::Small,
            decoder_steps: 60,
            decoder_batch_chunks: 4,
            learning_rate: 1e-3,
            clip_threshold: 5e-2,
            leakage: 0.0,
        }
    }
}

pub const ENV_PREFIX: &str = "PNSC_";

impl PipelineConfig {
    /// Defaults, then the optional file, then the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            cfg.apply_file(p)?;
        }
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "{}:{}: expected 'key = value'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        let pairs: Vec<(String, String)> = std::env::vars()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        self.apply_env_pairs(&pairs)
    }

    /// `PNSC_GROUP_COUNT=8` style pairs; non-prefixed names are ignored.
    pub fn apply_env_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            if let Some(name) = k.strip_prefix(ENV_PREFIX) {
                self.set(&name.to_ascii_lowercase(), v)?;
            }
        }
        Ok(())
    }

    /// Rejected values leave the config untouched.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut next = self.clone();
        next.set_unchecked(key, value)?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    fn set_unchecked(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| {
            Error::InvalidArgument(format!("invalid {} value '{}'", what, value))
        };
        match key {
            "group_count" => self.group_count = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "embed_steps" => self.embed_steps = value.parse().map_err(|_| bad(key))?,
            "embed_batch" => self.embed_batch = value.parse().map_err(|_| bad(key))?,
            "embed_max_frames" => self.embed_max_frames = value.parse().map_err(|_| bad(key))?,
            "decoder_preset" => self.decoder_preset = DecoderSizePreset::parse(value)?,
            "decoder_steps" => self.decoder_steps = value.parse().map_err(|_| bad(key))?,
            "decoder_batch_chunks" => {
                self.decoder_batch_chunks = value.parse().map_err(|_| bad(key))?
            }
            "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad(key))?,
            "clip_threshold" => self.clip_threshold = value.parse().map_err(|_| bad(key))?,
            "leakage" => self.leakage = value.parse().map_err(|_| bad(key))?,
            other => {
                return Err(Error::InvalidArgument(format!("unknown config key '{}'", other)))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_count == 0 {
            return Err(Error::InvalidArgument("group_count must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 || self.clip_threshold <= 0.0 {
            return Err(Error::InvalidArgument(
                "learning_rate and clip_threshold must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.leakage) {
            return Err(Error::InvalidArgument("leakage must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_file_string(&self) -> String {
        format!(
            "group_count = {}\nseed = {}\nembed_steps = {}\nembed_batch = {}\n\
             embed_max_frames = {}\ndecoder_preset = {}\ndecoder_steps = {}\n\
             decoder_batch_chunks = {}\nlearning_rate = {}\nclip_threshold = {}\nleakage = {}\n",
            self.group_count,
            self.seed,
            self.embed_steps,
            self.embed_batch,
            self.embed_max_frames,
            self.decoder_preset.name(),
            self.decoder_steps,
            self.decoder_batch_chunks,
            self.learning_rate,
            self.clip_threshold,
            self.leakage
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn file_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.group_count = 8;
        cfg.decoder_preset = DecoderSizePreset::Large;
        cfg.learning_rate = 5e-4;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.conf");
        std::fs::File::create(&path)
            .unwrap()
            .write_all(cfg.to_file_string().as_bytes())
            .unwrap();

        let mut back = PipelineConfig::default();
        back.apply_file(&path).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "# comment\n\nseed = 9\n").unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn env_overrides_file() {
        let mut cfg = PipelineConfig::default();
        cfg.set("seed", "3").unwrap();
        cfg.apply_env_pairs(&[
            ("PNSC_SEED".into(), "11".into()),
            ("UNRELATED".into(), "x".into()),
        ])
        .unwrap();
        assert_eq!(cfg.seed, 11);
    }

    #[test]
    fn unknown_key_and_bad_values_rejected() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.set("no_such_key", "1").is_err());
        assert!(cfg.set("seed", "abc").is_err());
        assert!(cfg.set("group_count", "0").is_err());
        assert!(cfg.set("leakage", "1.5").is_err());
        assert!(cfg.set("decoder_preset", "huge").is_err());
        assert!(cfg.set("decoder_preset", "reference-large").is_ok());
    }

    #[test]
    fn malformed_file_line_names_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "seed = 1\nnonsense\n").unwrap();
        let mut cfg = PipelineConfig::default();
        let err = cfg.apply_file(&path).unwrap_err().to_string();
        assert!(err.contains(":2"), "error was: {}", err);
    }
}

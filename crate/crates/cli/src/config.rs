//! Run configuration: built-in defaults, then the `--config` file, then
//! flags. The resolved map is frozen beside every run's outputs.

use std::path::Path;

use anyhow::{bail, Context, Result};
use progdistill::audio::FrontEnd;
use progdistill::chain::TrainingConfig;
use progdistill::dataset::IngestConfig;
use progdistill::kv::KvMap;
use progdistill::model::NetworkSpec;
use progdistill::synth::SynthSpec;

pub const RESOLVED_FILE: &str = "run.conf";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    /// 4 kHz, 10 coefficients, 16 channels, 2 residual blocks.
    Desk,
    /// 16 kHz, 40 coefficients, res15.
    Standard,
}

impl std::str::FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(Self::Desk),
            "standard" | "res15" => Ok(Self::Standard),
            other => Err(format!("unknown scale {other:?} (expected desk or standard)")),
        }
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Standard => "standard",
        })
    }
}

/// Flat `section.key=value` settings for one command.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub kv: KvMap,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let kv = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                KvMap::parse(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => KvMap::new(),
        };
        Ok(Self { kv })
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.kv.set(key, value);
    }

    /// Sets `key` only when the flag was given.
    pub fn set_opt<T: std::fmt::Display>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.kv.set(key, v);
        }
    }

    pub fn seed(&self) -> Result<u64> {
        Ok(self.kv.parse_value("seed")?.unwrap_or(0))
    }

    pub fn scale(&self) -> Result<Scale> {
        match self.kv.get("model.scale") {
            None => Ok(Scale::Desk),
            Some(s) => s.parse().map_err(anyhow::Error::msg),
        }
    }

    pub fn front_end(&self) -> Result<FrontEnd> {
        Ok(match self.scale()? {
            Scale::Desk => FrontEnd::desk(),
            Scale::Standard => FrontEnd::standard(),
        })
    }

    /// Architecture at `input_ms` for `n_classes` outputs, with `model.*`
    /// overrides applied.
    pub fn network(&self, input_ms: u32, n_classes: usize) -> Result<NetworkSpec> {
        let mut spec = match self.scale()? {
            Scale::Desk => NetworkSpec::desk(input_ms),
            Scale::Standard => NetworkSpec::res15(input_ms),
        };
        spec.n_classes = n_classes;
        let m = self.kv.section("model");
        if let Some(v) = m.parse_value("channels")? {
            spec.n_channels = v;
        }
        if let Some(v) = m.parse_value("res_blocks")? {
            spec.n_res_blocks = v;
        }
        if let Some(v) = m.parse_value("final_dilation")? {
            spec.final_conv_dilation = v;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn training(&self) -> Result<TrainingConfig> {
        let mut cfg = match self.scale()? {
            Scale::Desk => TrainingConfig::desk(),
            Scale::Standard => TrainingConfig::default(),
        };
        cfg.seed = self.seed()?;
        cfg.apply_kv(&self.kv.section("train"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ingest(&self) -> Result<IngestConfig> {
        let mut cfg = IngestConfig {
            sample_rate: self.front_end()?.sample_rate(),
            seed: self.seed()?,
            ..IngestConfig::default()
        };
        cfg.apply_kv(&self.kv.section("data"))?;
        Ok(cfg)
    }

    pub fn synth(&self) -> Result<SynthSpec> {
        let mut spec = SynthSpec {
            seed: self.seed()?,
            ..SynthSpec::default()
        };
        spec.apply_kv(&self.kv.section("synth"))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Writes the resolved settings (flags, file and defaults of every
    /// section the command used) to `dir/run.conf`.
    pub fn freeze(&self, dir: &Path, command: &str, sections: &[&str]) -> Result<()> {
        let mut out = KvMap::new();
        out.set("command", command);
        out.set("seed", self.seed()?);
        out.set("model.scale", self.scale()?);
        for &section in sections {
            let mut kv = KvMap::new();
            match section {
                "train" => self.training()?.to_kv(&mut kv),
                "data" => self.ingest()?.to_kv(&mut kv),
                "synth" => self.synth()?.to_kv(&mut kv),
                _ => {}
            }
            out.set_section(section, &kv);
        }
        // Command-specific keys (dims, mode, ...) are kept as given.
        for (k, v) in self.kv.iter() {
            if !out.contains(k) && !sections.iter().any(|s| k.starts_with(&format!("{s}."))) {
                out.set(k, v);
            }
        }
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RESOLVED_FILE), out.to_text())?;
        Ok(())
    }
}

/// `1000,800,500` or an inclusive range `500..1000` in 100 ms steps
/// (`500..1000:50` for another step).
pub fn parse_dims(text: &str) -> Result<Vec<u32>> {
    if let Some((lo, rest)) = text.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((h, s)) => (h, s.trim().parse::<u32>().context("range step")?),
            None => (rest, 100),
        };
        let lo: u32 = lo.trim().parse().context("range start")?;
        let hi: u32 = hi.trim().parse().context("range end")?;
        if step == 0 || lo > hi {
            bail!("bad range {text:?}");
        }
        return Ok((lo..=hi).step_by(step as usize).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse::<u32>().with_context(|| format!("bad dimension {s:?} in {text:?}")))
        .collect()
}

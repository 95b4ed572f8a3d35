// SPDX-License-Identifier: Apache-2.0

//! Run configuration file and size/pattern parsing for command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

use secscale::sim::{trend_workload, AttackSpec, ModelKind, SystemConfig};
use secscale::workload::{generate, read_trace_file, Pattern, SyntheticSpec, TraceRecord};

pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_OUT: &str = "out";
pub const DEFAULT_ACCESSES: u64 = 4000;

/// Where the trace comes from. At most one of the two may be set; with
/// neither, the uniform-random trend workload is used.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub trace: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelKind>,
    /// Models for `compare`.
    pub models: Vec<ModelKind>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub system: SystemConfig,
    pub workload: WorkloadConfig,
    pub attacks: Vec<AttackSpec>,
    /// Directory relative trace paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow!("invalid config at `{path}`: {}", e.into_inner().message().trim())
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    fn check(&self) -> Result<()> {
        self.system.validate().map_err(|e| anyhow!("invalid config at `system`: {e}"))?;
        if self.workload.trace.is_some() && self.workload.synthetic.is_some() {
            bail!("invalid config at `workload`: set either `trace` or `synthetic`, not both");
        }
        if let Some(s) = &self.workload.synthetic {
            s.validate().map_err(|e| anyhow!("invalid config at `workload.synthetic`: {e}"))?;
        }
        Ok(())
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(DEFAULT_SEED)
    }

    pub fn out(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    /// Loads or generates the trace. `fallback` is used when the file
    /// names no workload.
    pub fn trace(&self, fallback: SyntheticSpec) -> Result<Vec<TraceRecord>> {
        let trace = if let Some(p) = &self.workload.trace {
            let p = if p.is_relative() { self.base_dir.join(p) } else { p.clone() };
            read_trace_file(&p).with_context(|| format!("cannot load trace {}", p.display()))?
        } else {
            let spec = self.workload.synthetic.clone().unwrap_or(fallback);
            generate(&spec)?
        };
        if trace.is_empty() {
            bail!("workload is empty");
        }
        Ok(trace)
    }
}

pub fn default_workload(seed: u64) -> SyntheticSpec {
    trend_workload(seed, DEFAULT_ACCESSES)
}

/// Parses `512GiB`, `128MiB`, `4KiB`, `2G`, `64k` or a plain byte count.
pub fn parse_size(s: &str) -> Result<u64> {
    let t = s.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let n: u64 = num.parse().map_err(|_| anyhow!("bad size `{s}`"))?;
    let mult = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kb" | "kib" => 1 << 10,
        "m" | "mb" | "mib" => 1 << 20,
        "g" | "gb" | "gib" => 1 << 30,
        "t" | "tb" | "tib" => 1 << 40,
        _ => bail!("bad size unit in `{s}`"),
    };
    n.checked_mul(mult).ok_or_else(|| anyhow!("size `{s}` overflows"))
}

/// Parses `sequential`, `uniform`, `pointer-chase`, `zipf:<s>` or
/// `strided:<bytes>`.
pub fn parse_pattern(s: &str) -> Result<Pattern> {
    let (name, arg) = match s.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (s, None),
    };
    Ok(match (name, arg) {
        ("sequential", None) => Pattern::Sequential,
        ("uniform" | "uniform-random", None) => Pattern::UniformRandom,
        ("pointer-chase", None) => Pattern::PointerChase,
        ("zipf", Some(a)) => Pattern::Zipf {
            s: a.parse().map_err(|_| anyhow!("bad zipf exponent `{a}`"))?,
        },
        ("strided", Some(a)) => Pattern::Strided { stride: parse_size(a)? },
        _ => bail!("unknown pattern `{s}` (sequential, uniform, pointer-chase, zipf:<s>, strided:<bytes>)"),
    })
}

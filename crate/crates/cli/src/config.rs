use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;

use secmoe::cost::{Convention, ModelDims};
use secmoe::sectional::SectionalConfig;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DimsSection {
    #[serde(alias = "L")]
    pub l: usize,
    #[serde(alias = "E")]
    pub e: usize,
    pub d0: usize,
    pub h_pre: usize,
    pub h_exp: usize,
    pub alpha: f64,
    pub convention: String,
    pub e_min: Option<u64>,
    pub e_max: Option<u64>,
}

impl Default for DimsSection {
    fn default() -> Self {
        Self {
            l: 2,
            e: 2,
            d0: 8,
            h_pre: 1,
            h_exp: 1,
            alpha: 1.0,
            convention: "consistent".into(),
            e_min: None,
            e_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Reduction ratio; `E²` when absent.
    pub r: Option<usize>,
    pub ffn_mult_pre: usize,
    pub ffn_mult_exp: usize,
    pub ffn_mult_agg: usize,
    pub k: usize,
    pub capacity_factor: f64,
    pub causal: bool,
    pub parallel: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            r: None,
            ffn_mult_pre: 2,
            ffn_mult_exp: 2,
            ffn_mult_agg: 2,
            k: 1,
            capacity_factor: 1.25,
            causal: false,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dims: DimsSection,
    pub model: ModelSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model_dims()?.validate()?;
        self.sectional()?.validate()?;
        let m = &self.model;
        if m.k == 0 || m.k > self.dims.e {
            bail!("k={} must lie in 1..=E={}", m.k, self.dims.e);
        }
        if !(m.capacity_factor.is_finite() && m.capacity_factor >= 0.0) {
            bail!(
                "capacity_factor must be finite and non-negative, got {}",
                m.capacity_factor
            );
        }
        if let (Some(lo), Some(hi)) = (self.dims.e_min, self.dims.e_max) {
            if lo > hi {
                bail!("e_min={lo} exceeds e_max={hi}");
            }
        }
        Ok(())
    }

    pub fn convention(&self) -> anyhow::Result<Convention> {
        Ok(self.dims.convention.parse()?)
    }

    pub fn model_dims(&self) -> anyhow::Result<ModelDims> {
        let d = &self.dims;
        Ok(ModelDims {
            l: d.l,
            e: d.e as f64,
            d0: d.d0,
            h_pre: d.h_pre,
            h_exp: d.h_exp,
            alpha: d.alpha,
            convention: self.convention()?,
        })
    }

    pub fn sectional(&self) -> anyhow::Result<SectionalConfig> {
        let (d, m) = (&self.dims, &self.model);
        let mut cfg = SectionalConfig::new(d.l, d.e, d.d0);
        cfg.h_pre = d.h_pre;
        cfg.h_exp = d.h_exp;
        if let Some(r) = m.r {
            cfg.r = r;
        }
        cfg.ffn_mult_pre = m.ffn_mult_pre;
        cfg.ffn_mult_exp = m.ffn_mult_exp;
        cfg.ffn_mult_agg = m.ffn_mult_agg;
        cfg.causal = m.causal;
        cfg.parallel = m.parallel;
        cfg.seed = self.run.seed;
        Ok(cfg)
    }

    /// Expert range for sweeps: flags first, then the config, then `[1, 16]`.
    pub fn e_range(&self, e_min: Option<u64>, e_max: Option<u64>) -> (u64, u64) {
        (
            e_min.or(self.dims.e_min).unwrap_or(1),
            e_max.or(self.dims.e_max).unwrap_or(16),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_toy_default() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let s = cfg.sectional().unwrap();
        assert_eq!((s.l, s.e, s.d0, s.r), (2, 2, 8, 4));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[dims]\nd_0 = 8\n").unwrap_err();
        assert!(format!("{err:#}").contains("d_0"));
        assert!(RunConfig::parse("[extra]\n").is_err());
    }

    #[test]
    fn uppercase_aliases_and_overrides() {
        let cfg =
            RunConfig::parse("[dims]\nL = 4\nE = 2\nd0 = 16\n[model]\nr = 2\n[run]\nseed = 9\n")
                .unwrap();
        let s = cfg.sectional().unwrap();
        assert_eq!((s.l, s.e, s.d0, s.r, s.seed), (4, 2, 16, 2, 9));
        assert!(!s.on_model());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("[dims]\nd0 = 6\nE = 4\n").is_err());
        assert!(RunConfig::parse("[dims]\nconvention = \"other\"\n").is_err());
        assert!(RunConfig::parse("[model]\nk = 3\n").is_err());
        assert!(RunConfig::parse("[dims]\ne_min = 4\ne_max = 2\n").is_err());
    }

    #[test]
    fn range_precedence() {
        let cfg = RunConfig::parse("[dims]\ne_min = 2\ne_max = 8\n").unwrap();
        assert_eq!(cfg.e_range(None, None), (2, 8));
        assert_eq!(cfg.e_range(Some(3), None), (3, 8));
        assert_eq!(RunConfig::default().e_range(None, None), (1, 16));
    }
}

//! TOML pipeline configuration: a base norm, an ordered list of
//! deformations, analysis thresholds and sampling parameters.

use anyhow::{bail, Context};
use minkdeform::analysis::Thresholds;
use minkdeform::{DeformationSpec, Norm, OneForm, PhiExpr};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dim: usize,
    pub base: BaseConfig,
    #[serde(default)]
    pub deformations: Vec<DeformationConfig>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    pub kind: String,
    pub matrix: Option<Vec<Vec<f64>>>,
    pub m: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformationConfig {
    /// builtin profile name; mutually exclusive with `expr`
    pub phi: Option<String>,
    #[serde(default)]
    pub params: Vec<f64>,
    /// expression in s1..sp; mutually exclusive with `phi`
    pub expr: Option<String>,
    pub betas: Vec<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub euclidean: Option<f64>,
    pub c_reducible: Option<f64>,
    pub fit_rank: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub resolution: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            resolution: 512,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &std::path::Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: PipelineConfig = toml::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        if cfg.dim < 2 {
            bail!("dim must be >= 2");
        }
        Ok(cfg)
    }

    pub fn phi_for(&self, d: &DeformationConfig) -> anyhow::Result<PhiExpr> {
        match (&d.phi, &d.expr) {
            (Some(name), None) => {
                minkdeform::builtin(name, &d.params).context("invalid builtin profile")
            }
            (None, Some(expr)) => {
                minkdeform::parse(expr, d.betas.len()).context("invalid phi expression")
            }
            _ => bail!("each deformation needs exactly one of `phi` or `expr`"),
        }
    }

    pub fn spec_for(&self, d: &DeformationConfig) -> anyhow::Result<DeformationSpec> {
        let betas: Vec<OneForm> = d
            .betas
            .iter()
            .map(|row| {
                if row.len() != self.dim {
                    bail!("beta row length {} != dim {}", row.len(), self.dim);
                }
                Ok(OneForm::from_slice(row))
            })
            .collect::<anyhow::Result<_>>()?;
        let phi = self.phi_for(d)?;
        DeformationSpec::new(betas, phi).context("invalid deformation")
    }

    pub fn base_norm(&self) -> anyhow::Result<Norm> {
        match self.base.kind.as_str() {
            "euclidean" => {
                let rows = self
                    .base
                    .matrix
                    .clone()
                    .unwrap_or_else(|| identity_rows(self.dim));
                if rows.len() != self.dim || rows.iter().any(|r| r.len() != self.dim) {
                    bail!("matrix must be {0}x{0}", self.dim);
                }
                let flat: Vec<f64> = rows.into_iter().flatten().collect();
                Norm::euclidean(nalgebra::DMatrix::from_row_slice(
                    self.dim, self.dim, &flat,
                ))
                .context("invalid euclidean base")
            }
            "m_root" => {
                let m = self.base.m.context("m_root base needs `m`")?;
                Norm::m_root(m, self.dim).context("invalid m_root base")
            }
            other => bail!("unknown base kind `{other}` (expected euclidean or m_root)"),
        }
    }

    /// Base with all configured deformations applied in order.
    pub fn norm(&self) -> anyhow::Result<Norm> {
        let mut norm = self.base_norm()?;
        for d in &self.deformations {
            norm = Norm::deformed(norm, self.spec_for(d)?).context("invalid deformation")?;
        }
        Ok(norm)
    }

    /// Norm before the last deformation, with that deformation's spec.
    pub fn last_step(&self) -> anyhow::Result<(Norm, DeformationSpec)> {
        let Some((last, init)) = self.deformations.split_last() else {
            bail!("config has no deformations");
        };
        let mut norm = self.base_norm()?;
        for d in init {
            norm = Norm::deformed(norm, self.spec_for(d)?)?;
        }
        Ok((norm, self.spec_for(last)?))
    }

    pub fn thresholds(&self, overrides: &[(String, f64)]) -> anyhow::Result<Thresholds> {
        let mut t = Thresholds::default();
        if let Some(v) = self.analysis.euclidean {
            t.euclidean = v;
        }
        if let Some(v) = self.analysis.c_reducible {
            t.c_reducible = v;
        }
        if let Some(v) = self.analysis.fit_rank {
            t.fit_rank = v;
        }
        for (key, val) in overrides {
            match key.as_str() {
                "euclidean" => t.euclidean = *val,
                "c_reducible" => t.c_reducible = *val,
                "fit_rank" => t.fit_rank = *val,
                other => bail!("unknown threshold `{other}`"),
            }
        }
        Ok(t)
    }
}

fn identity_rows(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

//! Flat `key = value` experiment files. `#` starts a comment; unknown keys
//! are errors so typos do not silently fall back to defaults.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PsarError, Result};
use crate::inference::{BootstrapMode, EstimatorKind};
use crate::network::{gen_dyad, gen_powerlaw, gen_sbm, Adjacency};
use crate::sim::{PrivacyConfig, Theta};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Dyad,
    Sbm { blocks: usize },
    PowerLaw { alpha: f64 },
}

impl Generator {
    pub fn generate(&self, n: usize, seed: u64) -> Result<Adjacency> {
        match *self {
            Generator::Dyad => gen_dyad(n, seed),
            Generator::Sbm { blocks } => gen_sbm(n, blocks, seed),
            Generator::PowerLaw { alpha } => gen_powerlaw(n, alpha, seed),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Generator::Dyad => "dyad",
            Generator::Sbm { .. } => "sbm",
            Generator::PowerLaw { .. } => "powerlaw",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub generator: Generator,
    pub n: usize,
    pub replicates: usize,
    pub theta0: Theta,
    pub privacy: PrivacyConfig,
    pub estimators: Vec<EstimatorKind>,
    pub seed: u64,
    /// 0 disables standard errors.
    pub bootstrap_b: usize,
    pub bootstrap_mode: BootstrapMode,
    pub level: f64,
    /// Fit on a perturbed copy of the network with `floor(N^s)` flips.
    pub perturb_s: Option<f64>,
    pub raw_output: Option<PathBuf>,
    pub report_output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut privacy = PrivacyConfig::none(2);
        privacy.lambda2 = 0.5;
        privacy.lambda2_x = 0.5;
        privacy.p1 = 1;
        privacy.p2 = 1;
        Self {
            generator: Generator::Dyad,
            n: 500,
            replicates: 200,
            theta0: Theta::new(0.2, vec![0.3, 0.3], 1.0),
            privacy,
            estimators: vec![EstimatorKind::Qmle, EstimatorKind::Cle, EstimatorKind::Cls],
            seed: 1,
            bootstrap_b: 200,
            bootstrap_mode: BootstrapMode::OneStep,
            level: 0.95,
            perturb_s: None,
            raw_output: None,
            report_output: None,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| PsarError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_num(key, s.trim())).collect()
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(PsarError::Config("replicates must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(PsarError::Config("no estimators requested".into()));
        }
        if self.bootstrap_b == 1 {
            return Err(PsarError::Config("bootstrap_b must be 0 or at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.level) {
            return Err(PsarError::Config("level must lie in [0, 1)".into()));
        }
        if let Some(s) = self.perturb_s {
            if !(s > 0.0 && s < 0.5) {
                return Err(PsarError::Config(format!("perturb_s = {s} not in (0, 0.5)")));
            }
        }
        self.theta0.validate().map_err(|e| PsarError::Config(e.to_string()))?;
        self.privacy.validate(self.theta0.p()).map_err(|e| PsarError::Config(e.to_string()))
    }

    /// Parse a config file. Keys left out keep their [`Default`] value.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut protected: Option<usize> = None;
        let mut sbm_blocks = 20;
        let mut alpha = 3.0;
        let mut generator = "dyad".to_string();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| PsarError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, val) = (key.trim(), val.trim());
            match key {
                "generator" => generator = val.to_ascii_lowercase(),
                "sbm_blocks" => sbm_blocks = parse_num(key, val)?,
                "powerlaw_alpha" => alpha = parse_num(key, val)?,
                "n" => cfg.n = parse_num(key, val)?,
                "replicates" => cfg.replicates = parse_num(key, val)?,
                "rho" => cfg.theta0.rho = parse_num(key, val)?,
                "beta" => cfg.theta0.beta = parse_list(key, val)?,
                "sigma2" => cfg.theta0.sigma2 = parse_num(key, val)?,
                "lambda2" => cfg.privacy.lambda2 = parse_num(key, val)?,
                "lambda2_x" => cfg.privacy.lambda2_x = parse_num(key, val)?,
                "protected_cols" => protected = Some(parse_num(key, val)?),
                "noise_law" => cfg.privacy.noise_law = val.parse()?,
                "estimators" => {
                    cfg.estimators = val
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| s.parse())
                        .collect::<Result<_>>()?
                }
                "seed" => cfg.seed = parse_num(key, val)?,
                "bootstrap_b" => cfg.bootstrap_b = parse_num(key, val)?,
                "bootstrap_mode" => cfg.bootstrap_mode = val.parse()?,
                "level" => cfg.level = parse_num(key, val)?,
                "perturb_s" => {
                    cfg.perturb_s = if val == "none" { None } else { Some(parse_num(key, val)?) }
                }
                "raw_output" => cfg.raw_output = Some(PathBuf::from(val)),
                "report_output" => cfg.report_output = Some(PathBuf::from(val)),
                other => return Err(PsarError::Config(format!("unknown key `{other}`"))),
            }
        }
        cfg.generator = match generator.as_str() {
            "dyad" => Generator::Dyad,
            "sbm" => Generator::Sbm { blocks: sbm_blocks },
            "powerlaw" => Generator::PowerLaw { alpha },
            other => return Err(PsarError::Config(format!("unknown generator `{other}`"))),
        };
        let p = cfg.theta0.p();
        let p2 = protected.unwrap_or(cfg.privacy.p2.min(p));
        if p2 > p {
            return Err(PsarError::Config(format!("protected_cols = {p2} exceeds p = {p}")));
        }
        cfg.privacy.p2 = p2;
        cfg.privacy.p1 = p - p2;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Inverse of [`ExperimentConfig::parse`].
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("generator", self.generator.name().into());
        match self.generator {
            Generator::Sbm { blocks } => kv("sbm_blocks", blocks.to_string()),
            Generator::PowerLaw { alpha } => kv("powerlaw_alpha", format!("{alpha:?}")),
            Generator::Dyad => {}
        }
        kv("n", self.n.to_string());
        kv("replicates", self.replicates.to_string());
        kv("rho", format!("{:?}", self.theta0.rho));
        kv("beta", join(&self.theta0.beta));
        kv("sigma2", format!("{:?}", self.theta0.sigma2));
        kv("lambda2", format!("{:?}", self.privacy.lambda2));
        kv("lambda2_x", format!("{:?}", self.privacy.lambda2_x));
        kv("protected_cols", self.privacy.p2.to_string());
        kv("noise_law", self.privacy.noise_law.name().into());
        kv("estimators", self.estimators.iter().map(|e| e.name()).collect::<Vec<_>>().join(","));
        kv("seed", self.seed.to_string());
        kv("bootstrap_b", self.bootstrap_b.to_string());
        kv(
            "bootstrap_mode",
            match self.bootstrap_mode {
                BootstrapMode::Refit => "refit".into(),
                BootstrapMode::OneStep => "onestep".into(),
            },
        );
        kv("level", format!("{:?}", self.level));
        if let Some(s) = self.perturb_s {
            kv("perturb_s", format!("{s:?}"));
        }
        if let Some(p) = &self.raw_output {
            kv("raw_output", p.display().to_string());
        }
        if let Some(p) = &self.report_output {
            kv("report_output", p.display().to_string());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        let text = "\
# small sbm study
generator = sbm
sbm_blocks = 5
n = 300
replicates = 10   # quick
beta = 0.3, 0.3
lambda2 = 0.8
estimators = cle,cls
perturb_s = 0.3
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.generator, Generator::Sbm { blocks: 5 });
        assert_eq!(cfg.replicates, 10);
        assert_eq!(cfg.privacy.lambda2, 0.8);
        assert_eq!(cfg.estimators, vec![EstimatorKind::Cle, EstimatorKind::Cls]);
        let again = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again.to_text(), cfg.to_text());
    }

    #[test]
    fn config_errors() {
        for bad in [
            "replicates = 0",
            "bogus = 1",
            "n 5",
            "estimators = qmle,gmm",
            "protected_cols = 3",
            "perturb_s = 0.7",
            "generator = lattice",
        ] {
            assert!(matches!(ExperimentConfig::parse(bad), Err(PsarError::Config(_))), "{bad}");
        }
    }
}

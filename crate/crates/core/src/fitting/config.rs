use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AamError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostFunction {
    Ssd,
    ProjectOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    Forward,
    Inverse,
    Asymmetric,
    Bidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GaussNewton,
    Newton,
    Wiberg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Schur,
    Alternated,
}

/// Alternation scheme for bidirectional composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AltVariant {
    /// Appearance first, then the warp increments jointly.
    Joint,
    /// Appearance, then `Δp`, then `Δq`.
    Sequential,
}

/// The four taxonomy axes named by a `CF_TC_OM(_OS)` selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Algorithm {
    pub cost: CostFunction,
    pub composition: Composition,
    pub method: Method,
    pub strategy: Strategy,
}

const VALID_MATRIX: &str = "CF in {SSD, PO}, TC in {For, Inv, Asy, Bid}, OM in {GN, N, W}, \
optional OS in {Sch, Alt}; PO with For/Inv/Asy has no Alt variant";

impl Algorithm {
    pub fn validate(&self) -> Result<()> {
        if self.cost == CostFunction::ProjectOut
            && self.composition != Composition::Bidirectional
            && self.method != Method::Wiberg
            && self.strategy == Strategy::Alternated
        {
            return Err(AamError::Config(
                "project-out with forward/inverse/asymmetric composition has no alternated rule".into(),
            ));
        }
        Ok(())
    }
}

impl FromStr for Algorithm {
    type Err = AamError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || AamError::Config(format!("unknown algorithm selector '{s}'; valid: {VALID_MATRIX}"));
        let tokens: Vec<String> = s.split('_').map(|t| t.to_ascii_lowercase()).collect();
        if !(3..=4).contains(&tokens.len()) {
            return Err(bad());
        }
        let cost = match tokens[0].as_str() {
            "ssd" => CostFunction::Ssd,
            "po" => CostFunction::ProjectOut,
            _ => return Err(bad()),
        };
        let composition = match tokens[1].as_str() {
            "for" => Composition::Forward,
            "inv" => Composition::Inverse,
            "asy" => Composition::Asymmetric,
            "bid" => Composition::Bidirectional,
            _ => return Err(bad()),
        };
        let method = match tokens[2].as_str() {
            "gn" => Method::GaussNewton,
            "n" => Method::Newton,
            "w" => Method::Wiberg,
            _ => return Err(bad()),
        };
        let strategy = match tokens.get(3).map(String::as_str) {
            None | Some("sch") => Strategy::Schur,
            Some("alt") => Strategy::Alternated,
            Some(_) => return Err(bad()),
        };
        let alg = Algorithm {
            cost,
            composition,
            method,
            strategy,
        };
        alg.validate()?;
        Ok(alg)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cf = match self.cost {
            CostFunction::Ssd => "SSD",
            CostFunction::ProjectOut => "PO",
        };
        let tc = match self.composition {
            Composition::Forward => "For",
            Composition::Inverse => "Inv",
            Composition::Asymmetric => "Asy",
            Composition::Bidirectional => "Bid",
        };
        let om = match self.method {
            Method::GaussNewton => "GN",
            Method::Newton => "N",
            Method::Wiberg => "W",
        };
        write!(f, "{cf}_{tc}_{om}")?;
        let has_strategy = self.method != Method::Wiberg
            && (self.cost == CostFunction::Ssd || self.composition == Composition::Bidirectional);
        if has_strategy {
            let os = match self.strategy {
                Strategy::Schur => "Sch",
                Strategy::Alternated => "Alt",
            };
            write!(f, "_{os}")?;
        }
        Ok(())
    }
}

/// Maximum-a-posteriori regularization of the Gauss-Newton steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapPrior {
    /// Prior variance assigned to the four similarity parameters.
    #[serde(default = "default_similarity_variance")]
    pub similarity_variance: f64,
}

fn default_similarity_variance() -> f64 {
    1e10
}

impl Default for MapPrior {
    fn default() -> Self {
        MapPrior {
            similarity_variance: default_similarity_variance(),
        }
    }
}

/// Complete fitting configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub cost: CostFunction,
    pub composition: Composition,
    /// Image-side weight of asymmetric composition; `β = 1 − α`.
    pub alpha: f64,
    pub method: Method,
    pub strategy: Strategy,
    /// Weight of the within-subspace term of the project-out cost.
    pub rho: f64,
    /// Iteration budget per scale, coarse to fine.
    pub iters_per_scale: Vec<usize>,
    pub sampling_rate: f64,
    pub prior: Option<MapPrior>,
    pub alt_variant: AltVariant,
    /// Stop a scale once the warp update norm falls below this value.
    pub convergence_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            cost: CostFunction::Ssd,
            composition: Composition::Asymmetric,
            alpha: 0.5,
            method: Method::GaussNewton,
            strategy: Strategy::Schur,
            rho: 0.5,
            iters_per_scale: vec![24, 16],
            sampling_rate: 1.0,
            prior: None,
            alt_variant: AltVariant::Sequential,
            convergence_tol: 1e-6,
        }
    }
}

impl FitConfig {
    pub fn from_selector(selector: &str) -> Result<FitConfig> {
        let alg: Algorithm = selector.parse()?;
        Ok(FitConfig::default().with_algorithm(alg))
    }

    pub fn with_algorithm(mut self, alg: Algorithm) -> FitConfig {
        self.cost = alg.cost;
        self.composition = alg.composition;
        self.method = alg.method;
        self.strategy = alg.strategy;
        self
    }

    pub fn algorithm(&self) -> Algorithm {
        Algorithm {
            cost: self.cost,
            composition: self.composition,
            method: self.method,
            strategy: self.strategy,
        }
    }

    pub fn beta(&self) -> f64 {
        1.0 - self.alpha
    }

    /// `(α, β)` actually applied by the composition rule.
    pub fn effective_weights(&self) -> (f64, f64) {
        match self.composition {
            Composition::Forward => (1.0, 0.0),
            Composition::Inverse => (0.0, 1.0),
            _ => (self.alpha, self.beta()),
        }
    }

    pub fn total_iterations(&self) -> usize {
        self.iters_per_scale.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.algorithm().validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(AamError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        crate::appearance::check_rho(self.rho)?;
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(AamError::Config(format!(
                "sampling rate {} outside (0, 1]",
                self.sampling_rate
            )));
        }
        if self.iters_per_scale.is_empty() {
            return Err(AamError::Config("empty iteration budget".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(AamError::Config("negative convergence tolerance".into()));
        }
        if let Some(prior) = &self.prior {
            if self.method != Method::GaussNewton || self.composition == Composition::Bidirectional {
                return Err(AamError::Config(
                    "priors are supported by Gauss-Newton with forward/inverse/asymmetric composition only".into(),
                ));
            }
            if !(prior.similarity_variance > 0.0) {
                return Err(AamError::Config("similarity prior variance must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<FitConfig> {
        let cfg: FitConfig = toml::from_str(s).map_err(|e| AamError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<FitConfig> {
        let cfg: FitConfig = serde_json::from_str(s).map_err(|e| AamError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

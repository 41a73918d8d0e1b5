//! Experiment configuration: a versioned TOML document.

use layerlab::coeff::FieldDescriptor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CONFIG_VERSION: u32 = 1;

/// A configuration error located by a JSON-pointer path into the document.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub pointer: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let at = if self.pointer.is_empty() { "/" } else { &self.pointer };
        write!(f, "config error at {at}: {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(pointer: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { pointer: pointer.into(), message: message.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub field: FieldDescriptor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainConfig>,
    #[serde(default)]
    pub cell: CellConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuation: Option<ContinuationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_identities: Option<QConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub green: Option<GreenConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_rates: Option<KernelRatesConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainConfig {
    /// Axis-aligned square `center + [-h, h]^2`.
    Square {
        #[serde(default = "origin")]
        center: Vec<f64>,
        #[serde(default = "half")]
        half_width: f64,
        panels_per_edge: usize,
        #[serde(default)]
        grading: usize,
    },
    /// Axis-aligned cube `center + [-h, h]^3`.
    Cube {
        #[serde(default = "origin")]
        center: Vec<f64>,
        #[serde(default = "half")]
        half_width: f64,
        panels_per_side: usize,
        #[serde(default)]
        grading: usize,
    },
    /// Simple counterclockwise polygon.
    Polygon {
        vertices: Vec<[f64; 2]>,
        panels_per_edge: usize,
        #[serde(default)]
        grading: usize,
    },
    /// Regular polygon with `panels` sides inscribed in a circle.
    Circle {
        #[serde(default = "origin")]
        center: Vec<f64>,
        radius: f64,
        panels: usize,
    },
}

fn origin() -> Vec<f64> {
    Vec::new()
}

fn half() -> f64 {
    0.5
}

impl DomainConfig {
    pub fn dim(&self) -> usize {
        match self {
            DomainConfig::Cube { .. } => 3,
            _ => 2,
        }
    }

    /// Center point, padded with zeros to `dim` coordinates.
    pub fn center(&self) -> Vec<f64> {
        let mut c = match self {
            DomainConfig::Square { center, .. } | DomainConfig::Cube { center, .. } | DomainConfig::Circle { center, .. } => {
                center.clone()
            }
            DomainConfig::Polygon { vertices, .. } => {
                let n = vertices.len().max(1) as f64;
                vec![vertices.iter().map(|v| v[0]).sum::<f64>() / n, vertices.iter().map(|v| v[1]).sum::<f64>() / n]
            }
        };
        c.resize(self.dim(), 0.0);
        c
    }

    /// Half of the smallest bounding-box extent.
    pub fn inradius_scale(&self) -> f64 {
        match self {
            DomainConfig::Square { half_width, .. } | DomainConfig::Cube { half_width, .. } => *half_width,
            DomainConfig::Circle { radius, .. } => *radius / std::f64::consts::SQRT_2,
            DomainConfig::Polygon { vertices, .. } => {
                let span = |k: usize| {
                    let lo = vertices.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min);
                    let hi = vertices.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max);
                    hi - lo
                };
                0.5 * span(0).min(span(1))
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    /// Fourier cutoff; the library default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    /// Points per axis of the exported corrector table (0 disables it).
    #[serde(default)]
    pub samples: usize,
    /// Writes the binary corrector table next to the CSV.
    #[serde(default)]
    pub save: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_a0: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a0_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_corrector_norm: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Bem,
    Fem,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// `sum_i c_i (x_i - eps chi_i(x/eps))`.
    Corrector { weights: Vec<f64> },
    /// Quadratic `L`-harmonic polynomial for constant coefficients.
    Harmonic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    pub problem: String,
    #[serde(default = "bem")]
    pub backend: Backend,
    #[serde(default = "unit")]
    pub eps: f64,
    pub data: DataConfig,
    /// Probe points per axis.
    #[serde(default = "five")]
    pub probes: usize,
    /// Probe box half width relative to the domain scale.
    #[serde(default = "probe_fraction")]
    pub probe_fraction: f64,
    /// FEM grid step; defaults to `min(eps / 16, 1/128)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fem_h: Option<f64>,
    /// Points per axis of the exported field samples (0 disables it).
    #[serde(default)]
    pub dump: usize,
    /// Also report jump and trace identities of the boundary operators.
    #[serde(default)]
    pub diagnostics: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_interior_error: Option<f64>,
}

fn bem() -> Backend {
    Backend::Bem
}

fn unit() -> f64 {
    1.0
}

fn five() -> usize {
    5
}

fn probe_fraction() -> f64 {
    0.6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    #[serde(default = "default_problems")]
    pub problems: Vec<String>,
    #[serde(default = "sixteen")]
    pub base_panels: usize,
    #[serde(default = "eight")]
    pub panels_per_eps: usize,
    #[serde(default = "max_panels")]
    pub max_panels: usize,
    pub weights: Vec<f64>,
    #[serde(default = "five")]
    pub probes: usize,
    #[serde(default = "probe_fraction")]
    pub probe_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_spread: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_interior_error: Option<f64>,
}

fn default_eps() -> Vec<f64> {
    vec![1.0, 0.5, 0.25, 0.125]
}

fn default_problems() -> Vec<String> {
    ["exact", "dirichlet", "neumann", "regularity"].iter().map(|s| s.to_string()).collect()
}

fn sixteen() -> usize {
    16
}

fn eight() -> usize {
    8
}

fn max_panels() -> usize {
    4000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuationConfig {
    #[serde(default = "quarter")]
    pub eps: f64,
    #[serde(default = "default_s")]
    pub s: Vec<f64>,
    #[serde(default = "twenty")]
    pub random: usize,
    /// Pairs `(s, s')` for the continuity probe; consecutive grid values by default.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<[f64; 2]>,
    #[serde(default = "eight")]
    pub densities: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_condition_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_continuity_spread: Option<f64>,
}

fn quarter() -> f64 {
    0.25
}

fn default_s() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

fn twenty() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PsiConfig {
    Flat,
    Cone { slope: f64 },
    Sawtooth { slope: f64, period: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QConfig {
    pub psi: PsiConfig,
    pub lipschitz: f64,
    #[serde(default = "half")]
    pub r: f64,
    #[serde(default = "thirty_two")]
    pub resolution: usize,
    #[serde(default = "half")]
    pub rho: f64,
    pub eps: Vec<f64>,
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_product_rule: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_telescoping: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_ibp_relative: Option<f64>,
}

fn thirty_two() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GreenConfig {
    pub pole: Vec<f64>,
    #[serde(default = "unit")]
    pub eps: f64,
    #[serde(default = "default_flux_radii")]
    pub flux_radii: Vec<f64>,
    #[serde(default = "flux_points")]
    pub flux_points: usize,
    /// Compare with the closed-form Green function of a disk (identity coefficients).
    #[serde(default)]
    pub closed_form: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_trace_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flux_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_closed_form_error: Option<f64>,
}

fn default_flux_radii() -> Vec<f64> {
    vec![0.3, 0.5]
}

fn flux_points() -> usize {
    512
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelRatesConfig {
    #[serde(default = "unit")]
    pub eps: f64,
    #[serde(default = "default_pole")]
    pub pole: Vec<f64>,
    #[serde(default = "box_size")]
    pub box_size: f64,
    #[serde(default = "grid_step")]
    pub h: f64,
    #[serde(default = "near_radii")]
    pub near_radii: [f64; 2],
    #[serde(default = "far_radii")]
    pub far_radii: [f64; 2],
    #[serde(default = "eight")]
    pub n_radii: usize,
    #[serde(default = "sixteen")]
    pub n_angles: usize,
    /// Radii for the flux and homogeneity checks of constant fields.
    #[serde(default = "check_radii")]
    pub check_radii: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_gain: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flux_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homogeneity_tol: Option<f64>,
}

fn default_pole() -> Vec<f64> {
    vec![0.1, 0.2]
}

fn box_size() -> f64 {
    16.0
}

fn grid_step() -> f64 {
    1.0 / 64.0
}

fn near_radii() -> [f64; 2] {
    [0.04, 0.5]
}

fn far_radii() -> [f64; 2] {
    [1.0, 4.0]
}

fn check_radii() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}

/// Turns a `serde_path_to_error` path into a JSON pointer.
fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => {}
        }
    }
    out
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let p = pointer(e.path());
            let inner = e.into_inner();
            err(&p, inner.message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical TOML rendering; the basis of the config hash.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("configuration is serializable")
    }

    /// First 16 hex digits of the SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn dim(&self) -> usize {
        self.field.dim
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(err("/version", format!("unsupported version {}; expected {CONFIG_VERSION}", self.version)));
        }
        let d = self.field.dim;
        if d != 2 && d != 3 {
            return Err(err("/field/dim", "must be 2 or 3"));
        }
        if let Some(dom) = &self.domain {
            if dom.dim() != d {
                return Err(err("/domain/kind", format!("a {}-dimensional domain does not match field dimension {d}", dom.dim())));
            }
            let c = match dom {
                DomainConfig::Square { center, .. } | DomainConfig::Cube { center, .. } | DomainConfig::Circle { center, .. } => center,
                DomainConfig::Polygon { .. } => &Vec::new(),
            };
            if !c.is_empty() && c.len() != d {
                return Err(err("/domain/center", format!("expected {d} coordinates")));
            }
            let size = match dom {
                DomainConfig::Square { half_width, .. } | DomainConfig::Cube { half_width, .. } => ("/domain/half_width", *half_width),
                DomainConfig::Circle { radius, .. } => ("/domain/radius", *radius),
                DomainConfig::Polygon { .. } => ("", 1.0),
            };
            positive(size.0, size.1)?;
        }
        let c = &self.cell;
        opt_positive("/cell/tol", c.tol)?;
        opt_positive("/cell/a0_tol", c.a0_tol)?;
        opt_positive("/cell/max_corrector_norm", c.max_corrector_norm)?;
        if let Some(m) = &c.expect_a0 {
            if m.len() != d || m.iter().any(|r| r.len() != d) {
                return Err(err("/cell/expect_a0", format!("expected a {d}x{d} matrix")));
            }
        }
        if let Some(s) = &self.solve {
            if layerlab::bvp::Problem::parse(&s.problem).is_none() {
                return Err(err("/solve/problem", format!("unknown problem `{}`", s.problem)));
            }
            positive("/solve/eps", s.eps)?;
            positive("/solve/probe_fraction", s.probe_fraction)?;
            opt_positive("/solve/fem_h", s.fem_h)?;
            opt_positive("/solve/max_interior_error", s.max_interior_error)?;
            if let DataConfig::Corrector { weights } = &s.data {
                if weights.len() != d {
                    return Err(err("/solve/data/weights", format!("expected {d} weights")));
                }
            }
        }
        if let Some(s) = &self.sweep {
            if s.eps.is_empty() {
                return Err(err("/sweep/eps", "must not be empty"));
            }
            for (i, e) in s.eps.iter().enumerate() {
                positive(&format!("/sweep/eps/{i}"), *e)?;
            }
            for (i, p) in s.problems.iter().enumerate() {
                if layerlab::bvp::SweepProblem::parse(p).is_none() {
                    return Err(err(&format!("/sweep/problems/{i}"), format!("unknown problem `{p}`")));
                }
            }
            if s.weights.len() != d {
                return Err(err("/sweep/weights", format!("expected {d} weights")));
            }
            opt_positive("/sweep/max_spread", s.max_spread)?;
            opt_positive("/sweep/max_interior_error", s.max_interior_error)?;
        }
        if let Some(c) = &self.continuation {
            positive("/continuation/eps", c.eps)?;
            for (i, s) in c.s.iter().enumerate() {
                if !(0.0..=1.0).contains(s) {
                    return Err(err(&format!("/continuation/s/{i}"), "must lie in [0, 1]"));
                }
            }
            for (i, p) in c.pairs.iter().enumerate() {
                if p.iter().any(|s| !(0.0..=1.0).contains(s)) {
                    return Err(err(&format!("/continuation/pairs/{i}"), "values must lie in [0, 1]"));
                }
            }
            opt_positive("/continuation/max_condition_factor", c.max_condition_factor)?;
            opt_positive("/continuation/max_continuity_spread", c.max_continuity_spread)?;
        }
        if let Some(q) = &self.q_identities {
            if d != 2 {
                return Err(err("/q_identities", "graph patches are two-dimensional"));
            }
            positive("/q_identities/r", q.r)?;
            positive("/q_identities/rho", q.rho)?;
            for (i, e) in q.eps.iter().enumerate() {
                positive(&format!("/q_identities/eps/{i}"), *e)?;
            }
            if q.weights.len() != d {
                return Err(err("/q_identities/weights", format!("expected {d} weights")));
            }
            opt_positive("/q_identities/max_product_rule", q.max_product_rule)?;
            opt_positive("/q_identities/max_telescoping", q.max_telescoping)?;
            opt_positive("/q_identities/max_ibp_relative", q.max_ibp_relative)?;
        }
        if let Some(g) = &self.green {
            if g.pole.len() != d {
                return Err(err("/green/pole", format!("expected {d} coordinates")));
            }
            positive("/green/eps", g.eps)?;
            for (i, r) in g.flux_radii.iter().enumerate() {
                positive(&format!("/green/flux_radii/{i}"), *r)?;
            }
            opt_positive("/green/max_trace_ratio", g.max_trace_ratio)?;
            opt_positive("/green/flux_tol", g.flux_tol)?;
            opt_positive("/green/max_closed_form_error", g.max_closed_form_error)?;
        }
        if let Some(k) = &self.kernel_rates {
            positive("/kernel_rates/eps", k.eps)?;
            positive("/kernel_rates/h", k.h)?;
            positive("/kernel_rates/box_size", k.box_size)?;
            if k.pole.len() != 2 {
                return Err(err("/kernel_rates/pole", "expected 2 coordinates"));
            }
            for (name, r) in [("near_radii", k.near_radii), ("far_radii", k.far_radii)] {
                if !(r[0] > 0.0 && r[1] > r[0]) {
                    return Err(err(&format!("/kernel_rates/{name}"), "expected 0 < min < max"));
                }
            }
            if k.n_radii < 2 {
                return Err(err("/kernel_rates/n_radii", "need at least two radii for a slope"));
            }
            for (i, r) in k.check_radii.iter().enumerate() {
                positive(&format!("/kernel_rates/check_radii/{i}"), *r)?;
            }
            opt_positive("/kernel_rates/flux_tol", k.flux_tol)?;
            opt_positive("/kernel_rates/homogeneity_tol", k.homogeneity_tol)?;
        }
        Ok(())
    }
}

fn positive(pointer: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(err(pointer, format!("must be positive and finite, got {v}")))
    }
}

fn opt_positive(pointer: &str, v: Option<f64>) -> Result<(), ConfigError> {
    v.map_or(Ok(()), |v| positive(pointer, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
[field]
dim = 2
coefficients = { kind = "layered", axis = 0, mean = 2.0, amplitude = 1.0 }
"#;

    #[test]
    fn parses_minimal_document() {
        let c = Config::parse(MINIMAL).unwrap();
        assert_eq!(c.dim(), 2);
        assert_eq!(c.seed, 0);
        assert!(c.solve.is_none());
    }

    #[test]
    fn canonical_form_round_trips() {
        let c = Config::parse(MINIMAL).unwrap();
        let again = Config::parse(&c.canonical()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
        assert_eq!(c.hash().len(), 16);
    }

    #[test]
    fn hash_depends_on_seed() {
        let a = Config::parse(MINIMAL).unwrap();
        let mut b = a.clone();
        b.seed = 7;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_key_is_located() {
        let text = format!("{MINIMAL}\n[cell]\ncutof = 3\n");
        let e = Config::parse(&text).unwrap_err();
        assert_eq!(e.pointer, "/cell/cutof");
        assert!(e.message.contains("cutof"), "{}", e.message);
    }

    #[test]
    fn wrong_type_is_located() {
        let text = format!("{MINIMAL}\n[sweep]\neps = [1.0, \"half\"]\nweights = [1.0, 0.0]\n");
        let e = Config::parse(&text).unwrap_err();
        assert_eq!(e.pointer, "/sweep/eps/1");
    }

    #[test]
    fn version_and_tolerances_are_checked() {
        let e = Config::parse(&MINIMAL.replace("version = 1", "version = 2")).unwrap_err();
        assert_eq!(e.pointer, "/version");
        let text = format!("{MINIMAL}\n[cell]\na0_tol = -1e-5\n");
        assert_eq!(Config::parse(&text).unwrap_err().pointer, "/cell/a0_tol");
        let text = format!("{MINIMAL}\n[domain]\nkind = \"cube\"\npanels_per_side = 4\n");
        assert_eq!(Config::parse(&text).unwrap_err().pointer, "/domain/kind");
    }
}

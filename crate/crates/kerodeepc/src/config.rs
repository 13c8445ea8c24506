//! Experiment configuration: a line-oriented `section.key = value` format.
//!
//! Unknown keys are rejected and every parse error carries its line number.
//! Defaults encode the Van der Pol study (Tu = Tx = 20, N = 10, σu = 50,
//! σx = 3, piecewise reference); any key can be overridden. Lists are
//! comma-separated. Jitters accept a number or `auto`.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::DVector;
use sha2::{Digest, Sha256};

use crate::controller::{ControlConfig, ReferenceSignal};
use crate::datagen::{ExcitationConfig, KMeansConfig, KMeansInit};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::solver::NlpSettings;

#[derive(Clone, Debug)]
pub struct PlantSection {
    pub mu: f64,
    pub ts: f64,
}

#[derive(Clone, Debug)]
pub struct DataSection {
    pub tu: usize,
    pub tx: usize,
    pub n: usize,
    /// Length of the excitation rollout that seeds the initial-condition
    /// clustering.
    pub t_u_ini: usize,
    pub band: (f64, f64),
    pub amplitude: (f64, f64),
    pub num_sinusoids: usize,
    pub x_start: Vec<f64>,
    /// Per-coordinate state box used for clustering bounds and validation
    /// sampling.
    pub state_box: Vec<(f64, f64)>,
    pub ic_seed: u64,
    pub input_seed: u64,
    pub validation_seed: u64,
    pub stacked_seed: u64,
    pub validation_rollouts: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub kmeans_seed: u64,
    pub kmeans_init: KMeansInit,
    /// Enlarged-dataset sizes used by the benchmark's second row.
    pub tu_big: usize,
    pub tx_big: usize,
    pub t_u_ini_big: usize,
}

#[derive(Clone, Debug)]
pub struct KernelSection {
    pub u_family: String,
    pub u_sigma: f64,
    pub u_exponent: f64,
    pub x_family: String,
    pub x_sigma: f64,
    pub x_exponent: f64,
    pub stacked_state_sigma: f64,
    pub stacked_input_sigma: f64,
    /// `None` means "auto" (scale-aware default at fit time).
    pub jitter_u: Option<f64>,
    pub jitter_x: Option<f64>,
    pub jitter_z: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ControlSection {
    pub q: f64,
    pub r: f64,
    pub p: f64,
    pub lambda: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub y_min: Option<f64>,
    pub y_max: Option<f64>,
    pub ref_levels: Vec<f64>,
    pub ref_hold: usize,
    pub ref_u: f64,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct SolverSection {
    pub tol_eq: f64,
    pub tol_kkt: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub rho0: f64,
    pub strict: bool,
}

#[derive(Clone, Debug)]
pub struct OutputSection {
    pub dir: String,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub plant: PlantSection,
    pub data: DataSection,
    pub kernel: KernelSection,
    pub control: ControlSection,
    pub solver: SolverSection,
    pub output: OutputSection,
    /// SHA-256 of the raw config bytes; stamped into every output file.
    pub hash: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            plant: PlantSection { mu: 1.0, ts: 0.1 },
            data: DataSection {
                tu: 20,
                tx: 20,
                n: 10,
                t_u_ini: 100,
                band: (0.0, 1.0),
                amplitude: (-1.0, 1.0),
                num_sinusoids: 30,
                x_start: vec![0.1, 0.0],
                state_box: vec![(-3.0, 3.0), (-3.0, 3.0)],
                ic_seed: 1,
                input_seed: 2,
                validation_seed: 3,
                stacked_seed: 4,
                validation_rollouts: 50,
                kmeans_max_iter: 100,
                kmeans_tol: 0.0,
                kmeans_seed: 5,
                kmeans_init: KMeansInit::HaltonInBox,
                tu_big: 50,
                tx_big: 200,
                t_u_ini_big: 1000,
            },
            kernel: KernelSection {
                u_family: "gaussian".into(),
                u_sigma: 50.0,
                u_exponent: crate::kernels::DEFAULT_HARDY_EXPONENT,
                x_family: "gaussian".into(),
                x_sigma: 3.0,
                x_exponent: crate::kernels::DEFAULT_HARDY_EXPONENT,
                stacked_state_sigma: 3.0,
                stacked_input_sigma: 50.0,
                jitter_u: None,
                jitter_x: None,
                jitter_z: None,
            },
            control: ControlSection {
                q: 1.0,
                r: 0.01,
                p: 1.0,
                lambda: 1.0,
                u_min: -1.0,
                u_max: 1.0,
                y_min: None,
                y_max: None,
                ref_levels: vec![0.3, 0.6, 0.9, 0.6],
                ref_hold: 50,
                ref_u: 0.0,
                steps: 200,
            },
            solver: SolverSection {
                tol_eq: 1e-6,
                tol_kkt: 1e-6,
                max_outer: 200,
                max_inner: 500,
                rho0: 10.0,
                strict: false,
            },
            output: OutputSection { dir: "out".into() },
            hash: String::new(),
        }
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::ConfigParse { line, message: message.into() }
}

fn parse_f64(line: usize, key: &str, raw: &str) -> Result<f64> {
    match raw {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => raw
            .parse::<f64>()
            .map_err(|_| parse_err(line, format!("{key}: expected a number, got `{raw}`"))),
    }
}

fn parse_usize(line: usize, key: &str, raw: &str) -> Result<usize> {
    raw.parse::<usize>()
        .map_err(|_| parse_err(line, format!("{key}: expected a non-negative integer, got `{raw}`")))
}

fn parse_u64(line: usize, key: &str, raw: &str) -> Result<u64> {
    raw.parse::<u64>()
        .map_err(|_| parse_err(line, format!("{key}: expected a seed integer, got `{raw}`")))
}

fn parse_bool(line: usize, key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(parse_err(line, format!("{key}: expected true/false, got `{raw}`"))),
    }
}

fn parse_list(line: usize, key: &str, raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|part| parse_f64(line, key, part.trim()))
        .collect()
}

fn parse_pair(line: usize, key: &str, raw: &str) -> Result<(f64, f64)> {
    let items = parse_list(line, key, raw)?;
    if items.len() != 2 {
        return Err(parse_err(line, format!("{key}: expected two comma-separated numbers")));
    }
    Ok((items[0], items[1]))
}

fn parse_jitter(line: usize, key: &str, raw: &str) -> Result<Option<f64>> {
    if raw == "auto" {
        return Ok(None);
    }
    let v = parse_f64(line, key, raw)?;
    if v < 0.0 {
        return Err(parse_err(line, format!("{key}: jitter must be non-negative")));
    }
    Ok(Some(v))
}

fn parse_box(line: usize, key: &str, raw: &str) -> Result<Vec<(f64, f64)>> {
    let items = parse_list(line, key, raw)?;
    if items.is_empty() || items.len() % 2 != 0 {
        return Err(parse_err(
            line,
            format!("{key}: expected lo,hi pairs (an even number of values)"),
        ));
    }
    Ok(items.chunks(2).map(|c| (c[0], c[1])).collect())
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        Self::from_str_named(&raw)
    }

    /// Parses config text; the hash is the SHA-256 of exactly these bytes.
    pub fn from_str_named(raw: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: HashSet<String> = HashSet::new();
        for (idx, line_raw) in raw.lines().enumerate() {
            let line = idx + 1;
            let trimmed = line_raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key_part, value_part) = trimmed
                .split_once('=')
                .ok_or_else(|| parse_err(line, "expected `section.key = value`"))?;
            let key = key_part.trim();
            let value = value_part.trim();
            if value.is_empty() {
                return Err(parse_err(line, format!("{key}: empty value")));
            }
            if !seen.insert(key.to_string()) {
                return Err(parse_err(line, format!("duplicate key `{key}`")));
            }
            cfg.apply(line, key, value)?;
        }
        cfg.validate()?;
        let digest = Sha256::digest(raw.as_bytes());
        cfg.hash = digest.iter().map(|b| format!("{b:02x}")).collect();
        Ok(cfg)
    }

    fn apply(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        match key {
            "plant.mu" => self.plant.mu = parse_f64(line, key, value)?,
            "plant.ts" => self.plant.ts = parse_f64(line, key, value)?,

            "data.tu" => self.data.tu = parse_usize(line, key, value)?,
            "data.tx" => self.data.tx = parse_usize(line, key, value)?,
            "data.n" => self.data.n = parse_usize(line, key, value)?,
            "data.t_u_ini" => self.data.t_u_ini = parse_usize(line, key, value)?,
            "data.band" => self.data.band = parse_pair(line, key, value)?,
            "data.amplitude" => self.data.amplitude = parse_pair(line, key, value)?,
            "data.num_sinusoids" => self.data.num_sinusoids = parse_usize(line, key, value)?,
            "data.x_start" => self.data.x_start = parse_list(line, key, value)?,
            "data.state_box" => self.data.state_box = parse_box(line, key, value)?,
            "data.ic_seed" => self.data.ic_seed = parse_u64(line, key, value)?,
            "data.input_seed" => self.data.input_seed = parse_u64(line, key, value)?,
            "data.validation_seed" => self.data.validation_seed = parse_u64(line, key, value)?,
            "data.stacked_seed" => self.data.stacked_seed = parse_u64(line, key, value)?,
            "data.validation_rollouts" => {
                self.data.validation_rollouts = parse_usize(line, key, value)?
            }
            "data.kmeans_max_iter" => self.data.kmeans_max_iter = parse_usize(line, key, value)?,
            "data.kmeans_tol" => self.data.kmeans_tol = parse_f64(line, key, value)?,
            "data.kmeans_seed" => self.data.kmeans_seed = parse_u64(line, key, value)?,
            "data.kmeans_init" => {
                self.data.kmeans_init = match value {
                    "halton" => KMeansInit::HaltonInBox,
                    "uniform" => KMeansInit::UniformInBox,
                    other => {
                        return Err(parse_err(
                            line,
                            format!("data.kmeans_init: expected halton|uniform, got `{other}`"),
                        ))
                    }
                }
            }
            "data.tu_big" => self.data.tu_big = parse_usize(line, key, value)?,
            "data.tx_big" => self.data.tx_big = parse_usize(line, key, value)?,
            "data.t_u_ini_big" => self.data.t_u_ini_big = parse_usize(line, key, value)?,

            "kernel.u_family" => self.kernel.u_family = value.to_string(),
            "kernel.u_sigma" => self.kernel.u_sigma = parse_f64(line, key, value)?,
            "kernel.u_exponent" => self.kernel.u_exponent = parse_f64(line, key, value)?,
            "kernel.x_family" => self.kernel.x_family = value.to_string(),
            "kernel.x_sigma" => self.kernel.x_sigma = parse_f64(line, key, value)?,
            "kernel.x_exponent" => self.kernel.x_exponent = parse_f64(line, key, value)?,
            "kernel.stacked_state_sigma" => {
                self.kernel.stacked_state_sigma = parse_f64(line, key, value)?
            }
            "kernel.stacked_input_sigma" => {
                self.kernel.stacked_input_sigma = parse_f64(line, key, value)?
            }
            "kernel.jitter_u" => self.kernel.jitter_u = parse_jitter(line, key, value)?,
            "kernel.jitter_x" => self.kernel.jitter_x = parse_jitter(line, key, value)?,
            "kernel.jitter_z" => self.kernel.jitter_z = parse_jitter(line, key, value)?,

            "control.q" => self.control.q = parse_f64(line, key, value)?,
            "control.r" => self.control.r = parse_f64(line, key, value)?,
            "control.p" => self.control.p = parse_f64(line, key, value)?,
            "control.lambda" => self.control.lambda = parse_f64(line, key, value)?,
            "control.u_min" => self.control.u_min = parse_f64(line, key, value)?,
            "control.u_max" => self.control.u_max = parse_f64(line, key, value)?,
            "control.y_min" => self.control.y_min = Some(parse_f64(line, key, value)?),
            "control.y_max" => self.control.y_max = Some(parse_f64(line, key, value)?),
            "control.ref_levels" => self.control.ref_levels = parse_list(line, key, value)?,
            "control.ref_hold" => self.control.ref_hold = parse_usize(line, key, value)?,
            "control.ref_u" => self.control.ref_u = parse_f64(line, key, value)?,
            "control.steps" => self.control.steps = parse_usize(line, key, value)?,

            "solver.tol_eq" => self.solver.tol_eq = parse_f64(line, key, value)?,
            "solver.tol_kkt" => self.solver.tol_kkt = parse_f64(line, key, value)?,
            "solver.max_outer" => self.solver.max_outer = parse_usize(line, key, value)?,
            "solver.max_inner" => self.solver.max_inner = parse_usize(line, key, value)?,
            "solver.rho0" => self.solver.rho0 = parse_f64(line, key, value)?,
            "solver.strict" => self.solver.strict = parse_bool(line, key, value)?,

            "output.dir" => self.output.dir = value.to_string(),

            other => return Err(parse_err(line, format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        for (name, v) in [
            ("data.tu", d.tu),
            ("data.tx", d.tx),
            ("data.n", d.n),
            ("data.t_u_ini", d.t_u_ini),
            ("data.num_sinusoids", d.num_sinusoids),
            ("data.validation_rollouts", d.validation_rollouts),
            ("control.steps", self.control.steps),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if d.x_start.len() != 2 || d.state_box.len() != 2 {
            return Err(Error::Config(
                "data.x_start and data.state_box must describe the 2-dimensional \
                 oscillator state"
                    .into(),
            ));
        }
        if self.plant.ts <= 0.0 {
            return Err(Error::Config("plant.ts must be positive".into()));
        }
        if self.control.ref_levels.is_empty() {
            return Err(Error::Config("control.ref_levels must not be empty".into()));
        }
        for family in [&self.kernel.u_family, &self.kernel.x_family] {
            match family.as_str() {
                "gaussian" | "hardy" | "linear" => {}
                other => {
                    return Err(Error::Config(format!(
                        "kernel family must be gaussian|hardy|linear, got `{other}`"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Derives all per-purpose seeds from one base value (CLI `--seed`).
    pub fn override_seed(&mut self, seed: u64) {
        self.data.ic_seed = seed;
        self.data.input_seed = seed.wrapping_add(1);
        self.data.validation_seed = seed.wrapping_add(2);
        self.data.stacked_seed = seed.wrapping_add(3);
        self.data.kmeans_seed = seed.wrapping_add(4);
    }

    pub fn plant(&self) -> crate::plant::VanDerPol {
        crate::plant::VanDerPol { mu: self.plant.mu, ts: self.plant.ts }
    }

    fn kernel_from(family: &str, sigma: f64, exponent: f64) -> Result<KernelSpec> {
        match family {
            "gaussian" => KernelSpec::gaussian(sigma),
            "hardy" => KernelSpec::hardy(sigma, exponent),
            "linear" => Ok(KernelSpec::linear()),
            other => Err(Error::Config(format!("unknown kernel family `{other}`"))),
        }
    }

    pub fn u_kernel(&self) -> Result<KernelSpec> {
        Self::kernel_from(&self.kernel.u_family, self.kernel.u_sigma, self.kernel.u_exponent)
    }

    pub fn x_kernel(&self) -> Result<KernelSpec> {
        Self::kernel_from(&self.kernel.x_family, self.kernel.x_sigma, self.kernel.x_exponent)
    }

    /// Weighted Gaussian over `z = col(x, u_window)`: state coordinates get
    /// `stacked_state_sigma`, input coordinates `stacked_input_sigma`.
    pub fn stacked_kernel(&self, state_dim: usize, window_len: usize) -> Result<KernelSpec> {
        let mut sigmas = vec![self.kernel.stacked_state_sigma; state_dim];
        sigmas.extend(std::iter::repeat_n(self.kernel.stacked_input_sigma, window_len));
        KernelSpec::weighted_gaussian_from_sigmas(&sigmas)
    }

    /// Excitation for the initial-condition rollout (`t_u_ini` samples).
    pub fn ic_excitation(&self, big: bool) -> ExcitationConfig {
        ExcitationConfig {
            length: if big { self.data.t_u_ini_big } else { self.data.t_u_ini },
            band: self.data.band,
            amplitude_range: self.data.amplitude,
            num_sinusoids: self.data.num_sinusoids,
            seed: self.data.ic_seed,
        }
    }

    /// Excitation for the input-window signal (`Tu + N − 1` samples).
    pub fn window_excitation(&self, big: bool) -> ExcitationConfig {
        let tu = if big { self.data.tu_big } else { self.data.tu };
        ExcitationConfig {
            length: tu + self.data.n - 1,
            band: self.data.band,
            amplitude_range: self.data.amplitude,
            num_sinusoids: self.data.num_sinusoids,
            seed: self.data.input_seed,
        }
    }

    /// Excitation for the stacked rollout on the same budget `T = Tu·Tx`.
    pub fn stacked_excitation(&self, big: bool) -> ExcitationConfig {
        let (tu, tx) = if big {
            (self.data.tu_big, self.data.tx_big)
        } else {
            (self.data.tu, self.data.tx)
        };
        ExcitationConfig {
            length: tu * tx + self.data.n - 1,
            band: self.data.band,
            amplitude_range: self.data.amplitude,
            num_sinusoids: self.data.num_sinusoids,
            seed: self.data.stacked_seed,
        }
    }

    pub fn kmeans(&self, big: bool) -> KMeansConfig {
        KMeansConfig {
            k: if big { self.data.tx_big } else { self.data.tx },
            max_iter: self.data.kmeans_max_iter,
            tol: self.data.kmeans_tol,
            init: self.data.kmeans_init,
            seed: self.data.kmeans_seed,
            bounds: Some(self.data.state_box.clone()),
        }
    }

    pub fn x_start(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.data.x_start)
    }

    pub fn control_config(&self) -> ControlConfig {
        let c = &self.control;
        let levels = c
            .ref_levels
            .iter()
            .map(|v| DVector::from_element(1, *v))
            .collect();
        ControlConfig {
            n: self.data.n,
            q: nalgebra::DMatrix::from_element(1, 1, c.q),
            r: nalgebra::DMatrix::from_element(1, 1, c.r),
            p: nalgebra::DMatrix::from_element(1, 1, c.p),
            lambda: c.lambda,
            u_min: DVector::from_element(1, c.u_min),
            u_max: DVector::from_element(1, c.u_max),
            y_bounds: match (c.y_min, c.y_max) {
                (None, None) => None,
                (lo, hi) => Some((
                    DVector::from_element(1, lo.unwrap_or(f64::NEG_INFINITY)),
                    DVector::from_element(1, hi.unwrap_or(f64::INFINITY)),
                )),
            },
            ref_y: ReferenceSignal::Piecewise { levels, hold: c.ref_hold.max(1) },
            ref_u: DVector::from_element(1, c.ref_u),
        }
    }

    pub fn nlp_settings(&self) -> NlpSettings {
        NlpSettings {
            tol_eq: self.solver.tol_eq,
            tol_kkt: self.solver.tol_kkt,
            max_outer: self.solver.max_outer,
            max_inner: self.solver.max_inner,
            rho0: self.solver.rho0,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_empty_config() {
        let cfg = ExperimentConfig::from_str_named("").unwrap();
        assert_eq!(cfg.data.tu, 20);
        assert_eq!(cfg.data.tx, 20);
        assert_eq!(cfg.data.n, 10);
        assert_eq!(cfg.kernel.u_sigma, 50.0);
        assert_eq!(cfg.kernel.x_sigma, 3.0);
        assert_eq!(cfg.control.steps, 200);
        assert_eq!(cfg.hash.len(), 64);
    }

    #[test]
    fn parses_overrides_comments_and_lists() {
        let text = "\
# experiment
data.tu = 6
data.tx = 4

kernel.u_family = hardy
kernel.u_exponent = -0.5
kernel.jitter_u = 1e-7
control.ref_levels = 0.1, 0.2, 0.4
data.state_box = -2, 2, -1, 1
solver.strict = true
";
        let cfg = ExperimentConfig::from_str_named(text).unwrap();
        assert_eq!(cfg.data.tu, 6);
        assert_eq!(cfg.kernel.u_family, "hardy");
        assert_eq!(cfg.kernel.u_exponent, -0.5);
        assert_eq!(cfg.kernel.jitter_u, Some(1e-7));
        assert_eq!(cfg.control.ref_levels, vec![0.1, 0.2, 0.4]);
        assert_eq!(cfg.data.state_box, vec![(-2.0, 2.0), (-1.0, 1.0)]);
        assert!(cfg.solver.strict);
    }

    #[test]
    fn rejects_unknown_keys_with_line_numbers() {
        let text = "data.tu = 4\ndata.bogus = 1\n";
        match ExperimentConfig::from_str_named(text) {
            Err(Error::ConfigParse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("bogus"), "{message}");
            }
            other => panic!("expected parse error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn rejects_duplicates_and_malformed_lines() {
        let dup = "data.tu = 4\ndata.tu = 5\n";
        assert!(matches!(
            ExperimentConfig::from_str_named(dup),
            Err(Error::ConfigParse { line: 2, .. })
        ));
        let noeq = "data.tu 4\n";
        assert!(matches!(
            ExperimentConfig::from_str_named(noeq),
            Err(Error::ConfigParse { line: 1, .. })
        ));
        let badnum = "plant.mu = fast\n";
        assert!(matches!(
            ExperimentConfig::from_str_named(badnum),
            Err(Error::ConfigParse { line: 1, .. })
        ));
    }

    #[test]
    fn hash_tracks_raw_bytes() {
        let a = ExperimentConfig::from_str_named("data.tu = 6\n").unwrap();
        let b = ExperimentConfig::from_str_named("data.tu = 6 \n").unwrap();
        let c = ExperimentConfig::from_str_named("data.tu = 6\n").unwrap();
        assert_eq!(a.hash, c.hash);
        assert_ne!(a.hash, b.hash);
    }

    #[test]
    fn seed_override_rewrites_all_seeds() {
        let mut cfg = ExperimentConfig::default();
        cfg.override_seed(100);
        assert_eq!(cfg.data.ic_seed, 100);
        assert_eq!(cfg.data.input_seed, 101);
        assert_eq!(cfg.data.validation_seed, 102);
        assert_eq!(cfg.data.stacked_seed, 103);
        assert_eq!(cfg.data.kmeans_seed, 104);
    }

    #[test]
    fn jitter_auto_and_numbers() {
        let cfg = ExperimentConfig::from_str_named("kernel.jitter_u = auto\n").unwrap();
        assert_eq!(cfg.kernel.jitter_u, None);
        assert!(ExperimentConfig::from_str_named("kernel.jitter_u = -1\n").is_err());
    }

    #[test]
    fn semantic_validation_catches_zero_sizes_and_bad_families() {
        assert!(ExperimentConfig::from_str_named("data.tu = 0\n").is_err());
        assert!(ExperimentConfig::from_str_named("kernel.u_family = cubic\n").is_err());
    }
}

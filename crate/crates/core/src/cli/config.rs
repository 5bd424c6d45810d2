//! JSON experiment configuration.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimators::{OuterPenalty, RegularizerVariant, TrainConfig};
use crate::net::{Activation, Architecture, BallConstraint};
use crate::noise::{NoiseKind, NoiseSearch};
use crate::synth::{InputDist, NoiseModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Train,
    EffectiveNoise,
    VerifyOracle,
    RateSweep,
    LipschitzAudit,
    Generalization,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Train,
        Experiment::EffectiveNoise,
        Experiment::VerifyOracle,
        Experiment::RateSweep,
        Experiment::LipschitzAudit,
        Experiment::Generalization,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Train => "train",
            Experiment::EffectiveNoise => "effective-noise",
            Experiment::VerifyOracle => "verify-oracle",
            Experiment::RateSweep => "rate-sweep",
            Experiment::LipschitzAudit => "lipschitz-audit",
            Experiment::Generalization => "generalization",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fixed design keeps the inputs of replication 0 for every replication; random design
/// redraws them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    Fixed,
    Random,
}

/// Tuning parameter: a number, or `"oracle"` for `inflation · r̂*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TuningParameter {
    Value(f64),
    Oracle,
}

impl Serialize for TuningParameter {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TuningParameter::Value(v) => s.serialize_f64(*v),
            TuningParameter::Oracle => s.serialize_str("oracle"),
        }
    }
}

impl<'de> Deserialize<'de> for TuningParameter {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(TuningParameter::Value(v)),
            Raw::Str(s) if s == "oracle" => Ok(TuningParameter::Oracle),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "r must be a number or \"oracle\", got \"{s}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    OuterOnly,
    ProductAllLayers,
    SumAllLayers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    L1,
    L21,
}

/// Network shape. Counts are signed so that negative values reach validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub d: i64,
    pub widths: Vec<i64>,
    pub m: i64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            d: 6,
            widths: vec![5, 4],
            m: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSpec {
    pub sparsity: f64,
    pub outer_norm: f64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        TeacherSpec {
            sparsity: 0.5,
            outer_norm: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSpec {
    pub variant: VariantName,
    pub norm_kind: NormKind,
    pub r: TuningParameter,
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        EstimatorSpec {
            variant: VariantName::OuterOnly,
            norm_kind: NormKind::L1,
            r: TuningParameter::Oracle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub max_iters: i64,
    pub step_init: f64,
    pub backtrack_factor: f64,
    pub tol: f64,
    pub restarts: i64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSpec {
            max_iters: t.max_iters as i64,
            step_init: t.step_init,
            backtrack_factor: t.backtrack_factor,
            tol: t.tol,
            restarts: t.restarts as i64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSpec {
    pub n_starts: i64,
    pub ascent_iters: i64,
    /// Safety factor applied to the multistart lower bound.
    pub inflation: f64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            n_starts: 64,
            ascent_iters: 100,
            inflation: 1.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub n_grid: Vec<i64>,
    pub reps: i64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            n_grid: vec![64, 128, 256, 512, 1024, 2048, 4096],
            reps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditSpec {
    pub trials: i64,
}

impl Default for AuditSpec {
    fn default() -> Self {
        AuditSpec { trials: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneralizationSpec {
    pub b: f64,
    /// Fixed constant; calibrated on the pilot replications when absent.
    pub c_fit: Option<f64>,
    pub pilot_reps: i64,
    pub reps: i64,
    /// Fresh samples per training sample.
    pub fresh_multiplier: i64,
}

impl Default for GeneralizationSpec {
    fn default() -> Self {
        GeneralizationSpec {
            b: 0.5,
            c_fit: None,
            pilot_reps: 20,
            reps: 50,
            fresh_multiplier: 10,
        }
    }
}

/// A full experiment description. Every field except `experiment` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_design")]
    pub design: Design,
    #[serde(default)]
    pub arch: ArchSpec,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default = "default_inputs")]
    pub inputs: InputDist,
    #[serde(default = "default_n")]
    pub n: i64,
    #[serde(default = "default_replications")]
    pub replications: i64,
    #[serde(default)]
    pub teacher: TeacherSpec,
    #[serde(default)]
    pub estimator: EstimatorSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub audit: AuditSpec,
    #[serde(default)]
    pub generalization: GeneralizationSpec,
}

fn default_design() -> Design {
    Design::Fixed
}
fn default_activation() -> Activation {
    Activation::Relu
}
fn default_inputs() -> InputDist {
    InputDist::Gaussian
}
fn default_n() -> i64 {
    200
}
fn default_replications() -> i64 {
    1
}

/// Defaults, as listed by `--help`.
pub const DEFAULTS_HELP: &str = "\
Config defaults: seed 0, design fixed (generalization requires random), arch {d: 6, widths: [5, 4], m: 2},
activation relu, noise {kind: gaussian, sigma: 0.5}, inputs gaussian, n 200, replications 1,
teacher {sparsity: 0.5, outer_norm: 100}, estimator {variant: outer_only, norm_kind: l1, r: \"oracle\"},
train {max_iters: 2000, step_init: 1, backtrack_factor: 0.5, tol: 1e-10, restarts: 5},
oracle {n_starts: 64, ascent_iters: 100, inflation: 1.1},
sweep {n_grid: [64, 128, ..., 4096], reps: 10}, audit {trials: 10000},
generalization {b: 0.5, c_fit: calibrated, pilot_reps: 20, reps: 50, fresh_multiplier: 10}.
r = \"oracle\" resolves to inflation * (multistart estimate of the effective noise) per replication.";

fn count(name: &'static str, v: i64, min: i64) -> Result<usize> {
    if v < min {
        return Err(invalid(name, format!("must be at least {min}, got {v}")));
    }
    Ok(v as usize)
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(invalid(name, format!("must be positive, got {v}")));
    }
    Ok(())
}

/// Parses and validates a JSON config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
        Error::Config(format!("{e} (line {}, column {})", e.line(), e.column()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Builds the config for `experiment` from optional JSON text and an optional seed
/// override. A config that names a different experiment is rejected.
pub fn load_config(text: Option<&str>, experiment: Experiment, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match text {
        None => ExperimentConfig::defaults(experiment),
        Some(text) => {
            let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| {
                Error::Config(format!("{e} (line {}, column {})", e.line(), e.column()))
            })?;
            let obj = value
                .as_object_mut()
                .ok_or_else(|| Error::Config("top level must be a JSON object".into()))?;
            match obj.get("experiment").and_then(|v| v.as_str()) {
                Some(name) if name != experiment.name() => {
                    return Err(invalid(
                        "experiment",
                        format!("config is for {name} but the subcommand is {experiment}"),
                    ))
                }
                Some(_) => {}
                None => {
                    obj.insert("experiment".into(), experiment.name().into());
                }
            }
            if experiment == Experiment::Generalization && !obj.contains_key("design") {
                obj.insert("design".into(), "random".into());
            }
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// A config with every default for `experiment`.
    pub fn defaults(experiment: Experiment) -> Self {
        let design = if experiment == Experiment::Generalization {
            Design::Random
        } else {
            Design::Fixed
        };
        ExperimentConfig {
            experiment,
            seed: 0,
            design,
            arch: ArchSpec::default(),
            activation: default_activation(),
            noise: NoiseModel::default(),
            inputs: default_inputs(),
            n: default_n(),
            replications: default_replications(),
            teacher: TeacherSpec::default(),
            estimator: EstimatorSpec::default(),
            train: TrainSpec::default(),
            oracle: OracleSpec::default(),
            sweep: SweepSpec::default(),
            audit: AuditSpec::default(),
            generalization: GeneralizationSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture()?;
        self.activation.validate()?;
        self.noise.validate()?;
        count("n", self.n, 1)?;
        count("replications", self.replications, 0)?;
        if !(self.teacher.sparsity > 0.0 && self.teacher.sparsity <= 1.0) {
            return Err(invalid("teacher.sparsity", format!("must lie in (0, 1], got {}", self.teacher.sparsity)));
        }
        positive("teacher.outer_norm", self.teacher.outer_norm)?;
        if let TuningParameter::Value(r) = self.estimator.r {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(invalid("estimator.r", format!("must be nonnegative, got {r}")));
            }
        }
        self.train_config(0.0, 0)?.validate()?;
        self.search(0)?;
        positive("oracle.inflation", self.oracle.inflation)?;
        let grid = self.n_grid()?;
        if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("sweep.n_grid", "must be nonempty and strictly increasing"));
        }
        count("sweep.reps", self.sweep.reps, 1)?;
        count("audit.trials", self.audit.trials, 1)?;
        positive("generalization.b", self.generalization.b)?;
        if let Some(c) = self.generalization.c_fit {
            positive("generalization.c_fit", c)?;
        }
        count("generalization.pilot_reps", self.generalization.pilot_reps, 0)?;
        count("generalization.reps", self.generalization.reps, 1)?;
        count("generalization.fresh_multiplier", self.generalization.fresh_multiplier, 1)?;
        match self.experiment {
            Experiment::VerifyOracle | Experiment::Generalization
                if self.estimator.variant != VariantName::OuterOnly =>
            {
                return Err(invalid("estimator.variant", "the bound checks apply to outer_only estimators"));
            }
            Experiment::Generalization if self.design != Design::Random => {
                return Err(invalid("design", "generalization needs design \"random\""));
            }
            Experiment::Generalization
                if self.generalization.c_fit.is_none() && self.generalization.pilot_reps == 0 =>
            {
                return Err(invalid("generalization.pilot_reps", "calibrating c_fit needs at least one pilot replication"));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let d = count("arch.d", self.arch.d, 1)?;
        let m = count("arch.m", self.arch.m, 1)?;
        let widths = self
            .arch
            .widths
            .iter()
            .map(|&w| count("arch.widths", w, 1))
            .collect::<Result<Vec<_>>>()?;
        if widths.is_empty() {
            return Err(invalid("arch.widths", "needs at least one hidden layer"));
        }
        Architecture::new(d, widths, m)
    }

    pub fn n_samples(&self) -> usize {
        self.n as usize
    }

    pub fn replication_count(&self) -> usize {
        self.replications as usize
    }

    pub fn n_grid(&self) -> Result<Vec<usize>> {
        self.sweep.n_grid.iter().map(|&n| count("sweep.n_grid", n, 1)).collect()
    }

    pub fn penalty(&self) -> OuterPenalty {
        match self.estimator.norm_kind {
            NormKind::L1 => OuterPenalty::L1,
            NormKind::L21 => OuterPenalty::L21,
        }
    }

    pub fn variant(&self) -> RegularizerVariant {
        match self.estimator.variant {
            VariantName::OuterOnly => RegularizerVariant::OuterOnly(self.penalty()),
            VariantName::ProductAllLayers => RegularizerVariant::ProductAllLayers,
            VariantName::SumAllLayers => RegularizerVariant::SumAllLayers,
        }
    }

    /// Ball of the teacher's inner layers and of the effective-noise supremum.
    pub fn constraint(&self) -> BallConstraint {
        match self.estimator.norm_kind {
            NormKind::L1 => BallConstraint::L1Ball,
            NormKind::L21 => BallConstraint::L21Ball,
        }
    }

    pub fn kind(&self) -> NoiseKind {
        NoiseKind::from_constraint(self.constraint())
    }

    pub fn train_config(&self, r: f64, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            r,
            max_iters: count("train.max_iters", self.train.max_iters, 1)?,
            step_init: self.train.step_init,
            backtrack_factor: self.train.backtrack_factor,
            tol: self.train.tol,
            restarts: count("train.restarts", self.train.restarts, 1)?,
            seed,
        })
    }

    pub fn search(&self, seed: u64) -> Result<NoiseSearch> {
        Ok(NoiseSearch {
            n_starts: count("oracle.n_starts", self.oracle.n_starts, 1)?,
            ascent_iters: count("oracle.ascent_iters", self.oracle.ascent_iters, 1)?,
            seed,
        })
    }
}

use std::path::{Path, PathBuf};

use kme_decon::kernels::KernelSpec;
use kme_decon::lfi::{ExpGammaConfig, LengthscaleBox};
use kme_decon::optim::{Bounds, NelderMead};
use kme_decon::ttgp::{MarginalForm, TtgpHyper};
use kme_decon::ttr_data::BaselineHyper;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Ttr,
    Sparse,
    Lfi,
    EquivalenceSuite,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Ttr => "ttr",
            Experiment::Sparse => "sparse",
            Experiment::Lfi => "lfi",
            Experiment::EquivalenceSuite => "equivalence-suite",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ttr: Option<TtrConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparse: Option<SparseConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lfi: Option<LfiConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite: Option<SuiteConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub budget: usize,
    pub restarts: usize,
    pub step: f64,
}

impl OptimizerConfig {
    pub fn nelder_mead(&self) -> NelderMead {
        NelderMead {
            budget: self.budget,
            restarts: self.restarts,
            step: self.step,
            ..NelderMead::default()
        }
    }
}

/// Box on log hyperparameters, in the order of `TtgpHyper::log_params`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LogBox {
    pub fn bounds(&self) -> CliResult<Bounds> {
        Bounds::new(self.lower.clone(), self.upper.clone()).map_err(|e| CliError::Config(format!("log bounds: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub lower: f64,
    pub upper: f64,
    pub size: usize,
}

impl ProbeConfig {
    pub fn points(&self) -> Vec<f64> {
        if self.size == 1 {
            return vec![0.5 * (self.lower + self.upper)];
        }
        let step = (self.upper - self.lower) / (self.size - 1) as f64;
        (0..self.size).map(|i| self.lower + step * i as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub kernel: KernelSpec,
    pub noise_var: f64,
    pub bounds: LogBox,
    pub optimizer: OptimizerConfig,
}

impl BaselineConfig {
    pub fn hyper(&self) -> CliResult<BaselineHyper> {
        Ok(BaselineHyper {
            kernel: self.kernel.clone(),
            noise_var: self.noise_var,
            bounds: self.bounds.bounds()?,
            optimizer: self.optimizer.nelder_mead(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtrConfig {
    pub n: usize,
    pub m: usize,
    pub noise_sd: f64,
    pub probe: ProbeConfig,
    pub init: TtgpHyper,
    pub bounds: LogBox,
    pub marginal: MarginalForm,
    pub optimizer: OptimizerConfig,
    pub baseline: BaselineConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseConfig {
    pub m: usize,
    pub n_inducing: usize,
    /// Random initial inducing sets; the best learned set is kept.
    pub restarts: usize,
    pub point_bounds: (f64, f64),
    pub init: TtgpHyper,
    pub hyper_bounds: LogBox,
    pub optimizer: OptimizerConfig,
    pub probe: ProbeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorConfig {
    pub alpha0: f64,
    pub beta0: f64,
    pub theta_true: f64,
    pub n_obs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LfiLearnConfig {
    #[serde(rename = "box")]
    pub search: LengthscaleBox,
    pub optimizer: OptimizerConfig,
}

/// Evaluation grid for the CDF comparison: `size` points spanning
/// `sd_span` posterior standard deviations around the analytic mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdfGridConfig {
    pub size: usize,
    pub sd_span: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LfiConfig {
    pub simulator: SimulatorConfig,
    pub n_simulations: usize,
    pub m_prior: usize,
    pub grid_size: usize,
    pub grid_expand: f64,
    pub super_samples: usize,
    pub lambda: f64,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default)]
    pub theta_lengthscale: Option<f64>,
    #[serde(default)]
    pub herding_lengthscale: Option<f64>,
    #[serde(default)]
    pub learn: Option<LfiLearnConfig>,
    pub histogram_bins: usize,
    pub cdf_grid: CdfGridConfig,
    /// Monte-Carlo draws for the marginal-likelihood oracle; zero skips it.
    pub oracle_draws: usize,
}

impl LfiConfig {
    pub fn exp_gamma(&self) -> ExpGammaConfig {
        ExpGammaConfig {
            alpha0: self.simulator.alpha0,
            beta0: self.simulator.beta0,
            theta_true: self.simulator.theta_true,
            n_obs: self.simulator.n_obs,
            n_simulations: self.n_simulations,
            m_prior: self.m_prior,
            grid_size: self.grid_size,
            grid_expand: self.grid_expand,
            super_samples: self.super_samples,
            lambda: self.lambda,
            delta: self.delta,
            eps: self.eps,
            theta_lengthscale: self.theta_lengthscale,
            herding_lengthscale: self.herding_lengthscale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    /// Random instances per check.
    pub seeds: usize,
    /// Added to every DME coefficient before comparison; zero in normal runs.
    pub perturb: f64,
}

fn positive(name: &str, v: f64) -> CliResult<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

fn nonzero(name: &str, v: usize) -> CliResult<()> {
    if v == 0 {
        Err(CliError::Config(format!("{name} must be at least 1")))
    } else {
        Ok(())
    }
}

fn kernel(name: &str, k: &KernelSpec) -> CliResult<()> {
    k.validate().map_err(|e| CliError::Config(format!("{name}: {e}")))
}

fn hyper(name: &str, h: &TtgpHyper) -> CliResult<()> {
    kernel(&format!("{name}.kernels.k"), &h.kernels.k)?;
    kernel(&format!("{name}.kernels.l"), &h.kernels.l)?;
    h.validate().map_err(|e| CliError::Config(format!("{name}: {e}")))
}

fn log_box(name: &str, b: &LogBox, dim: usize) -> CliResult<()> {
    if b.lower.len() != dim || b.upper.len() != dim {
        return Err(CliError::Config(format!(
            "{name} needs {dim} entries per side, got {} and {}",
            b.lower.len(),
            b.upper.len()
        )));
    }
    b.bounds().map(|_| ())
}

fn optimizer(name: &str, o: &OptimizerConfig) -> CliResult<()> {
    positive(&format!("{name}.step"), o.step)
}

fn probe(name: &str, p: &ProbeConfig) -> CliResult<()> {
    nonzero(&format!("{name}.size"), p.size)?;
    if !(p.lower.is_finite() && p.upper.is_finite() && p.lower <= p.upper) {
        return Err(CliError::Config(format!("{name} range [{}, {}] is invalid", p.lower, p.upper)));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks that the section for `experiment` exists and that every kernel,
    /// size and box in it is usable.
    pub fn validate(&self) -> CliResult<()> {
        let missing = || CliError::Config(format!("experiment `{}` needs its config section", self.experiment.name()));
        match self.experiment {
            Experiment::Ttr => {
                let c = self.ttr.as_ref().ok_or_else(missing)?;
                nonzero("ttr.n", c.n)?;
                nonzero("ttr.m", c.m)?;
                if !(c.noise_sd.is_finite() && c.noise_sd >= 0.0) {
                    return Err(CliError::Config(format!("ttr.noise_sd must be non-negative, got {}", c.noise_sd)));
                }
                probe("ttr.probe", &c.probe)?;
                hyper("ttr.init", &c.init)?;
                log_box("ttr.bounds", &c.bounds, c.init.n_params())?;
                optimizer("ttr.optimizer", &c.optimizer)?;
                kernel("ttr.baseline.kernel", &c.baseline.kernel)?;
                positive("ttr.baseline.noise_var", c.baseline.noise_var)?;
                log_box("ttr.baseline.bounds", &c.baseline.bounds, c.baseline.kernel.n_params() + 1)?;
                optimizer("ttr.baseline.optimizer", &c.baseline.optimizer)
            }
            Experiment::Sparse => {
                let c = self.sparse.as_ref().ok_or_else(missing)?;
                nonzero("sparse.m", c.m)?;
                nonzero("sparse.n_inducing", c.n_inducing)?;
                nonzero("sparse.restarts", c.restarts)?;
                let (lo, hi) = c.point_bounds;
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(CliError::Config(format!("sparse.point_bounds [{lo}, {hi}] is invalid")));
                }
                hyper("sparse.init", &c.init)?;
                if !c.init.map_g {
                    return Err(CliError::Config("sparse.init.map_g must be true".into()));
                }
                log_box("sparse.hyper_bounds", &c.hyper_bounds, c.init.n_params())?;
                optimizer("sparse.optimizer", &c.optimizer)?;
                probe("sparse.probe", &c.probe)
            }
            Experiment::Lfi => {
                let c = self.lfi.as_ref().ok_or_else(missing)?;
                positive("lfi.simulator.alpha0", c.simulator.alpha0)?;
                positive("lfi.simulator.beta0", c.simulator.beta0)?;
                positive("lfi.simulator.theta_true", c.simulator.theta_true)?;
                nonzero("lfi.simulator.n_obs", c.simulator.n_obs)?;
                nonzero("lfi.n_simulations", c.n_simulations)?;
                nonzero("lfi.m_prior", c.m_prior)?;
                nonzero("lfi.grid_size", c.grid_size)?;
                nonzero("lfi.super_samples", c.super_samples)?;
                nonzero("lfi.histogram_bins", c.histogram_bins)?;
                nonzero("lfi.cdf_grid.size", c.cdf_grid.size)?;
                positive("lfi.cdf_grid.sd_span", c.cdf_grid.sd_span)?;
                positive("lfi.lambda", c.lambda)?;
                if !(c.grid_expand.is_finite() && c.grid_expand >= 0.0) {
                    return Err(CliError::Config(format!("lfi.grid_expand must be non-negative, got {}", c.grid_expand)));
                }
                for (name, v) in [
                    ("lfi.delta", c.delta),
                    ("lfi.eps", c.eps),
                    ("lfi.theta_lengthscale", c.theta_lengthscale),
                    ("lfi.herding_lengthscale", c.herding_lengthscale),
                ] {
                    if let Some(v) = v {
                        positive(name, v)?;
                    }
                }
                if let Some(learn) = &c.learn {
                    let b = &learn.search;
                    for (name, (lo, hi)) in [("lfi.learn.box.eps", b.eps), ("lfi.learn.box.theta", b.theta)]
                        .into_iter()
                        .chain(b.lambda.map(|r| ("lfi.learn.box.lambda", r)))
                    {
                        positive(name, lo)?;
                        positive(name, hi)?;
                        if lo > hi {
                            return Err(CliError::Config(format!("{name} lower {lo} exceeds upper {hi}")));
                        }
                    }
                    optimizer("lfi.learn.optimizer", &learn.optimizer)?;
                }
                Ok(())
            }
            Experiment::EquivalenceSuite => {
                let c = self.suite.as_ref().ok_or_else(missing)?;
                nonzero("suite.seeds", c.seeds)?;
                if !c.perturb.is_finite() {
                    return Err(CliError::Config("suite.perturb must be finite".into()));
                }
                Ok(())
            }
        }
    }
}

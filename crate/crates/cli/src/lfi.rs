use kme_decon::lfi::{
    approx_marginal_likelihood, cdf_mae, exp_gamma_instance, exp_gamma_marginal_oracle, kernel_herding, learn_lfi_hyper,
    lfi_embedding, ExpGammaInstance, GammaPosterior, LfiProblem,
};
use kme_decon::optim::Evaluation;
use serde::Serialize;

use crate::config::{CdfGridConfig, LfiConfig, RunConfig};
use crate::error::{CliResult, Stage};
use crate::output::{RunLog, Table};
use crate::ttr::trace_table;

#[derive(Clone, Debug, Serialize)]
pub struct LfiHypers {
    pub eps: f64,
    pub theta_lengthscale: f64,
    pub herding_lengthscale: f64,
    pub lambda: f64,
    pub delta: f64,
}

impl LfiHypers {
    fn of(p: &LfiProblem) -> Self {
        let iso = |k: &kme_decon::kernels::KernelSpec| k.isotropic_lengthscale().unwrap_or(f64::NAN);
        Self {
            eps: iso(&p.kernels.k),
            theta_lengthscale: iso(&p.kernels.l),
            herding_lengthscale: iso(p.herding_kernel()),
            lambda: p.lambda.value(),
            delta: p.delta.value(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GridChoice {
    pub size: usize,
    pub lower: f64,
    pub upper: f64,
    pub expand: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Oracle {
    pub draws: usize,
    pub value: f64,
    pub standard_error: f64,
    pub abs_gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LfiMetrics {
    pub seed: u64,
    pub observed: f64,
    pub truth: GammaPosterior,
    pub posterior_mean: f64,
    pub truth_mean: f64,
    pub posterior_mean_rel_error: f64,
    pub cdf_mae: f64,
    /// Marginal likelihood estimate before and after learning.
    pub q_bar_initial: f64,
    pub q_bar: f64,
    pub learned: bool,
    pub hypers_initial: LfiHypers,
    pub hypers: LfiHypers,
    pub grid: GridChoice,
    pub oracle: Option<Oracle>,
}

pub struct LfiOutcome {
    pub instance: ExpGammaInstance,
    pub super_samples: Vec<f64>,
    pub trace: Vec<Evaluation>,
    pub metrics: LfiMetrics,
}

pub fn cdf_grid(truth: &GammaPosterior, cfg: &CdfGridConfig) -> Vec<f64> {
    let (mean, sd) = (truth.mean(), truth.sd());
    let lo = (mean - cfg.sd_span * sd).max(0.0);
    let hi = mean + cfg.sd_span * sd;
    if cfg.size == 1 {
        return vec![mean];
    }
    (0..cfg.size).map(|i| lo + (hi - lo) * i as f64 / (cfg.size - 1) as f64).collect()
}

pub fn herd(problem: &LfiProblem, samples: usize) -> CliResult<Vec<f64>> {
    let mu = lfi_embedding(problem).stage("lfi embedding")?;
    let h = kernel_herding(&mu, &problem.grid, problem.herding_kernel(), samples).stage("kernel herding")?;
    Ok(h.super_samples.iter().copied().collect())
}

pub fn run_lfi_experiment(cfg: &LfiConfig, seed: u64) -> CliResult<LfiOutcome> {
    let eg = cfg.exp_gamma();
    let instance = exp_gamma_instance(&eg, seed).stage("exp-gamma instance")?;
    let initial = &instance.problem;
    let (problem, q_initial, q, trace) = match &cfg.learn {
        Some(learn) => {
            let bounds = learn.search.bounds(initial).stage("lfi search box")?;
            let fit = learn_lfi_hyper(initial, learn.search.learns_lambda(), &bounds, &learn.optimizer.nelder_mead())
                .stage("lfi hyper learning")?;
            let q0 = fit.initial_q.unwrap_or(f64::NAN);
            let q = fit.q.unwrap_or(f64::NAN);
            (fit.problem, q0, q, fit.trace)
        }
        None => {
            let q = approx_marginal_likelihood(initial).stage("lfi marginal likelihood")?;
            (initial.clone(), q, q, Vec::new())
        }
    };

    let super_samples = herd(&problem, cfg.super_samples)?;
    let truth = instance.truth;
    let mean = super_samples.iter().sum::<f64>() / super_samples.len() as f64;
    let mae = cdf_mae(&super_samples, &truth, &cdf_grid(&truth, &cfg.cdf_grid));
    let observed = problem.observed[0];
    let oracle = if cfg.oracle_draws > 0 {
        let eps = problem.kernels.k.isotropic_lengthscale().unwrap_or(f64::NAN);
        let (value, se) = exp_gamma_marginal_oracle(&eg, observed, eps, cfg.oracle_draws, seed).stage("marginal oracle")?;
        Some(Oracle {
            draws: cfg.oracle_draws,
            value,
            standard_error: se,
            abs_gap: (q - value).abs(),
        })
    } else {
        None
    };
    let metrics = LfiMetrics {
        seed,
        observed,
        truth,
        posterior_mean: mean,
        truth_mean: truth.mean(),
        posterior_mean_rel_error: (mean - truth.mean()).abs() / truth.mean(),
        cdf_mae: mae,
        q_bar_initial: q_initial,
        q_bar: q,
        learned: cfg.learn.is_some(),
        hypers_initial: LfiHypers::of(initial),
        hypers: LfiHypers::of(&problem),
        grid: GridChoice {
            size: problem.grid.nrows(),
            lower: problem.grid.min(),
            upper: problem.grid.max(),
            expand: cfg.grid_expand,
        },
        oracle,
    };
    Ok(LfiOutcome {
        instance,
        super_samples,
        trace,
        metrics,
    })
}

fn histogram(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Table {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &s in samples {
        let b = (((s - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let total = samples.len() as f64;
    let mut t = Table::new(&["bin_lower", "bin_upper", "count", "density"]);
    for (i, c) in counts.into_iter().enumerate() {
        let a = lo + width * i as f64;
        t.push(vec![
            a.to_string(),
            (a + width).to_string(),
            c.to_string(),
            (c as f64 / (total * width)).to_string(),
        ]);
    }
    t
}

pub fn run_lfi(config: &RunConfig) -> CliResult<()> {
    let cfg = config.lfi.as_ref().expect("validated config has an lfi section");
    let mut log = RunLog::new(&config.out_dir)?;
    let out = log.timed("experiment", || run_lfi_experiment(cfg, config.seed))?;

    let mut samples = Table::new(&["sample_index", "theta"]);
    for (i, s) in out.super_samples.iter().enumerate() {
        samples.push(vec![i.to_string(), s.to_string()]);
    }
    log.table("super_samples.csv", &samples)?;
    let g = &out.metrics.grid;
    log.table("histogram.csv", &histogram(&out.super_samples, g.lower, g.upper, cfg.histogram_bins))?;
    log.table("q_trace.csv", &trace_table(&out.trace, "neg_log_q"))?;

    let p = &out.instance.problem;
    let mut sims = Table::new(&["index", "theta", "summary", "seed"]);
    for i in 0..p.n() {
        sims.push(vec![
            i.to_string(),
            p.theta[(i, 0)].to_string(),
            p.summaries[(i, 0)].to_string(),
            config.seed.to_string(),
        ]);
    }
    log.table("simulations.csv", &sims)?;
    log.json("metrics.json", &out.metrics)?;
    log.finish(config)
}

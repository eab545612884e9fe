use kme_decon::kernels::points_1d;
use kme_decon::optim::Evaluation;
use kme_decon::ttgp::{optimize_hyper, posterior_predict, TtgpHyper};
use kme_decon::ttr_data::{cascade_baseline, generate_ttr, impute_baseline, ttr_f};
use nalgebra::DVector;
use serde::Serialize;

use crate::config::{RunConfig, TtrConfig};
use crate::error::{CliResult, Stage};
use crate::output::{RunLog, Table};

#[derive(Clone, Debug, Serialize)]
pub struct TtrMetrics {
    pub seed: u64,
    pub rmse_dme_init: f64,
    pub rmse_dme_learned: f64,
    pub rmse_cascade: f64,
    pub rmse_impute: f64,
    pub nlml_init: f64,
    pub nlml_learned: f64,
    pub learned: TtgpHyper,
    pub band_sd_multiple: f64,
}

pub struct TtrOutcome {
    pub probe: Vec<f64>,
    pub f_true: Vec<f64>,
    pub init_mean: DVector<f64>,
    pub init_sd: DVector<f64>,
    pub learned_mean: DVector<f64>,
    pub learned_sd: DVector<f64>,
    pub cascade: DVector<f64>,
    pub impute: DVector<f64>,
    pub trace: Vec<Evaluation>,
    pub metrics: TtrMetrics,
}

fn rmse(pred: &DVector<f64>, truth: &[f64]) -> f64 {
    let sq: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    (sq / truth.len() as f64).sqrt()
}

pub fn run_ttr_experiment(cfg: &TtrConfig, seed: u64) -> CliResult<TtrOutcome> {
    let data = generate_ttr(cfg.n, cfg.m, seed, cfg.noise_sd).stage("ttr data")?;
    let probe = cfg.probe.points();
    let q = points_1d(&probe);
    let f_true: Vec<f64> = probe.iter().map(|x| ttr_f(*x)).collect();

    let fit = optimize_hyper(&data, &cfg.init, &cfg.bounds.bounds()?, &cfg.optimizer.nelder_mead(), cfg.marginal)
        .stage("ttgp hyper learning")?;
    let init = posterior_predict(&data, &cfg.init, &q).stage("ttgp initial prediction")?;
    let learned = posterior_predict(&data, &fit.hyper, &q).stage("ttgp learned prediction")?;

    let baseline = cfg.baseline.hyper()?;
    let cascade = cascade_baseline(&data, &baseline)
        .and_then(|c| c.predict(&q))
        .stage("cascade baseline")?;
    let impute = impute_baseline(&data, &baseline)
        .and_then(|g| g.predict_mean(&q))
        .stage("impute baseline")?;

    let metrics = TtrMetrics {
        seed,
        rmse_dme_init: rmse(&init.mean, &f_true),
        rmse_dme_learned: rmse(&learned.mean, &f_true),
        rmse_cascade: rmse(&cascade, &f_true),
        rmse_impute: rmse(&impute, &f_true),
        nlml_init: fit.initial_nlml.unwrap_or(f64::NAN),
        nlml_learned: fit.nlml.unwrap_or(f64::NAN),
        learned: fit.hyper.clone(),
        band_sd_multiple: 2.0,
    };
    Ok(TtrOutcome {
        probe,
        f_true,
        init_sd: init.sd(),
        init_mean: init.mean,
        learned_sd: learned.sd(),
        learned_mean: learned.mean,
        cascade,
        impute,
        trace: fit.trace,
        metrics,
    })
}

pub fn run_ttr(config: &RunConfig) -> CliResult<()> {
    let cfg = config.ttr.as_ref().expect("validated config has a ttr section");
    let mut log = RunLog::new(&config.out_dir)?;
    let out = log.timed("experiment", || run_ttr_experiment(cfg, config.seed))?;

    let mut probe = Table::new(&[
        "x",
        "f_true",
        "dme_init_mean",
        "dme_init_sd",
        "dme_learned_mean",
        "dme_learned_sd",
        "cascade",
        "impute",
    ]);
    for i in 0..out.probe.len() {
        probe.push_numbers(&[
            out.probe[i],
            out.f_true[i],
            out.init_mean[i],
            out.init_sd[i],
            out.learned_mean[i],
            out.learned_sd[i],
            out.cascade[i],
            out.impute[i],
        ]);
    }
    log.table("probe.csv", &probe)?;
    log.table("trace.csv", &trace_table(&out.trace, "nlml"))?;
    log.json("metrics.json", &out.metrics)?;
    log.finish(config)
}

/// One row per objective evaluation: index, log parameters, value.
pub fn trace_table(trace: &[Evaluation], value_name: &str) -> Table {
    let dim = trace.first().map_or(0, |e| e.params.len());
    let mut header = vec!["eval_index".to_string()];
    header.extend((0..dim).map(|i| format!("param_{i}")));
    header.push(value_name.to_string());
    let mut t = Table { header, rows: Vec::new() };
    for e in trace {
        let mut row = vec![e.index.to_string()];
        row.extend(e.params.iter().map(f64::to_string));
        row.push(e.value.to_string());
        t.push(row);
    }
    t
}

mod common;

use common::*;
use kme_decon::kernels::{points_1d, KernelPair, KernelSpec};
use kme_decon::ttgp::{inducing_dataset, log_marginal_alternative, TtgpHyper};
use kme_decon::ttr_data::*;
use nalgebra::DVector;
use rand::Rng;
use rand_distr::Normal;

#[test]
fn task_targets_share_the_transformation_conditional() {
    let draws = 100_000;
    let noise = Normal::new(0.0, 0.25).unwrap();
    for (i, y) in [-5.0, -2.2, 0.0, 1.3, 4.7].into_iter().enumerate() {
        let mut r = rng(i as u64);
        let z: Vec<f64> = (0..draws).map(|_| sample_task_target(y, &noise, &mut r)).collect();
        let fx: Vec<f64> = (0..draws).map(|_| ttr_f(sample_transformation(y, &noise, &mut r))).collect();
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (m, var / v.len() as f64)
        };
        let ((mz, vz), (mf, vf)) = (stats(&z), stats(&fx));
        let se = (vz + vf).sqrt();
        assert!((mz - mf).abs() <= 3.0 * se, "y={y}: {mz} vs {mf} (se {se})");
    }
}

#[test]
fn inputs_stay_in_uniform_support() {
    let d = generate_ttr(500, 500, 9, 0.25).unwrap();
    for v in d.y.iter().chain(d.y_tilde.iter()) {
        assert!((Y_RANGE.0..=Y_RANGE.1).contains(v));
    }
}

#[test]
fn cascade_recovers_monotone_noiseless_link() {
    let mut r = rng(3);
    let (n, m) = (80, 80);
    let link = |y: f64| 0.5 * y;
    let y: Vec<f64> = (0..n).map(|_| r.random_range(-4.0..4.0)).collect();
    let x: Vec<f64> = y.iter().map(|v| link(*v)).collect();
    let yt: Vec<f64> = (0..m).map(|_| r.random_range(-4.0..4.0)).collect();
    let zt = DVector::from_iterator(m, yt.iter().map(|v| ttr_f(link(*v))));
    let data = TaskTransformedDataset::new(points_1d(&x), points_1d(&y), points_1d(&yt), zt).unwrap();
    let cascade = cascade_baseline(&data, &BaselineHyper::default()).unwrap();
    let probe = grid(-1.5, 1.5, 200);
    let pred = cascade.predict(&probe).unwrap();
    let truth = DVector::from_iterator(200, probe.iter().map(|v| ttr_f(*v)));
    let rmse = ((pred - truth).norm_squared() / 200.0).sqrt();
    assert!(rmse <= 0.05, "rmse {rmse}");
}

#[test]
fn true_anchors_beat_random_inducing_sets() {
    let toy = ToyProcess::default();
    let (y, z) = toy.sample(100, 0).unwrap();
    let hyper = TtgpHyper::new(KernelPair { k: toy.kernel.clone(), l: toy.kernel.clone() }, toy.noise_sd.powi(2));
    let nlml = |u: &[f64]| -log_marginal_alternative(&inducing_dataset(&points_1d(u), &y, &z).unwrap(), &hyper).unwrap();
    let at_anchors = nlml(&toy.anchors);
    let mut r = rng(77);
    for trial in 0..20 {
        let u: Vec<f64> = (0..5).map(|_| r.random_range(TOY_RANGE.0..TOY_RANGE.1)).collect();
        let other = nlml(&u);
        assert!(at_anchors <= other, "trial {trial}: anchors {at_anchors} vs {other}");
    }
}

#[test]
fn toy_process_regenerates_and_uses_its_kernel() {
    let (a, za) = toy_gp_process(100, 0).unwrap();
    let (b, zb) = toy_gp_process(100, 0).unwrap();
    assert_eq!(a, b);
    assert_eq!(za, zb);
    let toy = ToyProcess::new(vec![0.0], vec![2.0], KernelSpec::gaussian(1.0, 1.0), 0.0).unwrap();
    let at = toy.mean(&points_1d(&[0.0, 1.0])).unwrap();
    assert!((at[0] - 2.0).abs() < 1e-14);
    assert!((at[1] - 2.0 * (-0.5f64).exp()).abs() < 1e-14);
}

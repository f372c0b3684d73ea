//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use chrono::{TimeZone, Utc};
use leakid::demand_net::{self, DemandNet, Mode, NetConfig, RegressionTraining, SampleBatch};
use leakid::ingest::{DemandChannel, PressurePanel, TimeAxis};
use leakid::regression::{CoefficientSet, DemandKind, DemandSet};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense Gaussian elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// OLS of the pairwise balance k0_i + k1_i P_i + Σ kd_di Q_d² = (same for j)
/// over unordered pairs, with k0, k1 and every kd pinned to 0, 1, 0 at the
/// gauge, solved through the normal equations. Returns (k0, k1, kd).
pub fn ols_normal_equations(
    pressures: &[Vec<f64>],
    q_sq: &[Vec<f64>],
    gauge: usize,
) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let n = pressures.len();
    let d = q_sq.len();
    let len = pressures[0].len();
    let free: Vec<usize> = (0..n).filter(|&s| s != gauge).collect();
    // column order: k0 free, k1 free, kd[c] free
    let m = free.len() * (2 + d);
    let col = |kind: usize, s: usize| -> Option<usize> {
        free.iter().position(|&f| f == s).map(|p| kind * free.len() + p)
    };
    let mut ata = vec![vec![0.0; m]; m];
    let mut atb = vec![0.0; m];
    for i in 0..n {
        for j in i + 1..n {
            for t in 0..len {
                let mut row = vec![0.0; m];
                let mut rhs = 0.0;
                for (s, sign) in [(i, 1.0), (j, -1.0)] {
                    if let Some(c) = col(0, s) {
                        row[c] += sign;
                    }
                    match col(1, s) {
                        Some(c) => row[c] += sign * pressures[s][t],
                        None => rhs -= sign * pressures[s][t],
                    }
                    for (k, q) in q_sq.iter().enumerate() {
                        if let Some(c) = col(2 + k, s) {
                            row[c] += sign * q[t];
                        }
                    }
                }
                for a in 0..m {
                    atb[a] += row[a] * rhs;
                    for b in 0..m {
                        ata[a][b] += row[a] * row[b];
                    }
                }
            }
        }
    }
    let x = solve_dense(ata, atb);
    let mut k0 = vec![0.0; n];
    let mut k1 = vec![0.0; n];
    k1[gauge] = 1.0;
    let mut kd = vec![vec![0.0; n]; d];
    for &s in &free {
        k0[s] = x[col(0, s).unwrap()];
        k1[s] = x[col(1, s).unwrap()];
        for (k, row) in kd.iter_mut().enumerate() {
            row[s] = x[col(2 + k, s).unwrap()];
        }
    }
    (k0, k1, kd)
}

/// Plain two-sided CUSUM on standardized input; returns (s⁺, s⁻, first t with
/// max(s⁺, s⁻) > ε).
pub fn cusum_oracle(x: &[f64], mean: f64, std: f64, slack: f64, threshold: f64) -> (Vec<f64>, Vec<f64>, Option<usize>) {
    let mut hi = Vec::with_capacity(x.len());
    let mut lo = Vec::with_capacity(x.len());
    let mut alarm = None;
    let mut a = 0.0f64;
    let mut b = 0.0f64;
    for t in 0..x.len() {
        let z = (x[t] - mean) / std;
        a = f64::max(0.0, a + z - slack);
        b = f64::max(0.0, b - z - slack);
        hi.push(a);
        lo.push(b);
        if alarm.is_none() && (a > threshold || b > threshold) {
            alarm = Some(t);
        }
    }
    (hi, lo, alarm)
}

/// O(n²) non-domination check: lower ttd and higher f1 are better.
pub fn brute_pareto(points: &[(f64, f64)]) -> Vec<bool> {
    points
        .iter()
        .map(|&(t, f)| {
            !points
                .iter()
                .any(|&(t2, f2)| t2 <= t && f2 >= f && (t2 < t || f2 > f))
        })
        .collect()
}

/// Outcome of a central finite-difference sweep over every trainable parameter.
#[derive(Debug, Default, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel: f64,
}

/// A random network of at most 50 parameters with one latent channel and one
/// measured channel, batch-norm on, evaluated in training mode.
pub struct FdProblem {
    pub net: DemandNet,
    pub coeffs: CoefficientSet,
    pub batch: SampleBatch,
}

pub fn fd_problem(seed: u64) -> FdProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 3;
    let cfg = NetConfig {
        hidden_layers: 1,
        hidden_width: 4,
        include_known_demands: true,
        ..NetConfig::default()
    };
    let input = n + 1;
    let mut net = DemandNet::new(&cfg, Array1::zeros(input), Array2::eye(input), 1, &mut rng).unwrap();
    // move BN scale/shift off their defaults and lift the output bias so the
    // clamp is mostly active
    let mut p = net.flat_params();
    for v in p.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let nb = p.len();
    p[nb - 1] = 1.0 + rng.random_range(0.0..0.5);
    net.set_flat_params(&p);
    assert!(net.n_params() + n <= 50, "{} parameters", net.n_params());

    let b = 6;
    let pressures = Array2::from_shape_fn((b, n), |_| rng.random_range(-3.0..3.0));
    let known = Array2::from_shape_fn((b, 1), |_| rng.random_range(0.0..4.0));
    let coeffs = CoefficientSet {
        sensor_ids: (0..n).map(|i| format!("s{i}")).collect(),
        gauge: 0,
        k0: vec![0.0, rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
        k1: vec![1.0, rng.random_range(0.8..1.2), rng.random_range(0.8..1.2)],
        demand_ids: vec!["m".into(), "u".into()],
        demand_kinds: vec![DemandKind::Known, DemandKind::Unknown],
        kd: vec![
            vec![0.0, rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)],
            vec![0.0, rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
        ],
        training_residual_rms: None,
    };
    FdProblem {
        net,
        coeffs,
        batch: SampleBatch { pressures, known },
    }
}

fn loss_at(prob: &FdProblem, which: RegressionTraining, params: &[f64]) -> (f64, Vec<bool>) {
    let mut net = prob.net.clone();
    let mut coeffs = prob.coeffs.clone();
    let n_net = net.n_params();
    net.set_flat_params(&params[..n_net]);
    demand_net::set_flat_regression(&mut coeffs, which, &params[n_net..]);
    let loss = demand_net::pinn_loss(&net, &coeffs, &prob.batch, Mode::Train).unwrap();
    let x = ndarray::concatenate(ndarray::Axis(1), &[prob.batch.pressures.view(), prob.batch.known.view()]).unwrap();
    (loss, net.activation_pattern(&x, Mode::Train).unwrap())
}

/// Compare analytic gradients with central differences (step `h`); components
/// whose activation pattern differs between θ − h and θ + h sit next to a
/// kink and are skipped. Relative error uses max(|g|, |fd|, `floor`).
pub fn fd_check(prob: &FdProblem, which: RegressionTraining, h: f64, floor: f64) -> FdReport {
    let grads = demand_net::gradients(&prob.net, &prob.coeffs, &prob.batch).unwrap();
    let analytic = grads.flat(&prob.coeffs, which);
    let mut params = prob.net.flat_params();
    params.extend(demand_net::flat_regression(&prob.coeffs, which));
    assert_eq!(analytic.len(), params.len());
    let mut report = FdReport::default();
    for k in 0..params.len() {
        let mut up = params.clone();
        up[k] += h;
        let mut dn = params.clone();
        dn[k] -= h;
        let (lu, pu) = loss_at(prob, which, &up);
        let (ld, pd) = loss_at(prob, which, &dn);
        if pu != pd {
            report.skipped += 1;
            continue;
        }
        let fd = (lu - ld) / (2.0 * h);
        let g = analytic[k];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(floor);
        report.max_rel = report.max_rel.max(rel);
        report.checked += 1;
    }
    report
}

/// Random panel of `n` sensors and `len` steps with `d` measured channels that
/// roughly follow the pairwise balance, plus noise.
pub fn random_panel(n: usize, len: usize, d: usize, seed: u64) -> (PressurePanel, DemandSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = TimeAxis::new(Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap(), 300, len).unwrap();
    let head: Vec<f64> = (0..len).map(|_| 50.0 + rng.random_range(-5.0..5.0)).collect();
    let q: Vec<Vec<f64>> = (0..d).map(|_| (0..len).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let k0 = rng.random_range(-3.0..3.0);
        let k1 = rng.random_range(0.7..1.3);
        let kd: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..0.05)).collect();
        values.push(
            (0..len)
                .map(|t| {
                    let drop: f64 = (0..d).map(|c| kd[c] * q[c][t] * q[c][t]).sum();
                    (head[t] - k0 - drop) / k1 + rng.random_range(-0.2..0.2)
                })
                .collect(),
        );
    }
    let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let chans: Vec<DemandChannel> = q
        .iter()
        .enumerate()
        .map(|(c, v)| DemandChannel {
            id: format!("q{c}"),
            values: v.clone(),
        })
        .collect();
    let panel = PressurePanel::new(axis, ids, values, chans).unwrap();
    let known = DemandSet::known_from_panel(&panel);
    (panel, known)
}

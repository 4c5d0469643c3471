//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! Criteria 5–9 share one fixture: the full training and test datasets and
//! three generative models trained at the standard settings.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use capinv_core::field::{
    build_boundary_mask, generate_dataset, solve_sor, test_d_values, training_d_values,
    CapacitorConfig, Dataset, SorOptions,
};
use capinv_core::generative::{
    kld_loss, loss_with_noise, rec_loss, train_generative, GenerativeModel, ModelKind, TrainConfig,
};
use capinv_core::harness::{
    run_noise_sweep, run_timing, Method, Stage, SweepConfig, SweepInputs, SweepResult,
};
use capinv_core::inverse::{
    inverse_predict, InverseOptions, InverseProblem, RegressionModel, Space,
};
use capinv_core::nn::{rows_to_matrix, OptimizerKind, Schedule, SeededRng};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

const TRAIN_SEED: u64 = 1;

struct Report {
    failed: usize,
}

impl Report {
    fn record(&mut self, id: u32, name: &str, pass: bool, detail: String, elapsed: Duration) {
        if !pass {
            self.failed += 1;
        }
        println!(
            "criterion {id} [{}] {name}: {detail} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
}

fn direct_solve(config: &CapacitorConfig, n: usize) -> Vec<f64> {
    let mask = build_boundary_mask(&config.clone().with_fine_n(n)).unwrap();
    let mut index = vec![usize::MAX; n * n];
    let mut unknowns = Vec::new();
    for r in 0..n {
        for c in 0..n {
            if !mask.is_fixed(r, c) {
                index[r * n + c] = unknowns.len();
                unknowns.push((r, c));
            }
        }
    }
    let m = unknowns.len();
    let mut a = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    for (k, &(r, c)) in unknowns.iter().enumerate() {
        a[(k, k)] = 4.0;
        for (rr, cc) in [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)] {
            if mask.is_fixed(rr, cc) {
                b[k] += mask.value(rr, cc);
            } else {
                a[(k, index[rr * n + cc])] = -1.0;
            }
        }
    }
    let x = a.lu().solve(&b).expect("nonsingular Laplacian");
    (0..n * n)
        .map(|i| {
            let (r, c) = (i / n, i % n);
            if mask.is_fixed(r, c) {
                mask.value(r, c)
            } else {
                x[index[i]]
            }
        })
        .collect()
}

fn criterion_1(report: &mut Report) {
    let t = Instant::now();
    let n = 21;
    let config = CapacitorConfig::default().with_d(0.5);
    let mask = build_boundary_mask(&config.clone().with_fine_n(n)).unwrap();
    let sor = solve_sor(&mask, &SorOptions::for_grid(n, config.v0)).unwrap();
    let direct = direct_solve(&config, n);
    let err = sor
        .values()
        .iter()
        .zip(&direct)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let elapsed = t.elapsed();
    report.record(
        1,
        "SOR matches direct solve on 21x21",
        err < 1e-6 && elapsed < Duration::from_secs(1),
        format!("max-abs error {err:.2e}"),
        elapsed,
    );
}

fn random_model(kind: ModelKind, rng: &mut SeededRng) -> GenerativeModel {
    loop {
        let input = rng.random_range(2..=6);
        let hidden = rng.random_range(1..=4);
        let latent = rng.random_range(1..=3);
        let model = GenerativeModel::initialized(kind, input, &[hidden], latent, rng).unwrap();
        let params: usize = model
            .encoder()
            .params()
            .iter()
            .chain(model.decoder().params().iter())
            .map(|p| p.len())
            .sum();
        if params <= 100 {
            return model;
        }
    }
}

fn max_gradient_error(kind: ModelKind, rng: &mut SeededRng) -> f64 {
    let mut model = random_model(kind, rng);
    let rows = rng.random_range(1..=4);
    let batch = DMatrix::from_fn(rows, model.input_dim(), |_, _| rng.random_range(-1.0..1.0));
    let eps = DMatrix::from_fn(rows, model.latent_dim(), |_, _| rng.sample(StandardNormal));
    let beta = 1.0;
    let (_, grads) = loss_with_noise(&model, beta, &batch, &eps).unwrap();
    let loss = |m: &GenerativeModel| loss_with_noise(m, beta, &batch, &eps).unwrap().0.total;

    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let blocks = grads.len();
    let enc_blocks = model.encoder().params().len();
    for block in 0..blocks {
        for i in 0..grads[block].len() {
            let nudge = |m: &mut GenerativeModel, delta: f64| {
                let mut params = if block < enc_blocks {
                    m.encoder_mut().params_mut()
                } else {
                    m.decoder_mut().params_mut()
                };
                let k = if block < enc_blocks {
                    block
                } else {
                    block - enc_blocks
                };
                params[k][i] += delta;
            };
            nudge(&mut model, h);
            let up = loss(&model);
            nudge(&mut model, -2.0 * h);
            let down = loss(&model);
            nudge(&mut model, h);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[block][i];
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}

fn criterion_2(report: &mut Report) {
    let t = Instant::now();
    let mut rng = SeededRng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let kind = if trial % 2 == 0 {
            ModelKind::Ae
        } else {
            ModelKind::Vae
        };
        worst = worst.max(max_gradient_error(kind, &mut rng));
    }
    let elapsed = t.elapsed();
    report.record(
        2,
        "analytic gradients match central differences",
        worst < 1e-5 && elapsed < Duration::from_secs(10),
        format!("100 trials, worst relative error {worst:.2e}"),
        elapsed,
    );
}

fn criterion_3(report: &mut Report) {
    let t = Instant::now();
    let a = kld_loss(&[0.0], &[1.0]).unwrap();
    let b = kld_loss(&[1.0], &[1.0]).unwrap();
    let v = [0.25, -0.5, 0.75];
    let c = rec_loss(&v, &v).unwrap();
    let pass = a.abs() < 1e-12 && (b - 0.5).abs() < 1e-12 && c.abs() < 1e-12;
    report.record(
        3,
        "loss identities",
        pass,
        format!("kld(0,1)={a}, kld(1,1)={b}, rec(V,V)={c}"),
        t.elapsed(),
    );
}

fn criterion_4(report: &mut Report) {
    let t = Instant::now();
    let mut rng = SeededRng::seed_from_u64(4);
    let mut worst_x: f64 = 0.0;
    let mut worst_r: f64 = 0.0;
    for _ in 0..100 {
        let dim = rng.random_range(1..=60);
        let phi: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let model = RegressionModel {
            space: Space::Latent,
            phi: phi.clone(),
            intercept: rng.random_range(-1.0..1.0),
            fit_residual: 0.0,
        };
        let x0: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let target = rng.random_range(0.0..1.0);
        let solution = inverse_predict(
            &model,
            &InverseProblem {
                space: Space::Latent,
                target_d: target,
                initial_estimate: x0.clone(),
                options: InverseOptions::default(),
            },
        )
        .unwrap();
        let phi_sq: f64 = phi.iter().map(|p| p * p).sum();
        let pred: f64 = x0.iter().zip(&phi).map(|(x, p)| x * p).sum::<f64>() + model.intercept;
        let scale = (target - pred) / phi_sq;
        for ((x, x0), p) in solution.x.iter().zip(&x0).zip(&phi) {
            worst_x = worst_x.max((x - (x0 + scale * p)).abs());
        }
        worst_r = worst_r.max(solution.residual);
    }
    report.record(
        4,
        "inverse prediction equals closed-form projection",
        worst_x < 1e-6 && worst_r < 1e-8,
        format!("100 cases, max-abs {worst_x:.2e}, max residual {worst_r:.2e}"),
        t.elapsed(),
    );
}

struct Fixture {
    train: Dataset,
    test: Dataset,
    models: Vec<GenerativeModel>,
    config: SweepConfig,
    sweep: SweepResult,
}

fn standard_methods() -> [(ModelKind, OptimizerKind); 3] {
    [
        (ModelKind::Ae, OptimizerKind::Momentum),
        (ModelKind::Vae, OptimizerKind::Momentum),
        (ModelKind::Vae, OptimizerKind::Adam),
    ]
}

fn build_fixture() -> Fixture {
    let t = Instant::now();
    let base = CapacitorConfig::default();
    let train = generate_dataset(&training_d_values(), &base, None).unwrap();
    let test = generate_dataset(&test_d_values(), &base, None).unwrap();
    println!(
        "fixture: datasets ready in {:.1}s",
        t.elapsed().as_secs_f64()
    );
    let fields = rows_to_matrix(&train.fields()).unwrap();
    let mut models = Vec::new();
    for (kind, optimizer) in standard_methods() {
        let t = Instant::now();
        let config = TrainConfig::standard(kind, optimizer);
        let (model, history) = train_generative(&fields, &config, TRAIN_SEED).unwrap();
        let last = history.last().unwrap();
        println!(
            "fixture: {kind}-{optimizer} trained in {:.1}s, final rec {:.4} kld {:.4}",
            t.elapsed().as_secs_f64(),
            last.rec,
            last.kld
        );
        models.push(model);
    }
    let config = SweepConfig::default();
    let inputs = SweepInputs {
        train: train.clone(),
        test: test.clone(),
        models: models.clone(),
    };
    let t = Instant::now();
    let sweep = run_noise_sweep(&config, &inputs).unwrap();
    println!("fixture: sweep done in {:.1}s", t.elapsed().as_secs_f64());
    print_medians(&config, &sweep);
    Fixture {
        train,
        test,
        models,
        config,
        sweep,
    }
}

fn print_medians(config: &SweepConfig, sweep: &SweepResult) {
    for &method in &config.methods {
        for &e in &config.noise_levels {
            let row: Vec<String> = config
                .test_d
                .iter()
                .map(|&d| format!("{:8.3}", median(sweep, method, d, e)))
                .collect();
            println!(
                "  median ssd {:>13} e={e:<4}: {}",
                method.to_string(),
                row.join(" ")
            );
        }
    }
}

fn median(sweep: &SweepResult, method: Method, d: f64, e: f64) -> f64 {
    sweep.aggregate(method, d, e).map_or(f64::NAN, |a| a.median)
}

fn pooled_median(sweep: &SweepResult, method: Method, e: f64) -> f64 {
    let mut values: Vec<f64> = sweep
        .cells
        .iter()
        .filter(|c| c.method == method && c.e == e)
        .filter_map(|c| c.outcome.clone().ok())
        .collect();
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn criterion_5(report: &mut Report, fx: &Fixture, setup: Duration) {
    let t = Instant::now();
    let ae = Method::latent(ModelKind::Ae, OptimizerKind::Momentum);
    let vae = Method::latent(ModelKind::Vae, OptimizerKind::Momentum);
    let count = |e: f64, better: Method, worse: Method| {
        fx.config
            .test_d
            .iter()
            .filter(|&&d| median(&fx.sweep, better, d, e) < median(&fx.sweep, worse, d, e))
            .count()
    };
    let total = fx.config.test_d.len();
    let failures = fx.sweep.failures();
    let low = count(0.01, ae, vae);
    let mut pass = failures == 0 && low >= 5;
    let mut detail = format!("{failures} failed cells; e=0.01 AE<VAE at {low}/{total} d");
    for e in [0.1, 0.5, 1.0] {
        let k = count(e, vae, ae);
        pass &= k >= 5;
        detail.push_str(&format!("; e={e} VAE<AE at {k}/{total} d"));
    }
    report.record(
        5,
        "AE wins at low noise, VAE wins at high noise",
        pass,
        detail,
        setup + t.elapsed(),
    );
}

fn criterion_6(report: &mut Report, fx: &Fixture) {
    let t = Instant::now();
    let adam = Method::latent(ModelKind::Vae, OptimizerKind::Adam);
    let momentum = Method::latent(ModelKind::Vae, OptimizerKind::Momentum);
    let mut pass = true;
    let mut parts = Vec::new();
    for &e in &fx.config.noise_levels {
        let a = pooled_median(&fx.sweep, adam, e);
        let m = pooled_median(&fx.sweep, momentum, e);
        pass &= a < m;
        parts.push(format!("e={e}: {a:.3} vs {m:.3}"));
    }
    report.record(
        6,
        "VAE+Adam below VAE+Momentum at every noise level",
        pass,
        parts.join("; "),
        t.elapsed(),
    );
}

fn criterion_7(report: &mut Report, fx: &Fixture) {
    let t = Instant::now();
    let latent: Vec<Method> = standard_methods()
        .iter()
        .map(|&(k, o)| Method::latent(k, o))
        .collect();
    let mut worst_margin = f64::INFINITY;
    let mut holds = 0;
    for &d in &fx.config.test_d {
        let full = median(&fx.sweep, Method::FULLSPACE, d, 1.0);
        let best_rival = latent
            .iter()
            .map(|&m| median(&fx.sweep, m, d, 1.0))
            .fold(f64::NEG_INFINITY, f64::max);
        if full > best_rival {
            holds += 1;
        }
        worst_margin = worst_margin.min(full / best_rival);
    }
    let total = fx.config.test_d.len();
    report.record(
        7,
        "fullspace fails at e=1",
        holds == total,
        format!(
            "fullspace above every latent method at {holds}/{total} d, smallest ratio {worst_margin:.1}x"
        ),
        t.elapsed(),
    );
}

fn criterion_8(report: &mut Report, fx: &Fixture) {
    let t = Instant::now();
    let inputs = SweepInputs {
        train: fx.train.clone(),
        test: fx.test.clone(),
        models: fx.models.clone(),
    };
    let inverters = inputs.inverters(&fx.config).unwrap();
    let table = run_timing(
        &inverters,
        &fx.train,
        &fx.config.test_d,
        &fx.config.recover,
        100,
    )
    .unwrap();
    let full = table.median_ms(Method::FULLSPACE, Stage::Inverse).unwrap();
    let mut pass = true;
    let mut parts = vec![format!("fullspace inverse {full:.5} ms")];
    for (k, o) in standard_methods() {
        let m = Method::latent(k, o);
        let latent = table.median_ms(m, Stage::Inverse).unwrap();
        let ratio = full / latent;
        pass &= ratio >= 5.0;
        parts.push(format!("{m} {latent:.5} ms ({ratio:.1}x)"));
    }
    report.record(
        8,
        "fullspace inverse stage at least 5x slower",
        pass,
        parts.join("; "),
        t.elapsed(),
    );
}

fn cells_bits(sweep: &SweepResult) -> Vec<(String, u64, u64, u64, Result<u64, String>)> {
    sweep
        .cells
        .iter()
        .map(|c| {
            (
                c.method.to_string(),
                c.d.to_bits(),
                c.e.to_bits(),
                c.seed,
                c.outcome.clone().map(f64::to_bits),
            )
        })
        .collect()
}

fn criterion_9(report: &mut Report, fx: &Fixture) {
    let t = Instant::now();
    let base = CapacitorConfig::default();
    let test_again = generate_dataset(&test_d_values(), &base, None).unwrap();
    let datasets_same = test_again.to_csv() == fx.test.to_csv();

    let fields = rows_to_matrix(&fx.train.fields()).unwrap();
    let mut models_same = true;
    for (kind, optimizer) in standard_methods() {
        let config = TrainConfig {
            schedule: Schedule {
                max_iterations: 500,
                ..Schedule::default()
            },
            ..TrainConfig::standard(kind, optimizer)
        };
        let (a, ha) = train_generative(&fields, &config, TRAIN_SEED).unwrap();
        let (b, hb) = train_generative(&fields, &config, TRAIN_SEED).unwrap();
        models_same &= a.to_text() == b.to_text() && ha == hb;
    }

    let inputs = SweepInputs {
        train: fx.train.clone(),
        test: fx.test.clone(),
        models: fx.models.clone(),
    };
    let again = run_noise_sweep(&fx.config, &inputs).unwrap();
    let cells_same = cells_bits(&again) == cells_bits(&fx.sweep);

    report.record(
        9,
        "repeated runs are bit-identical",
        datasets_same && models_same && cells_same,
        format!(
            "dataset file {}, model files {}, sweep cells {}",
            same(datasets_same),
            same(models_same),
            same(cells_same)
        ),
        t.elapsed(),
    );
}

fn same(flag: bool) -> &'static str {
    if flag {
        "identical"
    } else {
        "DIFFER"
    }
}

fn main() -> ExitCode {
    let mut report = Report { failed: 0 };
    criterion_1(&mut report);
    criterion_2(&mut report);
    criterion_3(&mut report);
    criterion_4(&mut report);
    let t = Instant::now();
    let fixture = build_fixture();
    let setup = t.elapsed();
    criterion_5(&mut report, &fixture, setup);
    criterion_6(&mut report, &fixture);
    criterion_7(&mut report, &fixture);
    criterion_8(&mut report, &fixture);
    criterion_9(&mut report, &fixture);
    if report.failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", report.failed);
        ExitCode::FAILURE
    }
}

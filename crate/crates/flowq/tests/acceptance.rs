//! Acceptance suite: one test per release criterion, each printing a
//! pass/fail line. Run with `cargo test --test acceptance -- --nocapture`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flowq::datakit::{SyntheticConfig, TrendKind};
use flowq::harness::{
    median, run_ablation, run_training_sweep, write_records_csv, DataSource, ExperimentConfig,
    Variant,
};
use flowq::hwsim::{
    estimate_cycles, latency_seconds, report_for_shape, simulate_trace, DesignKind,
    StageCostModel, DEFAULT_CLOCK_HZ,
};
use flowq::intinfer::{
    convert, export_package, int_forward, int_linear, int_relu, load_package,
    QuantizedLinearLayer,
};
use flowq::mlp::{backward, init_model, mse, TrainConfig};
use flowq::qat::{ste_backward, QatModel, QuantScheme};
use flowq::quantcore::{affine_params_from_range, approximate_multiplier, QuantParams};

fn verdict(id: u32, name: &str, pass: bool) {
    println!("ACCEPTANCE {id} ({name}): {}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "acceptance criterion {id} ({name}) failed");
}

#[test]
fn criterion_1_quantization_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut ok = true;
    for _ in 0..1_000_000 {
        let bits = rng.gen_range(2..=16u32);
        let lo = rng.gen_range(-10.0..10.0f64);
        let hi = lo + rng.gen_range(1e-6..20.0f64);
        let qp = affine_params_from_range(lo, hi, bits);
        let x = rng.gen_range(lo..=hi);
        let err = (x - qp.fake_quant(x)).abs();
        if err > qp.scale / 2.0 + 1e-12 {
            eprintln!("round trip violated: x={x} range=[{lo},{hi}] bits={bits} err={err}");
            ok = false;
            break;
        }
    }
    for _ in 0..10_000 {
        let bits = rng.gen_range(2..=16u32);
        let lo = rng.gen_range(-10.0..10.0f64);
        let hi = lo + rng.gen_range(1e-6..20.0f64);
        let qp = affine_params_from_range(lo, hi, bits);
        if qp.dequantize(qp.zero_point) != 0.0 || qp.quantize(0.0) != qp.zero_point {
            ok = false;
            break;
        }
    }
    verdict(1, "quantization round trip", ok);
}

#[test]
fn criterion_2_multiplier_approximation() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let tol = (2.0f64).powi(-30);
    let mut ok = true;
    for _ in 0..100_000 {
        // log-uniform over (1e-6, 1)
        let m = 10f64.powf(rng.gen_range(-6.0..0.0));
        let r = approximate_multiplier(m).unwrap();
        let in_window = r.m0 >= (1u32 << 30) && r.m0 <= u32::MAX >> 1;
        let approx = r.m0 as f64 * (2.0f64).powi(-(r.shift as i32));
        let rel = (approx - m).abs() / m;
        if !in_window || rel > tol {
            eprintln!("multiplier violated: m={m} m0={} n={} rel={rel}", r.m0, r.shift);
            ok = false;
            break;
        }
    }
    verdict(2, "requant multiplier approximation", ok);
}

/// Random calibrated, frozen, converted model for agreement checks.
fn random_converted(rng: &mut ChaCha8Rng) -> (QatModel, flowq::QuantizedMlp) {
    let h = [10usize, 30, 60, 120][rng.gen_range(0..4)];
    let d = 3;
    let mut mlp = init_model(d, h, rng.gen());
    for b in &mut mlp.b1 {
        *b = rng.gen_range(-0.3..0.3);
    }
    mlp.b2 = rng.gen_range(-0.3..0.3);
    let schemes = match rng.gen_range(0..2) {
        0 => (QuantScheme::LINEAR8, QuantScheme::LINEAR8),
        _ => (QuantScheme::FIXED68, QuantScheme::FIXED68),
    };
    let mut m = QatModel::new(mlp, schemes.0, schemes.1);
    let calib: Vec<Vec<f64>> = (0..64)
        .map(|_| (0..d).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    m.calibrate(&calib);
    m.freeze();
    let qm = convert(&m).expect("conversion");
    (m, qm)
}

#[test]
fn criterion_3_integer_fake_quant_agreement() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut trials = 0usize;
    let mut within = 0usize;
    for _ in 0..1000 {
        let (m, qm) = random_converted(&mut rng);
        let lsb = qm.output_params.scale;
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let y_fq = m.forward(&x);
            let (_, y_int) = int_forward(&qm, &x).expect("forward");
            trials += 1;
            if (y_fq - y_int).abs() <= lsb + 1e-12 {
                within += 1;
            }
        }
    }
    let rate = within as f64 / trials as f64;
    println!("  agreement rate: {rate:.5} over {trials} trials");

    // integer ReLU equivalence, exhaustive over int8
    let mut relu_ok = true;
    for z in -128..=127i32 {
        let qp = QuantParams::new(0.0123, z, 8);
        for a in -128..=127i32 {
            let lhs = qp.dequantize(int_relu(&[a as i8], z)[0] as i32);
            if lhs != qp.dequantize(a).max(0.0) {
                relu_ok = false;
            }
        }
    }
    verdict(3, "integer vs fake-quant agreement", rate >= 0.999 && relu_ok);
}

fn random_layer(rng: &mut ChaCha8Rng) -> (QuantizedLinearLayer, Vec<i8>) {
    let j = rng.gen_range(1..=16usize);
    let k = rng.gen_range(1..=128usize);
    let w_q = (0..j)
        .map(|_| (0..k).map(|_| rng.gen_range(-128..=127i32) as i8).collect())
        .collect();
    let layer = QuantizedLinearLayer {
        w_q,
        z_w: rng.gen_range(-128..=127),
        bias_q: (0..j).map(|_| rng.gen_range(-1_000_000..=1_000_000)).collect(),
        z_in: rng.gen_range(-128..=127),
        z_out: rng.gen_range(-128..=127),
        requant: approximate_multiplier(10f64.powf(rng.gen_range(-4.0..0.0))).unwrap(),
    };
    let x = (0..k).map(|_| rng.gen_range(-128..=127i32) as i8).collect();
    (layer, x)
}

#[test]
fn criterion_4_simulator_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut ok = true;
    for design in [DesignKind::PipelinedLinear, DesignKind::FixedBaseline] {
        let cost = StageCostModel::for_design(design);
        for _ in 0..5000 {
            let (layer, x) = random_layer(&mut rng);
            let want = int_linear(&layer, &x).expect("no overflow in generated range");
            let (got, cycles) = simulate_trace(&layer, &x, &cost).expect("trace");
            if got != want || cycles != cost.layer_cycles(layer.rows(), layer.cols()) {
                ok = false;
            }
        }
    }

    let pipelined = [(10usize, 1.01, "0.03"), (30, 2.81, "0.09"), (60, 5.51, "0.18"), (120, 10.91, "0.37")];
    for (h, us, uj) in pipelined {
        let cycles = estimate_cycles(h, 3, DesignKind::PipelinedLinear);
        let lat_us = latency_seconds(cycles, DEFAULT_CLOCK_HZ) * 1e6;
        let r = report_for_shape(h, 3, DesignKind::PipelinedLinear, DEFAULT_CLOCK_HZ, None);
        ok &= (lat_us - us).abs() < 1e-9 && format!("{:.2}", r.energy_uj()) == uj;
    }
    let fixed = [(10usize, 1.04, "0.03"), (30, 3.04, "0.09"), (60, 6.04, "0.18"), (120, 12.04, "0.35")];
    for (h, us, uj) in fixed {
        let cycles = estimate_cycles(h, 3, DesignKind::FixedBaseline);
        let lat_us = latency_seconds(cycles, DEFAULT_CLOCK_HZ) * 1e6;
        let r = report_for_shape(h, 3, DesignKind::FixedBaseline, DEFAULT_CLOCK_HZ, None);
        ok &= (lat_us - us).abs() < 1e-9 && format!("{:.2}", r.energy_uj()) == uj;
    }
    verdict(4, "simulator fidelity", ok);
}

fn quality_config() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DataSource::Synthetic(SyntheticConfig {
            samples: 4000,
            trend: TrendKind::UpwardDownward,
            noise_std: 0.01,
            sensors: 3,
            seed: 20240501,
        }),
        hidden_sizes: vec![10, 120],
        variants: vec![Variant::MFloat, Variant::MFixed, Variant::MLinear],
        folds: 7,
        runs_per_fold: 3,
        master_seed: 55,
        train: TrainConfig { max_epochs: 60, patience: 10, batch_size: 64, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn criterion_5_directional_quality() {
    let cfg = quality_config();
    let records = run_training_sweep(&cfg, None).expect("sweep");
    let med = |variant: &str, h: usize| -> f64 {
        let mut v: Vec<f64> = records
            .iter()
            .filter(|r| r.variant == variant && r.hidden == h)
            .filter_map(|r| r.test_mse)
            .collect();
        assert_eq!(v.len(), 21, "expected 7 folds x 3 runs for {variant} H={h}");
        median(&mut v)
    };
    let mut ok = true;
    for h in [10usize, 120] {
        let (f, l, x) = (med("m-float", h), med("m-linear", h), med("m-fixed", h));
        println!("  H={h}: median MSE float={f:.6} linear={l:.6} fixed={x:.6}");
        ok &= f <= l && l <= x;
    }

    // ablation grid at fold 0: the grid-level L/L median no worse than F/F
    let abl = run_ablation(&cfg).expect("ablation");
    let grid_median = |tag: &str| -> f64 {
        let mut v: Vec<f64> = abl
            .iter()
            .filter(|r| r.variant == tag)
            .filter_map(|r| r.test_mse)
            .collect();
        assert_eq!(v.len(), 6, "3 runs per hidden size for {tag}");
        median(&mut v)
    };
    let (ll, ff) = (grid_median("ablation-LL"), grid_median("ablation-FF"));
    println!("  ablation grid median L/L={ll:.6} F/F={ff:.6}");
    ok &= ll <= ff;
    verdict(5, "directional quality ordering", ok);
}

fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g.push((fp - fm) / (2.0 * h));
    }
    g
}

#[test]
fn criterion_6_gradient_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut ok = true;
    for trial in 0..100 {
        let (d, h) = (rng.gen_range(1..4usize), rng.gen_range(1..5usize));
        let mut m = init_model(d, h, 7000 + trial);
        for b in &mut m.b1 {
            *b = rng.gen_range(-0.5..0.5);
        }
        m.b2 = rng.gen_range(-0.5..0.5);
        let n = rng.gen_range(1..6usize);
        let inputs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let analytic = backward(&m, &inputs, &targets);

        // flatten/unflatten through serialization-free probing
        let mut probe = m.clone();
        let flat = flatten(&m);
        let mut f = |p: &[f64]| {
            unflatten(&mut probe, p);
            let pred: Vec<f64> = inputs.iter().map(|x| probe.forward(x)).collect();
            mse(&pred, &targets)
        };
        let numeric = finite_diff(&mut f, &flat, 1e-5);
        for (a, g) in analytic.iter().zip(&numeric) {
            let denom = a.abs().max(g.abs()).max(1e-6);
            if (a - g).abs() / denom >= 1e-4 {
                ok = false;
            }
        }
    }

    // STE constructed cases
    let qp = QuantParams::new(0.25, 0, 8);
    ok &= ste_backward(0.7, 1.0, &qp) == 0.7;
    ok &= ste_backward(0.7, 1000.0, &qp) == 0.0;
    ok &= ste_backward(-1.3, -1000.0, &qp) == 0.0;
    ok &= ste_backward(-1.3, qp.dequantize(qp.q_min), &qp) == -1.3;
    verdict(6, "gradient correctness", ok);
}

fn flatten(m: &flowq::mlp::MlpModel) -> Vec<f64> {
    let mut p: Vec<f64> = m.w1.iter().flatten().copied().collect();
    p.extend(&m.b1);
    p.extend(&m.w2);
    p.push(m.b2);
    p
}

fn unflatten(m: &mut flowq::mlp::MlpModel, p: &[f64]) {
    let mut it = p.iter();
    for row in &mut m.w1 {
        for w in row.iter_mut() {
            *w = *it.next().unwrap();
        }
    }
    for b in &mut m.b1 {
        *b = *it.next().unwrap();
    }
    for w in &mut m.w2 {
        *w = *it.next().unwrap();
    }
    m.b2 = *it.next().unwrap();
}

#[test]
fn criterion_7_package_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let dir = tempfile::tempdir().unwrap();
    let mut ok = true;
    for i in 0..100 {
        let (_, qm) = random_converted(&mut rng);
        let path = dir.path().join(format!("m{i}.json"));
        export_package(&qm, &path).unwrap();
        if load_package(&path).unwrap() != qm {
            ok = false;
        }
    }
    // tampering with one payload byte must be detected
    let (_, qm) = random_converted(&mut rng);
    let path = dir.path().join("tamper.json");
    export_package(&qm, &path).unwrap();
    let raw = std::fs::read_to_string(&path).unwrap();
    let idx = raw.find("\"weights\"").unwrap() + 14;
    let mut bytes = raw.into_bytes();
    bytes[idx] = if bytes[idx] == b'1' { b'2' } else { b'1' };
    std::fs::write(&path, bytes).unwrap();
    ok &= load_package(&path).is_err();
    verdict(7, "deployment package round trip", ok);
}

#[test]
fn criterion_8_end_to_end_determinism() {
    let cfg = ExperimentConfig {
        dataset: DataSource::Synthetic(SyntheticConfig {
            samples: 1800,
            trend: TrendKind::Upward,
            noise_std: 0.01,
            sensors: 3,
            seed: 11,
        }),
        hidden_sizes: vec![10, 30],
        variants: vec![Variant::MFloat, Variant::MFixed, Variant::MLinear],
        folds: 7,
        runs_per_fold: 3,
        master_seed: 99,
        train: TrainConfig { max_epochs: 40, patience: 8, batch_size: 64, ..Default::default() },
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("r1.csv"), dir.path().join("r2.csv"));
    write_records_csv(&run_training_sweep(&cfg, None).unwrap(), &p1).unwrap();
    write_records_csv(&run_training_sweep(&cfg, None).unwrap(), &p2).unwrap();
    let ok = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();
    verdict(8, "end-to-end determinism", ok);
}

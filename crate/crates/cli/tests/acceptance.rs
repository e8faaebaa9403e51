//! Acceptance suite: one test per headline property of the toolkit, each
//! printing a PASS line with the measured figures.
//!
//! Learning rates for the training criteria were chosen by pilot sweeps
//! (see `tests/pilot.rs`) and are frozen here as constants:
//!
//! - multi-scale pair (log_s, sin_l): ARR 10^-1.75, MSE 10^-1.5,
//!   MSE+norm 10^-3, MAE 10^-0.5 (each baseline at its best single rate by
//!   combined error);
//! - equal-scale pair (log_s, sin_s): ARR 10^-1.75, MSE 10^-2.5,
//!   MSE+norm 10^-3, MAE 10^-3.
//!
//! The two training-heavy tests serialize on a shared lock so that their
//! summed single-run wall clocks approximate CPU time even when the test
//! harness runs tests concurrently.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use scalereg_core::arr::{ArrConfig, ArrModel};
use scalereg_core::codec::BucketSpec;
use scalereg_core::data::{compose_value, SubtaskSpec};
use scalereg_core::harness::{
    half_decade_grid, lr_sweep, memory_report, train, Domain, MemoryReportConfig, Objective,
    TrainConfig,
};
use scalereg_core::losses::{arr_nll, hl_cross_entropy};
use scalereg_core::nn::math::log_softmax_slice;

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy_guard() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn pass(criterion: u32, name: &str, detail: String) {
    println!("ACCEPTANCE {criterion} ({name}): PASS — {detail}");
}

#[test]
fn criterion_1_codec_exhaustiveness() {
    let start = Instant::now();

    let mut codes = 0u64;
    for base in 2..=16u32 {
        for steps in 1..=4u32 {
            let spec = BucketSpec::<f64>::new(0.0, 1.0, base, steps).unwrap();
            for index in 0..spec.bucket_count() {
                let code = spec.digits_of_index(index).unwrap();
                assert_eq!(code.len(), steps as usize);
                assert_eq!(
                    spec.index_of_digits(code.digits()).unwrap(),
                    index,
                    "roundtrip failed for b={base} s={steps} a={index}"
                );
                codes += 1;
            }
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(0xACCE);
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..100 {
        let lo: f64 = rng.random_range(-1e8..1e8);
        let span: f64 = rng.random_range(1e-3..1e9);
        let base = rng.random_range(2..=16u32);
        let steps = rng.random_range(1..=8u32);
        let spec = BucketSpec::new(lo, lo + span, base, steps).unwrap();
        let half = spec.width() / 2.0;
        for _ in 0..10_000 {
            let y = rng.random_range(lo..lo + span);
            let mid = spec
                .bucket_midpoint(spec.bucket_index(y).unwrap())
                .unwrap();
            let err = (mid - y).abs();
            assert!(
                err <= half * (1.0 + 1e-9),
                "reconstruction error {err} above half-width {half} (b={base}, s={steps})"
            );
            worst_ratio = worst_ratio.max(err / half);
        }
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    pass(
        1,
        "codec exhaustiveness",
        format!(
            "{codes} digit codes roundtripped for every b<=16, s<=4; 10^6 random targets \
             reconstructed within w/2 (worst ratio {worst_ratio:.6}); {elapsed:?}"
        ),
    );
}

#[test]
fn criterion_2_sequence_loss_collapses_to_histogram_loss_at_one_step() {
    let mut rng = ChaCha12Rng::seed_from_u64(0x51C0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(2..=64usize);
        let spec = BucketSpec::<f64>::new(0.0, 1.0, k as u32, 1).unwrap();
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-6.0..6.0)).collect();
        let log_q = log_softmax_slice(&logits);
        let target = rng.random_range(0..k);
        let one_hot: Vec<f64> = (0..k).map(|j| if j == target { 1.0 } else { 0.0 }).collect();

        let hist = hl_cross_entropy(&one_hot, &log_q).unwrap();
        let code = spec.digits_of_index(target as u128).unwrap();
        let seq = arr_nll(&code, &[log_q.clone()]).unwrap();

        let dv = (hist.value - seq.value).abs();
        assert!(dv <= 1e-12, "values differ by {dv}");
        worst = worst.max(dv);
        for (a, b) in hist.grad.iter().zip(&seq.grad) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
    pass(
        2,
        "single-step collapse",
        format!("1000 random pairs, worst |value difference| {worst:.3e} (<= 1e-12)"),
    );
}

#[test]
fn criterion_3_full_model_gradient_fidelity() {
    let start = Instant::now();
    let spec = BucketSpec::<f64>::new(-1.0, 2.0, 5, 2).unwrap();
    let config = ArrConfig {
        input_dim: 3,
        encoder_hidden: vec![16, 16],
        step_hidden: vec![8],
        embed_dim: 8,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(0x9AD);
    let mut model = ArrModel::new(&config, spec, &mut rng);
    let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let code = model.spec().encode(0.73).unwrap();

    // Analytic gradients through the tape.
    let mut tape = scalereg_core::nn::Tape::new();
    let tf = model.teacher_forced(&mut tape, &x, &code).unwrap();
    let mut grads = scalereg_core::nn::GradientSet::zeros_like(model.params());
    let seeds: Vec<_> = tf
        .steps
        .iter()
        .map(|&(node, digit)| {
            let mut seed = vec![0.0; model.base()];
            seed[digit as usize] = -1.0;
            (node, seed)
        })
        .collect();
    tape.backward(model.params(), &seeds, &mut grads).unwrap();

    // Independent oracle: central finite differences of the loss computed
    // through the no-tape inference path.
    let h = 1e-6;
    let mut probed = 0usize;
    let mut worst_rel: f64 = 0.0;
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        for idx in 0..model.params().tensor(id).len() {
            let original = model.params().tensor(id).data()[idx];

            model.params_mut().tensor_mut(id).data_mut()[idx] = original + h;
            let plus = -model.sequence_log_prob(&x, &code).unwrap();
            model.params_mut().tensor_mut(id).data_mut()[idx] = original - h;
            let minus = -model.sequence_log_prob(&x, &code).unwrap();
            model.params_mut().tensor_mut(id).data_mut()[idx] = original;

            let fd = (plus - minus) / (2.0 * h);
            let analytic = grads.get(id).data()[idx];
            let denom = fd.abs().max(analytic.abs());
            if denom > 1e-7 {
                let rel = (fd - analytic).abs() / denom;
                assert!(
                    rel < 1e-4,
                    "parameter {} [{idx}]: fd {fd} vs analytic {analytic} (rel {rel})",
                    model.params().name(id)
                );
                worst_rel = worst_rel.max(rel);
            } else {
                assert!((fd - analytic).abs() < 1e-8);
            }
            probed += 1;
        }
    }
    assert!(probed >= 50, "probed only {probed} parameters");

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    pass(
        3,
        "gradient fidelity",
        format!("{probed} parameters probed, worst relative error {worst_rel:.3e} (< 1e-4); {elapsed:?}"),
    );
}

#[test]
fn criterion_4_distribution_normalization_and_mean_estimates() {
    let mut worst_mass_err: f64 = 0.0;
    let mut worst_mean_err: f64 = 0.0;
    for seed in 0..10u64 {
        let spec = BucketSpec::<f64>::new(0.0, 1.0, 4, 3).unwrap(); // k = 64
        let config = ArrConfig {
            input_dim: 1,
            encoder_hidden: vec![12, 12],
            step_hidden: vec![8],
            embed_dim: 6,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(1000 + seed);
        let model = ArrModel::new(&config, spec, &mut rng);
        let x = [rng.random_range(-1.0..1.0)];

        let mut mass = 0.0;
        for a in 0..model.spec().bucket_count() {
            let code = model.spec().digits_of_index(a).unwrap();
            mass += model.sequence_log_prob(&x, &code).unwrap().exp();
        }
        let mass_err = (mass - 1.0).abs();
        assert!(mass_err <= 1e-9, "model {seed}: probability mass {mass}");
        worst_mass_err = worst_mass_err.max(mass_err);

        let exact = model.exact_mean(&x).unwrap();
        let approx = model
            .approx_mean(&x, 10_000, &mut ChaCha12Rng::seed_from_u64(2000 + seed))
            .unwrap();
        // Range-relative: the spec range here has width 1.
        let mean_err = (approx - exact).abs();
        assert!(mean_err <= 0.01, "model {seed}: |approx - exact| = {mean_err}");
        worst_mean_err = worst_mean_err.max(mean_err);
    }
    pass(
        4,
        "distribution normalization",
        format!(
            "10 random k=64 models: worst |mass - 1| {worst_mass_err:.2e} (<= 1e-9), worst \
             range-relative mean gap {worst_mean_err:.4} (<= 0.01)"
        ),
    );
}

/// Runs training configs one at a time, so each run's wall clock is an
/// honest stand-in for its CPU time.
fn train_all(configs: Vec<TrainConfig<f64>>) -> Vec<scalereg_core::harness::RunMetrics<f64>> {
    configs
        .iter()
        .map(|cfg| train(cfg).expect("training run failed"))
        .collect()
}

fn desk_pair(
    objective: Objective,
    a: SubtaskSpec,
    b: SubtaskSpec,
    lr: f64,
    seed: u64,
) -> TrainConfig<f64> {
    let mut cfg = TrainConfig::desk(objective, Domain::Toy1d, a, Some(b), lr, seed);
    cfg.eval_interval = 1000;
    cfg.eval_set_size = 1024;
    cfg
}

#[test]
fn criterion_5_multi_scale_learning() {
    let _guard = heavy_guard();
    let seeds = [1u64, 2, 3];
    let var_log_s = SubtaskSpec::LogS.variance();
    let var_sin_s = SubtaskSpec::SinS.variance();

    // Pilot-frozen learning rates (best single rate per objective by
    // combined error on the multi-scale pair; see module docs).
    let arr_lr = 10f64.powf(-1.75);
    let multi_baselines = [
        (Objective::Mse, 10f64.powf(-1.5)),
        (Objective::MseNorm, 1e-3),
        (Objective::Mae, 10f64.powf(-0.5)),
    ];
    let equal_lrs = [
        (Objective::Arr, arr_lr),
        (Objective::Mse, 10f64.powf(-2.5)),
        (Objective::MseNorm, 1e-3),
        (Objective::Mae, 1e-3),
    ];

    let mut configs = Vec::new();
    for &seed in &seeds {
        configs.push(desk_pair(Objective::Arr, SubtaskSpec::LogS, SubtaskSpec::SinL, arr_lr, seed));
    }
    for &(objective, lr) in &multi_baselines {
        for &seed in &seeds {
            configs.push(desk_pair(objective, SubtaskSpec::LogS, SubtaskSpec::SinL, lr, seed));
        }
    }
    for &(objective, lr) in &equal_lrs {
        for &seed in &seeds {
            configs.push(desk_pair(objective, SubtaskSpec::LogS, SubtaskSpec::SinS, lr, seed));
        }
    }
    let results = train_all(configs);
    let cpu: Duration = results.iter().map(|m| m.wall_clock).sum();

    let mut cursor = results.into_iter();
    // Autoregressive runs on the multi-scale pair: the small subtask is
    // solved to within a tenth of its variance, and its error fell at
    // least tenfold from initialization.
    let mut arr_ratios = Vec::new();
    for &seed in &seeds {
        let m = cursor.next().unwrap();
        assert!(m.diverged_at.is_none(), "ARR seed {seed} diverged");
        let first = m.records.first().unwrap().error_a.unwrap();
        let last = m.final_error_a().unwrap();
        assert!(
            last <= 0.1 * var_log_s,
            "ARR seed {seed}: small-subtask error {last} above 0.1 x Var = {}",
            0.1 * var_log_s
        );
        assert!(
            last * 10.0 <= first,
            "ARR seed {seed}: error only moved {first} -> {last}"
        );
        arr_ratios.push(last / var_log_s);
    }
    // Point baselines at their best single rates leave the small subtask
    // at half its variance or worse.
    let mut baseline_ratios = Vec::new();
    for &(objective, _) in &multi_baselines {
        for &seed in &seeds {
            let m = cursor.next().unwrap();
            let last = m.final_error_a().unwrap();
            assert!(
                last >= 0.5 * var_log_s,
                "{objective} seed {seed}: small-subtask error {last} below 0.5 x Var = {}",
                0.5 * var_log_s
            );
            baseline_ratios.push(last / var_log_s);
        }
    }
    // Equal-scale control: every objective solves both subtasks.
    for &(objective, _) in &equal_lrs {
        for &seed in &seeds {
            let m = cursor.next().unwrap();
            let (a, b) = (m.final_error_a().unwrap(), m.final_error_b().unwrap());
            assert!(
                a <= 0.2 * var_log_s && b <= 0.2 * var_sin_s,
                "{objective} seed {seed} at equal scales: errors {a}, {b}"
            );
        }
    }

    assert!(
        cpu < Duration::from_secs(15 * 60),
        "criterion took {cpu:?} of single-run compute"
    );
    pass(
        5,
        "multi-scale learning",
        format!(
            "ARR small-subtask error {:.1e}-{:.1e} x Var vs baselines {:.1e}-{:.1e} x Var; \
             equal-scale control all under 0.2 x Var; {cpu:?} total compute",
            arr_ratios.iter().cloned().fold(f64::INFINITY, f64::min),
            arr_ratios.iter().cloned().fold(0.0f64, f64::max),
            baseline_ratios.iter().cloned().fold(f64::INFINITY, f64::min),
            baseline_ratios.iter().cloned().fold(0.0f64, f64::max),
        ),
    );
}

#[test]
fn criterion_6_learning_rate_stability() {
    let _guard = heavy_guard();
    let mut base = TrainConfig::<f64>::desk(
        Objective::Arr,
        Domain::Toy1d,
        SubtaskSpec::SinM { magnitude: 0 },
        None,
        1.0,
        1,
    );
    base.base = 10;
    base.steps = 4;
    base.batch_size = 128;
    base.total_samples = 128 * 600;
    base.hidden_width = 64;
    base.embed_dim = 16;
    base.eval_interval = 600;
    base.eval_set_size = 512;

    let magnitudes = [0, 3, 6];
    let lrs = half_decade_grid::<f64>();
    assert_eq!(lrs.len(), 15);
    let table = lr_sweep(&base, &[Objective::Arr, Objective::Mse], &magnitudes, &lrs).unwrap();
    let cpu: Duration = table.cells.iter().map(|c| c.wall_clock).sum();

    let arr_idx: Vec<usize> = magnitudes
        .iter()
        .map(|&m| table.argmin_lr_index(Objective::Arr, m).unwrap())
        .collect();
    for pair in arr_idx.windows(2) {
        assert!(
            pair[0].abs_diff(pair[1]) <= 1,
            "ARR argmin indices {arr_idx:?} differ by more than one grid step"
        );
    }
    assert!(
        arr_idx[0].abs_diff(arr_idx[2]) <= 1,
        "ARR argmin indices {arr_idx:?} differ by more than one grid step"
    );

    let mse_0 = table.argmin_lr_index(Objective::Mse, 0).unwrap();
    let mse_6 = table.argmin_lr_index(Objective::Mse, 6).unwrap();
    assert!(
        mse_0.abs_diff(mse_6) >= 3,
        "MSE argmin moved only {} grid steps ({mse_0} vs {mse_6})",
        mse_0.abs_diff(mse_6)
    );

    assert!(
        cpu < Duration::from_secs(20 * 60),
        "criterion took {cpu:?} of single-run compute"
    );
    pass(
        6,
        "learning-rate stability",
        format!(
            "ARR argmin grid indices {arr_idx:?} (stable within one step); MSE argmin moved \
             {} half-decades between magnitudes 0 and 6; {cpu:?} total compute",
            mse_0.abs_diff(mse_6)
        ),
    );
}

#[test]
fn criterion_7_memory_accounting() {
    let cfg = MemoryReportConfig {
        hidden_dim: 4096,
        embed_dim: 64,
        bytes_per_param: 4,
        budget_bytes: 48_000_000_000,
    };
    let rows = memory_report(&cfg, &[(1_000_000, 1), (100, 3), (100, 8)]);

    assert_eq!(rows[0].buckets, Some(1_000_000));
    assert_eq!(rows[0].explicit_bytes, Some(16_384_000_000));

    assert_eq!(rows[1].buckets, Some(1_000_000));
    assert!(
        rows[1].arr_bytes < 20_000_000,
        "autoregressive head {} bytes",
        rows[1].arr_bytes
    );

    assert_eq!(rows[2].buckets, Some(10_000_000_000_000_000));
    assert!(rows[2].explicit_oom, "10^16-bucket explicit head must be OOM");
    assert!(
        rows[2].arr_bytes < 100_000_000,
        "autoregressive head {} bytes",
        rows[2].arr_bytes
    );
    assert!(!rows[2].arr_oom);

    pass(
        7,
        "memory accounting",
        format!(
            "explicit head at k=10^6: exactly {} bytes; autoregressive head at (100, 3): {} \
             bytes; at (100, 8): k=10^16 flags explicit OOM while the autoregressive head \
             stays at {} bytes",
            16_384_000_000u64, rows[1].arr_bytes, rows[2].arr_bytes
        ),
    );
}

#[test]
fn criterion_8_dataset_fidelity() {
    let n = 1_000_000usize;
    let mut rng = ChaCha12Rng::seed_from_u64(0xDA7A);
    let mut sums = [0.0f64; 3];
    let specs = [SubtaskSpec::LogS, SubtaskSpec::SinL, SubtaskSpec::LogL];
    for _ in 0..n {
        let x: f64 = loop {
            let v = rng.random::<f64>();
            if v > 0.0 {
                break v;
            }
        };
        for (sum, spec) in sums.iter_mut().zip(&specs) {
            *sum += spec.transform(x);
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();

    assert!(
        (means[0] - 1.67).abs() <= 0.02,
        "log_s mean {} outside 1.67 +/- 0.02",
        means[0]
    );
    assert!(
        (means[1] - 8e6).abs() <= 0.01 * 8e6,
        "sin_l mean {} outside 8e6 +/- 1%",
        means[1]
    );
    assert!(
        (means[2] - 9e6).abs() <= 0.03 * 9e6,
        "log_l mean {} outside 9e6 +/- 3%",
        means[2]
    );
    assert_eq!(compose_value::<f64>(1, 5, 9, 8), 0.1598);

    pass(
        8,
        "dataset fidelity",
        format!(
            "10^6-draw means: log_s {:.4}, sin_l {:.4e}, log_l {:.4e}; composite [1,5,9,8] \
             reads exactly 0.1598",
            means[0], means[1], means[2]
        ),
    );
}

#[test]
fn criterion_9_determinism() {
    let dir = std::env::temp_dir().join("scalereg-acceptance").join("determinism");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg_path = dir.join("run.cfg");
    std::fs::write(
        &cfg_path,
        "\
objective = ARR
domain = toy1d
subtask_a = log_s
subtask_b = sin_s
lr = 0.01
b = 4
s = 3
batch_size = 32
total_samples = 1600
eval_interval = 10
eval_set_size = 128
mean_samples = 25
hidden_width = 24
embed_dim = 8
seed = 12345
",
    )
    .unwrap();

    let run = |name: &str| {
        let out_dir = dir.join(name);
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_scalereg"))
            .args(["train", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "train failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        std::fs::read(out_dir.join("metrics.csv")).unwrap()
    };
    let first = run("a");
    let second = run("b");
    assert_eq!(first, second, "metrics.csv bytes differ between identical invocations");

    pass(
        9,
        "determinism",
        format!(
            "two identical `train` invocations produced byte-identical metrics.csv \
             ({} bytes)",
            first.len()
        ),
    );
}

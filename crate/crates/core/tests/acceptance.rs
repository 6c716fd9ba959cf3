//! Acceptance criteria, one PASS/FAIL line each. Oracles live here and do
//! not share code paths with the routines they check, except where noted.

use std::time::{Duration, Instant};

use s3pool::harness::bench::cmd_bench;
use s3pool::harness::demo::{downsample_image, DemoMode};
use s3pool::harness::sweep::cmd_sweep_grid;
use s3pool::harness::verify::{cmd_verify, Level, VerifyOptions};
use s3pool::harness::{cmd_eval, cmd_train, ArchConfig, DatasetConfig, LrSchedule, TrainConfig};
use s3pool::data::{Image, PixelKind};
use s3pool::nn::{softmax_ce, Model, Pass};
use s3pool::pooling::{
    avg_pool, exact_expectation_infer, max_pool_standard, max_pool_stride1, s3pool_apply_frozen, s3pool_backward,
    s3pool_forward, stochastic_downsample, uniform_downsample, zeiler_stochastic_pool, Mode,
};
use s3pool::sampling::{expectation_weights, sample_grid_indices, PoolGeom, RngStream, StreamKey};
use s3pool::{Dims, Tensor4};
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

fn rng(stream: u64) -> RngStream {
    RngStream::new(0xACCE_0000 + stream, StreamKey::new(stream, 0))
}

fn random(r: &mut RngStream, dims: [usize; 4]) -> Tensor4 {
    let d = Dims::new(dims[0], dims[1], dims[2], dims[3]).unwrap();
    Tensor4::from_fn(d, |_, _, _, _| r.next_f64() * 2.0 - 1.0)
}

fn within(budget: Duration, started: Instant) -> Result<(), String> {
    let used = started.elapsed();
    if used > budget {
        Err(format!("took {:.1} s, budget {:.0} s", used.as_secs_f64(), budget.as_secs_f64()))
    } else {
        Ok(())
    }
}

fn desk_config(pooling: &str, seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        arch: ArchConfig {
            kernels: Some([3, 3, 3]),
            ..ArchConfig::nin([8, 16, 16], pooling)
        },
        epochs,
        batch_size: 32,
        lr: LrSchedule::default(),
        seed,
        dataset: DatasetConfig::Synthetic {
            train: 1000,
            test: 500,
            classes: 10,
        },
        train_size: None,
        normalize: false,
    }
}

/// Marginal of the `pos`-th smallest element of a uniform `m`-subset of
/// `1..=g`, counted over bitmasks: `(counts, number of subsets)`.
fn bitmask_marginal(g: usize, m: usize, pos: usize) -> (Vec<u64>, u64) {
    let mut counts = vec![0u64; g];
    let mut total = 0u64;
    for mask in 0u32..(1 << g) {
        if mask.count_ones() as usize != m {
            continue;
        }
        total += 1;
        let element = (0..g).filter(|b| mask >> b & 1 == 1).nth(pos - 1).unwrap();
        counts[element] += 1;
    }
    (counts, total)
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut vectors = 0;
    for g in [2usize, 4, 6, 8] {
        for s in (1..=g).filter(|s| g % s == 0) {
            let m = g / s;
            let geom = PoolGeom::new(1, s, g).unwrap();
            for pos in 1..=m {
                let w = expectation_weights(&geom, pos).map_err(|e| e.to_string())?;
                let (counts, total) = bitmask_marginal(g, m, pos);
                for a in 0..g {
                    // p/q == c/t  <=>  p t == c q
                    if w.numerators()[a] as u128 * total as u128 != counts[a] as u128 * w.denominator() as u128 {
                        return Err(format!("g={g} s={s} pos={pos} a={}", a + 1));
                    }
                }
                vectors += 1;
            }
        }
    }
    within(Duration::from_secs(1), started)?;
    Ok(format!("{vectors} weight vectors exact"))
}

fn naive_stride1_max(x: &Tensor4, k: usize) -> Vec<f64> {
    let d = x.dims();
    let (h, w) = (d.h(), d.w());
    let mut out = vec![0.0; h * w];
    for y in 1..=h {
        for c in 1..=w {
            let mut best = f64::NEG_INFINITY;
            for yy in y..=(y + k - 1).min(h) {
                for cc in c..=(c + k - 1).min(w) {
                    best = best.max(x.get(0, 0, yy, cc).unwrap());
                }
            }
            out[(y - 1) * w + (c - 1)] = best;
        }
    }
    out
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for g in [2usize, 4] {
        let geom = PoolGeom::new(2, g, g).unwrap();
        for _ in 0..100 {
            let x = random(&mut r, [1, 1, 8, 8]);
            let exact = exact_expectation_infer(&x, &geom).unwrap();
            let o = naive_stride1_max(&x, 2);
            let b = 8 / g;
            for i in 0..b {
                for j in 0..b {
                    let mut sum = 0.0;
                    for y in 0..g {
                        for c in 0..g {
                            sum += o[(i * g + y) * 8 + j * g + c];
                        }
                    }
                    let avg = sum / (g * g) as f64;
                    worst = worst.max((exact.get(0, 0, i + 1, j + 1).unwrap() - avg).abs());
                }
            }
        }
    }
    within(Duration::from_secs(5), started)?;
    if worst <= 1e-12 {
        Ok(format!("max deviation {worst:.2e}"))
    } else {
        Err(format!("max deviation {worst:.2e}"))
    }
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let geom = PoolGeom::new(2, 2, 4).unwrap();
    let x = random(&mut rng(3), [1, 1, 8, 8]);
    let exact = exact_expectation_infer(&x, &geom).unwrap();
    let passes = 200_000u64;
    let n = exact.dims().len();
    let (mut sum, mut sq) = (vec![0.0; n], vec![0.0; n]);
    for step in 0..passes {
        let stream = RngStream::new(33, StreamKey::new(0, step));
        let (z, _) = s3pool_forward(&x, &geom, &stream, Mode::Train).unwrap();
        for (i, v) in z.data().iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let p = passes as f64;
    let mut worst = 0.0f64;
    for i in 0..n {
        let mean = sum[i] / p;
        let se = ((sq[i] / p - mean * mean).max(0.0) / (p - 1.0)).sqrt();
        let dev = (mean - exact.data()[i]).abs();
        let z = if se > 0.0 { dev / se } else if dev < 1e-12 { 0.0 } else { f64::INFINITY };
        worst = worst.max(z);
    }
    within(Duration::from_secs(60), started)?;
    if worst < 3.0 {
        Ok(format!("{passes} passes, worst {worst:.2} standard errors"))
    } else {
        Err(format!("worst {worst:.2} standard errors"))
    }
}

fn criterion_4() -> Outcome {
    let mut detail = Vec::new();
    for g in [4usize, 8] {
        let m = g / 2;
        let subsets: Vec<u32> = (0u32..1 << g).filter(|v| v.count_ones() as usize == m).collect();
        let per_subset = 200u64;
        let draws = per_subset * subsets.len() as u64;
        let mut counts = vec![0u64; subsets.len()];
        let geom = PoolGeom::new(1, 2, g).unwrap();
        for step in 0..draws {
            // one strip in each direction; the rows of the layer's own sampler
            let stream = RngStream::new(44, StreamKey::new(g as u64, step));
            let idx = sample_grid_indices(&stream, g, g, &geom).unwrap();
            let mask = idx.rows.iter().fold(0u32, |acc, r| acc | 1 << (r - 1));
            counts[subsets.binary_search(&mask).unwrap()] += 1;
        }
        let expected = draws as f64 / subsets.len() as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let dof = (subsets.len() - 1) as f64;
        let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
        if p <= 0.001 {
            return Err(format!("g={g}: chi2={stat:.2}, p={p:.2e}"));
        }
        detail.push(format!("g={g}: {} subsets, p={p:.3}", subsets.len()));
    }
    Ok(detail.join("; "))
}

fn criterion_5() -> Outcome {
    let mut r = rng(5);
    for i in 0..1000 {
        let k = 2 + i % 2;
        let dims = [
            1 + r.below(2) as usize,
            1 + r.below(3) as usize,
            2 * (1 + r.below(8) as usize),
            2 * (1 + r.below(8) as usize),
        ];
        let x = Tensor4::from_fn(Dims::new(dims[0], dims[1], dims[2], dims[3]).unwrap(), |_, _, _, _| {
            (r.below(6) as f64) - 2.0
        });
        let fused = max_pool_standard(&x, k, 2).unwrap().0;
        let (o, _) = max_pool_stride1(&x, k).unwrap();
        if fused != uniform_downsample(&o, 2).unwrap() {
            return Err(format!("input {i} ({dims:?}, k={k}) differs"));
        }
    }
    Ok("1000 inputs identical, k in {2, 3}".into())
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(f64::MIN_POSITIVE)
}

fn criterion_6() -> Outcome {
    // layer, indices frozen by the tape
    let geom = PoolGeom::new(2, 2, 4).unwrap();
    let mut r = rng(6);
    let x = random(&mut r, [2, 3, 8, 8]);
    let (z, tape) = s3pool_forward(&x, &geom, &RngStream::new(6, StreamKey::new(1, 1)), Mode::Train).unwrap();
    let tape = tape.unwrap();
    let probe = random(&mut r, z.dims().as_array());
    let analytic = s3pool_backward(&probe, Some(&tape)).unwrap();
    let h = 1e-6;
    let numeric: Vec<f64> = (0..x.dims().len())
        .map(|i| {
            let shifted = |delta: f64| {
                let mut v = x.data().to_vec();
                v[i] += delta;
                let t = Tensor4::from_vec(x.dims(), v).unwrap();
                s3pool_apply_frozen(&t, &tape).unwrap().dot(&probe).unwrap()
            };
            (shifted(h) - shifted(-h)) / (2.0 * h)
        })
        .collect();
    let layer_err = rel_error(analytic.data(), &numeric);

    // desk-scale two-pool model
    let arch = ArchConfig::nin([3, 3, 3], "s3pool-16-8").layers(10).unwrap();
    let model = Model::build(&arch, [3, 32, 32], 6).unwrap();
    let xb = Tensor4::from_fn(Dims::new(2, 3, 32, 32).unwrap(), |_, _, _, _| r.next_f64());
    let labels = [3usize, 8];
    let pass = Pass::train(6, 2);
    let loss = |m: &Model| softmax_ce(&m.forward(&xb, &pass).unwrap().0, &labels).unwrap().0;
    let (logits, tapes) = model.forward(&xb, &pass).unwrap();
    let grads = model.backward(&tapes, &softmax_ce(&logits, &labels).unwrap().1).unwrap();
    let (mut an, mut nu) = (Vec::new(), Vec::new());
    let h = 1e-5;
    for (p, g) in grads.iter().enumerate() {
        for i in 0..g.dims().len() {
            let mut plus = model.clone();
            let mut data = plus.params()[p].data().to_vec();
            data[i] += h;
            plus.params_mut()[p] = Tensor4::from_vec(g.dims(), data.clone()).unwrap();
            let mut minus = model.clone();
            data[i] -= 2.0 * h;
            minus.params_mut()[p] = Tensor4::from_vec(g.dims(), data).unwrap();
            an.push(g.data()[i]);
            nu.push((loss(&plus) - loss(&minus)) / (2.0 * h));
        }
    }
    let model_err = rel_error(&an, &nu);
    let detail = format!("layer {layer_err:.2e}, model {model_err:.2e} over {} parameters", an.len());
    if layer_err < 1e-4 && model_err < 1e-3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7() -> Outcome {
    let started = Instant::now();
    let grids: Vec<String> = ["max", "2-2", "8-8", "16-8"].iter().map(|s| s.to_string()).collect();
    let rows = cmd_sweep_grid(&desk_config("max", 1, 20), &grids, &[1, 2, 3]).map_err(|e| e.to_string())?;
    within(Duration::from_secs(15 * 60), started)?;
    let err: Vec<f64> = rows.iter().map(|r| r.train_error).collect();
    let detail = rows
        .iter()
        .map(|r| format!("{} {:.2}/{:.2}", r.config, r.train_error, r.test_error))
        .collect::<Vec<_>>()
        .join(", ");
    let (max, g22, g88, g168) = (err[0], err[1], err[2], err[3]);
    if g168 > max && g22 < g88 && g88 < g168 {
        Ok(format!("train/test error %: {detail}"))
    } else {
        Err(format!("ordering violated: {detail}"))
    }
}

fn criterion_8() -> Outcome {
    let started = Instant::now();
    let variants: Vec<String> = ["max", "max", "zeiler", "s3pool-16-8"].iter().map(|s| s.to_string()).collect();
    let report = cmd_bench(&desk_config("max", 1, 1), &variants, 3, None).map_err(|e| e.to_string())?;
    within(Duration::from_secs(5 * 60), started)?;
    let ratios: Vec<String> = report.rows.iter().map(|r| format!("{} {:.3}", r.pooling, r.ratio)).collect();
    let s3 = report.ratio("s3pool-16-8").unwrap();
    let control = report.rows[1].ratio;
    let detail = format!("ratios vs max: {} (second max row is the noise control {control:.3})", ratios.join(", "));
    if s3 < 1.25 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn strip_seconds(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config = desk_config("s3pool-16-8", 9, 2);
    config.arch.widths = vec![4, 4, 4];
    config.dataset = DatasetConfig::Synthetic { train: 120, test: 60, classes: 10 };
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}"));
        cmd_train(&config, &out).map_err(|e| e.to_string())?;
        let csv = std::fs::read_to_string(out.join("metrics.csv")).map_err(|e| e.to_string())?;
        let ckpt = std::fs::read(out.join("model.ckpt")).map_err(|e| e.to_string())?;
        let eval = cmd_eval(&out.join("model.ckpt"), &config).map_err(|e| e.to_string())?;
        outputs.push((strip_seconds(&csv), ckpt, eval.to_bits()));
    }
    if outputs[0] != outputs[1] {
        return Err("training outputs differ between identical runs".into());
    }
    let samples: Vec<u8> = (0..32 * 32 * 3).map(|i| (i * 37 % 256) as u8).collect();
    let img = Image::new(32, 32, PixelKind::Rgb, samples).unwrap();
    for mode in [DemoMode::Uniform, DemoMode::Stochastic { g: 32 }, DemoMode::Stochastic { g: 8 }] {
        let a = downsample_image(&img, 2, mode, 9).map_err(|e| e.to_string())?;
        let b = downsample_image(&img, 2, mode, 9).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{mode:?} image differs"));
        }
    }
    let v = |_: ()| {
        let r = cmd_verify(&VerifyOptions::new(Level::Fast));
        r.checks.iter().map(|c| (c.passed, c.detail.clone())).collect::<Vec<_>>()
    };
    if v(()) != v(()) {
        return Err("verify reports differ".into());
    }
    let x = random(&mut rng(9), [2, 2, 16, 16]);
    let stream = RngStream::new(9, StreamKey::new(4, 4));
    let geom = PoolGeom::new(2, 2, 8).unwrap();
    if s3pool_forward(&x, &geom, &stream, Mode::Train).unwrap().0 != s3pool_forward(&x, &geom, &stream, Mode::Train).unwrap().0 {
        return Err("pooling tensors differ".into());
    }
    Ok("train metrics, checkpoint, eval, images, verify table and tensors bit-identical".into())
}

fn criterion_10() -> Outcome {
    let mut r = rng(10);
    let mut cases = 0;
    for _ in 0..500 {
        let s = 1 + r.below(4) as usize;
        let g = s * (1 + r.below(4) as usize);
        let (h, w) = (g * (1 + r.below(3) as usize), g * (1 + r.below(3) as usize));
        let dims = [1 + r.below(2) as usize, 1 + r.below(3) as usize, h, w];
        let x = random(&mut r, dims);
        let k = 1 + r.below(3) as usize;
        let geom = PoolGeom::new(k, s, g).unwrap();
        let stream = RngStream::new(10, StreamKey::new(0, r.next_u64()));
        let down = PoolGeom::new(1, s, g).unwrap();
        let shapes = [
            max_pool_standard(&x, k, s).unwrap().0.dims(),
            avg_pool(&x, k, s).unwrap().dims(),
            uniform_downsample(&x, s).unwrap().dims(),
            stochastic_downsample(&x, &down, &stream).unwrap().0.dims(),
            s3pool_forward(&x, &geom, &stream, Mode::Train).unwrap().0.dims(),
            s3pool_forward(&x, &geom, &stream, Mode::Infer).unwrap().0.dims(),
            exact_expectation_infer(&x, &geom).unwrap().dims(),
            zeiler_stochastic_pool(&x.map(f64::abs), k, s, &stream, Mode::Train).unwrap().0.dims(),
        ];
        let want = [dims[0], dims[1], h / s, w / s];
        if let Some(bad) = shapes.iter().find(|d| d.as_array() != want) {
            return Err(format!("{dims:?} s={s} g={g} gave {bad}"));
        }
        let unit = PoolGeom::new(1, 1, g / s).unwrap();
        let y = random(&mut r, [dims[0], dims[1], h / s, w / s]);
        if stochastic_downsample(&y, &unit, &stream).unwrap().0 != y {
            return Err(format!("s=1 altered a {:?} input", y.dims().as_array()));
        }
        cases += 1;
    }
    Ok(format!("{cases} random geometries, 8 operators"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("expectation-weight exactness", criterion_1),
        ("average-pooling reduction", criterion_2),
        ("Monte-Carlo consistency", criterion_3),
        ("sampler uniformity", criterion_4),
        ("two-step identity", criterion_5),
        ("gradient correctness", criterion_6),
        ("regularization direction", criterion_7),
        ("overhead bound", criterion_8),
        ("determinism", criterion_9),
        ("s=1 identity and shape law", criterion_10),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let started = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1} s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.1} s): {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Self-checks of the pooling and sampling machinery against independent
//! oracles. Failures are results, not errors.

use std::time::Instant;

use serde::Serialize;

use crate::error::Result;
use crate::nn::{softmax_ce, LayerSpec, Model, Pass, PoolVariant};
use crate::pooling::{
    avg_pool, exact_expectation_infer, max_pool_standard, max_pool_stride1, s3pool_apply_frozen, s3pool_backward,
    s3pool_forward, stochastic_downsample, uniform_downsample, zeiler_stochastic_pool, Mode,
};
use crate::sampling::oracle::{brute_force_weights, chi_square_uniform, enumerate_grid_subsets};
use crate::sampling::{
    expectation_weights, sample_sorted_without_replacement, ExpectationWeights, PoolGeom, RngStream, StreamKey,
};
use crate::tensor::{Dims, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

pub type WeightFn = fn(&PoolGeom, usize) -> Result<ExpectationWeights>;

/// Inputs to the suite; `weights` is the expectation-weight routine under
/// test.
#[derive(Clone, Copy)]
pub struct VerifyOptions {
    pub level: Level,
    pub seed: u64,
    pub weights: WeightFn,
}

impl VerifyOptions {
    pub fn new(level: Level) -> Self {
        Self {
            level,
            seed: 20_170_101,
            weights: expectation_weights,
        }
    }
}

/// Shifts every weight one cell to the right; used to show the suite notices.
pub fn off_by_one_weights(geom: &PoolGeom, pos: usize) -> Result<ExpectationWeights> {
    let w = expectation_weights(geom, pos)?;
    let mut n = w.numerators().to_vec();
    n.rotate_right(1);
    Ok(ExpectationWeights::from_parts(n, w.denominator()))
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub seconds: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Tab-separated `check, result, seconds, detail` rows.
    pub fn table(&self) -> String {
        let mut out = String::from("check\tresult\tseconds\tdetail\n");
        for c in &self.checks {
            let result = if c.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("{}\t{result}\t{:.3}\t{}\n", c.name, c.seconds, c.detail));
        }
        out
    }
}

type Outcome = Result<(bool, String)>;

fn random_tensor(rng: &mut RngStream, dims: Dims) -> Tensor4 {
    Tensor4::from_fn(dims, |_, _, _, _| rng.next_f64() * 2.0 - 1.0)
}

fn check_expectation_exact(o: &VerifyOptions) -> Outcome {
    let mut compared = 0;
    for g in [2usize, 4, 6, 8] {
        for s in (1..=g).filter(|s| g % s == 0) {
            let geom = PoolGeom::new(1, s, g)?;
            for pos in 1..=geom.per_grid() {
                let got = (o.weights)(&geom, pos)?;
                let want = brute_force_weights(g, s, pos)?;
                if !got.exactly_equals(&want) {
                    return Ok((false, format!("g={g} s={s} pos={pos}: {got:?} != {want:?}")));
                }
                compared += 1;
            }
        }
    }
    Ok((true, format!("{compared} weight vectors equal")))
}

fn check_average_reduction(o: &VerifyOptions) -> Outcome {
    let inputs = if o.level == Level::Full { 100 } else { 25 };
    let mut rng = RngStream::new(o.seed, StreamKey::new(1, 0));
    let mut worst = 0.0f64;
    for g in [2usize, 4] {
        let geom = PoolGeom::new(2, g, g)?;
        for _ in 0..inputs {
            let x = random_tensor(&mut rng, Dims::new(1, 1, 8, 8)?);
            let exact = exact_expectation_infer(&x, &geom)?;
            let (p1, _) = max_pool_stride1(&x, 2)?;
            worst = worst.max(exact.max_abs_diff(&avg_pool(&p1, g, g)?)?);
        }
    }
    Ok((worst <= 1e-12, format!("max deviation {worst:.3e} over {} inputs", 2 * inputs)))
}

fn check_monte_carlo(o: &VerifyOptions) -> Outcome {
    let passes = if o.level == Level::Full { 200_000 } else { 20_000 };
    let geom = PoolGeom::new(2, 2, 4)?;
    let mut rng = RngStream::new(o.seed, StreamKey::new(2, 0));
    let x = random_tensor(&mut rng, Dims::new(1, 1, 8, 8)?);
    let exact = exact_expectation_infer(&x, &geom)?;
    let len = exact.dims().len();
    let (mut sum, mut sq) = (vec![0.0; len], vec![0.0; len]);
    for step in 0..passes {
        let stream = RngStream::new(o.seed, StreamKey::new(3, step));
        let (z, _) = s3pool_forward(&x, &geom, &stream, Mode::Train)?;
        for (i, v) in z.data().iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let n = passes as f64;
    let mut worst = 0.0f64;
    for i in 0..len {
        let mean = sum[i] / n;
        let var = (sq[i] / n - mean * mean).max(0.0) * n / (n - 1.0);
        let se = (var / n).sqrt();
        let dev = (mean - exact.data()[i]).abs();
        let z = if se > 0.0 { dev / se } else if dev < 1e-12 { 0.0 } else { f64::INFINITY };
        worst = worst.max(z);
    }
    Ok((worst < 3.0, format!("{passes} passes, max |mean - exact| = {worst:.2} standard errors")))
}

/// Maps a sorted subset to its index in lexicographic enumeration.
fn chi_square_for(g: usize, s: usize, per_subset: u64, seed: u64) -> Result<(bool, f64)> {
    let subsets = enumerate_grid_subsets(g, s)?;
    let m = g / s;
    let draws = per_subset * subsets.len() as u64;
    let mut counts = vec![0u64; subsets.len()];
    let mut rng = RngStream::new(seed, StreamKey::new(4, g as u64));
    for _ in 0..draws {
        let pick = sample_sorted_without_replacement(&mut rng, 1, g, m)?;
        let at = subsets.binary_search(&pick).expect("sampled subsets are enumerated");
        counts[at] += 1;
    }
    let r = chi_square_uniform(&counts)?;
    Ok((r.p_value > 0.001, r.p_value))
}

fn check_chi_square(o: &VerifyOptions) -> Outcome {
    let per_subset = if o.level == Level::Full { 500 } else { 100 };
    let mut detail = Vec::new();
    let mut ok = true;
    for g in [4usize, 8] {
        let (pass, p) = chi_square_for(g, 2, per_subset, o.seed)?;
        ok &= pass;
        detail.push(format!("g={g} p={p:.4}"));
    }
    Ok((ok, detail.join(", ")))
}

fn check_two_step(o: &VerifyOptions) -> Outcome {
    let cases = if o.level == Level::Full { 1000 } else { 200 };
    let mut rng = RngStream::new(o.seed, StreamKey::new(5, 0));
    for i in 0..cases {
        let k = 2 + i % 2;
        let dims = Dims::new(
            1 + rng.below(2) as usize,
            1 + rng.below(3) as usize,
            2 * (1 + rng.below(6) as usize),
            2 * (1 + rng.below(6) as usize),
        )?;
        // coarse values so ties occur
        let x = Tensor4::from_fn(dims, |_, _, _, _| rng.below(5) as f64);
        let (fused, _) = max_pool_standard(&x, k, 2)?;
        let (p1, _) = max_pool_stride1(&x, k)?;
        if fused != uniform_downsample(&p1, 2)? {
            return Ok((false, format!("mismatch for k={k} dims {dims}")));
        }
    }
    Ok((true, format!("{cases} inputs identical")))
}

/// Relative error `|a - n| / max(|a|, |n|)` in the Euclidean norm.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn check_layer_gradient(o: &VerifyOptions) -> Outcome {
    let geom = PoolGeom::new(3, 2, 4)?;
    let mut rng = RngStream::new(o.seed, StreamKey::new(6, 0));
    let x = random_tensor(&mut rng, Dims::new(2, 2, 8, 8)?);
    let (z, tape) = s3pool_forward(&x, &geom, &RngStream::new(o.seed, StreamKey::new(7, 0)), Mode::Train)?;
    let tape = tape.expect("train mode records a tape");
    let r = random_tensor(&mut rng, z.dims());
    let analytic = s3pool_backward(&r, Some(&tape))?;
    let h = 1e-6;
    let mut numeric = vec![0.0; x.dims().len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut v = x.data().to_vec();
        v[i] += h;
        let plus = s3pool_apply_frozen(&Tensor4::from_vec(x.dims(), v.clone())?, &tape)?.dot(&r)?;
        v[i] -= 2.0 * h;
        let minus = s3pool_apply_frozen(&Tensor4::from_vec(x.dims(), v)?, &tape)?.dot(&r)?;
        *slot = (plus - minus) / (2.0 * h);
    }
    let err = relative_error(analytic.data(), &numeric);
    Ok((err < 1e-4, format!("relative error {err:.2e}")))
}

/// Central differences over every parameter of a two-pool model with both
/// pooling layers stochastic and replayed from the same pass settings.
pub fn model_gradient_error(arch: &[LayerSpec], input: [usize; 3], batch: usize, seed: u64) -> Result<f64> {
    let model = Model::build(arch, input, seed)?;
    let mut rng = RngStream::new(seed, StreamKey::new(8, 0));
    let x = Tensor4::from_fn(Dims::new(batch, input[0], input[1], input[2])?, |_, _, _, _| rng.next_f64());
    let classes = model.classes();
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let pass = Pass::train(seed, 11);
    let loss = |m: &Model| -> Result<f64> { Ok(softmax_ce(&m.forward(&x, &pass)?.0, &labels)?.0) };
    let (logits, tapes) = model.forward(&x, &pass)?;
    let (_, grad) = softmax_ce(&logits, &labels)?;
    let grads = model.backward(&tapes, &grad)?;
    let h = 1e-5;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut probe = model.clone();
    for (p, g) in grads.iter().enumerate() {
        for i in 0..g.dims().len() {
            let orig = probe.params()[p].data()[i];
            probe.params_mut()[p] = with_value(&probe.params()[p], i, orig + h);
            let plus = loss(&probe)?;
            probe.params_mut()[p] = with_value(&probe.params()[p], i, orig - h);
            let minus = loss(&probe)?;
            probe.params_mut()[p] = with_value(&probe.params()[p], i, orig);
            analytic.push(g.data()[i]);
            numeric.push((plus - minus) / (2.0 * h));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

fn with_value(t: &Tensor4, i: usize, v: f64) -> Tensor4 {
    let mut data = t.data().to_vec();
    data[i] = v;
    Tensor4::from_vec(t.dims(), data).expect("same length")
}

/// A reduced two-pool network on 3x16x16 inputs.
pub fn two_pool_arch(variant: PoolVariant, grids: [usize; 2]) -> Vec<LayerSpec> {
    let g = |i: usize| (variant == PoolVariant::S3pool).then_some(grids[i]);
    vec![
        LayerSpec::Conv { out_channels: 3, size: 3 },
        LayerSpec::BatchNorm {},
        LayerSpec::Relu {},
        LayerSpec::Pool { variant, k: 2, s: 2, g: g(0) },
        LayerSpec::Conv { out_channels: 3, size: 3 },
        LayerSpec::BatchNorm {},
        LayerSpec::Relu {},
        LayerSpec::Pool { variant, k: 2, s: 2, g: g(1) },
        LayerSpec::Conv { out_channels: 4, size: 1 },
        LayerSpec::GlobalAvgPool {},
        LayerSpec::SoftmaxCe {},
    ]
}

fn check_model_gradient(o: &VerifyOptions) -> Outcome {
    let variants: &[PoolVariant] = if o.level == Level::Full {
        &[PoolVariant::S3pool, PoolVariant::Max, PoolVariant::Avg]
    } else {
        &[PoolVariant::S3pool]
    };
    let mut worst = 0.0f64;
    for &v in variants {
        worst = worst.max(model_gradient_error(&two_pool_arch(v, [8, 4]), [3, 16, 16], 2, o.seed)?);
    }
    Ok((worst < 1e-3, format!("relative error {worst:.2e}")))
}

fn check_identity_and_shapes(o: &VerifyOptions) -> Outcome {
    let cases = if o.level == Level::Full { 300 } else { 60 };
    let mut rng = RngStream::new(o.seed, StreamKey::new(9, 0));
    for _ in 0..cases {
        let s = 1 + rng.below(4) as usize;
        let m = 1 + rng.below(3) as usize;
        let g = s * m;
        let (bh, bw) = (1 + rng.below(3) as usize, 1 + rng.below(3) as usize);
        let dims = Dims::new(1 + rng.below(2) as usize, 1 + rng.below(2) as usize, g * bh, g * bw)?;
        let x = random_tensor(&mut rng, dims);
        let (h, w) = (dims.h() / s, dims.w() / s);
        let k = 1 + rng.below(3) as usize;
        let geom = PoolGeom::new(k, s, g)?;
        let stream = RngStream::new(o.seed, StreamKey::new(10, rng.next_u64()));
        let outs = [
            max_pool_standard(&x, k, s)?.0,
            avg_pool(&x, k, s)?,
            uniform_downsample(&x, s)?,
            s3pool_forward(&x, &geom, &stream, Mode::Train)?.0,
            s3pool_forward(&x, &geom, &stream, Mode::Infer)?.0,
            zeiler_stochastic_pool(&x.map(f64::abs), k, s, &stream, Mode::Train)?.0,
        ];
        if let Some(bad) = outs.iter().find(|z| (z.dims().h(), z.dims().w()) != (h, w)) {
            return Ok((false, format!("{dims} with s={s} gave {}", bad.dims())));
        }
        let unit = PoolGeom::new(1, 1, m)?;
        let ident = Dims::new(dims.n(), dims.c(), m * bh, m * bw)?;
        let y = random_tensor(&mut rng, ident);
        if stochastic_downsample(&y, &unit, &stream)?.0 != y {
            return Ok((false, format!("s=1 changed a {ident} input")));
        }
    }
    Ok((true, format!("{cases} random geometries")))
}

fn check_determinism(o: &VerifyOptions) -> Outcome {
    let mut rng = RngStream::new(o.seed, StreamKey::new(12, 0));
    let x = random_tensor(&mut rng, Dims::new(2, 3, 16, 16)?);
    let geom = PoolGeom::new(2, 2, 8)?;
    let stream = RngStream::new(o.seed, StreamKey::new(13, 5));
    let a = s3pool_forward(&x, &geom, &stream, Mode::Train)?.0;
    let b = s3pool_forward(&x, &geom, &stream.restart(), Mode::Train)?.0;
    let model = Model::build(&two_pool_arch(PoolVariant::S3pool, [16, 8]), [3, 16, 16], o.seed)?;
    let pass = Pass::train(o.seed, 3);
    let l1 = model.forward(&x, &pass)?.0;
    let l2 = model.forward(&x, &pass)?.0;
    let i1 = model.forward(&x, &Pass::infer())?.0;
    let i2 = model.forward(&x, &Pass::infer())?.0;
    let ok = a == b && l1 == l2 && i1 == i2;
    Ok((ok, "train and infer passes replay bit-identically".into()))
}

pub fn cmd_verify(options: &VerifyOptions) -> VerifyReport {
    let checks: [(&'static str, fn(&VerifyOptions) -> Outcome); 9] = [
        ("expectation_weights_exact", check_expectation_exact),
        ("average_pool_reduction", check_average_reduction),
        ("monte_carlo_expectation", check_monte_carlo),
        ("sampler_chi_square", check_chi_square),
        ("two_step_identity", check_two_step),
        ("layer_gradient", check_layer_gradient),
        ("model_gradient", check_model_gradient),
        ("stride_one_and_shapes", check_identity_and_shapes),
        ("determinism", check_determinism),
    ];
    let checks = checks
        .iter()
        .map(|&(name, f)| {
            let started = Instant::now();
            let (passed, detail) = match f(options) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                name,
                passed,
                seconds: started.elapsed().as_secs_f64(),
                detail,
            }
        })
        .collect();
    VerifyReport { checks }
}

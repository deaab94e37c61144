//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The trained toy models are cached under the cargo target tmp directory,
//! keyed by their configuration. Set `IVR_RETRAIN=1` to ignore the cache and
//! `IVR_TOY_STEPS` to change the length of the main run.


use std::path::PathBuf;
use std::time::{Duration, Instant};

use ivr_core::checkpoint;
use ivr_core::coder::{decode_image, encode_image, Bitstream, HEADER_LEN};
use ivr_core::entropy::{analyze, laplace_mass};
use ivr_core::interpca::{interp_lambda, Alpha, InterpCaGate, RateControl};
use ivr_core::layers::{build_model, CompressionModel, ModelConfig, RateInput, Variant, MSE_LAMBDAS};
use ivr_core::metrics::{
    bd_psnr, bd_rate, fine_rates, ks_distance, mse, rd_sweep, spearman, table_rates, Histogram, QualityKind, RdCurve,
    RdPoint,
};
use ivr_core::rng::Rng64;
use ivr_core::tensor::{ParamStore, Tape, Tensor};
use ivr_core::training::{crop_at, Corpus, RateMode, TrainConfig, Trainer};
use ivr_core::{Error, Result};

const TRAIN_IMAGES: usize = 256;
const TRAIN_EXTENT: usize = 128;
const HELD_OUT: usize = 8;
const EVAL_EXTENT: usize = 128;
const CORPUS_SEED: u64 = 11;
const HELD_OUT_SEED: u64 = 9001;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn cache_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("cache directory");
    dir
}

fn toy_steps() -> usize {
    std::env::var("IVR_TOY_STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(50_000)
}

fn retrain() -> bool {
    std::env::var("IVR_RETRAIN").is_ok_and(|v| v == "1")
}

fn train_corpus() -> Corpus {
    Corpus::dead_leaves(TRAIN_IMAGES, TRAIN_EXTENT, TRAIN_EXTENT, CORPUS_SEED)
}

fn held_out() -> Vec<Tensor> {
    Corpus::dead_leaves(HELD_OUT, EVAL_EXTENT, EVAL_EXTENT, HELD_OUT_SEED).images().to_vec()
}

/// The full-scale schedule is tuned for millions of steps. Desk-scale runs use a
/// 10x learning rate, and the rate gates a further 30x, so the gates separate
/// the rates within a few thousand steps.
fn desk_schedule(steps: usize) -> TrainConfig {
    let lr_stages = ivr_core::training::scaled_stages(steps).into_iter().map(|(b, lr)| (b, lr * 10.0)).collect();
    TrainConfig { total_steps: steps, lr_stages, gate_lr_scale: 30.0, ..Default::default() }
}

/// Trains `config` for `steps`, or loads the cached result of an identical run.
fn trained(tag: &str, model_cfg: &ModelConfig, steps: usize, corpus: &Corpus) -> Result<CompressionModel> {
    let train_cfg = desk_schedule(steps);
    let key = format!("{}{}corpus = {TRAIN_IMAGES}x{TRAIN_EXTENT}/{CORPUS_SEED}\n", model_cfg.to_text(), train_cfg.to_text());
    let digest = key.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    let path = cache_dir().join(format!("{tag}-{digest:016x}.ivrw"));
    if path.exists() && !retrain() {
        println!("  [{tag}] using cached model {}", path.display());
        return Ok(checkpoint::load(&path)?.0);
    }
    let mut model = build_model(model_cfg, train_cfg.seed)?;
    let mut trainer = Trainer::new(&model, train_cfg, RateMode::Sampled)?;
    let start = Instant::now();
    let report = (steps / 10).max(1);
    let mut window = Vec::with_capacity(report);
    trainer.run(&mut model, corpus, |log, _| {
        window.push(log.total);
        if (log.step + 1) % report == 0 {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            println!("  [{tag}] step {:>6} mean loss {mean:.4} ({:.0?})", log.step + 1, start.elapsed());
            window.clear();
        }
        Ok(())
    })?;
    checkpoint::save(&model, &path)?;
    Ok(model)
}

fn toy_config() -> ModelConfig {
    ModelConfig { base_channels: 16, latent_channels: 32, hyper_latent_channels: 16, ..Default::default() }
}

fn random_image(rng: &mut Rng64, h: usize, w: usize) -> Tensor {
    let mut im = ivr_core::training::dead_leaves(h, w, rng);
    // mild pixel noise so no two cases share a latent
    for v in im.data_mut() {
        *v = (*v + rng.uniform(-0.02, 0.02) as f32).clamp(0.0, 1.0);
    }
    im
}

fn random_rate(rng: &mut Rng64, table: &[f64]) -> Result<RateControl> {
    let j = rng.below(table.len() - 1);
    RateControl::inference(table, j, Alpha::new(rng.below(1001) as u16, 1000)?, 1000)
}

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Criteria 1 and 2 share the same 100 coding cases.
fn coder_cases(model: &CompressionModel) -> Result<(Outcome, Outcome)> {
    let mut rng = Rng64::new(404);
    let table = model.config.lambda_table.clone();
    let start = Instant::now();
    let (mut exact, mut within, mut lo_ratio, mut hi_ratio) = (0, 0, f64::INFINITY, 0.0f64);
    for _ in 0..100 {
        let x = random_image(&mut rng, 64, 64);
        let rate = random_rate(&mut rng, &table)?;
        let enc = encode_image(model, &x, &rate)?;
        let bytes = enc.bitstream.to_bytes();
        let dec = decode_image(model, &Bitstream::from_bytes(&bytes)?)?;
        if bits_equal(&enc.y_hat, &dec.y_hat) && bits_equal(&enc.z_hat, &dec.z_hat) && bits_equal(&enc.x_hat, &dec.x_hat) {
            exact += 1;
        }
        let coded = 8.0 * (bytes.len() - HEADER_LEN) as f64;
        let model_bits = enc.ry_bits + enc.rz_bits;
        if coded <= model_bits * 1.02 + 128.0 && coded >= model_bits * 0.90 {
            within += 1;
        }
        lo_ratio = lo_ratio.min(coded / model_bits);
        hi_ratio = hi_ratio.max(coded / model_bits);
    }
    let elapsed = start.elapsed();
    Ok((
        outcome(exact == 100 && elapsed < Duration::from_secs(120), format!("{exact}/100 bit-exact in {elapsed:.1?}")),
        outcome(within == 100, format!("{within}/100 within bounds, coded/model in [{lo_ratio:.4}, {hi_ratio:.4}]")),
    ))
}

fn gradients() -> Outcome {
    let mut worst = (0.0, "", 0);
    for (name, case) in gradcheck::cases() {
        let (e, seed) = gradcheck::run_case(name, case);
        if e > worst.0 || e.is_nan() {
            worst = (e, name, seed);
        }
    }
    let n = gradcheck::cases().len();
    outcome(
        worst.0 < gradcheck::TOL,
        format!("{n} op groups x {} seeds, max relative error {:.2e} ({} seed {})", gradcheck::SEEDS, worst.0, worst.1, worst.2),
    )
}

/// Adaptive Simpson on the Laplace density; splits at the mode so every
/// piece is smooth.
fn density_mass(lo: f64, hi: f64, mu: f64, log_scale: f64) -> f64 {
    let b = log_scale.max(-10.0).exp();
    let f = |y: f64| (-(y - mu).abs() / b).exp() / (2.0 * b);
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let mut edges = vec![lo];
    if mu > lo && mu < hi {
        edges.push(mu);
    }
    edges.push(hi);
    edges
        .windows(2)
        .map(|w| {
            let (a, c) = (w[0], w[1]);
            let m = 0.5 * (a + c);
            let whole = (c - a) / 6.0 * (f(a) + 4.0 * f(m) + f(c));
            simpson(&f, a, c, f(a), f(m), f(c), whole, 1e-14, 50)
        })
        .sum()
}

fn laplace() -> Outcome {
    let (mut worst, mut worst_sum) = (0.0f64, 0.0f64);
    for mu in -3..=3 {
        for s in -4..=4 {
            let (mu, s) = (mu as f64, s as f64);
            for v in -10..=10 {
                let v = v as f64;
                let err = (laplace_mass(v, mu, s) - density_mass(v - 0.5, v + 0.5, mu, s)).abs();
                worst = worst.max(err);
            }
            // the integer grid wide enough that the tails vanish in f64
            let reach = (60.0 * s.exp()).ceil() as i64 + 10;
            let total: f64 = (-reach..=reach).map(|k| laplace_mass(k as f64, mu, s)).sum();
            worst_sum = worst_sum.max((total - 1.0).abs());
        }
    }
    outcome(
        worst < 1e-9 && worst_sum < 1e-8,
        format!("max |mass - quadrature| {worst:.2e}, max |sum - 1| {worst_sum:.2e}"),
    )
}

fn interpca_algebra() -> Result<Outcome> {
    let mid = interp_lambda(&RateControl::new(&[50.0, 160.0], 0, Alpha::HALF)?)?;
    let hi = interp_lambda(&RateControl::new(&[50.0, 160.0], 0, Alpha::ONE)?)?;
    let lo = interp_lambda(&RateControl::new(&[50.0, 160.0], 0, Alpha::ZERO)?)?;
    let lambdas_ok = mid == 105.0 && hi == 50.0 && lo == 160.0;

    let n = MSE_LAMBDAS.len();
    let mut store = ParamStore::new();
    let gate = InterpCaGate::new(&mut store, "g", 24, n)?;
    let mut rng = Rng64::new(5);
    for id in [gate.fcn_weight, gate.fcn_bias] {
        for v in store.get_mut(id).value.data_mut() {
            *v = rng.uniform(-2.0, 2.0) as f32;
        }
    }
    let logits = |rate: &RateControl| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let oh = tape.constant(Tensor::vector(&ivr_core::interpca::interp_onehot(rate)?));
        let l = gate.logits(&mut tape, &store, oh)?;
        Ok(tape.value(l).data().iter().map(|&v| v as f64).collect())
    };
    let mut affine_err = 0.0f64;
    for j in 0..n - 1 {
        let l1 = logits(&RateControl::new(&MSE_LAMBDAS, j, Alpha::ONE)?)?;
        let l0 = logits(&RateControl::new(&MSE_LAMBDAS, j, Alpha::ZERO)?)?;
        for num in 0..=1000u16 {
            let a = num as f64 / 1000.0;
            let la = logits(&RateControl::new(&MSE_LAMBDAS, j, Alpha::new(num, 1000)?)?)?;
            for c in 0..la.len() {
                affine_err = affine_err.max((la[c] - (a * l1[c] + (1.0 - a) * l0[c])).abs());
            }
        }
    }
    let mut endpoints_exact = true;
    for j in 1..n - 1 {
        let a = gate.scale_values(&store, &RateControl::new(&MSE_LAMBDAS, j, Alpha::ONE)?)?;
        let b = gate.scale_values(&store, &RateControl::new(&MSE_LAMBDAS, j - 1, Alpha::ZERO)?)?;
        endpoints_exact &= a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    Ok(outcome(
        lambdas_ok && affine_err < 1e-6 && endpoints_exact,
        format!("lambda(1/2) = {mid}, max affine deviation {affine_err:.2e}, endpoints bit-exact: {endpoints_exact}"),
    ))
}

fn rd_ordering(model: &CompressionModel, images: &[Tensor]) -> Result<Outcome> {
    let table = &model.config.lambda_table;
    let pts = rd_sweep(model, images, &table_rates(table)?, 1)?;
    let lambdas: Vec<f64> = pts.iter().map(|p| p.lambda).collect();
    let bpp: Vec<f64> = pts.iter().map(|p| p.bpp).collect();
    let q: Vec<f64> = pts.iter().map(|p| p.psnr).collect();
    let (rb, rq) = (spearman(&lambdas, &bpp)?, spearman(&lambdas, &q)?);
    let curve: Vec<String> = pts.iter().map(|p| format!("{:.3}/{:.2}", p.bpp, p.psnr)).collect();
    println!("  bpp/PSNR by lambda: {}", curve.join(" "));
    Ok(outcome(rb > 0.9 && rq > 0.9, format!("rho(lambda, bpp) = {rb:.3}, rho(lambda, PSNR) = {rq:.3}")))
}

fn fine_rate(model: &CompressionModel, images: &[Tensor]) -> Result<Outcome> {
    let table = &model.config.lambda_table;
    let j = table.len() / 2 - 1;
    let fine = rd_sweep(model, images, &fine_rates(table, j, 10, 11)?, 1)?;
    let alphas: Vec<f64> = fine.iter().map(|p| p.alpha.value()).collect();
    let bpp: Vec<f64> = fine.iter().map(|p| p.bpp).collect();
    let rho = spearman(&alphas, &bpp)?;
    let coarse = rd_sweep(model, images, &[RateControl::new(table, j, Alpha::ONE)?], 1)?;
    let same = fine[0].alpha.is_one() && fine[0].images == coarse[0].images;
    Ok(outcome(rho <= -0.9 && same, format!("j = {j}, rho(alpha, bpp) = {rho:.3}, alpha = 1 matches grid point: {same}")))
}

fn mean_pairwise_ks(h: &[Histogram]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for a in 0..h.len() {
        for b in a + 1..h.len() {
            sum += ks_distance(&h[a], &h[b]);
            n += 1;
        }
    }
    sum / n as f64
}

fn latent_statistics(model: &CompressionModel, images: &[Tensor]) -> Result<(Outcome, Outcome)> {
    let rates = table_rates(&model.config.lambda_table)?;
    let (mut hy, mut hz) = (Vec::new(), Vec::new());
    for r in &rates {
        let (y, z) = ivr_core::metrics::latent_histograms(model, images, r)?;
        hy.push(y);
        hz.push(z);
    }
    let (ky, kz) = (mean_pairwise_ks(&hy), mean_pairwise_ks(&hz));
    let stability = outcome(kz < ky, format!("mean pairwise KS: z {kz:.4}, y {ky:.4}"));

    let (first, last) = (&rates[0], &rates[rates.len() - 1]);
    let mut decreasing = 0;
    let mut pairs = Vec::new();
    for x in images {
        let zf = |r: &RateControl| -> Result<f64> {
            Ok(ivr_core::metrics::latent_histograms(model, std::slice::from_ref(x), r)?.0.zero_fraction)
        };
        let (a, b) = (zf(first)?, zf(last)?);
        if a > b {
            decreasing += 1;
        }
        pairs.push(format!("{a:.3}>{b:.3}"));
    }
    let zeros = outcome(
        decreasing >= 6,
        format!("{decreasing}/{} images lose zeros from lowest to highest lambda ({})", images.len(), pairs.join(" ")),
    );
    Ok((stability, zeros))
}

fn bd_metrics() -> Result<Outcome> {
    let anchor = RdCurve::new(
        "a",
        [(0.12, 27.1), (0.25, 29.8), (0.5, 32.9), (0.8, 35.0), (1.3, 37.4)]
            .iter()
            .map(|&(bpp, quality)| RdPoint { bpp, quality })
            .collect(),
        QualityKind::Psnr,
    );
    let map = |f: &dyn Fn(RdPoint) -> RdPoint| RdCurve::new("t", anchor.points.iter().map(|&p| f(p)).collect(), QualityKind::Psnr);
    let ident = bd_rate(&anchor, &anchor)?.abs().max(bd_psnr(&anchor, &anchor)?.abs());
    let shifted = bd_psnr(&anchor, &map(&|p| RdPoint { quality: p.quality + 0.5, ..p }))?;
    let scaled = bd_rate(&anchor, &map(&|p| RdPoint { bpp: p.bpp * 1.1, ..p }))?;
    let mut anti = 0.0f64;
    for f in [0.8, 1.1, 1.37] {
        let t = map(&|p| RdPoint { bpp: p.bpp * f, quality: p.quality + 0.3 * (f - 1.0) * p.quality.ln() });
        let (ab, ba) = (bd_rate(&anchor, &t)? / 100.0, bd_rate(&t, &anchor)? / 100.0);
        anti = anti.max(((1.0 + ab) * (1.0 + ba) - 1.0).abs());
    }
    Ok(outcome(
        ident <= 1e-9 && (shifted - 0.5).abs() <= 1e-6 && (scaled - 10.0).abs() <= 1e-6 && anti <= 1e-6,
        format!("identical {ident:.1e}, +0.5 dB -> {shifted:.9}, x1.1 -> {scaled:.9}%, antisymmetry {anti:.1e}"),
    ))
}

fn ablations(corpus: &Corpus, images: &[Tensor]) -> Result<Outcome> {
    let mut notes = Vec::new();
    let mut pass = true;
    for variant in [Variant::NoAlpha, Variant::HyperInterpca, Variant::NoContextModel, Variant::ConditionalConv] {
        let cfg = ModelConfig { base_channels: 8, latent_channels: 16, hyper_latent_channels: 8, variant, ..Default::default() };
        let steps = 2000;
        let train_cfg = TrainConfig { total_steps: steps, lr_stages: ivr_core::training::scaled_stages(steps), ..Default::default() };
        let mut model = build_model(&cfg, 0)?;
        let mut trainer = Trainer::new(&model, train_cfg, RateMode::Sampled)?;
        let logs = match trainer.run(&mut model, corpus, |_, _| Ok(())) {
            Ok(l) => l,
            Err(e) => {
                pass = false;
                notes.push(format!("{variant}: {e}"));
                continue;
            }
        };
        let mean = |s: &[ivr_core::training::StepLog]| s.iter().map(|l| l.total).sum::<f64>() / s.len() as f64;
        let (head, tail) = (mean(&logs[..200]), mean(&logs[steps - 200..]));
        let mut decoded = 0;
        let rates = table_rates(&cfg.lambda_table)?;
        for r in &rates {
            let enc = encode_image(&model, &images[0], r)?;
            let dec = decode_image(&model, &Bitstream::from_bytes(&enc.bitstream.to_bytes())?)?;
            if bits_equal(&enc.x_hat, &dec.x_hat) {
                decoded += 1;
            }
        }
        let ok = tail.is_finite() && tail < head && decoded == rates.len();
        pass &= ok;
        notes.push(format!("{variant}: loss {head:.3}->{tail:.3}, {decoded}/{} decoded", rates.len()));
    }
    Ok(outcome(pass, notes.join("; ")))
}

fn unet_identity(corpus: &Corpus, images: &[Tensor]) -> Result<Outcome> {
    let cfg = ModelConfig { base_channels: 16, latent_channels: 24, hyper_latent_channels: 16, use_unet: true, ..Default::default() };
    let fresh = build_model(&cfg, 0)?;
    let rate = RateControl::new(&cfg.lambda_table, 3, Alpha::ONE)?;
    let ri: RateInput = fresh.rate_input(&rate)?;
    let a = analyze(&fresh, &images[0], &ri)?;
    let identity = a.x_ddot.as_ref().is_some_and(|d| bits_equal(d, &a.x_hat));

    let model = trained("unet", &cfg, 3000, corpus)?;
    let mut rng = Rng64::new(77);
    let (mut before, mut after) = (0.0, 0.0);
    let mut n = 0;
    for x in images {
        for _ in 0..4 {
            let (y0, x0) = (rng.below(EVAL_EXTENT - 64 + 1), rng.below(EVAL_EXTENT - 64 + 1));
            let patch = crop_at(x, y0, x0, 64, 64);
            let r = RateControl::at_table_index(&cfg.lambda_table, rng.below(cfg.lambda_table.len()))?;
            let a = analyze(&model, &patch, &model.rate_input(&r)?)?;
            before += mse(&patch, &a.x_hat)?;
            after += mse(&patch, a.x_ddot.as_ref().expect("unet output"))?;
            n += 1;
        }
    }
    let (before, after) = (before / n as f64, after / n as f64);
    Ok(outcome(
        identity && after <= before,
        format!("zero-init identity: {identity}, held-out MSE x_hat {before:.6} vs refined {after:.6}"),
    ))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, r: Result<Outcome>| {
        let o = r.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        println!("criterion {n:>2} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    record(3, "gradient correctness", Ok(gradients()));
    record(4, "laplace mass", Ok(laplace()));
    record(5, "interpca algebra", interpca_algebra());
    record(10, "bd metrics", bd_metrics());

    let corpus = train_corpus();
    let images = held_out();
    match trained("toy", &toy_config(), toy_steps(), &corpus) {
        Ok(model) => {
            match coder_cases(&model) {
                Ok((a, b)) => {
                    record(1, "coder losslessness", Ok(a));
                    record(2, "rate fidelity", Ok(b));
                }
                Err(e) => {
                    record(1, "coder losslessness", Err(Error::Contract(e.to_string())));
                    record(2, "rate fidelity", Err(e));
                }
            }
            record(6, "toy rd ordering", rd_ordering(&model, &images));
            record(7, "fine-rate monotonicity", fine_rate(&model, &images));
            match latent_statistics(&model, &images) {
                Ok((a, b)) => {
                    record(8, "hyper-latent stability", Ok(a));
                    record(9, "zero concentration", Ok(b));
                }
                Err(e) => {
                    record(8, "hyper-latent stability", Err(Error::Contract(e.to_string())));
                    record(9, "zero concentration", Err(e));
                }
            }
        }
        Err(e) => {
            for (n, name) in [(1, "coder losslessness"), (2, "rate fidelity"), (6, "toy rd ordering"), (7, "fine-rate monotonicity"), (8, "hyper-latent stability"), (9, "zero concentration")] {
                record(n, name, Err(Error::Contract(e.to_string())));
            }
        }
    }
    record(11, "ablation machinery", ablations(&corpus, &images));
    record(12, "unet residual identity", unet_identity(&corpus, &images));

    results.sort_by_key(|r| r.0);
    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| r.0.to_string()).collect();
    println!("\n{}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}

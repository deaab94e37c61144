//! Central finite-difference checks for every differentiable tape op,
//! shared by the gradient-check and acceptance targets.

use ivr_core::rng::Rng64;
use ivr_core::tensor::{ParamStore, Tape, Tensor, Var};

pub const EPS: f32 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const SEEDS: u64 = 20;

pub fn random(shape: [usize; 4], rng: &mut Rng64, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(lo, hi) as f32).collect()).unwrap()
}

/// Keeps values at least `gap` away from `kink` so a central difference
/// never straddles a non-differentiable point.
fn away_from(mut t: Tensor, kink: f32, gap: f32) -> Tensor {
    for v in t.data_mut() {
        if (*v - kink).abs() < gap {
            *v = kink + if *v >= kink { gap } else { -gap };
        }
    }
    t
}

/// Scalar projection `sum(r * y)` accumulated in f64.
fn project(y: &Tensor, r: &[f32]) -> f64 {
    y.data().iter().zip(r).map(|(a, b)| *a as f64 * *b as f64).sum()
}

/// Max deviation between autodiff and central differences, relative to the
/// largest finite-difference gradient magnitude of each input.
fn check<F>(name: &str, inputs: Vec<Tensor>, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut rng = Rng64::new(seed ^ 0xfeed);
    let forward = |vals: &[Tensor]| -> Tensor {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).clone()
    };
    let y0 = forward(&inputs);
    let r: Vec<f32> = (0..y0.numel()).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let rc = tape.constant(Tensor::from_vec(y0.shape(), r.clone()).unwrap());
    let weighted = tape.mul(out, rc).unwrap();
    let loss = tape.sum(weighted);
    let mut store = ParamStore::new();
    let grads = tape.backward(loss, &mut store).unwrap();

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let n = input.numel();
        let picks: Vec<usize> = if n <= 48 { (0..n).collect() } else { (0..48).map(|_| rng.below(n)).collect() };
        let mut numeric = Vec::new();
        for &i in &picks {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += EPS;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= EPS;
            let fd = (project(&forward(&plus), &r) - project(&forward(&minus), &r)) / (2.0 * EPS as f64);
            numeric.push((i, fd));
        }
        let scale = numeric.iter().map(|(_, v)| v.abs()).fold(1e-2, f64::max);
        for (i, fd) in numeric {
            let err = (analytic[i] as f64 - fd).abs() / scale;
            worst = worst.max(err);
        }
    }
    let _ = (name, seed);
    worst
}

pub type Case = fn(&mut Rng64, u64) -> f64;

/// Worst error of a case over all seeds, with the seed that produced it.
pub fn run_case(name: &str, case: Case) -> (f64, u64) {
    let mut worst = (0.0, 0);
    for seed in 0..SEEDS {
        let mut rng = Rng64::new(seed * 7919 + name.len() as u64);
        let e = case(&mut rng, seed);
        if e > worst.0 || e.is_nan() {
            worst = (e, seed);
        }
    }
    worst
}

pub fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv2d", conv2d),
        ("conv_transpose2d", conv_transpose2d),
        ("masked_conv", masked_conv),
        ("linear", linear),
        ("arithmetic", arithmetic),
        ("activations", activations),
        ("structural", structural),
        ("gaussian_blur", blur),
        ("laplace_bits", laplace),
    ]
}

fn conv2d(rng: &mut Rng64, seed: u64) -> f64 {
    let x = random([2, 4, 6, 6], rng, -1.0, 1.0);
    let w = random([3, 4, 3, 3], rng, -0.5, 0.5);
    let b = random([1, 3, 1, 1], rng, -0.5, 0.5);
    check("conv2d", vec![x, w, b], seed, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap())
}

fn conv_transpose2d(rng: &mut Rng64, seed: u64) -> f64 {
    let x = random([2, 4, 3, 3], rng, -1.0, 1.0);
    let w = random([4, 2, 5, 5], rng, -0.5, 0.5);
    let b = random([1, 2, 1, 1], rng, -0.5, 0.5);
    check("conv_transpose2d", vec![x, w, b], seed, |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 2, 1).unwrap())
}

fn masked_conv(rng: &mut Rng64, seed: u64) -> f64 {
    let x = random([2, 4, 6, 6], rng, -1.0, 1.0);
    let w = random([3, 4, 5, 5], rng, -0.5, 0.5);
    let mask = ivr_core::layers::causal_mask([3, 4, 5, 5]);
    check("masked", vec![x, w], seed, move |t, v| {
        let mw = t.mul_const(v[1], mask.clone()).unwrap();
        t.conv2d(v[0], mw, None, 1, 2).unwrap()
    })
}

fn linear(rng: &mut Rng64, seed: u64) -> f64 {
    let x = random([2, 10, 1, 1], rng, -1.0, 1.0);
    let w = random([8, 10, 1, 1], rng, -1.0, 1.0);
    let b = random([1, 8, 1, 1], rng, -1.0, 1.0);
    check("linear", vec![x, w, b], seed, |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap())
}

fn arithmetic(rng: &mut Rng64, seed: u64) -> f64 {
    let a = random([2, 4, 6, 6], rng, -1.0, 1.0);
    let s = random([1, 4, 1, 1], rng, 0.5, 1.5);
    let full = random([2, 4, 6, 6], rng, 0.5, 1.5);
    [
        check("mul_bcast", vec![a.clone(), s.clone()], seed, |t, v| t.mul(v[0], v[1]).unwrap()),
        check("add_bcast", vec![a.clone(), s.clone()], seed, |t, v| t.add(v[0], v[1]).unwrap()),
        check("sub", vec![a.clone(), full.clone()], seed, |t, v| t.sub(v[0], v[1]).unwrap()),
        check("div", vec![a.clone(), full.clone()], seed, |t, v| t.div(v[0], v[1]).unwrap()),
        check("scale_shift", vec![a], seed, |t, v| {
            let s = t.scale(v[0], -1.7);
            t.add_scalar(s, 0.3)
        }),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn activations(rng: &mut Rng64, seed: u64) -> f64 {
    let a = away_from(random([2, 4, 6, 6], rng, -3.0, 3.0), 0.0, 0.05);
    let pos = random([2, 4, 6, 6], rng, 0.2, 2.0);
    let shifted = away_from(a.clone(), 0.1, 0.05);
    [
        check("leaky_relu", vec![a.clone()], seed, |t, v| t.leaky_relu(v[0], 0.2)),
        check("softplus", vec![a.clone()], seed, |t, v| t.softplus(v[0])),
        check("exp", vec![a], seed, |t, v| t.exp(v[0])),
        check("pow", vec![pos], seed, |t, v| t.pow(v[0], 0.37)),
        check("clamp_min", vec![shifted], seed, |t, v| t.clamp_min(v[0], 0.1)),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn structural(rng: &mut Rng64, seed: u64) -> f64 {
    let a = random([2, 3, 6, 6], rng, -1.0, 1.0);
    let b = random([2, 2, 6, 6], rng, -1.0, 1.0);
    [
        check("concat", vec![a.clone(), b], seed, |t, v| t.concat_channels(&[v[0], v[1]]).unwrap()),
        check("slice", vec![a.clone()], seed, |t, v| t.slice_channels(v[0], 1, 2).unwrap()),
        check("mean_spatial", vec![a.clone()], seed, |t, v| t.mean_spatial(v[0])),
        check("mean", vec![a.clone()], seed, |t, v| t.mean(v[0])),
        check("sum", vec![a.clone()], seed, |t, v| t.sum(v[0])),
        check("avg_pool2", vec![a.clone()], seed, |t, v| t.avg_pool2(v[0])),
        check("crop", vec![a], seed, |t, v| t.crop(v[0], 4, 5).unwrap()),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn blur(rng: &mut Rng64, seed: u64) -> f64 {
    let a = random([1, 2, 14, 13], rng, -1.0, 1.0);
    check("gaussian_blur", vec![a], seed, |t, v| t.gaussian_blur(v[0]).unwrap())
}

/// Reference total bits in f64 with `mu` and `log_scale` broadcast over
/// space when they are per-channel.
fn reference_bits(v: &Tensor, mu: &Tensor, s: &Tensor) -> f64 {
    let [n, c, h, w] = v.shape();
    let per_channel = mu.shape() != v.shape();
    let mut total = 0.0;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (m, l) = if per_channel { (mu.at(0, ch, 0, 0), s.at(0, ch, 0, 0)) } else { (mu.at(b, ch, y, x), s.at(b, ch, y, x)) };
                    total += ivr_core::entropy::laplace_bits(v.at(b, ch, y, x) as f64, m as f64, (l as f64).max(-10.0));
                }
            }
        }
    }
    total
}

/// The rate is a single f32 sum of many terms, so the finite differences
/// are taken on an f64 evaluation of the same function.
fn check_laplace(v: Tensor, mu: Tensor, s: Tensor) -> f64 {
    let mut tape = Tape::new();
    let vars = [tape.input(v.clone()), tape.input(mu.clone()), tape.input(s.clone())];
    let loss = tape.laplace_bits(vars[0], vars[1], vars[2]).unwrap();
    let grads = tape.backward(loss, &mut ParamStore::new()).unwrap();
    let inputs = [v, mu, s];
    let mut worst = 0.0f64;
    for k in 0..3 {
        let analytic = grads.get(vars[k]).unwrap();
        let mut numeric = Vec::new();
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += EPS;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= EPS;
            // the actual perturbation after f32 rounding
            let h = plus[k].data()[i] as f64 - minus[k].data()[i] as f64;
            let fd = (reference_bits(&plus[0], &plus[1], &plus[2]) - reference_bits(&minus[0], &minus[1], &minus[2])) / h;
            numeric.push(fd);
        }
        let scale = numeric.iter().map(|v| v.abs()).fold(1e-2, f64::max);
        for (a, fd) in analytic.iter().zip(&numeric) {
            worst = worst.max((*a as f64 - fd).abs() / scale);
        }
    }
    worst
}

fn laplace(rng: &mut Rng64, _seed: u64) -> f64 {
    let v = random([2, 3, 4, 4], rng, -4.0, 4.0);
    let mu = random([2, 3, 4, 4], rng, -2.0, 2.0);
    let s = random([2, 3, 4, 4], rng, -1.0, 1.5);
    let e = check_laplace(v.clone(), mu, s);
    // per-channel parameters broadcast over space, as for the hyper prior
    let mu_c = random([1, 3, 1, 1], rng, -1.0, 1.0);
    let s_c = random([1, 3, 1, 1], rng, -0.5, 1.0);
    let v1 = Tensor::from_vec([1, 3, 4, 4], v.data()[..48].to_vec()).unwrap();
    e.max(check_laplace(v1, mu_c, s_c))
}

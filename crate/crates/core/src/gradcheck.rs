//! Double-precision finite-difference checks of every differentiable
//! operation, the adapter chain, the penalty and a whole tiny model, plus
//! a casewise check of the threshold pseudo-derivative.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{init_adapter, interpolate_update, jump_update, Adapter, BoundGate, GateScope, Gates, LayerId};
use crate::autodiff::{Tape, Var};
use crate::ella::ella_penalty;
use crate::error::Result;
use crate::harness::AdapterHook;
use crate::model::{build_model, Batch, ModelConfig};
use crate::tensor::Tensor;

/// Relative-error bound for finite-difference agreement.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-6;
/// Bandwidth used by the gate checks.
pub const EPSILON: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradcheckOptions {
    /// Negates the reference pseudo-derivative; the suite must then fail.
    pub perturb_psi: bool,
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Reference window `−τ/ε` on `(x−τ)/ε ∈ (−½, ½]`, zero elsewhere.
pub fn reference_psi(x: f64, tau: f64, eps: f64) -> f64 {
    let u = (x - tau) / eps;
    if u > -0.5 && u <= 0.5 {
        -tau / eps
    } else {
        0.0
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .expect("shape")
}

type Builder<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

fn scalar_loss(
    inputs: &[Tensor<f64>],
    wrt: &[usize],
    weight: Option<&Tensor<f64>>,
    f: &Builder,
) -> Result<(f64, Vec<Var>, Tape<f64>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if wrt.contains(&i) {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    let loss = match weight {
        Some(w) => {
            let wv = tape.constant(w.clone());
            let prod = tape.mul(out, wv)?;
            tape.sum(prod)
        }
        None => out,
    };
    Ok((tape.value(loss).item(), vars, tape, loss))
}

/// Compares tape gradients of `Σ W ⊙ f(inputs)` against central
/// differences for each input listed in `wrt`. Scalar outputs are used
/// as the loss directly.
fn check(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    wrt: &[usize],
    rng: &mut ChaCha8Rng,
    f: &Builder,
) -> Result<CheckResult> {
    let mut probe = Tape::new();
    let pv: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out = f(&mut probe, &pv)?;
    let out_shape = probe.value(out).shape().to_vec();
    let weight = (!probe.value(out).is_scalar()).then(|| random(rng, &out_shape, 1.0));
    let (_, vars, mut tape, loss) = scalar_loss(&inputs, wrt, weight.as_ref(), f)?;
    tape.backward(loss)?;
    let mut worst = 0.0f64;
    let mut cases = 0;
    for &i in wrt {
        let analytic = tape
            .grad(vars[i])
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let lp = scalar_loss(&plus, &[], weight.as_ref(), f)?.0;
            let lm = scalar_loss(&minus, &[], weight.as_ref(), f)?.0;
            numeric.push((lp - lm) / (2.0 * STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
        cases += numeric.len();
    }
    Ok(CheckResult {
        name: name.into(),
        cases,
        max_rel_error: worst,
        tolerance: TOLERANCE,
    })
}

/// Entries of `t` pushed at least `margin` away from `±tau` and from 0.
fn away_from(t: Tensor<f64>, tau: f64, margin: f64) -> Tensor<f64> {
    t.map(|v| {
        let mut v = v;
        for k in [-tau, 0.0, tau] {
            if (v - k).abs() < margin {
                v = k + if v >= k { margin } else { -margin };
            }
        }
        v
    })
}

fn elementwise_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let a = random(rng, &[3, 4], 1.0);
    let b = random(rng, &[4, 5], 1.0);
    out.push(check("matmul", vec![a.clone(), b], &[0, 1], rng, &|t, v| {
        t.matmul(v[0], v[1])
    })?);
    let c = random(rng, &[3, 4], 1.0);
    out.push(check("add", vec![a.clone(), c.clone()], &[0, 1], rng, &|t, v| {
        t.add(v[0], v[1])
    })?);
    out.push(check("sub", vec![a.clone(), c.clone()], &[0, 1], rng, &|t, v| {
        t.sub(v[0], v[1])
    })?);
    out.push(check("mul", vec![a.clone(), c], &[0, 1], rng, &|t, v| {
        t.mul(v[0], v[1])
    })?);
    out.push(check("neg", vec![a.clone()], &[0], rng, &|t, v| Ok(t.neg(v[0])))?);
    out.push(check("scale", vec![a.clone()], &[0], rng, &|t, v| {
        Ok(t.scale(v[0], 2.5))
    })?);
    let bias = random(rng, &[4], 1.0);
    out.push(check("add_row_bias", vec![a.clone(), bias], &[0, 1], rng, &|t, v| {
        t.add_row_bias(v[0], v[1])
    })?);
    let kinked = away_from(a.clone(), 0.0, 1e-3);
    out.push(check("relu", vec![kinked], &[0], rng, &|t, v| Ok(t.relu(v[0])))?);
    out.push(check("frobenius_sq", vec![a.clone()], &[0], rng, &|t, v| {
        Ok(t.frobenius_sq(v[0]))
    })?);
    out.push(check("sum", vec![a], &[0], rng, &|t, v| Ok(t.sum(v[0])))?);

    let x = random(rng, &[5, 6], 2.0);
    let gain = random(rng, &[6], 1.5);
    let lb = random(rng, &[6], 1.0);
    out.push(check("layer_norm", vec![x, gain, lb], &[0, 1, 2], rng, &|t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    })?);

    let (batch, seq, heads, d) = (2, 3, 2, 4);
    let q = random(rng, &[batch * seq, d], 1.0);
    let k = random(rng, &[batch * seq, d], 1.0);
    let vv = random(rng, &[batch * seq, d], 1.0);
    out.push(check("attention", vec![q, k, vv], &[0, 1, 2], rng, &|t, v| {
        t.attention(v[0], v[1], v[2], batch, seq, heads)
    })?);

    let table = random(rng, &[7, 3], 1.0);
    out.push(check("embedding", vec![table], &[0], rng, &|t, v| {
        t.embedding(v[0], &[0, 6, 2, 2])
    })?);
    let rows = random(rng, &[6, 3], 1.0);
    out.push(check("mean_pool", vec![rows], &[0], rng, &|t, v| t.mean_pool(v[0], 2))?);
    let logits = random(rng, &[4, 5], 2.0);
    out.push(check("cross_entropy", vec![logits], &[0], rng, &|t, v| {
        t.cross_entropy(v[0], &[0, 4, 2, 2])
    })?);
    Ok(out)
}

/// Gradients with respect to the gate input and to `τ` away from the
/// band, where the true function is locally smooth in both.
fn gate_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let tau = 0.4;
    let margin = 10.0 * EPSILON;
    let x = away_from(random(rng, &[4, 5], 1.0), tau, margin);
    let tau_t = Tensor::scalar(tau);
    let mut out = vec![check(
        "jumprelu",
        vec![x.clone(), tau_t.clone()],
        &[0, 1],
        rng,
        &|t, v| t.jumprelu(v[0], v[1], EPSILON),
    )?];
    out.push(check("jump_update", vec![x, tau_t], &[0, 1], rng, &|t, v| {
        jump_update(
            t,
            v[0],
            BoundGate {
                tau: v[1],
                epsilon: EPSILON,
            },
        )
    })?);
    Ok(out)
}

/// `A`, `B`, `τ` through `W + β·interp(A·B)` and through the penalty,
/// with `τ` placed at least `10ε` from every `|ΔW|`.
fn adapter_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut ad = init_adapter::<f64>(LayerId::query(0), 6, 5, 2, 8.0, 5)?;
    ad.b = random(rng, &[2, 5], 0.5);
    let dw = ad.dense_update();
    let tau = free_threshold(&dw, 10.0 * EPSILON);
    let base = random(rng, &[6, 5], 1.0);
    let past = random(rng, &[6, 5], 1.0);
    let beta = ad.beta;
    let inputs = vec![ad.a.clone(), ad.b.clone(), Tensor::scalar(tau), base, past];
    let mut out = Vec::new();
    for gamma in [0.0, 0.3, 1.0] {
        out.push(check(
            &format!("adapter_chain(gamma={gamma})"),
            inputs.clone(),
            &[0, 1, 2],
            rng,
            &|t, v| {
                let dense = t.matmul(v[0], v[1])?;
                let jump = jump_update(
                    t,
                    dense,
                    BoundGate {
                        tau: v[2],
                        epsilon: EPSILON,
                    },
                )?;
                let interp = interpolate_update(t, dense, jump, gamma)?;
                let scaled = t.scale(interp, beta);
                t.add(v[3], scaled)
            },
        )?);
    }
    out.push(check(
        "ella_penalty(dense)",
        inputs.clone(),
        &[0, 1, 4],
        rng,
        &|t, v| {
            let dense = t.matmul(v[0], v[1])?;
            ella_penalty(t, dense, v[4], 3.0)
        },
    )?);
    out.push(check("ella_penalty(jump)", inputs, &[0, 1, 2], rng, &|t, v| {
        let dense = t.matmul(v[0], v[1])?;
        let jump = jump_update(
            t,
            dense,
            BoundGate {
                tau: v[2],
                epsilon: EPSILON,
            },
        )?;
        ella_penalty(t, jump, v[4], 3.0)
    })?);
    Ok(out)
}

/// A threshold in the widest gap of the sorted magnitudes, at least
/// `margin` from each.
fn free_threshold(dw: &Tensor<f64>, margin: f64) -> f64 {
    let mut mags: Vec<f64> = dw.data().iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let (mut best, mut gap) = (mags[mags.len() / 2], 0.0);
    for w in mags.windows(2) {
        if w[1] - w[0] > gap {
            gap = w[1] - w[0];
            best = 0.5 * (w[0] + w[1]);
        }
    }
    assert!(gap > 2.0 * margin, "no threshold gap wider than {}", 2.0 * margin);
    best
}

/// Cross-entropy of a small model with two adapted layers at γ = 0.5,
/// differentiated with respect to one adapter's factors.
fn model_check(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let cfg = ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_heads: 2,
        n_blocks: 1,
        max_seq_len: 4,
        d_ff: 12,
        num_classes: 3,
    };
    let model = build_model::<f64>(&cfg, 21)?;
    let mut adapters: Vec<Adapter<f64>> = Vec::new();
    for (i, layer) in cfg.adapted_layers().into_iter().enumerate() {
        let mut ad = init_adapter(layer, 8, 8, 2, 4.0, 100 + i as u64)?;
        ad.b = random(rng, &[2, 8], 0.5);
        adapters.push(ad);
    }
    let mut pool: Vec<f64> = Vec::new();
    for ad in &adapters {
        pool.extend(ad.dense_update().data());
    }
    let tau = free_threshold(&Tensor::new(vec![pool.len()], pool)?, 10.0 * EPSILON);
    let mut gates = Gates::new(GateScope::Global, 1, EPSILON, 1e-8)?;
    gates.units[0].tau = tau;
    gates.units[0].initialized = true;
    let seqs: Vec<Vec<usize>> = (0..3)
        .map(|_| (0..4).map(|_| rng.random_range(0..11)).collect())
        .collect();
    let batch = Batch::from_sequences(seqs.iter().map(|s| s.as_slice()))?;
    let labels = [0usize, 2, 1];

    // Direct differentiation of the hooked factors.
    let mut tape = Tape::new();
    let mut hook = AdapterHook::new(&mut tape, &adapters, Some(&gates), 0.5, true)?;
    let logits = model.forward(&mut tape, &batch, &mut hook)?;
    let (a_var, b_var) = hook.factors()[0].expect("adapter used");
    let loss = tape.cross_entropy(logits, &labels)?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = tape
        .grad(a_var)
        .expect("A gradient")
        .into_data()
        .into_iter()
        .chain(tape.grad(b_var).expect("B gradient").into_data())
        .collect();

    let loss_at = |a: &Tensor<f64>, b: &Tensor<f64>| -> Result<f64> {
        let mut ads = adapters.clone();
        ads[0].a = a.clone();
        ads[0].b = b.clone();
        let mut tape = Tape::new();
        let mut hook = AdapterHook::new(&mut tape, &ads, Some(&gates), 0.5, false)?;
        let logits = model.forward(&mut tape, &batch, &mut hook)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        Ok(tape.value(loss).item())
    };
    let mut numeric = Vec::new();
    for which in 0..2 {
        let base = if which == 0 { &adapters[0].a } else { &adapters[0].b };
        for j in 0..base.numel() {
            let mut p = base.clone();
            p.data_mut()[j] += STEP;
            let mut m = base.clone();
            m.data_mut()[j] -= STEP;
            let (lp, lm) = if which == 0 {
                (loss_at(&p, &adapters[0].b)?, loss_at(&m, &adapters[0].b)?)
            } else {
                (loss_at(&adapters[0].a, &p)?, loss_at(&adapters[0].a, &m)?)
            };
            numeric.push((lp - lm) / (2.0 * STEP));
        }
    }
    Ok(CheckResult {
        name: "tiny_model(A,B)".into(),
        cases: numeric.len(),
        max_rel_error: relative_error(&analytic, &numeric),
        tolerance: TOLERANCE,
    })
}

/// In-band `τ` gradient: the upstream gradient at the gate output is
/// taken by finite differences, then contracted with the reference
/// pseudo-derivative and compared with the tape's `τ` gradient.
fn in_band_tau_check(rng: &mut ChaCha8Rng, perturb: bool) -> Result<CheckResult> {
    let tau = 0.3;
    let mut x = random(rng, &[4, 4], 1.0);
    for j in 0..6 {
        // Some entries fall strictly inside the band.
        x.data_mut()[j] = tau + (j as f64 - 2.5) * 0.1 * EPSILON;
    }
    let w = random(rng, &[4, 4], 1.0);
    let downstream = |t: &mut Tape<f64>, y: Var| -> Result<Var> {
        let wv = t.constant(w.clone());
        let sq = t.mul(y, y)?;
        let prod = t.mul(sq, wv)?;
        Ok(t.sum(prod))
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let tv = tape.param(Tensor::scalar(tau));
    let y = tape.jumprelu(xv, tv, EPSILON)?;
    let loss = downstream(&mut tape, y)?;
    tape.backward(loss)?;
    let analytic = tape.grad(tv).expect("tau gradient").item();

    let y_val = tape.value(y).clone();
    let mut expected = 0.0;
    for j in 0..y_val.numel() {
        let mut p = y_val.clone();
        p.data_mut()[j] += STEP;
        let mut m = y_val.clone();
        m.data_mut()[j] -= STEP;
        let eval = |v: &Tensor<f64>| -> Result<f64> {
            let mut t = Tape::new();
            let c = t.constant(v.clone());
            let l = downstream(&mut t, c)?;
            Ok(t.value(l).item())
        };
        let g = (eval(&p)? - eval(&m)?) / (2.0 * STEP);
        let mut psi = reference_psi(x.data()[j], tau, EPSILON);
        if perturb {
            psi = -psi;
        }
        expected += g * psi;
    }
    Ok(CheckResult {
        name: "jumprelu_tau(in-band, chain rule)".into(),
        cases: x.numel(),
        max_rel_error: relative_error(&[analytic], &[expected]),
        tolerance: TOLERANCE,
    })
}

/// Tape `τ` gradient of `Σ JumpReLU_τ(x)` against the reference window
/// on an `n × n` grid of `(x, τ)`; a case passes within one ulp.
pub fn psi_casewise_check(n: usize, eps: f64, perturb: bool) -> Result<CheckResult> {
    let mut worst_ulps = 0u64;
    let mut cases = 0;
    for i in 0..n {
        let tau = 0.01 + 0.99 * i as f64 / (n - 1).max(1) as f64;
        for j in 0..n {
            // Offsets span [−1.5ε, 1.5ε] so both sides of the window occur.
            let off = (-1.5 + 3.0 * j as f64 / (n - 1).max(1) as f64) * eps;
            let x = tau + off;
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::scalar(x));
            let tv = tape.param(Tensor::scalar(tau));
            let y = tape.jumprelu(xv, tv, eps)?;
            tape.backward(y)?;
            let got = tape.grad(tv).map(|g| g.item()).unwrap_or(0.0);
            let mut want = reference_psi(x, tau, eps);
            if perturb {
                want = -want;
            }
            worst_ulps = worst_ulps.max(ulp_distance(got, want));
            cases += 1;
        }
    }
    Ok(CheckResult {
        name: "psi_casewise(ulps)".into(),
        cases,
        max_rel_error: worst_ulps as f64,
        tolerance: 1.0,
    })
}

/// Distance in representable doubles; signed zeros coincide.
pub fn ulp_distance(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    if a.is_nan() || b.is_nan() || a.signum() != b.signum() {
        return u64::MAX;
    }
    a.to_bits().abs_diff(b.to_bits())
}

/// Runs the whole suite.
pub fn run_gradcheck(opts: GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(20240917);
    let mut out = elementwise_checks(&mut rng)?;
    out.extend(gate_checks(&mut rng)?);
    out.extend(adapter_checks(&mut rng)?);
    out.push(model_check(&mut rng)?);
    out.push(in_band_tau_check(&mut rng, opts.perturb_psi)?);
    out.push(psi_casewise_check(100, EPSILON, opts.perturb_psi)?);
    Ok(out)
}

/// One line per check with its worst error and verdict.
pub fn report(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        writeln!(
            s,
            "{:<36} cases={:<6} max_rel_error={:.3e} tol={:.0e} {}",
            r.name,
            r.cases,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        )
        .expect("string write");
    }
    s
}

//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use geoat_core::tensor::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst per-coordinate discrepancy found by a gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel: f64,
    pub max_abs: f64,
    pub checked: usize,
    pub failures: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-6;
pub const FD_EPS: f64 = 1e-5;

/// A coordinate passes if its absolute error is under the floor or its relative error
/// is under the tolerance.
pub fn coordinate_ok(analytic: f64, numeric: f64) -> (bool, f64, f64) {
    let abs = (analytic - numeric).abs();
    let rel = abs / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
    (abs <= ABS_FLOOR || rel < REL_TOL, rel, abs)
}

/// Central finite differences of the scalar `build(tape, inputs)` against the tape's
/// reverse sweep. The output is projected onto a fixed random direction when not scalar.
pub fn check_gradients<F>(inputs: &[Tensor], seed: u64, build: F) -> Result<GradReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let scalar_of = |tape: &mut Tape, out: Var| -> Result<Var, TensorError> {
        if tape.value(out).len() == 1 {
            return Ok(out);
        }
        let mut r = rng(seed ^ 0x9e37_79b9);
        let proj = random_tensor(&mut r, tape.value(out).shape(), 1.0);
        let p = tape.constant(proj);
        let m = tape.mul(out, p)?;
        tape.sum(m)
    };
    let eval = |xs: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect::<Result<_, _>>()?;
        let out = build(&mut tape, &vars)?;
        let l = scalar_of(&mut tape, out)?;
        Ok(tape.value(l).item().unwrap())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect::<Result<_, _>>()?;
    let out = build(&mut tape, &vars)?;
    let loss = scalar_of(&mut tape, out)?;
    let grads = tape.backward(loss)?;
    let mut report = GradReport { max_rel: 0.0, max_abs: 0.0, checked: 0, failures: 0 };
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_EPS;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_EPS);
            let (ok, rel, abs) = coordinate_ok(analytic.data()[j], numeric);
            report.checked += 1;
            if !ok {
                report.failures += 1;
            }
            if abs > ABS_FLOOR {
                report.max_rel = report.max_rel.max(rel);
            }
            report.max_abs = report.max_abs.max(abs);
        }
    }
    Ok(report)
}

fn dims(r: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(lo..=hi)).collect()
}

/// Gradient checks of every tape primitive on shapes drawn from `seed`.
pub fn primitive_suite(seed: u64) -> Vec<(&'static str, GradReport)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut run =
        |name: &'static str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>| {
            let rep = check_gradients(&inputs, seed, |t, v| f(t, v)).unwrap_or_else(|e| panic!("{name}: {e}"));
            out.push((name, rep));
        };

    let d = dims(&mut r, 3, 1, 4);
    run(
        "matmul",
        vec![random_tensor(&mut r, &[d[0], d[1]], 1.0), random_tensor(&mut r, &[d[1], d[2]], 1.0)],
        &|t, v| t.matmul(v[0], v[1]),
    );
    let b = r.random_range(1..=3);
    run(
        "matmul_batched",
        vec![random_tensor(&mut r, &[b, d[0], d[1]], 1.0), random_tensor(&mut r, &[b, d[1], d[2]], 1.0)],
        &|t, v| t.matmul(v[0], v[1]),
    );
    run(
        "matmul_broadcast_rhs",
        vec![random_tensor(&mut r, &[b, d[0], d[1]], 1.0), random_tensor(&mut r, &[d[1], d[2]], 1.0)],
        &|t, v| t.matmul(v[0], v[1]),
    );

    let s = dims(&mut r, 2, 1, 4);
    run(
        "add_broadcast",
        vec![random_tensor(&mut r, &[s[0], s[1]], 1.0), random_tensor(&mut r, &[s[1]], 1.0)],
        &|t, v| t.add(v[0], v[1]),
    );
    run(
        "add_general_broadcast",
        vec![random_tensor(&mut r, &[s[0], 1], 1.0), random_tensor(&mut r, &[1, s[1]], 1.0)],
        &|t, v| t.add(v[0], v[1]),
    );
    run("sub", vec![random_tensor(&mut r, &[s[0], s[1]], 1.0), random_tensor(&mut r, &[s[0], 1], 1.0)], &|t, v| {
        t.sub(v[0], v[1])
    });
    run(
        "mul_broadcast",
        vec![random_tensor(&mut r, &[s[0], s[1]], 1.0), random_tensor(&mut r, &[1, s[1]], 1.0)],
        &|t, v| t.mul(v[0], v[1]),
    );
    run(
        "mul_same",
        vec![random_tensor(&mut r, &[s[0], s[1]], 1.0), random_tensor(&mut r, &[s[0], s[1]], 1.0)],
        &|t, v| t.mul(v[0], v[1]),
    );
    run("scale", vec![random_tensor(&mut r, &[s[0], s[1]], 1.0)], &|t, v| t.scale(v[0], -1.7));

    let axis = r.random_range(0..2);
    let mut s2 = s.clone();
    s2[axis] = r.random_range(1..=3);
    run("concat", vec![random_tensor(&mut r, &s, 1.0), random_tensor(&mut r, &s2, 1.0)], &move |t, v| {
        t.concat(&[v[0], v[1]], axis)
    });
    let len3 = dims(&mut r, 3, 2, 4);
    let ax = r.random_range(0..3);
    run("mean", vec![random_tensor(&mut r, &len3, 1.0)], &move |t, v| t.mean(v[0], ax));
    run("sum", vec![random_tensor(&mut r, &len3, 1.0)], &|t, v| t.sum(v[0]));
    let start = r.random_range(0..len3[ax] - 1);
    run("slice", vec![random_tensor(&mut r, &len3, 1.0)], &move |t, v| t.slice(v[0], ax, start, 1));

    // Keep relu inputs away from the kink so the finite difference is well defined.
    let mut x = random_tensor(&mut r, &s, 1.0);
    x.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 0.05 {
            *v += 0.1
        }
    });
    run("relu", vec![x], &|t, v| t.relu(v[0]));
    run("sigmoid", vec![random_tensor(&mut r, &s, 4.0)], &|t, v| t.sigmoid(v[0]));
    run("softplus", vec![random_tensor(&mut r, &s, 4.0)], &|t, v| t.softplus(v[0]));
    run("softmax", vec![random_tensor(&mut r, &len3, 2.0)], &|t, v| t.softmax(v[0]));
    let cols = len3[2];
    let mut gates = random_tensor(&mut r, &[cols], 1.0).map(|g| g.abs() + 0.1);
    gates.data_mut()[0] = 0.0;
    run("gated_softmax", vec![random_tensor(&mut r, &len3, 2.0), gates], &|t, v| t.gated_softmax(v[0], v[1]));
    run(
        "layer_norm",
        vec![
            random_tensor(&mut r, &len3, 2.0),
            random_tensor(&mut r, &[cols], 1.5),
            random_tensor(&mut r, &[cols], 1.0),
        ],
        &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    );
    run("transpose", vec![random_tensor(&mut r, &len3, 1.0)], &|t, v| t.transpose(v[0]));
    run("swap_axes", vec![random_tensor(&mut r, &len3, 1.0)], &|t, v| t.swap_axes(v[0], 0, 2));
    let flat = len3.iter().product::<usize>();
    run("reshape", vec![random_tensor(&mut r, &len3, 1.0)], &move |t, v| t.reshape(v[0], &[flat]));
    let rows = r.random_range(2..=5);
    let idx: Vec<usize> = (0..4).map(|_| r.random_range(0..rows)).collect();
    run("embed_lookup", vec![random_tensor(&mut r, &[rows, 3], 1.0)], &move |t, v| t.embed_lookup(v[0], &idx));
    let targets = random_tensor(&mut r, &s, 1.0).map(|y| if y > 0.0 { 1.0 } else { 0.0 });
    run("bce_with_logits", vec![random_tensor(&mut r, &s, 3.0)], &move |t, v| t.bce_with_logits(v[0], &targets));
    out
}

use geoat_core::fusion::{Backbone, FusionModel, ModelConfig, PatchConfig, Variant};

/// Valid (variant, backbone) pairs; the token variant only exists on the patch backbone.
pub fn model_grid() -> Vec<(Variant, Backbone)> {
    let mut out = Vec::new();
    for v in Variant::ALL {
        for b in [Backbone::MelMlp, Backbone::Patch] {
            if !(v == Variant::EarlyToken && b == Backbone::MelMlp) {
                out.push((v, b));
            }
        }
    }
    out
}

/// A tiny model whose dimensions are drawn from `seed`.
pub fn tiny_config(variant: Variant, backbone: Backbone, seed: u64) -> ModelConfig {
    let mut r = rng(seed ^ 0x5eed);
    ModelConfig {
        variant,
        backbone,
        n_frames: r.random_range(8..=13),
        n_mels: r.random_range(4..=9),
        gsc_dim: r.random_range(3..=7),
        n_classes: r.random_range(2..=4),
        mlp_hidden: vec![r.random_range(3..=6), 2 * r.random_range(2..=3)],
        patch: PatchConfig {
            patch_t: 4,
            patch_f: 4,
            d_model: 4 * r.random_range(1..=2),
            layers: r.random_range(1..=2),
            heads: 2,
            ff_dim: r.random_range(3..=6),
        },
        gsc_hidden: vec![r.random_range(3..=6)],
        inter_heads: r.random_range(1..=2),
        late_lambda_init: 0.0,
        seed,
    }
}

/// Moves every trainable parameter off its initialization so zero-initialized paths are exercised.
pub fn jitter_params(model: &mut FusionModel, seed: u64, scale: f64) {
    let mut r = rng(seed ^ 0x7177);
    let names: Vec<String> = model.params().iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    for name in names {
        let id = model.params().id(&name).unwrap();
        let t = model.params_mut().value_mut(id);
        for v in t.data_mut() {
            *v += r.random_range(-scale..scale);
        }
        if name.ends_with("gsc_gate") {
            t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.1);
        }
    }
}

pub fn random_batch(cfg: &ModelConfig, batch: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut r = rng(seed ^ 0xba7c);
    let audio = random_tensor(&mut r, &[batch, cfg.n_frames, cfg.n_mels], 2.0);
    let gsc = random_tensor(&mut r, &[batch, cfg.gsc_dim], 1.0);
    let y = random_tensor(&mut r, &[batch, cfg.n_classes], 1.0).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    (audio, gsc, y)
}

pub fn model_loss(model: &FusionModel, audio: &Tensor, gsc: &Tensor, y: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let a = tape.constant(audio.clone());
    let g = tape.constant(gsc.clone());
    let out = model.forward(&mut tape, a, g).unwrap();
    let l = tape.bce_with_logits(out.logits, y).unwrap();
    tape.value(l).item().unwrap()
}

/// Parameter gradients of the BCE loss against central differences on up to
/// `coords` randomly chosen entries of every trainable parameter.
pub fn check_model_gradients(
    model: &FusionModel,
    audio: &Tensor,
    gsc: &Tensor,
    y: &Tensor,
    seed: u64,
    coords: usize,
) -> GradReport {
    let mut tape = Tape::new();
    let a = tape.constant(audio.clone());
    let g = tape.constant(gsc.clone());
    let out = model.forward(&mut tape, a, g).unwrap();
    let l = tape.bce_with_logits(out.logits, y).unwrap();
    let grads = tape.backward(l).unwrap().for_params(model.params());
    let mut r = rng(seed ^ 0xfdfd);
    let mut report = GradReport { max_rel: 0.0, max_abs: 0.0, checked: 0, failures: 0 };
    let mut probe = model.clone();
    for (i, p) in model.params().iter().enumerate() {
        if !p.trainable {
            continue;
        }
        let id = geoat_core::tensor::ParamId(i);
        for _ in 0..coords.min(p.value.len()) {
            let j = r.random_range(0..p.value.len());
            let orig = p.value.data()[j];
            probe.params_mut().value_mut(id).data_mut()[j] = orig + FD_EPS;
            let lp = model_loss(&probe, audio, gsc, y);
            probe.params_mut().value_mut(id).data_mut()[j] = orig - FD_EPS;
            let lm = model_loss(&probe, audio, gsc, y);
            probe.params_mut().value_mut(id).data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * FD_EPS);
            let (ok, rel, abs) = coordinate_ok(grads[i].data()[j], numeric);
            report.checked += 1;
            if !ok {
                report.failures += 1;
                eprintln!("{}[{j}]: analytic {} numeric {numeric}", p.name, grads[i].data()[j]);
            }
            if abs > ABS_FLOOR {
                report.max_rel = report.max_rel.max(rel);
            }
            report.max_abs = report.max_abs.max(abs);
        }
    }
    report
}

/// Scores drawn from a small grid so ties are common, with matching random labels.
pub fn random_instance(rng: &mut ChaCha8Rng, max_n: usize) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=max_n);
    let levels = rng.random_range(2..=8);
    let scores = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    let labels = (0..n).map(|_| rng.random_bool(0.4)).collect();
    (scores, labels)
}

/// Average precision from explicit ranks: an item's rank counts every higher score plus
/// equal scores at smaller indices.
pub fn ap_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n = scores.len();
    let rank = |i: usize| 1 + (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
    let pos: Vec<usize> = (0..n).filter(|&i| labels[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let total: f64 = pos
        .iter()
        .map(|&i| {
            let r = rank(i);
            pos.iter().filter(|&&p| rank(p) <= r).count() as f64 / r as f64
        })
        .sum();
    Some(total / pos.len() as f64)
}

/// Area under the ROC polyline traced over descending distinct thresholds.
pub fn auc_trapezoid(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let n = labels.len() as f64 - p;
    if p == 0.0 || n == 0.0 {
        return None;
    }
    let mut th: Vec<f64> = scores.to_vec();
    th.sort_by(|a, b| b.total_cmp(a));
    th.dedup();
    let (mut fx, mut fy, mut area) = (0.0, 0.0, 0.0);
    for t in th {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **l && **s >= t).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= t).count() as f64;
        let (x, y) = (fp / n, tp / p);
        area += (x - fx) * (y + fy) / 2.0;
        fx = x;
        fy = y;
    }
    Some(area)
}

/// Two-sided signed-rank p by listing every sign pattern over the given ranks.
pub fn wilcoxon_enumeration_p(ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len();
    let total: f64 = ranks.iter().sum();
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let t: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if t.min(total - t) <= w + 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

/// Two-sided Student-t tail by composite Simpson integration of the unnormalized density
/// on `x = tan θ`; the normalizer is integrated the same way, so no special functions enter.
pub fn t_tail_quadrature(t: f64, df: f64) -> f64 {
    let g = |x: f64| (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
    let integral = |from: f64| {
        let (a, b) = (from.atan(), std::f64::consts::FRAC_PI_2);
        let m = 200_000;
        let h = (b - a) / m as f64;
        let f = |th: f64| {
            let c = th.cos();
            if c <= 0.0 {
                0.0
            } else {
                g(th.tan()) / (c * c)
            }
        };
        let mut s = f(a) + f(b);
        for k in 1..m {
            s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    (integral(t.abs()) / integral(0.0)).min(1.0)
}

/// Manifest rows with independent per-label Bernoulli labels; no audio behind them.
pub fn label_manifest(n: usize, n_labels: usize, seed: u64) -> Vec<geoat_core::dataset::ClipRecord> {
    let mut r = rng(seed);
    let prev: Vec<f64> = (0..n_labels).map(|_| r.random_range(0.08..0.3)).collect();
    (0..n)
        .map(|i| geoat_core::dataset::ClipRecord {
            id: format!("clip{i:05}"),
            audio_path: format!("clips/{i}.wav").into(),
            labels: prev.iter().map(|&p| u8::from(r.random_bool(p))).collect(),
            geo: None,
            gsc_tags: None,
            gsc_embedding_ref: None,
        })
        .collect()
}

//! Independent oracles for the acceptance criteria. Each check returns
//! `Ok(detail)` or `Err(detail)` so the acceptance target can print one line
//! per criterion and the focused test files can assert on the same code.

use std::collections::BTreeMap;

use mmseg_core::blocks::{BlockConfig, Ctx, Encoder, Init};
use mmseg_core::checkpoint;
use mmseg_core::config::ExperimentConfig;
use mmseg_core::correlation::{correlation_loss, lcem, CorrelationNet, CorrelationParams, Cpem, Q_FLOOR};
use mmseg_core::experiments::{run_ablation, AblationPlan};
use mmseg_core::losses::{total_loss, total_loss_graph, LossWeights};
use mmseg_core::metrics::{dsc, hausdorff_with, HausdorffMode};
use mmseg_core::optim::Nadam;
use mmseg_core::phantom::{generate_dataset, split_dataset, PhantomSpec};
use mmseg_core::train::{predict, stream_rng, MissingStrategy, Trainer};
use mmseg_core::volume::preprocess;
use mmseg_core::{Case, LabelVolume, Mask, ModalityId, Mode, Model, ModelConfig, Region};
use mmseg_tensor::{ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

// ---------------------------------------------------------------- equations

/// `F = sum_p a_p * f_p + delta` evaluated with scalar loops, reading the
/// per-channel coefficients at voxel 0 after checking they are constant.
fn lcem_brute(coeffs: &[Tensor<f64>], delta: &Tensor<f64>, partners: &[Tensor<f64>]) -> Result<Vec<f64>, String> {
    let shape = delta.shape();
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let per_channel = |t: &Tensor<f64>, b: usize, ch: usize| -> Result<f64, String> {
        let base = (b * c + ch) * s;
        let v = t.data()[base];
        if t.data()[base..base + s].iter().any(|&x| x != v) {
            return Err(format!("coefficient map varies over space at sample {b}, channel {ch}"));
        }
        Ok(v)
    };
    let mut out = vec![0.0; n * c * s];
    for b in 0..n {
        for ch in 0..c {
            let d = per_channel(delta, b, ch)?;
            let a: Vec<f64> = coeffs.iter().map(|t| per_channel(t, b, ch)).collect::<Result<_, _>>()?;
            for v in 0..s {
                let i = (b * c + ch) * s + v;
                let mut acc = d;
                for (ap, fp) in a.iter().zip(partners) {
                    acc += ap * fp.data()[i];
                }
                out[i] = acc;
            }
        }
    }
    Ok(out)
}

/// Linear correlation expression against the scalar oracle on `draws`
/// random shapes, with coefficients produced by a randomly initialized
/// parameter estimator. Returns the worst absolute error.
pub fn lcem_error(draws: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..draws {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=3);
        let sp: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=4));
        let partners = rng.random_range(2..=3);
        let shape = [n, c, sp[0], sp[1], sp[2]];
        let mut init = Init::new(seed + k as u64);
        let cpem = Cpem::new(&mut init, "cpem", c, partners);
        let mut store = init.store.cast::<f64>();
        // nonzero biases so the additive term is exercised too
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with(".b") {
                for v in store.get_mut(id).data_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
            }
        }
        let own = rand_tensor(&mut rng, &shape, 2.0);
        let fs: Vec<Tensor<f64>> = (0..partners).map(|_| rand_tensor(&mut rng, &shape, 2.0)).collect();
        let mut ctx = Ctx::eval(&store);
        let own_v = ctx.input(own);
        let vars: Vec<Var> = fs.iter().map(|t| ctx.input(t.clone())).collect();
        let params = cpem.forward(&mut ctx, own_v).map_err(|e| e.to_string())?;
        let out = lcem(&mut ctx, &params, &vars).map_err(|e| e.to_string())?;
        let coeffs: Vec<Tensor<f64>> = params.coeffs.iter().map(|&a| ctx.value(a).clone()).collect();
        let expected = lcem_brute(&coeffs, ctx.value(params.delta), &fs)?;
        for (a, b) in ctx.value(out).data().iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }

        // also with arbitrary (not estimator-produced) per-channel maps
        let mut ctx = Ctx::eval(&store);
        let chan = |rng: &mut ChaCha8Rng| {
            let vals: Vec<f64> = (0..n * c).map(|_| rng.random_range(-3.0..3.0)).collect();
            let s: usize = sp.iter().product();
            Tensor::from_fn(&shape, |i| vals[i / s])
        };
        let coeffs: Vec<Tensor<f64>> = (0..partners).map(|_| chan(&mut rng)).collect();
        let delta = chan(&mut rng);
        let p = CorrelationParams {
            coeffs: coeffs.iter().map(|t| ctx.input(t.clone())).collect(),
            delta: ctx.input(delta.clone()),
        };
        let vars: Vec<Var> = fs.iter().map(|t| ctx.input(t.clone())).collect();
        let out = lcem(&mut ctx, &p, &vars).map_err(|e| e.to_string())?;
        let expected = lcem_brute(&coeffs, &delta, &fs)?;
        for (a, b) in ctx.value(out).data().iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Correlation loss of single-sample feature lists.
pub fn cc_loss(originals: &[Tensor<f64>], correlated: &[Tensor<f64>]) -> f64 {
    let store = ParamStore::new();
    let mut ctx = Ctx::eval(&store);
    let o: Vec<Var> = originals.iter().map(|t| ctx.input(t.clone())).collect();
    let c: Vec<Var> = correlated.iter().map(|t| ctx.input(t.clone())).collect();
    let l = correlation_loss(&mut ctx, &o, &c).expect("matching shapes");
    ctx.value(l).item()
}

fn two(a: f64, b: f64) -> Tensor<f64> {
    Tensor::new(&[1, 2, 1, 1, 1], vec![a, b])
}

/// KL on two-element distributions against closed forms, plus
/// nonnegativity on random draws.
pub fn kl_checks(draws: usize, seed: u64) -> Outcome {
    // logits (0, ln 3) give P = (1/4, 3/4); zeros give Q = (1/2, 1/2)
    let got = cc_loss(&[two(0.0, 3f64.ln())], &[two(0.0, 0.0)]);
    let want = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
    let e1 = (got - want).abs();
    // P = (1/2, 1/2), Q = (1/5, 4/5)
    let got = cc_loss(&[two(1.0, 1.0)], &[two(0.0, 4f64.ln())]);
    let want = 0.5 * (0.5f64 / 0.2).ln() + 0.5 * (0.5f64 / 0.8).ln();
    let e2 = (got - want).abs();
    // sum over modalities
    let got = cc_loss(&[two(0.0, 3f64.ln()), two(1.0, 1.0)], &[two(0.0, 0.0), two(0.0, 4f64.ln())]);
    let want = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln() + 0.5 * 2.5f64.ln() + 0.5 * 0.625f64.ln();
    let e3 = (got - want).abs();
    // Q below the floor is clamped before the logarithm
    let got = cc_loss(&[two(0.0, 0.0)], &[two(0.0, 40.0)]);
    let want = 0.5 * (0.5f64.ln() - Q_FLOOR.ln()) + 0.5 * (0.5f64.ln() - (1.0 / (1.0 + (-40f64).exp())).ln());
    let e4 = (got - want).abs();
    let worst = e1.max(e2).max(e3).max(e4);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_kl = f64::INFINITY;
    for _ in 0..draws {
        let n = rng.random_range(1..=3);
        let shape = [n, rng.random_range(1..=3), rng.random_range(1..=3), 2, 2];
        let m = rng.random_range(1..=4);
        let o: Vec<Tensor<f64>> = (0..m).map(|_| rand_tensor(&mut rng, &shape, 3.0)).collect();
        let c: Vec<Tensor<f64>> = (0..m).map(|_| rand_tensor(&mut rng, &shape, 3.0)).collect();
        min_kl = min_kl.min(cc_loss(&o, &c));
    }
    ensure(
        worst <= 1e-6 && min_kl >= 0.0,
        format!("closed-form error {worst:.2e}, minimum over {draws} draws {min_kl:.3e}"),
    )
}

/// Superposition of the weighted total: unit components recover the
/// weights and any combination equals the weighted sum of the parts.
pub fn total_loss_checks(draws: usize, seed: u64) -> Outcome {
    let w = LossWeights::default();
    let unit = |d, g, c| total_loss(d, g, c, &w).expect("finite");
    let weights_ok = unit(1.0, 0.0, 0.0) == 1.0 && unit(0.0, 1.0, 0.0) == 0.1 && unit(0.0, 0.0, 1.0) == 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let store = ParamStore::<f64>::new();
    for _ in 0..draws {
        let (d, g, c): (f64, f64, f64) = (rng.random_range(0.0..2.0), rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
        let whole = unit(d, g, c);
        let parts = unit(d, 0.0, 0.0) + unit(0.0, g, 0.0) + unit(0.0, 0.0, c);
        worst = worst.max((whole - parts).abs());
        worst = worst.max((whole - (d + 0.1 * g + 0.1 * c)).abs());
        let mut ctx = Ctx::eval(&store);
        let vd = ctx.input(Tensor::scalar(d));
        let vg = ctx.input(Tensor::scalar(g));
        let vc = ctx.input(Tensor::scalar(c));
        let t = total_loss_graph(&mut ctx, vd, Some(vg), Some(vc), &w);
        worst = worst.max((ctx.value(t).item() - whole).abs());
        let t = total_loss_graph(&mut ctx, vd, None, None, &w);
        worst = worst.max((ctx.value(t).item() - d).abs());
    }
    let non_finite_rejected = total_loss(f64::NAN, 0.0, 0.0, &w).is_err();
    ensure(
        weights_ok && worst <= 1e-12 && non_finite_rejected,
        format!("unit weights 1/0.1/0.1 {weights_ok}, superposition error {worst:.1e}, NaN rejected {non_finite_rejected}"),
    )
}

// ------------------------------------------------------------------ metrics

pub fn random_mask(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Mask {
    let n: usize = shape.iter().product();
    let data = match rng.random_range(0..10) {
        0 => vec![false; n],
        1..=4 => {
            let p = rng.random_range(0.02..0.6);
            (0..n).map(|_| rng.random_bool(p)).collect()
        }
        _ => {
            // a random box, sometimes touching the volume edge
            let lo: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..shape[a]));
            let hi: [usize; 3] = std::array::from_fn(|a| rng.random_range(lo[a]..shape[a]) + 1);
            let [_, h, w] = shape;
            (0..n)
                .map(|i| {
                    let p = [i / (h * w), (i / w) % h, i % w];
                    (0..3).all(|a| p[a] >= lo[a] && p[a] < hi[a])
                })
                .collect()
        }
    };
    Mask::new(shape, data).unwrap()
}

fn points(m: &Mask) -> Vec<[i64; 3]> {
    let [_, h, w] = m.shape();
    m.data()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| [(i / (h * w)) as i64, ((i / w) % h) as i64, (i % w) as i64])
        .collect()
}

/// Voxels of `m` with a face neighbour outside `m` or outside the volume.
fn boundary_points(m: &Mask) -> Vec<[i64; 3]> {
    let shape = m.shape();
    let inside = |p: [i64; 3]| {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < shape[a]) && m.get(p[0] as usize, p[1] as usize, p[2] as usize)
    };
    let steps = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
    points(m)
        .into_iter()
        .filter(|p| steps.iter().any(|s| !inside([p[0] + s[0], p[1] + s[1], p[2] + s[2]])))
        .collect()
}

pub fn brute_dsc(a: &Mask, b: &Mask) -> f64 {
    let (pa, pb) = (points(a), points(b));
    if pa.is_empty() && pb.is_empty() {
        return 1.0;
    }
    let inter = pa.iter().filter(|p| pb.contains(p)).count();
    2.0 * inter as f64 / (pa.len() + pb.len()) as f64
}

fn directed_brute(from: &[[i64; 3]], to: &[[i64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            let d2 = to.iter().map(|q| (0..3).map(|a| (p[a] - q[a]).pow(2)).sum::<i64>()).min().unwrap();
            (d2 as f64).sqrt()
        })
        .collect()
}

pub fn brute_hausdorff(a: &Mask, b: &Mask, mode: HausdorffMode) -> f64 {
    let [d, h, w] = a.shape();
    match (a.count(), b.count()) {
        (0, 0) => return 0.0,
        (0, _) | (_, 0) => return ((d * d + h * h + w * w) as f64).sqrt(),
        _ => {}
    }
    let (ba, bb) = (boundary_points(a), boundary_points(b));
    let mut all = directed_brute(&ba, &bb);
    all.extend(directed_brute(&bb, &ba));
    match mode {
        HausdorffMode::Max => all.iter().copied().fold(0.0, f64::max),
        HausdorffMode::Percentile95 => {
            all.sort_by(f64::total_cmp);
            let pos = 0.95 * (all.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            all[lo] + (all[hi] - all[lo]) * (pos - lo as f64)
        }
    }
}

/// Mask from explicit voxel coordinates.
pub fn mask_of(shape: [usize; 3], on: &[[usize; 3]]) -> Mask {
    let mut data = vec![false; shape.iter().product()];
    for p in on {
        data[(p[0] * shape[1] + p[1]) * shape[2] + p[2]] = true;
    }
    Mask::new(shape, data).unwrap()
}

/// Metric implementations against the brute-force oracles on `pairs`
/// random 8^3 mask pairs, plus the fixed cases.
pub fn metric_checks(pairs: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = Vec::new();
    for k in 0..pairs {
        let a = random_mask(&mut rng, [8, 8, 8]);
        let b = random_mask(&mut rng, [8, 8, 8]);
        let d = dsc(&a, &b).unwrap();
        if d != brute_dsc(&a, &b) {
            mismatches.push(format!("pair {k}: dsc {d} vs {}", brute_dsc(&a, &b)));
        }
        for mode in [HausdorffMode::Max, HausdorffMode::Percentile95] {
            let h = hausdorff_with(&a, &b, mode).unwrap();
            let want = brute_hausdorff(&a, &b, mode);
            if h != want {
                mismatches.push(format!("pair {k}: {mode:?} {h} vs {want}"));
            }
        }
    }
    let shape = [8, 8, 8];
    let p = mask_of(shape, &[[0, 0, 0]]);
    let q = mask_of(shape, &[[0, 3, 4]]);
    let hd345 = hausdorff_with(&p, &q, HausdorffMode::Max).unwrap();
    let mut id_ok = true;
    for _ in 0..20 {
        let a = random_mask(&mut rng, shape);
        id_ok &= hausdorff_with(&a, &a, HausdorffMode::Max).unwrap() == 0.0 && dsc(&a, &a).unwrap() == 1.0;
    }
    let detail = format!(
        "{} mismatches over {pairs} pairs; (0,0,0)-(0,3,4) -> {hd345}; identity -> 0 {id_ok}{}",
        mismatches.len(),
        mismatches.first().map_or(String::new(), |m| format!("; first: {m}"))
    );
    ensure(mismatches.is_empty() && hd345 == 5.0 && id_ok, detail)
}

// ------------------------------------------------------------- architecture

fn eval_inputs(ctx: &mut Ctx<f32>, batch: usize, shape: [usize; 3], mods: &[ModalityId], seed: u64) -> BTreeMap<ModalityId, Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mods.iter()
        .map(|&m| (m, ctx.input(Tensor::from_fn(&[batch, 1, shape[0], shape[1], shape[2]], |_| rng.random_range(-1.0f32..1.0)))))
        .collect()
}

/// Shapes produced by every arm for one block configuration: encoder level
/// shapes and channels, segmentation and generation outputs, and the
/// probability simplex.
pub fn shape_arithmetic(cfg: &BlockConfig, units: [usize; 3], batch: usize, seed: u64) -> Result<(), String> {
    let unit = 1usize << (cfg.depth - 1);
    let input = units.map(|u| u * unit);
    for mode in Mode::ALL {
        let (model, store) =
            Model::new(ModelConfig { block: cfg.clone(), input_shape: input, mode }, seed).map_err(|e| e.to_string())?;
        let mut ctx = Ctx::eval(&store);
        let missing = ModalityId::ALL[(seed % 4) as usize];
        let mods: Vec<ModalityId> =
            ModalityId::ALL.into_iter().filter(|&m| mode == Mode::Replace || m != missing).collect();
        let inputs = eval_inputs(&mut ctx, batch, input, &mods, seed);
        let fwd = model.forward(&mut ctx, &inputs, missing).map_err(|e| e.to_string())?;
        let full = [batch, 4, input[0], input[1], input[2]];
        if ctx.shape(fwd.seg.probabilities) != full || ctx.shape(fwd.seg.logits) != full {
            return Err(format!("{mode}: segmentation shape {:?}", ctx.shape(fwd.seg.probabilities)));
        }
        if fwd.seg.aux_logits.len() != cfg.depth {
            return Err(format!("{mode}: {} heads for depth {}", fwd.seg.aux_logits.len(), cfg.depth));
        }
        for (l, &a) in fwd.seg.aux_logits.iter().enumerate() {
            let s = cfg.level_shape(input, l);
            if ctx.shape(a) != [batch, 4, s[0], s[1], s[2]] {
                return Err(format!("{mode}: head {l} shape {:?}", ctx.shape(a)));
            }
        }
        let b = cfg.level_shape(input, cfg.depth - 1);
        let bottleneck = [batch, cfg.bottleneck_filters(), b[0], b[1], b[2]];
        if cfg.bottleneck_filters() != cfg.base_filters << (cfg.depth - 1) {
            return Err("bottleneck width".into());
        }
        for (m, &f) in &fwd.features {
            if ctx.shape(f) != bottleneck {
                return Err(format!("{mode}: {m} bottleneck {:?}, want {bottleneck:?}", ctx.shape(f)));
            }
        }
        if fwd.features.len() != mode.segmenter_inputs() {
            return Err(format!("{mode}: {} feature streams", fwd.features.len()));
        }
        if let Some(g) = fwd.generated {
            if ctx.shape(g) != [batch, 1, input[0], input[1], input[2]] {
                return Err(format!("{mode}: generated shape {:?}", ctx.shape(g)));
            }
        }
        let simplex = simplex_error(ctx.value(fwd.seg.probabilities));
        if simplex > 1e-6 {
            return Err(format!("{mode}: probabilities off the simplex by {simplex:.2e}"));
        }
        // per-level encoder shapes
        let enc = &model.encoders[&mods[0]];
        let cond = enc.is_conditioned().then_some(missing.condition_index());
        let levels = enc.forward(&mut ctx, inputs[&mods[0]], cond).map_err(|e| e.to_string())?;
        for (l, &v) in levels.iter().enumerate() {
            let s = cfg.level_shape(input, l);
            if ctx.shape(v) != [batch, cfg.filters(l), s[0], s[1], s[2]] {
                return Err(format!("{mode}: encoder level {l} shape {:?}", ctx.shape(v)));
            }
        }
    }
    Ok(())
}

/// Largest deviation of a `[N, K, ...]` class distribution from the simplex.
pub fn simplex_error(p: &Tensor<f32>) -> f64 {
    let (n, k) = (p.shape()[0], p.shape()[1]);
    let s = p.spatial_len();
    let mut worst: f64 = 0.0;
    for b in 0..n {
        for i in 0..s {
            let mut sum = 0.0f64;
            for c in 0..k {
                let v = p.data()[(b * k + c) * s + i] as f64;
                if v < 0.0 {
                    return f64::INFINITY;
                }
                sum += v;
            }
            worst = worst.max((sum - 1.0).abs());
        }
    }
    worst
}

pub fn random_block_config(rng: &mut ChaCha8Rng) -> BlockConfig {
    let depth = rng.random_range(2..=3);
    let rates = (0..rng.random_range(1..=2)).map(|_| rng.random_range(1..=3)).collect();
    BlockConfig {
        base_filters: rng.random_range(1..=3),
        depth,
        dilation_rates: rates,
        dropout_rate: 0.1,
        kernel_size: if rng.random_bool(0.8) { 3 } else { 1 },
    }
}

fn gen_model(shape: [usize; 3], seed: u64) -> (Model, ParamStore<f32>) {
    let cfg = BlockConfig { base_filters: 2, depth: 3, dilation_rates: vec![1, 2], dropout_rate: 0.1, kernel_size: 3 };
    Model::new(ModelConfig { block: cfg, input_shape: shape, mode: Mode::DirectCcCg }, seed).unwrap()
}

/// Generator output for fixed inputs under each of the four condition
/// indices; all pairs must differ.
pub fn condition_changes_output() -> Outcome {
    let shape = [8, 8, 8];
    let (model, store) = gen_model(shape, 3);
    let mut ctx = Ctx::eval(&store);
    let mods = [ModalityId::T2, ModalityId::T1c, ModalityId::Flair];
    let inputs = eval_inputs(&mut ctx, 1, shape, &mods, 9);
    let generator = model.generator.as_ref().unwrap();
    let mut outs = Vec::new();
    for idx in 0..4 {
        let levels: Vec<Vec<Var>> =
            mods.iter().map(|m| model.encoders[m].forward(&mut ctx, inputs[m], Some(idx)).unwrap()).collect();
        let g = generator.decode(&mut ctx, &levels).unwrap();
        outs.push(ctx.value(g).clone());
    }
    let mut min_diff = f32::INFINITY;
    for i in 0..4 {
        for j in i + 1..4 {
            min_diff = min_diff.min(outs[i].max_abs_diff(&outs[j]));
        }
    }
    let out_of_range = model.encoders[&mods[0]].forward(&mut ctx, inputs[&mods[0]], Some(4)).is_err();
    ensure(min_diff > 1e-6 && out_of_range, format!("smallest pairwise output change {min_diff:.3e}; index 4 rejected {out_of_range}"))
}

/// Perturbing one parameter of a real-modality encoder must move both the
/// generated volume and the segmentation computed from a fixed synthetic
/// volume: the generator and the segmenter read the same encoder.
/// Generator-only and segmenter-only parameters serve as controls.
pub fn encoder_aliasing() -> Outcome {
    let shape = [8, 8, 8];
    let (model, store) = gen_model(shape, 4);
    let missing = ModalityId::T1;
    let mods = [ModalityId::T2, ModalityId::T1c, ModalityId::Flair];
    let run = |store: &ParamStore<f32>| {
        let mut ctx = Ctx::eval(store);
        let inputs = eval_inputs(&mut ctx, 1, shape, &mods, 5);
        let g = model.generate(&mut ctx, &inputs, missing).unwrap();
        let fixed = ctx.input(Tensor::from_fn(&[1, 1, 8, 8, 8], |i| ((i % 7) as f32 - 3.0) / 3.0));
        let seg = model.segment(&mut ctx, &inputs, fixed, missing, true).unwrap();
        (ctx.value(g).clone(), ctx.value(seg.logits).clone())
    };
    let (g0, s0) = run(&store);
    let bump = |id| {
        let mut s = store.clone();
        for v in s.get_mut(id).data_mut() {
            *v += 0.05;
        }
        run(&s)
    };
    let mut lines = Vec::new();
    let mut ok = true;
    for m in mods {
        for id in model.encoder_params(m).into_iter().take(3) {
            let (g, s) = bump(id);
            let (dg, ds) = (g.max_abs_diff(&g0), s.max_abs_diff(&s0));
            ok &= dg > 0.0 && ds > 0.0;
            if dg == 0.0 || ds == 0.0 {
                lines.push(format!("{} moved generator {dg:.1e} segmenter {ds:.1e}", store.name(id)));
            }
        }
    }
    // controls: the generator head does not touch segment() with a fixed
    // synthetic input, and segmenter heads do not touch the generator
    let gen_head = model.generator.as_ref().unwrap().head.w;
    let (g, s) = bump(gen_head);
    let control_gen = g.max_abs_diff(&g0) > 0.0 && s.max_abs_diff(&s0) == 0.0;
    let seg_head = model.segmenter.heads[0].w;
    let (g, s) = bump(seg_head);
    let control_seg = g.max_abs_diff(&g0) == 0.0 && s.max_abs_diff(&s0) > 0.0;
    let shared: Vec<_> = model.encoder_params(ModalityId::T2);
    let distinct_missing = model.encoder_params(missing).iter().all(|id| !shared.contains(id));
    ensure(
        ok && control_gen && control_seg && distinct_missing,
        format!(
            "shared encoder params move both paths {ok}; generator-only control {control_gen}; segmenter-only control {control_seg}; per-modality encoders disjoint {distinct_missing}{}",
            lines.first().map_or(String::new(), |l| format!("; {l}"))
        ),
    )
}

/// ET within TC within WT for a label volume.
pub fn nested(labels: &LabelVolume) -> bool {
    let (wt, tc, et) = (labels.region(Region::WholeTumor), labels.region(Region::TumorCore), labels.region(Region::Enhancing));
    (0..labels.data().len()).all(|i| (!et.data()[i] || tc.data()[i]) && (!tc.data()[i] || wt.data()[i]))
}

/// Nesting on random label volumes, phantom truths and untrained
/// predictions; simplex on every prediction.
pub fn nesting_and_simplex(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = true;
    for _ in 0..50 {
        let lv = LabelVolume::new([4, 5, 6], (0..120).map(|_| rng.random_range(0..4u8)).collect()).unwrap();
        ok &= nested(&lv);
    }
    let spec = PhantomSpec::new([16, 16, 16], 4, seed);
    let cases: Vec<Case> = generate_dataset(&spec).unwrap().iter().map(|c| preprocess(c, None).unwrap()).collect();
    ok &= cases.iter().all(|c| nested(c.labels()));
    let mut worst_simplex: f64 = 0.0;
    for mode in Mode::ALL {
        let cfg = BlockConfig { base_filters: 2, depth: 2, dilation_rates: vec![1], dropout_rate: 0.1, kernel_size: 3 };
        let (model, store) = Model::new(ModelConfig { block: cfg, input_shape: [16, 16, 16], mode }, seed).unwrap();
        for (k, case) in cases.iter().enumerate() {
            let p = predict(&model, &store, case, ModalityId::ALL[k]).unwrap();
            ok &= nested(&p.labels);
            let mut ctx = Ctx::eval(&store);
            let missing = ModalityId::ALL[k];
            let inputs = mmseg_core::train::model_inputs::<f32>(mode, &[case], missing, true).unwrap();
            let vars: BTreeMap<ModalityId, Var> = inputs.into_iter().map(|(m, t)| (m, ctx.input(t))).collect();
            let fwd = model.forward(&mut ctx, &vars, missing).unwrap();
            worst_simplex = worst_simplex.max(simplex_error(ctx.value(fwd.seg.probabilities)));
        }
    }
    ensure(ok && worst_simplex <= 1e-6, format!("nesting holds {ok}; worst simplex deviation {worst_simplex:.2e}"))
}

// ------------------------------------------------------------------ phantom

/// Solve the normal equations of an affine least-squares fit of `target`
/// on `inputs`; returns the largest absolute residual.
pub fn affine_residual(inputs: &[&[f32]], target: &[f32]) -> f64 {
    let k = inputs.len() + 1;
    let row = |i: usize| -> Vec<f64> {
        let mut r: Vec<f64> = inputs.iter().map(|x| x[i] as f64).collect();
        r.push(1.0);
        r
    };
    let mut a = vec![vec![0.0; k + 1]; k];
    for i in 0..target.len() {
        let r = row(i);
        for p in 0..k {
            for q in 0..k {
                a[p][q] += r[p] * r[q];
            }
            a[p][k] += r[p] * target[i] as f64;
        }
    }
    // Gauss-Jordan with partial pivoting; singular directions get zero
    for col in 0..k {
        let piv = (col..k).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, piv);
        if a[col][col].abs() < 1e-9 {
            continue;
        }
        let d = a[col][col];
        for v in a[col].iter_mut() {
            *v /= d;
        }
        for r in 0..k {
            if r != col {
                let f = a[r][col];
                for c in 0..=k {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let coef: Vec<f64> = (0..k).map(|p| if a[p][p].abs() < 1e-9 { 0.0 } else { a[p][k] }).collect();
    (0..target.len())
        .map(|i| {
            let fit: f64 = row(i).iter().zip(&coef).map(|(x, c)| x * c).sum();
            (fit - target[i] as f64).abs()
        })
        .fold(0.0, f64::max)
}

/// Every modality of noise-free normalized phantoms is an affine function
/// of the other three.
pub fn recoverability(cases: usize, seed: u64) -> Outcome {
    let mut spec = PhantomSpec::new([32, 32, 32], cases, seed);
    spec.noise_std = 0.0;
    let mut worst: f64 = 0.0;
    for raw in generate_dataset(&spec).unwrap() {
        let case = preprocess(&raw, None).unwrap();
        for m in ModalityId::ALL {
            let others: Vec<&[f32]> = m.others().iter().map(|o| case.modality(*o).unwrap().data()).collect();
            worst = worst.max(affine_residual(&others, case.modality(m).unwrap().data()));
        }
    }
    // the same fit on noisy data must not be exact, or the check is vacuous
    let mut noisy = PhantomSpec::new([16, 16, 16], 1, seed);
    noisy.noise_std = 0.05;
    let case = preprocess(&generate_dataset(&noisy).unwrap()[0], None).unwrap();
    let others: Vec<&[f32]> = ModalityId::T1.others().iter().map(|o| case.modality(*o).unwrap().data()).collect();
    let noisy_res = affine_residual(&others, case.modality(ModalityId::T1).unwrap().data());
    ensure(
        worst <= 1e-5 && noisy_res > 1e-2,
        format!("max residual {worst:.2e} over {cases} noise-free cases x 4 targets (noisy control {noisy_res:.2e})"),
    )
}

// ----------------------------------------------------------------- training

/// Train only the correlation modules on frozen bottleneck features of a
/// noise-free phantom; returns the loss before and after `steps` updates.
/// With `shared` one encoder serves all four modalities, so channel `c`
/// means the same feature in every modality and the phantom's linear
/// cross-modality relation carries over channel by channel.
pub fn cc_only_training_with(steps: usize, lr: f64, seed: u64, shared: bool) -> (f64, f64) {
    let mut spec = PhantomSpec::new([16, 16, 16], 1, seed);
    spec.noise_std = 0.0;
    let case = preprocess(&generate_dataset(&spec).unwrap()[0], None).unwrap();
    let cfg = BlockConfig { base_filters: 4, depth: 2, dilation_rates: vec![1, 2], dropout_rate: 0.1, kernel_size: 3 };
    let mut init = Init::new(seed);
    let shared_enc = shared.then(|| Encoder::new(&mut init, "enc", 1, &cfg, None));
    let encoders: BTreeMap<ModalityId, Encoder> = ModalityId::ALL
        .into_iter()
        .map(|m| match &shared_enc {
            Some(e) => (m, e.clone()),
            None => (m, Encoder::new(&mut init, &format!("enc.{}", m.token()), 1, &cfg, None)),
        })
        .collect();
    let net = CorrelationNet::new(&mut init, "cc", cfg.bottleneck_filters(), 4);
    let mut store = init.store;
    let features: BTreeMap<ModalityId, Tensor<f32>> = {
        let mut ctx = Ctx::eval(&store);
        encoders
            .iter()
            .map(|(&m, enc)| {
                let v = case.modality(m).unwrap();
                let x = ctx.input(Tensor::new(&[1, 1, 16, 16, 16], v.data().to_vec()));
                let levels = enc.forward(&mut ctx, x, None).unwrap();
                (m, ctx.value(*levels.last().unwrap()).clone())
            })
            .collect()
    };
    let mut opt = Nadam::new(&store);
    let loss_at = |store: &ParamStore<f32>, learn: bool| {
        let mut ctx = Ctx::eval(store);
        let fs: BTreeMap<ModalityId, Var> = features.iter().map(|(&m, t)| (m, ctx.input(t.clone()))).collect();
        let corr = net.correlated_representations(&mut ctx, &fs).unwrap();
        let o: Vec<Var> = fs.values().copied().collect();
        let c: Vec<Var> = corr.values().copied().collect();
        let l = correlation_loss(&mut ctx, &o, &c).unwrap();
        let value = ctx.value(l).item() as f64;
        (value, learn.then(|| ctx.graph.backward(l)))
    };
    let (initial, _) = loss_at(&store, false);
    for _ in 0..steps {
        let (_, g) = loss_at(&store, true);
        opt.step(&mut store, &g.unwrap(), lr);
    }
    (initial, loss_at(&store, false).0)
}

pub fn cc_only_check() -> Outcome {
    let (before, after) = cc_only_training_with(200, 1e-2, 3, true);
    let (ib, ia) = cc_only_training_with(200, 1e-2, 3, false);
    ensure(
        after <= 0.5 * before && ia < ib,
        format!(
            "shared frozen encoder: L_cc {before:.3} -> {after:.3} ({:.1}% of start); independent encoders: {ib:.3} -> {ia:.3} ({:.1}%)",
            100.0 * after / before,
            100.0 * ia / ib
        ),
    )
}

fn loss_curve(cfg: &ExperimentConfig, train: &[Case], val: &[Case], epochs: usize) -> (Trainer, Vec<f64>) {
    let mut tr = Trainer::new(cfg.clone()).unwrap();
    for _ in 0..epochs {
        tr.run_epoch(train, val).unwrap();
    }
    let curve = tr.history.iter().flat_map(|r| r.step_losses.iter().copied().chain([r.val_loss])).collect();
    (tr, curve)
}

pub fn tiny_experiment(mode: Mode) -> (ExperimentConfig, Vec<Case>, Vec<Case>) {
    let mut cfg = ExperimentConfig::default();
    cfg.mode = mode;
    cfg.block.base_filters = 2;
    cfg.block.depth = 2;
    cfg.data.shape = [8, 8, 8];
    cfg.data.cases = 6;
    cfg.train.missing = MissingStrategy::UniformRandom;
    cfg.train.max_epochs = 10;
    let cases: Vec<Case> = generate_dataset(&cfg.phantom_spec()).unwrap().iter().map(|c| preprocess(c, None).unwrap()).collect();
    let split = split_dataset(&cases, 0.8, 1).unwrap();
    (cfg, split.train, split.val)
}

/// Two identically seeded trainers produce identical curves; a trainer
/// saved and restored mid-run finishes within 1e-10 of an uninterrupted
/// one.
pub fn determinism_and_round_trip(dir: &std::path::Path) -> Outcome {
    let (cfg, train, val) = tiny_experiment(Mode::DirectCcCg);
    let (a, ca) = loss_curve(&cfg, &train, &val, 3);
    let (_, cb) = loss_curve(&cfg, &train, &val, 3);
    let identical = ca == cb;

    let (mut half, _) = loss_curve(&cfg, &train, &val, 1);
    let path = dir.join("mid.ckpt");
    checkpoint::save(&half, &path).unwrap();
    let mut restored = checkpoint::load(&path).unwrap();
    let state_equal = restored.params.ids().all(|id| restored.params.get(id) == half.params.get(id))
        && restored.optimizer.m == half.optimizer.m
        && restored.optimizer.v == half.optimizer.v
        && restored.history == half.history;
    for _ in 0..2 {
        restored.run_epoch(&train, &val).unwrap();
        half.run_epoch(&train, &val).unwrap();
    }
    let curve = |t: &Trainer| -> Vec<f64> { t.history.iter().flat_map(|r| r.step_losses.iter().copied().chain([r.val_loss])).collect() };
    let cr = curve(&restored);
    let curve_dev = cr.iter().zip(&ca).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let param_dev = restored
        .params
        .ids()
        .map(|id| restored.params.get(id).max_abs_diff(a.params.get(id)) as f64)
        .fold(0.0, f64::max);
    ensure(
        identical && state_equal && cr.len() == ca.len() && curve_dev <= 1e-10 && param_dev <= 1e-10,
        format!(
            "same-seed curves identical {identical} ({} values); restored state equal {state_equal}; resumed curve deviation {curve_dev:.1e}, parameter deviation {param_dev:.1e}",
            ca.len()
        ),
    )
}

/// Whole-tumor Dice and generation L1 reached by single-case training.
#[derive(Clone, Copy, Debug)]
pub struct OverfitResult {
    pub wt_dsc: f64,
    pub l1: f64,
    pub steps: usize,
}

/// Train the generator arm on one 32^3 case with T1c withheld, stopping as
/// soon as both targets are met; evaluated every 25 steps.
pub fn overfit(noise: f64, max_steps: usize, need_l1: bool) -> OverfitResult {
    let mut cfg = ExperimentConfig::default();
    cfg.mode = Mode::DirectCcCg;
    cfg.block.base_filters = 4;
    cfg.data.cases = 1;
    cfg.data.noise_std = noise;
    cfg.train.initial_lr = 5e-3;
    let case = preprocess(&generate_dataset(&cfg.phantom_spec()).unwrap()[0], None).unwrap();
    let mut tr = Trainer::new(cfg).unwrap();
    let m = ModalityId::T1c;
    let truth = case.modality(m).unwrap().clone();
    let mut last = OverfitResult { wt_dsc: 0.0, l1: f64::INFINITY, steps: 0 };
    for s in 1..=max_steps {
        tr.step(&[&case], m, stream_rng(1, s as u64)).unwrap();
        if s % 25 == 0 || s == max_steps {
            let p = predict(&tr.model, &tr.params, &case, m).unwrap();
            let wt = dsc(&p.labels.region(Region::WholeTumor), &case.labels().region(Region::WholeTumor)).unwrap();
            let g = p.generated.unwrap();
            let l1 = g.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / g.len() as f64;
            last = OverfitResult { wt_dsc: wt, l1, steps: s };
            if wt > 0.95 && (!need_l1 || l1 < 0.05) {
                break;
            }
        }
    }
    last
}

// ----------------------------------------------------------------- ablation

/// Configuration of one ablation seed: 12 cases of 32^3 split 8 / 1 / 3.
pub fn ablation_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.block.base_filters = 4;
    cfg.data.cases = 12;
    cfg.data.seed = 100 + seed;
    cfg.data.train_fraction = 0.75;
    cfg.train.initial_lr = 2e-3;
    cfg.train.max_epochs = 40;
    cfg.train.seed = seed;
    cfg
}

/// Mean AVG-DSC of the direct and generator arms for one seed.
pub fn ablation_seed(seed: u64) -> Result<(f64, f64, usize), String> {
    let cfg = ablation_config(seed);
    let cases: Vec<Case> = generate_dataset(&cfg.phantom_spec())
        .map_err(|e| e.to_string())?
        .iter()
        .map(|c| preprocess(c, None).unwrap())
        .collect();
    let split = split_dataset(&cases, cfg.data.train_fraction, cfg.data.seed).map_err(|e| e.to_string())?;
    let plan = AblationPlan::new(cfg);
    let result = run_ablation(&plan, &split.train, &split.val, &split.test, None, |_| {}).map_err(|e| e.to_string())?;
    let direct = result.mean_avg_dsc(Mode::Direct).ok_or("no Direct rows")?;
    let cg = result.mean_avg_dsc(Mode::DirectCcCg).ok_or("no generator rows")?;
    Ok((direct, cg, split.train.len()))
}

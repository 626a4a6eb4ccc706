//! Helpers shared by the integration tests: deterministic pseudo-random
//! tensors, tiny configurations and a finite-difference gradient checker.

#![allow(dead_code)]

pub mod oracles;

use std::collections::BTreeMap;

use mmseg_core::blocks::{AttentionFusion, BlockConfig, ConditionEmbedding, ConvBlock, Ctx, Init, ResDilBlock};
use mmseg_core::correlation::{correlation_loss, lcem, Cpem};
use mmseg_core::losses::{dice_loss, LossWeights};
use mmseg_core::phantom::{generate_case, PhantomSpec};
use mmseg_core::train::{loss_graph, stream_rng};
use mmseg_core::volume::preprocess;
use mmseg_core::{Case, ModalityId, Mode, Model, ModelConfig, Result};
use mmseg_tensor::{ParamStore, Tensor, Var};

/// Uniform values in `[-1, 1)` from a xorshift stream.
pub fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

/// Smallest useful network: two levels, two base filters.
pub fn tiny_blocks() -> BlockConfig {
    BlockConfig { base_filters: 2, depth: 2, dilation_rates: vec![1, 2], dropout_rate: 0.1, kernel_size: 3 }
}

pub fn tiny_case(shape: [usize; 3], seed: u64, noise: f64) -> Case {
    let mut spec = PhantomSpec::new(shape, 1, seed);
    spec.noise_std = noise;
    spec.tumor_radius_range = (1.0, (shape[0] as f64 / 2.0 - 1.0).max(1.0));
    preprocess(&generate_case(&spec, 0).unwrap(), None).unwrap()
}

#[derive(Clone, Copy, Debug)]
pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
}

/// Five-point central difference, fourth order in `h`.
fn stencil(h: f64, f: impl Fn(f64) -> f64) -> f64 {
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

/// Central-difference check of `loss = sum(r * f(inputs))` with respect to
/// every parameter in `store` and every input tensor. At most `per_tensor`
/// evenly spaced elements of each tensor are perturbed. Dropout runs with a
/// fixed mask so the function is deterministic.
pub fn grad_check(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    per_tensor: usize,
    f: impl Fn(&mut Ctx<f64>, &[Var]) -> Result<Var>,
) -> GradReport {
    let run = |store: &ParamStore<f64>, inputs: &[Tensor<f64>], grads: bool| {
        let mut ctx = Ctx::train(store, stream_rng(5, 0));
        let vars: Vec<Var> = inputs.iter().map(|t| ctx.graph.variable(t.clone())).collect();
        let y = f(&mut ctx, &vars).expect("forward");
        let r = ctx.graph.constant(pseudo(ctx.graph.shape(y), 99));
        let weighted = ctx.graph.mul(y, r);
        let loss = ctx.graph.sum(weighted);
        let value = ctx.value(loss).item();
        let grads = grads.then(|| {
            let g = ctx.graph.backward(loss);
            let p: Vec<Tensor<f64>> = store
                .ids()
                .map(|id| g.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
                .collect();
            let x: Vec<Tensor<f64>> =
                vars.iter().map(|&v| g.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(ctx.graph.shape(v)))).collect();
            (p, x)
        });
        (value, grads)
    };
    let (_, grads) = run(store, inputs, true);
    let (pg, xg) = grads.unwrap();
    // small enough to stay clear of activation kinks, large enough that
    // round-off does not swamp gradients of order 1e-8
    let h = 3e-5;
    let picks = |n: usize| (0..n).step_by((n / per_tensor).max(1));
    let mut report = GradReport { max_rel: 0.0, checked: 0 };
    let mut record = |analytic: f64, numeric: f64| {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        report.max_rel = report.max_rel.max(rel);
        report.checked += 1;
    };
    for (k, id) in store.ids().enumerate() {
        for j in picks(store.get(id).numel()) {
            let numeric = stencil(h, |d| {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[j] += d;
                run(&s, inputs, false).0
            });
            record(pg[k].data()[j], numeric);
        }
    }
    for (k, t) in inputs.iter().enumerate() {
        for j in picks(t.numel()) {
            let numeric = stencil(h, |d| {
                let mut x = inputs.to_vec();
                x[k].data_mut()[j] += d;
                run(store, &x, false).0
            });
            record(xg[k].data()[j], numeric);
        }
    }
    report
}

/// Finite-difference reports for every block and loss plus the full
/// generator-arm objective, all on inputs of at most 4^3 voxels.
pub fn gradient_suite() -> Vec<(&'static str, GradReport)> {
    let cfg = tiny_blocks();
    let mut out = Vec::new();

    let mut init = Init::new(1);
    let block = ConvBlock::new(&mut init, "cb", 2, 3, &cfg);
    let store = init.store.cast::<f64>();
    out.push(("conv_block", grad_check(&store, &[pseudo(&[2, 2, 4, 4, 4], 1)], 64, |c, v| block.forward(c, v[0]))));

    let mut init = Init::new(2);
    let res = ResDilBlock::new(&mut init, "rd", 3, 2, &cfg);
    let store = init.store.cast::<f64>();
    out.push(("res_dil_block", grad_check(&store, &[pseudo(&[1, 3, 4, 4, 4], 2)], 64, |c, v| res.forward(c, v[0]))));

    let mut init = Init::new(3);
    let embed = ConditionEmbedding::new(&mut init, "emb", [2, 2, 2]);
    let store = init.store.cast::<f64>();
    out.push((
        "condition_embed",
        grad_check(&store, &[pseudo(&[2, 1, 2, 2, 2], 3)], 64, |c, v| {
            let m = embed.forward(c, 2, 2)?;
            Ok(c.graph.mul(m, v[0]))
        }),
    ));

    let mut init = Init::new(4);
    let fusion = AttentionFusion::new(&mut init, "att", 3, 2);
    let store = init.store.cast::<f64>();
    let feats: Vec<Tensor<f64>> = (0..3).map(|i| pseudo(&[2, 2, 2, 2, 2], 10 + i)).collect();
    out.push(("attention_fusion", grad_check(&store, &feats, 64, |c, v| fusion.forward(c, v))));

    let mut init = Init::new(5);
    let cpem = Cpem::new(&mut init, "cpem", 2, 3);
    let store = init.store.cast::<f64>();
    let feats: Vec<Tensor<f64>> = (0..4).map(|i| pseudo(&[2, 2, 2, 2, 2], 20 + i)).collect();
    out.push((
        "cpem",
        grad_check(&store, &feats, 64, |c, v| {
            let params = cpem.forward(c, v[0])?;
            lcem(c, &params, &v[1..])
        }),
    ));

    let probs = pseudo(&[2, 4, 3, 3, 3], 30).map(|x| 0.1 + 0.4 * (x + 1.0));
    let target = one_hot_pattern(&[2, 4, 3, 3, 3]);
    out.push((
        "dice_loss",
        grad_check(&ParamStore::new(), &[probs], 216, |c, v| {
            let t = c.input(target.clone());
            dice_loss(c, v[0], t)
        }),
    ));

    let feats: Vec<Tensor<f64>> = (0..6).map(|i| pseudo(&[2, 2, 2, 2, 2], 40 + i)).collect();
    out.push(("correlation_loss", grad_check(&ParamStore::new(), &feats, 32, |c, v| correlation_loss(c, &v[..3], &v[3..]))));

    let mc = ModelConfig { block: cfg.clone(), input_shape: [4, 4, 4], mode: Mode::DirectCcCg };
    let (model, store) = Model::new(mc, 6).unwrap();
    let store = store.cast::<f64>();
    let case = tiny_case([4, 4, 4], 3, 0.05);
    out.push((
        "direct_cc_cg_graph",
        grad_check(&store, &[], 3, |c, _| Ok(loss_graph(&model, c, &[&case], ModalityId::Flair, &LossWeights::default())?.total)),
    ));
    out
}

/// One-hot target with every class present.
pub fn one_hot_pattern(shape: &[usize]) -> Tensor<f64> {
    let (n, k) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let mut t = Tensor::zeros(shape);
    for b in 0..n {
        for i in 0..s {
            let c = (i * 7 + b * 3) % k;
            t.data_mut()[(b * k + c) * s + i] = 1.0;
        }
    }
    t
}

/// `[1, 1, d, h, w]` inputs of `case` for every modality but `missing`.
pub fn available_inputs(case: &Case, missing: ModalityId) -> BTreeMap<ModalityId, Tensor<f32>> {
    case.modalities()
        .iter()
        .filter(|(m, _)| **m != missing)
        .map(|(&m, v)| {
            let [d, h, w] = v.shape();
            (m, Tensor::new(&[1, 1, d, h, w], v.data().to_vec()))
        })
        .collect()
}

//! Correlation constraint: parameter estimation (CPEM), the linear
//! correlation expression (LCEM) and the KL correlation loss.
//!
//! For modality `i` with partners `j < k < l` (by condition index),
//! `F_i = alpha * f_j + beta * f_k + gamma * f_l + delta`, with each
//! coefficient a per-channel vector broadcast over space. With only three
//! modalities the expression keeps two partner terms and `delta`.

use std::collections::BTreeMap;

use mmseg_tensor::{ParamId, Scalar, Var};

use crate::blocks::{Ctx, Init, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::volume::ModalityId;

/// Lower clamp applied to `Q` before the logarithm.
pub const Q_FLOOR: f64 = 1e-8;

/// Two fully connected layers on the pooled representation.
#[derive(Clone, Debug)]
pub struct Cpem {
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
    pub channels: usize,
    /// Number of partner coefficient maps (the additive term comes on top).
    pub partners: usize,
}

/// Correlation parameters for one modality, each broadcast to the feature
/// shape. `coeffs[p]` multiplies the `p`-th partner; `delta` is additive.
#[derive(Clone, Debug)]
pub struct CorrelationParams {
    pub coeffs: Vec<Var>,
    pub delta: Var,
}

impl Cpem {
    pub fn new(init: &mut Init, name: &str, channels: usize, partners: usize) -> Self {
        let hidden = 2 * channels;
        let out = (partners + 1) * channels;
        let fc1 = (init.he(&format!("{name}.fc1.w"), &[hidden, channels], channels), init.zeros(&format!("{name}.fc1.b"), &[hidden]));
        let fc2 = (
            init.normal(&format!("{name}.fc2.w"), &[out, hidden], 0.1 / (hidden as f64).sqrt()),
            init.zeros(&format!("{name}.fc2.b"), &[out]),
        );
        Self { fc1, fc2, channels, partners }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, f: Var) -> Result<CorrelationParams> {
        let shape = ctx.shape(f);
        if shape.len() != 5 || shape[1] != self.channels {
            return Err(Error::Shape(format!("cpem expects [N, {}, d, h, w], got {shape:?}", self.channels)));
        }
        let n = shape[0];
        let pooled = ctx.graph.spatial_mean(f);
        let (w1, b1) = (ctx.p(self.fc1.0), ctx.p(self.fc1.1));
        let h = ctx.graph.linear(pooled, w1, b1);
        let h = ctx.graph.leaky_relu(h, LEAKY_SLOPE);
        let (w2, b2) = (ctx.p(self.fc2.0), ctx.p(self.fc2.1));
        let out = ctx.graph.linear(h, w2, b2);
        let c = self.channels;
        let mut maps: Vec<Var> = (0..=self.partners)
            .map(|p| {
                let block = ctx.graph.slice_channels(out, p * c, (p + 1) * c);
                let block = ctx.graph.reshape(block, &[n, c, 1, 1, 1]);
                ctx.graph.expand(block, &shape)
            })
            .collect();
        let delta = maps.pop().expect("at least the additive term");
        Ok(CorrelationParams { coeffs: maps, delta })
    }
}

/// Linear correlation expression: `sum_p coeffs[p] * partners[p] + delta`.
pub fn lcem<T: Scalar>(ctx: &mut Ctx<T>, params: &CorrelationParams, partners: &[Var]) -> Result<Var> {
    if partners.len() != params.coeffs.len() {
        return Err(Error::Shape(format!("{} partners for {} coefficient maps", partners.len(), params.coeffs.len())));
    }
    let shape = ctx.shape(params.delta);
    if partners.iter().any(|&f| ctx.graph.shape(f) != shape.as_slice()) {
        return Err(Error::Shape("lcem operands disagree in shape".into()));
    }
    let mut acc = params.delta;
    for (&a, &f) in params.coeffs.iter().zip(partners) {
        let term = ctx.graph.mul(a, f);
        acc = ctx.graph.add(acc, term);
    }
    Ok(acc)
}

/// Log of the feature distribution: log-softmax over all elements of each
/// sample, `[N, ...] -> [N, E]`.
pub fn feature_log_distribution<T: Scalar>(ctx: &mut Ctx<T>, f: Var) -> Var {
    let shape = ctx.shape(f);
    let flat = ctx.graph.reshape(f, &[shape[0], shape[1..].iter().product()]);
    ctx.graph.log_softmax(flat)
}

/// `sum_i KL(P_i || Q_i)` with `P_i` from `originals[i]` and `Q_i` from
/// `correlated[i]`; each KL is summed over elements and averaged over the
/// batch.
pub fn correlation_loss<T: Scalar>(ctx: &mut Ctx<T>, originals: &[Var], correlated: &[Var]) -> Result<Var> {
    if originals.len() != correlated.len() || originals.is_empty() {
        return Err(Error::Shape(format!("{} originals vs {} correlated", originals.len(), correlated.len())));
    }
    let mut total = None;
    for (&f, &cf) in originals.iter().zip(correlated) {
        if ctx.graph.shape(f) != ctx.graph.shape(cf) {
            return Err(Error::Shape("original and correlated features disagree in shape".into()));
        }
        let n = ctx.graph.shape(f)[0];
        let log_p = feature_log_distribution(ctx, f);
        let log_q = feature_log_distribution(ctx, cf);
        let log_q = ctx.graph.clamp_min(log_q, Q_FLOOR.ln());
        let p = ctx.graph.exp(log_p);
        let ratio = ctx.graph.sub(log_p, log_q);
        let terms = ctx.graph.mul(p, ratio);
        let kl = ctx.graph.sum(terms);
        let kl = ctx.graph.scale(kl, 1.0 / n as f64);
        total = Some(match total {
            None => kl,
            Some(t) => ctx.graph.add(t, kl),
        });
    }
    Ok(total.expect("nonempty"))
}

/// One CPEM per modality slot. The partner count is fixed at construction:
/// three for the full set of four modalities, two when only three are
/// present.
#[derive(Clone, Debug)]
pub struct CorrelationNet {
    pub cpems: BTreeMap<ModalityId, Cpem>,
    pub partners: usize,
}

/// Partners of `i` among `keys`, in ascending condition index order.
pub fn partner_order(keys: &[ModalityId], i: ModalityId) -> Vec<ModalityId> {
    let mut others: Vec<ModalityId> = keys.iter().copied().filter(|&m| m != i).collect();
    others.sort_by_key(|m| m.condition_index());
    others
}

impl CorrelationNet {
    pub fn new(init: &mut Init, name: &str, channels: usize, modalities: usize) -> Self {
        assert!((2..=4).contains(&modalities));
        let partners = modalities - 1;
        let cpems = ModalityId::ALL
            .into_iter()
            .map(|m| (m, Cpem::new(init, &format!("{name}.{}", m.token()), channels, partners)))
            .collect();
        Self { cpems, partners }
    }

    /// Apply CPEM then LCEM to every modality of `features`.
    pub fn correlated_representations<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        features: &BTreeMap<ModalityId, Var>,
    ) -> Result<BTreeMap<ModalityId, Var>> {
        if features.len() != self.partners + 1 {
            return Err(Error::Modalities(format!(
                "correlation needs {} feature maps, got {}",
                self.partners + 1,
                features.len()
            )));
        }
        let keys: Vec<ModalityId> = features.keys().copied().collect();
        let mut out = BTreeMap::new();
        for (&m, &f) in features {
            let params = self.cpems[&m].forward(ctx, f)?;
            let partners: Vec<Var> = partner_order(&keys, m).iter().map(|p| features[p]).collect();
            out.insert(m, lcem(ctx, &params, &partners)?);
        }
        Ok(out)
    }
}

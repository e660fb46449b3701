//! Modality-specific margin losses, their weighted combination with token
//! cross-entropy, the beta schedule, and the ablation variants.

use std::fmt;
use std::str::FromStr;

use convqg_grad::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::auxiliary::Auxiliary;
use crate::constraints::render;
use crate::model::{ModelConfig, ParamStore, Session};
use crate::toyworld::Example;
use crate::vocab::{Vocab, BOS, EOS};
use crate::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaSchedule {
    Fixed { value: f64 },
    /// `start * 10^epoch`.
    Geometric10 { start: f64 },
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule::Geometric10 { start: 10.0 }
    }
}

impl BetaSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        match *self {
            BetaSchedule::Fixed { value } => value,
            BetaSchedule::Geometric10 { start } => start * 10f64.powi(epoch as i32),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            BetaSchedule::Fixed { value } => format!("{value}"),
            BetaSchedule::Geometric10 { start } if start == 10.0 => "geometric10".into(),
            BetaSchedule::Geometric10 { start } => format!("geometric10@{start}"),
        }
    }
}

impl FromStr for BetaSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("geometric10") || s.eq_ignore_ascii_case("linear") {
            return Ok(BetaSchedule::Geometric10 { start: 10.0 });
        }
        if let Some(start) = s.strip_prefix("geometric10@") {
            let start: f64 = start.parse().map_err(|_| Error::Config(format!("invalid beta `{s}`")))?;
            return Ok(BetaSchedule::Geometric10 { start });
        }
        let value: f64 = s.parse().map_err(|_| Error::Config(format!("invalid beta `{s}`")))?;
        Ok(BetaSchedule::Fixed { value })
    }
}

/// Ablation variants: cross-entropy only, image negative, text negative, both.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    B,
    I,
    T,
    IT,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::B, Variant::I, Variant::T, Variant::IT];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::B => "B",
            Variant::I => "I",
            Variant::T => "T",
            Variant::IT => "IT",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "B" => Ok(Variant::B),
            "I" => Ok(Variant::I),
            "T" => Ok(Variant::T),
            "IT" => Ok(Variant::IT),
            _ => Err(Error::Config(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub margin: f64,
    pub beta: BetaSchedule,
    pub variant: Variant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.2, margin: 0.5, beta: BetaSchedule::default(), variant: Variant::IT }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin {} must be positive", self.margin)));
        }
        match self.beta {
            BetaSchedule::Fixed { value } if !(value >= 0.0 && value.is_finite()) => {
                Err(Error::Config(format!("beta {value} must be non-negative")))
            }
            BetaSchedule::Geometric10 { start } if !(start > 0.0 && start.is_finite()) => {
                Err(Error::Config(format!("geometric beta start {start} must be positive")))
            }
            _ => Ok(()),
        }
    }

    /// Weight of the text term after variant gating; `None` drops the contrastive term.
    pub fn effective_alpha(&self) -> Option<f64> {
        match self.variant {
            Variant::B => None,
            Variant::I => Some(0.0),
            Variant::T => Some(1.0),
            Variant::IT => Some(self.alpha),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cl_img: f64,
    pub cl_txt: f64,
    pub cl: f64,
    pub cel: f64,
    pub total: f64,
    pub beta: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub epoch: usize,
    pub cl_img: f64,
    pub cl_txt: f64,
    pub cl: f64,
    pub cel: f64,
    pub beta: f64,
    pub total: f64,
}

impl LogLine {
    pub fn new(step: usize, epoch: usize, b: &LossBreakdown) -> Self {
        Self { step, epoch, cl_img: b.cl_img, cl_txt: b.cl_txt, cl: b.cl, cel: b.cel, beta: b.beta, total: b.total }
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_dims(q_it: &[f64], q_gt: &[f64], q_neg: &[f64]) -> Result<()> {
    if q_it.len() != q_gt.len() || q_it.len() != q_neg.len() {
        return Err(Error::Input(format!(
            "embedding dimensions differ: {}, {}, {}",
            q_it.len(),
            q_gt.len(),
            q_neg.len()
        )));
    }
    Ok(())
}

/// `max(|q_it - q_gt| - |q_it - q_neg| + m, 0)`.
pub fn margin_loss(q_it: &[f64], q_gt: &[f64], q_neg: &[f64], margin: f64) -> Result<f64> {
    check_dims(q_it, q_gt, q_neg)?;
    Ok((l2(q_it, q_gt) - l2(q_it, q_neg) + margin).max(0.0))
}

/// Margin loss with the image-only question as the negative.
pub fn cl_img(q_it: &[f64], q_gt: &[f64], q_i: &[f64], margin: f64) -> Result<f64> {
    margin_loss(q_it, q_gt, q_i, margin)
}

/// Margin loss with the text-only question as the negative.
pub fn cl_txt(q_it: &[f64], q_gt: &[f64], q_t: &[f64], margin: f64) -> Result<f64> {
    margin_loss(q_it, q_gt, q_t, margin)
}

pub fn combine_cl(cl_txt: f64, cl_img: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(alpha * cl_txt + (1.0 - alpha) * cl_img)
}

pub fn total_loss(cl: f64, cel: f64, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("beta {beta} must be non-negative")));
    }
    Ok((beta * cl + cel) / 2.0)
}

/// Differentiable margin loss; only `q_it` needs to carry gradient.
pub fn margin_loss_var<F: Real>(g: &mut Graph<F>, q_it: Var, q_gt: Var, q_neg: Var, margin: f64) -> Result<Var> {
    let pos = g.l2_distance(q_it, q_gt)?;
    let neg = g.l2_distance(q_it, q_neg)?;
    let diff = g.sub(pos, neg)?;
    let shifted = g.add_scalar(diff, F::lit(margin));
    Ok(g.relu_hinge(shifted))
}

/// Everything one example contributes to training, resolved once.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub id: String,
    pub patches: Tensor<f64>,
    pub constraint_ids: Vec<usize>,
    /// `[BOS] question`
    pub input_ids: Vec<usize>,
    /// `question [EOS]`
    pub target_ids: Vec<usize>,
    pub q_gt: Vec<f64>,
    pub q_i: Vec<f64>,
    pub q_t: Vec<f64>,
}

pub fn prepare(examples: &[Example], vocab: &Vocab, aux: &Auxiliary, config: &ModelConfig) -> Result<Vec<PreparedExample>> {
    if aux.dim() != config.d_sent {
        return Err(Error::Config(format!(
            "sentence embedder width {} differs from d_sent {}",
            aux.dim(),
            config.d_sent
        )));
    }
    examples
        .iter()
        .map(|ex| {
            let t_prime = render(&ex.constraint)?;
            let constraint_ids = vocab.encode(&t_prime);
            let question = vocab.encode(&ex.question);
            if question.is_empty() || constraint_ids.is_empty() {
                return Err(Error::Input(format!("example {} has an empty question or constraint", ex.id)));
            }
            if question.len() + 1 > config.max_len || constraint_ids.len() > config.max_len {
                return Err(Error::Input(format!("example {} exceeds max_len {}", ex.id, config.max_len)));
            }
            let mut input_ids = vec![BOS];
            input_ids.extend(&question);
            let mut target_ids = question;
            target_ids.push(EOS);
            let [gt, qi, qt] = aux.targets(ex)?;
            Ok(PreparedExample {
                id: ex.id.clone(),
                patches: ex.visual.patches()?,
                constraint_ids,
                input_ids,
                target_ids,
                q_gt: gt.vector,
                q_i: qi.vector,
                q_t: qt.vector,
            })
        })
        .collect()
}

fn vector_const<F: Real>(g: &mut Graph<F>, v: &[f64]) -> Var {
    g.constant(Tensor::vector(v.iter().map(|&x| F::lit(x)).collect()))
}

/// Builds the loss of one example into `session` and returns `(total, breakdown)`.
///
/// Under variant B the margin terms are computed for reporting only; they do
/// not enter the total, so the projection head receives no gradient.
pub fn example_loss<F: Real>(
    session: &mut Session<'_, F>,
    ex: &PreparedExample,
    loss: &LossConfig,
    beta: f64,
) -> Result<(Var, LossBreakdown)> {
    let patches: Tensor<F> = ex.patches.cast();
    let e_i = session.encode_image(&patches)?;
    let e_it = session.encode_text(&ex.constraint_ids, e_i)?;
    joint_loss(session, e_it, ex, loss, beta)
}

/// [`example_loss`] from an already computed joint embedding.
pub fn joint_loss<F: Real>(
    session: &mut Session<'_, F>,
    e_it: Var,
    ex: &PreparedExample,
    loss: &LossConfig,
    beta: f64,
) -> Result<(Var, LossBreakdown)> {
    let states = session.decoder_states(e_it, &ex.input_ids)?;
    let logits = session.logits(states)?;
    let mask = vec![true; ex.target_ids.len()];
    let cel = session.graph.cross_entropy(logits, &ex.target_ids, &mask)?;
    let q_it = session.question_embedding(states)?;

    let g = &mut session.graph;
    let gt = vector_const(g, &ex.q_gt);
    let qi = vector_const(g, &ex.q_i);
    let qt = vector_const(g, &ex.q_t);
    let l_img = margin_loss_var(g, q_it, gt, qi, loss.margin)?;
    let l_txt = margin_loss_var(g, q_it, gt, qt, loss.margin)?;

    let mut b = LossBreakdown {
        cl_img: g.value(l_img).item().to_f64().unwrap_or(f64::NAN),
        cl_txt: g.value(l_txt).item().to_f64().unwrap_or(f64::NAN),
        cel: g.value(cel).item().to_f64().unwrap_or(f64::NAN),
        beta,
        ..Default::default()
    };

    let total = match loss.effective_alpha() {
        None => {
            b.cl = combine_cl(b.cl_txt, b.cl_img, loss.alpha)?;
            g.scale(cel, F::lit(0.5))
        }
        Some(alpha) => {
            b.cl = combine_cl(b.cl_txt, b.cl_img, alpha)?;
            let cl = match alpha {
                a if a == 0.0 => l_img,
                a if a == 1.0 => l_txt,
                a => {
                    let t = g.scale(l_txt, F::lit(a));
                    let i = g.scale(l_img, F::lit(1.0 - a));
                    g.add(t, i)?
                }
            };
            let weighted = g.scale(cl, F::lit(beta));
            let sum = g.add(weighted, cel)?;
            g.scale(sum, F::lit(0.5))
        }
    };
    b.total = g.value(total).item().to_f64().unwrap_or(f64::NAN);
    Ok((total, b))
}

fn mean_breakdown(parts: &[LossBreakdown], beta: f64) -> LossBreakdown {
    let n = parts.len() as f64;
    let mean = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        cl_img: mean(|b| b.cl_img),
        cl_txt: mean(|b| b.cl_txt),
        cl: mean(|b| b.cl),
        cel: mean(|b| b.cel),
        total: mean(|b| b.total),
        beta,
    }
}

/// Mean loss over `batch` and, if `with_grads`, its gradient for every parameter.
///
/// Each example gets its own graph; gradients are summed in batch order.
pub fn batch_loss<F: Real>(
    config: &ModelConfig,
    params: &ParamStore<F>,
    batch: &[&PreparedExample],
    loss: &LossConfig,
    epoch: usize,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<Vec<Tensor<F>>>)> {
    batch_loss_with_dropout(config, params, batch, loss, epoch, with_grads, None)
}

/// [`batch_loss`] with dropout masks drawn from `dropout_seed` (one stream per example).
pub fn batch_loss_with_dropout<F: Real>(
    config: &ModelConfig,
    params: &ParamStore<F>,
    batch: &[&PreparedExample],
    loss: &LossConfig,
    epoch: usize,
    with_grads: bool,
    dropout_seed: Option<u64>,
) -> Result<(LossBreakdown, Option<Vec<Tensor<F>>>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    loss.validate()?;
    let beta = loss.beta.at(epoch);
    let inv_n = F::lit(1.0 / batch.len() as f64);
    let mut parts = Vec::with_capacity(batch.len());
    let mut grads: Option<Vec<Tensor<F>>> = None;
    for (k, ex) in batch.iter().enumerate() {
        let mut session = Session::new(config, params, with_grads);
        if let Some(seed) = dropout_seed {
            session = session.with_dropout(seed.wrapping_add(k as u64));
        }
        let (total, b) = example_loss(&mut session, ex, loss, beta)?;
        parts.push(b);
        if with_grads {
            let scaled = session.graph.scale(total, inv_n);
            session.graph.backward(scaled)?;
            let g = session.param_grads();
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g) {
                        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x = *x + *y;
                        }
                    }
                }
            }
        }
    }
    Ok((mean_breakdown(&parts, beta), grads))
}

/// Mean teacher-forced cross-entropy, used for checkpoint selection.
pub fn mean_cel<F: Real>(config: &ModelConfig, params: &ParamStore<F>, data: &[PreparedExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let mut total = 0.0;
    for ex in data {
        let mut s = Session::new(config, params, false);
        let patches: Tensor<F> = ex.patches.cast();
        let e_i = s.encode_image(&patches)?;
        let e_it = s.encode_text(&ex.constraint_ids, e_i)?;
        let logits = s.decode_question(e_it, &ex.input_ids)?;
        let mask = vec![true; ex.target_ids.len()];
        let cel = s.graph.cross_entropy(logits, &ex.target_ids, &mask)?;
        total += s.graph.value(cel).item().to_f64().unwrap_or(f64::NAN);
    }
    Ok(total / data.len() as f64)
}

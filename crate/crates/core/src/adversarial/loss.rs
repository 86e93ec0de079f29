use serde::{Deserialize, Serialize};

use super::discriminator::Discriminator;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Domain, SeqMask};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before the
/// log in [`AdversarialMode::LogGan`].
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// Log-likelihood objective on logistic critic outputs.
    #[serde(rename = "log_gan")]
    LogGan,
    /// Raw critic scores plus a gradient penalty.
    #[default]
    WassersteinGp,
}

impl AdversarialMode {
    pub fn name(self) -> &'static str {
        match self {
            AdversarialMode::LogGan => "log_gan",
            AdversarialMode::WassersteinGp => "wasserstein_gp",
        }
    }
}

/// `log(clamp(σ(s)))` for target sequences, `log(clamp(1 − σ(s)))` for
/// source ones. Outside the clamp the value is constant.
fn clamped_log_prob(g: &mut Graph, score: Var, domain: Domain) -> Result<Var> {
    let s = g.value(score).item()?;
    let s = if domain == Domain::Source { -s } else { s };
    let p = crate::autodiff::sigmoid(s);
    if p < PROB_CLAMP {
        return Ok(g.constant(Tensor::scalar(PROB_CLAMP.ln())));
    }
    if p > 1.0 - PROB_CLAMP {
        return Ok(g.constant(Tensor::scalar((1.0 - PROB_CLAMP).ln())));
    }
    let x = if domain == Domain::Source { g.scale(score, -1.0) } else { score };
    Ok(g.log_sigmoid(x))
}

/// One example's share of `L_dis`: its sequences' terms divided by the
/// size of its domain's batch. Summing over both batches gives
/// [`dis_loss`].
pub fn example_dis_term(
    g: &mut Graph,
    mode: AdversarialMode,
    scores: &[Var],
    domain: Domain,
    batch_size: usize,
) -> Result<Var> {
    if scores.is_empty() || batch_size == 0 {
        return Err(Error::Empty("discriminator term without scores".into()));
    }
    let mut terms = Vec::with_capacity(scores.len());
    for &s in scores {
        terms.push(match mode {
            AdversarialMode::LogGan => clamped_log_prob(g, s, domain)?,
            AdversarialMode::WassersteinGp => s,
        });
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let sign = match (mode, domain) {
        (AdversarialMode::WassersteinGp, Domain::Source) => -1.0,
        _ => 1.0,
    };
    Ok(g.scale(total, sign / batch_size as f64))
}

/// `L_dis` without any gradient penalty. Each entry holds the critic
/// scores of one example (question and document, or document only).
///
/// Log mode: `mean_tar[Σ log D] + mean_src[Σ log(1 − D)]`.
/// Wasserstein mode: `mean_tar[Σ s] − mean_src[Σ s]`.
pub fn dis_loss(g: &mut Graph, mode: AdversarialMode, target: &[Vec<Var>], source: &[Vec<Var>]) -> Result<Var> {
    if target.is_empty() || source.is_empty() {
        return Err(Error::Empty("discriminator loss needs both domains".into()));
    }
    // summed per domain first so identical batches cancel exactly
    let mut sums = Vec::with_capacity(2);
    for (batch, domain) in [(target, Domain::Target), (source, Domain::Source)] {
        let mut total: Option<Var> = None;
        for scores in batch {
            let t = example_dis_term(g, mode, scores, domain, batch.len())?;
            total = Some(match total {
                None => t,
                Some(acc) => g.add(acc, t)?,
            });
        }
        sums.push(total.expect("batches are non-empty"));
    }
    g.add(sums[0], sums[1])
}

/// `mean_pairs[(‖∇D(x̂)‖ − 1)²]` at `x̂ = α·real + (1 − α)·fake`, with both
/// sequences cut to their common valid prefix. `alphas` holds one
/// coefficient per pair.
pub fn gradient_penalty(
    g: &mut Graph,
    critic: &Discriminator,
    pairs: &[(&Tensor, &Tensor)],
    alphas: &[f64],
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Empty("gradient penalty over no pairs".into()));
    }
    if alphas.len() != pairs.len() {
        return Err(Error::Index { what: "interpolation coefficient", index: alphas.len(), len: pairs.len() });
    }
    let mut total: Option<Var> = None;
    for ((real, fake), &alpha) in pairs.iter().zip(alphas) {
        let x = interpolate(real, fake, alpha)?;
        let len = x.shape()[0];
        let xv = g.constant(x);
        let (_, grad) = critic.score_and_input_grad(g, xv, &SeqMask::all(len))?;
        let sq = g.mul(grad, grad)?;
        let sq = g.sum(sq);
        let norm = g.sqrt(sq)?;
        let gap = g.affine(norm, 1.0, -1.0);
        let pen = g.mul(gap, gap)?;
        total = Some(match total {
            None => pen,
            Some(acc) => g.add(acc, pen)?,
        });
    }
    Ok(g.scale(total.expect("pairs are non-empty"), 1.0 / pairs.len() as f64))
}

fn interpolate(real: &Tensor, fake: &Tensor, alpha: f64) -> Result<Tensor> {
    let (lr, cr) = real.dims2()?;
    let (lf, cf) = fake.dims2()?;
    if cr != cf {
        return Err(Error::shape("gradient_penalty interpolation", real.shape(), fake.shape()));
    }
    let len = lr.min(lf);
    if len == 0 {
        return Err(Error::Empty("interpolating an empty sequence".into()));
    }
    let data = real.data()[..len * cr]
        .iter()
        .zip(&fake.data()[..len * cr])
        .map(|(&r, &f)| alpha * r + (1.0 - alpha) * f)
        .collect();
    Tensor::new(vec![len, cr], data)
}

/// `L_enc = L_qa − λ_G·L_dis`.
pub fn enc_loss(l_qa: f64, l_dis: f64, lambda_g: f64) -> Result<f64> {
    check_lambda(lambda_g)?;
    Ok(l_qa - lambda_g * l_dis)
}

/// Graph form of [`enc_loss`].
pub fn enc_loss_node(g: &mut Graph, l_qa: Var, l_dis: Var, lambda_g: f64) -> Result<Var> {
    check_lambda(lambda_g)?;
    let d = g.scale(l_dis, lambda_g);
    g.sub(l_qa, d)
}

pub(crate) fn check_lambda(lambda_g: f64) -> Result<()> {
    if !(lambda_g >= 0.0) || !lambda_g.is_finite() {
        return Err(Error::Config(format!("lambda_g must be a finite value ≥ 0, got {lambda_g}")));
    }
    Ok(())
}

/// Losses realised by one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    /// `l_qa_src + l_qa_tar`.
    pub l_qa: f64,
    pub l_qa_src: f64,
    pub l_qa_tar: f64,
    /// `L_dis` as seen by the encoders (no gradient penalty).
    pub l_dis: f64,
    pub l_enc: f64,
    /// Loss of the layers outside the adversarial game; equals `l_qa`.
    pub l_other: f64,
    pub lambda_g: f64,
    pub gp_weight: f64,
    /// Last critic-phase objective, gradient penalty included.
    pub critic_loss: Option<f64>,
}

impl LossBundle {
    pub fn assemble(
        l_qa_src: f64,
        l_qa_tar: f64,
        l_dis: f64,
        lambda_g: f64,
        gp_weight: f64,
        critic_loss: Option<f64>,
    ) -> Result<Self> {
        let l_qa = l_qa_src + l_qa_tar;
        Ok(LossBundle {
            l_qa,
            l_qa_src,
            l_qa_tar,
            l_dis,
            l_enc: enc_loss(l_qa, l_dis, lambda_g)?,
            l_other: l_qa,
            lambda_g,
            gp_weight,
            critic_loss,
        })
    }
}

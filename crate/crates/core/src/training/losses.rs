use crate::corpus::TurnBatch;
use crate::tensor::{Graph, Result, TensorError, Var};

/// Probabilities are kept inside `[P_MIN, 1 − P_MIN]` before taking logs.
pub const P_MIN: f32 = 1e-7;

fn all_masked(op: &'static str) -> TensorError {
    TensorError::InvalidArgument { op, msg: "every position is masked".into() }
}

/// Normalized weights `mask / Σ mask`.
fn mean_weights(op: &'static str, mask: &[f32]) -> Result<Vec<f32>> {
    let total: f64 = mask.iter().map(|&m| m as f64).sum();
    if total == 0.0 {
        return Err(all_masked(op));
    }
    Ok(mask.iter().map(|&m| (m as f64 / total) as f32).collect())
}

/// Token cross-entropy averaged over the unmasked positions of `gold`.
/// `logits[t]` is the `batch × V` prediction for position `t`.
pub fn mle_loss(g: &mut Graph, logits: &[Var], gold: &TurnBatch) -> Result<Var> {
    if logits.len() != gold.width {
        return Err(TensorError::InvalidArgument {
            op: "mle_loss",
            msg: format!("{} logit positions for gold width {}", logits.len(), gold.width),
        });
    }
    let weights = mean_weights("mle_loss", &gold.mask)?;
    let mut columns = Vec::with_capacity(gold.width);
    for (t, &l) in logits.iter().enumerate() {
        columns.push(g.cross_entropy(l, &gold.column(t))?);
    }
    // batch × width, matching the row-major mask layout.
    let ce = g.concat_cols(&columns)?;
    g.weighted_sum(ce, &weights)
}

/// `−mean log p` over masked positions of `probs`, after clamping.
pub fn neg_mean_log(g: &mut Graph, probs: Var, mask: &[f32]) -> Result<Var> {
    let weights = mean_weights("neg_mean_log", mask)?;
    let p = g.clamp(probs, P_MIN, 1.0 - P_MIN)?;
    let lp = g.log(p)?;
    let s = g.weighted_sum(lp, &weights)?;
    g.scale(s, -1.0)
}

/// `−mean log (1 − p)` over masked positions of `probs`, after clamping.
pub fn neg_mean_log_complement(g: &mut Graph, probs: Var, mask: &[f32]) -> Result<Var> {
    let p = g.clamp(probs, P_MIN, 1.0 - P_MIN)?;
    let q = g.affine(p, -1.0, 1.0)?;
    neg_mean_log(g, q, mask)
}

/// Word-level adversarial losses from ground-truth and generated word
/// probabilities (`batch × width` each, with row-major masks).
///
/// `d_loss = −[mean log p_gt + mean log(1 − p_gen)]` and
/// `g_loss = −mean log p_gen`.
pub fn adv_losses(g: &mut Graph, p_gt: Var, gt_mask: &[f32], p_gen: Var, gen_mask: &[f32]) -> Result<(Var, Var)> {
    let real = neg_mean_log(g, p_gt, gt_mask)?;
    let fake = neg_mean_log_complement(g, p_gen, gen_mask)?;
    let d_loss = g.add(real, fake)?;
    let g_loss = neg_mean_log(g, p_gen, gen_mask)?;
    Ok((d_loss, g_loss))
}

/// Adversarial losses of the attribute-conditioned discriminator.
pub fn adv_loss_a(g: &mut Graph, p_gt: Var, gt_mask: &[f32], p_gen: Var, gen_mask: &[f32]) -> Result<(Var, Var)> {
    adv_losses(g, p_gt, gt_mask, p_gen, gen_mask)
}

/// Adversarial losses of the unconditioned discriminator.
pub fn adv_loss_d(g: &mut Graph, p_gt: Var, gt_mask: &[f32], p_gen: Var, gen_mask: &[f32]) -> Result<(Var, Var)> {
    adv_losses(g, p_gt, gt_mask, p_gen, gen_mask)
}

/// Attribute losses: `d_att = −log p_gt(c)` and `g_att = −log p_gen(c)`,
/// averaged over rows with `rows[b] = 1`. Distributions are `batch × Vc`.
pub fn att_loss(g: &mut Graph, dist_gt: Var, dist_gen: Var, targets: &[usize], rows: &[f32]) -> Result<(Var, Var)> {
    let pg = g.pick(dist_gt, targets)?;
    let pn = g.pick(dist_gen, targets)?;
    let d = neg_mean_log(g, pg, rows)?;
    let gen = neg_mean_log(g, pn, rows)?;
    Ok((d, gen))
}

//! Scalar training objectives.
//!
//! Every loss reduces over the batch with a mean, so the reconstruction
//! weight and learning rate act independently of batch size. The Gaussian
//! observation models drop their additive normalization constant (it has
//! zero gradient), so reported values are squared-error forms:
//!
//! * prior: mean over batch of `0.5 * sum_j(exp(lv) + mu^2 - 1 - lv)`, the
//!   closed-form divergence of a diagonal Gaussian posterior from the
//!   standard normal prior
//! * reconstruction: mean over batch of `0.5 * ||a - b||^2`, computed either
//!   on pixels or on the discriminator's tapped feature layer
//! * GAN: binary cross-entropy terms; the discriminator ascends its
//!   objective, the decoder descends a fooling loss over the fake streams
//!
//! Probabilities are clamped to `[1e-7, 1 - 1e-7]` before any logarithm;
//! values outside `[0, 1]` are rejected as invalid.

use thiserror::Error;

use crate::tensor::{Graph, NodeId, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid probability {0} (outside [0,1])")]
    InvalidProbability(f64),
    #[error("{op}: shapes {lhs:?} and {rhs:?} differ")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

pub const PROB_CLAMP: f64 = 1e-7;

/// Which representation the reconstruction error is measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconKind {
    Pixel,
    /// Discriminator feature layer.
    Feature,
}

/// GAN objective with two terms (real + prior sample) or three (real +
/// prior sample + reconstruction).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanTerms {
    Two,
    Three,
}

/// Decoder-side GAN loss style. The non-saturating form `-log Dis(fake)` is
/// the default; the saturating form `log(1 - Dis(fake))` follows the minimax
/// objective literally but stalls early in training. Both move `Dis(fake)`
/// upward when descended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecGanStyle {
    Saturating,
    NonSaturating,
}

/// The scalar terms of one training step.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub prior: f64,
    pub recon: f64,
    pub gan_dis: f64,
    pub gan_dec: f64,
    pub recon_kind: ReconKind,
    pub gan_terms: GanTerms,
    pub dec_style: DecGanStyle,
}

/// Divergence of the posterior `N(mu, diag(exp(log_var)))` from the standard
/// normal prior, averaged over the batch.
pub fn kl_prior(g: &mut Graph, mu: NodeId, log_var: NodeId) -> Result<NodeId> {
    let mu_shape = g.value(mu).shape().to_vec();
    if mu_shape != g.value(log_var).shape() {
        return Err(LossError::ShapeMismatch {
            op: "kl_prior",
            lhs: mu_shape,
            rhs: g.value(log_var).shape().to_vec(),
        });
    }
    let batch = mu_shape[0] as f64;
    let var = g.exp(log_var);
    let mu_sq = g.mul(mu, mu)?;
    let a = g.add(var, mu_sq)?;
    let b = g.add_scalar(a, -1.0);
    let c = g.sub(b, log_var)?;
    let total = g.sum_all(c);
    Ok(g.mul_scalar(total, 0.5 / batch))
}

/// Mean over the batch of half the squared distance between two equally
/// shaped tensors. Used for both pixel-space and feature-space
/// reconstruction errors.
pub fn half_squared_distance(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let ashape = g.value(a).shape().to_vec();
    if ashape != g.value(b).shape() {
        return Err(LossError::ShapeMismatch {
            op: "reconstruction",
            lhs: ashape,
            rhs: g.value(b).shape().to_vec(),
        });
    }
    let batch = ashape[0] as f64;
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let total = g.sum_all(sq);
    Ok(g.mul_scalar(total, 0.5 / batch))
}

/// Pixel-space reconstruction error (identity-covariance Gaussian without
/// its constant).
pub fn recon_pixel(g: &mut Graph, x: NodeId, x_recon: NodeId) -> Result<NodeId> {
    half_squared_distance(g, x, x_recon)
}

/// Feature-space reconstruction error between discriminator activations of
/// the data and of the reconstruction, taken at the same tap layer. The
/// expectation over the posterior is estimated with the single z sample the
/// caller decoded.
pub fn recon_feature(g: &mut Graph, feat_x: NodeId, feat_x_recon: NodeId) -> Result<NodeId> {
    half_squared_distance(g, feat_x, feat_x_recon)
}

fn validate_probs(g: &Graph, y: NodeId) -> Result<()> {
    for &v in g.value(y).data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(LossError::InvalidProbability(v));
        }
    }
    Ok(())
}

fn mean_log(g: &mut Graph, y: NodeId) -> NodeId {
    let safe = g.clamp(y, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let l = g.ln(safe);
    g.mean_all(l)
}

fn mean_log_one_minus(g: &mut Graph, y: NodeId) -> NodeId {
    let safe = g.clamp(y, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let neg = g.neg(safe);
    let one_minus = g.add_scalar(neg, 1.0);
    let l = g.ln(one_minus);
    g.mean_all(l)
}

/// Discriminator objective, averaged over the batch:
/// `mean log y_real + mean log(1 - y_fake_prior) [+ mean log(1 - y_fake_recon)]`.
/// The discriminator update ascends this value (descends its negation).
pub fn gan_dis_objective(
    g: &mut Graph,
    y_real: NodeId,
    y_fake_prior: NodeId,
    y_fake_recon: Option<NodeId>,
) -> Result<NodeId> {
    validate_probs(g, y_real)?;
    validate_probs(g, y_fake_prior)?;
    if let Some(r) = y_fake_recon {
        validate_probs(g, r)?;
    }
    let real_term = mean_log(g, y_real);
    let fake_prior_term = mean_log_one_minus(g, y_fake_prior);
    let mut obj = g.add(real_term, fake_prior_term)?;
    if let Some(r) = y_fake_recon {
        let fake_recon_term = mean_log_one_minus(g, r);
        obj = g.add(obj, fake_recon_term)?;
    }
    Ok(obj)
}

/// Decoder (generator) loss over the fake streams; descending it pushes the
/// discriminator's verdicts on fakes toward "real".
pub fn gan_dec_loss(
    g: &mut Graph,
    y_fake_prior: NodeId,
    y_fake_recon: Option<NodeId>,
    style: DecGanStyle,
) -> Result<NodeId> {
    validate_probs(g, y_fake_prior)?;
    if let Some(r) = y_fake_recon {
        validate_probs(g, r)?;
    }
    let stream = |g: &mut Graph, y: NodeId| match style {
        DecGanStyle::NonSaturating => {
            let m = mean_log(g, y);
            g.neg(m)
        }
        DecGanStyle::Saturating => mean_log_one_minus(g, y),
    };
    let mut loss = stream(g, y_fake_prior);
    if let Some(r) = y_fake_recon {
        let s = stream(g, r);
        loss = g.add(loss, s)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;
    use crate::tensor::Tensor;

    fn scalar_node(g: &mut Graph, shape: &[usize], data: Vec<f64>) -> NodeId {
        g.constant(Tensor::from_vec(shape, data).unwrap())
    }

    fn closed_form_kl(mu: &[f64], log_var: &[f64], batch: usize) -> f64 {
        let sum: f64 = mu
            .iter()
            .zip(log_var)
            .map(|(&m, &lv)| lv.exp() + m * m - 1.0 - lv)
            .sum();
        0.5 * sum / batch as f64
    }

    #[test]
    fn kl_zero_when_posterior_equals_prior() {
        let mut g = Graph::new();
        let mu = scalar_node(&mut g, &[2, 3], vec![0.0; 6]);
        let lv = scalar_node(&mut g, &[2, 3], vec![0.0; 6]);
        let kl = kl_prior(&mut g, mu, lv).unwrap();
        assert_eq!(g.value(kl).item(), 0.0);
    }

    #[test]
    fn kl_hand_values() {
        // d_z=1, mu=1, log_var=0 -> 0.5
        let mut g = Graph::new();
        let mu = scalar_node(&mut g, &[1, 1], vec![1.0]);
        let lv = scalar_node(&mut g, &[1, 1], vec![0.0]);
        let kl = kl_prior(&mut g, mu, lv).unwrap();
        assert!((g.value(kl).item() - 0.5).abs() < 1e-12);

        // d_z=1, mu=0, sigma^2=4 -> 0.5*(4 - ln 4 - 1) ~= 0.80685
        let mut g = Graph::new();
        let mu = scalar_node(&mut g, &[1, 1], vec![0.0]);
        let lv = scalar_node(&mut g, &[1, 1], vec![4.0f64.ln()]);
        let kl = kl_prior(&mut g, mu, lv).unwrap();
        assert!((g.value(kl).item() - 0.806_852_819_440_054_7).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo_estimate() {
        // KL(q || p) = E_q[ln q(z) - ln p(z)], estimated by sampling q.
        let mu = 0.0f64;
        let log_var = 4.0f64.ln();
        let sigma = (0.5 * log_var).exp();
        let mut rng = SeedRng::new(123);
        let samples = 100_000;
        let mut acc = 0.0;
        for _ in 0..samples {
            let z = mu + sigma * rng.normal();
            let ln_q = -0.5 * ((z - mu) * (z - mu) / (sigma * sigma) + log_var + (2.0 * std::f64::consts::PI).ln());
            let ln_p = -0.5 * (z * z + (2.0 * std::f64::consts::PI).ln());
            acc += ln_q - ln_p;
        }
        let mc = acc / samples as f64;
        let closed = closed_form_kl(&[mu], &[log_var], 1);
        assert!(
            (mc - closed).abs() / closed < 0.01,
            "mc {mc} vs closed {closed}"
        );
    }

    #[test]
    fn recon_examples() {
        let mut g = Graph::new();
        let x = scalar_node(&mut g, &[1, 2], vec![0.0, 0.0]);
        let same = recon_pixel(&mut g, x, x).unwrap();
        assert_eq!(g.value(same).item(), 0.0);

        let xt = scalar_node(&mut g, &[1, 2], vec![1.0, 1.0]);
        let l = recon_pixel(&mut g, x, xt).unwrap();
        assert_eq!(g.value(l).item(), 1.0);

        // feature variant: (1,2) vs (1,0) -> 0.5*4 = 2
        let fa = scalar_node(&mut g, &[1, 2], vec![1.0, 2.0]);
        let fb = scalar_node(&mut g, &[1, 2], vec![1.0, 0.0]);
        let lf = recon_feature(&mut g, fa, fb).unwrap();
        assert_eq!(g.value(lf).item(), 2.0);

        let bad = scalar_node(&mut g, &[1, 3], vec![0.0; 3]);
        assert!(recon_pixel(&mut g, x, bad).is_err());
    }

    #[test]
    fn recon_nonnegative_and_zero_iff_equal() {
        let mut rng = SeedRng::new(9);
        for _ in 0..20 {
            let a = rng.normal_tensor(&[3, 4]);
            let mut b = a.clone();
            b.data_mut()[5] += 0.1;
            let mut g = Graph::new();
            let aid = g.constant(a.clone());
            let bid = g.constant(b);
            let l = recon_pixel(&mut g, aid, bid).unwrap();
            assert!(g.value(l).item() > 0.0);
            let aid2 = g.constant(a.clone());
            let same = recon_pixel(&mut g, aid, aid2).unwrap();
            assert_eq!(g.value(same).item(), 0.0);
        }
    }

    #[test]
    fn dis_objective_values() {
        // Perfect discrimination: ~0 from above.
        let mut g = Graph::new();
        let y_real = scalar_node(&mut g, &[2, 1], vec![1.0, 1.0]);
        let y_fp = scalar_node(&mut g, &[2, 1], vec![0.0, 0.0]);
        let y_fr = scalar_node(&mut g, &[2, 1], vec![0.0, 0.0]);
        let obj = gan_dis_objective(&mut g, y_real, y_fp, Some(y_fr)).unwrap();
        assert!(g.value(obj).item().abs() < 1e-6);

        // Uninformative point: 3 ln 0.5 for the three-term variant.
        let mut g = Graph::new();
        let y = scalar_node(&mut g, &[4, 1], vec![0.5; 4]);
        let obj = gan_dis_objective(&mut g, y, y, Some(y)).unwrap();
        assert!((g.value(obj).item() - 3.0 * 0.5f64.ln()).abs() < 1e-12);

        // Two-term variant at the uninformative point: 2 ln 0.5.
        let obj2 = gan_dis_objective(&mut g, y, y, None).unwrap();
        assert!((g.value(obj2).item() - 2.0 * 0.5f64.ln()).abs() < 1e-12);

        // Hand-computed mixed case.
        let mut g = Graph::new();
        let yr = scalar_node(&mut g, &[1, 1], vec![0.8]);
        let yp = scalar_node(&mut g, &[1, 1], vec![0.3]);
        let yc = scalar_node(&mut g, &[1, 1], vec![0.4]);
        let obj = gan_dis_objective(&mut g, yr, yp, Some(yc)).unwrap();
        let want = 0.8f64.ln() + 0.7f64.ln() + 0.6f64.ln();
        assert!((g.value(obj).item() - want).abs() < 1e-12);

        // Invalid probabilities rejected.
        let bad = scalar_node(&mut g, &[1, 1], vec![1.5]);
        assert!(matches!(
            gan_dis_objective(&mut g, bad, yp, None),
            Err(LossError::InvalidProbability(_))
        ));
    }

    #[test]
    fn dec_loss_values_and_direction() {
        // Fully fooled discriminator: non-saturating loss ~0.
        let mut g = Graph::new();
        let y1 = scalar_node(&mut g, &[2, 1], vec![1.0, 1.0]);
        let l = gan_dec_loss(&mut g, y1, None, DecGanStyle::NonSaturating).unwrap();
        assert!(g.value(l).item().abs() < 1e-6);

        // Both fake streams at 0.5: -2 ln 0.5.
        let mut g = Graph::new();
        let y = scalar_node(&mut g, &[3, 1], vec![0.5; 3]);
        let l = gan_dec_loss(&mut g, y, Some(y), DecGanStyle::NonSaturating).unwrap();
        assert!((g.value(l).item() + 2.0 * 0.5f64.ln()).abs() < 1e-12);

        // Descending either style increases y: both d(loss)/dy < 0 on (0,1).
        for style in [DecGanStyle::NonSaturating, DecGanStyle::Saturating] {
            for &v in &[0.1, 0.5, 0.9] {
                let mut g = Graph::new();
                let y = g.leaf(Tensor::from_vec(&[1, 1], vec![v]).unwrap().with_grad());
                let l = gan_dec_loss(&mut g, y, None, style).unwrap();
                g.backward(l).unwrap();
                assert!(g.grad(y).unwrap().data()[0] < 0.0, "style {style:?} y {v}");
            }
        }
    }
}

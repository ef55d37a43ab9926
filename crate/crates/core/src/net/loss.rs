//! Reconstruction, adversarial and perceptual losses.

use super::{BnUpdates, Bound, Discriminator, PerceptualNet};
use crate::error::Result;
use crate::tensor::{Graph, Mode, Var};

pub fn loss_rec(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    g.mse(pred, target)
}

pub struct AdversarialTerms {
    /// `−log D(G(z)⊙m)`.
    pub generator: Var,
    /// `−[log D(Y⊙m) + log(1 − D(G(z)⊙m))]`.
    pub discriminator: Var,
}

/// Both adversarial terms on masked inputs. `d_bound` decides whether the
/// discriminator's parameters receive gradients.
#[allow(clippy::too_many_arguments)]
pub fn loss_adversarial(
    g: &mut Graph,
    pred: Var,
    target: Var,
    mask: Var,
    d: &Discriminator,
    d_bound: &Bound,
    mode: Mode,
    updates: &mut BnUpdates,
) -> Result<AdversarialTerms> {
    let real = g.mul(target, mask)?;
    let fake = g.mul(pred, mask)?;
    let z_real = d.forward_graph(g, d_bound, real, mode, updates)?;
    let z_fake = d.forward_graph(g, d_bound, fake, mode, updates)?;
    let generator = g.bce_logits(z_fake, true);
    let r = g.bce_logits(z_real, true);
    let f = g.bce_logits(z_fake, false);
    let discriminator = g.combine(&[(r, 1.0), (f, 1.0)])?;
    Ok(AdversarialTerms {
        generator,
        discriminator,
    })
}

/// Equal-weight sum of feature-map mean squared differences.
pub fn perceptual_from_features(
    g: &mut Graph,
    level1: (Var, Var),
    level2: (Var, Var),
) -> Result<Var> {
    let a = g.mse(level1.0, level1.1)?;
    let b = g.mse(level2.0, level2.1)?;
    g.combine(&[(a, 1.0), (b, 1.0)])
}

pub fn loss_perceptual(
    g: &mut Graph,
    pred: Var,
    target: Var,
    p: &PerceptualNet,
    p_bound: &Bound,
) -> Result<Var> {
    let (p1, p2) = p.features(g, p_bound, pred)?;
    let (t1, t2) = p.features(g, p_bound, target)?;
    perceptual_from_features(g, (p1, t1), (p2, t2))
}

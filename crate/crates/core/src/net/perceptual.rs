//! Frozen feature extractor for the perceptual loss.

use super::{build_network, BnUpdates, Bound, FilterNet, NetConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Mode, Var};

/// A plain autoencoder (no gates, no input skip) whose first two encoder
/// levels provide feature taps. Parameters are frozen.
#[derive(Debug, Clone)]
pub struct PerceptualNet {
    net: FilterNet,
}

impl PerceptualNet {
    /// Vanilla configuration matching `like` in depth, width and kernels.
    pub fn vanilla_config(like: &NetConfig) -> NetConfig {
        NetConfig {
            use_attention: false,
            use_residual_skip: false,
            ..like.clone()
        }
    }

    pub fn untrained(cfg: &NetConfig) -> Result<FilterNet> {
        build_network(&Self::vanilla_config(cfg))
    }

    /// Wraps a trained vanilla network and freezes it.
    pub fn from_net(mut net: FilterNet) -> Result<Self> {
        if net.config.use_attention || net.config.use_residual_skip {
            return Err(Error::Contract(
                "perceptual network must have no attention gates and no input skip".into(),
            ));
        }
        net.params.freeze();
        Ok(Self { net })
    }

    pub fn net(&self) -> &FilterNet {
        &self.net
    }

    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        Bound::new(g, &self.net.params, false)
    }

    /// Outputs of encoder levels 0 and 1 (after their second activation).
    pub fn features(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<(Var, Var)> {
        self.net.check_input(g.value(x).shape())?;
        let taps = self
            .net
            .encoder(g, bound, x, 2, Mode::Eval, &mut BnUpdates::default())?;
        Ok((taps[0], taps[1]))
    }
}

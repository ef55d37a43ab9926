//! Shallow residual classifier used as the adversarial critic.

use super::{conv_bn, conv_bn_relu, init_bn, init_conv, BnUpdates, Bound};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Mode, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub blocks: usize,
    pub base_channels: usize,
    pub temporal_kernels: bool,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            base_channels: 8,
            temporal_kernels: true,
            seed: 0,
        }
    }
}

/// Stem convolution, `blocks` residual blocks each followed by 2×2 average
/// pooling, global average pooling and a scalar logit per sample.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamStore,
}

impl Discriminator {
    pub fn new(cfg: &DiscriminatorConfig) -> Result<Self> {
        if cfg.blocks == 0 || cfg.base_channels == 0 {
            return Err(Error::Parameter(
                "discriminator needs at least one block and one channel".into(),
            ));
        }
        let k = if cfg.temporal_kernels {
            [3, 3, 3]
        } else {
            [3, 3, 1]
        };
        let s = cfg.seed;
        let mut p = ParamStore::new();
        let c0 = cfg.base_channels;
        init_conv(&mut p, s, "disc.stem.conv", 1, c0, k, true)?;
        init_bn(&mut p, "disc.stem.bn", c0)?;
        let mut cin = c0;
        for r in 0..cfg.blocks {
            let cout = c0 << r;
            init_conv(
                &mut p,
                s,
                &format!("disc.block{r}.a.conv"),
                cin,
                cout,
                k,
                true,
            )?;
            init_bn(&mut p, &format!("disc.block{r}.a.bn"), cout)?;
            init_conv(
                &mut p,
                s,
                &format!("disc.block{r}.b.conv"),
                cout,
                cout,
                k,
                true,
            )?;
            init_bn(&mut p, &format!("disc.block{r}.b.bn"), cout)?;
            if cin != cout {
                init_conv(
                    &mut p,
                    s,
                    &format!("disc.block{r}.proj"),
                    cin,
                    cout,
                    [1, 1, 1],
                    false,
                )?;
            }
            cin = cout;
        }
        init_conv(&mut p, s, "disc.head", cin, 1, [1, 1, 1], true)?;
        Ok(Self {
            config: cfg.clone(),
            params: p,
        })
    }

    /// Logits `[B, 1, 1, 1, 1]` for a `[B, 1, H, W, F]` input.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        mode: Mode,
        updates: &mut BnUpdates,
    ) -> Result<Var> {
        let p = &self.params;
        let mut h = conv_bn_relu(g, bound, p, "disc.stem", x, mode, updates)?;
        for r in 0..self.config.blocks {
            let name = format!("disc.block{r}");
            let a = conv_bn_relu(g, bound, p, &format!("{name}.a"), h, mode, updates)?;
            let b = conv_bn(g, bound, p, &format!("{name}.b"), a, mode, updates)?;
            let skip = match bound.get(&format!("{name}.proj.weight")) {
                Ok(w) => g.conv3d(h, w, None)?,
                Err(_) => h,
            };
            let sum = g.add(b, skip)?;
            h = g.relu(sum)?;
            let (_, _, hh, ww, _) = g.value(h).dims5()?;
            if hh % 2 == 0 && ww % 2 == 0 {
                h = g.avgpool(h)?;
            }
        }
        let pooled = g.global_avg_pool(h)?;
        let w = bound.get("disc.head.weight")?;
        let b = bound.get("disc.head.bias")?;
        g.conv3d(pooled, w, Some(b))
    }

    /// Evaluation-mode logits for a batch tensor.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.params, false)?;
        let xv = g.input(x.clone());
        let z = self.forward_graph(&mut g, &bound, xv, Mode::Eval, &mut BnUpdates::default())?;
        Ok(g.value(z).data().to_vec())
    }
}

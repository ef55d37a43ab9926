//! Attention-gated residual convolutional autoencoder, its discriminator and
//! perceptual companion, the three training losses and the training loop.
//!
//! Channel plan for `levels = L`, `base = b`: encoder level `l` maps its input
//! to `b·2^l` then `b·2^(l+1)` channels and max-pools; the bottom level does
//! the same at `l = L` without pooling. Decoder level `l` upsamples, joins the
//! (attended) skip of encoder level `l` and maps back to `b·2^(l+1)`.

mod attention;
mod discriminator;
mod loss;
mod perceptual;
mod train;

pub use attention::{
    attention_gate_forward, dump_attention, AttentionGateParams, AttentionMaps, GateOutput,
};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use loss::{
    loss_adversarial, loss_perceptual, loss_rec, perceptual_from_features, AdversarialTerms,
};
pub use perceptual::PerceptualNet;
pub use train::{
    load_pairs, pretrain_perceptual, train, train_pairs, write_log_csv, EpochLog, LossKind,
    TrainConfig, TrainOutcome, TrainingPair,
};

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::sequence::Sequence;
use crate::tensor::{BnStats, Graph, Mode, ParamStore, Tensor, Var};

pub const BN_MOMENTUM: f32 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub use_attention: bool,
    pub use_residual_skip: bool,
    /// `false` selects the 2-D variant: every kernel has temporal extent 1.
    pub temporal_kernels: bool,
    pub dropout_rate: f32,
    pub seed: u64,
}

impl NetConfig {
    pub fn full_scale() -> Self {
        Self {
            levels: 3,
            base_channels: 16,
            use_attention: true,
            use_residual_skip: true,
            temporal_kernels: true,
            dropout_rate: 0.05,
            seed: 0,
        }
    }

    pub fn desk_scale() -> Self {
        Self {
            levels: 2,
            base_channels: 8,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Parameter("levels must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Parameter("base_channels must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Parameter(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Output channels of the first convolution at level `l`.
    pub fn inner_channels(&self, l: usize) -> usize {
        self.base_channels << l
    }

    /// Output channels of level `l` (second convolution).
    pub fn level_channels(&self, l: usize) -> usize {
        self.base_channels << (l + 1)
    }

    pub fn kernel(&self) -> [usize; 3] {
        if self.temporal_kernels {
            [3, 3, 3]
        } else {
            [3, 3, 1]
        }
    }
}

/// Graph leaves for every parameter of a store.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds every entry; trainable entries require gradients when `grads`.
    pub fn new(g: &mut Graph, params: &ParamStore, grads: bool) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for name in params.names() {
            let rg = grads && params.is_trainable(name);
            vars.insert(name.to_string(), g.leaf(params.get(name)?.clone(), rg));
        }
        Ok(Self { vars })
    }

    /// Binds parameters to existing graph nodes.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name:?} not bound")))
    }

    /// Gradients of trainable entries; entries the loss does not reach get zeros.
    pub fn grads(&self, g: &Graph, params: &ParamStore) -> Result<BTreeMap<String, Vec<f32>>> {
        let mut out = BTreeMap::new();
        for name in params.trainable_names() {
            let v = self.get(name)?;
            let grad = match g.grad(v) {
                Some(gr) => gr.to_vec(),
                None => vec![0.0; params.get(name)?.len()],
            };
            out.insert(name.to_string(), grad);
        }
        Ok(out)
    }
}

/// Running-statistic updates collected during a training-mode pass.
#[derive(Debug, Default)]
pub struct BnUpdates(Vec<(String, BnStats)>);

impl BnUpdates {
    /// Exponential moving average into `prefix.mean` / `prefix.var`.
    pub fn apply(self, params: &mut ParamStore) -> Result<()> {
        for (prefix, s) in self.0 {
            for (suffix, batch) in [("mean", &s.mean), ("var", &s.var)] {
                let t = params.get_mut(&format!("{prefix}.{suffix}"))?;
                for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn init_conv(
    params: &mut ParamStore,
    seed: u64,
    name: &str,
    cin: usize,
    cout: usize,
    k: [usize; 3],
    bias: bool,
) -> Result<()> {
    let fan_in = cin * k[0] * k[1] * k[2];
    let limit = (6.0 / fan_in as f64).sqrt() as f32;
    let mut rng = stream(derive_seed(seed, name, 0));
    let n = cout * fan_in;
    let w: Vec<f32> = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    params.insert(
        format!("{name}.weight"),
        Tensor::new(vec![cout, cin, k[0], k[1], k[2]], w)?,
        true,
    )?;
    if bias {
        params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]), true)?;
    }
    Ok(())
}

pub(crate) fn init_bn(params: &mut ParamStore, name: &str, c: usize) -> Result<()> {
    params.insert(format!("{name}.gamma"), Tensor::filled(&[c], 1.0), true)?;
    params.insert(format!("{name}.beta"), Tensor::zeros(&[c]), true)?;
    params.insert(format!("{name}.mean"), Tensor::zeros(&[c]), false)?;
    params.insert(format!("{name}.var"), Tensor::filled(&[c], 1.0), false)?;
    Ok(())
}

/// `conv → batch norm` under the name prefix `{name}.conv` / `{name}.bn`.
pub(crate) fn conv_bn(
    g: &mut Graph,
    bound: &Bound,
    params: &ParamStore,
    name: &str,
    x: Var,
    mode: Mode,
    updates: &mut BnUpdates,
) -> Result<Var> {
    let w = bound.get(&format!("{name}.conv.weight"))?;
    let b = bound.get(&format!("{name}.conv.bias"))?;
    let y = g.conv3d(x, w, Some(b))?;
    let bn = format!("{name}.bn");
    let gamma = bound.get(&format!("{bn}.gamma"))?;
    let beta = bound.get(&format!("{bn}.beta"))?;
    let rm = params.get(&format!("{bn}.mean"))?.data();
    let rv = params.get(&format!("{bn}.var"))?.data();
    let (y, stats) = g.batchnorm(y, gamma, beta, mode, (rm, rv))?;
    if let Some(s) = stats {
        updates.0.push((bn, s));
    }
    Ok(y)
}

pub(crate) fn conv_bn_relu(
    g: &mut Graph,
    bound: &Bound,
    params: &ParamStore,
    name: &str,
    x: Var,
    mode: Mode,
    updates: &mut BnUpdates,
) -> Result<Var> {
    let y = conv_bn(g, bound, params, name, x, mode, updates)?;
    g.relu(y)
}

#[derive(Debug, Clone)]
pub struct FilterNet {
    pub config: NetConfig,
    pub params: ParamStore,
}

/// Handles produced by one forward pass.
pub struct NetForward {
    pub output: Var,
    /// Attention gate outputs, index `l` = encoder level `l`.
    pub gates: Vec<GateOutput>,
    /// Encoder level outputs before pooling.
    pub taps: Vec<Var>,
    pub updates: BnUpdates,
}

fn enc_name(l: usize, i: usize) -> String {
    format!("enc{l}.{i}")
}

fn dec_name(l: usize, i: usize) -> String {
    format!("dec{l}.{i}")
}

/// Builds and initialises a network.
pub fn build_network(cfg: &NetConfig) -> Result<FilterNet> {
    cfg.validate()?;
    let k = cfg.kernel();
    let mut p = ParamStore::new();
    let s = cfg.seed;
    let mut cin = 1;
    for l in 0..=cfg.levels {
        let (c1, c2) = (cfg.inner_channels(l), cfg.level_channels(l));
        let n1 = enc_name(l, 1);
        init_conv(&mut p, s, &format!("{n1}.conv"), cin, c1, k, true)?;
        init_bn(&mut p, &format!("{n1}.bn"), c1)?;
        let n2 = enc_name(l, 2);
        init_conv(&mut p, s, &format!("{n2}.conv"), c1, c2, k, true)?;
        init_bn(&mut p, &format!("{n2}.bn"), c2)?;
        cin = c2;
    }
    for l in (0..cfg.levels).rev() {
        let skip = cfg.level_channels(l);
        let below = cfg.level_channels(l + 1);
        if cfg.use_attention {
            attention::init_gate(&mut p, s, &format!("gate{l}"), skip, below, skip)?;
        }
        let n1 = dec_name(l, 1);
        init_conv(
            &mut p,
            s,
            &format!("{n1}.conv"),
            skip + below,
            skip,
            k,
            true,
        )?;
        init_bn(&mut p, &format!("{n1}.bn"), skip)?;
        let n2 = dec_name(l, 2);
        init_conv(&mut p, s, &format!("{n2}.conv"), skip, skip, k, true)?;
        init_bn(&mut p, &format!("{n2}.bn"), skip)?;
    }
    let c0 = cfg.level_channels(0);
    p.insert("head.weight", Tensor::zeros(&[1, c0, 1, 1, 1]), true)?;
    p.insert("head.bias", Tensor::zeros(&[1]), true)?;
    Ok(FilterNet {
        config: cfg.clone(),
        params: p,
    })
}

impl FilterNet {
    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let d = 1usize << self.config.levels;
        match shape {
            [_, 1, h, w, _] if h % d == 0 && w % d == 0 => Ok(()),
            [_, 1, h, w, _] => Err(Error::Dimension(format!(
                "{h}x{w} is not divisible by {d} (2^levels)"
            ))),
            _ => Err(Error::Dimension(format!(
                "network input must be [B, 1, H, W, F], got {shape:?}"
            ))),
        }
    }

    /// Encoder levels `0..depth`, returning each level's output before pooling.
    pub fn encoder(
        &self,
        g: &mut Graph,
        bound: &Bound,
        input: Var,
        depth: usize,
        mode: Mode,
        updates: &mut BnUpdates,
    ) -> Result<Vec<Var>> {
        let mut taps = Vec::with_capacity(depth);
        let mut x = input;
        for l in 0..depth {
            if l > 0 {
                x = g.maxpool(x)?;
            }
            x = conv_bn_relu(g, bound, &self.params, &enc_name(l, 1), x, mode, updates)?;
            x = conv_bn_relu(g, bound, &self.params, &enc_name(l, 2), x, mode, updates)?;
            taps.push(x);
        }
        Ok(taps)
    }

    /// Records a full forward pass on `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        input: Var,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<NetForward> {
        let cfg = &self.config;
        self.check_input(g.value(input).shape())?;
        let mut updates = BnUpdates::default();
        let taps = self.encoder(g, bound, input, cfg.levels + 1, mode, &mut updates)?;
        let mut x = g.dropout(
            taps[cfg.levels],
            cfg.dropout_rate,
            mode,
            derive_seed(dropout_seed, "dropout", cfg.levels as u64),
        )?;
        let mut gates = Vec::new();
        for l in (0..cfg.levels).rev() {
            let skip = if cfg.use_attention {
                let gp = AttentionGateParams::bind(bound, &format!("gate{l}"))?;
                let out = attention_gate_forward(g, taps[l], x, &gp)?;
                let attended = out.attended;
                gates.push(out);
                attended
            } else {
                taps[l]
            };
            let up = g.upsample(x)?;
            let cat = g.concat(up, skip)?;
            x = conv_bn_relu(
                g,
                bound,
                &self.params,
                &dec_name(l, 1),
                cat,
                mode,
                &mut updates,
            )?;
            x = conv_bn_relu(
                g,
                bound,
                &self.params,
                &dec_name(l, 2),
                x,
                mode,
                &mut updates,
            )?;
            if l > 0 {
                x = g.dropout(
                    x,
                    cfg.dropout_rate,
                    mode,
                    derive_seed(dropout_seed, "dropout", l as u64),
                )?;
            }
        }
        gates.reverse();
        let hw = bound.get("head.weight")?;
        let hb = bound.get("head.bias")?;
        let mut output = g.conv3d(x, hw, Some(hb))?;
        if cfg.use_residual_skip {
            output = g.add(input, output)?;
        }
        Ok(NetForward {
            output,
            gates,
            taps,
            updates,
        })
    }

    /// Evaluation-mode forward pass on a `[B, 1, H, W, F]` tensor, unclamped.
    pub fn forward_tensor(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.params, false)?;
        let x = g.input(input.clone());
        let out = self.forward_graph(&mut g, &bound, x, Mode::Eval, 0)?;
        Ok(g.value(out.output).clone())
    }

    /// Filters a batch of sequences; outputs are clamped to `[0, 1]`.
    pub fn forward_filter(&self, batch: &[Sequence]) -> Result<Vec<Sequence>> {
        let t = sequences_to_tensor(batch)?;
        let out = self.forward_tensor(&t)?;
        let (h, w, f) = batch[0].dims();
        tensor_to_sequences(&out, |d| Sequence::from_clamped(h, w, f, d))
    }

    pub fn filter_sequence(&self, seq: &Sequence) -> Result<Sequence> {
        Ok(self.forward_filter(std::slice::from_ref(seq))?.remove(0))
    }
}

/// Packs equally sized sequences into a `[B, 1, H, W, F]` tensor.
pub fn sequences_to_tensor(batch: &[Sequence]) -> Result<Tensor> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Dimension("empty batch".into()))?;
    let (h, w, f) = first.dims();
    let mut data = Vec::with_capacity(batch.len() * h * w * f);
    for s in batch {
        if s.dims() != (h, w, f) {
            return Err(Error::Dimension(format!(
                "batch mixes {:?} and {:?}",
                first.dims(),
                s.dims()
            )));
        }
        for r in 0..h {
            for c in 0..w {
                data.extend((0..f).map(|t| s.get(r, c, t)));
            }
        }
    }
    Tensor::new(vec![batch.len(), 1, h, w, f], data)
}

/// Unpacks a `[B, 1, H, W, F]` tensor into frame-major buffers passed to `make`.
pub fn tensor_to_sequences(
    t: &Tensor,
    make: impl Fn(Vec<f32>) -> Result<Sequence>,
) -> Result<Vec<Sequence>> {
    let (b, c, h, w, f) = t.dims5()?;
    if c != 1 {
        return Err(Error::Dimension(format!("expected one channel, got {c}")));
    }
    let vol = h * w * f;
    (0..b)
        .map(|bi| {
            let src = &t.data()[bi * vol..(bi + 1) * vol];
            let mut d = vec![0.0f32; vol];
            for r in 0..h {
                for col in 0..w {
                    for ti in 0..f {
                        d[ti * h * w + r * w + col] = src[(r * w + col) * f + ti];
                    }
                }
            }
            make(d)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_preserves_layout() {
        let s = Sequence::new(2, 3, 4, (0..24).map(|i| i as f32 / 24.0).collect()).unwrap();
        let t = sequences_to_tensor(std::slice::from_ref(&s)).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2, 3, 4]);
        assert_eq!(t.data()[1], s.get(0, 0, 1));
        let back = tensor_to_sequences(&t, |d| Sequence::new(2, 3, 4, d)).unwrap();
        assert_eq!(back[0], s);
    }

    #[test]
    fn invalid_configs() {
        let mut c = NetConfig::desk_scale();
        c.levels = 0;
        assert!(build_network(&c).is_err());
        let mut c = NetConfig::desk_scale();
        c.base_channels = 0;
        assert!(build_network(&c).is_err());
    }
}

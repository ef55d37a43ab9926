//! Additive attention gates on the skip connections.

use super::{init_conv, sequences_to_tensor, tensor_to_sequences, Bound, FilterNet};
use crate::error::{Error, Result};
use crate::sequence::Sequence;
use crate::tensor::{Graph, Mode, ParamStore, Tensor, Var};

pub(super) fn init_gate(
    p: &mut ParamStore,
    seed: u64,
    name: &str,
    f_l: usize,
    f_g: usize,
    f_int: usize,
) -> Result<()> {
    init_conv(p, seed, &format!("{name}.wx"), f_l, f_int, [1, 1, 1], false)?;
    init_conv(p, seed, &format!("{name}.wg"), f_g, f_int, [1, 1, 1], false)?;
    p.insert(format!("{name}.bxg"), Tensor::zeros(&[f_int]), true)?;
    init_conv(p, seed, &format!("{name}.psi"), f_int, 1, [1, 1, 1], false)?;
    p.insert(format!("{name}.bpsi"), Tensor::zeros(&[1]), true)?;
    Ok(())
}

/// Graph handles of one gate's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionGateParams {
    pub w_x: Var,
    pub w_g: Var,
    pub b_xg: Var,
    pub psi: Var,
    pub b_psi: Var,
}

impl AttentionGateParams {
    pub fn bind(bound: &Bound, name: &str) -> Result<Self> {
        Ok(Self {
            w_x: bound.get(&format!("{name}.wx.weight"))?,
            w_g: bound.get(&format!("{name}.wg.weight"))?,
            b_xg: bound.get(&format!("{name}.bxg"))?,
            psi: bound.get(&format!("{name}.psi.weight"))?,
            b_psi: bound.get(&format!("{name}.bpsi"))?,
        })
    }
}

pub struct GateOutput {
    /// `α ⊙ x_l`.
    pub attended: Var,
    /// Pre-sigmoid coefficients at the gating resolution.
    pub intermediate: Var,
    /// Sigmoid coefficients upsampled to the skip resolution, one channel.
    pub alpha: Var,
}

/// `x_l` is `[B, F_l, H, W, F]`, `gating` is `[B, F_g, H/2, W/2, F]`.
pub fn attention_gate_forward(
    g: &mut Graph,
    x_l: Var,
    gating: Var,
    p: &AttentionGateParams,
) -> Result<GateOutput> {
    let (bx, _, h, w, f) = g.value(x_l).dims5()?;
    let (bg, _, gh, gw, gf) = g.value(gating).dims5()?;
    if bx != bg || gf != f || 2 * gh != h || 2 * gw != w {
        return Err(Error::Dimension(format!(
            "attention gate: skip {:?} and gating {:?} are not 2:1 aligned",
            g.value(x_l).shape(),
            g.value(gating).shape()
        )));
    }
    let xd = g.avgpool(x_l)?;
    let theta = g.conv3d(xd, p.w_x, None)?;
    let phi = g.conv3d(gating, p.w_g, Some(p.b_xg))?;
    let sum = g.add(theta, phi)?;
    let act = g.relu(sum)?;
    let q = g.conv3d(act, p.psi, Some(p.b_psi))?;
    let a = g.sigmoid(q);
    let alpha = g.upsample(a)?;
    let attended = g.mul_channel(x_l, alpha)?;
    Ok(GateOutput {
        attended,
        intermediate: q,
        alpha,
    })
}

/// Attention maps of one scale, both at the skip resolution.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    /// 1-based scale; scale `l` has `H/2^(l-1) × W/2^(l-1)` pixels.
    pub scale: usize,
    /// Pre-sigmoid map, min-max normalised to `[0, 1]`.
    pub intermediate: Sequence,
    pub final_map: Sequence,
}

/// Evaluation-mode attention maps for every gate, finest scale first.
pub fn dump_attention(net: &FilterNet, input: &Sequence) -> Result<Vec<AttentionMaps>> {
    if !net.config.use_attention {
        return Err(Error::Contract("network has no attention gates".into()));
    }
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &net.params, false)?;
    let x = g.input(sequences_to_tensor(std::slice::from_ref(input))?);
    let fwd = net.forward_graph(&mut g, &bound, x, Mode::Eval, 0)?;
    let mut out = Vec::with_capacity(fwd.gates.len());
    for (l, gate) in fwd.gates.iter().enumerate() {
        let up = g.upsample(gate.intermediate)?;
        let q = g.value(up);
        let (_, _, h, w, f) = q.dims5()?;
        let (lo, hi) = q
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let span = hi - lo;
        let norm: Vec<f32> = q
            .data()
            .iter()
            .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect();
        let norm = Tensor::new(q.shape().to_vec(), norm)?;
        let make = |d| Sequence::from_clamped(h, w, f, d);
        out.push(AttentionMaps {
            scale: l + 1,
            intermediate: tensor_to_sequences(&norm, make)?.remove(0),
            final_map: tensor_to_sequences(g.value(gate.alpha), make)?.remove(0),
        });
    }
    Ok(out)
}

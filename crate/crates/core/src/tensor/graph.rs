use rand::Rng;

use super::conv::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::stream;

pub const BN_EPS: f32 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: [usize; 3],
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: Var,
    },
    Upsample {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
        mask: Vec<bool>,
    },
    Sigmoid {
        x: Var,
    },
    Dropout {
        x: Var,
        scale: Vec<f32>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulChannel {
        x: Var,
        alpha: Var,
    },
    Scale {
        x: Var,
        s: f32,
    },
    GlobalAvgPool {
        x: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f32>,
    },
    Combine {
        terms: Vec<(Var, f64)>,
    },
    Bce {
        z: Var,
        real: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Full-precision value of scalar reductions.
    scalar: Option<f64>,
}

/// Tape of tensor operations. Build the forward pass with the op methods,
/// then call [`Graph::backward`] on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    replay: Option<Vec<Branch>>,
}

#[derive(Debug, Clone, PartialEq)]
enum Branch {
    Relu(Vec<bool>),
    Pool(Vec<u32>),
}

/// Recorded piecewise decisions of a graph, see [`Graph::replaying`].
#[derive(Debug, Clone, PartialEq)]
pub struct Branches(Vec<Branch>);

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, scalar: Option<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scalar,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is accumulated for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false, None)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a scalar node, in full precision when available.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.scalar.unwrap_or(n.value.data()[0] as f64)
    }

    /// Branch decisions (ReLU masks, max-pool winners) in creation order.
    pub fn branches(&self) -> Branches {
        Branches(
            self.nodes
                .iter()
                .filter_map(|n| match &n.op {
                    Op::Relu { mask, .. } => Some(Branch::Relu(mask.clone())),
                    Op::MaxPool { argmax, .. } => Some(Branch::Pool(argmax.clone())),
                    _ => None,
                })
                .collect(),
        )
    }

    /// A graph whose ReLU and max-pool ops reuse recorded decisions instead
    /// of deciding from their inputs. Building the same ops in the same order
    /// then evaluates the smooth piece the recording was taken on.
    pub fn replaying(branches: Branches) -> Self {
        let mut queue = branches.0;
        queue.reverse();
        Self {
            replay: Some(queue),
            ..Self::default()
        }
    }

    fn next_branch(&mut self) -> Result<Option<Branch>> {
        match &mut self.replay {
            None => Ok(None),
            Some(q) => q
                .pop()
                .map(Some)
                .ok_or_else(|| Error::Contract("replay ran out of recorded branches".into())),
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (bs, cin, h, wd, f) = self.value(x).dims5()?;
        let (cout, wcin, kh, kw, kf) = self.value(w).dims5()?;
        if wcin != cin {
            return Err(Error::Dimension(format!(
                "conv3d: input has {cin} channels, weights expect {wcin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 || kf % 2 == 0 {
            return Err(Error::Dimension(
                "conv3d: kernel extents must be odd for same padding".into(),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::Dimension(format!(
                    "conv3d: bias length must be {cout}"
                )));
            }
        }
        let geom = ConvGeom {
            batch: bs,
            cin,
            cout,
            h,
            w: wd,
            f,
            k: [kh, kw, kf],
        };
        let out = conv::forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![bs, cout, h, wd, f], out)?,
            Op::Conv {
                x,
                w,
                b,
                k: [kh, kw, kf],
            },
            rg,
            None,
        ))
    }

    /// 2×2×1 max pooling; ties resolve to the first window element in
    /// row-major order.
    pub fn maxpool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w, f) = self.value(x).dims5()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "maxpool: {h}x{w} is not divisible by 2"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let recorded = self.next_branch()?;
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; b * c * oh * ow * f];
        let mut argmax = vec![0u32; out.len()];
        for bc in 0..b * c {
            for i in 0..oh {
                for j in 0..ow {
                    for t in 0..f {
                        let o = ((bc * oh + i) * ow + j) * f + t;
                        let mut best_idx = ((bc * h + 2 * i) * w + 2 * j) * f + t;
                        let mut best = xv[best_idx];
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = ((bc * h + 2 * i + di) * w + 2 * j + dj) * f + t;
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                        out[o] = best;
                        argmax[o] = best_idx as u32;
                    }
                }
            }
        }
        match recorded {
            Some(Branch::Pool(recorded)) if recorded.len() == argmax.len() => {
                argmax = recorded;
                for (o, &a) in out.iter_mut().zip(&argmax) {
                    *o = xv[a as usize];
                }
            }
            Some(_) => {
                return Err(Error::Contract(
                    "replayed branch is not this max-pool".into(),
                ))
            }
            None => {}
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![b, c, oh, ow, f], out)?,
            Op::MaxPool { x, argmax },
            rg,
            None,
        ))
    }

    /// 2×2×1 average pooling.
    pub fn avgpool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w, f) = self.value(x).dims5()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "avgpool: {h}x{w} is not divisible by 2"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; b * c * oh * ow * f];
        for bc in 0..b * c {
            for i in 0..oh {
                for j in 0..ow {
                    for t in 0..f {
                        let at = |di: usize, dj: usize| {
                            xv[((bc * h + 2 * i + di) * w + 2 * j + dj) * f + t]
                        };
                        out[((bc * oh + i) * ow + j) * f + t] =
                            0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![b, c, oh, ow, f], out)?,
            Op::AvgPool { x },
            rg,
            None,
        ))
    }

    /// Nearest-neighbour 2×2×1 upsampling.
    pub fn upsample(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w, f) = self.value(x).dims5()?;
        let (oh, ow) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; b * c * oh * ow * f];
        for bc in 0..b * c {
            for i in 0..oh {
                for j in 0..ow {
                    let src = ((bc * h + i / 2) * w + j / 2) * f;
                    let dst = ((bc * oh + i) * ow + j) * f;
                    out[dst..dst + f].copy_from_slice(&xv[src..src + f]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![b, c, oh, ow, f], out)?,
            Op::Upsample { x },
            rg,
            None,
        ))
    }

    /// Batch normalisation over `(batch, H, W, F)` per channel. Training mode
    /// uses batch statistics and returns them so the caller can update its
    /// running estimates; evaluation mode uses `running`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running: (&[f32], &[f32]),
    ) -> Result<(Var, Option<BnStats>)> {
        let (b, c, h, w, f) = self.value(x).dims5()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Dimension(format!(
                "batchnorm: gamma/beta must have {c} entries"
            )));
        }
        let vol = h * w * f;
        let n = (b * vol) as f64;
        let xv = self.value(x).data();
        let (mean, var): (Vec<f32>, Vec<f32>) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for bi in 0..b {
                        s += xv[(bi * c + ch) * vol..(bi * c + ch + 1) * vol]
                            .iter()
                            .map(|&v| v as f64)
                            .sum::<f64>();
                    }
                    let m = s / n;
                    let mut ss = 0.0f64;
                    for bi in 0..b {
                        ss += xv[(bi * c + ch) * vol..(bi * c + ch + 1) * vol]
                            .iter()
                            .map(|&v| (v as f64 - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = m as f32;
                    var[ch] = (ss / n) as f32;
                }
                (mean, var)
            }
            Mode::Eval => {
                if running.0.len() != c || running.1.len() != c {
                    return Err(Error::Dimension(
                        "batchnorm: running stats size mismatch".into(),
                    ));
                }
                (running.0.to_vec(), running.1.to_vec())
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0f32; xv.len()];
        let mut out = vec![0.0f32; xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let r = (bi * c + ch) * vol..(bi * c + ch + 1) * vol;
                for ((o, xh), &xi) in out[r.clone()]
                    .iter_mut()
                    .zip(&mut xhat[r.clone()])
                    .zip(&xv[r])
                {
                    *xh = (xi - mean[ch]) * inv_std[ch];
                    *o = g[ch] * *xh + be[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let stats = (mode == Mode::Train).then_some(BnStats { mean, var });
        let v = self.push(
            Tensor::new(vec![b, c, h, w, f], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            rg,
            None,
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mask = match self.next_branch()? {
            Some(Branch::Relu(m)) if m.len() == self.value(x).len() => m,
            Some(_) => return Err(Error::Contract("replayed branch is not this relu".into())),
            None => self.value(x).data.iter().map(|&v| v > 0.0).collect(),
        };
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t
                .data
                .iter()
                .zip(&mask)
                .map(|(&v, &m)| if m { v } else { 0.0 })
                .collect(),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Relu { x, mask }, rg, None))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| sigmoid(v)).collect(),
        };
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid { x }, rg, None)
    }

    /// Inverted dropout. Identity in evaluation mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f32, mode: Mode, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let mut rng = stream(seed);
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let scale: Vec<f32> = (0..t.len())
            .map(|_| {
                if rng.random::<f32>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().zip(&scale).map(|(&v, &s)| v * s).collect(),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout { x, scale }, rg, None))
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, h, w, f) = self.value(a).dims5()?;
        let (bb, cb, hb, wb, fb) = self.value(b).dims5()?;
        if (ba, h, w, f) != (bb, hb, wb, fb) {
            return Err(Error::Dimension(format!(
                "concat: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let vol = h * w * f;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for bi in 0..ba {
            out.extend_from_slice(&av[bi * ca * vol..(bi + 1) * ca * vol]);
            out.extend_from_slice(&bv[bi * cb * vol..(bi + 1) * cb * vol]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![ba, ca + cb, h, w, f], out)?,
            Op::Concat { a, b },
            rg,
            None,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg, None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg, None))
    }

    /// Multiplies every channel of `x` by a single-channel map `alpha`.
    pub fn mul_channel(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (b, c, h, w, f) = self.value(x).dims5()?;
        if self.value(alpha).shape() != [b, 1, h, w, f] {
            return Err(Error::Dimension(format!(
                "mul_channel: alpha {:?} does not broadcast over {:?}",
                self.value(alpha).shape(),
                self.value(x).shape()
            )));
        }
        let vol = h * w * f;
        let (xv, av) = (self.value(x).data(), self.value(alpha).data());
        let mut out = vec![0.0f32; xv.len()];
        for bi in 0..b {
            let a = &av[bi * vol..(bi + 1) * vol];
            for ch in 0..c {
                let r = (bi * c + ch) * vol..(bi * c + ch + 1) * vol;
                for ((o, &xi), &ai) in out[r.clone()].iter_mut().zip(&xv[r]).zip(a) {
                    *o = xi * ai;
                }
            }
        }
        let rg = self.rg(x) || self.rg(alpha);
        Ok(self.push(
            Tensor::new(vec![b, c, h, w, f], out)?,
            Op::MulChannel { x, alpha },
            rg,
            None,
        ))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| v * s).collect(),
        };
        let scalar = self.nodes[x.0].scalar.map(|v| v * s as f64);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, s }, rg, scalar)
    }

    /// Mean over the spatial and temporal axes: `[B,C,H,W,F] → [B,C,1,1,1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w, f) = self.value(x).dims5()?;
        let vol = h * w * f;
        let xv = self.value(x).data();
        let out: Vec<f32> = (0..b * c)
            .map(|bc| {
                (xv[bc * vol..(bc + 1) * vol]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>()
                    / vol as f64) as f32
            })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![b, c, 1, 1, 1], out)?,
            Op::GlobalAvgPool { x },
            rg,
            None,
        ))
    }

    /// Mean squared difference over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mse")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let s: f64 = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum();
        let m = s / av.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(m as f32), Op::Mse { a, b }, rg, Some(m)))
    }

    /// `Σ weights[i] · x[i]`, used to project tensors onto scalars.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f32>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::Dimension(
                "weighted_sum: weight length mismatch".into(),
            ));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&v, &w)| v as f64 * w as f64)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(s as f32),
            Op::WeightedSum { x, weights },
            rg,
            Some(s),
        ))
    }

    /// Linear combination of scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::Dimension("combine: terms must be scalars".into()));
            }
            s += c * self.scalar(v);
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(
            Tensor::scalar(s as f32),
            Op::Combine {
                terms: terms.to_vec(),
            },
            rg,
            Some(s),
        ))
    }

    /// Mean binary cross-entropy of logits against an all-real (`real = true`)
    /// or all-fake target, with probabilities clamped to `[1e-7, 1 − 1e-7]`.
    pub fn bce_logits(&mut self, z: Var, real: bool) -> Var {
        let zv = self.value(z).data();
        let s: f64 = zv
            .iter()
            .map(|&v| {
                let p = sigmoid64(v as f64).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                if real {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum();
        let m = s / zv.len() as f64;
        let rg = self.rg(z);
        self.push(Tensor::scalar(m as f32), Op::Bce { z, real }, rg, Some(m))
    }

    fn acc(&mut self, v: Var, g: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => add_into(existing, &g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar node. Gradients of leaves that require
    /// them are available through [`Graph::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract("backward needs a scalar loss".into()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, g)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: Vec<f32>) -> Result<()> {
        // Borrow the node immutably, collect input gradients, then accumulate.
        let mut out: Vec<(Var, Vec<f32>)> = Vec::with_capacity(3);
        {
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, w, b, k } => {
                    let (bs, cin, h, wd, f) = val(*x).dims5()?;
                    let cout = val(*w).shape()[0];
                    let geom = ConvGeom {
                        batch: bs,
                        cin,
                        cout,
                        h,
                        w: wd,
                        f,
                        k: *k,
                    };
                    let grads = conv::backward(
                        val(*x).data(),
                        val(*w).data(),
                        &g,
                        &geom,
                        rg(*x),
                        rg(*w),
                        b.is_some_and(rg),
                    );
                    if let Some(dx) = grads.dx {
                        out.push((*x, dx));
                    }
                    if let Some(dw) = grads.dw {
                        out.push((*w, dw));
                    }
                    if let (Some(b), Some(db)) = (b, grads.db) {
                        out.push((*b, db));
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![0.0f32; val(*x).len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src as usize] += g[o];
                    }
                    out.push((*x, dx));
                }
                Op::AvgPool { x } => {
                    let (b, c, h, w, f) = val(*x).dims5()?;
                    let (oh, ow) = (h / 2, w / 2);
                    let mut dx = vec![0.0f32; val(*x).len()];
                    for bc in 0..b * c {
                        for i in 0..oh {
                            for j in 0..ow {
                                for t in 0..f {
                                    let gv = 0.25 * g[((bc * oh + i) * ow + j) * f + t];
                                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                        dx[((bc * h + 2 * i + di) * w + 2 * j + dj) * f + t] += gv;
                                    }
                                }
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                Op::Upsample { x } => {
                    let (b, c, h, w, f) = val(*x).dims5()?;
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut dx = vec![0.0f32; val(*x).len()];
                    for bc in 0..b * c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let dst = ((bc * h + i / 2) * w + j / 2) * f;
                                let src = ((bc * oh + i) * ow + j) * f;
                                add_into(&mut dx[dst..dst + f], &g[src..src + f]);
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (b, c, h, w, f) = val(*x).dims5()?;
                    let vol = h * w * f;
                    let n = (b * vol) as f64;
                    let gm = val(*gamma).data();
                    let mut dgamma = vec![0.0f32; c];
                    let mut dbeta = vec![0.0f32; c];
                    let mut dx = rg(*x).then(|| vec![0.0f32; xhat.len()]);
                    for ch in 0..c {
                        let (mut sg, mut sgx) = (0.0f64, 0.0f64);
                        for bi in 0..b {
                            let r = (bi * c + ch) * vol..(bi * c + ch + 1) * vol;
                            for (&gi, &xh) in g[r.clone()].iter().zip(&xhat[r]) {
                                sg += gi as f64;
                                sgx += gi as f64 * xh as f64;
                            }
                        }
                        dgamma[ch] = sgx as f32;
                        dbeta[ch] = sg as f32;
                        if let Some(dx) = dx.as_mut() {
                            let k = gm[ch] * inv_std[ch];
                            for bi in 0..b {
                                let r = (bi * c + ch) * vol..(bi * c + ch + 1) * vol;
                                if *batch_stats {
                                    let (mg, mgx) = ((sg / n) as f32, (sgx / n) as f32);
                                    for ((d, &gi), &xh) in
                                        dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r])
                                    {
                                        *d = k * (gi - mg - xh * mgx);
                                    }
                                } else {
                                    for (d, &gi) in dx[r.clone()].iter_mut().zip(&g[r]) {
                                        *d = k * gi;
                                    }
                                }
                            }
                        }
                    }
                    if let Some(dx) = dx {
                        out.push((*x, dx));
                    }
                    out.push((*gamma, dgamma));
                    out.push((*beta, dbeta));
                }
                Op::Relu { x, mask } => {
                    let dx = mask
                        .iter()
                        .zip(&g)
                        .map(|(&m, &gi)| if m { gi } else { 0.0 })
                        .collect();
                    out.push((*x, dx));
                }
                Op::Sigmoid { x } => {
                    let dx = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gi)| gi * y * (1.0 - y))
                        .collect();
                    out.push((*x, dx));
                }
                Op::Dropout { x, scale } => {
                    out.push((*x, g.iter().zip(scale).map(|(a, b)| a * b).collect()));
                }
                Op::Concat { a, b } => {
                    let (bs, ca, h, w, f) = val(*a).dims5()?;
                    let cb = val(*b).shape()[1];
                    let vol = h * w * f;
                    let (mut da, mut db) = (
                        Vec::with_capacity(val(*a).len()),
                        Vec::with_capacity(val(*b).len()),
                    );
                    for bi in 0..bs {
                        let base = bi * (ca + cb) * vol;
                        da.extend_from_slice(&g[base..base + ca * vol]);
                        db.extend_from_slice(&g[base + ca * vol..base + (ca + cb) * vol]);
                    }
                    out.push((*a, da));
                    out.push((*b, db));
                }
                Op::Add { a, b } => {
                    out.push((*a, g.clone()));
                    out.push((*b, g));
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    out.push((*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()));
                    out.push((*b, g.iter().zip(av).map(|(x, y)| x * y).collect()));
                }
                Op::MulChannel { x, alpha } => {
                    let (b, c, h, w, f) = val(*x).dims5()?;
                    let vol = h * w * f;
                    let (xv, av) = (val(*x).data(), val(*alpha).data());
                    let mut dx = vec![0.0f32; xv.len()];
                    let mut da = vec![0.0f32; av.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * vol;
                            for s in 0..vol {
                                dx[base + s] = g[base + s] * av[bi * vol + s];
                                da[bi * vol + s] += g[base + s] * xv[base + s];
                            }
                        }
                    }
                    out.push((*x, dx));
                    out.push((*alpha, da));
                }
                Op::Scale { x, s } => {
                    out.push((*x, g.iter().map(|v| v * s).collect()));
                }
                Op::GlobalAvgPool { x } => {
                    let (b, c, h, w, f) = val(*x).dims5()?;
                    let vol = h * w * f;
                    let mut dx = vec![0.0f32; b * c * vol];
                    for bc in 0..b * c {
                        dx[bc * vol..(bc + 1) * vol].fill(g[bc] / vol as f32);
                    }
                    out.push((*x, dx));
                }
                Op::Mse { a, b } => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let k = 2.0 * g[0] / av.len() as f32;
                    let da: Vec<f32> = av.iter().zip(bv).map(|(x, y)| k * (x - y)).collect();
                    if rg(*b) {
                        out.push((*b, da.iter().map(|v| -v).collect()));
                    }
                    out.push((*a, da));
                }
                Op::WeightedSum { x, weights } => {
                    out.push((*x, weights.iter().map(|w| w * g[0]).collect()));
                }
                Op::Combine { terms } => {
                    for &(v, c) in terms {
                        out.push((v, vec![(c * g[0] as f64) as f32]));
                    }
                }
                Op::Bce { z, real } => {
                    let zv = val(*z).data();
                    let k = g[0] as f64 / zv.len() as f64;
                    let dz = zv
                        .iter()
                        .map(|&v| {
                            let p = sigmoid64(v as f64);
                            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                                0.0
                            } else if *real {
                                (k * (p - 1.0)) as f32
                            } else {
                                (k * p) as f32
                            }
                        })
                        .collect();
                    out.push((*z, dz));
                }
            }
        }
        for (v, gv) in out {
            self.acc(v, gv);
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    sigmoid64(v as f64) as f32
}

#[inline]
fn sigmoid64(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

//! Self-check suite run by `declutter verify`.
//!
//! Each check compares an implementation against an independent oracle.
//! [`Mutation`] swaps a deliberately wrong variant in for the code under
//! test, which demonstrates that the corresponding oracle catches it.

use rand::Rng;

use crate::clutter::{
    dataset_size, enumerate_pattern_specs, shift_draw, time_shift_pair, ClutterClass,
};
use crate::error::Result;
use crate::metrics::{mare, ssim2d, ssim3d, SsimConfig};
use crate::net::{
    attention_gate_forward, build_network, loss_perceptual, loss_rec, AttentionGateParams, Bound,
    NetConfig, PerceptualNet,
};
use crate::rng::stream;
use crate::sequence::{SectorMask, Sequence};
use crate::svd::{
    build_casorati, filter_block, singular_values, svd_filter_sequence, SvdFilterConfig,
};
use crate::tensor::gradcheck::DEFAULT_PERTURBATION;
use crate::tensor::{grad_check, Graph, Mode, ParamStore, Tensor, Var};

/// Faults that can be injected into the code under test.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Mutation {
    /// Max-pool ties go to the last window element instead of the first.
    pub pool_last_tie: bool,
    /// SSIM runs with this K1 instead of the configured one.
    pub ssim_k1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn from(name: &'static str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self {
                name,
                passed,
                detail,
            },
            Err(e) => Self {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        }
    }
}

const GRAD_TOLERANCE: f64 = 1e-3;

fn random(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut rng = stream(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn random_seq(h: usize, w: usize, f: usize, seed: u64) -> Result<Sequence> {
    Sequence::new(h, w, f, random(&[h * w * f], seed, 0.0, 1.0).into_data())
}

fn check_enumeration() -> Result<(bool, String)> {
    let specs = enumerate_pattern_specs();
    let count = |c| specs.iter().filter(|s| s.class == c).count();
    let got = (
        count(ClutterClass::Nf),
        count(ClutterClass::Rl),
        count(ClutterClass::NfRl),
        specs.len(),
        dataset_size(specs.len(), 3, 6, 3),
    );
    Ok((
        got == (18, 324, 192, 534, 28_836),
        format!("NF/RL/NF_RL/total/dataset = {got:?}"),
    ))
}

fn check_stsq_codec() -> Result<(bool, String)> {
    let s = random_seq(7, 5, 3, 1)?;
    let bytes = s.to_bytes();
    let back = Sequence::from_bytes(&bytes)?;
    let mut truncated = bytes.clone();
    truncated.pop();
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    let ok = back == s
        && back.to_bytes() == bytes
        && Sequence::from_bytes(&truncated).is_err()
        && Sequence::from_bytes(&bad_magic).is_err();
    Ok((ok, format!("{} bytes round-tripped", bytes.len())))
}

fn check_weight_codec() -> Result<(bool, String)> {
    let mut p = ParamStore::new();
    p.insert("a.weight", random(&[2, 3, 1, 1, 1], 2, -1.0, 1.0), true)?;
    p.insert("a.bias", random(&[2], 3, -1.0, 1.0), false)?;
    let bytes = p.to_bytes();
    let mut q = p.clone();
    for name in ["a.weight", "a.bias"] {
        q.get_mut(name)?.data_mut().fill(0.0);
    }
    q.load_bytes(&bytes)?;
    Ok((q.to_bytes() == bytes, format!("{} bytes", bytes.len())))
}

fn grad(
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
) -> Result<(bool, String)> {
    let err = grad_check(build, inputs, DEFAULT_PERTURBATION, 5)?;
    Ok((
        err <= GRAD_TOLERANCE,
        format!("max relative error {err:.2e}"),
    ))
}

fn tiny_net_config(levels: usize, base: usize) -> NetConfig {
    NetConfig {
        levels,
        base_channels: base,
        dropout_rate: 0.0,
        seed: 3,
        ..NetConfig::desk_scale()
    }
}

fn grad_tiny_network() -> Result<(bool, String)> {
    let mut net = build_network(&tiny_net_config(1, 2))?;
    let shape = net.params.get("head.weight")?.shape().to_vec();
    *net.params.get_mut("head.weight")? = random(&shape, 9, -0.5, 0.5);
    let names: Vec<String> = net.params.trainable_names().map(str::to_string).collect();
    let mut inputs = vec![random(&[2, 1, 8, 8, 4], 20, 0.0, 1.0)];
    for n in &names {
        inputs.push(net.params.get(n)?.clone());
    }
    let target = random(&[2, 1, 8, 8, 4], 21, 0.0, 1.0);
    grad(
        |g, v| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
            let out = net.forward_graph(g, &bound, v[0], Mode::Train, 0)?.output;
            let y = g.input(target.clone());
            loss_rec(g, out, y)
        },
        &inputs,
    )
}

fn grad_perceptual() -> Result<(bool, String)> {
    let p = PerceptualNet::from_net(PerceptualNet::untrained(&tiny_net_config(2, 2))?)?;
    let target = random(&[1, 1, 8, 8, 4], 45, 0.0, 1.0);
    grad(
        |g, v| {
            let bound = p.bind(g)?;
            let t = g.input(target.clone());
            loss_perceptual(g, v[0], t, &p, &bound)
        },
        &[random(&[1, 1, 8, 8, 4], 46, 0.0, 1.0)],
    )
}

fn grad_attention_gate() -> Result<(bool, String)> {
    let t = vec![
        random(&[2, 3, 4, 4, 3], 13, -1.0, 1.0),
        random(&[2, 5, 2, 2, 3], 14, -1.0, 1.0),
        random(&[3, 3, 1, 1, 1], 15, -1.0, 1.0),
        random(&[3, 5, 1, 1, 1], 16, -1.0, 1.0),
        random(&[3], 17, -0.5, 0.5),
        random(&[1, 3, 1, 1, 1], 18, -1.0, 1.0),
        random(&[1], 19, -0.5, 0.5),
    ];
    grad(
        |g, v| {
            let p = AttentionGateParams {
                w_x: v[2],
                w_g: v[3],
                b_xg: v[4],
                psi: v[5],
                b_psi: v[6],
            };
            Ok(attention_gate_forward(g, v[0], v[1], &p)?.attended)
        },
        &t,
    )
}

/// Pooled values and the input gradient of their sum.
fn pool_under_test(x: &Tensor, m: &Mutation) -> Result<(Vec<f32>, Vec<f32>)> {
    let (_, _, h, w, f) = x.dims5()?;
    // Reversing rows and columns maps every 2×2 window onto a window with
    // its scan order reversed, so first-wins becomes last-wins.
    let flip = |d: &[f32], h: usize, w: usize| -> Vec<f32> {
        let mut out = vec![0.0; d.len()];
        for (i, v) in out.iter_mut().enumerate() {
            let t = i % f;
            let c = (i / f) % w;
            let r = (i / (f * w)) % h;
            let rest = i / (f * w * h);
            *v = d[((rest * h + (h - 1 - r)) * w + (w - 1 - c)) * f + t];
        }
        out
    };
    let input = if m.pool_last_tie {
        Tensor::new(x.shape().to_vec(), flip(x.data(), h, w))?
    } else {
        x.clone()
    };
    let mut g = Graph::new();
    let xv = g.leaf(input, true);
    let p = g.maxpool(xv)?;
    let n = g.value(p).len();
    let s = g.weighted_sum(p, vec![1.0; n])?;
    g.backward(s)?;
    let out = g.value(p).data().to_vec();
    let dx = g.grad(xv).unwrap_or(&[]).to_vec();
    if m.pool_last_tie {
        Ok((flip(&out, h / 2, w / 2), flip(&dx, h, w)))
    } else {
        Ok((out, dx))
    }
}

fn check_pool_tie_break(m: &Mutation) -> Result<(bool, String)> {
    let (c, h, w, f) = (2, 4, 6, 3);
    let mut rng = stream(60);
    let levels = [0.0f32, 0.5, 1.0];
    let data: Vec<f32> = (0..c * h * w * f)
        .map(|_| levels[rng.random_range(0..3)])
        .collect();
    let x = Tensor::new(vec![1, c, h, w, f], data)?;
    let (out, dx) = pool_under_test(&x, m)?;
    let mut want_out = Vec::new();
    let mut want_dx = vec![0.0f32; x.len()];
    let at = |ch: usize, r: usize, col: usize, t: usize| ((ch * h + r) * w + col) * f + t;
    for ch in 0..c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for t in 0..f {
                    let window = [
                        at(ch, 2 * i, 2 * j, t),
                        at(ch, 2 * i, 2 * j + 1, t),
                        at(ch, 2 * i + 1, 2 * j, t),
                        at(ch, 2 * i + 1, 2 * j + 1, t),
                    ];
                    let max = window.iter().map(|&k| x.data()[k]).fold(f32::MIN, f32::max);
                    let first = *window
                        .iter()
                        .find(|&&k| x.data()[k] == max)
                        .expect("non-empty");
                    want_out.push(max);
                    want_dx[first] += 1.0;
                }
            }
        }
    }
    let wrong = dx.iter().zip(&want_dx).filter(|(a, b)| a != b).count();
    Ok((
        out == want_out && wrong == 0,
        format!("{wrong} gradient entries routed differently from first-wins"),
    ))
}

/// Direct SSIM with explicit per-window weights and the reference constants.
fn ssim_oracle(x: &Sequence, y: &Sequence, sector: &SectorMask, temporal: usize) -> Option<f64> {
    let (h, w, f) = x.dims();
    let (n, sigma) = (11usize, 1.5f64);
    let g = |len: usize, i: usize| {
        let d = i as f64 - (len as f64 - 1.0) / 2.0;
        (-d * d / (2.0 * sigma * sigma)).exp()
    };
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for t0 in 0..=f - temporal {
        for r0 in 0..=h - n {
            for c0 in 0..=w - n {
                let mut s = [0.0f64; 6];
                let mut any_nonzero = false;
                let mut any_sector = false;
                for k in 0..temporal {
                    for i in 0..n {
                        for j in 0..n {
                            let (a, b) =
                                (x.get(r0 + i, c0 + j, t0 + k), y.get(r0 + i, c0 + j, t0 + k));
                            any_nonzero |= a != 0.0 || b != 0.0;
                            any_sector |= sector.get(r0 + i, c0 + j);
                            let wt = if temporal == 1 { 1.0 } else { g(temporal, k) };
                            let wt = wt * g(n, i) * g(n, j);
                            let (a, b) = (255.0 * a as f64, 255.0 * b as f64);
                            for (acc, v) in s.iter_mut().zip([1.0, a, b, a * a, b * b, a * b]) {
                                *acc += wt * v;
                            }
                        }
                    }
                }
                if !any_nonzero || !any_sector {
                    continue;
                }
                let (mx, my) = (s[1] / s[0], s[2] / s[0]);
                let vx = s[3] / s[0] - mx * mx;
                let vy = s[4] / s[0] - my * my;
                let cxy = s[5] / s[0] - mx * my;
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2)
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    (count > 0).then(|| total / count as f64)
}

fn check_ssim_oracle(m: &Mutation) -> Result<(bool, String)> {
    let (h, w, f) = (16, 16, 12);
    // dark frames with different means keep the luminance term sensitive to C1
    let x = Sequence::new(h, w, f, random(&[h * w * f], 70, 0.0, 0.3).into_data())?;
    let mut rng = stream(71);
    let y = Sequence::new(
        h,
        w,
        f,
        x.data()
            .iter()
            .map(|v| v * 0.4 + rng.random_range(0.0..0.05f32))
            .collect(),
    )?;
    let mut cfg = SsimConfig::default();
    if let Some(k1) = m.ssim_k1 {
        cfg.k1 = k1;
    }
    let sector = SectorMask::full(h, w);
    let d2 = (ssim2d(&x, &y, &cfg, &sector)? - ssim_oracle(&x, &y, &sector, 1).unwrap_or(f64::NAN))
        .abs();
    let d3 = (ssim3d(&x, &y, &cfg, &sector)?
        - ssim_oracle(&x, &y, &sector, 11).unwrap_or(f64::NAN))
    .abs();
    let ident = (ssim3d(&x, &x, &cfg, &sector)? - 1.0).abs();
    Ok((
        d2 <= 1e-6 && d3 <= 1e-6 && ident <= 1e-9,
        format!("|2D - oracle| {d2:.1e}, |3D - oracle| {d3:.1e}"),
    ))
}

fn check_mare() -> Result<(bool, String)> {
    let a = random_seq(6, 6, 3, 80)?;
    let b = random_seq(6, 6, 3, 81)?;
    let want = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (255.0 * (*x as f64 - *y as f64)).abs())
        .sum::<f64>()
        / a.data().len() as f64;
    let got = mare(&a, &b)?;
    let ok = (got - want).abs() <= 1e-9 && mare(&a, &a)? == 0.0;
    Ok((ok, format!("mare {got:.6} vs direct {want:.6}")))
}

/// Eigenvalues of AᵀA by cyclic Jacobi rotations.
fn jacobi_singular_values(a: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let mut s = a.transpose() * a;
    let n = s.nrows();
    for _ in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(s[(p, q)].abs());
                if s[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (s[(q, q)] - s[(p, p)]) / (2.0 * s[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                let mut rot = nalgebra::DMatrix::<f64>::identity(n, n);
                rot[(p, p)] = c;
                rot[(q, q)] = c;
                rot[(p, q)] = sn;
                rot[(q, p)] = -sn;
                s = rot.transpose() * &s * &rot;
            }
        }
        if off < 1e-13 {
            break;
        }
    }
    let mut out: Vec<f64> = (0..n).map(|i| s[(i, i)].max(0.0).sqrt()).collect();
    out.sort_by(|a, b| b.total_cmp(a));
    out.truncate(a.nrows().min(a.ncols()));
    out
}

fn check_svd() -> Result<(bool, String)> {
    let s = random_seq(5, 5, 9, 90)?;
    let block = build_casorati(&s, (0, 0), 5)?;
    let got = singular_values(&block)?;
    let want = jacobi_singular_values(&block.matrix);
    let sv_err = got
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs() / b.max(1e-12))
        .fold(0.0, f64::max);

    let mut rng = stream(91);
    let pattern: Vec<f32> = (0..25).map(|_| rng.random_range(0.2..0.8)).collect();
    let data: Vec<f32> = (0..9).flat_map(|_| pattern.iter().copied()).collect();
    let static_block = build_casorati(&Sequence::new(5, 5, 9, data)?, (0, 0), 5)?;
    let residual = filter_block(&static_block, 1)?.matrix.norm() / static_block.matrix.norm();

    let ident = svd_filter_sequence(
        &s,
        &SvdFilterConfig {
            roi: 5,
            drop_count: 0,
        },
    )?;
    let id_err = ident
        .sequence
        .data()
        .iter()
        .zip(s.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    Ok((
        sv_err <= 1e-6 && residual <= 1e-6 && id_err <= 1e-5,
        format!("σ rel err {sv_err:.1e}, static residual {residual:.1e}, k=0 err {id_err:.1e}"),
    ))
}

fn check_residual_identity() -> Result<(bool, String)> {
    let net = build_network(&tiny_net_config(2, 2))?;
    let x = random_seq(8, 8, 4, 95)?;
    let y = net.filter_sequence(&x)?;
    Ok((y == x, "zero-initialised head with residual skip".into()))
}

fn check_time_shift() -> Result<(bool, String)> {
    let frames = 5;
    let a = random_seq(2, 2, frames, 96)?;
    let draws = 2000;
    let mut shifted = 0;
    for seed in 0..draws {
        let draw = shift_draw(0.5, frames, seed);
        let (x, y, k) = time_shift_pair(&a, &a, 0.5, seed)?;
        if x != y || k != draw.unwrap_or(1) {
            return Ok((false, "pair shift disagrees with its draw".into()));
        }
        shifted += usize::from(draw.is_some());
    }
    let frac = shifted as f64 / draws as f64;
    Ok((
        (0.45..=0.55).contains(&frac),
        format!("shifted fraction {frac:.3}"),
    ))
}

/// Runs every check; `mutation` injects faults into the code under test.
pub fn run_checks(mutation: &Mutation) -> Vec<CheckResult> {
    let x = random(&[2, 2, 4, 4, 3], 20, -1.0, 1.0);
    let w = random(&[3, 2, 3, 3, 3], 21, -1.0, 1.0);
    let b = random(&[3], 22, -1.0, 1.0);
    let bn_in = random(&[2, 3, 2, 2, 2], 30, -1.0, 1.0);
    let gamma = random(&[3], 31, -1.0, 1.0);
    let beta = random(&[3], 32, -1.0, 1.0);
    let pa = random(&[1, 2, 2, 2, 3], 40, -1.0, 1.0);
    let pb = random(&[1, 2, 2, 2, 3], 41, -1.0, 1.0);
    vec![
        CheckResult::from("enumeration counts", check_enumeration()),
        CheckResult::from("STSQ codec round trip", check_stsq_codec()),
        CheckResult::from("weight codec round trip", check_weight_codec()),
        CheckResult::from(
            "gradient: conv3d",
            grad(|g, v| g.conv3d(v[0], v[1], Some(v[2])), &[x.clone(), w, b]),
        ),
        CheckResult::from(
            "gradient: batchnorm3d",
            grad(
                |g, v| {
                    let stats = (&[0.1f32, -0.2, 0.3][..], &[1.5f32, 0.5, 2.0][..]);
                    Ok(g.batchnorm(v[0], v[1], v[2], Mode::Train, stats)?.0)
                },
                &[bn_in, gamma, beta],
            ),
        ),
        CheckResult::from(
            "gradient: maxpool3d",
            grad(|g, v| g.maxpool(v[0]), std::slice::from_ref(&x)),
        ),
        CheckResult::from("gradient: upsample3d", grad(|g, v| g.upsample(v[0]), &[x])),
        CheckResult::from("gradient: attention gate", grad_attention_gate()),
        CheckResult::from("gradient: mse", grad(|g, v| g.mse(v[0], v[1]), &[pa, pb])),
        CheckResult::from("gradient: perceptual loss", grad_perceptual()),
        CheckResult::from("gradient: tiny network", grad_tiny_network()),
        CheckResult::from("max-pool tie-break oracle", check_pool_tie_break(mutation)),
        CheckResult::from("SSIM brute-force oracle", check_ssim_oracle(mutation)),
        CheckResult::from("MARE oracle", check_mare()),
        CheckResult::from("SVD oracles", check_svd()),
        CheckResult::from("residual identity", check_residual_identity()),
        CheckResult::from("time-shift augmentation", check_time_shift()),
    ]
}

//! Finite-difference verification of reverse-mode gradients.

use rand::Rng;

use super::{Branches, Graph, Tensor, Var};
use crate::error::Result;
use crate::rng::{derive_seed, stream};

pub const DEFAULT_PERTURBATION: f32 = 4e-3;
const DIRECTIONS: usize = 4;

fn evaluate<F>(
    build: &F,
    inputs: &[Tensor],
    projection: Option<&[f32]>,
    replay: Option<&Branches>,
) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = replay.map_or_else(Graph::new, |b| Graph::replaying(b.clone()));
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let mut out = build(&mut g, &vars)?;
    if let Some(w) = projection {
        out = g.weighted_sum(out, w.to_vec())?;
    }
    Ok((g, vars, out))
}

/// Compares directional derivatives from the tape against central
/// differences along random directions and returns the worst relative
/// error. Non-scalar outputs are projected onto a fixed random vector.
///
/// The shifted evaluations replay the ReLU masks and max-pool winners of
/// the base point, so the difference measures the smooth piece the tape
/// differentiates even when a step would cross a kink.
pub fn grad_check<F>(build: F, inputs: &[Tensor], perturbation: f32, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (probe, _, out) = evaluate(&build, inputs, None, None)?;
    let out_len = probe.value(out).len();
    drop(probe);
    let mut rng = stream(derive_seed(seed, "gradcheck", 0));
    let projection: Option<Vec<f32>> = (out_len > 1).then(|| {
        (0..out_len)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect()
    });

    let (mut g, vars, loss) = evaluate(&build, inputs, projection.as_deref(), None)?;
    let branches = g.branches();
    g.backward(loss)?;
    let grads: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    drop(g);

    let mut worst = 0.0f64;
    for _ in 0..DIRECTIONS {
        let dirs: Vec<Vec<f32>> = inputs
            .iter()
            .map(|t| {
                (0..t.len())
                    .map(|_| rng.random_range(-1.0f32..1.0))
                    .collect()
            })
            .collect();
        let analytic: f64 = grads
            .iter()
            .zip(&dirs)
            .flat_map(|(g, d)| g.iter().zip(d).map(|(&a, &b)| a as f64 * b as f64))
            .sum();
        let shifted = |step: f32| -> Vec<Tensor> {
            inputs
                .iter()
                .zip(&dirs)
                .map(|(t, d)| {
                    let data = t
                        .data()
                        .iter()
                        .zip(d)
                        .map(|(&x, &v)| x + step * v)
                        .collect();
                    Tensor::new(t.shape().to_vec(), data).expect("same shape")
                })
                .collect()
        };
        let central = |step: f32| -> Result<f64> {
            let replay = Some(&branches);
            let (gp, _, lp) = evaluate(&build, &shifted(step), projection.as_deref(), replay)?;
            let (gm, _, lm) = evaluate(&build, &shifted(-step), projection.as_deref(), replay)?;
            Ok((gp.scalar(lp) - gm.scalar(lm)) / (2.0 * step as f64))
        };
        // Richardson extrapolation cancels the h² term of the central difference.
        let numeric = (4.0 * central(perturbation / 2.0)? - central(perturbation)?) / 3.0;
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}

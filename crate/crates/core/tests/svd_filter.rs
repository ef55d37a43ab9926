use declutter::rng::stream;
use declutter::svd::{
    build_casorati, filter_block, scatter_block, singular_values, svd_filter_sequence,
    svd_filter_unclamped, CasoratiBlock, SvdFilterConfig,
};
use declutter::Sequence;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn random_seq(h: usize, w: usize, f: usize, seed: u64) -> Sequence {
    let mut rng = stream(seed);
    Sequence::new(
        h,
        w,
        f,
        (0..h * w * f).map(|_| rng.random::<f32>()).collect(),
    )
    .unwrap()
}

/// One-sided Jacobi: orthogonalise column pairs until converged; the column
/// norms are then the singular values.
fn jacobi_singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| a.column(j).iter().copied().collect())
        .collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    for _ in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= 1e-300 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt().max(1e-300));
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (xp, xq) = (cols[p][i], cols[q][i]);
                    cols[p][i] = c * xp - s * xq;
                    cols[q][i] = s * xp + c * xq;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut s: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.truncate(m.min(n));
    s
}

fn frob(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn constant_sequence_gives_constant_rank_one_block() {
    let s = Sequence::new(5, 5, 7, vec![0.3; 175]).unwrap();
    let b = build_casorati(&s, (0, 0), 5).unwrap();
    assert_eq!(b.matrix.shape(), (25, 7));
    assert!(b.matrix.iter().all(|&v| v == 0.3f32 as f64));
    let sv = singular_values(&b).unwrap();
    assert!(sv[1..].iter().all(|&v| v < 1e-12 * sv[0]));
}

#[test]
fn columns_are_row_major_tiles() {
    let s = random_seq(10, 12, 4, 1);
    let b = build_casorati(&s, (5, 3), 5).unwrap();
    for f in 0..4 {
        for i in 0..25 {
            assert_eq!(b.matrix[(i, f)], s.get(5 + i / 5, 3 + i % 5, f) as f64);
        }
    }
}

#[test]
fn scatter_of_unmodified_block_is_bit_exact() {
    let s = random_seq(10, 10, 6, 2);
    let mut out: Vec<f64> = s.data().iter().map(|&v| v as f64).collect();
    let before = out.clone();
    let b = build_casorati(&s, (5, 0), 5).unwrap();
    out[(3 * 10 + 5) * 10] = -1.0;
    scatter_block(&b, 10, 10, &mut out);
    assert_eq!(out, before);
}

#[test]
fn singular_values_match_jacobi_oracle() {
    for (roi, frames, seed) in [(5, 16, 3u64), (3, 12, 4), (4, 9, 5), (2, 10, 6)] {
        let s = random_seq(roi, roi, frames, seed);
        let b = build_casorati(&s, (0, 0), roi).unwrap();
        let got = singular_values(&b).unwrap();
        let want = jacobi_singular_values(&b.matrix);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-5 * w.max(1e-12), "{g} vs {w}");
        }
    }
}

#[test]
fn k_zero_reproduces_block() {
    let s = random_seq(5, 5, 8, 7);
    let b = build_casorati(&s, (0, 0), 5).unwrap();
    let out = filter_block(&b, 0).unwrap();
    assert!(frob(&(&out.matrix - &b.matrix)) <= 1e-5 * frob(&b.matrix));
}

#[test]
fn rank_one_static_block_is_annihilated() {
    let mut rng = stream(8);
    let pattern: Vec<f64> = (0..25).map(|_| rng.random_range(0.2..1.0)).collect();
    let b = CasoratiBlock {
        origin: (0, 0),
        roi: 5,
        matrix: DMatrix::from_fn(25, 10, |i, _| pattern[i]),
    };
    let out = filter_block(&b, 1).unwrap();
    assert!(frob(&out.matrix) <= 1e-5 * frob(&b.matrix));
}

fn clutter_and_signal(orthogonal: bool) -> (DMatrix<f64>, DMatrix<f64>, f64) {
    let mut rng = stream(9);
    let frames = 16;
    let p: Vec<f64> = (0..25).map(|_| rng.random_range(0.4..0.8)).collect();
    let mut q: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
    let pp: f64 = p.iter().map(|v| v * v).sum();
    let pq: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
    if orthogonal {
        for (qi, pi) in q.iter_mut().zip(&p) {
            *qi -= pq / pp * pi;
        }
    }
    let qq: f64 = q.iter().map(|v| v * v).sum();
    let rho = p.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (pp * qq).sqrt();
    // zero temporal mean, so orthogonal to the static clutter in time
    let s: Vec<f64> = (0..frames)
        .map(|t| (2.0 * std::f64::consts::PI * 3.0 * t as f64 / frames as f64).cos())
        .collect();
    let signal = DMatrix::from_fn(25, frames, |i, t| 0.05 * q[i] * s[t]);
    let clutter = DMatrix::from_fn(25, frames, |i, _| p[i]);
    (clutter, signal, rho)
}

fn filtered_cosine(clutter: &DMatrix<f64>, signal: &DMatrix<f64>) -> f64 {
    let b = CasoratiBlock {
        origin: (0, 0),
        roi: 5,
        matrix: clutter + signal,
    };
    let out = filter_block(&b, 1).unwrap().matrix;
    out.dot(signal) / (frob(&out) * frob(signal))
}

#[test]
fn doubly_orthogonal_signal_survives_clutter_removal() {
    let (clutter, signal, rho) = clutter_and_signal(true);
    assert!(rho.abs() < 1e-12);
    let cos = filtered_cosine(&clutter, &signal);
    assert!(cos >= 0.99, "cosine {cos}");
}

#[test]
fn signal_loses_its_projection_on_the_clutter_pattern() {
    // The leading left singular vector tracks the clutter pattern, so the
    // signal's spatial component along it is removed as well.
    let (clutter, signal, rho) = clutter_and_signal(false);
    let cos = filtered_cosine(&clutter, &signal);
    let predicted = (1.0 - rho * rho).sqrt();
    assert!(rho.abs() > 0.05);
    assert!((cos - predicted).abs() < 1e-3, "{cos} vs {predicted}");
}

#[test]
fn indivisible_frames_are_padded_and_cropped() {
    let s = random_seq(12, 7, 5, 10);
    let out = svd_filter_sequence(&s, &SvdFilterConfig::default()).unwrap();
    assert_eq!((out.pad_rows, out.pad_cols), (3, 3));
    assert_eq!(out.sequence.dims(), s.dims());
    assert!(out.sequence.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn k_zero_sequence_is_identity() {
    let s = random_seq(10, 15, 6, 11);
    let cfg = SvdFilterConfig {
        roi: 5,
        drop_count: 0,
    };
    let out = svd_filter_sequence(&s, &cfg).unwrap();
    for (a, b) in out.sequence.data().iter().zip(s.data()) {
        assert!((a - b).abs() <= 1e-5);
    }
}

#[test]
fn filtering_is_deterministic() {
    let s = random_seq(10, 10, 8, 12);
    let cfg = SvdFilterConfig::default();
    let a = svd_filter_sequence(&s, &cfg).unwrap();
    let b = svd_filter_sequence(&s, &cfg).unwrap();
    assert_eq!(a.sequence.to_bytes(), b.sequence.to_bytes());
}

#[test]
fn drop_count_out_of_range() {
    let s = random_seq(5, 5, 3, 13);
    let cfg = SvdFilterConfig {
        roi: 5,
        drop_count: 3,
    };
    assert!(svd_filter_sequence(&s, &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn filter_is_homogeneous_before_clamping(seed in 0u64..1000, a in 0.05f32..1.0) {
        let s = random_seq(10, 10, 6, seed);
        let scaled = Sequence::new(10, 10, 6, s.data().iter().map(|v| v * a).collect()).unwrap();
        let cfg = SvdFilterConfig::default();
        let (x, _, _) = svd_filter_unclamped(&s, &cfg).unwrap();
        let (y, _, _) = svd_filter_unclamped(&scaled, &cfg).unwrap();
        for (u, v) in x.iter().zip(&y) {
            prop_assert!((u * a as f64 - v).abs() <= 1e-6);
        }
    }

    #[test]
    fn removing_components_never_adds_energy(seed in 0u64..1000, k in 0usize..4) {
        let s = random_seq(5, 5, 8, seed);
        let b = build_casorati(&s, (0, 0), 5).unwrap();
        let out = filter_block(&b, k).unwrap();
        prop_assert!(frob(&out.matrix) <= frob(&b.matrix) * (1.0 + 1e-12));
    }
}

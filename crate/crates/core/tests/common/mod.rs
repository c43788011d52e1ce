//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use kroprofac::analysis::GroupData;
use kroprofac::{Dims, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `A ⊗ B` from the block definition.
pub fn kron_oracle(a: &Mat, b: &Mat) -> Mat {
    let (m, n) = a.shape();
    let (p, q) = b.shape();
    let mut out = Mat::zeros(m * p, n * q);
    for i in 0..m {
        for j in 0..n {
            for k in 0..p {
                for l in 0..q {
                    out[(i * p + k, j * q + l)] = a[(i, j)] * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Rearrangement from the block picture: the `(i, j)` block (`p1 x q1`) of a
/// `p1p2 x q1q2` matrix becomes row `i + j p2`, written column by column.
pub fn rearrange_oracle(m: &Mat, dims: &Dims) -> Mat {
    let mut out = Mat::zeros(dims.p2 * dims.q2, dims.p1 * dims.q1);
    for j in 0..dims.q2 {
        for i in 0..dims.p2 {
            let row = i + j * dims.p2;
            let mut col = 0;
            for c in 0..dims.q1 {
                for r in 0..dims.p1 {
                    out[(row, col)] = m[(i * dims.p1 + r, j * dims.q1 + c)];
                    col += 1;
                }
            }
        }
    }
    out
}

pub fn vec_col(m: &Mat) -> Mat {
    Mat::from_column_slice(m.len(), 1, m.as_slice())
}

/// BY-adjusted p-values by definition: the adjusted value of hypothesis `h`
/// is the smallest level at which the step-up procedure rejects it.
pub fn by_oracle(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut cm = 0.0;
    for j in 1..=m {
        cm += 1.0 / j as f64;
    }
    let mut sorted: Vec<f64> = p.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    // step k of the procedure at level a: p_(k) * c(m) * m / k <= a
    let crit: Vec<f64> = (0..m).map(|k| cm * m as f64 / (k + 1) as f64 * sorted[k]).collect();
    let mut levels: Vec<f64> = crit.iter().map(|c| c.min(1.0)).collect();
    levels.push(1.0);
    levels.sort_by(|a, b| a.total_cmp(b));
    levels.dedup();
    let rejected_at = |level: f64, h: usize| -> bool {
        let mut kmax = None;
        for k in 0..m {
            if crit[k] <= level {
                kmax = Some(k);
            }
        }
        match kmax {
            Some(k) => p[h] <= sorted[k],
            None => false,
        }
    };
    (0..m)
        .map(|h| levels.iter().copied().find(|&a| rejected_at(a, h)).unwrap_or(1.0))
        .collect()
}

/// Two groups whose means are the rank-one matrices `u w_gᵀ`, with a
/// non-constant time profile `u`. Channels in `planted` differ by
/// `effect_se` standard errors of the channel-score difference.
pub struct PlantedGroups {
    pub group1: GroupData,
    pub group2: GroupData,
    pub theta: Vec<f64>,
    pub se: f64,
}

pub fn planted_groups(
    seed: u64,
    n: (usize, usize),
    p1: usize,
    m: usize,
    planted: &[usize],
    effect_se: f64,
) -> PlantedGroups {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<f64> = (0..p1)
        .map(|t| 0.5 + (2.0 * std::f64::consts::PI * t as f64 / p1 as f64).sin())
        .collect();
    let u_mean = u.iter().sum::<f64>() / p1 as f64;
    let se = ((1.0 / n.0 as f64 + 1.0 / n.1 as f64) / p1 as f64).sqrt();
    let w1: Vec<f64> = (0..m).map(|c| 2.0 + (c as f64).cos()).collect();
    let mut w2 = w1.clone();
    let mut theta = vec![0.0; m];
    for &c in planted {
        theta[c] = effect_se * se;
        w2[c] -= theta[c] / u_mean;
    }
    let mut draw = |w: &[f64], count: usize| -> Vec<Mat> {
        (0..count)
            .map(|_| Mat::from_fn(p1, m, |t, c| u[t] * w[c] + rng.sample::<f64, _>(StandardNormal)))
            .collect()
    };
    let s1 = draw(&w1, n.0);
    let s2 = draw(&w2, n.1);
    PlantedGroups {
        group1: GroupData::new("g1", s1).unwrap(),
        group2: GroupData::new("g2", s2).unwrap(),
        theta,
        se,
    }
}

//! Seeded generators for coefficients, designs, noise and full datasets.
//!
//! Every random stream is a ChaCha8 generator. Row-indexed quantities
//! (design rows, noise rows) are produced in blocks of
//! [`CHUNK_ROWS`](crate::linalg::CHUNK_ROWS) rows, block `b` drawing from
//! stream `b` of the seeded generator. A dataset can therefore be generated
//! in memory or streamed chunk by chunk with identical values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{KroneckerCoefficients, KroneckerTerm};
use crate::linalg::CHUNK_ROWS;
use crate::tensor::{vec_inv, Dims, Mat};

pub const GENERATOR: &str = "rand_chacha 0.3 ChaCha8Rng (stream per 64-row block) + rand_distr 0.4 ziggurat";

/// Degrees of freedom of the heavy-tailed noise model.
pub const T_DF: f64 = 5.0;

/// Noise covariance family for `vec(E_i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    /// iid standard normal entries.
    Identity,
    /// `vec(E_i) = L z`, `L` lower triangular with bandwidth `bandwidth`.
    Banded { bandwidth: usize },
    /// Stationary AR(1) along `vec(E_i)`, covariance `rho^{|i-j|}`.
    Ar1 { rho: f64 },
    /// iid Student-t entries with five degrees of freedom (not rescaled).
    HeavyTailedT5,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModelSpec {
    #[serde(flatten)]
    pub kind: NoiseKind,
    /// Seed for structure held fixed across replicates (the banded `L`).
    #[serde(default)]
    pub structure_seed: u64,
}

impl NoiseModelSpec {
    pub fn identity() -> Self {
        NoiseModelSpec { kind: NoiseKind::Identity, structure_seed: 0 }
    }

    pub fn banded(bandwidth: usize, structure_seed: u64) -> Self {
        NoiseModelSpec { kind: NoiseKind::Banded { bandwidth }, structure_seed }
    }

    pub fn ar1(rho: f64) -> Self {
        NoiseModelSpec { kind: NoiseKind::Ar1 { rho }, structure_seed: 0 }
    }

    pub fn heavy_tailed() -> Self {
        NoiseModelSpec { kind: NoiseKind::HeavyTailedT5, structure_seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            NoiseKind::Ar1 { rho } if !(rho.abs() < 1.0) => {
                Err(Error::arg(format!("AR(1) coefficient must satisfy |rho| < 1, got {rho}")))
            }
            _ => Ok(()),
        }
    }
}

/// Seeds used to generate one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSeeds {
    pub coefficients: u64,
    pub design: u64,
    pub noise: u64,
}

const DESIGN_TAG: u64 = 0x6465_7369_676e;
const NOISE_TAG: u64 = 0x6e6f_6973_65;

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl DatasetSeeds {
    /// Coefficients from `seed_base`; design and noise from `seed_base ^ replicate`.
    pub fn for_replicate(seed_base: u64, replicate: u64) -> Self {
        let rep = seed_base ^ replicate;
        DatasetSeeds {
            coefficients: seed_base,
            design: mix_seed(rep, DESIGN_TAG),
            noise: mix_seed(rep, NOISE_TAG),
        }
    }

    pub fn from_base(seed_base: u64) -> Self {
        Self::for_replicate(seed_base, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seeds: DatasetSeeds,
    pub noise: Option<NoiseModelSpec>,
    pub generator: String,
}

/// Stacked design (`n x q1q2`, row `i` = `vec(X_i)^T`) and responses
/// (`n x p1p2`, row `i` = `vec(Y_i)^T`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub x: Mat,
    pub y: Mat,
    pub seed_record: Option<SeedRecord>,
}

impl Dataset {
    pub fn new(dims: Dims, x: Mat, y: Mat) -> Result<Self> {
        dims.validate()?;
        if x.ncols() != dims.q() || y.ncols() != dims.p() || x.nrows() != y.nrows() {
            return Err(Error::dim(format!(
                "dataset for {dims}: design {}x{} and responses {}x{} are inconsistent",
                x.nrows(),
                x.ncols(),
                y.nrows(),
                y.ncols()
            )));
        }
        Ok(Dataset { dims, x, y, seed_record: None })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// `X_i` as a `q1 x q2` matrix.
    pub fn x_i(&self, i: usize) -> Mat {
        let row: Vec<f64> = self.x.row(i).iter().copied().collect();
        vec_inv(&row, self.dims.q1, self.dims.q2).expect("shape checked on construction")
    }

    /// `Y_i` as a `p1 x p2` matrix.
    pub fn y_i(&self, i: usize) -> Mat {
        let row: Vec<f64> = self.y.row(i).iter().copied().collect();
        vec_inv(&row, self.dims.p1, self.dims.p2).expect("shape checked on construction")
    }
}

fn block_rng(seed: u64, block: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block as u64);
    rng
}

fn standard_normal_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draw `d` coefficient pairs with standard normal entries.
///
/// All `vec(beta1_k)` are drawn before the `vec(beta2_k)`. For `d > 1` each
/// family is Gram–Schmidt orthogonalized and every pair rescaled to a common
/// Frobenius norm (preserving the product of norms). Terms are ordered by
/// descending `‖beta1_k‖ ‖beta2_k‖`.
pub fn gen_coefficients(dims: Dims, d: usize, seed: u64) -> Result<KroneckerCoefficients> {
    dims.validate()?;
    let max = dims.max_kron_rank();
    if d == 0 || d > max {
        return Err(Error::arg(format!("d = {d} must lie in 1..={max} for {dims}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b1: Vec<Vec<f64>> = (0..d).map(|_| standard_normal_vec(dims.p1 * dims.q1, &mut rng)).collect();
    let mut b2: Vec<Vec<f64>> = (0..d).map(|_| standard_normal_vec(dims.p2 * dims.q2, &mut rng)).collect();

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if d > 1 {
        orthogonalize(&mut b1);
        orthogonalize(&mut b2);
        for k in 0..d {
            let (n1, n2) = (norm(&b1[k]), norm(&b2[k]));
            let target = (n1 * n2).sqrt();
            b1[k].iter_mut().for_each(|x| *x *= target / n1);
            b2[k].iter_mut().for_each(|x| *x *= target / n2);
        }
    }
    let mut terms: Vec<(f64, KroneckerTerm)> = b1
        .iter()
        .zip(&b2)
        .map(|(v1, v2)| {
            let sigma = norm(v1) * norm(v2);
            let term = KroneckerTerm {
                beta1: vec_inv(v1, dims.p1, dims.q1).expect("length matches"),
                beta2: vec_inv(v2, dims.p2, dims.q2).expect("length matches"),
            };
            (sigma, term)
        })
        .collect();
    terms.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    Ok(KroneckerCoefficients {
        dims,
        sigma: terms.iter().map(|t| t.0).collect(),
        terms: terms.into_iter().map(|t| t.1).collect(),
    })
}

/// Modified Gram–Schmidt keeping the norm of each residual.
fn orthogonalize(vs: &mut [Vec<f64>]) {
    for k in 0..vs.len() {
        for j in 0..k {
            let (head, tail) = vs.split_at_mut(k);
            let qj = &head[j];
            let vk = &mut tail[0];
            let denom: f64 = qj.iter().map(|x| x * x).sum();
            let proj: f64 = qj.iter().zip(vk.iter()).map(|(a, b)| a * b).sum::<f64>() / denom;
            vk.iter_mut().zip(qj).for_each(|(b, a)| *b -= proj * a);
        }
    }
}

/// iid standard normal design, `n x q1q2`.
pub fn gen_design(n: usize, dims: &Dims, seed: u64) -> Mat {
    let q = dims.q();
    let mut x = Mat::zeros(n, q);
    let mut start = 0;
    let mut block = 0;
    while start < n {
        let c = CHUNK_ROWS.min(n - start);
        let xc = design_block(seed, block, c, q);
        x.rows_mut(start, c).copy_from(&xc);
        start += c;
        block += 1;
    }
    x
}

fn design_block(seed: u64, block: usize, rows: usize, q: usize) -> Mat {
    let mut rng = block_rng(seed, block);
    let mut xc = Mat::zeros(rows, q);
    for i in 0..rows {
        for j in 0..q {
            xc[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    xc
}

/// Draws rows of `ℰ` for a given noise model.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    spec: NoiseModelSpec,
    len: usize,
    /// Banded model: row `i` holds `L[i][i-k]` at offset `k`, `k = 0..=b`.
    band: Vec<f64>,
}

impl NoiseSampler {
    pub fn new(spec: NoiseModelSpec, dims: &Dims) -> Result<Self> {
        spec.validate()?;
        let len = dims.p();
        let band = match spec.kind {
            NoiseKind::Banded { bandwidth } => {
                let width = bandwidth + 1;
                let mut rng = ChaCha8Rng::seed_from_u64(spec.structure_seed);
                let diag = Normal::new(3.0, 1.0).expect("valid normal");
                let mut band = vec![0.0; len * width];
                for i in 0..len {
                    band[i * width] = diag.sample(&mut rng);
                    for k in 1..=bandwidth.min(i) {
                        band[i * width + k] = StandardNormal.sample(&mut rng);
                    }
                }
                band
            }
            _ => Vec::new(),
        };
        Ok(NoiseSampler { spec, len, band })
    }

    pub fn spec(&self) -> &NoiseModelSpec {
        &self.spec
    }

    /// Entry `(i, j)` of the banded factor `L` (zero outside the band).
    pub fn band_entry(&self, i: usize, j: usize) -> f64 {
        match self.spec.kind {
            NoiseKind::Banded { bandwidth } if j <= i && i - j <= bandwidth => {
                self.band[i * (bandwidth + 1) + (i - j)]
            }
            _ => 0.0,
        }
    }

    /// Overwrite `out` (length `p1p2`) with one noise row.
    pub fn fill_row(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len);
        match self.spec.kind {
            NoiseKind::Identity => out.iter_mut().for_each(|e| *e = StandardNormal.sample(rng)),
            NoiseKind::HeavyTailedT5 => {
                let t = StudentT::new(T_DF).expect("valid degrees of freedom");
                out.iter_mut().for_each(|e| *e = t.sample(rng));
            }
            NoiseKind::Ar1 { rho } => {
                let innov = (1.0 - rho * rho).sqrt();
                let mut prev: f64 = StandardNormal.sample(rng);
                out[0] = prev;
                for e in out.iter_mut().skip(1) {
                    let z: f64 = StandardNormal.sample(rng);
                    prev = rho * prev + innov * z;
                    *e = prev;
                }
            }
            NoiseKind::Banded { bandwidth } => {
                let width = bandwidth + 1;
                let z = standard_normal_vec(self.len, rng);
                for (i, e) in out.iter_mut().enumerate() {
                    let row = &self.band[i * width..(i + 1) * width];
                    *e = (0..=bandwidth.min(i)).map(|k| row[k] * z[i - k]).sum();
                }
            }
        }
    }
}

/// Noise matrix `ℰ`, `n x p1p2`.
pub fn gen_noise(spec: NoiseModelSpec, n: usize, dims: &Dims, seed: u64) -> Result<Mat> {
    let sampler = NoiseSampler::new(spec, dims)?;
    let p = dims.p();
    let mut e = Mat::zeros(n, p);
    let mut row = vec![0.0; p];
    let mut start = 0;
    let mut block = 0;
    while start < n {
        let c = CHUNK_ROWS.min(n - start);
        let mut rng = block_rng(seed, block);
        for i in 0..c {
            sampler.fill_row(&mut rng, &mut row);
            for (j, &v) in row.iter().enumerate() {
                e[(start + i, j)] = v;
            }
        }
        start += c;
        block += 1;
    }
    Ok(e)
}

/// Chunked generator for `𝒴 = 𝒳 ν^T + ℰ`, yielding `(x_chunk, y_chunk^T)`.
///
/// `x_chunk` is `c x q1q2`; `y_chunk^T` is `p1p2 x c` so that each sample is
/// a contiguous column.
pub struct DatasetStream {
    dims: Dims,
    nu: Mat,
    n: usize,
    seeds: DatasetSeeds,
    sampler: Option<NoiseSampler>,
    start: usize,
    block: usize,
}

impl DatasetStream {
    pub fn new(
        coeffs: &KroneckerCoefficients,
        n: usize,
        noise: Option<NoiseModelSpec>,
        seeds: DatasetSeeds,
    ) -> Result<Self> {
        let sampler = noise.map(|s| NoiseSampler::new(s, &coeffs.dims)).transpose()?;
        Ok(DatasetStream {
            dims: coeffs.dims,
            nu: coeffs.nu(),
            n,
            seeds,
            sampler,
            start: 0,
            block: 0,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Next chunk, or `None` once `n` rows have been produced.
    pub fn next_chunk(&mut self) -> Option<(Mat, Mat)> {
        if self.start >= self.n {
            return None;
        }
        let c = CHUNK_ROWS.min(self.n - self.start);
        let xc = design_block(self.seeds.design, self.block, c, self.dims.q());
        let mut yt = &self.nu * xc.transpose();
        if let Some(sampler) = &self.sampler {
            let mut rng = block_rng(self.seeds.noise, self.block);
            let mut row = vec![0.0; self.dims.p()];
            for i in 0..c {
                sampler.fill_row(&mut rng, &mut row);
                for (y, e) in yt.column_mut(i).iter_mut().zip(&row) {
                    *y += e;
                }
            }
        }
        self.start += c;
        self.block += 1;
        Some((xc, yt))
    }
}

/// Generate coefficients and a dataset from them. `noise = None` gives
/// noiseless responses.
pub fn gen_dataset(
    dims: Dims,
    d: usize,
    n: usize,
    noise: Option<NoiseModelSpec>,
    seeds: DatasetSeeds,
) -> Result<(Dataset, KroneckerCoefficients)> {
    let coeffs = gen_coefficients(dims, d, seeds.coefficients)?;
    let data = gen_dataset_from(&coeffs, n, noise, seeds)?;
    Ok((data, coeffs))
}

/// Materialize a dataset for fixed coefficients.
pub fn gen_dataset_from(
    coeffs: &KroneckerCoefficients,
    n: usize,
    noise: Option<NoiseModelSpec>,
    seeds: DatasetSeeds,
) -> Result<Dataset> {
    let dims = coeffs.dims;
    let mut stream = DatasetStream::new(coeffs, n, noise, seeds)?;
    let mut x = Mat::zeros(n, dims.q());
    let mut y = Mat::zeros(n, dims.p());
    let mut start = 0;
    while let Some((xc, yt)) = stream.next_chunk() {
        let c = xc.nrows();
        x.rows_mut(start, c).copy_from(&xc);
        y.rows_mut(start, c).copy_from(&yt.transpose());
        start += c;
    }
    Ok(Dataset {
        dims,
        x,
        y,
        seed_record: Some(SeedRecord { seeds, noise, generator: GENERATOR.to_string() }),
    })
}

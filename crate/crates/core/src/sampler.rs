//! Seeded sampling of homodyne and dual-homodyne outcomes.
//!
//! Randomness comes from ChaCha20 keyed by a 64-bit seed with a 64-bit
//! stream selector, so a `(seed, stream_id)` pair reproduces the same
//! outcome sequence on every platform. Normal deviates use the Ziggurat
//! sampler of `rand_distr::StandardNormal`.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gaussian::{GaussianState, Party, Quadrature};

/// Identifies one reproducible random sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RandomStream { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Derives an independent sub-stream, e.g. one per batch.
    pub fn child(&self, index: u64) -> RandomStream {
        // splitmix64 finaliser keeps nearby (stream_id, index) pairs apart
        let mut z = self
            .stream_id
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_mul(index.wrapping_add(1))
            ^ index.rotate_left(32);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        RandomStream {
            seed: self.seed,
            stream_id: z ^ (z >> 31),
        }
    }
}

/// What is measured on a single mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Measurement {
    X,
    P,
    /// Dual homodyne: both quadratures, each with one extra vacuum unit of noise.
    XP,
    None,
}

/// Per-mode measurement choice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasurementAssignment(Vec<Measurement>);

impl MeasurementAssignment {
    pub fn new(per_mode: Vec<Measurement>) -> Result<Self> {
        if per_mode.iter().all(|m| *m == Measurement::None) {
            return Err(invalid("measurement assignment measures no mode"));
        }
        Ok(MeasurementAssignment(per_mode))
    }

    /// Homodyne of `quadrature` on every listed dealer party, nothing elsewhere.
    pub fn parties(parties: &[Party], quadrature: Quadrature) -> Result<Self> {
        let mut per_mode = vec![Measurement::None; 3];
        let m = match quadrature {
            Quadrature::X => Measurement::X,
            Quadrature::P => Measurement::P,
        };
        for p in parties {
            per_mode[p.mode()] = m;
        }
        MeasurementAssignment::new(per_mode)
    }

    pub fn modes(&self) -> &[Measurement] {
        &self.0
    }
}

/// Column identity in an outcome matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColumnLabel {
    pub mode: usize,
    pub quadrature: Quadrature,
}

impl ColumnLabel {
    pub fn party(party: Party, quadrature: Quadrature) -> Self {
        ColumnLabel {
            mode: party.mode(),
            quadrature,
        }
    }
}

impl fmt::Display for ColumnLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match Party::from_mode(self.mode) {
            Some(p) => write!(f, "{}_{}", self.quadrature, p),
            None => write!(f, "{}_{}", self.quadrature, self.mode),
        }
    }
}

/// Row-major `n_rows × columns` table of measurement outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeMatrix {
    columns: Vec<ColumnLabel>,
    n_rows: usize,
    data: Vec<f64>,
}

impl OutcomeMatrix {
    pub fn new(columns: Vec<ColumnLabel>, n_rows: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_rows * columns.len() {
            return Err(invalid(format!(
                "{} values do not fill {n_rows} rows of {} columns",
                data.len(),
                columns.len()
            )));
        }
        Ok(OutcomeMatrix {
            columns,
            n_rows,
            data,
        })
    }

    /// Builds a matrix from whole columns of equal length.
    pub fn from_columns(cols: Vec<(ColumnLabel, Vec<f64>)>) -> Result<Self> {
        let n_rows = cols.first().map_or(0, |c| c.1.len());
        if cols.iter().any(|c| c.1.len() != n_rows) {
            return Err(invalid("columns have different lengths"));
        }
        let mut data = Vec::with_capacity(n_rows * cols.len());
        for r in 0..n_rows {
            data.extend(cols.iter().map(|c| c.1[r]));
        }
        Ok(OutcomeMatrix {
            columns: cols.into_iter().map(|c| c.0).collect(),
            n_rows,
            data,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn columns(&self) -> &[ColumnLabel] {
        &self.columns
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.columns.len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn column(&self, label: ColumnLabel) -> Result<Vec<f64>> {
        let j = self
            .columns
            .iter()
            .position(|c| *c == label)
            .ok_or_else(|| Error::MissingColumn(label.to_string()))?;
        let w = self.columns.len();
        Ok((0..self.n_rows).map(|r| self.data[r * w + j]).collect())
    }

    /// CSV with a header naming each column `x_<party>` / `p_<party>`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = self.columns.iter().map(|c| c.to_string()).collect();
        writeln!(w, "{}", header.join(","))?;
        for r in 0..self.n_rows {
            let row: Vec<String> = self.row(r).iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Draws from `N(mean, cov)` through a Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(invalid("mean/covariance dimension mismatch"));
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| invalid("sampling covariance is not positive definite"))?
            .unpack();
        Ok(GaussianSampler { mean, chol })
    }

    /// Sampler over the listed quadrature indices of `state`.
    pub fn for_indices(state: &GaussianState, idx: &[usize]) -> Result<Self> {
        let mean = DVector::from_iterator(idx.len(), idx.iter().map(|&i| state.mean()[i]));
        let cov = DMatrix::from_fn(idx.len(), idx.len(), |r, c| state.cov()[(idx[r], idx[c])]);
        GaussianSampler::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Writes one draw into `out` (length `dim`).
    pub fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.dim();
        let mut z = [0.0f64; 16];
        let mut heap;
        let z: &mut [f64] = if d <= z.len() {
            &mut z[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for (i, o) in out.iter_mut().enumerate().take(d) {
            let mut acc = self.mean[i];
            for (k, zk) in z.iter().enumerate().take(i + 1) {
                acc += self.chol[(i, k)] * zk;
            }
            *o = acc;
        }
    }

    pub fn draw_many<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        let d = self.dim();
        let mut data = vec![0.0; n * d];
        for row in data.chunks_exact_mut(d) {
            self.draw_into(rng, row);
        }
        data
    }
}

/// Homodyne sampling: one column per measured quadrature, in mode order.
pub fn sample_homodyne(
    state: &GaussianState,
    assignment: &MeasurementAssignment,
    n_shots: usize,
    stream: RandomStream,
) -> Result<OutcomeMatrix> {
    if n_shots == 0 {
        return Err(invalid("n_shots must be positive"));
    }
    if assignment.modes().len() != state.n_modes() {
        return Err(invalid(format!(
            "assignment covers {} modes, state has {}",
            assignment.modes().len(),
            state.n_modes()
        )));
    }
    let mut columns = Vec::new();
    for (mode, m) in assignment.modes().iter().enumerate() {
        let quadrature = match m {
            Measurement::X => Quadrature::X,
            Measurement::P => Quadrature::P,
            Measurement::None => continue,
            Measurement::XP => {
                return Err(invalid("dual-homodyne requested; use sample_dual_homodyne"))
            }
        };
        columns.push(ColumnLabel { mode, quadrature });
    }
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| 2 * c.mode + c.quadrature.offset())
        .collect();
    let sampler = GaussianSampler::for_indices(state, &idx)?;
    let data = sampler.draw_many(&mut stream.rng(), n_shots);
    OutcomeMatrix::new(columns, n_shots, data)
}

/// Outcome distribution of a dual-homodyne (heterodyne) measurement on one
/// mode: mean `(⟨x⟩, ⟨p⟩)`, covariance `block + I₂`.
pub fn dual_homodyne_sampler(state: &GaussianState, mode: usize) -> Result<GaussianSampler> {
    let reduced = state.partial_trace(&[mode])?;
    let cov = reduced.cov() + DMatrix::<f64>::identity(2, 2);
    GaussianSampler::new(reduced.mean().clone(), cov)
}

pub fn sample_dual_homodyne(
    state: &GaussianState,
    mode: usize,
    n_shots: usize,
    stream: RandomStream,
) -> Result<OutcomeMatrix> {
    if n_shots == 0 {
        return Err(invalid("n_shots must be positive"));
    }
    let sampler = dual_homodyne_sampler(state, mode)?;
    let data = sampler.draw_many(&mut stream.rng(), n_shots);
    let columns = vec![
        ColumnLabel {
            mode,
            quadrature: Quadrature::X,
        },
        ColumnLabel {
            mode,
            quadrature: Quadrature::P,
        },
    ];
    OutcomeMatrix::new(columns, n_shots, data)
}

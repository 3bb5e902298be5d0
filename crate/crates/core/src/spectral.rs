//! Finite spectral truncation of the Hilbert-space setting.
//!
//! The unbounded generator `A` is kept in diagonalised form: the state is
//! expanded on the retained eigenbasis, so `S(t) = exp(tA)` acts exactly
//! componentwise and the simulation carries no semigroup discretisation
//! error. Hyperbolic (wave) problems are encoded through 2x2 rotation
//! blocks per mode, the one non-diagonal extension allowed here.
//!
//! Noise is an `m`-dimensional truncation of a cylindrical Brownian
//! motion. Increments are never stored: [`NoiseModel`] positions a
//! counter-based stream at any `(path, step)` pair, so ensembles are
//! bit-reproducible and can be regenerated slice by slice.

use crate::error::{Error, Result};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Generator of the truncated semigroup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SpectralOperator {
    /// Self-adjoint `A e_k = -lambda_k e_k`. `lambda = 0` for a pure SDE.
    Diagonal { eigenvalues: Vec<f64> },
    /// First-order wave form in energy coordinates `(omega_k y_k, v_k)`:
    /// each mode contributes the rotation generator `[[0, w], [-w, 0]]`,
    /// so the free flow is an isometry. The state dimension is
    /// `2 * omegas.len()`, ordered `(w_1 y_1, v_1, w_2 y_2, v_2, ...)`.
    WaveBlocks { omegas: Vec<f64> },
}

impl SpectralOperator {
    pub fn zero(dim: usize) -> Self {
        SpectralOperator::Diagonal {
            eigenvalues: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SpectralOperator::Diagonal { eigenvalues } => eigenvalues.len(),
            SpectralOperator::WaveBlocks { omegas } => 2 * omegas.len(),
        }
    }

    /// Apply `S(t) = exp(tA)` to `v` in place.
    pub fn semigroup_apply_in_place(&self, t: f64, v: &mut [f64]) -> Result<()> {
        if t < 0.0 {
            return Err(Error::invalid(format!(
                "semigroup is only defined for t >= 0, got t={t}"
            )));
        }
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
                context: "semigroup_apply state vector".into(),
            });
        }
        match self {
            SpectralOperator::Diagonal { eigenvalues } => {
                for (x, &lam) in v.iter_mut().zip(eigenvalues) {
                    *x *= (-lam * t).exp();
                }
            }
            SpectralOperator::WaveBlocks { omegas } => {
                for (k, &w) in omegas.iter().enumerate() {
                    let (s, c) = (w * t).sin_cos();
                    let a = v[2 * k];
                    let b = v[2 * k + 1];
                    v[2 * k] = c * a + s * b;
                    v[2 * k + 1] = -s * a + c * b;
                }
            }
        }
        Ok(())
    }

    /// `S(t) v` as a fresh vector.
    pub fn semigroup_apply(&self, t: f64, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = v.to_vec();
        self.semigroup_apply_in_place(t, &mut out)?;
        Ok(out)
    }

    /// Apply the adjoint `S(t)^*` in place. Diagonal blocks are symmetric;
    /// rotation blocks transpose to the opposite rotation.
    pub fn semigroup_adjoint_apply_in_place(&self, t: f64, v: &mut [f64]) -> Result<()> {
        match self {
            SpectralOperator::Diagonal { .. } => self.semigroup_apply_in_place(t, v),
            SpectralOperator::WaveBlocks { omegas } => {
                if t < 0.0 {
                    return Err(Error::invalid("semigroup adjoint needs t >= 0"));
                }
                for (k, &w) in omegas.iter().enumerate() {
                    let (s, c) = (w * t).sin_cos();
                    let a = v[2 * k];
                    let b = v[2 * k + 1];
                    v[2 * k] = c * a - s * b;
                    v[2 * k + 1] = s * a + c * b;
                }
                Ok(())
            }
        }
    }

    /// `A x` (the generator applied to a state), used by HJB residuals and
    /// the time-inclusion candidate where `<<A x, p>>` is formed.
    pub fn apply_generator(&self, x: &[f64], out: &mut [f64]) {
        match self {
            SpectralOperator::Diagonal { eigenvalues } => {
                for ((o, &xi), &lam) in out.iter_mut().zip(x).zip(eigenvalues) {
                    *o = -lam * xi;
                }
            }
            SpectralOperator::WaveBlocks { omegas } => {
                for (k, &w) in omegas.iter().enumerate() {
                    out[2 * k] = w * x[2 * k + 1];
                    out[2 * k + 1] = -w * x[2 * k];
                }
            }
        }
    }

    /// `A^* p`. On the truncation `<A x, p> = <x, A^* p>` holds exactly.
    pub fn apply_generator_adjoint(&self, p: &[f64], out: &mut [f64]) {
        match self {
            SpectralOperator::Diagonal { eigenvalues } => {
                for ((o, &pi), &lam) in out.iter_mut().zip(p).zip(eigenvalues) {
                    *o = -lam * pi;
                }
            }
            SpectralOperator::WaveBlocks { omegas } => {
                for (k, &w) in omegas.iter().enumerate() {
                    out[2 * k] = -w * p[2 * k + 1];
                    out[2 * k + 1] = w * p[2 * k];
                }
            }
        }
    }

    /// True when `S(t)` is a contraction (all eigenvalues non-negative).
    pub fn is_dissipative(&self) -> bool {
        match self {
            SpectralOperator::Diagonal { eigenvalues } => eigenvalues.iter().all(|&l| l >= 0.0),
            // Rotation blocks are isometries.
            SpectralOperator::WaveBlocks { .. } => true,
        }
    }
}

/// Uniform time grid on `[t0, T]` with `steps` intervals.
///
/// Nodes are computed as `t0 + i * dt` (no accumulation) and the final
/// node is pinned to `T` exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t_end.is_finite()) || t0 >= t_end {
            return Err(Error::invalid(format!(
                "time grid needs t0 < T, got t0={t0}, T={t_end}"
            )));
        }
        if steps == 0 {
            return Err(Error::invalid("time grid needs at least one step"));
        }
        Ok(TimeGrid { t0, t_end, steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i <= self.steps);
        if i == self.steps {
            self.t_end
        } else {
            self.t0 + i as f64 * self.dt()
        }
    }

    /// Index of a grid node, rejecting off-grid times.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let dt = self.dt();
        let raw = (t - self.t0) / dt;
        let i = raw.round() as isize;
        if i < 0 || i as usize > self.steps || (t - self.node(i.max(0) as usize)).abs() > 1e-9 * dt.max(1.0)
        {
            return Err(Error::OffGridTime {
                t,
                t0: self.t0,
                t_end: self.t_end,
                steps: self.steps,
            });
        }
        Ok(i as usize)
    }

    /// Sub-grid from node `i0` to node `i1` with the same spacing.
    pub fn window(&self, i0: usize, i1: usize) -> Result<TimeGrid> {
        if i0 > i1 || i1 > self.steps {
            return Err(Error::invalid(format!(
                "invalid window [{i0}, {i1}] on a grid with {} steps",
                self.steps
            )));
        }
        if i0 == i1 {
            return Err(Error::invalid("window must contain at least one step"));
        }
        TimeGrid::new(self.node(i0), self.node(i1), i1 - i0)
    }

    /// Refine by an integer factor (same endpoints, `factor * steps` steps).
    pub fn refine(&self, factor: usize) -> TimeGrid {
        TimeGrid {
            t0: self.t0,
            t_end: self.t_end,
            steps: self.steps * factor,
        }
    }
}

/// Stream identifiers separating independent uses of the same master seed.
///
/// Each purpose owns a disjoint ChaCha stream per path, so e.g. branch
/// resampling can never collide with the driving increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    /// Driving Brownian increments of the state ensemble.
    Increments,
    /// Independent data for transposition test processes.
    TestData,
    /// Sub-path branching used for conditional expectations.
    Branch(u32),
    /// Scenario-level sampling (assumption validation, probes).
    Sampling,
}

impl StreamKind {
    fn tag(self) -> u64 {
        match self {
            StreamKind::Increments => 0x01,
            StreamKind::TestData => 0x02,
            StreamKind::Branch(k) => 0x1_0000u64 + k as u64,
            StreamKind::Sampling => 0x03,
        }
    }
}

/// Truncated cylindrical noise: `noise_dim` independent Brownian
/// coordinates, sampled from counter-based per-path streams.
///
/// The draw for `(seed, kind, path, step, coordinate)` is a pure function
/// of its arguments. Gaussian variates use the Box-Muller map with a fixed
/// budget of two 64-bit words per variate, which keeps every `(path,
/// step)` block at a fixed offset of its stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub noise_dim: usize,
    pub seed: u64,
}

const WORDS_PER_NORMAL: u128 = 4; // two u64 draws = four 32-bit ChaCha words

impl NoiseModel {
    pub fn new(noise_dim: usize, seed: u64) -> Result<Self> {
        if noise_dim == 0 {
            return Err(Error::invalid("noise dimension must be positive"));
        }
        Ok(NoiseModel { noise_dim, seed })
    }

    fn key(&self, kind: StreamKind) -> [u8; 32] {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&kind.tag().to_le_bytes());
        key[16..24].copy_from_slice(&0x5ee1ab_u64.to_le_bytes());
        key
    }

    /// Stream for one path, positioned at its first step.
    pub fn path_stream(&self, kind: StreamKind, path: u64) -> PathStream {
        let mut rng = ChaCha12Rng::from_seed(self.key(kind));
        rng.set_stream(path);
        PathStream {
            rng,
            noise_dim: self.noise_dim,
        }
    }

    /// Fill `out` (length `noise_dim`) with the increments of one step,
    /// scaled to variance `dt`.
    pub fn increments_for(
        &self,
        kind: StreamKind,
        path: u64,
        step: usize,
        dt: f64,
        out: &mut [f64],
    ) {
        debug_assert_eq!(out.len(), self.noise_dim);
        let mut stream = self.path_stream(kind, path);
        stream.seek_to_step(step);
        stream.fill_increments(dt, out);
    }
}

/// Positioned per-path stream. Sequential use never seeks; random access
/// repositions the counter to `step * noise_dim` variates.
pub struct PathStream {
    rng: ChaCha12Rng,
    noise_dim: usize,
}

impl PathStream {
    pub fn seek_to_step(&mut self, step: usize) {
        let pos = step as u128 * self.noise_dim as u128 * WORDS_PER_NORMAL;
        self.rng.set_word_pos(pos);
    }

    /// One standard normal variate (fixed consumption: two u64 words).
    pub fn standard_normal(&mut self) -> f64 {
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        box_muller(a, b)
    }

    /// Increments for the current step, scaled to variance `dt`.
    pub fn fill_increments(&mut self, dt: f64, out: &mut [f64]) {
        let sqrt_dt = dt.sqrt();
        for o in out.iter_mut().take(self.noise_dim) {
            *o = sqrt_dt * self.standard_normal();
        }
    }

    /// Uniform variate in `[0, 1)` consuming the same word budget as one
    /// normal (so mixed use keeps block alignment).
    pub fn uniform(&mut self) -> f64 {
        let a = self.rng.next_u64();
        let _ = self.rng.next_u64();
        (a >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

fn box_muller(a: u64, b: u64) -> f64 {
    // u1 in (0, 1], u2 in [0, 1)
    let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Sample a full increment ensemble (`paths x steps x noise_dim`),
/// row-major. Mainly for tests and exports; the simulators stream instead.
pub fn sample_increments(
    noise: &NoiseModel,
    grid: &TimeGrid,
    paths: usize,
) -> Result<Vec<f64>> {
    if paths == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    let m = noise.noise_dim;
    let l = grid.steps();
    let dt = grid.dt();
    let mut out = vec![0.0; paths * l * m];
    for p in 0..paths {
        let mut stream = noise.path_stream(StreamKind::Increments, p as u64);
        for i in 0..l {
            let base = (p * l + i) * m;
            stream.fill_increments(dt, &mut out[base..base + m]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;

    #[test]
    fn semigroup_identity_at_zero() {
        let op = SpectralOperator::Diagonal {
            eigenvalues: vec![1.0, 4.0, 9.0],
        };
        let v = vec![1.0, -2.0, 0.5];
        assert_eq!(op.semigroup_apply(0.0, &v).unwrap(), v);
    }

    #[test]
    fn semigroup_halves_at_log_two() {
        let op = SpectralOperator::Diagonal {
            eigenvalues: vec![1.0],
        };
        let v = op.semigroup_apply(std::f64::consts::LN_2, &[1.0]).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-15);
    }

    /// Oracle: high-accuracy RK4 on y' = -lambda y, compared against the
    /// closed-form semigroup.
    #[test]
    fn semigroup_matches_scalar_ode_integration() {
        let lambdas = [1.0, 4.0];
        let t = 0.5;
        let op = SpectralOperator::Diagonal {
            eigenvalues: lambdas.to_vec(),
        };
        let got = op.semigroup_apply(t, &[1.0, 1.0]).unwrap();
        for (k, &lam) in lambdas.iter().enumerate() {
            // RK4 with 10_000 steps: local error ~ (lam*dt)^5
            let n = 10_000;
            let h = t / n as f64;
            let mut y = 1.0;
            for _ in 0..n {
                let f = |y: f64| -lam * y;
                let k1 = f(y);
                let k2 = f(y + 0.5 * h * k1);
                let k3 = f(y + 0.5 * h * k2);
                let k4 = f(y + h * k3);
                y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            assert!(
                (got[k] - y).abs() < 1e-12,
                "mode {k}: closed form {} vs RK4 {y}",
                got[k]
            );
        }
    }

    #[test]
    fn semigroup_rejects_negative_time() {
        let op = SpectralOperator::zero(1);
        assert!(op.semigroup_apply(-0.1, &[1.0]).is_err());
    }

    #[test]
    fn semigroup_composition_property() {
        let op = SpectralOperator::Diagonal {
            eigenvalues: vec![0.5, 2.0, 7.0],
        };
        let v = vec![1.0, -1.0, 2.0];
        let both = op.semigroup_apply(0.7 + 0.4, &v).unwrap();
        let stepped = op
            .semigroup_apply(0.7, &op.semigroup_apply(0.4, &v).unwrap())
            .unwrap();
        for (a, b) in both.iter().zip(&stepped) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn wave_blocks_are_isometric_and_compose() {
        let op = SpectralOperator::WaveBlocks {
            omegas: vec![1.0, 3.0],
        };
        let v = vec![1.0, 0.5, -2.0, 0.25];
        let w = op.semigroup_apply(0.9, &v).unwrap();
        assert!((stats::norm(&w) - stats::norm(&v)).abs() < 1e-12);
        let both = op.semigroup_apply(1.3, &v).unwrap();
        let stepped = op
            .semigroup_apply(0.4, &op.semigroup_apply(0.9, &v).unwrap())
            .unwrap();
        for (a, b) in both.iter().zip(&stepped) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_adjoint_identity() {
        let op = SpectralOperator::WaveBlocks {
            omegas: vec![2.0, 5.0],
        };
        let x = vec![1.0, -0.5, 0.25, 2.0];
        let p = vec![0.3, 1.5, -1.0, 0.7];
        let mut ax = vec![0.0; 4];
        let mut astar_p = vec![0.0; 4];
        op.apply_generator(&x, &mut ax);
        op.apply_generator_adjoint(&p, &mut astar_p);
        assert!((stats::dot(&ax, &p) - stats::dot(&x, &astar_p)).abs() < 1e-12);
    }

    #[test]
    fn grid_nodes_hit_endpoint_exactly() {
        let g = TimeGrid::new(0.0, 1.0, 3).unwrap();
        assert_eq!(g.node(3), 1.0);
        assert!(g.node(1) > g.node(0) && g.node(2) > g.node(1));
        assert_eq!(g.index_of(g.node(2)).unwrap(), 2);
        assert!(g.index_of(0.123).is_err());
    }

    #[test]
    fn increments_are_reproducible_and_order_independent() {
        let noise = NoiseModel::new(2, 42).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let a = sample_increments(&noise, &grid, 5).unwrap();
        let b = sample_increments(&noise, &grid, 5).unwrap();
        assert_eq!(a, b);

        // Random access must agree with sequential generation.
        let mut out = vec![0.0; 2];
        noise.increments_for(StreamKind::Increments, 3, 5, grid.dt(), &mut out);
        let base = (3 * 8 + 5) * 2;
        assert_eq!(&a[base..base + 2], &out[..]);
    }

    #[test]
    fn increment_moments_match_clt_bounds() {
        let m = 100_000;
        let dt = 0.01;
        let noise = NoiseModel::new(1, 7).unwrap();
        let grid = TimeGrid::new(0.0, dt, 1).unwrap();
        let draws = sample_increments(&noise, &grid, m).unwrap();
        let (mean, _) = stats::mean_and_stderr(&draws);
        // CLT bound on the mean: 4 * sqrt(dt / M)
        assert!(
            mean.abs() < 4.0 * (dt / m as f64).sqrt(),
            "sample mean {mean} out of CLT bound"
        );
        // Chi-square concentration: sd of the sample variance is
        // dt * sqrt(2 / (M-1)) ~ 0.45% of dt; 5% is a wide gate.
        let var = stats::variance(&draws);
        assert!(
            (var - dt).abs() < 0.05 * dt,
            "sample variance {var} deviates from dt={dt}"
        );
    }

    #[test]
    fn increments_pass_ks_normality() {
        let m = 100_000;
        let dt = 0.25;
        let noise = NoiseModel::new(1, 99).unwrap();
        let grid = TimeGrid::new(0.0, dt, 1).unwrap();
        let mut draws = sample_increments(&noise, &grid, m).unwrap();
        let sd = dt.sqrt();
        let normal = statrs::distribution::Normal::new(0.0, sd).unwrap();
        use statrs::distribution::ContinuousCDF;
        let d = stats::ks_statistic(&mut draws, |x| normal.cdf(x));
        let crit = stats::ks_critical(0.01, m);
        assert!(d < crit, "KS statistic {d} above 1% critical value {crit}");
    }

    #[test]
    fn cross_coordinate_independence() {
        // Correlation between the two coordinates of a 2d noise model.
        let m = 50_000;
        let noise = NoiseModel::new(2, 5).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 1).unwrap();
        let draws = sample_increments(&noise, &grid, m).unwrap();
        let xs: Vec<f64> = (0..m).map(|p| draws[2 * p]).collect();
        let ys: Vec<f64> = (0..m).map(|p| draws[2 * p + 1]).collect();
        let mut acc = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            acc += x * y;
        }
        let corr = acc / m as f64;
        assert!(corr.abs() < 4.0 / (m as f64).sqrt());
    }
}

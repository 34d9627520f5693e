//! Vector quantization: nearest-code lookup with straight-through gradients,
//! commitment loss, EMA codebook learning, and residual (multi-stage)
//! quantization.
//!
//! Codebooks are never trained by gradient descent: `quantize` and the
//! straight-through path leave them untouched, and `ema_update` never reads
//! gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One codebook of `K` codes of width `D`, with EMA accumulators.
#[derive(Debug, Clone)]
pub struct Codebook {
    /// [K, D]; row i always equals `ema_sums[i]` over the smoothed count.
    pub codes: Tensor,
    /// Per-code EMA cluster size.
    pub ema_counts: Vec<f64>,
    /// [K, D] per-code EMA sum of assigned vectors.
    pub ema_sums: Tensor,
    pub decay: f64,
    pub smoothing: f64,
    /// Consecutive updates each code went unassigned (dead-code tracking).
    staleness: Vec<u32>,
}

/// Updates a code goes unassigned before it is reseeded to a recent input.
const DEAD_CODE_UPDATES: u32 = 100;

impl Codebook {
    pub fn new(k: usize, d: usize, decay: f64, smoothing: f64, rng: &mut Rng) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::Invalid(format!("codebook: K={k}, D={d} must be positive")));
        }
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Invalid(format!("codebook: decay {decay} outside [0, 1]")));
        }
        let codes = Tensor::randn(&[k, d], 0.1, rng);
        Ok(Codebook {
            ema_sums: codes.clone(),
            codes,
            ema_counts: vec![0.0; k],
            decay,
            smoothing,
            staleness: vec![0; k],
        })
    }

    pub fn k(&self) -> usize {
        self.codes.shape[0]
    }

    pub fn d(&self) -> usize {
        self.codes.shape[1]
    }

    /// Index of the nearest code by squared L2 distance; ties break to the
    /// lowest index (strict less-than scan).
    pub fn nearest(&self, row: &[f64]) -> usize {
        let d = self.d();
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (i, code) in self.codes.data.chunks_exact(d).enumerate() {
            let dist: f64 = row.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best_dist {
                best_dist = dist;
                best = i;
            }
        }
        best
    }

    /// Quantize rows of `z` [n, D]: nearest codes, their values, and the
    /// commitment loss `mean_i ||z_i - code(z_i)||^2`. Rows are independent;
    /// large batches fan out over the rayon pool with per-row results kept
    /// in row order.
    pub fn quantize(&self, z: &Tensor) -> Result<(Tensor, Vec<usize>, f64)> {
        let (n, d) = self.check_rows(z)?;
        let mut indices = vec![0usize; n];
        let mut z_q = vec![0.0; n * d];
        let work = |((out_row, idx), row): ((&mut [f64], &mut usize), &[f64])| {
            let best = self.nearest(row);
            *idx = best;
            out_row.copy_from_slice(&self.codes.data[best * d..(best + 1) * d]);
        };
        if n * self.k() * d >= 200_000 {
            use rayon::prelude::*;
            z_q.par_chunks_mut(d)
                .zip(indices.par_iter_mut())
                .zip(z.data.par_chunks(d))
                .for_each(work);
        } else {
            z_q.chunks_mut(d)
                .zip(indices.iter_mut())
                .zip(z.data.chunks(d))
                .for_each(work);
        }
        let mut commit = 0.0;
        for (row, code) in z.data.chunks(d).zip(z_q.chunks(d)) {
            commit += row.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok((Tensor::from_vec(vec![n, d], z_q)?, indices, commit / n as f64))
    }

    /// EMA update from a batch of assigned vectors. Counts and sums decay by
    /// gamma; codes are refreshed with Laplace-smoothed counts. If `reseed`
    /// is given, codes unassigned for 100 consecutive updates are reset to a
    /// random row of `z`.
    pub fn ema_update(&mut self, z: &Tensor, indices: &[usize], reseed: Option<&mut Rng>) -> Result<()> {
        let (n, d) = self.check_rows(z)?;
        if indices.len() != n {
            return Err(Error::Invalid(format!(
                "ema_update: {} indices for {n} rows",
                indices.len()
            )));
        }
        let k = self.k();
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::Invalid(format!("ema_update: index {bad} out of range for K={k}")));
        }
        let mut counts = vec![0.0; k];
        let mut sums = vec![0.0; k * d];
        for (r, &idx) in indices.iter().enumerate() {
            counts[idx] += 1.0;
            let row = &z.data[r * d..(r + 1) * d];
            for (s, v) in sums[idx * d..(idx + 1) * d].iter_mut().zip(row) {
                *s += v;
            }
        }
        let g = self.decay;
        for i in 0..k {
            self.ema_counts[i] = g * self.ema_counts[i] + (1.0 - g) * counts[i];
            for j in 0..d {
                self.ema_sums.data[i * d + j] =
                    g * self.ema_sums.data[i * d + j] + (1.0 - g) * sums[i * d + j];
            }
            self.staleness[i] = if counts[i] > 0.0 { 0 } else { self.staleness[i] + 1 };
        }
        let total: f64 = self.ema_counts.iter().sum();
        if total > 0.0 {
            // Laplace-smoothed cluster sizes keep empty codes from dividing by zero.
            let denom = total + k as f64 * self.smoothing;
            for i in 0..k {
                let smoothed = (self.ema_counts[i] + self.smoothing) / denom * total;
                for j in 0..d {
                    self.codes.data[i * d + j] = self.ema_sums.data[i * d + j] / smoothed;
                }
            }
        }
        if let Some(rng) = reseed {
            for i in 0..k {
                if self.staleness[i] >= DEAD_CODE_UPDATES {
                    let r = rng.range(n);
                    let row = z.data[r * d..(r + 1) * d].to_vec();
                    self.codes.data[i * d..(i + 1) * d].copy_from_slice(&row);
                    self.ema_counts[i] = 1.0;
                    self.ema_sums.data[i * d..(i + 1) * d].copy_from_slice(&row);
                    self.staleness[i] = 0;
                }
            }
        }
        self.codes.check_finite("ema_update codes")?;
        Ok(())
    }

    /// Replace codes with rows sampled uniformly from `z` (warm start from
    /// the first training batch).
    pub fn seed_from_batch(&mut self, z: &Tensor, rng: &mut Rng) -> Result<()> {
        let (n, d) = self.check_rows(z)?;
        for i in 0..self.k() {
            let r = rng.range(n);
            let row = &z.data[r * d..(r + 1) * d];
            self.codes.data[i * d..(i + 1) * d].copy_from_slice(row);
            self.ema_sums.data[i * d..(i + 1) * d].copy_from_slice(row);
            self.ema_counts[i] = 1.0;
            self.staleness[i] = 0;
        }
        Ok(())
    }

    fn check_rows(&self, z: &Tensor) -> Result<(usize, usize)> {
        let d = self.d();
        match z.shape.as_slice() {
            [n, zd] if *zd == d && *n >= 1 => Ok((*n, d)),
            _ => Err(Error::shape("vq rows", &z.shape, &self.codes.shape)),
        }
    }
}

/// Per-stage quantization decisions for one batch: enough to assemble the
/// tape-side losses, run EMA updates afterwards, and replay the exact same
/// quantization under perturbed inputs (finite-difference checks).
#[derive(Debug, Clone)]
pub struct QuantPlan {
    pub stages: Vec<StagePlan>,
    /// [n, D] summed quantization over all stages.
    pub total: Tensor,
}

#[derive(Debug, Clone)]
pub struct StagePlan {
    /// [n, D] residual that entered this stage (EMA update target).
    pub residual_in: Tensor,
    pub indices: Vec<usize>,
    /// [n, D] per-row `prefix + code`: the commitment target for this stage,
    /// constant on the tape.
    pub target: Tensor,
}

/// Residual vector quantizer: each stage quantizes what the previous stages
/// left unexplained.
#[derive(Debug, Clone)]
pub struct ResidualVq {
    pub stages: Vec<Codebook>,
    pub commitment_weight: f64,
    pub warm_started: bool,
    pub dead_code_reseed: bool,
}

impl ResidualVq {
    pub fn new(
        n_stages: usize,
        k: usize,
        d: usize,
        decay: f64,
        smoothing: f64,
        commitment_weight: f64,
        dead_code_reseed: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_stages == 0 {
            return Err(Error::Invalid("residual vq: at least one stage required".into()));
        }
        let stages = (0..n_stages)
            .map(|_| Codebook::new(k, d, decay, smoothing, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(ResidualVq {
            stages,
            commitment_weight,
            warm_started: false,
            dead_code_reseed,
        })
    }

    pub fn d(&self) -> usize {
        self.stages[0].d()
    }

    /// Compute quantization decisions for `z` [n, D] against the current
    /// codebooks. Pure with respect to the codebooks.
    pub fn plan(&self, z: &Tensor) -> Result<QuantPlan> {
        let n = match z.shape.as_slice() {
            [n, d] if *d == self.d() => *n,
            _ => return Err(Error::shape("residual vq", &z.shape, &self.stages[0].codes.shape)),
        };
        let d = self.d();
        let mut residual = z.clone();
        let mut total = vec![0.0; n * d];
        let mut stages = Vec::with_capacity(self.stages.len());
        for cb in &self.stages {
            let (z_q, indices, _) = cb.quantize(&residual)?;
            // target = z - residual + code = prefix + code
            let mut target = vec![0.0; n * d];
            for i in 0..n * d {
                target[i] = z.data[i] - residual.data[i] + z_q.data[i];
                total[i] += z_q.data[i];
            }
            let next_residual: Vec<f64> = residual.data.iter().zip(&z_q.data).map(|(r, q)| r - q).collect();
            stages.push(StagePlan {
                residual_in: residual,
                indices,
                target: Tensor::from_vec(vec![n, d], target)?,
            });
            residual = Tensor::from_vec(vec![n, d], next_residual)?;
        }
        Ok(QuantPlan {
            stages,
            total: Tensor::from_vec(vec![n, d], total)?,
        })
    }

    /// Assemble the tape-side quantization from a plan: straight-through
    /// output whose forward value is the summed codes, plus the total
    /// commitment loss `sum_s mean_i ||r_s_i - sg[code_s_i]||^2` (gradients
    /// reach `z_e` only).
    pub fn apply(&self, tape: &mut Tape, z_e: Var, plan: &QuantPlan) -> Result<(Var, Var)> {
        let mut commit: Option<Var> = None;
        for stage in &plan.stages {
            let target = tape.constant(stage.target.clone());
            let diff = tape.sub(z_e, target)?;
            let sq = tape.mul(diff, diff)?;
            let per_row = tape.sum_axis(sq, 1)?;
            let stage_commit = tape.mean_all(per_row)?;
            commit = Some(match commit {
                None => stage_commit,
                Some(c) => tape.add(c, stage_commit)?,
            });
        }
        let z_q = tape.straight_through_rebased(z_e, &plan.total, &plan.stages[0].residual_in)?;
        Ok((z_q, commit.expect("at least one stage")))
    }

    /// Value-level residual quantization (no tape): total codes, per-stage
    /// indices, and the total commitment loss.
    pub fn quantize_values(&self, z: &Tensor) -> Result<(Tensor, Vec<Vec<usize>>, f64)> {
        let plan = self.plan(z)?;
        let n = z.shape[0] as f64;
        let mut commit = 0.0;
        for stage in &plan.stages {
            for (zi, ti) in z.data.iter().zip(&stage.target.data) {
                commit += (zi - ti) * (zi - ti);
            }
        }
        let indices = plan.stages.iter().map(|s| s.indices.clone()).collect();
        Ok((plan.total, indices, commit / n))
    }

    /// EMA-update every stage codebook from a plan computed on this batch.
    pub fn ema_update_from_plan(&mut self, plan: &QuantPlan, rng: &mut Rng) -> Result<()> {
        for (cb, stage) in self.stages.iter_mut().zip(&plan.stages) {
            let reseed = self.dead_code_reseed.then_some(&mut *rng);
            cb.ema_update(&stage.residual_in, &stage.indices, reseed)?;
        }
        Ok(())
    }

    /// Warm-start stage codebooks from the first training batch: stage s is
    /// seeded with rows sampled from the residuals that reach it.
    pub fn warm_start(&mut self, z: &Tensor, rng: &mut Rng) -> Result<()> {
        let mut residual = z.clone();
        for cb in self.stages.iter_mut() {
            cb.seed_from_batch(&residual, rng)?;
            let (z_q, _, _) = cb.quantize(&residual)?;
            let next: Vec<f64> = residual.data.iter().zip(&z_q.data).map(|(r, q)| r - q).collect();
            residual = Tensor::from_vec(residual.shape.clone(), next)?;
        }
        self.warm_started = true;
        Ok(())
    }

    /// Reconstruction error `||z - z_q||_F` using only the first `stages`.
    pub fn reconstruction_error(&self, z: &Tensor, stages: usize) -> Result<f64> {
        let plan = self.plan(z)?;
        let d = self.d();
        let n = z.shape[0];
        let mut acc = vec![0.0; n * d];
        for stage in plan.stages.iter().take(stages) {
            // recover this stage's codes from target - (z - residual_in)
            for i in 0..n * d {
                let code = stage.target.data[i] - (z.data[i] - stage.residual_in.data[i]);
                acc[i] += code;
            }
        }
        Ok(z
            .data
            .iter()
            .zip(&acc)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn book(codes: &[f64], k: usize, d: usize) -> Codebook {
        let mut rng = SeedTree::new(0).rng();
        let mut cb = Codebook::new(k, d, 0.99, 1e-5, &mut rng).unwrap();
        cb.codes = t(&[k, d], codes);
        cb.ema_sums = cb.codes.clone();
        cb
    }

    #[test]
    fn nearest_and_commit_worked_example() {
        let cb = book(&[0.0, 0.0, 2.0, 2.0], 2, 2);
        let (z_q, idx, commit) = cb.quantize(&t(&[1, 2], &[0.4, 0.6])).unwrap();
        assert_eq!(idx, vec![0]);
        assert_eq!(z_q.data, vec![0.0, 0.0]);
        assert!((commit - 0.52).abs() < 1e-12);
    }

    #[test]
    fn exact_code_has_zero_commit() {
        let cb = book(&[0.0, 0.0, 2.0, 2.0], 2, 2);
        let (_, idx, commit) = cb.quantize(&t(&[1, 2], &[2.0, 2.0])).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(commit, 0.0);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let cb = book(&[1.0, 0.0, -1.0, 0.0], 2, 2);
        let (_, idx, _) = cb.quantize(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn quantize_matches_exhaustive_scan() {
        let mut rng = SeedTree::new(50).rng();
        for _ in 0..50 {
            let k = 1 + rng.range(64);
            let d = 1 + rng.range(8);
            let n = 1 + rng.range(32);
            let codes = Tensor::randn(&[k, d], 1.0, &mut rng);
            let cb = book(&codes.data, k, d);
            let z = Tensor::randn(&[n, d], 1.0, &mut rng);
            let (_, idx, _) = cb.quantize(&z).unwrap();
            for r in 0..n {
                let row = &z.data[r * d..(r + 1) * d];
                let mut best = 0;
                let mut best_dist = f64::INFINITY;
                for c in 0..k {
                    let code = &codes.data[c * d..(c + 1) * d];
                    let dist: f64 = row.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist < best_dist {
                        best_dist = dist;
                        best = c;
                    }
                }
                assert_eq!(idx[r], best);
            }
        }
    }

    #[test]
    fn quantize_rejects_dimension_mismatch_and_empty() {
        let cb = book(&[0.0, 0.0], 1, 2);
        assert!(cb.quantize(&t(&[1, 3], &[0.0, 0.0, 0.0])).is_err());
        assert!(cb.quantize(&Tensor::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn ema_unassigned_code_drifts_only_by_smoothing() {
        let mut cb = book(&[0.0, 0.0, 5.0, 5.0], 2, 2);
        cb.ema_counts = vec![3.0, 3.0];
        cb.ema_sums = t(&[2, 2], &[0.0, 0.0, 15.0, 15.0]);
        let before = cb.codes.data[2];
        // only code 0 receives vectors
        cb.ema_update(&t(&[2, 2], &[0.1, 0.1, -0.1, -0.1]), &[0, 0], None).unwrap();
        let after = cb.codes.data[2];
        assert!((before - after).abs() < 1e-3, "{before} vs {after}");
    }

    #[test]
    fn ema_converges_to_constant_cluster() {
        let mut rng = SeedTree::new(51).rng();
        let mut cb = Codebook::new(4, 2, 0.99, 1e-5, &mut rng).unwrap();
        let p = [0.7, -1.3];
        let z = t(&[8, 2], &p.repeat(8));
        let idx: Vec<usize> = (0..8).map(|_| cb.nearest(&p)).collect();
        let target_code = idx[0];
        for _ in 0..500 {
            cb.ema_update(&z, &idx, None).unwrap();
        }
        let code = &cb.codes.data[target_code * 2..(target_code + 1) * 2];
        let dist = ((code[0] - p[0]).powi(2) + (code[1] - p[1]).powi(2)).sqrt();
        assert!(dist < 1e-3, "distance {dist}");
    }

    #[test]
    fn zero_decay_jumps_to_batch_mean() {
        let mut rng = SeedTree::new(52).rng();
        let mut cb = Codebook::new(1, 2, 0.0, 1e-9, &mut rng).unwrap();
        let z = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        cb.ema_update(&z, &[0, 0], None).unwrap();
        assert!((cb.codes.data[0] - 2.0).abs() < 1e-6);
        assert!((cb.codes.data[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn ema_rejects_out_of_range_index() {
        let mut cb = book(&[0.0, 0.0], 1, 2);
        assert!(cb.ema_update(&t(&[1, 2], &[0.0, 0.0]), &[3], None).is_err());
    }

    #[test]
    fn dead_codes_reseed_after_100_stale_updates() {
        let mut rng = SeedTree::new(53).rng();
        let mut cb = Codebook::new(2, 2, 0.5, 1e-5, &mut rng).unwrap();
        cb.codes = t(&[2, 2], &[0.0, 0.0, 100.0, 100.0]);
        let z = t(&[1, 2], &[0.5, 0.5]);
        let mut reseed_rng = SeedTree::new(54).rng();
        for _ in 0..100 {
            let idx = vec![cb.nearest(&[0.5, 0.5])];
            cb.ema_update(&z, &idx, Some(&mut reseed_rng)).unwrap();
        }
        // the far-away code was never assigned and must have been reseeded
        assert!((cb.codes.data[2] - 0.5).abs() < 1e-12);
        assert!((cb.codes.data[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn residual_two_stage_worked_example() {
        let mut rng = SeedTree::new(55).rng();
        let mut rvq = ResidualVq::new(2, 2, 2, 0.99, 1e-5, 0.25, false, &mut rng).unwrap();
        rvq.stages[0].codes = t(&[2, 2], &[0.0, 0.0, 2.0, 2.0]);
        rvq.stages[1].codes = t(&[2, 2], &[0.0, 0.0, 0.5, 0.5]);
        let (total, idx, _) = rvq.quantize_values(&t(&[1, 2], &[2.4, 2.6])).unwrap();
        assert_eq!(idx[0], vec![1]); // picks (2, 2)
        assert_eq!(idx[1], vec![1]); // then (0.5, 0.5)
        assert_eq!(total.data, vec![2.5, 2.5]);
    }

    #[test]
    fn single_stage_equals_plain_quantize() {
        let mut rng = SeedTree::new(56).rng();
        let mut rvq = ResidualVq::new(1, 4, 3, 0.99, 1e-5, 0.25, false, &mut rng).unwrap();
        let codes = Tensor::randn(&[4, 3], 1.0, &mut rng);
        rvq.stages[0].codes = codes.clone();
        let cb = book(&codes.data, 4, 3);
        let z = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let (total, idx, commit) = rvq.quantize_values(&z).unwrap();
        let (z_q, idx_plain, commit_plain) = cb.quantize(&z).unwrap();
        assert_eq!(total.data, z_q.data);
        assert_eq!(idx[0], idx_plain);
        assert!((commit - commit_plain).abs() < 1e-12);
    }

    #[test]
    fn straight_through_grad_is_all_ones_for_sum_loss() {
        let mut rng = SeedTree::new(57).rng();
        let rvq = ResidualVq::new(2, 8, 4, 0.99, 1e-5, 0.25, false, &mut rng).unwrap();
        let z = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let plan = rvq.plan(&z).unwrap();
        let mut tape = Tape::new();
        let z_e = tape.param(z);
        let (z_q, _) = rvq.apply(&mut tape, z_e, &plan).unwrap();
        assert_eq!(tape.data(z_q), plan.total.data.as_slice());
        let loss = tape.sum_all(z_q).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(z_e).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn straight_through_matches_identity_twin_on_grad_path() {
        // downstream network f(y) = sum((y W)^2); gradient wrt z_e through the
        // quantizer must equal the gradient of the same network with the
        // quantization replaced by the identity, evaluated at y = z_q.
        let mut rng = SeedTree::new(58).rng();
        let rvq = ResidualVq::new(2, 4, 3, 0.99, 1e-5, 0.25, false, &mut rng).unwrap();
        let z = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let plan = rvq.plan(&z).unwrap();

        let mut tape = Tape::new();
        let z_e = tape.param(z.clone());
        let (z_q, _) = rvq.apply(&mut tape, z_e, &plan).unwrap();
        let wv = tape.constant(w.clone());
        let h = tape.matmul(z_q, wv).unwrap();
        let sq = tape.mul(h, h).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        let grad_st = tape.grad(z_e).unwrap().to_vec();

        let mut twin = Tape::new();
        let y = twin.param(plan.total.clone());
        let wv2 = twin.constant(w);
        let h2 = twin.matmul(y, wv2).unwrap();
        let sq2 = twin.mul(h2, h2).unwrap();
        let loss2 = twin.sum_all(sq2).unwrap();
        twin.backward(loss2).unwrap();
        let grad_twin = twin.grad(y).unwrap();

        for (a, b) in grad_st.iter().zip(grad_twin) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn commit_loss_value_matches_tape() {
        let mut rng = SeedTree::new(59).rng();
        let rvq = ResidualVq::new(2, 4, 3, 0.99, 1e-5, 0.25, false, &mut rng).unwrap();
        let z = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let plan = rvq.plan(&z).unwrap();
        let (_, _, commit_value) = rvq.quantize_values(&z).unwrap();
        let mut tape = Tape::new();
        let z_e = tape.param(z);
        let (_, commit) = rvq.apply(&mut tape, z_e, &plan).unwrap();
        assert!((tape.data(commit)[0] - commit_value).abs() < 1e-12);
        assert!(commit_value >= 0.0);
    }

    #[test]
    fn reconstruction_error_non_increasing_with_trained_stages() {
        let mut rng = SeedTree::new(60).rng();
        for trial in 0..20 {
            let d = 2 + rng.range(4);
            let n = 8 + rng.range(16);
            let z = Tensor::randn(&[n, d], 1.0, &mut rng);
            let mut rvq = ResidualVq::new(3, 8, d, 0.9, 1e-5, 0.25, false, &mut rng).unwrap();
            rvq.warm_start(&z, &mut rng).unwrap();
            for _ in 0..30 {
                let plan = rvq.plan(&z).unwrap();
                rvq.ema_update_from_plan(&plan, &mut rng).unwrap();
            }
            let mut prev = f64::INFINITY;
            for stages in 1..=3 {
                let err = rvq.reconstruction_error(&z, stages).unwrap();
                assert!(
                    err <= prev + 1e-9,
                    "trial {trial}: error grew from {prev} to {err} at stage {stages}"
                );
                prev = err;
            }
        }
    }

    #[test]
    fn quantize_never_mutates_codebook() {
        let mut rng = SeedTree::new(61).rng();
        let rvq = ResidualVq::new(2, 8, 4, 0.99, 1e-5, 0.25, false, &mut rng).unwrap();
        let snapshot: Vec<Vec<f64>> = rvq.stages.iter().map(|s| s.codes.data.clone()).collect();
        let z = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let _ = rvq.quantize_values(&z).unwrap();
        let _ = rvq.plan(&z).unwrap();
        for (s, snap) in rvq.stages.iter().zip(&snapshot) {
            assert_eq!(&s.codes.data, snap);
        }
    }

    #[test]
    fn determinism_identical_inputs_identical_indices() {
        let mut rng = SeedTree::new(62).rng();
        let rvq = ResidualVq::new(2, 16, 4, 0.99, 1e-5, 0.25, false, &mut rng).unwrap();
        let z = Tensor::randn(&[10, 4], 1.0, &mut rng);
        let (_, i1, _) = rvq.quantize_values(&z).unwrap();
        let (_, i2, _) = rvq.quantize_values(&z).unwrap();
        assert_eq!(i1, i2);
    }
}

//! SE(3) pose graph with odometry, loop and prior factors, optimized by
//! sparse Levenberg-Marquardt on the manifold.
//!
//! A factor between `i` and `j` with measurement `Z` has residual
//! `log(Z⁻¹ · Xᵢ⁻¹ · Xⱼ)`; the prior on variable 0 has residual
//! `log(Z⁻¹ · X₀)`. Updates are applied on the right, `X ← X · exp(δ)`.

use std::collections::HashMap;

use nalgebra::{DVector, Matrix6, Vector6};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use thiserror::Error;

use crate::config::PoseGraphConfig;
use crate::geometry::{se3_right_jacobian_inverse, Pose, Twist};

#[derive(Debug, Error, PartialEq)]
pub enum PoseGraphError {
    #[error("factor references variable {index} but the graph has {count}")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("factor endpoints must satisfy i < j, got ({i}, {j})")]
    InvalidOrder { i: usize, j: usize },
    #[error("pose graph is not connected ({components} components)")]
    Disconnected { components: usize },
    #[error("normal equations are singular")]
    Singular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    Prior,
    Odometry,
    Loop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    pub i: usize,
    pub j: usize,
    pub measurement: Pose,
    pub information: Matrix6<f64>,
}

/// Diagonal information for the `[ω; ρ]` twist ordering.
pub fn information(sigma_translation: f64, sigma_rotation: f64) -> Matrix6<f64> {
    let r = 1.0 / (sigma_rotation * sigma_rotation);
    let t = 1.0 / (sigma_translation * sigma_translation);
    Matrix6::from_diagonal(&Vector6::new(r, r, r, t, t, t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub costs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PoseGraph {
    poses: Vec<Pose>,
    factors: Vec<Factor>,
}

impl PoseGraph {
    /// One variable at `anchor` held by a prior with isotropic `prior_sigma`.
    pub fn new(anchor: Pose, prior_sigma: f64) -> Self {
        PoseGraph {
            poses: vec![anchor],
            factors: vec![Factor {
                kind: FactorKind::Prior,
                i: 0,
                j: 0,
                measurement: anchor,
                information: information(prior_sigma, prior_sigma),
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn pose(&self, i: usize) -> Option<&Pose> {
        self.poses.get(i)
    }

    pub fn set_pose(&mut self, i: usize, pose: Pose) {
        self.poses[i] = pose;
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn count(&self, kind: FactorKind) -> usize {
        self.factors.iter().filter(|f| f.kind == kind).count()
    }

    pub fn add_variable(&mut self, initial: Pose) -> usize {
        self.poses.push(initial);
        self.poses.len() - 1
    }

    pub fn add_odometry_factor(
        &mut self,
        i: usize,
        j: usize,
        measurement: Pose,
        information: Matrix6<f64>,
    ) -> Result<bool, PoseGraphError> {
        self.add_factor(FactorKind::Odometry, i, j, measurement, information)
    }

    pub fn add_loop_factor(
        &mut self,
        i: usize,
        j: usize,
        measurement: Pose,
        information: Matrix6<f64>,
    ) -> Result<bool, PoseGraphError> {
        self.add_factor(FactorKind::Loop, i, j, measurement, information)
    }

    /// Appends a between-factor; returns `false` if an identical factor
    /// already exists.
    fn add_factor(
        &mut self,
        kind: FactorKind,
        i: usize,
        j: usize,
        measurement: Pose,
        information: Matrix6<f64>,
    ) -> Result<bool, PoseGraphError> {
        let count = self.poses.len();
        for index in [i, j] {
            if index >= count {
                return Err(PoseGraphError::IndexOutOfRange { index, count });
            }
        }
        if i >= j {
            return Err(PoseGraphError::InvalidOrder { i, j });
        }
        let factor = Factor {
            kind,
            i,
            j,
            measurement,
            information,
        };
        if self.factors.contains(&factor) {
            return Ok(false);
        }
        self.factors.push(factor);
        Ok(true)
    }

    pub fn residual(&self, f: &Factor) -> Twist {
        factor_residual(f, &self.poses)
    }

    pub fn cost(&self) -> f64 {
        total_cost(&self.factors, &self.poses)
    }

    /// Gradient of the cost with respect to right perturbations of every
    /// variable.
    pub fn gradient(&self) -> DVector<f64> {
        let mut g = DVector::zeros(6 * self.poses.len());
        for f in &self.factors {
            let r = factor_residual(f, &self.poses).0;
            let (ji, jj) = factor_jacobians(f, &self.poses);
            let wr = f.information * r * 2.0;
            if f.kind == FactorKind::Prior {
                add_segment(&mut g, f.i, &(jj.transpose() * wr));
            } else {
                add_segment(&mut g, f.i, &(ji.transpose() * wr));
                add_segment(&mut g, f.j, &(jj.transpose() * wr));
            }
        }
        g
    }

    /// Number of connected components over all factors.
    pub fn components(&self) -> usize {
        let n = self.poses.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for f in &self.factors {
            let (a, b) = (find(&mut parent, f.i), find(&mut parent, f.j));
            if a != b {
                parent[a] = b;
            }
        }
        (0..n).filter(|&x| find(&mut parent, x) == x).count()
    }

    /// Levenberg-Marquardt until the relative cost decrease of an accepted
    /// step drops below the tolerance or the iteration budget runs out.
    pub fn optimize(&mut self, cfg: &PoseGraphConfig) -> Result<OptimizationReport, PoseGraphError> {
        let components = self.components();
        if components != 1 {
            return Err(PoseGraphError::Disconnected { components });
        }
        let n = self.poses.len();
        let mut cost = self.cost();
        let mut report = OptimizationReport {
            iterations: 0,
            initial_cost: cost,
            final_cost: cost,
            costs: vec![cost],
        };
        let mut lambda = 1e-6;
        while report.iterations < cfg.max_iterations && cost > 1e-24 {
            report.iterations += 1;
            let (blocks, g) = self.normal_equations();
            let mut accepted = false;
            while lambda < 1e12 {
                let delta = solve_damped(&blocks, &g, n, lambda)?;
                let candidate: Vec<Pose> = self
                    .poses
                    .iter()
                    .enumerate()
                    .map(|(k, x)| {
                        let d = Twist(Vector6::from_iterator(delta.rows(6 * k, 6).iter().copied()));
                        x.compose(&Pose::exp(&d))
                    })
                    .collect();
                let new_cost = total_cost(&self.factors, &candidate);
                if new_cost < cost {
                    self.poses = candidate;
                    let decrease = (cost - new_cost) / cost;
                    cost = new_cost;
                    report.costs.push(cost);
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if decrease < cfg.relative_tolerance {
                        report.final_cost = cost;
                        return Ok(report);
                    }
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                break;
            }
        }
        report.final_cost = cost;
        Ok(report)
    }

    /// Block Hessian `Σ Jᵀ Ω J` keyed by variable pair, and gradient
    /// `Σ Jᵀ Ω r`.
    fn normal_equations(&self) -> (HashMap<(usize, usize), Matrix6<f64>>, DVector<f64>) {
        let mut blocks: HashMap<(usize, usize), Matrix6<f64>> = HashMap::new();
        let mut g = DVector::zeros(6 * self.poses.len());
        let mut add = |a: usize, b: usize, m: Matrix6<f64>| {
            *blocks.entry((a, b)).or_insert_with(Matrix6::zeros) += m;
        };
        for f in &self.factors {
            let r = factor_residual(f, &self.poses).0;
            let (ji, jj) = factor_jacobians(f, &self.poses);
            let w = &f.information;
            if f.kind == FactorKind::Prior {
                add(f.i, f.i, jj.transpose() * w * jj);
                add_segment(&mut g, f.i, &(jj.transpose() * w * r));
                continue;
            }
            add(f.i, f.i, ji.transpose() * w * ji);
            add(f.j, f.j, jj.transpose() * w * jj);
            let off = ji.transpose() * w * jj;
            add(f.i, f.j, off);
            add(f.j, f.i, off.transpose());
            add_segment(&mut g, f.i, &(ji.transpose() * w * r));
            add_segment(&mut g, f.j, &(jj.transpose() * w * r));
        }
        (blocks, g)
    }
}

fn add_segment(g: &mut DVector<f64>, var: usize, v: &Vector6<f64>) {
    let mut seg = g.rows_mut(6 * var, 6);
    seg += v;
}

/// Solves `(H + λ·diag(H)) δ = −g` with a sparse Cholesky factorization.
fn solve_damped(
    blocks: &HashMap<(usize, usize), Matrix6<f64>>,
    g: &DVector<f64>,
    n: usize,
    lambda: f64,
) -> Result<DVector<f64>, PoseGraphError> {
    let dim = 6 * n;
    let mut coo = CooMatrix::new(dim, dim);
    let mut keys: Vec<_> = blocks.keys().copied().collect();
    keys.sort_unstable();
    for (a, b) in keys {
        let m = &blocks[&(a, b)];
        for r in 0..6 {
            for c in 0..6 {
                let mut v = m[(r, c)];
                if a == b && r == c {
                    v += lambda * v.abs().max(1e-9);
                }
                if v != 0.0 || (a == b && r == c) {
                    coo.push(6 * a + r, 6 * b + c, v);
                }
            }
        }
    }
    let csc = CscMatrix::from(&coo);
    let chol = CscCholesky::factor(&csc).map_err(|_| PoseGraphError::Singular)?;
    let rhs = -g;
    let x = chol.solve(&rhs);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(PoseGraphError::Singular);
    }
    Ok(DVector::from_column_slice(x.as_slice()))
}

pub fn factor_residual(f: &Factor, poses: &[Pose]) -> Twist {
    let e = if f.kind == FactorKind::Prior {
        f.measurement.inverse().compose(&poses[f.i])
    } else {
        f.measurement.inverse().compose(&poses[f.i].between(&poses[f.j]))
    };
    e.log_unchecked()
}

/// Jacobians of the residual with respect to right perturbations of `Xᵢ`
/// and `Xⱼ`. For a prior only the second is meaningful.
pub fn factor_jacobians(f: &Factor, poses: &[Pose]) -> (Matrix6<f64>, Matrix6<f64>) {
    let r = factor_residual(f, poses);
    let jr_inv = se3_right_jacobian_inverse(&r);
    if f.kind == FactorKind::Prior {
        return (Matrix6::zeros(), jr_inv);
    }
    let rel = poses[f.j].between(&poses[f.i]);
    (-jr_inv * rel.adjoint(), jr_inv)
}

fn total_cost(factors: &[Factor], poses: &[Pose]) -> f64 {
    factors
        .iter()
        .map(|f| {
            let r = factor_residual(f, poses).0;
            (r.transpose() * f.information * r)[0]
        })
        .sum()
}

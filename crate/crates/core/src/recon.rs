//! Least-squares volume reconstruction for a fixed geometry.
//!
//! Minimises `½‖H c − b‖²` by conjugate gradients on the normal equations
//! (CGLS form: one forward and one adjoint projection per iteration),
//! preconditioned by a circulant approximation of `HᵀH`. An optional
//! projected-gradient variant keeps the coefficients non-negative.

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::GeometryParams;
use crate::projector::{dot, ProjectionStack, Projector, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Stop once `‖Hᵀ(Hc − b)‖ ≤ tolerance · ‖Hᵀb‖`.
    pub tolerance: f64,
    pub nonnegative: bool,
    /// Circulant preconditioner built from the normal operator's point response.
    pub preconditioned: bool,
    pub verbose: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 100,
            tolerance: 1e-6,
            nonnegative: false,
            preconditioned: true,
            verbose: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Config("solver.max_iters must be >= 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("solver.tolerance must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub volume: Volume,
    /// `½‖Hc − b‖²` at the start and after every accepted iteration.
    pub costs: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final `‖Hᵀ(Hc − b)‖ / ‖Hᵀb‖`.
    pub gradient_ratio: f64,
}

impl Solution {
    pub fn final_cost(&self) -> f64 {
        *self.costs.last().expect("cost trace is never empty")
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn check_cost(cost: f64, iteration: usize) -> Result<f64> {
    if cost.is_finite() {
        Ok(cost)
    } else {
        Err(Error::Diverged { iteration, cost })
    }
}

/// Solves `argmin_c ½‖H(θ,t)c − b‖²` starting from `init` (zeros when `None`).
pub fn solve_volume(
    projector: &Projector,
    b: &ProjectionStack,
    g: &GeometryParams,
    init: Option<&Volume>,
    cfg: &SolverConfig,
) -> Result<Solution> {
    cfg.validate()?;
    let grid = projector.volume_grid();
    let mut c = match init {
        Some(v) => {
            if v.grid.dims != grid.dims {
                return Err(Error::Shape(format!(
                    "initial volume {:?} vs grid {:?}",
                    v.grid.dims, grid.dims
                )));
            }
            if !v.data.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidParameter("initial volume is not finite".into()));
            }
            v.clone()
        }
        None => Volume::zeros(grid),
    };
    if cfg.nonnegative {
        c.data.iter_mut().for_each(|x| *x = x.max(0.0));
        projected_gradient(projector, b, g, c, cfg)
    } else {
        cgls(projector, b, g, c, cfg)
    }
}

/// Relative floor on the preconditioner spectrum.
const SPECTRUM_FLOOR: f64 = 1e-3;

/// Inverse of a circulant approximation of `HᵀH`.
struct Preconditioner {
    dims: [usize; 3],
    plans: [(Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>); 3],
    inverse: Vec<f64>,
}

impl Preconditioner {
    fn new(projector: &Projector, g: &GeometryParams) -> Result<Option<Self>> {
        let grid = projector.volume_grid();
        let dims = grid.dims;
        let centre = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
        let mut delta = Volume::zeros(grid);
        delta.data[grid.index(centre[0], centre[1], centre[2])] = 1.0;
        let response = projector.adjoint(&projector.forward(&delta, g)?, g)?;
        let mut planner = FftPlanner::new();
        let plans = dims.map(|n| (planner.plan_fft_forward(n), planner.plan_fft_inverse(n)));
        let mut kernel = vec![Complex::new(0.0, 0.0); grid.len()];
        for (k, &v) in response.data.iter().enumerate() {
            let [x, y, z] = grid.unravel(k);
            let w = |i: usize, a: usize| (i + dims[a] - centre[a]) % dims[a];
            kernel[grid.index(w(x, 0), w(y, 1), w(z, 2))] = Complex::new(v, 0.0);
        }
        let mut pc = Preconditioner {
            dims,
            plans,
            inverse: Vec::new(),
        };
        pc.transform(&mut kernel, false);
        let peak = kernel.iter().map(|v| v.re).fold(0.0, f64::max);
        if !(peak > 0.0) {
            return Ok(None);
        }
        let n = grid.len() as f64;
        pc.inverse = kernel
            .iter()
            .map(|v| 1.0 / (v.re.max(SPECTRUM_FLOOR * peak) * n))
            .collect();
        Ok(Some(pc))
    }

    fn transform(&self, data: &mut [Complex<f64>], inverse: bool) {
        let [nx, ny, nz] = self.dims;
        let strides = [1, nx, nx * ny];
        for (axis, plan) in self.plans.iter().enumerate() {
            let plan = if inverse { &plan.1 } else { &plan.0 };
            let n = self.dims[axis];
            let stride = strides[axis];
            let mut line = vec![Complex::new(0.0, 0.0); n];
            for start in 0..nx * ny * nz {
                if (start / stride) % n != 0 {
                    continue;
                }
                for (i, v) in line.iter_mut().enumerate() {
                    *v = data[start + i * stride];
                }
                plan.process(&mut line);
                for (i, v) in line.iter().enumerate() {
                    data[start + i * stride] = *v;
                }
            }
        }
    }

    fn apply(&self, s: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = s.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.transform(&mut buf, false);
        buf.iter_mut().zip(&self.inverse).for_each(|(v, w)| *v *= *w);
        self.transform(&mut buf, true);
        buf.iter().map(|v| v.re).collect()
    }
}

fn cgls(
    projector: &Projector,
    b: &ProjectionStack,
    g: &GeometryParams,
    mut c: Volume,
    cfg: &SolverConfig,
) -> Result<Solution> {
    let reference = projector.adjoint(b, g)?.norm();
    // r = b - Hc
    let hc = projector.forward(&c, g)?;
    let mut r = ProjectionStack {
        data: sub(&b.data, &hc.data),
        ..hc
    };
    let mut cost = check_cost(0.5 * r.norm_sq(), 0)?;
    let mut costs = vec![cost];
    let pc = if cfg.preconditioned {
        Preconditioner::new(projector, g)?
    } else {
        None
    };
    let precondition = |s: &[f64]| match &pc {
        Some(pc) => pc.apply(s),
        None => s.to_vec(),
    };
    let mut s = projector.adjoint(&r, g)?;
    let mut z = precondition(&s.data);
    let mut gamma = dot(&s.data, &z);
    let mut p = z.clone();
    let mut iterations = 0;
    let mut ratio = if reference > 0.0 { s.norm() / reference } else { 0.0 };
    let mut converged = reference == 0.0 || ratio <= cfg.tolerance;

    while !converged && iterations < cfg.max_iters {
        let pv = Volume {
            grid: c.grid,
            data: p.clone(),
        };
        let q = projector.forward(&pv, g)?;
        let qq = q.norm_sq();
        if !(qq > 0.0) {
            break;
        }
        let alpha = gamma / qq;
        let trial_c: Vec<f64> = c.data.iter().zip(&p).map(|(x, d)| x + alpha * d).collect();
        let trial_r: Vec<f64> = r.data.iter().zip(&q.data).map(|(x, d)| x - alpha * d).collect();
        let trial_cost = check_cost(0.5 * dot(&trial_r, &trial_r), iterations + 1)?;
        if trial_cost > cost {
            // Round-off floor reached; the step would no longer decrease the cost.
            break;
        }
        c.data = trial_c;
        r.data = trial_r;
        cost = trial_cost;
        costs.push(cost);
        iterations += 1;

        s = projector.adjoint(&r, g)?;
        ratio = s.norm() / reference;
        if cfg.verbose {
            log::info!("cgls {iterations:4}: cost {cost:.6e}, gradient ratio {ratio:.3e}");
        }
        if ratio <= cfg.tolerance {
            converged = true;
            break;
        }
        z = precondition(&s.data);
        let gamma_next = dot(&s.data, &z);
        let beta = gamma_next / gamma;
        gamma = gamma_next;
        p.iter_mut().zip(&z).for_each(|(d, zv)| *d = zv + beta * *d);
    }

    Ok(Solution {
        volume: c,
        costs,
        iterations,
        converged,
        gradient_ratio: ratio,
    })
}

fn projected_gradient(
    projector: &Projector,
    b: &ProjectionStack,
    g: &GeometryParams,
    mut c: Volume,
    cfg: &SolverConfig,
) -> Result<Solution> {
    let reference = projector.adjoint(b, g)?.norm();
    let residual = |c: &Volume| -> Result<Vec<f64>> {
        Ok(sub(&projector.forward(c, g)?.data, &b.data))
    };
    let mut r = residual(&c)?;
    let mut cost = check_cost(0.5 * dot(&r, &r), 0)?;
    let mut costs = vec![cost];
    let mut iterations = 0;
    let mut ratio = 0.0;
    let mut converged = reference == 0.0;

    while !converged && iterations < cfg.max_iters {
        let rs = ProjectionStack::from_vec(b.detector, b.count, r.clone())?;
        let grad = projector.adjoint(&rs, g)?;
        // Descent direction restricted to the free (non-active) set.
        let d: Vec<f64> = c
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&x, &gr)| if x <= 0.0 && gr > 0.0 { 0.0 } else { -gr })
            .collect();
        let dd = dot(&d, &d);
        ratio = dd.sqrt() / reference;
        if ratio <= cfg.tolerance {
            converged = true;
            break;
        }
        let hd = projector.forward(
            &Volume {
                grid: c.grid,
                data: d.clone(),
            },
            g,
        )?;
        let hdhd = hd.norm_sq();
        if !(hdhd > 0.0) {
            break;
        }
        let mut step = dd / hdhd;
        let mut accepted = None;
        for _ in 0..30 {
            let trial = Volume {
                grid: c.grid,
                data: c
                    .data
                    .iter()
                    .zip(&d)
                    .map(|(x, di)| (x + step * di).max(0.0))
                    .collect(),
            };
            let tr = residual(&trial)?;
            let tc = check_cost(0.5 * dot(&tr, &tr), iterations + 1)?;
            if tc <= cost {
                accepted = Some((trial, tr, tc));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, tr, tc)) = accepted else {
            break;
        };
        c = trial;
        r = tr;
        cost = tc;
        costs.push(cost);
        iterations += 1;
        if cfg.verbose {
            log::info!("pgd {iterations:4}: cost {cost:.6e}, gradient ratio {ratio:.3e}");
        }
    }

    Ok(Solution {
        volume: c,
        costs,
        iterations,
        converged,
        gradient_ratio: ratio,
    })
}

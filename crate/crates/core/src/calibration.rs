//! Joint estimation of the acquisition geometry and the volume.
//!
//! The outer loop alternates a volume solve for fixed geometry with a
//! geometry update for a fixed volume, both descending the shared cost
//! `½‖H(θ,t)c − b‖²`. Geometry derivatives are central finite differences.
//! Per-projection unknowns only touch their own projection, so their
//! differences are taken on single-projection costs; global unknowns (tilts,
//! a shared shift) use full evaluations.
//!
//! Each outer iteration also tries a joint move along the π-periodic angle
//! modes, with the volume re-solved, and keeps it only if the cost drops.
//!
//! Angles are in radians and shifts in detector pixels wherever this module
//! exposes a parameter vector. The first angle is held fixed: a common offset
//! of all angles only rotates the reconstruction and is not observable.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BlobParams, BlobProfile};
use crate::error::{Error, Result};
use crate::geometry::{DetectorGrid, GeometryParams, Shift, VolumeGrid};
use crate::projector::{dot, ProjectionStack, Projector, Volume};
use crate::recon::{solve_volume, SolverConfig};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    Fixed,
    Global,
    PerProjection,
}

/// Which geometry parameters the calibration may change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreeParams {
    /// Every angle except the first.
    pub angles: bool,
    pub psi1: bool,
    pub psi2: bool,
    pub shift: ShiftMode,
}

impl Default for FreeParams {
    fn default() -> Self {
        FreeParams {
            angles: true,
            psi1: true,
            psi2: true,
            shift: ShiftMode::Global,
        }
    }
}

/// Settings of the finite-difference descent on the geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Descent steps per geometry update.
    pub max_steps: usize,
    /// Radians.
    pub fd_angle_step: f64,
    /// Pixels.
    pub fd_shift_step: f64,
    /// Sufficient-decrease constant of the backtracking rule.
    pub armijo: f64,
    /// Step shrink factor per backtrack.
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Largest angle change per step (radians).
    pub max_angle_step: f64,
    /// Largest shift change per step (pixels).
    pub max_shift_step: f64,
    /// A step decreasing the cost by less than this fraction ends the update.
    pub stall_tolerance: f64,
    /// Parameters whose derivative is below this fraction of `‖b‖²` are
    /// left unchanged.
    pub gradient_tolerance: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_steps: 3,
            fd_angle_step: 1e-4,
            fd_shift_step: 1e-3,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 12,
            max_angle_step: 2f64.to_radians(),
            max_shift_step: 2.0,
            stall_tolerance: 1e-6,
            gradient_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    pub free: FreeParams,
    pub max_outer: usize,
    /// Convergence threshold on the largest angle change (radians).
    pub angle_tolerance: f64,
    /// Convergence threshold on the largest shift change (pixels).
    pub shift_tolerance: f64,
    /// Volume solve inside the loop (warm started).
    pub inner_solver: SolverConfig,
    /// Volume solve after the loop and at the fine scale.
    pub final_solver: SolverConfig,
    pub optimizer: OptimizerConfig,
    /// Detector columns at the coarse scale; `None` calibrates at full size.
    pub coarse_detector: Option<usize>,
    /// Try a Gauss-Newton move along the π-periodic angle modes each outer
    /// iteration.
    pub slow_modes: bool,
    /// Outer iterations between updates of the slow-mode curvature.
    pub slow_mode_refresh: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            free: FreeParams::default(),
            max_outer: 50,
            angle_tolerance: 1e-4,
            shift_tolerance: 1e-2,
            inner_solver: SolverConfig {
                max_iters: 10,
                ..Default::default()
            },
            final_solver: SolverConfig::default(),
            optimizer: OptimizerConfig::default(),
            coarse_detector: None,
            slow_modes: true,
            slow_mode_refresh: 8,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        let f = &self.free;
        if !(f.angles || f.psi1 || f.psi2 || f.shift != ShiftMode::Fixed) {
            return Err(Error::Config("calibration needs at least one free parameter".into()));
        }
        if self.max_outer < 1 {
            return Err(Error::Config("calibration.max_outer must be >= 1".into()));
        }
        let o = &self.optimizer;
        for (name, v) in [
            ("angle_tolerance", self.angle_tolerance),
            ("shift_tolerance", self.shift_tolerance),
            ("optimizer.fd_angle_step", o.fd_angle_step),
            ("optimizer.fd_shift_step", o.fd_shift_step),
            ("optimizer.armijo", o.armijo),
            ("optimizer.max_angle_step", o.max_angle_step),
            ("optimizer.max_shift_step", o.max_shift_step),
            ("optimizer.stall_tolerance", o.stall_tolerance),
            ("optimizer.gradient_tolerance", o.gradient_tolerance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("calibration.{name} must be > 0, got {v}")));
            }
        }
        if !(o.backtrack > 0.0 && o.backtrack < 1.0) {
            return Err(Error::Config("calibration.optimizer.backtrack must be in (0, 1)".into()));
        }
        if o.max_steps < 1 {
            return Err(Error::Config("calibration.optimizer.max_steps must be >= 1".into()));
        }
        if self.slow_mode_refresh < 1 {
            return Err(Error::Config("calibration.slow_mode_refresh must be >= 1".into()));
        }
        if self.coarse_detector == Some(0) {
            return Err(Error::Config("calibration.coarse_detector must be >= 1".into()));
        }
        self.inner_solver.validate()?;
        self.final_solver.validate()
    }

    /// Pooling factor taking `detector` to the coarse scale.
    pub fn coarse_factor(&self, detector: &DetectorGrid) -> Result<usize> {
        let Some(n) = self.coarse_detector else {
            return Ok(1);
        };
        let [cols, rows] = detector.dims;
        if n == 0 || cols % n != 0 || rows % (cols / n) != 0 {
            return Err(Error::Config(format!(
                "coarse detector size {n} does not divide the {cols}x{rows} detector"
            )));
        }
        Ok(cols / n)
    }
}

/// `½‖H(θ,t)c − b‖²`.
pub fn objective(
    projector: &Projector,
    c: &Volume,
    g: &GeometryParams,
    b: &ProjectionStack,
) -> Result<f64> {
    check_shapes(projector, c, g, b)?;
    total(&projection_costs(projector, &c.data, g, b))
}

fn check_shapes(
    projector: &Projector,
    c: &Volume,
    g: &GeometryParams,
    b: &ProjectionStack,
) -> Result<()> {
    g.validate()?;
    if c.grid.dims != projector.volume_grid().dims {
        return Err(Error::Shape(format!(
            "volume {:?} does not match projector grid {:?}",
            c.grid.dims,
            projector.volume_grid().dims
        )));
    }
    if b.detector.dims != projector.detector().dims || b.count != g.len() {
        return Err(Error::Shape(format!(
            "stack of {} {:?} projections vs geometry of {} on detector {:?}",
            b.count,
            b.detector.dims,
            g.len(),
            projector.detector().dims
        )));
    }
    Ok(())
}

fn total(costs: &[f64]) -> Result<f64> {
    let f = 0.5 * costs.iter().sum::<f64>();
    if f.is_finite() {
        Ok(f)
    } else {
        Err(Error::NonFinite("calibration objective".into()))
    }
}

/// `‖H_i c − b_i‖²` for one projection under an explicit pose.
fn projection_cost(
    projector: &Projector,
    c: &[f64],
    pose: &crate::geometry::Pose,
    b: &[f64],
    buf: &mut [f64],
) -> f64 {
    projector.project_one(c, pose, buf);
    buf.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn projection_costs(
    projector: &Projector,
    c: &[f64],
    g: &GeometryParams,
    b: &ProjectionStack,
) -> Vec<f64> {
    let pixels = projector.detector().pixels();
    (0..g.len())
        .into_par_iter()
        .map_init(
            || vec![0.0; pixels],
            |buf, i| projection_cost(projector, c, &g.pose(i), b.projection(i), buf),
        )
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unit {
    Angle,
    Shift,
}

/// One scalar unknown of the geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Psi1,
    Psi2,
    GlobalShift(usize),
    Angle(usize),
    ProjectionShift(usize, usize),
}

impl Slot {
    fn unit(self) -> Unit {
        match self {
            Slot::Psi1 | Slot::Psi2 | Slot::Angle(_) => Unit::Angle,
            Slot::GlobalShift(_) | Slot::ProjectionShift(..) => Unit::Shift,
        }
    }

    fn name(self) -> String {
        match self {
            Slot::Psi1 => "psi1".into(),
            Slot::Psi2 => "psi2".into(),
            Slot::GlobalShift(a) => format!("t{}", a + 1),
            Slot::Angle(i) => format!("phi[{i}]"),
            Slot::ProjectionShift(i, a) => format!("t{}[{i}]", a + 1),
        }
    }
}

/// Ordering of the free parameters: global ones first, then per projection.
#[derive(Debug, Clone)]
struct Layout {
    globals: Vec<Slot>,
    /// Free slots of each projection.
    locals: Vec<Vec<Slot>>,
    pixel: f64,
}

impl Layout {
    fn new(free: &FreeParams, count: usize, detector: &DetectorGrid) -> Self {
        let mut globals = Vec::new();
        if free.psi1 {
            globals.push(Slot::Psi1);
        }
        if free.psi2 {
            globals.push(Slot::Psi2);
        }
        if free.shift == ShiftMode::Global {
            globals.extend([Slot::GlobalShift(0), Slot::GlobalShift(1)]);
        }
        let locals = (0..count)
            .map(|i| {
                let mut v = Vec::new();
                if free.angles && i > 0 {
                    v.push(Slot::Angle(i));
                }
                if free.shift == ShiftMode::PerProjection {
                    v.extend([Slot::ProjectionShift(i, 0), Slot::ProjectionShift(i, 1)]);
                }
                v
            })
            .collect();
        Layout {
            globals,
            locals,
            pixel: detector.spacing,
        }
    }

    fn slots(&self) -> impl Iterator<Item = Slot> + '_ {
        self.globals.iter().chain(self.locals.iter().flatten()).copied()
    }

    /// Adds `delta` (radians or pixels) to one parameter.
    fn nudge(&self, g: &mut GeometryParams, slot: Slot, delta: f64) {
        match slot {
            Slot::Psi1 => g.psi1 += delta,
            Slot::Psi2 => g.psi2 += delta,
            Slot::Angle(i) => g.phi[i] += delta,
            Slot::GlobalShift(a) => match &mut g.shift {
                Shift::Global(t) => t[a] += delta * self.pixel,
                Shift::PerProjection(ts) => ts.iter_mut().for_each(|t| t[a] += delta * self.pixel),
            },
            Slot::ProjectionShift(i, a) => {
                if let Shift::PerProjection(ts) = &mut g.shift {
                    ts[i][a] += delta * self.pixel;
                }
            }
        }
    }
}

/// Brings the shift representation in line with the free-parameter choice.
fn conform(g: &GeometryParams, free: &FreeParams) -> Result<GeometryParams> {
    g.validate()?;
    match (free.shift, &g.shift) {
        (ShiftMode::PerProjection, Shift::Global(_)) => Ok(g.with_per_projection_shift()),
        (ShiftMode::Global, Shift::PerProjection(_)) => Err(Error::Config(
            "a global shift cannot be calibrated from per-projection initial shifts".into(),
        )),
        _ => Ok(g.clone()),
    }
}

/// Names of the free parameters in the order used by [`param_gradient`].
pub fn parameter_names(free: &FreeParams, count: usize) -> Vec<String> {
    let det = DetectorGrid::square(1, 1.0).expect("unit detector");
    Layout::new(free, count, &det).slots().map(Slot::name).collect()
}

/// Central differences of the cost at one parameter: slope and curvature.
#[derive(Debug, Clone, Copy)]
struct Derivative {
    slope: f64,
    curvature: f64,
}

fn difference(f0: f64, plus: f64, minus: f64, h: f64) -> Derivative {
    Derivative {
        slope: (plus - minus) / (2.0 * h),
        curvature: (plus - 2.0 * f0 + minus) / (h * h),
    }
}

struct Differ<'a> {
    projector: &'a Projector,
    c: &'a [f64],
    b: &'a ProjectionStack,
    layout: &'a Layout,
    opt: &'a OptimizerConfig,
    /// Derivatives below this are treated as zero.
    flat: f64,
}

impl Differ<'_> {
    fn step(&self, slot: Slot) -> f64 {
        match slot.unit() {
            Unit::Angle => self.opt.fd_angle_step,
            Unit::Shift => self.opt.fd_shift_step,
        }
    }

    fn limit(&self, slot: Slot) -> f64 {
        match slot.unit() {
            Unit::Angle => self.opt.max_angle_step,
            Unit::Shift => self.opt.max_shift_step,
        }
    }

    fn costs(&self, g: &GeometryParams) -> Vec<f64> {
        projection_costs(self.projector, self.c, g, self.b)
    }

    fn objective(&self, g: &GeometryParams) -> Result<f64> {
        total(&self.costs(g))
    }

    fn global_derivatives(&self, g: &GeometryParams, f0: f64) -> Result<Vec<Derivative>> {
        self.layout
            .globals
            .iter()
            .map(|&slot| {
                let h = self.step(slot);
                let mut gp = g.clone();
                self.layout.nudge(&mut gp, slot, h);
                let plus = self.objective(&gp)?;
                let mut gm = g.clone();
                self.layout.nudge(&mut gm, slot, -h);
                let minus = self.objective(&gm)?;
                Ok(difference(f0, plus, minus, h))
            })
            .collect()
    }

    /// Derivatives of `½‖H_i c − b_i‖²` for every per-projection parameter.
    fn local_derivatives(&self, g: &GeometryParams, costs: &[f64]) -> Vec<Vec<Derivative>> {
        let pixels = self.projector.detector().pixels();
        (0..g.len())
            .into_par_iter()
            .map_init(
                || vec![0.0; pixels],
                |buf, i| {
                    let b_i = self.b.projection(i);
                    let f0 = 0.5 * costs[i];
                    self.layout.locals[i]
                        .iter()
                        .map(|&slot| {
                            let h = self.step(slot);
                            let mut gp = g.clone();
                            self.layout.nudge(&mut gp, slot, h);
                            let plus =
                                0.5 * projection_cost(self.projector, self.c, &gp.pose(i), b_i, buf);
                            let mut gm = g.clone();
                            self.layout.nudge(&mut gm, slot, -h);
                            let minus =
                                0.5 * projection_cost(self.projector, self.c, &gm.pose(i), b_i, buf);
                            difference(f0, plus, minus, h)
                        })
                        .collect()
                },
            )
            .collect()
    }

    /// Newton step on each coordinate, clamped; a plain clamped descent step
    /// where the curvature is not positive.
    fn direction(&self, slots: &[Slot], d: &[Derivative]) -> Vec<f64> {
        slots
            .iter()
            .zip(d)
            .map(|(&slot, d)| {
                let limit = self.limit(slot);
                if d.slope.abs() <= self.flat {
                    return 0.0;
                }
                let raw = if d.curvature > 0.0 {
                    -d.slope / d.curvature
                } else {
                    -d.slope.signum() * limit
                };
                raw.clamp(-limit, limit)
            })
            .collect()
    }

    fn apply(&self, g: &GeometryParams, slots: &[Slot], dir: &[f64], alpha: f64) -> GeometryParams {
        let mut out = g.clone();
        for (&slot, &d) in slots.iter().zip(dir) {
            self.layout.nudge(&mut out, slot, alpha * d);
        }
        out
    }
}

/// Finite-difference gradient of the cost with respect to the free
/// parameters, ordered as [`parameter_names`]; radians and pixels.
pub fn param_gradient(
    projector: &Projector,
    c: &Volume,
    g: &GeometryParams,
    b: &ProjectionStack,
    free: &FreeParams,
    opt: &OptimizerConfig,
) -> Result<Vec<f64>> {
    check_shapes(projector, c, g, b)?;
    let g = conform(g, free)?;
    let layout = Layout::new(free, g.len(), &projector.detector());
    let differ = Differ {
        projector,
        c: &c.data,
        b,
        layout: &layout,
        opt,
        flat: opt.gradient_tolerance * b.data.iter().map(|v| v * v).sum::<f64>(),
    };
    let costs = differ.costs(&g);
    let f0 = total(&costs)?;
    let mut grad: Vec<f64> = differ
        .global_derivatives(&g, f0)?
        .iter()
        .map(|d| d.slope)
        .collect();
    grad.extend(differ.local_derivatives(&g, &costs).iter().flatten().map(|d| d.slope));
    if grad.iter().all(|v| v.is_finite()) {
        Ok(grad)
    } else {
        Err(Error::NonFinite("parameter gradient".into()))
    }
}

/// Result of one geometry update.
#[derive(Debug, Clone)]
pub struct ParamUpdate {
    pub geometry: GeometryParams,
    pub cost_before: f64,
    pub cost_after: f64,
    pub steps: usize,
    /// Some line search found no decrease at all.
    pub line_search_failed: bool,
}

/// Descends the cost over the free geometry parameters with `c` fixed.
///
/// Each step first moves the per-projection parameters, each projection
/// with its own backtracking search, and then the global parameters jointly.
/// No accepted move increases the cost.
pub fn update_params(
    projector: &Projector,
    c: &Volume,
    g: &GeometryParams,
    b: &ProjectionStack,
    cfg: &CalibConfig,
) -> Result<ParamUpdate> {
    cfg.validate()?;
    check_shapes(projector, c, g, b)?;
    let mut g = conform(g, &cfg.free)?;
    let layout = Layout::new(&cfg.free, g.len(), &projector.detector());
    let opt = &cfg.optimizer;
    let differ = Differ {
        projector,
        c: &c.data,
        b,
        layout: &layout,
        opt,
        flat: opt.gradient_tolerance * b.data.iter().map(|v| v * v).sum::<f64>(),
    };
    let mut costs = differ.costs(&g);
    let cost_before = total(&costs)?;
    let mut cost = cost_before;
    let mut steps = 0;
    let mut line_search_failed = false;

    while steps < opt.max_steps {
        let start = cost;
        if cost == 0.0 {
            break;
        }

        if layout.locals.iter().any(|s| !s.is_empty()) {
            let derivs = differ.local_derivatives(&g, &costs);
            let pixels = projector.detector().pixels();
            let moves: Vec<Option<(Vec<f64>, f64)>> = (0..g.len())
                .into_par_iter()
                .map_init(
                    || vec![0.0; pixels],
                    |buf, i| {
                        let slots = &layout.locals[i];
                        if slots.is_empty() {
                            return None;
                        }
                        let dir = differ.direction(slots, &derivs[i]);
                        let slope: f64 = dir.iter().zip(&derivs[i]).map(|(d, v)| d * v.slope).sum();
                        if !(slope < 0.0) {
                            return None;
                        }
                        let f0 = 0.5 * costs[i];
                        let mut alpha = 1.0;
                        for _ in 0..=opt.max_backtracks {
                            let trial = differ.apply(&g, slots, &dir, alpha);
                            let c_i = projection_cost(
                                projector,
                                &c.data,
                                &trial.pose(i),
                                b.projection(i),
                                buf,
                            );
                            if 0.5 * c_i <= f0 + opt.armijo * alpha * slope {
                                return Some((dir.iter().map(|d| alpha * d).collect(), c_i));
                            }
                            alpha *= opt.backtrack;
                        }
                        Some((Vec::new(), costs[i]))
                    },
                )
                .collect();
            let mut next = g.clone();
            for (i, m) in moves.into_iter().enumerate() {
                match m {
                    Some((delta, c_i)) if !delta.is_empty() => {
                        for (&slot, d) in layout.locals[i].iter().zip(delta) {
                            layout.nudge(&mut next, slot, d);
                        }
                        costs[i] = c_i;
                    }
                    Some(_) => line_search_failed = true,
                    None => {}
                }
            }
            g = next;
            cost = total(&costs)?;
        }

        if !layout.globals.is_empty() {
            let derivs = differ.global_derivatives(&g, cost)?;
            let dir = differ.direction(&layout.globals, &derivs);
            let slope: f64 = dir.iter().zip(&derivs).map(|(d, v)| d * v.slope).sum();
            if slope < 0.0 {
                let mut alpha = 1.0;
                let mut accepted = false;
                for _ in 0..=opt.max_backtracks {
                    let trial = differ.apply(&g, &layout.globals, &dir, alpha);
                    let trial_costs = differ.costs(&trial);
                    let f = total(&trial_costs)?;
                    if f <= cost + opt.armijo * alpha * slope {
                        g = trial;
                        costs = trial_costs;
                        cost = f;
                        accepted = true;
                        break;
                    }
                    alpha *= opt.backtrack;
                }
                line_search_failed |= !accepted;
            }
        }

        steps += 1;
        log::debug!("geometry step {steps}: cost {start:.6e} -> {cost:.6e}");
        if start - cost <= opt.stall_tolerance * start {
            break;
        }
    }

    Ok(ParamUpdate {
        geometry: g,
        cost_before,
        cost_after: cost,
        steps,
        line_search_failed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Cost of the zero volume under the initial geometry.
    Start,
    Volume,
    Geometry,
    /// Volume solve at angles moved along the π-periodic modes.
    SlowModes,
    /// Closing volume solve with the calibrated geometry.
    Final,
}

/// Cost after one half-step of the alternation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub outer: usize,
    pub stage: Stage,
    pub cost: f64,
}

/// Scalar parameters after an outer iteration (radians, pixels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub outer: usize,
    pub psi1: f64,
    pub psi2: f64,
    /// Mean detector shift.
    pub shift: [f64; 2],
    /// Largest parameter change in this iteration, angles and shifts.
    pub max_angle_change: f64,
    pub max_shift_change: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub volume_seconds: f64,
    pub geometry_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct CalibrationReport {
    pub costs: Vec<CostRecord>,
    pub trajectory: Vec<Snapshot>,
    pub geometry: GeometryParams,
    pub volume: Volume,
    pub outer_iterations: usize,
    pub converged: bool,
    pub line_search_failures: usize,
    pub timings: StageTimings,
}

impl CalibrationReport {
    pub fn final_cost(&self) -> f64 {
        self.costs.last().expect("cost trace is never empty").cost
    }

    /// Cost at the end of each outer iteration.
    pub fn outer_costs(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        let mut last = 0;
        for r in &self.costs {
            if matches!(r.stage, Stage::Start | Stage::Final) {
                continue;
            }
            if r.outer == last {
                *out.last_mut().expect("outer iteration has a record") = r.cost;
            } else {
                out.push(r.cost);
                last = r.outer;
            }
        }
        out
    }
}

fn mean_shift(g: &GeometryParams) -> [f64; 2] {
    let n = g.len() as f64;
    let mut m = [0.0; 2];
    for i in 0..g.len() {
        let t = g.shift.get(i);
        m[0] += t[0] / n;
        m[1] += t[1] / n;
    }
    m
}

/// Largest change of any angle (radians) and any shift (pixels).
fn max_change(a: &GeometryParams, b: &GeometryParams, pixel: f64) -> (f64, f64) {
    let mut angle = (a.psi1 - b.psi1).abs().max((a.psi2 - b.psi2).abs());
    for (x, y) in a.phi.iter().zip(&b.phi) {
        angle = angle.max((x - y).abs());
    }
    let mut shift: f64 = 0.0;
    for i in 0..a.len() {
        let (s, t) = (a.shift.get(i), b.shift.get(i));
        shift = shift.max((s[0] - t[0]).abs()).max((s[1] - t[1]).abs());
    }
    (angle, shift / pixel)
}

/// Volume solve that never raises the shared cost.
fn volume_step(
    projector: &Projector,
    b: &ProjectionStack,
    g: &GeometryParams,
    c: &Volume,
    cost: f64,
    solver: &SolverConfig,
) -> Result<(Volume, f64)> {
    let sol = solve_volume(projector, b, g, Some(c), solver)?;
    let f = objective(projector, &sol.volume, g, b)?;
    if f <= cost {
        Ok((sol.volume, f))
    } else {
        Ok((c.clone(), cost))
    }
}

/// Harmonics of the π-periodic angle errors. Opposing views stay consistent
/// under such errors and the volume absorbs most of them, so their cost
/// curvature with the volume re-solved is far below the fixed-volume one.
const SLOW_HARMONICS: [f64; 4] = [2.0, 4.0, 6.0, 8.0];

/// Cosine and sine of every slow harmonic, zero at the first angle.
fn slow_modes(phi: &[f64]) -> Vec<Vec<f64>> {
    let p0 = phi[0];
    SLOW_HARMONICS
        .iter()
        .flat_map(|&k| {
            [
                phi.iter().map(|p| (k * p).cos() - (k * p0).cos()).collect(),
                phi.iter().map(|p| (k * p).sin() - (k * p0).sin()).collect(),
            ]
        })
        .collect()
}

fn along(g: &GeometryParams, modes: &[Vec<f64>], amplitude: &[f64]) -> GeometryParams {
    let mut out = g.clone();
    for (i, p) in out.phi.iter_mut().enumerate() {
        *p += modes.iter().zip(amplitude).map(|(m, a)| a * m[i]).sum::<f64>();
    }
    out
}

/// Derivatives of the fixed-volume cost along every slow mode.
fn slow_gradient(
    projector: &Projector,
    c: &Volume,
    g: &GeometryParams,
    b: &ProjectionStack,
    h: f64,
) -> Result<Vec<f64>> {
    let pixels = projector.detector().pixels();
    let slopes: Vec<f64> = (0..g.len())
        .into_par_iter()
        .map_init(
            || vec![0.0; pixels],
            |buf, i| {
                let b_i = b.projection(i);
                let mut nudged = g.clone();
                nudged.phi[i] = g.phi[i] + h;
                let plus = projection_cost(projector, &c.data, &nudged.pose(i), b_i, buf);
                nudged.phi[i] = g.phi[i] - h;
                let minus = projection_cost(projector, &c.data, &nudged.pose(i), b_i, buf);
                0.25 * (plus - minus) / h
            },
        )
        .collect();
    let grad: Vec<f64> = slow_modes(&g.phi)
        .iter()
        .map(|m| m.iter().zip(&slopes).map(|(w, d)| w * d).sum())
        .collect();
    if grad.iter().all(|v| v.is_finite()) {
        Ok(grad)
    } else {
        Err(Error::NonFinite("slow-mode gradient".into()))
    }
}

/// Gauss-Newton curvature over the slow modes with the volume re-solved:
/// the Gram matrix of the mode Jacobians after removing the part a volume
/// change reproduces.
fn slow_hessian(
    projector: &Projector,
    c: &Volume,
    g: &GeometryParams,
    solver: &SolverConfig,
    h: f64,
) -> Result<DMatrix<f64>> {
    let modes = slow_modes(&g.phi);
    let n = modes.len();
    let mut residuals = Vec::with_capacity(n);
    for k in 0..n {
        let mut e = vec![0.0; n];
        e[k] = h;
        let plus = projector.forward(c, &along(g, &modes, &e))?;
        e[k] = -h;
        let minus = projector.forward(c, &along(g, &modes, &e))?;
        let jacobian = ProjectionStack {
            data: plus.data.iter().zip(&minus.data).map(|(p, m)| (p - m) / (2.0 * h)).collect(),
            ..plus
        };
        let fit = solve_volume(projector, &jacobian, g, None, solver)?;
        let reproduced = projector.forward(&fit.volume, g)?;
        residuals.push(sub(&jacobian.data, &reproduced.data));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| dot(&residuals[i], &residuals[j])))
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `−B⁻¹G` and the predicted decrease `GᵀB⁻¹G`.
fn newton_step(hessian: &DMatrix<f64>, grad: &[f64]) -> Option<(Vec<f64>, f64)> {
    let g = DVector::from_column_slice(grad);
    let step = hessian.clone().cholesky()?.solve(&g);
    let decrease = g.dot(&step);
    (decrease > 0.0 && decrease.is_finite()).then(|| (step.iter().map(|v| -v).collect(), decrease))
}

/// Alternates volume solves and geometry updates until the geometry stops
/// moving or `max_outer` iterations have run.
pub fn calibrate(
    projector: &Projector,
    b: &ProjectionStack,
    g_init: &GeometryParams,
    cfg: &CalibConfig,
) -> Result<CalibrationReport> {
    cfg.validate()?;
    let started = Instant::now();
    let mut g = conform(g_init, &cfg.free)?;
    let mut c = Volume::zeros(projector.volume_grid());
    check_shapes(projector, &c, &g, b)?;
    let pixel = projector.detector().spacing;

    let mut cost = objective(projector, &c, &g, b)?;
    let mut costs = vec![CostRecord {
        outer: 0,
        stage: Stage::Start,
        cost,
    }];
    let mut trajectory = Vec::new();
    let mut timings = StageTimings::default();
    let mut failures = 0;
    let mut converged = false;
    let mut outer = 0;

    let slow_enabled = cfg.free.angles && cfg.slow_modes && g.len() > 4 * SLOW_HARMONICS.len();
    let mut hessian: Option<(DMatrix<f64>, usize)> = None;
    // Multiple of the Newton step tried along the slow modes.
    let mut scale = 1.0;
    while outer < cfg.max_outer {
        outer += 1;
        let g_start = g.clone();
        let t0 = Instant::now();
        let mut stage = Stage::Volume;
        let c_prev = c;
        (c, cost) = volume_step(projector, b, &g, &c_prev, cost, &cfg.inner_solver)?;
        if slow_enabled && outer > 1 {
            let h = cfg.optimizer.fd_angle_step;
            if hessian.as_ref().map_or(true, |(_, at)| outer - at >= cfg.slow_mode_refresh) {
                hessian = Some((slow_hessian(projector, &c, &g, &cfg.inner_solver, h)?, outer));
            }
            let grad = slow_gradient(projector, &c, &g, b, h)?;
            let flat = cfg.optimizer.gradient_tolerance * b.norm_sq();
            let newton = match &hessian {
                Some((hm, _)) if grad.iter().any(|v| v.abs() > flat) => newton_step(hm, &grad),
                _ => None,
            };
            if let Some((step, decrease)) = newton {
                let modes = slow_modes(&g.phi);
                let trial = along(&g, &modes, &step.iter().map(|v| scale * v).collect::<Vec<_>>());
                if trial.validate().is_ok() {
                    let (c_t, f_t) = volume_step(projector, b, &trial, &c_prev, f64::INFINITY, &cfg.inner_solver)?;
                    // Parabola through both re-solved costs with the predicted slope.
                    let curvature = 2.0 * (f_t - cost + scale * decrease) / (scale * scale);
                    let best = if curvature > 0.0 { decrease / curvature } else { 4.0 * scale };
                    scale = best.clamp(0.25 * scale, 4.0 * scale).clamp(1.0 / 16.0, 16.0);
                    if f_t < cost {
                        log::debug!("slow-mode step accepted: {cost:.6e} -> {f_t:.6e}");
                        (c, g, cost) = (c_t, trial, f_t);
                        stage = Stage::SlowModes;
                    } else {
                        log::debug!("slow-mode step rejected: {f_t:.6e} >= {cost:.6e}");
                    }
                }
            }
        }
        timings.volume_seconds += t0.elapsed().as_secs_f64();
        costs.push(CostRecord { outer, stage, cost });

        let t0 = Instant::now();
        let update = update_params(projector, &c, &g, b, cfg)?;
        timings.geometry_seconds += t0.elapsed().as_secs_f64();
        failures += usize::from(update.line_search_failed);
        g = update.geometry;
        cost = update.cost_after;
        costs.push(CostRecord {
            outer,
            stage: Stage::Geometry,
            cost,
        });
        let (d_angle, d_shift) = max_change(&g, &g_start, pixel);
        trajectory.push(Snapshot {
            outer,
            psi1: g.psi1,
            psi2: g.psi2,
            shift: mean_shift(&g).map(|t| t / pixel),
            max_angle_change: d_angle,
            max_shift_change: d_shift,
        });
        log::info!(
            "outer {outer:3}: cost {cost:.6e}, psi1 {:.4} deg, psi2 {:.4} deg, max change {:.2e} rad / {:.2e} px",
            g.psi1.to_degrees(),
            g.psi2.to_degrees(),
            d_angle,
            d_shift
        );
        if d_angle < cfg.angle_tolerance && d_shift < cfg.shift_tolerance {
            converged = true;
            break;
        }
    }

    let t0 = Instant::now();
    (c, cost) = volume_step(projector, b, &g, &c, cost, &cfg.final_solver)?;
    timings.volume_seconds += t0.elapsed().as_secs_f64();
    costs.push(CostRecord {
        outer,
        stage: Stage::Final,
        cost,
    });
    timings.total_seconds = started.elapsed().as_secs_f64();

    Ok(CalibrationReport {
        costs,
        trajectory,
        geometry: g,
        volume: c,
        outer_iterations: outer,
        converged,
        line_search_failures: failures,
        timings,
    })
}

/// Block-mean pooling of every projection by `factor` along both axes.
///
/// The pooled detector keeps its world-space centre; its pixel spacing grows
/// by `factor`.
pub fn downsample(b: &ProjectionStack, factor: usize) -> Result<ProjectionStack> {
    let [cols, rows] = b.detector.dims;
    if factor == 0 || cols % factor != 0 || rows % factor != 0 {
        return Err(Error::InvalidParameter(format!(
            "factor {factor} does not divide the {cols}x{rows} detector"
        )));
    }
    if factor == 1 {
        return Ok(b.clone());
    }
    let det = DetectorGrid::new(
        [cols / factor, rows / factor],
        b.detector.spacing * factor as f64,
    )?;
    let mut out = ProjectionStack::zeros(det, b.count);
    let scale = 1.0 / (factor * factor) as f64;
    for i in 0..b.count {
        let src = b.projection(i);
        let dst = out.projection_mut(i);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let target = &mut dst[(r / factor) * det.cols()..(r / factor + 1) * det.cols()];
            for (j, v) in row.iter().enumerate() {
                target[j / factor] += v * scale;
            }
        }
    }
    out.geometry = b.geometry.clone();
    Ok(out)
}

/// Output of the coarse-to-fine workflow.
#[derive(Debug, Clone)]
pub struct MultiscaleResult {
    /// Calibrated geometry (world units, valid at both scales).
    pub geometry: GeometryParams,
    /// Fine-scale reconstruction with the calibrated geometry.
    pub volume: Volume,
    pub report: CalibrationReport,
    pub factor: usize,
}

/// Coarse grid covering the same extent as `fine`.
pub fn coarse_volume_grid(fine: &VolumeGrid, factor: usize) -> Result<VolumeGrid> {
    VolumeGrid::new(
        fine.dims.map(|n| n.div_ceil(factor)),
        fine.spacing * factor as f64,
    )
}

/// Pools the data, calibrates at the coarse scale and reconstructs at full
/// resolution with the calibrated geometry.
pub fn run_multiscale(
    fine: &Projector,
    b_fine: &ProjectionStack,
    g_init: &GeometryParams,
    cfg: &CalibConfig,
) -> Result<MultiscaleResult> {
    cfg.validate()?;
    let factor = cfg.coarse_factor(&b_fine.detector)?;
    if factor == 1 {
        let report = calibrate(fine, b_fine, g_init, cfg)?;
        return Ok(MultiscaleResult {
            geometry: report.geometry.clone(),
            volume: report.volume.clone(),
            report,
            factor,
        });
    }
    let b = downsample(b_fine, factor)?;
    let blob = fine.blob().params();
    let coarse = Projector::new(
        coarse_volume_grid(&fine.volume_grid(), factor)?,
        b.detector,
        BlobProfile::new(BlobParams {
            radius: blob.radius * factor as f64,
            ..blob
        })?,
    );
    let report = calibrate(&coarse, &b, g_init, cfg)?;
    // Shifts are held in world units, so the fine-scale geometry is the
    // coarse one unchanged; in pixels it is the coarse value times `factor`.
    let geometry = report.geometry.clone();
    let volume = solve_volume(fine, b_fine, &geometry, None, &cfg.final_solver)?.volume;
    Ok(MultiscaleResult {
        geometry,
        volume,
        report,
        factor,
    })
}

/// RMS angle error after removing the best common offset.
pub fn gauge_free_angle_error(estimate: &[f64], truth: &[f64]) -> f64 {
    let n = estimate.len().min(truth.len());
    if n == 0 {
        return 0.0;
    }
    let diff: Vec<f64> = estimate.iter().zip(truth).map(|(a, b)| a - b).collect();
    let mean = diff.iter().sum::<f64>() / n as f64;
    (diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
}

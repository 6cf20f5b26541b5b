//! Sampling-based receding-horizon planner over the calibrated pipeline.
//!
//! Each planning cycle perturbs a nominal control sequence with Gaussian
//! noise, rolls every candidate forward by chaining calibrated one-step
//! predictions (the calibrated Gaussian of step h is the model input of step
//! h+1), scores the rollouts with
//!
//! ```text
//! J = c_dist_term * d(mu_H)
//!   + sum_{h=1}^{H-1} [ c_dist_run * d(mu_h) + c_trace_run * tr(Sigma_h) ]
//!   + c_col * #{ h in 1..=H : region_h touches the unsafe set },
//! ```
//!
//! and exponentially reweights: w_i ∝ exp(-(J_i - min J) / lambda). A step is
//! unsafe when the position-plane shadow of its prediction region touches an
//! Occupied cell of the built map — or an unobserved one when
//! `require_viewed` is set, which also covers anything beyond the map's
//! bounds, since off-map territory can never be observed — and an
//! uncertifiable step (xi = +inf, unbounded region) always counts as unsafe.
//!
//! Footprint encodings during rollouts are memoized per planning cycle on a
//! quantized key (built-map cell of the mean position, heading bucket of
//! 2*pi/64); the memoized value depends only on the key, so results are
//! independent of evaluation order and thread count.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use crate::conformal::{calibrated_predict_with_input, process_input, CalibratedPipeline, Variant};
use crate::dynamics::{step_true, DynamicsParams};
use crate::error::{Error, Result};
use crate::math::{
    ellipse_position_projection, ActionVec, Gaussian4, RngStream, StateVec,
};
use crate::sensor::{heading_from_velocity, sense, synthetic_footprint, SensorParams};
use crate::world::{ellipse_intersects_class, update_map, GridMap, SemanticClass, VoteMap};

const HEADING_BUCKETS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub n_samples: usize,
    pub lambda: f64,
    /// Isotropic control-noise standard deviation per axis (the reference
    /// setup uses the identity covariance, i.e. 1.0).
    pub noise_sd: f64,
    pub c_dist_run: f64,
    pub c_dist_term: f64,
    pub c_trace_run: f64,
    pub c_col: f64,
    pub max_steps: usize,
    /// Count never-observed cells as unsafe, not just Occupied ones.
    pub require_viewed: bool,
    pub seed: u64,
    /// Cell size of the online built map, metres.
    pub built_cell_size: f64,
    /// Radius around the executed position whose free cells count as
    /// observed by contact. A forward-facing sensor never sees the ground the
    /// robot stands on; without this, every plan from a standstill start
    /// overlaps unviewed cells and the safety penalty stops discriminating.
    pub contact_radius: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            horizon: 9,
            n_samples: 2048,
            lambda: 0.25,
            noise_sd: 1.0,
            c_dist_run: 0.8,
            c_dist_term: 1.0,
            c_trace_run: 1.5,
            c_col: 1000.0,
            max_steps: 700,
            require_viewed: true,
            seed: 0,
            built_cell_size: 0.01,
            contact_radius: 0.05,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Config("planner horizon must be >= 1".to_string()));
        }
        if self.n_samples < 1 {
            return Err(Error::Config("n_samples must be >= 1".to_string()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.noise_sd > 0.0) {
            return Err(Error::Config(format!(
                "noise_sd must be positive, got {}",
                self.noise_sd
            )));
        }
        if !(self.built_cell_size > 0.0) {
            return Err(Error::Config(format!(
                "built_cell_size must be positive, got {}",
                self.built_cell_size
            )));
        }
        if !(self.contact_radius >= 0.0) || !self.contact_radius.is_finite() {
            return Err(Error::Config(format!(
                "contact_radius must be finite and non-negative, got {}",
                self.contact_radius
            )));
        }
        for (name, c) in [
            ("c_dist_run", self.c_dist_run),
            ("c_dist_term", self.c_dist_term),
            ("c_trace_run", self.c_trace_run),
            ("c_col", self.c_col),
        ] {
            if !c.is_finite() || c < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {c}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Subgoal {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Subgoal {
    pub fn contains(&self, p: &[f64; 2]) -> bool {
        (p[0] - self.center[0]).hypot(p[1] - self.center[1]) <= self.radius
    }

    /// Distance-to-goal cost term: how far outside the disc a point sits.
    pub fn excess_distance(&self, p: &[f64; 2]) -> f64 {
        ((p[0] - self.center[0]).hypot(p[1] - self.center[1]) - self.radius).max(0.0)
    }
}

/// Everything a planning cycle reads but does not own.
pub struct PlanEnv<'a> {
    pub pipe: &'a CalibratedPipeline,
    pub built: &'a GridMap,
    pub sensor: &'a SensorParams,
    pub dyn_params: &'a DynamicsParams,
    pub cfg: &'a PlannerConfig,
    pub subgoal: Subgoal,
}

impl PlanEnv<'_> {
    fn unsafe_classes(&self) -> &'static [SemanticClass] {
        if self.cfg.require_viewed {
            &[SemanticClass::Occupied, SemanticClass::Unknown]
        } else {
            &[SemanticClass::Occupied]
        }
    }
}

/// Memo of footprint encodings for one planning cycle (one built-map state).
/// Keyed by built-map cell and heading bucket; the stored value is computed
/// at the cell center and bucket-center heading, so it is a pure function of
/// the key.
pub struct EncodeCache {
    table: Mutex<HashMap<(usize, usize, usize), Arc<Vec<f64>>>>,
}

impl EncodeCache {
    pub fn new() -> Self {
        EncodeCache {
            table: Mutex::new(HashMap::new()),
        }
    }

    fn key(built: &GridMap, p: &[f64; 2], heading: f64) -> (usize, usize, usize) {
        let clamp_axis = |w: usize, x: f64, o: f64, cell: f64| -> usize {
            let i = ((x - o) / cell).floor();
            if i < 0.0 {
                0
            } else if i >= w as f64 {
                w - 1
            } else {
                i as usize
            }
        };
        let ix = clamp_axis(built.width, p[0], built.origin[0], built.cell_size);
        let iy = clamp_axis(built.height, p[1], built.origin[1], built.cell_size);
        let tau = std::f64::consts::TAU;
        let frac = heading.rem_euclid(tau) / tau;
        let bucket = ((frac * HEADING_BUCKETS as f64) as usize).min(HEADING_BUCKETS - 1);
        (ix, iy, bucket)
    }

    fn phi(
        &self,
        pipe: &CalibratedPipeline,
        built: &GridMap,
        sensor: &SensorParams,
        p: &[f64; 2],
        heading: f64,
    ) -> Result<Arc<Vec<f64>>> {
        let key = Self::key(built, p, heading);
        if let Some(hit) = self.table.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let enc = pipe.encoder.as_ref().ok_or_else(|| {
            Error::Config("the ocular variant needs a trained encoder".to_string())
        })?;
        let rep_pose = built.cell_center(key.0, key.1);
        let rep_heading =
            (key.2 as f64 + 0.5) * std::f64::consts::TAU / HEADING_BUCKETS as f64;
        let fp = synthetic_footprint(built, &rep_pose, rep_heading, sensor);
        let phi = Arc::new(enc.encode(&fp)?);
        let mut table = self.table.lock().unwrap();
        Ok(table.entry(key).or_insert(phi).clone())
    }
}

impl Default for EncodeCache {
    fn default() -> Self {
        Self::new()
    }
}

/// One planned step: the chained calibrated Gaussian and its cost inputs.
#[derive(Debug, Clone)]
pub struct RolloutStep {
    pub gaussian: Gaussian4,
    pub leaf_id: usize,
    pub xi: f64,
    pub trace_cov: f64,
    pub goal_dist: f64,
    pub colliding: bool,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub steps: Vec<RolloutStep>,
}

fn trace4(cov: &[[f64; 4]; 4]) -> f64 {
    cov[0][0] + cov[1][1] + cov[2][2] + cov[3][3]
}

/// Does the shadow reach beyond the map's rectangle? The axis-aligned extent
/// of a bounded ellipse along axis i is sqrt(shape[i][i]).
fn shadow_escapes_map(map: &GridMap, shadow: &crate::math::PositionShadow) -> bool {
    use crate::math::PositionShadow;
    match shadow {
        PositionShadow::Unbounded => true,
        PositionShadow::Bounded { center, shape } => {
            let rx = shape[0][0].max(0.0).sqrt();
            let ry = shape[1][1].max(0.0).sqrt();
            let hi = [
                map.origin[0] + map.width as f64 * map.cell_size,
                map.origin[1] + map.height as f64 * map.cell_size,
            ];
            center[0] - rx < map.origin[0]
                || center[0] + rx > hi[0]
                || center[1] - ry < map.origin[1]
                || center[1] + ry > hi[1]
        }
    }
}

/// Chain calibrated predictions along a control sequence, flagging every step
/// whose prediction region touches the unsafe set of the built map. An
/// unbounded region (xi = +inf) is always flagged; its Gaussian is chained
/// without scaling.
pub fn rollout_plan(
    env: &PlanEnv,
    cache: &EncodeCache,
    g0: &Gaussian4,
    heading0: f64,
    controls: &[ActionVec],
) -> Result<Rollout> {
    let targets = env.unsafe_classes();
    let variant = env.pipe.spec.variant;
    let mut g = g0.clone();
    let mut heading = heading0;
    let mut steps = Vec::with_capacity(controls.len());
    for u in controls {
        heading = heading_from_velocity(&g.mean.velocity(), heading);
        let x = if variant == Variant::Ocular {
            let phi = cache.phi(env.pipe, env.built, env.sensor, &g.mean.position(), heading)?;
            let v = g.mean.velocity();
            let a = u.to_array();
            let mut x = Vec::with_capacity(4 + phi.len());
            x.extend_from_slice(&[v[0], v[1], a[0], a[1]]);
            x.extend_from_slice(&phi);
            x
        } else {
            process_input(
                variant,
                &g.mean.position(),
                &g.mean.velocity(),
                &u.to_array(),
                None,
                None,
            )?
        };
        let pred = calibrated_predict_with_input(env.pipe, &g, u, &x, env.dyn_params);
        let shadow = ellipse_position_projection(&pred.region);
        let colliding = ellipse_intersects_class(env.built, &shadow, targets)?
            || (env.cfg.require_viewed && shadow_escapes_map(env.built, &shadow));
        let pos = pred.calibrated.mean.position();
        steps.push(RolloutStep {
            gaussian: pred.calibrated.clone(),
            leaf_id: pred.leaf_id,
            xi: pred.xi,
            trace_cov: trace4(&pred.calibrated.cov),
            goal_dist: env.subgoal.excess_distance(&pos),
            colliding,
        });
        g = pred.calibrated;
    }
    Ok(Rollout { steps })
}

/// Cost of a rollout: terminal distance, running distance and trace over the
/// first H-1 planned steps, and the collision penalty for every one of the H
/// steps whose region touches the unsafe set.
pub fn mppi_cost(rollout: &Rollout, cfg: &PlannerConfig) -> f64 {
    let steps = &rollout.steps;
    let Some(last) = steps.last() else { return 0.0 };
    let mut cost = cfg.c_dist_term * last.goal_dist;
    for s in &steps[..steps.len() - 1] {
        cost += cfg.c_dist_run * s.goal_dist + cfg.c_trace_run * s.trace_cov;
    }
    for s in steps.iter() {
        if s.colliding {
            cost += cfg.c_col;
        }
    }
    cost
}

/// Exponential weighting of rollout costs relative to the best one; the
/// weights sum to one.
pub fn mppi_weights(costs: &[f64], lambda: f64) -> Vec<f64> {
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = costs.iter().map(|c| (-(c - min) / lambda).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

/// One MPPI planning cycle. Returns the action to execute now, the
/// time-shifted nominal sequence for the next cycle (last entry repeated),
/// and the rollout of the updated (unshifted) sequence for tracing.
pub fn mppi_step(
    env: &PlanEnv,
    g0: &Gaussian4,
    heading0: f64,
    nominal: &[ActionVec],
    rng: &mut RngStream,
) -> Result<(ActionVec, Vec<ActionVec>, Rollout)> {
    let cfg = env.cfg;
    cfg.validate()?;
    if nominal.len() != cfg.horizon {
        return Err(Error::Config(format!(
            "nominal sequence has {} actions, horizon is {}",
            nominal.len(),
            cfg.horizon
        )));
    }
    let cache = EncodeCache::new();
    let a_max = env.dyn_params.a_max;

    // All noise is drawn up front from the caller's stream so scheduling
    // cannot reorder it.
    let eps: Vec<Vec<[f64; 2]>> = (0..cfg.n_samples)
        .map(|_| {
            (0..cfg.horizon)
                .map(|_| {
                    let (a, b) = rng.next_normal_pair();
                    [cfg.noise_sd * a, cfg.noise_sd * b]
                })
                .collect()
        })
        .collect();

    let costs: Vec<f64> = eps
        .par_iter()
        .map(|e| {
            let controls: Vec<ActionVec> = (0..cfg.horizon)
                .map(|h| {
                    let n = nominal[h].to_array();
                    ActionVec::new(n[0] + e[h][0], n[1] + e[h][1]).clamp(a_max)
                })
                .collect();
            let rollout = rollout_plan(env, &cache, g0, heading0, &controls)?;
            Ok(mppi_cost(&rollout, cfg))
        })
        .collect::<Result<Vec<_>>>()?;

    let weights = mppi_weights(&costs, cfg.lambda);
    let mut updated = vec![[0.0f64; 2]; cfg.horizon];
    for (i, e) in eps.iter().enumerate() {
        let w = weights[i];
        for h in 0..cfg.horizon {
            let n = nominal[h].to_array();
            updated[h][0] += w * (n[0] + e[h][0]);
            updated[h][1] += w * (n[1] + e[h][1]);
        }
    }
    let updated: Vec<ActionVec> = updated
        .into_iter()
        .map(|u| ActionVec::new(u[0], u[1]).clamp(a_max))
        .collect();

    let rollout = rollout_plan(env, &cache, g0, heading0, &updated)?;
    let first = updated[0];
    let mut shifted: Vec<ActionVec> = updated[1..].to_vec();
    shifted.push(*updated.last().expect("horizon >= 1"));
    Ok((first, shifted, rollout))
}

/// Mark the cells the robot is physically standing on as observed: presence
/// certifies them, terrain mode included (the executed dynamics reveal it),
/// even though the forward sensor cone never sweeps them. Cells whose true
/// class is not free are left alone — the robot's footprint certifies only
/// ground it actually occupies.
fn mark_contact(built: &mut GridMap, truth: &GridMap, p: &[f64; 2], radius: f64) {
    if radius <= 0.0 {
        return;
    }
    let lo_x = ((p[0] - radius - built.origin[0]) / built.cell_size).floor();
    let hi_x = ((p[0] + radius - built.origin[0]) / built.cell_size).floor();
    let lo_y = ((p[1] - radius - built.origin[1]) / built.cell_size).floor();
    let hi_y = ((p[1] + radius - built.origin[1]) / built.cell_size).floor();
    if hi_x < 0.0 || hi_y < 0.0 || lo_x > built.width as f64 - 1.0 || lo_y > built.height as f64 - 1.0
    {
        return;
    }
    let lo_ix = lo_x.max(0.0) as usize;
    let hi_ix = (hi_x.min(built.width as f64 - 1.0)).max(0.0) as usize;
    let lo_iy = lo_y.max(0.0) as usize;
    let hi_iy = (hi_y.min(built.height as f64 - 1.0)).max(0.0) as usize;
    for iy in lo_iy..=hi_iy {
        for ix in lo_ix..=hi_ix {
            let c = built.cell_center(ix, iy);
            if (c[0] - p[0]).hypot(c[1] - p[1]) <= radius {
                let class = truth.class_at(&c);
                if class.is_free() {
                    built.set(ix, iy, class);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Collision,
    Timeout,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Collision => "collision",
            Outcome::Timeout => "timeout",
        }
    }
}

/// One executed step of a closed-loop episode: the true state the action was
/// taken from, the action, and the routing of the first planned step.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub step: usize,
    pub state: StateVec,
    pub action: ActionVec,
    pub leaf_id: usize,
    pub xi: f64,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub outcome: Outcome,
    pub steps: usize,
    pub trace: Vec<TraceStep>,
}

/// Closed-loop execution: sense, fuse into the built map, plan, act with the
/// true (terrain-dependent) dynamics. Subgoals advance when the true position
/// enters their disc; the outcome is Collision the moment the true position
/// lies in an Occupied cell of the ground-truth map, Timeout after
/// `max_steps` planning cycles, Success once the last subgoal is reached.
pub fn run_episode(
    truth: &GridMap,
    start: &StateVec,
    subgoals: &[Subgoal],
    pipe: &CalibratedPipeline,
    sensor: &SensorParams,
    dyn_params: &DynamicsParams,
    cfg: &PlannerConfig,
) -> Result<Episode> {
    cfg.validate()?;
    sensor.validate()?;
    if subgoals.is_empty() {
        return Err(Error::Config(
            "an episode needs at least one subgoal".to_string(),
        ));
    }
    let mut built = GridMap::unknown_covering(truth, cfg.built_cell_size);
    let mut votes = VoteMap::new(built.width, built.height);
    let mut state = *start;
    let mut exec_heading = heading_from_velocity(&state.velocity(), 0.0);
    let mut nominal = vec![ActionVec::zero(); cfg.horizon];
    let mut rng_plan = RngStream::substream(cfg.seed, 0);
    let mut rng_world = RngStream::substream(cfg.seed, 1);
    let mut goal_idx = 0usize;
    let mut trace = Vec::new();

    for t in 0..=cfg.max_steps {
        let pos = state.position();
        if truth.class_at(&pos) == SemanticClass::Occupied {
            return Ok(Episode {
                outcome: Outcome::Collision,
                steps: t,
                trace,
            });
        }
        while goal_idx < subgoals.len() && subgoals[goal_idx].contains(&pos) {
            goal_idx += 1;
        }
        if goal_idx == subgoals.len() {
            return Ok(Episode {
                outcome: Outcome::Success,
                steps: t,
                trace,
            });
        }
        if t == cfg.max_steps {
            break;
        }

        exec_heading = heading_from_velocity(&state.velocity(), exec_heading);
        let fp = sense(truth, &pos, exec_heading, sensor);
        update_map(&mut built, &mut votes, &fp, &pos, exec_heading, sensor);
        mark_contact(&mut built, truth, &pos, cfg.contact_radius);

        let env = PlanEnv {
            pipe,
            built: &built,
            sensor,
            dyn_params,
            cfg,
            subgoal: subgoals[goal_idx],
        };
        let (action, next_nominal, rollout) = mppi_step(
            &env,
            &Gaussian4::point(state),
            exec_heading,
            &nominal,
            &mut rng_plan,
        )?;
        let (leaf_id, xi) = rollout
            .steps
            .first()
            .map(|s| (s.leaf_id, s.xi))
            .unwrap_or((0, 1.0));
        trace.push(TraceStep {
            step: t,
            state,
            action,
            leaf_id,
            xi,
        });

        let region = truth.region_type_at(&pos);
        state = step_true(&state, &action, region, dyn_params, &mut rng_world);
        nominal = next_nominal;
    }

    Ok(Episode {
        outcome: Outcome::Timeout,
        steps: cfg.max_steps,
        trace,
    })
}

/// Write the per-step trace as CSV. The outcome is repeated on every row so
/// each line is self-describing.
pub fn write_trace_csv(w: &mut impl std::io::Write, episode: &Episode) -> Result<()> {
    writeln!(w, "step,px,py,vx,vy,ax,ay,leaf_id,xi,outcome")?;
    for s in &episode.trace {
        let st = s.state.to_array();
        let a = s.action.to_array();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            s.step,
            st[0],
            st[1],
            st[2],
            st[3],
            a[0],
            a[1],
            s.leaf_id,
            s.xi,
            episode.outcome.as_str()
        )?;
    }
    Ok(())
}

/// A parsed episode spec file: map and bundle paths, the start state, the
/// ordered subgoals, and a planner config with any overrides applied.
#[derive(Debug, Clone)]
pub struct EpisodeFile {
    pub map_path: PathBuf,
    pub start: StateVec,
    pub subgoals: Vec<Subgoal>,
    pub bundle_path: Option<PathBuf>,
    pub cfg: PlannerConfig,
}

fn parse_floats(value: &str, n: usize, key: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != n {
        return Err(Error::Config(format!(
            "{key} expects {n} comma-separated numbers, got '{value}'"
        )));
    }
    parts
        .iter()
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number '{p}' in {key}")))
        })
        .collect()
}

/// Apply one `planner.*` override onto a config. Shared with the CLI so the
/// run-config file and episode specs accept the same keys.
pub fn apply_planner_override(cfg: &mut PlannerConfig, key: &str, value: &str) -> Result<()> {
    let bad = |what: &str| Error::Config(format!("bad {what} value '{value}'"));
    match key {
        "planner.horizon" => cfg.horizon = value.parse().map_err(|_| bad(key))?,
        "planner.n_samples" => cfg.n_samples = value.parse().map_err(|_| bad(key))?,
        "planner.lambda" => cfg.lambda = value.parse().map_err(|_| bad(key))?,
        "planner.noise_sd" => cfg.noise_sd = value.parse().map_err(|_| bad(key))?,
        "planner.c_dist_run" => cfg.c_dist_run = value.parse().map_err(|_| bad(key))?,
        "planner.c_dist_term" => cfg.c_dist_term = value.parse().map_err(|_| bad(key))?,
        "planner.c_trace_run" => cfg.c_trace_run = value.parse().map_err(|_| bad(key))?,
        "planner.c_col" => cfg.c_col = value.parse().map_err(|_| bad(key))?,
        "planner.max_steps" => cfg.max_steps = value.parse().map_err(|_| bad(key))?,
        "planner.require_viewed" => {
            cfg.require_viewed = match value {
                "true" => true,
                "false" => false,
                _ => return Err(bad(key)),
            }
        }
        "planner.seed" => cfg.seed = value.parse().map_err(|_| bad(key))?,
        "planner.built_cell_size" => cfg.built_cell_size = value.parse().map_err(|_| bad(key))?,
        "planner.contact_radius" => cfg.contact_radius = value.parse().map_err(|_| bad(key))?,
        other => {
            return Err(Error::Config(format!(
                "unknown planner key '{other}'"
            )))
        }
    }
    Ok(())
}

/// Parse an episode spec: `map=`, `start=px,py,vx,vy`, repeated
/// `subgoal=cx,cy,radius` lines in visit order, optional `bundle=`, and
/// optional `planner.*` overrides on top of `base`.
pub fn parse_episode_spec(text: &str, base: &PlannerConfig) -> Result<EpisodeFile> {
    let mut map_path = None;
    let mut start = None;
    let mut subgoals = Vec::new();
    let mut bundle_path = None;
    let mut cfg = *base;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
        match key {
            "map" => map_path = Some(PathBuf::from(value)),
            "bundle" => bundle_path = Some(PathBuf::from(value)),
            "start" => {
                let f = parse_floats(value, 4, "start")?;
                start = Some(StateVec::new(f[0], f[1], f[2], f[3]));
            }
            "subgoal" => {
                let f = parse_floats(value, 3, "subgoal")?;
                if !(f[2] > 0.0) {
                    return Err(Error::Config(format!(
                        "subgoal radius must be positive, got {}",
                        f[2]
                    )));
                }
                subgoals.push(Subgoal {
                    center: [f[0], f[1]],
                    radius: f[2],
                });
            }
            k if k.starts_with("planner.") => apply_planner_override(&mut cfg, k, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown episode key '{other}'"
                )))
            }
        }
    }
    let map_path =
        map_path.ok_or_else(|| Error::Config("episode spec is missing 'map'".to_string()))?;
    let start =
        start.ok_or_else(|| Error::Config("episode spec is missing 'start'".to_string()))?;
    if subgoals.is_empty() {
        return Err(Error::Config(
            "episode spec needs at least one subgoal".to_string(),
        ));
    }
    cfg.validate()?;
    Ok(EpisodeFile {
        map_path,
        start,
        subgoals,
        bundle_path,
        cfg,
    })
}

pub fn load_episode_spec(path: &Path, base: &PlannerConfig) -> Result<EpisodeFile> {
    parse_episode_spec(&std::fs::read_to_string(path)?, base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{calibrate, PipelineSpec};
    use crate::dynamics::{exact_onestep_distribution, step_model, RegionType};
    use crate::math::region_of;
    use crate::tree::{RegressionTree, TreeConfig};

    fn nocp_pipe() -> CalibratedPipeline {
        calibrate(
            &PipelineSpec::new(Variant::NoCp),
            &[],
            &[],
            None,
            &TreeConfig::default(),
            &DynamicsParams::default(),
        )
        .unwrap()
    }

    fn pipe_with_xi(xi: f64) -> CalibratedPipeline {
        let mut pipe = nocp_pipe();
        pipe.tree = RegressionTree::single_leaf(100, xi * pipe.chi2_ref, xi);
        pipe
    }

    fn open_map(n: usize, cell: f64) -> GridMap {
        GridMap::filled(n, n, cell, [0.0, 0.0], SemanticClass::FreeNominal)
    }

    fn small_sensor() -> SensorParams {
        SensorParams {
            n_angles: 32,
            n_depths: 16,
            max_range: 0.3,
            ..SensorParams::default()
        }
    }

    /// Full-strength noise and horizon (weak perturbations give MPPI too
    /// little cost contrast to steer), fewer samples for test speed.
    fn fast_cfg() -> PlannerConfig {
        PlannerConfig {
            n_samples: 256,
            built_cell_size: 0.02,
            ..PlannerConfig::default()
        }
    }

    fn fresh_built(truth: &GridMap, cell: f64) -> GridMap {
        GridMap::unknown_covering(truth, cell)
    }

    fn known_built(truth: &GridMap) -> GridMap {
        // A built map that already equals the truth, for rollout tests that
        // should not be confounded by unexplored cells.
        truth.clone()
    }

    #[test]
    fn weights_sum_to_one_and_follow_the_best_sample() {
        for costs in [
            vec![3.0, 3.0, 3.0, 3.0],
            vec![0.0, 1e6, 2e6],
            vec![14.8, 15.0, 1014.8, 17.2, 14.9],
        ] {
            let w = mppi_weights(&costs, 0.25);
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
        }
        let w = mppi_weights(&[3.0, 3.0, 3.0, 3.0], 0.25);
        for wi in &w {
            assert!((wi - 0.25).abs() < 1e-15);
        }
        let w = mppi_weights(&[0.0, 1e6, 2e6], 0.25);
        assert!(w[0] > 1.0 - 1e-9);
    }

    #[test]
    fn cost_arithmetic_matches_hand_sums() {
        let cfg = PlannerConfig::default();
        let g = Gaussian4::point(StateVec::new(0.0, 0.0, 0.0, 0.0));
        let make = |dist: f64, trace: f64, colliding: bool| RolloutStep {
            gaussian: g.clone(),
            leaf_id: 0,
            xi: 1.0,
            trace_cov: trace,
            goal_dist: dist,
            colliding,
        };

        // Stationary two metres from the goal, nine steps, tiny traces.
        let traces = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
        let rollout = Rollout {
            steps: traces.iter().map(|&t| make(2.0, t, false)).collect(),
        };
        // Running distance appears H-1 times, terminal once; the terminal
        // trace is not charged.
        let expect = 0.8 * 2.0 * 8.0 + 1.0 * 2.0 + 1.5 * traces[..8].iter().sum::<f64>();
        assert!((mppi_cost(&rollout, &cfg) - expect).abs() < 1e-12);

        // At the goal with zero covariance: free.
        let rollout = Rollout {
            steps: (0..9).map(|_| make(0.0, 0.0, false)).collect(),
        };
        assert_eq!(mppi_cost(&rollout, &cfg), 0.0);

        // A single colliding step adds exactly c_col, wherever it sits —
        // including the terminal step.
        for hit in [0, 4, 8] {
            let steps: Vec<_> = (0..9).map(|h| make(0.0, 0.0, h == hit)).collect();
            let rollout = Rollout { steps };
            assert_eq!(mppi_cost(&rollout, &cfg), 1000.0);
        }
    }

    #[test]
    fn rollout_with_unit_xi_is_exactly_chained_step_model() {
        let params = DynamicsParams::default();
        let truth = open_map(40, 0.05);
        let built = known_built(&truth);
        let pipe = nocp_pipe();
        let cfg = PlannerConfig::default();
        let env = PlanEnv {
            pipe: &pipe,
            built: &built,
            sensor: &small_sensor(),
            dyn_params: &params,
            cfg: &cfg,
            subgoal: Subgoal {
                center: [1.5, 1.5],
                radius: 0.1,
            },
        };
        let g0 = Gaussian4::point(StateVec::new(1.0, 1.0, 0.15, -0.1));
        let controls = [ActionVec::new(0.2, 0.1), ActionVec::new(-0.3, 0.0)];
        let rollout = rollout_plan(&env, &EncodeCache::new(), &g0, 0.0, &controls).unwrap();

        let g1 = step_model(&g0, &controls[0], &params);
        let g2 = step_model(&g1, &controls[1], &params);
        for (got, want) in rollout.steps.iter().zip([&g1, &g2]) {
            let (gm, wm) = (got.gaussian.mean.to_array(), want.mean.to_array());
            for k in 0..4 {
                assert_eq!(gm[k].to_bits(), wm[k].to_bits());
            }
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(
                        got.gaussian.cov[i][j].to_bits(),
                        want.cov[i][j].to_bits()
                    );
                }
            }
            assert!(!got.colliding);
        }
    }

    #[test]
    fn infinite_xi_marks_the_step_colliding_but_chains_unscaled() {
        let params = DynamicsParams::default();
        let truth = open_map(40, 0.05);
        let built = known_built(&truth);
        let pipe = pipe_with_xi(f64::INFINITY);
        let cfg = PlannerConfig::default();
        let env = PlanEnv {
            pipe: &pipe,
            built: &built,
            sensor: &small_sensor(),
            dyn_params: &params,
            cfg: &cfg,
            subgoal: Subgoal {
                center: [1.5, 1.5],
                radius: 0.1,
            },
        };
        let g0 = Gaussian4::point(StateVec::new(1.0, 1.0, 0.0, 0.0));
        let controls = [ActionVec::zero(), ActionVec::zero()];
        let rollout = rollout_plan(&env, &EncodeCache::new(), &g0, 0.0, &controls).unwrap();
        assert!(rollout.steps.iter().all(|s| s.colliding));
        let unscaled = step_model(&g0, &ActionVec::zero(), &params);
        assert_eq!(
            rollout.steps[0].gaussian.cov[0][0].to_bits(),
            unscaled.cov[0][0].to_bits()
        );
        assert!(mppi_cost(&rollout, &cfg) >= 2.0 * cfg.c_col);
    }

    #[test]
    fn inflating_xi_never_cheapens_a_rollout() {
        let params = DynamicsParams::default();
        let truth = open_map(40, 0.05);
        let built = known_built(&truth);
        let cfg = PlannerConfig::default();
        let controls: Vec<ActionVec> = (0..9).map(|_| ActionVec::new(0.5, 0.2)).collect();
        let g0 = Gaussian4::point(StateVec::new(0.6, 0.6, 0.8, 0.4));
        let mut prev = None;
        for xi in [0.5, 1.0, 4.0, 25.0, 400.0] {
            let pipe = pipe_with_xi(xi);
            let env = PlanEnv {
                pipe: &pipe,
                built: &built,
                sensor: &small_sensor(),
                dyn_params: &params,
                cfg: &cfg,
                subgoal: Subgoal {
                    center: [1.8, 1.8],
                    radius: 0.1,
                },
            };
            let rollout = rollout_plan(&env, &EncodeCache::new(), &g0, 0.0, &controls).unwrap();
            let cost = mppi_cost(&rollout, &cfg);
            if let Some(p) = prev {
                assert!(cost >= p, "xi {xi}: cost {cost} fell below {p}");
            }
            prev = Some(cost);
        }
    }

    #[test]
    fn equal_costs_leave_the_nominal_nearly_unchanged() {
        let params = DynamicsParams::default();
        let truth = open_map(40, 0.05);
        let built = known_built(&truth);
        let pipe = nocp_pipe();
        // Zero coefficients make every rollout cost identical (zero).
        let cfg = PlannerConfig {
            horizon: 4,
            n_samples: 4096,
            c_dist_run: 0.0,
            c_dist_term: 0.0,
            c_trace_run: 0.0,
            c_col: 0.0,
            ..PlannerConfig::default()
        };
        let env = PlanEnv {
            pipe: &pipe,
            built: &built,
            sensor: &small_sensor(),
            dyn_params: &params,
            cfg: &cfg,
            subgoal: Subgoal {
                center: [1.5, 1.5],
                radius: 0.1,
            },
        };
        let nominal = vec![ActionVec::new(0.3, -0.2); 4];
        let g0 = Gaussian4::point(StateVec::new(1.0, 1.0, 0.0, 0.0));
        let mut rng = RngStream::new(7);
        let (_, shifted, _) = mppi_step(&env, &g0, 0.0, &nominal, &mut rng).unwrap();
        // Mean perturbation is O(1/sqrt(n)); allow 4 sigma.
        let tol = 4.0 / (cfg.n_samples as f64).sqrt();
        for h in 0..3 {
            let s = shifted[h].to_array();
            let n = nominal[h + 1].to_array();
            assert!((s[0] - n[0]).abs() < tol, "h {h}: {} vs {}", s[0], n[0]);
            assert!((s[1] - n[1]).abs() < tol);
        }
    }

    #[test]
    fn fixed_seed_replans_identically() {
        let params = DynamicsParams::default();
        let truth = open_map(40, 0.05);
        let built = known_built(&truth);
        let pipe = nocp_pipe();
        let cfg = fast_cfg();
        let env = PlanEnv {
            pipe: &pipe,
            built: &built,
            sensor: &small_sensor(),
            dyn_params: &params,
            cfg: &cfg,
            subgoal: Subgoal {
                center: [1.6, 1.0],
                radius: 0.1,
            },
        };
        let g0 = Gaussian4::point(StateVec::new(0.4, 1.0, 0.0, 0.0));
        let nominal = vec![ActionVec::zero(); cfg.horizon];
        let run = |seed: u64| {
            let mut rng = RngStream::new(seed);
            mppi_step(&env, &g0, 0.0, &nominal, &mut rng).unwrap()
        };
        let (a1, n1, _) = run(11);
        let (a2, n2, _) = run(11);
        assert_eq!(a1.to_array().map(f64::to_bits), a2.to_array().map(f64::to_bits));
        for (x, y) in n1.iter().zip(&n2) {
            assert_eq!(x.to_array().map(f64::to_bits), y.to_array().map(f64::to_bits));
        }
        let (a3, _, _) = run(12);
        assert_ne!(
            a1.to_array().map(f64::to_bits),
            a3.to_array().map(f64::to_bits)
        );
    }

    #[test]
    fn start_inside_the_last_subgoal_succeeds_immediately() {
        let truth = open_map(30, 0.05);
        let pipe = nocp_pipe();
        let start = StateVec::new(0.75, 0.75, 0.0, 0.0);
        let subgoals = [Subgoal {
            center: [0.75, 0.75],
            radius: 0.2,
        }];
        let ep = run_episode(
            &truth,
            &start,
            &subgoals,
            &pipe,
            &small_sensor(),
            &DynamicsParams::default(),
            &fast_cfg(),
        )
        .unwrap();
        assert_eq!(ep.outcome, Outcome::Success);
        assert_eq!(ep.steps, 0);
        assert!(ep.trace.is_empty());
    }

    #[test]
    fn planner_reaches_a_nearby_goal_on_an_open_map() {
        let truth = open_map(50, 0.05);
        let pipe = nocp_pipe();
        let start = StateVec::new(0.6, 1.25, 0.0, 0.0);
        let subgoals = [Subgoal {
            center: [1.4, 1.25],
            radius: 0.15,
        }];
        let cfg = PlannerConfig {
            n_samples: 512,
            max_steps: 250,
            seed: 3,
            ..fast_cfg()
        };
        let ep = run_episode(
            &truth,
            &start,
            &subgoals,
            &pipe,
            &small_sensor(),
            &DynamicsParams::default(),
            &cfg,
        )
        .unwrap();
        assert_eq!(ep.outcome, Outcome::Success, "took {} steps", ep.steps);
        assert!(ep.steps > 0 && ep.steps < 250);
        assert_eq!(ep.trace.len(), ep.steps);
    }

    #[test]
    fn episode_reruns_bit_identically_per_seed() {
        let mut truth = open_map(50, 0.05);
        for iy in 18..32 {
            truth.set(30, iy, SemanticClass::Occupied);
        }
        let pipe = nocp_pipe();
        let start = StateVec::new(0.6, 1.25, 0.0, 0.0);
        let subgoals = [Subgoal {
            center: [1.3, 1.25],
            radius: 0.15,
        }];
        let cfg = PlannerConfig {
            max_steps: 60,
            seed: 5,
            ..fast_cfg()
        };
        let run = || {
            run_episode(
                &truth,
                &start,
                &subgoals,
                &pipe,
                &small_sensor(),
                &DynamicsParams::default(),
                &cfg,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.outcome, b.outcome);
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.trace.len(), b.trace.len());
        for (x, y) in a.trace.iter().zip(&b.trace) {
            assert_eq!(
                x.state.to_array().map(f64::to_bits),
                y.state.to_array().map(f64::to_bits)
            );
            assert_eq!(
                x.action.to_array().map(f64::to_bits),
                y.action.to_array().map(f64::to_bits)
            );
        }
    }

    #[test]
    fn certified_first_step_rarely_lands_in_a_wall() {
        // A state whose calibrated region clears the nearby wall: the true
        // next state must then avoid it at (well over) the nominal rate.
        let params = DynamicsParams::default();
        let mut truth = open_map(40, 0.05);
        for iy in 0..40 {
            truth.set(24, iy, SemanticClass::Occupied);
        }
        let built = known_built(&truth);
        let pipe = nocp_pipe();
        let cfg = PlannerConfig::default();
        let env = PlanEnv {
            pipe: &pipe,
            built: &built,
            sensor: &small_sensor(),
            dyn_params: &params,
            cfg: &cfg,
            subgoal: Subgoal {
                center: [0.5, 1.0],
                radius: 0.1,
            },
        };
        let state = StateVec::new(1.16, 1.0, 0.0, 0.0);
        let action = ActionVec::zero();
        let rollout = rollout_plan(
            &env,
            &EncodeCache::new(),
            &Gaussian4::point(state),
            0.0,
            &[action],
        )
        .unwrap();
        assert!(
            !rollout.steps[0].colliding,
            "setup broken: the region should clear the wall"
        );
        let mut rng = RngStream::new(900);
        let region = truth.region_type_at(&state.position());
        assert_eq!(region, RegionType::Nominal);
        let mut hits = 0;
        for _ in 0..2000 {
            let next = step_true(&state, &action, region, &params, &mut rng);
            if truth.class_at(&next.position()) == SemanticClass::Occupied {
                hits += 1;
            }
        }
        let freq = hits as f64 / 2000.0;
        assert!(freq <= 0.10 + 0.03, "unsafe frequency {freq}");
    }

    #[test]
    fn unexplored_cells_block_plans_only_when_require_viewed() {
        let params = DynamicsParams::default();
        let truth = open_map(40, 0.05);
        let built = fresh_built(&truth, 0.02);
        let pipe = nocp_pipe();
        let g0 = Gaussian4::point(StateVec::new(1.0, 1.0, 0.0, 0.0));
        let controls = [ActionVec::zero()];
        for (require_viewed, expect_colliding) in [(true, true), (false, false)] {
            let cfg = PlannerConfig {
                require_viewed,
                ..PlannerConfig::default()
            };
            let env = PlanEnv {
                pipe: &pipe,
                built: &built,
                sensor: &small_sensor(),
                dyn_params: &params,
                cfg: &cfg,
                subgoal: Subgoal {
                    center: [1.5, 1.5],
                    radius: 0.1,
                },
            };
            let rollout =
                rollout_plan(&env, &EncodeCache::new(), &g0, 0.0, &controls).unwrap();
            assert_eq!(rollout.steps[0].colliding, expect_colliding);
        }

        // Even with every in-bounds cell observed, a region poking past the
        // map's edge is unsafe under require_viewed: off-map territory can
        // never be observed.
        let built = known_built(&truth);
        let g_edge = Gaussian4::point(StateVec::new(0.005, 1.0, 0.0, 0.0));
        for (require_viewed, expect_colliding) in [(true, true), (false, false)] {
            let cfg = PlannerConfig {
                require_viewed,
                ..PlannerConfig::default()
            };
            let env = PlanEnv {
                pipe: &pipe,
                built: &built,
                sensor: &small_sensor(),
                dyn_params: &params,
                cfg: &cfg,
                subgoal: Subgoal {
                    center: [1.5, 1.5],
                    radius: 0.1,
                },
            };
            let rollout =
                rollout_plan(&env, &EncodeCache::new(), &g_edge, 0.0, &controls).unwrap();
            assert_eq!(rollout.steps[0].colliding, expect_colliding);
        }
    }

    #[test]
    fn episode_spec_files_parse_and_reject() {
        let base = PlannerConfig::default();
        let text = "\
# test episode
map=maps/u.map
start=0.3, 0.4, 0.0, 0.0
subgoal=1.0,1.2,0.15
subgoal=0.2,1.8,0.15
bundle=runs/ocular
planner.seed=42
planner.n_samples=128
";
        let ep = parse_episode_spec(text, &base).unwrap();
        assert_eq!(ep.map_path, PathBuf::from("maps/u.map"));
        assert_eq!(ep.start.to_array(), [0.3, 0.4, 0.0, 0.0]);
        assert_eq!(ep.subgoals.len(), 2);
        assert_eq!(ep.subgoals[0].center, [1.0, 1.2]);
        assert_eq!(ep.subgoals[1].center, [0.2, 1.8]);
        assert_eq!(ep.bundle_path, Some(PathBuf::from("runs/ocular")));
        assert_eq!(ep.cfg.seed, 42);
        assert_eq!(ep.cfg.n_samples, 128);
        assert_eq!(ep.cfg.horizon, base.horizon);

        assert!(parse_episode_spec("start=0,0,0,0\nsubgoal=1,1,0.1\n", &base).is_err());
        assert!(parse_episode_spec("map=m\nstart=0,0,0,0\n", &base).is_err());
        assert!(
            parse_episode_spec("map=m\nstart=0,0,0,0\nsubgoal=1,1,0\n", &base).is_err()
        );
        assert!(parse_episode_spec(
            "map=m\nstart=0,0,0,0\nsubgoal=1,1,0.1\nmystery=3\n",
            &base
        )
        .is_err());
        assert!(parse_episode_spec(
            "map=m\nstart=0,0,0,0\nsubgoal=1,1,0.1\nplanner.warp=3\n",
            &base
        )
        .is_err());
    }

    #[test]
    fn trace_csv_has_the_pinned_columns() {
        let ep = Episode {
            outcome: Outcome::Success,
            steps: 2,
            trace: vec![
                TraceStep {
                    step: 0,
                    state: StateVec::new(0.25, 0.5, 0.0, 0.0),
                    action: ActionVec::new(0.1, -0.2),
                    leaf_id: 3,
                    xi: 1.25,
                },
                TraceStep {
                    step: 1,
                    state: StateVec::new(0.26, 0.49, 0.02, -0.04),
                    action: ActionVec::new(0.0, 0.0),
                    leaf_id: 7,
                    xi: f64::INFINITY,
                },
            ],
        };
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &ep).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "step,px,py,vx,vy,ax,ay,leaf_id,xi,outcome");
        assert_eq!(lines[1], "0,0.25,0.5,0,0,0.1,-0.2,3,1.25,success");
        assert_eq!(lines[2], "1,0.26,0.49,0.02,-0.04,0,0,7,inf,success");
    }

    #[test]
    fn encode_cache_key_quantizes_pose_and_heading() {
        let map = open_map(10, 0.1);
        let a = EncodeCache::key(&map, &[0.51, 0.52], 0.01);
        let b = EncodeCache::key(&map, &[0.55, 0.58], 0.05);
        assert_eq!(a, b);
        let c = EncodeCache::key(&map, &[0.61, 0.52], 0.01);
        assert_ne!(a, c);
        let d = EncodeCache::key(&map, &[0.51, 0.52], 0.01 + std::f64::consts::TAU);
        assert_eq!(a, d);
        // Off-map positions clamp to the border cell.
        let e = EncodeCache::key(&map, &[-5.0, 0.52], 0.01);
        assert_eq!(e.0, 0);
        let f = EncodeCache::key(&map, &[99.0, 0.52], 0.01);
        assert_eq!(f.0, 9);
    }

    #[test]
    fn rollout_covariance_growth_matches_the_exact_law_far_from_walls() {
        // With xi = 1 and no obstacles the chained covariance after one step
        // from a point state equals the true one-step law's.
        let params = DynamicsParams::default();
        let truth = open_map(40, 0.05);
        let built = known_built(&truth);
        let pipe = nocp_pipe();
        let cfg = PlannerConfig::default();
        let env = PlanEnv {
            pipe: &pipe,
            built: &built,
            sensor: &small_sensor(),
            dyn_params: &params,
            cfg: &cfg,
            subgoal: Subgoal {
                center: [1.5, 1.5],
                radius: 0.1,
            },
        };
        let s = StateVec::new(1.0, 1.0, 0.2, 0.1);
        let u = ActionVec::new(0.1, 0.1);
        let rollout = rollout_plan(
            &env,
            &EncodeCache::new(),
            &Gaussian4::point(s),
            0.0,
            &[u],
        )
        .unwrap();
        let exact = exact_onestep_distribution(&s, &u, RegionType::Nominal, &params);
        let got = &rollout.steps[0].gaussian;
        for k in 0..4 {
            assert!((got.mean.to_array()[k] - exact.mean.to_array()[k]).abs() < 1e-15);
            assert!((got.cov[k][k] - exact.cov[k][k]).abs() < 1e-18);
        }
        let region = region_of(&exact, 0.10).unwrap();
        assert!((region.threshold - pipe.chi2_ref).abs() < 1e-9);
    }
}

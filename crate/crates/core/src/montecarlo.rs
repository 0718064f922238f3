//! Importance sampling of busy periods under the twisted kernel.
//!
//! Every trajectory draws from its own ChaCha stream keyed by `(seed, index)`, and
//! all accumulators are integer sums, so results do not depend on the worker count.

use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::spiral_growth_factors;
use crate::model::{conditioned_kernel_row, level_states, Params, Sheet, State};

type P = Params<f64>;

pub const DEFAULT_OVERSHOOT_EPSILON: f64 = 1e-9;
const CHUNK: u64 = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub params: P,
    pub level: u32,
    pub trajectories: u64,
    pub seed: u64,
    /// Allowed probability of returning to the level after the stopping level.
    pub overshoot_epsilon: f64,
    pub workers: usize,
}

impl SimConfig {
    pub fn new(params: P, level: u32, trajectories: u64, seed: u64) -> Self {
        SimConfig { params, level, trajectories, seed, overshoot_epsilon: DEFAULT_OVERSHOOT_EPSILON, workers: 1 }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn with_epsilon(mut self, eps: f64) -> Self {
        self.overshoot_epsilon = eps;
        self
    }

    /// Levels past the target at which a trajectory stops, `ceil(ln eps / ln rho)`.
    pub fn overshoot(&self) -> u32 {
        (self.overshoot_epsilon.ln() / self.params.rho().ln()).ceil().max(1.0) as u32
    }

    pub fn validate(&self) -> Result<()> {
        if !self.params.is_stable() {
            return Err(Error::InvalidParams("stability λ<μ violated (hypothesis K)".into()));
        }
        if self.level == 0 || self.trajectories == 0 || self.workers == 0 {
            return Err(Error::InvalidInput("level, trajectories and workers must be positive".into()));
        }
        if !(self.overshoot_epsilon > 0.0 && self.overshoot_epsilon < 1.0) {
            return Err(Error::InvalidInput("overshoot epsilon must lie in (0, 1)".into()));
        }
        if self.level.checked_add(self.overshoot()).is_none() {
            return Err(Error::InvalidInput("level plus overshoot overflows".into()));
        }
        Ok(())
    }
}

fn threshold(p: f64) -> u64 {
    if p >= 1.0 {
        u64::MAX
    } else {
        (p * 18_446_744_073_709_551_616.0) as u64
    }
}

/// Cumulative thresholds for east, north, service.
#[derive(Clone, Copy)]
struct Draws {
    east: u64,
    north: u64,
}

impl Draws {
    /// The taboo row at the origin and the twisted rows elsewhere share these thresholds;
    /// the remainder is the kill at the origin and the service move elsewhere.
    fn new(p: &P) -> Self {
        let t = p.twisted();
        Draws { east: threshold(t.lt1), north: threshold(t.lt1 + t.lt2) }
    }
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Position of the twisted walk away from the origin.
#[derive(Clone, Copy, Debug)]
struct Walker {
    x: u32,
    y: u32,
    sheet: Sheet,
}

impl Walker {
    /// One twisted step; returns false when the walk enters the origin.
    #[inline]
    fn step(&mut self, d: &Draws, r: u64) -> bool {
        if r < d.east {
            self.x += 1;
        } else if r < d.north {
            self.y += 1;
        } else {
            match self.sheet {
                Sheet::Serve1 => {
                    if self.x > 1 {
                        self.x -= 1;
                    } else if self.y >= 1 {
                        self.x = 0;
                        self.sheet = Sheet::Serve2;
                    } else {
                        return false;
                    }
                }
                Sheet::Serve2 => {
                    if self.y > 1 {
                        self.y -= 1;
                    } else {
                        self.y = 0;
                        self.sheet = Sheet::Serve1;
                        if self.x == 0 {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

/// First step from the origin under the taboo row: `None` when killed.
fn leave_origin(d: &Draws, r: u64) -> Option<Walker> {
    if r < d.east {
        Some(Walker { x: 1, y: 0, sheet: Sheet::Serve1 })
    } else if r < d.north {
        Some(Walker { x: 0, y: 1, sheet: Sheet::Serve2 })
    } else {
        None
    }
}

/// Slot of a level state, sheet 1 first as in [`level_states`].
fn level_slot(level: u32, w: &Walker) -> usize {
    match w.sheet {
        Sheet::Serve1 => w.x as usize - 1,
        Sheet::Serve2 => (level + w.x) as usize,
    }
}

/// Visit counts at one level, with the sums needed for per-trajectory variances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitHistogram {
    pub params: P,
    pub level: u32,
    pub trajectories: u64,
    pub seed: u64,
    pub overshoot: u32,
    /// Indexed like [`level_states`].
    pub visits: Vec<u64>,
    /// Per state, sum over trajectories of squared visit counts.
    pub visits_sq: Vec<u64>,
    /// Per state, sum over trajectories of visits times the trajectory's level total.
    pub visits_cross: Vec<u64>,
    pub total: u64,
    pub total_sq: u64,
    pub killed_first_step: u64,
    pub killed_before_level: u64,
}

#[derive(Clone)]
struct Acc {
    visits: Vec<u64>,
    sq: Vec<u64>,
    cross: Vec<u64>,
    total: u64,
    total_sq: u64,
    killed_first: u64,
    killed_before: u64,
}

impl Acc {
    fn new(n: usize) -> Self {
        Acc { visits: vec![0; n], sq: vec![0; n], cross: vec![0; n], total: 0, total_sq: 0, killed_first: 0, killed_before: 0 }
    }

    fn merge(mut self, o: Acc) -> Acc {
        for i in 0..self.visits.len() {
            self.visits[i] += o.visits[i];
            self.sq[i] += o.sq[i];
            self.cross[i] += o.cross[i];
        }
        self.total += o.total;
        self.total_sq += o.total_sq;
        self.killed_first += o.killed_first;
        self.killed_before += o.killed_before;
        self
    }
}

fn run_chunk(cfg: &SimConfig, range: std::ops::Range<u64>) -> Acc {
    let level = cfg.level;
    let stop = level + cfg.overshoot();
    let draws = Draws::new(&cfg.params);
    let mut acc = Acc::new(2 * level as usize);
    let mut local: Vec<(usize, u64)> = Vec::new();
    for idx in range {
        let mut rng = stream(cfg.seed, idx);
        local.clear();
        let Some(mut w) = leave_origin(&draws, rng.next_u64()) else {
            acc.killed_first += 1;
            acc.killed_before += 1;
            continue;
        };
        let mut reached = false;
        loop {
            let l = w.x + w.y;
            if l == level {
                reached = true;
                let slot = level_slot(level, &w);
                match local.iter_mut().find(|e| e.0 == slot) {
                    Some(e) => e.1 += 1,
                    None => local.push((slot, 1)),
                }
            } else if l >= stop {
                break;
            }
            if !w.step(&draws, rng.next_u64()) {
                break;
            }
        }
        if !reached {
            acc.killed_before += 1;
            continue;
        }
        let tot: u64 = local.iter().map(|e| e.1).sum();
        acc.total += tot;
        acc.total_sq += tot * tot;
        for &(s, v) in &local {
            acc.visits[s] += v;
            acc.sq[s] += v * v;
            acc.cross[s] += v * tot;
        }
    }
    acc
}

/// Simulates `cfg.trajectories` busy periods of the twisted chain and counts visits to the level.
pub fn run_busy_periods(cfg: &SimConfig) -> Result<HitHistogram> {
    cfg.validate()?;
    let chunks = cfg.trajectories.div_ceil(CHUNK);
    let n = 2 * cfg.level as usize;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start workers: {e}")))?;
    let acc = pool.install(|| {
        (0..chunks)
            .into_par_iter()
            .map(|c| run_chunk(cfg, c * CHUNK..((c + 1) * CHUNK).min(cfg.trajectories)))
            .reduce(|| Acc::new(n), Acc::merge)
    });
    Ok(HitHistogram {
        params: cfg.params,
        level: cfg.level,
        trajectories: cfg.trajectories,
        seed: cfg.seed,
        overshoot: cfg.overshoot(),
        visits: acc.visits,
        visits_sq: acc.sq,
        visits_cross: acc.cross,
        total: acc.total,
        total_sq: acc.total_sq,
        killed_first_step: acc.killed_first,
        killed_before_level: acc.killed_before,
    })
}

impl HitHistogram {
    /// Sums histograms from independent runs at the same parameters and level.
    ///
    /// The result keeps the first run's seed.
    pub fn pooled(runs: &[HitHistogram]) -> Result<HitHistogram> {
        let (first, rest) = runs.split_first().ok_or_else(|| Error::InvalidInput("nothing to pool".into()))?;
        let mut out = first.clone();
        for h in rest {
            if h.params != out.params || h.level != out.level || h.overshoot != out.overshoot {
                return Err(Error::InvalidInput("pooled runs must share parameters, level and overshoot".into()));
            }
            for i in 0..out.visits.len() {
                out.visits[i] += h.visits[i];
                out.visits_sq[i] += h.visits_sq[i];
                out.visits_cross[i] += h.visits_cross[i];
            }
            out.trajectories += h.trajectories;
            out.total += h.total;
            out.total_sq += h.total_sq;
            out.killed_first_step += h.killed_first_step;
            out.killed_before_level += h.killed_before_level;
        }
        Ok(out)
    }

    pub fn states(&self) -> Vec<State> {
        level_states(self.level)
    }

    pub fn count(&self, s: State) -> u64 {
        if s.level() != self.level || !s.is_valid() {
            return 0;
        }
        let w = Walker { x: s.x, y: s.y, sheet: s.sheet };
        self.visits[level_slot(self.level, &w)]
    }

    pub fn sheet_hits(&self, sheet: Sheet) -> u64 {
        let l = self.level as usize;
        match sheet {
            Sheet::Serve1 => self.visits[..l].iter().sum(),
            Sheet::Serve2 => self.visits[l..].iter().sum(),
        }
    }

    /// Most visited state on a sheet, smallest `x` on ties.
    pub fn argmax(&self, sheet: Sheet) -> Option<(State, u64)> {
        let states = self.states();
        let l = self.level as usize;
        let range = match sheet {
            Sheet::Serve1 => 0..l,
            Sheet::Serve2 => l..2 * l,
        };
        let mut best: Option<(State, u64)> = None;
        for i in range {
            if self.visits[i] > best.map_or(0, |b| b.1) {
                best = Some((states[i], self.visits[i]));
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellEstimate {
    pub state: State,
    pub visits: u64,
    /// Mean visits per trajectory.
    pub green: f64,
    pub green_se: f64,
    pub pi: f64,
    pub pi_se: f64,
    /// Share of all level visits.
    pub fraction: f64,
    pub fraction_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreenEstimate {
    pub level: u32,
    pub trajectories: u64,
    pub cells: Vec<CellEstimate>,
    pub green_sum: f64,
    pub green_sum_se: f64,
    /// Exact level mass `(1 - rho) rho^level`.
    pub pi_level: f64,
}

impl GreenEstimate {
    pub fn cell(&self, s: State) -> Option<&CellEstimate> {
        self.cells.iter().find(|c| c.state == s)
    }

    /// CSV `x,y,sheet,visits,fraction,stderr`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::InvalidInput(format!("csv output failed: {e}"));
        out.write_record(["x", "y", "sheet", "visits", "fraction", "stderr"]).map_err(io)?;
        for c in &self.cells {
            out.serialize((c.state.x, c.state.y, c.state.sheet.index(), c.visits, c.fraction, c.fraction_se))
                .map_err(io)?;
        }
        out.flush().map_err(|e| Error::InvalidInput(format!("csv output failed: {e}")))?;
        Ok(())
    }
}

/// Mean visits, stationary probabilities and visit shares with standard errors.
///
/// Empty cells get the one-sided rule-of-three bound `3/n` as their standard error.
pub fn estimate_pi(hist: &HitHistogram, params: &P, level: u32) -> Result<GreenEstimate> {
    if hist.params != *params || hist.level != level {
        return Err(Error::InvalidInput("histogram was produced for different parameters or level".into()));
    }
    let n = hist.trajectories as f64;
    let scale = (1.0 - params.rho()) * params.rho().powi(level as i32);
    let total = hist.total as f64;
    let var = |sum: f64, sq: f64| {
        let m = sum / n;
        if n > 1.0 {
            ((sq / n - m * m).max(0.0) * n / (n - 1.0) / n).sqrt()
        } else {
            0.0
        }
    };
    let green_sum = total / n;
    let green_sum_se = var(total, hist.total_sq as f64);
    let cells = hist
        .states()
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let v = hist.visits[i] as f64;
            let green = v / n;
            let green_se = if hist.visits[i] == 0 { 3.0 / n } else { var(v, hist.visits_sq[i] as f64) };
            let (fraction, fraction_se) = if total > 0.0 {
                let f = v / total;
                let num = hist.visits_sq[i] as f64 - 2.0 * f * hist.visits_cross[i] as f64
                    + f * f * hist.total_sq as f64;
                let se = if hist.visits[i] == 0 { green_se / green_sum } else { num.max(0.0).sqrt() / total };
                (f, se)
            } else {
                (0.0, 0.0)
            };
            CellEstimate {
                state: s,
                visits: hist.visits[i],
                green,
                green_se,
                pi: scale * green,
                pi_se: scale * green_se,
                fraction,
                fraction_se,
            }
        })
        .collect();
    Ok(GreenEstimate { level, trajectories: hist.trajectories, cells, green_sum, green_sum_se, pi_level: scale })
}

/// One path of the chain conditioned to reach `level` before returning to the origin,
/// from the origin to its first state on the level.
pub fn simulate_conditioned_path(params: &P, level: u32, seed: u64) -> Result<Vec<State>> {
    if level == 0 {
        return Err(Error::InvalidInput("level must be positive".into()));
    }
    if !params.is_stable() {
        return Err(Error::InvalidParams("stability λ<μ violated (hypothesis K)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = State::ORIGIN;
    let mut path = vec![s];
    while s.level() < level {
        let row = conditioned_kernel_row(params, level, s)?;
        let total = row.sum();
        let mut u = rng.gen::<f64>() * total;
        let mut next = row.entries[row.entries.len() - 1].0;
        for &(t, w) in &row.entries {
            if u < w {
                next = t;
                break;
            }
            u -= w;
        }
        s = next;
        path.push(s);
    }
    Ok(path)
}

/// Number of sheet changes along a path.
pub fn sheet_switches(path: &[State]) -> usize {
    path.windows(2).filter(|w| !w[0].is_origin() && w[0].sheet != w[1].sheet).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeEstimate {
    pub probability: f64,
    pub stderr: f64,
    /// 95% normal interval clipped to `[0, 1]`.
    pub interval: (f64, f64),
    pub trajectories: u64,
    /// Paths stopped by the step cap before being resolved; counted as not escaped.
    pub unresolved: u64,
}

const ESCAPE_STEP_CAP: u64 = 10_000_000;

/// Probability that the twisted chain from `z` on the sheet-1 x-axis never re-enters
/// the complement of the sheet-1 interior.
///
/// Inside the interior `x` moves as a one-dimensional walk, so a path is ruled escaped
/// once `x` is high enough that the return probability is below `epsilon`.
pub fn escape_probability(params: &P, z: State, n: u64, seed: u64, epsilon: f64) -> Result<EscapeEstimate> {
    if !(z.sheet == Sheet::Serve1 && z.y == 0 && z.x >= 1) {
        return Err(Error::InvalidState(format!("{z} is not on the sheet-1 x-axis")));
    }
    if n == 0 || !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidInput("need n >= 1 and epsilon in (0, 1)".into()));
    }
    let t = params.twisted();
    let horizon = if t.lt1 > t.mt { (epsilon.ln() / (t.mt / t.lt1).ln()).ceil().max(1.0) as u32 } else { u32::MAX };
    let d = Draws::new(params);
    let mut escaped = 0u64;
    let mut unresolved = 0u64;
    for i in 0..n {
        let mut rng = stream(seed, i);
        let mut w = Walker { x: z.x, y: z.y, sheet: Sheet::Serve1 };
        if !(w.step(&d, rng.next_u64()) && w.y >= 1 && w.sheet == Sheet::Serve1) {
            continue;
        }
        let mut steps = 0u64;
        loop {
            if w.x >= horizon {
                escaped += 1;
                break;
            }
            if steps >= ESCAPE_STEP_CAP {
                unresolved += 1;
                break;
            }
            if !w.step(&d, rng.next_u64()) || w.sheet != Sheet::Serve1 {
                break;
            }
            steps += 1;
        }
    }
    let nf = n as f64;
    let p = escaped as f64 / nf;
    let se = (p * (1.0 - p) / nf).sqrt();
    Ok(EscapeEstimate {
        probability: p,
        stderr: se,
        interval: ((p - 1.96 * se).max(0.0), (p + 1.96 * se).min(1.0)),
        trajectories: n,
        unresolved,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopEstimate {
    pub start: u32,
    /// Mean `x` on return to the sheet-1 x-axis after one loop through sheet 2.
    pub mean: f64,
    pub stderr: f64,
    pub trajectories: u64,
}

/// One spiral loop of the twisted chain from `(u, 0, 1)`, repeated `n` times.
pub fn spiral_loop(params: &P, u: u32, n: u64, seed: u64) -> Result<LoopEstimate> {
    spiral_growth_factors(params)?;
    if u == 0 || n < 2 {
        return Err(Error::InvalidInput("need u >= 1 and n >= 2".into()));
    }
    let d = Draws::new(params);
    let (mut sum, mut sq) = (0.0, 0.0);
    for i in 0..n {
        let mut rng = stream(seed, i);
        let mut w = Walker { x: u, y: 0, sheet: Sheet::Serve1 };
        let mut left = false;
        let end = loop {
            if !w.step(&d, rng.next_u64()) {
                break 0;
            }
            if w.sheet == Sheet::Serve2 {
                left = true;
            } else if left && w.y == 0 {
                break w.x;
            }
        };
        let e = end as f64;
        sum += e;
        sq += e * e;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sq / nf - mean * mean) * nf / (nf - 1.0);
    Ok(LoopEstimate { start: u, mean, stderr: (var / nf).sqrt(), trajectories: n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{escape_probability_exact, taboo_green_exact};
    use approx::assert_abs_diff_eq;

    fn rs() -> P {
        Params::new(0.3, 0.05, 0.65).unwrap()
    }

    fn ss() -> P {
        Params::new(0.3, 0.15, 0.55).unwrap()
    }

    #[test]
    fn overshoot_margin() {
        let c = SimConfig::new(rs(), 10, 10, 1);
        let k = c.overshoot();
        assert!(rs().rho().powi(k as i32) <= 1e-9);
        assert!(rs().rho().powi(k as i32 - 1) > 1e-9);
        assert!(SimConfig::new(rs(), 0, 10, 1).validate().is_err());
        let unstable = Params::new_unstable_allowed(1.0, 1.0, 1.0).unwrap();
        assert!(SimConfig::new(unstable, 5, 10, 1).validate().is_err());
        assert!(SimConfig::new(rs(), u32::MAX - 3, 10, 1).validate().is_err());
    }

    #[test]
    fn deterministic_across_workers() {
        let base = SimConfig::new(ss(), 12, 5000, 7);
        let a = run_busy_periods(&base).unwrap();
        let b = run_busy_periods(&base.clone().with_workers(4)).unwrap();
        let c = run_busy_periods(&base.clone().with_workers(16)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        let d = run_busy_periods(&SimConfig::new(ss(), 12, 5000, 8)).unwrap();
        assert_ne!(a.visits, d.visits);
    }

    #[test]
    fn pooling_adds_runs() {
        let a = run_busy_periods(&SimConfig::new(rs(), 6, 3000, 1)).unwrap();
        let b = run_busy_periods(&SimConfig::new(rs(), 6, 2000, 2)).unwrap();
        let c = HitHistogram::pooled(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.trajectories, 5000);
        assert_eq!(c.total, a.total + b.total);
        assert_eq!(c.visits[0], a.visits[0] + b.visits[0]);
        let other = run_busy_periods(&SimConfig::new(rs(), 7, 10, 1)).unwrap();
        assert!(HitHistogram::pooled(&[a, other]).is_err());
        assert!(HitHistogram::pooled(&[]).is_err());
    }

    #[test]
    fn histogram_invariants() {
        let h = run_busy_periods(&SimConfig::new(rs(), 8, 20_000, 3)).unwrap();
        assert_eq!(h.total, h.visits.iter().sum::<u64>());
        assert_eq!(h.visits.len(), 16);
        for (s, _) in h.states().iter().zip(&h.visits) {
            assert!(s.is_valid());
        }
        let n = h.trajectories as f64;
        let kill = h.killed_first_step as f64 / n;
        let lam = rs().lambda();
        assert!((kill - lam).abs() < 3.0 * (lam * (1.0 - lam) / n).sqrt());
        assert!(h.killed_before_level >= h.killed_first_step);
    }

    #[test]
    fn level_one_matches_oracle() {
        let p = ss();
        let h = run_busy_periods(&SimConfig::new(p, 1, 50_000, 11)).unwrap();
        let est = estimate_pi(&h, &p, 1).unwrap();
        for (s, g) in taboo_green_exact(&p, 1, 20).unwrap() {
            let c = est.cell(s).unwrap();
            assert!((c.green - g).abs() < 3.0 * c.green_se, "{s}: {} vs {g}", c.green);
        }
    }

    #[test]
    fn green_normalization() {
        for p in [rs(), ss()] {
            for level in [5, 12, 30] {
                let h = run_busy_periods(&SimConfig::new(p, level, 20_000, level as u64)).unwrap();
                let e = estimate_pi(&h, &p, level).unwrap();
                assert!((e.green_sum - 1.0).abs() < 3.0 * e.green_sum_se, "{level}: {e:?}");
                let pis: f64 = e.cells.iter().map(|c| c.pi).sum();
                assert!((pis / e.pi_level - 1.0).abs() < 3.0 * e.green_sum_se);
            }
        }
    }

    #[test]
    fn overshoot_insensitive() {
        let p = ss();
        let a = run_busy_periods(&SimConfig::new(p, 10, 20_000, 5)).unwrap();
        let eps = 1e-9 * p.rho().powi(5);
        let cfg = SimConfig::new(p, 10, 20_000, 5).with_epsilon(eps);
        assert_eq!(cfg.overshoot(), a.overshoot + 5);
        let b = run_busy_periods(&cfg).unwrap();
        let ea = estimate_pi(&a, &p, 10).unwrap();
        let eb = estimate_pi(&b, &p, 10).unwrap();
        for (x, y) in ea.cells.iter().zip(&eb.cells) {
            assert!((x.green - y.green).abs() <= x.green_se.max(1e-12), "{x:?} {y:?}");
        }
    }

    #[test]
    fn empty_cells_use_rule_of_three() {
        let p = rs();
        let h = run_busy_periods(&SimConfig::new(p, 40, 200, 1)).unwrap();
        let e = estimate_pi(&h, &p, 40).unwrap();
        let c = e.cell(State::new_unchecked(0, 40, Sheet::Serve2)).unwrap();
        assert_eq!(c.visits, 0);
        assert_eq!(c.pi, 0.0);
        assert_abs_diff_eq!(c.green_se, 3.0 / 200.0, epsilon = 1e-15);
        assert!(estimate_pi(&h, &p, 41).is_err());
        assert!(estimate_pi(&h, &ss(), 40).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let p = rs();
        let h = run_busy_periods(&SimConfig::new(p, 4, 1000, 2)).unwrap();
        let e = estimate_pi(&h, &p, 4).unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        let mut r = csv::Reader::from_reader(buf.as_slice());
        assert_eq!(r.headers().unwrap(), vec!["x", "y", "sheet", "visits", "fraction", "stderr"]);
        let rows: Vec<(u32, u32, u8, u64, f64, f64)> = r.deserialize().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows.iter().map(|r| r.3).sum::<u64>(), h.total);
    }

    #[test]
    fn conditioned_paths() {
        let p = ss();
        for seed in 0..50 {
            let path = simulate_conditioned_path(&p, 25, seed).unwrap();
            assert_eq!(path[0], State::ORIGIN);
            assert_eq!(path.last().unwrap().level(), 25);
            assert!(path[1..].iter().all(|s| !s.is_origin() && s.is_valid()));
            assert!(path[..path.len() - 1].iter().all(|s| s.level() < 25));
            for w in path.windows(2) {
                assert!(w[0].moves().contains(&w[1]));
            }
        }
        assert!(simulate_conditioned_path(&p, 0, 1).is_err());
    }

    #[test]
    fn escape_matches_exact() {
        let p = rs();
        for x in [1, 3, 10] {
            let z = State::new_unchecked(x, 0, Sheet::Serve1);
            let e = escape_probability(&p, z, 20_000, 9, 1e-9).unwrap();
            let exact = escape_probability_exact(&p, z).unwrap();
            assert!((e.probability - exact).abs() < 3.0 * e.stderr.max(1e-4), "{x}: {e:?} vs {exact}");
            assert_eq!(e.unresolved, 0);
        }
        let z = State::new_unchecked(5, 0, Sheet::Serve1);
        assert_eq!(escape_probability(&ss(), z, 2000, 1, 1e-9).unwrap().probability, 0.0);
        assert!(escape_probability(&p, State::new_unchecked(5, 1, Sheet::Serve1), 10, 1, 1e-9).is_err());
    }

    #[test]
    fn spiral_loop_growth() {
        let p = ss();
        let (f1, f2) = spiral_growth_factors(&p).unwrap();
        let u = 20;
        let e = spiral_loop(&p, u, 20_000, 4).unwrap();
        let want = (1.0 + f1) * (1.0 + f2) * u as f64;
        assert!((e.mean - want).abs() < 3.0 * e.stderr, "{e:?} vs {want}");
        assert!(spiral_loop(&rs(), u, 100, 1).is_err());
    }
}

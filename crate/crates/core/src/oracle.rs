//! Exact linear solves on a truncated state space.
//!
//! States with `x + y <= rim` are indexed by `(level, sheet, x)`, so each level
//! is a contiguous slice and every kernel is block tridiagonal in the level.

use std::io::Write;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::asymptotics::lattice_point;
use crate::error::{Error, Result};
use crate::geometry::{classify, special_points, Regime};
use crate::model::{h_alpha, kernel_row, level_states, twisted_kernel_row, KernelRow, Params, Sheet, State};

type P = Params<f64>;

/// Tail mass left beyond the internal rim.
pub const RIM_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Arrivals at the rim become self-loops.
    Reflecting,
    /// Arrivals at the rim are lost.
    Absorbing,
}

/// Levels kept beyond the reporting window so that the rim costs at most [`RIM_TOLERANCE`].
pub fn rim_margin(p: &P) -> u32 {
    (RIM_TOLERANCE.ln() / p.rho().ln()).ceil().max(1.0) as u32
}

/// Truncation of the state space to `x + y <= rim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncatedModel {
    pub params: P,
    /// Highest level reported to callers.
    pub window: u32,
    /// Highest level kept in the linear systems.
    pub rim: u32,
    pub boundary: Boundary,
}

impl TruncatedModel {
    /// Rim pushed [`rim_margin`] levels past the window.
    pub fn new(params: P, window: u32, boundary: Boundary) -> Self {
        TruncatedModel { params, window, rim: window + rim_margin(&params), boundary }
    }

    /// Rim at the window itself.
    pub fn literal(params: P, window: u32, boundary: Boundary) -> Self {
        TruncatedModel { params, window, rim: window, boundary }
    }

    pub fn offset(level: u32) -> usize {
        if level == 0 {
            0
        } else {
            1 + (level as usize) * (level as usize - 1)
        }
    }

    pub fn level_size(level: u32) -> usize {
        if level == 0 {
            1
        } else {
            2 * level as usize
        }
    }

    pub fn level_range(level: u32) -> Range<usize> {
        Self::offset(level)..Self::offset(level) + Self::level_size(level)
    }

    pub fn len(&self) -> usize {
        Self::offset(self.rim + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn slot(s: State) -> usize {
        let k = s.level();
        if k == 0 {
            return 0;
        }
        Self::offset(k)
            + match s.sheet {
                Sheet::Serve1 => s.x as usize - 1,
                Sheet::Serve2 => k as usize + s.x as usize,
            }
    }

    pub fn index(&self, s: State) -> Option<usize> {
        (s.is_valid() && s.level() <= self.rim).then(|| Self::slot(s))
    }

    pub fn state(&self, i: usize) -> Option<State> {
        if i >= self.len() {
            return None;
        }
        let mut k = 0;
        while Self::offset(k + 1) <= i {
            k += 1;
        }
        Some(level_states(k)[i - Self::offset(k)])
    }

    pub fn states(&self) -> impl Iterator<Item = State> {
        (0..=self.rim).flat_map(level_states)
    }

    /// Exact level mass beyond the rim, `rho^{rim+1}`.
    pub fn tail_bound(&self) -> f64 {
        self.params.rho().powi(self.rim as i32 + 1)
    }

    fn truncate(&self, row: KernelRow<f64>) -> Vec<(State, f64)> {
        let from = row.from;
        let mut out = Vec::with_capacity(row.entries.len());
        for (t, w) in row.entries {
            if t.level() <= self.rim {
                out.push((t, w));
            } else if self.boundary == Boundary::Reflecting {
                out.push((from, w));
            }
        }
        out
    }
}

/// `I - Q` restricted to levels `first..=last`, stored by level blocks.
struct LevelSystem {
    first: u32,
    lower: Vec<DMatrix<f64>>,
    diag: Vec<DMatrix<f64>>,
    upper: Vec<DMatrix<f64>>,
}

impl LevelSystem {
    fn assemble<F: Fn(State) -> Vec<(State, f64)>>(first: u32, last: u32, rows: F) -> Self {
        let n = (last - first + 1) as usize;
        let size = |k: u32| TruncatedModel::level_size(k);
        let mut lower = Vec::with_capacity(n);
        let mut diag = Vec::with_capacity(n);
        let mut upper = Vec::with_capacity(n);
        for k in first..=last {
            let below = if k > first { size(k - 1) } else { 0 };
            let above = if k < last { size(k + 1) } else { 0 };
            lower.push(DMatrix::zeros(size(k), below));
            diag.push(DMatrix::identity(size(k), size(k)));
            upper.push(DMatrix::zeros(size(k), above));
        }
        for k in first..=last {
            let b = (k - first) as usize;
            for (i, s) in level_states(k).into_iter().enumerate() {
                for (t, w) in rows(s) {
                    let tk = t.level();
                    if tk < first || tk > last {
                        continue;
                    }
                    let j = TruncatedModel::slot(t) - TruncatedModel::offset(tk);
                    let m = match tk as i64 - k as i64 {
                        -1 => &mut lower[b],
                        0 => &mut diag[b],
                        1 => &mut upper[b],
                        _ => unreachable!("kernels move one level at a time"),
                    };
                    m[(i, j)] -= w;
                }
            }
        }
        LevelSystem { first, lower, diag, upper }
    }

    fn transpose(self) -> Self {
        let n = self.diag.len();
        let lower = (0..n)
            .map(|i| if i > 0 { self.upper[i - 1].transpose() } else { DMatrix::zeros(self.diag[0].nrows(), 0) })
            .collect();
        let upper = (0..n)
            .map(|i| {
                if i + 1 < n {
                    self.lower[i + 1].transpose()
                } else {
                    DMatrix::zeros(self.diag[i].nrows(), 0)
                }
            })
            .collect();
        let diag = self.diag.iter().map(|d| d.transpose()).collect();
        LevelSystem { first: self.first, lower, diag, upper }
    }

    /// Block Thomas elimination.
    fn solve(&self, rhs: Vec<DVector<f64>>) -> Result<Vec<DVector<f64>>> {
        let n = self.diag.len();
        let fail = || Error::Numerical("singular level block".into());
        let mut xs: Vec<DMatrix<f64>> = Vec::with_capacity(n);
        let mut ys: Vec<DVector<f64>> = Vec::with_capacity(n);
        for (i, d) in rhs.into_iter().enumerate() {
            let mut b = self.diag[i].clone();
            let mut d = d;
            if i > 0 {
                b -= &self.lower[i] * &xs[i - 1];
                d -= &self.lower[i] * &ys[i - 1];
            }
            let lu = b.lu();
            ys.push(lu.solve(&d).ok_or_else(fail)?);
            xs.push(if i + 1 < n { lu.solve(&self.upper[i]).ok_or_else(fail)? } else { DMatrix::zeros(0, 0) });
        }
        let mut sol = vec![DVector::zeros(0); n];
        sol[n - 1] = ys[n - 1].clone();
        for i in (0..n.saturating_sub(1)).rev() {
            sol[i] = &ys[i] - &xs[i] * &sol[i + 1];
        }
        if sol.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(fail());
        }
        Ok(sol)
    }

    #[cfg(test)]
    fn to_dense(&self) -> DMatrix<f64> {
        let off = |i: usize| TruncatedModel::offset(self.first + i as u32) - TruncatedModel::offset(self.first);
        let total = off(self.diag.len());
        let mut m = DMatrix::zeros(total, total);
        for i in 0..self.diag.len() {
            m.view_mut((off(i), off(i)), self.diag[i].shape()).copy_from(&self.diag[i]);
            if i > 0 {
                m.view_mut((off(i), off(i - 1)), self.lower[i].shape()).copy_from(&self.lower[i]);
            }
            if i + 1 < self.diag.len() {
                m.view_mut((off(i), off(i + 1)), self.upper[i].shape()).copy_from(&self.upper[i]);
            }
        }
        m
    }
}

fn zero_rhs(first: u32, last: u32) -> Vec<DVector<f64>> {
    (first..=last).map(|k| DVector::zeros(TruncatedModel::level_size(k))).collect()
}

fn require_stable(p: &P) -> Result<()> {
    if p.is_stable() {
        Ok(())
    } else {
        Err(Error::InvalidParams("stability λ<μ violated (hypothesis K)".into()))
    }
}

/// Values indexed like a [`TruncatedModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateTable {
    pub model: TruncatedModel,
    pub values: Vec<f64>,
}

impl StateTable {
    pub fn get(&self, s: State) -> f64 {
        self.model.index(s).map_or(0.0, |i| self.values[i])
    }

    pub fn level(&self, k: u32) -> Vec<(State, f64)> {
        level_states(k).into_iter().map(|s| (s, self.get(s))).collect()
    }

    pub fn level_sum(&self, k: u32) -> f64 {
        if k > self.model.rim {
            return 0.0;
        }
        self.values[TruncatedModel::level_range(k)].iter().sum()
    }

    /// CSV `x,y,sheet,value` over the reporting window.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::InvalidInput(format!("csv output failed: {e}"));
        out.write_record(["x", "y", "sheet", "value"]).map_err(io)?;
        for k in 0..=self.model.window.min(self.model.rim) {
            for (s, v) in self.level(k) {
                out.serialize((s.x, s.y, s.sheet.index(), v)).map_err(io)?;
            }
        }
        out.flush().map_err(|e| Error::InvalidInput(format!("csv output failed: {e}")))?;
        Ok(())
    }
}

/// Stationary distribution on `x + y <= L`, with the rim extended internally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryTable {
    pub table: StateTable,
    /// Exact level mass lost to truncation.
    pub tail_bound: f64,
}

impl StationaryTable {
    pub fn get(&self, s: State) -> f64 {
        self.table.get(s)
    }

    pub fn level(&self, k: u32) -> Vec<(State, f64)> {
        self.table.level(k)
    }

    pub fn level_marginal(&self, k: u32) -> f64 {
        self.table.level_sum(k)
    }
}

pub fn stationary_truncated(p: &P, window: u32) -> Result<StationaryTable> {
    stationary_on(&TruncatedModel::new(*p, window, Boundary::Reflecting))
}

/// Stationary solve on a given truncation; the boundary must be reflecting.
pub fn stationary_on(model: &TruncatedModel) -> Result<StationaryTable> {
    let p = &model.params;
    require_stable(p)?;
    if model.window < 2 {
        return Err(Error::InvalidInput("truncation level must be at least 2".into()));
    }
    if model.boundary != Boundary::Reflecting {
        return Err(Error::InvalidInput("stationary solve needs a reflecting rim".into()));
    }
    let rows = |s: State| model.truncate(kernel_row(p, s).expect("enumerated states are valid"));
    let sys = LevelSystem::assemble(1, model.rim, rows).transpose();
    let mut rhs = zero_rhs(1, model.rim);
    for (t, w) in rows(State::ORIGIN) {
        if t.level() == 1 {
            rhs[0][TruncatedModel::slot(t) - 1] += w;
        }
    }
    let sol = sys.solve(rhs)?;
    let mut values = Vec::with_capacity(model.len());
    values.push(1.0);
    for v in sol {
        values.extend(v.iter());
    }
    let total: f64 = values.iter().sum();
    values.iter_mut().for_each(|v| *v /= total);
    Ok(StationaryTable { table: StateTable { model: model.clone(), values }, tail_bound: model.tail_bound() })
}

/// Expected visits under the twisted kernel from the origin before returning to it.
pub fn taboo_green(p: &P, window: u32) -> Result<StateTable> {
    taboo_green_on(&TruncatedModel::new(*p, window, Boundary::Absorbing))
}

pub fn taboo_green_on(model: &TruncatedModel) -> Result<StateTable> {
    let p = &model.params;
    require_stable(p)?;
    if model.boundary != Boundary::Absorbing || model.rim == 0 {
        return Err(Error::InvalidInput("Green solve needs an absorbing rim above level 0".into()));
    }
    let rows = |s: State| model.truncate(twisted_kernel_row(p, s).expect("enumerated states are valid"));
    let sys = LevelSystem::assemble(1, model.rim, rows).transpose();
    let mut rhs = zero_rhs(1, model.rim);
    for (t, w) in rows(State::ORIGIN) {
        if t.level() == 1 {
            rhs[0][TruncatedModel::slot(t) - 1] += w;
        }
    }
    let sol = sys.solve(rhs)?;
    let mut values = vec![0.0];
    for v in sol {
        values.extend(v.iter());
    }
    Ok(StateTable { model: model.clone(), values })
}

/// Level-`level` slice of the taboo Green's function, solved with window `window`.
pub fn taboo_green_exact(p: &P, level: u32, window: u32) -> Result<Vec<(State, f64)>> {
    if level == 0 || level > window {
        return Err(Error::InvalidInput(format!("level {level} must lie in 1..={window}")));
    }
    Ok(taboo_green(p, window)?.level(level))
}

/// Largest relative gap between `pi` and `(1-rho) rho^level G` on one level.
pub fn representation_check(p: &P, level: u32, window: u32) -> Result<f64> {
    let pi = stationary_truncated(p, window)?;
    let g = taboo_green_exact(p, level, window)?;
    let scale = (1.0 - p.rho()) * p.rho().powi(level as i32);
    Ok(g.iter().map(|&(s, v)| ((pi.get(s) - scale * v) / pi.get(s)).abs()).fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstPassageReport {
    pub level: u32,
    /// Largest gap to `(rho^{-k} - 1) / (rho^{-level} - 1)`.
    pub max_deviation: f64,
    pub states_checked: usize,
}

/// Probability of reaching `level` before the origin, by linear solve.
pub fn first_passage_check(p: &P, level: u32, window: u32) -> Result<FirstPassageReport> {
    require_stable(p)?;
    if level == 0 || level > window {
        return Err(Error::InvalidInput(format!("level {level} must lie in 1..={window}")));
    }
    if level == 1 {
        return Ok(FirstPassageReport { level, max_deviation: 0.0, states_checked: 0 });
    }
    let rows = |s: State| kernel_row(p, s).expect("enumerated states are valid").entries;
    let sys = LevelSystem::assemble(1, level - 1, rows);
    let mut rhs = zero_rhs(1, level - 1);
    for s in level_states(level - 1) {
        for (t, w) in rows(s) {
            if t.level() == level {
                rhs[(level - 2) as usize][TruncatedModel::slot(s) - TruncatedModel::offset(level - 1)] += w;
            }
        }
    }
    let sol = sys.solve(rhs)?;
    let mut dev: f64 = 0.0;
    let mut n = 0;
    for (b, v) in sol.iter().enumerate() {
        let k = b as u32 + 1;
        let exact = h_alpha(p, level, k);
        for x in v.iter() {
            dev = dev.max((x - exact).abs());
            n += 1;
        }
    }
    Ok(FirstPassageReport { level, max_deviation: dev, states_checked: n })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub alpha_e: f64,
    pub beta_e: f64,
    pub r: f64,
    /// Allowance at the origin, `lambda1 alpha_E + lambda2 beta_E + mu + r`.
    pub g: f64,
    /// Largest `(KV - V - rhs) / V` over the window; nonpositive when the inequality holds.
    pub max_margin: f64,
    /// Largest `|KV - V| / V` on sheet 2.
    pub sheet2_residual: f64,
    /// Largest `|KV - (1-r)V| / V` on sheet 1 away from the origin.
    pub sheet1_deviation: f64,
    pub holds: bool,
}

fn require_ray_ray(p: &P) -> Result<()> {
    let rep = classify(p);
    if rep.sheet1 != Regime::Ray {
        return Err(Error::Regime("R1 violated: sheet 1 is not a ray".into()));
    }
    if rep.sheet2 != Regime::Ray {
        return Err(Error::Regime("R2 violated: sheet 2 is not a ray".into()));
    }
    Ok(())
}

/// Checks `KV - V <= -r V 1{sheet 1} + g 1{origin}` for `V = alpha_E^x beta_E^y`.
pub fn lyapunov_drift_check(p: &P, window: u32) -> Result<LyapunovReport> {
    require_stable(p)?;
    require_ray_ray(p)?;
    let sp = special_points(p);
    let (ae, be) = (sp.alpha_e, sp.beta_e);
    let r = p.mu * (1.0 / be - 1.0 / ae);
    let g = p.lambda1 * ae + p.lambda2 * be + p.mu + r;
    let v = |s: State| ae.powi(s.x as i32) * be.powi(s.y as i32);
    let (mut margin, mut res2, mut dev1) = (f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for k in 0..=window {
        for s in level_states(k) {
            let vs = v(s);
            let kv = kernel_row(p, s)?.apply(v);
            let sheet1 = s.sheet == Sheet::Serve1;
            let rhs = if sheet1 { -r * vs } else { 0.0 } + if s.is_origin() { g } else { 0.0 };
            margin = margin.max((kv - vs - rhs) / vs);
            if s.is_origin() {
                continue;
            }
            if sheet1 {
                dev1 = dev1.max((kv - (1.0 - r) * vs).abs() / vs);
            } else {
                res2 = res2.max((kv - vs).abs() / vs);
            }
        }
    }
    Ok(LyapunovReport {
        alpha_e: ae,
        beta_e: be,
        r,
        g,
        max_margin: margin,
        sheet2_residual: res2,
        sheet1_deviation: dev1,
        holds: r > 0.0 && margin <= 1e-12,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangDownReport {
    pub cap: u32,
    /// Expected visits to the sheet-1 x-axis before the origin.
    pub g_e: StateTable,
    /// One-step smoothing of `g_e` by the twisted kernel.
    pub h_e: StateTable,
    /// `H_E` at the origin.
    pub b: f64,
    /// Largest violation of `J G_E - G_E <= -1_Delta + b 1_E` on levels below the cap.
    pub max_violation: f64,
    /// Largest `|J G_E - G_E + 1_Delta|` off the origin on levels below the cap.
    pub equality_deviation: f64,
}

fn on_delta(s: State) -> bool {
    s.sheet == Sheet::Serve1 && s.y == 0 && s.x >= 1
}

/// `G_E` and `H_E` for `E` the origin and `Delta` the sheet-1 x-axis.
pub fn chang_down_quantities(p: &P, cap: u32) -> Result<ChangDownReport> {
    require_stable(p)?;
    if classify(p).sheet1 == Regime::Spiral {
        return Err(Error::Regime(
            "sheet 1 is a spiral: H_E may diverge since the weighted x-axis mass is not summable".into(),
        ));
    }
    if cap < 2 {
        return Err(Error::InvalidInput("cap must be at least 2".into()));
    }
    let model = TruncatedModel::literal(*p, cap, Boundary::Absorbing);
    let rows = |s: State| model.truncate(twisted_kernel_row(p, s).expect("enumerated states are valid"));
    let sys = LevelSystem::assemble(1, cap, rows);
    let rhs = (1..=cap)
        .map(|k| DVector::from_iterator(2 * k as usize, level_states(k).into_iter().map(|s| on_delta(s) as u8 as f64)))
        .collect();
    let sol = sys.solve(rhs)?;
    let mut gv = vec![0.0];
    for v in sol {
        gv.extend(v.iter());
    }
    let g_e = StateTable { model: model.clone(), values: gv };
    let hv: Vec<f64> = model.states().map(|s| rows(s).iter().map(|&(t, w)| w * g_e.get(t)).sum()).collect();
    let h_e = StateTable { model: model.clone(), values: hv };
    let b = h_e.get(State::ORIGIN);
    let (mut viol, mut eq) = (f64::NEG_INFINITY, 0.0f64);
    for k in 0..cap {
        for s in level_states(k) {
            let lhs = h_e.get(s) - g_e.get(s);
            let ind = on_delta(s) as u8 as f64;
            let rhs = -ind + if s.is_origin() { b } else { 0.0 };
            viol = viol.max(lhs - rhs);
            if !s.is_origin() {
                eq = eq.max((lhs + ind).abs());
            }
        }
    }
    Ok(ChangDownReport { cap, g_e, h_e, b, max_violation: viol, equality_deviation: eq })
}

/// Green's function of the free sheet-1 twisted walk (east, north, west) on the whole lattice.
pub fn free_green(p: &P, z: [i64; 2]) -> f64 {
    let t = p.twisted();
    let (a, c, b) = (t.lt1, t.lt2, t.mt);
    let (x, y) = (z[0], z[1]);
    if y < 0 {
        return 0.0;
    }
    let ln_fact = |n: i64| (2..=n).map(|i| (i as f64).ln()).sum::<f64>();
    let w0 = (-x).max(0);
    let e0 = w0 + x;
    let n0 = e0 + w0 + y;
    let mut log_term = ln_fact(n0) - ln_fact(e0) - ln_fact(w0) - ln_fact(y)
        + e0 as f64 * a.ln()
        + w0 as f64 * b.ln()
        + y as f64 * c.ln();
    let (mut e, mut w) = (e0 as f64, w0 as f64);
    let mut sum = 0.0;
    for _ in 0..1_000_000 {
        let term = log_term.exp();
        sum += term;
        let n = e + w + y as f64;
        let ratio = (n + 1.0) * (n + 2.0) / ((e + 1.0) * (w + 1.0)) * a * b;
        if ratio < 1.0 && term * ratio / (1.0 - ratio) < 1e-17 * sum {
            break;
        }
        log_term += ratio.ln();
        e += 1.0;
        w += 1.0;
    }
    sum
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformBoundReport {
    /// Per level, the largest `G(z; target) / G(0; target)` over axis points `z`.
    pub per_level: Vec<(u32, f64)>,
    pub max_ratio: f64,
}

/// Ratios of the free Green's function from axis points to the lattice point on the central ray.
pub fn uniform_bound_check(p: &P, levels: std::ops::RangeInclusive<u32>) -> Result<UniformBoundReport> {
    require_stable(p)?;
    if classify(p).sheet1 != Regime::Ray {
        return Err(Error::Regime("uniform bound needs a ray on sheet 1".into()));
    }
    let m = p.twisted().m1;
    let mut per_level = Vec::new();
    for l in levels {
        let t = lattice_point(m, l);
        let t = [t[0] as i64, t[1] as i64];
        let base = free_green(p, t);
        let mut best: f64 = 0.0;
        for k in 0..=l as i64 {
            for z in [[k, 0], [0, k]] {
                best = best.max(free_green(p, [t[0] - z[0], t[1] - z[1]]) / base);
            }
        }
        per_level.push((l, best));
    }
    let max_ratio = per_level.iter().map(|e| e.1).fold(0.0, f64::max);
    Ok(UniformBoundReport { per_level, max_ratio })
}

/// Exact probability that the twisted chain from `z` on the sheet-1 x-axis never hits
/// the complement of the sheet-1 interior.
pub fn escape_probability_exact(p: &P, z: State) -> Result<f64> {
    if !on_delta(z) {
        return Err(Error::InvalidState(format!("{z} is not on the sheet-1 x-axis")));
    }
    let t = p.twisted();
    if t.lt1 <= t.mt {
        return Ok(0.0);
    }
    Ok(t.lt2 * (1.0 - (t.mt / t.lt1).powi(z.x as i32)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rs() -> P {
        Params::new(0.3, 0.05, 0.65).unwrap()
    }

    fn ss() -> P {
        Params::new(0.3, 0.15, 0.55).unwrap()
    }

    fn rr() -> P {
        Params::new(0.1, 0.1, 0.8).unwrap()
    }

    #[test]
    fn indexing_round_trips() {
        let m = TruncatedModel::literal(rs(), 12, Boundary::Reflecting);
        let all: Vec<State> = m.states().collect();
        assert_eq!(all.len(), m.len());
        let mut brute = 0;
        for x in 0..=12u32 {
            for y in 0..=12 - x {
                for sh in [Sheet::Serve1, Sheet::Serve2] {
                    brute += State::new_unchecked(x, y, sh).is_valid() as usize;
                }
            }
        }
        assert_eq!(brute, m.len());
        for (i, s) in all.iter().enumerate() {
            assert_eq!(m.index(*s), Some(i));
            assert_eq!(m.state(i), Some(*s));
        }
        assert_eq!(m.index(State::new_unchecked(13, 0, Sheet::Serve1)), None);
        assert_eq!(m.index(State::new_unchecked(0, 3, Sheet::Serve1)), None);
    }

    #[test]
    fn block_solver_matches_dense() {
        let p = rs();
        let m = TruncatedModel::literal(p, 7, Boundary::Absorbing);
        let rows = |s: State| m.truncate(twisted_kernel_row(&p, s).unwrap());
        let sys = LevelSystem::assemble(1, 7, rows);
        let dense = sys.to_dense();
        let n = dense.nrows();
        let rhs = DVector::from_fn(n, |i, _| ((i * 7 + 3) % 11) as f64 - 5.0);
        let want = dense.clone().lu().solve(&rhs).unwrap();
        let mut blocks = Vec::new();
        let mut at = 0;
        for k in 1..=7 {
            let sz = TruncatedModel::level_size(k);
            blocks.push(rhs.rows(at, sz).into_owned());
            at += sz;
        }
        let got: Vec<f64> = sys.solve(blocks.clone()).unwrap().into_iter().flat_map(|v| v.iter().copied().collect::<Vec<_>>()).collect();
        for i in 0..n {
            assert_abs_diff_eq!(got[i], want[i], epsilon = 1e-12);
        }
        let sys_t = LevelSystem::assemble(1, 7, rows).transpose();
        let want_t = dense.transpose().lu().solve(&rhs).unwrap();
        let got_t: Vec<f64> = sys_t.solve(blocks).unwrap().into_iter().flat_map(|v| v.iter().copied().collect::<Vec<_>>()).collect();
        for i in 0..n {
            assert_abs_diff_eq!(got_t[i], want_t[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn stationary_basics() {
        let p = ss();
        let pi = stationary_truncated(&p, 40).unwrap();
        assert_abs_diff_eq!(pi.get(State::ORIGIN), 2.0 / 11.0, epsilon = 1e-9);
        let lhs = p.lambda() * pi.get(State::ORIGIN);
        let rhs = p.mu * (pi.get(State::new_unchecked(1, 0, Sheet::Serve1)) + pi.get(State::new_unchecked(0, 1, Sheet::Serve2)));
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-14);
        for k in 0..=30 {
            let exact = (1.0 - p.rho()) * p.rho().powi(k as i32);
            assert!((pi.level_marginal(k) / exact - 1.0).abs() < 1e-6, "level {k}");
        }
        assert!(pi.tail_bound <= RIM_TOLERANCE * 1.0001);
    }

    #[test]
    fn literal_rim_shows_truncation_bias() {
        let p = ss();
        let m = TruncatedModel::literal(p, 40, Boundary::Reflecting);
        let pi = stationary_on(&m).unwrap();
        let exact = |k: i32| (1.0 - p.rho()) * p.rho().powi(k) / (1.0 - p.rho().powi(41));
        for k in [0, 10, 30] {
            assert_abs_diff_eq!(pi.level_marginal(k as u32) / exact(k), 1.0, epsilon = 1e-10);
        }
        assert!(stationary_on(&TruncatedModel::literal(p, 40, Boundary::Absorbing)).is_err());
        assert!(stationary_truncated(&p, 1).is_err());
    }

    #[test]
    fn green_level_sums() {
        for p in [rs(), ss()] {
            let g = taboo_green(&p, 30).unwrap();
            for k in 1..=30 {
                assert_abs_diff_eq!(g.level_sum(k), 1.0, epsilon = 1e-8);
            }
        }
        assert!(taboo_green_exact(&rs(), 41, 40).is_err());
        assert!(taboo_green_exact(&rs(), 0, 40).is_err());
    }

    #[test]
    fn representation_identity() {
        for p in [rs(), ss()] {
            assert!(representation_check(&p, 10, 40).unwrap() < 1e-6);
        }
    }

    #[test]
    fn first_passage_exact() {
        for p in [rs(), ss()] {
            let r = first_passage_check(&p, 15, 40).unwrap();
            assert!(r.max_deviation < 1e-10, "{r:?}");
            assert_eq!(r.states_checked, 14 * 15);
        }
        assert_eq!(h_alpha(&rs(), 15, 0), 0.0);
        assert_abs_diff_eq!(h_alpha(&rs(), 15, 15), 1.0, epsilon = 1e-15);
        assert_eq!(first_passage_check(&rs(), 1, 40).unwrap().max_deviation, 0.0);
    }

    #[test]
    fn lyapunov_ray_ray() {
        let r = lyapunov_drift_check(&rr(), 30).unwrap();
        assert_abs_diff_eq!(r.alpha_e, 4.343146, epsilon = 1e-6);
        assert_abs_diff_eq!(r.beta_e, 2.828427, epsilon = 1e-6);
        assert_abs_diff_eq!(r.r, 0.098645, epsilon = 1e-6);
        assert!(r.holds);
        assert!(r.sheet2_residual < 1e-12);
        assert!(r.sheet1_deviation < 1e-12);
        let e = lyapunov_drift_check(&rs(), 30).unwrap_err();
        assert!(e.to_string().contains("R2 violated"), "{e}");
        let e = lyapunov_drift_check(&ss(), 30).unwrap_err();
        assert!(e.to_string().contains("R1 violated"), "{e}");
    }

    #[test]
    fn chang_down() {
        let p = rs();
        let a = chang_down_quantities(&p, 40).unwrap();
        assert!(a.b.is_finite() && a.b > 0.0);
        assert!(a.max_violation <= 1e-10);
        assert!(a.equality_deviation < 1e-10);
        for k in 1..20 {
            for s in level_states(k) {
                let ind = on_delta(s) as u8 as f64;
                assert_abs_diff_eq!(a.g_e.get(s), ind + a.h_e.get(s), epsilon = 1e-10);
            }
        }
        let b = chang_down_quantities(&p, 50).unwrap();
        assert!((b.b / a.b - 1.0).abs() < 0.01);
        assert!(chang_down_quantities(&ss(), 40).is_err());
    }

    #[test]
    fn free_green_oracle() {
        let p = rs();
        let t = p.twisted();
        let g = |z: [i64; 2]| free_green(&p, z);
        for z in [[0, 0], [3, 2], [-2, 4], [5, 0], [1, 7]] {
            let back = t.lt1 * g([z[0] - 1, z[1]]) + t.lt2 * g([z[0], z[1] - 1]) + t.mt * g([z[0] + 1, z[1]]);
            let delta = if z == [0, 0] { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(g(z), delta + back, epsilon = 1e-12);
        }
        assert_eq!(g([0, -1]), 0.0);
    }

    #[test]
    fn uniform_bound() {
        let r = uniform_bound_check(&rs(), 10..=25).unwrap();
        let early = r.per_level.iter().filter(|e| e.0 <= 15).map(|e| e.1).fold(0.0, f64::max);
        let late = r.per_level.iter().filter(|e| e.0 > 20).map(|e| e.1).fold(0.0, f64::max);
        assert!(r.max_ratio.is_finite());
        assert!(late <= 1.5 * early, "{r:?}");
        assert!(uniform_bound_check(&ss(), 10..=12).is_err());
    }

    #[test]
    fn escape_exact() {
        let p = rs();
        let t = p.twisted();
        let z = State::new_unchecked(3, 0, Sheet::Serve1);
        assert_abs_diff_eq!(
            escape_probability_exact(&p, z).unwrap(),
            t.lt2 * (1.0 - (t.mt / t.lt1).powi(3)),
            epsilon = 1e-15
        );
        assert_eq!(escape_probability_exact(&ss(), z).unwrap(), 0.0);
        assert!(escape_probability_exact(&p, State::new_unchecked(3, 1, Sheet::Serve1)).is_err());
    }

    #[test]
    fn csv_export() {
        let g = taboo_green(&rs(), 3).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x,y,sheet,value");
        assert_eq!(lines.len(), 1 + TruncatedModel::offset(4));
        assert!(lines[2].starts_with("1,0,1,"));
    }

}

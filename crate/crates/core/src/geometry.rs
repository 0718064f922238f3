//! Egg curves, special points, regime classification and the direction twist solver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatticeStep, Params, Sheet, TwistedRates};
use crate::scalar::{lit, sqrt_eps, Real};

/// Level curve `Phi_s(alpha, beta) = 1` of one sheet's free kernel transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Egg<T> {
    pub sheet: Sheet,
    pub params: Params<T>,
}

impl<T: Real> Egg<T> {
    pub fn new(params: Params<T>, sheet: Sheet) -> Self {
        Egg { sheet, params }
    }

    pub fn eval(&self, a: T, b: T) -> T {
        let p = &self.params;
        match self.sheet {
            Sheet::Serve1 => p.lambda1 * a + p.lambda2 * b + p.mu / a,
            Sheet::Serve2 => p.lambda1 * a + p.lambda2 * b + p.mu / b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecialPoints<T> {
    pub alpha_t: T,
    pub beta_t: T,
    pub alpha_e: T,
    pub beta_e: T,
    pub gamma_t: T,
    pub delta_t: T,
    pub gamma_e: T,
    pub r_minus: T,
    pub r_plus: T,
}

pub fn special_points<T: Real>(p: &Params<T>) -> SpecialPoints<T> {
    let (l1, l2, mu) = (p.lambda1, p.lambda2, p.mu);
    let two: T = lit(2.0);
    let alpha_t = (mu / l1).sqrt();
    let beta_t = (T::one() - two * (mu * l1).sqrt()) / l2;
    let beta_e = (mu / l2).sqrt();
    let alpha_e = (T::one() - two * (mu * l2).sqrt()) / l1;
    assert!(beta_t > T::zero() && alpha_e > T::zero(), "degenerate egg for {p:?}");
    let gamma_t = (T::one() - l2 * beta_t - mu / beta_t) / l1;
    let delta_t = (T::one() - l1 * gamma_t - mu / gamma_t) / l2;
    let gamma_e = (T::one() - l1 * alpha_e - mu / alpha_e) / l2;
    let disc = T::one() - lit::<T>(4.0) * l1 * mu;
    assert!(disc >= T::zero(), "degenerate x-axis quadratic for {p:?}");
    let r_minus = (T::one() - disc.sqrt()) / (two * l1);
    let r_plus = (T::one() + disc.sqrt()) / (two * l1);
    SpecialPoints { alpha_t, beta_t, alpha_e, beta_e, gamma_t, delta_t, gamma_e, r_minus, r_plus }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Ray,
    Spiral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subcase {
    Cascade,
    Bridge,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport<T> {
    pub sheet1: Regime,
    pub sheet2: Regime,
    pub subcase: Option<Subcase>,
    pub special: SpecialPoints<T>,
    pub twisted: TwistedRates<T>,
}

impl<T> RegimeReport<T> {
    pub fn is_spiral_spiral(&self) -> bool {
        self.sheet1 == Regime::Spiral && self.sheet2 == Regime::Spiral
    }
}

/// The four equivalent sheet-1 ray tests.
pub fn ray_tests<T: Real>(p: &Params<T>) -> [bool; 4] {
    let t = p.twisted();
    let sp = special_points(p);
    [
        t.lt1 > t.mt,
        p.rho_inv() * p.lambda1 > p.lambda(),
        (p.mu * p.lambda1).sqrt() > p.lambda(),
        sp.alpha_t < p.rho_inv(),
    ]
}

pub fn classify<T: Real>(p: &Params<T>) -> RegimeReport<T> {
    let twisted = p.twisted();
    let special = special_points(p);
    let reg = |r: bool| if r { Regime::Ray } else { Regime::Spiral };
    let sheet1 = reg(twisted.lt1 > twisted.mt);
    let sheet2 = reg(twisted.lt2 > twisted.mt);
    let subcase = (sheet1 == Regime::Ray).then(|| {
        if special.beta_t <= special.beta_e {
            Subcase::Cascade
        } else {
            Subcase::Bridge
        }
    });
    RegimeReport { sheet1, sheet2, subcase, special, twisted }
}

/// Finite-support distribution on `Z^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Increments<T> {
    pub support: Vec<([i64; 2], T)>,
}

impl<T: Real> Increments<T> {
    pub fn new(points: impl IntoIterator<Item = ([i64; 2], T)>) -> Result<Self> {
        let mut support: Vec<([i64; 2], T)> = Vec::new();
        for (v, w) in points {
            if !(w >= T::zero()) || !w.is_finite() {
                return Err(Error::InvalidInput(format!("negative or non-finite mass {w} at {v:?}")));
            }
            if w == T::zero() {
                continue;
            }
            match support.iter_mut().find(|e| e.0 == v) {
                Some(e) => e.1 = e.1 + w,
                None => support.push((v, w)),
            }
        }
        if support.is_empty() {
            return Err(Error::InvalidInput("empty increment distribution".into()));
        }
        Ok(Increments { support })
    }

    pub fn mass(&self, v: [i64; 2]) -> T {
        self.support.iter().filter(|e| e.0 == v).map(|e| e.1).sum()
    }

    pub fn total(&self) -> T {
        self.support.iter().map(|e| e.1).sum()
    }

    pub fn mean(&self) -> [T; 2] {
        let mut m = [T::zero(); 2];
        for &(v, w) in &self.support {
            m[0] = m[0] + w * fl(v[0]);
            m[1] = m[1] + w * fl(v[1]);
        }
        m
    }

    pub fn phi(&self, th: [T; 2]) -> T {
        self.support.iter().map(|&(v, w)| w * dot(th, vf(v)).exp()).sum()
    }

    /// Value, gradient and Hessian of `phi`.
    pub fn phi_derivs(&self, th: [T; 2]) -> (T, [T; 2], [[T; 2]; 2]) {
        let mut f = T::zero();
        let mut g = [T::zero(); 2];
        let mut h = [[T::zero(); 2]; 2];
        for &(v, w) in &self.support {
            let x = vf(v);
            let e = w * dot(th, x).exp();
            f = f + e;
            for i in 0..2 {
                g[i] = g[i] + e * x[i];
                for j in 0..2 {
                    h[i][j] = h[i][j] + e * x[i] * x[j];
                }
            }
        }
        (f, g, h)
    }

    /// Exponentially tilted masses `w(v) e^{theta . v}`.
    pub fn tilt(&self, th: [T; 2]) -> Self {
        Increments {
            support: self.support.iter().map(|&(v, w)| (v, w * dot(th, vf(v)).exp())).collect(),
        }
    }

    /// `(nu + delta_0) / 2`.
    pub fn lazy(&self) -> Self {
        let half: T = lit(0.5);
        let mut support: Vec<_> = self.support.iter().map(|&(v, w)| (v, w * half)).collect();
        match support.iter_mut().find(|e| e.0 == [0, 0]) {
            Some(e) => e.1 = e.1 + half,
            None => support.push(([0, 0], half)),
        }
        Increments { support }
    }

    /// Total variation distance, treating missing points as zero mass.
    pub fn tv_distance(&self, other: &Self) -> T {
        let mut pts: Vec<[i64; 2]> = self.support.iter().map(|e| e.0).collect();
        for e in &other.support {
            if !pts.contains(&e.0) {
                pts.push(e.0);
            }
        }
        let s: T = pts.iter().map(|&v| (self.mass(v) - other.mass(v)).abs()).sum();
        s * lit(0.5)
    }

    pub fn to_steps(&self) -> Vec<LatticeStep<T>> {
        self.support.clone()
    }
}

fn fl<T: Real>(i: i64) -> T {
    T::from_i64(i).unwrap()
}

fn vf<T: Real>(v: [i64; 2]) -> [T; 2] {
    [fl(v[0]), fl(v[1])]
}

fn dot<T: Real>(a: [T; 2], b: [T; 2]) -> T {
    a[0] * b[0] + a[1] * b[1]
}

fn cross<T: Real>(a: [T; 2], b: [T; 2]) -> T {
    a[0] * b[1] - a[1] * b[0]
}

fn norm<T: Real>(a: [T; 2]) -> T {
    a[0].hypot(a[1])
}

fn unit<T: Real>(a: [T; 2]) -> Result<[T; 2]> {
    let n = norm(a);
    if !(n > T::zero()) || !n.is_finite() {
        return Err(Error::InvalidInput("direction must be a nonzero finite vector".into()));
    }
    Ok([a[0] / n, a[1] / n])
}

/// Normalizes a direction so its coordinates' absolute values sum to one.
pub fn l1_normalize<T: Real>(a: [T; 2]) -> [T; 2] {
    let n = a[0].abs() + a[1].abs();
    [a[0] / n, a[1] / n]
}

/// Free increments of `K` on one sheet.
pub fn sheet_increments<T: Real>(p: &Params<T>, sheet: Sheet) -> Increments<T> {
    let service = match sheet {
        Sheet::Serve1 => [-1, 0],
        Sheet::Serve2 => [0, -1],
    };
    Increments { support: vec![([1, 0], p.lambda1), ([0, 1], p.lambda2), (service, p.mu)] }
}

/// Free increments of the twisted kernel on one sheet.
pub fn twisted_sheet_increments<T: Real>(p: &Params<T>, sheet: Sheet) -> Increments<T> {
    let t = p.twisted();
    let service = match sheet {
        Sheet::Serve1 => [-1, 0],
        Sheet::Serve2 => [0, -1],
    };
    Increments { support: vec![([1, 0], t.lt1), ([0, 1], t.lt2), (service, t.mt)] }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwistSolution<T> {
    pub theta_star: [T; 2],
    pub lambda_star: T,
    pub twisted_probs: Increments<T>,
    pub mean: [T; 2],
    pub on_face: bool,
}

impl<T: Real> TwistSolution<T> {
    pub fn exp_theta(&self) -> [T; 2] {
        [self.theta_star[0].exp(), self.theta_star[1].exp()]
    }
}

/// Shape of the closed convex cone generated by the support.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConeKind {
    Plane,
    HalfPlane,
    Sector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportCone {
    pub kind: ConeKind,
    /// Generators of the two faces, counterclockwise start then end.
    pub faces: Option<[[i64; 2]; 2]>,
    start_angle: f64,
    span: f64,
}

const FACE_TOL: f64 = 1e-9;

impl SupportCone {
    pub fn of<T: Real>(inc: &Increments<T>) -> Result<Self> {
        let mut pts: Vec<([i64; 2], f64)> = inc
            .support
            .iter()
            .filter(|e| e.0 != [0, 0])
            .map(|e| (e.0, (e.0[1] as f64).atan2(e.0[0] as f64)))
            .collect();
        if pts.is_empty() {
            return Err(Error::InvalidInput("support has no nonzero increments".into()));
        }
        pts.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let n = pts.len();
        let mut best = (0usize, f64::MIN);
        for i in 0..n {
            let gap = if i + 1 < n { pts[i + 1].1 - pts[i].1 } else { pts[0].1 + std::f64::consts::TAU - pts[i].1 };
            if gap > best.1 {
                best = (i, gap);
            }
        }
        let pi = std::f64::consts::PI;
        let (i, gap) = best;
        let end = pts[i];
        let start = pts[(i + 1) % n];
        let kind = if gap < pi - 1e-12 {
            ConeKind::Plane
        } else if gap <= pi + 1e-12 {
            ConeKind::HalfPlane
        } else {
            ConeKind::Sector
        };
        if kind == ConeKind::Plane {
            return Ok(SupportCone { kind, faces: None, start_angle: 0.0, span: std::f64::consts::TAU });
        }
        Ok(SupportCone {
            kind,
            faces: Some([start.0, end.0]),
            start_angle: start.1,
            span: std::f64::consts::TAU - gap,
        })
    }

    /// `Ok(None)` for interior directions, `Ok(Some(face))` within tolerance of a face.
    pub fn locate(&self, dir: [f64; 2]) -> Result<Option<[i64; 2]>> {
        let Some(faces) = self.faces else { return Ok(None) };
        let ang = dir[1].atan2(dir[0]);
        let rel = (ang - self.start_angle).rem_euclid(std::f64::consts::TAU);
        let rel = if rel > std::f64::consts::TAU - FACE_TOL { rel - std::f64::consts::TAU } else { rel };
        if rel.abs() <= FACE_TOL {
            return Ok(Some(faces[0]));
        }
        if (rel - self.span).abs() <= FACE_TOL {
            return Ok(Some(faces[1]));
        }
        if rel < 0.0 || rel > self.span {
            return Err(Error::UnreachableDirection(format!(
                "direction ({:.6},{:.6}) lies outside the support cone",
                dir[0], dir[1]
            )));
        }
        Ok(None)
    }
}

/// Twist `theta*` with `phi(theta*) = 1` whose twisted mean points along `direction`.
pub fn twist_toward<T: Real>(inc: &Increments<T>, direction: [T; 2]) -> Result<TwistSolution<T>> {
    let beta = unit(direction)?;
    let cone = SupportCone::of(inc)?;
    let bf = [beta[0].to_f64().unwrap(), beta[1].to_f64().unwrap()];
    if let Some(face) = cone.locate(bf)? {
        return solve_face(inc, unit(vf::<T>(face))?);
    }
    let theta = match fast_layout(inc) {
        Some((swap, [p0, pe, pn, pw])) => {
            let b = if swap { [beta[1], beta[0]] } else { beta };
            let t = fast_three_point(p0, pe, pn, pw, b);
            if swap {
                [t[1], t[0]]
            } else {
                t
            }
        }
        None => generic_theta(inc, beta)?,
    };
    Ok(finish(inc, theta, false))
}

/// Same as [`twist_toward`] but always uses the generic nested-minimization path.
pub fn twist_toward_generic<T: Real>(inc: &Increments<T>, direction: [T; 2]) -> Result<TwistSolution<T>> {
    let beta = unit(direction)?;
    let cone = SupportCone::of(inc)?;
    let bf = [beta[0].to_f64().unwrap(), beta[1].to_f64().unwrap()];
    if let Some(face) = cone.locate(bf)? {
        return solve_face(inc, unit(vf::<T>(face))?);
    }
    let theta = generic_theta(inc, beta)?;
    Ok(finish(inc, theta, false))
}

/// Twist restricted to the supporting line through `face_direction`.
///
/// The support must lie on one side of that line; the restricted law is the
/// mass on the line itself.
pub fn twist_toward_face<T: Real>(inc: &Increments<T>, face_direction: [T; 2]) -> Result<TwistSolution<T>> {
    let beta = unit(face_direction)?;
    let tol: T = lit(1e-12);
    let sides: Vec<T> = inc.support.iter().map(|e| cross(beta, vf(e.0))).collect();
    let left = sides.iter().all(|&c| c >= -tol);
    let right = sides.iter().all(|&c| c <= tol);
    if !(left || right) {
        return Err(Error::InvalidInput("direction is not on a face of the support cone".into()));
    }
    solve_face(inc, beta)
}

fn finish<T: Real>(inc: &Increments<T>, theta: [T; 2], on_face: bool) -> TwistSolution<T> {
    let twisted = inc.tilt(theta);
    let mean = twisted.mean();
    TwistSolution { theta_star: theta, lambda_star: norm(mean), twisted_probs: twisted, mean, on_face }
}

/// Recognizes supports `{0?, e1, e2, -e1}` (unswapped) and `{0?, e1, e2, -e2}` (swapped).
fn fast_layout<T: Real>(inc: &Increments<T>) -> Option<(bool, [T; 4])> {
    let allowed_a = [[0, 0], [1, 0], [0, 1], [-1, 0]];
    let allowed_b = [[0, 0], [1, 0], [0, 1], [0, -1]];
    let pos = |v: [i64; 2]| inc.mass(v) > T::zero();
    if inc.support.iter().all(|e| allowed_a.contains(&e.0)) && pos([1, 0]) && pos([0, 1]) && pos([-1, 0]) {
        return Some((false, [inc.mass([0, 0]), inc.mass([1, 0]), inc.mass([0, 1]), inc.mass([-1, 0])]));
    }
    if inc.support.iter().all(|e| allowed_b.contains(&e.0)) && pos([1, 0]) && pos([0, 1]) && pos([0, -1]) {
        return Some((true, [inc.mass([0, 0]), inc.mass([0, 1]), inc.mass([1, 0]), inc.mass([0, -1])]));
    }
    None
}

/// Root-find on the egg `p0 + pe a + pn b + pw / a = 1` for the support `{e1, e2, -e1}`.
fn fast_three_point<T: Real>(p0: T, pe: T, pn: T, pw: T, beta: [T; 2]) -> [T; 2] {
    let two: T = lit(2.0);
    let q = T::one() - p0;
    let disc = (q * q - lit::<T>(4.0) * pe * pw).max(T::zero());
    let r_lo = (q - disc.sqrt()) / (two * pe);
    let r_hi = (q + disc.sqrt()) / (two * pe);
    let b_of = |a: T| ((q - pe * a - pw / a) / pn).max(T::zero());
    let target = beta[1].atan2(beta[0]);
    let angle = |a: T| (pn * b_of(a)).atan2(pe * a - pw / a);
    let (mut lo, mut hi) = (r_lo, r_hi);
    for _ in 0..200 {
        let mid = (lo + hi) / two;
        if mid <= lo || mid >= hi {
            break;
        }
        if angle(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut a = (lo + hi) / two;
    for _ in 0..4 {
        let f = (pe * a - pw / a) * beta[1] - pn * b_of(a) * beta[0];
        let df = (pe + pw / (a * a)) * beta[1] + (pe - pw / (a * a)) * beta[0];
        if df == T::zero() {
            break;
        }
        let next = a - f / df;
        if next > r_lo && next < r_hi {
            a = next;
        }
    }
    [a.ln(), b_of(a).ln()]
}

fn solve2<T: Real>(m: [[T; 2]; 2], r: [T; 2]) -> Option<[T; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det == T::zero() || !det.is_finite() {
        return None;
    }
    Some([(r[0] * m[1][1] - m[0][1] * r[1]) / det, (m[0][0] * r[1] - r[0] * m[1][0]) / det])
}

/// Largest `t` with `t * beta` in the convex hull of the support.
fn hull_reach<T: Real>(inc: &Increments<T>, beta: [T; 2]) -> T {
    let mut pts: Vec<[i64; 2]> = inc.support.iter().map(|e| e.0).collect();
    pts.sort();
    pts.dedup();
    let cross_i = |o: [i64; 2], a: [i64; 2], b: [i64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut lower: Vec<[i64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross_i(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[i64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross_i(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    let hull = lower;
    let mut best = T::infinity();
    let tiny: T = lit(1e-12);
    for i in 0..hull.len() {
        let a = vf::<T>(hull[i]);
        let b = vf::<T>(hull[(i + 1) % hull.len()]);
        let e = [b[0] - a[0], b[1] - a[1]];
        let den = cross(beta, e);
        if den.abs() <= tiny {
            continue;
        }
        let t = cross(a, e) / den;
        let s = cross(a, beta) / den;
        if t > tiny && s >= -tiny && s <= T::one() + tiny && t < best {
            best = t;
        }
    }
    best
}

/// `log phi`, tilted mean and tilted covariance, shifted to avoid overflow and cancellation.
fn log_moments<T: Real>(inc: &Increments<T>, th: [T; 2]) -> (T, [T; 2], [[T; 2]; 2]) {
    let live = inc.support.iter().filter(|e| e.1 > T::zero());
    let shift = live.clone().map(|&(v, _)| dot(th, vf(v))).fold(T::neg_infinity(), T::max);
    let mut f = T::zero();
    let mut m = [T::zero(); 2];
    for &(v, w) in live.clone() {
        let e = w * (dot(th, vf(v)) - shift).exp();
        f = f + e;
        m = [m[0] + e * vf::<T>(v)[0], m[1] + e * vf::<T>(v)[1]];
    }
    m = [m[0] / f, m[1] / f];
    let mut c = [[T::zero(); 2]; 2];
    for &(v, w) in live {
        let e = w * (dot(th, vf(v)) - shift).exp() / f;
        let d = [vf::<T>(v)[0] - m[0], vf::<T>(v)[1] - m[1]];
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] = c[i][j] + e * d[i] * d[j];
            }
        }
    }
    (f.ln() + shift, m, c)
}

/// Maximizer of `theta . y - log phi(theta)` by damped Newton.
fn legendre_argmax<T: Real>(inc: &Increments<T>, y: [T; 2], start: [T; 2]) -> Option<[T; 2]> {
    let obj = |th: [T; 2]| dot(th, y) - log_moments(inc, th).0;
    let tol: T = T::epsilon().sqrt() * lit(1e-2);
    let mut th = start;
    for _ in 0..200 {
        let (_, gl, hl) = log_moments(inc, th);
        let grad = [y[0] - gl[0], y[1] - gl[1]];
        if norm(grad) < tol {
            return Some(th);
        }
        let mut step = solve2(hl, grad)?;
        let len = norm(step);
        let cap: T = lit(2.0);
        if len > cap {
            step = [step[0] * cap / len, step[1] * cap / len];
        }
        let base = obj(th);
        let mut t = T::one();
        let mut moved = false;
        for _ in 0..60 {
            let cand = [th[0] + t * step[0], th[1] + t * step[1]];
            let v = obj(cand);
            if v.is_finite() && v >= base {
                th = cand;
                moved = true;
                break;
            }
            t = t * lit(0.5);
        }
        if !moved {
            return Some(th);
        }
    }
    Some(th)
}

fn generic_theta<T: Real>(inc: &Increments<T>, beta: [T; 2]) -> Result<[T; 2]> {
    let work = if inc.mass([0, 0]) > T::zero() { inc.clone() } else { inc.lazy() };
    let lam_max = hull_reach(&work, beta);
    if !lam_max.is_finite() {
        return Err(Error::Numerical("direction does not meet the support hull".into()));
    }
    let mut th = [T::zero(); 2];
    let eval = |lam: T, th: &mut [T; 2]| -> Result<T> {
        let y = [lam * beta[0], lam * beta[1]];
        *th = legendre_argmax(&work, y, *th).ok_or_else(|| Error::Numerical("Legendre step failed".into()))?;
        Ok(log_moments(&work, *th).0)
    };
    let (mut lo, mut hi) = (lam_max * lit(1e-6), lam_max * (T::one() - lit(1e-9)));
    if eval(lo, &mut th)? >= T::zero() || eval(hi, &mut th)? <= T::zero() {
        return Err(Error::Numerical("no sign change of log phi along the direction".into()));
    }
    let mut theta_lo = {
        let mut t = [T::zero(); 2];
        eval(lo, &mut t)?;
        t
    };
    for _ in 0..200 {
        let mid = (lo + hi) * lit(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        let mut t = theta_lo;
        if eval(mid, &mut t)? < T::zero() {
            lo = mid;
            theta_lo = t;
        } else {
            hi = mid;
        }
    }
    Ok(polish(inc, theta_lo, beta))
}

/// 2-D Newton on `(phi - 1, grad phi x beta)`.
fn polish<T: Real>(inc: &Increments<T>, start: [T; 2], beta: [T; 2]) -> [T; 2] {
    let mut th = start;
    let resid = |th: [T; 2]| {
        let (f, g, _) = inc.phi_derivs(th);
        (f - T::one()).abs() + cross(g, beta).abs()
    };
    for _ in 0..20 {
        let (f, g, h) = inc.phi_derivs(th);
        let r = [f - T::one(), cross(g, beta)];
        let jac = [
            [g[0], g[1]],
            [h[0][0] * beta[1] - h[1][0] * beta[0], h[0][1] * beta[1] - h[1][1] * beta[0]],
        ];
        let Some(step) = solve2(jac, r) else { break };
        let cand = [th[0] - step[0], th[1] - step[1]];
        if !(resid(cand) < resid(th)) {
            break;
        }
        th = cand;
    }
    th
}

fn solve_face<T: Real>(inc: &Increments<T>, e: [T; 2]) -> Result<TwistSolution<T>> {
    let tol: T = lit(1e-12);
    let on_line: Vec<(T, T, [i64; 2])> = inc
        .support
        .iter()
        .filter(|(v, _)| cross(e, vf(*v)).abs() <= tol * norm(vf::<T>(*v)).max(T::one()))
        .map(|&(v, w)| (dot(vf(v), e), w, v))
        .collect();
    if !on_line.iter().any(|&(s, w, _)| s > T::zero() && w > T::zero()) {
        return Err(Error::NoFaceMass);
    }
    let f = |t: T| on_line.iter().map(|&(s, w, _)| w * (t * s).exp()).sum::<T>();
    let df = |t: T| on_line.iter().map(|&(s, w, _)| w * s * (t * s).exp()).sum::<T>();
    let two: T = lit(2.0);
    let mut left = T::zero();
    if on_line.iter().any(|&(s, w, _)| s < T::zero() && w > T::zero()) {
        let (mut a, mut b) = (-T::one(), T::one());
        while df(a) > T::zero() {
            a = a * two;
        }
        while df(b) < T::zero() {
            b = b * two;
        }
        for _ in 0..200 {
            let m = (a + b) / two;
            if m <= a || m >= b {
                break;
            }
            if df(m) < T::zero() {
                a = m;
            } else {
                b = m;
            }
        }
        left = (a + b) / two;
    } else {
        while f(left) > T::one() {
            left = left - T::one();
        }
    }
    let mut right = left + T::one();
    while f(right) < T::one() {
        right = right + (right - left);
    }
    let mut lo = left;
    let mut hi = right;
    for _ in 0..200 {
        let m = (lo + hi) / two;
        if m <= lo || m >= hi {
            break;
        }
        if f(m) < T::one() {
            lo = m;
        } else {
            hi = m;
        }
    }
    let mut t = (lo + hi) / two;
    for _ in 0..3 {
        let d = df(t);
        if d > T::zero() {
            t = t - (f(t) - T::one()) / d;
        }
    }
    let theta = [t * e[0], t * e[1]];
    let twisted = Increments {
        support: on_line.iter().map(|&(s, w, v)| (v, w * (t * s).exp())).collect(),
    };
    let lam = df(t);
    Ok(TwistSolution {
        theta_star: theta,
        lambda_star: lam,
        twisted_probs: twisted,
        mean: [lam * e[0], lam * e[1]],
        on_face: true,
    })
}

/// Second-order data of a twisted increment law for local limit prefactors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeySpitzerData<T> {
    pub m: [T; 2],
    pub q: [[T; 2]; 2],
    pub sigma: [[T; 2]; 2],
    pub det_q: T,
    pub m_sigma_m: T,
    pub m_l1: T,
}

impl<T: Real> NeySpitzerData<T> {
    /// `[|Q| m.Sigma m]^{-1/2}`.
    pub fn shape_factor(&self) -> T {
        (self.det_q * self.m_sigma_m).sqrt().recip()
    }

    /// `[|Q| m.Sigma m]^{-1/2} (2 pi l / |m|_1)^{-1/2}`.
    pub fn local_factor(&self, level: T) -> T {
        self.shape_factor() / (lit::<T>(2.0) * T::PI() * level / self.m_l1).sqrt()
    }
}

pub fn ney_spitzer_data<T: Real>(inc: &Increments<T>) -> Result<NeySpitzerData<T>> {
    let total = inc.total();
    let raw = inc.mean();
    let m = [raw[0] / total, raw[1] / total];
    let scale: T = inc.support.iter().map(|e| e.1 * norm(vf(e.0))).sum::<T>() / total;
    if norm(m) <= T::epsilon() * lit(64.0) * scale.max(T::one()) {
        return Err(Error::InvalidInput("zero drift: twisted mean must be nonzero".into()));
    }
    let mut q = [[T::zero(); 2]; 2];
    for &(v, w) in &inc.support {
        let d = [fl::<T>(v[0]) - m[0], fl::<T>(v[1]) - m[1]];
        for i in 0..2 {
            for j in 0..2 {
                q[i][j] = q[i][j] + w / total * d[i] * d[j];
            }
        }
    }
    let det_q = q[0][0] * q[1][1] - q[0][1] * q[1][0];
    if !(det_q > T::epsilon() * lit(64.0)) {
        return Err(Error::InvalidInput("singular covariance: support spans a line".into()));
    }
    let sigma = [[q[1][1] / det_q, -q[0][1] / det_q], [-q[1][0] / det_q, q[0][0] / det_q]];
    let sm = [sigma[0][0] * m[0] + sigma[0][1] * m[1], sigma[1][0] * m[0] + sigma[1][1] * m[1]];
    Ok(NeySpitzerData { m, q, sigma, det_q, m_sigma_m: dot(m, sm), m_l1: m[0].abs() + m[1].abs() })
}

/// Exponential cost per unit level of reaching the level line along `direction`.
pub fn action_rate<T: Real>(p: &Params<T>, sheet: Sheet, direction: [T; 2]) -> Result<T> {
    let d = l1_normalize(direction);
    let sol = twist_toward(&sheet_increments(p, sheet), d)?;
    Ok(dot(sol.theta_star, d))
}

/// Direction and rate of the least-action path to the level line on a ray sheet.
pub fn least_action_direction<T: Real>(p: &Params<T>, sheet: Sheet) -> Result<([T; 2], T)> {
    let rep = classify(p);
    let (regime, m) = match sheet {
        Sheet::Serve1 => (rep.sheet1, rep.twisted.m1),
        Sheet::Serve2 => (rep.sheet2, rep.twisted.m2),
    };
    if regime != Regime::Ray {
        return Err(Error::Regime("interior least-action path invalid; spiral regime".into()));
    }
    let d = l1_normalize(m);
    let rate = p.log_rho_inv();
    let f = |t: T| action_rate(p, sheet, [t, T::one() - t]);
    let g: T = lit((5f64.sqrt() - 1.0) / 2.0);
    let (mut a, mut b) = (lit::<T>(1e-6), T::one() - lit(1e-6));
    let mut c = b - g * (b - a);
    let mut e = a + g * (b - a);
    let (mut fc, mut fe) = (f(c)?, f(e)?);
    for _ in 0..200 {
        if b - a < T::epsilon() * lit(16.0) {
            break;
        }
        if fc < fe {
            b = e;
            e = c;
            fe = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + g * (b - a);
            fe = f(e)?;
        }
    }
    let t = (a + b) / lit(2.0);
    let tol = sqrt_eps::<T>() * lit(1e3);
    let best = f(t)?;
    if (t - d[0]).abs() > tol || (best - rate).abs() > tol {
        return Err(Error::Numerical(format!(
            "least-action minimizer {t} does not match drift direction {}",
            d[0]
        )));
    }
    Ok((d, rate))
}

/// Mean growth factors of the twisted spiral per half-loop.
pub fn spiral_growth_factors<T: Real>(p: &Params<T>) -> Result<(T, T)> {
    if !classify(p).is_spiral_spiral() {
        return Err(Error::Regime("spiral growth factors need the spiral-spiral regime".into()));
    }
    let (l, m, ri) = (p.lambda(), p.mu, p.rho_inv());
    Ok(((m - l) / (l - ri * p.lambda1), (m - l) / (l - ri * p.lambda2)))
}

/// Invariant measure `psi0(y) gamma_T^{-x} beta_T^{-y}` of the sheet-2 free kernel, vanishing on the x-axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CascadeMeasure<T> {
    pub gamma_t: T,
    pub beta_t: T,
    pub ratio: T,
}

impl<T: Real> CascadeMeasure<T> {
    pub fn new(p: &Params<T>) -> Self {
        let sp = special_points(p);
        let d = sp.beta_t * p.lambda2;
        let u = p.mu / sp.beta_t;
        CascadeMeasure { gamma_t: sp.gamma_t, beta_t: sp.beta_t, ratio: d / u }
    }

    pub fn eval(&self, z: [i64; 2]) -> T {
        if z[1] < 0 {
            return T::zero();
        }
        let psi0 = T::one() - self.ratio.powi(z[1] as i32);
        psi0 * self.gamma_t.powi(-z[0] as i32) * self.beta_t.powi(-z[1] as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{reversal_harmonic_residual, time_reversal_row};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rs() -> Params<f64> {
        Params::new(0.3, 0.05, 0.65).unwrap()
    }

    #[test]
    fn classify_examples() {
        let r = classify(&rs());
        assert_eq!((r.sheet1, r.sheet2, r.subcase), (Regime::Ray, Regime::Spiral, Some(Subcase::Cascade)));
        let r = classify(&Params::new(0.3, 0.15, 0.55).unwrap());
        assert!(r.is_spiral_spiral());
        assert_eq!(r.subcase, None);
        let r = classify(&Params::new(0.1, 0.1, 0.8).unwrap());
        assert_eq!((r.sheet1, r.sheet2), (Regime::Ray, Regime::Ray));
        let r = classify(&Params::new(0.02, 0.0001, 0.9799).unwrap());
        assert_eq!((r.sheet1, r.subcase), (Regime::Ray, Some(Subcase::Bridge)));
    }

    #[test]
    fn special_point_values() {
        let p = rs();
        let s = special_points(&p);
        assert_abs_diff_eq!(s.alpha_t, 1.471960, epsilon = 1e-5);
        assert_abs_diff_eq!(s.beta_t, 2.336476, epsilon = 1e-5);
        assert_abs_diff_eq!(s.beta_e, 3.605551, epsilon = 1e-5);
        assert_abs_diff_eq!(s.alpha_e, 2.131482, epsilon = 1e-5);
        assert_abs_diff_eq!(s.gamma_t, 2.016600, epsilon = 1e-5);
        assert_abs_diff_eq!(s.delta_t, 1.453815, epsilon = 2e-4);
        assert_abs_diff_eq!(s.beta_t, 20.0 * (1.0 - 2.0 * 0.195f64.sqrt()), epsilon = 1e-12);
        let c1 = Egg::new(p, Sheet::Serve1);
        let c2 = Egg::new(p, Sheet::Serve2);
        assert_abs_diff_eq!(c1.eval(s.alpha_t, s.beta_t), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c2.eval(s.alpha_e, s.beta_e), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c2.eval(s.gamma_t, s.beta_t), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c1.eval(s.gamma_t, s.delta_t), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c1.eval(s.alpha_e, s.gamma_e), 1.0, epsilon = 1e-12);
        for z in [s.r_minus, s.r_plus] {
            assert_abs_diff_eq!(0.3 * z * z - z + 0.65, 0.0, epsilon = 1e-12);
        }
        assert!(s.r_minus < 1.0 && 1.0 < p.rho_inv() && p.rho_inv() < s.gamma_t);
        assert!(s.gamma_t < s.alpha_e && s.alpha_e < s.r_plus);
        for sheet in [Sheet::Serve1, Sheet::Serve2] {
            let e = Egg::new(p, sheet);
            assert_abs_diff_eq!(e.eval(1.0, 1.0), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(e.eval(p.rho_inv(), p.rho_inv()), 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(special_points(&p).alpha_t, (p.mu / p.lambda1).sqrt(), epsilon = 0.0);
    }

    #[test]
    fn spiral_spiral_needs_rho_above_half() {
        let p = Params::new(0.3, 0.15, 0.55).unwrap();
        assert!(p.rho() > 0.5);
    }

    #[test]
    fn round_trip_geometric_twist() {
        let p = rs();
        let inc = sheet_increments(&p, Sheet::Serve1);
        let sol = twist_toward(&inc, p.twisted().m1).unwrap();
        assert_abs_diff_eq!(sol.theta_star[0], 0.619039, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.theta_star[0], p.log_rho_inv(), epsilon = 1e-10);
        assert_abs_diff_eq!(sol.theta_star[1], p.log_rho_inv(), epsilon = 1e-10);
        let gen = twist_toward_generic(&inc, p.twisted().m1).unwrap();
        assert_abs_diff_eq!(gen.theta_star[0], p.log_rho_inv(), epsilon = 1e-10);
        assert_abs_diff_eq!(gen.theta_star[1], p.log_rho_inv(), epsilon = 1e-10);
    }

    #[test]
    fn north_direction_gives_top_of_egg() {
        let p = rs();
        let s = special_points(&p);
        let sol = twist_toward(&sheet_increments(&p, Sheet::Serve1), [0.0, 1.0]).unwrap();
        let e = sol.exp_theta();
        assert_abs_diff_eq!(e[0], s.alpha_t, epsilon = 1e-10);
        assert_abs_diff_eq!(e[1], s.beta_t, epsilon = 1e-10);
    }

    #[test]
    fn sheet_two_east_direction() {
        let p = rs();
        let s = special_points(&p);
        let sol = twist_toward(&sheet_increments(&p, Sheet::Serve2), [1.0, 0.0]).unwrap();
        let e = sol.exp_theta();
        assert_abs_diff_eq!(e[1], s.beta_e, epsilon = 1e-10);
        assert_abs_diff_eq!(e[0], s.alpha_e, epsilon = 1e-10);
    }

    #[test]
    fn face_formulas() {
        let p = rs();
        let inc = sheet_increments(&p, Sheet::Serve1);
        let sol = twist_toward_face(&inc, [1.0, 0.0]).unwrap();
        let d = (1.0 - 4.0 * 0.3 * 0.65f64).sqrt();
        assert_abs_diff_eq!(sol.exp_theta()[0], 2.448403, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.exp_theta()[0], (1.0 + d) / 0.6, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.mean[0], 0.469042, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.mean[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sol.lambda_star, d, epsilon = 1e-10);
        let w = twist_toward_face(&inc, [-1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(w.exp_theta()[0], (1.0 - d) / 0.6, epsilon = 1e-10);
        let routed = twist_toward(&inc, [1.0, 0.0]).unwrap();
        assert!(routed.on_face);
        assert!(twist_toward_face(&inc, [1.0, 1.0]).is_err());
    }

    #[test]
    fn face_without_mass_errors() {
        let inc = Increments::new([([1, 1], 0.5), ([-1, 1], 0.3), ([0, 0], 0.2)]).unwrap();
        let r = twist_toward(&inc, [0.0, 1.0]);
        assert!(r.is_ok(), "{r:?}");
        let inc = Increments::new([([1, 0], 0.0), ([2, 1], 0.5), ([-1, 1], 0.3), ([0, 0], 0.2)]).unwrap();
        assert!(twist_toward(&inc, [0.0, -1.0]).is_err());
        let inc = Increments::new([([1, 0], 0.2), ([0, 1], 0.3), ([-1, 1], 0.3), ([0, 0], 0.2)]).unwrap();
        assert!(twist_toward_face(&inc, [-1.0, 1.0]).is_ok());
        let inc = Increments::new([([1, 1], 0.3), ([0, 1], 0.3), ([-1, 1], 0.4)]).unwrap();
        assert_eq!(twist_toward_face(&inc, [1.0, 0.0]).unwrap_err(), Error::NoFaceMass);
        let inc = Increments::new([([1, 1], 0.3), ([0, 1], 0.3), ([-1, 1], 0.2), ([0, 0], 0.2)]).unwrap();
        assert_eq!(twist_toward_face(&inc, [1.0, 0.0]).unwrap_err(), Error::NoFaceMass);
    }

    #[test]
    fn unreachable_direction() {
        let inc = sheet_increments(&rs(), Sheet::Serve1);
        assert!(matches!(twist_toward(&inc, [0.3, -1.0]), Err(Error::UnreachableDirection(_))));
    }

    #[test]
    fn continuity_toward_face() {
        let p = rs();
        let inc = sheet_increments(&p, Sheet::Serve1);
        let face = twist_toward_face(&inc, [1.0, 0.0]).unwrap();
        let mut last = f64::INFINITY;
        for ang in [1e-3f64, 1e-4] {
            let s = twist_toward(&inc, [ang.cos(), ang.sin()]).unwrap();
            let tv = s.twisted_probs.tv_distance(&face.twisted_probs);
            assert!(tv < last);
            last = tv;
        }
        assert!(last < 1e-4, "tv {last}");
    }

    #[test]
    fn generic_matches_fast_path() {
        let p = Params::new(0.2, 0.1, 0.7).unwrap();
        for sheet in [Sheet::Serve1, Sheet::Serve2] {
            let inc = sheet_increments(&p, sheet);
            for ang in [0.2f64, 0.7, 1.2, 1.5, 2.0, 2.9] {
                let d = match sheet {
                    Sheet::Serve1 => [ang.cos(), ang.sin()],
                    Sheet::Serve2 => [ang.sin(), ang.cos()],
                };
                let a = twist_toward(&inc, d).unwrap();
                let b = twist_toward_generic(&inc, d).unwrap();
                assert_abs_diff_eq!(a.theta_star[0], b.theta_star[0], epsilon = 1e-9);
                assert_abs_diff_eq!(a.theta_star[1], b.theta_star[1], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn generic_plane_support() {
        let inc = Increments::new([
            ([1, 0], 0.3),
            ([0, 1], 0.2),
            ([-1, 0], 0.25),
            ([0, -1], 0.15),
            ([1, 1], 0.1),
        ])
        .unwrap();
        for ang in [0.0f64, 1.0, 2.5, 4.0, 5.5] {
            let d = [ang.cos(), ang.sin()];
            let s = twist_toward(&inc, d).unwrap();
            assert!((inc.phi(s.theta_star) - 1.0).abs() < 1e-10);
            assert!(cross(s.mean, d).abs() < 1e-10);
            assert!(dot(s.mean, d) > 0.0);
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn ney_spitzer_values() {
        let p = rs();
        let inc = twisted_sheet_increments(&p, Sheet::Serve1);
        let ns = ney_spitzer_data(&inc).unwrap();
        let t = p.twisted();
        assert_abs_diff_eq!(ns.m[0], 0.207143, epsilon = 1e-6);
        assert_abs_diff_eq!(ns.m[1], 0.092857, epsilon = 1e-6);
        let pts = [([1.0, 0.0], t.lt1), ([0.0, 1.0], t.lt2), ([-1.0, 0.0], t.mt)];
        let mut q = [[0.0f64; 2]; 2];
        for (v, w) in pts {
            for i in 0..2 {
                for j in 0..2 {
                    q[i][j] += w * v[i] * v[j];
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(ns.q[i][j], q[i][j] - ns.m[i] * ns.m[j], epsilon = 1e-14);
                let id: f64 = (0..2).map(|k| ns.sigma[i][k] * ns.q[k][j]).sum();
                assert_abs_diff_eq!(id, if i == j { 1.0 } else { 0.0 }, epsilon = 1e-10);
            }
        }
        assert!(ns.det_q > 0.0 && ns.q[0][0] > 0.0);
    }

    #[test]
    fn lazy_prefactor_identity() {
        let p = rs();
        let inc = twisted_sheet_increments(&p, Sheet::Serve1);
        let ns = ney_spitzer_data(&inc).unwrap();
        let lz = ney_spitzer_data(&inc.lazy()).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect = ns.q[i][j] / 2.0 + ns.m[i] * ns.m[j] / 4.0;
                assert_abs_diff_eq!(lz.q[i][j], expect, epsilon = 1e-14);
            }
        }
        for l in [10.0, 1000.0] {
            assert_abs_diff_eq!(0.5 * lz.local_factor(l), ns.local_factor(l), epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_drift_rejected() {
        let inc = Increments::new([([1, 0], 0.25), ([-1, 0], 0.25), ([0, 1], 0.25), ([0, -1], 0.25)]).unwrap();
        assert!(ney_spitzer_data(&inc).is_err());
        let line = Increments::new([([1, 0], 0.5), ([-1, 0], 0.2), ([0, 0], 0.3)]).unwrap();
        assert!(ney_spitzer_data(&line).is_err());
    }

    #[test]
    fn least_action() {
        let p = rs();
        let (d, rate) = least_action_direction(&p, Sheet::Serve1).unwrap();
        assert_abs_diff_eq!(d[0], 0.690476, epsilon = 1e-6);
        assert_abs_diff_eq!(d[1], 0.309524, epsilon = 1e-6);
        assert_abs_diff_eq!(rate, p.log_rho_inv(), epsilon = 1e-14);
        let b1 = p.lambda1 * p.rho_inv() - p.mu * p.rho();
        let b2 = p.lambda2 * p.rho_inv();
        assert_abs_diff_eq!(d[0], b1 / (b1 + b2), epsilon = 1e-12);
        assert!(p.lambda1 - p.mu < 0.0);
        assert!(least_action_direction(&p, Sheet::Serve2).is_err());
        let e = least_action_direction(&Params::new(0.3, 0.15, 0.55).unwrap(), Sheet::Serve1).unwrap_err();
        assert!(e.to_string().contains("spiral regime"));
        let q = Params::new(0.1, 0.1, 0.8).unwrap();
        let (d2, _) = least_action_direction(&q, Sheet::Serve2).unwrap();
        assert_abs_diff_eq!(d2[0] + d2[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn growth_factors() {
        let (f1, f2) = spiral_growth_factors(&Params::new(0.3, 0.15, 0.55).unwrap()).unwrap();
        assert_abs_diff_eq!(f1, 1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(f2, 0.375, epsilon = 1e-12);
        assert!(spiral_growth_factors(&rs()).is_err());
    }

    #[test]
    fn cascade_time_reversal() {
        let p = rs();
        let psi = CascadeMeasure::new(&p);
        let steps = sheet_increments(&p, Sheet::Serve2).to_steps();
        for x in 1..6i64 {
            for y in 1..8i64 {
                let z = [x, y];
                let inflow: f64 = steps.iter().map(|&(v, w)| psi.eval([z[0] - v[0], z[1] - v[1]]) * w).sum();
                assert!((inflow - psi.eval(z)).abs() <= 1e-12 * psi.eval(z));
                let row = time_reversal_row(|q| psi.eval(q), &steps, z).unwrap();
                let s: f64 = row.iter().map(|e| e.1).sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
                let west = row.iter().find(|e| e.0 == [x - 1, y]).unwrap().1;
                assert_abs_diff_eq!(west, psi.gamma_t * p.lambda1, epsilon = 1e-12);
            }
            let row = time_reversal_row(|q| psi.eval(q), &steps, [x, 1]).unwrap();
            assert_eq!(row.iter().find(|e| e.0 == [x, 0]).unwrap().1, 0.0);
        }
        assert!(time_reversal_row(|q| psi.eval(q), &steps, [3, 0]).is_err());
        let r = reversal_harmonic_residual(|q| psi.eval(q) * 2.0, |q| psi.eval(q), &steps, [2, 3]).unwrap();
        assert_abs_diff_eq!(r, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn f32_twist() {
        let p = Params::<f32>::new(0.3, 0.05, 0.65).unwrap();
        let sol = twist_toward(&sheet_increments(&p, Sheet::Serve1), p.twisted().m1).unwrap();
        assert!((sol.theta_star[0] - p.log_rho_inv()).abs() < 1e-4);
        let r = classify(&p);
        assert_eq!(r.sheet1, Regime::Ray);
    }

    fn stable_params() -> impl Strategy<Value = Params<f64>> {
        (0.01f64..1.0, 0.01f64..1.0, 0.01f64..2.0)
            .prop_map(|(a, b, e)| Params::new(a, b, a + b + e).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn ray_tests_agree(p in stable_params()) {
            let t = ray_tests(&p);
            prop_assert!(t.iter().all(|&b| b == t[0]));
            if classify(&p).is_spiral_spiral() {
                prop_assert!(p.rho() > 0.5);
            }
        }

        #[test]
        fn special_points_on_curves(p in stable_params()) {
            let s = special_points(&p);
            let c1 = Egg::new(p, Sheet::Serve1);
            let c2 = Egg::new(p, Sheet::Serve2);
            prop_assert!(s.beta_t > 0.0);
            let tol = 1e-12 * (1.0 + s.beta_t.max(s.alpha_e).max(s.gamma_t).max(s.gamma_e.abs()));
            prop_assert!((c1.eval(s.alpha_t, s.beta_t) - 1.0).abs() < tol);
            prop_assert!((c2.eval(s.alpha_e, s.beta_e) - 1.0).abs() < tol);
            prop_assert!((c2.eval(s.gamma_t, s.beta_t) - 1.0).abs() < tol);
            prop_assert!((c1.eval(s.gamma_t, s.delta_t) - 1.0).abs() < tol);
            prop_assert!((c1.eval(s.alpha_e, s.gamma_e) - 1.0).abs() < tol);
            let r = classify(&p);
            if r.subcase == Some(Subcase::Cascade) {
                prop_assert!(s.r_minus < 1.0 && 1.0 < p.rho_inv() && p.rho_inv() < s.gamma_t);
                prop_assert!(s.gamma_t <= s.alpha_e);
            } else if r.subcase == Some(Subcase::Bridge) {
                prop_assert!(s.r_minus < 1.0 && 1.0 < p.rho_inv() && p.rho_inv() < s.alpha_e);
            }
        }

        #[test]
        fn twist_recovers_direction(p in stable_params(), ang in 0.01f64..3.13) {
            let inc = sheet_increments(&p, Sheet::Serve1);
            let d = [ang.cos(), ang.sin()];
            let s = twist_toward(&inc, d).unwrap();
            prop_assert!((inc.phi(s.theta_star) - 1.0).abs() < 1e-10);
            prop_assert!(cross(s.mean, d).abs() < 1e-10 * s.lambda_star.max(1.0));
            prop_assert!((s.mean[0] - s.lambda_star * d[0]).abs() < 1e-10);
            prop_assert!((s.mean[1] - s.lambda_star * d[1]).abs() < 1e-10);
        }

        #[test]
        fn egg_upper_branch_concave(p in stable_params()) {
            let s = special_points(&p);
            let h = (s.r_plus - s.r_minus) / 200.0;
            let beta = |a: f64| (1.0 - p.lambda1 * a - p.mu / a) / p.lambda2;
            for i in 1..199 {
                let a = s.r_minus + h * i as f64;
                prop_assert!(beta(a + h) - 2.0 * beta(a) + beta(a - h) <= 1e-9);
            }
            let disc = |a: f64| (1.0 - p.lambda1 * a).powi(2) - 4.0 * p.lambda2 * p.mu;
            let upper = |a: f64| ((1.0 - p.lambda1 * a) + disc(a).max(0.0).sqrt()) / (2.0 * p.lambda2);
            let amax = (1.0 - 2.0 * (p.lambda2 * p.mu).sqrt()) / p.lambda1;
            let h2 = amax / 200.0;
            for i in 1..199 {
                let a = h2 * i as f64;
                prop_assert!(upper(a + h2) - 2.0 * upper(a) + upper(a - h2) <= 1e-9);
            }
        }
    }
}

//! State space, uniformized kernel, twisted and conditioned kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sheet {
    Serve1,
    Serve2,
}

impl Sheet {
    pub fn index(self) -> u8 {
        match self {
            Sheet::Serve1 => 1,
            Sheet::Serve2 => 2,
        }
    }

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Sheet::Serve1),
            2 => Ok(Sheet::Serve2),
            _ => Err(Error::InvalidState(format!("sheet must be 1 or 2, got {i}"))),
        }
    }
}

/// `(x, y, sheet)` with the polling constraints: no `(x,0,2)` and no `(0,y,1)` for `y >= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct State {
    pub x: u32,
    pub y: u32,
    pub sheet: Sheet,
}

impl State {
    pub const ORIGIN: State = State { x: 0, y: 0, sheet: Sheet::Serve1 };

    pub fn new(x: u32, y: u32, sheet: Sheet) -> Result<Self> {
        let s = State { x, y, sheet };
        s.validate()?;
        Ok(s)
    }

    pub const fn new_unchecked(x: u32, y: u32, sheet: Sheet) -> Self {
        State { x, y, sheet }
    }

    pub fn is_valid(&self) -> bool {
        match self.sheet {
            Sheet::Serve1 => self.x > 0 || self.y == 0,
            Sheet::Serve2 => self.y > 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidState(format!(
                "({},{},{}) is not in the state space",
                self.x,
                self.y,
                self.sheet.index()
            )))
        }
    }

    pub fn level(&self) -> u32 {
        self.x + self.y
    }

    pub fn is_origin(&self) -> bool {
        *self == State::ORIGIN
    }

    /// Targets of the arrival-1, arrival-2 and service moves.
    pub fn moves(&self) -> [State; 3] {
        let (x, y) = (self.x, self.y);
        if self.is_origin() {
            return [
                State::new_unchecked(1, 0, Sheet::Serve1),
                State::new_unchecked(0, 1, Sheet::Serve2),
                State::ORIGIN,
            ];
        }
        match self.sheet {
            Sheet::Serve1 => {
                let service = if x > 1 {
                    State::new_unchecked(x - 1, y, Sheet::Serve1)
                } else if y >= 1 {
                    State::new_unchecked(0, y, Sheet::Serve2)
                } else {
                    State::ORIGIN
                };
                [
                    State::new_unchecked(x + 1, y, Sheet::Serve1),
                    State::new_unchecked(x, y + 1, Sheet::Serve1),
                    service,
                ]
            }
            Sheet::Serve2 => {
                let service = if y > 1 {
                    State::new_unchecked(x, y - 1, Sheet::Serve2)
                } else {
                    State::new_unchecked(x, 0, Sheet::Serve1)
                };
                [
                    State::new_unchecked(x + 1, y, Sheet::Serve2),
                    State::new_unchecked(x, y + 1, Sheet::Serve2),
                    service,
                ]
            }
        }
    }
}

impl std::fmt::Display for State {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.x, self.y, self.sheet.index())
    }
}

/// Arrival rates `lambda1`, `lambda2` and service rate `mu`, normalized to sum to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub lambda1: T,
    pub lambda2: T,
    pub mu: T,
}

impl<T: Real> Params<T> {
    /// Normalizes raw positive rates and requires `lambda1 + lambda2 < mu`.
    pub fn new(lambda1: T, lambda2: T, mu: T) -> Result<Self> {
        let p = Self::new_unstable_allowed(lambda1, lambda2, mu)?;
        if !(p.lambda() < p.mu) {
            return Err(Error::InvalidParams(format!(
                "stability λ<μ violated (hypothesis K): λ={} μ={}",
                p.lambda(),
                p.mu
            )));
        }
        Ok(p)
    }

    /// Normalizes raw positive rates without the stability check.
    pub fn new_unstable_allowed(lambda1: T, lambda2: T, mu: T) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2), ("mu", mu)] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::InvalidParams(format!(
                    "{name} must be positive and finite (hypothesis K), got {v}"
                )));
            }
        }
        let s = lambda1 + lambda2 + mu;
        Ok(Params { lambda1: lambda1 / s, lambda2: lambda2 / s, mu: mu / s })
    }

    pub fn is_stable(&self) -> bool {
        self.lambda() < self.mu
    }

    pub fn lambda(&self) -> T {
        self.lambda1 + self.lambda2
    }

    pub fn rho(&self) -> T {
        self.lambda() / self.mu
    }

    pub fn rho_inv(&self) -> T {
        self.mu / self.lambda()
    }

    /// `ln(1/rho)`, the per-level exponential rate.
    pub fn log_rho_inv(&self) -> T {
        self.rho_inv().ln()
    }

    pub fn twisted(&self) -> TwistedRates<T> {
        TwistedRates::new(self)
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            lambda1: U::from_f64(self.lambda1.to_f64().unwrap()).unwrap(),
            lambda2: U::from_f64(self.lambda2.to_f64().unwrap()).unwrap(),
            mu: U::from_f64(self.mu.to_f64().unwrap()).unwrap(),
        }
    }
}

/// Rates of the kernel twisted by `h = rho^{-(x+y)}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwistedRates<T> {
    pub lt1: T,
    pub lt2: T,
    pub mt: T,
    pub a: T,
    pub b: T,
    pub c: T,
    pub m1: [T; 2],
    pub m2: [T; 2],
}

impl<T: Real> TwistedRates<T> {
    pub fn new(p: &Params<T>) -> Self {
        let lambda = p.lambda();
        let lt1 = p.lambda1 / lambda * p.mu;
        let lt2 = p.lambda2 / lambda * p.mu;
        let mt = lambda;
        TwistedRates {
            lt1,
            lt2,
            mt,
            a: p.lambda1 * p.rho_inv(),
            b: p.mu * p.rho(),
            c: p.lambda2 * p.rho_inv(),
            m1: [lt1 - mt, lt2],
            m2: [lt1, lt2 - mt],
        }
    }
}

/// One row of a kernel. `killed` is the mass leaving the state space.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelRow<T> {
    pub from: State,
    pub entries: Vec<(State, T)>,
    pub killed: T,
}

impl<T: Real> KernelRow<T> {
    fn from_moves(from: State, weights: [T; 3]) -> Self {
        let mut row = KernelRow { from, entries: Vec::with_capacity(3), killed: T::zero() };
        for (t, w) in from.moves().into_iter().zip(weights) {
            row.add(t, w);
        }
        row
    }

    fn add(&mut self, target: State, w: T) {
        if let Some(e) = self.entries.iter_mut().find(|(s, _)| *s == target) {
            e.1 = e.1 + w;
        } else {
            self.entries.push((target, w));
        }
    }

    /// Total mass on states, excluding the killed mass.
    pub fn sum(&self) -> T {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn prob(&self, target: State) -> T {
        self.entries.iter().filter(|e| e.0 == target).map(|e| e.1).sum()
    }

    /// `sum_v row(v) f(v)`.
    pub fn apply<F: Fn(State) -> T>(&self, f: F) -> T {
        self.entries.iter().map(|&(s, w)| w * f(s)).sum()
    }
}

/// Row of the uniformized kernel `K`.
pub fn kernel_row<T: Real>(p: &Params<T>, s: State) -> Result<KernelRow<T>> {
    s.validate()?;
    Ok(KernelRow::from_moves(s, [p.lambda1, p.lambda2, p.mu]))
}

/// Row of the twisted kernel; super-stochastic (sum `2 mu`) at the origin.
pub fn twisted_kernel_row<T: Real>(p: &Params<T>, s: State) -> Result<KernelRow<T>> {
    s.validate()?;
    let t = p.twisted();
    let service = if s.is_origin() { p.mu } else { t.mt };
    Ok(KernelRow::from_moves(s, [t.lt1, t.lt2, service]))
}

/// `h(j)/h(k)` for `h(k) = rho^{-k} - 1`, in a form that does not overflow.
pub fn level_ratio<T: Real>(r: T, j: u32, k: u32) -> T {
    if j == 0 {
        return T::zero();
    }
    let jf = T::from_u32(j).unwrap();
    let kf = T::from_u32(k).unwrap();
    ((jf - kf) * r).exp() * (-jf * r).exp_m1() / (-kf * r).exp_m1()
}

/// Probability of reaching level `level` before the origin from any state at level `k`.
pub fn h_alpha<T: Real>(p: &Params<T>, level: u32, k: u32) -> T {
    level_ratio(p.log_rho_inv(), k, level)
}

/// Row of the kernel conditioned to reach `level` before returning to the origin.
pub fn conditioned_kernel_row<T: Real>(p: &Params<T>, level: u32, s: State) -> Result<KernelRow<T>> {
    s.validate()?;
    if level == 0 || s.level() >= level {
        return Err(Error::InvalidState(format!(
            "conditioned kernel undefined at {s} for level {level}"
        )));
    }
    if s.is_origin() {
        let l = p.lambda();
        let mut row = KernelRow { from: s, entries: Vec::with_capacity(2), killed: T::zero() };
        let [e, n, _] = s.moves();
        row.add(e, p.lambda1 / l);
        row.add(n, p.lambda2 / l);
        return Ok(row);
    }
    let r = p.log_rho_inv();
    let k = s.level();
    let up = level_ratio(r, k + 1, k);
    let down = level_ratio(r, k - 1, k);
    let mut row = KernelRow { from: s, entries: Vec::with_capacity(3), killed: T::zero() };
    let [e, n, d] = s.moves();
    row.add(e, p.lambda1 * up);
    row.add(n, p.lambda2 * up);
    if down > T::zero() {
        row.add(d, p.mu * down);
    }
    Ok(row)
}

/// `(K + I) / 2` applied to one row.
pub fn lazy_transform<T: Real>(row: &KernelRow<T>) -> KernelRow<T> {
    let half: T = lit(0.5);
    let mut out = KernelRow {
        from: row.from,
        entries: row.entries.iter().map(|&(s, w)| (s, w * half)).collect(),
        killed: row.killed * half,
    };
    out.add(row.from, half);
    out
}

/// Harmonic functions used to build h-transforms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum HarmonicSpec<T> {
    GeometricTwist { rho_inv: T },
    ConditionedToLevel { log_rho_inv: T, level: u32 },
    GeneralRates { gamma1: T, gamma2: T },
    Directional { u: [T; 2] },
}

impl<T: Real> HarmonicSpec<T> {
    pub fn geometric(p: &Params<T>) -> Self {
        HarmonicSpec::GeometricTwist { rho_inv: p.rho_inv() }
    }

    pub fn conditioned(p: &Params<T>, level: u32) -> Self {
        HarmonicSpec::ConditionedToLevel { log_rho_inv: p.log_rho_inv(), level }
    }

    pub fn eval(&self, s: State) -> T {
        let x = T::from_u32(s.x).unwrap();
        let y = T::from_u32(s.y).unwrap();
        match *self {
            HarmonicSpec::GeometricTwist { rho_inv } => rho_inv.powi(s.level() as i32),
            HarmonicSpec::ConditionedToLevel { log_rho_inv, level } => {
                level_ratio(log_rho_inv, s.level(), level)
            }
            HarmonicSpec::GeneralRates { gamma1, gamma2 } => gamma1.powf(x) * gamma2.powf(y),
            HarmonicSpec::Directional { u } => (u[0] * x + u[1] * y).exp(),
        }
    }
}

/// Intersections `(gamma1, gamma2)` of the two eggs when the service rates differ.
///
/// Returns both roots; the first one is the nontrivial twist (it reduces to
/// `(1/rho, 1/rho)` when `mu1 = mu2`).
pub fn general_rates_point<T: Real>(l1: T, l2: T, mu1: T, mu2: T) -> Result<[[T; 2]; 2]> {
    let s = l1 * mu1 + l2 * mu2;
    let four: T = lit(4.0);
    let disc = T::one() - four * s;
    if disc < T::zero() {
        return Err(Error::InvalidParams("eggs do not intersect".into()));
    }
    let denom = lit::<T>(2.0) / mu1 * s;
    let g_plus = (T::one() + disc.sqrt()) / denom;
    let g_minus = (T::one() - disc.sqrt()) / denom;
    let k = mu2 / mu1;
    Ok([[g_plus, k * g_plus], [g_minus, k * g_minus]])
}

/// Free increment kernel on one sheet viewed as a walk on `Z^2`.
pub type LatticeStep<T> = ([i64; 2], T);

/// Time-reversed row `<-K(p, p - v) = psi(p - v) nu(v) / psi(p)`.
pub fn time_reversal_row<T: Real, P: Fn([i64; 2]) -> T>(
    psi: P,
    steps: &[LatticeStep<T>],
    p: [i64; 2],
) -> Result<Vec<LatticeStep<T>>> {
    let at = psi(p);
    if !(at > T::zero()) {
        return Err(Error::InvalidInput("reversal undefined at null states".into()));
    }
    Ok(steps
        .iter()
        .map(|&(v, w)| {
            let q = [p[0] - v[0], p[1] - v[1]];
            (q, psi(q) * w / at)
        })
        .collect())
}

/// `sum_q <-K(p,q) f(q) - f(p)` with `f = pi / psi`.
pub fn reversal_harmonic_residual<T: Real, P: Fn([i64; 2]) -> T, Q: Fn([i64; 2]) -> T>(
    pi: Q,
    psi: P,
    steps: &[LatticeStep<T>],
    p: [i64; 2],
) -> Result<T> {
    let ratio = |q: [i64; 2]| {
        let d = psi(q);
        if d > T::zero() {
            pi(q) / d
        } else {
            T::zero()
        }
    };
    let row = time_reversal_row(&psi, steps, p)?;
    Ok(row.iter().map(|&(q, w)| w * ratio(q)).sum::<T>() - ratio(p))
}

/// Enumerates all states with `x + y = k`, sheet 1 first.
pub fn level_states(k: u32) -> Vec<State> {
    if k == 0 {
        return vec![State::ORIGIN];
    }
    let mut v = Vec::with_capacity(2 * k as usize);
    for x in 1..=k {
        v.push(State::new_unchecked(x, k - x, Sheet::Serve1));
    }
    for x in 0..k {
        v.push(State::new_unchecked(x, k - x, Sheet::Serve2));
    }
    v
}

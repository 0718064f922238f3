//! Batch arrivals per deterministic service slot.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KernelRow, Sheet, State};
use crate::scalar::{lit, Real};

/// Arrival-count law given by its probability generating function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArrivalPgf<T> {
    Poisson { rate: T },
    Finite { density: Vec<T> },
}

impl<T: Real> ArrivalPgf<T> {
    pub fn validate(&self) -> Result<()> {
        match self {
            ArrivalPgf::Poisson { rate } => {
                if !(*rate > T::zero()) || !rate.is_finite() {
                    return Err(Error::InvalidParams(format!("Poisson rate must be positive, got {rate}")));
                }
            }
            ArrivalPgf::Finite { density } => {
                if density.is_empty() || density.iter().any(|&w| !(w >= T::zero()) || !w.is_finite()) {
                    return Err(Error::InvalidParams("density masses must be nonnegative".into()));
                }
                let s: T = density.iter().copied().sum();
                let tol = (T::epsilon() * lit(64.0)).max(lit(1e-12));
                if (s - T::one()).abs() > tol {
                    return Err(Error::InvalidParams(format!("density sums to {s}, not 1")));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, z: T) -> T {
        match self {
            ArrivalPgf::Poisson { rate } => (*rate * (z - T::one())).exp(),
            ArrivalPgf::Finite { density } => density.iter().rev().fold(T::zero(), |acc, &w| acc * z + w),
        }
    }

    pub fn deriv(&self, z: T) -> T {
        match self {
            ArrivalPgf::Poisson { rate } => *rate * self.eval(z),
            ArrivalPgf::Finite { density } => density
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(T::zero(), |acc, (n, &w)| acc * z + w * T::from_usize(n).unwrap()),
        }
    }

    pub fn log_deriv(&self, z: T) -> T {
        self.deriv(z) / self.eval(z)
    }

    pub fn mean(&self) -> T {
        self.deriv(T::one())
    }

    /// Largest count with positive mass, if finite.
    pub fn degree(&self) -> Option<usize> {
        match self {
            ArrivalPgf::Poisson { .. } => None,
            ArrivalPgf::Finite { density } => density.iter().rposition(|&w| w > T::zero()),
        }
    }

    /// Masses `f(n)`; Poisson laws run past `2 * mean + 40` and until the tail is below `1e-15`.
    pub fn masses(&self) -> Vec<T> {
        self.tilted_masses(T::one())
    }

    /// Normalized tilted masses `f(n) z^n / F(z)`.
    pub fn tilted_masses(&self, z: T) -> Vec<T> {
        match self {
            ArrivalPgf::Poisson { rate } => poisson_pmf(*rate * z),
            ArrivalPgf::Finite { density } => {
                let f = self.eval(z);
                let mut zp = T::one();
                density
                    .iter()
                    .map(|&w| {
                        let m = w * zp / f;
                        zp = zp * z;
                        m
                    })
                    .collect()
            }
        }
    }
}

fn poisson_pmf<T: Real>(mean: T) -> Vec<T> {
    let tail = lit::<T>(1e-15).max(T::epsilon() * lit(4.0));
    let mut out = Vec::new();
    let mut p = (-mean).exp();
    let mut cum = T::zero();
    let mut n = 0usize;
    loop {
        out.push(p);
        cum = cum + p;
        n += 1;
        if (T::one() - cum <= tail && T::from_usize(n).unwrap() > mean * lit(2.0) + lit(40.0)) || n > 100_000 {
            break;
        }
        p = p * mean / T::from_usize(n).unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchParams<T> {
    pub f: ArrivalPgf<T>,
    pub g: ArrivalPgf<T>,
}

impl<T: Real> BatchParams<T> {
    pub fn new(f: ArrivalPgf<T>, g: ArrivalPgf<T>) -> Result<Self> {
        f.validate()?;
        g.validate()?;
        let bp = BatchParams { f, g };
        if !(bp.lambda1() + bp.lambda2() < T::one()) {
            return Err(Error::InvalidParams(format!(
                "stability lambda1+lambda2<1 violated: {}",
                bp.lambda1() + bp.lambda2()
            )));
        }
        Ok(bp)
    }

    pub fn lambda1(&self) -> T {
        self.f.mean()
    }

    pub fn lambda2(&self) -> T {
        self.g.mean()
    }

    /// `psi(z) = F(z) G(z) / z`.
    pub fn psi(&self, z: T) -> T {
        self.f.eval(z) * self.g.eval(z) / z
    }

    pub fn psi_deriv(&self, z: T) -> T {
        let (f, g) = (self.f.eval(z), self.g.eval(z));
        (self.f.deriv(z) * g + f * self.g.deriv(z)) / z - f * g / (z * z)
    }
}

/// Unique root `alpha > 1` of `psi(alpha) = 1`.
pub fn find_alpha<T: Real>(bp: &BatchParams<T>) -> Result<T> {
    let slope = bp.psi_deriv(T::one());
    if !(slope < T::zero()) {
        return Err(Error::InvalidParams(format!("psi'(1) = {slope} must be negative")));
    }
    let mut hi: T = lit(2.0);
    while !(bp.psi(hi) > T::one()) {
        hi = hi * lit(2.0);
        if hi > lit(1e8) {
            return Err(Error::Numerical("no finite twist: psi stays below 1".into()));
        }
    }
    let mut lo = T::one();
    for _ in 0..300 {
        let mid = (lo + hi) * lit(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        if bp.psi(mid) < T::one() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut a = (lo + hi) * lit(0.5);
    for _ in 0..3 {
        let d = bp.psi_deriv(a);
        if d > T::zero() {
            let next = a - (bp.psi(a) - T::one()) / d;
            if next > T::one() {
                a = next;
            }
        }
    }
    Ok(a)
}

fn batch_row<T: Real>(s: State, fm: &[T], gm: &[T], scale: T) -> KernelRow<T> {
    let mut entries = Vec::with_capacity(fm.len() * gm.len());
    let (x, y) = (s.x, s.y);
    for (u, &fu) in fm.iter().enumerate() {
        for (v, &gv) in gm.iter().enumerate() {
            let w = fu * gv * scale;
            if w == T::zero() {
                continue;
            }
            let (u, v) = (u as u32, v as u32);
            let t = if s.is_origin() {
                if u >= 1 {
                    State::new_unchecked(u, v, Sheet::Serve1)
                } else if v >= 1 {
                    State::new_unchecked(0, v, Sheet::Serve2)
                } else {
                    State::ORIGIN
                }
            } else {
                match s.sheet {
                    Sheet::Serve1 if x > 1 => State::new_unchecked(x + u - 1, y + v, Sheet::Serve1),
                    Sheet::Serve1 => {
                        if u > 0 {
                            State::new_unchecked(u, y + v, Sheet::Serve1)
                        } else if y + v > 0 {
                            State::new_unchecked(0, y + v, Sheet::Serve2)
                        } else {
                            State::ORIGIN
                        }
                    }
                    Sheet::Serve2 if y > 1 => State::new_unchecked(x + u, y + v - 1, Sheet::Serve2),
                    Sheet::Serve2 => {
                        if v > 0 {
                            State::new_unchecked(x + u, v, Sheet::Serve2)
                        } else {
                            State::new_unchecked(x + u, 0, Sheet::Serve1)
                        }
                    }
                }
            };
            entries.push((t, w));
        }
    }
    KernelRow { from: s, entries, killed: T::zero() }
}

/// Row of the untwisted batch kernel (Poisson laws truncated past `2 * mean + 40` with a `1e-15` tail).
pub fn batch_kernel_row<T: Real>(bp: &BatchParams<T>, s: State) -> Result<KernelRow<T>> {
    s.validate()?;
    Ok(batch_row(s, &bp.f.masses(), &bp.g.masses(), T::one()))
}

/// Row of the batch kernel twisted by `h = alpha^{x+y}`.
pub fn batch_twisted_row<T: Real>(bp: &BatchParams<T>, alpha: T, s: State) -> Result<KernelRow<T>> {
    s.validate()?;
    let fm = bp.f.tilted_masses(alpha);
    let gm = bp.g.tilted_masses(alpha);
    let fg = bp.f.eval(alpha) * bp.g.eval(alpha);
    let scale = if s.is_origin() { fg } else { fg / alpha };
    Ok(batch_row(s, &fm, &gm, scale))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchRegime {
    Ray,
    Spiral,
    Critical,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchReport<T> {
    pub alpha: T,
    pub sheet1: BatchRegime,
    pub sheet2: BatchRegime,
    /// Twisted mean increment of the served queue on each sheet.
    pub drift1: T,
    pub drift2: T,
}

pub fn batch_classify<T: Real>(bp: &BatchParams<T>) -> Result<BatchReport<T>> {
    let alpha = find_alpha(bp)?;
    let drift1 = alpha * bp.f.log_deriv(alpha) - T::one();
    let drift2 = alpha * bp.g.log_deriv(alpha) - T::one();
    let tol: T = lit::<T>(1e-12).max(T::epsilon() * lit(16.0));
    let reg = |d: T| {
        if d.abs() <= tol {
            BatchRegime::Critical
        } else if d > T::zero() {
            BatchRegime::Ray
        } else {
            BatchRegime::Spiral
        }
    };
    Ok(BatchReport { alpha, sheet1: reg(drift1), sheet2: reg(drift2), drift1, drift2 })
}

//! Closed-form tail asymptotics of the stationary distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    classify, l1_normalize, ney_spitzer_data, sheet_increments, twist_toward, twisted_sheet_increments,
    NeySpitzerData, Regime, RegimeReport, Subcase,
};
use crate::model::{Params, Sheet};
use crate::scalar::{lit, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prefactor<T> {
    Value(T),
    /// Positive but not available in closed form.
    UnknownPositive,
    /// Positive and tending to zero at a polynomial rate.
    Vanishing,
}

/// `pi(x, y) ~ prefactor * bx^x * by^y * level^power`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticEstimate<T> {
    pub bases: [T; 2],
    /// Factor per unit level along the direction.
    pub exponential_base: T,
    pub polynomial_power: T,
    pub prefactor: Prefactor<T>,
    pub direction: [T; 2],
    pub validity: String,
}

impl<T: Real> AsymptoticEstimate<T> {
    fn new(bases: [T; 2], direction: [T; 2], power: T, prefactor: Prefactor<T>, validity: &str) -> Self {
        let d = l1_normalize(direction);
        AsymptoticEstimate {
            bases,
            exponential_base: bases[0].powf(d[0]) * bases[1].powf(d[1]),
            polynomial_power: power,
            prefactor,
            direction: d,
            validity: validity.to_string(),
        }
    }

    /// Lattice point on the level line closest to `level * direction`.
    pub fn lattice_point(&self, level: u32) -> [u32; 2] {
        lattice_point(self.direction, level)
    }

    /// Numeric value at `(x, y)` when the prefactor is known.
    pub fn evaluate(&self, x: u32, y: u32) -> Option<T> {
        match self.prefactor {
            Prefactor::Value(c) => {
                let l = T::from_u32(x + y).unwrap();
                Some(c * self.bases[0].powi(x as i32) * self.bases[1].powi(y as i32) * l.powf(self.polynomial_power))
            }
            _ => None,
        }
    }
}

/// Rounds `level * d_1` to the nearest integer, ties toward larger `x`.
pub fn lattice_point<T: Real>(direction: [T; 2], level: u32) -> [u32; 2] {
    let d = l1_normalize(direction);
    let l = T::from_u32(level).unwrap();
    let x = (l * d[0] + lit(0.5)).floor().max(T::zero()).min(l);
    let x = x.to_u32().unwrap();
    [x, level - x]
}

fn require_ray<T: Real>(p: &Params<T>, what: &str) -> Result<RegimeReport<T>> {
    let rep = classify(p);
    if rep.sheet1 != Regime::Ray {
        return Err(Error::Regime(format!("{what} inapplicable: spiral on sheet 1")));
    }
    Ok(rep)
}

/// Ney-Spitzer data of the twisted sheet-1 walk.
pub fn ray_ney_spitzer<T: Real>(p: &Params<T>) -> Result<NeySpitzerData<T>> {
    ney_spitzer_data(&twisted_sheet_increments(p, Sheet::Serve1))
}

/// Tail along the ray direction, given the externally estimated boundary sum.
pub fn ray_asymptotics<T: Real>(p: &Params<T>, boundary_sum: T) -> Result<AsymptoticEstimate<T>> {
    let rep = require_ray(p, "ray asymptotics")?;
    if !(boundary_sum > T::zero()) || !boundary_sum.is_finite() {
        return Err(Error::InvalidInput("boundary sum must be positive and finite".into()));
    }
    let ns = ray_ney_spitzer(p)?;
    let b = ns.shape_factor() * boundary_sum;
    let c = b * (ns.m_l1 / (lit::<T>(2.0) * T::PI())).sqrt();
    let rho = p.rho();
    Ok(AsymptoticEstimate::new(
        [rho, rho],
        rep.twisted.m1,
        lit(-0.5),
        Prefactor::Value(c),
        "level to infinity along the twisted sheet-1 drift",
    ))
}

/// Exponential penalty per level for a northern direction away from the ray.
pub fn off_ray_rate<T: Real>(p: &Params<T>, direction: [T; 2]) -> Result<T> {
    let rep = require_ray(p, "off-ray rate")?;
    if !(direction[1] >= T::zero()) || !(direction[0].abs() + direction[1] > T::zero()) {
        return Err(Error::InvalidInput("direction must be northern and nonzero".into()));
    }
    let d = l1_normalize(direction);
    let m = l1_normalize(rep.twisted.m1);
    if (d[0] - m[0]).abs() <= T::epsilon() * lit(16.0) && (d[1] - m[1]).abs() <= T::epsilon() * lit(16.0) {
        return Ok(T::zero());
    }
    let u = twist_toward(&sheet_increments(p, Sheet::Serve1), d)?.theta_star;
    let r = p.log_rho_inv();
    Ok((u[0] - r) * d[0] + (u[1] - r) * d[1])
}

/// Bridge constant `C+ = (1/p) sqrt((1 - 2p) / (4 pi p))` with `p = sqrt(mu lambda1)`.
pub fn bridge_constant_cplus<T: Real>(p: &Params<T>) -> Result<T> {
    require_ray(p, "bridge constant")?;
    let k = (p.mu * p.lambda1).sqrt();
    let one_minus_s = lit::<T>(2.0) * k;
    let d_plus = T::one() - one_minus_s;
    Ok((k / (k * k)) * (d_plus / (lit::<T>(2.0) * T::PI() * one_minus_s)).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConstants<T> {
    pub subcase: Subcase,
    /// Maps the sheet-1 column next to the y-axis onto the sheet-2 y-axis.
    pub k21: T,
    /// Maps the sheet-2 row next to the x-axis onto the sheet-1 x-axis.
    pub k10: T,
}

impl<T: Real> TransferConstants<T> {
    pub fn as_list(&self) -> Vec<(String, T)> {
        vec![("k21".to_string(), self.k21), ("k10".to_string(), self.k10)]
    }
}

pub fn transfer_constants<T: Real>(p: &Params<T>) -> Result<TransferConstants<T>> {
    let rep = require_ray(p, "transfer constants")?;
    let sp = rep.special;
    let bt = sp.beta_t;
    let k21 = -p.mu * bt / (p.lambda2 * bt * bt - bt + p.mu);
    let subcase = rep.subcase.expect("ray sheet has a subcase");
    let z = match subcase {
        Subcase::Cascade => sp.gamma_t,
        Subcase::Bridge => sp.alpha_e,
    };
    let k10 = -z / (p.lambda1 * z * z - z + p.mu);
    Ok(TransferConstants { subcase, k21, k10 })
}

/// Tail in an arbitrary direction of the closed first quadrant.
pub fn sector_asymptotics<T: Real>(p: &Params<T>, direction: [T; 2]) -> Result<AsymptoticEstimate<T>> {
    let rep = require_ray(p, "sector asymptotics")?;
    if !(direction[0] >= T::zero() && direction[1] >= T::zero()) || direction[0] + direction[1] <= T::zero() {
        return Err(Error::InvalidInput("direction must lie in the closed first quadrant".into()));
    }
    let sp = rep.special;
    let u = twist_toward(&sheet_increments(p, Sheet::Serve1), l1_normalize(direction))?.theta_star;
    let (threshold, far) = match rep.subcase.expect("ray sheet has a subcase") {
        Subcase::Cascade => (sp.gamma_t, [sp.gamma_t.recip(), sp.delta_t.recip()]),
        Subcase::Bridge => (sp.alpha_e, [sp.alpha_e.recip(), sp.gamma_e.recip()]),
    };
    let slack = T::one() + lit(1e-12);
    if u[0].exp() <= threshold * slack {
        Ok(AsymptoticEstimate::new(
            [(-u[0]).exp(), (-u[1]).exp()],
            direction,
            lit(-0.5),
            Prefactor::UnknownPositive,
            "Gaussian ray along the twisted drift of the direction",
        ))
    } else {
        Ok(AsymptoticEstimate::new(
            far,
            direction,
            T::zero(),
            Prefactor::Vanishing,
            "far-east direction reached after an excursion through sheet 2",
        ))
    }
}

/// Conjectured level-`ell` profile in the spiral-spiral regime.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpiralProfile<T> {
    pub level: u32,
    pub a: T,
    pub b: T,
    pub c: T,
    pub c_ell: T,
    pub c1: T,
    pub c2: T,
    pub rho: T,
}

impl<T: Real> SpiralProfile<T> {
    fn frac(&self, k: u32) -> T {
        T::from_u32(k).unwrap() / T::from_u32(self.level).unwrap()
    }

    /// Profile on sheet 1 at `x` (with `y = level - x`).
    pub fn alpha(&self, x: u32) -> T {
        let (a, b, c) = (self.a, self.b, self.c);
        let s = self.frac(x);
        self.c1 * ((T::one() - (a / b).powi(x as i32)) - (a + c - b) * s / ((b - a) * (T::one() - s) + c * s))
    }

    /// Profile on sheet 2 at `y` (with `x = level - y`).
    pub fn beta(&self, y: u32) -> T {
        let (a, b, c) = (self.a, self.b, self.c);
        let s = self.frac(y);
        self.c2 * ((T::one() - (c / b).powi(y as i32)) - (a + c - b) * s / ((b - c) * (T::one() - s) + a * s))
    }

    /// Predicted fraction of level visits at `(x, level - x, 1)`.
    pub fn fraction_sheet1(&self, x: u32) -> T {
        self.alpha(x) / (T::from_u32(self.level).unwrap() * (T::one() - self.rho))
    }

    /// Predicted fraction of level visits at `(level - y, y, 2)`.
    pub fn fraction_sheet2(&self, y: u32) -> T {
        self.beta(y) / (T::from_u32(self.level).unwrap() * (T::one() - self.rho))
    }

    /// `(1/l)(sum alpha + sum beta)`, which should approach `1 - rho`.
    pub fn normalization(&self) -> T {
        let s: T = (1..=self.level).map(|k| self.alpha(k) + self.beta(k)).sum();
        s / T::from_u32(self.level).unwrap()
    }
}

pub fn spiral_profile<T: Real>(p: &Params<T>, level: u32) -> Result<SpiralProfile<T>> {
    let rep = classify(p);
    if !rep.is_spiral_spiral() {
        return Err(Error::Regime("spiral profile needs the spiral-spiral regime".into()));
    }
    if level < 2 {
        return Err(Error::InvalidInput("level must be at least 2".into()));
    }
    let t = rep.twisted;
    let (a, b, c) = (t.a, t.b, t.c);
    assert!(b > a && b > c, "spiral-spiral requires b > a and b > c");
    let rho = p.rho();
    let s = a + c - b;
    let l = T::from_u32(level).unwrap();
    let bracket = (a * c / ((b - a) * (b - c))).ln() - s / l * (a / ((b - a) * (b - a)) + c / ((b - c) * (b - c)));
    let c_ell = (T::one() - rho) * s / bracket;
    Ok(SpiralProfile { level, a, b, c, c_ell, c1: c_ell / (b - a), c2: c_ell / (b - c), rho })
}

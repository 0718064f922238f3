use serde_json::{json, Map, Value};
use tandem_polling::asymptotics::{
    bridge_constant_cplus, lattice_point, off_ray_rate, ray_asymptotics, ray_ney_spitzer, sector_asymptotics,
    spiral_profile, transfer_constants,
};
use tandem_polling::geometry::{
    classify as regime_of, l1_normalize, least_action_direction, sheet_increments, twist_toward, twist_toward_face,
    twisted_sheet_increments, Regime,
};
use tandem_polling::montecarlo::{estimate_pi, run_busy_periods, GreenEstimate, HitHistogram, SimConfig};
use tandem_polling::oracle::{
    chang_down_quantities, first_passage_check, lyapunov_drift_check, representation_check, stationary_truncated,
    taboo_green,
};
use tandem_polling::{Error, Params, Sheet, State};

use crate::{Check, Failure, Table};

/// Result of one command before it is written out.
pub struct Artifact {
    pub raw_rates: [f64; 3],
    pub params: Params,
    pub settings: Value,
    /// Short JSON report.
    pub summary: Value,
    /// Full JSON output when it differs from the summary.
    pub detail: Option<Value>,
    pub csv: Option<Vec<u8>>,
    pub warnings: Vec<String>,
    pub failed: Option<String>,
}

impl Artifact {
    fn new(raw_rates: [f64; 3], params: Params, settings: Value, summary: Value) -> Self {
        Artifact { raw_rates, params, settings, summary, detail: None, csv: None, warnings: Vec::new(), failed: None }
    }
}

/// Two-column `key,value` CSV of a JSON document with dotted keys.
pub fn flatten_csv(v: &Value) -> Result<Vec<u8>, Failure> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
        match v {
            Value::Object(m) => m.iter().for_each(|(k, x)| walk(&join(k), x, out)),
            Value::Array(a) => a.iter().enumerate().for_each(|(i, x)| walk(&join(&i.to_string()), x, out)),
            Value::String(s) => out.push((prefix.to_string(), s.clone())),
            Value::Null => out.push((prefix.to_string(), String::new())),
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut rows = Vec::new();
    walk("", v, &mut rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["key", "value"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Failure::check(format!("csv error: {e}")))
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<Value, Failure> {
    Ok(serde_json::to_value(v)?)
}

fn classify_value(p: &Params) -> Result<Value, Failure> {
    let rep = regime_of(p);
    let mut m = match to_value(&rep)? {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    m.insert("params".into(), to_value(p)?);
    m.insert("rho".into(), json!(p.rho()));
    m.insert("drifts".into(), json!({ "sheet1": rep.twisted.m1, "sheet2": rep.twisted.m2 }));
    Ok(Value::Object(m))
}

pub fn classify(raw: [f64; 3], p: Params) -> Result<Artifact, Failure> {
    let mut summary = classify_value(&p)?;
    summary["raw_rates"] = json!(raw);
    Ok(Artifact::new(raw, p, json!({}), summary))
}

struct SimRun {
    hist: HitHistogram,
    est: GreenEstimate,
    settings: Value,
    summary: Value,
}

pub struct SimRequest {
    pub level: u32,
    pub trajectories: u64,
    pub seed: u64,
    pub seeds: u64,
    pub threads: usize,
}

fn run_sim(p: Params, req: &SimRequest) -> Result<SimRun, Failure> {
    let (level, n, seed, threads) = (req.level, req.trajectories, req.seed, req.threads);
    let runs = (0..req.seeds)
        .map(|k| run_busy_periods(&SimConfig::new(p, level, n, seed + k).with_workers(threads)))
        .collect::<Result<Vec<_>, _>>()?;
    let hist = HitHistogram::pooled(&runs)?;
    let est = estimate_pi(&hist, &p, level)?;
    let mode = [Sheet::Serve1, Sheet::Serve2]
        .into_iter()
        .filter_map(|s| hist.argmax(s))
        .fold(None, |best: Option<(State, u64)>, c| match best {
            Some(b) if b.1 >= c.1 => Some(b),
            _ => Some(c),
        });
    let summary = json!({
        "level": level,
        "trajectories": hist.trajectories,
        "seeds": (seed..seed + req.seeds).collect::<Vec<_>>(),
        "overshoot": hist.overshoot,
        "total_visits": hist.total,
        "green_sum": est.green_sum,
        "green_sum_se": est.green_sum_se,
        "fraction_sum": est.cells.iter().map(|c| c.fraction).sum::<f64>(),
        "mode": mode.map(|(s, v)| json!({ "x": s.x, "y": s.y, "sheet": s.sheet.index(), "visits": v })),
        "sheet1_hits": hist.sheet_hits(Sheet::Serve1),
        "sheet2_hits": hist.sheet_hits(Sheet::Serve2),
        "killed_first_step": hist.killed_first_step,
        "killed_before_level": hist.killed_before_level,
    });
    let settings = json!({
        "level": level,
        "trajectories_per_seed": n,
        "seeds": req.seeds,
        "threads": threads,
        "overshoot_epsilon": tandem_polling::montecarlo::DEFAULT_OVERSHOOT_EPSILON,
    });
    Ok(SimRun { hist, est, settings, summary })
}

pub fn simulate(raw: [f64; 3], p: Params, req: &SimRequest) -> Result<Artifact, Failure> {
    let run = run_sim(p, req)?;
    let mut bytes = Vec::new();
    run.est.write_csv(&mut bytes)?;
    let mut a = Artifact::new(raw, p, run.settings, run.summary.clone());
    a.detail = Some(json!({ "summary": run.summary, "estimate": run.est }));
    a.csv = Some(bytes);
    Ok(a)
}

/// Normalized Gaussian along the level line around the twisted sheet-1 drift.
fn gaussian_ray(p: &Params, level: u32) -> Result<(f64, Vec<f64>), Failure> {
    let ns = ray_ney_spitzer(p)?;
    let d = l1_normalize(ns.m);
    let steps = level as f64 / ns.m_l1;
    let v = [d[1], -d[0]];
    let q = ns.q;
    let var = steps * (v[0] * (q[0][0] * v[0] + q[0][1] * v[1]) + v[1] * (q[1][0] * v[0] + q[1][1] * v[1]));
    let center = level as f64 * d[0];
    let raw: Vec<f64> = (1..=level).map(|x| (-(x as f64 - center).powi(2) / (2.0 * var)).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok((center, raw.into_iter().map(|w| w / total).collect()))
}

pub fn compare(raw: [f64; 3], p: Params, req: &SimRequest) -> Result<Artifact, Failure> {
    let level = req.level;
    let rep = regime_of(&p);
    let mut warnings = Vec::new();
    let theory: Option<(&str, Option<f64>, Vec<f64>)> = if rep.is_spiral_spiral() {
        let prof = spiral_profile(&p, level)?;
        Some(("spiral_profile", None, (1..=level).map(|x| prof.fraction_sheet1(x)).collect()))
    } else if rep.sheet1 == Regime::Ray {
        let (center, w) = gaussian_ray(&p, level)?;
        Some(("gaussian_ray", Some(center), w))
    } else {
        warnings.push("no closed-form sheet-1 profile in this regime; theory column omitted".to_string());
        None
    };
    let run = run_sim(p, req)?;
    let sim: Vec<f64> = (1..=level)
        .map(|x| run.est.cell(State::new(x, level - x, Sheet::Serve1).expect("level state")).map_or(0.0, |c| c.fraction))
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", "simulated_fraction", "theory_fraction", "rel_error"])?;
    let peak = theory.as_ref().map_or(0.0, |t| t.2.iter().cloned().fold(0.0, f64::max));
    let mut worst = (0.0f64, 0u32);
    for (i, &s) in sim.iter().enumerate() {
        let x = i as u32 + 1;
        match &theory {
            Some((kind, _, th)) => {
                let rel = (s - th[i]).abs() / th[i];
                let counted = *kind == "spiral_profile" || th[i] >= 0.01 * peak;
                if counted && rel > worst.0 {
                    worst = (rel, x);
                }
                w.serialize((x, s, th[i], rel))?;
            }
            None => w.serialize((x, s, "", ""))?,
        }
    }
    let bytes = w.into_inner().map_err(|e| Failure::check(format!("csv error: {e}")))?;
    let sheet1: f64 = sim.iter().sum();
    let mean_x = if sheet1 > 0.0 { sim.iter().enumerate().map(|(i, f)| (i + 1) as f64 * f).sum::<f64>() / sheet1 } else { 0.0 };
    let mode_x = run.hist.argmax(Sheet::Serve1).map(|(s, _)| s.x);
    let summary = json!({
        "simulation": run.summary,
        "theory": theory.as_ref().map(|t| t.0),
        "theory_center_x": theory.as_ref().and_then(|t| t.1),
        "max_rel_error": theory.as_ref().map(|_| worst.0),
        "max_rel_error_x": theory.as_ref().map(|_| worst.1),
        "max_rel_error_range": theory.as_ref().map(|t| if t.0 == "spiral_profile" { "all x" } else { "theory at least 1% of its peak" }),
        "sim_mode_x": mode_x,
        "sim_mean_x": mean_x,
    });
    let mut a = Artifact::new(raw, p, run.settings, summary);
    a.csv = Some(bytes);
    a.warnings = warnings;
    Ok(a)
}

fn check_entry(name: &str, value: f64, tolerance: f64, detail: Value) -> Value {
    let status = if value <= tolerance { "pass" } else { "fail" };
    json!({ "name": name, "status": status, "value": value, "tolerance": tolerance, "detail": detail })
}

fn skipped(name: &str, reason: String) -> Value {
    json!({ "name": name, "status": "skipped", "detail": reason })
}

pub fn oracle(
    raw: [f64; 3],
    p: Params,
    window: u32,
    check: Check,
    level: u32,
    table: Option<Table>,
) -> Result<Artifact, Failure> {
    if window < 2 {
        return Err(Failure::input("--L must be at least 2"));
    }
    let settings = json!({ "window": window, "level": level });
    if let Some(t) = table {
        let mut bytes = Vec::new();
        let summary = match t {
            Table::Stationary => {
                let st = stationary_truncated(&p, window)?;
                st.table.write_csv(&mut bytes)?;
                json!({ "table": "stationary", "window": window, "tail_bound": st.tail_bound })
            }
            Table::Green => {
                let g = taboo_green(&p, window)?;
                g.write_csv(&mut bytes)?;
                json!({ "table": "green", "window": window })
            }
        };
        let mut a = Artifact::new(raw, p, settings, summary);
        a.csv = Some(bytes);
        return Ok(a);
    }
    let want = |c: Check| check == Check::All || check == c;
    let inner = (window * 3 / 4).max(1);
    let mut checks = Vec::new();
    if want(Check::Marginals) {
        let pi = stationary_truncated(&p, window)?;
        let worst = (0..=inner)
            .map(|l| {
                let exact = (1.0 - p.rho()) * p.rho().powi(l as i32);
                (pi.level_marginal(l) - exact).abs() / exact
            })
            .fold(0.0, f64::max);
        checks.push(check_entry("marginals", worst, 1e-6, json!({ "levels": [0, inner] })));
    }
    if want(Check::Representation) {
        let r = representation_check(&p, level, window)?;
        checks.push(check_entry("representation", r, 1e-6, json!({ "level": level })));
    }
    if want(Check::FirstPassage) {
        let r = first_passage_check(&p, inner, window)?;
        checks.push(check_entry("first_passage", r.max_deviation, 1e-10, to_value(&r)?));
    }
    if want(Check::Lyapunov) {
        match lyapunov_drift_check(&p, window) {
            Ok(r) => {
                let status = if r.holds { "pass" } else { "fail" };
                checks.push(json!({ "name": "lyapunov", "status": status, "value": r.max_margin, "tolerance": 0.0, "detail": to_value(&r)? }));
            }
            Err(Error::Regime(m)) if check == Check::All => checks.push(skipped("lyapunov", m)),
            Err(e) => return Err(e.into()),
        }
    }
    if want(Check::ChangDown) {
        match chang_down_quantities(&p, window) {
            Ok(r) => checks.push(check_entry(
                "chang_down",
                r.max_violation.max(r.equality_deviation),
                1e-9,
                json!({ "b": r.b, "max_violation": r.max_violation, "equality_deviation": r.equality_deviation }),
            )),
            Err(Error::Regime(m)) if check == Check::All => checks.push(skipped("chang_down", m)),
            Err(e) => return Err(e.into()),
        }
    }
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| c["status"] == "fail")
        .map(|c| c["name"].as_str().unwrap_or_default().to_string())
        .collect();
    let summary = json!({ "window": window, "all_passed": failed.is_empty(), "checks": checks });
    let mut a = Artifact::new(raw, p, settings, summary);
    if !failed.is_empty() {
        a.failed = Some(format!("oracle checks failed: {}", failed.join(", ")));
    }
    Ok(a)
}

pub fn asymptotics(
    raw: [f64; 3],
    p: Params,
    level: Option<u32>,
    profile: bool,
    direction: Option<[f64; 2]>,
    boundary_sum: Option<f64>,
) -> Result<Artifact, Failure> {
    let settings = json!({ "level": level, "spiral_profile": profile, "direction": direction, "boundary_sum": boundary_sum });
    if profile {
        let level = level.ok_or_else(|| Failure::input("--spiral-profile needs --level"))?;
        let prof = spiral_profile(&p, level)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["k", "c1", "c2", "alpha", "beta", "fraction_sheet1", "fraction_sheet2"])?;
        let mut rows = Vec::new();
        for k in 1..=level {
            let r = (k, prof.c1, prof.c2, prof.alpha(k), prof.beta(k), prof.fraction_sheet1(k), prof.fraction_sheet2(k));
            w.serialize(r)?;
            rows.push(json!({ "k": r.0, "alpha": r.3, "beta": r.4, "fraction_sheet1": r.5, "fraction_sheet2": r.6 }));
        }
        let summary = json!({
            "level": level,
            "a": prof.a, "b": prof.b, "c": prof.c,
            "c_ell": prof.c_ell, "c1": prof.c1, "c2": prof.c2,
            "rho": prof.rho,
            "normalization": prof.normalization(),
        });
        let mut a = Artifact::new(raw, p, settings, summary.clone());
        a.detail = Some(json!({ "profile": summary, "rows": rows }));
        a.csv = Some(w.into_inner().map_err(|e| Failure::check(format!("csv error: {e}")))?);
        return Ok(a);
    }
    let rep = regime_of(&p);
    let (dir, rate) = least_action_direction(&p, Sheet::Serve1)?;
    let mut summary = json!({
        "sheet1": rep.sheet1,
        "sheet2": rep.sheet2,
        "subcase": rep.subcase,
        "least_action": { "direction": dir, "rate": rate },
        "ney_spitzer": ray_ney_spitzer(&p)?,
        "cplus": bridge_constant_cplus(&p)?,
        "transfer": transfer_constants(&p)?,
    });
    if let Some(l) = level {
        summary["least_action"]["lattice_point"] = json!(lattice_point(dir, l));
        summary["least_action"]["target"] = json!([l as f64 * dir[0], l as f64 * dir[1]]);
    }
    if let Some(b) = boundary_sum {
        summary["ray"] = to_value(&ray_asymptotics(&p, b)?)?;
    }
    if let Some(d) = direction {
        summary["sector"] = to_value(&sector_asymptotics(&p, d)?)?;
        summary["off_ray_rate"] = json!(off_ray_rate(&p, d)?);
    }
    Ok(Artifact::new(raw, p, settings, summary))
}

pub fn twist(raw: [f64; 3], p: Params, direction: [f64; 2], sheet: u8, twisted: bool, face: bool) -> Result<Artifact, Failure> {
    let s = Sheet::from_index(sheet)?;
    let inc = if twisted { twisted_sheet_increments(&p, s) } else { sheet_increments(&p, s) };
    let sol = if face { twist_toward_face(&inc, direction)? } else { twist_toward(&inc, direction)? };
    let summary = json!({
        "sheet": sheet,
        "direction": direction,
        "theta_star": sol.theta_star,
        "exp_theta": sol.exp_theta(),
        "lambda_star": sol.lambda_star,
        "mean": sol.mean,
        "on_face": sol.on_face,
        "twisted_probs": sol.twisted_probs,
    });
    let settings = json!({ "direction": direction, "sheet": sheet, "twisted": twisted, "face": face });
    Ok(Artifact::new(raw, p, settings, summary))
}

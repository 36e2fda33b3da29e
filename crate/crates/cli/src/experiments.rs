//! One runner per manifest section. Each returns outcomes ready to be written.

use serde::Serialize;
use serde_json::{json, Value};

use flowlab::analysis::{
    carverhill_check, clt_measure, clt_npoint, correlation_decay, energy_trend, equidistribution,
    escape_moment_slope, escape_times, exp_moment, fit_correlation, lyapunov_spectrum, occupation_experiment,
    return_cycles, self_convergence, separation_exponent, tail_fit, volume_defect, CorrelationCurve, Estimate,
    PathParams, Verdict, DEFAULT_DELTA, DEFAULT_RADIUS_FRACTION, KURTOSIS_GATE, SKEWNESS_GATE,
};
use flowlab::dissipative::{
    conservative_limit, dissipative_clt_experiment, occupation_cloud, pullback_convergence, DissipativeCltReport,
    IDENTITY_TOLERANCE,
};
use flowlab::fields::{bracket_span_rank, check_projective_hypoellipticity, BracketConfig, VectorFieldSet};
use flowlab::flow::{center_functional, CenteringMeasure, FunctionalSpec};
use flowlab::measures::{uniform_torus, ParticleMeasure};
use flowlab::torus::diameter;
use flowlab::trig::{TrigMap, TrigTerm};
use flowlab::FlowError;

use crate::manifest::*;
use crate::report::{Check, Curve, Outcome};
use crate::CliError;

/// Minimum R² of a correlation-decay fit.
const MIXING_MIN_R2: f64 = 0.9;
/// Minimum R² of the stopping-time survival fit.
const TAIL_MIN_R2: f64 = 0.95;
/// Monte Carlo samples for centering constants that have no closed form.
const CENTERING_SAMPLES: usize = 1 << 16;
const CENTERING_TOLERANCE: f64 = 1e-3;
/// Stream offsets that keep auxiliary runs independent of the main realizations.
const ESCAPE_STREAMS: u64 = 1 << 32;
const INVARIANT_STREAMS: u64 = 1 << 40;
const DIFFUSIVITY_STREAMS: u64 = 1 << 44;
/// Seed of the random base points for escape runs.
const ESCAPE_BASE_SEED: u64 = 0xE5CA_9E;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Section {
    Conditions,
    Lyapunov,
    CltNpoint,
    CltMeasure,
    Mixing,
    Stopping,
    Energy,
    Equidistribution,
    Occupation,
    Dissipative,
}

impl Section {
    /// Suite order.
    pub const ALL: [Section; 10] = [
        Section::Conditions,
        Section::Lyapunov,
        Section::CltNpoint,
        Section::CltMeasure,
        Section::Mixing,
        Section::Stopping,
        Section::Energy,
        Section::Equidistribution,
        Section::Occupation,
        Section::Dissipative,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Section::Conditions => "conditions",
            Section::Lyapunov => "lyapunov",
            Section::CltNpoint => "clt_npoint",
            Section::CltMeasure => "clt_measure",
            Section::Mixing => "mixing",
            Section::Stopping => "stopping",
            Section::Energy => "energy",
            Section::Equidistribution => "equidistribution",
            Section::Occupation => "occupation",
            Section::Dissipative => "dissipative",
        }
    }

    pub fn present(self, m: &Manifest) -> bool {
        match self {
            Section::Conditions => m.conditions.is_some(),
            Section::Lyapunov => m.lyapunov.is_some(),
            Section::CltNpoint => !m.clt_npoint.is_empty(),
            Section::CltMeasure => m.clt_measure.is_some(),
            Section::Mixing => m.mixing.is_some(),
            Section::Stopping => m.stopping.is_some(),
            Section::Energy => m.energy.is_some(),
            Section::Equidistribution => !m.equidistribution.is_empty(),
            Section::Occupation => m.occupation.is_some(),
            Section::Dissipative => m.dissipative.is_some(),
        }
    }
}

/// Runs one section of the manifest.
pub fn run_section(l: &Loaded, section: Section) -> Result<Vec<Outcome>, CliError> {
    let m = &l.manifest;
    let missing = || CliError::MissingSection(section.key());
    match section {
        Section::Conditions => Ok(vec![conditions(l, m.conditions.as_ref().ok_or_else(missing)?)?]),
        Section::Lyapunov => Ok(vec![lyapunov(l, m.lyapunov.as_ref().ok_or_else(missing)?)?]),
        Section::CltNpoint => {
            if m.clt_npoint.is_empty() {
                return Err(missing());
            }
            m.clt_npoint.iter().map(|c| npoint(l, c)).collect()
        }
        Section::CltMeasure => Ok(vec![measure_clt(l, m.clt_measure.as_ref().ok_or_else(missing)?)?]),
        Section::Mixing => Ok(vec![mixing(l, m.mixing.as_ref().ok_or_else(missing)?)?]),
        Section::Stopping => Ok(vec![stopping(l, m.stopping.as_ref().ok_or_else(missing)?)?]),
        Section::Energy => Ok(vec![energy(l, m.energy.as_ref().ok_or_else(missing)?)?]),
        Section::Equidistribution => {
            if m.equidistribution.is_empty() {
                return Err(missing());
            }
            m.equidistribution.iter().map(|c| equidist(l, c)).collect()
        }
        Section::Occupation => Ok(vec![occupation(l, m.occupation.as_ref().ok_or_else(missing)?)?]),
        Section::Dissipative => Ok(vec![dissipative(l, m.dissipative.as_ref().ok_or_else(missing)?)?]),
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

fn steps(t: f64, dt: f64) -> f64 {
    (t / dt).ceil()
}

/// Rejects work above the manifest budget (single-point integration steps).
fn charge(l: &Loaded, experiment: &str, needed: f64) -> Result<(), CliError> {
    match l.manifest.run.budget {
        Some(budget) if needed > budget => Err(CliError::Budget {
            experiment: experiment.into(),
            needed,
            budget,
        }),
        _ => Ok(()),
    }
}

fn check_point(p: &[f64], dim: usize, what: &str) -> Result<(), CliError> {
    if p.len() != dim {
        return Err(CliError::Config(format!("{what} has dimension {} but the field set has N = {dim}", p.len())));
    }
    Ok(())
}

fn unit(v: &[f64], what: &str) -> Result<Vec<f64>, CliError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(CliError::Config(format!("{what} must be a nonzero vector")));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn est(e: &Estimate) -> String {
    format!("{:.5} (95% CI [{:.5}, {:.5}])", e.value, e.ci.0, e.ci.1)
}

fn scalar_map(input_dim: usize, terms: &[ScalarTerm]) -> Result<TrigMap, CliError> {
    let terms = terms
        .iter()
        .map(|t| TrigTerm::scalar(t.mode.clone(), t.cos, t.sin))
        .collect();
    Ok(TrigMap::new(input_dim, 1, terms)?)
}

/// Weighted displacement plus an optional extra drift, centered on Lebesgue measure.
fn npoint_functional(f: &VectorFieldSet, cfg: &FunctionalConfig) -> Result<(FunctionalSpec, Value), CliError> {
    let arity = cfg.weights.len();
    let base = FunctionalSpec::weighted_displacement(f, &cfg.weights, cfg.component)?;
    let raw = if cfg.extra_drift.is_empty() {
        base
    } else {
        let dim = f.dim() * arity;
        let extra = FunctionalSpec::new(arity, vec![TrigMap::zero(dim, 1); f.d()], scalar_map(dim, &cfg.extra_drift)?)?;
        FunctionalSpec::combine(&[(1.0, &base), (1.0, &extra)])?
    };
    let c = center_functional(f, &raw, CenteringMeasure::Lebesgue, CENTERING_SAMPLES, CENTERING_TOLERANCE, 1)?;
    let info = json!({ "exact": c.exact, "half_width": c.half_width, "drift_shift": c.spec.drift_shift });
    Ok((c.spec, info))
}

// ---------------------------------------------------------------- conditions

struct RankSummary {
    checks: Vec<Check>,
    details: Value,
}

fn rank_family(
    name: &str,
    configs: &[Result<flowlab::fields::RankReport, FlowError>],
    points: Vec<Value>,
) -> Result<(Check, Value), CliError> {
    let mut passes = 0;
    let mut first_fail = None;
    let mut rows = Vec::new();
    for (r, p) in configs.iter().zip(points) {
        let r = r.as_ref().map_err(|e| CliError::Config(e.to_string()))?;
        if r.pass {
            passes += 1;
        } else if first_fail.is_none() {
            first_fail = Some(r.message());
        }
        rows.push(json!({ "configuration": p, "rank": r.rank, "target": r.target, "depth": r.depth, "message": r.message() }));
    }
    let n = configs.len();
    let message = match first_fail {
        None => format!("{passes}/{n} configurations reach full rank"),
        Some(m) => format!("{passes}/{n} configurations reach full rank; first failure: {m}"),
    };
    // a missing rank at finite depth is not evidence against the condition
    let verdict = if passes == n { Verdict::Consistent } else { Verdict::Underpowered };
    Ok((Check::gate(name, verdict, message), json!(rows)))
}

fn rank_checks(f: &VectorFieldSet, cfg: &RankConfig) -> Result<RankSummary, CliError> {
    let n = f.dim();
    let k = cfg.configs;
    let bc = BracketConfig::default();
    let single = uniform_torus(n, k, cfg.seed);
    let pairs = uniform_torus(n, 2 * k, cfg.seed.wrapping_add(1));
    let bases = uniform_torus(n, k, cfg.seed.wrapping_add(2));
    let dirs: Vec<Vec<f64>> = uniform_torus(n, k, cfg.seed.wrapping_add(3))
        .into_iter()
        .map(|p| {
            let v: Vec<f64> = p.iter().map(|x| x - 0.5).collect();
            unit(&v, "direction").unwrap_or_else(|_| {
                let mut e = vec![0.0; n];
                e[0] = 1.0;
                e
            })
        })
        .collect();

    let one: Vec<_> = single.iter().map(|x| bracket_span_rank(f, &[x.clone()], cfg.depth, &bc)).collect();
    let two: Vec<_> = pairs
        .chunks(2)
        .map(|p| bracket_span_rank(f, p, cfg.depth, &bc))
        .collect();
    let proj: Vec<_> = bases
        .iter()
        .zip(&dirs)
        .map(|(x, u)| check_projective_hypoellipticity(f, x, u, cfg.depth, &bc))
        .collect();

    let (c1, d1) = rank_family("single-point hypoellipticity", &one, single.iter().map(|x| json!(x)).collect())?;
    let (c2, d2) = rank_family(
        "two-point hypoellipticity off the diagonal",
        &two,
        pairs.chunks(2).map(|p| json!(p)).collect(),
    )?;
    let (c3, d3) = rank_family(
        "projective hypoellipticity on the unit tangent bundle",
        &proj,
        bases.iter().zip(&dirs).map(|(x, u)| json!({ "x": x, "u": u })).collect(),
    )?;
    Ok(RankSummary {
        checks: vec![c1, c2, c3],
        details: json!({ "depth": cfg.depth, "configs": k, "single_point": d1, "two_point": d2, "projective": d3 }),
    })
}

fn conditions(l: &Loaded, c: &ConditionsConfig) -> Result<Outcome, CliError> {
    let f = &l.fields;
    let n = f.dim();
    let mut checks = Vec::new();
    let mut details = serde_json::Map::new();

    let probe = uniform_torus(n, 256, c.ranks.seed.wrapping_add(4));
    let mut max_div: f64 = 0.0;
    for k in 0..=f.d() {
        for x in &probe {
            max_div = max_div.max(f.divergence(k, x)?.abs());
        }
    }
    details.insert("max_divergence".into(), json!(max_div));
    if f.divergence_free() {
        checks.push(Check::pass(
            "divergence-free fields",
            max_div <= 1e-10,
            format!("max |div X_k| = {max_div:.3e} over 256 probe points"),
        ));
    } else {
        checks.push(Check::info(
            "divergence-free fields",
            format!("field set is not declared divergence-free; max |div X_k| = {max_div:.3e}"),
        ));
    }

    let ranks = rank_checks(f, &c.ranks)?;
    checks.extend(ranks.checks);
    details.insert("ranks".into(), ranks.details);

    let mut curves = Vec::new();
    if let Some(v) = &c.volume {
        check_point(&v.x0, n, "volume.x0")?;
        if f.divergence_free() {
            charge(l, "conditions", v.reps as f64 * steps(v.t, v.dt))?;
            let r = volume_defect(f, &l.params(Some(v.dt)), &v.x0, v.t, v.reps, v.tolerance)?;
            checks.push(Check::gate(
                "volume preservation",
                r.verdict,
                format!(
                    "max |det Dx_t - 1| = {:.3e} at t = {} (dt = {}, {} realizations, tolerance {})",
                    r.max_defect, r.t, v.dt, r.reps, r.tolerance
                ),
            ));
            details.insert("volume".into(), json!({ "dt": v.dt, "report": to_value(&r) }));
        } else {
            checks.push(Check::info("volume preservation", "skipped: field set is not divergence-free"));
        }
    }
    if let Some(cv) = &c.convergence {
        check_point(&cv.x0, n, "convergence.x0")?;
        let finest = cv.dts.last().copied().unwrap_or(1.0) / 2.0;
        charge(l, "conditions", 2.0 * cv.reps as f64 * steps(cv.t, finest))?;
        let r = self_convergence(f, l.manifest.noise.seed, l.manifest.noise.scheme, &cv.x0, &cv.dts, cv.t, cv.reps)?;
        checks.push(Check::gate(
            "strong self-convergence",
            r.verdict,
            format!(
                "order {:.3} (95% CI [{:.3}, {:.3}]), R^2 = {:.4}",
                r.order, r.order_ci.0, r.order_ci.1, r.r2
            ),
        ));
        let mut curve = Curve::new("convergence", &["dt", "error", "se"]);
        for (h, e) in r.dts.iter().zip(&r.errors) {
            curve.push(vec![*h, e.value, e.se]);
        }
        curves.push(curve);
        details.insert("convergence".into(), to_value(&r));
    }

    Ok(Outcome {
        experiment: "conditions".into(),
        property: "structural conditions: divergence, bracket spans, volume, integrator convergence".into(),
        dt: l.manifest.noise.dt,
        checks,
        details: Value::Object(details),
        curves,
    })
}

// ---------------------------------------------------------------- lyapunov

fn lyapunov(l: &Loaded, c: &LyapunovConfig) -> Result<Outcome, CliError> {
    let f = &l.fields;
    let n = f.dim();
    check_point(&c.x0, n, "lyapunov.x0")?;
    check_point(&c.v0, n, "lyapunov.v0")?;
    let params = l.params(c.dt);
    charge(l, "lyapunov", 2.0 * steps(c.t_final, params.dt))?;
    let spec = lyapunov_spectrum(f, &params, &c.x0, c.t_final, c.segments)?;
    let carv = carverhill_check(f, &params, &c.x0, &unit(&c.v0, "lyapunov.v0")?, c.t_final, c.segments)?;

    let top = &spec.exponents[0];
    let mut checks = vec![Check::pass(
        "positive top exponent",
        top.ci.0 > 0.0,
        format!("lambda_1 = {}", est(top)),
    )];
    let identity = (spec.sum.value - spec.log_det_rate).abs();
    checks.push(Check::pass(
        "exponent sum equals log-determinant rate",
        identity <= 1e-8,
        format!("|sum - log det / T| = {identity:.3e}"),
    ));
    if f.divergence_free() {
        checks.push(Check::pass(
            "exponents sum to zero",
            spec.sum.value.abs() <= 3.0 * spec.sum.se,
            format!("sum = {:.3e} (se {:.3e})", spec.sum.value, spec.sum.se),
        ));
    } else {
        checks.push(Check::info("exponents sum to zero", format!("not expected for a compressible set; sum = {}", est(&spec.sum))));
    }
    checks.push(Check::gate(
        "log-norm and stretching-rate estimates agree",
        carv.verdict,
        format!(
            "log-norm {} vs time-averaged stretching rate {} (joint half-width {:.5})",
            est(&carv.lognorm),
            est(&carv.carverhill),
            carv.joint_half_width
        ),
    ));
    let mut details = serde_json::Map::new();
    details.insert("spectrum".into(), to_value(&spec));
    details.insert("stretching_rate_check".into(), to_value(&carv));
    if let Some(r) = &c.ranks {
        let ranks = rank_checks(f, r)?;
        checks.extend(ranks.checks);
        details.insert("ranks".into(), ranks.details);
    }
    let mut curve = Curve::new("spectrum", &["index", "exponent", "se", "ci_low", "ci_high"]);
    for (i, e) in spec.exponents.iter().enumerate() {
        curve.push(vec![(i + 1) as f64, e.value, e.se, e.ci.0, e.ci.1]);
    }
    Ok(Outcome {
        experiment: "lyapunov".into(),
        property: "Lyapunov spectrum: positive top exponent, zero sum, stretching-rate cross-check".into(),
        dt: params.dt,
        checks,
        details: Value::Object(details),
        curves: vec![curve],
    })
}

// ---------------------------------------------------------------- n-point CLT

fn npoint(l: &Loaded, c: &NpointConfig) -> Result<Outcome, CliError> {
    let f = &l.fields;
    let name = format!("clt-npoint-{}", c.name);
    if c.points.len() != c.functional.weights.len() {
        return Err(CliError::Config(format!("{name}: one weight per point is required")));
    }
    for p in &c.points {
        check_point(p, f.dim(), "clt_npoint point")?;
    }
    let params = l.params(c.dt);
    let t_max = c.horizons.iter().copied().fold(0.0, f64::max);
    charge(l, &name, (c.points.len() * c.reps) as f64 * steps(t_max, params.dt))?;
    let (spec, centering) = npoint_functional(f, &c.functional)?;
    let r = clt_npoint(f, &params, &spec, &c.points, &c.horizons, c.reps)?;

    let mut checks = Vec::new();
    let mut curve = Curve::new(
        "moments",
        &["t", "coordinate", "mean", "variance", "skewness", "excess_kurtosis", "ks", "ks_critical"],
    );
    let last = r.horizons.len() - 1;
    for (h, rep) in r.reports.iter().enumerate() {
        for (q, cr) in rep.coordinates.iter().enumerate() {
            curve.push(vec![r.horizons[h], q as f64, cr.mean, cr.variance, cr.skewness, cr.excess_kurtosis, cr.ks, cr.ks_critical]);
            checks.push(Check::pass(
                format!("normality at t = {} (coordinate {q})", r.horizons[h]),
                cr.ks_pass,
                format!("KS {:.4} vs 1% critical {:.4}, variance {:.5}", cr.ks, cr.ks_critical, cr.variance),
            ));
            if h == last {
                checks.push(Check::pass(
                    format!("moment gates at t = {} (coordinate {q})", r.horizons[h]),
                    cr.skewness_pass && cr.kurtosis_pass,
                    format!(
                        "skewness {:.4} (|.| <= {SKEWNESS_GATE}), excess kurtosis {:.4} (|.| <= {KURTOSIS_GATE})",
                        cr.skewness, cr.excess_kurtosis
                    ),
                ));
            }
        }
    }
    checks.push(Check::info(
        "estimated drift",
        format!("v = {:?} from the mean displacement rate", r.drift),
    ));
    Ok(Outcome {
        experiment: name,
        property: format!("central limit theorem for a centered {}-point additive functional", c.points.len()),
        dt: params.dt,
        checks,
        details: json!({ "centering": centering, "report": to_value(&r) }),
        curves: vec![curve],
    })
}

// ---------------------------------------------------------------- measure CLT

fn measure_clt(l: &Loaded, c: &MeasureCltConfig) -> Result<Outcome, CliError> {
    let f = &l.fields;
    let params = l.params(c.dt);
    let nu = c.measure.build(f.dim())?;
    charge(l, "clt-measure", (nu.len() * c.realizations) as f64 * steps(c.t, params.dt))?;
    let property = "central limit theorem for a transported measure under fixed noise".to_string();
    let r = match clt_measure(f, &params, &nu, c.t, c.realizations) {
        Err(FlowError::Degenerate(msg)) => {
            return Ok(Outcome {
                experiment: "clt-measure".into(),
                property,
                dt: params.dt,
                checks: vec![Check::gate(
                    "normality of the displacement sample",
                    Verdict::Degenerate,
                    format!("point mass: {msg}"),
                )],
                details: Value::Null,
                curves: Vec::new(),
            });
        }
        other => other?,
    };
    let mut checks = Vec::new();
    let mut curve = Curve::new("realizations", &["realization", "coordinate", "variance", "variance_se", "skewness", "excess_kurtosis", "ks", "ks_critical"]);
    for (i, rep) in r.realizations.iter().enumerate() {
        let worst = rep
            .coordinates
            .iter()
            .map(|cr| cr.ks / cr.ks_critical)
            .fold(0.0, f64::max);
        checks.push(Check::pass(
            format!("normality in realization {i}"),
            rep.coordinates.iter().all(|cr| cr.ks_pass),
            format!(
                "KS per coordinate {:?} vs 1% critical {:.4} (worst ratio {worst:.3})",
                rep.coordinates.iter().map(|cr| (cr.ks * 1e4).round() / 1e4).collect::<Vec<_>>(),
                rep.coordinates[0].ks_critical
            ),
        ));
        for (q, cr) in rep.coordinates.iter().enumerate() {
            let v = &r.variances[i][q];
            curve.push(vec![i as f64, q as f64, v.value, v.se, cr.skewness, cr.excess_kurtosis, cr.ks, cr.ks_critical]);
        }
    }
    for (q, w) in r.variance_homogeneity.iter().enumerate() {
        checks.push(Check::pass(
            format!("deterministic variance (coordinate {q})"),
            w.passes(),
            format!(
                "Welch F = {:.3} on ({}, {:.1}) degrees of freedom, 95% critical {:.3}",
                w.statistic, w.df1, w.df2, w.critical
            ),
        ));
    }
    let cc = &r.cross_covariance;
    checks.push(Check::pass(
        "distinct particles uncorrelated",
        cc.value.abs() <= 3.0 * cc.se,
        format!("cross-covariance {:.3e} (se {:.3e})", cc.value, cc.se),
    ));
    checks.push(Check::info("estimated drift", format!("v = {:?}", r.drift)));
    Ok(Outcome {
        experiment: "clt-measure".into(),
        property,
        dt: params.dt,
        checks,
        details: to_value(&r),
        curves: vec![curve],
    })
}

// ---------------------------------------------------------------- mixing

fn mixing(l: &Loaded, c: &MixingConfig) -> Result<Outcome, CliError> {
    let f = &l.fields;
    let n = f.dim();
    check_point(&c.x, n, "mixing.x")?;
    check_point(&c.direction, n, "mixing.direction")?;
    if c.separations.len() < 2 {
        return Err(CliError::Config("mixing needs at least two separations".into()));
    }
    let params = l.params(c.dt);
    charge(l, "mixing", (2 * c.reps * c.separations.len()) as f64 * steps(c.t_final, params.dt))?;
    let dir = unit(&c.direction, "mixing.direction")?;
    let observables: Vec<TrigMap> = c.observables.iter().map(|o| o.build(2 * n)).collect::<Result<_, _>>()?;

    let mut by_obs: Vec<Vec<CorrelationCurve>> = vec![Vec::new(); observables.len()];
    for &s in &c.separations {
        let y: Vec<f64> = c.x.iter().zip(&dir).map(|(a, u)| a + s * u).collect();
        let curves = correlation_decay(f, &params, &observables, &c.x, &y, c.t_final, c.every, c.reps)?;
        for (o, cv) in curves.into_iter().enumerate() {
            by_obs[o].push(cv);
        }
    }

    let mut checks = Vec::new();
    let mut fits = Vec::new();
    let mut curve = Curve::new("correlation", &["observable", "separation", "t", "mean", "se"]);
    for (o, curves) in by_obs.iter().enumerate() {
        let mut per_sep = Vec::new();
        for (cv, &sep) in curves.iter().zip(&c.separations) {
            for ((t, m), se) in cv.times.iter().zip(&cv.mean).zip(&cv.se) {
                curve.push(vec![o as f64, sep, *t, *m, *se]);
            }
            let check = match fit_correlation(cv) {
                Ok(fit) => {
                    let ok = fit.decays(MIXING_MIN_R2);
                    per_sep.push(json!({ "separation": sep, "fit": to_value(&fit) }));
                    Check::pass(
                        format!("exponential decay (observable {o}, separation {sep})"),
                        ok,
                        format!(
                            "rate {:.4} (95% CI [{:.4}, {:.4}]), R^2 = {:.3} over {} points",
                            fit.rate, fit.rate_ci.0, fit.rate_ci.1, fit.r2, fit.points
                        ),
                    )
                }
                Err(e) => {
                    per_sep.push(json!({ "separation": sep, "fit": null }));
                    Check::pass(
                        format!("exponential decay (observable {o}, separation {sep})"),
                        false,
                        format!("no decay fit: {e}"),
                    )
                }
            };
            checks.push(check);
        }
        let sep = separation_exponent(curves);
        let check = match &sep {
            Ok(s) => Check::pass(
                format!("prefactor falls with separation (observable {o})"),
                s.decreasing(),
                match (s.p, s.p_ci) {
                    (Some(p), Some(ci)) => format!("fitted p = {p:.3} (95% CI [{:.3}, {:.3}]), common rate {:.4}", ci.0, ci.1, s.theta),
                    _ => "prefactor regression failed".into(),
                },
            ),
            Err(e) => Check::pass(format!("prefactor falls with separation (observable {o})"), false, e.to_string()),
        };
        checks.push(check);
        fits.push(json!({ "observable": o, "fits": per_sep, "separation": sep.ok().map(|s| to_value(&s)) }));
    }
    Ok(Outcome {
        experiment: "mixing".into(),
        property: "exponential decay of two-point correlations and its dependence on the initial separation".into(),
        dt: params.dt,
        checks,
        details: json!({ "x": c.x, "direction": dir, "observables": fits }),
        curves: vec![curve],
    })
}

// ---------------------------------------------------------------- stopping

fn stopping(l: &Loaded, c: &StoppingConfig) -> Result<Outcome, CliError> {
    let f = &l.fields;
    let n = f.dim();
    check_point(&c.x, n, "stopping.x")?;
    check_point(&c.y, n, "stopping.y")?;
    let params = l.params(c.dt);
    let r = c.radius.unwrap_or(DEFAULT_RADIUS_FRACTION * diameter(n));
    let delta = c.delta.unwrap_or(DEFAULT_DELTA);
    let e = &c.escape;
    if e.separations.len() < 3 {
        return Err(CliError::Config("stopping.escape needs at least three separations".into()));
    }
    charge(
        l,
        "stopping",
        2.0 * (c.reps as f64 * steps(c.t_final, params.dt) + (e.bases * e.separations.len()) as f64 * steps(e.t_max, params.dt)),
    )?;

    let records = return_cycles(f, &params, &c.x, &c.y, r, delta, c.t_final, c.reps)?;
    let mut cycles: Vec<f64> = records.iter().flat_map(|rec| rec.cycles()).collect();
    let mut checks = Vec::new();
    checks.push(Check::gate(
        "return-cycle sample size",
        if cycles.len() >= c.min_samples { Verdict::Consistent } else { Verdict::Underpowered },
        format!("{} cycles (at least {} required), r = {r:.4}, delta = {delta}", cycles.len(), c.min_samples),
    ));
    let tail = tail_fit(&cycles);
    let mut details = serde_json::Map::new();
    details.insert("r".into(), json!(r));
    details.insert("delta".into(), json!(delta));
    details.insert("cycles".into(), json!(cycles.len()));
    let mut curves = Vec::new();

    cycles.sort_by(f64::total_cmp);
    let mut survival = Curve::new("survival", &["t", "survival"]);
    let total = cycles.len() as f64;
    for (i, t) in cycles.iter().enumerate() {
        if i + 1 == cycles.len() || cycles[i + 1] > *t {
            survival.push(vec![*t, (total - (i + 1) as f64) / total]);
        }
    }
    curves.push(survival);

    match tail {
        Err(err) => {
            checks.push(Check::pass("exponential return-time tail", false, format!("no tail fit: {err}")));
        }
        Ok(fit) => {
            checks.push(Check::pass(
                "exponential return-time tail",
                fit.r2 >= TAIL_MIN_R2 && fit.rate_ci.0 > 0.0,
                format!(
                    "gamma = {:.5} (95% CI [{:.5}, {:.5}]), R^2 = {:.4}",
                    fit.rate, fit.rate_ci.0, fit.rate_ci.1, fit.r2
                ),
            ));
            details.insert("tail".into(), to_value(&fit));
            let alpha = fit.rate / 2.0;
            match exp_moment(&cycles, alpha, fit.rate) {
                Ok(m) => {
                    checks.push(Check::pass(
                        "finite exponential moment of return times",
                        m.value.is_finite() && m.ci.1.is_finite(),
                        format!("E exp(alpha tau) = {:.4} (95% CI [{:.4}, {:.4}]) at alpha = {alpha:.5}", m.value, m.ci.0, m.ci.1),
                    ));
                    details.insert("moment".into(), to_value(&m));
                }
                Err(err) => checks.push(Check::pass("finite exponential moment of return times", false, err.to_string())),
            }

            let dir = unit(&e.direction, "stopping.escape.direction")?;
            let bases = uniform_torus(n, e.bases, ESCAPE_BASE_SEED);
            let escape_params = params.with_stream_offset(ESCAPE_STREAMS);
            let mut times = Vec::new();
            let mut censored = Vec::new();
            for &s in &e.separations {
                let hits = escape_times(f, &escape_params, &bases, &dir, s, r, e.t_max)?;
                censored.push(hits.iter().filter(|h| h.is_none()).count());
                // runs still inside at the horizon count as escaping at the horizon
                times.push(hits.into_iter().map(|h| h.unwrap_or(e.t_max)).collect::<Vec<f64>>());
            }
            let mut escape_curve = Curve::new("escape", &["alpha", "separation", "moment"]);
            let mut slopes = Vec::new();
            for &frac in &e.alpha_fractions {
                let a = frac * fit.rate;
                let s = escape_moment_slope(&e.separations, &times, a)?;
                for (d, m) in s.separations.iter().zip(&s.moments) {
                    escape_curve.push(vec![a, *d, *m]);
                }
                checks.push(Check::gate(
                    format!("escape moments fall with separation (alpha = {frac} gamma)"),
                    s.verdict,
                    format!(
                        "slope of log E exp(alpha tau) on log d = {:.4} (95% CI [{:.4}, {:.4}])",
                        s.slope, s.slope_ci.0, s.slope_ci.1
                    ),
                ));
                slopes.push(to_value(&s));
            }
            details.insert(
                "escape".into(),
                json!({ "bases": e.bases, "t_max": e.t_max, "censored": censored, "slopes": slopes }),
            );
            curves.push(escape_curve);
        }
    }
    Ok(Outcome {
        experiment: "stopping".into(),
        property: "exponential tails of return times to the separated region and escape from near the diagonal".into(),
        dt: params.dt,
        checks,
        details: Value::Object(details),
        curves,
    })
}

// ---------------------------------------------------------------- transport

fn energy(l: &Loaded, c: &EnergyConfig) -> Result<Outcome, CliError> {
    let f = &l.fields;
    let params = l.params(c.dt);
    let nu = c.measure.build(f.dim())?;
    let t_max = c.times.iter().copied().fold(0.0, f64::max);
    charge(l, "energy", (nu.len() * c.reps) as f64 * steps(t_max, params.dt))?;
    let r = energy_trend(f, &params, &nu, c.p, &c.times, c.reps)?;
    let mut curve = Curve::new("energy", &["t", "mean", "se"]);
    for (t, e) in r.times.iter().zip(&r.mean) {
        curve.push(vec![*t, e.value, e.se]);
    }
    let checks = vec![
        Check::gate(
            "no growth of the p-energy",
            r.verdict,
            format!(
                "trend {:.4e} per unit time (95% CI [{:.4e}, {:.4e}]), I_p(nu) = {:.4}, fitted C = {:.4}",
                r.slope, r.slope_ci.0, r.slope_ci.1, r.initial, r.bound_constant
            ),
        ),
    ];
    Ok(Outcome {
        experiment: "energy".into(),
        property: format!("mean {}-energy of the transported measure stays bounded", c.p),
        dt: params.dt,
        checks,
        details: to_value(&r),
        curves: vec![curve],
    })
}

fn equidist(l: &Loaded, c: &EquidistributionConfig) -> Result<Outcome, CliError> {
    let f = &l.fields;
    let name = format!("equidistribution-{}", c.name);
    let params = l.params(c.dt);
    let nu = c.measure.build(f.dim())?;
    let t_max = c.times.iter().copied().fold(0.0, f64::max);
    charge(l, &name, (nu.len() * c.reps) as f64 * steps(t_max, params.dt))?;
    let b = c.observable.build(f.dim())?;
    let r = equidistribution(f, &params, &nu, &b, &c.times, c.reps)?;
    let mut curve = Curve::new("decay", &["t", "mean_abs", "se"]);
    for (t, e) in r.times.iter().zip(&r.mean_abs) {
        curve.push(vec![*t, e.value, e.se]);
    }
    let message = match &r.fit {
        Some(fit) => format!(
            "rate {:.4} (95% CI [{:.4}, {:.4}]), R^2 = {:.3} over t in [{}, {}], cloud floor {:.4}",
            fit.rate,
            fit.rate_ci.0,
            fit.rate_ci.1,
            fit.r2,
            r.times[r.window.0],
            r.times[r.window.1 - 1],
            r.floor
        ),
        None => format!("fewer than 3 points above the cloud floor {:.4}", r.floor),
    };
    Ok(Outcome {
        experiment: name,
        property: "exponential decay of observable averages over the transported measure".into(),
        dt: params.dt,
        checks: vec![Check::gate("exponential equidistribution", r.verdict, message)],
        details: to_value(&r),
        curves: vec![curve],
    })
}

fn occupation(l: &Loaded, c: &OccupationConfig) -> Result<Outcome, CliError> {
    let f = &l.fields;
    for p in &c.points {
        check_point(p, f.dim(), "occupation point")?;
    }
    let params = l.params(c.dt);
    let t_max = c.horizons.iter().copied().fold(0.0, f64::max);
    charge(l, "occupation", (c.points.len() * c.reps) as f64 * steps(t_max, params.dt))?;
    let r = occupation_experiment(f, &params, &c.points, c.radius, c.threshold, &c.horizons, c.reps)?;
    let mut curve = Curve::new("exceedance", &["t", "exceedance", "se", "mean_fraction"]);
    for ((t, e), m) in r.horizons.iter().zip(&r.exceedance).zip(&r.mean_fraction) {
        curve.push(vec![*t, e.value, e.se, *m]);
    }
    let checks = vec![Check::gate(
        "rare long stays near the diagonal",
        r.verdict,
        format!(
            "P(fraction of time within {} of the diagonal > {}) trend {:.4e} (95% CI [{:.4e}, {:.4e}])",
            r.r, r.threshold, r.trend_slope, r.trend_ci.0, r.trend_ci.1
        ),
    )];
    Ok(Outcome {
        experiment: "occupation".into(),
        property: "time spent near the generalized diagonal by the n-point motion".into(),
        dt: params.dt,
        checks,
        details: to_value(&r),
        curves: vec![curve],
    })
}

// ---------------------------------------------------------------- dissipative

fn decomposition_run(
    f: &VectorFieldSet,
    params: &PathParams,
    c: &DecompositionConfig,
    nu: &ParticleMeasure,
    epsilon: f64,
) -> Result<(DissipativeCltReport, Value), CliError> {
    let raw = FunctionalSpec::weighted_displacement(f, &[1.0], c.component)?;
    let (spec, info) = if epsilon == 0.0 {
        let cen = center_functional(f, &raw, CenteringMeasure::Lebesgue, CENTERING_SAMPLES, CENTERING_TOLERANCE, 1)?;
        (cen.spec, json!({ "measure": "lebesgue", "exact": cen.exact }))
    } else {
        let inv = &c.invariant;
        let cloud = occupation_cloud(
            f,
            &params.with_stream_offset(INVARIANT_STREAMS),
            &inv.x0,
            inv.burn_in,
            inv.every,
            inv.samples,
        )?;
        let w = vec![1.0 / cloud.len() as f64; cloud.len()];
        let cen = center_functional(f, &raw, CenteringMeasure::Weighted { points: &cloud, weights: &w }, CENTERING_SAMPLES, f64::INFINITY, 1)?;
        (
            cen.spec,
            json!({ "measure": "occupation", "samples": inv.samples, "burn_in": inv.burn_in, "every": inv.every }),
        )
    };
    let r = dissipative_clt_experiment(f, params, nu, &spec, c.depth, c.t, c.realizations)?;
    Ok((r, info))
}

fn dissipative(l: &Loaded, c: &DissipativeConfig) -> Result<Outcome, CliError> {
    let base = &l.fields;
    let n = base.dim();
    let params = l.params(c.dt);
    let mut eps = c.epsilons.clone();
    if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0)) {
        return Err(CliError::Config("dissipative.epsilons must be positive".into()));
    }
    eps.sort_by(|a, b| b.total_cmp(a));
    let pb = &c.pullback;
    let dc = &c.decomposition;
    let dif = &c.diffusivity;
    check_point(&dc.invariant.x0, n, "invariant.x0")?;
    check_point(&dif.x0, n, "diffusivity.x0")?;
    if dif.horizons.last().copied() != Some(dc.t) {
        return Err(CliError::Config("diffusivity horizons must end at the decomposition horizon".into()));
    }
    let nu1 = pb.first.build(n)?;
    let nu2 = pb.second.build(n)?;
    let nu = dc.measure.build(n)?;
    let deepest = pb.depths.iter().copied().fold(0.0, f64::max);
    let per_eps = (nu1.len() + nu2.len()) as f64 * (pb.reps * pb.depths.len()) as f64 * steps(deepest + pb.t, params.dt) / 2.0
        + (nu.len() * dc.realizations) as f64 * steps(dc.depth + dc.t, params.dt);
    charge(l, "dissipative", per_eps * (eps.len() + 1) as f64 + 2.0 * dif.reps as f64 * steps(dc.t, params.dt))?;
    let a = pb.observable.build(n)?;

    let mut checks = Vec::new();
    let mut pullbacks = Vec::new();
    let mut gap_curve = Curve::new("pullback", &["epsilon", "depth", "gap", "se"]);
    let mut fields = Vec::new();
    for &e in &eps {
        let fe = base.with_dissipation(e, c.potential_seed)?;
        let r = pullback_convergence(&fe, &params, &nu1, &nu2, &a, &pb.depths, pb.t, pb.reps)?;
        for (d, g) in r.depths.iter().zip(&r.gaps) {
            gap_curve.push(vec![e, *d, g.value, g.se]);
        }
        let message = match (r.rho, r.rho_ci) {
            (Some(rho), Some(ci)) => format!(
                "rho = {rho:.4} (95% CI [{:.4}, {:.4}]) from {} depths above 3x the cloud floor {:.4}",
                ci.0, ci.1, r.fitted, r.floor
            ),
            _ => format!("fewer than 3 depths above 3x the cloud floor {:.4}", r.floor),
        };
        checks.push(Check::gate(format!("pullback convergence (epsilon = {e})"), r.verdict, message));
        pullbacks.push(json!({ "epsilon": e, "report": to_value(&r) }));
        fields.push((e, fe));
    }

    let (baseline, baseline_info) = decomposition_run(base, &params, dc, &nu, 0.0)?;
    let mut runs = Vec::new();
    let mut centering = vec![json!({ "epsilon": 0.0, "centering": baseline_info })];
    for (e, fe) in &fields {
        let (r, info) = decomposition_run(fe, &params, dc, &nu, *e)?;
        centering.push(json!({ "epsilon": e, "centering": info }));
        runs.push((*e, r));
    }
    let mut var_curve = Curve::new("variances", &["epsilon", "d_common", "d_common_se", "d_individual", "d_individual_se", "ks_pass_fraction"]);
    for (e, r) in std::iter::once((0.0, &baseline)).chain(runs.iter().map(|(e, r)| (*e, r))) {
        var_curve.push(vec![e, r.d_common.value, r.d_common.se, r.d_individual.value, r.d_individual.se, r.individual_ks_pass_fraction]);
        checks.push(Check::pass(
            format!("drift decomposition identity (epsilon = {e})"),
            r.identity_error <= IDENTITY_TOLERANCE,
            format!("max |A - C - B| = {:.3e}", r.identity_error),
        ));
        checks.push(Check::info(
            format!("fluctuation normality (epsilon = {e})"),
            format!(
                "{:.0}% of realizations pass the KS gate; D' = {}, D'' = {}",
                100.0 * r.individual_ks_pass_fraction,
                est(&r.d_individual),
                est(&r.d_common)
            ),
        ));
    }

    let raw = FunctionalSpec::weighted_displacement(base, &[1.0], dc.component)?;
    let cen = center_functional(base, &raw, CenteringMeasure::Lebesgue, CENTERING_SAMPLES, CENTERING_TOLERANCE, 1)?;
    let da = flowlab::analysis::estimate_da(
        base,
        &params.with_stream_offset(DIFFUSIVITY_STREAMS),
        &cen.spec,
        &dif.x0,
        &nu.torus_points(),
        &dif.horizons,
        dif.reps,
    )?;
    let refs: Vec<(f64, &DissipativeCltReport)> = runs.iter().map(|(e, r)| (*e, r)).collect();
    let lim = conservative_limit(&refs, &baseline, da.per_measure[0])?;
    checks.push(Check::gate(
        "conservative limit",
        lim.verdict,
        format!(
            "extrapolated to epsilon = 0: D'' = {} vs divergence-free {} (gap {:.3e}, bound {:.3e}); D' = {} vs D(A) = {} (gap {:.3e}, bound {:.3e})",
            est(&lim.d_common_limit),
            est(&lim.d_common_baseline),
            lim.common_gap.0,
            lim.common_gap.1,
            est(&lim.d_individual_limit),
            est(&lim.diffusivity),
            lim.individual_gap.0,
            lim.individual_gap.1
        ),
    ));
    checks.push(Check::info(
        "comparison at the smallest epsilon",
        format!(
            "epsilon = {}: D'' gap {:.3e} (bound {:.3e}), D' gap {:.3e} (bound {:.3e})",
            eps.last().expect("nonempty"),
            lim.common_gap_smallest.0,
            lim.common_gap_smallest.1,
            lim.individual_gap_smallest.0,
            lim.individual_gap_smallest.1
        ),
    ));
    let reports: Vec<Value> = std::iter::once(json!({ "epsilon": 0.0, "report": to_value(&baseline) }))
        .chain(runs.iter().map(|(e, r)| json!({ "epsilon": e, "report": to_value(r) })))
        .collect();
    Ok(Outcome {
        experiment: "dissipative".into(),
        property: "pullback measures, drift-fluctuation decomposition and the conservative limit under dissipation".into(),
        dt: params.dt,
        checks,
        details: json!({
            "pullback_depth": dc.depth,
            "pullback": pullbacks,
            "centering": centering,
            "decomposition": reports,
            "diffusivity": to_value(&da),
            "conservative_limit": to_value(&lim),
        }),
        curves: vec![gap_curve, var_curve],
    })
}

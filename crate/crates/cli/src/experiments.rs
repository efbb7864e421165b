use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use varlab::approx::{
    build_lipschitz_approximant, estimates_to_csv, find_row, height_bands, validate_lip_estimates, validate_lipen,
    LipOptions,
};
use varlab::excess::{cylindrical_excess, reports_to_csv, spherical_excess, CylinderSpec};
use varlab::grassmann::ProjectionPlane;
use varlab::models::{
    bump_graph, catenoid_d_constants, generate_catenoid, generate_graph, generate_plane, transverse_planes,
    AngularResolution, CatenoidSpec, DEstimate, GraphSpec, GraphVarifold, PlaneSpec, Sheet,
};
use varlab::regularity::{decay_profile, predecay_step, PredecayOptions, Verdict};
use varlab::testfn::{BumpField, RadialBump};
use varlab::varifold::DiscreteVarifold;

use crate::config::{Experiment, ExperimentConfig, Model};

/// A file produced by an experiment, relative to the output directory.
pub struct Artifact {
    pub name: String,
    pub body: Vec<u8>,
}

/// Log-log (or semi-log) plot of two CSV columns.
pub struct PlotSpec {
    pub csv: String,
    pub x: &'static str,
    pub y: &'static str,
    pub log_y: bool,
}

pub struct RunOutput {
    pub artifacts: Vec<Artifact>,
    pub plots: Vec<PlotSpec>,
    /// Set when a validator measured a violation of a proven bound.
    pub violation: Option<String>,
}

impl RunOutput {
    fn new() -> Self {
        Self {
            artifacts: Vec::new(),
            plots: Vec::new(),
            violation: None,
        }
    }

    fn add(&mut self, name: &str, body: impl Into<Vec<u8>>) {
        self.artifacts.push(Artifact {
            name: name.to_string(),
            body: body.into(),
        });
    }

    fn plot(&mut self, csv: &str, x: &'static str, y: &'static str, log_y: bool) {
        self.plots.push(PlotSpec {
            csv: csv.to_string(),
            x,
            y,
            log_y,
        });
    }

    fn flag(&mut self, msg: String) {
        match &mut self.violation {
            Some(v) => {
                v.push_str("; ");
                v.push_str(&msg);
            }
            None => self.violation = Some(msg),
        }
    }
}

struct Built {
    varifold: DiscreteVarifold,
    graph: Option<GraphVarifold>,
}

fn sheets(m: usize, n: usize, q: usize, eps: f64) -> Vec<Sheet> {
    (0..q)
        .map(|i| {
            let mut a = vec![0.0; n * m];
            a[(i / 2) % m] = if i % 2 == 0 { eps } else { -eps };
            let mut b = vec![0.0; n];
            b[0] = 0.3 * (i / 2) as f64;
            Sheet::affine(1, a, b)
        })
        .collect()
}

fn bump_centers(m: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    // quarter lattice points in B_{3/4}
    let mut pts: Vec<Vec<f64>> = Vec::new();
    let k = 3i64;
    let total = (2 * k + 1).pow(m as u32);
    for idx in 0..total {
        let mut c = Vec::with_capacity(m);
        let mut r = idx;
        for _ in 0..m {
            c.push(((r % (2 * k + 1)) - k) as f64 * 0.25);
            r /= 2 * k + 1;
        }
        if c.iter().map(|x| x * x).sum::<f64>() <= 0.75 * 0.75 + 1e-12 {
            pts.push(c);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pts.shuffle(&mut rng);
    pts.truncate(count);
    pts
}

fn build(c: &ExperimentConfig) -> varlab::Result<Built> {
    let (m, n, q) = (c.usize("m"), c.usize("n"), c.usize("q"));
    let (h, extent, eps) = (c.f64("h"), c.f64("extent"), c.f64("epsilon"));
    let fine = 1.1 * c.f64("r0").max(1.0);
    let graph = |spec: GraphSpec| -> varlab::Result<Built> {
        let spec = if extent > fine { spec.with_fine_radius(fine) } else { spec };
        let g = generate_graph(&spec, h)?;
        Ok(Built {
            varifold: g.varifold.clone(),
            graph: Some(g),
        })
    };
    match c.model() {
        Model::Plane => Ok(Built {
            varifold: generate_plane(&PlaneSpec::flat(m, n, extent).with_multiplicity(q as u32), h)?,
            graph: None,
        }),
        Model::Tilted => Ok(Built {
            varifold: generate_plane(
                &PlaneSpec::flat(m, n, extent)
                    .with_multiplicity(q as u32)
                    .with_tilt(ProjectionPlane::rotated_coordinate(m, n, 0, m, c.f64("theta"))),
                h,
            )?,
            graph: None,
        }),
        Model::Sheets => graph(GraphSpec::new(m, n, extent, sheets(m, n, c.sheet_count(), eps))),
        Model::Saddle => graph(GraphSpec::single(
            m,
            extent,
            move |x: &[f64]| eps * (x[0] * x[0] - x[1] * x[1]),
            move |x: &[f64]| {
                let mut g = vec![0.0; x.len()];
                g[0] = 2.0 * eps * x[0];
                g[1] = -2.0 * eps * x[1];
                g
            },
        )),
        Model::Bumps => graph(bump_graph(m, extent, bump_centers(m, c.usize("bumps"), c.u64("seed")), eps, 0.25)),
        Model::Catenoid => Ok(Built {
            varifold: generate_catenoid(
                &CatenoidSpec::new(m, 1.0 / c.f64("r"), extent),
                h,
                AngularResolution::Adaptive,
            )?,
            graph: None,
        }),
        Model::Cone => Ok(Built {
            varifold: transverse_planes(m, n, c.f64("theta"), extent, h)?,
            graph: None,
        }),
    }
}

/// Runs the configured experiment in memory.
pub fn run(c: &ExperimentConfig) -> varlab::Result<RunOutput> {
    match c.experiment() {
        Experiment::Generate => generate(c),
        Experiment::Excess => excess(c),
        Experiment::Height => height(c),
        Experiment::Lipapprox => lipapprox(c),
        Experiment::Lipen => lipen(c),
        Experiment::Decay => decay(c),
        Experiment::CatenoidAsymptotics => catenoid(c),
        Experiment::Validators => validators(c),
    }
}

fn generate(c: &ExperimentConfig) -> varlab::Result<RunOutput> {
    let b = build(c)?;
    let v = &b.varifold;
    let mut out = RunOutput::new();
    let mut text = Vec::new();
    v.write_text(&mut text)?;
    out.add("varifold.txt", text);
    out.add(
        "summary.csv",
        format!(
            "samples,total_mass,mesh_scale,m,n\n{},{:.12e},{:.12e},{},{}\n",
            v.len(),
            v.total_mass(),
            v.mesh_scale(),
            v.m(),
            v.n()
        ),
    );
    Ok(out)
}

fn excess(c: &ExperimentConfig) -> varlab::Result<RunOutput> {
    let b = build(c)?;
    let v = &b.varifold;
    let (m, n) = (v.m(), v.n());
    let radii = c.list("radius");
    let cyl = radii
        .par_iter()
        .map(|&r| cylindrical_excess(v, &CylinderSpec::standard(m, n, vec![0.0; m], r)))
        .collect::<varlab::Result<Vec<_>>>()?;
    let sph = radii
        .par_iter()
        .map(|&r| spherical_excess(v, &vec![0.0; m + n], r))
        .collect::<varlab::Result<Vec<_>>>()?;
    let mut out = RunOutput::new();
    out.add("cylindrical.csv", reports_to_csv(&cyl));
    out.add("spherical.csv", reports_to_csv(&sph));
    Ok(out)
}

fn height(c: &ExperimentConfig) -> varlab::Result<RunOutput> {
    let b = build(c)?;
    let q = c.usize("q");
    let radii = c.list("radius");
    let bands = radii
        .par_iter()
        .map(|&r| height_bands(&b.varifold, r, q))
        .collect::<varlab::Result<Vec<_>>>()?;
    let mut out = RunOutput::new();
    let mut s =
        String::from("r,q,e1,gap,halfwidth,cluster_count,coverage_fraction,first_law_ratio,sharp_law_ratio,violation\n");
    for (r, hb) in radii.iter().zip(&bands) {
        let _ = writeln!(
            s,
            "{r:.6e},{q},{:.12e},{:.12e},{:.12e},{},{:.12e},{:.12e},{:.12e},{}",
            hb.e1,
            hb.gap,
            hb.halfwidth,
            hb.cluster_count,
            hb.coverage_fraction,
            hb.first_law_ratio,
            hb.sharp_law_ratio,
            hb.violation
        );
        if hb.violation {
            out.flag(format!("{} height bands at r = {r} exceed Q = {q}", hb.cluster_count));
        }
    }
    out.add("height.csv", s);
    out.plot("height.csv", "r", "halfwidth", false);
    Ok(out)
}

fn approximant(c: &ExperimentConfig, b: &Built) -> varlab::Result<varlab::approx::LipApproximant> {
    let opts = LipOptions {
        excess_threshold: c.f64("threshold"),
        ..LipOptions::default()
    };
    build_lipschitz_approximant(&b.varifold, c.f64("lambda"), c.usize("q"), &opts)
}

fn lipapprox(c: &ExperimentConfig) -> varlab::Result<RunOutput> {
    let b = build(c)?;
    let a = approximant(c, &b)?;
    // between half the clustering gap and the gap itself
    let tol = 0.75 * a.gap;
    let rows = match &b.graph {
        Some(g) => {
            let oracle = |x: &[f64], y: &[f64]| g.density_at(x, y, tol);
            validate_lip_estimates(&b.varifold, &a, Some(&oracle))?
        }
        None => validate_lip_estimates(&b.varifold, &a, None)?,
    };
    let mut out = RunOutput::new();
    let mut text = Vec::new();
    a.f.write_text(&mut text)?;
    out.add("approximant.txt", text);
    let mut mask = Vec::new();
    a.write_mask(&mut mask)?;
    out.add("kmask.txt", mask);
    out.add("estimates.csv", estimates_to_csv(&rows));
    let good = a.good.iter().filter(|&&g| g).count();
    out.add(
        "summary.csv",
        format!(
            "lambda,e4,good_nodes,nodes,lip_measured,thin_radius,gap,violations\n{:.6e},{:.12e},{good},{},{:.12e},{:.12e},{:.12e},{}\n",
            a.lambda,
            a.e4,
            a.good.len(),
            a.lip_measured,
            a.thin_radius,
            a.gap,
            a.violations.len()
        ),
    );
    if !a.violations.is_empty() {
        out.flag(format!("{} good nodes carry more than Q clusters", a.violations.len()));
    }
    if let Some(r) = find_row(&rows, "density_match") {
        if r.lhs > 0.0 {
            out.flag(format!("{} density mismatches", r.lhs));
        }
    }
    Ok(out)
}

fn lipen(c: &ExperimentConfig) -> varlab::Result<RunOutput> {
    let b = build(c)?;
    let a = approximant(c, &b)?;
    let phi = RadialBump::new(vec![0.0; b.varifold.m()], 0.5);
    let rows = validate_lipen(&b.varifold, &a, c.f64("p"), &phi, 0.5)?;
    let mut out = RunOutput::new();
    out.add("lipen.csv", estimates_to_csv(&rows));
    Ok(out)
}

fn decay(c: &ExperimentConfig) -> varlab::Result<RunOutput> {
    let b = build(c)?;
    let v = &b.varifold;
    let q = c.usize("q");
    let origin = vec![0.0; v.dim()];
    let p = decay_profile(v, &origin, c.f64("r0"), c.usize("levels"), q)?;
    let mut out = RunOutput::new();
    out.add("decay.csv", p.to_csv());
    out.add(
        "decay_summary.csv",
        format!(
            "fitted_exponent,fit_residual,flat,floor,levels\n{},{:.12e},{},{:.12e},{}\n",
            p.fitted_exponent.map(|k| format!("{k:.12e}")).unwrap_or_default(),
            p.fit_residual,
            p.flat,
            p.floor,
            c.usize("levels")
        ),
    );
    out.plot("decay.csv", "r", "excess", true);
    if c.bool("predecay") {
        let opts = PredecayOptions {
            delta: c.f64("delta"),
            eta_grid: c.list("eta"),
            ..PredecayOptions::default()
        };
        let r = predecay_step(v, q, &opts)?;
        out.add("predecay.csv", r.to_csv());
        if r.verdict == Verdict::Failed {
            out.flag(format!(
                "decay inequality fails at η = {}: {:.6e} > {:.6e}",
                r.eta_used, r.lhs, r.rhs
            ));
        }
    }
    Ok(out)
}

fn catenoid(c: &ExperimentConfig) -> varlab::Result<RunOutput> {
    let d = catenoid_d_constants(c.f64("beta"), c.f64("p"))?;
    let all: [(&str, &DEstimate); 4] = [("d1", &d.d1), ("d2", &d.d2), ("d3", &d.d3), ("d4", &d.d4)];
    let mut out = RunOutput::new();
    let mut s = String::from("constant,label,estimate,err_estimate,converged,analytic_limit\n");
    for (name, e) in all {
        let _ = writeln!(
            s,
            "{name},{},{:.12e},{:.12e},{},{:.12e}",
            e.constant.label().replace(',', ";"),
            e.estimate,
            e.error,
            e.converged,
            e.constant.analytic_limit()
        );
    }
    out.add("catenoid.csv", s);
    for (name, e) in all {
        let file = format!("{name}.csv");
        out.add(&file, e.to_csv());
        out.plot(&file, "R", "ratio", false);
    }
    Ok(out)
}

fn validators(c: &ExperimentConfig) -> varlab::Result<RunOutput> {
    let b = build(c)?;
    let v = &b.varifold;
    let d = v.dim();
    let origin = vec![0.0; d];
    let phi = RadialBump::new(origin.clone(), 0.5);
    let mut rows: Vec<(String, f64)> = Vec::new();
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        rows.push((format!("first_variation_x{j}"), v.first_variation(&BumpField::new(phi.clone(), e))?));
    }
    for j in 0..d {
        rows.push((format!("harmonicity_x{j}"), v.harmonicity_residual(j, &phi)?));
    }
    rows.push(("monotonicity".into(), v.monotonicity_residual_smooth(&origin, 0.25, 0.75, 0.1)?));
    let iso = v.isoperimetric_check(&phi.clone().with_amplitude(2.0))?;
    rows.push(("isoperimetric_lhs".into(), iso.lhs));
    rows.push(("isoperimetric_rhs".into(), iso.rhs));
    rows.push(("isoperimetric_ratio".into(), iso.ratio));
    let mut s = String::from("validator,value\n");
    for (k, x) in &rows {
        let _ = writeln!(s, "{k},{x:.12e}");
    }
    let mut out = RunOutput::new();
    out.add("validators.csv", s);
    if iso.violation {
        out.flag("isoperimetric inequality has a vanishing right side".into());
    }
    Ok(out)
}

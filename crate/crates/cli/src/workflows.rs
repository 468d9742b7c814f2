//! The six workflows. Each writes its artifacts into the run directory and returns the
//! report; `report.json` is written by `run`.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use llflow_core::diagnostics::{detect_scale, fit_power_law};
use llflow_core::evolve::{evolve_from_profile, EvolveConfig, SchemeConfig};
use llflow_core::glue::{Construction, GlueConfig};
use llflow_core::inner::{InnerConfig, InnerStack};
use llflow_core::selfsim::{derive_matching_data, matching_check_inner, SelfSimConfig, SelfSimFamily};
use llflow_core::sphere::energy;
use llflow_core::Params;

use crate::config::{self, RunConfig, Workflow};
use crate::output::{write_csv, write_json, write_svg, Series};
use crate::{ctx, Check, CliError, Report};

/// Geometric samples from `lo` to `hi` inclusive.
pub fn geomspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64)).collect()
}

struct Run<'a> {
    cfg: &'a RunConfig,
    p: Params,
    dir: PathBuf,
    report: Report,
}

impl Run<'_> {
    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<(), CliError> {
        write_csv(&self.dir.join(name), header, rows)?;
        self.report.artifacts.push(name.into());
        Ok(())
    }

    fn svg(&mut self, name: &str, title: &str, xlabel: &str, series: &[Series], logx: bool, logy: bool) -> Result<(), CliError> {
        if self.cfg.output.plots {
            write_svg(&self.dir.join(name), title, xlabel, series, logx, logy)?;
            self.report.artifacts.push(name.into());
        }
        Ok(())
    }

    fn construction(&self) -> Result<Construction, CliError> {
        ctx("glue.build", Construction::build(&self.p, &GlueConfig::default()))
    }
}

/// Validates, creates the output directory, runs the workflow and writes `report.json`.
pub fn run(workflow: Workflow, cfg: &RunConfig, table: &toml::Table) -> Result<Report, CliError> {
    let p = cfg.validate(workflow)?;
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut run = Run { cfg, p, dir, report: Report::new(workflow, cfg) };
    match workflow {
        Workflow::Profile => profile(&mut run)?,
        Workflow::Residual => residual(&mut run)?,
        Workflow::Match => matching(&mut run)?,
        Workflow::Evolve => evolve(&mut run)?,
        Workflow::Sweep => sweep(&mut run, table)?,
        Workflow::Report => report(&mut run)?,
    }
    run.report.artifacts.push("report.json".into());
    write_json(&run.dir.join("report.json"), &run.report)?;
    Ok(run.report)
}

fn profile(run: &mut Run) -> Result<(), CliError> {
    let c = run.construction()?;
    let t = run.cfg.time.t1;

    let rho = c.inner.grid().nodes();
    let mut header = vec!["rho".to_string()];
    for k in 1..=c.inner.depth() {
        header.extend([format!("z{k}_re"), format!("z{k}_im")]);
    }
    let rows: Vec<Vec<f64>> = (0..rho.len())
        .map(|i| {
            let mut row = vec![rho[i]];
            for k in 1..=c.inner.depth() {
                let z = c.inner.layer(k)[i];
                row.extend([z.re, z.im]);
            }
            row
        })
        .collect();
    run.csv("inner.csv", &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;

    let ss = &c.selfsim;
    let y = ss.grid().nodes();
    let mut header = vec!["y".to_string()];
    let mut cols = Vec::new();
    for j in 0..=ss.depth() {
        for l in 0..ss.level(j).grid.len() {
            header.extend([format!("w{j}_{l}_re"), format!("w{j}_{l}_im")]);
            cols.push(ss.w(j, l));
        }
    }
    let rows: Vec<Vec<f64>> = (0..y.len()).map(|i| std::iter::once(y[i]).chain(cols.iter().flat_map(|w| [w[i].re, w[i].im])).collect()).collect();
    run.csv("selfsim.csv", &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;

    let r = c.remote.rgrid.nodes();
    let w = c.remote.profile_at(r, t);
    let rows: Vec<Vec<f64>> = r.iter().zip(&w).map(|(&r, w)| vec![r, w.re, w.im]).collect();
    run.csv("remote.csv", &["r", "w_re", "w_im"], &rows)?;

    let grid = ctx("grid", run.cfg.grid.build())?;
    let u = ctx("glue.lab_field", c.lab_field(&grid, t))?;
    let rows: Vec<Vec<f64>> = grid.nodes().iter().zip(u.values()).map(|(&r, v)| vec![r, v[0], v[1], v[2]]).collect();
    run.csv("snapshot.csv", &["r", "v1", "v2", "v3"], &rows)?;
    let series: Vec<Series> = (0..3).map(|k| Series { name: ["v1", "v2", "v3"][k], points: rows.iter().map(|row| (row[0], row[k + 1])).collect() }).collect();
    run.svg("snapshot.svg", &format!("u^(N) at t = {t}"), "r", &series, true, false)?;

    let rep = &mut run.report;
    rep.values.insert("t".into(), t);
    rep.values.insert("lambda".into(), run.p.lambda(t));
    rep.values.insert("energy".into(), ctx("sphere.energy", energy(&u))?);
    if let Ok(s) = detect_scale(&u) {
        rep.values.insert("scale_times_lambda".into(), s * run.p.lambda(t));
    }
    rep.values.insert("continuity_jump".into(), ctx("glue.continuity_jump", c.continuity_jump(t))?);
    rep.check(Check::at_most("sphere_defect", u.sphere_defect(), 1e-12));
    let coeff = c.remote.coefficient_system_residual().iter().map(|x| x.1).fold(0.0, f64::max);
    rep.check(Check::at_most("remote_coefficient_residual", coeff, 1e-6));
    rep.check(Check::at_least("remote_vanishing_thresholds", c.remote.vanishing_thresholds_hold() as u8 as f64, 1.0));
    Ok(())
}

fn residual_series(run: &mut Run, c: &Construction) -> Result<Vec<Vec<f64>>, CliError> {
    let w = &run.cfg.residual;
    geomspace(w.tmin, w.tmax, w.samples)
        .into_iter()
        .map(|t| {
            let r = ctx(format!("glue.global_residual(t = {t})"), c.global_residual(t))?;
            Ok(vec![t, r.lab.get("L2"), r.lab.get("H3")])
        })
        .collect()
}

fn residual(run: &mut Run) -> Result<(), CliError> {
    let c = run.construction()?;
    let rows = residual_series(run, &c)?;
    run.csv("residual.csv", &["t", "L2", "H3"], &rows)?;
    let series = [
        Series { name: "L2", points: rows.iter().map(|r| (r[0], r[1])).collect() },
        Series { name: "H3", points: rows.iter().map(|r| (r[0], r[2])).collect() },
    ];
    run.svg("residual.svg", "global residual", "t", &series, true, true)?;
    let l2 = ctx("diagnostics.fit_power_law", fit_power_law(&series[0].points))?;
    let h3 = ctx("diagnostics.fit_power_law", fit_power_law(&series[1].points))?;
    let need = run.p.n as f64 - run.cfg.residual.margin;
    run.report.fits.insert("L2".into(), l2);
    run.report.fits.insert("H3".into(), h3);
    run.report.check(Check::at_least("L2_slope", l2.exponent, need));
    Ok(())
}

fn match_exponent(run: &mut Run) -> Result<Vec<(f64, f64)>, CliError> {
    let m = &run.cfg.matching;
    let icfg = InnerConfig::default();
    let icfg = InnerConfig { layers: icfg.layers.max(m.n + 1), ..icfg };
    let stack = ctx("inner.build", InnerStack::build(&run.p, &icfg))?;
    let data = ctx("selfsim.derive_matching_data", derive_matching_data(&stack, m.n))?;
    let fam = ctx("selfsim.build", SelfSimFamily::build(&run.p, &SelfSimConfig { levels: m.n, ..SelfSimConfig::default() }, &data))?;
    let ts = geomspace(m.tmin, m.tmax, m.samples);
    let rep = ctx("selfsim.matching_check_inner", matching_check_inner(&stack, &fam, m.n, &ts))?;
    let need = run.p.nu * (m.n as f64 + 1.0) - m.margin;
    run.report.fits.insert("overlap_sup".into(), rep.fit);
    run.report.check(Check::at_least("overlap_exponent", rep.fit.exponent, need));
    Ok(rep.samples)
}

fn matching(run: &mut Run) -> Result<(), CliError> {
    let samples = match_exponent(run)?;
    let rows: Vec<Vec<f64>> = samples.iter().map(|&(t, s)| vec![t, s]).collect();
    run.csv("match.csv", &["t", "sup_diff"], &rows)?;
    run.svg("match.svg", "inner vs self-similar overlap", "t", &[Series { name: "sup |W_ss - W_in|", points: samples }], true, true)
}

fn evolve(run: &mut Run) -> Result<(), CliError> {
    let (e, t) = (&run.cfg.evolve, &run.cfg.time);
    let ecfg = EvolveConfig {
        scheme: SchemeConfig { dt: t.policy(), spatial_order: e.spatial_order, ..SchemeConfig::default() },
        rmin_factor: e.rmin_factor,
        rmax_factor: e.rmax_factor,
        per_decade: e.per_decade,
        samples: t.samples,
        ..EvolveConfig::default()
    };
    let rep = ctx("evolve.evolve_from_profile", evolve_from_profile(&run.p, t.t1, t.t0, &ecfg))?;
    let rows: Vec<Vec<f64>> = rep
        .samples
        .iter()
        .map(|s| vec![s.t, s.h1, s.h3, s.energy, s.monitors.j0, s.monitors.j1, s.r_star.unwrap_or(f64::NAN)])
        .collect();
    run.csv("evolve.csv", &["t", "H1_dist", "H3_dist", "energy", "J0", "J1", "r_star"], &rows)?;
    let series = [
        Series { name: "H1 distance", points: rows.iter().map(|r| (r[0], r[1])).collect() },
        Series { name: "H3 distance", points: rows.iter().map(|r| (r[0], r[2])).collect() },
    ];
    run.svg("evolve.svg", "distance to u^(N)", "t", &series, true, true)?;
    let tol = e.h1_tolerance;
    let out = &mut run.report;
    out.values.insert("steps".into(), rep.steps as f64);
    out.values.insert("halvings".into(), rep.halvings as f64);
    out.values.insert("energy_violations".into(), rep.energy_violations as f64);
    out.check(Check::at_most("sup_H1_distance", rep.sup_h1, tol));
    out.check(Check::at_most("exploding", rep.exploding as u8 as f64, 0.0));
    if run.p.a2 > 0.0 {
        out.check(Check::at_most("max_energy_increase", rep.max_energy_increase, 1e-10));
    }
    Ok(())
}

/// Lightweight summary: scale law, residual slope, matching exponent, remote recursion.
fn report(run: &mut Run) -> Result<(), CliError> {
    let c = run.construction()?;
    let grid = ctx("grid", run.cfg.grid.build())?;
    let w = run.cfg.residual.clone();
    let mut scale = Vec::new();
    for t in geomspace(w.tmin, w.tmax, w.samples) {
        let u = ctx(format!("glue.lab_field(t = {t})"), c.lab_field(&grid, t))?;
        scale.push((t, ctx("diagnostics.detect_scale", detect_scale(&u))?));
    }
    let fit = ctx("diagnostics.fit_power_law", fit_power_law(&scale))?;
    let want = 0.5 + run.p.nu;
    run.report.fits.insert("scale".into(), fit);
    run.report.check(Check::at_most("scale_exponent_rel_error", (fit.exponent - want).abs() / want, 1e-2));

    let rows = residual_series(run, &c)?;
    let l2 = ctx("diagnostics.fit_power_law", fit_power_law(&rows.iter().map(|r| (r[0], r[1])).collect::<Vec<_>>()))?;
    run.report.fits.insert("L2".into(), l2);
    run.report.check(Check::at_least("L2_slope", l2.exponent, run.p.n as f64 - w.margin));

    match_exponent(run)?;

    let coeff = c.remote.coefficient_system_residual().iter().map(|x| x.1).fold(0.0, f64::max);
    run.report.check(Check::at_most("remote_coefficient_residual", coeff, 1e-6));
    Ok(())
}

/// One child run per value, in `run_NNN` subdirectories, fanned out over worker threads.
fn sweep(run: &mut Run, table: &toml::Table) -> Result<(), CliError> {
    let s = run.cfg.sweep.clone();
    let mut children = Vec::new();
    for (i, v) in s.values.iter().enumerate() {
        let mut t = table.clone();
        config::set_key(&mut t, &s.key, v.clone())?;
        let dir = run.dir.join(format!("run_{i:03}"));
        config::set_key(&mut t, "output.dir", toml::Value::String(dir.display().to_string()))?;
        let c = config::from_table(&t)?;
        c.validate(s.workflow)?;
        children.push((c, t));
    }
    let workers = match s.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        w => w,
    }
    .min(children.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Report, CliError>>>> = Mutex::new((0..children.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((c, t)) = children.get(i) else { break };
                let r = self::run(s.workflow, c, t);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().unwrap();
    let mut rows = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let r = r.expect("every sweep slot is filled");
        let code = match &r {
            Ok(rep) => i32::from(!rep.pass),
            Err(e) => e.exit_code(),
        };
        if let Err(e) = &r {
            run.report.values.insert(format!("run_{i:03}_error_code"), code as f64);
            eprintln!("sweep run {i}: {e}");
        }
        run.report.check(Check::at_most(&format!("run_{i:03}_exit_code"), code as f64, 0.0));
        rows.push(vec![i as f64, code as f64]);
    }
    run.csv("sweep.csv", &["run", "exit_code"], &rows)
}


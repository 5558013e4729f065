//! The six subcommands. Each builds a [`Document`], writes it and any CSV
//! data to the output directory, and maps the outcome to an exit code.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use expfbm::density::{
    estimate_w_x, kde_log_domain, sample_x_batch, verify_envelopes, verify_gaussian_tail, verify_mgf, write_samples_csv,
    x_from_summaries, Bandwidth, KdeOptions, XBatch,
};
use expfbm::functional::{analytic_mean_f, estimate_mean_ln_f, verify_moments};
use expfbm::kernel::{ch_closed_form, covariance, Kernel, KernelTable};
use expfbm::malliavin::{
    clark_ocone_batch, clark_ocone_reports, finite_difference_check, run_nested, variance_identity, MalliavinSetup,
    NestedBatch, NestedOptions,
};
use expfbm::paths::{covariance_check_pairs, outer_path, validate_path_law, write_paths_csv};
use expfbm::quad::GradedRule;
use expfbm::report::BoundReport;
use expfbm::Exec;
use serde::Serialize;
use serde_json::{json, Value};

use crate::output::{header, write_file, Document, SummaryRow};
use crate::store::Store;
use crate::{exit, Cli, CliError, Command, ExperimentConfig};

/// Bound suites and the report ids each one produces.
pub const SUITES: [(&str, &[&str]); 7] = [
    ("samples", &["moment-mean-f", "moment-var-f", "jkvm1b", "mgf"]),
    ("law", &["path-covariance", "path-ks"]),
    ("envelope", &["kl1", "kl2", "remark-gaussian", "kl2-logderiv"]),
    (
        "nested",
        &[
            "kld2",
            "kld3",
            "kld2-conditional",
            "uuu2",
            "phi-upper",
            "ol0",
            "variance-identity",
            "w-lower",
            "w-sign",
            "w-reconstruction",
        ],
    ),
    ("dphi", &["dphi", "dphi-integral"]),
    ("fd", &["fd-chain-rule", "fd-chain-rule-d2"]),
    ("clark-ocone", &["clark-ocone-mean", "clark-ocone-decrease"]),
];

pub fn known_bound_ids() -> Vec<&'static str> {
    SUITES.iter().flat_map(|(_, ids)| ids.iter().copied()).collect()
}

struct Ctx<'a> {
    cli: &'a Cli,
    cfg: ExperimentConfig,
    hash: String,
    out: PathBuf,
    store: Store,
    exec: Exec,
    only: Option<Vec<String>>,
    start: Instant,
}

impl Ctx<'_> {
    fn selected(&self, id: &str) -> bool {
        self.only.as_ref().is_none_or(|o| o.iter().any(|x| x == id))
    }

    fn suite_selected(&self, suite: &str) -> bool {
        let ids = SUITES.iter().find(|(s, _)| *s == suite).map(|(_, ids)| *ids).unwrap_or(&[]);
        ids.iter().any(|id| self.selected(id))
    }

    fn filter(&self, reports: Vec<BoundReport>) -> Vec<BoundReport> {
        reports.into_iter().filter(|r| self.selected(&r.bound_id)).collect()
    }

    fn remaining(&self) -> Option<Duration> {
        self.cfg.budget_seconds.map(|b| Duration::from_secs_f64(b).saturating_sub(self.start.elapsed()))
    }

    fn over_budget(&self) -> bool {
        self.remaining().is_some_and(|r| r.is_zero())
    }

    fn model(&self) -> Result<expfbm::functional::ModelParams, CliError> {
        self.cfg.model()
    }

    fn table(&self, n: usize) -> Result<KernelTable, CliError> {
        self.store.table(&self.cfg, self.cfg.hurst, self.cfg.horizon_t, n, self.exec)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn finish(&self, doc: Document, files: &[PathBuf]) -> Result<i32, CliError> {
        let (path, text) = doc.write(&self.out)?;
        if self.cli.json {
            print!("{text}");
        } else {
            for r in &doc.reports {
                println!("{}", r.summary_line());
            }
            for f in &doc.extra_failures {
                println!("FAIL {f}");
            }
            println!("config_hash {}", doc.hash);
            for f in files.iter().chain(std::iter::once(&path)) {
                println!("wrote {}", f.display());
            }
        }
        Ok(if !doc.complete {
            exit::RESOURCE
        } else if doc.passed() {
            exit::PASS
        } else {
            exit::VIOLATION
        })
    }
}

pub fn dispatch(cli: &Cli, cfg: ExperimentConfig) -> Result<i32, CliError> {
    let only = match &cli.only {
        None => None,
        Some(s) => {
            let ids: Vec<String> = s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect();
            let known = known_bound_ids();
            if let Some(bad) = ids.iter().find(|id| !known.contains(&id.as_str())) {
                return Err(CliError::Config(format!("unknown bound id {bad:?}; known ids: {}", known.join(", "))));
            }
            Some(ids)
        }
    };
    let out = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out).map_err(CliError::io(&out))?;
    eprintln!(
        "expfbm {}: output_dir={} workers={}",
        cli.command.name(),
        out.display(),
        cfg.workers.map_or_else(|| Exec::default().workers().to_string(), |w| w.to_string())
    );
    let ctx = Ctx {
        cli,
        hash: cfg.hash(),
        store: Store::new(&out),
        out,
        exec: Exec::default(),
        only,
        start: Instant::now(),
        cfg,
    };
    match cli.command {
        Command::KernelVerify => kernel_verify(&ctx),
        Command::Simulate => simulate(&ctx),
        Command::Density => density(&ctx),
        Command::Malliavin => malliavin(&ctx),
        Command::Bounds => bounds(&ctx),
        Command::Report => report(&ctx),
    }
}

#[derive(Debug, Clone, Serialize)]
struct KernelCheck {
    id: String,
    hurst: f64,
    t: f64,
    value: f64,
    target: f64,
    error: f64,
    tolerance: f64,
    passed: bool,
}

impl KernelCheck {
    fn relative(id: &str, hurst: f64, t: f64, value: f64, target: f64, tolerance: f64) -> Self {
        let error = ((value - target) / target).abs();
        Self { id: id.into(), hurst, t, value, target, error, tolerance, passed: error < tolerance }
    }

    fn label(&self) -> String {
        format!("{} H={} t={}", self.id, self.hurst, self.t)
    }
}

fn kernel_checks(ctx: &Ctx) -> Result<Vec<KernelCheck>, CliError> {
    let cfg = &ctx.cfg;
    let rule = GradedRule::new(16, 40);
    let horizon = cfg.kernel_times.iter().copied().fold(0.0, f64::max);
    let mut checks = Vec::new();
    for &h in &cfg.kernel_hursts {
        let c_h = Kernel::calibrated(h)?.c_h() * cfg.kernel_ch_scale;
        let k = Kernel::new(h, c_h)?;
        checks.push(KernelCheck::relative("ch-closed-form", h, 1.0, c_h, ch_closed_form(h), cfg.tolerance_ch_rel));
        for &t in &cfg.kernel_times {
            let target = t.powf(2.0 * h);
            let e = k.energy(t, &rule);
            checks.push(KernelCheck::relative("energy-continuous", h, t, e, target, cfg.tolerance_energy_continuous_rel));
        }
        let table = ctx.store.table(cfg, h, horizon, cfg.grid_n, ctx.exec)?;
        for &t in &cfg.kernel_times {
            let i = table.node_index(t).ok_or_else(|| {
                CliError::Config(format!("kernel time {t} is not a node of the n={} grid on [0,{horizon}]", cfg.grid_n))
            })?;
            let target = t.powf(2.0 * h);
            let e = table.discrete_energy(i);
            checks.push(KernelCheck::relative("energy-discrete", h, t, e, target, cfg.tolerance_energy_discrete_rel));
        }
        for (t, s) in [(0.5, 0.25), (1.0, 0.5), (0.8, 0.3)] {
            let (t, s) = (t * horizon, s * horizon);
            let v = k.cross_energy(t, s, &rule);
            let target = covariance(h, t, s);
            let error = (v - target).abs();
            checks.push(KernelCheck {
                id: "cross-energy".into(),
                hurst: h,
                t,
                value: v,
                target,
                error,
                tolerance: cfg.tolerance_covariance_abs * horizon.powf(2.0 * h),
                passed: error < cfg.tolerance_covariance_abs * horizon.powf(2.0 * h),
            });
        }
    }
    for &[h, t] in &cfg.double_integral_cases {
        let c_h = Kernel::calibrated(h)?.c_h() * cfg.kernel_ch_scale;
        let k = Kernel::new(h, c_h)?;
        let v = k.squared_time_integral(t, &rule);
        let target = t.powf(2.0 * h + 2.0) / (2.0 * h + 2.0);
        checks.push(KernelCheck::relative("double-integral", h, t, v, target, cfg.tolerance_double_integral_rel));
    }
    Ok(checks)
}

fn kernel_verify(ctx: &Ctx) -> Result<i32, CliError> {
    let checks = kernel_checks(ctx)?;
    let failures: Vec<String> = checks.iter().filter(|c| !c.passed).map(KernelCheck::label).collect();
    if !ctx.cli.json {
        for c in &checks {
            println!(
                "{:<18} H={:<5} t={:<5} error={:.3e} tol={:.1e} {}",
                c.id,
                c.hurst,
                c.t,
                c.error,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" }
            );
        }
    }
    let doc = Document {
        command: Command::KernelVerify.name(),
        cfg: &ctx.cfg,
        hash: &ctx.hash,
        grid_n: ctx.cfg.grid_n,
        reports: Vec::new(),
        extra_failures: failures,
        complete: true,
        results: json!({ "checks": checks }),
    };
    ctx.finish(doc, &[])
}

fn run_simulation(ctx: &Ctx, table: &KernelTable) -> Result<XBatch, CliError> {
    let params = ctx.model()?;
    let centering = estimate_mean_ln_f(table, &params, ctx.cfg.centering_paths, ctx.cfg.seed, ctx.exec)?;
    let batch = sample_x_batch(table, &params, centering, ctx.cfg.sample_paths, ctx.cfg.seed, ctx.exec)?;
    ctx.store.save_samples(&ctx.cfg, &batch)?;
    Ok(batch)
}

/// Cached samples, simulating on a miss unless `--no-simulate`.
fn samples(ctx: &Ctx) -> Result<XBatch, CliError> {
    if let Some(b) = ctx.store.load_samples(&ctx.cfg)? {
        return Ok(b);
    }
    if ctx.cli.no_simulate {
        return Err(CliError::Dependency(format!(
            "no cached samples for simulation subhash {} under {}; run `expfbm simulate` with this config first or drop --no-simulate",
            ctx.cfg.simulation_hash(),
            ctx.out.join("cache").display()
        )));
    }
    let table = ctx.table(ctx.cfg.grid_n)?;
    run_simulation(ctx, &table)
}

fn moment_reports(ctx: &Ctx, batch: &XBatch) -> Result<Vec<BoundReport>, CliError> {
    if batch.samples.len() < 2 {
        return Ok(Vec::new());
    }
    let fs: Vec<f64> = batch.samples.iter().map(|s| s.f).collect();
    Ok(verify_moments(&fs, &ctx.model()?)?)
}

fn simulate(ctx: &Ctx) -> Result<i32, CliError> {
    let cfg = &ctx.cfg;
    let table = ctx.table(cfg.grid_n)?;
    let batch = run_simulation(ctx, &table)?;
    let sim_hash = cfg.simulation_hash();
    let hdr = header(
        cfg,
        &ctx.hash,
        table.n,
        table.c_h,
        &[("simulation_hash", sim_hash.clone()), ("n_paths", batch.samples.len().to_string())],
    );
    let samples_csv = ctx.path("samples.csv");
    write_file(&samples_csv, |w| write_samples_csv(w, &hdr, &batch))?;
    let dump: Vec<_> =
        (0..cfg.path_dump_count.min(cfg.sample_paths)).map(|p| outer_path(&table, cfg.seed, p as u64)).collect();
    let paths_csv = ctx.path("paths.csv");
    write_file(&paths_csv, |w| write_paths_csv(w, &hdr, &dump))?;
    let reports = ctx.filter(moment_reports(ctx, &batch)?);
    let doc = Document {
        command: Command::Simulate.name(),
        cfg,
        hash: &ctx.hash,
        grid_n: table.n,
        reports,
        extra_failures: Vec::new(),
        complete: true,
        results: json!({
            "simulation_hash": sim_hash,
            "c_h": table.c_h,
            "max_energy_deviation": table.max_energy_deviation(),
            "centering": batch.centering,
            "summary": batch.summary,
            "analytic_mean_f": analytic_mean_f(&ctx.model()?),
        }),
    };
    ctx.finish(doc, &[samples_csv, paths_csv])
}

struct DensityOutcome {
    reports: Vec<BoundReport>,
    results: Value,
    files: Vec<PathBuf>,
}

fn density_suite(ctx: &Ctx, batch: &XBatch) -> Result<DensityOutcome, CliError> {
    let cfg = &ctx.cfg;
    let params = ctx.model()?;
    let opts = KdeOptions {
        bandwidth: cfg.kde_bandwidth_x.map_or(Bandwidth::Silverman, Bandwidth::Fixed),
        grid_points: cfg.kde_grid_points,
        bootstrap: cfg.kde_bootstrap,
        seed: cfg.seed,
        exec: ctx.exec,
    };
    let est = kde_log_domain(&batch.xs(), batch.centering.mean_ln_f, &opts)?;
    let est_f = est.to_f_domain()?;
    let env = verify_envelopes(&est, &params)?;
    let c_h = Kernel::calibrated(cfg.hurst)?.c_h() * cfg.kernel_ch_scale;
    let hdr = header(cfg, &ctx.hash, batch.grid_n, c_h, &[("bandwidth_x", format!("{:e}", est.bandwidth))]);
    let mut files = Vec::new();
    for (name, e) in [("density_x.csv", &est), ("density_f.csv", &est_f)] {
        let p = ctx.path(name);
        write_file(&p, |w| {
            hdr.write_comment(w)?;
            e.write_csv(w)
        })?;
        files.push(p);
    }
    for prof in &env.profiles {
        let p = ctx.path(&format!("envelope_{}.csv", prof.bound_id));
        write_file(&p, |w| {
            hdr.write_comment(w)?;
            prof.write_csv(w)
        })?;
        files.push(p);
    }
    let constants: Vec<Value> =
        env.profiles.iter().map(|p| json!({ "bound_id": p.bound_id, "implied_constant": p.implied_constant })).collect();
    Ok(DensityOutcome {
        reports: env.reports,
        results: json!({
            "bandwidth_x": est.bandwidth,
            "grid_points": est.grid.len(),
            "n_samples": est.n_samples,
            "n_bootstrap": est.n_bootstrap,
            "integral_x": est.integral(),
            "implied_constants": constants,
        }),
        files,
    })
}

fn density(ctx: &Ctx) -> Result<i32, CliError> {
    let batch = samples(ctx)?;
    let d = density_suite(ctx, &batch)?;
    let doc = Document {
        command: Command::Density.name(),
        cfg: &ctx.cfg,
        hash: &ctx.hash,
        grid_n: batch.grid_n,
        reports: ctx.filter(d.reports),
        extra_failures: Vec::new(),
        complete: true,
        results: d.results,
    };
    ctx.finish(doc, &d.files)
}

/// Nested batch from the cache, or computed within the remaining budget.
fn nested(ctx: &Ctx, setup: &MalliavinSetup, n_outer: usize, with_dphi: bool) -> Result<NestedBatch, CliError> {
    let key = ctx.cfg.nested_hash(if with_dphi { n_outer } else { 0 });
    if let Some(b) = ctx.store.load_nested(&key) {
        return Ok(b);
    }
    if ctx.cli.no_simulate {
        return Err(CliError::Dependency(format!(
            "no cached nested batch {key} under {}; run `expfbm malliavin` with this config first or drop --no-simulate",
            ctx.out.join("cache").display()
        )));
    }
    let opts = NestedOptions {
        inner_paths: ctx.cfg.inner_paths,
        with_dphi,
        keep_profiles: 0,
        budget: ctx.remaining(),
        exec: ctx.exec,
    };
    let batch = run_nested(setup, ctx.cfg.seed, n_outer, &opts)?;
    if batch.complete() {
        ctx.store.save_nested(&key, &batch)?;
    }
    Ok(batch)
}

struct MalliavinOutcome {
    reports: Vec<BoundReport>,
    results: serde_json::Map<String, Value>,
    files: Vec<PathBuf>,
    complete: bool,
}

fn malliavin_suites(ctx: &Ctx, write_files: bool) -> Result<MalliavinOutcome, CliError> {
    let cfg = &ctx.cfg;
    let params = ctx.model()?;
    let mut out = MalliavinOutcome { reports: Vec::new(), results: Default::default(), files: Vec::new(), complete: true };
    let run_nested_suite = ctx.suite_selected("nested");
    let run_dphi = ctx.suite_selected("dphi") && cfg.dphi_paths > 0;
    let run_fd = ctx.suite_selected("fd") && cfg.fd_check_paths > 0;
    if run_nested_suite || run_dphi || run_fd {
        let table = ctx.table(cfg.nested_grid_n)?;
        let setup = MalliavinSetup::new(&table, params, cfg.subgrid_stride)?;
        if run_nested_suite {
            let batch = nested(ctx, &setup, cfg.nested_paths, false)?;
            out.complete &= batch.complete();
            let suite = SUITES[3].1;
            out.reports.extend(batch.reports.iter().filter(|r| suite.contains(&r.bound_id.as_str())).cloned());
            if batch.summaries.len() >= 2 {
                let vi = variance_identity(&batch.summaries);
                out.reports.push(vi.report());
                out.results.insert("variance_identity".into(), json!(vi));
            }
            let centering = estimate_mean_ln_f(&table, &params, cfg.centering_paths, cfg.seed, ctx.exec)?;
            let xs = x_from_summaries(&batch.summaries, &centering);
            let phis: Vec<f64> = batch.summaries.iter().map(|s| s.phi_x).collect();
            if xs.len() >= expfbm::density::MIN_KDE_SAMPLES {
                let w = estimate_w_x(&xs, &phis, &params, cfg.w_bins_per_side)?;
                out.reports.extend(w.reports.iter().cloned());
                out.results.insert("w_bins".into(), json!(w.bins));
                out.results.insert("w_gaps".into(), json!(w.gaps));
            } else {
                out.results.insert(
                    "w_skipped".into(),
                    json!(format!("{} paths is below the {} needed for w_X", xs.len(), expfbm::density::MIN_KDE_SAMPLES)),
                );
            }
            let min_ratio = batch
                .summaries
                .iter()
                .filter(|s| s.phi_lower_bound > 0.0)
                .map(|s| s.phi_x / s.phi_lower_bound)
                .fold(f64::INFINITY, f64::min);
            out.results.insert(
                "nested".into(),
                json!({
                    "grid_n": batch.grid_n,
                    "inner_paths": batch.inner_paths,
                    "subgrid_stride": batch.stride,
                    "planned_paths": batch.planned_paths,
                    "completed_paths": batch.summaries.len(),
                    "coverage": batch.coverage,
                    "subgrid_weight_sum": batch.subgrid_weight_sum,
                    "min_phi_over_lower_bound": if min_ratio.is_finite() { json!(min_ratio) } else { Value::Null },
                }),
            );
            if write_files {
                out.files.extend(write_nested_files(ctx, &table, &batch)?);
            }
        }
        if run_dphi && !ctx.over_budget() {
            let batch = nested(ctx, &setup, cfg.dphi_paths, true)?;
            out.complete &= batch.complete();
            let suite = SUITES[4].1;
            out.reports.extend(batch.reports.iter().filter(|r| suite.contains(&r.bound_id.as_str())).cloned());
        } else if run_dphi {
            out.complete = false;
        }
        if run_fd {
            out.reports.extend(finite_difference_check(&setup, cfg.seed, cfg.fd_check_paths)?);
        }
    }
    if ctx.suite_selected("clark-ocone") && cfg.clark_ocone_paths >= 2 {
        if ctx.over_budget() {
            out.complete = false;
        } else {
            let mut batches = Vec::new();
            for &n in &cfg.clark_ocone_grids {
                let table = ctx.table(n)?;
                batches.push(clark_ocone_batch(&table, &params, cfg.seed, cfg.clark_ocone_paths, ctx.exec)?);
            }
            out.reports.extend(clark_ocone_reports(&batches));
            out.results.insert("clark_ocone".into(), json!(batches));
        }
    }
    out.reports = ctx.filter(out.reports);
    Ok(out)
}

fn write_nested_files(ctx: &Ctx, table: &KernelTable, batch: &NestedBatch) -> Result<Vec<PathBuf>, CliError> {
    let cfg = &ctx.cfg;
    let hdr = header(
        cfg,
        &ctx.hash,
        table.n,
        table.c_h,
        &[("inner_paths", batch.inner_paths.to_string()), ("nested_hash", cfg.nested_hash(0))],
    );
    let kernel = table.kernel();
    let profile = ctx.path("malliavin_profile.csv");
    write_file(&profile, |w| {
        hdr.write_comment(w)?;
        writeln!(w, "# theta = 0 omitted: K(T, 0) is infinite")?;
        writeln!(w, "theta,kernel_T_theta,mean_dx_normalized,mean_dx,bound,margin")?;
        for (k, &u) in batch.mean_dx_normalized.iter().enumerate().skip(1) {
            let theta = table.grid[k];
            let kt = if k == table.n { 0.0 } else { kernel.eval(table.horizon, theta).unwrap_or(f64::NAN) };
            let bound = cfg.sigma * kt;
            let dx = bound * u;
            writeln!(w, "{theta},{kt:e},{u:e},{dx:e},{bound:e},{:e}", dx - bound)?;
        }
        Ok(())
    })?;
    let summaries = ctx.path("malliavin_paths.csv");
    write_file(&summaries, |w| {
        hdr.write_comment(w)?;
        writeln!(w, "path_id,F,lnF,phi_x,phi_se,phi_lower_bound,u0,cond_u0,cond_u0_se")?;
        for s in &batch.summaries {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                s.path_id, s.f, s.ln_f, s.phi_x, s.phi_se, s.phi_lower_bound, s.u0, s.cond_u0, s.cond_u0_se
            )?;
        }
        Ok(())
    })?;
    Ok(vec![profile, summaries])
}

fn malliavin(ctx: &Ctx) -> Result<i32, CliError> {
    let m = malliavin_suites(ctx, true)?;
    let doc = Document {
        command: Command::Malliavin.name(),
        cfg: &ctx.cfg,
        hash: &ctx.hash,
        grid_n: ctx.cfg.nested_grid_n,
        reports: m.reports,
        extra_failures: Vec::new(),
        complete: m.complete,
        results: Value::Object(m.results),
    };
    ctx.finish(doc, &m.files)
}

fn bounds(ctx: &Ctx) -> Result<i32, CliError> {
    let cfg = &ctx.cfg;
    let params = ctx.model()?;
    let mut reports = Vec::new();
    let mut results = serde_json::Map::new();
    let mut complete = true;
    let mut files = Vec::new();
    if ctx.suite_selected("samples") || ctx.suite_selected("envelope") {
        let batch = samples(ctx)?;
        results.insert("simulation_hash".into(), json!(cfg.simulation_hash()));
        results.insert("sample_summary".into(), json!(batch.summary));
        if ctx.suite_selected("samples") {
            reports.extend(moment_reports(ctx, &batch)?);
            let xs = batch.xs();
            if !xs.is_empty() {
                reports.push(verify_gaussian_tail(&xs, &params, &cfg.tail_points_x)?);
                reports.push(verify_mgf(&xs, &params, &cfg.mgf_lambdas));
            }
        }
        if ctx.suite_selected("envelope") {
            if ctx.over_budget() {
                complete = false;
            } else {
                let d = density_suite(ctx, &batch)?;
                reports.extend(d.reports);
                results.insert("density".into(), d.results);
                files.extend(d.files);
            }
        }
    }
    if ctx.suite_selected("law") {
        if ctx.over_budget() {
            complete = false;
        } else {
            let table = ctx.table(cfg.grid_n)?;
            reports.extend(validate_path_law(&table, cfg.seed, cfg.law_paths, &covariance_check_pairs(table.n), ctx.exec)?);
        }
    }
    let m = malliavin_suites(ctx, false)?;
    complete &= m.complete;
    reports.extend(m.reports);
    results.extend(m.results);
    let reports = ctx.filter(reports);
    let doc = Document {
        command: Command::Bounds.name(),
        cfg,
        hash: &ctx.hash,
        grid_n: cfg.grid_n,
        reports,
        extra_failures: Vec::new(),
        complete,
        results: Value::Object(results),
    };
    ctx.finish(doc, &files)
}

const DOCUMENTS: [Command; 5] = [Command::KernelVerify, Command::Simulate, Command::Density, Command::Malliavin, Command::Bounds];

fn report(ctx: &Ctx) -> Result<i32, CliError> {
    let mut rows = Vec::new();
    let mut sources = Vec::new();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for cmd in DOCUMENTS {
        let path = ctx.path(&format!("{}.json", cmd.name()));
        let Ok(text) = fs::read_to_string(&path) else { continue };
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Dependency(format!("{} is not a result document: {e}", path.display())))?;
        let hash = doc["config_hash"].as_str().unwrap_or_default().to_string();
        let current = hash == ctx.hash;
        let passed = doc["passed"].as_bool().unwrap_or(false);
        let complete = doc["complete"].as_bool().unwrap_or(false);
        sources.push(json!({ "command": cmd.name(), "config_hash": hash, "current": current, "passed": passed, "complete": complete }));
        if !current {
            continue;
        }
        if let Some(fs) = doc["failures"].as_array() {
            if cmd == Command::KernelVerify {
                failures.extend(fs.iter().filter_map(|f| f.as_str()).map(|f| format!("kernel-verify: {f}")));
            }
        }
        let parsed: Vec<BoundReport> = serde_json::from_value(doc["reports"].clone()).unwrap_or_default();
        for r in parsed {
            if ctx.selected(&r.bound_id) && !reports.iter().any(|x: &(String, BoundReport)| x.1.bound_id == r.bound_id) {
                rows.push((cmd.name().to_string(), SummaryRow::of(&r)));
                reports.push((cmd.name().to_string(), r));
            }
        }
    }
    if sources.is_empty() {
        return Err(CliError::Dependency(format!(
            "no result documents in {}; run the other subcommands first",
            ctx.out.display()
        )));
    }
    let md = ctx.path("report.md");
    write_file(&md, |w| {
        writeln!(w, "# expfbm report")?;
        writeln!(w)?;
        writeln!(w, "config_hash: `{}`  ", ctx.hash)?;
        writeln!(w, "code_version: `{}`", crate::CODE_VERSION)?;
        writeln!(w)?;
        writeln!(w, "| bound_id | statement | source | result | checked | violations | inconclusive |")?;
        writeln!(w, "|---|---|---|---|---|---|---|")?;
        for (src, r) in &rows {
            writeln!(
                w,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.bound_id,
                r.statement.replace('|', "\\|"),
                src,
                if r.passed { "PASS" } else { "FAIL" },
                r.points_checked,
                r.violations,
                r.inconclusive
            )?;
        }
        for f in &failures {
            writeln!(w, "\nFAIL {f}")?;
        }
        Ok(())
    })?;
    let doc = Document {
        command: Command::Report.name(),
        cfg: &ctx.cfg,
        hash: &ctx.hash,
        grid_n: ctx.cfg.grid_n,
        reports: reports.into_iter().map(|(_, r)| r).collect(),
        extra_failures: failures,
        complete: true,
        results: json!({ "sources": sources }),
    };
    ctx.finish(doc, &[md])
}

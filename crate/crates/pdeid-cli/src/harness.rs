//! Experiment driver: turn a parsed config into generated data, training
//! pairs, identification runs, and deterministic CSV/plot-data artifacts.

use crate::config::ExperimentConfig;
use crate::datagen::{
    self, histogram_density_in, quantile_range, simulate_alpha_stable, simulate_brownian,
    solve_burgers, solve_kdv, solve_ks, solve_nls, subsample_indices, taylor_green_field,
    BurgersConfig, KdvConfig, KsConfig, NlsConfig, NoiseSpec, SolutionField,
};
use crate::io::{self, format_float_list};
use crate::HarnessError;
use pdeid_core::assembly::SnapshotPair;
use pdeid_core::inference::{train, TrainConfig};
use pdeid_core::operator::{ModelFamily, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fs;
use std::path::{Path, PathBuf};

/// One finished identification run, flattened for CSV emission.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub family: ModelFamily,
    pub noise_pct: f64,
    pub dt: f64,
    pub lambda: Vec<f64>,
    pub nlml: f64,
    pub sigma2: f64,
    pub noise_seed: u64,
    pub subsample_seed: u64,
    pub train_seed: u64,
    pub converged: bool,
}

/// Quartile summary of one parameter across runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// One aggregated table row: a noise level or time gap, per-parameter
/// quartiles (None when every run at this setting failed), and the number
/// of runs that contributed.
#[derive(Debug, Clone)]
pub struct TableRow {
    pub label: f64,
    pub cells: Vec<Option<ParamStats>>,
    pub n_runs: usize,
}

/// Aggregated sweep output plus the metadata needed to reproduce it.
#[derive(Debug, Clone)]
pub struct ResultTable {
    pub family: ModelFamily,
    pub true_lambda: Vec<f64>,
    pub config_hash: String,
    pub row_label: &'static str,
    pub rows: Vec<TableRow>,
}

/// Identification result with its rendered equation and artifact paths.
#[derive(Debug, Clone)]
pub struct IdentifyOutcome {
    pub record: RunRecord,
    pub equation: String,
    pub files: Vec<PathBuf>,
}

/// Linear-interpolation quartiles on the sorted sample.
pub fn quartiles(values: &[f64]) -> Result<ParamStats, HarnessError> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(HarnessError::InvalidInput("quartiles need finite samples".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    Ok(ParamStats {
        q1: datagen::interp_quantile(&v, 0.25),
        median: datagen::interp_quantile(&v, 0.5),
        q3: datagen::interp_quantile(&v, 0.75),
    })
}

/// Independent seed stream per role; same mixing constant as the trainer's
/// restart seeds so nothing collides with plain seed+1 conventions.
pub(crate) fn derive_seed(base: u64, stream: u64) -> u64 {
    base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn field_labels(family: ModelFamily) -> Vec<String> {
    match family {
        ModelFamily::Nls | ModelFamily::Ns2d => vec!["u".into(), "v".into()],
        ModelFamily::FractionalRl | ModelFamily::FractionalLaplacian => vec!["p".into()],
        _ => vec!["h".into()],
    }
}

/// Human-readable identified-equation line for a trained parameter vector.
pub fn equation_line(family: ModelFamily, lambda: &[f64]) -> Result<String, HarnessError> {
    if lambda.len() != family.lambda_len() {
        return Err(HarnessError::InvalidInput("lambda length mismatch".into()));
    }
    let l = lambda;
    Ok(match family {
        ModelFamily::Burgers => {
            format!("h_t + {:.4} h h_x - {:.4} h_xx = 0", l[0], l[1])
        }
        ModelFamily::Kdv => format!("h_t + {:.4} h h_x + {:.4} h_xxx = 0", l[0], l[1]),
        ModelFamily::Ks => {
            format!("h_t + {:.4} h h_x + {:.4} h_xx + {:.4} h_xxxx = 0", l[0], l[1], l[2])
        }
        ModelFamily::Nls => format!("i h_t + {:.4} h_xx + {:.4} |h|^2 h = 0", l[0], l[1]),
        ModelFamily::Ns2d => {
            format!("u_t + {:.4} (u u_x + v u_y) = -p_x + {:.4} (u_xx + u_yy)", l[0], l[1])
        }
        ModelFamily::FractionalRl => format!("p_t = {:.4} D^({:.4}) p", l[0], l[1]),
        ModelFamily::FractionalLaplacian => {
            format!("p_t = -(-Laplacian)^(alpha/2) p, alpha = {:.4}", l[0])
        }
    })
}

/// Package particle positions as histogram snapshots on a shared bin grid.
///
/// Snapshot `s` is the density after step `start_step + s`, so its time
/// stamp is `(start_step + s) * step_dt`. The bin range comes from the last
/// snapshot (the widest), clipped at `clip_q` for heavy-tailed samples, and
/// is reused for every snapshot so the grid stays fixed.
fn fractional_field(
    family: ModelFamily,
    positions: &[Vec<f64>],
    start_step: usize,
    n_snapshots: usize,
    step_dt: f64,
    n_bins: usize,
    clip_q: f64,
    true_lambda: Vec<f64>,
) -> Result<SolutionField, HarnessError> {
    if start_step == 0 || n_snapshots == 0 {
        return Err(HarnessError::InvalidConfig("fractional runs need start_step >= 1".into()));
    }
    if positions.len() < start_step + n_snapshots - 1 {
        return Err(HarnessError::InvalidInput("not enough particle steps".into()));
    }
    let last = &positions[start_step + n_snapshots - 2];
    let (lo, hi) = if clip_q < 1.0 { quantile_range(last, clip_q) } else { quantile_range(last, 1.0) };
    let mut grid = Vec::new();
    let mut times = Vec::with_capacity(n_snapshots);
    let mut values = Vec::with_capacity(n_snapshots);
    for s in 0..n_snapshots {
        let samples = &positions[start_step + s - 1];
        let (centers, density) = histogram_density_in(samples, n_bins, lo, hi)?;
        if s == 0 {
            grid = centers;
        }
        times.push((start_step + s) as f64 * step_dt);
        values.push(vec![density]);
    }
    SolutionField::from_histograms(family, times, grid, values, true_lambda)
}

/// Generate the configured family's solution field, honoring `[solver]`
/// overrides and falling back to the benchmark defaults.
pub fn generate_field(cfg: &ExperimentConfig) -> Result<SolutionField, HarnessError> {
    let s = &cfg.raw;
    match cfg.family {
        ModelFamily::Burgers => {
            let d = BurgersConfig::default();
            solve_burgers(&BurgersConfig {
                n: s.usize_or("solver", "n", d.n)?,
                x0: s.f64_or("solver", "x0", d.x0)?,
                len: s.f64_or("solver", "len", d.len)?,
                nu: s.f64_or("solver", "nu", d.nu)?,
                dt_emit: s.f64_or("solver", "dt", d.dt_emit)?,
                n_snapshots: s.usize_or("solver", "n_snapshots", d.n_snapshots)?,
                substeps: s.usize_or("solver", "substeps", d.substeps)?,
            })
        }
        ModelFamily::Kdv => {
            let d = KdvConfig::default();
            solve_kdv(&KdvConfig {
                n: s.usize_or("solver", "n", d.n)?,
                x0: s.f64_or("solver", "x0", d.x0)?,
                len: s.f64_or("solver", "len", d.len)?,
                dt_emit: s.f64_or("solver", "dt", d.dt_emit)?,
                n_snapshots: s.usize_or("solver", "n_snapshots", d.n_snapshots)?,
                substeps: s.usize_or("solver", "substeps", d.substeps)?,
                ic: d.ic,
            })
        }
        ModelFamily::Ks => {
            let d = KsConfig::default();
            solve_ks(&KsConfig {
                n: s.usize_or("solver", "n", d.n)?,
                len: s.f64_or("solver", "len", d.len)?,
                dt_emit: s.f64_or("solver", "dt", d.dt_emit)?,
                n_snapshots: s.usize_or("solver", "n_snapshots", d.n_snapshots)?,
                substeps: s.usize_or("solver", "substeps", d.substeps)?,
                contour_points: s.usize_or("solver", "contour_points", d.contour_points)?,
                ic: d.ic,
            })
        }
        ModelFamily::Nls => {
            let d = NlsConfig::default();
            solve_nls(&NlsConfig {
                n: s.usize_or("solver", "n", d.n)?,
                x0: s.f64_or("solver", "x0", d.x0)?,
                len: s.f64_or("solver", "len", d.len)?,
                dt_emit: s.f64_or("solver", "dt", d.dt_emit)?,
                n_snapshots: s.usize_or("solver", "n_snapshots", d.n_snapshots)?,
                substeps: s.usize_or("solver", "substeps", d.substeps)?,
                cubic: s.f64_or("solver", "cubic", d.cubic)?,
            })
        }
        ModelFamily::Ns2d => taylor_green_field(
            s.f64_or("solver", "nu", 0.01)?,
            s.f64_or("solver", "t_start", 1.0)?,
            s.f64_or("solver", "dt", 0.02)?,
            s.usize_or("solver", "n_snapshots", 26)?,
            s.usize_or("solver", "side", 51)?,
        ),
        ModelFamily::FractionalRl | ModelFamily::FractionalLaplacian => {
            let particles = s.usize_or("solver", "particles", 100_000)?;
            let step_dt = s.f64_or("solver", "dt", 0.01)?;
            let start_step = s.usize_or("solver", "start_step", 25)?;
            let n_snapshots = s.usize_or("solver", "n_snapshots", 2)?;
            let n_bins = s.usize_or("solver", "bins", 100)?;
            let sim_seed = s.u64_or("solver", "seed", 7)?;
            let n_steps = start_step + n_snapshots.max(1) - 1;
            if cfg.family == ModelFamily::FractionalRl {
                let clip = s.f64_or("solver", "clip_quantile", 1.0)?;
                let pos = simulate_brownian(particles, step_dt, n_steps, sim_seed);
                fractional_field(
                    cfg.family,
                    &pos,
                    start_step,
                    n_snapshots,
                    step_dt,
                    n_bins,
                    clip,
                    vec![0.5, 2.0],
                )
            } else {
                let alpha = s.f64_or("solver", "alpha", 1.5)?;
                let clip = s.f64_or("solver", "clip_quantile", 0.995)?;
                let pos = simulate_alpha_stable(alpha, particles, step_dt, n_steps, sim_seed)?;
                fractional_field(
                    cfg.family,
                    &pos,
                    start_step,
                    n_snapshots,
                    step_dt,
                    n_bins,
                    clip,
                    vec![alpha],
                )
            }
        }
    }
}

/// Pick the earlier snapshot of the training pair: an explicit index wins,
/// then seeded random selection if the config asked for it, otherwise the
/// middle of the run.
pub fn select_prev_index(
    cfg: &ExperimentConfig,
    field: &SolutionField,
) -> Result<usize, HarnessError> {
    let m = cfg.dt_multiplier;
    if field.n_snapshots() <= m {
        return Err(HarnessError::InvalidConfig(format!(
            "dt_multiplier {m} needs more than {} snapshots",
            field.n_snapshots()
        )));
    }
    let max_prev = field.n_snapshots() - 1 - m;
    match cfg.snapshot_index {
        Some(i) if i <= max_prev => Ok(i),
        Some(i) => Err(HarnessError::InvalidConfig(format!(
            "snapshot_index {i} leaves no partner {m} steps later"
        ))),
        None if cfg.raw.get("data", "snapshot_seed").is_some() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.snapshot_seed);
            Ok(rng.gen_range(0..=max_prev))
        }
        None => Ok(((field.n_snapshots() - 1) / 2).min(max_prev)),
    }
}

/// Seeds for one identification run, already derived for the specific job.
#[derive(Debug, Clone, Copy)]
pub struct RunSeeds {
    pub noise: u64,
    pub subsample: u64,
    pub train: u64,
}

impl RunSeeds {
    fn from_config(cfg: &ExperimentConfig) -> Self {
        Self { noise: cfg.noise_seed, subsample: cfg.subsample_seed, train: cfg.train_seed }
    }

    fn derived(cfg: &ExperimentConfig, tag: u64) -> Self {
        Self {
            noise: derive_seed(cfg.noise_seed, tag),
            subsample: derive_seed(cfg.subsample_seed, tag),
            train: derive_seed(cfg.train_seed, tag),
        }
    }
}

/// A training pair plus the full-grid noisy snapshots it was cut from,
/// kept for plot-data emission.
pub struct PairBuild {
    pub pair: SnapshotPair,
    pub prev_idx: usize,
    pub curr_idx: usize,
    pub noisy_prev: Vec<Vec<f64>>,
    pub noisy_curr: Vec<Vec<f64>>,
    pub idx_prev: Vec<usize>,
    pub idx_curr: Vec<usize>,
}

/// Noise the two snapshots on the full grid, then subsample each side.
///
/// Each (side, output) gets its own derived noise stream; every output of a
/// side shares one location set, as the covariance model expects.
pub fn build_pair(
    field: &SolutionField,
    family: ModelFamily,
    prev_idx: usize,
    dt_multiplier: usize,
    n_prev: usize,
    n_curr: usize,
    noise_pct: f64,
    seeds: RunSeeds,
) -> Result<PairBuild, HarnessError> {
    let curr_idx = prev_idx + dt_multiplier;
    if curr_idx >= field.n_snapshots() {
        return Err(HarnessError::InvalidInput("pair runs past the last snapshot".into()));
    }
    let q = field.outputs();
    let noised = |side: usize, snap: usize| -> Result<Vec<Vec<f64>>, HarnessError> {
        (0..q)
            .map(|o| {
                let spec =
                    NoiseSpec::new(noise_pct, derive_seed(seeds.noise, (side * q + o) as u64))?;
                Ok(datagen::add_noise(&field.values[snap][o], &spec))
            })
            .collect()
    };
    let noisy_prev = noised(0, prev_idx)?;
    let noisy_curr = noised(1, curr_idx)?;
    let idx_prev = subsample_indices(field.n_points(), n_prev, derive_seed(seeds.subsample, 0))?;
    let idx_curr = subsample_indices(field.n_points(), n_curr, derive_seed(seeds.subsample, 1))?;
    let dim = field.dim;
    let gather_x = |idx: &[usize]| -> Vec<f64> {
        idx.iter().flat_map(|&i| field.grid[i * dim..(i + 1) * dim].iter().copied()).collect()
    };
    let gather_h = |full: &[Vec<f64>], idx: &[usize]| -> Vec<Vec<f64>> {
        full.iter().map(|col| idx.iter().map(|&i| col[i]).collect()).collect()
    };
    let pair = SnapshotPair::new(
        gather_x(&idx_prev),
        gather_h(&noisy_prev, &idx_prev),
        gather_x(&idx_curr),
        gather_h(&noisy_curr, &idx_curr),
        dt_multiplier as f64 * field.dt(),
        dim,
        field_labels(family),
    )?;
    Ok(PairBuild { pair, prev_idx, curr_idx, noisy_prev, noisy_curr, idx_prev, idx_curr })
}

/// Run one identification: validate, cut the pair, train, record.
fn run_identification(
    field: &SolutionField,
    cfg: &ExperimentConfig,
    prev_idx: usize,
    dt_multiplier: usize,
    noise_pct: f64,
    seeds: RunSeeds,
) -> Result<(RunRecord, PairBuild), HarnessError> {
    if !field.validated() {
        return Err(HarnessError::InvalidInput(
            "solution field failed its generation-time validation".into(),
        ));
    }
    let pb = build_pair(
        field,
        cfg.family,
        prev_idx,
        dt_multiplier,
        cfg.n_prev,
        cfg.n_curr,
        noise_pct,
        seeds,
    )?;
    let model = ModelSpec::new(cfg.family, vec![0.0; cfg.family.lambda_len()])?;
    let tc = TrainConfig { restarts: cfg.restarts, max_iters: cfg.max_iters, seed: seeds.train };
    let tr = train(&model, &pb.pair, &tc)?;
    let record = RunRecord {
        family: cfg.family,
        noise_pct,
        dt: pb.pair.dt(),
        lambda: tr.lambda,
        nlml: tr.nlml,
        sigma2: tr.sigma2,
        noise_seed: seeds.noise,
        subsample_seed: seeds.subsample,
        train_seed: seeds.train,
        converged: tr.converged,
    };
    Ok((record, pb))
}

fn fmt(v: f64) -> String {
    format!("{v:.12e}")
}

fn runs_csv_header(family: ModelFamily) -> String {
    let mut cols = vec!["family".to_string(), "noise_pct".into(), "dt".into()];
    for i in 0..family.lambda_len() {
        cols.push(format!("lambda{}", i + 1));
    }
    cols.extend(
        ["nlml", "sigma2", "noise_seed", "subsample_seed", "train_seed", "converged",
            "config_hash", "version"]
            .map(String::from),
    );
    cols.join(",")
}

fn runs_csv_row(rec: &RunRecord, config_hash: &str) -> String {
    let mut cols = vec![rec.family.name().to_string(), fmt(rec.noise_pct), fmt(rec.dt)];
    cols.extend(rec.lambda.iter().map(|&l| fmt(l)));
    cols.push(fmt(rec.nlml));
    cols.push(fmt(rec.sigma2));
    cols.push(rec.noise_seed.to_string());
    cols.push(rec.subsample_seed.to_string());
    cols.push(rec.train_seed.to_string());
    cols.push(rec.converged.to_string());
    cols.push(config_hash.to_string());
    cols.push(io::VERSION.to_string());
    cols.join(",")
}

fn write_runs_csv(
    path: &Path,
    family: ModelFamily,
    records: &[RunRecord],
    config_hash: &str,
) -> Result<(), HarnessError> {
    let mut out = String::new();
    out.push_str(&runs_csv_header(family));
    out.push('\n');
    for r in records {
        out.push_str(&runs_csv_row(r, config_hash));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_table_csv(path: &Path, table: &ResultTable) -> Result<(), HarnessError> {
    let mut out = String::new();
    out.push_str(&format!(
        "# family = {}, true_lambda = {}, config = {}\n",
        table.family.name(),
        format_float_list(&table.true_lambda),
        table.config_hash
    ));
    let mut cols = vec![table.row_label.to_string(), "n_runs".into()];
    for i in 0..table.family.lambda_len() {
        for stat in ["q1", "median", "q3"] {
            cols.push(format!("lambda{}_{stat}", i + 1));
        }
    }
    out.push_str(&cols.join(","));
    out.push('\n');
    for row in &table.rows {
        let mut cells = vec![fmt(row.label), row.n_runs.to_string()];
        for cell in &row.cells {
            match cell {
                Some(s) => cells.extend([fmt(s.q1), fmt(s.median), fmt(s.q3)]),
                None => cells.extend(["".to_string(), "".into(), "".into()]),
            }
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Generate the configured field and write it with a provenance sidecar.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<(PathBuf, PathBuf), HarnessError> {
    let field = generate_field(cfg)?;
    let hash = cfg.hash();
    let basename = format!("{}-{}", cfg.family.name(), hash);
    let provenance = vec![
        ("config_hash".to_string(), hash.clone()),
        ("noise_pct".to_string(), fmt(cfg.noise_pct)),
        ("noise_seed".to_string(), cfg.noise_seed.to_string()),
        ("subsample_seed".to_string(), cfg.subsample_seed.to_string()),
        ("train_seed".to_string(), cfg.train_seed.to_string()),
    ];
    io::write_field(&cfg.output_dir, &basename, &field, cfg.format, &provenance)
}

fn write_figure_data(
    cfg: &ExperimentConfig,
    field: &SolutionField,
    pb: &PairBuild,
    hash: &str,
) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(&cfg.output_dir)?;
    let labels = field_labels(cfg.family);
    let dim = field.dim;
    let xcols: Vec<String> = (0..dim).map(|d| format!("x{}", d + 1)).collect();

    // Full clean snapshot curves at the pair's two times.
    let mut curves = String::new();
    let mut head = xcols.clone();
    for l in &labels {
        head.push(format!("{l}_prev"));
        head.push(format!("{l}_curr"));
    }
    curves.push_str(&head.join(","));
    curves.push('\n');
    for i in 0..field.n_points() {
        let mut row: Vec<String> =
            (0..dim).map(|d| fmt(field.grid[i * dim + d])).collect();
        for o in 0..field.outputs() {
            row.push(fmt(field.values[pb.prev_idx][o][i]));
            row.push(fmt(field.values[pb.curr_idx][o][i]));
        }
        curves.push_str(&row.join(","));
        curves.push('\n');
    }
    let curves_path = cfg.output_dir.join(format!("figure-curves-{hash}.csv"));
    fs::write(&curves_path, curves)?;

    // Noisy training points actually handed to the trainer.
    let mut points = String::new();
    let mut head = vec!["snapshot".to_string()];
    head.extend(xcols);
    head.extend(labels.iter().cloned());
    points.push_str(&head.join(","));
    points.push('\n');
    let mut emit = |side: usize, idx: &[usize], noisy: &[Vec<f64>]| {
        for &i in idx {
            let mut row = vec![side.to_string()];
            row.extend((0..dim).map(|d| fmt(field.grid[i * dim + d])));
            row.extend(noisy.iter().map(|col| fmt(col[i])));
            points.push_str(&row.join(","));
            points.push('\n');
        }
    };
    emit(0, &pb.idx_prev, &pb.noisy_prev);
    emit(1, &pb.idx_curr, &pb.noisy_curr);
    let points_path = cfg.output_dir.join(format!("figure-points-{hash}.csv"));
    fs::write(&points_path, points)?;
    Ok(vec![curves_path, points_path])
}

/// Generate in memory, train once, and write the run record, equation
/// line, and figure data.
pub fn cmd_identify(cfg: &ExperimentConfig) -> Result<IdentifyOutcome, HarnessError> {
    let field = generate_field(cfg)?;
    let prev_idx = select_prev_index(cfg, &field)?;
    let seeds = RunSeeds::from_config(cfg);
    let (record, pb) =
        run_identification(&field, cfg, prev_idx, cfg.dt_multiplier, cfg.noise_pct, seeds)?;
    let equation = equation_line(cfg.family, &record.lambda)?;
    let hash = cfg.hash();
    fs::create_dir_all(&cfg.output_dir)?;
    let runs_path = cfg.output_dir.join(format!("runs-identify-{hash}.csv"));
    write_runs_csv(&runs_path, cfg.family, std::slice::from_ref(&record), &hash)?;
    let eq_path = cfg.output_dir.join(format!("equation-{hash}.txt"));
    fs::write(&eq_path, format!("{equation}\n"))?;
    let mut files = vec![runs_path, eq_path];
    files.extend(write_figure_data(cfg, &field, &pb, &hash)?);
    Ok(IdentifyOutcome { record, equation, files })
}

/// Evenly spaced selection of `cap` items from `0..available`.
fn thin_indices(available: usize, cap: usize) -> Vec<usize> {
    if cap == 0 || cap >= available {
        return (0..available).collect();
    }
    (0..cap).map(|j| j * available / cap).collect()
}

/// Identification across consecutive snapshot pairs and noise levels,
/// aggregated into per-noise quartiles. Individual failures leave gaps,
/// never abort the sweep.
pub fn cmd_sweep_pairs(cfg: &ExperimentConfig) -> Result<ResultTable, HarnessError> {
    let field = generate_field(cfg)?;
    let m = cfg.dt_multiplier;
    if field.n_snapshots() <= m {
        return Err(HarnessError::InvalidConfig("not enough snapshots for the gap".into()));
    }
    let starts = thin_indices(field.n_snapshots() - m, cfg.sweep_max_pairs);
    let noise_pcts = &cfg.sweep_noise_pcts;
    if noise_pcts.is_empty() {
        return Err(HarnessError::InvalidConfig("sweep needs at least one noise level".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..noise_pcts.len())
        .flat_map(|ni| (0..starts.len()).map(move |pi| (ni, pi)))
        .collect();
    let results: Vec<Option<RunRecord>> = jobs
        .par_iter()
        .map(|&(ni, pi)| {
            let tag = (pi * 1024 + ni) as u64;
            let seeds = RunSeeds::derived(cfg, tag);
            run_identification(&field, cfg, starts[pi], m, noise_pcts[ni], seeds)
                .ok()
                .map(|(rec, _)| rec)
        })
        .collect();

    let lambda_len = cfg.family.lambda_len();
    let hash = cfg.hash();
    let mut records = Vec::new();
    let mut rows = Vec::with_capacity(noise_pcts.len());
    for (ni, &pct) in noise_pcts.iter().enumerate() {
        let here: Vec<&RunRecord> = jobs
            .iter()
            .zip(&results)
            .filter(|((jni, _), r)| *jni == ni && r.is_some())
            .map(|(_, r)| r.as_ref().unwrap())
            .collect();
        let cells = (0..lambda_len)
            .map(|k| {
                let vals: Vec<f64> = here.iter().map(|r| r.lambda[k]).collect();
                quartiles(&vals).ok()
            })
            .collect();
        rows.push(TableRow { label: pct, cells, n_runs: here.len() });
        records.extend(here.into_iter().cloned());
    }
    let table = ResultTable {
        family: cfg.family,
        true_lambda: field.true_lambda.clone(),
        config_hash: hash.clone(),
        row_label: "noise_pct",
        rows,
    };
    fs::create_dir_all(&cfg.output_dir)?;
    write_runs_csv(
        &cfg.output_dir.join(format!("runs-sweep-pairs-{hash}.csv")),
        cfg.family,
        &records,
        &hash,
    )?;
    write_table_csv(&cfg.output_dir.join(format!("table-sweep-pairs-{hash}.csv")), &table)?;
    Ok(table)
}

/// Identification at a fixed earlier snapshot while the partner moves out
/// by each configured multiple of the base gap; point estimates per gap.
pub fn cmd_sweep_dt(cfg: &ExperimentConfig) -> Result<ResultTable, HarnessError> {
    if cfg.sweep_dt_multipliers.is_empty() {
        return Err(HarnessError::InvalidConfig("sweep_dt needs a dt_multipliers list".into()));
    }
    let field = generate_field(cfg)?;
    let max_m = *cfg.sweep_dt_multipliers.iter().max().unwrap();
    if field.n_snapshots() <= max_m {
        return Err(HarnessError::InvalidConfig("largest gap runs past the data".into()));
    }
    let prev_idx = match cfg.snapshot_index {
        Some(i) if i + max_m < field.n_snapshots() => i,
        Some(_) => {
            return Err(HarnessError::InvalidConfig(
                "snapshot_index leaves no partner for the largest gap".into(),
            ));
        }
        None => 0,
    };
    let results: Vec<Option<RunRecord>> = cfg
        .sweep_dt_multipliers
        .par_iter()
        .enumerate()
        .map(|(ji, &m)| {
            let seeds = RunSeeds::derived(cfg, ji as u64);
            run_identification(&field, cfg, prev_idx, m, cfg.noise_pct, seeds)
                .ok()
                .map(|(rec, _)| rec)
        })
        .collect();
    let lambda_len = cfg.family.lambda_len();
    let hash = cfg.hash();
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (ji, &m) in cfg.sweep_dt_multipliers.iter().enumerate() {
        let label = m as f64 * field.dt();
        match &results[ji] {
            Some(rec) => {
                let cells = rec
                    .lambda
                    .iter()
                    .map(|&l| Some(ParamStats { q1: l, median: l, q3: l }))
                    .collect();
                rows.push(TableRow { label, cells, n_runs: 1 });
                records.push(rec.clone());
            }
            None => rows.push(TableRow { label, cells: vec![None; lambda_len], n_runs: 0 }),
        }
    }
    let table = ResultTable {
        family: cfg.family,
        true_lambda: field.true_lambda.clone(),
        config_hash: hash.clone(),
        row_label: "dt",
        rows,
    };
    fs::create_dir_all(&cfg.output_dir)?;
    write_runs_csv(
        &cfg.output_dir.join(format!("runs-sweep-dt-{hash}.csv")),
        cfg.family,
        &records,
        &hash,
    )?;
    write_table_csv(&cfg.output_dir.join(format!("table-sweep-dt-{hash}.csv")), &table)?;
    Ok(table)
}

struct ParsedRun {
    family: String,
    noise_pct: f64,
    lambda: Vec<f64>,
}

fn parse_runs_csv(text: &str) -> Result<Vec<ParsedRun>, HarnessError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header = match lines.next() {
        Some(h) => h,
        None => return Ok(Vec::new()),
    };
    let cols: Vec<&str> = header.split(',').collect();
    let find = |name: &str| {
        cols.iter().position(|c| *c == name).ok_or_else(|| {
            HarnessError::InvalidInput(format!("run CSV missing column {name}"))
        })
    };
    let fam_i = find("family")?;
    let noise_i = find("noise_pct")?;
    let lambda_is: Vec<usize> = (1..)
        .map(|k| cols.iter().position(|c| *c == format!("lambda{k}")))
        .take_while(|p| p.is_some())
        .map(|p| p.unwrap())
        .collect();
    if lambda_is.is_empty() {
        return Err(HarnessError::InvalidInput("run CSV has no parameter columns".into()));
    }
    let mut out = Vec::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let parse = |i: usize| -> Result<f64, HarnessError> {
            cells
                .get(i)
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| HarnessError::InvalidInput("malformed run CSV row".into()))
        };
        out.push(ParsedRun {
            family: cells
                .get(fam_i)
                .map(|s| s.to_string())
                .ok_or_else(|| HarnessError::InvalidInput("malformed run CSV row".into()))?,
            noise_pct: parse(noise_i)?,
            lambda: lambda_is.iter().map(|&i| parse(i)).collect::<Result<_, _>>()?,
        });
    }
    Ok(out)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    let mut entries: Vec<PathBuf> =
        fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Aggregate every run CSV under `results_dir` into per-family quartile
/// tables, and carry figure data files through to `out_dir`.
pub fn cmd_report(results_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut files = Vec::new();
    collect_files(results_dir, &mut files)?;
    let name_of = |p: &Path| p.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
    let run_files: Vec<&PathBuf> =
        files.iter().filter(|p| name_of(p).starts_with("runs-")).collect();
    let figure_files: Vec<&PathBuf> =
        files.iter().filter(|p| name_of(p).starts_with("figure-")).collect();
    if run_files.is_empty() && figure_files.is_empty() {
        eprintln!("report: no run records under {}", results_dir.display());
        return Ok(Vec::new());
    }
    let mut runs: Vec<ParsedRun> = Vec::new();
    for path in run_files {
        runs.extend(parse_runs_csv(&fs::read_to_string(path)?)?);
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut families: Vec<String> = runs.iter().map(|r| r.family.clone()).collect();
    families.sort();
    families.dedup();
    for fam in families {
        let fam_runs: Vec<&ParsedRun> = runs.iter().filter(|r| r.family == fam).collect();
        let lambda_len = fam_runs[0].lambda.len();
        let mut noise_levels: Vec<f64> = fam_runs.iter().map(|r| r.noise_pct).collect();
        noise_levels.sort_by(|a, b| a.total_cmp(b));
        noise_levels.dedup();
        let mut out = String::new();
        let mut head = vec!["noise_pct".to_string(), "n_runs".into()];
        for k in 0..lambda_len {
            for stat in ["q1", "median", "q3"] {
                head.push(format!("lambda{}_{stat}", k + 1));
            }
        }
        out.push_str(&head.join(","));
        out.push('\n');
        for pct in noise_levels {
            let here: Vec<&&ParsedRun> =
                fam_runs.iter().filter(|r| r.noise_pct == pct).collect();
            let mut row = vec![fmt(pct), here.len().to_string()];
            for k in 0..lambda_len {
                let vals: Vec<f64> = here.iter().map(|r| r.lambda[k]).collect();
                match quartiles(&vals) {
                    Ok(s) => row.extend([fmt(s.q1), fmt(s.median), fmt(s.q3)]),
                    Err(_) => row.extend(["".to_string(), "".into(), "".into()]),
                }
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        let path = out_dir.join(format!("report-{fam}.csv"));
        fs::write(&path, out)?;
        written.push(path);
    }
    for fig in figure_files {
        let dest = out_dir.join(name_of(fig));
        if dest != **fig {
            fs::copy(fig, &dest)?;
            written.push(dest);
        }
    }
    Ok(written)
}

//! Instrumented benchmark runs: per-stage wall-clock times and exact
//! feature/Sinkhorn operation counts, one record per repetition.
//!
//! Each `(size, mode)` cell runs one discarded warm-up registration and then
//! `repeat` timed ones on the same synthetic pair. Op counts do not depend on
//! timing and are identical across repetitions.

use std::fmt::Write as _;
use std::time::Duration;

use crate::error::Result;
use crate::network::{flop_estimate, CascadeWeights, ExtractorMode};
use crate::pipeline::{register, FeatureMode, PipelineError, RegistrationConfig};
use crate::synth::{make_base_shape, synth_pair, Shape, SynthConfig};

pub const CSV_HEADER: &str =
    "mode,N,K,L,D,rep,seed,t_knn_ms,t_feat_ms,t_sinkhorn_ms,t_procrustes_ms,t_total_ms,ops_feat,ops_sinkhorn";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub modes: Vec<FeatureMode>,
    pub repeat: usize,
    pub seed: u64,
    pub neighbors: usize,
    pub iterations: usize,
    pub feature_dim: usize,
    pub shape: Shape,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![256, 1024, 4096],
            modes: vec![FeatureMode::Baseline, FeatureMode::Cascade],
            repeat: 5,
            seed: 0,
            neighbors: 64,
            iterations: 5,
            feature_dim: crate::network::DEFAULT_FEATURE_DIM,
            shape: Shape::Helix,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> std::result::Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.repeat == 0 {
            return bad("repeat must be at least 1");
        }
        if self.sizes.is_empty() || self.modes.is_empty() {
            return bad("need at least one size and one mode");
        }
        if let Some(n) = self.sizes.iter().find(|&&n| n < self.neighbors) {
            return Err(PipelineError::InvalidConfig(format!(
                "size {n} is smaller than K = {}",
                self.neighbors
            )));
        }
        Ok(())
    }
}

/// One timed registration.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub mode: FeatureMode,
    pub n: usize,
    pub k: usize,
    pub l: usize,
    pub d: usize,
    pub rep: usize,
    pub seed: u64,
    pub t_knn_ms: f64,
    pub t_feat_ms: f64,
    /// Normalization rounds only; building the similarity matrix is not included.
    pub t_sinkhorn_ms: f64,
    pub t_procrustes_ms: f64,
    pub t_total_ms: f64,
    pub ops_feat: u64,
    pub ops_sinkhorn: u64,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{},{}",
            self.mode.name(),
            self.n,
            self.k,
            self.l,
            self.d,
            self.rep,
            self.seed,
            self.t_knn_ms,
            self.t_feat_ms,
            self.t_sinkhorn_ms,
            self.t_procrustes_ms,
            self.t_total_ms,
            self.ops_feat,
            self.ops_sinkhorn
        )
    }
}

/// Runs every `(size, mode)` cell and hands each record to `sink` as soon as
/// it is measured.
pub fn run_bench(cfg: &BenchConfig, mut sink: impl FnMut(&BenchRecord)) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let weights = CascadeWeights::init_random_with_dim(cfg.seed, cfg.iterations, cfg.feature_dim)?;
    let mut records = Vec::new();
    for &n in &cfg.sizes {
        let base = make_base_shape(cfg.shape, n, cfg.seed)?;
        let pair = synth_pair(
            &SynthConfig {
                n_points: n,
                keep_fraction: 1.0,
                seed: cfg.seed,
                ..Default::default()
            },
            &base,
        )?;
        for &mode in &cfg.modes {
            let reg = RegistrationConfig {
                iterations: cfg.iterations,
                neighbors: cfg.neighbors,
                feature_dim: cfg.feature_dim,
                mode,
                seed: cfg.seed,
                ..Default::default()
            };
            register(&pair.src, &pair.reference, &reg, Some(&weights))?;
            for rep in 0..cfg.repeat {
                let start = std::time::Instant::now();
                let result = register(&pair.src, &pair.reference, &reg, Some(&weights))?;
                let total = start.elapsed();
                let t = result.times();
                let record = BenchRecord {
                    mode,
                    n,
                    k: cfg.neighbors,
                    l: cfg.iterations,
                    d: cfg.feature_dim,
                    rep,
                    seed: cfg.seed,
                    t_knn_ms: ms(t.knn),
                    t_feat_ms: ms(t.features),
                    t_sinkhorn_ms: ms(t.sinkhorn),
                    t_procrustes_ms: ms(t.procrustes),
                    t_total_ms: ms(total),
                    ops_feat: result.feature_macs(),
                    ops_sinkhorn: result.sinkhorn_ops(),
                };
                sink(&record);
                records.push(record);
            }
        }
    }
    Ok(records)
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

fn median_total(records: &[BenchRecord], n: usize, mode: FeatureMode) -> Option<(f64, u64)> {
    let cell: Vec<&BenchRecord> = records.iter().filter(|r| r.n == n && r.mode == mode).collect();
    if cell.is_empty() {
        return None;
    }
    let mut totals: Vec<f64> = cell.iter().map(|r| r.t_total_ms).collect();
    Some((median(&mut totals), cell[0].ops_feat))
}

/// Human-readable comparison of medians and op counts, with the analytic
/// feature-stage estimate alongside. Lines start with `#` so the block can
/// follow CSV output without breaking parsers that skip comments.
pub fn summarize(cfg: &BenchConfig, records: &[BenchRecord]) -> Result<String> {
    let weights = CascadeWeights::init_random_with_dim(cfg.seed, cfg.iterations, cfg.feature_dim)?;
    let mut out = String::new();
    for &n in &cfg.sizes {
        writeln!(out, "# N={n} K={} L={} D={}", cfg.neighbors, cfg.iterations, cfg.feature_dim).unwrap();
        for &mode in &cfg.modes {
            if let Some((t, ops)) = median_total(records, n, mode) {
                writeln!(out, "#   {:<11} median total {t:.3} ms, feature MACs {ops}", mode.name()).unwrap();
            }
        }
        let base = median_total(records, n, FeatureMode::Baseline);
        let casc = median_total(records, n, FeatureMode::Cascade);
        if let (Some((tb, ob)), Some((tc, oc))) = (base, casc) {
            let points = 2 * n as u64;
            let (k, l) = (cfg.neighbors as u64, cfg.iterations as u64);
            let eb = flop_estimate(&weights, points, k, l, ExtractorMode::Baseline);
            let ec = flop_estimate(&weights, points, k, l, ExtractorMode::Cascade);
            writeln!(out, "#   time ratio baseline/cascade: {:.2}", tb / tc).unwrap();
            writeln!(
                out,
                "#   feature op ratio baseline/cascade: measured {:.3}, estimate {:.3} (leading-order {:.3})",
                ob as f64 / oc as f64,
                eb.total() as f64 / ec.total() as f64,
                eb.proxy() as f64 / ec.proxy() as f64
            )
            .unwrap();
            let exact = ob == eb.total() && oc == ec.total();
            writeln!(out, "#   measured op counts match estimate: {}", if exact { "yes" } else { "no" }).unwrap();
        }
    }
    Ok(out)
}

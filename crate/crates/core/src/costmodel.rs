//! Closed-form cost formulas, per-module cost reports, and the wall-clock
//! scaling experiment for the attention paths.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::dense;
use crate::backbone::{MultiBranchBlock, Network, NetworkConfig};
use crate::counter::{self, Counts};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::real::Real;
use crate::tensor::Tensor;

pub use crate::embedding::{dcn_cost, dsdcn_cost, LayerCost};

/// Softmax self-attention MACs over `hw` tokens of width `d`.
pub fn msa_macs(hw: u64, d: u64) -> u64 {
    4 * hw * d * d + 2 * hw * hw * d
}

/// T-MSA MACs (single head, 3×3 gate, depthwise Q/K/V conv not included).
pub fn tmsa_macs(hw: u64, d: u64) -> u64 {
    18 * hw * d + 7 * hw * d * d
}

/// Smallest token count at which softmax attention costs strictly more.
pub fn crossover(d: u64) -> Result<u64> {
    if d == 0 {
        return Err(Error::config("crossover needs D >= 1"));
    }
    // 2n²D > 18nD + 3nD²  ⇔  n > 9 + 1.5 D
    let mut n = 9 + 3 * d / 2;
    while msa_macs(n, d) > tmsa_macs(n, d) && n > 1 {
        n -= 1;
    }
    while msa_macs(n, d) <= tmsa_macs(n, d) {
        n += 1;
    }
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Attention,
    Feedforward,
    Embedding,
    Fusion,
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    /// Counter scope path, e.g. `enc1.branch0.block0.tmsa`.
    pub name: String,
    pub kind: EntryKind,
    pub analytic_macs: u64,
    pub analytic_params: u64,
    pub instrumented_macs: Option<u64>,
    pub wall_time: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub height: usize,
    pub width: usize,
    pub entries: Vec<CostEntry>,
    pub wall_time: Option<Duration>,
}

impl CostReport {
    pub fn analytic_macs(&self) -> u64 {
        self.entries.iter().map(|e| e.analytic_macs).sum()
    }

    pub fn analytic_params(&self) -> u64 {
        self.entries.iter().map(|e| e.analytic_params).sum()
    }

    pub fn instrumented_macs(&self) -> Option<u64> {
        self.entries.iter().map(|e| e.instrumented_macs).sum()
    }

    /// Entries whose analytic and instrumented counts differ.
    pub fn mismatches(&self) -> Vec<&CostEntry> {
        self.entries
            .iter()
            .filter(|e| e.instrumented_macs.is_some_and(|m| m != e.analytic_macs))
            .collect()
    }

    pub fn by_kind(&self, kind: EntryKind) -> (u64, u64) {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .fold((0, 0), |(m, p), e| {
                (m + e.analytic_macs, p + e.analytic_params)
            })
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cost report for a {}x{} input", self.height, self.width);
        let _ = writeln!(
            s,
            "{:<44} {:<11} {:>14} {:>10} {:>14}",
            "module", "kind", "macs", "params", "instrumented"
        );
        for e in &self.entries {
            let inst = e.instrumented_macs.map_or("-".to_string(), |m| {
                if m == e.analytic_macs {
                    m.to_string()
                } else {
                    format!("{m} (!)")
                }
            });
            let _ = writeln!(
                s,
                "{:<44} {:<11} {:>14} {:>10} {:>14}",
                e.name,
                format!("{:?}", e.kind).to_lowercase(),
                e.analytic_macs,
                e.analytic_params,
                inst
            );
        }
        for kind in [
            EntryKind::Attention,
            EntryKind::Feedforward,
            EntryKind::Embedding,
            EntryKind::Fusion,
            EntryKind::Conv,
        ] {
            let (m, p) = self.by_kind(kind);
            let _ = writeln!(
                s,
                "subtotal {:<35} {:>14} {:>10}",
                format!("{kind:?}").to_lowercase(),
                m,
                p
            );
        }
        let _ = writeln!(
            s,
            "total {:<38} {:>14} {:>10}",
            "",
            self.analytic_macs(),
            self.analytic_params()
        );
        if let Some(t) = self.wall_time {
            let _ = writeln!(s, "forward wall time {:.3} s", t.as_secs_f64());
        }
        s
    }
}

fn conv_entry(name: String, c: &Conv2d, h: usize, w: usize) -> CostEntry {
    CostEntry {
        name,
        kind: EntryKind::Conv,
        analytic_macs: c.macs(h, w),
        analytic_params: c.num_params() as u64,
        instrumented_macs: None,
        wall_time: None,
    }
}

fn block_entries(out: &mut Vec<CostEntry>, prefix: &str, m: &MultiBranchBlock, h: usize, w: usize) {
    let entry = |name: String, kind, macs: u64, params: usize| CostEntry {
        name,
        kind,
        analytic_macs: macs,
        analytic_params: params as u64,
        instrumented_macs: None,
        wall_time: None,
    };
    for (b, (layers, blocks)) in m.embed.branches.iter().zip(&m.branches).enumerate() {
        let macs = layers.iter().map(|l| l.cost(h, w).macs).sum();
        let params = layers.iter().map(|l| l.num_params()).sum();
        out.push(entry(
            format!("{prefix}.branch{b}.embed"),
            EntryKind::Embedding,
            macs,
            params,
        ));
        for (j, tb) in blocks.iter().enumerate() {
            out.push(entry(
                format!("{prefix}.branch{b}.block{j}.tmsa"),
                EntryKind::Attention,
                tb.attn.cost(h, w).total(),
                tb.attn.num_params(),
            ));
            out.push(entry(
                format!("{prefix}.branch{b}.block{j}.ffn"),
                EntryKind::Feedforward,
                tb.ffn.macs(h, w),
                tb.ffn.num_params(),
            ));
        }
    }
    out.push(entry(
        format!("{prefix}.skff"),
        EntryKind::Fusion,
        m.skff.macs(),
        m.skff.num_params(),
    ));
}

/// Analytic per-module costs of the network on an `h×w` input.
pub fn count_costs(cfg: &NetworkConfig, h: usize, w: usize) -> Result<CostReport> {
    let (net, _) = Network::new::<f32>(cfg, 0)?;
    network_costs(&net, h, w)
}

pub fn network_costs(net: &Network, h: usize, w: usize) -> Result<CostReport> {
    net.check_input(&[3, h, w])?;
    let mut e = Vec::new();
    let s = net.cfg.stages();
    let dims = |level: usize| (h >> level, w >> level);
    e.push(conv_entry("shallow".into(), &net.shallow, h, w));
    for level in 0..s {
        let (hh, ww) = dims(level);
        block_entries(&mut e, &format!("enc{level}"), &net.encoders[level], hh, ww);
        if level + 1 < s {
            let (dh, dw) = dims(level + 1);
            e.push(conv_entry(format!("down{level}"), &net.down[level], dh, dw));
        }
    }
    for level in (0..s.saturating_sub(1)).rev() {
        let (hh, ww) = dims(level);
        let (uh, uw) = dims(level + 1);
        e.push(conv_entry(format!("up{level}"), &net.up[level], uh, uw));
        if let Some(r) = &net.reduce[level] {
            e.push(conv_entry(format!("reduce{level}"), r, hh, ww));
        }
        block_entries(&mut e, &format!("dec{level}"), &net.decoders[level], hh, ww);
    }
    for (i, r) in net.refine.iter().enumerate() {
        block_entries(&mut e, &format!("refine{i}"), r, h, w);
    }
    e.push(conv_entry("final".into(), &net.final_conv, h, w));
    Ok(CostReport {
        height: h,
        width: w,
        entries: e,
        wall_time: None,
    })
}

/// Attach instrumented counts from one recorded forward pass.
pub fn attach_counts(report: &mut CostReport, counts: &Counts) {
    for e in &mut report.entries {
        e.instrumented_macs = Some(counts.under(&e.name));
    }
}

/// Analytic report plus one instrumented, timed forward pass on a random image.
pub fn measure_costs<T: Real>(
    cfg: &NetworkConfig,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<CostReport> {
    let (net, store) = Network::new::<T>(cfg, seed)?;
    let mut report = network_costs(&net, h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::<T>::uniform([3, h, w], 1.0, &mut rng).map(|x| (x + T::one()) * T::c(0.5));
    let start = Instant::now();
    let (out, counts) = counter::record(|| net.infer(&store, &image));
    out?;
    report.wall_time = Some(start.elapsed());
    attach_counts(&mut report, &counts);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionPath {
    Linear,
    QuadraticTaylor,
    Softmax,
}

impl AttentionPath {
    pub const ALL: [AttentionPath; 3] = [
        AttentionPath::Linear,
        AttentionPath::QuadraticTaylor,
        AttentionPath::Softmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionPath::Linear => "linear",
            AttentionPath::QuadraticTaylor => "quadratic_taylor",
            AttentionPath::Softmax => "softmax",
        }
    }

    pub fn run<T: Real>(self, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            AttentionPath::Linear => dense::taylor_linear(q, k, v),
            AttentionPath::QuadraticTaylor => dense::taylor_quadratic(q, k, v, 1),
            AttentionPath::Softmax => dense::softmax_attention(q, k, v),
        }
    }
}

impl std::str::FromStr for AttentionPath {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AttentionPath::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown attention path `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    pub trial_nanos: Vec<u64>,
    pub median_nanos: u64,
    pub multiplies: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub path: AttentionPath,
    pub d: usize,
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of log(time) on log(N) over the upper half of N.
    pub slope: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ScalingOptions {
    pub trials: usize,
    pub warmups: usize,
    pub seed: u64,
}

impl Default for ScalingOptions {
    fn default() -> Self {
        ScalingOptions {
            trials: 5,
            warmups: 2,
            seed: 0,
        }
    }
}

/// Least-squares slope of `ys` on `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn median(v: &mut [u64]) -> u64 {
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2
    }
}

/// Time one attention path over an ascending sweep of token counts, one head of width `d`.
pub fn scaling_experiment<T: Real>(
    path: AttentionPath,
    ns: &[usize],
    d: usize,
    opts: ScalingOptions,
) -> Result<ScalingTable> {
    if opts.trials < 3 {
        return Err(Error::config("scaling experiment needs at least 3 trials"));
    }
    if ns.is_empty() || ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!(
            "token counts must be ascending, got {ns:?}"
        )));
    }
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ n as u64);
        let raw = |rng: &mut ChaCha8Rng| Tensor::<T>::uniform([1, d, n], 1.0, rng);
        let q = dense::normalize_qk(&raw(&mut rng), T::c(0.5))?;
        let k = dense::normalize_qk(&raw(&mut rng), T::c(0.5))?;
        let v = raw(&mut rng);
        // the counted run doubles as the first warmup
        let (first, counts) = counter::record(|| path.run(&q, &k, &v));
        std::hint::black_box(first?);
        for _ in 1..opts.warmups {
            std::hint::black_box(path.run(&q, &k, &v)?);
        }
        let mut trial_nanos = Vec::with_capacity(opts.trials);
        for _ in 0..opts.trials {
            let t = Instant::now();
            std::hint::black_box(path.run(&q, &k, &v)?);
            trial_nanos.push(t.elapsed().as_nanos() as u64);
        }
        let median_nanos = median(&mut trial_nanos.clone());
        rows.push(ScalingRow {
            n,
            trial_nanos,
            median_nanos,
            multiplies: counts.total(),
        });
    }
    let upper = &rows[rows.len() / 2..];
    let slope = if upper.len() >= 2 {
        let xs: Vec<f64> = upper.iter().map(|r| (r.n as f64).ln()).collect();
        let ys: Vec<f64> = upper
            .iter()
            .map(|r| (r.median_nanos.max(1) as f64).ln())
            .collect();
        fit_slope(&xs, &ys)
    } else {
        f64::NAN
    };
    Ok(ScalingTable {
        path,
        d,
        rows,
        slope,
    })
}

pub const CSV_HEADER: &str = "path,N,D,trial,nanos,multiplies";

pub fn write_csv(tables: &[ScalingTable], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for t in tables {
        for r in &t.rows {
            for (i, ns) in r.trial_nanos.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    t.path.name(),
                    r.n,
                    t.d,
                    i,
                    ns,
                    r.multiplies
                )?;
            }
        }
    }
    Ok(())
}

/// Whitespace-separated table (one row per path and N) followed by the slopes.
pub fn summary(tables: &[ScalingTable]) -> String {
    let mut s = String::from("# path N D median_nanos multiplies\n");
    for t in tables {
        for r in &t.rows {
            let _ = writeln!(
                s,
                "{} {} {} {} {}",
                t.path.name(),
                r.n,
                t.d,
                r.median_nanos,
                r.multiplies
            );
        }
    }
    for t in tables {
        let _ = writeln!(s, "# slope {} {:.4}", t.path.name(), t.slope);
    }
    s
}

pub fn write_outputs(tables: &[ScalingTable], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("scaling.csv");
    let f = std::fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?;
    write_csv(tables, std::io::BufWriter::new(f)).map_err(|e| Error::io(&csv, e))?;
    let sum = dir.join("scaling_summary.txt");
    std::fs::write(&sum, summary(tables)).map_err(|e| Error::io(&sum, e))?;
    Ok(())
}

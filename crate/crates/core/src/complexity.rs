//! Attention-pair cost accounting.
//!
//! The unit is one (query position, key position) score entry — not a FLOP
//! count, which would be backbone-specific. Closed forms per fusion mode
//! are verified against the encoder's instrumented [`crate::encoder::PairCounter`] with
//! exact integer equality, and a micro-benchmark reports wall clock and a
//! memory estimate per mode. Feed-forward cost is out of scope throughout:
//! the forms cover attention score entries only.
//!
//! Counts use 128-bit integers; realistic settings overflow 32 bits.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoder::{FusionConfig, FusionMode, Model, TokenizedBatch};
use crate::error::{Error, Result};
use crate::tape::Tape;

/// Grid point of the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostInputs {
    pub layers: usize,
    pub passages: usize,
    pub seq_len: usize,
    pub globals: usize,
}

impl CostInputs {
    pub fn new(layers: usize, passages: usize, seq_len: usize, globals: usize) -> Self {
        CostInputs { layers, passages, seq_len, globals }
    }
}

/// Exact non-negative rational with 128-bit terms, for checking ratio
/// identities without rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    num: u128,
    den: u128,
}

impl Ratio {
    pub fn new(num: u128, den: u128) -> Self {
        assert!(den != 0, "zero denominator");
        if num == 0 {
            return Ratio { num: 0, den: 1 };
        }
        let g = gcd(num, den);
        Ratio { num: num / g, den: den / g }
    }

    pub fn checked_sub(self, other: Ratio) -> Option<Ratio> {
        // self − other, None when negative
        let left = self.num.checked_mul(other.den)?;
        let right = other.num.checked_mul(self.den)?;
        if left < right {
            return None;
        }
        Some(Ratio::new(left - right, self.den.checked_mul(other.den)?))
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Per-layer per-passage self attention: `L·N·S²`.
pub fn pairs_vanilla(l: usize, n: usize, s: usize) -> u128 {
    l as u128 * n as u128 * (s as u128).pow(2)
}

/// Fusion via global tokens: `L·(N·S·(S+G) + G·(N·S+G))`, which expands to
/// `L·N·S² + 2·L·N·S·G + L·G²`.
pub fn pairs_fie(l: usize, n: usize, s: usize, g: usize) -> u128 {
    let (l, n, s, g) = (l as u128, n as u128, s as u128, g as u128);
    l * (n * s * (s + g) + g * (n * s + g))
}

/// Full concatenation at the final layer: `(L−1)·N·S² + (N·S)²`.
pub fn pairs_full_concat(l: usize, n: usize, s: usize) -> u128 {
    let (l, n, s) = (l as u128, n as u128, s as u128);
    l.saturating_sub(1) * n * s * s + (n * s).pow(2)
}

/// Globals restricted to the passages' leading tokens:
/// `L·(N·S·(S+G) + G·(N+G))`.
pub fn pairs_global_to_cls(l: usize, n: usize, s: usize, g: usize) -> u128 {
    let (l, n, s, g) = (l as u128, n as u128, s as u128, g as u128);
    l * (n * s * (s + g) + g * (n + g))
}

/// Leading tokens attend to each other: `L·N·(S² + (N−1))`.
pub fn pairs_cls_to_cls(l: usize, n: usize, s: usize) -> u128 {
    let (l, n, s) = (l as u128, n as u128, s as u128);
    l * n * (s * s + (n - 1))
}

/// Closed-form pair count of any fusion mode.
pub fn pairs_closed_form(mode: FusionMode, c: CostInputs) -> u128 {
    match mode {
        FusionMode::None => pairs_vanilla(c.layers, c.passages, c.seq_len),
        FusionMode::GlobalTokens | FusionMode::QueryAsGlobal => {
            pairs_fie(c.layers, c.passages, c.seq_len, c.globals)
        }
        FusionMode::GlobalToClsOnly => {
            pairs_global_to_cls(c.layers, c.passages, c.seq_len, c.globals)
        }
        FusionMode::ClsToCls => pairs_cls_to_cls(c.layers, c.passages, c.seq_len),
        FusionMode::FullConcat => pairs_full_concat(c.layers, c.passages, c.seq_len),
    }
}

/// Exact and approximate cost relative to vanilla attention.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct OverheadRatio {
    pub exact: f64,
    /// The first-order approximation: `1 + 2G/S` for global-token fusion,
    /// `1 + (N−1)/L` for full concatenation, 1 otherwise.
    pub approx: f64,
}

pub fn overhead_ratio(mode: FusionMode, c: CostInputs) -> OverheadRatio {
    let vanilla = pairs_vanilla(c.layers, c.passages, c.seq_len);
    assert!(vanilla > 0, "vanilla pair count must be positive");
    let exact = Ratio::new(pairs_closed_form(mode, c), vanilla).to_f64();
    let approx = match mode {
        FusionMode::GlobalTokens | FusionMode::QueryAsGlobal | FusionMode::GlobalToClsOnly => {
            1.0 + 2.0 * c.globals as f64 / c.seq_len as f64
        }
        FusionMode::FullConcat => 1.0 + (c.passages as f64 - 1.0) / c.layers as f64,
        FusionMode::None | FusionMode::ClsToCls => 1.0,
    };
    OverheadRatio { exact, approx }
}

/// Exact rational overhead of global-token fusion; its difference from the
/// `1 + 2G/S` approximation is exactly `G²/(N·S²)`.
pub fn fie_ratio_exact(c: CostInputs) -> Ratio {
    Ratio::new(
        pairs_fie(c.layers, c.passages, c.seq_len, c.globals),
        pairs_vanilla(c.layers, c.passages, c.seq_len),
    )
}

/// One verified grid point.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyPoint {
    pub mode: String,
    pub inputs: CostInputs,
    pub closed_form: u128,
    pub measured: u128,
    pub matches: bool,
    /// Per-layer (passage, global) tallies for divergence debugging.
    pub layer_breakdown: Vec<(u128, u128)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub points: Vec<VerifyPoint>,
    pub all_match: bool,
}

fn grid_config(mode: FusionMode, c: CostInputs) -> FusionConfig {
    FusionConfig {
        num_layers: c.layers,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        num_passages: c.passages,
        passage_seq_len: c.seq_len,
        num_global_tokens: c.globals,
        fusion_mode: mode,
        max_answer_len: 3,
        vocab_size: 64,
    }
}

/// Run the instrumented encoder on one random batch per grid point and
/// mode, asserting instrumented count == closed form (exact).
pub fn verify_counts(grid: &[CostInputs], modes: &[FusionMode], seed: u64) -> Result<VerifyReport> {
    let mut points = Vec::new();
    let mut all_match = true;
    for (i, &c) in grid.iter().enumerate() {
        for &mode in modes {
            let config = grid_config(mode, c);
            let model = Model::<f32>::new(config.clone(), seed)?;
            let batch = TokenizedBatch::random(&config, seed.wrapping_add(i as u64));
            let mut tape = Tape::new();
            let (_, counter) = model.forward(&mut tape, &batch, false)?;
            let measured = counter.total();
            let closed_form = pairs_closed_form(mode, c);
            let matches = measured == closed_form;
            all_match &= matches;
            points.push(VerifyPoint {
                mode: mode.to_string(),
                inputs: c,
                closed_form,
                measured,
                matches,
                layer_breakdown: counter
                    .layers()
                    .iter()
                    .map(|l| (l.passage_pairs, l.global_pairs))
                    .collect(),
            });
        }
    }
    Ok(VerifyReport { points, all_match })
}

/// The default verification grid: 81 (L, N, S, G) points.
pub fn default_grid() -> Vec<CostInputs> {
    let mut grid = Vec::new();
    for &l in &[1usize, 2, 3] {
        for &n in &[1usize, 2, 4] {
            for &s in &[2usize, 4, 8] {
                for &g in &[0usize, 1, 3] {
                    grid.push(CostInputs::new(l, n, s, g));
                }
            }
        }
    }
    grid
}

/// One row of the benchmark report.
#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub mode: String,
    pub inputs: CostInputs,
    pub pairs_closed: u128,
    /// Empty when the point was skipped for budget reasons.
    pub pairs_measured: Option<u128>,
    pub ratio_exact: f64,
    pub ratio_paper_approx: f64,
    pub wall_ms_median: Option<f64>,
    pub mem_bytes_est: Option<usize>,
    pub note: Option<String>,
}

/// Closed-form and measured cost per mode and grid point.
#[derive(Debug, Clone, Serialize)]
pub struct ComplexityReport {
    pub rows: Vec<ReportRow>,
}

impl ComplexityReport {
    /// CSV with the fixed header; a leading comment line records the scope
    /// (attention score pairs only, no feed-forward term).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "# attention score pairs only; feed-forward cost is excluded from all closed forms\n",
        );
        out.push_str(
            "mode,L,N,S,G,pairs_closed,pairs_measured,ratio_exact,ratio_paper_approx,wall_ms_median,mem_bytes_est\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:.9},{:.9},{},{}\n",
                r.mode,
                r.inputs.layers,
                r.inputs.passages,
                r.inputs.seq_len,
                r.inputs.globals,
                r.pairs_closed,
                r.pairs_measured.map_or(String::new(), |v| v.to_string()),
                r.ratio_exact,
                r.ratio_paper_approx,
                r.wall_ms_median.map_or(String::new(), |v| format!("{v:.4}")),
                r.mem_bytes_est.map_or(String::new(), |v| v.to_string()),
            ));
        }
        out
    }
}

/// Median wall clock of `repeats` forward passes per mode and point, plus a
/// deterministic memory estimate (tape values plus parameters). Points
/// whose pair count exceeds `max_pairs_measured` are reported closed-form
/// only, with a note.
pub fn bench_forward(
    grid: &[CostInputs],
    modes: &[FusionMode],
    repeats: usize,
    max_pairs_measured: u128,
    seed: u64,
) -> Result<ComplexityReport> {
    if repeats < 5 {
        return Err(Error::Config("benchmark needs at least 5 repeats".into()));
    }
    let mut rows = Vec::new();
    for (i, &c) in grid.iter().enumerate() {
        for &mode in modes {
            let pairs_closed = pairs_closed_form(mode, c);
            let ratio = overhead_ratio(mode, c);
            if pairs_closed > max_pairs_measured {
                rows.push(ReportRow {
                    mode: mode.to_string(),
                    inputs: c,
                    pairs_closed,
                    pairs_measured: None,
                    ratio_exact: ratio.exact,
                    ratio_paper_approx: ratio.approx,
                    wall_ms_median: None,
                    mem_bytes_est: None,
                    note: Some("skipped: beyond measurement budget".into()),
                });
                continue;
            }
            let config = grid_config(mode, c);
            let model = Model::<f32>::new(config.clone(), seed)?;
            let batch = TokenizedBatch::random(&config, seed.wrapping_add(i as u64));
            // warmup + measurement
            let mut tape = Tape::new();
            let (_, counter) = model.forward(&mut tape, &batch, false)?;
            let mem = tape.bytes_allocated() + model.params.numel() * 4;
            let mut times = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let mut tape = Tape::new();
                let t0 = Instant::now();
                let _ = model.forward(&mut tape, &batch, false)?;
                times.push(t0.elapsed().as_secs_f64() * 1e3);
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = times[times.len() / 2];
            rows.push(ReportRow {
                mode: mode.to_string(),
                inputs: c,
                pairs_closed,
                pairs_measured: Some(counter.total()),
                ratio_exact: ratio.exact,
                ratio_paper_approx: ratio.approx,
                wall_ms_median: Some(median),
                mem_bytes_est: Some(mem),
                note: None,
            });
        }
    }
    Ok(ComplexityReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanilla_substitutions() {
        assert_eq!(pairs_vanilla(1, 1, 1), 1);
        assert_eq!(pairs_vanilla(2, 3, 4), 96);
        assert_eq!(pairs_vanilla(12, 100, 250), 75_000_000);
    }

    #[test]
    fn fie_substitutions() {
        assert_eq!(pairs_fie(1, 2, 3, 0), pairs_vanilla(1, 2, 3));
        assert_eq!(pairs_fie(1, 2, 3, 1), 31);
        assert_eq!(pairs_fie(12, 100, 250, 10), 81_001_200);
    }

    #[test]
    fn full_concat_substitutions() {
        assert_eq!(pairs_full_concat(3, 1, 4), 3 * 16);
        assert_eq!(pairs_full_concat(2, 2, 3), 54);
        assert_eq!(pairs_full_concat(12, 100, 250), 693_750_000);
    }

    #[test]
    fn expanded_form_identity() {
        // L·N·S·(S+G) + L·G·(N·S+G) == L·N·S² + 2·L·N·S·G + L·G²
        for l in 1..4usize {
            for n in 1..5usize {
                for s in 1..6usize {
                    for g in 0..4usize {
                        let (lu, nu, su, gu) = (l as u128, n as u128, s as u128, g as u128);
                        let expanded = lu * nu * su * su + 2 * lu * nu * su * gu + lu * gu * gu;
                        assert_eq!(pairs_fie(l, n, s, g), expanded);
                    }
                }
            }
        }
    }

    #[test]
    fn reference_overhead_ratios() {
        let c = CostInputs::new(12, 100, 250, 10);
        let r = overhead_ratio(FusionMode::GlobalTokens, c);
        assert!((r.exact - 1.080016).abs() < 1e-6, "{}", r.exact);
        assert!((r.approx - 1.08).abs() < 1e-12);

        let f = overhead_ratio(FusionMode::FullConcat, c);
        assert!((f.exact - 9.25).abs() < 1e-9, "{}", f.exact);
        assert!((f.approx - (1.0 + 99.0 / 12.0)).abs() < 1e-12);

        let zero = overhead_ratio(FusionMode::GlobalTokens, CostInputs::new(12, 100, 250, 0));
        assert_eq!(zero.exact, 1.0);
    }

    #[test]
    fn dropped_term_is_exactly_g_squared_over_n_s_squared() {
        // exact ratio − (1 + 2G/S) == G²/(N·S²), as rationals
        for &(l, n, s, g) in
            &[(2usize, 3usize, 5usize, 2usize), (1, 1, 4, 3), (3, 2, 6, 1), (12, 100, 250, 10)]
        {
            let c = CostInputs::new(l, n, s, g);
            let exact = fie_ratio_exact(c);
            let approx = Ratio::new((s + 2 * g) as u128, s as u128);
            let diff = exact.checked_sub(approx).expect("exact ≥ approx");
            let want = Ratio::new((g * g) as u128, (n * s * s) as u128);
            assert_eq!(diff, want, "L={l} N={n} S={s} G={g}");
        }
    }

    #[test]
    fn verify_small_grid_all_modes() {
        let grid = [
            CostInputs::new(1, 1, 2, 0),
            CostInputs::new(2, 2, 3, 1),
            CostInputs::new(3, 2, 4, 3),
        ];
        let report = verify_counts(&grid, &FusionMode::ALL, 9).unwrap();
        assert!(report.all_match, "{:#?}", report.points.iter().filter(|p| !p.matches).collect::<Vec<_>>());
    }

    #[test]
    fn none_mode_equals_vanilla_everywhere() {
        for &c in &default_grid()[..12] {
            assert_eq!(pairs_closed_form(FusionMode::None, c), pairs_vanilla(c.layers, c.passages, c.seq_len));
        }
    }

    #[test]
    fn csv_round_trips_values() {
        let grid = [CostInputs::new(1, 1, 2, 0)];
        let report = bench_forward(&grid, &[FusionMode::None], 5, u128::MAX, 3).unwrap();
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with('#'));
        assert_eq!(
            lines.next().unwrap(),
            "mode,L,N,S,G,pairs_closed,pairs_measured,ratio_exact,ratio_paper_approx,wall_ms_median,mem_bytes_est"
        );
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "none");
        assert_eq!(row[5], row[6], "closed and measured agree");
        let ratio: f64 = row[7].parse().unwrap();
        assert_eq!(ratio, 1.0);
    }

    #[test]
    fn bench_skips_points_beyond_budget() {
        let grid = [CostInputs::new(2, 2, 8, 0)];
        let report = bench_forward(&grid, &[FusionMode::FullConcat], 5, 10, 3).unwrap();
        assert!(report.rows[0].pairs_measured.is_none());
        assert!(report.rows[0].note.as_deref().unwrap_or("").contains("skipped"));
    }

    #[test]
    fn timing_monotone_in_passages() {
        // medians must not decrease as N grows at fixed L, S, G
        let grid = [CostInputs::new(2, 1, 16, 2), CostInputs::new(2, 4, 16, 2)];
        let report = bench_forward(&grid, &[FusionMode::GlobalTokens], 7, u128::MAX, 3).unwrap();
        let t1 = report.rows[0].wall_ms_median.unwrap();
        let t4 = report.rows[1].wall_ms_median.unwrap();
        assert!(t4 >= t1, "N=1 {t1}ms vs N=4 {t4}ms");
    }
}

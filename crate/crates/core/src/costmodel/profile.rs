//! Profiled per-op timings and the regression used to fill gaps.
//!
//! CSV layout (UTF-8, `#` comment lines allowed):
//!
//! ```text
//! op,phase,tokens,context,time_us
//! preproj,prefill,1024,0,55736.6
//! attn,prefill,1024,1024,10000
//! ```
//!
//! `tokens` is the fused linear-op token count of the batch. For `attn`
//! rows `context` is the longest KV span attended in the batch; linear-op
//! rows are looked up with `context = 0`.
//!
//! Lookup order: the exact key; for linear ops, the row whose token count
//! pads to the same tile multiple; then a regression over the (op, phase)
//! slice. A slice with a single token count is scaled proportionally
//! (`T_eff` for linear ops, `T * context` for attention).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{least_squares, quantize_tokens, BatchComposition, BatchTiming, CostBackend, OpKind, Phase};
use crate::error::{Error, Result};

const HEADER: [&str; 5] = ["op", "phase", "tokens", "context", "time_us"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub op: OpKind,
    pub phase: Phase,
    pub tokens: u64,
    pub context: u64,
    /// As written in the CSV; kept in microseconds so the table
    /// serializes back unchanged.
    pub time_us: f64,
}

impl ProfileEntry {
    pub fn seconds(&self) -> f64 {
        self.time_us / 1e6
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileTable {
    pub entries: Vec<ProfileEntry>,
}

type Key = (OpKind, Phase, u64, u64);

impl ProfileTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, op: OpKind, phase: Phase, tokens: u64, context: u64) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.op == op && e.phase == phase && e.tokens == tokens && e.context == context)
            .map(ProfileEntry::seconds)
    }

    /// Linear-op row padding to the same tile multiple as `tokens`, the
    /// nearest token count winning.
    fn tile_equivalent(&self, op: OpKind, phase: Phase, tokens: u64, context: u64, tile_size: u64) -> Option<f64> {
        if !op.is_linear() {
            return None;
        }
        let q = quantize_tokens(tokens, tile_size);
        self.points(op, phase)
            .filter(|e| e.context == context && quantize_tokens(e.tokens, tile_size) == q)
            .min_by_key(|e| (e.tokens.abs_diff(tokens), e.tokens))
            .map(ProfileEntry::seconds)
    }

    fn points(&self, op: OpKind, phase: Phase) -> impl Iterator<Item = &ProfileEntry> {
        self.entries.iter().filter(move |e| e.op == op && e.phase == phase)
    }

    /// Serializes back to the CSV layout; times are written in microseconds
    /// with the shortest representation that parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut out = HEADER.join(",");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.op,
                e.phase,
                e.tokens,
                e.context,
                e.time_us
            ));
        }
        out
    }
}

/// Parses and validates a profile CSV. `source_name` labels errors.
pub fn ingest_profile(reader: impl Read, source_name: &str) -> Result<ProfileTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let csv_err = |e: csv::Error| {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        Error::parse(source_name, line, e.to_string())
    };

    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::parse(
            source_name,
            1,
            format!("expected header `{}`", HEADER.join(",")),
        ));
    }

    let mut seen: BTreeSet<Key> = BTreeSet::new();
    let mut entries = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("");
        let at = |reason: String| Error::parse(source_name, line, reason);

        let op: OpKind = field(0).parse().map_err(|e: Error| at(e.to_string()))?;
        if op == OpKind::Others {
            return Err(at("op `others` is not profiled".into()));
        }
        let phase: Phase = field(1).parse().map_err(|e: Error| at(e.to_string()))?;
        let tokens: u64 = field(2)
            .parse()
            .map_err(|_| at(format!("tokens `{}` is not a non-negative integer", field(2))))?;
        let context: u64 = field(3)
            .parse()
            .map_err(|_| at(format!("context `{}` is not a non-negative integer", field(3))))?;
        let time_us: f64 = field(4)
            .parse()
            .map_err(|_| at(format!("time_us `{}` is not a number", field(4))))?;
        if !(time_us.is_finite() && time_us > 0.0) {
            return Err(at(format!("time_us must be positive, got {}", field(4))));
        }
        if tokens == 0 {
            return Err(at("tokens must be >= 1".into()));
        }
        if !seen.insert((op, phase, tokens, context)) {
            return Err(Error::DuplicateProfileKey {
                op: op.to_string(),
                phase: phase.to_string(),
                tokens,
                context,
                line,
            });
        }
        entries.push(ProfileEntry {
            op,
            phase,
            tokens,
            context,
            time_us,
        });
    }
    Ok(ProfileTable { entries })
}

pub fn ingest_profile_file(path: &Path) -> Result<ProfileTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_profile(file, &path.display().to_string())
}

/// Regression fitted to one (op, phase) slice of the table.
#[derive(Debug, Clone, PartialEq)]
enum Fit {
    /// time = a + b * T_eff
    Linear { a: f64, b: f64 },
    /// time = a + b * T + c * T * context
    Attention { a: f64, b: f64, c: f64 },
    /// time = k * x with x = T_eff (linear) or T * context (attention)
    Proportional { k: f64, linear: bool },
}

fn proportional_x(linear: bool, tokens: u64, context: u64, tile_size: u64) -> f64 {
    if linear {
        quantize_tokens(tokens, tile_size) as f64
    } else {
        // a zero context still scales with the token count
        tokens as f64 * context.max(1) as f64
    }
}

impl Fit {
    fn predict(&self, tokens: u64, context: u64, tile_size: u64) -> f64 {
        match *self {
            Fit::Linear { a, b } => a + b * quantize_tokens(tokens, tile_size) as f64,
            Fit::Attention { a, b, c } => {
                let t = tokens as f64;
                a + b * t + c * t * context as f64
            }
            Fit::Proportional { k, linear } => k * proportional_x(linear, tokens, context, tile_size),
        }
    }
}

fn fit(table: &ProfileTable, op: OpKind, phase: Phase, tile_size: u64) -> Result<Fit> {
    let insufficient = |reason: &str| Error::InsufficientProfileData {
        op: op.to_string(),
        phase: phase.to_string(),
        reason: reason.to_string(),
    };
    let points: Vec<&ProfileEntry> = table.points(op, phase).collect();
    if points.is_empty() {
        return Err(insufficient("no profiled rows"));
    }
    let y: Vec<f64> = points.iter().map(|e| e.seconds()).collect();
    let distinct_tokens: BTreeSet<u64> = points.iter().map(|e| e.tokens).collect();
    if distinct_tokens.len() < 2 {
        let linear = op.is_linear();
        let rows: Vec<Vec<f64>> = points
            .iter()
            .map(|e| vec![proportional_x(linear, e.tokens, e.context, tile_size)])
            .collect();
        let c = least_squares(&rows, &y).ok_or_else(|| insufficient("degenerate single-point slice"))?;
        return Ok(Fit::Proportional { k: c[0], linear });
    }
    if op.is_linear() {
        let rows: Vec<Vec<f64>> = points
            .iter()
            .map(|e| vec![1.0, quantize_tokens(e.tokens, tile_size) as f64])
            .collect();
        let c = least_squares(&rows, &y).ok_or_else(|| insufficient("token counts collapse to one tile multiple"))?;
        return Ok(Fit::Linear { a: c[0], b: c[1] });
    }
    let rows: Vec<Vec<f64>> = points
        .iter()
        .map(|e| {
            let t = e.tokens as f64;
            vec![1.0, t, t * e.context as f64]
        })
        .collect();
    if let Some(c) = least_squares(&rows, &y) {
        return Ok(Fit::Attention {
            a: c[0],
            b: c[1],
            c: c[2],
        });
    }
    // context dimension not identifiable: fall back to a line in T
    let rows: Vec<Vec<f64>> = points.iter().map(|e| vec![1.0, e.tokens as f64]).collect();
    let c = least_squares(&rows, &y).ok_or_else(|| insufficient("degenerate attention grid"))?;
    Ok(Fit::Attention {
        a: c[0],
        b: c[1],
        c: 0.0,
    })
}

/// Time of one op: the stored value when the key exists, otherwise the
/// regression prediction clamped to at least `kernel_overhead`.
pub fn profile_time(
    table: &ProfileTable,
    kind: OpKind,
    phase: Phase,
    tokens: u64,
    context: u64,
    tile_size: u64,
    kernel_overhead: f64,
) -> Result<f64> {
    if let Some(t) = table.lookup(kind, phase, tokens, context) {
        return Ok(t);
    }
    if let Some(t) = table.tile_equivalent(kind, phase, tokens, context, tile_size.max(1)) {
        return Ok(t);
    }
    let f = fit(table, kind, phase, tile_size.max(1))?;
    Ok(f.predict(tokens, context, tile_size.max(1)).max(kernel_overhead))
}

/// Cost backend over a profile table. Profiled times cover
/// `profiled_layers` blocks and are rescaled linearly to the stage depth.
#[derive(Debug, Clone)]
pub struct ProfileBackend {
    table: ProfileTable,
    tile_size: u64,
    kernel_overhead: f64,
    profiled_layers: u64,
    fits: BTreeMap<(OpKind, Phase), std::result::Result<Fit, String>>,
}

impl ProfileBackend {
    pub fn new(table: ProfileTable, tile_size: u64, kernel_overhead: f64, profiled_layers: u64) -> Self {
        let tile_size = tile_size.max(1);
        let mut fits = BTreeMap::new();
        for op in OpKind::MAJOR {
            for phase in [Phase::Prefill, Phase::Decode, Phase::Mixed] {
                fits.insert((op, phase), fit(&table, op, phase, tile_size).map_err(|e| e.to_string()));
            }
        }
        ProfileBackend {
            table,
            tile_size,
            kernel_overhead,
            profiled_layers: profiled_layers.max(1),
            fits,
        }
    }

    pub fn table(&self) -> &ProfileTable {
        &self.table
    }

    fn op_time(&self, op: OpKind, phase: Phase, tokens: u64, context: u64) -> Result<f64> {
        if let Some(t) = self.table.lookup(op, phase, tokens, context) {
            return Ok(t);
        }
        if let Some(t) = self.table.tile_equivalent(op, phase, tokens, context, self.tile_size) {
            return Ok(t);
        }
        match &self.fits[&(op, phase)] {
            Ok(f) => Ok(f.predict(tokens, context, self.tile_size).max(self.kernel_overhead)),
            Err(reason) => Err(Error::InsufficientProfileData {
                op: op.to_string(),
                phase: phase.to_string(),
                reason: reason.clone(),
            }),
        }
    }
}

impl CostBackend for ProfileBackend {
    fn name(&self) -> &str {
        "profile"
    }

    fn batch_timing(&self, comp: &BatchComposition, layers: u64) -> Result<BatchTiming> {
        comp.validate()?;
        let Some(phase) = comp.phase() else {
            return Ok(BatchTiming {
                total: 0.0,
                per_op: BTreeMap::new(),
            });
        };
        let tokens = comp.linear_tokens();
        let context = comp.max_context();
        let scale = layers as f64 / self.profiled_layers as f64;
        let mut per_op = BTreeMap::new();
        for op in OpKind::MAJOR {
            let ctx = if op.is_linear() { 0 } else { context };
            per_op.insert(op, self.op_time(op, phase, tokens, ctx)? * scale);
        }
        Ok(BatchTiming {
            total: per_op.values().sum(),
            per_op,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(csv: &str) -> Result<ProfileTable> {
        ingest_profile(csv.as_bytes(), "test.csv")
    }

    #[test]
    fn ingest_three_rows() {
        let t = table("op,phase,tokens,context,time_us\n# note\npreproj,prefill,128,0,10\nattn,decode,4,1024,2.5\nffn_ln2,mixed,256,0,7\n")
            .unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.entries[1].seconds(), 2.5e-6);
    }

    #[test]
    fn rejects_bad_rows() {
        let err = table("op,phase,tokens,context,time_us\npreproj,prefill,128,0,0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = table("op,phase,tokens,context,time_us\npreproj,prefill,128,0,1\npreproj,prefill,128,0,2\n").unwrap_err();
        assert!(matches!(err, Error::DuplicateProfileKey { line: 3, .. }), "{err}");
        assert!(table("op,phase,tokens,time_us\n").is_err());
        assert!(table("op,phase,tokens,context,time_us\nmlp,prefill,1,0,1\n").is_err());
        assert!(table("op,phase,tokens,context,time_us\nattn,prefill,1,0\n").is_err());
        assert!(table("op,phase,tokens,context,time_us\nattn,prefill,-1,0,1\n").is_err());
        assert!(table("op,phase,tokens,context,time_us\nattn,prefill,1,0,NaN\n").is_err());
    }

    #[test]
    fn exact_lookup_is_bit_exact() {
        let t = table("op,phase,tokens,context,time_us\nffn_ln1,prefill,257,0,92330.123456789\n").unwrap();
        let v = profile_time(&t, OpKind::FfnLn1, Phase::Prefill, 257, 0, 128, 1e-5).unwrap();
        assert_eq!(v, "92330.123456789".parse::<f64>().unwrap() / 1e6);
    }

    #[test]
    fn linear_two_point_interpolation() {
        let t = table("op,phase,tokens,context,time_us\npreproj,prefill,100,0,10000\npreproj,prefill,300,0,20000\n").unwrap();
        let v = profile_time(&t, OpKind::PreProj, Phase::Prefill, 200, 0, 1, 0.0).unwrap();
        assert!((v - 15e-3).abs() < 1e-15);
    }

    #[test]
    fn single_point_and_empty_slices() {
        let t = table("op,phase,tokens,context,time_us\npreproj,prefill,100,0,10000\nattn,decode,4,1024,5680\n").unwrap();
        let v = profile_time(&t, OpKind::PreProj, Phase::Prefill, 200, 0, 1, 0.0).unwrap();
        assert!((v - 0.02).abs() < 1e-15);
        // 3 decodes at the same context read 3/4 of the KV
        let v = profile_time(&t, OpKind::Attn, Phase::Decode, 3, 1024, 128, 0.0).unwrap();
        assert!((v - 5.68e-3 * 0.75).abs() < 1e-15);
        let err = profile_time(&t, OpKind::PreProj, Phase::Decode, 200, 0, 1, 0.0).unwrap_err();
        assert!(matches!(err, Error::InsufficientProfileData { .. }));
    }

    #[test]
    fn tile_equivalent_rows() {
        let t = table("op,phase,tokens,context,time_us\nffn_ln1,prefill,1024,0,500\nffn_ln1,prefill,1000,0,400\nffn_ln1,prefill,256,0,100\n")
            .unwrap();
        // 1021 pads to 1024 like both the 1000 and 1024 rows; 1024 is nearer
        assert_eq!(profile_time(&t, OpKind::FfnLn1, Phase::Prefill, 1021, 0, 128, 0.0).unwrap(), 500.0 / 1e6);
        assert_eq!(profile_time(&t, OpKind::FfnLn1, Phase::Prefill, 900, 0, 128, 0.0).unwrap(), 400.0 / 1e6);
        assert_eq!(profile_time(&t, OpKind::FfnLn1, Phase::Prefill, 129, 0, 128, 0.0).unwrap(), 100.0 / 1e6);
    }

    #[test]
    fn attention_grid_recovers_coefficients() {
        let mut csv = String::from("op,phase,tokens,context,time_us\n");
        for t in [1u64, 4, 16, 64, 256] {
            for ctx in [128u64, 512, 1024, 2048] {
                let time_us = 1.0 + 0.01 * t as f64 + 0.0001 * (t * ctx) as f64;
                csv.push_str(&format!("attn,decode,{t},{ctx},{time_us}\n"));
            }
        }
        let t = table(&csv).unwrap();
        let Fit::Attention { a, b, c } = fit(&t, OpKind::Attn, Phase::Decode, 1).unwrap() else {
            panic!("expected attention fit");
        };
        let rel = |got: f64, want: f64| ((got - want) / want).abs();
        assert!(rel(a, 1e-6) < 1e-6, "a={a}");
        assert!(rel(b, 0.01e-6) < 1e-6, "b={b}");
        assert!(rel(c, 0.0001e-6) < 1e-6, "c={c}");
    }

    #[test]
    fn prediction_clamped_to_kernel_overhead() {
        let t = table("op,phase,tokens,context,time_us\npreproj,decode,100,0,20\npreproj,decode,300,0,10\n").unwrap();
        let v = profile_time(&t, OpKind::PreProj, Phase::Decode, 4000, 0, 1, 7e-6).unwrap();
        assert_eq!(v, 7e-6);
    }

    #[test]
    fn csv_round_trip() {
        let src = "op,phase,tokens,context,time_us\npreproj,prefill,128,0,10.5\nattn,mixed,4,1024,5680\n";
        let t = table(src).unwrap();
        let again = table(&t.to_csv()).unwrap();
        assert_eq!(t, again);
    }
}

//! Per-head address traces: recording, CSV/PGM export and a summary of how
//! much each head iterates forward versus looking up by content.
//!
//! Export layout for one trace, under `<outdir>/<kind>-<index>/`:
//!
//! * `full_address.csv`, `content_address.csv`: a header row `step,0,1,…`
//!   of location (or source position) indices, then one row per timestep
//!   led by a `t:token` label.
//! * `gate.csv`: `step,gate,beta,gamma`, blank where a head has no such
//!   parameter (plain Luong attention).
//! * `shift.csv`: `step,-1,0,+1` kernel mass per offset.
//! * `full_address.pgm`, `content_address.pgm`: binary 8-bit graymaps, one
//!   pixel row per timestep, pixel = round(255·w / max w) with the maximum
//!   taken over the whole image (all zero if the image is all zero).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::{Graph, Var};
use crate::data::{Vocabulary, EOS, SOS};
use crate::decode::argmax;
use crate::error::{Error, Result};
use crate::models::{Dropout, HeadKind, Model, Phase, StepRecord};
use crate::scalar::Scalar;
use crate::train::max_decode_len;

/// One timestep of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub phase: Phase,
    /// Token consumed (encoding) or emitted (decoding) at this step.
    pub label: String,
    pub weights: Vec<f64>,
    pub content: Vec<f64>,
    pub gate: Option<f64>,
    pub shift: Option<[f64; 3]>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadTrace {
    pub kind: HeadKind,
    /// Index among heads of the same kind.
    pub index: usize,
    pub steps: Vec<TraceStep>,
}

impl HeadTrace {
    /// Directory name under an export root.
    pub fn dir_name(&self) -> String {
        format!("{}-{}", self.kind.name(), self.index)
    }

    pub fn columns(&self) -> usize {
        self.steps.first().map_or(0, |s| s.weights.len())
    }
}

/// Traces of one decoded sentence.
#[derive(Clone, Debug)]
pub struct Episode {
    pub traces: Vec<HeadTrace>,
    /// Output tokens without EOS.
    pub decoded: Vec<usize>,
}

fn values<T: Scalar>(g: &Graph<T>, v: Var) -> Vec<f64> {
    g.value(v).to_f64_vec()
}

/// Runs one episode with tracing on and collects a trace per head. With
/// `decoded = None` the sentence is decoded greedily here; otherwise
/// `decoded` (without EOS) is fed back token by token, followed by the
/// final EOS step. Row labels use the vocabularies when given, raw ids
/// otherwise.
pub fn record_episode<T: Scalar>(
    model: &Model<T>,
    source: &[usize],
    decoded: Option<&[usize]>,
    vocabs: Option<(&Vocabulary, &Vocabulary)>,
) -> Result<Episode> {
    let kinds = model.head_kinds();
    if kinds.is_empty() {
        return Err(Error::contract("record_episode: the model has no heads"));
    }
    let mut g = Graph::inference();
    let p = model.params().bind(&mut g);
    let mut state = model.encode(&mut g, &p, &[source.to_vec()], &mut Dropout::off(), true)?;
    let mut source_labels: Vec<usize> = source.to_vec();
    if source_labels.last() != Some(&EOS) {
        source_labels.push(EOS);
    }
    let mut emitted = Vec::new();
    let mut previous = SOS;
    let budget = decoded.map_or(max_decode_len(source.len()), |d| d.len() + 1);
    for t in 0..budget {
        let (logits, next) = model.decode_step(&mut g, &p, &state, &[previous], &mut Dropout::off())?;
        state = next;
        let tok = match decoded {
            Some(d) => d.get(t).copied().unwrap_or(EOS),
            None => argmax(g.value(logits).data()),
        };
        emitted.push(tok);
        if tok == EOS {
            break;
        }
        previous = tok;
    }
    let records: &[StepRecord] = state.trace().expect("tracing requested");
    let label = |phase: Phase, tok: usize| match (vocabs, phase) {
        (Some((s, _)), Phase::Encoding) => s.token(tok).to_string(),
        (Some((_, t)), Phase::Decoding) => t.token(tok).to_string(),
        (None, _) => tok.to_string(),
    };
    let mut traces: Vec<HeadTrace> = Vec::with_capacity(kinds.len());
    let mut per_kind = std::collections::HashMap::new();
    for &kind in &kinds {
        let index = per_kind.entry(kind).or_insert(0usize);
        traces.push(HeadTrace { kind, index: *index, steps: Vec::new() });
        *index += 1;
    }
    let (mut enc, mut dec) = (0, 0);
    for r in records {
        let tok = match r.phase {
            Phase::Encoding => {
                enc += 1;
                source_labels[enc - 1]
            }
            Phase::Decoding => {
                dec += 1;
                emitted[dec - 1]
            }
        };
        // encoder-decoder models trace only the memory heads they have at
        // every decode step, in `head_kinds` order
        for (trace, h) in traces.iter_mut().zip(&r.heads) {
            let scalar = |v: Option<Var>| v.map(|v| g.value(v).item().as_f64());
            trace.steps.push(TraceStep {
                phase: r.phase,
                label: label(r.phase, tok),
                weights: values(&g, h.weights),
                content: values(&g, h.content),
                gate: scalar(h.gate),
                shift: h.shift.map(|s| {
                    let v = values(&g, s);
                    [v[0], v[1], v[2]]
                }),
                beta: scalar(h.beta),
                gamma: scalar(h.gamma),
            });
        }
    }
    let decoded_out = emitted.into_iter().take_while(|&t| t != EOS).collect();
    Ok(Episode { traces, decoded: decoded_out })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn row_label(t: usize, step: &TraceStep) -> String {
    csv_field(&format!("{t}:{}", step.label))
}

fn matrix_csv(trace: &HeadTrace, pick: impl Fn(&TraceStep) -> &[f64]) -> String {
    let mut s = String::from("step");
    for i in 0..trace.columns() {
        let _ = write!(s, ",{i}");
    }
    s.push('\n');
    for (t, step) in trace.steps.iter().enumerate() {
        s.push_str(&row_label(t, step));
        for v in pick(step) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Binary graymap of `rows`, scaled by the maximum over all entries.
pub fn graymap(rows: &[Vec<f64>]) -> Vec<u8> {
    let height = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    let max = rows.iter().flatten().copied().fold(0.0f64, f64::max);
    let mut out = format!("P5\n# pixel = round(255 * w / max w), max over the image\n{width} {height}\n255\n").into_bytes();
    for row in rows {
        for &w in row {
            let px = if max > 0.0 { (255.0 * w / max).round().clamp(0.0, 255.0) } else { 0.0 };
            out.push(px as u8);
        }
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the tables and images of `trace` into `<outdir>/<kind>-<index>/`
/// and returns that directory.
pub fn export_trace(trace: &HeadTrace, outdir: &Path) -> Result<PathBuf> {
    let dir = outdir.join(trace.dir_name());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_file(&dir.join("full_address.csv"), matrix_csv(trace, |s| &s.weights).as_bytes())?;
    write_file(&dir.join("content_address.csv"), matrix_csv(trace, |s| &s.content).as_bytes())?;
    let mut gate = String::from("step,gate,beta,gamma\n");
    let mut shift = String::from("step,-1,0,+1\n");
    for (t, s) in trace.steps.iter().enumerate() {
        let _ = writeln!(gate, "{},{},{},{}", row_label(t, s), opt(s.gate), opt(s.beta), opt(s.gamma));
        let k = s.shift.map(|k| k.map(Some)).unwrap_or([None; 3]);
        let _ = writeln!(shift, "{},{},{},{}", row_label(t, s), opt(k[0]), opt(k[1]), opt(k[2]));
    }
    write_file(&dir.join("gate.csv"), gate.as_bytes())?;
    write_file(&dir.join("shift.csv"), shift.as_bytes())?;
    let full: Vec<Vec<f64>> = trace.steps.iter().map(|s| s.weights.clone()).collect();
    let content: Vec<Vec<f64>> = trace.steps.iter().map(|s| s.content.clone()).collect();
    write_file(&dir.join("full_address.pgm"), &graymap(&full))?;
    write_file(&dir.join("content_address.pgm"), &graymap(&content))?;
    Ok(dir)
}

/// A parsed exported table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub labels: Vec<String>,
    /// Blank cells are `None`.
    pub rows: Vec<Vec<Option<f64>>>,
}

fn split_csv(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

/// Reads a table written by [`export_trace`].
pub fn parse_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = split_csv(lines.next().ok_or_else(|| Error::ingest(path, "empty table"))?);
    let (mut labels, mut rows) = (Vec::new(), Vec::new());
    for (n, line) in lines.enumerate() {
        let mut fields = split_csv(line).into_iter();
        labels.push(fields.next().unwrap_or_default());
        let row = fields
            .map(|f| {
                if f.is_empty() {
                    Ok(None)
                } else {
                    f.parse().map(Some).map_err(|_| Error::ingest(path, format!("line {}: bad number {f:?}", n + 2)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() + 1 != header.len() {
            return Err(Error::ingest(path, format!("line {}: {} fields for {} columns", n + 2, row.len() + 1, header.len())));
        }
        rows.push(row);
    }
    Ok(Table { header, labels, rows })
}

/// Per-phase statistics of one trace.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseStats {
    pub phase: Phase,
    pub steps: usize,
    pub mean_gate: Option<f64>,
    /// Fraction of this phase's steps (that have a predecessor) whose
    /// argmax is one past the previous step's argmax.
    pub forward_step_fraction: Option<f64>,
    /// Mean shift-kernel mass on the +1 offset.
    pub mean_forward_shift: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonotonicityReport {
    pub head: String,
    /// Over every step that has a predecessor.
    pub forward_step_fraction: f64,
    pub phases: Vec<PhaseStats>,
}

impl MonotonicityReport {
    pub fn phase(&self, phase: Phase) -> Option<&PhaseStats> {
        self.phases.iter().find(|p| p.phase == phase)
    }

    /// One `key=value` line per phase after a summary line.
    pub fn render(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut s = format!("head={} forward_step_fraction={:.4}\n", self.head, self.forward_step_fraction);
        for p in &self.phases {
            let _ = writeln!(
                s,
                "head={} phase={} steps={} mean_gate={} forward_step_fraction={} mean_shift_plus1={}",
                self.head,
                p.phase.name(),
                p.steps,
                f(p.mean_gate),
                f(p.forward_step_fraction),
                f(p.mean_forward_shift)
            );
        }
        s
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Gate, forward-iteration and +1-shift statistics per phase. Forward steps
/// compare argmaxes without wraparound.
pub fn monotonicity_report(trace: &HeadTrace) -> Result<MonotonicityReport> {
    if trace.steps.is_empty() {
        return Err(Error::contract("monotonicity_report: empty trace"));
    }
    let argmaxes: Vec<usize> = trace.steps.iter().map(|s| argmax(&s.weights)).collect();
    let forward: Vec<bool> = (1..argmaxes.len()).map(|t| argmaxes[t] == argmaxes[t - 1] + 1).collect();
    let overall = if forward.is_empty() { 0.0 } else { forward.iter().filter(|&&f| f).count() as f64 / forward.len() as f64 };
    let mut phases = Vec::new();
    for phase in [Phase::Encoding, Phase::Decoding] {
        let idx: Vec<usize> = (0..trace.steps.len()).filter(|&t| trace.steps[t].phase == phase).collect();
        if idx.is_empty() {
            continue;
        }
        let transitions: Vec<bool> = idx.iter().filter(|&&t| t > 0).map(|&t| forward[t - 1]).collect();
        phases.push(PhaseStats {
            phase,
            steps: idx.len(),
            mean_gate: mean(idx.iter().filter_map(|&t| trace.steps[t].gate)),
            forward_step_fraction: (!transitions.is_empty())
                .then(|| transitions.iter().filter(|&&f| f).count() as f64 / transitions.len() as f64),
            mean_forward_shift: mean(idx.iter().filter_map(|&t| trace.steps[t].shift.map(|s| s[2]))),
        });
    }
    Ok(MonotonicityReport { head: trace.dir_name(), forward_step_fraction: overall, phases })
}

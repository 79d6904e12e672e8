//! Generation with per-token reasoning-depth telemetry, and step statistics
//! reports (CSV and JSON lines).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::mix_seed;
use crate::model::{model_forward, ModelWeights, RunMode};
use crate::tensor::no_grad;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_new_tokens: usize,
    pub temperature: f32,
    pub top_k: Option<usize>,
    pub seed: u64,
    pub halt_bias_delta: Option<f32>,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Input(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Input("max_new_tokens must be >= 1".into()));
        }
        if self.top_k == Some(0) {
            return Err(Error::Input("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTelemetry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_id: Option<String>,
    /// Index among the generated tokens.
    pub position: usize,
    pub token_id: u32,
    pub token_text: String,
    pub steps_used: usize,
    pub halt_score: f32,
    pub continue_score: f32,
}

/// Temperature, then optional top-k, then a seeded categorical draw.
pub fn sample_token(logits: &[f32], temperature: f32, top_k: Option<usize>, rng: &mut ChaCha8Rng) -> Result<u32> {
    let scaled: Vec<f64> = logits.iter().map(|&l| l as f64 / temperature as f64).collect();
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    // stable sort keeps ties in id order, so top_k = 1 is argmax with lowest id
    order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]));
    let keep = top_k.unwrap_or(scaled.len()).min(scaled.len());
    let kept = &order[..keep];
    let max = scaled[kept[0]];
    let weights: Vec<f64> = kept.iter().map(|&i| (scaled[i] - max).exp()).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::Numeric(format!("sampling weights: {e}")))?;
    Ok(kept[dist.sample(rng)] as u32)
}

/// Autoregressive decoding. Each token re-runs the full prefix (the last
/// `max_seq_len` tokens) through the model in inference mode.
pub fn generate(
    req: &GenerationRequest,
    w: &ModelWeights,
    config: &ModelConfig,
    tok: &Tokenizer,
) -> Result<(String, Vec<TokenTelemetry>)> {
    req.validate()?;
    let mut ids = tok.encode(&req.prompt)?;
    if ids.len() >= config.max_seq_len {
        return Err(Error::Input(format!(
            "prompt is {} tokens; it must be shorter than max_seq_len {}",
            ids.len(),
            config.max_seq_len
        )));
    }
    if ids.is_empty() {
        ids.push(tok.begin_id());
    }
    let delta = req.halt_bias_delta.unwrap_or(config.halt_bias_delta);
    let mode = RunMode::Inference { delta };
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut emitted = Vec::new();
    let mut telemetry = Vec::new();
    for position in 0..req.max_new_tokens {
        let window = &ids[ids.len().saturating_sub(config.max_seq_len)..];
        let out = no_grad(|| model_forward(window, 1, w, config, &mode))?;
        let v = config.vocab_size;
        let logits = out.logits.data();
        let last = &logits[(window.len() - 1) * v..window.len() * v];
        let next = sample_token(last, req.temperature, req.top_k, &mut rng)?;
        drop(logits);
        let trace = &out.hrm.trace.samples[0];
        let at_halt = trace.steps.last().expect("at least one step");
        telemetry.push(TokenTelemetry {
            prompt_id: None,
            position,
            token_id: next,
            token_text: tok.decode(&[next]),
            steps_used: trace.steps_used,
            halt_score: at_halt.halt_score,
            continue_score: at_halt.continue_score,
        });
        ids.push(next);
        if next == tok.end_id() {
            break;
        }
        emitted.push(next);
    }
    Ok((tok.decode(&emitted), telemetry))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: String,
    pub mean_steps: f64,
    pub std_steps: f64,
    pub n: u64,
    /// Counts for steps 1..=s_max.
    pub hist: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_mean_steps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub s_max: usize,
    pub groups: Vec<GroupStats>,
    pub overall: GroupStats,
    pub warnings: Vec<String>,
}

pub const OVERALL: &str = "overall";
pub const CONVENTIONS: &str = "std_steps is the population standard deviation; one sample per generated token, \
counting the reasoning steps of the forward pass that emitted it";

fn group_stats(group: &str, steps: &[usize], s_max: usize) -> GroupStats {
    let n = steps.len() as f64;
    let mean = steps.iter().map(|&s| s as f64).sum::<f64>() / n;
    let var = steps.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n;
    let mut hist = vec![0u64; s_max];
    for &s in steps {
        hist[s - 1] += 1;
    }
    GroupStats {
        group: group.to_string(),
        mean_steps: mean,
        std_steps: var.sqrt(),
        n: steps.len() as u64,
        hist,
        reference_mean_steps: None,
    }
}

/// Per-group and overall statistics of `(group, steps_used)` samples. Groups
/// listed in `expected` come first, in that order; an expected group with no
/// samples is left out and noted in `warnings`.
pub fn step_stats<'a>(
    samples: impl IntoIterator<Item = (&'a str, usize)>,
    expected: &[&str],
    s_max: usize,
) -> Result<RunReport> {
    let mut order: Vec<String> = expected.iter().map(|s| s.to_string()).collect();
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); order.len()];
    let mut all = Vec::new();
    for (group, steps) in samples {
        if steps < 1 || steps > s_max {
            return Err(Error::Data(format!("steps_used {steps} outside [1, {s_max}] in group {group:?}")));
        }
        let i = match order.iter().position(|g| g == group) {
            Some(i) => i,
            None => {
                order.push(group.to_string());
                buckets.push(Vec::new());
                order.len() - 1
            }
        };
        buckets[i].push(steps);
        all.push(steps);
    }
    if all.is_empty() {
        return Err(Error::Input("no samples to aggregate".into()));
    }
    let mut warnings = Vec::new();
    let mut groups = Vec::new();
    for (g, b) in order.iter().zip(&buckets) {
        if b.is_empty() {
            warnings.push(format!("group {g:?} has no samples and was excluded"));
        } else {
            groups.push(group_stats(g, b, s_max));
        }
    }
    Ok(RunReport {
        s_max,
        groups,
        overall: group_stats(OVERALL, &all, s_max),
        warnings,
    })
}

/// Reference mean depths for the four showcase prompts. Shown next to measured
/// values for comparison, never checked.
pub fn reference_mean_steps(prompt: &str) -> Option<f64> {
    const REFS: &[(&str, f64)] = &[
        ("The capital of France is", 2.7805),
        ("Photosynthesis is the process by which plants", 4.7722),
        ("If all roses are flowers and some flowers fade quickly, what can we conclude about roses?", 7.0303),
        ("A bat and a ball cost $1.10 in total. The bat costs $1.00 more than the ball. How much does the ball cost?", 8.4000),
    ];
    REFS.iter().find(|(p, _)| *p == prompt.trim()).map(|&(_, v)| v)
}

pub const UNLABELED: &str = "unlabeled";

/// Grouping key for telemetry aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Prompt,
    Token,
    Position,
    /// Everything in one group.
    None,
}

impl std::str::FromStr for GroupBy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompt" | "prompt_id" => Ok(GroupBy::Prompt),
            "token" | "token_text" => Ok(GroupBy::Token),
            "position" => Ok(GroupBy::Position),
            "none" | "all" => Ok(GroupBy::None),
            other => Err(Error::Usage(format!("unknown group key {other:?} (prompt, token, position, none)"))),
        }
    }
}

impl GroupBy {
    pub fn key(&self, t: &TokenTelemetry) -> String {
        match self {
            GroupBy::Prompt => t.prompt_id.clone().unwrap_or_else(|| UNLABELED.to_string()),
            GroupBy::Token => t.token_text.clone(),
            GroupBy::Position => t.position.to_string(),
            GroupBy::None => "all".to_string(),
        }
    }
}

/// Aggregates telemetry rows by `group_by`, groups in first-seen order.
pub fn analyze_telemetry(rows: &[TokenTelemetry], group_by: GroupBy, s_max: usize) -> Result<RunReport> {
    let keys: Vec<String> = rows.iter().map(|t| group_by.key(t)).collect();
    let mut report = step_stats(keys.iter().map(String::as_str).zip(rows.iter().map(|t| t.steps_used)), &[], s_max)?;
    if group_by == GroupBy::Prompt {
        for g in &mut report.groups {
            g.reference_mean_steps = reference_mean_steps(&g.group);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptRunOptions {
    pub repeats: usize,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub temperature: f32,
    pub top_k: Option<usize>,
    pub halt_bias_delta: Option<f32>,
}

/// Runs `repeats` seeded generations per prompt and reports the mean steps
/// per generated token for each prompt. Returns the raw telemetry as well.
pub fn prompt_depth_run(
    prompts: &[String],
    w: &ModelWeights,
    config: &ModelConfig,
    tok: &Tokenizer,
    opts: &PromptRunOptions,
) -> Result<(RunReport, Vec<TokenTelemetry>)> {
    let prompts: Vec<&String> = prompts.iter().filter(|p| !p.trim().is_empty()).collect();
    if prompts.is_empty() {
        return Err(Error::Input("the prompt file has no prompts".into()));
    }
    if opts.repeats == 0 {
        return Err(Error::Input("repeats must be >= 1".into()));
    }
    let mut telemetry = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        for r in 0..opts.repeats {
            let req = GenerationRequest {
                prompt: prompt.to_string(),
                max_new_tokens: opts.max_new_tokens,
                temperature: opts.temperature,
                top_k: opts.top_k,
                seed: mix_seed(opts.seed, (i * opts.repeats + r) as u64),
                halt_bias_delta: opts.halt_bias_delta,
            };
            let (_, rows) = generate(&req, w, config, tok)?;
            telemetry.extend(rows.into_iter().map(|mut t| {
                t.prompt_id = Some(prompt.to_string());
                t
            }));
        }
    }
    let expected: Vec<&str> = prompts.iter().map(|p| p.as_str()).collect();
    let mut report = step_stats(
        telemetry.iter().map(|t| (t.prompt_id.as_deref().unwrap_or(UNLABELED), t.steps_used)),
        &expected,
        config.s_max,
    )?;
    for g in &mut report.groups {
        g.reference_mean_steps = reference_mean_steps(&g.group);
    }
    Ok((report, telemetry))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "jsonl" => Ok(ReportFormat::Jsonl),
            other => Err(Error::Usage(format!("unknown report format {other:?} (csv or jsonl)"))),
        }
    }
}

pub fn fmt4(x: f64) -> String {
    format!("{x:.4}")
}

fn rows(report: &RunReport) -> impl Iterator<Item = &GroupStats> {
    report.groups.iter().chain(std::iter::once(&report.overall))
}

pub fn render_csv(report: &RunReport) -> Result<String> {
    let mut out = format!("# {CONVENTIONS}; s_max={}\n", report.s_max);
    for w in &report.warnings {
        out.push_str(&format!("# warning: {w}\n"));
    }
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["group".to_string(), "mean_steps".into(), "std_steps".into(), "n".into()];
    header.extend((1..=report.s_max).map(|i| format!("hist_{i}")));
    wtr.write_record(&header)?;
    for g in rows(report) {
        let mut rec = vec![g.group.clone(), fmt4(g.mean_steps), fmt4(g.std_steps), g.n.to_string()];
        rec.extend(g.hist.iter().map(|c| c.to_string()));
        wtr.write_record(&rec)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    out.push_str(&String::from_utf8(bytes).expect("csv output is UTF-8"));
    Ok(out)
}

pub fn render_jsonl(report: &RunReport) -> String {
    let mut out = String::new();
    for g in rows(report) {
        let mut line = format!(
            "{{\"group\":{},\"mean_steps\":{},\"std_steps\":{},\"n\":{}",
            serde_json::to_string(&g.group).expect("string serializes"),
            fmt4(g.mean_steps),
            fmt4(g.std_steps),
            g.n
        );
        for (i, c) in g.hist.iter().enumerate() {
            line.push_str(&format!(",\"hist_{}\":{c}", i + 1));
        }
        if let Some(r) = g.reference_mean_steps {
            line.push_str(&format!(",\"reference_mean_steps\":{}", fmt4(r)));
        }
        line.push_str("}\n");
        out.push_str(&line);
    }
    out
}

pub fn emit_report(report: &RunReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => render_csv(report)?,
        ReportFormat::Jsonl => render_jsonl(report),
    };
    let mut f = fs::File::create(path).map_err(|source| Error::Ingest { path: path.to_path_buf(), source })?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn split_overall(mut rows: Vec<GroupStats>, s_max: usize) -> Result<RunReport> {
    let at = rows
        .iter()
        .rposition(|g| g.group == OVERALL)
        .ok_or_else(|| Error::Data("report has no overall row".into()))?;
    let overall = rows.remove(at);
    Ok(RunReport { s_max, groups: rows, overall, warnings: Vec::new() })
}

pub fn parse_csv(text: &str) -> Result<RunReport> {
    // only the leading lines are comments; a group may itself start with '#'
    let preamble: Vec<&str> = text.split_inclusive('\n').take_while(|l| l.starts_with('#')).collect();
    let warnings: Vec<String> = preamble
        .iter()
        .filter_map(|l| l.trim_end_matches(['\r', '\n']).strip_prefix("# warning: ").map(str::to_string))
        .collect();
    let body = &text[preamble.iter().map(|l| l.len()).sum::<usize>()..];
    let mut rdr = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let header = rdr.headers()?.clone();
    let s_max = header.len().saturating_sub(4);
    let expected: Vec<String> = ["group", "mean_steps", "std_steps", "n"]
        .iter()
        .map(|s| s.to_string())
        .chain((1..=s_max).map(|i| format!("hist_{i}")))
        .collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Data(format!("unexpected report header {header:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Data(format!("bad number {s:?}: {e}")));
    let int = |s: &str| s.parse::<u64>().map_err(|e| Error::Data(format!("bad count {s:?}: {e}")));
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(GroupStats {
            group: rec[0].to_string(),
            mean_steps: num(&rec[1])?,
            std_steps: num(&rec[2])?,
            n: int(&rec[3])?,
            hist: (4..4 + s_max).map(|i| int(&rec[i])).collect::<Result<_>>()?,
            reference_mean_steps: None,
        });
    }
    let mut report = split_overall(rows, s_max)?;
    report.warnings = warnings;
    Ok(report)
}

pub fn parse_jsonl(text: &str) -> Result<RunReport> {
    let mut rows = Vec::new();
    let mut s_max = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(line)?;
        let field = |k: &str| obj.get(k).ok_or_else(|| Error::Data(format!("report row lacks {k}")));
        let f = |k: &str| field(k)?.as_f64().ok_or_else(|| Error::Data(format!("{k} is not a number")));
        s_max = (1..).take_while(|i| obj.contains_key(&format!("hist_{i}"))).count();
        rows.push(GroupStats {
            group: field("group")?.as_str().unwrap_or_default().to_string(),
            mean_steps: f("mean_steps")?,
            std_steps: f("std_steps")?,
            n: f("n")? as u64,
            hist: (1..=s_max).map(|i| f(&format!("hist_{i}")).map(|v| v as u64)).collect::<Result<_>>()?,
            reference_mean_steps: obj.get("reference_mean_steps").and_then(|v| v.as_f64()),
        });
    }
    split_overall(rows, s_max)
}

pub fn parse_report(text: &str, format: ReportFormat) -> Result<RunReport> {
    match format {
        ReportFormat::Csv => parse_csv(text),
        ReportFormat::Jsonl => parse_jsonl(text),
    }
}

impl RunReport {
    /// The report as it reads back after rendering (means and deviations at
    /// four decimals).
    pub fn rounded(&self) -> RunReport {
        let r = |x: f64| fmt4(x).parse::<f64>().expect("formatted float parses");
        let fix = |g: &GroupStats| GroupStats {
            mean_steps: r(g.mean_steps),
            std_steps: r(g.std_steps),
            reference_mean_steps: g.reference_mean_steps.map(r),
            ..g.clone()
        };
        RunReport {
            s_max: self.s_max,
            groups: self.groups.iter().map(fix).collect(),
            overall: fix(&self.overall),
            warnings: self.warnings.clone(),
        }
    }
}

/// Reads telemetry JSON lines.
pub fn read_telemetry(text: &str) -> Result<Vec<TokenTelemetry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn write_telemetry(rows: &[TokenTelemetry], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| Error::Ingest { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    proptest::proptest! {
        #[test]
        fn reports_round_trip(
            samples in proptest::collection::vec(("[a-c#, \"\n]{0,4}", 1usize..=5), 1..40),
            expected in proptest::collection::vec("[a-d]{1,2}", 0..3),
        ) {
            let exp: Vec<&str> = expected.iter().map(String::as_str).collect();
            let r = step_stats(samples.iter().map(|(g, s)| (g.as_str(), *s)), &exp, 5).unwrap();
            let want = r.rounded();
            let csv = parse_csv(&render_csv(&r).unwrap()).unwrap();
            proptest::prop_assert_eq!(&csv, &want);
            let jsonl = parse_jsonl(&render_jsonl(&r)).unwrap();
            proptest::prop_assert_eq!(jsonl, RunReport { warnings: Vec::new(), ..want });
        }
    }

    #[test]
    fn degenerate_and_hand_examples() {
        let r = step_stats([("a", 3), ("a", 3), ("a", 3)], &[], 4).unwrap();
        assert_eq!((r.overall.mean_steps, r.overall.std_steps), (3.0, 0.0));
        let r = step_stats([("a", 1), ("a", 5)], &[], 16).unwrap();
        assert_eq!((r.groups[0].mean_steps, r.groups[0].std_steps), (3.0, 2.0));
        assert_eq!(r.groups[0].hist.iter().sum::<u64>(), 2);
    }

    #[test]
    fn empty_groups_are_warned_and_empty_input_rejected() {
        let r = step_stats([("b", 2)], &["a", "b"], 4).unwrap();
        assert_eq!(r.groups.len(), 1);
        assert_eq!(r.warnings.len(), 1);
        assert!(step_stats(std::iter::empty(), &["a"], 4).is_err());
        assert!(matches!(step_stats([("a", 5)], &[], 4), Err(Error::Data(_))));
    }

    #[test]
    fn rendering_contract() {
        assert_eq!(fmt4(2.68103), "2.6810");
        let mut r = step_stats([("x,y", 1), ("x,y", 2), ("z", 3)], &[], 3).unwrap();
        r.groups[0].reference_mean_steps = Some(2.7805);
        let csv = render_csv(&r).unwrap();
        assert!(csv.lines().nth(1).unwrap() == "group,mean_steps,std_steps,n,hist_1,hist_2,hist_3", "{csv}");
        assert!(csv.contains("overall,2.0000,0.8165,3,1,1,1"), "{csv}");
        let mut plain = r.rounded();
        plain.groups[0].reference_mean_steps = None;
        assert_eq!(parse_csv(&csv).unwrap(), plain);
        assert_eq!(parse_jsonl(&render_jsonl(&r)).unwrap(), r.rounded().tap_warnings_cleared());
    }

    impl RunReport {
        fn tap_warnings_cleared(mut self) -> Self {
            self.warnings.clear();
            self
        }
    }

    #[test]
    fn sampling_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = [0.1, 2.0, 1.9, -3.0];
        for _ in 0..20 {
            assert_eq!(sample_token(&logits, 1.0, Some(1), &mut rng).unwrap(), 1);
            let t = sample_token(&logits, 1.0, Some(2), &mut rng).unwrap();
            assert!(t == 1 || t == 2);
        }
    }

    fn tiny() -> (ModelWeights, ModelConfig) {
        let cfg = ModelConfig {
            d_model: 16,
            vocab_size: 259,
            max_seq_len: 12,
            n_input_layers: 1,
            n_output_layers: 1,
            n_heads: 2,
            n_kv_heads: 1,
            n_high_layers: 1,
            n_low_layers: 1,
            s_max: 3,
            seq_len: 8,
            ..ModelConfig::desk()
        };
        (build_model(&cfg).unwrap(), cfg)
    }

    #[test]
    fn generation_contract() {
        let (w, cfg) = tiny();
        let tok = Tokenizer::byte();
        let req = GenerationRequest {
            prompt: "hi".into(),
            max_new_tokens: 15,
            temperature: 1.0,
            top_k: Some(1),
            seed: 4,
            halt_bias_delta: None,
        };
        let (text, tel) = generate(&req, &w, &cfg, &tok).unwrap();
        let (text2, tel2) = generate(&GenerationRequest { seed: 99, ..req.clone() }, &w, &cfg, &tok).unwrap();
        assert_eq!((&text, &tel), (&text2, &tel2));
        assert!(!tel.is_empty() && tel.len() <= 15);
        assert!(tel.iter().all(|t| (1..=3).contains(&t.steps_used)));
        let long = GenerationRequest { prompt: "x".repeat(12), ..req.clone() };
        assert!(matches!(generate(&long, &w, &cfg, &tok), Err(Error::Input(_))));
        assert!(generate(&GenerationRequest { temperature: 0.0, ..req }, &w, &cfg, &tok).is_err());
    }

    #[test]
    fn prompt_run_reproducible_with_references() {
        let (w, cfg) = tiny();
        let tok = Tokenizer::byte();
        let prompts = vec!["The capital of France is".to_string(), "ab".to_string()];
        let opts = PromptRunOptions { repeats: 1, seed: 3, max_new_tokens: 4, temperature: 1.0, top_k: None, halt_bias_delta: None };
        let cfg = ModelConfig { max_seq_len: 64, ..cfg };
        let (a, ta) = prompt_depth_run(&prompts, &w, &cfg, &tok, &opts).unwrap();
        let (b, tb) = prompt_depth_run(&prompts, &w, &cfg, &tok, &opts).unwrap();
        assert_eq!((&a, &ta), (&b, &tb));
        assert_eq!(a.groups[0].reference_mean_steps, Some(2.7805));
        assert_eq!(a.groups[1].reference_mean_steps, None);
        for g in &a.groups {
            let rows: Vec<f64> = ta.iter().filter(|t| t.prompt_id.as_deref() == Some(&g.group)).map(|t| t.steps_used as f64).collect();
            assert_eq!(g.mean_steps, rows.iter().sum::<f64>() / rows.len() as f64);
        }
        assert!(prompt_depth_run(&["  ".to_string()], &w, &cfg, &tok, &opts).is_err());
    }
}

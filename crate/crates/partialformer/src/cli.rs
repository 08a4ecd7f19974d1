//! Command-line entry point: JSON run configs with dotted-key overrides,
//! subcommands for training, analysis, counting, decoding and architecture
//! comparison. All artifacts go under `--out`; exit code 0 means success,
//! 1 a configuration problem, 2 a runtime failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{
    encoder_ffn_param_count, ffn_activation_stats, head_diversity, token_uniformity,
    AnalysisReport, BehaviorMetrics,
};
use crate::error::{Error, Result};
use crate::model::{Arch, CheckpointEntry, ForwardCtx, Model, ModelConfig, Probe, read_checkpoint};
use crate::training::{
    average_snapshots, beam_decode, decoder_io, encoder_input, greedy_decode, make_task, restore,
    train, Example, TaskSpec, TrainConfig,
};

// ── run configuration ──

fn default_probe_len() -> usize {
    20
}
fn default_samples() -> usize {
    8
}
fn default_beam_size() -> usize {
    4
}
fn default_len_penalty() -> f64 {
    1.0
}
fn default_max_decode_len() -> usize {
    32
}

/// Lengths and knobs for the analysis and decoding subcommands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisOptions {
    /// Source length for MAC estimates.
    #[serde(default = "default_probe_len")]
    pub src_len: usize,
    /// Target length for MAC estimates.
    #[serde(default = "default_probe_len")]
    pub tgt_len: usize,
    /// Eval examples probed for the behavioral metrics (0 skips them).
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_beam_size")]
    pub beam_size: usize,
    /// Exponent alpha in the `log_prob / len^alpha` hypothesis score.
    #[serde(default = "default_len_penalty")]
    pub len_penalty: f64,
    #[serde(default = "default_max_decode_len")]
    pub max_decode_len: usize,
}

impl Default for AnalysisOptions {
    fn default() -> AnalysisOptions {
        serde_json::from_str("{}").expect("all AnalysisOptions fields have defaults")
    }
}

impl AnalysisOptions {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.src_len == 0 {
            return err("analysis.src_len must be at least 1".into());
        }
        if self.beam_size == 0 {
            return err("analysis.beam_size must be at least 1".into());
        }
        if self.max_decode_len == 0 {
            return err("analysis.max_decode_len must be at least 1".into());
        }
        if !self.len_penalty.is_finite() || self.len_penalty < 0.0 {
            return err(format!(
                "analysis.len_penalty = {} must be a non-negative number",
                self.len_penalty
            ));
        }
        Ok(())
    }
}

/// One JSON file describing a whole run: the model, and optionally a task,
/// a training recipe and analysis knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub analysis: AnalysisOptions,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let Some(task) = &self.task {
            task.validate()?;
        }
        if let Some(train) = &self.train {
            train.validate()?;
        }
        self.analysis.validate()
    }
}

/// Set `root[key] = value` for a dotted key like `model.d` or
/// `train.lr_peak`, creating intermediate objects as needed. The value is
/// parsed as JSON when possible and falls back to a plain string.
fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {spec:?}")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("--set key {key:?} has an empty segment")));
    }
    let mut cursor = root;
    for seg in &segments[..segments.len() - 1] {
        cursor = cursor
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("--set {key}: {seg} is not an object")))?
            .entry(seg.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let last = segments[segments.len() - 1];
    cursor
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("--set {key}: parent of {last} is not an object")))?
        .insert(last.to_string(), value);
    Ok(())
}

/// Read the config file, apply `--set` overrides, deserialize and validate.
pub fn load_run_config(path: &Path, sets: &[String]) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for spec in sets {
        apply_override(&mut value, spec)?;
    }
    let cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

// ── argument surface ──

#[derive(Parser)]
#[command(
    name = "partialformer",
    about = "Train, analyze and compare partial-level gated transformers",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-key overrides, e.g. --set model.d=256 --set task.kind=sort.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory for artifacts; nothing is written without it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on the configured synthetic task and write history/checkpoints.
    Train(CommonArgs),
    /// Full report: parameters, MACs and probed behavioral metrics.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
        /// Evaluate probe samples on this many threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Analyze these weights instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Closed-form parameter budget.
    CountParams(CommonArgs),
    /// Closed-form MAC budget at the configured lengths.
    CountMacs(CommonArgs),
    /// Greedy and beam decoding of one source sequence.
    Decode {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated source token ids, e.g. 4,9,5.
        #[arg(long)]
        src: String,
        /// Decode with these weights instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Beam width (defaults to analysis.beam_size).
        #[arg(long)]
        beam: Option<usize>,
        /// Length-penalty exponent (defaults to analysis.len_penalty).
        #[arg(long)]
        alpha: Option<f64>,
        /// Emission cap (defaults to analysis.max_decode_len).
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Side-by-side report of all three architectures under equal seeds.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Evaluate probe samples on this many threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

/// Parse arguments (without the program name) and run one subcommand.
pub fn run(args: impl IntoIterator<Item = String>) -> i32 {
    let argv = std::iter::once("partialformer".to_string()).chain(args);
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::CountParams(common) => {
            let cfg = load_run_config(&common.config, &common.set)?;
            let report = AnalysisReport::build(&cfg.model, None, None);
            print_param_table(&report);
            let out = OutDir::new(common.out.as_deref())?;
            out.write("params.json", &report.to_json())?;
            out.write("layers.csv", &report.to_csv())?;
            Ok(())
        }
        Cmd::CountMacs(common) => {
            let cfg = load_run_config(&common.config, &common.set)?;
            let lengths = (cfg.analysis.src_len, cfg.analysis.tgt_len);
            let report = AnalysisReport::build(&cfg.model, Some(lengths), None);
            print_macs_table(&report);
            let out = OutDir::new(common.out.as_deref())?;
            out.write("macs.json", &report.to_json())?;
            out.write("layers.csv", &report.to_csv())?;
            Ok(())
        }
        Cmd::Analyze { common, jobs, checkpoint } => {
            let cfg = load_run_config(&common.config, &common.set)?;
            let entries = load_matching_checkpoint(checkpoint.as_deref(), &cfg.model)?;
            let metrics = probe_metrics(&cfg, entries.as_deref(), jobs)?;
            let lengths = (cfg.analysis.src_len, cfg.analysis.tgt_len);
            let report = AnalysisReport::build(&cfg.model, Some(lengths), metrics);
            print_param_table(&report);
            print_macs_table(&report);
            print_metrics(&report);
            let out = OutDir::new(common.out.as_deref())?;
            out.write("report.json", &report.to_json())?;
            out.write("layers.csv", &report.to_csv())?;
            out.write("effective_config.json", &echo_config(&cfg)?)?;
            Ok(())
        }
        Cmd::Train(common) => {
            let cfg = load_run_config(&common.config, &common.set)?;
            let task = cfg
                .task
                .clone()
                .ok_or_else(|| Error::Config("train needs a task section in the config".into()))?;
            let train_cfg = cfg.train.clone().unwrap_or_default();
            let mut model = Model::new(cfg.model.clone())?;
            let summary = train(&mut model, &task, &train_cfg)?;
            for r in &summary.history {
                println!(
                    "step {:>6}  lr {:.3e}  eval loss {:.4}  token accuracy {:.3}",
                    r.step, r.lr, r.loss, r.token_accuracy
                );
            }
            println!(
                "finished after {} steps{}",
                summary.steps_run,
                if summary.stopped_early { " (target accuracy reached)" } else { "" }
            );
            let out = OutDir::new(common.out.as_deref())?;
            out.write("history.json", &serde_json::to_string_pretty(&summary.history).expect("history serializes"))?;
            out.write("history.csv", &history_csv(&summary.history))?;
            if let Some(path) = out.path("model.ckpt") {
                model.save_checkpoint(&path)?;
            }
            if !summary.checkpoints.is_empty() {
                if let Some(path) = out.path("averaged.ckpt") {
                    let snaps: Vec<_> = summary.checkpoints.iter().map(|c| c.params.clone()).collect();
                    let mean = average_snapshots(&snaps)?;
                    let averaged = Model::new(cfg.model.clone())?;
                    restore(&averaged, &mean)?;
                    averaged.save_checkpoint(&path)?;
                }
            }
            let echoed = RunConfig { train: Some(train_cfg), ..cfg };
            out.write("effective_config.json", &echo_config(&echoed)?)?;
            Ok(())
        }
        Cmd::Decode { common, src, checkpoint, beam, alpha, max_len } => {
            let cfg = load_run_config(&common.config, &common.set)?;
            let src = parse_src(&src, cfg.model.vocab_size)?;
            let model = match checkpoint {
                Some(path) => {
                    let entries = load_matching_checkpoint(Some(&path), &cfg.model)?;
                    let model = Model::new(cfg.model.clone())?;
                    model.apply_entries(&entries.expect("path given"))?;
                    model
                }
                None => Model::new(cfg.model.clone())?,
            };
            let beam = beam.unwrap_or(cfg.analysis.beam_size);
            let alpha = alpha.unwrap_or(cfg.analysis.len_penalty);
            let max_len = max_len.unwrap_or(cfg.analysis.max_decode_len);
            if beam == 0 || max_len == 0 {
                return Err(Error::Config("--beam and --max-len must be at least 1".into()));
            }
            // The decoder prefix holds BOS plus every emitted token, so the
            // emission cap may never exceed the positions the model supports.
            let max_len = max_len.min(cfg.model.max_len.saturating_sub(1)).max(1);
            let enc_in = encoder_input(&src);
            let greedy = greedy_decode(&model, &enc_in, alpha, max_len)?;
            let beams = beam_decode(&model, &enc_in, beam, alpha, max_len)?;
            println!("greedy: {:?}  score {:.4}{}", greedy.tokens, greedy.score, trunc_tag(greedy.truncated));
            for (i, h) in beams.iter().enumerate() {
                println!("beam {}: {:?}  score {:.4}{}", i + 1, h.tokens, h.score, trunc_tag(h.truncated));
            }
            let out = OutDir::new(common.out.as_deref())?;
            let payload = serde_json::json!({ "greedy": greedy, "beam": beams });
            out.write("decode.json", &serde_json::to_string_pretty(&payload).expect("hypotheses serialize"))?;
            Ok(())
        }
        Cmd::Compare { common, jobs } => {
            let cfg = load_run_config(&common.config, &common.set)?;
            let lengths = (cfg.analysis.src_len, cfg.analysis.tgt_len);
            let mut reports = Vec::new();
            for arch in [Arch::Vanilla, Arch::Partialformer, Arch::VanillaPgffn] {
                let variant = derive_variant(&cfg.model, arch);
                let run = RunConfig { model: variant.clone(), ..cfg.clone() };
                let metrics = probe_metrics(&run, None, jobs)?;
                reports.push(AnalysisReport::build(&variant, Some(lengths), metrics));
            }
            print_comparison(&reports);
            let out = OutDir::new(common.out.as_deref())?;
            let payload = serde_json::json!({ "schema_version": 1, "reports": reports });
            out.write("compare.json", &serde_json::to_string_pretty(&payload).expect("reports serialize"))?;
            Ok(())
        }
    }
}

// ── subcommand helpers ──

/// The same model family at a different architecture: the vanilla variants
/// have no head scaling (heads pinned to d/d_k) and only `vanilla` keeps a
/// wide-FFN width.
pub fn derive_variant(base: &ModelConfig, arch: Arch) -> ModelConfig {
    let mut cfg = base.clone();
    cfg.arch = arch;
    match arch {
        Arch::Vanilla | Arch::VanillaPgffn => {
            cfg.h_enc = cfg.d / cfg.d_k;
            cfg.h_dec = cfg.d / cfg.d_k;
            if arch == Arch::VanillaPgffn {
                cfg.d_ffn = None;
            }
        }
        Arch::Partialformer => {
            cfg.d_ffn = None;
        }
    }
    cfg
}

struct OutDir(Option<PathBuf>);

impl OutDir {
    fn new(dir: Option<&Path>) -> Result<OutDir> {
        if let Some(d) = dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d.to_path_buf(), e))?;
        }
        Ok(OutDir(dir.map(Path::to_path_buf)))
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.0.as_ref().map(|d| d.join(name))
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        if let Some(path) = self.path(name) {
            fs::write(&path, contents).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

fn echo_config(cfg: &RunConfig) -> Result<String> {
    serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Format(format!("cannot serialize effective config: {e}")))
}

fn trunc_tag(truncated: bool) -> &'static str {
    if truncated {
        "  [truncated]"
    } else {
        ""
    }
}

fn parse_src(text: &str, vocab: usize) -> Result<Vec<usize>> {
    let ids: Vec<usize> = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("--src expects comma-separated ids, got {t:?}")))
        })
        .collect::<Result<_>>()?;
    if ids.is_empty() {
        return Err(Error::Config("--src must name at least one token".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
        return Err(Error::Config(format!("--src id {bad} is outside vocab_size = {vocab}")));
    }
    Ok(ids)
}

fn history_csv(history: &[crate::training::EvalRecord]) -> String {
    let mut lines = vec!["step,lr,loss,token_accuracy".to_string()];
    for r in history {
        lines.push(format!("{},{},{},{}", r.step, r.lr, r.loss, r.token_accuracy));
    }
    lines.join("\n") + "\n"
}

fn load_matching_checkpoint(path: Option<&Path>, expected: &ModelConfig) -> Result<Option<Vec<CheckpointEntry>>> {
    let Some(path) = path else { return Ok(None) };
    let (config, entries) = read_checkpoint(path)?;
    if &config != expected {
        return Err(Error::Config(format!(
            "checkpoint {} was written for a different model configuration",
            path.display()
        )));
    }
    Ok(Some(entries))
}

// ── behavioral probing ──

fn probe_examples(cfg: &RunConfig) -> Result<Vec<Example>> {
    let Some(task) = &cfg.task else { return Ok(Vec::new()) };
    if cfg.analysis.samples == 0 {
        return Ok(Vec::new());
    }
    let data = make_task(task)?;
    let n = cfg.analysis.samples.min(data.eval.len());
    Ok(data.eval.into_iter().take(n).collect())
}

fn probe_one(model: &Model, ex: &Example) -> Result<Probe> {
    let mut probe = Probe::default();
    let mut ctx = ForwardCtx::probed(&mut probe);
    if model.config.m_dec == 0 {
        model.encode(&encoder_input(&ex.src), &mut ctx)?;
    } else {
        let (dec_in, _) = decoder_io(&ex.tgt);
        model.forward(&encoder_input(&ex.src), &dec_in, &mut ctx)?;
    }
    Ok(probe)
}

fn metrics_from_probes(cfg: &ModelConfig, probes: &[Probe]) -> BehaviorMetrics {
    let heads: Vec<_> = probes.iter().flat_map(|p| p.head_outputs.iter().cloned()).collect();
    let states: Vec<_> = probes.iter().flat_map(|p| p.encoder_states.iter().cloned()).collect();
    let hidden: Vec<_> = probes
        .iter()
        .flat_map(|p| p.ffn_hidden.iter())
        .filter(|c| c.label.starts_with("encoder."))
        .cloned()
        .collect();
    let (d_output, zero_norm_heads) = head_diversity(&heads);
    let (uniformity, zero_variance_tokens) = token_uniformity(&states);
    let ffn = ffn_activation_stats(&hidden, encoder_ffn_param_count(cfg));
    BehaviorMetrics {
        samples: probes.len(),
        d_output,
        zero_norm_heads,
        token_uniformity: uniformity,
        zero_variance_tokens,
        ffn,
    }
}

/// Probe eval samples and compute the behavioral metrics, optionally in
/// parallel. Worker threads build their own model from the same config (and
/// optional checkpoint), so results are identical at any `--jobs`.
fn probe_metrics(cfg: &RunConfig, entries: Option<&[CheckpointEntry]>, jobs: usize) -> Result<Option<BehaviorMetrics>> {
    let examples = probe_examples(cfg)?;
    if examples.is_empty() {
        return Ok(None);
    }
    let build = |config: &ModelConfig| -> Result<Model> {
        let model = Model::new(config.clone())?;
        if let Some(entries) = entries {
            model.apply_entries(entries)?;
        }
        Ok(model)
    };
    let probes: Vec<Probe> = if jobs <= 1 || examples.len() == 1 {
        let model = build(&cfg.model)?;
        examples.iter().map(|ex| probe_one(&model, ex)).collect::<Result<_>>()?
    } else {
        let workers = jobs.min(examples.len());
        let mut indexed: Vec<(usize, Probe)> = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for w in 0..workers {
                let examples = &examples;
                let model_cfg = &cfg.model;
                let build = &build;
                handles.push(scope.spawn(move || -> Result<Vec<(usize, Probe)>> {
                    let model = build(model_cfg)?;
                    examples
                        .iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(i, ex)| probe_one(&model, ex).map(|p| (i, p)))
                        .collect()
                }));
            }
            let mut all = Vec::new();
            for h in handles {
                all.extend(h.join().expect("probe worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?;
        indexed.sort_by_key(|(i, _)| *i);
        indexed.into_iter().map(|(_, p)| p).collect()
    };
    Ok(Some(metrics_from_probes(&cfg.model, &probes)))
}

// ── printing ──

/// 61532160 → "61,532,160".
fn fmt_count(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// 61532160 → "61.5M"; 9965960192 → "9.97B".
fn fmt_human(n: u64) -> String {
    let n = n as f64;
    for (scale, suffix) in [(1e9, "B"), (1e6, "M"), (1e3, "K")] {
        if n >= scale {
            return format!("{:.3}{suffix}", n / scale)
                .trim_end_matches('0')
                .trim_end_matches('.')
                .to_string();
        }
    }
    format!("{n:.0}")
}

fn print_param_table(report: &AnalysisReport) {
    let p = &report.params;
    let cfg = &report.config;
    println!(
        "{} {}-{}  d={} d_k={} heads {}-{}",
        cfg.arch.as_str(),
        cfg.n_enc,
        cfg.m_dec,
        cfg.d,
        cfg.d_k,
        cfg.h_enc,
        cfg.h_dec
    );
    println!("parameters        {:>15}  ({})", fmt_count(p.total as u64), fmt_human(p.total as u64));
    println!("  embedding       {:>15}", fmt_count(p.embedding as u64));
    println!("  global attn     {:>15}", fmt_count(p.global_attention as u64));
    println!(
        "  encoder         {:>15}  ({} layers x {})",
        fmt_count(p.encoder as u64),
        cfg.n_enc,
        fmt_count(p.per_encoder_layer as u64)
    );
    println!(
        "  decoder         {:>15}  ({} layers x {})",
        fmt_count(p.decoder as u64),
        cfg.m_dec,
        fmt_count(p.per_decoder_layer as u64)
    );
}

fn print_macs_table(report: &AnalysisReport) {
    let Some(m) = &report.macs else { return };
    println!("MACs @ src={} tgt={}  [{}]", m.src_len, m.tgt_len, m.convention);
    println!("  total           {:>15}  ({})", fmt_count(m.total), fmt_human(m.total));
    println!("  encoder         {:>15}", fmt_count(m.encoder));
    println!("  decoder         {:>15}", fmt_count(m.decoder));
    println!("  global attn     {:>15}", fmt_count(m.global_attention));
    println!("  output proj     {:>15}", fmt_count(m.output_projection));
}

fn print_metrics(report: &AnalysisReport) {
    let Some(m) = &report.metrics else { return };
    println!("behavioral metrics over {} samples", m.samples);
    if let Some(d) = m.d_output {
        println!("  D_output          {d:.4}  (zero-norm heads: {})", m.zero_norm_heads);
    }
    if let Some(u) = m.token_uniformity {
        println!("  token uniformity  {u:.4}  (zero-variance tokens: {})", m.zero_variance_tokens);
    }
    if let Some(f) = &m.ffn {
        println!(
            "  n_act {:.1} / hidden_dim {}  R_act {:.3}  eta_ffn {:.5}",
            f.n_act, f.hidden_dim, f.r_act, f.eta_ffn
        );
    }
}

fn print_comparison(reports: &[AnalysisReport]) {
    println!(
        "{:<16} {:>15} {:>15} {:>9} {:>11} {:>8}",
        "architecture", "params", "macs", "D_output", "uniformity", "n_act"
    );
    for r in reports {
        let macs = r.macs.as_ref().map(|m| fmt_count(m.total)).unwrap_or_default();
        let (d_out, uni, n_act) = match &r.metrics {
            Some(m) => (
                m.d_output.map(|v| format!("{v:.4}")).unwrap_or_default(),
                m.token_uniformity.map(|v| format!("{v:.4}")).unwrap_or_default(),
                m.ffn.as_ref().map(|f| format!("{:.1}", f.n_act)).unwrap_or_default(),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        println!(
            "{:<16} {:>15} {:>15} {:>9} {:>11} {:>8}",
            r.config.arch.as_str(),
            fmt_count(r.params.total as u64),
            macs,
            d_out,
            uni,
            n_act
        );
    }
}

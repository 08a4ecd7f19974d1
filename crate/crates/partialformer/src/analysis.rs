//! Model accounting and behavioral metrics: closed-form parameter counts,
//! multiply–accumulate (MAC) estimates for a translation forward pass, and
//! statistics computed from probed activations (head diversity, token
//! uniformity, FFN activation rates). Results are packaged into a
//! serializable report with JSON and CSV renderings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Arch, HeadCapture, HiddenCapture, ModelConfig, StateCapture};
use crate::pgffn::PgffnParams;

/// How MACs are measured, recorded in every report:
/// the encoder runs once over the source; the decoder is re-run from scratch
/// for every prefix length `1..=tgt_len` (no incremental caching, cross
/// projections and global logits included each step); the output projection
/// covers the whole prefix each step; only matrix multiplies are counted.
pub const MACS_CONVENTION: &str = "encoder-once; decoder-full-recompute-per-step; matmul-only";

/// Current report schema version.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

// ── parameter counting ──

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub total: usize,
    pub embedding: usize,
    pub global_attention: usize,
    pub encoder: usize,
    pub decoder: usize,
    pub per_encoder_layer: usize,
    pub per_decoder_layer: usize,
}

fn expansion_params(h_int: usize, h: usize) -> usize {
    let h_mid = 2 * h;
    h_int * h_mid + h_mid + h_mid * h + h
}

fn scaling_active(d: usize, d_k: usize, h: usize) -> bool {
    let h_int = d / d_k;
    h != h_int || h * d_k != d
}

fn attn_bundle_params(d: usize, d_k: usize, h: usize) -> usize {
    let h_int = d / d_k;
    let mut p = 2 * d * (h_int * d_k) + d * (h * d_k) + (h * d_k) * d;
    if scaling_active(d, d_k, h) {
        p += expansion_params(h_int, h);
    }
    p
}

fn unified_sublayer_params(d: usize, d_k: usize, h: usize, r: usize) -> usize {
    attn_bundle_params(d, d_k, h) + PgffnParams::small_ffn_param_count(d_k, r) + h * d * d_k + 2 * d
}

fn wide_ffn_params(d: usize, d_ffn: usize) -> usize {
    2 * d * d_ffn + d_ffn + d
}

fn per_encoder_layer_params(cfg: &ModelConfig) -> usize {
    match cfg.arch {
        Arch::Vanilla => {
            attn_bundle_params(cfg.d, cfg.d_k, cfg.h_enc)
                + 2 * cfg.d
                + wide_ffn_params(cfg.d, cfg.d_ffn_or_default())
                + 2 * cfg.d
        }
        Arch::Partialformer | Arch::VanillaPgffn => {
            unified_sublayer_params(cfg.d, cfg.d_k, cfg.h_enc, cfg.r_enc)
        }
    }
}

fn per_decoder_layer_params(cfg: &ModelConfig) -> usize {
    match cfg.arch {
        Arch::Vanilla => {
            2 * (attn_bundle_params(cfg.d, cfg.d_k, cfg.h_dec) + 2 * cfg.d)
                + wide_ffn_params(cfg.d, cfg.d_ffn_or_default())
                + 2 * cfg.d
        }
        Arch::Partialformer => 2 * unified_sublayer_params(cfg.d, cfg.d_k, cfg.h_dec, cfg.r_dec),
        Arch::VanillaPgffn => {
            attn_bundle_params(cfg.d, cfg.d_k, cfg.h_dec)
                + 2 * cfg.d
                + unified_sublayer_params(cfg.d, cfg.d_k, cfg.h_dec, cfg.r_dec)
        }
    }
}

/// Closed-form parameter count; matches `Model::param_count` exactly.
pub fn count_params(cfg: &ModelConfig) -> ParamBreakdown {
    let tables = if cfg.share_embeddings { 1 } else { 3 };
    let embedding = tables * cfg.vocab_size * cfg.d;
    let global_attention = if cfg.arch == Arch::Partialformer {
        let enc = 2 * cfg.d * (cfg.h_enc * cfg.d_k);
        let dec = if cfg.m_dec > 0 { 2 * (2 * cfg.d * (cfg.h_dec * cfg.d_k)) } else { 0 };
        enc + dec
    } else {
        0
    };
    let per_encoder_layer = per_encoder_layer_params(cfg);
    let per_decoder_layer = if cfg.m_dec > 0 { per_decoder_layer_params(cfg) } else { 0 };
    let encoder = cfg.n_enc * per_encoder_layer + 2 * cfg.d;
    let decoder = cfg.m_dec * per_decoder_layer + if cfg.m_dec > 0 { 2 * cfg.d } else { 0 };
    ParamBreakdown {
        total: embedding + global_attention + encoder + decoder,
        embedding,
        global_attention,
        encoder,
        decoder,
        per_encoder_layer,
        per_decoder_layer,
    }
}

// ── MAC counting ──

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacsBreakdown {
    pub convention: String,
    pub src_len: usize,
    pub tgt_len: usize,
    pub total: u64,
    pub encoder: u64,
    pub decoder: u64,
    pub global_attention: u64,
    pub output_projection: u64,
    pub per_encoder_layer: u64,
    /// One decoder layer, summed over all prefix steps.
    pub per_decoder_layer: u64,
}

fn unified_sublayer_macs(cfg: &ModelConfig, h: usize, r: usize, t_q: usize, t_kv: usize) -> u64 {
    let (d, d_k) = (cfg.d as u64, cfg.d_k as u64);
    let h_int = (cfg.d / cfg.d_k) as u64;
    let h = h as u64;
    let (t_q, t_kv, r) = (t_q as u64, t_kv as u64, r as u64);
    let mut m = 0;
    m += t_q * d * (h_int * d_k); // Q
    m += t_kv * d * (h_int * d_k); // K
    m += t_kv * d * (h * d_k); // V
    m += h_int * t_q * t_kv * d_k; // scores
    if scaling_active(cfg.d, cfg.d_k, h as usize) {
        m += t_q * t_kv * (2 * h) * (h_int + h); // head expansion MLP
    }
    m += h * t_q * t_kv * d_k; // aggregate
    m += t_q * (h * d_k) * d; // output fusion
    m += h * t_q * 2 * d_k * (r * d_k); // shared small FFN over every head row
    m += h * t_q * d * d_k; // gates
    m
}

fn vanilla_attn_macs(cfg: &ModelConfig, t_q: usize, t_kv: usize) -> u64 {
    let d = cfg.d as u64;
    let (t_q, t_kv) = (t_q as u64, t_kv as u64);
    t_q * d * d + 2 * t_kv * d * d + 2 * t_q * t_kv * d + t_q * d * d
}

fn wide_ffn_macs(cfg: &ModelConfig, t: usize) -> u64 {
    2 * (t as u64) * (cfg.d as u64) * (cfg.d_ffn_or_default() as u64)
}

fn global_site_macs(cfg: &ModelConfig, h: usize, t_q: usize, t_kv: usize) -> u64 {
    let (d, d_k, h) = (cfg.d as u64, cfg.d_k as u64, h as u64);
    let (t_q, t_kv) = (t_q as u64, t_kv as u64);
    (t_q + t_kv) * d * (h * d_k) + h * t_q * t_kv * d_k
}

fn encoder_layer_macs(cfg: &ModelConfig, s: usize) -> u64 {
    match cfg.arch {
        Arch::Vanilla => vanilla_attn_macs(cfg, s, s) + wide_ffn_macs(cfg, s),
        Arch::Partialformer | Arch::VanillaPgffn => {
            unified_sublayer_macs(cfg, cfg.h_enc, cfg.r_enc, s, s)
        }
    }
}

fn decoder_layer_step_macs(cfg: &ModelConfig, t: usize, s: usize) -> u64 {
    match cfg.arch {
        Arch::Vanilla => {
            vanilla_attn_macs(cfg, t, t) + vanilla_attn_macs(cfg, t, s) + wide_ffn_macs(cfg, t)
        }
        Arch::Partialformer => {
            unified_sublayer_macs(cfg, cfg.h_dec, cfg.r_dec, t, t)
                + unified_sublayer_macs(cfg, cfg.h_dec, cfg.r_dec, t, s)
        }
        Arch::VanillaPgffn => {
            vanilla_attn_macs(cfg, t, t) + unified_sublayer_macs(cfg, cfg.h_dec, cfg.r_dec, t, s)
        }
    }
}

/// Closed-form MAC estimate for translating one `src_len → tgt_len` pair
/// under [`MACS_CONVENTION`].
pub fn count_macs(cfg: &ModelConfig, src_len: usize, tgt_len: usize) -> MacsBreakdown {
    assert!(src_len >= 1, "count_macs needs at least one source token");
    let per_encoder_layer = encoder_layer_macs(cfg, src_len);
    let encoder = cfg.n_enc as u64 * per_encoder_layer;

    let mut global_attention = 0u64;
    if cfg.arch == Arch::Partialformer {
        global_attention += global_site_macs(cfg, cfg.h_enc, src_len, src_len);
    }

    let steps = if cfg.m_dec > 0 { tgt_len } else { 0 };
    let mut per_decoder_layer = 0u64;
    let mut output_projection = 0u64;
    for t in 1..=steps {
        per_decoder_layer += decoder_layer_step_macs(cfg, t, src_len);
        output_projection += (t as u64) * (cfg.d as u64) * (cfg.vocab_size as u64);
        if cfg.arch == Arch::Partialformer {
            global_attention += global_site_macs(cfg, cfg.h_dec, t, t);
            global_attention += global_site_macs(cfg, cfg.h_dec, t, src_len);
        }
    }
    let decoder = cfg.m_dec as u64 * per_decoder_layer;

    MacsBreakdown {
        convention: MACS_CONVENTION.to_string(),
        src_len,
        tgt_len,
        total: encoder + decoder + global_attention + output_projection,
        encoder,
        decoder,
        global_attention,
        output_projection,
        per_encoder_layer,
        per_decoder_layer,
    }
}

// ── behavioral metrics ──

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Head-output diversity `exp(-(1/H²)·Σᵢⱼ|cos(Oⁱ, Oʲ)|)` per capture
/// (diagonal included), averaged over captures. Zero-norm heads contribute
/// nothing to the sum but `H²` stays in the denominator; their count is
/// returned for diagnostics.
pub fn head_diversity(captures: &[HeadCapture]) -> (Option<f64>, usize) {
    let mut values = Vec::new();
    let mut zero_norm_heads = 0usize;
    for c in captures {
        let len = c.t * c.d_k;
        let heads: Vec<&[f64]> = (0..c.h).map(|i| &c.data[i * len..(i + 1) * len]).collect();
        let norms: Vec<f64> = heads.iter().map(|h| dot(h, h).sqrt()).collect();
        zero_norm_heads += norms.iter().filter(|&&n| n == 0.0).count();
        let mut sum = 0.0;
        for i in 0..c.h {
            for j in 0..c.h {
                if norms[i] > 0.0 && norms[j] > 0.0 {
                    sum += (dot(heads[i], heads[j]) / (norms[i] * norms[j])).abs();
                }
            }
        }
        values.push((-sum / (c.h * c.h) as f64).exp());
    }
    if values.is_empty() {
        (None, zero_norm_heads)
    } else {
        (Some(values.iter().sum::<f64>() / values.len() as f64), zero_norm_heads)
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some(cov / (va.sqrt() * vb.sqrt()))
    }
}

/// Mean Pearson correlation over distinct token pairs of each captured state
/// (higher = token representations collapsing toward each other), averaged
/// over captures. Zero-variance tokens are skipped and counted.
pub fn token_uniformity(captures: &[StateCapture]) -> (Option<f64>, usize) {
    let mut values = Vec::new();
    let mut zero_variance_tokens = 0usize;
    for c in captures {
        let rows: Vec<&[f64]> = (0..c.t).map(|i| &c.data[i * c.d..(i + 1) * c.d]).collect();
        let valid: Vec<bool> = rows
            .iter()
            .map(|r| {
                let m = r.iter().sum::<f64>() / c.d as f64;
                r.iter().any(|&x| x != m)
            })
            .collect();
        zero_variance_tokens += valid.iter().filter(|v| !**v).count();
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..c.t {
            for j in i + 1..c.t {
                if valid[i] && valid[j] {
                    if let Some(r) = pearson(rows[i], rows[j]) {
                        sum += r;
                        pairs += 1;
                    }
                }
            }
        }
        if pairs > 0 {
            values.push(sum / pairs as f64);
        }
    }
    if values.is_empty() {
        (None, zero_variance_tokens)
    } else {
        (Some(values.iter().sum::<f64>() / values.len() as f64), zero_variance_tokens)
    }
}

/// FFN activation statistics over hidden captures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfnActivation {
    /// Mean number of strictly positive hidden units per token (all heads of
    /// a token concatenated).
    pub n_act: f64,
    /// Per-token hidden width `heads · width`.
    pub hidden_dim: usize,
    /// `n_act / hidden_dim`.
    pub r_act: f64,
    /// `n_act / ffn_param_count`: activated units per FFN parameter.
    pub eta_ffn: f64,
    pub tokens: usize,
}

/// Compute activation statistics from post-ReLU hidden captures. All
/// captures must share one geometry (same `heads · width`), as encoder
/// layers of one model do. `ffn_param_count` is the parameter count of the
/// FFN the captures came from (the shared small FFN, or the wide FFN).
pub fn ffn_activation_stats(captures: &[HiddenCapture], ffn_param_count: usize) -> Option<FfnActivation> {
    let first = captures.first()?;
    let hidden_dim = first.heads * first.width;
    let mut counts = Vec::new();
    for c in captures {
        assert_eq!(c.heads * c.width, hidden_dim, "mixed hidden geometries in one statistic");
        for ti in 0..c.tokens {
            let mut positive = 0usize;
            for hi in 0..c.heads {
                let row = (hi * c.tokens + ti) * c.width;
                positive += c.data[row..row + c.width].iter().filter(|&&v| v > 0.0).count();
            }
            counts.push(positive);
        }
    }
    let tokens = counts.len();
    let n_act = counts.iter().sum::<usize>() as f64 / tokens as f64;
    Some(FfnActivation {
        n_act,
        hidden_dim,
        r_act: n_act / hidden_dim as f64,
        eta_ffn: n_act / ffn_param_count as f64,
        tokens,
    })
}

/// Parameter count of the FFN inside one encoder layer (what `eta_ffn`
/// normalizes by).
pub fn encoder_ffn_param_count(cfg: &ModelConfig) -> usize {
    match cfg.arch {
        Arch::Vanilla => wide_ffn_params(cfg.d, cfg.d_ffn_or_default()),
        Arch::Partialformer | Arch::VanillaPgffn => {
            PgffnParams::small_ffn_param_count(cfg.d_k, cfg.r_enc)
        }
    }
}

// ── reports ──

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorMetrics {
    /// Number of evaluation sequences the probes came from.
    pub samples: usize,
    pub d_output: Option<f64>,
    pub zero_norm_heads: usize,
    pub token_uniformity: Option<f64>,
    pub zero_variance_tokens: usize,
    pub ffn: Option<FfnActivation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub section: String,
    pub index: usize,
    pub params: usize,
    pub macs: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub params: ParamBreakdown,
    pub macs: Option<MacsBreakdown>,
    pub metrics: Option<BehaviorMetrics>,
    pub layers: Vec<LayerRow>,
}

impl AnalysisReport {
    /// Assemble a report from the closed-form counts; `lengths` adds a MAC
    /// estimate, `metrics` attaches probe-derived statistics.
    pub fn build(cfg: &ModelConfig, lengths: Option<(usize, usize)>, metrics: Option<BehaviorMetrics>) -> AnalysisReport {
        let params = count_params(cfg);
        let macs = lengths.map(|(s, t)| count_macs(cfg, s, t));
        let mut layers = Vec::new();
        for i in 0..cfg.n_enc {
            layers.push(LayerRow {
                section: "encoder".into(),
                index: i,
                params: params.per_encoder_layer,
                macs: macs.as_ref().map(|m| m.per_encoder_layer),
            });
        }
        for i in 0..cfg.m_dec {
            layers.push(LayerRow {
                section: "decoder".into(),
                index: i,
                params: params.per_decoder_layer,
                macs: macs.as_ref().map(|m| m.per_decoder_layer),
            });
        }
        AnalysisReport {
            schema_version: REPORT_SCHEMA_VERSION,
            config: cfg.clone(),
            params,
            macs,
            metrics,
            layers,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<AnalysisReport> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("invalid report JSON: {e}")))
    }

    /// Per-layer table as CSV: `section,layer,params,macs` with an empty
    /// MACs cell when no lengths were given.
    pub fn to_csv(&self) -> String {
        let mut lines = vec!["section,layer,params,macs".to_string()];
        for row in &self.layers {
            let macs = row.macs.map(|m| m.to_string()).unwrap_or_default();
            lines.push(format!("{},{},{},{}", row.section, row.index, row.params, macs));
        }
        lines.join("\n") + "\n"
    }
}

/// Parse the CSV produced by [`AnalysisReport::to_csv`] back into rows.
pub fn parse_layer_csv(text: &str) -> Result<Vec<LayerRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("section,layer,params,macs") => {}
        other => {
            return Err(Error::Format(format!("unexpected CSV header: {other:?}")));
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!("CSV line {}: expected 4 fields", lineno + 2)));
        }
        let bad = |what: &str| Error::Format(format!("CSV line {}: invalid {what}", lineno + 2));
        rows.push(LayerRow {
            section: fields[0].to_string(),
            index: fields[1].parse().map_err(|_| bad("layer index"))?,
            params: fields[2].parse().map_err(|_| bad("parameter count"))?,
            macs: if fields[3].is_empty() {
                None
            } else {
                Some(fields[3].parse().map_err(|_| bad("MAC count"))?)
            },
        });
    }
    Ok(rows)
}

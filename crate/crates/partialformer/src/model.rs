//! Complete encoder–decoder models: configuration, construction, forward
//! passes, and checkpoint serialization.
//!
//! Three architectures share one code path, differing only in layer makeup:
//!
//! * `vanilla` — pre-norm Transformer: self-attention sub-layer plus a wide
//!   FFN sub-layer per encoder layer; self, cross and FFN sub-layers per
//!   decoder layer.
//! * `partialformer` — every sub-layer is a *unified* sub-layer: attention
//!   whose head outputs pass through a shared small FFN with per-head gates
//!   before fusion, plus per-site global logits shared across layers and
//!   optional head scaling.
//! * `vanilla_pgffn` — unified sub-layers in the encoder (without global
//!   logits or head scaling) and, in the decoder, a plain self-attention
//!   sub-layer followed by a unified cross-attention sub-layer; no separate
//!   FFN sub-layers anywhere.
//!
//! All sub-layers are pre-norm with a residual connection, and each stack
//! ends with one final layer norm. Inputs are embedded as `E[token]·√d`
//! plus sinusoidal position encodings.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{
    attend, attention_logits, causal_mask, compute_global_logits, expand_heads, project_qkv,
    AttentionBundle, GlobalLogits, GlobalProjection, HeadSpec, Site,
};
use crate::error::{Error, Result};
use crate::pgffn::{fuse_heads, pg_ffn, PgffnParams};
use crate::rng::Rng;
use crate::tensor::{Activation, Tensor};

/// Epsilon inside every layer norm.
pub const LN_EPS: f64 = 1e-6;

/// Magic bytes opening every checkpoint file (format version 01).
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PFCKPT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Vanilla,
    Partialformer,
    VanillaPgffn,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Vanilla => "vanilla",
            Arch::Partialformer => "partialformer",
            Arch::VanillaPgffn => "vanilla_pgffn",
        }
    }
}

fn default_sigma() -> Activation {
    Activation::Relu
}
fn default_r_enc() -> usize {
    4
}
fn default_r_dec() -> usize {
    2
}
fn default_true() -> bool {
    true
}
fn default_max_len() -> usize {
    128
}
fn default_dropout() -> f64 {
    0.1
}
fn default_seed() -> u64 {
    1
}

/// Everything needed to build a model. Serializable so that runs can be
/// described by JSON files and echoed back into reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Encoder depth.
    pub n_enc: usize,
    /// Decoder depth; zero builds an encoder-only model.
    pub m_dec: usize,
    pub d: usize,
    pub d_k: usize,
    pub h_enc: usize,
    pub h_dec: usize,
    #[serde(default = "default_sigma")]
    pub gate_sigma: Activation,
    #[serde(default = "default_r_enc")]
    pub r_enc: usize,
    #[serde(default = "default_r_dec")]
    pub r_dec: usize,
    /// Wide-FFN hidden width; `vanilla` only. Defaults to `4·d`.
    #[serde(default)]
    pub d_ffn: Option<usize>,
    pub vocab_size: usize,
    #[serde(default = "default_true")]
    pub share_embeddings: bool,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Add the global logits to the attention weights after the softmax
    /// instead of to the logits before it.
    #[serde(default)]
    pub a_g_post_softmax: bool,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_dropout")]
    pub attn_dropout: f64,
    #[serde(default = "default_dropout")]
    pub relu_dropout: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl ModelConfig {
    /// Effective wide-FFN width for the vanilla architecture.
    pub fn d_ffn_or_default(&self) -> usize {
        self.d_ffn.unwrap_or(4 * self.d)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_enc == 0 {
            return err("n_enc must be at least 1".into());
        }
        if self.d == 0 || self.d_k == 0 || self.h_enc == 0 || self.h_dec == 0 {
            return err("d, d_k, h_enc and h_dec must be positive".into());
        }
        if self.d % self.d_k != 0 {
            return err(format!("d = {} must be a multiple of d_k = {}", self.d, self.d_k));
        }
        if self.vocab_size < 4 {
            return err(format!(
                "vocab_size = {} is too small; 4 ids are reserved for pad/bos/eos/unk",
                self.vocab_size
            ));
        }
        if self.max_len == 0 {
            return err("max_len must be positive".into());
        }
        if self.r_enc == 0 || self.r_dec == 0 {
            return err("r_enc and r_dec must be at least 1".into());
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("attn_dropout", self.attn_dropout),
            ("relu_dropout", self.relu_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return err(format!("{name} = {p} must lie in [0, 1)"));
            }
        }
        match self.arch {
            Arch::Vanilla | Arch::VanillaPgffn => {
                let h_int = self.d / self.d_k;
                if self.h_enc != h_int || self.h_dec != h_int {
                    return err(format!(
                        "{} has no head scaling: h_enc and h_dec must equal d/d_k = {}",
                        self.arch.as_str(),
                        h_int
                    ));
                }
                if self.arch == Arch::VanillaPgffn && self.d_ffn.is_some() {
                    return err("d_ffn only applies to the vanilla architecture".into());
                }
            }
            Arch::Partialformer => {
                if self.d_ffn.is_some() {
                    return err("d_ffn only applies to the vanilla architecture".into());
                }
            }
        }
        if self.arch == Arch::Vanilla && self.d_ffn_or_default() == 0 {
            return err("d_ffn must be positive".into());
        }
        Ok(())
    }

    fn enc_spec(&self) -> HeadSpec {
        HeadSpec::new(self.d, self.d_k, self.h_enc)
    }

    fn dec_spec(&self) -> HeadSpec {
        HeadSpec::new(self.d, self.d_k, self.h_dec)
    }
}

// ── building blocks ──

struct Norm {
    gain: Tensor,
    bias: Tensor,
}

impl Norm {
    fn init(d: usize) -> Norm {
        Norm {
            gain: Tensor::filled_param(vec![d], 1.0),
            bias: Tensor::zeros_param(vec![d]),
        }
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gain, &self.bias, LN_EPS)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

struct WideFfn {
    w1: Tensor, // [d, d_ffn]
    b1: Tensor,
    w2: Tensor, // [d_ffn, d]
    b2: Tensor,
}

impl WideFfn {
    fn init(d: usize, d_ffn: usize, rng: &mut Rng) -> WideFfn {
        WideFfn {
            w1: Tensor::xavier_param(d, d_ffn, rng),
            b1: Tensor::zeros_param(vec![d_ffn]),
            w2: Tensor::xavier_param(d_ffn, d, rng),
            b2: Tensor::zeros_param(vec![d]),
        }
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w1"), self.w1.clone()));
        out.push((format!("{prefix}.b1"), self.b1.clone()));
        out.push((format!("{prefix}.w2"), self.w2.clone()));
        out.push((format!("{prefix}.b2"), self.b2.clone()));
    }
}

struct UnifiedSublayer {
    attn: AttentionBundle,
    pgffn: PgffnParams,
    norm: Norm,
}

impl UnifiedSublayer {
    fn init(site: Site, spec: HeadSpec, r: usize, sigma: Activation, rng: &mut Rng) -> UnifiedSublayer {
        UnifiedSublayer {
            attn: AttentionBundle::init(site, spec, rng),
            pgffn: PgffnParams::init(spec.h, spec.d, spec.d_k, r, sigma, rng),
            norm: Norm::init(spec.d),
        }
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.attn.collect_params(&format!("{prefix}.attn"), out);
        self.pgffn.collect_params(&format!("{prefix}.pgffn"), out);
        self.norm.collect(&format!("{prefix}.norm"), out);
    }
}

struct VanillaAttnSublayer {
    attn: AttentionBundle,
    norm: Norm,
}

impl VanillaAttnSublayer {
    fn init(site: Site, spec: HeadSpec, rng: &mut Rng) -> VanillaAttnSublayer {
        VanillaAttnSublayer {
            attn: AttentionBundle::init(site, spec, rng),
            norm: Norm::init(spec.d),
        }
    }
}

struct VanillaFfnSublayer {
    ffn: WideFfn,
    norm: Norm,
}

enum EncoderLayer {
    Vanilla {
        attn: VanillaAttnSublayer,
        ffn: VanillaFfnSublayer,
    },
    Unified(UnifiedSublayer),
}

enum DecoderLayer {
    Vanilla {
        self_attn: VanillaAttnSublayer,
        cross_attn: VanillaAttnSublayer,
        ffn: VanillaFfnSublayer,
    },
    Unified {
        self_sub: UnifiedSublayer,
        cross_sub: UnifiedSublayer,
    },
    Mixed {
        self_attn: VanillaAttnSublayer,
        cross_sub: UnifiedSublayer,
    },
}

struct Embeddings {
    shared: Option<Tensor>,  // [vocab, d]
    encoder: Option<Tensor>, // [vocab, d] when untied
    decoder: Option<Tensor>,
    output: Option<Tensor>,
    positions: Vec<f64>, // [max_len · d] sinusoidal table
}

#[derive(Clone, Copy)]
enum EmbSide {
    Encoder,
    Decoder,
}

impl Embeddings {
    fn table(&self, side: EmbSide) -> &Tensor {
        match (&self.shared, side) {
            (Some(t), _) => t,
            (None, EmbSide::Encoder) => self.encoder.as_ref().unwrap(),
            (None, EmbSide::Decoder) => self.decoder.as_ref().unwrap(),
        }
    }

    fn output_table(&self) -> &Tensor {
        self.shared.as_ref().or(self.output.as_ref()).unwrap()
    }
}

/// `pe[pos, 2i] = sin(pos / 10000^(2i/d))`, `pe[pos, 2i+1] = cos(...)`.
fn sinusoidal_positions(max_len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_len * d];
    for pos in 0..max_len {
        let mut i = 0;
        while i < d {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            pe[pos * d + i] = angle.sin();
            if i + 1 < d {
                pe[pos * d + i + 1] = angle.cos();
            }
            i += 2;
        }
    }
    pe
}

struct Globals {
    enc: Option<GlobalProjection>,
    dec: Option<GlobalProjection>,
    cross: Option<GlobalProjection>,
}

// ── forward-pass plumbing ──

/// Per-head attention outputs captured for the diversity metrics
/// (post-gating, pre-fusion for unified sub-layers).
#[derive(Clone)]
pub struct HeadCapture {
    pub label: String,
    pub h: usize,
    pub t: usize,
    pub d_k: usize,
    pub data: Vec<f64>,
}

/// Post-ReLU FFN hidden activations. For unified sub-layers `heads > 1` and
/// the rows are grouped head-major: row `hi·tokens + ti`.
#[derive(Clone)]
pub struct HiddenCapture {
    pub label: String,
    pub heads: usize,
    pub tokens: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Encoder state after one layer, `[t, d]` row-major.
#[derive(Clone)]
pub struct StateCapture {
    pub label: String,
    pub t: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

/// Intermediate values copied out of a forward pass on request.
#[derive(Default)]
pub struct Probe {
    pub head_outputs: Vec<HeadCapture>,
    pub ffn_hidden: Vec<HiddenCapture>,
    pub encoder_states: Vec<StateCapture>,
}

/// Mutable state threaded through a forward pass: training mode (enables
/// dropout, requires an RNG) and an optional probe.
pub struct ForwardCtx<'a> {
    pub training: bool,
    pub rng: Option<&'a mut Rng>,
    pub probe: Option<&'a mut Probe>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> ForwardCtx<'static> {
        ForwardCtx { training: false, rng: None, probe: None }
    }

    pub fn training(rng: &'a mut Rng) -> ForwardCtx<'a> {
        ForwardCtx { training: true, rng: Some(rng), probe: None }
    }

    pub fn probed(probe: &'a mut Probe) -> ForwardCtx<'a> {
        ForwardCtx { training: false, rng: None, probe: Some(probe) }
    }

    fn drop(&mut self, x: &Tensor, rate: f64) -> Tensor {
        if self.training && rate > 0.0 {
            let rng = self.rng.as_mut().expect("training forward pass needs an RNG");
            x.dropout(rate, rng)
        } else {
            x.clone()
        }
    }

    fn capture_heads(&mut self, label: &str, heads: &Tensor) {
        if let Some(p) = self.probe.as_deref_mut() {
            let s = heads.shape();
            p.head_outputs.push(HeadCapture {
                label: label.to_string(),
                h: s[0],
                t: s[1],
                d_k: s[2],
                data: heads.data_clone(),
            });
        }
    }

    fn capture_state(&mut self, label: &str, x: &Tensor) {
        if let Some(p) = self.probe.as_deref_mut() {
            let s = x.shape();
            p.encoder_states.push(StateCapture {
                label: label.to_string(),
                t: s[0],
                d: s[1],
                data: x.data_clone(),
            });
        }
    }
}

/// What [`Model::encode`] hands to the decoder: the final encoder states and
/// the embedding-level representation the cross-site global logits need.
pub struct EncodeResult {
    pub output: Tensor,
    pub embedded: Tensor,
}

impl fmt::Debug for EncodeResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncodeResult").field("shape", &self.output.shape()).finish_non_exhaustive()
    }
}

// ── the model ──

pub struct Model {
    pub config: ModelConfig,
    emb: Embeddings,
    globals: Globals,
    enc_layers: Vec<EncoderLayer>,
    enc_final_norm: Norm,
    dec_layers: Vec<DecoderLayer>,
    dec_final_norm: Option<Norm>,
    registry: Vec<(String, Tensor)>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = Rng::from_seed(config.seed);
        let mut reg: Vec<(String, Tensor)> = Vec::new();
        let (v, d) = (config.vocab_size, config.d);

        let emb = if config.share_embeddings {
            let shared = Tensor::xavier_param(v, d, &mut rng);
            reg.push(("embedding.shared".into(), shared.clone()));
            Embeddings {
                shared: Some(shared),
                encoder: None,
                decoder: None,
                output: None,
                positions: sinusoidal_positions(config.max_len, d),
            }
        } else {
            let encoder = Tensor::xavier_param(v, d, &mut rng);
            let decoder = Tensor::xavier_param(v, d, &mut rng);
            let output = Tensor::xavier_param(v, d, &mut rng);
            reg.push(("embedding.encoder".into(), encoder.clone()));
            reg.push(("embedding.decoder".into(), decoder.clone()));
            reg.push(("embedding.output".into(), output.clone()));
            Embeddings {
                shared: None,
                encoder: Some(encoder),
                decoder: Some(decoder),
                output: Some(output),
                positions: sinusoidal_positions(config.max_len, d),
            }
        };

        let globals = if config.arch == Arch::Partialformer {
            let enc = GlobalProjection::init(Site::EncoderSelf, d, config.h_enc, config.d_k, &mut rng);
            enc.collect_params("a_g.encoder_self", &mut reg);
            let (dec, cross) = if config.m_dec > 0 {
                let dec = GlobalProjection::init(Site::DecoderSelf, d, config.h_dec, config.d_k, &mut rng);
                dec.collect_params("a_g.decoder_self", &mut reg);
                let cross = GlobalProjection::init(Site::Cross, d, config.h_dec, config.d_k, &mut rng);
                cross.collect_params("a_g.cross", &mut reg);
                (Some(dec), Some(cross))
            } else {
                (None, None)
            };
            Globals { enc: Some(enc), dec, cross }
        } else {
            Globals { enc: None, dec: None, cross: None }
        };

        let mut enc_layers = Vec::with_capacity(config.n_enc);
        for i in 0..config.n_enc {
            let prefix = format!("encoder.layer.{i}");
            match config.arch {
                Arch::Vanilla => {
                    let attn = VanillaAttnSublayer::init(Site::EncoderSelf, config.enc_spec(), &mut rng);
                    attn.attn.collect_params(&format!("{prefix}.attn"), &mut reg);
                    attn.norm.collect(&format!("{prefix}.attn_norm"), &mut reg);
                    let ffn = VanillaFfnSublayer {
                        ffn: WideFfn::init(d, config.d_ffn_or_default(), &mut rng),
                        norm: Norm::init(d),
                    };
                    ffn.ffn.collect(&format!("{prefix}.ffn"), &mut reg);
                    ffn.norm.collect(&format!("{prefix}.ffn_norm"), &mut reg);
                    enc_layers.push(EncoderLayer::Vanilla { attn, ffn });
                }
                Arch::Partialformer | Arch::VanillaPgffn => {
                    let sub = UnifiedSublayer::init(
                        Site::EncoderSelf,
                        config.enc_spec(),
                        config.r_enc,
                        config.gate_sigma,
                        &mut rng,
                    );
                    sub.collect(&prefix, &mut reg);
                    enc_layers.push(EncoderLayer::Unified(sub));
                }
            }
        }
        let enc_final_norm = Norm::init(d);
        enc_final_norm.collect("encoder.final_norm", &mut reg);

        let mut dec_layers = Vec::with_capacity(config.m_dec);
        for i in 0..config.m_dec {
            let prefix = format!("decoder.layer.{i}");
            match config.arch {
                Arch::Vanilla => {
                    let self_attn = VanillaAttnSublayer::init(Site::DecoderSelf, config.dec_spec(), &mut rng);
                    self_attn.attn.collect_params(&format!("{prefix}.self_attn"), &mut reg);
                    self_attn.norm.collect(&format!("{prefix}.self_norm"), &mut reg);
                    let cross_attn = VanillaAttnSublayer::init(Site::Cross, config.dec_spec(), &mut rng);
                    cross_attn.attn.collect_params(&format!("{prefix}.cross_attn"), &mut reg);
                    cross_attn.norm.collect(&format!("{prefix}.cross_norm"), &mut reg);
                    let ffn = VanillaFfnSublayer {
                        ffn: WideFfn::init(d, config.d_ffn_or_default(), &mut rng),
                        norm: Norm::init(d),
                    };
                    ffn.ffn.collect(&format!("{prefix}.ffn"), &mut reg);
                    ffn.norm.collect(&format!("{prefix}.ffn_norm"), &mut reg);
                    dec_layers.push(DecoderLayer::Vanilla { self_attn, cross_attn, ffn });
                }
                Arch::Partialformer => {
                    let self_sub = UnifiedSublayer::init(
                        Site::DecoderSelf,
                        config.dec_spec(),
                        config.r_dec,
                        config.gate_sigma,
                        &mut rng,
                    );
                    self_sub.collect(&format!("{prefix}.self"), &mut reg);
                    let cross_sub = UnifiedSublayer::init(
                        Site::Cross,
                        config.dec_spec(),
                        config.r_dec,
                        config.gate_sigma,
                        &mut rng,
                    );
                    cross_sub.collect(&format!("{prefix}.cross"), &mut reg);
                    dec_layers.push(DecoderLayer::Unified { self_sub, cross_sub });
                }
                Arch::VanillaPgffn => {
                    let self_attn = VanillaAttnSublayer::init(Site::DecoderSelf, config.dec_spec(), &mut rng);
                    self_attn.attn.collect_params(&format!("{prefix}.self_attn"), &mut reg);
                    self_attn.norm.collect(&format!("{prefix}.self_norm"), &mut reg);
                    let cross_sub = UnifiedSublayer::init(
                        Site::Cross,
                        config.dec_spec(),
                        config.r_dec,
                        config.gate_sigma,
                        &mut rng,
                    );
                    cross_sub.collect(&format!("{prefix}.cross"), &mut reg);
                    dec_layers.push(DecoderLayer::Mixed { self_attn, cross_sub });
                }
            }
        }
        let dec_final_norm = if config.m_dec > 0 {
            let n = Norm::init(d);
            n.collect("decoder.final_norm", &mut reg);
            Some(n)
        } else {
            None
        };

        Ok(Model {
            config,
            emb,
            globals,
            enc_layers,
            enc_final_norm,
            dec_layers,
            dec_final_norm,
            registry: reg,
        })
    }

    /// All trainable parameters in registration order, with stable
    /// dot-separated names. The same names appear in checkpoints.
    pub fn params(&self) -> &[(String, Tensor)] {
        &self.registry
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.registry.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.registry.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Diagnostic switch for every gated sub-layer: skip gating entirely
    /// (equivalent to all-ones gates). Used by reduction and equivalence
    /// tests.
    pub fn force_gates_open(&mut self, open: bool) {
        for layer in &mut self.enc_layers {
            if let EncoderLayer::Unified(sub) = layer {
                sub.pgffn.gates_forced_open = open;
            }
        }
        for layer in &mut self.dec_layers {
            match layer {
                DecoderLayer::Unified { self_sub, cross_sub } => {
                    self_sub.pgffn.gates_forced_open = open;
                    cross_sub.pgffn.gates_forced_open = open;
                }
                DecoderLayer::Mixed { cross_sub, .. } => {
                    cross_sub.pgffn.gates_forced_open = open;
                }
                DecoderLayer::Vanilla { .. } => {}
            }
        }
    }

    fn embed(&self, ids: &[usize], side: EmbSide) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Config("cannot embed an empty sequence".into()));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::Config(format!(
                "sequence length {} exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Config(format!(
                "token id {} out of vocabulary (size {})",
                bad, self.config.vocab_size
            )));
        }
        let d = self.config.d;
        let t = ids.len();
        let gathered = self.emb.table(side).gather_rows(ids).scale((d as f64).sqrt());
        let pos = Tensor::constant(vec![t, d], self.emb.positions[0..t * d].to_vec());
        Ok(gathered.add(&pos))
    }

    /// Run the encoder stack. `EncodeResult::output` is post-final-norm.
    pub fn encode(&self, src: &[usize], ctx: &mut ForwardCtx) -> Result<EncodeResult> {
        let embedded = self.embed(src, EmbSide::Encoder)?;
        let enc_global = self
            .globals
            .enc
            .as_ref()
            .map(|p| compute_global_logits(&embedded, &embedded, p, None));
        let mut x = ctx.drop(&embedded, self.config.dropout);
        for (i, layer) in self.enc_layers.iter().enumerate() {
            let label = format!("encoder.layer.{i}");
            x = match layer {
                EncoderLayer::Unified(sub) => {
                    self.unified_forward(sub, &x, None, enc_global.as_ref(), None, ctx, &label)
                }
                EncoderLayer::Vanilla { attn, ffn } => {
                    let after_attn = self.vanilla_attn_forward(attn, &x, None, None, ctx, &label);
                    self.vanilla_ffn_forward(ffn, &after_attn, ctx, &label)
                }
            };
            ctx.capture_state(&label, &x);
        }
        Ok(EncodeResult { output: self.enc_final_norm.apply(&x), embedded })
    }

    /// Run the decoder stack over `tgt_in` (typically `[BOS, y…]`) against an
    /// encoded source, producing `[t_tgt, vocab]` logits.
    pub fn decode_logits(&self, tgt_in: &[usize], enc: &EncodeResult, ctx: &mut ForwardCtx) -> Result<Tensor> {
        if self.config.m_dec == 0 {
            return Err(Error::Config("model has no decoder (m_dec = 0)".into()));
        }
        let embedded = self.embed(tgt_in, EmbSide::Decoder)?;
        let t = tgt_in.len();
        let mask = causal_mask(t);
        let dec_global = self
            .globals
            .dec
            .as_ref()
            .map(|p| compute_global_logits(&embedded, &embedded, p, Some(&mask)));
        let cross_global = self
            .globals
            .cross
            .as_ref()
            .map(|p| compute_global_logits(&embedded, &enc.embedded, p, None));
        let mut x = ctx.drop(&embedded, self.config.dropout);
        for (i, layer) in self.dec_layers.iter().enumerate() {
            let prefix = format!("decoder.layer.{i}");
            x = match layer {
                DecoderLayer::Unified { self_sub, cross_sub } => {
                    let a = self.unified_forward(
                        self_sub,
                        &x,
                        None,
                        dec_global.as_ref(),
                        Some(&mask),
                        ctx,
                        &format!("{prefix}.self"),
                    );
                    self.unified_forward(
                        cross_sub,
                        &a,
                        Some(&enc.output),
                        cross_global.as_ref(),
                        None,
                        ctx,
                        &format!("{prefix}.cross"),
                    )
                }
                DecoderLayer::Vanilla { self_attn, cross_attn, ffn } => {
                    let a = self.vanilla_attn_forward(
                        self_attn,
                        &x,
                        None,
                        Some(&mask),
                        ctx,
                        &format!("{prefix}.self"),
                    );
                    let b = self.vanilla_attn_forward(
                        cross_attn,
                        &a,
                        Some(&enc.output),
                        None,
                        ctx,
                        &format!("{prefix}.cross"),
                    );
                    self.vanilla_ffn_forward(ffn, &b, ctx, &prefix)
                }
                DecoderLayer::Mixed { self_attn, cross_sub } => {
                    let a = self.vanilla_attn_forward(
                        self_attn,
                        &x,
                        None,
                        Some(&mask),
                        ctx,
                        &format!("{prefix}.self"),
                    );
                    self.unified_forward(
                        cross_sub,
                        &a,
                        Some(&enc.output),
                        None,
                        None,
                        ctx,
                        &format!("{prefix}.cross"),
                    )
                }
            };
        }
        let normed = self.dec_final_norm.as_ref().unwrap().apply(&x);
        Ok(normed.matmul_nt(self.emb.output_table()))
    }

    /// Full forward pass: encode `src`, decode `tgt_in`, return logits.
    pub fn forward(&self, src: &[usize], tgt_in: &[usize], ctx: &mut ForwardCtx) -> Result<Tensor> {
        let enc = self.encode(src, ctx)?;
        self.decode_logits(tgt_in, &enc, ctx)
    }

    /// One unified sub-layer: attention with gated per-head FFNs and a
    /// residual connection. `kv` is the memory for cross sites (`None` means
    /// self-attention on the normalized input).
    fn unified_forward(
        &self,
        sub: &UnifiedSublayer,
        x: &Tensor,
        kv: Option<&Tensor>,
        global: Option<&GlobalLogits>,
        mask: Option<&Tensor>,
        ctx: &mut ForwardCtx,
        label: &str,
    ) -> Tensor {
        let xn = sub.norm.apply(x);
        let (q, k, v) = project_qkv(&xn, kv.unwrap_or(&xn), &sub.attn);
        let mut s = attention_logits(&q, &k, sub.attn.spec.d_k, None);
        if sub.attn.expansion.is_some() {
            s = expand_heads(&s, &sub.attn);
        }
        let attn_dropout = if ctx.training { self.config.attn_dropout } else { 0.0 };
        let heads = attend(
            &s,
            global,
            &v,
            mask,
            self.config.a_g_post_softmax,
            attn_dropout,
            ctx.rng.as_deref_mut(),
        );
        let relu_dropout = if ctx.training { self.config.relu_dropout } else { 0.0 };
        let mut hidden = ctx.probe.is_some().then(Vec::new);
        let o = pg_ffn(&heads, &xn, &sub.pgffn, relu_dropout, ctx.rng.as_deref_mut(), hidden.as_mut());
        if let (Some(p), Some(data)) = (ctx.probe.as_deref_mut(), hidden) {
            p.ffn_hidden.push(HiddenCapture {
                label: label.to_string(),
                heads: sub.pgffn.h,
                tokens: xn.shape()[0],
                width: sub.pgffn.r * sub.pgffn.d_k,
                data,
            });
        }
        ctx.capture_heads(label, &o);
        let fused = fuse_heads(&o, &sub.attn.w_o);
        x.add(&ctx.drop(&fused, self.config.dropout))
    }

    /// One plain attention sub-layer (pre-norm, residual).
    fn vanilla_attn_forward(
        &self,
        sub: &VanillaAttnSublayer,
        x: &Tensor,
        kv: Option<&Tensor>,
        mask: Option<&Tensor>,
        ctx: &mut ForwardCtx,
        label: &str,
    ) -> Tensor {
        let xn = sub.norm.apply(x);
        let (q, k, v) = project_qkv(&xn, kv.unwrap_or(&xn), &sub.attn);
        let s = attention_logits(&q, &k, sub.attn.spec.d_k, None);
        let attn_dropout = if ctx.training { self.config.attn_dropout } else { 0.0 };
        let heads = attend(&s, None, &v, mask, false, attn_dropout, ctx.rng.as_deref_mut());
        ctx.capture_heads(label, &heads);
        let fused = fuse_heads(&heads, &sub.attn.w_o);
        x.add(&ctx.drop(&fused, self.config.dropout))
    }

    /// One wide-FFN sub-layer (pre-norm, residual).
    fn vanilla_ffn_forward(
        &self,
        sub: &VanillaFfnSublayer,
        x: &Tensor,
        ctx: &mut ForwardCtx,
        label: &str,
    ) -> Tensor {
        let xn = sub.norm.apply(x);
        let hidden = xn.matmul(&sub.ffn.w1).add_bias(&sub.ffn.b1).relu();
        if let Some(p) = ctx.probe.as_deref_mut() {
            p.ffn_hidden.push(HiddenCapture {
                label: label.to_string(),
                heads: 1,
                tokens: xn.shape()[0],
                width: hidden.shape()[1],
                data: hidden.data_clone(),
            });
        }
        let hidden = ctx.drop(&hidden, self.config.relu_dropout);
        let out = hidden.matmul(&sub.ffn.w2).add_bias(&sub.ffn.b2);
        x.add(&ctx.drop(&out, self.config.dropout))
    }

    // ── checkpoints ──

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let entries: Vec<CheckpointEntry> = self
            .registry
            .iter()
            .map(|(name, t)| CheckpointEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data_clone(),
            })
            .collect();
        write_checkpoint(path, &self.config, &entries)
    }

    /// Rebuild a model from a checkpoint file.
    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let (config, entries) = read_checkpoint(path)?;
        let model = Model::new(config)?;
        model.apply_entries(&entries)?;
        Ok(model)
    }

    /// Overwrite parameters from checkpoint entries; every registry entry
    /// must be present with a matching shape, and no extras are allowed.
    pub fn apply_entries(&self, entries: &[CheckpointEntry]) -> Result<()> {
        if entries.len() != self.registry.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                entries.len(),
                self.registry.len()
            )));
        }
        for entry in entries {
            let tensor = self
                .param(&entry.name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {:?} in checkpoint", entry.name)))?;
            if tensor.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {:?}: checkpoint shape {:?} does not match model shape {:?}",
                    entry.name,
                    entry.shape,
                    tensor.shape()
                )));
            }
            tensor.set_data(&entry.data);
        }
        Ok(())
    }
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("arch", &self.config.arch)
            .field("param_count", &self.param_count())
            .finish_non_exhaustive()
    }
}

/// One named parameter inside a checkpoint file.
#[derive(Clone)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Binary checkpoint layout (all integers little-endian):
/// magic, u32 config-JSON length, config JSON, u32 entry count, then per
/// entry: u32 name length, name bytes, u8 rank, u32 dims, f64 values.
pub fn write_checkpoint(path: &Path, config: &ModelConfig, entries: &[CheckpointEntry]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.to_path_buf(), e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    let config_json =
        serde_json::to_vec(config).map_err(|e| Error::Format(format!("config serialization failed: {e}")))?;
    w.write_all(&(config_json.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&config_json).map_err(io_err)?;
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io_err)?;
    for entry in entries {
        let name = entry.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        w.write_all(&[entry.shape.len() as u8]).map_err(io_err)?;
        let mut numel = 1usize;
        for &dim in &entry.shape {
            w.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
            numel *= dim;
        }
        assert_eq!(numel, entry.data.len(), "checkpoint entry {:?}: shape/data mismatch", entry.name);
        for &v in &entry.data {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, Vec<CheckpointEntry>)> {
    let file = File::open(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut r = BufReader::new(file);
    let fmt = |m: String| Error::Format(format!("{}: {m}", path.display()));

    fn take<R: Read, const N: usize>(r: &mut R, path: &Path) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("{}: truncated checkpoint", path.display())))?;
        Ok(buf)
    }
    fn take_vec(r: &mut impl Read, len: usize, path: &Path) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("{}: truncated checkpoint", path.display())))?;
        Ok(buf)
    }

    let magic: [u8; 8] = take(&mut r, path)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt("bad magic bytes (not a checkpoint, or an unsupported version)".into()));
    }
    let config_len = u32::from_le_bytes(take(&mut r, path)?) as usize;
    let config_json = take_vec(&mut r, config_len, path)?;
    let config: ModelConfig =
        serde_json::from_slice(&config_json).map_err(|e| fmt(format!("invalid embedded config: {e}")))?;
    let count = u32::from_le_bytes(take(&mut r, path)?) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut r, path)?) as usize;
        let name = String::from_utf8(take_vec(&mut r, name_len, path)?)
            .map_err(|_| fmt("parameter name is not UTF-8".into()))?;
        let rank_buf: [u8; 1] = take(&mut r, path)?;
        let rank = rank_buf[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let dim = u32::from_le_bytes(take(&mut r, path)?) as usize;
            shape.push(dim);
            numel = numel
                .checked_mul(dim)
                .ok_or_else(|| fmt(format!("parameter {name:?}: shape overflow")))?;
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(take(&mut r, path)?));
        }
        entries.push(CheckpointEntry { name, shape, data });
    }
    Ok((config, entries))
}

//! End-to-end audio-visual question-answering model.
//!
//! Pipeline: linear encoders with dropout -> adaptive curvature and the
//! hyperbolic alignment loss on encoder outputs -> per-modality stacks of
//! sequence blocks -> one cross-fusion block -> temporal mean pooling ->
//! question-conditioned answer head. The two loss terms are summed
//! unweighted.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{read_tensor_file, write_tensor_file, DataError, DataResult};
use crate::error::{Error, Result};
use crate::fusion::{bind_cross_fusion, cross_fusion_t, register_cross_fusion, GateSource};
use crate::hyperbolic::{adaptive_curvature_t, alignment_loss_t, SimilarityNorm, DEFAULT_EPS};
use crate::params::{register_linear, BoundParams, ParamSet};
use crate::real::Real;
use crate::ssm::{bind_mamba_block, mamba_block_t, register_mamba_block, SsmDims};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Structural settings of the scan blocks, overridable per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsmSettings {
    /// Per-channel state dimension.
    pub state: usize,
    /// Causal convolution width.
    pub conv_width: usize,
    /// Inner-width multiplier (`M = expansion * hidden`).
    pub expansion: usize,
}

impl Default for SsmSettings {
    fn default() -> Self {
        Self {
            state: 16,
            conv_width: 4,
            expansion: 2,
        }
    }
}

/// Where the alignment branch taps its features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentTap {
    /// Encoder outputs, before the sequence stacks (the default).
    #[default]
    Encoder,
    /// After the per-modality sequence stacks (ablation).
    PostBlocks,
}

/// Full model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_audio_in: usize,
    pub d_visual_in: usize,
    pub d_question_in: usize,
    /// Hidden width of every stream (default 256).
    pub d_hidden: usize,
    /// Sequence blocks per modality (default 4).
    pub n_blocks: usize,
    /// Dropout rate on encoder outputs (default 0.1).
    pub dropout: f64,
    /// Initial curvature bound `k0 < 0` (default -0.1).
    pub k0: f64,
    /// Answer vocabulary size.
    pub vocab_size: usize,
    #[serde(default)]
    pub ssm: SsmSettings,
    #[serde(default)]
    pub alignment_norm: SimilarityNorm,
    #[serde(default)]
    pub gate_source: GateSource,
    #[serde(default)]
    pub alignment_tap: AlignmentTap,
}

impl ModelConfig {
    /// Defaults for everything except the data-determined widths.
    pub fn new(
        d_audio_in: usize,
        d_visual_in: usize,
        d_question_in: usize,
        vocab_size: usize,
    ) -> Self {
        Self {
            d_audio_in,
            d_visual_in,
            d_question_in,
            d_hidden: 256,
            n_blocks: 4,
            dropout: 0.1,
            k0: -0.1,
            vocab_size,
            ssm: SsmSettings::default(),
            alignment_norm: SimilarityNorm::default(),
            gate_source: GateSource::default(),
            alignment_tap: AlignmentTap::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_audio_in", self.d_audio_in),
            ("d_visual_in", self.d_visual_in),
            ("d_question_in", self.d_question_in),
            ("d_hidden", self.d_hidden),
            ("vocab_size", self.vocab_size),
            ("ssm.state", self.ssm.state),
            ("ssm.conv_width", self.ssm.conv_width),
            ("ssm.expansion", self.ssm.expansion),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument {
                    detail: format!("{name} must be at least 1"),
                });
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument {
                detail: format!("dropout {} outside [0, 1)", self.dropout),
            });
        }
        if !(self.k0 < 0.0 && self.k0.is_finite()) {
            return Err(Error::InvalidArgument {
                detail: format!("k0 must be negative, got {}", self.k0),
            });
        }
        Ok(())
    }

    /// Scan-block dimensions implied by the config.
    pub fn block_dims(&self) -> SsmDims {
        SsmDims {
            channels: self.d_hidden,
            inner: self.ssm.expansion * self.d_hidden,
            state: self.ssm.state,
            conv_width: self.ssm.conv_width,
        }
    }
}

/// One sample: per-timestep audio/visual features, a pooled question
/// feature, the answer label, and the question type used for evaluation
/// breakdowns.
#[derive(Debug, Clone)]
pub struct FeatureBundle<F> {
    /// `(T, d_audio_in)`.
    pub audio: Tensor<F>,
    /// `(T, d_visual_in)`.
    pub visual: Tensor<F>,
    /// `(d_question_in,)`.
    pub question: Tensor<F>,
    pub label: usize,
    pub query_type: usize,
}

/// A stacked batch of bundles.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    /// `(B, T, d_audio_in)`.
    pub audio: Tensor<F>,
    /// `(B, T, d_visual_in)`.
    pub visual: Tensor<F>,
    /// `(B, d_question_in)`.
    pub question: Tensor<F>,
    pub labels: Vec<usize>,
    pub query_types: Vec<usize>,
}

impl<F: Real> Batch<F> {
    pub fn from_bundles(bundles: &[FeatureBundle<F>]) -> Result<Self> {
        if bundles.is_empty() {
            return Err(Error::InvalidArgument {
                detail: "cannot batch zero samples".into(),
            });
        }
        let t = bundles[0].audio.shape()[0];
        let (da, dv, dq) = (
            bundles[0].audio.shape()[1],
            bundles[0].visual.shape()[1],
            bundles[0].question.shape()[0],
        );
        let mut audio = Vec::new();
        let mut visual = Vec::new();
        let mut question = Vec::new();
        let mut labels = Vec::new();
        let mut query_types = Vec::new();
        for (i, b) in bundles.iter().enumerate() {
            if b.audio.shape() != [t, da] || b.visual.shape() != [t, dv] || b.question.shape() != [dq]
            {
                return Err(Error::ShapeMismatch {
                    op: "batch",
                    lhs: b.audio.shape().to_vec(),
                    rhs: vec![t, da],
                });
            }
            let _ = i;
            audio.extend_from_slice(b.audio.data());
            visual.extend_from_slice(b.visual.data());
            question.extend_from_slice(b.question.data());
            labels.push(b.label);
            query_types.push(b.query_type);
        }
        let bsz = bundles.len();
        Ok(Self {
            audio: Tensor::new(vec![bsz, t, da], audio)?,
            visual: Tensor::new(vec![bsz, t, dv], visual)?,
            question: Tensor::new(vec![bsz, dq], question)?,
            labels,
            query_types,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Scalar summary of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<F> {
    pub l_align: F,
    pub l_qa: F,
    pub total: F,
    /// Realized adaptive curvature for the batch.
    pub k_used: F,
    /// Batch argmax accuracy.
    pub accuracy: F,
}

/// Tape handles produced by one forward pass.
pub struct ForwardVars {
    pub logits: Var,
    pub l_align: Var,
    pub l_qa: Var,
    pub total: Var,
    pub k: Var,
}

/// A completed forward pass: the tape plus the bound parameter handles,
/// ready for `backward`.
pub struct Forward<F> {
    pub tape: Tape<F>,
    pub bound: BoundParams,
    pub vars: ForwardVars,
}

impl<F: Real> Forward<F> {
    pub fn loss_breakdown(&self, labels: &[usize]) -> Result<LossBreakdown<F>> {
        Ok(LossBreakdown {
            l_align: self.tape.value(self.vars.l_align).item()?,
            l_qa: self.tape.value(self.vars.l_qa).item()?,
            total: self.tape.value(self.vars.total).item()?,
            k_used: self.tape.value(self.vars.k).item()?,
            accuracy: accuracy(self.tape.value(self.vars.logits), labels)?,
        })
    }
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy<F: Real>(logits: &Tensor<F>, labels: &[usize]) -> Result<F> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let classes = logits.shape()[1];
    let mut hits = 0usize;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(F::of(hits as f64 / labels.len() as f64))
}

/// Mean cross-entropy between logits and labels (log-sum-exp form).
pub fn answer_loss<F: Real>(logits: &Tensor<F>, labels: &[usize]) -> Result<F> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, labels)?;
    tape.value(loss).item()
}

/// Unweighted sum of the two loss terms.
pub fn total_loss<F: Real>(l_align: F, l_qa: F) -> Result<F> {
    let total = l_align + l_qa;
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "total_loss" });
    }
    Ok(total)
}

/// The model: a config plus its parameters in canonical registration order.
#[derive(Debug, Clone)]
pub struct Model<F> {
    pub cfg: ModelConfig,
    pub params: ParamSet<F>,
}

impl<F: Real> Model<F> {
    /// Initializes parameters from a seed. The registration order defines
    /// the checkpoint and optimizer-state layout.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        cfg.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let h = cfg.d_hidden;

        register_linear(&mut params, "encoder.audio", cfg.d_audio_in, h, &mut rng)?;
        register_linear(&mut params, "encoder.visual", cfg.d_visual_in, h, &mut rng)?;
        register_linear(&mut params, "encoder.question", cfg.d_question_in, h, &mut rng)?;
        register_linear(&mut params, "curvature", 2 * h, 1, &mut rng)?;

        let dims = cfg.block_dims();
        for modality in ["audio", "visual"] {
            for i in 0..cfg.n_blocks {
                register_mamba_block(&mut params, &format!("mamba.{modality}.{i}"), &dims, &mut rng)?;
            }
        }
        register_cross_fusion(&mut params, "fusion", &dims, &mut rng)?;
        register_linear(&mut params, "head.fuse", 2 * h, h, &mut rng)?;
        register_linear(&mut params, "head.out", h, cfg.vocab_size, &mut rng)?;

        Ok(Self { cfg, params })
    }

    /// Runs the pipeline on a fresh tape. With `train` set, dropout is
    /// active and driven by `rng`; parameters are always registered as
    /// gradient targets.
    pub fn forward(&self, batch: &Batch<F>, train: bool, rng: &mut impl Rng) -> Result<Forward<F>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let vars = self.forward_on(&mut tape, &bound, batch, train, rng)?;
        Ok(Forward { tape, bound, vars })
    }

    /// Pipeline over pre-bound parameters (shared by `forward` and the
    /// per-parameter gradient checks).
    pub fn forward_on(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        batch: &Batch<F>,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<ForwardVars> {
        let cfg = &self.cfg;
        if batch.audio.shape()[2] != cfg.d_audio_in
            || batch.visual.shape()[2] != cfg.d_visual_in
            || batch.question.shape()[1] != cfg.d_question_in
        {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: batch.audio.shape().to_vec(),
                rhs: vec![cfg.d_audio_in],
            });
        }

        let (a_enc, v_enc, q_enc) = self.encode_on(tape, bound, batch, train, rng)?;

        // Adaptive curvature and the alignment branch.
        let k = adaptive_curvature_t(
            tape,
            a_enc,
            v_enc,
            bound.var("curvature.weight")?,
            bound.var("curvature.bias")?,
            F::of(cfg.k0),
        )?;

        let mut align_inputs = (a_enc, v_enc);

        // Per-modality sequence stacks.
        let mut a_seq = a_enc;
        let mut v_seq = v_enc;
        for i in 0..cfg.n_blocks {
            let (pa, lna) = bind_mamba_block(tape, bound, &format!("mamba.audio.{i}"))?;
            a_seq = mamba_block_t(tape, a_seq, &pa, &lna)?;
            let (pv, lnv) = bind_mamba_block(tape, bound, &format!("mamba.visual.{i}"))?;
            v_seq = mamba_block_t(tape, v_seq, &pv, &lnv)?;
        }
        if cfg.alignment_tap == AlignmentTap::PostBlocks {
            align_inputs = (a_seq, v_seq);
        }
        let l_align = alignment_loss_t(
            tape,
            align_inputs.1,
            align_inputs.0,
            k,
            F::of(DEFAULT_EPS),
            cfg.alignment_norm,
        )?;

        // Cross fusion and temporal pooling.
        let fusion_vars = bind_cross_fusion(tape, bound, "fusion")?;
        let fused = cross_fusion_t(tape, a_seq, v_seq, &fusion_vars, cfg.gate_source)?;
        let pool_a = tape.mean_axis(fused.audio, 1)?;
        let pool_v = tape.mean_axis(fused.visual, 1)?;
        let f_av = tape.concat_last(pool_a, pool_v)?;

        // Question-conditioned head.
        let fuse = tape.linear(
            f_av,
            bound.var("head.fuse.weight")?,
            bound.var("head.fuse.bias")?,
        )?;
        let conditioned = tape.mul(fuse, q_enc)?;
        let logits = tape.linear(
            conditioned,
            bound.var("head.out.weight")?,
            bound.var("head.out.bias")?,
        )?;

        let l_qa = tape.cross_entropy(logits, &batch.labels)?;
        let total = tape.add(l_align, l_qa)?;

        Ok(ForwardVars {
            logits,
            l_align,
            l_qa,
            total,
            k,
        })
    }

    /// Encoders: one linear layer per modality to the hidden width,
    /// followed by dropout in train mode.
    pub fn encode_on(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        batch: &Batch<F>,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<(Var, Var, Var)> {
        let audio = tape.constant(batch.audio.clone());
        let visual = tape.constant(batch.visual.clone());
        let question = tape.constant(batch.question.clone());
        let mut enc = |tape: &mut Tape<F>, x: Var, name: &str| -> Result<Var> {
            let w = bound.var(&format!("encoder.{name}.weight"))?;
            let b = bound.var(&format!("encoder.{name}.bias"))?;
            let y = tape.linear(x, w, b)?;
            tape.dropout(y, self.cfg.dropout, train, rng)
        };
        let a = enc(tape, audio, "audio")?;
        let v = enc(tape, visual, "visual")?;
        let q = enc(tape, question, "question")?;
        Ok((a, v, q))
    }
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

/// Itemized learnable-parameter count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    /// `(module, scalar count)` in pipeline order.
    pub items: Vec<(String, usize)>,
    pub total: usize,
}

fn linear_count(d_in: usize, d_out: usize) -> usize {
    d_in * d_out + d_out
}

/// Scalars in one sequence block. With `H` channels, inner width `M`,
/// state `L`, conv width `W`:
///
/// `block = 2H + 2(HM + M) + MW + 2(ML + L) + (M^2 + M) + ML + (MH + H)`
///
/// (layer norm; x/z input projections; conv kernels; B and C projections;
/// delta projection and bias; state matrix log; output projection).
fn mamba_block_count(h: usize, m: usize, l: usize, w: usize) -> usize {
    2 * h
        + 2 * linear_count(h, m)
        + m * w
        + 2 * linear_count(m, l)
        + (m * m + m)
        + m * l
        + linear_count(m, h)
}

/// Scalars in the fusion block: two modality branches (a sequence block
/// without its `z` projection) plus the shared gate:
///
/// `fusion = 2(block - (HM + M)) + (HM + M)`
fn fusion_count(h: usize, m: usize, l: usize, w: usize) -> usize {
    2 * (mamba_block_count(h, m, l, w) - linear_count(h, m)) + linear_count(h, m)
}

/// Closed-form learnable parameter count, itemized by module.
///
/// With hidden width `H`, inner width `M = expansion*H`, state `L`, conv
/// width `W`, input widths `Da`, `Dv`, `Dq`, vocabulary `V`, and `n` blocks
/// per modality:
///
/// ```text
/// encoders  = (Da*H + H) + (Dv*H + H) + (Dq*H + H)
/// curvature = 2H + 1
/// stacks    = 2n * block(H, M, L, W)
/// fusion    = 2*(block - (HM + M)) + (HM + M)
/// head      = (2H*H + H) + (H*V + V)
/// ```
pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let h = cfg.d_hidden;
    let m = cfg.ssm.expansion * h;
    let (l, w) = (cfg.ssm.state, cfg.ssm.conv_width);
    let block = mamba_block_count(h, m, l, w);
    let items = vec![
        (
            "encoder".to_string(),
            linear_count(cfg.d_audio_in, h)
                + linear_count(cfg.d_visual_in, h)
                + linear_count(cfg.d_question_in, h),
        ),
        ("curvature".to_string(), linear_count(2 * h, 1)),
        ("mamba.audio".to_string(), cfg.n_blocks * block),
        ("mamba.visual".to_string(), cfg.n_blocks * block),
        ("fusion".to_string(), fusion_count(h, m, l, w)),
        (
            "head".to_string(),
            linear_count(2 * h, h) + linear_count(h, cfg.vocab_size),
        ),
    ];
    let total = items.iter().map(|(_, n)| n).sum();
    ParamCount { items, total }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_HEADER: &str = "hyperssm-checkpoint v1";

fn cfg_to_lines(cfg: &ModelConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "cfg.d_audio_in {}", cfg.d_audio_in);
    let _ = writeln!(s, "cfg.d_visual_in {}", cfg.d_visual_in);
    let _ = writeln!(s, "cfg.d_question_in {}", cfg.d_question_in);
    let _ = writeln!(s, "cfg.d_hidden {}", cfg.d_hidden);
    let _ = writeln!(s, "cfg.n_blocks {}", cfg.n_blocks);
    let _ = writeln!(s, "cfg.dropout {}", cfg.dropout);
    let _ = writeln!(s, "cfg.k0 {}", cfg.k0);
    let _ = writeln!(s, "cfg.vocab_size {}", cfg.vocab_size);
    let _ = writeln!(s, "cfg.ssm.state {}", cfg.ssm.state);
    let _ = writeln!(s, "cfg.ssm.conv_width {}", cfg.ssm.conv_width);
    let _ = writeln!(s, "cfg.ssm.expansion {}", cfg.ssm.expansion);
    let _ = writeln!(
        s,
        "cfg.alignment_norm {}",
        match cfg.alignment_norm {
            SimilarityNorm::RowL2 => "row_l2",
            SimilarityNorm::Frobenius => "frobenius",
        }
    );
    let _ = writeln!(
        s,
        "cfg.gate_source {}",
        match cfg.gate_source {
            GateSource::Visual => "visual",
            GateSource::Audio => "audio",
        }
    );
    let _ = writeln!(
        s,
        "cfg.alignment_tap {}",
        match cfg.alignment_tap {
            AlignmentTap::Encoder => "encoder",
            AlignmentTap::PostBlocks => "post_blocks",
        }
    );
    s
}

fn parse_cfg_lines(lines: &[(String, String)]) -> DataResult<ModelConfig> {
    let mut cfg = ModelConfig::new(1, 1, 1, 2);
    let bad = |key: &str, value: &str| DataError::Invalid {
        detail: format!("bad checkpoint config value {key} = {value}"),
    };
    for (key, value) in lines {
        let v = value.as_str();
        match key.as_str() {
            "cfg.d_audio_in" => cfg.d_audio_in = v.parse().map_err(|_| bad(key, v))?,
            "cfg.d_visual_in" => cfg.d_visual_in = v.parse().map_err(|_| bad(key, v))?,
            "cfg.d_question_in" => cfg.d_question_in = v.parse().map_err(|_| bad(key, v))?,
            "cfg.d_hidden" => cfg.d_hidden = v.parse().map_err(|_| bad(key, v))?,
            "cfg.n_blocks" => cfg.n_blocks = v.parse().map_err(|_| bad(key, v))?,
            "cfg.dropout" => cfg.dropout = v.parse().map_err(|_| bad(key, v))?,
            "cfg.k0" => cfg.k0 = v.parse().map_err(|_| bad(key, v))?,
            "cfg.vocab_size" => cfg.vocab_size = v.parse().map_err(|_| bad(key, v))?,
            "cfg.ssm.state" => cfg.ssm.state = v.parse().map_err(|_| bad(key, v))?,
            "cfg.ssm.conv_width" => cfg.ssm.conv_width = v.parse().map_err(|_| bad(key, v))?,
            "cfg.ssm.expansion" => cfg.ssm.expansion = v.parse().map_err(|_| bad(key, v))?,
            "cfg.alignment_norm" => {
                cfg.alignment_norm = match v {
                    "row_l2" => SimilarityNorm::RowL2,
                    "frobenius" => SimilarityNorm::Frobenius,
                    _ => return Err(bad(key, v)),
                }
            }
            "cfg.gate_source" => {
                cfg.gate_source = match v {
                    "visual" => GateSource::Visual,
                    "audio" => GateSource::Audio,
                    _ => return Err(bad(key, v)),
                }
            }
            "cfg.alignment_tap" => {
                cfg.alignment_tap = match v {
                    "encoder" => AlignmentTap::Encoder,
                    "post_blocks" => AlignmentTap::PostBlocks,
                    _ => return Err(bad(key, v)),
                }
            }
            _ => {
                return Err(DataError::Invalid {
                    detail: format!("unknown checkpoint config key {key}"),
                })
            }
        }
    }
    Ok(cfg)
}

/// Writes a checkpoint directory: `manifest.txt` (header, seed, config,
/// parameter names in order) plus one tensor file per parameter under
/// `params/`, named by the dotted parameter name.
pub fn save_checkpoint<F: Real>(dir: &Path, model: &Model<F>, seed: u64) -> DataResult<()> {
    let io_err = |e: std::io::Error| DataError::Io {
        path: dir.to_path_buf(),
        source: e,
    };
    std::fs::create_dir_all(dir.join("params")).map_err(io_err)?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "{CHECKPOINT_HEADER}");
    let _ = writeln!(manifest, "seed {seed}");
    manifest.push_str(&cfg_to_lines(&model.cfg));
    for (name, tensor) in model.params.iter() {
        write_tensor_file(&dir.join("params").join(format!("{name}.sht")), tensor)?;
        let _ = writeln!(manifest, "param {name}");
    }
    std::fs::write(dir.join("manifest.txt"), manifest).map_err(io_err)
}

/// Loads a checkpoint directory written by [`save_checkpoint`]. Parameter
/// tensors are shape-checked against a freshly initialized model of the
/// recorded config.
pub fn load_checkpoint<F: Real>(dir: &Path) -> DataResult<(Model<F>, u64)> {
    let manifest_path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| DataError::Io {
        path: manifest_path.clone(),
        source: e,
    })?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != CHECKPOINT_HEADER {
        return Err(DataError::Invalid {
            detail: format!("unrecognized checkpoint header {header:?}"),
        });
    }
    let mut seed = 0u64;
    let mut cfg_lines = Vec::new();
    let mut names = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once(' ').ok_or_else(|| DataError::Parse {
            path: manifest_path.clone(),
            line: lineno + 2,
            detail: "expected `key value`".into(),
        })?;
        if key == "seed" {
            seed = value.parse().map_err(|_| DataError::Parse {
                path: manifest_path.clone(),
                line: lineno + 2,
                detail: format!("bad seed {value}"),
            })?;
        } else if key == "param" {
            names.push(value.to_string());
        } else {
            cfg_lines.push((key.to_string(), value.to_string()));
        }
    }
    let cfg = parse_cfg_lines(&cfg_lines)?;
    let mut model = Model::<F>::init(cfg, seed).map_err(DataError::Numeric)?;
    for name in &names {
        let path = dir.join("params").join(format!("{name}.sht"));
        let loaded: Tensor<F> = read_tensor_file(&path)?;
        let target = model.params.get_mut(name).map_err(DataError::Numeric)?;
        if loaded.shape() != target.shape() {
            return Err(DataError::TensorShape {
                path,
                expected: target.shape().to_vec(),
                found: loaded.shape().to_vec(),
            });
        }
        *target = loaded;
    }
    Ok((model, seed))
}

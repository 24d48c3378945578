//! DS-CNN keyword-spotting models with per-speaker embedding fusion.
//!
//! A model is an initial 10x4 convolution block (stride 2x2), a stack of
//! depthwise-separable blocks (depthwise 3x3 + pointwise 1x1, each followed
//! by batchnorm and ReLU), global average pooling, fusion of the pooled
//! channel vector with the speaker's embedding row, and an affine classifier.

pub mod checkpoint;
pub mod embedding;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::mfcc::{FeatureStats, MfccConfig};
use crate::data::Vocabulary;
use crate::error::{KwsError, Result};
use crate::tensor::adam::{self, AdamHyper};
use crate::tensor::ops::{self, BatchNormCache, ConvSpec, RunningStats};
use crate::tensor::{Parameter, Scalar, Tensor};

pub use embedding::EmbeddingTable;

const INITIAL_KERNEL: (usize, usize) = (10, 4);
const INITIAL_SPEC: ConvSpec = ConvSpec {
    stride: (2, 2),
    padding: (5, 1),
};
const DS_SPEC: ConvSpec = ConvSpec {
    stride: (1, 1),
    padding: (1, 1),
};
const PW_SPEC: ConvSpec = ConvSpec {
    stride: (1, 1),
    padding: (0, 0),
};
const BN_MOMENTUM: f64 = 0.1;
const BN_EPSILON: f64 = 1e-5;

/// The three backbone sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelSize {
    S,
    M,
    L,
}

impl ModelSize {
    pub fn channels(self) -> usize {
        match self {
            ModelSize::S => 64,
            ModelSize::M => 172,
            ModelSize::L => 276,
        }
    }

    pub fn ds_blocks(self) -> usize {
        match self {
            ModelSize::S => 4,
            ModelSize::M => 4,
            ModelSize::L => 5,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" => Ok(ModelSize::S),
            "m" => Ok(ModelSize::M),
            "l" => Ok(ModelSize::L),
            other => Err(KwsError::Config(format!("unknown model size `{other}`"))),
        }
    }
}

/// How the pooled channel vector and the speaker row are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    /// Plain backbone + classifier; no embedding table.
    None,
    Add,
    Mul,
    /// Backbone-compatible concatenation: the classifier input widens to
    /// `2C`.
    ConcatBc,
    /// Classifier-compatible concatenation: the last pointwise convolution
    /// shrinks so channels + embedding width still equal `C`.
    ConcatCc,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(FusionMode::None),
            "add" => Ok(FusionMode::Add),
            "mul" => Ok(FusionMode::Mul),
            "concat-bc" | "bc" => Ok(FusionMode::ConcatBc),
            "concat-cc" | "cc" => Ok(FusionMode::ConcatCc),
            other => Err(KwsError::Config(format!("unknown fusion mode `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Add => "add",
            FusionMode::Mul => "mul",
            FusionMode::ConcatBc => "concat-bc",
            FusionMode::ConcatCc => "concat-cc",
        }
    }

    /// The per-entry value of a fresh identity row.
    fn identity_value<E: Scalar>(self) -> E {
        match self {
            FusionMode::Mul => E::one(),
            _ => E::zero(),
        }
    }
}

/// Which parameter subset trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainPolicy {
    EmbeddingOnly,
    ClassifierOnly,
    BackboneOnly,
    Full,
}

impl TrainPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "embedding-only" | "embedding" => Ok(TrainPolicy::EmbeddingOnly),
            "classifier-only" | "classifier" => Ok(TrainPolicy::ClassifierOnly),
            "backbone-only" | "backbone" => Ok(TrainPolicy::BackboneOnly),
            "full" => Ok(TrainPolicy::Full),
            other => Err(KwsError::Config(format!("unknown train policy `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainPolicy::EmbeddingOnly => "embedding-only",
            TrainPolicy::ClassifierOnly => "classifier-only",
            TrainPolicy::BackboneOnly => "backbone-only",
            TrainPolicy::Full => "full",
        }
    }

    /// Frozen-backbone policies run batchnorm on running statistics and
    /// never touch them.
    pub fn backbone_frozen(self) -> bool {
        matches!(self, TrainPolicy::EmbeddingOnly | TrainPolicy::ClassifierOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub size: ModelSize,
    pub vocab_size: usize,
    pub fusion: FusionMode,
    /// Embedding width `n`; equals the channel count except for
    /// classifier-compatible concatenation (and 0 without fusion).
    pub embedding_dim: usize,
    /// Input feature-map shape `[frames, coefficients, channels]`.
    pub input_shape: [usize; 3],
}

impl ModelConfig {
    pub fn new(size: ModelSize, vocab_size: usize, fusion: FusionMode) -> Self {
        let c = size.channels();
        let embedding_dim = match fusion {
            FusionMode::None => 0,
            FusionMode::ConcatCc => c / 4,
            _ => c,
        };
        ModelConfig {
            size,
            vocab_size,
            fusion,
            embedding_dim,
            input_shape: [49, 10, 1],
        }
    }

    pub fn with_embedding_dim(mut self, dim: usize) -> Self {
        self.embedding_dim = dim;
        self
    }

    pub fn channels(&self) -> usize {
        self.size.channels()
    }

    /// Channels coming out of the last backbone block (reduced for
    /// classifier-compatible concatenation).
    pub fn backbone_out_channels(&self) -> usize {
        match self.fusion {
            FusionMode::ConcatCc => self.channels() - self.embedding_dim,
            _ => self.channels(),
        }
    }

    /// Width of the classifier input after fusion.
    pub fn classifier_input(&self) -> usize {
        match self.fusion {
            FusionMode::None => self.channels(),
            FusionMode::Add | FusionMode::Mul => self.channels(),
            FusionMode::ConcatBc => self.channels() + self.embedding_dim,
            FusionMode::ConcatCc => self.backbone_out_channels() + self.embedding_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(KwsError::Config("vocabulary must have >= 2 classes".into()));
        }
        let c = self.channels();
        match self.fusion {
            FusionMode::None if self.embedding_dim != 0 => Err(KwsError::Config(
                "fusion `none` requires embedding_dim = 0".into(),
            )),
            FusionMode::Add | FusionMode::Mul if self.embedding_dim != c => {
                Err(KwsError::Config(format!(
                    "fusion `{}` requires embedding_dim = channels ({c}), got {}",
                    self.fusion.name(),
                    self.embedding_dim
                )))
            }
            FusionMode::ConcatBc if self.embedding_dim != c => Err(KwsError::Config(format!(
                "backbone-compatible concatenation requires embedding_dim = channels ({c})"
            ))),
            FusionMode::ConcatCc if self.embedding_dim == 0 || self.embedding_dim >= c => {
                Err(KwsError::Config(format!(
                    "classifier-compatible concatenation requires 0 < embedding_dim < {c}"
                )))
            }
            _ => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// layer containers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct BatchNorm<E: Scalar> {
    gamma: Parameter<E>,
    beta: Parameter<E>,
    running: RunningStats<E>,
}

impl<E: Scalar> BatchNorm<E> {
    fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Parameter::new(Tensor::filled(&[channels], E::one())),
            beta: Parameter::new(Tensor::zeros(&[channels])),
            running: RunningStats::new(channels),
        }
    }

    fn infer(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        ops::batchnorm_infer(
            x,
            &self.gamma.value,
            &self.beta.value,
            &self.running,
            E::from_f64_lossy(BN_EPSILON),
        )
    }

    fn train(&mut self, x: &Tensor<E>, update_running: bool) -> Result<(Tensor<E>, BatchNormCache<E>)> {
        let (out, cache) = ops::batchnorm_train(
            x,
            &self.gamma.value,
            &self.beta.value,
            E::from_f64_lossy(BN_EPSILON),
        )?;
        if update_running {
            self.running.update(
                &cache.batch_mean,
                &cache.batch_var,
                E::from_f64_lossy(BN_MOMENTUM),
            );
        }
        Ok((out, cache))
    }
}

#[derive(Debug, Clone)]
struct ConvUnit<E: Scalar> {
    kernel: Parameter<E>,
    bias: Parameter<E>,
    bn: BatchNorm<E>,
    spec: ConvSpec,
}

#[derive(Debug, Clone)]
struct DwUnit<E: Scalar> {
    kernel: Parameter<E>,
    bias: Parameter<E>,
    bn: BatchNorm<E>,
}

#[derive(Debug, Clone)]
struct DsBlock<E: Scalar> {
    dw: DwUnit<E>,
    pw: ConvUnit<E>,
}

#[derive(Debug, Clone)]
struct Classifier<E: Scalar> {
    weight: Parameter<E>,
    bias: Parameter<E>,
}

/// Per-conv-unit values saved by a training-mode forward pass.
struct UnitTape<E: Scalar> {
    conv_input: Tensor<E>,
    bn_cache: BatchNormCache<E>,
    bn_out: Tensor<E>,
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape<E: Scalar> {
    units: Option<Vec<UnitTape<E>>>,
    pre_pool_shape: Vec<usize>,
    pooled: Tensor<E>,
    user: Option<Tensor<E>>,
    rows: Vec<usize>,
    fused: Tensor<E>,
}

/// Speaker rows for an inference pass.
pub enum RowSelect<'a> {
    /// Registered row indices, one per batch sample.
    Rows(&'a [usize]),
    /// The unseen-speaker baseline: an identity row (ones for mul, zeros
    /// for add, the table mean for concatenation).
    Baseline,
}

// ---------------------------------------------------------------------------
// fusion
// ---------------------------------------------------------------------------

/// Combines one pooled activation vector with one user row.
pub fn fuse<E: Scalar>(activation: &[E], user: &[E], mode: FusionMode) -> Result<Vec<E>> {
    match mode {
        FusionMode::None => Ok(activation.to_vec()),
        FusionMode::Add | FusionMode::Mul => {
            if activation.len() != user.len() {
                return Err(KwsError::Shape {
                    op: "fuse",
                    detail: format!(
                        "activation width {} does not match user width {}",
                        activation.len(),
                        user.len()
                    ),
                });
            }
            Ok(activation
                .iter()
                .zip(user)
                .map(|(a, u)| match mode {
                    FusionMode::Add => *a + *u,
                    _ => *a * *u,
                })
                .collect())
        }
        FusionMode::ConcatBc | FusionMode::ConcatCc => {
            let mut out = Vec::with_capacity(activation.len() + user.len());
            out.extend_from_slice(activation);
            out.extend_from_slice(user);
            Ok(out)
        }
    }
}

fn fuse_batch<E: Scalar>(
    pooled: &Tensor<E>,
    user: Option<&Tensor<E>>,
    mode: FusionMode,
    out_width: usize,
) -> Result<Tensor<E>> {
    let n = pooled.shape()[0];
    let p = pooled.shape()[1];
    let mut fused = Tensor::zeros(&[n, out_width]);
    match (mode, user) {
        (FusionMode::None, _) => fused.data_mut().copy_from_slice(pooled.data()),
        (_, Some(user)) => {
            let d = user.shape()[1];
            for ni in 0..n {
                let a = &pooled.data()[ni * p..(ni + 1) * p];
                let u = &user.data()[ni * d..(ni + 1) * d];
                let row = fuse(a, u, mode)?;
                fused.data_mut()[ni * out_width..(ni + 1) * out_width].copy_from_slice(&row);
            }
        }
        _ => {
            return Err(KwsError::Config(
                "fusion mode requires speaker rows but none were provided".into(),
            ))
        }
    }
    Ok(fused)
}

/// Backward through fusion: gradient of the fused vector split into the
/// pooled-activation part and the user part.
fn fuse_backward<E: Scalar>(
    grad_fused: &Tensor<E>,
    pooled: &Tensor<E>,
    user: Option<&Tensor<E>>,
    mode: FusionMode,
) -> (Tensor<E>, Option<Tensor<E>>) {
    let n = pooled.shape()[0];
    let p = pooled.shape()[1];
    let gf = grad_fused.data();
    match mode {
        FusionMode::None => (grad_fused.clone(), None),
        FusionMode::Add => {
            let mut ga = Tensor::zeros(&[n, p]);
            ga.data_mut().copy_from_slice(gf);
            (ga.clone(), Some(ga))
        }
        FusionMode::Mul => {
            let user = user.expect("mul fusion has user rows");
            let mut ga = Tensor::zeros(&[n, p]);
            let mut gu = Tensor::zeros(&[n, p]);
            for i in 0..n * p {
                ga.data_mut()[i] = gf[i] * user.data()[i];
                gu.data_mut()[i] = gf[i] * pooled.data()[i];
            }
            (ga, Some(gu))
        }
        FusionMode::ConcatBc | FusionMode::ConcatCc => {
            let d = user.expect("concat fusion has user rows").shape()[1];
            let w = p + d;
            let mut ga = Tensor::zeros(&[n, p]);
            let mut gu = Tensor::zeros(&[n, d]);
            for ni in 0..n {
                ga.data_mut()[ni * p..(ni + 1) * p].copy_from_slice(&gf[ni * w..ni * w + p]);
                gu.data_mut()[ni * d..(ni + 1) * d]
                    .copy_from_slice(&gf[ni * w + p..(ni + 1) * w]);
            }
            (ga, Some(gu))
        }
    }
}

// ---------------------------------------------------------------------------
// the model
// ---------------------------------------------------------------------------

pub struct KwsModel<E: Scalar = f32> {
    pub config: ModelConfig,
    conv1: ConvUnit<E>,
    blocks: Vec<DsBlock<E>>,
    classifier: Classifier<E>,
    pub embedding: EmbeddingTable<E>,
    /// Word list the classifier indices refer to, when known.
    pub vocab: Option<Vocabulary>,
    /// Standardization statistics of the pretraining split.
    pub feature_stats: Option<FeatureStats>,
    /// Feature extraction configuration the model was trained with.
    pub mfcc_config: Option<MfccConfig>,
    policy: TrainPolicy,
    active_row: Option<usize>,
}

impl<E: Scalar> KwsModel<E> {
    /// Builds a model with seeded Kaiming fan-in initialization.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels();
        let ci = config.input_shape[2];
        let (kh, kw) = INITIAL_KERNEL;

        let kaiming = |shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| {
            Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
        };

        let conv1 = ConvUnit {
            kernel: Parameter::new(kaiming(&[kh, kw, ci, c], kh * kw * ci, &mut rng)),
            bias: Parameter::new(Tensor::zeros(&[c])),
            bn: BatchNorm::new(c),
            spec: INITIAL_SPEC,
        };

        let n_blocks = config.size.ds_blocks();
        let mut blocks = Vec::with_capacity(n_blocks);
        for bi in 0..n_blocks {
            let out_c = if bi + 1 == n_blocks {
                config.backbone_out_channels()
            } else {
                c
            };
            blocks.push(DsBlock {
                dw: DwUnit {
                    kernel: Parameter::new(kaiming(&[3, 3, c], 9, &mut rng)),
                    bias: Parameter::new(Tensor::zeros(&[c])),
                    bn: BatchNorm::new(c),
                },
                pw: ConvUnit {
                    kernel: Parameter::new(kaiming(&[1, 1, c, out_c], c, &mut rng)),
                    bias: Parameter::new(Tensor::zeros(&[out_c])),
                    bn: BatchNorm::new(out_c),
                    spec: PW_SPEC,
                },
            });
        }

        let f = config.classifier_input();
        let classifier = Classifier {
            weight: Parameter::new(kaiming(&[f, config.vocab_size], f, &mut rng)),
            bias: Parameter::new(Tensor::zeros(&[config.vocab_size])),
        };

        let embedding = EmbeddingTable::new(config.embedding_dim);
        Ok(KwsModel {
            config,
            conv1,
            blocks,
            classifier,
            embedding,
            vocab: None,
            feature_stats: None,
            mfcc_config: None,
            policy: TrainPolicy::Full,
            active_row: None,
        })
    }

    // -- speakers ----------------------------------------------------------

    /// Registers pretraining speakers: identity rows plus Gaussian noise so
    /// speakers can differentiate during joint pretraining.
    pub fn register_pretraining_speakers(&mut self, ids: &[String], seed: u64) -> Result<()> {
        if self.config.fusion == FusionMode::None {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let identity: E = self.config.fusion.identity_value();
        for id in ids {
            let noise = Tensor::<E>::randn(&[self.config.embedding_dim], 0.01, &mut rng);
            let row = noise.data().iter().map(|z| identity + *z).collect();
            self.embedding.add_row(id, row)?;
        }
        Ok(())
    }

    /// Appends one new speaker row at the fusion identity (mul: ones, add:
    /// zeros) or, for concatenation, the mean of the pretrained rows.
    pub fn add_speaker(&mut self, id: &str) -> Result<usize> {
        if self.config.fusion == FusionMode::None {
            return Err(KwsError::Config(
                "cannot add a speaker to a fusion-free model".into(),
            ));
        }
        let row = self.baseline_row();
        self.embedding.add_row(id, row)
    }

    /// The row an unregistered speaker evaluates with.
    fn baseline_row(&self) -> Vec<E> {
        match self.config.fusion {
            FusionMode::ConcatBc | FusionMode::ConcatCc if self.embedding.rows() > 0 => {
                self.embedding.mean_row()
            }
            _ => vec![
                self.config.fusion.identity_value();
                self.config.embedding_dim
            ],
        }
    }

    // -- policy ------------------------------------------------------------

    /// Sets trainability per policy. Embedding-only additionally restricts
    /// the update to `active_row`; batchnorm running statistics are frozen
    /// whenever the backbone is.
    pub fn apply_policy(&mut self, policy: TrainPolicy, active_row: Option<usize>) {
        self.policy = policy;
        self.active_row = if policy == TrainPolicy::EmbeddingOnly {
            active_row
        } else {
            None
        };
        let (backbone, classifier, embedding) = match policy {
            TrainPolicy::EmbeddingOnly => (false, false, true),
            TrainPolicy::ClassifierOnly => (false, true, false),
            TrainPolicy::BackboneOnly => (true, false, false),
            TrainPolicy::Full => (true, true, true),
        };
        self.visit_backbone_params_mut(&mut |p| p.trainable = backbone);
        self.classifier.weight.trainable = classifier;
        self.classifier.bias.trainable = classifier;
        self.embedding.weight.trainable = embedding && self.config.fusion != FusionMode::None;
    }

    pub fn policy(&self) -> TrainPolicy {
        self.policy
    }

    // -- forward -----------------------------------------------------------

    fn backbone_infer(&self, features: &Tensor<E>) -> Result<Tensor<E>> {
        let mut x = ops::conv2d(
            features,
            &self.conv1.kernel.value,
            &self.conv1.bias.value,
            &self.conv1.spec,
        )?;
        x = ops::relu(&self.conv1.bn.infer(&x)?);
        for block in &self.blocks {
            let dw = ops::depthwise_conv2d(
                &x,
                &block.dw.kernel.value,
                &block.dw.bias.value,
                &DS_SPEC,
            )?;
            x = ops::relu(&block.dw.bn.infer(&dw)?);
            let pw = ops::conv2d(&x, &block.pw.kernel.value, &block.pw.bias.value, &block.pw.spec)?;
            x = ops::relu(&block.pw.bn.infer(&pw)?);
        }
        ops::avgpool_global(&x)
    }

    fn gather_rows(&self, rows: &[usize], n: usize) -> Result<Tensor<E>> {
        if rows.len() != n {
            return Err(KwsError::Shape {
                op: "forward",
                detail: format!("{} speaker rows for batch extent {n}", rows.len()),
            });
        }
        let d = self.config.embedding_dim;
        let mut user = Tensor::zeros(&[n, d]);
        for (ni, row) in rows.iter().enumerate() {
            if *row >= self.embedding.rows() {
                return Err(KwsError::UnknownSpeaker(format!("row {row}")));
            }
            user.data_mut()[ni * d..(ni + 1) * d].copy_from_slice(self.embedding.row(*row));
        }
        Ok(user)
    }

    fn user_matrix(&self, select: &RowSelect, n: usize) -> Result<Option<Tensor<E>>> {
        if self.config.fusion == FusionMode::None {
            return Ok(None);
        }
        match select {
            RowSelect::Rows(rows) => Ok(Some(self.gather_rows(rows, n)?)),
            RowSelect::Baseline => {
                let row = self.baseline_row();
                let d = row.len();
                let mut user = Tensor::zeros(&[n, d]);
                for ni in 0..n {
                    user.data_mut()[ni * d..(ni + 1) * d].copy_from_slice(&row);
                }
                Ok(Some(user))
            }
        }
    }

    /// Inference-mode forward for registered speaker ids.
    pub fn forward(&self, features: &Tensor<E>, speakers: &[&str]) -> Result<Tensor<E>> {
        let rows: Vec<usize> = speakers
            .iter()
            .map(|s| self.embedding.lookup(s))
            .collect::<Result<_>>()?;
        self.forward_rows(features, &RowSelect::Rows(&rows))
    }

    /// Inference-mode forward with explicit row selection.
    pub fn forward_rows(&self, features: &Tensor<E>, select: &RowSelect) -> Result<Tensor<E>> {
        let pooled = self.backbone_infer(features)?;
        let n = pooled.shape()[0];
        let user = self.user_matrix(select, n)?;
        let fused = fuse_batch(
            &pooled,
            user.as_ref(),
            self.config.fusion,
            self.config.classifier_input(),
        )?;
        ops::linear(&fused, &self.classifier.weight.value, &self.classifier.bias.value)
    }

    /// Training-mode forward. With a frozen backbone (embedding-only or
    /// classifier-only policies) batchnorm uses running statistics and no
    /// layer caches are kept; otherwise batchnorm normalizes over the batch
    /// and running statistics update when `update_running` is set.
    pub fn forward_train(
        &mut self,
        features: &Tensor<E>,
        rows: &[usize],
        update_running: bool,
    ) -> Result<(Tensor<E>, Tape<E>)> {
        let frozen = self.policy.backbone_frozen();
        let (pooled, units, pre_pool_shape) = if frozen {
            let pooled = self.backbone_infer(features)?;
            (pooled, None, Vec::new())
        } else {
            let mut units = Vec::new();
            let mut x = features.clone();
            // initial conv block
            let conv_out = ops::conv2d(
                &x,
                &self.conv1.kernel.value,
                &self.conv1.bias.value,
                &self.conv1.spec,
            )?;
            let (bn_out, bn_cache) = self.conv1.bn.train(&conv_out, update_running)?;
            units.push(UnitTape {
                conv_input: x,
                bn_cache,
                bn_out: bn_out.clone(),
            });
            x = ops::relu(&bn_out);
            for bi in 0..self.blocks.len() {
                let dw_out = ops::depthwise_conv2d(
                    &x,
                    &self.blocks[bi].dw.kernel.value,
                    &self.blocks[bi].dw.bias.value,
                    &DS_SPEC,
                )?;
                let (bn_out, bn_cache) = self.blocks[bi].dw.bn.train(&dw_out, update_running)?;
                units.push(UnitTape {
                    conv_input: x,
                    bn_cache,
                    bn_out: bn_out.clone(),
                });
                x = ops::relu(&bn_out);

                let pw_out = ops::conv2d(
                    &x,
                    &self.blocks[bi].pw.kernel.value,
                    &self.blocks[bi].pw.bias.value,
                    &self.blocks[bi].pw.spec,
                )?;
                let (bn_out, bn_cache) = self.blocks[bi].pw.bn.train(&pw_out, update_running)?;
                units.push(UnitTape {
                    conv_input: x,
                    bn_cache,
                    bn_out: bn_out.clone(),
                });
                x = ops::relu(&bn_out);
            }
            let shape = x.shape().to_vec();
            let pooled = ops::avgpool_global(&x)?;
            (pooled, Some(units), shape)
        };

        let n = pooled.shape()[0];
        let user = self.user_matrix(&RowSelect::Rows(rows), n)?;
        let fused = fuse_batch(
            &pooled,
            user.as_ref(),
            self.config.fusion,
            self.config.classifier_input(),
        )?;
        let logits = ops::linear(
            &fused,
            &self.classifier.weight.value,
            &self.classifier.bias.value,
        )?;
        Ok((
            logits,
            Tape {
                units,
                pre_pool_shape,
                pooled,
                user,
                rows: rows.to_vec(),
                fused,
            },
        ))
    }

    /// Accumulates parameter gradients from `grad_logits`. Gradients land
    /// only in trainable parameters; under embedding-only with an active
    /// row, only that row receives gradient.
    pub fn backward(&mut self, tape: &Tape<E>, grad_logits: &Tensor<E>) -> Result<()> {
        let (grad_fused, grad_w, grad_b) = ops::linear_backward(
            &tape.fused,
            &self.classifier.weight.value,
            grad_logits,
        );
        if self.classifier.weight.trainable {
            self.classifier.weight.accumulate_grad(&grad_w);
            self.classifier.bias.accumulate_grad(&grad_b);
        }

        let (grad_pooled, grad_user) = fuse_backward(
            &grad_fused,
            &tape.pooled,
            tape.user.as_ref(),
            self.config.fusion,
        );

        if self.embedding.weight.trainable {
            if let Some(gu) = &grad_user {
                let d = self.config.embedding_dim;
                let table_grad = self.embedding.weight.grad.data_mut();
                for (ni, row) in tape.rows.iter().enumerate() {
                    if let Some(active) = self.active_row {
                        if *row != active {
                            continue;
                        }
                    }
                    let src = &gu.data()[ni * d..(ni + 1) * d];
                    let dst = &mut table_grad[row * d..(row + 1) * d];
                    for (g, s) in dst.iter_mut().zip(src) {
                        *g = *g + *s;
                    }
                }
            }
        }

        let units = match &tape.units {
            None => return Ok(()), // frozen backbone: nothing further trains
            Some(units) => units,
        };

        // unpool, then walk conv units in reverse
        let mut grad_x = ops::avgpool_global_backward(&tape.pre_pool_shape, &grad_pooled);

        enum UnitKind {
            Initial,
            Dw(usize),
            Pw(usize),
        }
        let mut kinds = vec![UnitKind::Initial];
        for bi in 0..self.blocks.len() {
            kinds.push(UnitKind::Dw(bi));
            kinds.push(UnitKind::Pw(bi));
        }

        for (kind, unit) in kinds.iter().zip(units.iter()).rev() {
            // through relu
            let grad_bn_out = ops::relu_backward(&unit.bn_out, &grad_x);
            let gamma = match kind {
                UnitKind::Initial => &self.conv1.bn.gamma.value,
                UnitKind::Dw(bi) => &self.blocks[*bi].dw.bn.gamma.value,
                UnitKind::Pw(bi) => &self.blocks[*bi].pw.bn.gamma.value,
            };
            let (grad_conv_out, grad_gamma, grad_beta) =
                ops::batchnorm_backward(&unit.bn_cache, gamma, &grad_bn_out);

            match kind {
                UnitKind::Initial => {
                    let (gx, gk, gb) = ops::conv2d_backward(
                        &unit.conv_input,
                        &self.conv1.kernel.value,
                        &self.conv1.spec,
                        &grad_conv_out,
                    )?;
                    if self.conv1.kernel.trainable {
                        self.conv1.kernel.accumulate_grad(&gk);
                        self.conv1.bias.accumulate_grad(&gb);
                        self.conv1.bn.gamma.accumulate_grad(&grad_gamma);
                        self.conv1.bn.beta.accumulate_grad(&grad_beta);
                    }
                    grad_x = gx;
                }
                UnitKind::Dw(bi) => {
                    let block = &mut self.blocks[*bi];
                    let (gx, gk, gb) = ops::depthwise_conv2d_backward(
                        &unit.conv_input,
                        &block.dw.kernel.value,
                        &DS_SPEC,
                        &grad_conv_out,
                    )?;
                    if block.dw.kernel.trainable {
                        block.dw.kernel.accumulate_grad(&gk);
                        block.dw.bias.accumulate_grad(&gb);
                        block.dw.bn.gamma.accumulate_grad(&grad_gamma);
                        block.dw.bn.beta.accumulate_grad(&grad_beta);
                    }
                    grad_x = gx;
                }
                UnitKind::Pw(bi) => {
                    let block = &mut self.blocks[*bi];
                    let (gx, gk, gb) = ops::conv2d_backward(
                        &unit.conv_input,
                        &block.pw.kernel.value,
                        &block.pw.spec,
                        &grad_conv_out,
                    )?;
                    if block.pw.kernel.trainable {
                        block.pw.kernel.accumulate_grad(&gk);
                        block.pw.bias.accumulate_grad(&gb);
                        block.pw.bn.gamma.accumulate_grad(&grad_gamma);
                        block.pw.bn.beta.accumulate_grad(&grad_beta);
                    }
                    grad_x = gx;
                }
            }
        }
        Ok(())
    }

    // -- parameter traversal -------------------------------------------------

    fn visit_backbone_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<E>)) {
        f(&mut self.conv1.kernel);
        f(&mut self.conv1.bias);
        f(&mut self.conv1.bn.gamma);
        f(&mut self.conv1.bn.beta);
        for block in &mut self.blocks {
            f(&mut block.dw.kernel);
            f(&mut block.dw.bias);
            f(&mut block.dw.bn.gamma);
            f(&mut block.dw.bn.beta);
            f(&mut block.pw.kernel);
            f(&mut block.pw.bias);
            f(&mut block.pw.bn.gamma);
            f(&mut block.pw.bn.beta);
        }
    }

    /// Visits every parameter with a stable name, in a stable order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Parameter<E>)) {
        f("conv1.kernel", &self.conv1.kernel);
        f("conv1.bias", &self.conv1.bias);
        f("conv1.bn.gamma", &self.conv1.bn.gamma);
        f("conv1.bn.beta", &self.conv1.bn.beta);
        for (bi, block) in self.blocks.iter().enumerate() {
            f(&format!("blocks.{bi}.dw.kernel"), &block.dw.kernel);
            f(&format!("blocks.{bi}.dw.bias"), &block.dw.bias);
            f(&format!("blocks.{bi}.dw.bn.gamma"), &block.dw.bn.gamma);
            f(&format!("blocks.{bi}.dw.bn.beta"), &block.dw.bn.beta);
            f(&format!("blocks.{bi}.pw.kernel"), &block.pw.kernel);
            f(&format!("blocks.{bi}.pw.bias"), &block.pw.bias);
            f(&format!("blocks.{bi}.pw.bn.gamma"), &block.pw.bn.gamma);
            f(&format!("blocks.{bi}.pw.bn.beta"), &block.pw.bn.beta);
        }
        f("classifier.weight", &self.classifier.weight);
        f("classifier.bias", &self.classifier.bias);
        if self.config.fusion != FusionMode::None {
            f("embedding.weight", &self.embedding.weight);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter<E>)) {
        f("conv1.kernel", &mut self.conv1.kernel);
        f("conv1.bias", &mut self.conv1.bias);
        f("conv1.bn.gamma", &mut self.conv1.bn.gamma);
        f("conv1.bn.beta", &mut self.conv1.bn.beta);
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            f(&format!("blocks.{bi}.dw.kernel"), &mut block.dw.kernel);
            f(&format!("blocks.{bi}.dw.bias"), &mut block.dw.bias);
            f(&format!("blocks.{bi}.dw.bn.gamma"), &mut block.dw.bn.gamma);
            f(&format!("blocks.{bi}.dw.bn.beta"), &mut block.dw.bn.beta);
            f(&format!("blocks.{bi}.pw.kernel"), &mut block.pw.kernel);
            f(&format!("blocks.{bi}.pw.bias"), &mut block.pw.bias);
            f(&format!("blocks.{bi}.pw.bn.gamma"), &mut block.pw.bn.gamma);
            f(&format!("blocks.{bi}.pw.bn.beta"), &mut block.pw.bn.beta);
        }
        f("classifier.weight", &mut self.classifier.weight);
        f("classifier.bias", &mut self.classifier.bias);
        if self.config.fusion != FusionMode::None {
            f("embedding.weight", &mut self.embedding.weight);
        }
    }

    /// Visits non-parameter state buffers (batchnorm running statistics).
    pub fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f("conv1.bn.running_mean", &self.conv1.bn.running.mean);
        f("conv1.bn.running_var", &self.conv1.bn.running.var);
        for (bi, block) in self.blocks.iter().enumerate() {
            f(&format!("blocks.{bi}.dw.bn.running_mean"), &block.dw.bn.running.mean);
            f(&format!("blocks.{bi}.dw.bn.running_var"), &block.dw.bn.running.var);
            f(&format!("blocks.{bi}.pw.bn.running_mean"), &block.pw.bn.running.mean);
            f(&format!("blocks.{bi}.pw.bn.running_var"), &block.pw.bn.running.var);
        }
    }

    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f("conv1.bn.running_mean", &mut self.conv1.bn.running.mean);
        f("conv1.bn.running_var", &mut self.conv1.bn.running.var);
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            f(&format!("blocks.{bi}.dw.bn.running_mean"), &mut block.dw.bn.running.mean);
            f(&format!("blocks.{bi}.dw.bn.running_var"), &mut block.dw.bn.running.var);
            f(&format!("blocks.{bi}.pw.bn.running_mean"), &mut block.pw.bn.running.mean);
            f(&format!("blocks.{bi}.pw.bn.running_var"), &mut block.pw.bn.running.var);
        }
    }

    /// Total parameter count, embedding rows included.
    pub fn num_params(&self) -> u64 {
        let mut n = 0u64;
        self.visit_params(&mut |_, p| n += p.value.numel() as u64);
        n
    }

    // -- optimization helpers ----------------------------------------------

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    pub fn init_optimizer(&mut self, hyper: AdamHyper<E>) {
        self.visit_params_mut(&mut |_, p| adam::init(p, hyper));
    }

    pub fn set_lr(&mut self, lr: E) {
        self.visit_params_mut(&mut |_, p| {
            if let Some(state) = p.state.as_mut() {
                state.hyper.lr = lr;
            }
        });
    }

    /// One Adam step on every trainable parameter.
    pub fn step_optimizer(&mut self) {
        self.visit_params_mut(&mut |_, p| {
            if p.trainable {
                adam::step(p);
            }
        });
    }

    /// In-memory copy of all parameter and state values (for best-epoch
    /// restore). Relies on the stable visit order.
    pub fn snapshot(&self) -> ModelSnapshot<E> {
        let mut params = Vec::new();
        self.visit_params(&mut |_, p| params.push(p.value.data().to_vec()));
        let mut state = Vec::new();
        self.visit_state(&mut |_, t| state.push(t.data().to_vec()));
        ModelSnapshot { params, state }
    }

    pub fn restore(&mut self, snapshot: &ModelSnapshot<E>) {
        let mut i = 0;
        self.visit_params_mut(&mut |_, p| {
            p.value.data_mut().copy_from_slice(&snapshot.params[i]);
            i += 1;
        });
        let mut j = 0;
        self.visit_state_mut(&mut |_, t| {
            t.data_mut().copy_from_slice(&snapshot.state[j]);
            j += 1;
        });
    }

    /// Element-exact copy at another precision (for f64 gradient oracles).
    pub fn cast<F: Scalar>(&self) -> KwsModel<F> {
        let mut other = KwsModel::<F>::build(self.config.clone(), 0).expect("same config");
        // copy embedding table structure
        for id in self.embedding.ids() {
            let row = self.embedding.row(self.embedding.lookup(id).unwrap());
            let cast_row: Vec<F> = row.iter().map(|v| F::from_f64_lossy(v.to_f64_lossy())).collect();
            other.embedding.add_row(id, cast_row).unwrap();
        }
        let mut values: Vec<Vec<F>> = Vec::new();
        self.visit_params(&mut |_, p| {
            values.push(p.value.data().iter().map(|v| F::from_f64_lossy(v.to_f64_lossy())).collect())
        });
        let mut i = 0;
        other.visit_params_mut(&mut |_, p| {
            p.value.data_mut().copy_from_slice(&values[i]);
            i += 1;
        });
        let mut state: Vec<Vec<F>> = Vec::new();
        self.visit_state(&mut |_, t| {
            state.push(t.data().iter().map(|v| F::from_f64_lossy(v.to_f64_lossy())).collect())
        });
        let mut j = 0;
        other.visit_state_mut(&mut |_, t| {
            t.data_mut().copy_from_slice(&state[j]);
            j += 1;
        });
        other.vocab = self.vocab.clone();
        other.feature_stats = self.feature_stats.clone();
        other.mfcc_config = self.mfcc_config.clone();
        other.apply_policy(self.policy, self.active_row);
        other
    }
}

/// Raw parameter/state values captured by [`KwsModel::snapshot`].
#[derive(Debug, Clone)]
pub struct ModelSnapshot<E> {
    params: Vec<Vec<E>>,
    state: Vec<Vec<E>>,
}

#[cfg(test)]
mod tests;

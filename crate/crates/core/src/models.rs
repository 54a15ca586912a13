//! Model assembly: the two fusion transformers, the three lesioned
//! baselines, and checkpoint files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedder::{Embedder, EmbedderConfig, GateKind};
use crate::error::{Error, Result};
use crate::metrics::RatingSeries;
use crate::mfn::{Mfn, MfnConfig};
use crate::nn::{Init, Linear};
use crate::recurrent::RecurrentDecoder;
use crate::tensor::{finite_diff_check, GradCheckOptions, GradCheckReport, Graph, ParamStore, RngState, Tensor, Var};
use crate::transformer::{Encoder, PositionalMode, TransformerConfig};
use crate::windowing::{oversample_index, window_count, window_stream, ModalityStream, WindowPlan, WindowedModality};
use crate::{Modality, ModalitySet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "SFT")]
    Sft,
    #[serde(rename = "MFT")]
    Mft,
    #[serde(rename = "B1_LSTM")]
    B1Lstm,
    #[serde(rename = "B2_TRANS")]
    B2Trans,
    #[serde(rename = "B3_MFN")]
    B3Mfn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Sft,
        ModelKind::Mft,
        ModelKind::B1Lstm,
        ModelKind::B2Trans,
        ModelKind::B3Mfn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Sft => "SFT",
            ModelKind::Mft => "MFT",
            ModelKind::B1Lstm => "B1-LSTM",
            ModelKind::B2Trans => "B2-Trans",
            ModelKind::B3Mfn => "B3-MFN",
        }
    }

    /// Whether the kind fuses through the memory network (two or more modalities).
    pub fn uses_memory_fusion(self) -> bool {
        matches!(self, ModelKind::Mft | ModelKind::B3Mfn)
    }

    pub fn has_transformer(self) -> bool {
        matches!(self, ModelKind::Sft | ModelKind::Mft | ModelKind::B2Trans)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "sft" => ModelKind::Sft,
            "mft" => ModelKind::Mft,
            "b1" | "b1lstm" | "lstm" => ModelKind::B1Lstm,
            "b2" | "b2trans" | "trans" => ModelKind::B2Trans,
            "b3" | "b3mfn" | "mfn" => ModelKind::B3Mfn,
            _ => return Err(Error::Config(format!("unknown model kind '{s}'"))),
        })
    }
}

/// Everything that determines an architecture and its initial parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub modalities: ModalitySet,
    /// Raw feature width per modality.
    pub input_dims: BTreeMap<Modality, usize>,
    /// Window embedding width per modality.
    pub d_m: BTreeMap<Modality, usize>,
    pub window: WindowPlan,
    pub kernel: usize,
    pub gate: GateKind,
    /// Fused width; derived from the embedding widths when absent.
    pub d_model: Option<usize>,
    pub n_heads: usize,
    pub n_blocks: usize,
    /// Feed-forward width as a multiple of the model width.
    pub ffn_mult: usize,
    pub decoder_hidden: usize,
    pub d_mem: usize,
    pub mfn_hidden: usize,
    pub cnn_dropout: f64,
    pub transformer_dropout: f64,
    pub dman_dropout: f64,
    pub output_dropout: f64,
    pub positional: PositionalMode,
    pub causal: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size widths: embeddings 256/256/300, memory and decoder 128.
    pub fn paper(kind: ModelKind, modalities: ModalitySet, input_dims: BTreeMap<Modality, usize>) -> Self {
        let d_m = [(Modality::Visual, 256), (Modality::Acoustic, 256), (Modality::Linguistic, 300)]
            .into_iter()
            .collect();
        ModelConfig {
            kind,
            modalities,
            input_dims,
            d_m,
            window: WindowPlan::default(),
            kernel: 2,
            gate: GateKind::Softmax,
            d_model: None,
            n_heads: 8,
            n_blocks: 6,
            ffn_mult: 4,
            decoder_hidden: 128,
            d_mem: 128,
            mfn_hidden: 128,
            cnn_dropout: 0.3,
            transformer_dropout: 0.1,
            dman_dropout: 0.2,
            output_dropout: 0.5,
            positional: PositionalMode::Sinusoidal,
            causal: false,
            seed: 0,
        }
    }

    /// Same topology with every width shrunk to 32 for minutes-scale CPU training.
    pub fn desk(kind: ModelKind, modalities: ModalitySet, input_dims: BTreeMap<Modality, usize>) -> Self {
        let mut c = Self::paper(kind, modalities, input_dims);
        c.d_m = Modality::ALL.iter().map(|&m| (m, 32)).collect();
        c.decoder_hidden = 32;
        c.d_mem = 32;
        c.mfn_hidden = 32;
        c
    }

    /// Tiny widths for finite-difference checks and structural tests.
    pub fn toy(kind: ModelKind, modalities: ModalitySet, input_dims: BTreeMap<Modality, usize>) -> Self {
        let mut c = Self::paper(kind, modalities, input_dims);
        c.d_m = Modality::ALL.iter().map(|&m| (m, 8)).collect();
        c.n_blocks = 2;
        c.ffn_mult = 2;
        c.decoder_hidden = 4;
        c.d_mem = 4;
        c.mfn_hidden = 6;
        c
    }

    pub fn d_m_for(&self, m: Modality) -> Result<usize> {
        self.d_m
            .get(&m)
            .copied()
            .ok_or_else(|| Error::Config(format!("no embedding width for modality {m}")))
    }

    pub fn input_dim_for(&self, m: Modality) -> Result<usize> {
        self.input_dims
            .get(&m)
            .copied()
            .ok_or_else(|| Error::Config(format!("no input width for modality {m}")))
    }

    /// Fused width: `8·round(Σ d_m / 8)` unless set explicitly.
    pub fn fused_width(&self) -> Result<usize> {
        if let Some(d) = self.d_model {
            return Ok(d);
        }
        let mut total = 0;
        for m in self.modalities.iter() {
            total += self.d_m_for(m)?;
        }
        Ok((8 * ((total as f64 / 8.0).round() as usize)).max(8))
    }

    /// Per-modality encoder width `8·ceil(d_m / 8)`.
    pub fn encoder_width(&self, m: Modality) -> Result<usize> {
        Ok(8 * self.d_m_for(m)?.div_ceil(8))
    }

    fn transformer(&self, d_model: usize) -> TransformerConfig {
        TransformerConfig {
            d_model,
            n_heads: self.n_heads,
            n_blocks: self.n_blocks,
            ffn_dim: self.ffn_mult * d_model,
            dropout: self.transformer_dropout,
            positional: self.positional,
            causal: self.causal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        if self.kind.uses_memory_fusion() && self.modalities.len() < 2 {
            return Err(Error::Config(format!(
                "{} fuses through memory attention and needs at least two modalities, got {}",
                self.kind, self.modalities
            )));
        }
        for m in self.modalities.iter() {
            self.input_dim_for(m)?;
            self.d_m_for(m)?;
            let n = self.window.n_max_for(m)?;
            if n < self.kernel {
                return Err(Error::WindowTooShort {
                    len: n,
                    kernel: self.kernel,
                });
            }
        }
        for (name, p) in [
            ("cnn", self.cnn_dropout),
            ("transformer", self.transformer_dropout),
            ("dman", self.dman_dropout),
            ("output", self.output_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} dropout {p} is outside [0, 1)")));
            }
        }
        if self.kind.has_transformer() {
            match self.kind {
                ModelKind::Mft => {
                    for m in self.modalities.iter() {
                        self.transformer(self.encoder_width(m)?).validate()?;
                    }
                }
                _ => self.transformer(self.fused_width()?).validate()?,
            }
        }
        Ok(())
    }
}

/// Windowed inputs of one clip for a configured modality set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipInputs {
    pub n_windows: usize,
    pub modalities: BTreeMap<Modality, WindowedModality>,
}

impl ClipInputs {
    pub fn new(
        streams: &BTreeMap<Modality, ModalityStream>,
        duration: f64,
        plan: &WindowPlan,
        modalities: &ModalitySet,
    ) -> Result<Self> {
        let n_windows = window_count(duration, plan.tau);
        let mut out = BTreeMap::new();
        for m in modalities.iter() {
            let stream = streams.get(&m).ok_or(Error::MissingModality(m))?;
            out.insert(m, window_stream(stream, plan, n_windows)?);
        }
        Ok(ClipInputs {
            n_windows,
            modalities: out,
        })
    }

    /// Shuffles the common windows of every modality by `perm`
    /// (`new[i] = old[perm[i]]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (&m, w) in &self.modalities {
            // expand to one stack per common window so any permutation is expressible
            let rows: Vec<Vec<f64>> = perm
                .iter()
                .map(|&i| {
                    let src = *w.index.get(i).ok_or_else(|| Error::Data(format!("window {i} out of range")))?;
                    let width = w.windows.numel() / w.windows.shape()[0];
                    Ok(w.windows.data()[src * width..(src + 1) * width].to_vec())
                })
                .collect::<Result<_>>()?;
            let mut shape = w.windows.shape().to_vec();
            shape[0] = perm.len();
            out.insert(
                m,
                WindowedModality {
                    modality: m,
                    windows: Tensor::new(shape, rows.concat())?,
                    index: (0..perm.len()).collect(),
                },
            );
        }
        Ok(ClipInputs {
            n_windows: perm.len(),
            modalities: out,
        })
    }
}

#[derive(Debug, Clone)]
struct Layers {
    /// Embedders in `(V, A, L)` order of the configured set.
    embedders: Vec<(Modality, Embedder)>,
    fuse: Option<Linear>,
    /// Dimension-repair projections in `(A, L, V)` order.
    projections: Vec<(Modality, Linear)>,
    /// One shared encoder (simple fusion) or one per modality (`(A, L, V)`).
    encoders: Vec<Encoder>,
    decoder: Option<RecurrentDecoder>,
    head: Option<Linear>,
    mfn: Option<Mfn>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layers: Layers,
}

/// Builds a model with parameters drawn from `config.seed`.
pub fn build_model(config: ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = RngState::new(config.seed);
    let mut init = Init::new(&mut store, &mut rng);
    let c = &config;

    let mut embedders = Vec::new();
    for m in c.modalities.iter() {
        let ec = EmbedderConfig {
            modality: m,
            input_dim: c.input_dim_for(m)?,
            n_max: c.window.n_max_for(m)?,
            d_out: c.d_m_for(m)?,
            kernel: c.kernel,
            dropout: c.cnn_dropout,
            gate: c.gate,
        };
        embedders.push((m, Embedder::new(&mut init, &format!("embed.{}", m.letter()), ec)?));
    }

    let mut layers = Layers {
        embedders,
        fuse: None,
        projections: Vec::new(),
        encoders: Vec::new(),
        decoder: None,
        head: None,
        mfn: None,
    };

    if c.kind.uses_memory_fusion() {
        let mut streams = Vec::new();
        for m in c.modalities.mfn_order() {
            let width = c.encoder_width(m)?;
            layers
                .projections
                .push((m, init.linear(&format!("project.{}", m.letter()), c.d_m_for(m)?, width)?));
            if c.kind == ModelKind::Mft {
                layers
                    .encoders
                    .push(Encoder::new(&mut init, &format!("encoder.{}", m.letter()), c.transformer(width))?);
            }
            streams.push((m, width, c.d_m_for(m)?));
        }
        let mc = MfnConfig {
            streams,
            d_mem: c.d_mem,
            net_hidden: c.mfn_hidden,
            dman_dropout: c.dman_dropout,
            output_dropout: c.output_dropout,
        };
        layers.mfn = Some(Mfn::new(&mut init, "mfn", mc)?);
    } else {
        let concat: usize = c.modalities.iter().map(|m| c.d_m_for(m)).sum::<Result<usize>>()?;
        let d_model = c.fused_width()?;
        layers.fuse = Some(init.linear("fuse", concat, d_model)?);
        if c.kind.has_transformer() {
            layers.encoders.push(Encoder::new(&mut init, "encoder", c.transformer(d_model))?);
        }
        match c.kind {
            ModelKind::B2Trans => layers.head = Some(init.linear("head", d_model, 1)?),
            _ => layers.decoder = Some(RecurrentDecoder::new(&mut init, "decoder", d_model, c.decoder_hidden)?),
        }
    }

    Ok(Model {
        config,
        params: store,
        layers,
    })
}

/// Concatenates per-window embeddings (rows aligned) and maps them through
/// `tanh(x W + b)`.
pub fn fuse_simple(g: &mut Graph<'_>, fuse: &Linear, embeddings: &[Var]) -> Result<Var> {
    if embeddings.is_empty() {
        return Err(Error::Config("nothing to fuse".into()));
    }
    let cat = if embeddings.len() == 1 {
        embeddings[0]
    } else {
        g.concat(embeddings, 1)?
    };
    let z = fuse.forward(g, cat)?;
    Ok(g.tanh(z))
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Per-modality `n_windows × d_m` embeddings, keyed by modality.
    pub fn embed(&self, g: &mut Graph<'_>, inputs: &ClipInputs) -> Result<BTreeMap<Modality, Var>> {
        let mut out = BTreeMap::new();
        for (m, e) in &self.layers.embedders {
            let w = inputs.modalities.get(m).ok_or(Error::MissingModality(*m))?;
            let x = g.constant(w.windows.clone());
            let per_source = e.embed_windows(g, x)?;
            let aligned = if w.index.iter().enumerate().all(|(i, &j)| i == j) && w.index.len() == w.windows.shape()[0] {
                per_source
            } else {
                g.gather_rows(per_source, &w.index)?
            };
            out.insert(*m, aligned);
        }
        Ok(out)
    }

    /// Full pipeline; returns `n_windows × 1` predictions.
    pub fn forward(&self, g: &mut Graph<'_>, inputs: &ClipInputs) -> Result<Var> {
        if inputs.n_windows == 0 {
            return Ok(g.constant(Tensor::zeros(&[0, 1])));
        }
        let emb = self.embed(g, inputs)?;
        let l = &self.layers;
        if let Some(mfn) = &l.mfn {
            let mut seqs = Vec::with_capacity(l.projections.len());
            for (k, (m, proj)) in l.projections.iter().enumerate() {
                let x = proj.forward(g, emb[m])?;
                let x = match l.encoders.get(k) {
                    Some(enc) => enc.encode(g, x)?,
                    None => x,
                };
                seqs.push(x);
            }
            return mfn.forward(g, &seqs);
        }
        let parts: Vec<Var> = emb.values().copied().collect();
        // BTreeMap order is V, A, L (declaration order of Modality)
        let fuse = l.fuse.as_ref().expect("simple-fusion kinds own a fusion layer");
        let mut x = fuse_simple(g, fuse, &parts)?;
        if let Some(enc) = l.encoders.first() {
            x = enc.encode(g, x)?;
        }
        match (&l.decoder, &l.head) {
            (Some(dec), _) => dec.decode_sequence(g, x),
            (None, Some(head)) => head.forward(g, x),
            (None, None) => unreachable!("simple-fusion kinds own a decoder or head"),
        }
    }

    /// Eval-mode predictions, one per common window.
    pub fn predict(&self, inputs: &ClipInputs) -> Result<RatingSeries> {
        let mut g = Graph::eval(&self.params);
        let out = self.forward(&mut g, inputs)?;
        let values = g.value(out).data().to_vec();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("prediction is not finite".into()));
        }
        Ok(RatingSeries::new(self.config.window.tau, values))
    }

    /// Predictions for a clip given its raw streams and duration.
    pub fn predict_clip(&self, streams: &BTreeMap<Modality, ModalityStream>, duration: f64) -> Result<RatingSeries> {
        let inputs = ClipInputs::new(streams, duration, &self.config.window, &self.config.modalities)?;
        self.predict(&inputs)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(_, name, t)| NamedArray {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string(&ck).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut model = build_model(ck.config)?;
        if ck.params.len() != model.params.len() {
            return Err(Error::Data(format!(
                "{}: checkpoint holds {} arrays, model expects {}",
                path.display(),
                ck.params.len(),
                model.params.len()
            )));
        }
        for arr in ck.params {
            let id = model
                .params
                .id(&arr.name)
                .ok_or_else(|| Error::Data(format!("{}: unknown parameter '{}'", path.display(), arr.name)))?;
            if model.params.get(id).shape() != arr.shape.as_slice() {
                return Err(Error::shape("checkpoint", model.params.get(id).shape(), &arr.shape));
            }
            model.params.set_data(id, arr.data)?;
        }
        Ok(model)
    }
}

/// Random stacked windows for `n_windows` common windows of every
/// configured modality.
pub fn toy_inputs(config: &ModelConfig, n_windows: usize, rng: &mut RngState) -> Result<ClipInputs> {
    let mut modalities = BTreeMap::new();
    for m in config.modalities.iter() {
        let ratio = config.window.ratio(m)?;
        let (d, n_max) = (config.input_dim_for(m)?, config.window.n_max_for(m)?);
        let n_src = n_windows.div_ceil(ratio);
        let data = (0..n_src * d * n_max).map(|_| rng.normal(0.0, 1.0)).collect();
        modalities.insert(
            m,
            WindowedModality {
                modality: m,
                windows: Tensor::new(vec![n_src, d, n_max], data)?,
                index: oversample_index(n_windows, ratio),
            },
        );
    }
    Ok(ClipInputs { n_windows, modalities })
}

/// Toy architecture of `kind` over `modalities` with small raw widths and
/// three-column windows.
pub fn toy_config(kind: ModelKind, modalities: ModalitySet, seed: u64) -> ModelConfig {
    let dims = [(Modality::Visual, 3), (Modality::Acoustic, 2), (Modality::Linguistic, 4)]
        .into_iter()
        .collect();
    let mut c = ModelConfig::toy(kind, modalities, dims);
    c.window.n_max = Modality::ALL.iter().map(|&m| (m, 3)).collect();
    c.seed = seed;
    c
}

/// Step used for whole-model checks. At `1e-5` the loss round-off divided
/// by the step (~1e-11) is comparable to the smallest memory-network
/// gradients (~1e-9), which alone pushes relative errors toward 1e-3.
pub const MODEL_CHECK_STEP: f64 = 1e-4;

pub fn model_check_options(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        step: MODEL_CHECK_STEP,
        seed,
        ..GradCheckOptions::default()
    }
}

/// Central-difference check of a toy model's MSE gradient on a random
/// four-window clip.
pub fn gradcheck_model(kind: ModelKind, modalities: ModalitySet, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    const WINDOWS: usize = 4;
    let mut model = build_model(toy_config(kind, modalities, seed))?;
    let mut rng = RngState::with_stream(seed, 1);
    let inputs = toy_inputs(&model.config, WINDOWS, &mut rng)?;
    let target = Tensor::new(vec![WINDOWS, 1], (0..WINDOWS).map(|_| rng.uniform(-1.0, 1.0)).collect())?;
    let layers = model.layers.clone();
    let config = model.config.clone();
    let view = Model {
        config,
        params: ParamStore::new(),
        layers,
    };
    finite_diff_check(&mut model.params, opts, |g| {
        let pred = view.forward(g, &inputs)?;
        let t = g.constant(target.clone());
        g.mse(pred, t)
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    config: ModelConfig,
    params: Vec<NamedArray>,
}

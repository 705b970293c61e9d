//! Audio-only, GSC-only and fused tagging models.
//!
//! All variants share parameter names for common parts (`audio.*`, `head.*`, `gsc_head.*`),
//! and every parameter is initialized from `(seed, name)`, so two variants built with the same
//! seed start with identical audio pathways.

mod layers;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Checkpoint, ParamStore, Tape, Tensor, TensorError, Var};
use layers::{init_tensor, Init, Scope};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("variant {0:?} requires the patch transformer backbone")]
    WrongBackbone(Variant),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint does not match the model: {0}")]
    Checkpoint(String),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    AudioOnly,
    GscOnly,
    EarlyChannel,
    EarlyToken,
    Inter,
    Late,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::AudioOnly,
        Variant::GscOnly,
        Variant::EarlyChannel,
        Variant::EarlyToken,
        Variant::Inter,
        Variant::Late,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::AudioOnly => "audio_only",
            Variant::GscOnly => "gsc_only",
            Variant::EarlyChannel => "early_channel",
            Variant::EarlyToken => "early_token",
            Variant::Inter => "inter",
            Variant::Late => "late",
        }
    }

    pub fn uses_audio(self) -> bool {
        self != Variant::GscOnly
    }

    pub fn uses_gsc(self) -> bool {
        self != Variant::AudioOnly
    }
}

impl std::str::FromStr for Variant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Time-mean pooling then an MLP over the frequency profile.
    MelMlp,
    /// Non-overlapping patches, [CLS] token, pre-LN encoder.
    Patch,
}

impl std::str::FromStr for Backbone {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mel_mlp" => Ok(Backbone::MelMlp),
            "patch" => Ok(Backbone::Patch),
            _ => Err(ModelError::Config(format!("unknown backbone {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub patch_t: usize,
    pub patch_f: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { patch_t: 16, patch_f: 16, d_model: 128, layers: 2, heads: 4, ff_dim: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: Backbone,
    pub n_frames: usize,
    pub n_mels: usize,
    pub gsc_dim: usize,
    pub n_classes: usize,
    /// MelMlp hidden sizes; the last one is the embedding width.
    pub mlp_hidden: Vec<usize>,
    pub patch: PatchConfig,
    /// Hidden sizes of the GSC-only / late-fusion GSC classifier before the class layer.
    pub gsc_hidden: Vec<usize>,
    /// Cross-attention heads in the intermediate variant.
    pub inter_heads: usize,
    /// Initial value of the late-fusion λ_raw (0 gives λ = ln 2).
    pub late_lambda_init: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::AudioOnly,
            backbone: Backbone::MelMlp,
            n_frames: 997,
            n_mels: 64,
            gsc_dim: 768,
            n_classes: 28,
            mlp_hidden: vec![512, 256],
            patch: PatchConfig::default(),
            gsc_hidden: vec![1024, 512],
            inter_heads: 1,
            late_lambda_init: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_mels == 0 || self.n_frames == 0 || self.gsc_dim == 0 || self.n_classes == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.variant == Variant::EarlyToken && self.backbone != Backbone::Patch {
            return Err(ModelError::WrongBackbone(self.variant));
        }
        match self.backbone {
            Backbone::MelMlp if self.mlp_hidden.is_empty() || self.mlp_hidden.contains(&0) => {
                return bad("mlp_hidden needs positive sizes".into())
            }
            Backbone::Patch => {
                let p = &self.patch;
                if p.patch_t == 0 || p.patch_f == 0 || p.heads == 0 || p.d_model % p.heads != 0 {
                    return bad("patch sizes must be positive and d_model divisible by heads".into());
                }
                if self.n_patches() == 0 {
                    return bad("spectrogram smaller than one patch".into());
                }
            }
            _ => {}
        }
        if self.variant == Variant::Inter && (self.inter_heads == 0 || self.d_emb() % self.inter_heads != 0) {
            return bad("embedding width must be divisible by inter_heads".into());
        }
        if self.gsc_hidden.contains(&0) {
            return bad("gsc_hidden sizes must be positive".into());
        }
        Ok(())
    }

    /// Embedding width of the audio encoder.
    pub fn d_emb(&self) -> usize {
        match self.backbone {
            Backbone::MelMlp => *self.mlp_hidden.last().unwrap_or(&0),
            Backbone::Patch => self.patch.d_model,
        }
    }

    /// Patch grid with trailing frames and bins truncated.
    pub fn patch_grid(&self) -> (usize, usize) {
        (self.n_frames / self.patch.patch_t, self.n_mels / self.patch.patch_f)
    }

    pub fn n_patches(&self) -> usize {
        let (a, b) = self.patch_grid();
        a * b
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| ModelError::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    cfg: ModelConfig,
    params: ParamStore,
}

/// Forward-pass outputs; `z_audio` and `z_gsc` are set for the late variant.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub logits: Var,
    pub z_audio: Option<Var>,
    pub z_gsc: Option<Var>,
}

impl FusionModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let seed = cfg.seed;
        let mut add = |name: &str, shape: &[usize], init: Init| {
            params.insert(name, init_tensor(seed, name, shape, init), true);
        };
        let (f, dg, c, de) = (cfg.n_mels, cfg.gsc_dim, cfg.n_classes, cfg.d_emb());
        let v = cfg.variant;

        if v.uses_audio() {
            match cfg.backbone {
                Backbone::MelMlp => {
                    let mut fan_in = f;
                    for (i, &h) in cfg.mlp_hidden.iter().enumerate() {
                        add(&format!("audio.mlp.{i}.w"), &[fan_in, h], Init::Xavier);
                        add(&format!("audio.mlp.{i}.b"), &[h], Init::Zeros);
                        fan_in = h;
                    }
                    if v == Variant::EarlyChannel {
                        add("audio.mlp.0.w_gsc", &[f, cfg.mlp_hidden[0]], Init::Zeros);
                    }
                }
                Backbone::Patch => {
                    let p = &cfg.patch;
                    let pd = p.patch_t * p.patch_f;
                    let d = p.d_model;
                    add("audio.patch.w", &[pd, d], Init::Xavier);
                    add("audio.patch.b", &[d], Init::Zeros);
                    if v == Variant::EarlyChannel {
                        add("audio.patch.w_gsc", &[pd, d], Init::Zeros);
                    }
                    add("audio.cls", &[1, d], Init::Normal(0.02));
                    add("audio.pos", &[cfg.n_patches() + 1, d], Init::Normal(0.02));
                    if v == Variant::EarlyToken {
                        add("audio.pos_gsc", &[1, d], Init::Zeros);
                        add("audio.gsc_token.w", &[dg, d], Init::Xavier);
                    }
                    for l in 0..p.layers {
                        let pre = format!("audio.layer.{l}");
                        for ln in ["ln1", "ln2"] {
                            add(&format!("{pre}.{ln}.g"), &[d], Init::Ones);
                            add(&format!("{pre}.{ln}.b"), &[d], Init::Zeros);
                        }
                        for proj in ["q", "k", "v", "o"] {
                            add(&format!("{pre}.attn.{proj}.w"), &[d, d], Init::Xavier);
                            add(&format!("{pre}.attn.{proj}.b"), &[d], Init::Zeros);
                        }
                        add(&format!("{pre}.ff.0.w"), &[d, p.ff_dim], Init::Xavier);
                        add(&format!("{pre}.ff.0.b"), &[p.ff_dim], Init::Zeros);
                        add(&format!("{pre}.ff.1.w"), &[p.ff_dim, d], Init::Xavier);
                        add(&format!("{pre}.ff.1.b"), &[d], Init::Zeros);
                        if v == Variant::EarlyToken {
                            add(&format!("{pre}.gsc_gate"), &[1], Init::Zeros);
                        }
                    }
                    add("audio.ln_f.g", &[d], Init::Ones);
                    add("audio.ln_f.b", &[d], Init::Zeros);
                }
            }
            if v == Variant::EarlyChannel {
                add("early.w_proj", &[dg, f], Init::Xavier);
            }
            add("head.w", &[de, c], Init::Xavier);
            add("head.b", &[c], Init::Zeros);
        }
        if matches!(v, Variant::GscOnly | Variant::Late) {
            let mut fan_in = dg;
            let sizes: Vec<usize> = cfg.gsc_hidden.iter().copied().chain([c]).collect();
            for (i, &h) in sizes.iter().enumerate() {
                add(&format!("gsc_head.{i}.w"), &[fan_in, h], Init::Xavier);
                add(&format!("gsc_head.{i}.b"), &[h], Init::Zeros);
                fan_in = h;
            }
        }
        if v == Variant::Late {
            add("late.lambda_raw", &[c], Init::Const(cfg.late_lambda_init));
        }
        if v == Variant::Inter {
            add("inter.gsc_mlp.0.w", &[dg, de], Init::Xavier);
            add("inter.gsc_mlp.0.b", &[de], Init::Zeros);
            add("inter.gsc_mlp.1.w", &[de, de], Init::Xavier);
            add("inter.gsc_mlp.1.b", &[de], Init::Zeros);
            for dir in ["a2g", "g2a"] {
                for proj in ["q", "k", "v"] {
                    add(&format!("inter.{dir}.{proj}.w"), &[de, de], Init::Xavier);
                }
            }
            add("inter.fuse.w", &[2 * de, de], Init::Xavier);
        }
        if v.uses_audio() {
            params.insert("norm.mean", Tensor::zeros(&[f]), false);
            params.insert("norm.std", Tensor::ones(&[f]), false);
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Overwrites a parameter's value, keeping its trainable flag.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.params.id(name).ok_or_else(|| ModelError::Config(format!("no parameter {name}")))?;
        let slot = self.params.value_mut(id);
        if slot.shape() != value.shape() {
            return Err(ModelError::Config(format!(
                "{name}: shape {:?} expected, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Copies every parameter of `other` whose name and shape match one of ours.
    /// Returns the number of parameters copied.
    pub fn copy_shared_from(&mut self, other: &FusionModel) -> usize {
        let mut n = 0;
        for p in other.params.iter() {
            if let Some(id) = self.params.id(&p.name) {
                if self.params.get(id).value.shape() == p.value.shape() {
                    *self.params.value_mut(id) = p.value.clone();
                    n += 1;
                }
            }
        }
        n
    }

    /// Per-mel-bin standardization applied to every audio input.
    pub fn set_audio_normalization(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        if !self.cfg.variant.uses_audio() {
            return Ok(());
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(ModelError::Config("normalization std must be positive".into()));
        }
        self.set_param("norm.mean", Tensor::from_vec(mean.to_vec()))?;
        self.set_param("norm.std", Tensor::from_vec(std.to_vec()))
    }

    /// Keeps the [GSC]-key attention weights non-negative; call after each optimizer step.
    pub fn project(&mut self) {
        for l in 0..self.cfg.patch.layers {
            if let Some(id) = self.params.id(&format!("audio.layer.{l}.gsc_gate")) {
                let t = self.params.value_mut(id);
                t.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
            }
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { config: self.cfg.to_toml(), params: self.params.clone() }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ModelConfig::from_toml(&ckpt.config)?;
        let fresh = Self::new(cfg.clone())?;
        for p in fresh.params.iter() {
            match ckpt.params.by_name(&p.name) {
                Some(v) if v.shape() == p.value.shape() => {}
                Some(v) => {
                    return Err(ModelError::Checkpoint(format!(
                        "{}: shape {:?}, expected {:?}",
                        p.name,
                        v.shape(),
                        p.value.shape()
                    )))
                }
                None => return Err(ModelError::Checkpoint(format!("missing {}", p.name))),
            }
        }
        if ckpt.params.len() != fresh.params.len() {
            return Err(ModelError::Checkpoint("unexpected extra parameters".into()));
        }
        // Re-insert in canonical order so optimizer state lines up with a fresh model.
        let mut params = ParamStore::new();
        for p in fresh.params.iter() {
            let v = ckpt.params.by_name(&p.name).expect("checked above").clone();
            params.insert(&p.name, v, p.trainable);
        }
        Ok(Self { cfg, params })
    }

    /// Logits `[B, C]` for audio `[B, T, F]` and context vectors `[B, D_GSC]`.
    /// Either input may be a placeholder when the variant ignores it.
    pub fn forward(&self, tape: &mut Tape, audio: Var, gsc: Var) -> Result<Outputs> {
        let s = Scope { store: &self.params };
        let plain = |logits| Outputs { logits, z_audio: None, z_gsc: None };
        match self.cfg.variant {
            Variant::AudioOnly => {
                let e = self.audio_embedding(&s, tape, audio, None)?;
                Ok(plain(s.linear(tape, e, "head")?))
            }
            Variant::GscOnly => Ok(plain(self.gsc_logits(&s, tape, gsc)?)),
            Variant::EarlyChannel | Variant::EarlyToken => {
                let e = self.audio_embedding(&s, tape, audio, Some(gsc))?;
                Ok(plain(s.linear(tape, e, "head")?))
            }
            Variant::Inter => {
                let ea = self.audio_embedding(&s, tape, audio, None)?;
                let eg = s.mlp(tape, gsc, "inter.gsc_mlp", 2, false)?;
                let fused = self.cross_attend(&s, tape, ea, eg)?;
                Ok(plain(s.linear(tape, fused, "head")?))
            }
            Variant::Late => {
                let e = self.audio_embedding(&s, tape, audio, None)?;
                let za = s.linear(tape, e, "head")?;
                let zg = self.gsc_logits(&s, tape, gsc)?;
                let lr = s.p(tape, "late.lambda_raw");
                let logits = late_fuse(tape, za, zg, lr)?;
                Ok(Outputs { logits, z_audio: Some(za), z_gsc: Some(zg) })
            }
        }
    }

    /// Inference without gradients.
    pub fn predict(&self, audio: &Tensor, gsc: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let a = tape.constant(audio.clone());
        let g = tape.constant(gsc.clone());
        let out = self.forward(&mut tape, a, g)?;
        Ok(tape.value(out.logits).clone())
    }

    fn gsc_logits(&self, s: &Scope<'_>, tape: &mut Tape, gsc: Var) -> Result<Var> {
        Ok(s.mlp(tape, gsc, "gsc_head", self.cfg.gsc_hidden.len() + 1, false)?)
    }

    fn normalized_audio(&self, s: &Scope<'_>, tape: &mut Tape, audio: Var) -> Result<Var> {
        let shape = tape.value(audio).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.n_mels {
            return Err(TensorError::ShapeMismatch {
                op: "audio input",
                lhs: shape,
                rhs: vec![0, self.cfg.n_frames, self.cfg.n_mels],
            }
            .into());
        }
        let mean = s.p(tape, "norm.mean");
        let std = self.params.by_name("norm.std").expect("norm.std");
        let inv = tape.constant(std.map(|v| 1.0 / v));
        let centered = tape.sub(audio, mean)?;
        Ok(tape.mul(centered, inv)?)
    }

    /// `g' = g · W_proj`, the projected context channel of length F.
    fn projected_gsc(&self, s: &Scope<'_>, tape: &mut Tape, gsc: Var) -> Result<Var> {
        let w = s.p(tape, "early.w_proj");
        Ok(tape.matmul(gsc, w)?)
    }

    fn audio_embedding(&self, s: &Scope<'_>, tape: &mut Tape, audio: Var, gsc: Option<Var>) -> Result<Var> {
        let x = self.normalized_audio(s, tape, audio)?;
        match self.cfg.backbone {
            Backbone::MelMlp => self.mel_mlp(s, tape, x, gsc),
            Backbone::Patch => self.patch_transformer(s, tape, x, gsc),
        }
    }

    fn mel_mlp(&self, s: &Scope<'_>, tape: &mut Tape, x: Var, gsc: Option<Var>) -> Result<Var> {
        let pooled = tape.mean(x, 1)?;
        let w0 = s.p(tape, "audio.mlp.0.w");
        let mut h = tape.matmul(pooled, w0)?;
        if let Some(g) = gsc {
            // The context channel is constant over time, so its time mean is g' itself.
            let gp = self.projected_gsc(s, tape, g)?;
            let wg = s.p(tape, "audio.mlp.0.w_gsc");
            let hg = tape.matmul(gp, wg)?;
            h = tape.add(h, hg)?;
        }
        let b0 = s.p(tape, "audio.mlp.0.b");
        h = tape.add(h, b0)?;
        h = tape.relu(h)?;
        for i in 1..self.cfg.mlp_hidden.len() {
            h = s.linear(tape, h, &format!("audio.mlp.{i}"))?;
            h = tape.relu(h)?;
        }
        Ok(h)
    }

    /// `[B, T, F]` → `[B, N_patches, patch_t·patch_f]`, truncating trailing frames and bins.
    fn patchify(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let b = shape[0];
        let p = &self.cfg.patch;
        let (nt, nf) = (shape[1] / p.patch_t, shape[2] / p.patch_f);
        if nt * nf != self.cfg.n_patches() {
            return Err(TensorError::ShapeMismatch {
                op: "patchify",
                lhs: shape,
                rhs: vec![b, self.cfg.n_frames, self.cfg.n_mels],
            }
            .into());
        }
        let mut x = x;
        if shape[1] != nt * p.patch_t {
            x = tape.slice(x, 1, 0, nt * p.patch_t)?;
        }
        if shape[2] != nf * p.patch_f {
            x = tape.slice(x, 2, 0, nf * p.patch_f)?;
        }
        let x = tape.reshape(x, &[b, nt, p.patch_t, nf, p.patch_f])?;
        let x = tape.swap_axes(x, 2, 3)?;
        Ok(tape.reshape(x, &[b, nt * nf, p.patch_t * p.patch_f])?)
    }

    fn patch_transformer(&self, s: &Scope<'_>, tape: &mut Tape, x: Var, gsc: Option<Var>) -> Result<Var> {
        let v = self.cfg.variant;
        let p = &self.cfg.patch;
        let b = tape.value(x).shape()[0];
        let d = p.d_model;
        let n = self.cfg.n_patches();

        let patches = self.patchify(tape, x)?;
        let w = s.p(tape, "audio.patch.w");
        let mut tokens = tape.matmul(patches, w)?;
        if let (Variant::EarlyChannel, Some(g)) = (v, gsc) {
            // Second input channel: g' broadcast over time, patchified like the spectrogram.
            let gp = self.projected_gsc(s, tape, g)?;
            let t_used = self.cfg.n_frames;
            let gp = tape.reshape(gp, &[b, 1, self.cfg.n_mels])?;
            let ones = tape.constant(Tensor::ones(&[1, t_used, 1]));
            let channel = tape.mul(gp, ones)?;
            let gpatches = self.patchify(tape, channel)?;
            let wg = s.p(tape, "audio.patch.w_gsc");
            let tg = tape.matmul(gpatches, wg)?;
            tokens = tape.add(tokens, tg)?;
        }
        let pb = s.p(tape, "audio.patch.b");
        tokens = tape.add(tokens, pb)?;

        let pos = s.p(tape, "audio.pos");
        let pos_cls = tape.slice(pos, 0, 0, 1)?;
        let pos_patch = tape.slice(pos, 0, 1, n)?;
        let cls = s.p(tape, "audio.cls");
        let cls = tape.add(cls, pos_cls)?;
        let zeros = tape.constant(Tensor::zeros(&[b, 1, d]));
        let cls = tape.add(zeros, cls)?;
        let tokens = tape.add(tokens, pos_patch)?;

        let early_token = v == Variant::EarlyToken;
        let mut seq = if let (true, Some(g)) = (early_token, gsc) {
            let wg = s.p(tape, "audio.gsc_token.w");
            let gt = tape.matmul(g, wg)?;
            let gt = tape.reshape(gt, &[b, 1, d])?;
            let pg = s.p(tape, "audio.pos_gsc");
            let gt = tape.add(gt, pg)?;
            tape.concat(&[cls, gt, tokens], 1)?
        } else {
            tape.concat(&[cls, tokens], 1)?
        };
        let seq_len = tape.value(seq).shape()[1];

        for l in 0..p.layers {
            let pre = format!("audio.layer.{l}");
            let gates = if early_token {
                let zeta = s.p(tape, &format!("{pre}.gsc_gate"));
                let one = tape.constant(Tensor::ones(&[1]));
                let rest = tape.constant(Tensor::ones(&[seq_len - 2]));
                Some(tape.concat(&[one, zeta, rest], 0)?)
            } else {
                None
            };
            let h = s.layer_norm(tape, seq, &format!("{pre}.ln1"))?;
            let a = s.attention(tape, h, h, &format!("{pre}.attn"), p.heads, gates)?;
            let a = s.linear(tape, a, &format!("{pre}.attn.o"))?;
            seq = tape.add(seq, a)?;
            let h = s.layer_norm(tape, seq, &format!("{pre}.ln2"))?;
            let h = s.mlp(tape, h, &format!("{pre}.ff"), 2, false)?;
            seq = tape.add(seq, h)?;
        }
        let cls_out = tape.slice(seq, 1, 0, 1)?;
        let cls_out = tape.reshape(cls_out, &[b, d])?;
        Ok(s.layer_norm(tape, cls_out, "audio.ln_f")?)
    }

    /// Symmetric cross-attention on global embeddings with residual mixing.
    fn cross_attend(&self, s: &Scope<'_>, tape: &mut Tape, ea: Var, eg: Var) -> Result<Var> {
        let b = tape.value(ea).shape()[0];
        let d = self.cfg.d_emb();
        let h = self.cfg.inter_heads;
        let ea3 = tape.reshape(ea, &[b, 1, d])?;
        let eg3 = tape.reshape(eg, &[b, 1, d])?;
        let att_a = s.attention(tape, ea3, eg3, "inter.a2g", h, None)?;
        let att_g = s.attention(tape, eg3, ea3, "inter.g2a", h, None)?;
        let att_a = tape.reshape(att_a, &[b, d])?;
        let att_g = tape.reshape(att_g, &[b, d])?;
        let refined_a = tape.add(ea, att_a)?;
        let refined_g = tape.add(eg, att_g)?;
        let stream1 = tape.add(refined_a, eg)?;
        let stream2 = tape.add(refined_g, ea)?;
        let cat = tape.concat(&[stream1, stream2], 1)?;
        Ok(s.linear(tape, cat, "inter.fuse")?)
    }
}

/// `z_audio + softplus(λ_raw) ⊙ z_gsc`.
pub fn late_fuse(tape: &mut Tape, z_audio: Var, z_gsc: Var, lambda_raw: Var) -> Result<Var> {
    let lambda = tape.softplus(lambda_raw)?;
    let weighted = tape.mul(z_gsc, lambda)?;
    Ok(tape.add(z_audio, weighted)?)
}

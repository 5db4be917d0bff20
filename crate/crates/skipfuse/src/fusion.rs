//! Cross-modal fusion networks: the skip-connected topology and the three
//! baselines it is compared against.
//!
//! The asymmetric co-attention layer updates only the text stream:
//!   l_sa = LN(SA(l) + l)
//!   l_ca = LN(CA(l_sa, v) + l_sa)
//!   l'   = LN(FFN(l_ca) + l_ca)
//! The connected-attention layer runs joint self-attention over the
//! concatenated [v; l] sequence and updates both streams. A skip-connected
//! block chains S asymmetric layers and one connected layer; visual features
//! skip the asymmetric layers unchanged.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{AttnMask, FeedForward, LayerNorm, MultiHeadAttention, LN_EPS};
use crate::tape::{Param, Tape, Val};
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionVariant {
    /// S asymmetric co-attention layers per connected-attention layer.
    SkipConnected,
    /// Joint self-attention over the concatenated sequence at every layer.
    ConnectedAttention,
    /// Both streams run SA + CA + FFN symmetrically at every layer.
    CoAttention,
    /// Text-only co-attention at every layer; vision is never updated.
    AsymmetricCoAttention,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [
        FusionVariant::SkipConnected,
        FusionVariant::ConnectedAttention,
        FusionVariant::CoAttention,
        FusionVariant::AsymmetricCoAttention,
    ];
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FusionVariant::SkipConnected => "skip",
            FusionVariant::ConnectedAttention => "connected",
            FusionVariant::CoAttention => "co",
            FusionVariant::AsymmetricCoAttention => "asym",
        };
        f.write_str(s)
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skip" | "skip-connected" => Ok(FusionVariant::SkipConnected),
            "connected" | "connected-attention" => Ok(FusionVariant::ConnectedAttention),
            "co" | "co-attention" => Ok(FusionVariant::CoAttention),
            "asym" | "asymmetric-co-attention" => Ok(FusionVariant::AsymmetricCoAttention),
            other => Err(Error::Config(format!(
                "unknown fusion variant '{other}' (expected skip|connected|co|asym)"
            ))),
        }
    }
}

/// One step of a fusion network's layer sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Asym,
    Connected,
    Co,
}

/// Layer sequence a variant executes; `l_layers` counts asymmetric (or, for
/// the baselines, total) fusion layers and `stride` only matters for
/// SkipConnected.
pub fn layer_trace(
    variant: FusionVariant,
    l_layers: usize,
    stride: usize,
) -> Result<Vec<LayerKind>> {
    match variant {
        FusionVariant::SkipConnected => {
            if stride == 0 || l_layers % stride != 0 {
                return Err(Error::Config(format!(
                    "stride {stride} must divide the {l_layers} asymmetric layers"
                )));
            }
            let blocks = l_layers / stride;
            let mut trace = Vec::with_capacity(l_layers + blocks);
            for _ in 0..blocks {
                trace.extend(std::iter::repeat_n(LayerKind::Asym, stride));
                trace.push(LayerKind::Connected);
            }
            Ok(trace)
        }
        FusionVariant::ConnectedAttention => Ok(vec![LayerKind::Connected; l_layers]),
        FusionVariant::CoAttention => Ok(vec![LayerKind::Co; l_layers]),
        FusionVariant::AsymmetricCoAttention => Ok(vec![LayerKind::Asym; l_layers]),
    }
}

/// Current features of both streams flowing through a fusion network.
pub struct FusionState {
    pub v: Val,
    pub l: Val,
    /// Attendable text rows (CLS + real tokens), length N+1.
    pub text_mask: Vec<bool>,
}

/// Post-LN co-attention stack for one stream: SA over `x`, CA into the other
/// stream, FFN. This is the whole asymmetric layer (text stream) and one half
/// of a symmetric co-attention layer.
pub struct CoAttentionStack<E: Element> {
    pub sa: MultiHeadAttention<E>,
    pub ca: MultiHeadAttention<E>,
    pub ffn: FeedForward<E>,
    pub ln_sa: LayerNorm<E>,
    pub ln_ca: LayerNorm<E>,
    pub ln_ffn: LayerNorm<E>,
}

impl<E: Element> CoAttentionStack<E> {
    pub(crate) fn new(rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            sa: MultiHeadAttention::new(rng, &format!("{name}.sa"), cfg.d_model, cfg.n_heads)?,
            ca: MultiHeadAttention::new(rng, &format!("{name}.ca"), cfg.d_model, cfg.n_heads)?,
            ffn: FeedForward::new(rng, &format!("{name}.ffn"), cfg.d_model, cfg.ffn_multiplier),
            ln_sa: LayerNorm::new(&format!("{name}.ln_sa"), cfg.d_model, LN_EPS),
            ln_ca: LayerNorm::new(&format!("{name}.ln_ca"), cfg.d_model, LN_EPS),
            ln_ffn: LayerNorm::new(&format!("{name}.ln_ffn"), cfg.d_model, LN_EPS),
        })
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape<E>,
        x: Val,
        cross: Val,
        sa_mask: Option<&AttnMask>,
        ca_mask: Option<&AttnMask>,
    ) -> Result<Val> {
        let sa = self.sa.forward(tape, x, x, sa_mask)?;
        let sum = tape.add(sa, x)?;
        let x_sa = self.ln_sa.forward(tape, sum)?;

        let ca = self.ca.forward(tape, x_sa, cross, ca_mask)?;
        let sum = tape.add(ca, x_sa)?;
        let x_ca = self.ln_ca.forward(tape, sum)?;

        let ff = self.ffn.forward(tape, x_ca)?;
        let sum = tape.add(ff, x_ca)?;
        self.ln_ffn.forward(tape, sum)
    }

    pub(crate) fn params(&self, out: &mut Vec<Param<E>>) {
        self.sa.params(out);
        self.ca.params(out);
        self.ffn.params(out);
        self.ln_sa.params(out);
        self.ln_ca.params(out);
        self.ln_ffn.params(out);
    }
}

/// Asymmetric co-attention layer (Fig. 1 (c) inner layers): text runs
/// SA + CA(vision) + FFN, vision passes through untouched.
pub struct AsymLayer<E: Element> {
    pub text: CoAttentionStack<E>,
}

impl<E: Element> AsymLayer<E> {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            text: CoAttentionStack::new(rng, name, cfg)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<E>, state: FusionState) -> Result<FusionState> {
        let n_rows = tape.value(state.l).shape()[0];
        let sa_mask = AttnMask::from_key_mask(n_rows, &state.text_mask);
        let l = self
            .text
            .forward(tape, state.l, state.v, Some(&sa_mask), None)?;
        Ok(FusionState {
            v: state.v,
            l,
            text_mask: state.text_mask,
        })
    }

    pub fn params(&self, out: &mut Vec<Param<E>>) {
        self.text.params(out);
    }
}

/// Connected-attention layer: joint SA + FFN over [v; l].
pub struct ConnectedLayer<E: Element> {
    pub sa: MultiHeadAttention<E>,
    pub ffn: FeedForward<E>,
    pub ln_sa: LayerNorm<E>,
    pub ln_ffn: LayerNorm<E>,
}

impl<E: Element> ConnectedLayer<E> {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            sa: MultiHeadAttention::new(rng, &format!("{name}.sa"), cfg.d_model, cfg.n_heads)?,
            ffn: FeedForward::new(rng, &format!("{name}.ffn"), cfg.d_model, cfg.ffn_multiplier),
            ln_sa: LayerNorm::new(&format!("{name}.ln_sa"), cfg.d_model, LN_EPS),
            ln_ffn: LayerNorm::new(&format!("{name}.ln_ffn"), cfg.d_model, LN_EPS),
        })
    }

    pub fn forward(&self, tape: &mut Tape<E>, state: FusionState) -> Result<FusionState> {
        let m_rows = tape.value(state.v).shape()[0];
        let n_rows = tape.value(state.l).shape()[0];
        let mut key_mask = vec![true; m_rows];
        key_mask.extend_from_slice(&state.text_mask);
        let mask = AttnMask::from_key_mask(m_rows + n_rows, &key_mask);
        self.forward_masked(tape, state, &mask)
    }

    /// Same computation under an explicit attention mask over the
    /// concatenated sequence (tests use block-diagonal masks).
    pub fn forward_masked(
        &self,
        tape: &mut Tape<E>,
        state: FusionState,
        mask: &AttnMask,
    ) -> Result<FusionState> {
        let m_rows = tape.value(state.v).shape()[0];
        let n_rows = tape.value(state.l).shape()[0];
        let concat = tape.concat_rows(state.v, state.l)?;

        let sa = self.sa.forward(tape, concat, concat, Some(mask))?;
        let sum = tape.add(sa, concat)?;
        let x_sa = self.ln_sa.forward(tape, sum)?;

        let ff = self.ffn.forward(tape, x_sa)?;
        let sum = tape.add(ff, x_sa)?;
        let out = self.ln_ffn.forward(tape, sum)?;

        let v = tape.slice_rows(out, 0, m_rows)?;
        let l = tape.slice_rows(out, m_rows, m_rows + n_rows)?;
        Ok(FusionState {
            v,
            l,
            text_mask: state.text_mask,
        })
    }

    pub fn params(&self, out: &mut Vec<Param<E>>) {
        self.sa.params(out);
        self.ffn.params(out);
        self.ln_sa.params(out);
        self.ln_ffn.params(out);
    }
}

/// Symmetric co-attention layer (Fig. 1 (b)): untied stacks per stream, both
/// reading the other stream's incoming features.
pub struct CoLayer<E: Element> {
    pub text: CoAttentionStack<E>,
    pub vision: CoAttentionStack<E>,
}

impl<E: Element> CoLayer<E> {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            text: CoAttentionStack::new(rng, &format!("{name}.text"), cfg)?,
            vision: CoAttentionStack::new(rng, &format!("{name}.vision"), cfg)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<E>, state: FusionState) -> Result<FusionState> {
        let m_rows = tape.value(state.v).shape()[0];
        let n_rows = tape.value(state.l).shape()[0];
        let text_sa = AttnMask::from_key_mask(n_rows, &state.text_mask);
        let vision_ca = AttnMask::from_key_mask(m_rows, &state.text_mask);
        let l = self
            .text
            .forward(tape, state.l, state.v, Some(&text_sa), None)?;
        let v = self
            .vision
            .forward(tape, state.v, state.l, None, Some(&vision_ca))?;
        Ok(FusionState {
            v,
            l,
            text_mask: state.text_mask,
        })
    }

    pub fn params(&self, out: &mut Vec<Param<E>>) {
        self.text.params(out);
        self.vision.params(out);
    }
}

/// A fusion network instantiated for one variant.
pub struct FusionNetwork<E: Element> {
    pub variant: FusionVariant,
    trace: Vec<LayerKind>,
    asym: Vec<AsymLayer<E>>,
    connected: Vec<ConnectedLayer<E>>,
    co: Vec<CoLayer<E>>,
}

impl<E: Element> FusionNetwork<E> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ModelConfig,
        variant: FusionVariant,
    ) -> Result<Self> {
        let trace = layer_trace(variant, cfg.n_fusion_asym_layers, cfg.stride)?;
        let mut asym = Vec::new();
        let mut connected = Vec::new();
        let mut co = Vec::new();
        for (i, kind) in trace.iter().enumerate() {
            match kind {
                LayerKind::Asym => {
                    asym.push(AsymLayer::new(rng, &format!("{name}.asym{i}"), cfg)?)
                }
                LayerKind::Connected => connected.push(ConnectedLayer::new(
                    rng,
                    &format!("{name}.connected{i}"),
                    cfg,
                )?),
                LayerKind::Co => co.push(CoLayer::new(rng, &format!("{name}.co{i}"), cfg)?),
            }
        }
        Ok(Self {
            variant,
            trace,
            asym,
            connected,
            co,
        })
    }

    /// The layer sequence this network applies, in order.
    pub fn trace(&self) -> &[LayerKind] {
        &self.trace
    }

    pub fn forward(&self, tape: &mut Tape<E>, mut state: FusionState) -> Result<FusionState> {
        let (mut ai, mut ci, mut oi) = (0, 0, 0);
        for kind in &self.trace {
            state = match kind {
                LayerKind::Asym => {
                    ai += 1;
                    self.asym[ai - 1].forward(tape, state)?
                }
                LayerKind::Connected => {
                    ci += 1;
                    self.connected[ci - 1].forward(tape, state)?
                }
                LayerKind::Co => {
                    oi += 1;
                    self.co[oi - 1].forward(tape, state)?
                }
            };
        }
        Ok(state)
    }

    pub fn params(&self, out: &mut Vec<Param<E>>) {
        // checkpoint order must be stable: follow the trace
        let (mut ai, mut ci, mut oi) = (0, 0, 0);
        for kind in &self.trace {
            match kind {
                LayerKind::Asym => {
                    self.asym[ai].params(out);
                    ai += 1;
                }
                LayerKind::Connected => {
                    self.connected[ci].params(out);
                    ci += 1;
                }
                LayerKind::Co => {
                    self.co[oi].params(out);
                    oi += 1;
                }
            }
        }
    }
}

//! The full pretraining model: encoders, fusion network, decoder, objective
//! heads, momentum copies, and the contrastive memory queues.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoders::{TextEncoder, TextSequence, VisualEncoder, VisualSequence};
use crate::error::{Error, Result};
use crate::fusion::{FusionNetwork, FusionState, FusionVariant};
use crate::nn::{Init, Linear};
use crate::objectives::Decoder;
use crate::queue::MemoryQueue;
use crate::tape::{Param, Tape};
use crate::tensor::{Element, Tensor};

/// Slow-moving copies of the contrastive encoders. Their parameters are
/// updated only through [`MomentumPair::update`], never by gradients.
pub struct MomentumPair<E: Element> {
    pub visual: VisualEncoder<E>,
    pub text: TextEncoder<E>,
    pub img_proj: Linear<E>,
    pub txt_proj: Linear<E>,
    pub coefficient: f64,
}

impl<E: Element> MomentumPair<E> {
    fn params(&self) -> Vec<Param<E>> {
        let mut out = Vec::new();
        self.visual.params(&mut out);
        self.text.params(&mut out);
        self.img_proj.params(&mut out);
        self.txt_proj.params(&mut out);
        out
    }

    /// θ_m ← m·θ_m + (1−m)·θ for every parameter.
    pub fn update(&self, online: &[Param<E>]) -> Result<()> {
        let slow = self.params();
        if slow.len() != online.len() {
            return Err(Error::Contract(format!(
                "momentum update: {} momentum params vs {} online params",
                slow.len(),
                online.len()
            )));
        }
        let m = E::from_real(self.coefficient);
        let one_m = E::from_real(1.0 - self.coefficient);
        for (s, o) in slow.iter().zip(online) {
            if s.shape() != o.shape() {
                return Err(Error::Contract(format!(
                    "momentum update: shape mismatch on {}: {:?} vs {:?}",
                    s.name(),
                    s.shape(),
                    o.shape()
                )));
            }
            let fresh = o.value();
            let fd = fresh.data();
            s.update(|data| {
                for (x, &f) in data.iter_mut().zip(fd) {
                    *x = m * *x + one_m * f;
                }
            });
        }
        Ok(())
    }
}

pub struct Model<E: Element> {
    pub cfg: ModelConfig,
    pub visual: VisualEncoder<E>,
    pub text: TextEncoder<E>,
    pub fusion: FusionNetwork<E>,
    pub decoder: Decoder<E>,
    pub itc_img_proj: Linear<E>,
    pub itc_txt_proj: Linear<E>,
    pub itm_head: Linear<E>,
    pub mlm_head: Linear<E>,
    pub momentum: MomentumPair<E>,
    pub img_queue: MemoryQueue<E>,
    pub txt_queue: MemoryQueue<E>,
}

impl<E: Element> Model<E> {
    /// Deterministic construction: every weight is drawn from a ChaCha
    /// stream seeded with `cfg.seed`, in a fixed order.
    pub fn new(cfg: &ModelConfig, variant: FusionVariant) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let visual = VisualEncoder::new(&mut rng, "visual", cfg)?;
        let text = TextEncoder::new(&mut rng, "text", cfg)?;
        let fusion = FusionNetwork::new(&mut rng, "fusion", cfg, variant)?;
        let decoder = Decoder::new(&mut rng, "decoder", cfg)?;
        let itc_img_proj = Linear::new(&mut rng, "itc_img_proj", d, d, Init::Normal);
        let itc_txt_proj = Linear::new(&mut rng, "itc_txt_proj", d, d, Init::Normal);
        let itm_head = Linear::new(&mut rng, "itm_head", d, 2, Init::Zero);
        let mlm_head = Linear::new(&mut rng, "mlm_head", d, cfg.vocab_size, Init::Zero);
        let momentum = MomentumPair {
            visual: visual.detached_copy(),
            text: text.detached_copy(),
            img_proj: itc_img_proj.detached_copy(),
            txt_proj: itc_txt_proj.detached_copy(),
            coefficient: cfg.momentum,
        };
        Ok(Self {
            cfg: cfg.clone(),
            visual,
            text,
            fusion,
            decoder,
            itc_img_proj,
            itc_txt_proj,
            itm_head,
            mlm_head,
            momentum,
            img_queue: MemoryQueue::new(cfg.queue_size, d)?,
            txt_queue: MemoryQueue::new(cfg.queue_size, d)?,
        })
    }

    /// Trainable parameters in a stable order (checkpoint layout).
    pub fn params(&self) -> Vec<Param<E>> {
        let mut out = Vec::new();
        self.visual.params(&mut out);
        self.text.params(&mut out);
        self.fusion.params(&mut out);
        self.decoder.params(&mut out);
        self.itc_img_proj.params(&mut out);
        self.itc_txt_proj.params(&mut out);
        self.itm_head.params(&mut out);
        self.mlm_head.params(&mut out);
        out
    }

    /// Online parameters mirrored by the momentum pair, in its order.
    pub fn contrastive_params(&self) -> Vec<Param<E>> {
        let mut out = Vec::new();
        self.visual.params(&mut out);
        self.text.params(&mut out);
        self.itc_img_proj.params(&mut out);
        self.itc_txt_proj.params(&mut out);
        out
    }

    pub fn zero_grads(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    pub fn fuse(
        &self,
        tape: &mut Tape<E>,
        vseq: &VisualSequence,
        tseq: &TextSequence,
    ) -> Result<FusionState> {
        self.fusion.forward(
            tape,
            FusionState {
                v: vseq.embeddings,
                l: tseq.embeddings,
                text_mask: tseq.attention_mask.clone(),
            },
        )
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save(path, &self.params())
    }

    pub fn load(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::load(path, &self.params())
    }
}

/// Flat view of the momentum parameters for tests.
pub fn momentum_param_values<E: Element>(model: &Model<E>) -> Vec<Tensor<E>> {
    let mut out = Vec::new();
    model.momentum.visual.params(&mut out);
    model.momentum.text.params(&mut out);
    model.momentum.img_proj.params(&mut out);
    model.momentum.txt_proj.params(&mut out);
    out.into_iter().map(|p| p.value()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_is_deterministic() {
        let cfg = ModelConfig::toy();
        let a = Model::<f32>::new(&cfg, FusionVariant::SkipConnected).unwrap();
        let b = Model::<f32>::new(&cfg, FusionVariant::SkipConnected).unwrap();
        let (pa, pb) = (a.params(), b.params());
        assert_eq!(pa.len(), pb.len());
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(x.name(), y.name());
            assert!(x.value().bit_eq(&y.value()));
        }
    }

    #[test]
    fn momentum_update_arithmetic() {
        let cfg = ModelConfig::toy();
        let model = Model::<f64>::new(&cfg, FusionVariant::SkipConnected).unwrap();
        // force a known online/momentum disagreement on every param
        for p in model.contrastive_params() {
            p.update(|d| d.iter_mut().for_each(|x| *x = 1.0));
        }
        for p in model.momentum.params() {
            p.update(|d| d.iter_mut().for_each(|x| *x = 0.0));
        }
        model
            .momentum
            .update(&model.contrastive_params())
            .unwrap();
        for p in model.momentum.params() {
            for &x in p.value().data() {
                assert!((x - 0.005).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn momentum_update_with_m_one_is_fixed_point() {
        let cfg = ModelConfig::toy();
        let mut model = Model::<f64>::new(&cfg, FusionVariant::SkipConnected).unwrap();
        model.momentum.coefficient = 1.0;
        let before: Vec<_> = momentum_param_values(&model);
        for p in model.contrastive_params() {
            p.update(|d| d.iter_mut().for_each(|x| *x += 7.0));
        }
        model
            .momentum
            .update(&model.contrastive_params())
            .unwrap();
        for (b, a) in before.iter().zip(momentum_param_values(&model)) {
            assert!(b.bit_eq(&a));
        }
    }
}

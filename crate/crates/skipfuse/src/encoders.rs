//! Unimodal encoders: patch-based visual transformer and text transformer.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{AttnMask, EncoderLayer, Init, Linear};
use crate::tape::{Param, Tape, Val};
use crate::tensor::{Element, Tensor};

// Reserved vocabulary slots; everything from CONTENT_BASE up is caption
// content.
pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK_TOKEN: usize = 2;
pub const BOS: usize = 3;
pub const EOS: usize = 4;
pub const CONTENT_BASE: usize = 5;

/// Encoder output for one image: rows ordered {v_cls, v_1, .., v_M}.
pub struct VisualSequence {
    pub embeddings: Val,
}

/// Encoder output for one caption: rows ordered {l_cls, l_1, .., l_N}.
/// `attention_mask[i]` is true where row i is attendable (CLS and real
/// tokens; padding rows are false).
pub struct TextSequence {
    pub token_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
    pub embeddings: Val,
}

pub struct VisualEncoder<E: Element> {
    pub patch_proj: Linear<E>,
    pub cls: Param<E>,
    pub pos: Param<E>,
    pub layers: Vec<EncoderLayer<E>>,
    image_size: usize,
    patch_size: usize,
    channels: usize,
}

impl<E: Element> VisualEncoder<E> {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size;
        let m = cfg.n_patches();
        let layers = (0..cfg.n_visual_layers)
            .map(|i| {
                EncoderLayer::new(
                    rng,
                    &format!("{name}.layer{i}"),
                    cfg.d_model,
                    cfg.n_heads,
                    cfg.ffn_multiplier,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_proj: Linear::new(
                rng,
                &format!("{name}.patch_proj"),
                patch_dim,
                cfg.d_model,
                Init::Normal,
            ),
            cls: Param::new(
                format!("{name}.cls"),
                crate::nn::init_tensor(rng, vec![1, cfg.d_model], Init::Normal),
            ),
            pos: Param::new(
                format!("{name}.pos"),
                crate::nn::init_tensor(rng, vec![m + 1, cfg.d_model], Init::Normal),
            ),
            layers,
            image_size: cfg.image_size,
            patch_size: cfg.patch_size,
            channels: cfg.channels,
        })
    }

    /// Non-overlapping patches, flattened row-major as (channel, dy, dx),
    /// patch grid itself row-major.
    fn patch_matrix(&self, image: &Tensor<E>) -> Result<Tensor<E>> {
        let want = [self.channels, self.image_size, self.image_size];
        if image.shape() != want {
            return Err(Error::BadShape {
                op: "patch_embed",
                shape: image.shape().to_vec(),
                detail: format!("expected image of shape {want:?}"),
            });
        }
        let (ps, hw) = (self.patch_size, self.image_size);
        let per_side = hw / ps;
        let patch_dim = self.channels * ps * ps;
        let data = image.data();
        let mut rows = Vec::with_capacity(per_side * per_side * patch_dim);
        for pr in 0..per_side {
            for pc in 0..per_side {
                for c in 0..self.channels {
                    for dy in 0..ps {
                        for dx in 0..ps {
                            let y = pr * ps + dy;
                            let x = pc * ps + dx;
                            rows.push(data[c * hw * hw + y * hw + x]);
                        }
                    }
                }
            }
        }
        Tensor::new(vec![per_side * per_side, patch_dim], rows)
    }

    /// Patch projection + CLS + learned positions, no transformer layers.
    pub fn patch_embed(&self, tape: &mut Tape<E>, image: &Tensor<E>) -> Result<VisualSequence> {
        let patches = self.patch_matrix(image)?;
        let patches = tape.leaf(patches);
        let projected = self.patch_proj.forward(tape, patches)?;
        let cls = tape.param(&self.cls);
        let seq = tape.concat_rows(cls, projected)?;
        let pos = tape.param(&self.pos);
        let seq = tape.add(seq, pos)?;
        Ok(VisualSequence { embeddings: seq })
    }

    pub fn encode(&self, tape: &mut Tape<E>, image: &Tensor<E>) -> Result<VisualSequence> {
        let mut seq = self.patch_embed(tape, image)?;
        for layer in &self.layers {
            seq.embeddings = layer.forward(tape, seq.embeddings, None)?;
        }
        Ok(seq)
    }

    pub fn params(&self, out: &mut Vec<Param<E>>) {
        self.patch_proj.params(out);
        out.push(self.cls.clone());
        out.push(self.pos.clone());
        for layer in &self.layers {
            layer.params(out);
        }
    }

    pub fn detached_copy(&self) -> Self {
        Self {
            patch_proj: self.patch_proj.detached_copy(),
            cls: self.cls.detached_copy(),
            pos: self.pos.detached_copy(),
            layers: self.layers.iter().map(|l| l.detached_copy()).collect(),
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
        }
    }
}

pub struct TextEncoder<E: Element> {
    pub tok_emb: Param<E>,
    pub pos: Param<E>,
    pub layers: Vec<EncoderLayer<E>>,
    vocab_size: usize,
    max_text_len: usize,
}

impl<E: Element> TextEncoder<E> {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let layers = (0..cfg.n_text_layers)
            .map(|i| {
                EncoderLayer::new(
                    rng,
                    &format!("{name}.layer{i}"),
                    cfg.d_model,
                    cfg.n_heads,
                    cfg.ffn_multiplier,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tok_emb: Param::new(
                format!("{name}.tok_emb"),
                crate::nn::init_tensor(rng, vec![cfg.vocab_size, cfg.d_model], Init::Normal),
            ),
            pos: Param::new(
                format!("{name}.pos"),
                crate::nn::init_tensor(rng, vec![cfg.max_text_len + 1, cfg.d_model], Init::Normal),
            ),
            layers,
            vocab_size: cfg.vocab_size,
            max_text_len: cfg.max_text_len,
        })
    }

    pub fn encode(&self, tape: &mut Tape<E>, token_ids: &[usize]) -> Result<TextSequence> {
        if token_ids.len() > self.max_text_len {
            return Err(Error::Input(format!(
                "text of {} tokens exceeds max_text_len {}",
                token_ids.len(),
                self.max_text_len
            )));
        }
        if let Some(&bad) = token_ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of vocabulary (size {})",
                self.vocab_size
            )));
        }
        let mut ids = Vec::with_capacity(token_ids.len() + 1);
        ids.push(CLS);
        ids.extend_from_slice(token_ids);
        let mask: Vec<bool> = ids.iter().map(|&id| id != PAD).collect();

        let table = tape.param(&self.tok_emb);
        let emb = tape.gather_rows(table, &ids)?;
        let pos = tape.param(&self.pos);
        let pos = tape.slice_rows(pos, 0, ids.len())?;
        let mut x = tape.add(emb, pos)?;
        let attn = AttnMask::from_key_mask(ids.len(), &mask);
        for layer in &self.layers {
            x = layer.forward(tape, x, Some(&attn))?;
        }
        Ok(TextSequence {
            token_ids: token_ids.to_vec(),
            attention_mask: mask,
            embeddings: x,
        })
    }

    pub fn params(&self, out: &mut Vec<Param<E>>) {
        out.push(self.tok_emb.clone());
        out.push(self.pos.clone());
        for layer in &self.layers {
            layer.params(out);
        }
    }

    pub fn detached_copy(&self) -> Self {
        Self {
            tok_emb: self.tok_emb.detached_copy(),
            pos: self.pos.detached_copy(),
            layers: self.layers.iter().map(|l| l.detached_copy()).collect(),
            vocab_size: self.vocab_size,
            max_text_len: self.max_text_len,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::tensor::max_rel_diff;
    use rand::SeedableRng;

    fn cfg_small() -> ModelConfig {
        let mut cfg = ModelConfig::toy();
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.n_visual_layers = 1;
        cfg.n_text_layers = 1;
        cfg.ffn_multiplier = 2;
        cfg
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn patch_sequence_lengths() {
        let cfg = cfg_small(); // 16x16 image, 8x8 patches
        let enc = VisualEncoder::<f64>::new(&mut rng(0), "v", &cfg).unwrap();
        let mut tape = Tape::no_grad();
        let img = Tensor::zeros(vec![3, 16, 16]);
        let seq = enc.patch_embed(&mut tape, &img).unwrap();
        assert_eq!(tape.value(seq.embeddings).shape(), [5, 8]);

        let mut big = cfg_small();
        big.image_size = 256;
        big.patch_size = 16;
        big.n_visual_layers = 0;
        let enc = VisualEncoder::<f32>::new(&mut rng(0), "v", &big).unwrap();
        let mut t = Tape::<f32>::no_grad();
        let seq = enc.patch_embed(&mut t, &Tensor::zeros(vec![3, 256, 256])).unwrap();
        assert_eq!(t.value(seq.embeddings).shape(), [257, big.d_model]);
    }

    #[test]
    fn zero_image_patch_rows_equal_positions() {
        let cfg = cfg_small();
        let enc = VisualEncoder::<f64>::new(&mut rng(1), "v", &cfg).unwrap();
        let mut tape = Tape::no_grad();
        let seq = enc.patch_embed(&mut tape, &Tensor::zeros(vec![3, 16, 16])).unwrap();
        let out = tape.value(seq.embeddings).clone();
        let pos = enc.pos.value();
        // projection bias is zero-initialized, so patch rows are pure positions
        for r in 1..out.rows() {
            assert_eq!(out.row(r), pos.row(r));
        }
    }

    #[test]
    fn zero_layer_encode_equals_patch_embed() {
        let mut cfg = cfg_small();
        cfg.n_visual_layers = 0;
        let enc = VisualEncoder::<f64>::new(&mut rng(2), "v", &cfg).unwrap();
        let mut tape = Tape::no_grad();
        let img = crate::nn::init_tensor(&mut rng(3), vec![3, 16, 16], crate::nn::Init::Normal);
        let a = enc.patch_embed(&mut tape, &img).unwrap();
        let b = enc.encode(&mut tape, &img).unwrap();
        assert!(tape.value(a.embeddings).bit_eq(tape.value(b.embeddings)));
    }

    #[test]
    fn wrong_resolution_is_shape_error() {
        let cfg = cfg_small();
        let enc = VisualEncoder::<f64>::new(&mut rng(0), "v", &cfg).unwrap();
        let mut tape = Tape::no_grad();
        assert!(matches!(
            enc.patch_embed(&mut tape, &Tensor::zeros(vec![3, 8, 8])),
            Err(Error::BadShape { .. })
        ));
    }

    #[test]
    fn empty_text_encodes_to_cls_only() {
        let cfg = cfg_small();
        let enc = TextEncoder::<f64>::new(&mut rng(4), "t", &cfg).unwrap();
        let mut tape = Tape::no_grad();
        let seq = enc.encode(&mut tape, &[]).unwrap();
        assert_eq!(tape.value(seq.embeddings).shape(), [1, 8]);
        let seq = enc.encode(&mut tape, &[5, 6, 7]).unwrap();
        assert_eq!(tape.value(seq.embeddings).shape(), [4, 8]);
    }

    #[test]
    fn out_of_vocab_and_overlong_text_are_input_errors() {
        let cfg = cfg_small();
        let enc = TextEncoder::<f64>::new(&mut rng(4), "t", &cfg).unwrap();
        let mut tape = Tape::no_grad();
        assert!(matches!(
            enc.encode(&mut tape, &[cfg.vocab_size]),
            Err(Error::Input(_))
        ));
        let long = vec![5usize; cfg.max_text_len + 1];
        assert!(matches!(enc.encode(&mut tape, &long), Err(Error::Input(_))));
    }

    #[test]
    fn appended_padding_leaves_real_positions_unchanged() {
        let cfg = cfg_small();
        let enc = TextEncoder::<f64>::new(&mut rng(5), "t", &cfg).unwrap();
        let mut tape = Tape::no_grad();
        let short = enc.encode(&mut tape, &[6, 7]).unwrap();
        let padded = enc.encode(&mut tape, &[6, 7, PAD, PAD]).unwrap();
        let a = tape.value(short.embeddings);
        let b = tape.value(padded.embeddings);
        for r in 0..3 {
            let d = max_rel_diff(a.row(r), b.row(r));
            assert!(d < 1e-5, "row {r} drifted by {d}");
        }
        assert_eq!(padded.attention_mask, vec![true, true, true, false, false]);
    }

    #[test]
    fn text_encoding_is_deterministic() {
        let cfg = cfg_small();
        let enc = TextEncoder::<f64>::new(&mut rng(6), "t", &cfg).unwrap();
        let mut tape = Tape::no_grad();
        let a = enc.encode(&mut tape, &[5, 9, 12]).unwrap();
        let b = enc.encode(&mut tape, &[5, 9, 12]).unwrap();
        assert!(tape.value(a.embeddings).bit_eq(tape.value(b.embeddings)));
    }

    #[test]
    fn permuted_patches_with_permuted_positions_permute_outputs() {
        let cfg = cfg_small(); // 2x2 patch grid
        let enc = VisualEncoder::<f64>::new(&mut rng(7), "v", &cfg).unwrap();
        let img = crate::nn::init_tensor(&mut rng(8), vec![3, 16, 16], crate::nn::Init::Normal);

        // swap the two top patches in the image and the corresponding
        // positional rows (patch rows 1 and 2 of the table)
        let mut swapped = img.clone();
        {
            let hw = 16;
            let data = swapped.data_mut();
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        let i = c * hw * hw + y * hw + x;
                        let j = c * hw * hw + y * hw + (x + 8);
                        data.swap(i, j);
                    }
                }
            }
        }
        let perm_enc = {
            let e = enc.detached_copy();
            e.pos.update(|d| {
                for k in 0..cfg.d_model {
                    d.swap(cfg.d_model + k, 2 * cfg.d_model + k);
                }
            });
            e
        };

        let mut tape = Tape::no_grad();
        let a = enc.encode(&mut tape, &img).unwrap();
        let b = perm_enc.encode(&mut tape, &swapped).unwrap();
        let (a, b) = (tape.value(a.embeddings), tape.value(b.embeddings));
        let map = [0usize, 2, 1, 3, 4]; // row i of a should equal row map[i] of b
        for (i, &j) in map.iter().enumerate() {
            let d = max_rel_diff(a.row(i), b.row(j));
            assert!(d < 1e-9, "row {i} vs {j}: {d}");
        }
    }

    #[test]
    fn gradients_reach_projection_and_embedding_tables() {
        let cfg = cfg_small();
        let venc = VisualEncoder::<f64>::new(&mut rng(9), "v", &cfg).unwrap();
        let tenc = TextEncoder::<f64>::new(&mut rng(10), "t", &cfg).unwrap();
        let mut tape = Tape::new();
        let img = crate::nn::init_tensor(&mut rng(11), vec![3, 16, 16], crate::nn::Init::Normal);
        let v = venc.encode(&mut tape, &img).unwrap();
        let t = tenc.encode(&mut tape, &[5, 6]).unwrap();
        let sum = tape.concat_rows(v.embeddings, t.embeddings).unwrap();
        let loss = tape.mean(sum);
        tape.backward(loss).unwrap();
        let g = venc.patch_proj.w.grad().expect("patch projection grad");
        assert!(g.iter().any(|&x| x != 0.0));
        let g = tenc.tok_emb.grad().expect("token embedding grad");
        assert!(g.iter().any(|&x| x != 0.0));
    }
}

//! The four joint pretraining objectives and the generation decoder.
//!
//! ITC is MoCo-style: momentum copies of the contrastive encoders produce
//! the candidate embeddings, FIFO memory queues extend the negative pool,
//! and the momentum parameters never receive gradients. ITM classifies
//! fused pairs against contrastively-mined hard negatives, MLM predicts
//! masked caption tokens from the fused text stream, and PrefixLM scores a
//! caption suffix with a causal decoder cross-attending to the fused
//! sequence.

use std::io::Write as IoWrite;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::Batch;
use crate::encoders::{TextSequence, VisualSequence, BOS, CONTENT_BASE, EOS, MASK_TOKEN};
use crate::error::{Error, Result};
use crate::fusion::CoAttentionStack;
use crate::model::Model;
use crate::nn::{AttnMask, Init, Linear};
use crate::optim::Optimizer;
use crate::tape::{Param, Tape, Val};
use crate::tensor::{Element, Tensor};

const UNIT_EPS: f64 = 1e-12;

/// Causal text decoder with cross-attention into the fused sequence.
pub struct Decoder<E: Element> {
    pub tok_emb: Param<E>,
    pub pos: Param<E>,
    pub layers: Vec<CoAttentionStack<E>>,
    pub vocab_head: Linear<E>,
    vocab_size: usize,
    max_len: usize,
}

impl<E: Element> Decoder<E> {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let max_len = cfg.max_text_len + 2; // BOS + caption + EOS
        let layers = (0..cfg.n_decoder_layers)
            .map(|i| CoAttentionStack::new(rng, &format!("{name}.layer{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tok_emb: Param::new(
                format!("{name}.tok_emb"),
                crate::nn::init_tensor(rng, vec![cfg.vocab_size, cfg.d_model], Init::Normal),
            ),
            pos: Param::new(
                format!("{name}.pos"),
                crate::nn::init_tensor(rng, vec![max_len, cfg.d_model], Init::Normal),
            ),
            layers,
            vocab_head: Linear::new(
                rng,
                &format!("{name}.vocab_head"),
                cfg.d_model,
                cfg.vocab_size,
                Init::Zero,
            ),
            vocab_size: cfg.vocab_size,
            max_len,
        })
    }

    /// Teacher-forced logits `[len(input_ids), vocab]`. `memory` is the
    /// fused sequence `[v; l]`; `memory_mask` marks its attendable rows.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        input_ids: &[usize],
        memory: Val,
        memory_mask: &[bool],
    ) -> Result<Val> {
        let t = input_ids.len();
        if t == 0 || t > self.max_len {
            return Err(Error::Input(format!(
                "decoder input length {t} outside 1..={}",
                self.max_len
            )));
        }
        if let Some(&bad) = input_ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::Input(format!(
                "decoder token id {bad} out of vocabulary"
            )));
        }
        let table = tape.param(&self.tok_emb);
        let emb = tape.gather_rows(table, input_ids)?;
        let pos = tape.param(&self.pos);
        let pos = tape.slice_rows(pos, 0, t)?;
        let mut x = tape.add(emb, pos)?;
        let sa_mask = AttnMask::causal(t);
        let ca_mask = AttnMask::from_key_mask(t, memory_mask);
        for layer in &self.layers {
            x = layer.forward(tape, x, memory, Some(&sa_mask), Some(&ca_mask))?;
        }
        self.vocab_head.forward(tape, x)
    }

    pub fn params(&self, out: &mut Vec<Param<E>>) {
        out.push(self.tok_emb.clone());
        out.push(self.pos.clone());
        for layer in &self.layers {
            layer.params(out);
        }
        self.vocab_head.params(out);
    }
}

/// Per-pair unimodal encodings shared by the objectives within one step.
pub struct EncodedBatch {
    pub vseqs: Vec<VisualSequence>,
    pub tseqs: Vec<TextSequence>,
}

pub fn encode_batch<E: Element>(
    tape: &mut Tape<E>,
    model: &Model<E>,
    batch: &Batch<E>,
) -> Result<EncodedBatch> {
    let vseqs = batch
        .images
        .iter()
        .map(|img| model.visual.encode(tape, img))
        .collect::<Result<Vec<_>>>()?;
    let tseqs = batch
        .token_ids
        .iter()
        .map(|ids| model.text.encode(tape, ids))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedBatch { vseqs, tseqs })
}

/// Projected, unit-normalized CLS embeddings of the whole batch: `[B, d]`.
fn contrastive_embeddings<E: Element>(
    tape: &mut Tape<E>,
    proj: &Linear<E>,
    seqs: &[Val],
) -> Result<Val> {
    let cls: Vec<Val> = seqs
        .iter()
        .map(|&s| tape.slice_rows(s, 0, 1))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat_rows_many(&cls)?;
    let projected = proj.forward(tape, stacked)?;
    tape.unit_rows(projected, UNIT_EPS)
}

pub struct ItcOutput {
    pub loss: Val,
    /// Online image-to-text cosine similarities, `[B, B]`; row i is image i.
    pub similarities: Tensor<f64>,
}

/// Contrastive loss against momentum counterparts plus the memory queues,
/// followed by the queue pushes and the momentum parameter update.
pub fn itc_loss<E: Element>(
    tape: &mut Tape<E>,
    model: &mut Model<E>,
    batch: &Batch<E>,
    enc: &EncodedBatch,
) -> Result<ItcOutput> {
    let (out, img_m, txt_m) = itc_forward(tape, model, batch, enc)?;
    model.img_queue.push(&img_m)?;
    model.txt_queue.push(&txt_m)?;
    model.momentum.update(&model.contrastive_params())?;
    Ok(out)
}

/// The ITC forward pass without side effects; returns the loss and the
/// momentum embeddings that [`itc_loss`] enqueues.
pub fn itc_forward<E: Element>(
    tape: &mut Tape<E>,
    model: &Model<E>,
    batch: &Batch<E>,
    enc: &EncodedBatch,
) -> Result<(ItcOutput, Tensor<E>, Tensor<E>)> {
    let tau = model.cfg.temperature;
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let b = batch.len();

    let v_vals: Vec<Val> = enc.vseqs.iter().map(|s| s.embeddings).collect();
    let t_vals: Vec<Val> = enc.tseqs.iter().map(|s| s.embeddings).collect();
    let img = contrastive_embeddings(tape, &model.itc_img_proj, &v_vals)?;
    let txt = contrastive_embeddings(tape, &model.itc_txt_proj, &t_vals)?;

    // momentum forward on a gradient-free tape; outputs enter the online
    // graph only as constants
    let (img_m, txt_m) = {
        let mut mt = Tape::<E>::no_grad();
        let vm: Vec<Val> = batch
            .images
            .iter()
            .map(|i| model.momentum.visual.encode(&mut mt, i).map(|s| s.embeddings))
            .collect::<Result<Vec<_>>>()?;
        let tm: Vec<Val> = batch
            .token_ids
            .iter()
            .map(|ids| model.momentum.text.encode(&mut mt, ids).map(|s| s.embeddings))
            .collect::<Result<Vec<_>>>()?;
        let im = contrastive_embeddings(&mut mt, &model.momentum.img_proj, &vm)?;
        let tm = contrastive_embeddings(&mut mt, &model.momentum.txt_proj, &tm)?;
        (mt.value(im).clone(), mt.value(tm).clone())
    };

    let txt_candidates = concat_with_queue(&txt_m, model.txt_queue.contents())?;
    let img_candidates = concat_with_queue(&img_m, model.img_queue.contents())?;
    let targets: Vec<usize> = (0..b).collect();

    let i2t = direction_loss(tape, img, txt_candidates, tau, &targets)?;
    let t2i = direction_loss(tape, txt, img_candidates, tau, &targets)?;
    let sum = tape.add(i2t, t2i)?;
    let loss = tape.scale(sum, 0.5);

    let similarities = online_similarities(tape.value(img), tape.value(txt));

    Ok((ItcOutput { loss, similarities }, img_m, txt_m))
}

fn concat_with_queue<E: Element>(
    batch_rows: &Tensor<E>,
    queue: Option<Tensor<E>>,
) -> Result<Tensor<E>> {
    match queue {
        None => Ok(batch_rows.clone()),
        Some(q) => {
            let d = batch_rows.cols();
            let mut data = batch_rows.data().to_vec();
            data.extend_from_slice(q.data());
            Tensor::new(vec![batch_rows.rows() + q.rows(), d], data)
        }
    }
}

fn direction_loss<E: Element>(
    tape: &mut Tape<E>,
    queries: Val,
    candidates: Tensor<E>,
    tau: f64,
    targets: &[usize],
) -> Result<Val> {
    let cand = tape.leaf(candidates);
    let cand_t = tape.transpose(cand)?;
    let sims = tape.matmul(queries, cand_t)?;
    let logits = tape.scale(sims, 1.0 / tau);
    tape.cross_entropy(logits, targets, None)
}

fn online_similarities<E: Element>(img: &Tensor<E>, txt: &Tensor<E>) -> Tensor<f64> {
    let (b, d) = (img.rows(), img.cols());
    let mut data = vec![0.0f64; b * b];
    for i in 0..b {
        for j in 0..b {
            let mut s = 0.0;
            for k in 0..d {
                s += img.data()[i * d + k].to_real() * txt.data()[j * d + k].to_real();
            }
            data[i * b + j] = s;
        }
    }
    Tensor::new(vec![b, b], data).expect("similarity shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HardNegativeMode {
    /// Probability proportional to the softmaxed off-diagonal similarity.
    Sampled,
    /// Deterministic: highest off-diagonal similarity.
    Argmax,
}

/// Picks a hard negative index from `weights` (higher = more similar),
/// never `positive`.
pub fn hard_negative(
    weights: &[f64],
    positive: usize,
    mode: HardNegativeMode,
    rng: &mut ChaCha8Rng,
) -> usize {
    debug_assert!(weights.len() >= 2);
    match mode {
        HardNegativeMode::Argmax => {
            let mut best = usize::MAX;
            let mut best_w = f64::NEG_INFINITY;
            for (j, &w) in weights.iter().enumerate() {
                if j != positive && w > best_w {
                    best = j;
                    best_w = w;
                }
            }
            best
        }
        HardNegativeMode::Sampled => {
            let max = weights
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != positive)
                .map(|(_, &w)| w)
                .fold(f64::NEG_INFINITY, f64::max);
            let probs: Vec<f64> = weights
                .iter()
                .enumerate()
                .map(|(j, &w)| if j == positive { 0.0 } else { (w - max).exp() })
                .collect();
            let total: f64 = probs.iter().sum();
            let mut draw = rng.random::<f64>() * total;
            for (j, &p) in probs.iter().enumerate() {
                draw -= p;
                if draw <= 0.0 && j != positive {
                    return j;
                }
            }
            // numeric fallthrough: last valid index
            (0..weights.len()).rev().find(|&j| j != positive).unwrap()
        }
    }
}

/// Two-way matched/unmatched classification on the fused CLS token, with
/// one hard negative text per image and one hard negative image per text.
pub fn itm_loss<E: Element>(
    tape: &mut Tape<E>,
    model: &Model<E>,
    enc: &EncodedBatch,
    similarities: &Tensor<f64>,
    mode: HardNegativeMode,
    rng: &mut ChaCha8Rng,
) -> Result<Val> {
    let b = enc.vseqs.len();
    if b < 2 {
        return Err(Error::Input(
            "itm needs a batch of at least 2 to mine negatives".into(),
        ));
    }
    let mut pairs: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    for i in 0..b {
        let row = similarities.row(i).to_vec();
        pairs.push((i, hard_negative(&row, i, mode, rng)));
    }
    for i in 0..b {
        let col: Vec<f64> = (0..b).map(|k| similarities.row(k)[i]).collect();
        pairs.push((hard_negative(&col, i, mode, rng), i));
    }
    let mut cls_rows = Vec::with_capacity(pairs.len());
    for &(vi, ti) in &pairs {
        let fused = model.fuse(tape, &enc.vseqs[vi], &enc.tseqs[ti])?;
        cls_rows.push(tape.slice_rows(fused.l, 0, 1)?);
    }
    let cls = tape.concat_rows_many(&cls_rows)?;
    let logits = model.itm_head.forward(tape, cls)?;
    let mut targets = vec![1usize; b];
    targets.extend(vec![0usize; 2 * b]);
    tape.cross_entropy(logits, &targets, None)
}

/// Token positions selected for masking plus the corrupted caption.
fn corrupt_caption(
    ids: &[usize],
    mask_rate: f64,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<bool>) {
    let n = ids.len();
    let k = ((mask_rate * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..n {
        let j = rng.random_range(i..n);
        order.swap(i, j);
    }
    let mut selected = vec![false; n];
    for &p in &order[..k] {
        selected[p] = true;
    }
    let mut corrupted = ids.to_vec();
    for p in 0..n {
        if !selected[p] {
            continue;
        }
        let roll = rng.random::<f64>();
        if roll < 0.8 {
            corrupted[p] = MASK_TOKEN;
        } else if roll < 0.9 {
            corrupted[p] = rng.random_range(CONTENT_BASE..vocab_size);
        } // else leave unchanged
    }
    (corrupted, selected)
}

/// Masked-token prediction from the fused text stream.
pub fn mlm_loss<E: Element>(
    tape: &mut Tape<E>,
    model: &Model<E>,
    batch: &Batch<E>,
    enc: &EncodedBatch,
    rng: &mut ChaCha8Rng,
) -> Result<Val> {
    let vocab = model.cfg.vocab_size;
    let ignore = vocab; // sentinel outside the vocabulary
    let mut token_rows = Vec::new();
    let mut targets = Vec::new();
    for (i, ids) in batch.token_ids.iter().enumerate() {
        let (corrupted, selected) = corrupt_caption(ids, model.cfg.mlm_mask_rate, vocab, rng);
        let tseq = model.text.encode(tape, &corrupted)?;
        let fused = model.fuse(tape, &enc.vseqs[i], &tseq)?;
        let n = ids.len();
        token_rows.push(tape.slice_rows(fused.l, 1, n + 1)?);
        targets.extend((0..n).map(|p| if selected[p] { ids[p] } else { ignore }));
    }
    let rows = tape.concat_rows_many(&token_rows)?;
    let logits = model.mlm_head.forward(tape, rows)?;
    tape.cross_entropy(logits, &targets, Some(ignore))
}

/// Suffix cross-entropy under the causal decoder; the encoder side fuses the
/// image with the caption prefix. `split` fixes the split point for every
/// example; `None` samples it uniformly per example.
pub fn prefix_lm_loss<E: Element>(
    tape: &mut Tape<E>,
    model: &Model<E>,
    batch: &Batch<E>,
    enc: &EncodedBatch,
    split: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Val> {
    let mut per_example = Vec::with_capacity(batch.len());
    for (i, caption) in batch.token_ids.iter().enumerate() {
        let mut seq = caption.clone();
        seq.push(EOS);
        let t = seq.len();
        let p = match split {
            Some(p) if p >= t => {
                return Err(Error::Contract(format!(
                    "prefix split {p} out of range for sequence of length {t}"
                )));
            }
            Some(p) => p,
            None => rng.random_range(0..t),
        };
        let prefix = &seq[..p];
        let suffix = &seq[p..];

        let tseq = model.text.encode(tape, prefix)?;
        let fused = model.fuse(tape, &enc.vseqs[i], &tseq)?;
        let memory = tape.concat_rows(fused.v, fused.l)?;
        let mut memory_mask = vec![true; model.cfg.n_patches() + 1];
        memory_mask.extend_from_slice(&tseq.attention_mask);

        let mut dec_input = vec![BOS];
        dec_input.extend_from_slice(&suffix[..suffix.len() - 1]);
        let logits = model.decoder.forward(tape, &dec_input, memory, &memory_mask)?;
        per_example.push(tape.cross_entropy(logits, suffix, None)?);
    }
    let mut acc = per_example[0];
    for &l in &per_example[1..] {
        acc = tape.add(acc, l)?;
    }
    Ok(tape.scale(acc, 1.0 / per_example.len() as f64))
}

/// Deterministic argmax decoding conditioned on the image and an optional
/// caption prefix; stops at EOS or after `max_len` tokens.
pub fn greedy_decode<E: Element>(
    model: &Model<E>,
    image: &Tensor<E>,
    prefix: &[usize],
    max_len: usize,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::Input("max_len must be at least 1".into()));
    }
    let mut tape = Tape::<E>::no_grad();
    let vseq = model.visual.encode(&mut tape, image)?;
    let tseq = model.text.encode(&mut tape, prefix)?;
    let fused = model.fuse(&mut tape, &vseq, &tseq)?;
    let memory = tape.concat_rows(fused.v, fused.l)?;
    let mut memory_mask = vec![true; model.cfg.n_patches() + 1];
    memory_mask.extend_from_slice(&tseq.attention_mask);

    let mut out: Vec<usize> = Vec::new();
    for _ in 0..max_len {
        let mut input = vec![BOS];
        input.extend_from_slice(&out);
        let logits = model.decoder.forward(&mut tape, &input, memory, &memory_mask)?;
        let t = tape.value(logits);
        let row = t.row(input.len() - 1);
        let tok = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(j, _)| j)
            .expect("non-empty vocab");
        if tok == EOS {
            break;
        }
        out.push(tok);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub itc: f64,
    pub itm: f64,
    pub mlm: f64,
    pub prefixlm: f64,
    pub total: f64,
}

/// One joint optimization step over all four objectives. Losses with zero
/// weight are skipped entirely (their parameters receive no gradient and,
/// for ITC, queues and momentum weights stay untouched).
pub fn joint_step<E: Element>(
    model: &mut Model<E>,
    batch: &Batch<E>,
    opt: &mut Optimizer<E>,
    mode: HardNegativeMode,
    rng: &mut ChaCha8Rng,
) -> Result<LossComponents> {
    let w = model.cfg.loss_weights;
    let mut tape = Tape::<E>::new();
    let enc = encode_batch(&mut tape, model, batch)?;

    let mut components = LossComponents {
        itc: 0.0,
        itm: 0.0,
        mlm: 0.0,
        prefixlm: 0.0,
        total: 0.0,
    };
    let mut weighted: Vec<(Val, f64)> = Vec::new();
    let mut similarities = None;

    if w.itc != 0.0 || w.itm != 0.0 {
        let itc = itc_loss(&mut tape, model, batch, &enc)?;
        similarities = Some(itc.similarities);
        if w.itc != 0.0 {
            components.itc = tape.value(itc.loss).scalar_value().to_real();
            weighted.push((itc.loss, w.itc));
        }
    }
    if w.itm != 0.0 {
        let sims = similarities.as_ref().expect("itc ran above");
        let loss = itm_loss(&mut tape, model, &enc, sims, mode, rng)?;
        components.itm = tape.value(loss).scalar_value().to_real();
        weighted.push((loss, w.itm));
    }
    if w.mlm != 0.0 {
        let loss = mlm_loss(&mut tape, model, batch, &enc, rng)?;
        components.mlm = tape.value(loss).scalar_value().to_real();
        weighted.push((loss, w.mlm));
    }
    if w.prefixlm != 0.0 {
        let loss = prefix_lm_loss(&mut tape, model, batch, &enc, None, rng)?;
        components.prefixlm = tape.value(loss).scalar_value().to_real();
        weighted.push((loss, w.prefixlm));
    }
    if weighted.is_empty() {
        return Ok(components);
    }

    let mut total = {
        let (v, wt) = weighted[0];
        tape.scale(v, wt)
    };
    for &(v, wt) in &weighted[1..] {
        let scaled = tape.scale(v, wt);
        total = tape.add(total, scaled)?;
    }
    components.total = tape.value(total).scalar_value().to_real();

    tape.backward(total)?;
    opt.step(&model.params())?;
    model.zero_grads();
    Ok(components)
}

/// Minibatch training over a fixed pool of pairs; one tab-separated log
/// line per step: step, itc, itm, mlm, prefixlm, total.
pub fn train<E: Element>(
    model: &mut Model<E>,
    pool: &Batch<E>,
    steps: usize,
    batch_size: usize,
    opt: &mut Optimizer<E>,
    rng: &mut ChaCha8Rng,
    mut log: Option<&mut dyn IoWrite>,
) -> Result<Vec<LossComponents>> {
    if batch_size == 0 {
        return Err(Error::Input("batch_size must be at least 1".into()));
    }
    let mut history = Vec::with_capacity(steps);
    for step in 1..=steps {
        let indices: Vec<usize> = (0..batch_size)
            .map(|_| rng.random_range(0..pool.len()))
            .collect();
        let batch = pool.subset(&indices);
        let c = joint_step(model, &batch, opt, HardNegativeMode::Sampled, rng)?;
        if let Some(w) = log.as_deref_mut() {
            writeln!(
                w,
                "{step}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                c.itc, c.itm, c.mlm, c.prefixlm, c.total
            )?;
        }
        history.push(c);
    }
    Ok(history)
}

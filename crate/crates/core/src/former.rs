//! Toy frozen query transformer.
//!
//! Each block runs self-attention over `[query tokens ; instruction tokens]`,
//! cross-attention from the query rows to the vision tokens, and a shared
//! feed-forward layer, each followed by a residual connection and an affine
//! layer norm. A linear classifier reads the mean of the final query rows.
//!
//! Every attention projection goes through a [`Projector`], which is where
//! adapters hook in.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dma::{AttentionKind, FactorBank, ModalityTag, Slot};
use crate::error::{Error, Result};
use crate::params::{content_hash, Parameters};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FormerConfig {
    pub layers: usize,
    /// Text / hidden width.
    pub hidden: usize,
    /// Vision token width.
    pub vision: usize,
    pub heads: usize,
    pub queries: usize,
    /// Label alphabet size.
    pub vocab: usize,
    pub ffn_mult: usize,
    pub word_buckets: usize,
    /// Size of the question-id embedding table.
    pub questions: usize,
    /// Backbone weights drawn with std `gain/sqrt(fan_in)` instead of 0.02.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_gain: Option<f64>,
}

impl Default for FormerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 32,
            vision: 56,
            heads: 4,
            queries: 8,
            vocab: 6,
            ffn_mult: 4,
            word_buckets: 64,
            questions: 4,
            init_gain: None,
        }
    }
}

impl FormerConfig {
    fn init_std(&self, fan_in: usize) -> f64 {
        match self.init_gain {
            Some(g) => g / (fan_in as f64).sqrt(),
            None => INIT_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("vision", self.vision),
            ("heads", self.heads),
            ("queries", self.queries),
            ("vocab", self.vocab),
            ("ffn_mult", self.ffn_mult),
            ("word_buckets", self.word_buckets),
            ("questions", self.questions),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if let Some(g) = self.init_gain.filter(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::config(format!("init_gain must be positive, got {g}")));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Input width read by a projection slot.
    pub fn slot_in_dim(&self, kind: AttentionKind, slot: Slot) -> usize {
        match (kind, slot) {
            (AttentionKind::Cross, Slot::Key | Slot::Value) => self.vision,
            _ => self.hidden,
        }
    }
}

/// Parameters of one block, counted in closed form.
pub fn block_param_count(hidden: usize, vision: usize, ffn_mult: usize) -> usize {
    let h = hidden;
    let attn_self = 4 * h * h;
    let attn_cross = 2 * h * h + 2 * h * vision;
    let ffn = 2 * ffn_mult * h * h + ffn_mult * h + h;
    let norms = 3 * 2 * h;
    attn_self + attn_cross + ffn + norms
}

pub fn classifier_param_count(cfg: &FormerConfig) -> usize {
    cfg.vocab * cfg.hidden + cfg.vocab
}

/// Closed-form size of a backbone built from `cfg`.
pub fn backbone_param_count(cfg: &FormerConfig) -> usize {
    let h = cfg.hidden;
    (cfg.word_buckets + cfg.questions + cfg.queries) * h
        + cfg.layers * block_param_count(h, cfg.vision, cfg.ffn_mult)
        + classifier_param_count(cfg)
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    fn new(h: usize) -> Self {
        Self {
            gain: Tensor::ones(&[h]),
            bias: Tensor::zeros(&[h]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    prefix: String,
    /// `q, k, v, o`, each `d_out × d_in`.
    pub self_attn: [Tensor; 4],
    pub cross_attn: [Tensor; 4],
    pub ln1: Norm,
    pub ln2: Norm,
    pub ln3: Norm,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

fn slot_index(slot: Slot) -> usize {
    match slot {
        Slot::Query => 0,
        Slot::Key => 1,
        Slot::Value => 2,
        Slot::Output => 3,
    }
}

impl Block {
    fn init(cfg: &FormerConfig, prefix: String, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden;
        let mut w = |r: usize, c: usize| Tensor::randn(&[r, c], cfg.init_std(c), rng);
        let self_attn = [w(h, h), w(h, h), w(h, h), w(h, h)];
        let cross_attn = [w(h, h), w(h, cfg.vision), w(h, cfg.vision), w(h, h)];
        let ffn_w1 = w(cfg.ffn_mult * h, h);
        let ffn_w2 = w(h, cfg.ffn_mult * h);
        Self {
            prefix,
            self_attn,
            cross_attn,
            ln1: Norm::new(h),
            ln2: Norm::new(h),
            ln3: Norm::new(h),
            ffn_w1,
            ffn_b1: Tensor::zeros(&[cfg.ffn_mult * h]),
            ffn_w2,
            ffn_b2: Tensor::zeros(&[h]),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Copy under a new name prefix, e.g. a trainable duplicate.
    pub fn renamed(&self, prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
            ..self.clone()
        }
    }

    pub fn weight(&self, kind: AttentionKind, slot: Slot) -> &Tensor {
        match kind {
            AttentionKind::SelfAttn => &self.self_attn[slot_index(slot)],
            AttentionKind::Cross => &self.cross_attn[slot_index(slot)],
        }
    }

    fn weight_name(&self, kind: AttentionKind, slot: Slot) -> String {
        format!("{}.{}.{}", self.prefix, kind.as_str(), slot.as_str())
    }
}

impl Parameters for Block {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for kind in [AttentionKind::SelfAttn, AttentionKind::Cross] {
            for slot in Slot::ALL {
                f(&self.weight_name(kind, slot), self.weight(kind, slot));
            }
        }
        let p = &self.prefix;
        for (name, n) in [("ln1", &self.ln1), ("ln2", &self.ln2), ("ln3", &self.ln3)] {
            f(&format!("{p}.{name}.g"), &n.gain);
            f(&format!("{p}.{name}.b"), &n.bias);
        }
        f(&format!("{p}.ffn.w1"), &self.ffn_w1);
        f(&format!("{p}.ffn.b1"), &self.ffn_b1);
        f(&format!("{p}.ffn.w2"), &self.ffn_w2);
        f(&format!("{p}.ffn.b2"), &self.ffn_b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let p = self.prefix.clone();
        for (kind, ws) in [
            (AttentionKind::SelfAttn, &mut self.self_attn),
            (AttentionKind::Cross, &mut self.cross_attn),
        ] {
            for (slot, w) in Slot::ALL.iter().zip(ws.iter_mut()) {
                f(&format!("{p}.{}.{}", kind.as_str(), slot.as_str()), w);
            }
        }
        for (name, n) in [("ln1", &mut self.ln1), ("ln2", &mut self.ln2), ("ln3", &mut self.ln3)] {
            f(&format!("{p}.{name}.g"), &mut n.gain);
            f(&format!("{p}.{name}.b"), &mut n.bias);
        }
        f(&format!("{p}.ffn.w1"), &mut self.ffn_w1);
        f(&format!("{p}.ffn.b1"), &mut self.ffn_b1);
        f(&format!("{p}.ffn.w2"), &mut self.ffn_w2);
        f(&format!("{p}.ffn.b2"), &mut self.ffn_b2);
    }
}

#[derive(Clone, Debug)]
pub struct Classifier {
    prefix: String,
    /// `vocab × hidden`.
    pub w: Tensor,
    pub b: Tensor,
}

impl Classifier {
    pub fn renamed(&self, prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
            ..self.clone()
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

impl Parameters for Classifier {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.w", self.prefix), &self.w);
        f(&format!("{}.b", self.prefix), &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let p = self.prefix.clone();
        f(&format!("{p}.w"), &mut self.w);
        f(&format!("{p}.b"), &mut self.b);
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: FormerConfig,
    /// `word_buckets × hidden`.
    pub words: Tensor,
    /// `questions × hidden`.
    pub questions: Tensor,
    /// Learnable query tokens, `queries × hidden`.
    pub queries: Tensor,
    pub blocks: Vec<Block>,
    pub classifier: Classifier,
}

/// Seeded backbone with every weight `~ N(0, 0.02²)` (or the fan-in scaled
/// std when `init_gain` is set), unit norm gains and zero biases. All tensors are frozen.
pub fn build_frozen_backbone(cfg: &FormerConfig, seed: u64) -> Result<Backbone> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = cfg.hidden;
    let words = Tensor::randn(&[cfg.word_buckets, h], cfg.init_std(h), &mut rng);
    let questions = Tensor::randn(&[cfg.questions, h], cfg.init_std(h), &mut rng);
    let queries = Tensor::randn(&[cfg.queries, h], cfg.init_std(h), &mut rng);
    let blocks = (0..cfg.layers)
        .map(|l| Block::init(cfg, format!("backbone.layer{l}"), &mut rng))
        .collect();
    let classifier = Classifier {
        prefix: "backbone.classifier".into(),
        w: Tensor::randn(&[cfg.vocab, h], cfg.init_std(h), &mut rng),
        b: Tensor::zeros(&[cfg.vocab]),
    };
    Ok(Backbone {
        cfg: *cfg,
        words,
        questions,
        queries,
        blocks,
        classifier,
    })
}

impl Backbone {
    pub fn config(&self) -> &FormerConfig {
        &self.cfg
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }

    /// Stacked instruction embeddings for bucket ids; `None` entries take the
    /// question embedding `question`.
    pub fn embed_instruction(&self, tape: &mut Tape, ids: &[Option<usize>], question: Option<usize>) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::contract("empty instruction"));
        }
        let words = tape.param("backbone.words", &self.words);
        let qs = tape.param("backbone.questions", &self.questions);
        let mut rows = Vec::with_capacity(ids.len());
        for id in ids {
            let row = match (id, question) {
                (Some(w), _) if *w < self.cfg.word_buckets => tape.slice_rows(words, *w, w + 1)?,
                (None, Some(q)) if q < self.cfg.questions => tape.slice_rows(qs, q, q + 1)?,
                (None, None) => continue,
                (Some(w), _) => {
                    return Err(Error::Lookup {
                        kind: "word bucket",
                        name: w.to_string(),
                    })
                }
                (None, Some(q)) => {
                    return Err(Error::Lookup {
                        kind: "question",
                        name: q.to_string(),
                    })
                }
            };
            rows.push(row);
        }
        tape.concat(&rows)
    }

    /// Plain numeric counterpart of [`Backbone::embed_instruction`].
    pub fn instruction_value(&self, ids: &[Option<usize>], question: Option<usize>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.embed_instruction(&mut tape, ids, question)?;
        Ok(tape.value(v).clone())
    }

    /// Default wiring: all backbone blocks and the backbone classifier.
    pub fn view(&self) -> FormerView<'_> {
        FormerView {
            backbone: self,
            blocks: self.blocks.iter().collect(),
            classifier: &self.classifier,
        }
    }
}

impl Parameters for Backbone {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("backbone.words", &self.words);
        f("backbone.questions", &self.questions);
        f("backbone.queries", &self.queries);
        for b in &self.blocks {
            b.visit(f);
        }
        self.classifier.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("backbone.words", &mut self.words);
        f("backbone.questions", &mut self.questions);
        f("backbone.queries", &mut self.queries);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.classifier.visit_mut(f);
    }
}

/// Which blocks and classifier a forward pass runs through.
#[derive(Clone, Debug)]
pub struct FormerView<'a> {
    pub backbone: &'a Backbone,
    pub blocks: Vec<&'a Block>,
    pub classifier: &'a Classifier,
}

impl<'a> FormerView<'a> {
    /// Swaps in a replacement for the last block and the classifier.
    pub fn with_head(mut self, block: &'a Block, classifier: &'a Classifier) -> Self {
        if let Some(last) = self.blocks.last_mut() {
            *last = block;
        }
        self.classifier = classifier;
        self
    }
}

/// Where a projection sits in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Site {
    pub layer: usize,
    pub kind: AttentionKind,
    pub slot: Slot,
    pub modality: ModalityTag,
}

/// Computes `x W0ᵀ` (possibly adapted) for token rows `x`.
pub trait Projector {
    fn project(&self, tape: &mut Tape, w0: Var, x: Var, site: Site) -> Result<Var>;
}

/// Unadapted projection.
pub struct Frozen;

impl Projector for Frozen {
    fn project(&self, tape: &mut Tape, w0: Var, x: Var, _site: Site) -> Result<Var> {
        tape.matmul_nt(x, w0)
    }
}

/// One factor bank per attention kind, shared by all layers.
pub struct DmaBanks<'a> {
    pub self_bank: &'a FactorBank,
    pub cross_bank: &'a FactorBank,
}

impl Projector for DmaBanks<'_> {
    fn project(&self, tape: &mut Tape, w0: Var, x: Var, site: Site) -> Result<Var> {
        let bank = match site.kind {
            AttentionKind::SelfAttn => self.self_bank,
            AttentionKind::Cross => self.cross_bank,
        };
        bank.project_rows(tape, w0, x, site.modality, site.slot)
    }
}

#[derive(Clone, Debug)]
pub struct FormerOutput {
    /// `[vocab]`.
    pub logits: Var,
    /// Final query rows, `queries × hidden`.
    pub query_rows: Var,
    /// Final instruction rows, `T × hidden`.
    pub instruction_rows: Var,
    /// Cross-attention output projection of each layer, `queries × hidden`.
    pub cross_outputs: Vec<Var>,
    /// `[layer][head]` cross-attention weights, `queries × Tv`.
    pub attention: Vec<Vec<Tensor>>,
}

fn affine_norm(tape: &mut Tape, x: Var, norm: &Norm, name: &str) -> Result<Var> {
    let g = tape.param(&format!("{name}.g"), &norm.gain);
    let b = tape.param(&format!("{name}.b"), &norm.bias);
    let n = tape.layer_norm(x, LN_EPS);
    let scaled = tape.mul(n, g)?;
    tape.add(scaled, b)
}

/// Multi-head scaled dot-product attention. Returns the concatenated head
/// outputs and each head's weight matrix.
fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let width = tape.shape(q)[1];
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for hd in 0..heads {
        let (a, b) = (hd * dh, (hd + 1) * dh);
        let qh = if heads == 1 { q } else { tape.slice_cols(q, a, b)? };
        let kh = if heads == 1 { k } else { tape.slice_cols(k, a, b)? };
        let vh = if heads == 1 { v } else { tape.slice_cols(v, a, b)? };
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let w = tape.softmax(s, 1)?;
        outs.push(tape.matmul(w, vh)?);
        maps.push(w);
    }
    let ctx = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((ctx, maps))
}

struct StreamProjector<'p> {
    proj: &'p dyn Projector,
    layer: usize,
    kind: AttentionKind,
}

impl StreamProjector<'_> {
    fn run(&self, tape: &mut Tape, block: &Block, slot: Slot, x: Var, modality: ModalityTag) -> Result<Var> {
        let w0 = tape.param(&block.weight_name(self.kind, slot), block.weight(self.kind, slot));
        self.proj.project(
            tape,
            w0,
            x,
            Site {
                layer: self.layer,
                kind: self.kind,
                slot,
                modality,
            },
        )
    }

    /// Projects the two row blocks with their own modality tags and restacks.
    fn run_split(&self, tape: &mut Tape, block: &Block, slot: Slot, hq: Var, hi: Var) -> Result<Var> {
        let a = self.run(tape, block, slot, hq, ModalityTag::QueryStream)?;
        let b = self.run(tape, block, slot, hi, ModalityTag::TextStream)?;
        tape.concat(&[a, b])
    }
}

/// Runs the network on one sample. `instruction: T × hidden`.
pub fn forward(
    tape: &mut Tape,
    view: &FormerView<'_>,
    proj: &dyn Projector,
    vision: &Tensor,
    instruction: Var,
) -> Result<FormerOutput> {
    let cfg = view.backbone.cfg;
    let (tv, hv) = vision.dims2()?;
    if hv != cfg.vision || tv == 0 {
        return Err(Error::config(format!(
            "vision tokens {:?} do not match width {}",
            vision.shape(),
            cfg.vision
        )));
    }
    let t = match tape.shape(instruction) {
        &[t, h] if h == cfg.hidden && t > 0 => t,
        s => return Err(Error::dim("instruction", s, &[0, cfg.hidden])),
    };
    let nq = cfg.queries;
    let vis = tape.constant(vision);
    let mut hq = tape.param("backbone.queries", &view.backbone.queries);
    let mut hi = instruction;
    let mut cross_outputs = Vec::with_capacity(view.blocks.len());
    let mut attention = Vec::with_capacity(view.blocks.len());

    for (layer, block) in view.blocks.iter().enumerate() {
        let p = block.prefix().to_string();
        let sp = StreamProjector {
            proj,
            layer,
            kind: AttentionKind::SelfAttn,
        };
        let q = sp.run_split(tape, block, Slot::Query, hq, hi)?;
        let k = sp.run_split(tape, block, Slot::Key, hq, hi)?;
        let v = sp.run_split(tape, block, Slot::Value, hq, hi)?;
        let (ctx, _) = attend(tape, q, k, v, cfg.heads)?;
        let ctx_q = tape.slice_rows(ctx, 0, nq)?;
        let ctx_i = tape.slice_rows(ctx, nq, nq + t)?;
        let oq = sp.run(tape, block, Slot::Output, ctx_q, ModalityTag::QueryStream)?;
        let oi = sp.run(tape, block, Slot::Output, ctx_i, ModalityTag::TextStream)?;
        let rq = tape.add(hq, oq)?;
        let ri = tape.add(hi, oi)?;
        let both = tape.concat(&[rq, ri])?;
        let both = affine_norm(tape, both, &block.ln1, &format!("{p}.ln1"))?;
        hq = tape.slice_rows(both, 0, nq)?;
        hi = tape.slice_rows(both, nq, nq + t)?;

        let cp = StreamProjector {
            proj,
            layer,
            kind: AttentionKind::Cross,
        };
        let m = ModalityTag::QueryStream;
        let q = cp.run(tape, block, Slot::Query, hq, m)?;
        let k = cp.run(tape, block, Slot::Key, vis, m)?;
        let v = cp.run(tape, block, Slot::Value, vis, m)?;
        let (ctx, maps) = attend(tape, q, k, v, cfg.heads)?;
        attention.push(maps.iter().map(|&w| tape.value(w).clone()).collect());
        let co = cp.run(tape, block, Slot::Output, ctx, m)?;
        cross_outputs.push(co);
        let rq = tape.add(hq, co)?;
        hq = affine_norm(tape, rq, &block.ln2, &format!("{p}.ln2"))?;

        let both = tape.concat(&[hq, hi])?;
        let w1 = tape.param(&format!("{p}.ffn.w1"), &block.ffn_w1);
        let b1 = tape.param(&format!("{p}.ffn.b1"), &block.ffn_b1);
        let w2 = tape.param(&format!("{p}.ffn.w2"), &block.ffn_w2);
        let b2 = tape.param(&format!("{p}.ffn.b2"), &block.ffn_b2);
        let a = tape.matmul_nt(both, w1)?;
        let a = tape.add(a, b1)?;
        let a = tape.gelu(a);
        let f = tape.matmul_nt(a, w2)?;
        let f = tape.add(f, b2)?;
        let r = tape.add(both, f)?;
        let r = affine_norm(tape, r, &block.ln3, &format!("{p}.ln3"))?;
        hq = tape.slice_rows(r, 0, nq)?;
        hi = tape.slice_rows(r, nq, nq + t)?;
    }

    let c = view.classifier;
    let w = tape.param(&format!("{}.w", c.prefix()), &c.w);
    let b = tape.param(&format!("{}.b", c.prefix()), &c.b);
    let pooled = tape.mean_rows(hq)?;
    let pooled = tape.reshape(pooled, &[1, cfg.hidden])?;
    let logits = tape.matmul_nt(pooled, w)?;
    let logits = tape.reshape(logits, &[cfg.vocab])?;
    let logits = tape.add(logits, b)?;
    Ok(FormerOutput {
        logits,
        query_rows: hq,
        instruction_rows: hi,
        cross_outputs,
        attention,
    })
}

/// Writes `layer,head,token,w1..wTv` rows, one per query token.
pub fn dump_attention(attention: &[Vec<Tensor>], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (layer, heads) in attention.iter().enumerate() {
        for (head, map) in heads.iter().enumerate() {
            let (rows, cols) = map.dims2()?;
            for token in 0..rows {
                write!(out, "{layer},{head},{token}").expect("string write");
                for j in 0..cols {
                    write!(out, ",{}", map.at2(token, j)).expect("string write");
                }
                out.push('\n');
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Adapter-free forward on plain row-major buffers, independent of the tape.
/// Returns the logits.
pub fn reference_logits(bb: &Backbone, vision: &Tensor, instruction: &Tensor) -> Result<Vec<f64>> {
    use reference::*;
    let cfg = bb.cfg;
    let h = cfg.hidden;
    let (tv, _) = vision.dims2()?;
    let (t, _) = instruction.dims2()?;
    let nq = cfg.queries;
    let mut xq = bb.queries.data().to_vec();
    let mut xi = instruction.data().to_vec();
    for block in &bb.blocks {
        let w = |kind, slot| block.weight(kind, slot).data();
        let mut all = xq.clone();
        all.extend_from_slice(&xi);
        let n = nq + t;
        let q = linear_t(&all, n, h, w(AttentionKind::SelfAttn, Slot::Query), h);
        let k = linear_t(&all, n, h, w(AttentionKind::SelfAttn, Slot::Key), h);
        let v = linear_t(&all, n, h, w(AttentionKind::SelfAttn, Slot::Value), h);
        let (ctx, _) = mha(&q, n, &k, &v, n, h, cfg.heads);
        let o = linear_t(&ctx, n, h, w(AttentionKind::SelfAttn, Slot::Output), h);
        let mut r: Vec<f64> = all.iter().zip(&o).map(|(a, b)| a + b).collect();
        norm_rows(&mut r, n, h, &block.ln1);
        xq = r[..nq * h].to_vec();
        xi = r[nq * h..].to_vec();

        let vd = vision.data();
        let q = linear_t(&xq, nq, h, w(AttentionKind::Cross, Slot::Query), h);
        let k = linear_t(vd, tv, cfg.vision, w(AttentionKind::Cross, Slot::Key), h);
        let v = linear_t(vd, tv, cfg.vision, w(AttentionKind::Cross, Slot::Value), h);
        let (ctx, _) = mha(&q, nq, &k, &v, tv, h, cfg.heads);
        let o = linear_t(&ctx, nq, h, w(AttentionKind::Cross, Slot::Output), h);
        let mut r: Vec<f64> = xq.iter().zip(&o).map(|(a, b)| a + b).collect();
        norm_rows(&mut r, nq, h, &block.ln2);
        xq = r;

        let mut all = xq.clone();
        all.extend_from_slice(&xi);
        let n = nq + t;
        let m = cfg.ffn_mult * h;
        let mut a = linear_t(&all, n, h, block.ffn_w1.data(), m);
        for (i, x) in a.iter_mut().enumerate() {
            *x = gelu(*x + block.ffn_b1.data()[i % m]);
        }
        let f = linear_t(&a, n, m, block.ffn_w2.data(), h);
        let mut r: Vec<f64> = (0..n * h)
            .map(|i| all[i] + f[i] + block.ffn_b2.data()[i % h])
            .collect();
        norm_rows(&mut r, n, h, &block.ln3);
        xq = r[..nq * h].to_vec();
        xi = r[nq * h..].to_vec();
    }
    let mut pooled = vec![0.0; h];
    for i in 0..nq {
        for j in 0..h {
            pooled[j] += xq[i * h + j];
        }
    }
    pooled.iter_mut().for_each(|x| *x /= nq as f64);
    let c = &bb.classifier;
    Ok((0..cfg.vocab)
        .map(|v| (0..h).map(|j| c.w.data()[v * h + j] * pooled[j]).sum::<f64>() + c.b.data()[v])
        .collect())
}

mod reference {
    use super::{Norm, LN_EPS};

    /// `x: n × din` times `wᵀ` for `w: dout × din`.
    pub fn linear_t(x: &[f64], n: usize, din: usize, w: &[f64], dout: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            for o in 0..dout {
                let mut s = 0.0;
                for k in 0..din {
                    s += x[i * din + k] * w[o * din + k];
                }
                out[i * dout + o] = s;
            }
        }
        out
    }

    pub fn mha(q: &[f64], n: usize, k: &[f64], v: &[f64], m: usize, h: usize, heads: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let dh = h / heads;
        let mut ctx = vec![0.0; n * h];
        let mut maps = Vec::new();
        for hd in 0..heads {
            let off = hd * dh;
            let mut map = vec![0.0; n * m];
            for i in 0..n {
                let scores: Vec<f64> = (0..m)
                    .map(|j| (0..dh).map(|c| q[i * h + off + c] * k[j * h + off + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..m {
                    map[i * m + j] = e[j] / z;
                    for c in 0..dh {
                        ctx[i * h + off + c] += e[j] / z * v[j * h + off + c];
                    }
                }
            }
            maps.push(map);
        }
        (ctx, maps)
    }

    pub fn norm_rows(x: &mut [f64], n: usize, h: usize, norm: &Norm) {
        for i in 0..n {
            let row = &mut x[i * h..(i + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * norm.gain.data()[j] + norm.bias.data()[j];
            }
        }
    }

    pub fn gelu(x: f64) -> f64 {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
    }
}

//! Self-attention text classifier.
//!
//! Pre-norm transformer encoder with learned position embeddings, a tanh
//! feed-forward block, and a linear head over the CLS position. Every
//! forward pass runs on a fresh gradient tape and keeps the per-layer
//! attention probability matrices alive so attributions can read them.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor2D;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

const LN_EPS: f64 = 1e-5;
/// Additive pre-softmax mask for padded key positions. Large enough that
/// exp underflows to exactly zero after max subtraction.
const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_classes: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn small(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            vocab_size,
            num_classes,
            layers: 2,
            dim: 32,
            heads: 2,
            ff_dim: 64,
            max_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.ff_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(
                "vocab must include the four reserved tokens".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// A value tensor with its paired gradient buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor2D,
    pub grad: Tensor2D,
}

impl Param {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            value: Tensor2D::zeros(rows, cols),
            grad: Tensor2D::zeros(rows, cols),
        }
    }

    fn ones(rows: usize, cols: usize) -> Self {
        Self {
            value: Tensor2D::new(rows, cols, vec![1.0; rows * cols]).expect("shape"),
            grad: Tensor2D::zeros(rows, cols),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gain: Param,
    pub ln1_bias: Param,
    pub w_q: Param,
    pub b_q: Param,
    pub w_k: Param,
    pub b_k: Param,
    pub w_v: Param,
    pub b_v: Param,
    pub w_o: Param,
    pub b_o: Param,
    pub ln2_gain: Param,
    pub ln2_bias: Param,
    pub w_ff1: Param,
    pub b_ff1: Param,
    pub w_ff2: Param,
    pub b_ff2: Param,
}

/// All learnable tensors. Field order here defines the checkpoint layout
/// and the order of initialization draws.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: Param,
    pub position: Param,
    pub layers: Vec<LayerParams>,
    pub ln_f_gain: Param,
    pub ln_f_bias: Param,
    pub head_w: Param,
    pub head_b: Param,
}

macro_rules! layer_fields {
    ($l:expr, $i:expr, $f:ident) => {
        [
            (format!("layer{}.ln1_gain", $i), $f!($l.ln1_gain)),
            (format!("layer{}.ln1_bias", $i), $f!($l.ln1_bias)),
            (format!("layer{}.w_q", $i), $f!($l.w_q)),
            (format!("layer{}.b_q", $i), $f!($l.b_q)),
            (format!("layer{}.w_k", $i), $f!($l.w_k)),
            (format!("layer{}.b_k", $i), $f!($l.b_k)),
            (format!("layer{}.w_v", $i), $f!($l.w_v)),
            (format!("layer{}.b_v", $i), $f!($l.b_v)),
            (format!("layer{}.w_o", $i), $f!($l.w_o)),
            (format!("layer{}.b_o", $i), $f!($l.b_o)),
            (format!("layer{}.ln2_gain", $i), $f!($l.ln2_gain)),
            (format!("layer{}.ln2_bias", $i), $f!($l.ln2_bias)),
            (format!("layer{}.w_ff1", $i), $f!($l.w_ff1)),
            (format!("layer{}.b_ff1", $i), $f!($l.b_ff1)),
            (format!("layer{}.w_ff2", $i), $f!($l.w_ff2)),
            (format!("layer{}.b_ff2", $i), $f!($l.b_ff2)),
        ]
    };
}

impl ModelParams {
    /// Random initialization: weight matrices uniform in (-0.05, 0.05)
    /// drawn from the "init" stream in checkpoint field order; biases and
    /// layer-norm offsets zero; layer-norm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "init", 0);
        let d = config.dim;
        let mut uniform = |rows: usize, cols: usize| -> Param {
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| rng.random_range(-0.05..0.05))
                .collect();
            Param {
                value: Tensor2D::new(rows, cols, data).expect("shape"),
                grad: Tensor2D::zeros(rows, cols),
            }
        };
        let embedding = uniform(config.vocab_size, d);
        let position = uniform(config.max_len, d);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_gain: Param::ones(1, d),
                ln1_bias: Param::zeros(1, d),
                w_q: uniform(d, d),
                b_q: Param::zeros(1, d),
                w_k: uniform(d, d),
                b_k: Param::zeros(1, d),
                w_v: uniform(d, d),
                b_v: Param::zeros(1, d),
                w_o: uniform(d, d),
                b_o: Param::zeros(1, d),
                ln2_gain: Param::ones(1, d),
                ln2_bias: Param::zeros(1, d),
                w_ff1: uniform(d, config.ff_dim),
                b_ff1: Param::zeros(1, config.ff_dim),
                w_ff2: uniform(config.ff_dim, d),
                b_ff2: Param::zeros(1, d),
            })
            .collect();
        Ok(Self {
            ln_f_gain: Param::ones(1, d),
            ln_f_bias: Param::zeros(1, d),
            head_w: uniform(d, config.num_classes),
            head_b: Param::zeros(1, config.num_classes),
            config,
            embedding,
            position,
            layers,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Param)> {
        macro_rules! r {
            ($x:expr) => {
                &$x
            };
        }
        let mut out: Vec<(String, &Param)> = vec![
            ("embedding".to_string(), &self.embedding),
            ("position".to_string(), &self.position),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(layer_fields!(l, i, r));
        }
        out.push(("ln_f_gain".to_string(), &self.ln_f_gain));
        out.push(("ln_f_bias".to_string(), &self.ln_f_bias));
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = vec![&mut self.embedding, &mut self.position];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.w_q,
                &mut l.b_q,
                &mut l.w_k,
                &mut l.b_k,
                &mut l.w_v,
                &mut l.b_v,
                &mut l.w_o,
                &mut l.b_o,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.w_ff1,
                &mut l.b_ff1,
                &mut l.w_ff2,
                &mut l.b_ff2,
            ]);
        }
        out.push(&mut self.ln_f_gain);
        out.push(&mut self.ln_f_bias);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_global_norm(&self) -> f64 {
        self.named_params()
            .iter()
            .flat_map(|(_, p)| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_params().iter().all(|(_, p)| p.value.all_finite())
    }
}

struct BoundLayer {
    ln1_gain: NodeId,
    ln1_bias: NodeId,
    w_q: NodeId,
    b_q: NodeId,
    w_k: NodeId,
    b_k: NodeId,
    w_v: NodeId,
    b_v: NodeId,
    w_o: NodeId,
    b_o: NodeId,
    ln2_gain: NodeId,
    ln2_bias: NodeId,
    w_ff1: NodeId,
    b_ff1: NodeId,
    w_ff2: NodeId,
    b_ff2: NodeId,
}

struct BoundModel {
    embedding: NodeId,
    position: NodeId,
    layers: Vec<BoundLayer>,
    ln_f_gain: NodeId,
    ln_f_bias: NodeId,
    head_w: NodeId,
    head_b: NodeId,
}

impl BoundModel {
    /// Same order as `ModelParams::params_mut`.
    fn node_ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.embedding, self.position];
        for l in &self.layers {
            out.extend([
                l.ln1_gain, l.ln1_bias, l.w_q, l.b_q, l.w_k, l.b_k, l.w_v, l.b_v, l.w_o, l.b_o,
                l.ln2_gain, l.ln2_bias, l.w_ff1, l.b_ff1, l.w_ff2, l.b_ff2,
            ]);
        }
        out.extend([self.ln_f_gain, self.ln_f_bias, self.head_w, self.head_b]);
        out
    }
}

fn bind(tape: &mut Tape, params: &ModelParams) -> BoundModel {
    let mut reg = |p: &Param| tape.param(p.value.clone());
    BoundModel {
        embedding: reg(&params.embedding),
        position: reg(&params.position),
        layers: params
            .layers
            .iter()
            .map(|l| BoundLayer {
                ln1_gain: reg(&l.ln1_gain),
                ln1_bias: reg(&l.ln1_bias),
                w_q: reg(&l.w_q),
                b_q: reg(&l.b_q),
                w_k: reg(&l.w_k),
                b_k: reg(&l.b_k),
                w_v: reg(&l.w_v),
                b_v: reg(&l.b_v),
                w_o: reg(&l.w_o),
                b_o: reg(&l.b_o),
                ln2_gain: reg(&l.ln2_gain),
                ln2_bias: reg(&l.ln2_bias),
                w_ff1: reg(&l.w_ff1),
                b_ff1: reg(&l.b_ff1),
                w_ff2: reg(&l.w_ff2),
                b_ff2: reg(&l.b_ff2),
            })
            .collect(),
        ln_f_gain: reg(&params.ln_f_gain),
        ln_f_bias: reg(&params.ln_f_bias),
        head_w: reg(&params.head_w),
        head_b: reg(&params.head_b),
    }
}

/// Result of a batched forward pass. Keeps the tape so callers can run
/// backward for training or attribution.
pub struct ForwardOutput {
    pub tape: Tape,
    bound: BoundModel,
    /// Per-example 1xC logits nodes.
    pub logit_nodes: Vec<NodeId>,
    /// Per-example 1xC probability nodes.
    pub prob_nodes: Vec<NodeId>,
    /// Attention probability nodes: `attention[layer][example][head]`,
    /// each len x len.
    pub attention: Vec<Vec<Vec<NodeId>>>,
    /// Head-averaged CLS-row attention: `cls_attention[layer][example]`,
    /// each 1 x len.
    pub cls_attention: Vec<Vec<NodeId>>,
    pub layers: usize,
}

impl ForwardOutput {
    pub fn batch_size(&self) -> usize {
        self.prob_nodes.len()
    }

    pub fn probabilities(&self, example: usize) -> Vec<f64> {
        self.tape.value(self.prob_nodes[example]).data().to_vec()
    }

    pub fn logits(&self, example: usize) -> Vec<f64> {
        self.tape.value(self.logit_nodes[example]).data().to_vec()
    }

    /// Argmax with ties broken toward the lowest class index.
    pub fn prediction(&self, example: usize) -> usize {
        argmax(self.tape.value(self.prob_nodes[example]).data())
    }

    pub fn confidence(&self, example: usize) -> f64 {
        let p = self.tape.value(self.prob_nodes[example]).data();
        p[argmax(p)]
    }

    /// Copies all parameter gradients off the tape into the paired grad
    /// buffers. Call after a loss backward, never after an attribution
    /// backward.
    pub fn flush_gradients(&self, params: &mut ModelParams) {
        let ids = self.bound.node_ids();
        for (param, node) in params.params_mut().into_iter().zip(ids) {
            let src = self.tape.grad(node);
            for (g, s) in param.grad.data_mut().iter_mut().zip(src) {
                *g += s;
            }
        }
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs the encoder over every example in the batch on one fresh tape.
pub fn forward(params: &ModelParams, batch: &Batch) -> Result<ForwardOutput> {
    let cfg = &params.config;
    cfg.validate()?;
    let width = batch.padded_len();
    if width > cfg.max_len {
        return Err(Error::Data(format!(
            "batch length {} exceeds model max_len {}",
            width, cfg.max_len
        )));
    }
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params);
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let attn_scale = 1.0 / (dh as f64).sqrt();

    let mut logit_nodes = Vec::with_capacity(batch.size());
    let mut prob_nodes = Vec::with_capacity(batch.size());
    let mut attention: Vec<Vec<Vec<NodeId>>> = vec![Vec::new(); cfg.layers];
    let mut cls_attention: Vec<Vec<NodeId>> = vec![Vec::new(); cfg.layers];

    let positions: Vec<usize> = (0..width).collect();
    for i in 0..batch.size() {
        for &id in &batch.ids[i] {
            if id >= cfg.vocab_size {
                return Err(Error::Data(format!(
                    "token index {} out of vocabulary of size {}",
                    id, cfg.vocab_size
                )));
            }
        }
        // additive key mask shared by every query row of this example
        let mask_row: Vec<f64> = batch.attn_mask[i]
            .iter()
            .map(|&real| if real { 0.0 } else { MASK_NEG })
            .collect();
        let mask = tape.constant(Tensor2D::row_vector(mask_row));

        let tok = tape.gather_rows(bound.embedding, &batch.ids[i])?;
        let pos = tape.gather_rows(bound.position, &positions)?;
        let mut x = tape.add(tok, pos)?;

        for (layer_idx, layer) in bound.layers.iter().enumerate() {
            let xn = tape.layer_norm_rows(x, layer.ln1_gain, layer.ln1_bias, LN_EPS)?;
            let q_full = tape.matmul(xn, layer.w_q)?;
            let q_full = tape.add_row_vec(q_full, layer.b_q)?;
            let k_full = tape.matmul(xn, layer.w_k)?;
            let k_full = tape.add_row_vec(k_full, layer.b_k)?;
            let v_full = tape.matmul(xn, layer.w_v)?;
            let v_full = tape.add_row_vec(v_full, layer.b_v)?;

            let mut head_outputs = Vec::with_capacity(heads);
            let mut head_attn = Vec::with_capacity(heads);
            for h in 0..heads {
                let q = tape.slice_cols(q_full, h * dh, dh)?;
                let k = tape.slice_cols(k_full, h * dh, dh)?;
                let v = tape.slice_cols(v_full, h * dh, dh)?;
                let kt = tape.transpose(k);
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, attn_scale);
                let masked = tape.add_row_vec(scores, mask)?;
                let attn = tape.softmax_rows(masked);
                head_attn.push(attn);
                head_outputs.push(tape.matmul(attn, v)?);
            }
            // head-averaged CLS-row attention, the attribution target
            let cls_rows: Vec<NodeId> = head_attn
                .iter()
                .map(|&a| tape.slice_rows(a, 0, 1))
                .collect::<Result<_>>()?;
            let summed = tape.sum_scalars_rows(&cls_rows)?;
            let mean_row = tape.scale(summed, 1.0 / heads as f64);
            cls_attention[layer_idx].push(mean_row);
            attention[layer_idx].push(head_attn);

            let merged = tape.concat_cols(&head_outputs)?;
            let proj = tape.matmul(merged, layer.w_o)?;
            let proj = tape.add_row_vec(proj, layer.b_o)?;
            x = tape.add(x, proj)?;

            let xn2 = tape.layer_norm_rows(x, layer.ln2_gain, layer.ln2_bias, LN_EPS)?;
            let ff = tape.matmul(xn2, layer.w_ff1)?;
            let ff = tape.add_row_vec(ff, layer.b_ff1)?;
            let act = tape.tanh(ff);
            let ff2 = tape.matmul(act, layer.w_ff2)?;
            let ff2 = tape.add_row_vec(ff2, layer.b_ff2)?;
            x = tape.add(x, ff2)?;
        }

        let xf = tape.layer_norm_rows(x, bound.ln_f_gain, bound.ln_f_bias, LN_EPS)?;
        let cls = tape.slice_rows(xf, 0, 1)?;
        let logits = tape.matmul(cls, bound.head_w)?;
        let logits = tape.add_row_vec(logits, bound.head_b)?;
        let probs = tape.softmax_rows(logits);
        logit_nodes.push(logits);
        prob_nodes.push(probs);
    }

    Ok(ForwardOutput {
        tape,
        bound,
        logit_nodes,
        prob_nodes,
        attention,
        cls_attention,
        layers: cfg.layers,
    })
}

impl Tape {
    /// Elementwise sum of equally-shaped row nodes.
    fn sum_scalars_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let mut it = rows.iter();
        let mut acc = *it
            .next()
            .ok_or_else(|| Error::Contract("sum of zero rows".into()))?;
        for &r in it {
            acc = self.add(acc, r)?;
        }
        Ok(acc)
    }
}

/// Zero-based index of the attribution layer: the penultimate one.
pub fn penultimate_layer(layers: usize) -> Result<usize> {
    if layers < 2 {
        return Err(Error::Config(format!(
            "attribution needs at least 2 layers, model has {layers}"
        )));
    }
    Ok(layers - 2)
}

/// Head-averaged CLS-row attention of the given layer with special-token
/// positions zeroed. Returns one row of `padded_len` scores per example.
pub fn start_attention_at_layer(
    out: &ForwardOutput,
    batch: &Batch,
    layer: usize,
) -> Result<Vec<Vec<f64>>> {
    if layer >= out.layers {
        return Err(Error::Config(format!(
            "attribution layer {layer} out of range for {} layers",
            out.layers
        )));
    }
    let mut rows = Vec::with_capacity(batch.size());
    for i in 0..batch.size() {
        let node = out.cls_attention[layer][i];
        let mut row = out.tape.value(node).data().to_vec();
        for (v, &special) in row.iter_mut().zip(&batch.special[i]) {
            if special {
                *v = 0.0;
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// `start_attention_at_layer` at the penultimate layer.
pub fn penultimate_start_attention(out: &ForwardOutput, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    let layer = penultimate_layer(out.layers)?;
    start_attention_at_layer(out, batch, layer)
}

// ── Checkpoint format ───────────────────────────────────────────────
//
// One JSON header line followed by a flat little-endian f64 blob holding
// every field in header order.

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: Vec<String>,
    fields: Vec<FieldDesc>,
}

#[derive(Serialize, Deserialize)]
struct FieldDesc {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn save_checkpoint(params: &ModelParams, vocab: &crate::data::Vocab, path: &Path) -> Result<()> {
    let named = params.named_params();
    let header = CheckpointHeader {
        format: "cme-checkpoint".into(),
        version: 1,
        config: params.config.clone(),
        vocab: (0..vocab.len()).map(|i| vocab.token(i).to_string()).collect(),
        fields: named
            .iter()
            .map(|(name, p)| FieldDesc {
                name: name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
            })
            .collect(),
    };
    let mut file = std::fs::File::create(path)?;
    serde_json::to_writer(&mut file, &header)?;
    file.write_all(b"\n")?;
    for (_, p) in named {
        for v in p.value.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, crate::data::Vocab)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut reader = BufReader::new(file);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: CheckpointHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Data(format!("bad checkpoint header: {e}")))?;
    if header.format != "cme-checkpoint" || header.version != 1 {
        return Err(Error::Data(format!(
            "unsupported checkpoint format {} v{}",
            header.format, header.version
        )));
    }
    let mut params = ModelParams::init(header.config.clone(), 0)?;
    {
        let mut slots = params.params_mut();
        if slots.len() != header.fields.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} fields, model expects {}",
                header.fields.len(),
                slots.len()
            )));
        }
        let mut buf = [0u8; 8];
        for (slot, desc) in slots.iter_mut().zip(&header.fields) {
            if slot.value.rows() != desc.rows || slot.value.cols() != desc.cols {
                return Err(Error::Data(format!(
                    "checkpoint field {} has shape {}x{}, expected {}x{}",
                    desc.name,
                    desc.rows,
                    desc.cols,
                    slot.value.rows(),
                    slot.value.cols()
                )));
            }
            for v in slot.value.data_mut() {
                reader.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
        }
    }
    params.zero_grads();
    let mut vocab_json = serde_json::Map::new();
    vocab_json.insert("tokens".into(), serde_json::to_value(&header.vocab)?);
    let mut vocab: crate::data::Vocab =
        serde_json::from_value(serde_json::Value::Object(vocab_json))?;
    vocab.rebuild_index();
    Ok((params, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_eval_batches, TokenizedExample, CLS, PAD};

    fn toy_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            num_classes: 2,
            layers: 2,
            dim: 8,
            heads: 2,
            ff_dim: 12,
            max_len: 8,
        }
    }

    fn toy_batch(rows: &[(&[usize], usize)]) -> Batch {
        let examples: Vec<TokenizedExample> = rows
            .iter()
            .enumerate()
            .map(|(i, (ids, label))| TokenizedExample {
                id: format!("t{i}"),
                ids: ids.to_vec(),
                special: ids.iter().map(|&t| t < 4).collect(),
                label: *label,
            })
            .collect();
        make_eval_batches(&examples, examples.len())[0].clone()
    }

    #[test]
    fn init_is_bitwise_deterministic() {
        let a = ModelParams::init(toy_config(), 7).unwrap();
        let b = ModelParams::init(toy_config(), 7).unwrap();
        for ((_, pa), (_, pb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(pa.value.data(), pb.value.data());
        }
    }

    #[test]
    fn init_biases_are_zero_and_gains_one() {
        let p = ModelParams::init(toy_config(), 3).unwrap();
        assert!(p.layers[0].b_q.value.data().iter().all(|&v| v == 0.0));
        assert!(p.head_b.value.data().iter().all(|&v| v == 0.0));
        assert!(p.layers[1].ln1_gain.value.data().iter().all(|&v| v == 1.0));
        assert!(p.ln_f_bias.value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_rejects_indivisible_heads() {
        let mut cfg = toy_config();
        cfg.dim = 9;
        assert!(matches!(
            ModelParams::init(cfg, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bound_order_matches_param_order() {
        let mut p = ModelParams::init(toy_config(), 0).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &p);
        assert_eq!(bound.node_ids().len(), p.params_mut().len());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let p = ModelParams::init(toy_config(), 1).unwrap();
        let batch = toy_batch(&[(&[CLS, 5, 6, 7], 0), (&[CLS, 8, 9], 1)]);
        let out = forward(&p, &batch).unwrap();
        for i in 0..batch.size() {
            let sum: f64 = out.probabilities(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let p = ModelParams::init(toy_config(), 1).unwrap();
        let batch = toy_batch(&[(&[CLS, 5, 6], 0)]);
        let a = forward(&p, &batch).unwrap().logits(0);
        let b = forward(&p, &batch).unwrap().logits(0);
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_vocab_token_is_a_data_error() {
        let p = ModelParams::init(toy_config(), 1).unwrap();
        let batch = toy_batch(&[(&[CLS, 99], 0)]);
        assert!(matches!(forward(&p, &batch), Err(Error::Data(_))));
    }

    #[test]
    fn cls_attends_only_to_cls_when_rest_is_padding() {
        let p = ModelParams::init(toy_config(), 2).unwrap();
        let mut batch = toy_batch(&[(&[CLS, 5, 6, 7], 0)]);
        // forcibly pad everything except CLS
        batch.ids[0] = vec![CLS, PAD, PAD, PAD];
        batch.attn_mask[0] = vec![true, false, false, false];
        batch.special[0] = vec![true, true, true, true];
        batch.lengths[0] = 1;
        let out = forward(&p, &batch).unwrap();
        for layer in 0..2 {
            for head in 0..2 {
                let attn = out.tape.value(out.attention[layer][0][head]);
                assert!((attn.get(0, 0) - 1.0).abs() < 1e-12);
                for j in 1..4 {
                    assert_eq!(attn.get(0, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_over_unmasked() {
        let p = ModelParams::init(toy_config(), 4).unwrap();
        let batch = toy_batch(&[(&[CLS, 5, 6], 0), (&[CLS, 7, 8, 9, 10], 1)]);
        let out = forward(&p, &batch).unwrap();
        for layer in 0..2 {
            for (i, heads) in out.attention[layer].iter().enumerate() {
                for &h in heads {
                    let attn = out.tape.value(h);
                    for q in 0..attn.rows() {
                        let row_sum: f64 = attn.row(q).iter().sum();
                        assert!((row_sum - 1.0).abs() < 1e-9);
                        // masked keys get exactly zero
                        for (j, &real) in batch.attn_mask[i].iter().enumerate() {
                            if !real {
                                assert_eq!(attn.get(q, j), 0.0);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn token_permutation_with_zero_positions_leaves_logits_unchanged() {
        let mut p = ModelParams::init(toy_config(), 5).unwrap();
        p.position.value = Tensor2D::zeros(p.config.max_len, p.config.dim);
        let a = forward(&p, &toy_batch(&[(&[CLS, 5, 6, 7], 0)])).unwrap().logits(0);
        let b = forward(&p, &toy_batch(&[(&[CLS, 6, 5, 7], 0)])).unwrap().logits(0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn penultimate_start_attention_averages_heads_and_zeroes_specials() {
        let p = ModelParams::init(toy_config(), 6).unwrap();
        let batch = toy_batch(&[(&[CLS, 5, 6, 7], 0)]);
        let out = forward(&p, &batch).unwrap();
        let rows = penultimate_start_attention(&out, &batch).unwrap();
        let layer = penultimate_layer(2).unwrap();
        assert_eq!(layer, 0);
        let h0 = out.tape.value(out.attention[layer][0][0]);
        let h1 = out.tape.value(out.attention[layer][0][1]);
        // CLS position excluded
        assert_eq!(rows[0][0], 0.0);
        for j in 1..4 {
            let mean = (h0.get(0, j) + h1.get(0, j)) / 2.0;
            assert!((rows[0][j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn single_layer_model_has_no_penultimate_layer() {
        assert!(matches!(penultimate_layer(1), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let p = ModelParams::init(toy_config(), 8).unwrap();
        let corpus = vec![crate::data::Example {
            id: "1".into(),
            text: "alpha beta gamma".into(),
            text2: None,
            label: 0,
        }];
        let vocab = crate::data::build_vocab(&corpus, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&p, &vocab, &path).unwrap();
        let (loaded, loaded_vocab) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, p.config);
        assert_eq!(loaded_vocab.len(), vocab.len());
        assert_eq!(loaded_vocab.lookup("beta"), vocab.lookup("beta"));
        for ((_, a), (_, b)) in p.named_params().iter().zip(loaded.named_params().iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // small config keeps the finite-difference sweep quick
        let cfg = ModelConfig {
            vocab_size: 10,
            num_classes: 2,
            layers: 2,
            dim: 4,
            heads: 2,
            ff_dim: 6,
            max_len: 6,
        };
        let params = ModelParams::init(cfg, 11).unwrap();
        let batch = toy_batch(&[(&[CLS, 5, 6, 7], 0), (&[CLS, 8, 9], 1)]);
        let values: Vec<Tensor2D> = params
            .named_params()
            .iter()
            .map(|(_, p)| p.value.clone())
            .collect();
        let template = params.clone();
        let rebuild = |vals: &[Tensor2D]| {
            let mut m = template.clone();
            for (slot, v) in m.params_mut().into_iter().zip(vals) {
                slot.value = v.clone();
            }
            m
        };
        // loss: mean negative log prob of the true class
        let loss_value = |vals: &[Tensor2D]| -> f64 {
            let m = rebuild(vals);
            let out = forward(&m, &batch).unwrap();
            let mut total = 0.0;
            for i in 0..batch.size() {
                total -= out.probabilities(i)[batch.labels[i]].ln();
            }
            total / batch.size() as f64
        };
        let numeric = crate::gradcheck::finite_difference_grads(&values, 1e-5, |vals| {
            loss_value(vals)
        });

        let m = rebuild(&values);
        let mut out = forward(&m, &batch).unwrap();
        let mut per_example = Vec::new();
        for i in 0..batch.size() {
            let picked = out
                .tape
                .select_elem(out.prob_nodes[i], 0, batch.labels[i])
                .unwrap();
            let logp = out.tape.ln(picked);
            per_example.push(logp);
        }
        let total = out.tape.sum_scalars(&per_example).unwrap();
        let loss = out.tape.scale(total, -1.0 / batch.size() as f64);
        out.tape.backward(loss, false).unwrap();
        let mut m = m;
        out.flush_gradients(&mut m);
        let analytic: Vec<Vec<f64>> = m
            .named_params()
            .iter()
            .map(|(_, p)| p.grad.data().to_vec())
            .collect();
        let mismatches = crate::gradcheck::compare_grads(&analytic, &numeric, 1e-4, 1e-6);
        assert!(
            mismatches.is_empty(),
            "gradient mismatches: {:?}",
            &mismatches[..mismatches.len().min(5)]
        );
    }
}

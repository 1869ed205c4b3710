//! MLP feature extractor with interchangeable classification heads.
//!
//! The network is a stack of relu hidden layers feeding a linear embedding
//! layer of width E, followed by one linear head. Embeddings are exposed
//! alongside logits because the k-NN analysis works in embedding space.
//! Swapping the head kind never changes the embedding path.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::{Error, Result};

/// Which classification head sits on top of the embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// C logits scored through a softmax.
    SoftmaxC,
    /// C logits, each an independent sigmoid.
    SigmoidC,
    /// C class logits plus one explicit OOD logit, all sigmoids.
    SigmoidCPlus1,
}

impl HeadKind {
    pub fn output_width(&self, classes: usize) -> usize {
        match self {
            HeadKind::SoftmaxC | HeadKind::SigmoidC => classes,
            HeadKind::SigmoidCPlus1 => classes + 1,
        }
    }
}

/// Layer dimensions of the feature extractor and head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub embedding: usize,
    pub classes: usize,
}

impl ModelDims {
    /// Validates that the dimension chain is intact: every width positive.
    pub fn new(input: usize, hidden: Vec<usize>, embedding: usize, classes: usize) -> Result<Self> {
        let dims = ModelDims {
            input,
            hidden,
            embedding,
            classes,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0
            || self.embedding == 0
            || self.classes == 0
            || self.hidden.contains(&0)
        {
            return Err(Error::InvalidArgument(format!(
                "model dims chain broken (zero-width layer): {self:?}"
            )));
        }
        Ok(())
    }

    /// Widths of the feature stack: input, hidden..., embedding.
    pub fn feature_chain(&self) -> Vec<usize> {
        let mut chain = Vec::with_capacity(self.hidden.len() + 2);
        chain.push(self.input);
        chain.extend_from_slice(&self.hidden);
        chain.push(self.embedding);
        chain
    }
}

/// One linear layer: weights (fan_in, fan_out) and bias (fan_out).
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All trainable state of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    head_kind: HeadKind,
    /// Feature layers in order; the last one projects into embedding space.
    feature_layers: Vec<Layer>,
    head: Layer,
}

/// Graph handles produced by recording a forward pass for training.
pub struct ForwardNodes {
    /// Parameter inputs in the same order as [`ModelParams::tensors`].
    pub param_ids: Vec<NodeId>,
    pub embeddings: NodeId,
    pub logits: NodeId,
}

/// Initialize parameters with the scaled-uniform scheme
/// `U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))`; biases zero.
/// The same (dims, head_kind, seed) triple always yields identical weights.
pub fn init_params(dims: &ModelDims, head_kind: HeadKind, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = dims.feature_chain();
    let mut feature_layers = Vec::with_capacity(chain.len() - 1);
    for w in chain.windows(2) {
        feature_layers.push(init_layer(w[0], w[1], &mut rng));
    }
    let head = init_layer(dims.embedding, head_kind.output_width(dims.classes), &mut rng);
    Ok(ModelParams {
        dims: dims.clone(),
        head_kind,
        feature_layers,
        head,
    })
}

fn init_layer(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Layer {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Layer {
        weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized by construction"),
        bias: Tensor::zeros(&[fan_out]),
    }
}

impl ModelParams {
    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head_kind
    }

    pub fn logit_width(&self) -> usize {
        self.head_kind.output_width(self.dims.classes)
    }

    /// All parameter tensors in serialization order: feature layers
    /// (weight, bias) pairs from input side up, then the head pair.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * (self.feature_layers.len() + 1));
        for layer in &self.feature_layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(2 * (self.feature_layers.len() + 1));
        for layer in &mut self.feature_layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 2 || batch.shape()[1] != self.dims.input {
            return Err(Error::InvalidShape {
                op: "model forward",
                expected: format!("batch of width {}", self.dims.input),
                got: batch.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Attach every parameter as a graph input, in [`Self::tensors`] order.
    /// Several forward passes may share the returned handles so gradients
    /// from all of them accumulate on one parameter set.
    pub fn param_inputs(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.tensors()
            .into_iter()
            .map(|t| graph.input(t.clone()))
            .collect()
    }

    /// Record a forward pass against previously attached parameter handles.
    /// Returns (embeddings, logits).
    pub fn forward_with(
        &self,
        graph: &mut Graph,
        param_ids: &[NodeId],
        batch: &Tensor,
    ) -> Result<(NodeId, NodeId)> {
        self.check_batch(batch)?;
        assert_eq!(param_ids.len(), 2 * (self.feature_layers.len() + 1));
        let mut x = graph.constant(batch.clone());
        let n_feature = self.feature_layers.len();
        for i in 0..n_feature {
            let w = param_ids[2 * i];
            let b = param_ids[2 * i + 1];
            let prod = graph.matmul(x, w)?;
            x = graph.bias_add(prod, b)?;
            // Hidden layers are rectified; the embedding projection is linear.
            if i + 1 < n_feature {
                x = graph.relu(x);
            }
        }
        let embeddings = x;
        let w = param_ids[2 * n_feature];
        let b = param_ids[2 * n_feature + 1];
        let prod = graph.matmul(embeddings, w)?;
        let logits = graph.bias_add(prod, b)?;
        Ok((embeddings, logits))
    }

    /// Record the forward pass on a graph, returning parameter handles for
    /// backward. The batch enters as a constant.
    pub fn forward_graph(&self, graph: &mut Graph, batch: &Tensor) -> Result<ForwardNodes> {
        let param_ids = self.param_inputs(graph);
        let (embeddings, logits) = self.forward_with(graph, &param_ids, batch)?;
        Ok(ForwardNodes {
            param_ids,
            embeddings,
            logits,
        })
    }

    /// Pure inference: (embeddings, logits) as plain tensors.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut graph = Graph::new();
        let nodes = self.forward_graph(&mut graph, batch)?;
        Ok((
            graph.value(nodes.embeddings).clone(),
            graph.value(nodes.logits).clone(),
        ))
    }

    /// SHA-256 over the serialized parameters; used for lineage checks.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update([head_kind_code(self.head_kind)]);
        for t in self.tensors() {
            for d in t.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Which extremum a training checkpoint tracks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    BestTrainLoss,
    BestValLoss,
    BestValBalancedAccuracy,
}

impl Criterion {
    /// True when `candidate` strictly improves on `incumbent`.
    pub fn improves(&self, candidate: f64, incumbent: f64) -> bool {
        match self {
            Criterion::BestTrainLoss | Criterion::BestValLoss => candidate < incumbent,
            Criterion::BestValBalancedAccuracy => candidate > incumbent,
        }
    }

    pub fn start_value(&self) -> f64 {
        match self {
            Criterion::BestTrainLoss | Criterion::BestValLoss => f64::INFINITY,
            Criterion::BestValBalancedAccuracy => f64::NEG_INFINITY,
        }
    }
}

/// Parameter snapshot taken when its criterion reached a new extremum.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub criterion: Criterion,
    pub epoch: usize,
    pub metric: f64,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"OODCKPT1";

fn head_kind_code(kind: HeadKind) -> u8 {
    match kind {
        HeadKind::SoftmaxC => 0,
        HeadKind::SigmoidC => 1,
        HeadKind::SigmoidCPlus1 => 2,
    }
}

fn head_kind_from_code(code: u8) -> Result<HeadKind> {
    match code {
        0 => Ok(HeadKind::SoftmaxC),
        1 => Ok(HeadKind::SigmoidC),
        2 => Ok(HeadKind::SigmoidCPlus1),
        other => Err(Error::Checkpoint(format!("unknown head kind code {other}"))),
    }
}

fn criterion_code(c: Criterion) -> u8 {
    match c {
        Criterion::BestTrainLoss => 0,
        Criterion::BestValLoss => 1,
        Criterion::BestValBalancedAccuracy => 2,
    }
}

fn criterion_from_code(code: u8) -> Result<Criterion> {
    match code {
        0 => Ok(Criterion::BestTrainLoss),
        1 => Ok(Criterion::BestValLoss),
        2 => Ok(Criterion::BestValBalancedAccuracy),
        other => Err(Error::Checkpoint(format!("unknown criterion code {other}"))),
    }
}

impl Checkpoint {
    /// Serialize into the flat versioned binary format. Dims, head kind and
    /// weight arrays are written in a fixed order; f64 values are stored as
    /// raw little-endian bits so the round trip is bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.push(head_kind_code(self.params.head_kind));
        buf.push(criterion_code(self.criterion));
        buf.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        buf.extend_from_slice(&self.metric.to_bits().to_le_bytes());
        let dims = &self.params.dims;
        buf.extend_from_slice(&(dims.input as u32).to_le_bytes());
        buf.extend_from_slice(&(dims.hidden.len() as u32).to_le_bytes());
        for h in &dims.hidden {
            buf.extend_from_slice(&(*h as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(dims.embedding as u32).to_le_bytes());
        buf.extend_from_slice(&(dims.classes as u32).to_le_bytes());
        for t in self.params.tensors() {
            buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t.data() {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cursor = Cursor {
            bytes: &bytes,
            pos: 0,
        };
        let magic = cursor.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let head_kind = head_kind_from_code(cursor.u8()?)?;
        let criterion = criterion_from_code(cursor.u8()?)?;
        let epoch = cursor.u64()? as usize;
        let metric = f64::from_bits(cursor.u64()?);
        let input = cursor.u32()? as usize;
        let n_hidden = cursor.u32()? as usize;
        let mut hidden = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            hidden.push(cursor.u32()? as usize);
        }
        let embedding = cursor.u32()? as usize;
        let classes = cursor.u32()? as usize;
        let dims = ModelDims::new(input, hidden, embedding, classes)
            .map_err(|e| Error::Checkpoint(format!("bad dims: {e}")))?;

        // Rebuild parameters with the recorded dims, then overwrite data.
        let mut params = init_params(&dims, head_kind, 0)
            .map_err(|e| Error::Checkpoint(format!("bad dims: {e}")))?;
        for t in params.tensors_mut() {
            let len = cursor.u64()? as usize;
            if len != t.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor length {len} does not match dims (expected {})",
                    t.len()
                )));
            }
            for v in t.data_mut() {
                *v = f64::from_bits(cursor.u64()?);
            }
        }
        if cursor.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            params,
            criterion,
            epoch,
            metric,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

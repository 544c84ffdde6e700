//! Residual fully connected autoencoder with a shared-weight (siamese) encoder.
//!
//! Each residual block maps `in -> out` through two affine layers with a
//! nonlinearity between them and, except for the last block of each side,
//! after them. The shortcut is the identity when `in == out` and an affine
//! projection to `out` otherwise. The last encoder block emits the embedding
//! and the last decoder block emits the reconstruction; both are left linear.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Activation, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them in reverse.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, embedding_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            embedding_dim,
            activation: Activation::default(),
        }
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.embedding_dim);
        w
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        let mut w = self.encoder_widths();
        w.reverse();
        w
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embedding_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Parameter(format!(
                "layer widths must be positive: {:?}",
                self.encoder_widths()
            )));
        }
        Ok(())
    }

    /// `(in, out)` of every block, encoder first.
    pub fn blocks(&self) -> Vec<BlockShape> {
        let side = |w: Vec<usize>, encoder: bool| {
            let last = w.len() - 2;
            w.windows(2)
                .enumerate()
                .map(move |(i, p)| BlockShape {
                    input: p[0],
                    output: p[1],
                    encoder,
                    outer_activation: i != last,
                })
                .collect::<Vec<_>>()
        };
        let mut b = side(self.encoder_widths(), true);
        b.extend(side(self.decoder_widths(), false));
        b
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(BlockShape::param_count).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub input: usize,
    pub output: usize,
    pub encoder: bool,
    pub outer_activation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shortcut {
    Identity,
    Projection,
}

impl BlockShape {
    pub fn shortcut(&self) -> Shortcut {
        if self.input == self.output {
            Shortcut::Identity
        } else {
            Shortcut::Projection
        }
    }

    /// Tensor shapes in storage order: w1, b1, w2, b2[, wp, bp].
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let (i, o) = (self.input, self.output);
        let mut s = vec![vec![i, o], vec![1, o], vec![o, o], vec![1, o]];
        if self.shortcut() == Shortcut::Projection {
            s.extend([vec![i, o], vec![1, o]]);
        }
        s
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// All weights and biases, stored block by block in declared order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for block in arch.blocks() {
            // even slots are weights, odd slots biases
            for (k, shape) in block.tensor_shapes().into_iter().enumerate() {
                let mut t = Tensor::zeros(shape.clone());
                if k % 2 == 0 {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    t.data.iter_mut().for_each(|w| *w = rng.random_range(-bound..=bound));
                }
                tensors.push(t);
            }
        }
        Ok(Self { arch, tensors })
    }

    /// Checks that stored tensors match the architecture.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let expected: Vec<Vec<usize>> = self
            .arch
            .blocks()
            .iter()
            .flat_map(BlockShape::tensor_shapes)
            .collect();
        if expected.len() != self.tensors.len()
            || expected.iter().zip(&self.tensors).any(|(s, t)| *s != t.shape || t.len() != s.iter().product::<usize>())
        {
            return Err(Error::Checkpoint(
                "parameter tensors do not match the architecture".into(),
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim
    }

    /// Range of tensor slots belonging to decoder blocks.
    pub fn decoder_slots(&self) -> std::ops::Range<usize> {
        let enc: usize = self
            .arch
            .blocks()
            .iter()
            .filter(|b| b.encoder)
            .map(|b| b.tensor_shapes().len())
            .sum();
        enc..self.tensors.len()
    }

    /// Registers every tensor on `graph` as a parameter leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundModel {
        let vars = self.tensors.iter().map(|t| graph.param(t)).collect();
        BoundModel {
            blocks: self.arch.blocks(),
            activation: self.arch.activation,
            vars,
        }
    }

    /// Embeds each row of `rows` (row-major, `input_dim` wide).
    pub fn encode_rows(&self, rows: &[f64]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        if rows.len() % d != 0 {
            return Err(Error::Contract(format!(
                "input of {} values is not a multiple of input dim {d}",
                rows.len()
            )));
        }
        let mut g = Graph::new();
        let m = self.bind(&mut g);
        let x = g.constant(rows.len() / d, d, rows.to_vec())?;
        let e = m.encode(&mut g, x)?;
        Ok(g.value(e).to_vec())
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len(), self.input_dim(), "encoder input")?;
        self.encode_rows(x)
    }

    pub fn decode(&self, e: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(e.len(), self.embedding_dim(), "decoder input")?;
        let mut g = Graph::new();
        let m = self.bind(&mut g);
        let v = g.constant(1, e.len(), e.to_vec())?;
        let out = m.decode(&mut g, v)?;
        Ok(g.value(out).to_vec())
    }

    /// Both inputs pass through the same encoder tensors.
    pub fn encode_pair(&self, a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_dim(a.len(), self.input_dim(), "encoder input")?;
        self.check_dim(b.len(), self.input_dim(), "encoder input")?;
        let mut g = Graph::new();
        let m = self.bind(&mut g);
        let (ea, eb) = m.encode_pair(&mut g, a, b)?;
        Ok((g.value(ea).to_vec(), g.value(eb).to_vec()))
    }

    fn check_dim(&self, got: usize, want: usize, what: &str) -> Result<()> {
        if got != want {
            return Err(Error::Contract(format!("{what} has dim {got}, model expects {want}")));
        }
        Ok(())
    }
}

/// Model tensors registered on a particular graph.
#[derive(Debug, Clone)]
pub struct BoundModel {
    blocks: Vec<BlockShape>,
    activation: Activation,
    vars: Vec<Var>,
}

impl BoundModel {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn run_blocks(&self, g: &mut Graph, mut h: Var, encoder: bool) -> Result<Var> {
        let mut slot = 0;
        for block in &self.blocks {
            let n = block.tensor_shapes().len();
            if block.encoder == encoder {
                h = self.block_forward(g, block, &self.vars[slot..slot + n], h)?;
            }
            slot += n;
        }
        Ok(h)
    }

    fn block_forward(&self, g: &mut Graph, block: &BlockShape, p: &[Var], h: Var) -> Result<Var> {
        let z1 = g.matmul(h, p[0])?;
        let z1 = g.add_bias(z1, p[1])?;
        let a1 = g.activation(z1, self.activation);
        let z2 = g.matmul(a1, p[2])?;
        let mut z2 = g.add_bias(z2, p[3])?;
        if block.outer_activation {
            z2 = g.activation(z2, self.activation);
        }
        let skip = match block.shortcut() {
            Shortcut::Identity => h,
            Shortcut::Projection => {
                let s = g.matmul(h, p[4])?;
                g.add_bias(s, p[5])?
            }
        };
        g.add(z2, skip)
    }

    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.run_blocks(g, x, true)
    }

    pub fn decode(&self, g: &mut Graph, e: Var) -> Result<Var> {
        self.run_blocks(g, e, false)
    }

    /// Siamese branches over single rows; both reuse this model's vars.
    pub fn encode_pair(&self, g: &mut Graph, a: &[f64], b: &[f64]) -> Result<(Var, Var)> {
        let xa = g.constant(1, a.len(), a.to_vec())?;
        let xb = g.constant(1, b.len(), b.to_vec())?;
        Ok((self.encode(g, xa)?, self.encode(g, xb)?))
    }
}

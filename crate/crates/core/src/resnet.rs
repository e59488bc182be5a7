//! Residual network built from fully-connected blocks, its flat weight
//! layout, and the forward pass with intermediate caching.
//!
//! Block `p` maps `η_p ∈ R^n` through `k_p` hidden layers:
//!
//! ```text
//! φ_0 = η_p
//! φ_j = act_j(V_{j-1}^T φ_{j-1})      j = 1..=k_p
//! Φ_p(η_p) = V_{k_p}^T φ_{k_p}
//! ```
//!
//! With shortcuts the blocks chain as `η_{p+1} = η_p + Φ_p(η_p)` and the
//! network output is `η_m + Φ_m(η_m)`. Without shortcuts the same blocks are
//! composed directly, which is the plain fully-connected network. There are
//! no bias terms.
//!
//! Blocks and layers are indexed from zero.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::SimRng;

/// Smooth elementwise activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Sigmoid,
    /// Linear pass-through. Mostly useful in tests.
    Identity,
}

impl Activation {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    /// Value and derivative at `x`.
    #[inline]
    pub fn eval_with_derivative(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                (s, s * (1.0 - s))
            }
            Activation::Identity => (x, 1.0),
        }
    }
}

/// One fully-connected block: layer widths `L_0..=L_{k+1}` and the
/// activation of each hidden layer `1..=k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    widths: Vec<usize>,
    activations: Vec<Activation>,
}

impl BlockSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::InvalidSpec(format!(
                "a block needs at least one hidden layer (got {} widths)",
                widths.len()
            )));
        }
        if activations.len() != widths.len() - 2 {
            return Err(Error::InvalidSpec(format!(
                "{} hidden layers but {} activations",
                widths.len() - 2,
                activations.len()
            )));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidSpec("layer widths must be positive".into()));
        }
        Ok(Self {
            widths,
            activations,
        })
    }

    /// Number of hidden layers `k`.
    pub fn hidden_layers(&self) -> usize {
        self.widths.len() - 2
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Activation of hidden layer `j` (`1..=k`).
    pub fn activation(&self, j: usize) -> Activation {
        self.activations[j - 1]
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Shape `(L_j, L_{j+1})` of weight matrix `V_j`.
    pub fn matrix_shape(&self, j: usize) -> (usize, usize) {
        (self.widths[j], self.widths[j + 1])
    }

    pub fn weight_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1]).sum()
    }
}

/// Static architecture of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResNetSpec {
    n: usize,
    blocks: Vec<BlockSpec>,
    shortcut: bool,
}

impl ResNetSpec {
    pub fn new(n: usize, blocks: Vec<BlockSpec>, shortcut: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidSpec(
                "state dimension must be positive".into(),
            ));
        }
        if blocks.is_empty() {
            return Err(Error::InvalidSpec("at least one block is required".into()));
        }
        for (p, b) in blocks.iter().enumerate() {
            if b.input_dim() != n || b.output_dim() != n {
                return Err(Error::InvalidSpec(format!(
                    "block {p} maps R^{} -> R^{}, expected R^{n} -> R^{n}",
                    b.input_dim(),
                    b.output_dim()
                )));
            }
        }
        Ok(Self {
            n,
            blocks,
            shortcut,
        })
    }

    /// `num_blocks` identical blocks with `hidden_layers` hidden layers of
    /// `width` nodes each.
    pub fn uniform(
        n: usize,
        num_blocks: usize,
        hidden_layers: usize,
        width: usize,
        activation: Activation,
        shortcut: bool,
    ) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden_layers + 2);
        widths.push(n);
        widths.extend(std::iter::repeat_n(width, hidden_layers));
        widths.push(n);
        let block = BlockSpec::new(widths, vec![activation; hidden_layers])?;
        Self::new(n, vec![block; num_blocks], shortcut)
    }

    /// Single hidden layer network `V_1^T act(V_0^T x)`.
    pub fn shallow(n: usize, hidden: usize, activation: Activation) -> Result<Self> {
        Self::uniform(n, 1, 1, hidden, activation, false)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, p: usize) -> &BlockSpec {
        &self.blocks[p]
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn shortcut(&self) -> bool {
        self.shortcut
    }

    /// Same blocks, shortcuts switched on or off.
    pub fn with_shortcut(&self, shortcut: bool) -> Self {
        Self {
            shortcut,
            ..self.clone()
        }
    }

    pub fn total_weight_count(&self) -> usize {
        self.blocks.iter().map(BlockSpec::weight_count).sum()
    }

    pub fn layout(&self) -> WeightLayout {
        WeightLayout::new(self)
    }
}

/// Position of one weight matrix `V_{p,j}` inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlice {
    pub block: usize,
    pub layer: usize,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LayerSlice {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Maps every `(block, layer)` to a contiguous slice of the flat weight
/// vector. Matrices are stored column-major, blocks and layers in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightLayout {
    slices: Vec<LayerSlice>,
    block_first: Vec<usize>,
    block_ranges: Vec<Range<usize>>,
    total: usize,
}

impl WeightLayout {
    fn new(spec: &ResNetSpec) -> Self {
        let mut slices = Vec::new();
        let mut block_first = Vec::new();
        let mut block_ranges = Vec::new();
        let mut offset = 0;
        for (p, b) in spec.blocks.iter().enumerate() {
            block_first.push(slices.len());
            let start = offset;
            for j in 0..=b.hidden_layers() {
                let (rows, cols) = b.matrix_shape(j);
                slices.push(LayerSlice {
                    block: p,
                    layer: j,
                    offset,
                    rows,
                    cols,
                });
                offset += rows * cols;
            }
            block_ranges.push(start..offset);
        }
        Self {
            slices,
            block_first,
            block_ranges,
            total: offset,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn slices(&self) -> &[LayerSlice] {
        &self.slices
    }

    pub fn slice(&self, block: usize, layer: usize) -> &LayerSlice {
        &self.slices[self.block_first[block] + layer]
    }

    pub fn block_range(&self, block: usize) -> Range<usize> {
        self.block_ranges[block].clone()
    }

    pub fn num_blocks(&self) -> usize {
        self.block_ranges.len()
    }
}

/// Flat weight vector `θ = [vec(V_{0,0}); ...; vec(V_{m-1,k})]` together with
/// its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    values: Vec<f64>,
    layout: Arc<WeightLayout>,
}

impl WeightVector {
    pub fn zeros(spec: &ResNetSpec) -> Self {
        let layout = spec.layout();
        Self {
            values: vec![0.0; layout.total()],
            layout: Arc::new(layout),
        }
    }

    pub fn from_values(spec: &ResNetSpec, values: Vec<f64>) -> Result<Self> {
        let layout = spec.layout();
        if values.len() != layout.total() {
            return Err(Error::Dimension {
                context: "weight vector",
                expected: layout.total(),
                actual: values.len(),
            });
        }
        Ok(Self {
            values,
            layout: Arc::new(layout),
        })
    }

    /// A vector with the same layout and new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::Dimension {
                context: "weight vector",
                expected: self.values.len(),
                actual: values.len(),
            });
        }
        Ok(Self {
            values,
            layout: Arc::clone(&self.layout),
        })
    }

    pub fn layout(&self) -> &WeightLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Weights `θ_p` of block `p`.
    pub fn block(&self, p: usize) -> &[f64] {
        &self.values[self.layout.block_range(p)]
    }

    /// `V_{p,j}` as a matrix.
    pub fn matrix(&self, block: usize, layer: usize) -> DMatrix<f64> {
        let s = self.layout.slice(block, layer);
        linalg::unvec(&self.values[s.range()], s.rows, s.cols)
    }

    pub fn set_matrix(&mut self, block: usize, layer: usize, m: &DMatrix<f64>) -> Result<()> {
        let s = *self.layout.slice(block, layer);
        if m.nrows() != s.rows || m.ncols() != s.cols {
            return Err(Error::Dimension {
                context: "weight matrix",
                expected: s.len(),
                actual: m.len(),
            });
        }
        self.values[s.range()].copy_from_slice(m.as_slice());
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Intermediate values of one block's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCache {
    /// `φ_j` for `j = 0..=k`; `phi[0]` is the block input `η_p`.
    pub phi: Vec<Vec<f64>>,
    /// Pre-activation `V_{j-1}^T φ_{j-1}` of hidden layer `j`, stored at `j-1`.
    pub pre: Vec<Vec<f64>>,
    /// Diagonal of `φ'_j` for hidden layer `j`, stored at `j-1`.
    pub dphi: Vec<Vec<f64>>,
    /// `Φ_p(η_p)`, without the shortcut.
    pub output: Vec<f64>,
}

impl BlockCache {
    pub fn input(&self) -> &[f64] {
        &self.phi[0]
    }
}

/// Everything one network evaluation produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub blocks: Vec<BlockCache>,
    pub output: Vec<f64>,
}

impl ForwardCache {
    /// Input `η_p` of block `p`.
    pub fn eta(&self, p: usize) -> &[f64] {
        self.blocks[p].input()
    }
}

/// `out = V^T x` for column-major `V` with `x.len()` rows.
#[inline]
pub(crate) fn mat_t_vec(v: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(v.len(), rows * cols);
    v.chunks_exact(rows)
        .map(|col| col.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Forward pass of one block. `theta_p` holds the block's weights in layout
/// order.
pub fn block_forward(block: &BlockSpec, theta_p: &[f64], eta: &[f64]) -> Result<BlockCache> {
    if eta.len() != block.input_dim() {
        return Err(Error::Dimension {
            context: "block input",
            expected: block.input_dim(),
            actual: eta.len(),
        });
    }
    if theta_p.len() != block.weight_count() {
        return Err(Error::Dimension {
            context: "block weights",
            expected: block.weight_count(),
            actual: theta_p.len(),
        });
    }
    let k = block.hidden_layers();
    let mut phi = Vec::with_capacity(k + 1);
    let mut pre = Vec::with_capacity(k);
    let mut dphi = Vec::with_capacity(k);
    phi.push(eta.to_vec());
    let mut offset = 0;
    for j in 0..k {
        let (rows, cols) = block.matrix_shape(j);
        let z = mat_t_vec(&theta_p[offset..offset + rows * cols], rows, cols, &phi[j]);
        offset += rows * cols;
        let act = block.activation(j + 1);
        let (a, d): (Vec<f64>, Vec<f64>) = z.iter().map(|&zi| act.eval_with_derivative(zi)).unzip();
        pre.push(z);
        phi.push(a);
        dphi.push(d);
    }
    let (rows, cols) = block.matrix_shape(k);
    let output = mat_t_vec(&theta_p[offset..offset + rows * cols], rows, cols, &phi[k]);
    Ok(BlockCache {
        phi,
        pre,
        dphi,
        output,
    })
}

/// Network output `Φ^θ(x)` and the cache the Jacobian needs.
pub fn resnet_forward(
    spec: &ResNetSpec,
    theta: &WeightVector,
    x: &[f64],
) -> Result<(Vec<f64>, ForwardCache)> {
    if x.len() != spec.n() {
        return Err(Error::Dimension {
            context: "network input",
            expected: spec.n(),
            actual: x.len(),
        });
    }
    if theta.len() != spec.total_weight_count() {
        return Err(Error::Dimension {
            context: "weight vector",
            expected: spec.total_weight_count(),
            actual: theta.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("resnet_forward"));
    }
    let layout = theta.layout();
    let mut blocks = Vec::with_capacity(spec.num_blocks());
    let mut eta = x.to_vec();
    for (p, b) in spec.blocks().iter().enumerate() {
        let cache = block_forward(b, &theta.as_slice()[layout.block_range(p)], &eta)?;
        let next: Vec<f64> = if spec.shortcut() {
            eta.iter().zip(&cache.output).map(|(a, b)| a + b).collect()
        } else {
            cache.output.clone()
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Overflow { block: p });
        }
        blocks.push(cache);
        eta = next;
    }
    let cache = ForwardCache {
        blocks,
        output: eta.clone(),
    };
    Ok((eta, cache))
}

/// Weights drawn i.i.d. from `U[low, high)`.
pub fn init_weights(
    spec: &ResNetSpec,
    rng: &mut SimRng,
    low: f64,
    high: f64,
) -> Result<WeightVector> {
    if !(low < high) || !low.is_finite() || !high.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "weight init range [{low}, {high}) is empty"
        )));
    }
    let values = rng.uniform_vec(spec.total_weight_count(), low, high);
    WeightVector::from_values(spec, values)
}

//! Analytic weight Jacobian `Φ' = ∂Φ^θ(x)/∂θ` and its finite-difference
//! oracle.
//!
//! For block `p` with hidden layers `1..=k`, let
//! `P_j = ∏_{l=k..j+1} V_l^T diag(φ'_l)` (right-to-left, empty product is the
//! identity). Then
//!
//! ```text
//! Λ_{p,j} = P_j (I_{L_{j+1}} ⊗ φ_j^T)          j = 0..=k, φ_0 = η_p
//! Ξ_p     = P_0 V_0^T
//! Φ'_p    = (I + Ξ_{m-1}) ... (I + Ξ_{p+1}) Λ_p  (shortcuts)
//! Φ'_p    = Ξ_{m-1} ... Ξ_{p+1} Λ_p              (no shortcuts)
//! ```
//!
//! Under column-major `vec`, `∂(V^T φ)/∂vec(V) = I ⊗ φ^T`, so the
//! Kronecker factors are used in the order written above.
//!
//! The adaptation law only ever needs `Φ'^T e`. [`JacobianFactors`] keeps
//! `D_p P_j` per layer and applies the Kronecker structure directly instead
//! of materializing the dense `n × W` matrix.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::resnet::{
    init_weights, resnet_forward, BlockCache, BlockSpec, ForwardCache, ResNetSpec, WeightLayout,
    WeightVector,
};
use crate::rng::SimRng;

/// Dense `n × W` Jacobian whose columns follow the weight-vector layout.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    matrix: DMatrix<f64>,
    layout: WeightLayout,
}

/// Anything that can apply `Φ'^T` to an output-space vector.
pub trait WeightJacobian {
    fn output_dim(&self) -> usize;
    fn weight_count(&self) -> usize;
    /// `Φ'^T v`.
    fn transpose_mul(&self, v: &[f64]) -> Vec<f64>;
}

impl JacobianMatrix {
    pub fn from_parts(matrix: DMatrix<f64>, layout: WeightLayout) -> Result<Self> {
        if matrix.ncols() != layout.total() {
            return Err(Error::Dimension {
                context: "jacobian columns",
                expected: layout.total(),
                actual: matrix.ncols(),
            });
        }
        Ok(Self { matrix, layout })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn layout(&self) -> &WeightLayout {
        &self.layout
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    /// Columns belonging to block `p`, i.e. `Φ'_p`.
    pub fn block_columns(&self, p: usize) -> DMatrix<f64> {
        let r = self.layout.block_range(p);
        self.matrix.columns(r.start, r.len()).into_owned()
    }

    /// Columns belonging to `vec(V_{p,j})`.
    pub fn layer_columns(&self, p: usize, j: usize) -> DMatrix<f64> {
        let s = self.layout.slice(p, j);
        self.matrix.columns(s.offset, s.len()).into_owned()
    }
}

impl WeightJacobian for JacobianMatrix {
    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn weight_count(&self) -> usize {
        self.matrix.ncols()
    }

    fn transpose_mul(&self, v: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(v);
        self.matrix.tr_mul(&v).as_slice().to_vec()
    }
}

/// Ordering of the Kronecker factor in `Λ_{p,j}`.
///
/// `IdentityFirst` is correct for the column-major layout. `VectorFirst`
/// (`φ^T ⊗ I`) is the row-major reading and only exists as a negative
/// control for the gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KronOrder {
    #[default]
    IdentityFirst,
    VectorFirst,
}

fn check_block_cache(block: &BlockSpec, theta_p: &[f64], cache: &BlockCache) -> Result<()> {
    if theta_p.len() != block.weight_count() {
        return Err(Error::Dimension {
            context: "block weights",
            expected: block.weight_count(),
            actual: theta_p.len(),
        });
    }
    let k = block.hidden_layers();
    if cache.phi.len() != k + 1 || cache.dphi.len() != k {
        return Err(Error::Dimension {
            context: "block cache depth",
            expected: k + 1,
            actual: cache.phi.len(),
        });
    }
    for (j, phi) in cache.phi.iter().enumerate() {
        if phi.len() != block.widths()[j] {
            return Err(Error::Dimension {
                context: "block cache layer width",
                expected: block.widths()[j],
                actual: phi.len(),
            });
        }
    }
    Ok(())
}

fn layer_matrix(block: &BlockSpec, theta_p: &[f64], j: usize) -> DMatrix<f64> {
    let offset: usize = (0..j)
        .map(|l| {
            let (r, c) = block.matrix_shape(l);
            r * c
        })
        .sum();
    let (rows, cols) = block.matrix_shape(j);
    linalg::unvec(&theta_p[offset..offset + rows * cols], rows, cols)
}

/// `P_j = ∏_{l=k..j+1} V_l^T diag(φ'_l)` for every `j = 0..=k`.
/// `P_j` is `n × L_{j+1}`.
fn chain_products(block: &BlockSpec, theta_p: &[f64], cache: &BlockCache) -> Vec<DMatrix<f64>> {
    let k = block.hidden_layers();
    let n = block.output_dim();
    let mut out = vec![DMatrix::identity(n, n); k + 1];
    for j in (0..k).rev() {
        // P_j = P_{j+1} V_{j+1}^T diag(φ'_{j+1})
        let mut m: DMatrix<f64> = &out[j + 1] * layer_matrix(block, theta_p, j + 1).transpose();
        for (mut col, &d) in m.column_iter_mut().zip(&cache.dphi[j]) {
            col *= d;
        }
        out[j] = m;
    }
    out
}

/// `Λ_p = [Λ_{p,0} ... Λ_{p,k}]`, the `n × |θ_p|` Jacobian of `Φ_p(η_p)`
/// with respect to the block's own weights.
pub fn block_weight_jacobian(
    block: &BlockSpec,
    theta_p: &[f64],
    cache: &BlockCache,
) -> Result<DMatrix<f64>> {
    block_weight_jacobian_ordered(block, theta_p, cache, KronOrder::IdentityFirst)
}

fn block_weight_jacobian_ordered(
    block: &BlockSpec,
    theta_p: &[f64],
    cache: &BlockCache,
    order: KronOrder,
) -> Result<DMatrix<f64>> {
    check_block_cache(block, theta_p, cache)?;
    let n = block.output_dim();
    let chain = chain_products(block, theta_p, cache);
    let mut out = DMatrix::zeros(n, block.weight_count());
    let mut offset = 0;
    for (j, p_j) in chain.iter().enumerate() {
        let width = block.widths()[j + 1];
        let kron = match order {
            KronOrder::IdentityFirst => linalg::identity_kron_row(width, &cache.phi[j]),
            KronOrder::VectorFirst => linalg::row_kron_identity(&cache.phi[j], width),
        };
        let lam = p_j * kron;
        out.columns_mut(offset, lam.ncols()).copy_from(&lam);
        offset += lam.ncols();
    }
    Ok(out)
}

/// `Ξ_p = ∂Φ_p(η_p)/∂η_p`, an `n × n` matrix.
pub fn block_input_jacobian(
    block: &BlockSpec,
    theta_p: &[f64],
    cache: &BlockCache,
) -> Result<DMatrix<f64>> {
    check_block_cache(block, theta_p, cache)?;
    let chain = chain_products(block, theta_p, cache);
    Ok(&chain[0] * layer_matrix(block, theta_p, 0).transpose())
}

fn check_cache(spec: &ResNetSpec, theta: &WeightVector, cache: &ForwardCache) -> Result<()> {
    if theta.len() != spec.total_weight_count() {
        return Err(Error::Dimension {
            context: "weight vector",
            expected: spec.total_weight_count(),
            actual: theta.len(),
        });
    }
    if cache.blocks.len() != spec.num_blocks() {
        return Err(Error::Dimension {
            context: "forward cache blocks",
            expected: spec.num_blocks(),
            actual: cache.blocks.len(),
        });
    }
    Ok(())
}

/// Per-block chain products and `Ξ_p`, computed once per evaluation.
struct BlockParts {
    chain: Vec<DMatrix<f64>>,
    xi: DMatrix<f64>,
}

fn block_parts(
    spec: &ResNetSpec,
    theta: &WeightVector,
    cache: &ForwardCache,
) -> Result<Vec<BlockParts>> {
    check_cache(spec, theta, cache)?;
    (0..spec.num_blocks())
        .map(|p| {
            let block = spec.block(p);
            check_block_cache(block, theta.block(p), &cache.blocks[p])?;
            let chain = chain_products(block, theta.block(p), &cache.blocks[p]);
            let xi = &chain[0] * layer_matrix(block, theta.block(p), 0).transpose();
            Ok(BlockParts { chain, xi })
        })
        .collect()
}

/// Factor through which block `p`'s output reaches the network output:
/// `∏_{l>p} (I + Ξ_l)` or `∏_{l>p} Ξ_l`. Returned for every block.
fn downstream_factors(shortcut: bool, parts: &[BlockParts]) -> Vec<DMatrix<f64>> {
    let m = parts.len();
    let n = parts[0].xi.nrows();
    let mut d = vec![DMatrix::identity(n, n); m];
    for p in (0..m.saturating_sub(1)).rev() {
        let mut xi = parts[p + 1].xi.clone();
        if shortcut {
            for i in 0..n {
                xi[(i, i)] += 1.0;
            }
        }
        d[p] = &d[p + 1] * xi;
    }
    d
}

/// Full Jacobian `Φ' = [Φ'_0 ... Φ'_{m-1}]` at the point the cache was built.
pub fn resnet_jacobian(
    spec: &ResNetSpec,
    theta: &WeightVector,
    cache: &ForwardCache,
) -> Result<JacobianMatrix> {
    resnet_jacobian_ordered(spec, theta, cache, KronOrder::IdentityFirst)
}

/// [`resnet_jacobian`] with a selectable Kronecker ordering. Only
/// `KronOrder::IdentityFirst` yields the true derivative.
pub fn resnet_jacobian_ordered(
    spec: &ResNetSpec,
    theta: &WeightVector,
    cache: &ForwardCache,
    order: KronOrder,
) -> Result<JacobianMatrix> {
    let parts = block_parts(spec, theta, cache)?;
    let down = downstream_factors(spec.shortcut(), &parts);
    let layout = theta.layout().clone();
    let mut matrix = DMatrix::zeros(spec.n(), layout.total());
    for (p, d) in down.iter().enumerate() {
        let lam =
            block_weight_jacobian_ordered(spec.block(p), theta.block(p), &cache.blocks[p], order)?;
        let r = layout.block_range(p);
        matrix.columns_mut(r.start, r.len()).copy_from(&(d * lam));
    }
    Ok(JacobianMatrix { matrix, layout })
}

struct LayerFactor {
    offset: usize,
    /// `D_p P_j`, `n × L_{j+1}`.
    gain: DMatrix<f64>,
    /// `φ_j`, length `L_j`.
    input: Vec<f64>,
}

/// Kronecker-factored form of `Φ'`: the slice for `vec(V_{p,j})` equals
/// `(D_p P_j)(I ⊗ φ_j^T)`, so column `a + b·L_j` is `φ_j[a] · (D_p P_j)[:, b]`.
pub struct JacobianFactors {
    n: usize,
    total: usize,
    layers: Vec<LayerFactor>,
}

impl JacobianFactors {
    pub fn new(spec: &ResNetSpec, theta: &WeightVector, cache: &ForwardCache) -> Result<Self> {
        let parts = block_parts(spec, theta, cache)?;
        let down = downstream_factors(spec.shortcut(), &parts);
        let layout = theta.layout();
        let mut layers = Vec::with_capacity(layout.slices().len());
        for (p, part) in parts.into_iter().enumerate() {
            for (j, p_j) in part.chain.into_iter().enumerate() {
                layers.push(LayerFactor {
                    offset: layout.slice(p, j).offset,
                    gain: &down[p] * p_j,
                    input: cache.blocks[p].phi[j].clone(),
                });
            }
        }
        Ok(Self {
            n: spec.n(),
            total: layout.total(),
            layers,
        })
    }

    fn transpose_mul_impl(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n);
        let mut out = vec![0.0; self.total];
        for layer in &self.layers {
            let rows = layer.input.len();
            for (b, col) in layer.gain.column_iter().enumerate() {
                let r: f64 = col.iter().zip(v).map(|(g, e)| g * e).sum();
                let dst = &mut out[layer.offset + b * rows..layer.offset + (b + 1) * rows];
                for (d, &phi) in dst.iter_mut().zip(&layer.input) {
                    *d = phi * r;
                }
            }
        }
        out
    }

    /// `Φ' u` for a weight-space direction `u`.
    pub fn mul(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.total);
        let mut out = vec![0.0; self.n];
        for layer in &self.layers {
            let rows = layer.input.len();
            for (b, col) in layer.gain.column_iter().enumerate() {
                let seg = &u[layer.offset + b * rows..layer.offset + (b + 1) * rows];
                let s: f64 = seg.iter().zip(&layer.input).map(|(a, b)| a * b).sum();
                for (o, g) in out.iter_mut().zip(col.iter()) {
                    *o += g * s;
                }
            }
        }
        out
    }

    /// Frobenius norm of each block's slice, using
    /// `‖G (I ⊗ φ^T)‖_F = ‖G‖_F ‖φ‖`.
    pub fn block_norms(&self, layout: &WeightLayout) -> Vec<f64> {
        let mut sq = vec![0.0; layout.num_blocks()];
        for (layer, slice) in self.layers.iter().zip(layout.slices()) {
            let phi2: f64 = layer.input.iter().map(|v| v * v).sum();
            sq[slice.block] += layer.gain.norm_squared() * phi2;
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    pub fn to_dense(&self, layout: &WeightLayout) -> JacobianMatrix {
        let mut matrix = DMatrix::zeros(self.n, self.total);
        for layer in &self.layers {
            let rows = layer.input.len();
            for (b, col) in layer.gain.column_iter().enumerate() {
                for (a, &phi) in layer.input.iter().enumerate() {
                    matrix
                        .column_mut(layer.offset + b * rows + a)
                        .copy_from(&(col * phi));
                }
            }
        }
        JacobianMatrix {
            matrix,
            layout: layout.clone(),
        }
    }
}

impl WeightJacobian for JacobianFactors {
    fn output_dim(&self) -> usize {
        self.n
    }

    fn weight_count(&self) -> usize {
        self.total
    }

    /// `Φ'^T v` without forming `Φ'`.
    fn transpose_mul(&self, v: &[f64]) -> Vec<f64> {
        self.transpose_mul_impl(v)
    }
}

/// Central-difference Jacobian over every weight coordinate. Costs
/// `2W` forward passes; meant for small networks.
pub fn finite_diff_jacobian(
    spec: &ResNetSpec,
    theta: &WeightVector,
    x: &[f64],
    h: f64,
) -> Result<JacobianMatrix> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = theta.clone();
    let mut matrix = DMatrix::zeros(spec.n(), theta.len());
    for i in 0..theta.len() {
        let base = theta.as_slice()[i];
        probe.as_mut_slice()[i] = base + h;
        let (plus, _) = resnet_forward(spec, &probe, x)?;
        probe.as_mut_slice()[i] = base - h;
        let (minus, _) = resnet_forward(spec, &probe, x)?;
        probe.as_mut_slice()[i] = base;
        for (r, (a, b)) in plus.iter().zip(&minus).enumerate() {
            matrix[(r, i)] = (a - b) / (2.0 * h);
        }
    }
    Ok(JacobianMatrix {
        matrix,
        layout: theta.layout().clone(),
    })
}

/// `‖Φ'_p‖_F` for every block, evaluated at `(θ, x)`.
pub fn gradient_norm_profile(
    spec: &ResNetSpec,
    theta: &WeightVector,
    x: &[f64],
) -> Result<Vec<f64>> {
    let (_, cache) = resnet_forward(spec, theta, x)?;
    let factors = JacobianFactors::new(spec, theta, &cache)?;
    Ok(factors.block_norms(theta.layout()))
}

/// Blockwise median of `‖Φ'_p‖_F` over random draws, with and without
/// shortcuts.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientProfiles {
    pub resnet: Vec<f64>,
    pub fully_connected: Vec<f64>,
}

/// Each draw samples `θ ~ U[low, high)` and `x ~ U[0, 2)^n` once and
/// evaluates both variants of `spec` at that same point.
pub fn median_gradient_profiles(
    spec: &ResNetSpec,
    draws: usize,
    seed: u64,
    low: f64,
    high: f64,
) -> Result<GradientProfiles> {
    if draws == 0 {
        return Err(Error::InvalidConfig("need at least one draw".into()));
    }
    let with = spec.with_shortcut(true);
    let without = spec.with_shortcut(false);
    let mut rng = SimRng::seed_from_u64(seed);
    let m = spec.num_blocks();
    let mut a = vec![Vec::with_capacity(draws); m];
    let mut b = vec![Vec::with_capacity(draws); m];
    for _ in 0..draws {
        let theta = init_weights(spec, &mut rng, low, high)?;
        let x = rng.uniform_vec(spec.n(), 0.0, 2.0);
        for (p, v) in gradient_norm_profile(&with, &theta, &x)?
            .into_iter()
            .enumerate()
        {
            a[p].push(v);
        }
        for (p, v) in gradient_norm_profile(&without, &theta, &x)?
            .into_iter()
            .enumerate()
        {
            b[p].push(v);
        }
    }
    Ok(GradientProfiles {
        resnet: a.into_iter().map(median).collect(),
        fully_connected: b.into_iter().map(median).collect(),
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Largest entrywise error `|a - b| / max(|a|, |b|, floor)`.
///
/// Entries smaller than `floor` are compared in absolute terms, which keeps
/// finite-difference round-off on near-zero derivatives from dominating.
pub fn max_relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Denominator floor used by the gradient checks.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// Worst relative error of one weight matrix's Jacobian columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerCheck {
    pub block: usize,
    pub layer: usize,
    pub max_relative_error: f64,
}

/// Compares the analytic Jacobian (with the given Kronecker ordering)
/// against central differences, one row per weight matrix.
pub fn gradient_check(
    spec: &ResNetSpec,
    theta: &WeightVector,
    x: &[f64],
    h: f64,
    order: KronOrder,
) -> Result<Vec<LayerCheck>> {
    let (_, cache) = resnet_forward(spec, theta, x)?;
    let analytic = resnet_jacobian_ordered(spec, theta, &cache, order)?;
    let numeric = finite_diff_jacobian(spec, theta, x, h)?;
    Ok(theta
        .layout()
        .slices()
        .iter()
        .map(|s| LayerCheck {
            block: s.block,
            layer: s.layer,
            max_relative_error: max_relative_error(
                &analytic.layer_columns(s.block, s.layer),
                &numeric.layer_columns(s.block, s.layer),
                RELATIVE_ERROR_FLOOR,
            ),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resnet::{block_forward, init_weights, Activation};
    use crate::rng::SimRng;
    use approx::assert_relative_eq;

    fn scalar_block() -> BlockSpec {
        BlockSpec::new(vec![1, 1, 1], vec![Activation::Tanh]).unwrap()
    }

    fn sech2(x: f64) -> f64 {
        1.0 / x.cosh().powi(2)
    }

    #[test]
    fn scalar_chain_by_hand() {
        let b = scalar_block();
        let theta = [2.0, 3.0];
        let cache = block_forward(&b, &theta, &[0.5]).unwrap();
        let lam = block_weight_jacobian(&b, &theta, &cache).unwrap();
        assert_relative_eq!(lam[(0, 0)], 3.0 * sech2(1.0) * 0.5, max_relative = 1e-14);
        assert_relative_eq!(lam[(0, 1)], 1.0f64.tanh(), max_relative = 1e-14);
        let xi = block_input_jacobian(&b, &theta, &cache).unwrap();
        assert_relative_eq!(xi[(0, 0)], 3.0 * sech2(1.0) * 2.0, max_relative = 1e-14);
    }

    #[test]
    fn zero_block_jacobians_vanish() {
        let b = BlockSpec::new(vec![3, 4, 3], vec![Activation::Tanh]).unwrap();
        let theta = vec![0.0; b.weight_count()];
        let cache = block_forward(&b, &theta, &[0.4, -0.2, 1.0]).unwrap();
        assert!(block_weight_jacobian(&b, &theta, &cache)
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
        assert!(block_input_jacobian(&b, &theta, &cache)
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
    }

    /// Central differences of one block's output, independent of the
    /// analytic path.
    fn block_fd(b: &BlockSpec, theta: &[f64], eta: &[f64], h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = b.output_dim();
        let mut dw = DMatrix::zeros(n, theta.len());
        let mut t = theta.to_vec();
        for i in 0..theta.len() {
            t[i] = theta[i] + h;
            let p = block_forward(b, &t, eta).unwrap().output;
            t[i] = theta[i] - h;
            let m = block_forward(b, &t, eta).unwrap().output;
            t[i] = theta[i];
            for r in 0..n {
                dw[(r, i)] = (p[r] - m[r]) / (2.0 * h);
            }
        }
        let mut dx = DMatrix::zeros(n, eta.len());
        let mut e = eta.to_vec();
        for i in 0..eta.len() {
            e[i] = eta[i] + h;
            let p = block_forward(b, theta, &e).unwrap().output;
            e[i] = eta[i] - h;
            let m = block_forward(b, theta, &e).unwrap().output;
            e[i] = eta[i];
            for r in 0..n {
                dx[(r, i)] = (p[r] - m[r]) / (2.0 * h);
            }
        }
        (dw, dx)
    }

    #[test]
    fn block_jacobians_match_finite_differences() {
        let mut rng = SimRng::seed_from_u64(21);
        for k in 1..=3 {
            let mut widths = vec![3];
            widths.extend((0..k).map(|_| 2 + (rng.unit() * 3.0) as usize));
            widths.push(3);
            let b = BlockSpec::new(widths, vec![Activation::Tanh; k]).unwrap();
            let theta = rng.uniform_vec(b.weight_count(), -1.0, 1.0);
            let eta = rng.uniform_vec(3, -1.0, 1.0);
            let cache = block_forward(&b, &theta, &eta).unwrap();
            let (dw, dx) = block_fd(&b, &theta, &eta, 1e-6);
            let lam = block_weight_jacobian(&b, &theta, &cache).unwrap();
            let xi = block_input_jacobian(&b, &theta, &cache).unwrap();
            assert!(max_relative_error(&lam, &dw, RELATIVE_ERROR_FLOOR) < 1e-6);
            assert!(max_relative_error(&xi, &dx, RELATIVE_ERROR_FLOOR) < 1e-6);
        }
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let b = BlockSpec::new(vec![2, 3, 2], vec![Activation::Tanh]).unwrap();
        let other = BlockSpec::new(vec![2, 4, 2], vec![Activation::Tanh]).unwrap();
        let theta = vec![0.1; b.weight_count()];
        let cache = block_forward(&other, &vec![0.1; other.weight_count()], &[0.1, 0.2]).unwrap();
        assert!(block_weight_jacobian(&b, &theta, &cache).is_err());
        assert!(block_input_jacobian(&b, &theta, &cache).is_err());
    }

    #[test]
    fn zero_weights_limiting_cases() {
        let spec = ResNetSpec::uniform(3, 4, 1, 5, Activation::Tanh, true).unwrap();
        let theta = WeightVector::zeros(&spec);
        let x = [0.3, 0.7, -0.4];
        let (_, cache) = resnet_forward(&spec, &theta, &x).unwrap();
        let jac = resnet_jacobian(&spec, &theta, &cache).unwrap();
        for p in 0..4 {
            let lam =
                block_weight_jacobian(spec.block(p), theta.block(p), &cache.blocks[p]).unwrap();
            assert_eq!(jac.block_columns(p), lam);
        }

        let fc = spec.with_shortcut(false);
        let (_, cache) = resnet_forward(&fc, &theta, &x).unwrap();
        let jac = resnet_jacobian(&fc, &theta, &cache).unwrap();
        for p in 0..3 {
            assert!(jac.block_columns(p).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn last_block_agrees_across_modes() {
        let spec = ResNetSpec::uniform(3, 3, 2, 4, Activation::Tanh, true).unwrap();
        let theta = init_weights(&spec, &mut SimRng::seed_from_u64(2), -0.5, 0.5).unwrap();
        let x = [0.2, -0.1, 0.9];
        let fc = spec.with_shortcut(false);
        // the last block sees different inputs in the two modes, so compare
        // each against its own Λ_m
        for s in [&spec, &fc] {
            let (_, cache) = resnet_forward(s, &theta, &x).unwrap();
            let jac = resnet_jacobian(s, &theta, &cache).unwrap();
            let lam = block_weight_jacobian(s.block(2), theta.block(2), &cache.blocks[2]).unwrap();
            assert_eq!(jac.block_columns(2), lam);
        }
    }

    #[test]
    fn factors_agree_with_dense() {
        let spec = ResNetSpec::uniform(4, 3, 2, 3, Activation::Tanh, true).unwrap();
        let mut rng = SimRng::seed_from_u64(8);
        let theta = init_weights(&spec, &mut rng, -0.7, 0.7).unwrap();
        let x = rng.uniform_vec(4, -1.0, 1.0);
        let (_, cache) = resnet_forward(&spec, &theta, &x).unwrap();
        let dense = resnet_jacobian(&spec, &theta, &cache).unwrap();
        let factors = JacobianFactors::new(&spec, &theta, &cache).unwrap();
        let assembled = factors.to_dense(theta.layout());
        assert!(max_relative_error(dense.matrix(), assembled.matrix(), 1e-12) < 1e-12);

        let e = rng.uniform_vec(4, -1.0, 1.0);
        let a = factors.transpose_mul(&e);
        let b = dense.transpose_mul(&e);
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-13);
        }
        let u = rng.uniform_vec(theta.len(), -1.0, 1.0);
        let lhs = factors.mul(&u);
        let rhs = dense.matrix() * DVector::from_column_slice(&u);
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
        let norms = factors.block_norms(theta.layout());
        for (p, nrm) in norms.iter().enumerate() {
            assert_relative_eq!(*nrm, dense.block_columns(p).norm(), max_relative = 1e-12);
        }
    }

    #[test]
    fn full_jacobian_matches_finite_differences() {
        let mut rng = SimRng::seed_from_u64(33);
        let b0 = BlockSpec::new(vec![3, 4, 2, 3], vec![Activation::Tanh; 2]).unwrap();
        let b1 = BlockSpec::new(vec![3, 3, 4, 3], vec![Activation::Tanh; 2]).unwrap();
        let b2 = BlockSpec::new(vec![3, 2, 3, 3], vec![Activation::Tanh; 2]).unwrap();
        for shortcut in [true, false] {
            let spec =
                ResNetSpec::new(3, vec![b0.clone(), b1.clone(), b2.clone()], shortcut).unwrap();
            let theta = init_weights(&spec, &mut rng, -1.0, 1.0).unwrap();
            let x = rng.uniform_vec(3, -1.0, 1.0);
            let (_, cache) = resnet_forward(&spec, &theta, &x).unwrap();
            let analytic = resnet_jacobian(&spec, &theta, &cache).unwrap();
            let fd = finite_diff_jacobian(&spec, &theta, &x, 1e-6).unwrap();
            let err = max_relative_error(analytic.matrix(), fd.matrix(), RELATIVE_ERROR_FLOOR);
            assert!(err < 1e-5, "shortcut={shortcut}: {err}");
        }
    }

    #[test]
    fn swapped_kronecker_order_is_wrong() {
        let spec = ResNetSpec::uniform(3, 2, 1, 4, Activation::Tanh, true).unwrap();
        let theta = init_weights(&spec, &mut SimRng::seed_from_u64(4), -1.0, 1.0).unwrap();
        let x = [0.5, -0.5, 0.25];
        let (_, cache) = resnet_forward(&spec, &theta, &x).unwrap();
        let wrong = resnet_jacobian_ordered(&spec, &theta, &cache, KronOrder::VectorFirst).unwrap();
        let fd = finite_diff_jacobian(&spec, &theta, &x, 1e-6).unwrap();
        assert!(max_relative_error(wrong.matrix(), fd.matrix(), RELATIVE_ERROR_FLOOR) > 1e-2);
    }

    #[test]
    fn gradient_check_rows() {
        let spec = ResNetSpec::uniform(3, 2, 2, 4, Activation::Tanh, true).unwrap();
        let theta = init_weights(&spec, &mut SimRng::seed_from_u64(8), -0.5, 0.5).unwrap();
        let x = [0.2, -0.7, 0.4];
        let good = gradient_check(&spec, &theta, &x, 1e-6, KronOrder::IdentityFirst).unwrap();
        assert_eq!(good.len(), 6);
        assert_eq!((good[5].block, good[5].layer), (1, 2));
        assert!(good.iter().all(|c| c.max_relative_error < 1e-5));
        let bad = gradient_check(&spec, &theta, &x, 1e-6, KronOrder::VectorFirst).unwrap();
        assert!(bad.iter().any(|c| c.max_relative_error > 1e-2));
    }

    #[test]
    fn median_profiles_shapes() {
        let spec = ResNetSpec::uniform(3, 4, 1, 3, Activation::Tanh, true).unwrap();
        let g = median_gradient_profiles(&spec, 5, 1, -0.05, 0.05).unwrap();
        assert_eq!(g.resnet.len(), 4);
        assert!(g
            .resnet
            .iter()
            .chain(&g.fully_connected)
            .all(|v| v.is_finite() && *v > 0.0));
        assert!(g.resnet[0] > 10.0 * g.fully_connected[0]);
        assert_eq!(median(vec![3.0, 1.0, 2.0, 10.0]), 2.5);
        assert!(median_gradient_profiles(&spec, 0, 1, -0.05, 0.05).is_err());
    }

    #[test]
    fn linear_network_finite_difference_is_exact() {
        // Φ(x) = x + v1 v0 x with identity activation: ∂/∂v1 = v0 x exactly
        let b = BlockSpec::new(vec![1, 1, 1], vec![Activation::Identity]).unwrap();
        let spec = ResNetSpec::new(1, vec![b], true).unwrap();
        let theta = WeightVector::from_values(&spec, vec![0.5, 2.0]).unwrap();
        for h in [1e-2, 1e-4, 1e-6] {
            let fd = finite_diff_jacobian(&spec, &theta, &[2.0], h).unwrap();
            assert_relative_eq!(fd.matrix()[(0, 0)], 4.0, max_relative = 1e-9);
            assert_relative_eq!(fd.matrix()[(0, 1)], 1.0, max_relative = 1e-9);
        }
    }

    #[test]
    fn finite_difference_step_robust() {
        let spec = ResNetSpec::uniform(3, 2, 2, 3, Activation::Tanh, true).unwrap();
        let mut rng = SimRng::seed_from_u64(77);
        for _ in 0..5 {
            let theta = init_weights(&spec, &mut rng, -1.0, 1.0).unwrap();
            let x = rng.uniform_vec(3, -1.0, 1.0);
            let a = finite_diff_jacobian(&spec, &theta, &x, 1e-6).unwrap();
            let b = finite_diff_jacobian(&spec, &theta, &x, 1e-7).unwrap();
            let diff = (a.matrix() - b.matrix()).amax();
            assert!(diff < 1e-6, "{diff}");
        }
        assert!(finite_diff_jacobian(&spec, &WeightVector::zeros(&spec), &[0.0; 3], 0.0).is_err());
    }

    #[test]
    fn gradient_profile_limiting_cases() {
        let spec = ResNetSpec::uniform(3, 5, 1, 4, Activation::Tanh, false).unwrap();
        let theta = WeightVector::zeros(&spec);
        let x = [1.0, 0.5, -0.5];
        let prof = gradient_norm_profile(&spec, &theta, &x).unwrap();
        assert!(prof[..4].iter().all(|v| *v == 0.0));

        let res = spec.with_shortcut(true);
        let prof = gradient_norm_profile(&res, &theta, &x).unwrap();
        let (_, cache) = resnet_forward(&res, &theta, &x).unwrap();
        for (p, nrm) in prof.iter().enumerate() {
            let lam =
                block_weight_jacobian(res.block(p), theta.block(p), &cache.blocks[p]).unwrap();
            assert_relative_eq!(*nrm, lam.norm(), max_relative = 1e-14);
        }
    }
}

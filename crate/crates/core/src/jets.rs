//! Third-order jets of a network output with respect to its inputs.
//!
//! A jet bundles a value with all of its input partial derivatives up to
//! order three. Jets are propagated exactly through affine layers and the
//! `tanh` nonlinearity, so `forward_jet` returns exact derivatives (up to
//! rounding), never finite-difference approximations.
//!
//! Internally only the *unique* derivative components are propagated (one
//! channel per sorted multi-index), which makes the symmetric tensors of the
//! public [`Jet3`] exactly symmetric by construction. Parameter gradients of
//! any scalar built from a jet are obtained by reverse accumulation over the
//! recorded forward pass ([`ParamTape`]).

use std::sync::OnceLock;

use crate::network::{Network, Wrapper};
use crate::{Error, Result};

/// Largest supported input dimension (e.g. two space coordinates plus time).
pub const MAX_DIM: usize = 3;
/// Highest derivative order carried by a jet.
pub const MAX_ORDER: usize = 3;

/// Value and input derivatives up to order 3 at a single point.
///
/// `d2` and `d3` are stored densely; only the leading `dim` entries along each
/// axis are meaningful, the rest are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet3 {
    pub dim: usize,
    pub value: f64,
    pub d1: [f64; MAX_DIM],
    pub d2: [[f64; MAX_DIM]; MAX_DIM],
    pub d3: [[[f64; MAX_DIM]; MAX_DIM]; MAX_DIM],
}

impl Jet3 {
    pub fn zero(dim: usize) -> Self {
        debug_assert!((1..=MAX_DIM).contains(&dim));
        Jet3 {
            dim,
            value: 0.0,
            d1: [0.0; MAX_DIM],
            d2: [[0.0; MAX_DIM]; MAX_DIM],
            d3: [[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM],
        }
    }

    pub fn constant(dim: usize, value: f64) -> Self {
        Jet3 {
            value,
            ..Jet3::zero(dim)
        }
    }

    /// The coordinate function `x_axis` evaluated at `value`.
    pub fn variable(dim: usize, axis: usize, value: f64) -> Self {
        let mut jet = Jet3::constant(dim, value);
        jet.d1[axis] = 1.0;
        jet
    }

    /// Builds a jet from unique channels laid out as in [`Layout`]; channels
    /// beyond `layout.order` are zero.
    pub(crate) fn from_channels(layout: &Layout, ch: &[f64]) -> Self {
        let dim = layout.dim;
        let mut jet = Jet3::zero(dim);
        jet.value = ch[0];
        if layout.order >= 1 {
            jet.d1[..dim].copy_from_slice(&ch[1..=dim]);
        }
        if layout.order >= 2 {
            for i in 0..dim {
                for j in 0..dim {
                    jet.d2[i][j] = ch[layout.pair_channel(i, j)];
                }
            }
        }
        if layout.order >= 3 {
            for i in 0..dim {
                for j in 0..dim {
                    for k in 0..dim {
                        jet.d3[i][j][k] = ch[layout.triple_channel(i, j, k)];
                    }
                }
            }
        }
        jet
    }

    /// Unique channels of this jet (reads only sorted index tuples).
    pub(crate) fn to_channels(&self, layout: &Layout) -> Vec<f64> {
        let mut ch = vec![0.0; layout.channels];
        ch[0] = self.value;
        let n = layout.first_count();
        ch[1..=n].copy_from_slice(&self.d1[..n]);
        for (p, &[i, j]) in layout.pairs.iter().enumerate() {
            ch[layout.pair_base + p] = self.d2[i][j];
        }
        for (t, &[i, j, k]) in layout.triples.iter().enumerate() {
            ch[layout.triple_base + t] = self.d3[i][j][k];
        }
        ch
    }

    /// Reduces a dense seed (one entry per stored tensor element) to a seed on
    /// unique channels. Redundant copies of a symmetric entry add up.
    pub(crate) fn seed_channels(&self, layout: &Layout) -> Vec<f64> {
        let dim = layout.dim;
        let mut ch = vec![0.0; layout.channels];
        ch[0] = self.value;
        if layout.order >= 1 {
            for i in 0..dim {
                ch[1 + i] += self.d1[i];
            }
        }
        if layout.order >= 2 {
            for i in 0..dim {
                for j in 0..dim {
                    ch[layout.pair_channel(i, j)] += self.d2[i][j];
                }
            }
        }
        if layout.order >= 3 {
            for i in 0..dim {
                for j in 0..dim {
                    for k in 0..dim {
                        ch[layout.triple_channel(i, j, k)] += self.d3[i][j][k];
                    }
                }
            }
        }
        ch
    }

    fn map2(&self, other: &Jet3, f: impl Fn(f64, f64) -> f64) -> Jet3 {
        let mut out = Jet3::zero(self.dim.max(other.dim));
        out.value = f(self.value, other.value);
        for i in 0..MAX_DIM {
            out.d1[i] = f(self.d1[i], other.d1[i]);
            for j in 0..MAX_DIM {
                out.d2[i][j] = f(self.d2[i][j], other.d2[i][j]);
                for k in 0..MAX_DIM {
                    out.d3[i][j][k] = f(self.d3[i][j][k], other.d3[i][j][k]);
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Jet3) -> Jet3 {
        self.map2(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Jet3) -> Jet3 {
        self.map2(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Jet3 {
        self.map2(self, |a, _| s * a)
    }

    /// Leibniz product of two jets of equal dimension.
    pub fn mul(&self, other: &Jet3) -> Jet3 {
        let layout = Layout::get(self.dim, MAX_ORDER);
        let u = self.to_channels(layout);
        let v = other.to_channels(layout);
        let mut p = vec![0.0; layout.channels];
        layout.product_forward(&u, &v, &mut p);
        Jet3::from_channels(layout, &p)
    }

    /// Composition `g ∘ self` for a scalar function given by its value and
    /// first three derivatives at `self.value`.
    pub fn compose(&self, g: [f64; 4]) -> Jet3 {
        let layout = Layout::get(self.dim, MAX_ORDER);
        let z = self.to_channels(layout);
        let mut a = vec![0.0; layout.channels];
        layout.compose_forward(&g, &z, &mut a);
        Jet3::from_channels(layout, &a)
    }

    pub fn recip(&self) -> Jet3 {
        let v = self.value;
        let r = 1.0 / v;
        self.compose([r, -r * r, 2.0 * r * r * r, -6.0 * r * r * r * r])
    }

    pub fn div(&self, other: &Jet3) -> Jet3 {
        self.mul(&other.recip())
    }

    pub fn tanh(&self) -> Jet3 {
        let d = tanh_derivatives(self.value);
        self.compose([d[0], d[1], d[2], d[3]])
    }

    pub fn sin(&self) -> Jet3 {
        let (s, c) = self.value.sin_cos();
        self.compose([s, c, -s, -c])
    }

    pub fn cos(&self) -> Jet3 {
        let (s, c) = self.value.sin_cos();
        self.compose([c, -s, -c, s])
    }

    pub fn exp(&self) -> Jet3 {
        let e = self.value.exp();
        self.compose([e, e, e, e])
    }

    /// `self^p` for a constant exponent. Integer exponents use repeated
    /// multiplication so negative bases are allowed.
    pub fn powf(&self, p: f64) -> Jet3 {
        let u = self.value;
        // coefficient p(p-1)...(p-n+1) times u^(p-n); a vanishing
        // coefficient wins over a singular power
        let term = |n: usize| -> f64 {
            let mut coef = 1.0;
            for m in 0..n {
                coef *= p - m as f64;
            }
            if coef == 0.0 {
                return 0.0;
            }
            let q = p - n as f64;
            let power = if q == 0.0 {
                1.0
            } else if q.fract() == 0.0 && q.abs() < i32::MAX as f64 {
                u.powi(q as i32)
            } else {
                u.powf(q)
            };
            coef * power
        };
        self.compose([term(0), term(1), term(2), term(3)])
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.d1.iter().all(|v| v.is_finite())
            && self.d2.iter().flatten().all(|v| v.is_finite())
            && self.d3.iter().flatten().flatten().all(|v| v.is_finite())
    }

    /// Exact symmetry of the stored second and third derivative tensors.
    pub fn is_symmetric(&self) -> bool {
        let n = self.dim;
        for i in 0..n {
            for j in 0..n {
                if self.d2[i][j] != self.d2[j][i] {
                    return false;
                }
                for k in 0..n {
                    let v = self.d3[i][j][k];
                    let perms = [
                        self.d3[i][k][j],
                        self.d3[j][i][k],
                        self.d3[j][k][i],
                        self.d3[k][i][j],
                        self.d3[k][j][i],
                    ];
                    if perms.iter().any(|&p| p != v) {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// `[tanh, tanh', tanh'', tanh''', tanh'''']` at `z`, written in terms of
/// `t = tanh(z)`.
#[inline]
pub fn tanh_derivatives(z: f64) -> [f64; 5] {
    let t = z.tanh();
    let s1 = 1.0 - t * t;
    [
        t,
        s1,
        -2.0 * t * s1,
        s1 * (6.0 * t * t - 2.0),
        8.0 * t * s1 * (2.0 - 3.0 * t * t),
    ]
}

/// One term `coef(s_order) * Π factors` of the Faà di Bruno expansion of an
/// output channel.
#[derive(Debug, Clone)]
struct ComposeTerm {
    out: usize,
    order: usize,
    factors: Vec<usize>,
}

/// Channel bookkeeping for jets of a given dimension and maximal order.
///
/// Channel 0 is the value, then `dim` first derivatives, then one channel per
/// sorted pair `i <= j`, then one per sorted triple `i <= j <= k`.
#[derive(Debug)]
pub struct Layout {
    pub dim: usize,
    pub order: usize,
    pub channels: usize,
    pairs: Vec<[usize; 2]>,
    triples: Vec<[usize; 3]>,
    pair_base: usize,
    triple_base: usize,
    pair_index: [[usize; MAX_DIM]; MAX_DIM],
    triple_index: [[[usize; MAX_DIM]; MAX_DIM]; MAX_DIM],
    compose_terms: Vec<ComposeTerm>,
    product_terms: Vec<(usize, usize, usize)>,
}

impl Layout {
    /// Shared layout for `(dim, order)`.
    pub fn get(dim: usize, order: usize) -> &'static Layout {
        static LAYOUTS: OnceLock<Vec<Layout>> = OnceLock::new();
        let all = LAYOUTS.get_or_init(|| {
            let mut v = Vec::new();
            for d in 1..=MAX_DIM {
                for o in 0..=MAX_ORDER {
                    v.push(Layout::build(d, o));
                }
            }
            v
        });
        assert!((1..=MAX_DIM).contains(&dim) && order <= MAX_ORDER);
        &all[(dim - 1) * (MAX_ORDER + 1) + order]
    }

    fn build(dim: usize, order: usize) -> Layout {
        let mut pairs = Vec::new();
        let mut triples = Vec::new();
        if order >= 2 {
            for i in 0..dim {
                for j in i..dim {
                    pairs.push([i, j]);
                }
            }
        }
        if order >= 3 {
            for i in 0..dim {
                for j in i..dim {
                    for k in j..dim {
                        triples.push([i, j, k]);
                    }
                }
            }
        }
        let first = if order >= 1 { dim } else { 0 };
        let pair_base = 1 + first;
        let triple_base = pair_base + pairs.len();
        let channels = triple_base + triples.len();

        let mut pair_index = [[usize::MAX; MAX_DIM]; MAX_DIM];
        for (p, &[i, j]) in pairs.iter().enumerate() {
            pair_index[i][j] = pair_base + p;
            pair_index[j][i] = pair_base + p;
        }
        let mut triple_index = [[[usize::MAX; MAX_DIM]; MAX_DIM]; MAX_DIM];
        for (t, &[i, j, k]) in triples.iter().enumerate() {
            for [a, b, c] in [
                [i, j, k],
                [i, k, j],
                [j, i, k],
                [j, k, i],
                [k, i, j],
                [k, j, i],
            ] {
                triple_index[a][b][c] = triple_base + t;
            }
        }

        let mut layout = Layout {
            dim,
            order,
            channels,
            pairs,
            triples,
            pair_base,
            triple_base,
            pair_index,
            triple_index,
            compose_terms: Vec::new(),
            product_terms: Vec::new(),
        };
        layout.compose_terms = layout.build_compose_terms();
        layout.product_terms = layout.build_product_terms();
        layout
    }

    #[inline]
    pub fn first_count(&self) -> usize {
        if self.order >= 1 {
            self.dim
        } else {
            0
        }
    }

    #[inline]
    pub fn pair_channel(&self, i: usize, j: usize) -> usize {
        self.pair_index[i][j]
    }

    #[inline]
    pub fn triple_channel(&self, i: usize, j: usize, k: usize) -> usize {
        self.triple_index[i][j][k]
    }

    fn build_compose_terms(&self) -> Vec<ComposeTerm> {
        let mut terms = Vec::new();
        let t = |out, order, factors: &[usize]| ComposeTerm {
            out,
            order,
            factors: factors.to_vec(),
        };
        for i in 0..self.first_count() {
            terms.push(t(1 + i, 1, &[1 + i]));
        }
        for &[i, j] in &self.pairs {
            let out = self.pair_channel(i, j);
            terms.push(t(out, 2, &[1 + i, 1 + j]));
            terms.push(t(out, 1, &[out]));
        }
        for &[i, j, k] in &self.triples {
            let out = self.triple_channel(i, j, k);
            terms.push(t(out, 3, &[1 + i, 1 + j, 1 + k]));
            terms.push(t(out, 2, &[self.pair_channel(i, j), 1 + k]));
            terms.push(t(out, 2, &[self.pair_channel(i, k), 1 + j]));
            terms.push(t(out, 2, &[self.pair_channel(j, k), 1 + i]));
            terms.push(t(out, 1, &[out]));
        }
        terms
    }

    fn build_product_terms(&self) -> Vec<(usize, usize, usize)> {
        let mut terms = vec![(0, 0, 0)];
        for i in 0..self.first_count() {
            terms.push((1 + i, 1 + i, 0));
            terms.push((1 + i, 0, 1 + i));
        }
        for &[i, j] in &self.pairs {
            let out = self.pair_channel(i, j);
            terms.push((out, out, 0));
            terms.push((out, 1 + i, 1 + j));
            terms.push((out, 1 + j, 1 + i));
            terms.push((out, 0, out));
        }
        for &[i, j, k] in &self.triples {
            let out = self.triple_channel(i, j, k);
            let (ij, ik, jk) = (
                self.pair_channel(i, j),
                self.pair_channel(i, k),
                self.pair_channel(j, k),
            );
            terms.push((out, out, 0));
            terms.push((out, ij, 1 + k));
            terms.push((out, ik, 1 + j));
            terms.push((out, jk, 1 + i));
            terms.push((out, 1 + i, jk));
            terms.push((out, 1 + j, ik));
            terms.push((out, 1 + k, ij));
            terms.push((out, 0, out));
        }
        terms
    }

    /// `a = g ∘ z` on unique channels; `g[s]` is the `s`-th derivative of the
    /// outer function at `z[0]`.
    #[inline]
    pub(crate) fn compose_forward(&self, g: &[f64], z: &[f64], a: &mut [f64]) {
        a[..self.channels].fill(0.0);
        a[0] = g[0];
        for term in &self.compose_terms {
            let mut v = g[term.order];
            for &f in &term.factors {
                v *= z[f];
            }
            a[term.out] += v;
        }
    }

    /// Adjoint of [`Layout::compose_forward`]: accumulates into `zbar` given
    /// the output seed `abar`. `g` must carry one derivative more than the
    /// forward pass used.
    #[inline]
    pub(crate) fn compose_backward(&self, g: &[f64], z: &[f64], abar: &[f64], zbar: &mut [f64]) {
        let mut value_bar = abar[0] * g[1];
        for term in &self.compose_terms {
            let seed = abar[term.out];
            if seed == 0.0 {
                continue;
            }
            let mut prod = 1.0;
            for &f in &term.factors {
                prod *= z[f];
            }
            value_bar += seed * g[term.order + 1] * prod;
            let coef = seed * g[term.order];
            for (n, &f) in term.factors.iter().enumerate() {
                let mut others = coef;
                for (m, &h) in term.factors.iter().enumerate() {
                    if m != n {
                        others *= z[h];
                    }
                }
                zbar[f] += others;
            }
        }
        zbar[0] += value_bar;
    }

    /// Leibniz product `p = u · v` on unique channels.
    #[inline]
    pub(crate) fn product_forward(&self, u: &[f64], v: &[f64], p: &mut [f64]) {
        p[..self.channels].fill(0.0);
        for &(out, a, b) in &self.product_terms {
            p[out] += u[a] * v[b];
        }
    }

    /// Adjoint of [`Layout::product_forward`] with respect to `u` (with `v`
    /// held fixed).
    #[inline]
    pub(crate) fn product_backward_u(&self, v: &[f64], pbar: &[f64], ubar: &mut [f64]) {
        for &(out, a, b) in &self.product_terms {
            ubar[a] += pbar[out] * v[b];
        }
    }
}

/// Input point, padded to [`MAX_DIM`] coordinates.
pub type Point = [f64; MAX_DIM];

/// Points are propagated in blocks of this size so the per-layer matrices
/// stay cache resident.
const BLOCK: usize = 64;

/// Record of one affine layer for a block of points. Matrices are
/// neuron-major: row `r` holds the `points × channels` columns of neuron `r`,
/// column `p·channels + c` being channel `c` of point `p`.
#[derive(Debug, Clone)]
struct LayerRecord {
    input: Vec<f64>,
    /// Pre-activations; empty for the output layer.
    pre: Vec<f64>,
    /// `[σ, σ', σ'', σ''', σ'''']` per (neuron, point), neuron-major.
    sigma: Vec<[f64; 5]>,
}

#[derive(Debug, Clone)]
struct BlockTape {
    points: usize,
    layers: Vec<LayerRecord>,
    /// Channels of the raw output before the wrapper, point-major.
    raw: Vec<f64>,
    /// Channels of the wrapper function, point-major.
    wrap: Option<Vec<f64>>,
}

/// Recorded forward evaluation at a batch of points, sufficient to compute
/// parameter gradients of any scalar that is a differentiable function of
/// the jets.
#[derive(Debug, Clone)]
pub struct BatchTape<'a> {
    network: &'a Network,
    points: Vec<Point>,
    order: usize,
    blocks: Vec<BlockTape>,
    jets: Vec<Jet3>,
}

impl<'a> BatchTape<'a> {
    pub fn jets(&self) -> &[Jet3] {
        &self.jets
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Re-runs the recorded evaluation from scratch.
    pub fn replay(&self) -> Vec<Jet3> {
        forward_batch_order(self.network, &self.points, self.order)
    }
}

/// Tape of a single-point evaluation.
#[derive(Debug, Clone)]
pub struct ParamTape<'a>(BatchTape<'a>);

impl<'a> ParamTape<'a> {
    pub fn jet(&self) -> &Jet3 {
        &self.0.jets[0]
    }

    pub fn point(&self) -> Point {
        self.0.points[0]
    }

    pub fn order(&self) -> usize {
        self.0.order
    }

    /// Re-runs the recorded evaluation from scratch.
    pub fn replay(&self) -> Jet3 {
        self.0.replay()[0]
    }
}

fn check_point(network: &Network, x: &[f64]) -> Result<Point> {
    let dim = network.arch().input_dim();
    if x.len() != dim {
        return Err(Error::DimensionMismatch {
            what: "network input",
            expected: dim,
            got: x.len(),
        });
    }
    let mut p = [0.0; MAX_DIM];
    p[..dim].copy_from_slice(x);
    Ok(p)
}

/// Value and exact input derivatives up to order 3 of the network at `x`.
pub fn forward_jet(network: &Network, x: &[f64]) -> Result<Jet3> {
    forward_jet_order(network, x, MAX_ORDER)
}

/// Like [`forward_jet`] but only propagates derivatives up to `order`; higher
/// channels of the result are zero.
pub fn forward_jet_order(network: &Network, x: &[f64], order: usize) -> Result<Jet3> {
    let p = check_point(network, x)?;
    Ok(forward_batch_order(network, &[p], order)[0])
}

/// [`forward_jet`] plus the tape needed for [`param_gradient`].
pub fn forward_jet_taped<'a>(network: &'a Network, x: &[f64]) -> Result<(Jet3, ParamTape<'a>)> {
    forward_jet_taped_order(network, x, MAX_ORDER)
}

pub fn forward_jet_taped_order<'a>(
    network: &'a Network,
    x: &[f64],
    order: usize,
) -> Result<(Jet3, ParamTape<'a>)> {
    let p = check_point(network, x)?;
    let tape = forward_batch_taped(network, &[p], order);
    Ok((tape.jets[0], ParamTape(tape)))
}

/// Jets at many points (coordinates beyond the input width are ignored).
pub fn forward_batch_order(network: &Network, points: &[Point], order: usize) -> Vec<Jet3> {
    let order = order.min(MAX_ORDER);
    let mut jets = Vec::with_capacity(points.len());
    for block in points.chunks(BLOCK) {
        jets.extend(forward_block(network, block, order, false).0);
    }
    jets
}

/// Batched evaluation with a tape for [`accumulate_batch_gradient`].
pub fn forward_batch_taped<'a>(network: &'a Network, points: &[Point], order: usize) -> BatchTape<'a> {
    let order = order.min(MAX_ORDER);
    let mut jets = Vec::with_capacity(points.len());
    let mut blocks = Vec::with_capacity(points.len().div_ceil(BLOCK));
    for block in points.chunks(BLOCK) {
        let (j, tape) = forward_block(network, block, order, true);
        jets.extend(j);
        blocks.push(tape.expect("taped block"));
    }
    BatchTape {
        network,
        points: points.to_vec(),
        order,
        blocks,
        jets,
    }
}

/// Unique channels of the wrapper `1 - x_0²`.
fn wrapper_channels(layout: &Layout, x: &Point, w: &mut [f64]) {
    w.fill(0.0);
    w[0] = 1.0 - x[0] * x[0];
    if layout.order >= 1 {
        w[1] = -2.0 * x[0];
    }
    if layout.order >= 2 {
        w[layout.pair_channel(0, 0)] = -2.0;
    }
}

fn forward_block(
    network: &Network,
    points: &[Point],
    order: usize,
    record: bool,
) -> (Vec<Jet3>, Option<BlockTape>) {
    let arch = network.arch();
    let dim = arch.input_dim();
    let layout = Layout::get(dim, order);
    let nc = layout.channels;
    let np = points.len();
    let q = np * nc;
    let widths = arch.widths();
    let n_layers = widths.len() - 1;

    // Input rows: value x_m, first-derivative channel i is δ_mi.
    let mut act = vec![0.0; dim * q];
    for m in 0..dim {
        let row = &mut act[m * q..(m + 1) * q];
        for (p, x) in points.iter().enumerate() {
            row[p * nc] = x[m];
            if order >= 1 {
                row[p * nc + 1 + m] = 1.0;
            }
        }
    }

    let mut layers = Vec::with_capacity(if record { n_layers } else { 0 });
    for layer in 1..=n_layers {
        let n_in = widths[layer - 1];
        let n_out = widths[layer];
        let (w, b) = network.layer_params(layer);
        let mut pre = vec![0.0; n_out * q];
        affine_forward(w, b, &act, n_in, n_out, nc, np, &mut pre);

        if layer == n_layers {
            if record {
                layers.push(LayerRecord {
                    input: act,
                    pre: Vec::new(),
                    sigma: Vec::new(),
                });
            }
            act = pre;
            break;
        }

        let mut out = vec![0.0; n_out * q];
        let mut sigma = Vec::with_capacity(if record { n_out * np } else { 0 });
        for r in 0..n_out {
            for p in 0..np {
                let cols = r * q + p * nc..r * q + (p + 1) * nc;
                let s = tanh_derivatives(pre[cols.start]);
                layout.compose_forward(&s, &pre[cols.clone()], &mut out[cols]);
                if record {
                    sigma.push(s);
                }
            }
        }
        if arch.residual() && layer == 1 {
            // identity skip 1·x into the second layer's input
            for r in 0..n_out {
                for (p, x) in points.iter().enumerate() {
                    out[r * q + p * nc] += x[0];
                    if order >= 1 {
                        out[r * q + p * nc + 1] += 1.0;
                    }
                }
            }
        }
        if record {
            layers.push(LayerRecord {
                input: act,
                pre,
                sigma,
            });
        }
        act = out;
    }

    let raw = act;
    let wrap = match arch.wrapper() {
        Wrapper::None => None,
        Wrapper::DirichletZero => {
            let mut w = vec![0.0; q];
            for (p, x) in points.iter().enumerate() {
                wrapper_channels(layout, x, &mut w[p * nc..(p + 1) * nc]);
            }
            Some(w)
        }
    };
    let mut jets = Vec::with_capacity(np);
    let mut prod = vec![0.0; nc];
    for p in 0..np {
        let u = &raw[p * nc..(p + 1) * nc];
        let jet = match &wrap {
            Some(w) => {
                layout.product_forward(u, &w[p * nc..(p + 1) * nc], &mut prod);
                Jet3::from_channels(layout, &prod)
            }
            None => Jet3::from_channels(layout, u),
        };
        jets.push(jet);
    }
    let tape = record.then(|| BlockTape {
        points: np,
        layers,
        raw,
        wrap,
    });
    (jets, tape)
}

/// `out[r] = Σ_k W[r][k] in[k] (+ b[r] on value columns)` over all columns,
/// with column-major `W`. Each entry accumulates in increasing `k`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn affine_forward(
    w: &[f64],
    b: &[f64],
    input: &[f64],
    n_in: usize,
    n_out: usize,
    nc: usize,
    np: usize,
    out: &mut [f64],
) {
    let q = nc * np;
    for r in 0..n_out {
        let row = &mut out[r * q..(r + 1) * q];
        for p in 0..np {
            row[p * nc] = b[r];
        }
        for k in 0..n_in {
            axpy(w[k * n_out + r], &input[k * q..(k + 1) * q], row);
        }
    }
}

/// Gradient with respect to the network parameters of
/// `S = Σ channel · cotangent`, where `cotangents` is a dense seed shaped like
/// the jet (redundant symmetric entries each contribute).
pub fn param_gradient(tape: &ParamTape<'_>, cotangents: &Jet3) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; tape.0.network.params().len()];
    accumulate_param_gradient(tape, cotangents, &mut grad)?;
    Ok(grad)
}

/// Adds the parameter gradient of `Σ channel · cotangent` into `grad`.
pub fn accumulate_param_gradient(
    tape: &ParamTape<'_>,
    cotangents: &Jet3,
    grad: &mut [f64],
) -> Result<()> {
    accumulate_batch_gradient(&tape.0, std::slice::from_ref(cotangents), grad)
}

/// Adds the parameter gradient of `Σ_p Σ channel_p · cotangent_p` into
/// `grad`, one cotangent per taped point.
pub fn accumulate_batch_gradient(
    tape: &BatchTape<'_>,
    cotangents: &[Jet3],
    grad: &mut [f64],
) -> Result<()> {
    let network = tape.network;
    let dim = network.arch().input_dim();
    if cotangents.len() != tape.points.len() {
        return Err(Error::DimensionMismatch {
            what: "cotangent count",
            expected: tape.points.len(),
            got: cotangents.len(),
        });
    }
    if let Some(bad) = cotangents.iter().find(|c| c.dim != dim) {
        return Err(Error::DimensionMismatch {
            what: "cotangent jet",
            expected: dim,
            got: bad.dim,
        });
    }
    if grad.len() != network.params().len() {
        return Err(Error::DimensionMismatch {
            what: "gradient buffer",
            expected: network.params().len(),
            got: grad.len(),
        });
    }
    let layout = Layout::get(dim, tape.order);
    let mut start = 0;
    for block in &tape.blocks {
        let cots = &cotangents[start..start + block.points];
        start += block.points;
        if cots.iter().all(|c| *c == Jet3::zero(dim)) {
            continue;
        }
        backward_block(network, block, layout, cots, grad);
    }
    Ok(())
}

fn backward_block(
    network: &Network,
    tape: &BlockTape,
    layout: &Layout,
    cots: &[Jet3],
    grad: &mut [f64],
) {
    let widths = network.arch().widths();
    let n_layers = widths.len() - 1;
    let nc = layout.channels;
    let np = tape.points;
    let q = np * nc;

    let mut gbar = vec![0.0; q];
    for (p, cot) in cots.iter().enumerate() {
        let seed = cot.seed_channels(layout);
        let slot = &mut gbar[p * nc..(p + 1) * nc];
        match &tape.wrap {
            Some(w) => layout.product_backward_u(&w[p * nc..(p + 1) * nc], &seed, slot),
            None => slot.copy_from_slice(&seed),
        }
    }
    debug_assert_eq!(tape.raw.len(), q);

    for layer in (1..=n_layers).rev() {
        let n_in = widths[layer - 1];
        let n_out = widths[layer];
        let rec = &tape.layers[layer - 1];
        let (w_off, b_off) = network.layer_offsets(layer);

        for r in 0..n_out {
            let row = &gbar[r * q..(r + 1) * q];
            let mut s = 0.0;
            for p in 0..np {
                s += row[p * nc];
            }
            grad[b_off + r] += s;
            for k in 0..n_in {
                grad[w_off + k * n_out + r] += dot(row, &rec.input[k * q..(k + 1) * q]);
            }
        }
        if layer == 1 {
            break;
        }

        // seed on this layer's input activations
        let (w, _) = network.layer_params(layer);
        let mut abar = vec![0.0; n_in * q];
        for k in 0..n_in {
            let row = &mut abar[k * q..(k + 1) * q];
            for r in 0..n_out {
                axpy(w[k * n_out + r], &gbar[r * q..(r + 1) * q], row);
            }
        }

        // through tanh of the previous layer (the residual skip adds a
        // parameter-free constant, so its seed needs no correction)
        let prev = &tape.layers[layer - 2];
        let mut zbar = vec![0.0; n_in * q];
        for k in 0..n_in {
            for p in 0..np {
                let cols = k * q + p * nc..k * q + (p + 1) * nc;
                layout.compose_backward(
                    &prev.sigma[k * np + p],
                    &prev.pre[cols.clone()],
                    &abar[cols.clone()],
                    &mut zbar[cols],
                );
            }
        }
        gbar = zbar;
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    if a == 0.0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx512f") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { axpy_avx512(a, x, y) };
    }
    axpy_plain(a, x, y)
}

#[inline(always)]
fn axpy_plain(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

// Wider registers only; without FMA the rounding is identical to the plain
// loop.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
fn axpy_avx512(a: f64, x: &[f64], y: &mut [f64]) {
    axpy_plain(a, x, y)
}

/// Dot product with eight interleaved partial sums combined in a fixed
/// order, so results are reproducible and the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx512f") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { dot_avx512(a, b) };
    }
    dot_plain(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
fn dot_avx512(a: &[f64], b: &[f64]) -> f64 {
    dot_plain(a, b)
}

#[inline(always)]
fn dot_plain(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let mut acc = [0.0; 8];
    let chunks = n / 8;
    for i in 0..chunks {
        let (x, y) = (&a[8 * i..8 * i + 8], &b[8 * i..8 * i + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for i in 8 * chunks..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

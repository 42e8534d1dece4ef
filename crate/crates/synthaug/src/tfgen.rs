//! Explicit-weight transformer that reads seed pairs in context and emits
//! token logits matching the latent world that produced them.
//!
//! Token columns are laid out as
//! `(payload: r, blocks: r * M, slots: M, positional: 4)` where `M` is the
//! number of candidate functions. The stack has `L0 + 9` layers:
//!
//! 1. `L0` FFN layers evaluate every candidate function into the blocks of
//!    every column, then one attention layer overwrites the blocks of `Y`
//!    columns with the subject vectors.
//! 2. One attention layer writes `<u_Y, f_j(u_X)>` into the slots of each
//!    `X` column and `<u_X, z_j>` into the slots of each `Y` column.
//! 3. An FFN marks generated columns in the third positional coordinate and
//!    an attention layer replaces every column's slots by the sum over the
//!    seed columns of the same kind.
//! 4. A 5-layer selection block turns the slot scores into weights on the
//!    near-maximal candidates and writes the weighted block into the payload.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{
    dot, joint_table, kl, norm, relu, sample_seed_data, sample_world_filtered, softmax, token_logits, Bundle,
    JointTable, LatentWorld, Mat, WorldConfig,
};
use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, stream};

/// Columns of real vectors, stored column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub dim: usize,
    /// Number of seed pairs `n`; the third positional coordinate holds `2n`.
    pub n_seed: usize,
    pub data: Vec<f64>,
}

impl TokenMatrix {
    pub fn zeros(dim: usize, cols: usize, n_seed: usize) -> Self {
        Self {
            dim,
            n_seed,
            data: vec![0.0; dim * cols],
        }
    }

    pub fn n_cols(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn col(&self, s: usize) -> &[f64] {
        &self.data[s * self.dim..(s + 1) * self.dim]
    }

    pub fn col_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.data[s * self.dim..(s + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.col(self.n_cols() - 1)
    }
}

/// Coordinate map of a token column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub r: usize,
    pub m: usize,
}

impl Layout {
    pub fn dim(&self) -> usize {
        self.r + self.r * self.m + self.m + 4
    }

    pub fn payload(&self, i: usize) -> usize {
        i
    }

    pub fn block(&self, j: usize, i: usize) -> usize {
        self.r * (1 + j) + i
    }

    pub fn slot(&self, j: usize) -> usize {
        self.r * (1 + self.m) + j
    }

    /// Positional coordinate `k` in `0..4`.
    pub fn pos(&self, k: usize) -> usize {
        self.r * (1 + self.m) + self.m + k
    }

    pub fn one(&self) -> usize {
        self.pos(3)
    }
}

/// Positional encoding of 1-based position `s` with `n` seed pairs.
/// `X` columns (odd `s`) carry 0 in the second coordinate, `Y` columns 1.
pub fn positional(s: usize, n: usize) -> [f64; 4] {
    [s.div_ceil(2) as f64, ((s + 1) % 2) as f64, (2 * n) as f64, 1.0]
}

fn token_column(layout: &Layout, u: &[f64], s: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; layout.dim()];
    c[..layout.r].copy_from_slice(u);
    for (k, p) in positional(s, n).into_iter().enumerate() {
        c[layout.pos(k)] = p;
    }
    c
}

pub fn layout_of(world: &LatentWorld) -> Layout {
    Layout {
        r: world.r,
        m: world.n_functions(),
    }
}

/// Columns `(X_1, Y_1, ..., X_n, Y_n)` with zero scratch space.
pub fn encode_tokens(pairs: &[(usize, usize)], world: &LatentWorld) -> Result<TokenMatrix> {
    let layout = layout_of(world);
    let n = pairs.len();
    let mut h = TokenMatrix::zeros(layout.dim(), 0, n);
    for (i, &(x, y)) in pairs.iter().enumerate() {
        if x >= world.d || y >= world.d {
            return invalid(format!("token id out of range in pair {i}: ({x}, {y}) with d = {}", world.d));
        }
        h.data.extend(token_column(&layout, world.u.row(x), 2 * i + 1, n));
        h.data.extend(token_column(&layout, world.u.row(y), 2 * i + 2, n));
    }
    Ok(h)
}

/// Append a generated token `x` at the next position.
pub fn append_token(h: &mut TokenMatrix, x: usize, world: &LatentWorld) -> Result<()> {
    if x >= world.d {
        return invalid(format!("token id {x} out of range (d = {})", world.d));
    }
    let layout = layout_of(world);
    if layout.dim() != h.dim {
        return invalid("token matrix does not match the world layout");
    }
    let s = h.n_cols() + 1;
    h.data.extend(token_column(&layout, world.u.row(x), s, h.n_seed));
    Ok(())
}

/// `x * 1{s = t}` built from four ReLUs; valid for `|x| <= b`.
pub fn phi_gate(x: f64, s: i64, t: i64, b: f64) -> Result<f64> {
    if !(b > 0.0) || x.abs() > b {
        return Err(Error::Contract(format!("phi gate needs |x| <= B, got x = {x}, B = {b}")));
    }
    let y = x / (4.0 * b) + (t - s) as f64;
    Ok(-4.0 * b * relu(y + 0.5) + 8.0 * b * relu(y + 0.25) - 8.0 * b * relu(y - 0.25) + 4.0 * b * relu(y - 0.5))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
}

/// `h -> h + W2 relu(W1 h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnLayer {
    pub w1: Mat,
    pub w2: Mat,
}

impl FfnLayer {
    pub fn identity(dim: usize) -> Self {
        Self {
            w1: Mat::zeros(0, dim),
            w2: Mat::zeros(dim, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub heads: Vec<AttentionHead>,
    pub ffn: FfnLayer,
}

/// Where the generator keeps its intermediate results.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub layout: Layout,
    pub l0: usize,
    pub omega: f64,
}

impl GeneratorInfo {
    /// Number of layers after which Steps 1 to 4 are complete.
    pub fn step_ends(&self) -> [usize; 4] {
        [self.l0 + 1, self.l0 + 2, self.l0 + 4, self.l0 + 9]
    }

    /// Layers after which the slots hold the selection weights.
    pub fn weights_ready(&self) -> usize {
        self.l0 + 7
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerStack {
    pub dim: usize,
    pub layers: Vec<Layer>,
    pub generator: Option<GeneratorInfo>,
}

fn check_head(dim: usize, h: &AttentionHead) -> Result<()> {
    for m in [&h.q, &h.k, &h.v] {
        if m.rows != dim || m.cols != dim {
            return invalid(format!("head matrix is {}x{}, expected {dim}x{dim}", m.rows, m.cols));
        }
    }
    Ok(())
}

/// Sparse view of a matrix: the rows that are not identically zero.
struct ActiveRows {
    rows: Vec<(usize, Vec<(usize, f64)>)>,
}

impl ActiveRows {
    fn new(m: &Mat, keep: impl Fn(usize) -> bool) -> Self {
        let rows = (0..m.rows)
            .filter(|&i| keep(i))
            .filter_map(|i| {
                let nz: Vec<(usize, f64)> = m.row(i).iter().copied().enumerate().filter(|&(_, v)| v != 0.0).collect();
                (!nz.is_empty()).then_some((i, nz))
            })
            .collect();
        Self { rows }
    }

    fn apply(&self, h: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.rows.iter().map(|(_, nz)| nz.iter().map(|&(j, v)| v * h[j]).sum::<f64>()));
    }
}

/// `h_s + sum_heads sum_s' relu(<Q h_s, K h_s'>) V h_s'` for every column.
pub fn attention(h: &TokenMatrix, heads: &[AttentionHead]) -> Result<TokenMatrix> {
    let dim = h.dim;
    let n = h.n_cols();
    let mut out = h.clone();
    for head in heads {
        check_head(dim, head)?;
        let q_nonzero = |i: usize| head.q.row(i).iter().any(|&v| v != 0.0);
        let k_nonzero = |i: usize| head.k.row(i).iter().any(|&v| v != 0.0);
        let qa = ActiveRows::new(&head.q, |i| k_nonzero(i));
        let ka = ActiveRows::new(&head.k, |i| q_nonzero(i));
        let va = ActiveRows::new(&head.v, |_| true);
        if qa.rows.is_empty() || va.rows.is_empty() {
            continue;
        }
        debug_assert_eq!(qa.rows.len(), ka.rows.len());
        let width = qa.rows.len();
        let vw = va.rows.len();
        let mut qs = Vec::with_capacity(n * width);
        let mut ks = Vec::with_capacity(n * width);
        let mut vs = Vec::with_capacity(n * vw);
        let mut buf = Vec::new();
        for s in 0..n {
            qa.apply(h.col(s), &mut buf);
            qs.extend_from_slice(&buf);
            ka.apply(h.col(s), &mut buf);
            ks.extend_from_slice(&buf);
            va.apply(h.col(s), &mut buf);
            vs.extend_from_slice(&buf);
        }
        let mut acc = vec![0.0; vw];
        for s in 0..n {
            let q = &qs[s * width..(s + 1) * width];
            acc.iter_mut().for_each(|a| *a = 0.0);
            for t in 0..n {
                let score = dot(q, &ks[t * width..(t + 1) * width]);
                if score > 0.0 {
                    for (a, v) in acc.iter_mut().zip(&vs[t * vw..(t + 1) * vw]) {
                        *a += score * v;
                    }
                }
            }
            let col = out.col_mut(s);
            for ((row, _), a) in va.rows.iter().zip(&acc) {
                col[*row] += a;
            }
        }
    }
    Ok(out)
}

/// `H + W2 relu(W1 H)`.
pub fn ffn(h: &TokenMatrix, layer: &FfnLayer) -> Result<TokenMatrix> {
    if layer.w1.cols != h.dim || layer.w2.rows != h.dim || layer.w1.rows != layer.w2.cols {
        return invalid(format!(
            "ffn shapes W1 {}x{}, W2 {}x{} do not fit dimension {}",
            layer.w1.rows, layer.w1.cols, layer.w2.rows, layer.w2.cols, h.dim
        ));
    }
    let mut out = h.clone();
    if layer.w1.rows == 0 {
        return Ok(out);
    }
    let w1 = ActiveRows::new(&layer.w1, |_| true);
    let w2 = ActiveRows::new(&layer.w2, |_| true);
    let mut hidden = vec![0.0; layer.w1.rows];
    let mut buf = Vec::new();
    for s in 0..h.n_cols() {
        hidden.iter_mut().for_each(|x| *x = 0.0);
        w1.apply(h.col(s), &mut buf);
        for ((i, _), v) in w1.rows.iter().zip(&buf) {
            hidden[*i] = relu(*v);
        }
        w2.apply(&hidden, &mut buf);
        let col = out.col_mut(s);
        for ((i, _), v) in w2.rows.iter().zip(&buf) {
            col[*i] += v;
        }
    }
    Ok(out)
}

pub fn run_layer(h: &TokenMatrix, layer: &Layer) -> Result<TokenMatrix> {
    ffn(&attention(h, &layer.heads)?, &layer.ffn)
}

pub fn run_stack(stack: &TransformerStack, h: &TokenMatrix) -> Result<TokenMatrix> {
    if h.dim != stack.dim {
        return invalid(format!("input dimension {} does not match stack dimension {}", h.dim, stack.dim));
    }
    let mut cur = h.clone();
    for layer in &stack.layers {
        cur = run_layer(&cur, layer)?;
    }
    Ok(cur)
}

/// Output after every layer; element `k` is the matrix after `k + 1` layers.
pub fn run_stack_traced(stack: &TransformerStack, h: &TokenMatrix) -> Result<Vec<TokenMatrix>> {
    if h.dim != stack.dim {
        return invalid(format!("input dimension {} does not match stack dimension {}", h.dim, stack.dim));
    }
    let mut trace = Vec::with_capacity(stack.layers.len());
    let mut cur = h.clone();
    for layer in &stack.layers {
        cur = run_layer(&cur, layer)?;
        trace.push(cur.clone());
    }
    Ok(trace)
}

type Lin = Vec<(usize, f64)>;

fn mat_from_rows(dim: usize, rows: &[Lin]) -> Mat {
    let mut m = Mat::zeros(dim, dim);
    for (i, row) in rows.iter().enumerate() {
        for &(j, v) in row {
            let cur = m.get(i, j);
            m.set(i, j, cur + v);
        }
    }
    m
}

/// The four heads of a gate `sum_s' phi_B(x; s, t') * value(h_s')`.
///
/// `x = sum_k <qx_k h_s, kx_k h_s'>`, `s` is a linear form of the query
/// column, `t` of the key column, and `value` lists `(out, in, coef)`.
fn phi_heads(dim: usize, one: usize, b: f64, x: &[(Lin, Lin)], s: &Lin, t: &Lin, value: &[(usize, usize, f64)]) -> Vec<AttentionHead> {
    const OFFSETS: [f64; 4] = [0.5, 0.25, -0.25, -0.5];
    const COEFS: [f64; 4] = [-4.0, 8.0, -8.0, 4.0];
    OFFSETS
        .iter()
        .zip(COEFS)
        .map(|(&a, c)| {
            let mut q_rows: Vec<Lin> = x
                .iter()
                .map(|(q, _)| q.iter().map(|&(j, v)| (j, v / (4.0 * b))).collect())
                .collect();
            let mut k_rows: Vec<Lin> = x.iter().map(|(_, k)| k.clone()).collect();
            q_rows.push(s.iter().map(|&(j, v)| (j, -v)).collect());
            k_rows.push(vec![(one, 1.0)]);
            q_rows.push(vec![(one, 1.0)]);
            k_rows.push(t.clone());
            q_rows.push(vec![(one, a)]);
            k_rows.push(vec![(one, 1.0)]);
            let mut v = Mat::zeros(dim, dim);
            for &(o, i, coef) in value {
                let cur = v.get(o, i);
                v.set(o, i, cur + c * b * coef);
            }
            AttentionHead {
                q: mat_from_rows(dim, &q_rows),
                k: mat_from_rows(dim, &k_rows),
                v,
            }
        })
        .collect()
}

/// FFN from hidden units, each an input linear form and its output coefficients.
fn ffn_from_units(dim: usize, units: &[(Lin, Lin)]) -> FfnLayer {
    let mut w1 = Mat::zeros(units.len(), dim);
    let mut w2 = Mat::zeros(dim, units.len());
    for (u, (input, output)) in units.iter().enumerate() {
        for &(j, v) in input {
            let cur = w1.get(u, j);
            w1.set(u, j, cur + v);
        }
        for &(i, v) in output {
            let cur = w2.get(i, u);
            w2.set(i, u, cur + v);
        }
    }
    FfnLayer { w1, w2 }
}

/// Units that subtract coordinate `c` from itself: `-relu(h_c) + relu(-h_c)`.
fn erase_units(c: usize) -> [(Lin, Lin); 2] {
    [(vec![(c, 1.0)], vec![(c, -1.0)]), (vec![(c, -1.0)], vec![(c, 1.0)])]
}

fn attn_layer(dim: usize, heads: Vec<AttentionHead>) -> Layer {
    Layer {
        heads,
        ffn: FfnLayer::identity(dim),
    }
}

fn ffn_layer(layer: FfnLayer) -> Layer {
    Layer { heads: Vec::new(), ffn: layer }
}

/// Which end of the score range the selection block favours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Select {
    Min,
    Max,
}

fn self_match(l: &Layout) -> Lin {
    vec![(l.pos(0), 2.0), (l.pos(1), 1.0)]
}

fn selection_block(omega: f64, layout: Layout, select: Select) -> Vec<Layer> {
    let dim = layout.dim();
    let m = layout.m;
    let one = layout.one();
    let slot = |j| layout.slot(j);

    // Layer 1: v1_j = sum_{k != j} relu(v_j - v_k) (or relu(v_k - v_j)).
    let mut units: Vec<(Lin, Lin)> = Vec::new();
    for j in 0..m {
        for k in (0..m).filter(|&k| k != j) {
            let (plus, minus) = match select {
                Select::Min => (j, k),
                Select::Max => (k, j),
            };
            units.push((vec![(slot(plus), 1.0), (slot(minus), -1.0)], vec![(slot(j), 1.0)]));
        }
        units.extend(erase_units(slot(j)));
    }
    let l1 = ffn_from_units(dim, &units);

    // Layer 2: v2_j = relu(1 - v1_j / omega).
    let mut units = Vec::new();
    for j in 0..m {
        units.extend(erase_units(slot(j)));
        units.push((vec![(one, 1.0), (slot(j), -1.0 / omega)], vec![(slot(j), 1.0)]));
    }
    let l2 = ffn_from_units(dim, &units);

    // Layer 3: v3_j = relu(1 - sum_{k<j} v2_k) - relu(1 - sum_{k<=j} v2_k).
    let mut units = Vec::new();
    for j in 0..m {
        units.extend(erase_units(slot(j)));
    }
    for k in 0..=m {
        let mut input = vec![(one, 1.0)];
        input.extend((0..k).map(|i| (slot(i), -1.0)));
        let mut output = Vec::new();
        if k < m {
            output.push((slot(k), 1.0));
        }
        if k > 0 {
            output.push((slot(k - 1), -1.0));
        }
        units.push((input, output));
    }
    let l3 = ffn_from_units(dim, &units);

    // Layer 4: payload <- sum_j v3_j x_j, blocks cleared.
    let sm = self_match(&layout);
    let mut heads = Vec::new();
    for j in 0..m {
        let value: Vec<(usize, usize, f64)> = (0..layout.r).map(|i| (layout.payload(i), layout.block(j, i), 1.0)).collect();
        heads.extend(phi_heads(dim, one, 1.0, &[(vec![(slot(j), 1.0)], vec![(one, 1.0)])], &sm, &sm, &value));
    }
    let clear: Vec<(usize, usize, f64)> = (0..layout.r * (1 + m)).map(|c| (c, c, -1.0)).collect();
    heads.extend(phi_heads(dim, one, 1.0, &[(vec![(one, 1.0)], vec![(one, 1.0)])], &sm, &sm, &clear));

    // Layer 5: clear slots and positional coordinates.
    let mut units = Vec::new();
    for j in 0..m {
        units.extend(erase_units(slot(j)));
    }
    for k in 0..4 {
        units.extend(erase_units(layout.pos(k)));
    }
    let l5 = ffn_from_units(dim, &units);

    vec![
        ffn_layer(l1),
        ffn_layer(l2),
        ffn_layer(l3),
        attn_layer(dim, heads),
        ffn_layer(l5),
    ]
}

/// Five layers that replace the payload of every column by a convex
/// combination of its blocks `x_j` whose scores `v_j` (in the slots) lie
/// within `omega` of the smallest score, and clear everything else.
pub fn build_min_block(omega: f64, m_count: usize, r: usize) -> Result<TransformerStack> {
    build_select_block(omega, m_count, r, Select::Min)
}

/// [`build_min_block`] with a choice of which end of the scores to favour.
pub fn build_select_block(omega: f64, m_count: usize, r: usize, select: Select) -> Result<TransformerStack> {
    if !(omega > 0.0 && omega.is_finite()) {
        return invalid(format!("omega must be positive, got {omega}"));
    }
    if m_count < 2 || r < 1 {
        return invalid(format!("need m_count >= 2 and r >= 1, got {m_count} and {r}"));
    }
    let layout = Layout { r, m: m_count };
    Ok(TransformerStack {
        dim: layout.dim(),
        layers: selection_block(omega, layout, select),
        generator: None,
    })
}

/// Default selection tolerance on the summed-score scale: `log^2 d / sqrt r`.
pub fn default_omega(d: usize, r: usize) -> f64 {
    (d as f64).ln().powi(2) / (r as f64).sqrt()
}

/// Bound on `<block, payload>` over all token columns, with safety factor 2.
fn inner_product_bound(world: &LatentWorld) -> f64 {
    let umax = (0..world.d).map(|x| norm(world.u.row(x))).fold(0.0, f64::max);
    let fmax = (0..world.n_functions())
        .flat_map(|m| world.function_values(m))
        .map(|v| norm(&v))
        .fold(1.0, f64::max);
    (2.0 * umax * fmax).max(1e-12)
}

/// The full generator for `world`; see the module docs for the layer plan.
pub fn build_generator(world: &LatentWorld, omega: f64) -> Result<TransformerStack> {
    if !(omega > 0.0 && omega.is_finite()) {
        return invalid(format!("omega must be positive, got {omega}"));
    }
    if world.n_functions() < world.n_subjects() || world.n_subjects() == 0 {
        return invalid("generator needs at least as many functions as subjects, and one subject");
    }
    let layout = layout_of(world);
    let dim = layout.dim();
    let (r, m, one) = (layout.r, layout.m, layout.one());
    let l0 = world.l0();
    if l0 == 0 || world.functions.iter().any(|f| f.layers.len() != l0) {
        return invalid("all functions need the same positive depth");
    }
    let mut layers = Vec::new();

    // Step 1: blocks <- f_j(payload) by composing the layers in place.
    for k in 0..l0 {
        let mut units = Vec::new();
        for (j, f) in world.functions.iter().enumerate() {
            let g = &f.layers[k];
            if g.w1.cols != r || g.w2.rows != r {
                return invalid("function layers must map R^r to R^r");
            }
            let src = |i: usize| if k == 0 { layout.payload(i) } else { layout.block(j, i) };
            for h in 0..g.w1.rows {
                let input: Lin = (0..r).map(|i| (src(i), g.w1.get(h, i))).collect();
                let output: Lin = (0..r).map(|i| (layout.block(j, i), g.w2.get(i, h))).collect();
                units.push((input, output));
            }
            if k > 0 {
                for i in 0..r {
                    units.extend(erase_units(layout.block(j, i)));
                }
            }
        }
        layers.push(ffn_layer(ffn_from_units(dim, &units)));
    }
    // Y columns: blocks <- z_j (zero past the last subject).
    let sm = self_match(&layout);
    let mut value = Vec::new();
    for j in 0..m {
        for i in 0..r {
            let z = world.subjects.get(j).map_or(0.0, |z| z[i]);
            if z != 0.0 {
                value.push((layout.block(j, i), one, z));
            }
            value.push((layout.block(j, i), layout.block(j, i), -1.0));
        }
    }
    let p2: Lin = vec![(layout.pos(1), 1.0)];
    layers.push(attn_layer(
        dim,
        phi_heads(dim, one, 1.0, &[(p2.clone(), vec![(one, 1.0)])], &sm, &sm, &value),
    ));

    // Step 2: slots <- <block_j(s), payload(partner)>.
    let b = inner_product_bound(world);
    let partner: Lin = vec![(layout.pos(0), 2.0), (one, 1.0), (layout.pos(1), -1.0)];
    let mut heads = Vec::new();
    for j in 0..m {
        let x: Vec<(Lin, Lin)> = (0..r)
            .map(|i| (vec![(layout.block(j, i), 1.0)], vec![(layout.payload(i), 1.0)]))
            .collect();
        heads.extend(phi_heads(dim, one, b, &x, &sm, &partner, &[(layout.slot(j), one, 1.0)]));
    }
    layers.push(attn_layer(dim, heads));

    // Step 3: p3 <- p2 + relu(2 p1 - 2n), then slots <- sums over seed columns.
    let p3 = layout.pos(2);
    let units = vec![
        (vec![(layout.pos(1), 1.0)], vec![(p3, 1.0)]),
        (vec![(p3, 1.0)], vec![(p3, -1.0)]),
        (vec![(layout.pos(0), 2.0), (p3, -1.0)], vec![(p3, 1.0)]),
    ];
    layers.push(ffn_layer(ffn_from_units(dim, &units)));
    let unit_x = [(vec![(one, 1.0)], vec![(one, 1.0)])];
    let gather: Vec<(usize, usize, f64)> = (0..m).map(|j| (layout.slot(j), layout.slot(j), 1.0)).collect();
    let drop: Vec<(usize, usize, f64)> = (0..m).map(|j| (layout.slot(j), layout.slot(j), -1.0)).collect();
    let mut heads = phi_heads(dim, one, 1.0, &unit_x, &p2, &vec![(p3, 1.0)], &gather);
    heads.extend(phi_heads(dim, one, 1.0, &unit_x, &sm, &sm, &drop));
    layers.push(attn_layer(dim, heads));

    // Step 4: select near-maximal scores.
    layers.extend(selection_block(omega, layout, Select::Max));

    Ok(TransformerStack {
        dim,
        layers,
        generator: Some(GeneratorInfo { layout, l0, omega }),
    })
}

/// Autoregressively sample `steps` pairs, returning them with the extended matrix.
pub fn decode<R: Rng + ?Sized>(
    stack: &TransformerStack,
    h: &TokenMatrix,
    world: &LatentWorld,
    tau: f64,
    rng: &mut R,
    steps: usize,
) -> Result<(Vec<(usize, usize)>, TokenMatrix)> {
    if !(tau > 0.0) {
        return invalid(format!("tau must be positive, got {tau}"));
    }
    let mut cur = h.clone();
    let mut drawn = Vec::with_capacity(2 * steps);
    for _ in 0..2 * steps {
        let out = run_stack(stack, &cur)?;
        let probs = softmax(&token_logits(&world.u, &out.last()[..world.r], tau));
        let x = rand::distr::weighted::WeightedIndex::new(&probs)
            .map_err(|e| Error::Consistency(e.to_string()))?;
        let tok = rand::distr::Distribution::sample(&x, rng);
        append_token(&mut cur, tok, world)?;
        drawn.push(tok);
    }
    Ok((drawn.chunks(2).map(|c| (c[0], c[1])).collect(), cur))
}

/// Exact law of one generated pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedLaw {
    pub table: JointTable,
    /// Selection weights over candidate subjects (slot `j` holds `z_j`).
    pub subject_weights: Vec<f64>,
    /// Selection weights over candidate functions.
    pub function_weights: Vec<f64>,
}

const CONSISTENCY_TOL: f64 = 1e-9;
// Fractional weights from near-tied scores amplify roundoff in long contexts.
const STEP_DRIFT_TOL: f64 = 1e-6;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

/// The joint law of `(X~_s, Y~_s)` computed from two softmaxes.
///
/// Runs the stack with 0 to 3 generated tokens appended, reads the selection
/// weights at the last column, and checks that the output is the weighted
/// candidate and that the weights do not change between steps.
pub fn generated_distribution(
    stack: &TransformerStack,
    h_n: &TokenMatrix,
    world: &LatentWorld,
    tau: f64,
) -> Result<GeneratedLaw> {
    let info = stack
        .generator
        .ok_or_else(|| Error::InvalidArgument("stack is not a generator".into()))?;
    if !(tau > 0.0) {
        return invalid(format!("tau must be positive, got {tau}"));
    }
    if h_n.n_cols() == 0 || h_n.n_cols() != 2 * h_n.n_seed {
        return invalid("seed matrix must hold exactly the seed pairs");
    }
    let layout = info.layout;
    let r = layout.r;
    let weights_at = |h: &TokenMatrix| -> Result<(Vec<f64>, Vec<f64>)> {
        let trace = run_stack_traced(stack, h)?;
        let w: Vec<f64> = (0..layout.m).map(|j| trace[info.weights_ready() - 1].last()[layout.slot(j)]).collect();
        let out = trace.last().expect("non-empty stack").last()[..r].to_vec();
        Ok((w, out))
    };
    let candidate = |w: &[f64], blocks: &dyn Fn(usize) -> Vec<f64>| -> Vec<f64> {
        let mut v = vec![0.0; r];
        for (j, wj) in w.iter().enumerate() {
            for (a, b) in v.iter_mut().zip(blocks(j)) {
                *a += wj * b;
            }
        }
        v
    };
    let subject = |j: usize| world.subjects.get(j).cloned().unwrap_or_else(|| vec![0.0; r]);

    // Step s = 1: subject output, then a probe X token.
    let (wz, z_hat) = weights_at(h_n)?;
    if !close(&z_hat, &candidate(&wz, &subject), CONSISTENCY_TOL) {
        return Err(Error::Consistency("subject output is not the weighted subject".into()));
    }
    let probe_x = 0;
    let mut h1 = h_n.clone();
    append_token(&mut h1, probe_x, world)?;
    let (wf, f_hat) = weights_at(&h1)?;
    let u_probe = world.u.row(probe_x);
    if !close(&f_hat, &candidate(&wf, &|j| world.functions[j].eval(u_probe)), CONSISTENCY_TOL) {
        return Err(Error::Consistency("function output is not the weighted function".into()));
    }
    // Step s = 2 must select the same candidates.
    let mut h2 = h1.clone();
    append_token(&mut h2, 0, world)?;
    let (wz2, _) = weights_at(&h2)?;
    let mut h3 = h2.clone();
    append_token(&mut h3, probe_x, world)?;
    let (wf2, _) = weights_at(&h3)?;
    if !close(&wz, &wz2, STEP_DRIFT_TOL) || !close(&wf, &wf2, STEP_DRIFT_TOL) {
        return Err(Error::Consistency(format!(
            "generated law differs between steps: subject {wz:?} vs {wz2:?}, function {wf:?} vs {wf2:?}"
        )));
    }
    let xl = token_logits(&world.u, &z_hat, tau);
    let values: Vec<Vec<Vec<f64>>> = (0..world.n_functions()).map(|j| world.function_values(j)).collect();
    let table = JointTable::from_logits(&xl, |x| {
        let fx = candidate(&wf, &|j| values[j][x].clone());
        token_logits(&world.u, &fx, tau)
    });
    Ok(GeneratedLaw {
        table,
        subject_weights: wz,
        function_weights: wf,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlExperimentConfig {
    pub world: WorldConfig,
    pub min_subject_margin: f64,
    pub min_function_margin: f64,
    #[serde(default = "default_tries")]
    pub max_world_tries: usize,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    /// Sampling temperature; defaults to the world temperature.
    #[serde(default)]
    pub tau: Option<f64>,
    /// Selection tolerance; defaults to [`default_omega`].
    #[serde(default)]
    pub omega: Option<f64>,
}

fn default_tries() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlRecord {
    pub n: usize,
    pub replicate: usize,
    pub kl: f64,
    pub subject_recovered: bool,
    pub function_recovered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlSummary {
    pub n: usize,
    pub mean_kl: f64,
    pub std_kl: f64,
    pub recovery_rate: f64,
}

const RECOVERED: f64 = 1.0 - 1e-9;

fn kl_replicate(cfg: &KlExperimentConfig, rep: usize, seed: u64) -> Result<Vec<KlRecord>> {
    let world_seed = derive_seed(seed, &[rep as u64, 1]);
    let (world, _) = if cfg.min_subject_margin > f64::NEG_INFINITY || cfg.min_function_margin > f64::NEG_INFINITY {
        sample_world_filtered(
            &cfg.world,
            cfg.min_subject_margin,
            cfg.min_function_margin,
            cfg.max_world_tries,
            world_seed,
        )?
    } else {
        (crate::dgp::sample_world(&cfg.world, world_seed)?, 1)
    };
    let mut rng = stream(seed, &[rep as u64, 2]);
    let t = rng.random_range(0..world.n_subjects());
    let m = rng.random_range(0..world.n_functions());
    let n_max = cfg.n_grid.iter().copied().max().unwrap_or(0);
    let seeds = sample_seed_data(&world, t, m, n_max, &mut rng)?;
    let omega = cfg.omega.unwrap_or_else(|| default_omega(world.d, world.r));
    let tau = cfg.tau.unwrap_or(world.eta);
    let stack = build_generator(&world, omega)?;
    let p = joint_table(&world, t, m)?;
    cfg.n_grid
        .iter()
        .map(|&n| {
            let h = encode_tokens(&seeds[..n], &world)?;
            let law = generated_distribution(&stack, &h, &world, tau)?;
            Ok(KlRecord {
                n,
                replicate: rep,
                kl: kl(&p, &law.table)?,
                subject_recovered: law.subject_weights.get(t).is_some_and(|&w| w >= RECOVERED),
                function_recovered: law.function_weights[m] >= RECOVERED,
            })
        })
        .collect()
}

/// For each replicate: draw a margin-filtered world, a subject and a
/// function, and nested seed sets; record `KL(P || Q)` at every `n`.
pub fn kl_decay_experiment(cfg: &KlExperimentConfig, seed: u64) -> Result<Vec<KlRecord>> {
    if cfg.n_grid.is_empty() || cfg.n_grid.contains(&0) {
        return invalid("n grid must be non-empty with positive entries");
    }
    if cfg.replicates == 0 {
        return invalid("need at least one replicate");
    }
    let per_rep: Vec<Result<Vec<KlRecord>>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| kl_replicate(cfg, rep, seed))
        .collect();
    let mut out = Vec::new();
    for r in per_rep {
        out.extend(r?);
    }
    out.sort_by_key(|rec| (rec.n, rec.replicate));
    Ok(out)
}

/// Mean and sample standard deviation of KL, and joint recovery rate, per `n`.
pub fn summarize_kl(records: &[KlRecord]) -> Vec<KlSummary> {
    let mut ns: Vec<usize> = records.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.into_iter()
        .map(|n| {
            let rows: Vec<&KlRecord> = records.iter().filter(|r| r.n == n).collect();
            let k = rows.len() as f64;
            let mean = rows.iter().map(|r| r.kl).sum::<f64>() / k;
            let var = if rows.len() > 1 {
                rows.iter().map(|r| (r.kl - mean).powi(2)).sum::<f64>() / (k - 1.0)
            } else {
                0.0
            };
            let rec = rows.iter().filter(|r| r.subject_recovered && r.function_recovered).count() as f64 / k;
            KlSummary {
                n,
                mean_kl: mean,
                std_kl: var.sqrt(),
                recovery_rate: rec,
            }
        })
        .collect()
}

impl TransformerStack {
    pub fn to_bundle(&self) -> Bundle {
        let mut arrays = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (k, h) in layer.heads.iter().enumerate() {
                arrays.push((format!("L{l}.h{k}.Q"), h.q.clone()));
                arrays.push((format!("L{l}.h{k}.K"), h.k.clone()));
                arrays.push((format!("L{l}.h{k}.V"), h.v.clone()));
            }
            arrays.push((format!("L{l}.W1"), layer.ffn.w1.clone()));
            arrays.push((format!("L{l}.W2"), layer.ffn.w2.clone()));
        }
        Bundle {
            meta: serde_json::json!({
                "kind": "transformer_stack",
                "dim": self.dim,
                "heads": self.layers.iter().map(|l| l.heads.len()).collect::<Vec<_>>(),
                "generator": self.generator,
            }),
            arrays,
        }
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        if b.meta.get("kind").and_then(|k| k.as_str()) != Some("transformer_stack") {
            return invalid("bundle does not hold a transformer stack");
        }
        let dim = b
            .meta
            .get("dim")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::InvalidArgument("bundle meta lacks dim".into()))? as usize;
        let heads: Vec<usize> = serde_json::from_value(b.meta.get("heads").cloned().unwrap_or_default())?;
        let generator: Option<GeneratorInfo> =
            serde_json::from_value(b.meta.get("generator").cloned().unwrap_or_default())?;
        let mut layers = Vec::new();
        for (l, &nh) in heads.iter().enumerate() {
            let mut hs = Vec::new();
            for k in 0..nh {
                hs.push(AttentionHead {
                    q: b.get(&format!("L{l}.h{k}.Q"))?.clone(),
                    k: b.get(&format!("L{l}.h{k}.K"))?.clone(),
                    v: b.get(&format!("L{l}.h{k}.V"))?.clone(),
                });
            }
            layers.push(Layer {
                heads: hs,
                ffn: FfnLayer {
                    w1: b.get(&format!("L{l}.W1"))?.clone(),
                    w2: b.get(&format!("L{l}.W2"))?.clone(),
                },
            });
        }
        let stack = Self { dim, layers, generator };
        for layer in &stack.layers {
            for h in &layer.heads {
                check_head(dim, h)?;
                if !(h.q.is_finite() && h.k.is_finite() && h.v.is_finite()) {
                    return invalid("non-finite head weights");
                }
            }
        }
        Ok(stack)
    }

    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        self.to_bundle().save(stem)
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        Self::from_bundle(&Bundle::load(stem)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{sample_world, BoundDomain};

    fn small_world(seed: u64, m: usize, l0: usize) -> LatentWorld {
        let cfg = WorldConfig {
            d: 6,
            r: 2,
            n_subjects: m.min(2),
            n_functions: m,
            l0,
            r0: 3,
            eta: 0.5,
            bound: BoundDomain::Ball,
        };
        sample_world(&cfg, seed).unwrap()
    }

    #[test]
    fn positional_rows_follow_token_table() {
        let w = small_world(1, 2, 1);
        let h = encode_tokens(&[(0, 1), (2, 3)], &w).unwrap();
        let l = layout_of(&w);
        let row = |k: usize| (0..4).map(|s| h.col(s)[l.pos(k)]).collect::<Vec<_>>();
        assert_eq!(row(0), vec![1.0, 1.0, 2.0, 2.0]);
        assert_eq!(row(1), vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(h.col(0)[..2], *w.u.row(0));
        assert!(h.col(0)[2..l.pos(0)].iter().all(|&v| v == 0.0));
        assert!(encode_tokens(&[(6, 0)], &w).is_err());
    }

    #[test]
    fn phi_gate_identity() {
        assert_eq!(phi_gate(2.0, 3, 3, 4.0).unwrap(), 2.0);
        assert_eq!(phi_gate(2.0, 3, 4, 4.0).unwrap(), 0.0);
        assert!(matches!(phi_gate(5.0, 1, 1, 4.0), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_weights_are_identity() {
        let mut h = TokenMatrix::zeros(3, 2, 1);
        h.data = vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0];
        let head = AttentionHead {
            q: Mat::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0; 3], vec![0.0; 3]]).unwrap(),
            k: Mat::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0; 3], vec![0.0; 3]]).unwrap(),
            v: Mat::zeros(3, 3),
        };
        assert_eq!(attention(&h, &[head]).unwrap(), h);
        let f = FfnLayer {
            w1: Mat::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap(),
            w2: Mat::zeros(3, 1),
        };
        assert_eq!(ffn(&h, &f).unwrap(), h);
    }

    #[test]
    fn two_token_attention_by_hand() {
        // h1 = (1, 2, 0), h2 = (-1, 1, 1); Q = K = I, V copies coordinate 0 into 2.
        let mut h = TokenMatrix::zeros(3, 2, 1);
        h.data = vec![1.0, 2.0, 0.0, -1.0, 1.0, 1.0];
        let id = Mat::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let mut v = Mat::zeros(3, 3);
        v.set(2, 0, 1.0);
        let out = attention(&h, &[AttentionHead { q: id.clone(), k: id, v }]).unwrap();
        // Scores: <h1,h1> = 5, <h1,h2> = 1, <h2,h1> = 1, <h2,h2> = 3.
        assert_eq!(out.col(0), &[1.0, 2.0, 5.0 * 1.0 + 1.0 * -1.0]);
        assert_eq!(out.col(1), &[-1.0, 1.0, 1.0 + 1.0 * 1.0 + 3.0 * -1.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let h = TokenMatrix::zeros(3, 2, 1);
        let bad = FfnLayer {
            w1: Mat::zeros(1, 4),
            w2: Mat::zeros(4, 1),
        };
        assert!(ffn(&h, &bad).is_err());
    }

    fn min_input(layout: Layout, xs: &[Vec<f64>], v: &[f64]) -> TokenMatrix {
        let mut h = TokenMatrix::zeros(layout.dim(), 1, 1);
        let col = h.col_mut(0);
        for (j, x) in xs.iter().enumerate() {
            for (i, &xi) in x.iter().enumerate() {
                col[layout.block(j, i)] = xi;
            }
        }
        for (j, &vj) in v.iter().enumerate() {
            col[layout.slot(j)] = vj;
        }
        for (k, p) in positional(1, 1).into_iter().enumerate() {
            col[layout.pos(k)] = p;
        }
        h
    }

    #[test]
    fn min_block_picks_unique_minimizer() {
        let layout = Layout { r: 2, m: 2 };
        let stack = build_min_block(0.1, 2, 2).unwrap();
        assert_eq!(stack.layers.len(), 5);
        let xs = vec![vec![1.0, 2.0], vec![-3.0, 0.5]];
        let out = run_stack(&stack, &min_input(layout, &xs, &[0.0, 0.9])).unwrap();
        assert_eq!(&out.col(0)[..2], &[1.0, 2.0]);
        assert!(out.col(0)[2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn min_block_tie_is_convex() {
        let layout = Layout { r: 2, m: 2 };
        let stack = build_min_block(0.1, 2, 2).unwrap();
        let xs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let out = run_stack(&stack, &min_input(layout, &xs, &[0.5, 0.5])).unwrap();
        let (a, b) = (out.col(0)[0], out.col(0)[1]);
        assert!(a >= 0.0 && b >= 0.0 && (a + b - 1.0).abs() < 1e-9);
    }

    #[test]
    fn singleton_world_generates_the_truth() {
        let w = small_world(4, 1, 1);
        let stack = build_generator(&w, default_omega(w.d, w.r)).unwrap();
        assert_eq!(stack.layers.len(), w.l0() + 9);
        let mut rng = stream(2, &[]);
        let seeds = sample_seed_data(&w, 0, 0, 5, &mut rng).unwrap();
        let h = encode_tokens(&seeds, &w).unwrap();
        let law = generated_distribution(&stack, &h, &w, w.eta).unwrap();
        let p = joint_table(&w, 0, 0).unwrap();
        assert!(kl(&p, &law.table).unwrap() < 1e-10);
        assert!((law.table.total() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn huge_tau_decodes_uniformly() {
        let w = small_world(5, 2, 1);
        let stack = build_generator(&w, 1.0).unwrap();
        let h = encode_tokens(&[(0, 1), (2, 3)], &w).unwrap();
        let law = generated_distribution(&stack, &h, &w, 1e9).unwrap();
        let u = 1.0 / (w.d * w.d) as f64;
        assert!(law.table.probs.iter().all(|p| (p - u).abs() < 1e-6));
        let mut rng = stream(3, &[]);
        let (pairs, ext) = decode(&stack, &h, &w, 1e9, &mut rng, 2).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(ext.n_cols(), h.n_cols() + 4);
    }

    #[test]
    fn stack_bundle_round_trip() {
        let w = small_world(6, 2, 2);
        let stack = build_generator(&w, 0.7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("stack");
        stack.save(&stem).unwrap();
        assert_eq!(TransformerStack::load(&stem).unwrap(), stack);
    }
}

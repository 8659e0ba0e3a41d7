//! Joint self-attention over a `[prompt; style; output]` token sequence.
//!
//! The three blocks are projected independently and then attended jointly:
//! every query row sees the full concatenated key axis. For the output-query
//! rows the softmax weights are split back into per-branch blocks
//! (`alpha_p`, `alpha_s`, `alpha_o`) so that fusion rules can reweight the
//! branch contributions separately.

use serde::{Deserialize, Serialize};

use crate::dssi::{fuse, AlignmentStrengths, DssiConfig};
use crate::error::{shape_err, Result};
use crate::linalg::{gaussian_matrix, l1, row_softmax, softmax_into, Matrix, SeededRng};
use crate::scalar::Scalar;

/// Token sequence `[x_p; x_s; x_o]` plus the inpainting mask over `x_o`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct TokenBlocks<T> {
    pub prompt: Matrix<T>,
    /// One or more style blocks; they are concatenated in order before attention.
    pub styles: Vec<Matrix<T>>,
    pub output: Matrix<T>,
    /// `true` marks an output row that is to be generated.
    pub mask: Vec<bool>,
}

impl<T: Scalar> TokenBlocks<T> {
    pub fn new(
        prompt: Matrix<T>,
        styles: Vec<Matrix<T>>,
        output: Matrix<T>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let d = prompt.cols();
        if styles.is_empty() {
            return shape_err("at least one style block is required");
        }
        for (k, s) in styles.iter().enumerate() {
            if s.cols() != d {
                return shape_err(format!("style block {k} has width {}, expected {d}", s.cols()));
            }
        }
        if output.cols() != d {
            return shape_err(format!("output block has width {}, expected {d}", output.cols()));
        }
        if mask.len() != output.rows() {
            return shape_err(format!(
                "mask has length {}, output block has {} rows",
                mask.len(),
                output.rows()
            ));
        }
        Ok(Self {
            prompt,
            styles,
            output,
            mask,
        })
    }

    /// Like [`TokenBlocks::new`] but zeroes every masked output row.
    pub fn new_masked(
        prompt: Matrix<T>,
        styles: Vec<Matrix<T>>,
        output: Matrix<T>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let mut blocks = Self::new(prompt, styles, output, mask)?;
        blocks.zero_masked_rows();
        Ok(blocks)
    }

    pub fn zero_masked_rows(&mut self) {
        for (i, &m) in self.mask.iter().enumerate() {
            if m {
                self.output.row_mut(i).fill(T::zero());
            }
        }
    }

    pub fn masked_rows_are_zero(&self) -> bool {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .all(|(i, _)| self.output.row(i).iter().all(|&v| v == T::zero()))
    }

    pub fn width(&self) -> usize {
        self.prompt.cols()
    }

    pub fn n_prompt(&self) -> usize {
        self.prompt.rows()
    }

    pub fn n_style(&self) -> usize {
        self.styles.iter().map(Matrix::rows).sum()
    }

    pub fn n_output(&self) -> usize {
        self.output.rows()
    }

    /// All style blocks stacked into the single style slot.
    pub fn style_concat(&self) -> Matrix<T> {
        let parts: Vec<&Matrix<T>> = self.styles.iter().collect();
        Matrix::vstack(&parts).expect("style widths validated at construction")
    }

    pub fn is_finite(&self) -> bool {
        self.prompt.is_finite() && self.styles.iter().all(Matrix::is_finite) && self.output.is_finite()
    }

    fn with_updates(&self, prompt: Matrix<T>, style: Matrix<T>, output: Matrix<T>) -> Result<Self> {
        let mut styles = Vec::with_capacity(self.styles.len());
        let mut start = 0;
        for s in &self.styles {
            styles.push(style.slice_rows(start, start + s.rows())?);
            start += s.rows();
        }
        Self::new(prompt, styles, output, self.mask.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProjectionRepr<T>", bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct ProjectionWeights<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
}

#[derive(Deserialize)]
#[serde(bound(deserialize = "T: Scalar + Deserialize<'de>"))]
struct ProjectionRepr<T> {
    w_q: Matrix<T>,
    w_k: Matrix<T>,
    w_v: Matrix<T>,
}

impl<T: Scalar> TryFrom<ProjectionRepr<T>> for ProjectionWeights<T> {
    type Error = crate::error::Error;

    fn try_from(r: ProjectionRepr<T>) -> Result<Self> {
        Self::new(r.w_q, r.w_k, r.w_v)
    }
}

impl<T: Scalar> ProjectionWeights<T> {
    pub fn new(w_q: Matrix<T>, w_k: Matrix<T>, w_v: Matrix<T>) -> Result<Self> {
        let d = w_q.rows();
        for (name, w) in [("W_q", &w_q), ("W_k", &w_k), ("W_v", &w_v)] {
            if w.shape() != (d, d) {
                return shape_err(format!("{name} is {}x{}, expected {d}x{d}", w.rows(), w.cols()));
            }
            w.ensure_finite(name)?;
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            w_q: Matrix::identity(d),
            w_k: Matrix::identity(d),
            w_v: Matrix::identity(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }
}

/// Projected queries, keys and values split by block. Multiple style blocks
/// occupy the single `s` slot.
#[derive(Clone, Debug, PartialEq)]
pub struct QkvBlocks<T> {
    pub q_p: Matrix<T>,
    pub q_s: Matrix<T>,
    pub q_o: Matrix<T>,
    pub k_p: Matrix<T>,
    pub k_s: Matrix<T>,
    pub k_o: Matrix<T>,
    pub v_p: Matrix<T>,
    pub v_s: Matrix<T>,
    pub v_o: Matrix<T>,
}

impl<T: Scalar> QkvBlocks<T> {
    pub fn n_p(&self) -> usize {
        self.k_p.rows()
    }

    pub fn n_s(&self) -> usize {
        self.k_s.rows()
    }

    pub fn n_o(&self) -> usize {
        self.k_o.rows()
    }

    pub fn d(&self) -> usize {
        self.q_o.cols()
    }

    pub fn keys(&self) -> Matrix<T> {
        Matrix::vstack(&[&self.k_p, &self.k_s, &self.k_o]).expect("validated widths")
    }

    pub fn values(&self) -> Matrix<T> {
        Matrix::vstack(&[&self.v_p, &self.v_s, &self.v_o]).expect("validated widths")
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        let blocks = [
            ("Q_p", &self.q_p, self.n_p()),
            ("Q_s", &self.q_s, self.n_s()),
            ("Q_o", &self.q_o, self.n_o()),
            ("K_p", &self.k_p, self.n_p()),
            ("K_s", &self.k_s, self.n_s()),
            ("K_o", &self.k_o, self.n_o()),
            ("V_p", &self.v_p, self.n_p()),
            ("V_s", &self.v_s, self.n_s()),
            ("V_o", &self.v_o, self.n_o()),
        ];
        for (name, m, rows) in blocks {
            if m.shape() != (rows, d) {
                return shape_err(format!("{name} is {}x{}, expected {rows}x{d}", m.rows(), m.cols()));
            }
        }
        Ok(())
    }
}

/// Output-query attention: scaled logits over `[p; s; o]` keys and the
/// softmax weights split per branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockAttention<T> {
    pub logits: Matrix<T>,
    pub alpha_p: Matrix<T>,
    pub alpha_s: Matrix<T>,
    pub alpha_o: Matrix<T>,
}

impl<T: Scalar> BlockAttention<T> {
    /// Softmax over the full key axis of `logits`, then split into
    /// `[0, n_p)`, `[n_p, n_p + n_s)` and the remaining output columns.
    pub fn from_logits(logits: Matrix<T>, n_p: usize, n_s: usize) -> Result<Self> {
        if n_p == 0 || n_s == 0 || n_p + n_s >= logits.cols() {
            return shape_err(format!(
                "cannot split {} logit columns into prompt {n_p}, style {n_s} and a non-empty output block",
                logits.cols()
            ));
        }
        let alpha = row_softmax(&logits)?;
        let total = logits.cols();
        Ok(Self {
            alpha_p: alpha.slice_cols(0, n_p)?,
            alpha_s: alpha.slice_cols(n_p, n_p + n_s)?,
            alpha_o: alpha.slice_cols(n_p + n_s, total)?,
            logits,
        })
    }

    pub fn n_p(&self) -> usize {
        self.alpha_p.cols()
    }

    pub fn n_s(&self) -> usize {
        self.alpha_s.cols()
    }

    pub fn n_o(&self) -> usize {
        self.alpha_o.cols()
    }

    pub fn n_queries(&self) -> usize {
        self.alpha_p.rows()
    }

    /// `[alpha_p | alpha_s | alpha_o]`.
    pub fn alpha(&self) -> Matrix<T> {
        let rows = self.n_queries();
        let cols = self.n_p() + self.n_s() + self.n_o();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend_from_slice(self.alpha_p.row(i));
            data.extend_from_slice(self.alpha_s.row(i));
            data.extend_from_slice(self.alpha_o.row(i));
        }
        Matrix::new(rows, cols, data).expect("consistent block shapes")
    }
}

/// `α_b V_b` for each branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchProducts<T> {
    pub prompt: Matrix<T>,
    pub style: Matrix<T>,
    pub output: Matrix<T>,
}

impl<T: Scalar> BranchProducts<T> {
    pub fn new(attn: &BlockAttention<T>, qkv: &QkvBlocks<T>) -> Result<Self> {
        Ok(Self {
            prompt: attn.alpha_p.matmul(&qkv.v_p)?,
            style: attn.alpha_s.matmul(&qkv.v_s)?,
            output: attn.alpha_o.matmul(&qkv.v_o)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DitBlockRepr<T>", bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct DitBlockWeights<T> {
    pub proj: ProjectionWeights<T>,
    /// `d × 4d`
    pub w_mlp1: Matrix<T>,
    /// `4d × d`
    pub w_mlp2: Matrix<T>,
}

#[derive(Deserialize)]
#[serde(bound(deserialize = "T: Scalar + Deserialize<'de>"))]
struct DitBlockRepr<T> {
    proj: ProjectionWeights<T>,
    w_mlp1: Matrix<T>,
    w_mlp2: Matrix<T>,
}

impl<T: Scalar> TryFrom<DitBlockRepr<T>> for DitBlockWeights<T> {
    type Error = crate::error::Error;

    fn try_from(r: DitBlockRepr<T>) -> Result<Self> {
        Self::new(r.proj, r.w_mlp1, r.w_mlp2)
    }
}

impl<T: Scalar> DitBlockWeights<T> {
    pub fn new(proj: ProjectionWeights<T>, w_mlp1: Matrix<T>, w_mlp2: Matrix<T>) -> Result<Self> {
        let d = proj.dim();
        if w_mlp1.rows() != d || w_mlp2.cols() != d || w_mlp1.cols() != w_mlp2.rows() {
            return shape_err(format!(
                "MLP weights {}x{} and {}x{} do not fit width {d}",
                w_mlp1.rows(),
                w_mlp1.cols(),
                w_mlp2.rows(),
                w_mlp2.cols()
            ));
        }
        Ok(Self {
            proj,
            w_mlp1,
            w_mlp2,
        })
    }

    /// Gaussian initialisation with standard deviation `1/√fan_in`; MLP hidden
    /// width is `4d`.
    pub fn random(d: usize, rng: &mut SeededRng) -> Result<Self> {
        let s = 1.0 / (d as f64).sqrt();
        let proj = ProjectionWeights::new(
            gaussian_matrix(d, d, 0.0, s, rng)?,
            gaussian_matrix(d, d, 0.0, s, rng)?,
            gaussian_matrix(d, d, 0.0, s, rng)?,
        )?;
        let w_mlp1 = gaussian_matrix(d, 4 * d, 0.0, s, rng)?;
        let w_mlp2 = gaussian_matrix(4 * d, d, 0.0, 1.0 / ((4 * d) as f64).sqrt(), rng)?;
        Self::new(proj, w_mlp1, w_mlp2)
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            proj: ProjectionWeights {
                w_q: Matrix::zeros(d, d),
                w_k: Matrix::zeros(d, d),
                w_v: Matrix::zeros(d, d),
            },
            w_mlp1: Matrix::zeros(d, 4 * d),
            w_mlp2: Matrix::zeros(4 * d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.dim()
    }
}

/// Projects every block with the shared weights; block order is `[p; s; o]`.
pub fn project_qkv<T: Scalar>(blocks: &TokenBlocks<T>, w: &ProjectionWeights<T>) -> Result<QkvBlocks<T>> {
    if blocks.width() != w.dim() {
        return shape_err(format!(
            "token width {} does not match projection width {}",
            blocks.width(),
            w.dim()
        ));
    }
    let style = blocks.style_concat();
    let proj = |x: &Matrix<T>, m: &Matrix<T>| x.matmul(m);
    Ok(QkvBlocks {
        q_p: proj(&blocks.prompt, &w.w_q)?,
        q_s: proj(&style, &w.w_q)?,
        q_o: proj(&blocks.output, &w.w_q)?,
        k_p: proj(&blocks.prompt, &w.w_k)?,
        k_s: proj(&style, &w.w_k)?,
        k_o: proj(&blocks.output, &w.w_k)?,
        v_p: proj(&blocks.prompt, &w.w_v)?,
        v_s: proj(&style, &w.w_v)?,
        v_o: proj(&blocks.output, &w.w_v)?,
    })
}

fn inv_sqrt_d<T: Scalar>(d: usize) -> T {
    T::one() / T::of(d as f64).sqrt()
}

/// Scaled logits `Q Kᵀ / √d`.
pub fn scaled_logits<T: Scalar>(queries: &Matrix<T>, keys: &Matrix<T>) -> Result<Matrix<T>> {
    let scale = inv_sqrt_d::<T>(queries.cols());
    let mut z = queries.matmul_transposed(keys)?;
    for v in z.data_mut() {
        *v *= scale;
    }
    Ok(z)
}

/// `softmax(Q Kᵀ / √d) V` row by row without materialising the weights.
fn attend<T: Scalar>(queries: &Matrix<T>, keys: &Matrix<T>, values: &Matrix<T>) -> Result<Matrix<T>> {
    let z = scaled_logits(queries, keys)?;
    z.ensure_finite("attention logits")?;
    let mut weights = vec![T::zero(); keys.rows()];
    let mut out = Matrix::zeros(queries.rows(), values.cols());
    for i in 0..queries.rows() {
        softmax_into(z.row(i), &mut weights);
        let row = out.row_mut(i);
        for (w, v) in weights.iter().zip(values.row_iter()) {
            for (o, &x) in row.iter_mut().zip(v) {
                *o += *w * x;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FullAttention<T> {
    pub h_p: Matrix<T>,
    pub h_s: Matrix<T>,
    pub h_o: Matrix<T>,
}

/// Joint attention for all three query blocks over the concatenated keys.
pub fn full_block_attention<T: Scalar>(qkv: &QkvBlocks<T>) -> Result<FullAttention<T>> {
    qkv.validate()?;
    let keys = qkv.keys();
    let values = qkv.values();
    Ok(FullAttention {
        h_p: attend(&qkv.q_p, &keys, &values)?,
        h_s: attend(&qkv.q_s, &keys, &values)?,
        h_o: attend(&qkv.q_o, &keys, &values)?,
    })
}

/// Logits of the output queries against `[K_p; K_s; K_o]`.
pub fn output_logits<T: Scalar>(qkv: &QkvBlocks<T>) -> Result<Matrix<T>> {
    qkv.validate()?;
    scaled_logits(&qkv.q_o, &qkv.keys())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VanillaOutput<T> {
    pub h_o: Matrix<T>,
    pub attn: BlockAttention<T>,
}

/// `h_o = α_p V_p + α_s V_s + α_o V_o`, returned with the branch weights.
pub fn vanilla_output_attention<T: Scalar>(qkv: &QkvBlocks<T>) -> Result<VanillaOutput<T>> {
    let attn = BlockAttention::from_logits(output_logits(qkv)?, qkv.n_p(), qkv.n_s())?;
    let h_o = vanilla_from_attention(&attn, qkv)?;
    Ok(VanillaOutput { h_o, attn })
}

pub fn vanilla_from_attention<T: Scalar>(attn: &BlockAttention<T>, qkv: &QkvBlocks<T>) -> Result<Matrix<T>> {
    let b = BranchProducts::new(attn, qkv)?;
    b.prompt.add(&b.style)?.add(&b.output)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchMasses<T> {
    pub prompt: Vec<T>,
    pub style: Vec<T>,
    pub output: Vec<T>,
}

/// Per output-query row ℓ1 mass of each branch.
pub fn branch_masses<T: Scalar>(attn: &BlockAttention<T>) -> BranchMasses<T> {
    BranchMasses {
        prompt: attn.alpha_p.row_iter().map(l1).collect(),
        style: attn.alpha_s.row_iter().map(l1).collect(),
        output: attn.alpha_o.row_iter().map(l1).collect(),
    }
}

/// Everything one block computed for its output queries.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace<T> {
    pub attn: BlockAttention<T>,
    /// Fused attention output for the output block.
    pub h_o: Matrix<T>,
    /// Unweighted `α_b V_b` products behind `h_o`.
    pub branches: BranchProducts<T>,
    pub strengths: Option<AlignmentStrengths<T>>,
}

/// One toy DiT block: residual joint attention followed by a residual
/// two-layer ReLU MLP. Prompt and style rows always use plain joint
/// attention; the output rows use the fusion rule selected by `fusion`.
pub fn dit_block_forward<T: Scalar>(
    blocks: &TokenBlocks<T>,
    w: &DitBlockWeights<T>,
    fusion: &DssiConfig,
) -> Result<TokenBlocks<T>> {
    dit_block_forward_traced(blocks, w, fusion).map(|(b, _)| b)
}

pub fn dit_block_forward_traced<T: Scalar>(
    blocks: &TokenBlocks<T>,
    w: &DitBlockWeights<T>,
    fusion: &DssiConfig,
) -> Result<(TokenBlocks<T>, LayerTrace<T>)> {
    if w.w_mlp1.rows() != blocks.width() {
        return shape_err(format!(
            "block weights have width {}, tokens have width {}",
            w.dim(),
            blocks.width()
        ));
    }
    let qkv = project_qkv(blocks, &w.proj)?;
    let keys = qkv.keys();
    let values = qkv.values();
    let h_p = attend(&qkv.q_p, &keys, &values)?;
    let h_s = attend(&qkv.q_s, &keys, &values)?;

    let attn = BlockAttention::from_logits(scaled_logits(&qkv.q_o, &keys)?, qkv.n_p(), qkv.n_s())?;
    let fused = fuse(&qkv, &attn, fusion)?;
    let branches = BranchProducts::new(&attn, &qkv)?;

    let style = blocks.style_concat();
    let step = |x: &Matrix<T>, h: &Matrix<T>| -> Result<Matrix<T>> { mlp_residual(&x.add(h)?, w) };
    let prompt = step(&blocks.prompt, &h_p)?;
    let style = step(&style, &h_s)?;
    let output = step(&blocks.output, &fused.h_o)?;
    let next = blocks.with_updates(prompt, style, output)?;
    Ok((
        next,
        LayerTrace {
            attn,
            h_o: fused.h_o,
            branches,
            strengths: fused.strengths,
        },
    ))
}

/// `x + ReLU(x W₁) W₂`.
fn mlp_residual<T: Scalar>(x: &Matrix<T>, w: &DitBlockWeights<T>) -> Result<Matrix<T>> {
    let hidden = x.matmul(&w.w_mlp1)?.map(|v| v.max(T::zero()));
    x.add(&hidden.matmul(&w.w_mlp2)?)
}

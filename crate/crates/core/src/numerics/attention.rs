//! Multi-head self-attention and a post-norm transformer block.
//!
//! The forward pass keeps every intermediate in a [`BlockCache`] so the
//! reverse pass can be computed without re-running anything. Masked positions
//! are dropped before the dense computation and re-inserted as zero rows, so
//! their content can never influence valid rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{axpy, dot, softmax_backward, softmax_in_place, DenseMatrix, DenseVector};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerBlockParams {
    pub heads: usize,
    pub wq: DenseMatrix,
    pub wk: DenseMatrix,
    pub wv: DenseMatrix,
    pub wo: DenseMatrix,
    /// F x d
    pub ff_in: DenseMatrix,
    pub ff_in_bias: DenseVector,
    /// d x F
    pub ff_out: DenseMatrix,
    pub ff_out_bias: DenseVector,
    pub ln1_gain: DenseVector,
    pub ln1_bias: DenseVector,
    pub ln2_gain: DenseVector,
    pub ln2_bias: DenseVector,
}

/// Gradients share the parameter layout.
pub type BlockGrads = TransformerBlockParams;

impl TransformerBlockParams {
    pub fn glorot<R: Rng + ?Sized>(d: usize, heads: usize, ff_width: usize, rng: &mut R) -> Self {
        Self {
            heads,
            wq: DenseMatrix::glorot(d, d, rng),
            wk: DenseMatrix::glorot(d, d, rng),
            wv: DenseMatrix::glorot(d, d, rng),
            wo: DenseMatrix::glorot(d, d, rng),
            ff_in: DenseMatrix::glorot(ff_width, d, rng),
            ff_in_bias: DenseVector::zeros(ff_width),
            ff_out: DenseMatrix::glorot(d, ff_width, rng),
            ff_out_bias: DenseVector::zeros(d),
            ln1_gain: DenseVector::from_vec_unchecked(vec![1.0; d]),
            ln1_bias: DenseVector::zeros(d),
            ln2_gain: DenseVector::from_vec_unchecked(vec![1.0; d]),
            ln2_bias: DenseVector::zeros(d),
        }
    }

    pub fn zeros(d: usize, heads: usize, ff_width: usize) -> Self {
        Self {
            heads,
            wq: DenseMatrix::zeros(d, d),
            wk: DenseMatrix::zeros(d, d),
            wv: DenseMatrix::zeros(d, d),
            wo: DenseMatrix::zeros(d, d),
            ff_in: DenseMatrix::zeros(ff_width, d),
            ff_in_bias: DenseVector::zeros(ff_width),
            ff_out: DenseMatrix::zeros(d, ff_width),
            ff_out_bias: DenseVector::zeros(d),
            ln1_gain: DenseVector::zeros(d),
            ln1_bias: DenseVector::zeros(d),
            ln2_gain: DenseVector::zeros(d),
            ln2_bias: DenseVector::zeros(d),
        }
    }

    pub fn d(&self) -> usize {
        self.wq.rows()
    }

    pub fn ff_width(&self) -> usize {
        self.ff_in.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.d() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        let f = self.ff_width();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Argument(format!(
                "head count {} must divide model width {d}",
                self.heads
            )));
        }
        let square = [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
        ];
        for (name, m) in square {
            if m.shape() != (d, d) {
                return Err(Error::dim(
                    name,
                    format!("{:?}", m.shape()),
                    format!("({d}, {d})"),
                ));
            }
        }
        if self.ff_in.shape() != (f, d) || self.ff_out.shape() != (d, f) {
            return Err(Error::dim(
                "feed-forward",
                format!("{:?}/{:?}", self.ff_in.shape(), self.ff_out.shape()),
                format!("({f}, {d})/({d}, {f})"),
            ));
        }
        let vecs = [
            ("ff_in_bias", &self.ff_in_bias, f),
            ("ff_out_bias", &self.ff_out_bias, d),
            ("ln1_gain", &self.ln1_gain, d),
            ("ln1_bias", &self.ln1_bias, d),
            ("ln2_gain", &self.ln2_gain, d),
            ("ln2_bias", &self.ln2_bias, d),
        ];
        for (name, v, want) in vecs {
            if v.len() != want {
                return Err(Error::dim(name, v.len(), want));
            }
        }
        Ok(())
    }

    /// Named parameter blocks in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("block.wq", self.wq.as_slice()),
            ("block.wk", self.wk.as_slice()),
            ("block.wv", self.wv.as_slice()),
            ("block.wo", self.wo.as_slice()),
            ("block.ff_in", self.ff_in.as_slice()),
            ("block.ff_in_bias", self.ff_in_bias.as_slice()),
            ("block.ff_out", self.ff_out.as_slice()),
            ("block.ff_out_bias", self.ff_out_bias.as_slice()),
            ("block.ln1_gain", self.ln1_gain.as_slice()),
            ("block.ln1_bias", self.ln1_bias.as_slice()),
            ("block.ln2_gain", self.ln2_gain.as_slice()),
            ("block.ln2_bias", self.ln2_bias.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("block.wq", self.wq.as_mut_slice()),
            ("block.wk", self.wk.as_mut_slice()),
            ("block.wv", self.wv.as_mut_slice()),
            ("block.wo", self.wo.as_mut_slice()),
            ("block.ff_in", self.ff_in.as_mut_slice()),
            ("block.ff_in_bias", self.ff_in_bias.as_mut_slice()),
            ("block.ff_out", self.ff_out.as_mut_slice()),
            ("block.ff_out_bias", self.ff_out_bias.as_mut_slice()),
            ("block.ln1_gain", self.ln1_gain.as_mut_slice()),
            ("block.ln1_bias", self.ln1_bias.as_mut_slice()),
            ("block.ln2_gain", self.ln2_gain.as_mut_slice()),
            ("block.ln2_bias", self.ln2_bias.as_mut_slice()),
        ]
    }
}

/// Intermediates of one forward pass over `n` valid rows.
#[derive(Clone, Debug)]
pub struct BlockCache {
    n: usize,
    d: usize,
    heads: usize,
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads x n x n, row-stochastic per head
    probs: Vec<f64>,
    o: Vec<f64>,
    y1_hat: Vec<f64>,
    inv_std1: Vec<f64>,
    y1: Vec<f64>,
    h1: Vec<f64>,
    g: Vec<f64>,
    y2_hat: Vec<f64>,
    inv_std2: Vec<f64>,
    y2: Vec<f64>,
}

impl BlockCache {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Block output, `n x d` row-major.
    pub fn output(&self) -> &[f64] {
        &self.y2
    }

    /// Attention probabilities of one head, `n x n` row-major.
    pub fn attention(&self, head: usize) -> &[f64] {
        let nn = self.n * self.n;
        &self.probs[head * nn..(head + 1) * nn]
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn width(&self) -> usize {
        self.d
    }
}

/// `x (n x w.cols) -> x W^T (n x w.rows)`.
fn matmul_nt(x: &[f64], n: usize, w: &DenseMatrix) -> Vec<f64> {
    let (rows, cols) = w.shape();
    let mut out = vec![0.0; n * rows];
    for (xi, oi) in x.chunks_exact(cols).zip(out.chunks_exact_mut(rows)) {
        w.matvec_into(xi, oi);
    }
    out
}

/// `dx (n x w.cols) += dy (n x w.rows) W`.
fn matmul_nn_acc(dy: &[f64], w: &DenseMatrix, dx: &mut [f64]) {
    let (rows, cols) = w.shape();
    for (dyi, dxi) in dy.chunks_exact(rows).zip(dx.chunks_exact_mut(cols)) {
        w.matvec_t_acc(dyi, dxi);
    }
}

/// `dW += dy^T x` summed over rows.
fn outer_acc(dw: &mut DenseMatrix, dy: &[f64], x: &[f64]) {
    let (rows, cols) = dw.shape();
    for (dyi, xi) in dy.chunks_exact(rows).zip(x.chunks_exact(cols)) {
        dw.add_outer(1.0, dyi, xi);
    }
}

fn layer_norm(
    r: &[f64],
    d: usize,
    gain: &[f64],
    bias: &[f64],
    x_hat: &mut [f64],
    inv_std: &mut [f64],
    y: &mut [f64],
) {
    for (i, ri) in r.chunks_exact(d).enumerate() {
        let mean = ri.iter().sum::<f64>() / d as f64;
        let var = ri.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[i] = s;
        let xh = &mut x_hat[i * d..(i + 1) * d];
        let yi = &mut y[i * d..(i + 1) * d];
        for j in 0..d {
            xh[j] = (ri[j] - mean) * s;
            yi[j] = gain[j] * xh[j] + bias[j];
        }
    }
}

/// Accumulates gain/bias grads and writes the input gradient into `dr`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dy: &[f64],
    d: usize,
    x_hat: &[f64],
    inv_std: &[f64],
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dr: &mut [f64],
) {
    let mut dxh = vec![0.0; d];
    for (i, dyi) in dy.chunks_exact(d).enumerate() {
        let xh = &x_hat[i * d..(i + 1) * d];
        for j in 0..d {
            dgain[j] += dyi[j] * xh[j];
            dbias[j] += dyi[j];
            dxh[j] = dyi[j] * gain[j];
        }
        let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
        let mean_dxh_xh = dot(&dxh, xh) / d as f64;
        let dri = &mut dr[i * d..(i + 1) * d];
        for j in 0..d {
            dri[j] = inv_std[i] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
}

struct AttentionForward {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    out: Vec<f64>,
}

fn attention_forward(x: &[f64], n: usize, p: &TransformerBlockParams) -> AttentionForward {
    let d = p.d();
    let hd = p.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let q = matmul_nt(x, n, &p.wq);
    let k = matmul_nt(x, n, &p.wk);
    let v = matmul_nt(x, n, &p.wv);
    let mut probs = vec![0.0; p.heads * n * n];
    let mut o = vec![0.0; n * d];
    for h in 0..p.heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let row = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
            let qi = &q[i * d + cols.start..i * d + cols.end];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &k[j * d + cols.start..j * d + cols.end]) * scale;
            }
            softmax_in_place(row).expect("finite attention logits");
            let oi = &mut o[i * d + cols.start..i * d + cols.end];
            for (j, &pij) in row.iter().enumerate() {
                axpy(pij, &v[j * d + cols.start..j * d + cols.end], oi);
            }
        }
    }
    let out = matmul_nt(&o, n, &p.wo);
    AttentionForward {
        q,
        k,
        v,
        probs,
        o,
        out,
    }
}

/// Forward pass over `n` rows that are all valid. `x` is `n x d` row-major.
pub(crate) fn block_forward(x: &[f64], n: usize, p: &TransformerBlockParams) -> BlockCache {
    let d = p.d();
    let f = p.ff_width();
    debug_assert_eq!(x.len(), n * d);
    let att = attention_forward(x, n, p);

    let mut r1 = x.to_vec();
    axpy(1.0, &att.out, &mut r1);
    let mut y1_hat = vec![0.0; n * d];
    let mut inv_std1 = vec![0.0; n];
    let mut y1 = vec![0.0; n * d];
    layer_norm(
        &r1,
        d,
        &p.ln1_gain,
        &p.ln1_bias,
        &mut y1_hat,
        &mut inv_std1,
        &mut y1,
    );

    let mut h1 = matmul_nt(&y1, n, &p.ff_in);
    for row in h1.chunks_exact_mut(f) {
        axpy(1.0, &p.ff_in_bias, row);
    }
    let g: Vec<f64> = h1.iter().map(|&v| v.max(0.0)).collect();
    let mut r2 = matmul_nt(&g, n, &p.ff_out);
    for (row, yrow) in r2.chunks_exact_mut(d).zip(y1.chunks_exact(d)) {
        axpy(1.0, &p.ff_out_bias, row);
        axpy(1.0, yrow, row);
    }
    let mut y2_hat = vec![0.0; n * d];
    let mut inv_std2 = vec![0.0; n];
    let mut y2 = vec![0.0; n * d];
    layer_norm(
        &r2,
        d,
        &p.ln2_gain,
        &p.ln2_bias,
        &mut y2_hat,
        &mut inv_std2,
        &mut y2,
    );

    BlockCache {
        n,
        d,
        heads: p.heads,
        x: x.to_vec(),
        q: att.q,
        k: att.k,
        v: att.v,
        probs: att.probs,
        o: att.o,
        y1_hat,
        inv_std1,
        y1,
        h1,
        g,
        y2_hat,
        inv_std2,
        y2,
    }
}

/// Reverse pass. Accumulates parameter gradients into `grads` and returns the
/// gradient with respect to the block input.
pub(crate) fn block_backward(
    cache: &BlockCache,
    p: &TransformerBlockParams,
    d_out: &[f64],
    grads: &mut BlockGrads,
) -> Vec<f64> {
    let n = cache.n;
    let d = cache.d;
    let f = p.ff_width();
    let hd = p.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    // second layer norm
    let mut dr2 = vec![0.0; n * d];
    layer_norm_backward(
        d_out,
        d,
        &cache.y2_hat,
        &cache.inv_std2,
        &p.ln2_gain,
        grads.ln2_gain.as_mut_slice(),
        grads.ln2_bias.as_mut_slice(),
        &mut dr2,
    );

    // feed-forward
    outer_acc(&mut grads.ff_out, &dr2, &cache.g);
    for row in dr2.chunks_exact(d) {
        axpy(1.0, row, grads.ff_out_bias.as_mut_slice());
    }
    let mut dh1 = vec![0.0; n * f];
    matmul_nn_acc(&dr2, &p.ff_out, &mut dh1);
    for (g, &h) in dh1.iter_mut().zip(&cache.h1) {
        if h <= 0.0 {
            *g = 0.0;
        }
    }
    outer_acc(&mut grads.ff_in, &dh1, &cache.y1);
    for row in dh1.chunks_exact(f) {
        axpy(1.0, row, grads.ff_in_bias.as_mut_slice());
    }
    let mut dy1 = dr2;
    matmul_nn_acc(&dh1, &p.ff_in, &mut dy1);

    // first layer norm
    let mut dr1 = vec![0.0; n * d];
    layer_norm_backward(
        &dy1,
        d,
        &cache.y1_hat,
        &cache.inv_std1,
        &p.ln1_gain,
        grads.ln1_gain.as_mut_slice(),
        grads.ln1_bias.as_mut_slice(),
        &mut dr1,
    );

    // attention
    outer_acc(&mut grads.wo, &dr1, &cache.o);
    let mut d_o = vec![0.0; n * d];
    matmul_nn_acc(&dr1, &p.wo, &mut d_o);
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut dp = vec![0.0; n];
    let mut ds = vec![0.0; n];
    for h in 0..p.heads {
        let c0 = h * hd;
        for i in 0..n {
            let probs = &cache.probs[(h * n + i) * n..(h * n + i + 1) * n];
            let doi = &d_o[i * d + c0..i * d + c0 + hd];
            for j in 0..n {
                dp[j] = dot(doi, &cache.v[j * d + c0..j * d + c0 + hd]);
                axpy(probs[j], doi, &mut dv[j * d + c0..j * d + c0 + hd]);
            }
            softmax_backward(probs, &dp, &mut ds);
            let qi = &cache.q[i * d + c0..i * d + c0 + hd];
            for j in 0..n {
                let g = ds[j] * scale;
                if g != 0.0 {
                    axpy(
                        g,
                        &cache.k[j * d + c0..j * d + c0 + hd],
                        &mut dq[i * d + c0..i * d + c0 + hd],
                    );
                    axpy(g, qi, &mut dk[j * d + c0..j * d + c0 + hd]);
                }
            }
        }
    }
    outer_acc(&mut grads.wq, &dq, &cache.x);
    outer_acc(&mut grads.wk, &dk, &cache.x);
    outer_acc(&mut grads.wv, &dv, &cache.x);
    let mut dx = dr1;
    matmul_nn_acc(&dq, &p.wq, &mut dx);
    matmul_nn_acc(&dk, &p.wk, &mut dx);
    matmul_nn_acc(&dv, &p.wv, &mut dx);
    dx
}

fn gather_valid(
    x: &DenseMatrix,
    p: &TransformerBlockParams,
    mask: &[bool],
) -> Result<(Vec<usize>, Vec<f64>)> {
    p.validate()?;
    if x.cols() != p.d() {
        return Err(Error::dim("attention input width", x.cols(), p.d()));
    }
    if mask.len() != x.rows() {
        return Err(Error::dim("attention mask", mask.len(), x.rows()));
    }
    let valid: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if valid.is_empty() {
        return Err(Error::Argument(
            "attention mask has no valid position".into(),
        ));
    }
    let mut compact = Vec::with_capacity(valid.len() * x.cols());
    for &i in &valid {
        compact.extend_from_slice(x.row(i));
    }
    Ok((valid, compact))
}

fn scatter(valid: &[usize], rows: usize, d: usize, compact: &[f64]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(rows, d);
    for (k, &i) in valid.iter().enumerate() {
        out.row_mut(i).copy_from_slice(&compact[k * d..(k + 1) * d]);
    }
    out
}

/// Scaled dot-product multi-head self-attention followed by the output
/// projection. Masked positions are excluded as keys and their output rows
/// are zero.
pub fn self_attention(
    x: &DenseMatrix,
    params: &TransformerBlockParams,
    valid_mask: &[bool],
) -> Result<DenseMatrix> {
    let (valid, compact) = gather_valid(x, params, valid_mask)?;
    let att = attention_forward(&compact, valid.len(), params);
    Ok(scatter(&valid, x.rows(), x.cols(), &att.out))
}

/// Attention sublayer + residual + layer norm, then feed-forward + residual +
/// layer norm. Masked rows of the output are zero.
pub fn transformer_block(
    x: &DenseMatrix,
    params: &TransformerBlockParams,
    valid_mask: &[bool],
) -> Result<DenseMatrix> {
    let (valid, compact) = gather_valid(x, params, valid_mask)?;
    let cache = block_forward(&compact, valid.len(), params);
    Ok(scatter(&valid, x.rows(), x.cols(), cache.output()))
}

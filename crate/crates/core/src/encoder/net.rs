use super::{Activation, EncoderParams, GradientSet};
use crate::dsp::LogMelSpectrogram;
use crate::error::{Error, Result};
use crate::Embedding;

/// Unrolled dot product with independent partial sums.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}

/// Row-major `c = op(a)·op(b) + beta·c` for an `m×k` by `k×n` product.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Long, thin reductions (kernel gradients) run faster as row dot
    // products than through the packed kernel.
    if !a_t && b_t && k >= 4 * m.max(n) {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let v = dot(ar, &b[j * k..(j + 1) * k]);
                let cij = &mut c[i * n + j];
                *cij = if beta == 0.0 { v } else { v + beta * *cij };
            }
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    // SAFETY: the slices hold exactly the m×k, k×n and m×n elements addressed
    // by these strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds 3×3, stride 2, pad 1 patches into a `(c·9) × (ho·wo)` matrix.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let p = ho * wo;
    let mut cols = vec![0.0; c * 9 * p];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[oy * wo..][..wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let p = ho * wo;
    let mut x = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    for (ox, &g) in row[oy * wo..][..wo].iter().enumerate() {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
    x
}

struct BlockTape {
    cols: Vec<f64>,
    conv: Vec<f64>,
    pre_act: Vec<f64>,
}

/// Intermediates retained by [`forward`] for [`backward`].
pub struct Tape {
    fingerprint: u64,
    blocks: Vec<BlockTape>,
    pooled: Vec<f64>,
}

impl Tape {
    /// Hash of the sign of every pre-activation. Two evaluations with equal
    /// signatures lie in the same linear region of the rectifiers.
    pub fn kink_signature(&self) -> u64 {
        let mut h = WordHasher::default();
        for b in &self.blocks {
            for chunk in b.pre_act.chunks(64) {
                let bits = chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |acc, (i, &z)| acc | (((z < 0.0) as u64) << i));
                h.push(bits);
            }
        }
        h.finish()
    }
}

/// Four interleaved FNV-style lanes; cheap enough to run on every pass.
#[derive(Default)]
struct WordHasher {
    lanes: [u64; 4],
    n: usize,
}

impl WordHasher {
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    fn push(&mut self, word: u64) {
        let lane = &mut self.lanes[self.n & 3];
        *lane = (*lane ^ word).wrapping_mul(Self::PRIME);
        self.n += 1;
    }

    fn finish(&self) -> u64 {
        self.lanes
            .iter()
            .fold(self.n as u64, |acc, &l| (acc ^ l).wrapping_mul(Self::PRIME).rotate_left(29))
    }
}

fn fingerprint(params: &EncoderParams) -> u64 {
    let mut h = WordHasher::default();
    for t in &params.tensors {
        for v in &t.data {
            h.push(v.to_bits());
        }
    }
    h.finish()
}

/// Embeds one spectrogram.
pub fn forward(params: &EncoderParams, x: &LogMelSpectrogram) -> Result<(Embedding, Tape)> {
    let input: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let cfg = params.config();
    if x.shape() != (cfg.input_height, cfg.input_width) {
        return Err(Error::Shape(format!(
            "input {:?}, encoder expects {:?}",
            x.shape(),
            (cfg.input_height, cfg.input_width)
        )));
    }
    forward_raw(params, &input)
}

/// Embeds a raw row-major input of the configured shape.
pub fn forward_raw(params: &EncoderParams, input: &[f64]) -> Result<(Embedding, Tape)> {
    let cfg = params.config();
    if input.len() != cfg.input_height * cfg.input_width {
        return Err(Error::Shape(format!(
            "input has {} values, expected {}",
            input.len(),
            cfg.input_height * cfg.input_width
        )));
    }
    let act = cfg.activation;
    let sizes = cfg.spatial_sizes();
    let mut blocks = Vec::with_capacity(cfg.widths.len());
    let mut x = input.to_vec();
    let mut c_in = 1;
    for (i, &c_out) in cfg.widths.iter().enumerate() {
        let (h, w) = sizes[i];
        let (ho, wo) = sizes[i + 1];
        let p = ho * wo;
        let kernel = &params.tensors[3 * i].data;
        let scale = &params.tensors[3 * i + 1].data;
        let offset = &params.tensors[3 * i + 2].data;

        let cols = im2col(&x, c_in, h, w, ho, wo);
        let mut conv = vec![0.0; c_out * p];
        gemm(c_out, c_in * 9, p, kernel, false, &cols, false, &mut conv, 0.0);
        let mut pre_act = vec![0.0; c_out * p];
        let mut out = vec![0.0; c_out * p];
        for ch in 0..c_out {
            let (g, b) = (scale[ch], offset[ch]);
            for j in ch * p..(ch + 1) * p {
                let z = g * conv[j] + b;
                pre_act[j] = z;
                out[j] = act.apply(z);
            }
        }
        blocks.push(BlockTape { cols, conv, pre_act });
        x = out;
        c_in = c_out;
    }

    let (hl, wl) = *sizes.last().expect("non-empty");
    let p = hl * wl;
    let pooled: Vec<f64> = x
        .chunks(p)
        .map(|plane| plane.iter().sum::<f64>() / p as f64)
        .collect();
    let n = cfg.widths.len();
    let weight = &params.tensors[3 * n].data;
    let mut emb = params.tensors[3 * n + 1].data.clone();
    gemm(cfg.embedding_dim, c_in, 1, weight, false, &pooled, false, &mut emb, 1.0);
    Ok((
        Embedding::new(emb),
        Tape {
            fingerprint: fingerprint(params),
            blocks,
            pooled,
        },
    ))
}

/// Gradients of an upstream scalar with respect to every parameter and the
/// input, given its gradient with respect to the embedding.
pub fn backward(
    params: &EncoderParams,
    tape: &Tape,
    grad_embedding: &[f64],
) -> Result<(GradientSet, Vec<f64>)> {
    backward_impl(params, tape, grad_embedding, true)
}

/// [`backward`] without the input gradient.
pub(crate) fn backward_params(params: &EncoderParams, tape: &Tape, grad_embedding: &[f64]) -> Result<GradientSet> {
    backward_impl(params, tape, grad_embedding, false).map(|(g, _)| g)
}

fn backward_impl(
    params: &EncoderParams,
    tape: &Tape,
    grad_embedding: &[f64],
    want_input: bool,
) -> Result<(GradientSet, Vec<f64>)> {
    let cfg = params.config();
    if tape.blocks.len() != cfg.widths.len() || tape.fingerprint != fingerprint(params) {
        return Err(Error::Shape("tape does not belong to these parameters".into()));
    }
    if grad_embedding.len() != cfg.embedding_dim {
        return Err(Error::Dimension {
            expected: cfg.embedding_dim,
            actual: grad_embedding.len(),
        });
    }
    let act: Activation = cfg.activation;
    let sizes = cfg.spatial_sizes();
    let n = cfg.widths.len();
    let d = cfg.embedding_dim;
    let c_last = cfg.widths[n - 1];
    let mut grads = GradientSet::zeros_like(params);

    // Projection.
    gemm(d, 1, c_last, grad_embedding, false, &tape.pooled, false, &mut grads.tensors[3 * n], 0.0);
    grads.tensors[3 * n + 1].copy_from_slice(grad_embedding);
    let mut d_pooled = vec![0.0; c_last];
    gemm(c_last, d, 1, &params.tensors[3 * n].data, true, grad_embedding, false, &mut d_pooled, 0.0);

    let (hl, wl) = sizes[n];
    let p_last = hl * wl;
    let mut d_out: Vec<f64> = d_pooled
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / p_last as f64, p_last))
        .collect();

    for i in (0..n).rev() {
        let c_out = cfg.widths[i];
        let c_in = if i == 0 { 1 } else { cfg.widths[i - 1] };
        let (h, w) = sizes[i];
        let (ho, wo) = sizes[i + 1];
        let p = ho * wo;
        let block = &tape.blocks[i];
        let scale = &params.tensors[3 * i + 1].data;

        let mut d_conv = vec![0.0; c_out * p];
        {
            let (d_scale, d_offset) = {
                let (left, right) = grads.tensors.split_at_mut(3 * i + 2);
                (&mut left[3 * i + 1], &mut right[0])
            };
            for ch in 0..c_out {
                let (mut gs, mut go) = (0.0, 0.0);
                for j in ch * p..(ch + 1) * p {
                    let dz = d_out[j] * act.derivative(block.pre_act[j]);
                    gs += dz * block.conv[j];
                    go += dz;
                    d_conv[j] = dz * scale[ch];
                }
                d_scale[ch] = gs;
                d_offset[ch] = go;
            }
        }
        gemm(c_out, p, c_in * 9, &d_conv, false, &block.cols, true, &mut grads.tensors[3 * i], 0.0);
        if i == 0 && !want_input {
            return Ok((grads, Vec::new()));
        }
        let mut d_cols = vec![0.0; c_in * 9 * p];
        gemm(c_in * 9, c_out, p, &params.tensors[3 * i].data, true, &d_conv, false, &mut d_cols, 0.0);
        d_out = col2im(&d_cols, c_in, h, w, ho, wo);
    }
    Ok((grads, d_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(seed: u64, len: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-3.0..3.0)).collect()
    }

    #[test]
    fn im2col_adjoint() {
        let (c, h, w) = (2, 7, 9);
        let (ho, wo) = (4, 5);
        let x = random_input(1, c * h * w);
        let y = random_input(2, c * 9 * ho * wo);
        let lhs: f64 = im2col(&x, c, h, w, ho, wo).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, c, h, w, ho, wo)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn zero_everything_gives_zero_embedding() {
        let cfg = EncoderConfig::test_config();
        let p = EncoderParams::zeros(&cfg).unwrap();
        let (e, _) = forward_raw(&p, &vec![0.0; 64 * 97]).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_and_determinism() {
        let mut cfg = EncoderConfig::test_config();
        cfg.embedding_dim = 8;
        let p = EncoderParams::init(&cfg, 3).unwrap();
        let x = random_input(4, 64 * 97);
        let (a, _) = forward_raw(&p, &x).unwrap();
        let (b, _) = forward_raw(&p, &x).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(forward_raw(&p, &x[1..]).is_err());
    }

    #[test]
    fn zero_upstream_gradient() {
        let p = EncoderParams::init(&EncoderConfig::test_config(), 3).unwrap();
        let (_, tape) = forward_raw(&p, &random_input(5, 64 * 97)).unwrap();
        let (g, gx) = backward(&p, &tape, &[0.0; 8]).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_tape_and_bad_gradient_length() {
        let mut p = EncoderParams::init(&EncoderConfig::test_config(), 3).unwrap();
        let (_, tape) = forward_raw(&p, &random_input(5, 64 * 97)).unwrap();
        assert!(backward(&p, &tape, &[0.0; 7]).is_err());
        *p.scalar_mut(0) += 1.0;
        assert!(backward(&p, &tape, &[0.0; 8]).is_err());
    }

    #[test]
    fn linear_network_input_gradient_is_transpose() {
        // With the identity activation the encoder is affine: f(x) = Mx + c.
        // Then <g, f(v) - f(0)> = <M^T g, v> for any v and g.
        let cfg = EncoderConfig {
            activation: Activation::Identity,
            ..EncoderConfig::test_config()
        };
        let p = EncoderParams::init(&cfg, 9).unwrap();
        let n = 64 * 97;
        let (f0, _) = forward_raw(&p, &vec![0.0; n]).unwrap();
        let g = random_input(10, 8);
        for seed in 0..3 {
            let v = random_input(20 + seed, n);
            let (fv, tape) = forward_raw(&p, &v).unwrap();
            let lhs: f64 = g.iter().zip(fv.iter().zip(f0.iter())).map(|(g, (a, b))| g * (a - b)).sum();
            let (_, gx) = backward(&p, &tape, &g).unwrap();
            let rhs: f64 = gx.iter().zip(&v).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }
}

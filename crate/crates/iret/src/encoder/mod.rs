//! Hand-backpropagated convolutional encoder with projection head.
//!
//! The architecture is deliberately small so CPU training stays in the
//! minutes range: two 3x3 stride-2 convolutions (3->16->32 channels) on a
//! 3x32x32 input, an aggregation stage over the 32x8x8 feature map, a
//! 16-d fully connected descriptor, and an optional 16->16->8 projection
//! head used only by the contrastive loss.

mod adam;
mod gradcheck;
mod train;

pub use adam::AdamState;
pub use gradcheck::{gradcheck_encoder, LossKind};
pub use train::{finetune_ap, train_contrastive, TrainConfig};

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::aggregate::{AggregatorConfig, AggregatorKind, Descriptor, FeatureMap};
use crate::binio;
use crate::data::Image;
use crate::error::{Error, Result};

pub const IMG_SIDE: usize = 32;
pub const C1_OUT: usize = 16;
pub const C1_SIDE: usize = 16;
pub const C2_OUT: usize = 32;
pub const C2_SIDE: usize = 8;
pub const DESC_DIM: usize = 16;
pub const HEAD_HIDDEN: usize = 16;
pub const EMBED_DIM: usize = 8;

const CHECKPOINT_MAGIC: &[u8; 8] = b"IRENCV01";

/// Encoder weights: conv1 (16x3x3x3 + 16), conv2 (32x16x3x3 + 32),
/// fc (16x32 + 16).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub fc_w: Vec<f64>,
    pub fc_b: Vec<f64>,
}

/// Projection head weights: w1 (16x16 + 16), w2 (8x16 + 8).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros() -> Self {
        EncoderParams {
            conv1_w: vec![0.0; C1_OUT * 3 * 9],
            conv1_b: vec![0.0; C1_OUT],
            conv2_w: vec![0.0; C2_OUT * C1_OUT * 9],
            conv2_b: vec![0.0; C2_OUT],
            fc_w: vec![0.0; DESC_DIM * C2_OUT],
            fc_b: vec![0.0; DESC_DIM],
        }
    }

    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros();
        let uniform = |rng: &mut ChaCha8Rng, v: &mut [f64], fan_in: usize| {
            let a = (1.0 / fan_in as f64).sqrt();
            for x in v.iter_mut() {
                *x = rng.gen_range(-a..a);
            }
        };
        uniform(rng, &mut p.conv1_w, 3 * 9);
        uniform(rng, &mut p.conv2_w, C1_OUT * 9);
        uniform(rng, &mut p.fc_w, C2_OUT);
        // small positive biases keep early descriptors away from zero
        for b in p
            .conv1_b
            .iter_mut()
            .chain(p.conv2_b.iter_mut())
            .chain(p.fc_b.iter_mut())
        {
            *b = 0.01;
        }
        p
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.fc_w,
            &self.fc_b,
        ]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros();
        let mut pos = 0usize;
        for t in [
            &mut p.conv1_w,
            &mut p.conv1_b,
            &mut p.conv2_w,
            &mut p.conv2_b,
            &mut p.fc_w,
            &mut p.fc_b,
        ] {
            let n = t.len();
            if pos + n > flat.len() {
                return Err(Error::ShapeMismatch("flat encoder params too short".into()));
            }
            t.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        if pos != flat.len() {
            return Err(Error::ShapeMismatch("flat encoder params too long".into()));
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl HeadParams {
    pub fn zeros() -> Self {
        HeadParams {
            w1: vec![0.0; HEAD_HIDDEN * DESC_DIM],
            b1: vec![0.0; HEAD_HIDDEN],
            w2: vec![0.0; EMBED_DIM * HEAD_HIDDEN],
            b2: vec![0.0; EMBED_DIM],
        }
    }

    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros();
        let a1 = (1.0 / DESC_DIM as f64).sqrt();
        for x in p.w1.iter_mut() {
            *x = rng.gen_range(-a1..a1);
        }
        let a2 = (1.0 / HEAD_HIDDEN as f64).sqrt();
        for x in p.w2.iter_mut() {
            *x = rng.gen_range(-a2..a2);
        }
        for b in p.b1.iter_mut().chain(p.b2.iter_mut()) {
            *b = 0.01;
        }
        p
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros();
        let mut pos = 0usize;
        for t in [&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2] {
            let n = t.len();
            if pos + n > flat.len() {
                return Err(Error::ShapeMismatch("flat head params too short".into()));
            }
            t.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        if pos != flat.len() {
            return Err(Error::ShapeMismatch("flat head params too long".into()));
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// Convolution kernels (3x3, stride 2, pad 1)
// ---------------------------------------------------------------------------

fn conv_out_side(side: usize) -> usize {
    (side + 2 - 3) / 2 + 1
}

/// Direct 3x3 stride-2 pad-1 convolution.
pub fn conv_forward(
    x: &[f64],
    ci: usize,
    side_in: usize,
    weights: &[f64],
    bias: &[f64],
    co: usize,
) -> Vec<f64> {
    let so = conv_out_side(side_in);
    let mut out = vec![0.0; co * so * so];
    for o in 0..co {
        for oy in 0..so {
            for ox in 0..so {
                let mut acc = bias[o];
                for i in 0..ci {
                    for ky in 0..3 {
                        let yi = (oy * 2 + ky) as isize - 1;
                        if yi < 0 || yi as usize >= side_in {
                            continue;
                        }
                        for kx in 0..3 {
                            let xi = (ox * 2 + kx) as isize - 1;
                            if xi < 0 || xi as usize >= side_in {
                                continue;
                            }
                            acc += weights[((o * ci + i) * 3 + ky) * 3 + kx]
                                * x[(i * side_in + yi as usize) * side_in + xi as usize];
                        }
                    }
                }
                out[(o * so + oy) * so + ox] = acc;
            }
        }
    }
    out
}

/// Gradients of [`conv_forward`] w.r.t. weights, bias and input.
pub fn conv_backward(
    x: &[f64],
    ci: usize,
    side_in: usize,
    weights: &[f64],
    co: usize,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let so = conv_out_side(side_in);
    let mut dw = vec![0.0; co * ci * 9];
    let mut db = vec![0.0; co];
    let mut dx = vec![0.0; ci * side_in * side_in];
    for o in 0..co {
        for oy in 0..so {
            for ox in 0..so {
                let g = dout[(o * so + oy) * so + ox];
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                for i in 0..ci {
                    for ky in 0..3 {
                        let yi = (oy * 2 + ky) as isize - 1;
                        if yi < 0 || yi as usize >= side_in {
                            continue;
                        }
                        for kx in 0..3 {
                            let xi = (ox * 2 + kx) as isize - 1;
                            if xi < 0 || xi as usize >= side_in {
                                continue;
                            }
                            let xi_idx = (i * side_in + yi as usize) * side_in + xi as usize;
                            let w_idx = ((o * ci + i) * 3 + ky) * 3 + kx;
                            dw[w_idx] += g * x[xi_idx];
                            dx[xi_idx] += g * weights[w_idx];
                        }
                    }
                }
            }
        }
    }
    (dw, db, dx)
}

fn relu_forward(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn relu_backward(pre: &[f64], dpost: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(dpost)
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect()
}

fn linear_forward(w: &[f64], b: &[f64], x: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    let mut out = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let mut acc = b[o];
        for i in 0..in_dim {
            acc += w[o * in_dim + i] * x[i];
        }
        out.push(acc);
    }
    out
}

fn linear_backward(
    w: &[f64],
    x: &[f64],
    out_dim: usize,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_dim = x.len();
    let mut dw = vec![0.0; out_dim * in_dim];
    let mut dx = vec![0.0; in_dim];
    for o in 0..out_dim {
        let g = dout[o];
        for i in 0..in_dim {
            dw[o * in_dim + i] = g * x[i];
            dx[i] += g * w[o * in_dim + i];
        }
    }
    (dw, dout.to_vec(), dx)
}

/// d(x/||x||) chain: given y = x/||x|| and dL/dy, return dL/dx.
fn l2_backward(x: &[f64], y: &[f64], dy: &[f64]) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter()
        .zip(dy)
        .map(|(&yi, &di)| (di - yi * dot) / norm)
        .collect()
}

// ---------------------------------------------------------------------------
// Forward pass with cache
// ---------------------------------------------------------------------------

/// Everything the backward pass needs from one image's forward pass.
pub struct EncodeCache {
    pub input: Vec<f64>,
    pub pre1: Vec<f64>,
    pub post1: Vec<f64>,
    pub pre2: Vec<f64>,
    pub post2: Vec<f64>,
    pub agg: Vec<f64>,
    pub fc_out: Vec<f64>,
    pub desc: Vec<f64>,
}

fn aggregate_forward(post2: &[f64], agg: &AggregatorConfig) -> Result<Vec<f64>> {
    let fm = FeatureMap::new(C2_OUT, C2_SIDE, C2_SIDE, post2.to_vec())?;
    Ok(agg.aggregate(&fm)?.values)
}

/// Backward through the pooling stage. Only the spatially differentiable
/// aggregators (mac/spoc/gem) are supported during training.
fn aggregate_backward(post2: &[f64], agg_out: &[f64], agg: &AggregatorConfig, dagg: &[f64]) -> Result<Vec<f64>> {
    let spatial = C2_SIDE * C2_SIDE;
    let mut dpost2 = vec![0.0; post2.len()];
    match agg.kind {
        AggregatorKind::Mac => {
            for c in 0..C2_OUT {
                let slice = &post2[c * spatial..(c + 1) * spatial];
                let mut best = 0usize;
                for (i, v) in slice.iter().enumerate() {
                    if *v > slice[best] {
                        best = i;
                    }
                }
                dpost2[c * spatial + best] = dagg[c];
            }
        }
        AggregatorKind::Spoc => {
            let inv = 1.0 / spatial as f64;
            for c in 0..C2_OUT {
                for i in 0..spatial {
                    dpost2[c * spatial + i] = dagg[c] * inv;
                }
            }
        }
        AggregatorKind::Gem => {
            let p = agg.gem_p;
            let inv = 1.0 / spatial as f64;
            for c in 0..C2_OUT {
                let y = agg_out[c];
                if y <= 0.0 {
                    continue;
                }
                for i in 0..spatial {
                    let x = post2[c * spatial + i].max(0.0);
                    if x > 0.0 {
                        dpost2[c * spatial + i] =
                            dagg[c] * inv * x.powf(p - 1.0) * y.powf(1.0 - p);
                    }
                }
            }
        }
        AggregatorKind::Rmac | AggregatorKind::Crow => {
            return Err(Error::InvalidArgument(format!(
                "aggregator '{}' is not supported inside the trainable encoder",
                agg.kind.name()
            )));
        }
    }
    Ok(dpost2)
}

/// Full encoder forward pass, keeping intermediate activations.
pub fn forward_encoder(
    params: &EncoderParams,
    agg: &AggregatorConfig,
    img: &Image,
) -> Result<EncodeCache> {
    if img.height != IMG_SIDE || img.width != IMG_SIDE {
        return Err(Error::ShapeMismatch(format!(
            "encoder expects 3x{IMG_SIDE}x{IMG_SIDE} input, got 3x{}x{}",
            img.height, img.width
        )));
    }
    let input = img.data.clone();
    let pre1 = conv_forward(&input, 3, IMG_SIDE, &params.conv1_w, &params.conv1_b, C1_OUT);
    let mut post1 = pre1.clone();
    relu_forward(&mut post1);
    let pre2 = conv_forward(&post1, C1_OUT, C1_SIDE, &params.conv2_w, &params.conv2_b, C2_OUT);
    let mut post2 = pre2.clone();
    relu_forward(&mut post2);
    let agg_out = aggregate_forward(&post2, agg)?;
    let fc_out = linear_forward(&params.fc_w, &params.fc_b, &agg_out, DESC_DIM);
    let norm = fc_out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    let desc = fc_out.iter().map(|v| v / norm).collect();
    Ok(EncodeCache {
        input,
        pre1,
        post1,
        pre2,
        post2,
        agg: agg_out,
        fc_out,
        desc,
    })
}

/// Encode one image to its unit-norm 16-d retrieval descriptor.
pub fn encode(params: &EncoderParams, agg: &AggregatorConfig, img: &Image) -> Result<Descriptor> {
    let cache = forward_encoder(params, agg, img)?;
    Ok(Descriptor {
        values: cache.desc,
        normalized: true,
    })
}

/// Projection head forward: fc_out -> w1 -> relu -> w2 -> l2 normalize.
pub struct HeadCache {
    pub pre_hidden: Vec<f64>,
    pub hidden: Vec<f64>,
    pub pre_embed: Vec<f64>,
    pub embed: Vec<f64>,
}

pub fn forward_head(head: &HeadParams, fc_out: &[f64]) -> Result<HeadCache> {
    let pre_hidden = linear_forward(&head.w1, &head.b1, fc_out, HEAD_HIDDEN);
    let mut hidden = pre_hidden.clone();
    relu_forward(&mut hidden);
    let pre_embed = linear_forward(&head.w2, &head.b2, &hidden, EMBED_DIM);
    let norm = pre_embed.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    let embed = pre_embed.iter().map(|v| v / norm).collect();
    Ok(HeadCache {
        pre_hidden,
        hidden,
        pre_embed,
        embed,
    })
}

/// Encode and project: the unit-norm 8-d contrastive embedding.
pub fn encode_project(
    params: &EncoderParams,
    head: &HeadParams,
    agg: &AggregatorConfig,
    img: &Image,
) -> Result<Descriptor> {
    let cache = forward_encoder(params, agg, img)?;
    let hc = forward_head(head, &cache.fc_out)?;
    Ok(Descriptor {
        values: hc.embed,
        normalized: true,
    })
}

// ---------------------------------------------------------------------------
// Backward passes
// ---------------------------------------------------------------------------

/// Backprop from a gradient on `fc_out` into encoder parameter gradients
/// (accumulated into `grads`).
pub fn backward_encoder(
    params: &EncoderParams,
    agg: &AggregatorConfig,
    cache: &EncodeCache,
    dfc_out: &[f64],
    grads: &mut EncoderParams,
) -> Result<()> {
    let (dfc_w, dfc_b, dagg) = linear_backward(&params.fc_w, &cache.agg, DESC_DIM, dfc_out);
    accumulate(&mut grads.fc_w, &dfc_w);
    accumulate(&mut grads.fc_b, &dfc_b);

    let dpost2 = aggregate_backward(&cache.post2, &cache.agg, agg, &dagg)?;
    let dpre2 = relu_backward(&cache.pre2, &dpost2);
    let (dw2, db2, dpost1) =
        conv_backward(&cache.post1, C1_OUT, C1_SIDE, &params.conv2_w, C2_OUT, &dpre2);
    accumulate(&mut grads.conv2_w, &dw2);
    accumulate(&mut grads.conv2_b, &db2);

    let dpre1 = relu_backward(&cache.pre1, &dpost1);
    let (dw1, db1, _dx) =
        conv_backward(&cache.input, 3, IMG_SIDE, &params.conv1_w, C1_OUT, &dpre1);
    accumulate(&mut grads.conv1_w, &dw1);
    accumulate(&mut grads.conv1_b, &db1);
    Ok(())
}

/// Backprop from a gradient on the normalized descriptor into encoder
/// parameter gradients.
pub fn backward_encoder_from_descriptor(
    params: &EncoderParams,
    agg: &AggregatorConfig,
    cache: &EncodeCache,
    ddesc: &[f64],
    grads: &mut EncoderParams,
) -> Result<()> {
    let dfc_out = l2_backward(&cache.fc_out, &cache.desc, ddesc);
    backward_encoder(params, agg, cache, &dfc_out, grads)
}

/// Backprop from a gradient on the unit embedding through the head,
/// returning the gradient on `fc_out` and accumulating head gradients.
pub fn backward_head(
    head: &HeadParams,
    cache: &HeadCache,
    fc_out: &[f64],
    dembed: &[f64],
    grads: &mut HeadParams,
) -> Vec<f64> {
    let dpre_embed = l2_backward(&cache.pre_embed, &cache.embed, dembed);
    let (dw2, db2, dhidden) = linear_backward(&head.w2, &cache.hidden, EMBED_DIM, &dpre_embed);
    accumulate(&mut grads.w2, &dw2);
    accumulate(&mut grads.b2, &db2);
    let dpre_hidden = relu_backward(&cache.pre_hidden, &dhidden);
    let (dw1, db1, dfc) = linear_backward(&head.w1, fc_out, HEAD_HIDDEN, &dpre_hidden);
    accumulate(&mut grads.w1, &dw1);
    accumulate(&mut grads.b1, &db1);
    dfc
}

fn accumulate(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Write encoder + head parameters: magic `IRENCV01`, then each tensor in
/// declaration order as a u32 LE length followed by f32 LE values.
pub fn write_checkpoint(path: &Path, params: &EncoderParams, head: &HeadParams) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(CHECKPOINT_MAGIC).map_err(|e| Error::io(path, e))?;
    for t in params.tensors().iter().chain(head.tensors().iter()) {
        binio::write_u32(&mut w, t.len() as u32, path)?;
        binio::write_f32_slice(&mut w, t, path)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(EncoderParams, HeadParams)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    binio::expect_magic(&mut r, CHECKPOINT_MAGIC, path)?;
    let mut params = EncoderParams::zeros();
    let mut head = HeadParams::zeros();
    {
        let tensors: [&mut Vec<f64>; 10] = [
            &mut params.conv1_w,
            &mut params.conv1_b,
            &mut params.conv2_w,
            &mut params.conv2_b,
            &mut params.fc_w,
            &mut params.fc_b,
            &mut head.w1,
            &mut head.b1,
            &mut head.w2,
            &mut head.b2,
        ];
        for t in tensors {
            let n = binio::read_u32(&mut r, path)? as usize;
            if n != t.len() {
                return Err(Error::malformed(
                    path,
                    format!("tensor length {} does not match expected {}", n, t.len()),
                ));
            }
            *t = binio::read_f32_vec(&mut r, n, path)?;
        }
    }
    Ok((params, head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
        Image::new(32, 32, data).unwrap()
    }

    fn default_agg() -> AggregatorConfig {
        AggregatorConfig::default()
    }

    #[test]
    fn encode_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = EncoderParams::init(&mut rng);
        let d = encode(&params, &default_agg(), &rand_image(2)).unwrap();
        assert_eq!(d.dim(), DESC_DIM);
        assert!((d.norm() - 1.0).abs() < 1e-12);
        assert!(d.normalized);
    }

    #[test]
    fn encode_zero_image_zero_biases_errors() {
        let params = EncoderParams::zeros();
        let img = Image::zeros(32, 32);
        assert!(matches!(
            encode(&params, &default_agg(), &img),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn encode_rejects_wrong_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = EncoderParams::init(&mut rng);
        let img = Image::zeros(16, 16);
        assert!(encode(&params, &default_agg(), &img).is_err());
    }

    #[test]
    fn encode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = EncoderParams::init(&mut rng);
        let img = rand_image(6);
        let a = encode(&params, &default_agg(), &img).unwrap();
        let b = encode(&params, &default_agg(), &img).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn encode_project_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = EncoderParams::init(&mut rng);
        let head = HeadParams::init(&mut rng);
        let z = encode_project(&params, &head, &default_agg(), &rand_image(4)).unwrap();
        assert_eq!(z.dim(), EMBED_DIM);
        assert!((z.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_like_head_truncates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = EncoderParams::init(&mut rng);
        let mut head = HeadParams::zeros();
        for i in 0..HEAD_HIDDEN {
            head.w1[i * DESC_DIM + i] = 1.0;
        }
        for i in 0..EMBED_DIM {
            head.w2[i * HEAD_HIDDEN + i] = 1.0;
        }
        let img = rand_image(8);
        let cache = forward_encoder(&params, &default_agg(), &img).unwrap();
        let z = encode_project(&params, &head, &default_agg(), &img).unwrap();
        // hidden = relu(fc_out); pre_embed = first 8 entries of relu(fc_out)
        let trunc: Vec<f64> = cache.fc_out.iter().map(|v| v.max(0.0)).take(EMBED_DIM).collect();
        let norm = trunc.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in z.values.iter().zip(&trunc) {
            assert!((a - b / norm).abs() < 1e-12);
        }
    }

    /// Naive 6-loop convolution with explicit zero padding, as an
    /// independent reference for the production kernel.
    fn conv_reference(
        x: &[f64],
        ci: usize,
        side: usize,
        weights: &[f64],
        bias: &[f64],
        co: usize,
    ) -> Vec<f64> {
        let padded_side = side + 2;
        let mut padded = vec![0.0; ci * padded_side * padded_side];
        for i in 0..ci {
            for y in 0..side {
                for xx in 0..side {
                    padded[(i * padded_side + y + 1) * padded_side + xx + 1] =
                        x[(i * side + y) * side + xx];
                }
            }
        }
        let so = (side + 2 - 3) / 2 + 1;
        let mut out = vec![0.0; co * so * so];
        for o in 0..co {
            for oy in 0..so {
                for ox in 0..so {
                    let mut acc = bias[o];
                    for i in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                acc += weights[((o * ci + i) * 3 + ky) * 3 + kx]
                                    * padded[(i * padded_side + oy * 2 + ky) * padded_side
                                        + ox * 2
                                        + kx];
                            }
                        }
                    }
                    out[(o * so + oy) * so + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (ci, side, co) in [(3usize, 8usize, 4usize), (2, 6, 3), (3, 32, 16)] {
            let x: Vec<f64> = (0..ci * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..co * ci * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..co).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let fast = conv_forward(&x, ci, side, &w, &b, co);
            let slow = conv_reference(&x, ci, side, &w, &b, co);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn flat_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = EncoderParams::init(&mut rng);
        let h = HeadParams::init(&mut rng);
        assert_eq!(EncoderParams::from_flat(&p.to_flat()).unwrap(), p);
        assert_eq!(HeadParams::from_flat(&h.to_flat()).unwrap(), h);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = EncoderParams::init(&mut rng);
        let h = HeadParams::init(&mut rng);
        write_checkpoint(&path, &p, &h).unwrap();
        let (p2, h2) = read_checkpoint(&path).unwrap();
        // f32 narrowing: compare to f32 precision
        for (a, b) in p.to_flat().iter().zip(p2.to_flat()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in h.to_flat().iter().zip(h2.to_flat()) {
            assert!((a - b).abs() < 1e-6);
        }
        // second write is byte-identical
        let path2 = dir.path().join("model2.ckpt");
        write_checkpoint(&path2, &p2, &h2).unwrap();
        write_checkpoint(&path, &p2, &h2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}

//! Finite-difference verification of every differentiable primitive and of
//! the composed masked-token loss, on the `f64` instantiation of the graph.

use crate::conditioning::{EncoderConfig, FeatureEncoder};
use crate::error::Result;
use crate::losses::{mim_loss, MimNorm};
use crate::masking::{apply_mask, MaskedTokens};
use crate::tensor::{finite_diff_check, finite_diff_check_params, Graph, Tensor, Var};
use crate::transformer::{Transformer, TransformerConfig, TransformerShape};
use crate::vq::{TokenGrid, VqConfig};
use crate::GrayImage;

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
const H: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: &'static str,
    /// Max relative error between analytic and central-difference gradients.
    pub error: f64,
    pub tolerance: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

fn values(n: usize, salt: u64) -> Vec<f64> {
    // deterministic, away from relu / abs kinks
    (0..n)
        .map(|i| {
            let k = (i as u64).wrapping_mul(2654435761).wrapping_add(salt.wrapping_mul(40503)) % 1000;
            let v = k as f64 / 1000.0 * 2.0 - 1.0;
            if v.abs() < 0.05 {
                v + 0.1
            } else {
                v
            }
        })
        .collect()
}

fn tensor(shape: &[usize], salt: u64) -> Tensor<f64> {
    Tensor::new(shape, values(shape.iter().product(), salt)).expect("shape matches data")
}

fn constant(g: &mut Graph<f64>, shape: &[usize], salt: u64) -> Var {
    g.leaf(&tensor(shape, salt))
}

/// Reduces `v` to a scalar through a fixed random projection.
fn project(g: &mut Graph<f64>, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = g.constant(&shape, values(shape.iter().product(), 99))?;
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

type Case = (&'static str, Vec<usize>, fn(&mut Graph<f64>, Var) -> Result<Var>);

fn cases() -> Vec<Case> {
    vec![
        ("add", vec![3, 4], |g, x| {
            let c = constant(g, &[3, 4], 1);
            g.add(x, c)
        }),
        ("sub", vec![3, 4], |g, x| {
            let c = constant(g, &[3, 4], 1);
            g.sub(c, x)
        }),
        ("mul", vec![3, 4], |g, x| g.mul(x, x)),
        ("add_bias.input", vec![3, 4], |g, x| {
            let b = constant(g, &[4], 2);
            g.add_bias(x, b)
        }),
        ("add_bias.bias", vec![4], |g, b| {
            let x = constant(g, &[3, 4], 2);
            g.add_bias(x, b)
        }),
        ("scale", vec![5], |g, x| Ok(g.scale(x, 1.7))),
        ("add_scalar", vec![5], |g, x| {
            let y = g.add_scalar(x, 0.3);
            g.mul(y, y)
        }),
        ("matmul.lhs", vec![3, 4], |g, x| {
            let b = constant(g, &[4, 2], 3);
            g.matmul(x, b)
        }),
        ("matmul.rhs", vec![4, 2], |g, x| {
            let a = constant(g, &[3, 4], 3);
            g.matmul(a, x)
        }),
        ("relu", vec![12], |g, x| Ok(g.relu(x))),
        ("leaky_relu", vec![12], |g, x| Ok(g.leaky_relu(x, 0.1))),
        ("gelu", vec![12], |g, x| Ok(g.gelu(x))),
        ("sigmoid", vec![12], |g, x| Ok(g.sigmoid(x))),
        ("abs", vec![12], |g, x| Ok(g.abs(x))),
        ("square", vec![12], |g, x| Ok(g.square(x))),
        ("softmax", vec![3, 5], |g, x| g.softmax(x)),
        ("log_softmax", vec![3, 5], |g, x| g.log_softmax(x)),
        ("layer_norm", vec![3, 6], |g, x| g.layer_norm(x, 1e-5)),
        ("sum", vec![2, 3], |g, x| {
            let s = g.sum(x);
            g.mul(s, s)
        }),
        ("mean", vec![2, 3], |g, x| {
            let s = g.mean(x);
            g.mul(s, s)
        }),
        ("gather_rows", vec![4, 3], |g, x| g.gather_rows(x, &[2, 0, 2, 3])),
        ("pick", vec![3, 4], |g, x| g.pick(x, &[1, 3, 0])),
        ("reshape", vec![2, 6], |g, x| {
            let y = g.reshape(x, &[3, 4])?;
            let c = constant(g, &[4, 2], 4);
            g.matmul(y, c)
        }),
        ("slice_cols", vec![3, 6], |g, x| g.slice_cols(x, 2, 3)),
        ("concat_cols", vec![3, 2], |g, x| {
            let c = constant(g, &[3, 4], 5);
            let y = g.concat_cols(&[c, x, x])?;
            g.mul(y, y)
        }),
        ("concat_rows", vec![4, 3], |g, x| {
            let c = constant(g, &[2, 3], 5);
            g.concat_rows(&[x, c], 2)
        }),
        ("repeat_rows", vec![2, 3], |g, x| g.repeat_rows(x, 3)),
        ("conv2d.input.stride1", vec![2, 2, 5, 5], |g, x| {
            let w = constant(g, &[3, 2, 3, 3], 6);
            let b = constant(g, &[3], 7);
            g.conv2d(x, w, b, 1, 1)
        }),
        ("conv2d.input.stride2", vec![2, 2, 6, 6], |g, x| {
            let w = constant(g, &[3, 2, 3, 3], 6);
            let b = constant(g, &[3], 7);
            g.conv2d(x, w, b, 2, 1)
        }),
        ("conv2d.weight", vec![3, 2, 3, 3], |g, w| {
            let x = constant(g, &[2, 2, 6, 6], 6);
            let b = constant(g, &[3], 7);
            g.conv2d(x, w, b, 2, 1)
        }),
        ("conv2d.bias", vec![3], |g, b| {
            let x = constant(g, &[2, 2, 5, 5], 6);
            let w = constant(g, &[3, 2, 1, 1], 7);
            g.conv2d(x, w, b, 1, 0)
        }),
        ("upsample2x", vec![2, 2, 3, 3], |g, x| g.upsample2x(x)),
        ("avg_pool", vec![2, 2, 4, 4], |g, x| g.avg_pool(x, 2)),
        ("rows_to_nchw", vec![8, 3], |g, x| g.rows_to_nchw(x, 2, 2, 2)),
        ("nchw_to_rows", vec![2, 3, 2, 2], |g, x| g.nchw_to_rows(x)),
        ("attention.query", vec![6, 4], |g, q| {
            let k = constant(g, &[10, 4], 8);
            let v = constant(g, &[10, 4], 9);
            g.attention(q, k, v, 2, 2)
        }),
        ("attention.key", vec![10, 4], |g, k| {
            let q = constant(g, &[6, 4], 8);
            let v = constant(g, &[10, 4], 9);
            g.attention(q, k, v, 2, 2)
        }),
        ("attention.value", vec![10, 4], |g, v| {
            let q = constant(g, &[6, 4], 8);
            let k = constant(g, &[10, 4], 9);
            g.attention(q, k, v, 2, 2)
        }),
        ("attention.self", vec![8, 4], |g, x| g.attention(x, x, x, 2, 1)),
    ]
}

pub fn primitive_checks() -> Result<Vec<GradCase>> {
    cases()
        .into_iter()
        .map(|(name, shape, f)| {
            let error = finite_diff_check(
                |g, x| {
                    let y = f(g, x)?;
                    project(g, y)
                },
                &tensor(&shape, 7),
                H,
            )?;
            Ok(GradCase { name, error, tolerance: PRIMITIVE_TOL })
        })
        .collect()
}

/// Masked-token loss of a small conditioned transformer on a 2x2 grid,
/// checked against every trainable tensor including the style anchors.
pub fn end_to_end_mim_check() -> Result<GradCase> {
    let vq = VqConfig {
        resolution: 8,
        grid_h: 2,
        grid_w: 2,
        codebook_size: 5,
        encoder_channels: vec![4, 4],
        decoder_channels: vec![4, 4, 4],
        ..VqConfig::default()
    };
    let enc_cfg = EncoderConfig { resolution: 8, channels: vec![3, 4], seed: 5 };
    let shape = TransformerShape::new(&vq, &enc_cfg)?;
    let cfg = TransformerConfig { depth: 2, width: 8, heads: 2, mlp_ratio: 2, num_styles: 2 };
    let tf = Transformer::<f64>::new(cfg, shape, 3)?;
    let encoder = FeatureEncoder::<f64>::new(enc_cfg)?;

    let photo = |phase: usize| GrayImage::new(8, 8, (0..64).map(|i| ((i * 7 + phase * 13) % 17) as f32 / 16.0).collect());
    let contexts = [tf.photo_context(&encoder.extract(&photo(0)?)?)?, tf.photo_context(&encoder.extract(&photo(1)?)?)?];
    let grids = [TokenGrid::new(vec![1, 4, 0, 2], 2, 2, 5)?, TokenGrid::new(vec![3, 3, 1, 0], 2, 2, 5)?];
    let masks = [[true, false, true, false], [true, true, true, true]];
    let masked: Vec<MaskedTokens> = grids.iter().zip(&masks).map(|(z, m)| apply_mask(z, m)).collect::<Result<_>>()?;
    let targets: Vec<usize> = grids.iter().flat_map(|z| z.indices().iter().copied()).collect();
    let mask: Vec<bool> = masks.iter().flatten().copied().collect();

    let mut store = tf.params.clone();
    let report = finite_diff_check_params(
        |g, params| {
            let mut model = tf.clone();
            model.params = params.clone();
            let style = model.style_rows(g, &[1, 0])?;
            let logits = model.forward(g, &[&contexts[0], &contexts[1]], style, &[&masked[0], &masked[1]])?;
            mim_loss(g, logits, &targets, &mask, 2, MimNorm::Masked)
        },
        &mut store,
        H,
    )?;
    Ok(GradCase { name: "end_to_end.mim", error: report.max_error(), tolerance: END_TO_END_TOL })
}

pub fn full_suite() -> Result<Vec<GradCase>> {
    let mut out = primitive_checks()?;
    out.push(end_to_end_mim_check()?);
    Ok(out)
}

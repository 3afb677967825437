//! Convolutional encoder registry.
//!
//! Every encoder maps a 3-channel input to a fixed-width feature vector via
//! global average pooling. The registry carries the plain-conv configs
//! (vgg11/vgg16), the residual configs (resnet18/34/50, batch-norm-free),
//! and a 2-conv `tiny` encoder for fast synthetic experiments and gradient
//! checks.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::layers::{
    gap_backward, gap_forward, relu_backward, relu_forward, Conv2d, ConvCache, Grads, Linear,
    MaxPool, ParamSet, PoolCache,
};
use super::tensor::{Mat, Tensor4};
use super::NetworkError;
use crate::scalar::Real;

/// Identifies an encoder from the registry and its pooled feature width.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderSpec {
    pub name: String,
    pub feature_dim: usize,
}

impl EncoderSpec {
    pub fn by_name(name: &str) -> Result<Self, NetworkError> {
        let feature_dim = match name {
            "tiny" => 8,
            "vgg11" | "vgg16" | "resnet18" | "resnet34" => 512,
            "resnet50" => 2048,
            _ => return Err(NetworkError::UnknownEncoder(name.to_string())),
        };
        Ok(Self {
            name: name.to_string(),
            feature_dim,
        })
    }
}

pub const ENCODER_NAMES: [&str; 6] = [
    "tiny", "vgg11", "vgg16", "resnet18", "resnet34", "resnet50",
];

/// One node of the encoder graph.
#[derive(Debug, Clone)]
pub enum Op {
    Conv(Conv2d),
    Relu,
    Pool(MaxPool),
    /// y = body(x) + skip(x); skip is identity or a projection conv.
    Residual {
        body: Vec<Op>,
        proj: Option<Conv2d>,
    },
}

/// Per-op saved state for the backward pass.
pub enum OpCache<F> {
    Conv(ConvCache<F>),
    Relu(Tensor4<F>),
    Pool(PoolCache),
    Residual {
        body: Vec<OpCache<F>>,
        proj: Option<ConvCache<F>>,
    },
}

pub struct EncodeCache<F> {
    ops: Vec<OpCache<F>>,
    pre_gap: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct Encoder {
    ops: Vec<Op>,
    pub feature_dim: usize,
    pub min_input: usize,
}

fn run_ops<F: Real>(
    ops: &[Op],
    mut x: Tensor4<F>,
    params: &ParamSet<F>,
    caches: Option<&mut Vec<OpCache<F>>>,
) -> Result<Tensor4<F>, NetworkError> {
    let train = caches.is_some();
    let mut caches = caches;
    for op in ops {
        x = match op {
            Op::Conv(conv) => {
                let (y, cache) = conv.forward(&x, params, train)?;
                if let Some(c) = caches.as_deref_mut() {
                    c.push(OpCache::Conv(cache.unwrap()));
                }
                y
            }
            Op::Relu => {
                relu_forward(&mut x);
                if let Some(c) = caches.as_deref_mut() {
                    c.push(OpCache::Relu(x.clone()));
                }
                x
            }
            Op::Pool(pool) => {
                let (y, cache) = pool.forward(&x, train)?;
                if let Some(c) = caches.as_deref_mut() {
                    c.push(OpCache::Pool(cache.unwrap()));
                }
                y
            }
            Op::Residual { body, proj } => {
                let mut body_caches = train.then(Vec::new);
                let main = run_ops(body, x.clone(), params, body_caches.as_mut())?;
                let (skip, proj_cache) = match proj {
                    Some(conv) => {
                        let (s, cache) = conv.forward(&x, params, train)?;
                        (s, cache)
                    }
                    None => (x, None),
                };
                debug_assert_eq!(main.data.len(), skip.data.len());
                let mut y = main;
                for (v, &s) in y.data.iter_mut().zip(&skip.data) {
                    *v += s;
                }
                if let Some(c) = caches.as_deref_mut() {
                    c.push(OpCache::Residual {
                        body: body_caches.unwrap(),
                        proj: proj_cache,
                    });
                }
                y
            }
        };
    }
    Ok(x)
}

fn backward_ops<F: Real>(
    ops: &[Op],
    caches: &[OpCache<F>],
    mut dy: Tensor4<F>,
    params: &ParamSet<F>,
    grads: &mut Grads<F>,
    needs_dx: bool,
) -> Option<Tensor4<F>> {
    debug_assert_eq!(ops.len(), caches.len());
    for (idx, (op, cache)) in ops.iter().zip(caches).enumerate().rev() {
        let is_first = idx == 0;
        let want_dx = needs_dx || !is_first;
        dy = match (op, cache) {
            (Op::Conv(conv), OpCache::Conv(c)) => {
                match conv.backward(&dy, c, params, grads, want_dx) {
                    Some(dx) => dx,
                    None => return None,
                }
            }
            (Op::Relu, OpCache::Relu(y)) => {
                relu_backward(&mut dy, y);
                dy
            }
            (Op::Pool(pool), OpCache::Pool(c)) => pool.backward(&dy, c),
            (
                Op::Residual { body, proj },
                OpCache::Residual {
                    body: body_caches,
                    proj: proj_cache,
                },
            ) => {
                let d_body = backward_ops(body, body_caches, dy.clone(), params, grads, true)
                    .expect("residual body always propagates dx");
                let d_skip = match (proj, proj_cache) {
                    (Some(conv), Some(c)) => conv
                        .backward(&dy, c, params, grads, true)
                        .expect("projection propagates dx"),
                    _ => dy,
                };
                let mut dx = d_body;
                for (v, &s) in dx.data.iter_mut().zip(&d_skip.data) {
                    *v += s;
                }
                dx
            }
            _ => unreachable!("op/cache mismatch"),
        };
    }
    Some(dy)
}

impl Encoder {
    /// Inference forward: features [n × feature_dim], no saved state.
    pub fn forward_infer<F: Real>(
        &self,
        x: Tensor4<F>,
        params: &ParamSet<F>,
    ) -> Result<Mat<F>, NetworkError> {
        let y = run_ops(&self.ops, x, params, None)?;
        Ok(gap_forward(&y))
    }

    /// Training forward keeping per-op caches for `backward`.
    pub fn forward_train<F: Real>(
        &self,
        x: Tensor4<F>,
        params: &ParamSet<F>,
    ) -> Result<(Mat<F>, EncodeCache<F>), NetworkError> {
        let mut caches = Vec::new();
        let y = run_ops(&self.ops, x, params, Some(&mut caches))?;
        let pre_gap = (y.c, y.h, y.w);
        Ok((
            gap_forward(&y),
            EncodeCache {
                ops: caches,
                pre_gap,
            },
        ))
    }

    /// Backpropagate feature gradients, accumulating parameter gradients.
    pub fn backward<F: Real>(
        &self,
        dfeat: &Mat<F>,
        cache: &EncodeCache<F>,
        params: &ParamSet<F>,
        grads: &mut Grads<F>,
    ) {
        let (c, h, w) = cache.pre_gap;
        let dy = gap_backward(dfeat, c, h, w);
        backward_ops(&self.ops, &cache.ops, dy, params, grads, false);
    }
}

/// Kaiming-uniform init for a conv/linear weight with the given fan-in.
fn init_weight<F: Real>(rng: &mut ChaCha12Rng, len: usize, fan_in: usize) -> Vec<F> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..len)
        .map(|_| F::from_f64(rng.random_range(-limit..limit)))
        .collect()
}

struct Builder<'a, F> {
    params: &'a mut ParamSet<F>,
    rng: &'a mut ChaCha12Rng,
    next_id: usize,
}

impl<F: Real> Builder<'_, F> {
    fn conv(&mut self, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Conv2d {
        let fan_in = in_ch * kernel * kernel;
        let name = format!("encoder.conv{}", self.next_id);
        self.next_id += 1;
        let w = self.params.add(
            format!("{name}.w"),
            vec![out_ch, fan_in],
            init_weight(self.rng, out_ch * fan_in, fan_in),
        );
        let b = self
            .params
            .add(format!("{name}.b"), vec![out_ch], vec![F::zero(); out_ch]);
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            w,
            b,
        }
    }
}

fn vgg_ops<F: Real>(b: &mut Builder<F>, cfg: &[i32]) -> Vec<Op> {
    let mut ops = Vec::new();
    let mut in_ch = 3;
    for &entry in cfg {
        if entry < 0 {
            ops.push(Op::Pool(MaxPool {
                kernel: 2,
                stride: 2,
                pad: 0,
            }));
        } else {
            let ch = entry as usize;
            ops.push(Op::Conv(b.conv(in_ch, ch, 3, 1, 1)));
            ops.push(Op::Relu);
            in_ch = ch;
        }
    }
    ops
}

fn basic_block<F: Real>(b: &mut Builder<F>, in_ch: usize, ch: usize, stride: usize) -> Vec<Op> {
    let body = vec![
        Op::Conv(b.conv(in_ch, ch, 3, stride, 1)),
        Op::Relu,
        Op::Conv(b.conv(ch, ch, 3, 1, 1)),
    ];
    let proj = (stride != 1 || in_ch != ch).then(|| b.conv(in_ch, ch, 1, stride, 0));
    vec![Op::Residual { body, proj }, Op::Relu]
}

fn bottleneck_block<F: Real>(b: &mut Builder<F>, in_ch: usize, mid: usize, stride: usize) -> Vec<Op> {
    let out_ch = mid * 4;
    let body = vec![
        Op::Conv(b.conv(in_ch, mid, 1, 1, 0)),
        Op::Relu,
        Op::Conv(b.conv(mid, mid, 3, stride, 1)),
        Op::Relu,
        Op::Conv(b.conv(mid, out_ch, 1, 1, 0)),
    ];
    let proj = (stride != 1 || in_ch != out_ch).then(|| b.conv(in_ch, out_ch, 1, stride, 0));
    vec![Op::Residual { body, proj }, Op::Relu]
}

fn resnet_ops<F: Real>(b: &mut Builder<F>, depths: [usize; 4], bottleneck: bool) -> Vec<Op> {
    let mut ops = vec![
        Op::Conv(b.conv(3, 64, 7, 2, 3)),
        Op::Relu,
        Op::Pool(MaxPool {
            kernel: 3,
            stride: 2,
            pad: 1,
        }),
    ];
    let widths = [64usize, 128, 256, 512];
    let mut in_ch = 64;
    for (stage, (&depth, &ch)) in depths.iter().zip(&widths).enumerate() {
        for block in 0..depth {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let blk = if bottleneck {
                bottleneck_block(b, in_ch, ch, stride)
            } else {
                basic_block(b, in_ch, ch, stride)
            };
            ops.extend(blk);
            in_ch = if bottleneck { ch * 4 } else { ch };
        }
    }
    ops
}

/// Build a registry encoder with freshly initialized parameters.
pub fn build_encoder<F: Real>(
    spec: &EncoderSpec,
    params: &mut ParamSet<F>,
    rng: &mut ChaCha12Rng,
) -> Result<Encoder, NetworkError> {
    let mut b = Builder {
        params,
        rng,
        next_id: 0,
    };
    const M: i32 = -1;
    let (ops, min_input) = match spec.name.as_str() {
        "tiny" => {
            let ops = vec![
                Op::Conv(b.conv(3, 8, 3, 2, 1)),
                Op::Relu,
                Op::Pool(MaxPool {
                    kernel: 2,
                    stride: 2,
                    pad: 0,
                }),
                Op::Conv(b.conv(8, 8, 3, 1, 1)),
                Op::Relu,
            ];
            (ops, 8)
        }
        "vgg11" => (
            vgg_ops(&mut b, &[64, M, 128, M, 256, 256, M, 512, 512, M, 512, 512, M]),
            32,
        ),
        "vgg16" => (
            vgg_ops(
                &mut b,
                &[64, 64, M, 128, 128, M, 256, 256, 256, M, 512, 512, 512, M, 512, 512, 512, M],
            ),
            32,
        ),
        "resnet18" => (resnet_ops(&mut b, [2, 2, 2, 2], false), 32),
        "resnet34" => (resnet_ops(&mut b, [3, 4, 6, 3], false), 32),
        "resnet50" => (resnet_ops(&mut b, [3, 4, 6, 3], true), 32),
        other => return Err(NetworkError::UnknownEncoder(other.to_string())),
    };
    Ok(Encoder {
        ops,
        feature_dim: spec.feature_dim,
        min_input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn feature_shape(name: &str, input: usize) -> (usize, usize) {
        let spec = EncoderSpec::by_name(name).unwrap();
        let mut params = ParamSet::default();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let enc = build_encoder::<f32>(&spec, &mut params, &mut rng).unwrap();
        let x = Tensor4::zeros(2, 3, input, input);
        let feat = enc.forward_infer(x, &params).unwrap();
        (feat.rows, feat.cols)
    }

    #[test]
    fn registry_feature_dims() {
        assert_eq!(feature_shape("tiny", 16), (2, 8));
        assert_eq!(feature_shape("vgg11", 32), (2, 512));
        assert_eq!(feature_shape("vgg16", 32), (2, 512));
        assert_eq!(feature_shape("resnet18", 32), (2, 512));
        assert_eq!(feature_shape("resnet34", 32), (2, 512));
        assert_eq!(feature_shape("resnet50", 32), (2, 2048));
    }

    #[test]
    fn unknown_encoder_is_rejected() {
        assert!(matches!(
            EncoderSpec::by_name("vgg19"),
            Err(NetworkError::UnknownEncoder(_))
        ));
    }

    #[test]
    fn too_small_input_is_rejected() {
        let spec = EncoderSpec::by_name("vgg11").unwrap();
        let mut params = ParamSet::default();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let enc = build_encoder::<f32>(&spec, &mut params, &mut rng).unwrap();
        let x = Tensor4::zeros(1, 3, 8, 8);
        assert!(matches!(
            enc.forward_infer(x, &params),
            Err(NetworkError::SpatialTooSmall { .. })
        ));
    }

    #[test]
    fn residual_encoder_gradients_flow() {
        // Smoke check: a resnet18 train pass accumulates a nonzero gradient
        // in the stem conv.
        let spec = EncoderSpec::by_name("resnet18").unwrap();
        let mut params = ParamSet::default();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let enc = build_encoder::<f64>(&spec, &mut params, &mut rng).unwrap();
        let x = Tensor4::from_vec(
            1,
            3,
            32,
            32,
            (0..3 * 32 * 32).map(|i| (i % 17) as f64 / 17.0).collect(),
        );
        let (feat, cache) = enc.forward_train(x, &params).unwrap();
        let mut grads = Grads::zeros_like(&params);
        enc.backward(&feat, &cache, &params, &mut grads);
        let stem_grad_norm: f64 = grads.by_param[0].iter().map(|g| g * g).sum();
        assert!(stem_grad_norm > 0.0);
    }
}

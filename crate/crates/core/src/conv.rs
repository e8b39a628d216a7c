//! Convolution as gather + matmul.
//!
//! Images and feature maps are stored channel-last as `[H*W, C]` rows.
//! A conv layer builds a flat index map once (im2col), gathers the input
//! into a `[out_positions, k*k*C_in]` matrix, and multiplies by a
//! `[k*k*C_in, C_out]` weight. Transposed convolution uses the same
//! machinery with an inverted index map.

use crate::error::{Result, StaError};
use crate::graph::{Graph, NodeId, PAD};

#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    pub fn deconv_out_hw(&self) -> (usize, usize) {
        let oh = (self.in_h - 1) * self.stride + self.kernel - 2 * self.pad;
        let ow = (self.in_w - 1) * self.stride + self.kernel - 2 * self.pad;
        (oh, ow)
    }

    /// im2col index map: one row per output position, `k*k*in_c` flat
    /// input indices each (PAD where the kernel overhangs the border).
    pub fn conv_index_map(&self) -> Vec<usize> {
        let (oh, ow) = self.out_hw();
        let k = self.kernel;
        let mut map = Vec::with_capacity(oh * ow * k * k * self.in_c);
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        let inside = iy >= 0
                            && ix >= 0
                            && (iy as usize) < self.in_h
                            && (ix as usize) < self.in_w;
                        for c in 0..self.in_c {
                            if inside {
                                map.push((iy as usize * self.in_w + ix as usize) * self.in_c + c);
                            } else {
                                map.push(PAD);
                            }
                        }
                    }
                }
            }
        }
        map
    }

    /// Index map for the transposed convolution: one row per *output*
    /// position of the upsampled map, gathering the input positions that
    /// contribute through each kernel element.
    pub fn deconv_index_map(&self) -> Vec<usize> {
        let (oh, ow) = self.deconv_out_hw();
        let k = self.kernel;
        let mut map = Vec::with_capacity(oh * ow * k * k * self.in_c);
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    for kx in 0..k {
                        let ny = oy as isize + self.pad as isize - ky as isize;
                        let nx = ox as isize + self.pad as isize - kx as isize;
                        let valid = ny >= 0
                            && nx >= 0
                            && ny % self.stride as isize == 0
                            && nx % self.stride as isize == 0
                            && (ny / self.stride as isize) < self.in_h as isize
                            && (nx / self.stride as isize) < self.in_w as isize;
                        for c in 0..self.in_c {
                            if valid {
                                let iy = ny as usize / self.stride;
                                let ix = nx as usize / self.stride;
                                map.push((iy * self.in_w + ix) * self.in_c + c);
                            } else {
                                map.push(PAD);
                            }
                        }
                    }
                }
            }
        }
        map
    }
}

/// Apply a (possibly transposed) convolution on the graph.
/// `input` is `[in_h*in_w, in_c]`, `weight` is `[k*k*in_c, out_c]`,
/// `bias` is `[out_c]`; returns `[out_h*out_w, out_c]`.
pub fn conv_apply(
    g: &mut Graph,
    input: NodeId,
    index_map: &[usize],
    patch_len: usize,
    weight: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    if index_map.len() % patch_len != 0 {
        return Err(StaError::shape(
            "conv_apply",
            format!("index map {} not divisible by patch {}", index_map.len(), patch_len),
        ));
    }
    let rows = index_map.len() / patch_len;
    let cols = g.gather_flat(input, index_map, vec![rows, patch_len])?;
    let out = g.matmul(cols, weight)?;
    g.add_row_broadcast(out, bias)
}

/// Learned (de)convolution layer with a precomputed index map.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub shape: ConvShape,
    pub out_c: usize,
    pub transposed: bool,
    index_map: Vec<usize>,
}

pub struct ConvLayerNodes {
    pub w: NodeId,
    pub b: NodeId,
}

impl ConvLayer {
    pub fn new(shape: ConvShape, out_c: usize, transposed: bool, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let patch = shape.kernel * shape.kernel * shape.in_c;
        let std = 1.0 / (patch as f64).sqrt();
        let index_map = if transposed {
            shape.deconv_index_map()
        } else {
            shape.conv_index_map()
        };
        ConvLayer {
            weight: Tensor::randn(vec![patch, out_c], std, rng),
            bias: Tensor::zeros(vec![out_c]),
            shape,
            out_c,
            transposed,
            index_map,
        }
    }

    pub fn out_positions(&self) -> usize {
        let (h, w) = if self.transposed {
            self.shape.deconv_out_hw()
        } else {
            self.shape.out_hw()
        };
        h * w
    }

    pub fn bind(&self, g: &mut Graph) -> ConvLayerNodes {
        ConvLayerNodes {
            w: g.leaf(&self.weight),
            b: g.leaf(&self.bias),
        }
    }

    pub fn apply(&self, g: &mut Graph, n: &ConvLayerNodes, x: NodeId) -> Result<NodeId> {
        let patch = self.shape.kernel * self.shape.kernel * self.shape.in_c;
        conv_apply(g, x, &self.index_map, patch, n.w, n.b)
    }

    pub fn take_grads(&mut self, g: &Graph, n: &ConvLayerNodes) {
        self.weight.grad = Some(g.grad(n.w).to_vec());
        self.bias.grad = Some(g.grad(n.b).to_vec());
    }
}

use crate::nn::{join, Params};
use crate::tensor::Tensor;

impl Params for ConvLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "w"), &self.weight);
        f(join(prefix, "b"), &self.bias);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "w"), &mut self.weight);
        f(join(prefix, "b"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_output_sizes() {
        let s = ConvShape {
            in_h: 16,
            in_w: 16,
            in_c: 3,
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        assert_eq!(s.out_hw(), (8, 8));
        let d = ConvShape {
            in_h: 4,
            in_w: 4,
            in_c: 16,
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        assert_eq!(d.deconv_out_hw(), (8, 8));
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        // 1x1 kernel, stride 1, identity weight: conv output equals input
        let s = ConvShape {
            in_h: 3,
            in_w: 3,
            in_c: 2,
            kernel: 1,
            stride: 1,
            pad: 0,
        };
        let mut g = Graph::new();
        let x = g
            .leaf_from(vec![9, 2], (0..18).map(|i| i as f64).collect())
            .unwrap();
        let w = g
            .leaf_from(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let b = g.leaf_from(vec![2], vec![0.0, 0.0]).unwrap();
        let map = s.conv_index_map();
        let y = conv_apply(&mut g, x, &map, 2, w, b).unwrap();
        assert_eq!(g.values(y), g.values(x));
    }

    #[test]
    fn conv_matches_direct_summation() {
        // 2x2 kernel stride 1 over a 3x3 single-channel image, no pad
        let s = ConvShape {
            in_h: 3,
            in_w: 3,
            in_c: 1,
            kernel: 2,
            stride: 1,
            pad: 0,
        };
        let img: Vec<f64> = (1..=9).map(|i| i as f64).collect();
        let w = vec![1.0, 2.0, 3.0, 4.0]; // [k*k*1, 1]
        let mut g = Graph::new();
        let x = g.leaf_from(vec![9, 1], img.clone()).unwrap();
        let wn = g.leaf_from(vec![4, 1], w.clone()).unwrap();
        let b = g.leaf_from(vec![1], vec![0.0]).unwrap();
        let map = s.conv_index_map();
        let y = conv_apply(&mut g, x, &map, 4, wn, b).unwrap();
        // direct: out(oy,ox) = sum_{ky,kx} img[oy+ky][ox+kx] * w[ky*2+kx]
        for oy in 0..2 {
            for ox in 0..2 {
                let mut acc = 0.0;
                for ky in 0..2 {
                    for kx in 0..2 {
                        acc += img[(oy + ky) * 3 + (ox + kx)] * w[ky * 2 + kx];
                    }
                }
                assert_eq!(g.values(y)[oy * 2 + ox], acc);
            }
        }
    }

    #[test]
    fn deconv_then_conv_shapes_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = ConvShape {
            in_h: 8,
            in_w: 8,
            in_c: 2,
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        let dec = ConvShape {
            in_h: 4,
            in_w: 4,
            in_c: 3,
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::randn(vec![64, 2], 1.0, &mut rng));
        let w1 = g.leaf(&Tensor::randn(vec![4 * 4 * 2, 3], 0.2, &mut rng));
        let b1 = g.leaf(&Tensor::zeros(vec![3]));
        let h = conv_apply(&mut g, x, &enc.conv_index_map(), 4 * 4 * 2, w1, b1).unwrap();
        assert_eq!(g.shape(h), &[16, 3]);
        let w2 = g.leaf(&Tensor::randn(vec![4 * 4 * 3, 2], 0.2, &mut rng));
        let b2 = g.leaf(&Tensor::zeros(vec![2]));
        let y = conv_apply(&mut g, h, &dec.deconv_index_map(), 4 * 4 * 3, w2, b2).unwrap();
        assert_eq!(g.shape(y), &[64, 2]);
    }

    #[test]
    fn conv_gradient_passes_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = ConvShape {
            in_h: 4,
            in_w: 4,
            in_c: 2,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let w = Tensor::randn(vec![3 * 3 * 2, 3], 0.4, &mut rng);
        let b = Tensor::randn(vec![3], 0.1, &mut rng);
        let x = Tensor::randn(vec![16, 2], 1.0, &mut rng);
        let map = s.conv_index_map();
        let err = finite_difference_check(
            |g, xid| {
                let wn = g.leaf(&w);
                let bn = g.leaf(&b);
                let y = conv_apply(g, xid, &map, 18, wn, bn)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {}", err);
    }
}

//! Evaluation backbone: a small convolutional attribute classifier trained
//! once on real synthetic images and frozen. Its penultimate activations
//! feed FID and retrieval; its class probabilities feed the inception
//! score. The class target is the joint shape-and-color label (12 ways).

use crate::conv::{ConvLayer, ConvLayerNodes, ConvShape};
use crate::error::{Result, StaError};
use crate::graph::{Graph, NodeId};
use crate::nn::{collect_mut, join, Linear, LinearNodes, Params};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const EVAL_CLASSES: usize = 12;

#[derive(Debug, Clone)]
pub struct EvalNetConfig {
    pub image_size: usize,
    pub channels: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub feature_dim: usize,
}

impl Default for EvalNetConfig {
    fn default() -> Self {
        EvalNetConfig {
            image_size: 16,
            channels: 3,
            hidden1: 24,
            hidden2: 48,
            feature_dim: 64,
        }
    }
}

pub struct EvalNet {
    pub cfg: EvalNetConfig,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub fc: Linear,
    pub head: Linear,
}

pub struct EvalNetNodes {
    pub conv1: ConvLayerNodes,
    pub conv2: ConvLayerNodes,
    pub fc: LinearNodes,
    pub head: LinearNodes,
}

impl EvalNet {
    pub fn new(cfg: EvalNetConfig, rng: &mut ChaCha8Rng) -> Self {
        // full-resolution first conv: the smallest shapes span ~3 pixels
        // and do not survive an immediate stride-2 reduction
        let s1 = ConvShape {
            in_h: cfg.image_size,
            in_w: cfg.image_size,
            in_c: cfg.channels,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let conv1 = ConvLayer::new(s1, cfg.hidden1, false, rng);
        let s2 = ConvShape {
            in_h: cfg.image_size,
            in_w: cfg.image_size,
            in_c: cfg.hidden1,
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        let conv2 = ConvLayer::new(s2, cfg.hidden2, false, rng);
        // global average pooling: features describe content, not where it
        // sits, so novel attribute combinations classify correctly
        let fc = Linear::new(cfg.hidden2, cfg.feature_dim, rng);
        let head = Linear::new(cfg.feature_dim, EVAL_CLASSES, rng);
        EvalNet {
            cfg,
            conv1,
            conv2,
            fc,
            head,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> EvalNetNodes {
        EvalNetNodes {
            conv1: self.conv1.bind(g),
            conv2: self.conv2.bind(g),
            fc: self.fc.bind(g),
            head: self.head.bind(g),
        }
    }

    /// Forward one image; returns (penultimate features `[1,F]`,
    /// logits `[1,12]`).
    pub fn forward_with(
        &self,
        g: &mut Graph,
        n: &EvalNetNodes,
        image: &[f64],
    ) -> Result<(NodeId, NodeId)> {
        let pixels = self.cfg.image_size * self.cfg.image_size;
        if image.len() != pixels * self.cfg.channels {
            return Err(StaError::shape(
                "evalnet",
                format!(
                    "image has {} values, expected {}",
                    image.len(),
                    pixels * self.cfg.channels
                ),
            ));
        }
        let x = g.leaf_from(vec![pixels, self.cfg.channels], image.to_vec())?;
        let h = self.conv1.apply(g, &n.conv1, x)?;
        let h = g.gelu(h);
        let h = self.conv2.apply(g, &n.conv2, h)?;
        let h = g.gelu(h);
        // global average pool over positions
        let n_pos = g.shape(h)[0];
        let ones = g.leaf(&crate::tensor::Tensor::full(vec![1, n_pos], 1.0 / n_pos as f64));
        let pooled = g.matmul(ones, h)?;
        let feat = self.fc.apply(g, &n.fc, pooled)?;
        let feat = g.gelu(feat);
        let logits = self.head.apply(g, &n.head, feat)?;
        Ok((feat, logits))
    }

    /// Features and class probabilities for a set of images (frozen use).
    pub fn extract(&self, images: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut features = Vec::with_capacity(images.len() * self.cfg.feature_dim);
        let mut probs = Vec::with_capacity(images.len() * EVAL_CLASSES);
        for image in images {
            let mut g = Graph::new();
            let n = self.bind(&mut g);
            let (feat, logits) = self.forward_with(&mut g, &n, image)?;
            features.extend_from_slice(g.values(feat));
            let sm = g.softmax(logits, 1)?;
            probs.extend_from_slice(g.values(sm));
        }
        Ok((features, probs))
    }

    /// Argmax class per image.
    pub fn classify(&self, images: &[Vec<f64>]) -> Result<Vec<usize>> {
        let (_, probs) = self.extract(images)?;
        Ok(probs
            .chunks(EVAL_CLASSES)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect())
    }

    pub fn take_grads(&mut self, g: &Graph, n: &EvalNetNodes) {
        self.conv1.take_grads(g, &n.conv1);
        self.conv2.take_grads(g, &n.conv2);
        self.fc.take_grads(g, &n.fc);
        self.head.take_grads(g, &n.head);
    }
}

impl Params for EvalNet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.fc.visit(&join(prefix, "fc"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

pub struct EvalNetTrainer {
    pub net: EvalNet,
    pub opt: OptimizerState,
}

impl EvalNetTrainer {
    /// One epoch of cross-entropy training; returns mean batch loss.
    pub fn train_epoch(
        &mut self,
        images: &[Vec<f64>],
        labels: &[usize],
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(StaError::invalid(
                "evalnet_train",
                "images/labels length mismatch or empty",
            ));
        }
        let mut order: Vec<usize> = (0..images.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch_size.max(1)) {
            let mut g = Graph::new();
            let nodes = self.net.bind(&mut g);
            let mut logit_rows = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (_, logits) = self.net.forward_with(&mut g, &nodes, &images[i])?;
                logit_rows.push(logits);
                targets.push(labels[i]);
            }
            let all = g.concat_rows(&logit_rows)?;
            let loss = g.cross_entropy(all, &targets)?;
            total += g.value_scalar(loss);
            batches += 1;
            g.backward(loss)?;
            self.net.take_grads(&g, &nodes);
            let mut named = collect_mut(&mut self.net);
            let mut refs: Vec<(&str, &mut Tensor)> = named
                .iter_mut()
                .map(|(n, t)| (n.as_str(), &mut **t))
                .collect();
            self.opt.step(&mut refs)?;
        }
        Ok(total / batches as f64)
    }

    pub fn accuracy(&self, images: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let pred = self.net.classify(images)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render, SceneSpec};
    use crate::optim::AdamWConfig;
    use rand::SeedableRng;

    #[test]
    fn feature_dimension_matches_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = EvalNet::new(EvalNetConfig::default(), &mut rng);
        let img = render(&SceneSpec::from_index(0).unwrap());
        let (features, probs) = net.extract(&[img]).unwrap();
        assert_eq!(features.len(), 64);
        assert_eq!(probs.len(), EVAL_CLASSES);
        let s: f64 = probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn extraction_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = EvalNet::new(EvalNetConfig::default(), &mut rng);
        let img = render(&SceneSpec::from_index(100).unwrap());
        let (f1, p1) = net.extract(&[img.clone()]).unwrap();
        let (f2, p2) = net.extract(&[img]).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn short_training_run_fits_a_small_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = EvalNet::new(EvalNetConfig::default(), &mut rng);
        let mut trainer = EvalNetTrainer {
            net,
            opt: OptimizerState::new(AdamWConfig {
                lr: 5e-3,
                ..AdamWConfig::default()
            }),
        };
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for idx in (0..216).step_by(2) {
            let spec = SceneSpec::from_index(idx).unwrap();
            images.push(render(&spec));
            labels.push(spec.shape_color_class());
        }
        let mut first = f64::INFINITY;
        let mut last = f64::INFINITY;
        for epoch in 0..60u64 {
            let mut erng = ChaCha8Rng::seed_from_u64(10 + epoch);
            last = trainer.train_epoch(&images, &labels, 8, &mut erng).unwrap();
            if epoch == 0 {
                first = last;
            }
        }
        assert!(last < 0.5 * first, "loss {} -> {}", first, last);
        let acc = trainer.accuracy(&images, &labels).unwrap();
        assert!(acc > 0.8, "train accuracy {}", acc);
    }
}

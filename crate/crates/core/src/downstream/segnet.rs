//! A small UNet for four-class segmentation and its training objective.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, GroupNorm};
use crate::nn::{Graph, ParamBuilder, ParamStore, Var};
use crate::tensor::Tensor;

pub const SEGNET_PREFIX: &str = "seg";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegNetSpec {
    pub base_width: usize,
    pub depth: usize,
}

impl SegNetSpec {
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
}

impl ConvBlock {
    fn new(b: &mut ParamBuilder<'_, ChaCha8Rng>, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut b.pp("conv1"), cin, cout, 3, 1)?,
            norm1: GroupNorm::new(&mut b.pp("norm1"), cout)?,
            conv2: Conv2d::new(&mut b.pp("conv2"), cout, cout, 3, 1)?,
            norm2: GroupNorm::new(&mut b.pp("norm2"), cout)?,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = self.norm1.forward(g, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        let h = self.norm2.forward(g, h)?;
        Ok(g.relu(h))
    }
}

/// Encoder-decoder with skip connections; outputs per-class logits.
#[derive(Debug, Clone)]
pub struct SegNet {
    pub spec: SegNetSpec,
    pub store: ParamStore,
    down_blocks: Vec<ConvBlock>,
    downsamplers: Vec<Conv2d>,
    bottleneck: ConvBlock,
    up_blocks: Vec<ConvBlock>,
    head: Conv2d,
}

impl SegNet {
    pub fn new(spec: SegNetSpec, seed: u64) -> Result<Self> {
        if spec.base_width == 0 || spec.depth == 0 {
            return Err(Error::param("segnet", "base_width and depth must be positive"));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng, SEGNET_PREFIX);
        let mut down_blocks = Vec::new();
        let mut downsamplers = Vec::new();
        let mut cin = 1;
        for level in 0..spec.depth {
            let w = spec.width(level);
            down_blocks.push(ConvBlock::new(&mut b.pp(format!("down{level}")), cin, w)?);
            downsamplers.push(Conv2d::new(&mut b.pp(format!("pool{level}")), w, w, 3, 2)?);
            cin = w;
        }
        let bottleneck = ConvBlock::new(&mut b.pp("bottleneck"), cin, spec.width(spec.depth))?;
        let mut up_blocks = Vec::new();
        for level in (0..spec.depth).rev() {
            let w = spec.width(level);
            up_blocks.push(ConvBlock::new(&mut b.pp(format!("up{level}")), spec.width(level + 1) + w, w)?);
        }
        let head = Conv2d::new(&mut b.pp("head"), spec.base_width, NUM_CLASSES, 1, 1)?;
        Ok(Self { spec, store, down_blocks, downsamplers, bottleneck, up_blocks, head })
    }

    /// `x[N,1,H,W]` in model space to logits `[N,4,H,W]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let m = self.spec.spatial_multiple();
        if s.len() != 4 || s[1] != 1 || s[2] % m != 0 || s[3] % m != 0 {
            return Err(Error::param("image", format!("shape {s:?} must be [N,1,H,W] with H, W multiples of {m}")));
        }
        let mut skips = Vec::new();
        let mut h = x;
        for (block, down) in self.down_blocks.iter().zip(&self.downsamplers) {
            h = block.forward(g, h)?;
            skips.push(h);
            h = down.forward(g, h)?;
        }
        h = self.bottleneck.forward(g, h)?;
        for block in &self.up_blocks {
            let skip = skips.pop().expect("one skip per level");
            let up = g.upsample2(h)?;
            let cat = g.concat(up, skip)?;
            h = block.forward(g, cat)?;
        }
        self.head.forward(g, h)
    }

    /// Per-pixel argmax over classes for each batch item.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<LabelMap>> {
        let mut g = Graph::inference(&self.store);
        let xv = g.constant(x.clone());
        let logits = self.forward(&mut g, xv)?;
        argmax_maps(g.value(logits))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save_blob(SEGNET_PREFIX, path)
    }

    pub fn load(spec: SegNetSpec, path: &Path) -> Result<Self> {
        let mut net = Self::new(spec, 0)?;
        let n = net.store.load_blob(path)?;
        if n != net.store.len() {
            return Err(Error::Integrity(format!("segmentation weights restored {n} of {} tensors", net.store.len())));
        }
        Ok(net)
    }
}

pub fn argmax_maps(logits: &Tensor) -> Result<Vec<LabelMap>> {
    let s = logits.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let d = logits.data();
    (0..n)
        .map(|b| {
            let labels = (0..h * w)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if d[(b * c + k) * h * w + p] > d[(b * c + best) * h * w + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(h, w, labels)
        })
        .collect()
}

/// Mean pixel cross-entropy plus soft-Dice loss averaged over all classes.
/// `target` is one-hot `[N,4,H,W]`.
pub fn ce_dice_loss(g: &mut Graph, logits: Var, target: &Tensor) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s != target.shape() {
        return Err(Error::shape(target.shape(), &s));
    }
    let pixels = (s[0] * s[2] * s[3]) as f64;
    let y = g.constant(target.clone());
    let logp = g.log_softmax_channels(logits);
    let picked = g.mul(logp, y)?;
    let total = g.sum(picked);
    let ce = g.scale(total, -1.0 / pixels);

    let p = g.softmax_channels(logits);
    let py = g.mul(p, y)?;
    let inter = g.sum_per_channel(py);
    let inter = g.scale(inter, 2.0);
    let inter = g.add_scalar(inter, 1.0);
    let ps = g.sum_per_channel(p);
    let ys = g.sum_per_channel(y);
    let denom = g.add(ps, ys)?;
    let denom = g.add_scalar(denom, 1.0);
    let ratio = g.div(inter, denom)?;
    let mean_dice = g.mean(ratio);
    let dice_loss = g.scale(mean_dice, -1.0);
    let dice_loss = g.add_scalar(dice_loss, 1.0);
    g.add(ce, dice_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> SegNet {
        SegNet::new(SegNetSpec { base_width: 2, depth: 1 }, 3).unwrap()
    }

    #[test]
    fn shapes_and_prediction() {
        let net = SegNet::new(SegNetSpec { base_width: 4, depth: 2 }, 0).unwrap();
        let x = Tensor::zeros(&[2, 1, 8, 8]);
        let maps = net.predict(&x).unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!((maps[0].height, maps[0].width), (8, 8));
        assert!(net.predict(&Tensor::zeros(&[1, 1, 6, 8])).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut net = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[2, 1, 4, 4], &mut rng);
        let labels: Vec<u8> = (0..32).map(|_| rng.random_range(0..4)).collect();
        let target = Tensor::stack_batch(&[
            LabelMap::new(4, 4, labels[..16].to_vec()).unwrap().one_hot(4, 4),
            LabelMap::new(4, 4, labels[16..].to_vec()).unwrap().one_hot(4, 4),
        ])
        .unwrap();
        let eval = |net: &SegNet| {
            let mut g = Graph::inference(&net.store);
            let xv = g.constant(x.clone());
            let l = net.forward(&mut g, xv).unwrap();
            let loss = ce_dice_loss(&mut g, l, &target).unwrap();
            g.value(loss).data()[0]
        };
        let mut g = Graph::new(&net.store);
        let xv = g.constant(x.clone());
        let l = net.forward(&mut g, xv).unwrap();
        let loss = ce_dice_loss(&mut g, l, &target).unwrap();
        let grads = g.backward(loss).unwrap();
        let ids: Vec<_> = net.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let analytic = grads.get(id).unwrap().clone();
            for k in (0..analytic.numel()).step_by(3) {
                let h = 1e-5;
                let orig = net.store.value(id).data()[k];
                net.store.value_mut(id).data_mut()[k] = orig + h;
                let up = eval(&net);
                net.store.value_mut(id).data_mut()[k] = orig - h;
                let down = eval(&net);
                net.store.value_mut(id).data_mut()[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic.data()[k];
                assert!((fd - a).abs() <= 1e-3 * fd.abs().max(a.abs()).max(1e-4), "{fd} vs {a}");
            }
        }
    }

    #[test]
    fn perfect_logits_give_low_loss() {
        let net = tiny();
        let map = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let target = map.one_hot(2, 2);
        let mut g = Graph::inference(&net.store);
        let confident = g.constant(target.scale(50.0));
        let l = ce_dice_loss(&mut g, confident, &target).unwrap();
        assert!(g.value(l).data()[0] < 1e-6);
        assert_eq!(argmax_maps(&target).unwrap()[0], map);
    }

    #[test]
    fn weights_round_trip() {
        let net = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seg.bin");
        net.save(&p).unwrap();
        let back = SegNet::load(net.spec, &p).unwrap();
        assert_eq!(back.store.checksum(SEGNET_PREFIX), net.store.checksum(SEGNET_PREFIX));
    }
}

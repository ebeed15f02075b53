//! Compact trainable stand-ins: a strided 2D encoder emitting the feature
//! pyramid, the depth head, and a shallow 3D refiner with its two heads.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Graph, Var};
use crate::camera::FeatureMap;
use crate::error::{Error, Result};
use crate::lifting::{FeaturePyramid, SCALES};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature channels `C` of every pyramid level and of the lifted volume.
    pub channels: usize,
    /// Depth bins `D`.
    pub depth_bins: usize,
    /// Semantic classes `N` (the class head emits `N + 1` logits).
    pub n_classes: usize,
    pub encoder_width: usize,
    pub refiner_width: usize,
    /// Residual 3D blocks at full resolution before the coarse level.
    pub refiner_depth: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { channels: 8, depth_bins: 16, n_classes: 8, encoder_width: 16, refiner_width: 16, refiner_depth: 1, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [self.channels, self.depth_bins, self.n_classes, self.encoder_width, self.refiner_width];
        if sizes.contains(&0) {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.n_classes >= 255 {
            return Err(Error::Config("at most 254 semantic classes".into()));
        }
        Ok(())
    }
}

/// Named parameter arrays plus the config that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyNet {
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

/// Parameters registered on a tape for one forward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    fn get(&self, name: &str) -> Var {
        self.vars[name]
    }
}

/// Layer table: name, kernel shape, fan-in, whether it feeds a ReLU.
fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, usize, bool)> {
    let (e, ch, r) = (c.encoder_width, c.channels, c.refiner_width);
    let mut layers = vec![("enc.0".to_string(), vec![9, 3, e], 27, true)];
    for s in 1..4 {
        layers.push((format!("enc.{s}"), vec![9, e, e], 9 * e, true));
    }
    for s in SCALES {
        layers.push((format!("proj.{s}"), vec![e, ch], e, false));
    }
    layers.push(("depth.0".into(), vec![9, ch, e], 9 * ch, true));
    layers.push(("depth.1".into(), vec![e, c.depth_bins], e, false));
    layers.push(("ref.in".into(), vec![27, ch, r], 27 * ch, true));
    for b in 0..c.refiner_depth {
        layers.push((format!("ref.block{b}"), vec![27, r, r], 27 * r, true));
    }
    layers.push(("ref.down".into(), vec![27, r, r], 27 * r, true));
    layers.push(("ref.out".into(), vec![27, r, r], 27 * r, true));
    layers.push(("head.occ".into(), vec![r, 2], r, false));
    layers.push(("head.sem".into(), vec![r + 2, c.n_classes + 1], r + 2, false));
    layers
}

impl ToyNet {
    /// Fan-in scaled uniform initialization drawn from the config seed.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = BTreeMap::new();
        for (name, shape, fan_in, relu) in layout(&config) {
            let bound = if relu { (6.0 / fan_in as f64).sqrt() } else { (1.0 / fan_in as f64).sqrt() };
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            let cout = *shape.last().unwrap();
            params.insert(format!("{name}.w"), Tensor::from_vec(&shape, data)?);
            params.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
        }
        Ok(ToyNet { config, params })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn n_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Zero both prediction heads.
    pub fn zero_heads(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with("head.") {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Register parameters as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.params.iter().map(|(k, v)| (k.clone(), g.param(v.clone()))).collect() }
    }

    /// Register parameters as constants (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.params.iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect() }
    }

    /// Collect per-parameter gradients after a backward pass.
    pub fn gradients(&self, bound: &Bound, grads: &mut Grads) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), grads.take(bound.get(k)).unwrap_or_else(|| Tensor::zeros(v.shape()))))
            .collect()
    }

    fn layer2d(&self, g: &mut Graph, b: &Bound, name: &str, x: Var, stride: usize) -> Var {
        let y = g.conv2d(x, b.get(&format!("{name}.w")), b.get(&format!("{name}.b")), stride);
        g.relu(y)
    }

    fn layer3d(&self, g: &mut Graph, b: &Bound, name: &str, x: Var) -> Var {
        let y = g.conv3d(x, b.get(&format!("{name}.w")), b.get(&format!("{name}.b")));
        g.relu(y)
    }

    fn linear(&self, g: &mut Graph, b: &Bound, name: &str, x: Var) -> Var {
        g.pointwise(x, b.get(&format!("{name}.w")), b.get(&format!("{name}.b")))
    }

    /// Encode an `[H, W, 3]` image into pyramid levels `[H/s, W/s, C]` for
    /// `s` in 1, 2, 4, 8.
    pub fn encode_2d_op(&self, g: &mut Graph, b: &Bound, image: Var) -> Result<[Var; 4]> {
        let s = g.value(image).shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::shape(format!("image must be [H, W, 3], got {s:?}")));
        }
        if s[0] % 8 != 0 || s[1] % 8 != 0 {
            return Err(Error::shape(format!("image {}x{} is not divisible by 8", s[0], s[1])));
        }
        let mut h = self.layer2d(g, b, "enc.0", image, 1);
        let mut out = Vec::with_capacity(4);
        for (level, scale) in SCALES.iter().enumerate() {
            if level > 0 {
                h = self.layer2d(g, b, &format!("enc.{level}"), h, 2);
            }
            out.push(self.linear(g, b, &format!("proj.{scale}"), h));
        }
        Ok([out[0], out[1], out[2], out[3]])
    }

    /// Depth head on the scale-8 level: `[h, w, C] -> [h, w, D]` logits.
    pub fn depth_head_op(&self, g: &mut Graph, b: &Bound, feature: Var) -> Var {
        let h = self.layer2d(g, b, "depth.0", feature, 1);
        self.linear(g, b, "depth.1", h)
    }

    /// Refine an `[X, Y, Z, C]` volume. Returns `(F_3D, occupancy logits,
    /// class logits)`; the class head sees `[F_3D ‖ occupancy logits]`.
    pub fn refine_3d_op(&self, g: &mut Graph, b: &Bound, volume: Var) -> Result<(Var, Var, Var)> {
        let s = g.value(volume).shape().to_vec();
        if s.len() != 4 || s[3] != self.config.channels {
            return Err(Error::shape(format!("volume {s:?} does not carry {} channels", self.config.channels)));
        }
        let mut h = self.layer3d(g, b, "ref.in", volume);
        for blk in 0..self.config.refiner_depth {
            let y = self.layer3d(g, b, &format!("ref.block{blk}"), h);
            h = g.add(h, y);
        }
        if s[..3].iter().all(|d| d % 2 == 0) {
            let coarse = g.avg_pool3d_2(h);
            let coarse = self.layer3d(g, b, "ref.down", coarse);
            let up = g.upsample3d_2(coarse);
            h = g.add(h, up);
        } else {
            let y = self.layer3d(g, b, "ref.down", h);
            h = g.add(h, y);
        }
        let f3d = self.layer3d(g, b, "ref.out", h);
        let occ = self.linear(g, b, "head.occ", f3d);
        let joined = g.concat_last(f3d, occ);
        let sem = self.linear(g, b, "head.sem", joined);
        Ok((f3d, occ, sem))
    }

    pub fn encode_2d(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let x = g.constant(image.clone());
        let levels = self.encode_2d_op(&mut g, &b, x)?;
        let maps = levels.map(|v| {
            let t = g.value(v);
            let s = t.shape();
            FeatureMap::new(s[0], s[1], s[2], t.data().to_vec()).expect("encoder output shape")
        });
        FeaturePyramid::new(maps)
    }

    pub fn depth_head(&self, feature: &FeatureMap) -> Result<Tensor> {
        if feature.channels != self.config.channels {
            return Err(Error::shape("depth head input channel mismatch"));
        }
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let x = g.constant(Tensor::from_vec(&[feature.height, feature.width, feature.channels], feature.data.clone())?);
        let y = self.depth_head_op(&mut g, &b, x);
        Ok(g.value(y).clone())
    }

    pub fn refine_3d(&self, volume: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let x = g.constant(volume.clone());
        let (f, o, s) = self.refine_3d_op(&mut g, &b, x)?;
        Ok((g.value(f).clone(), g.value(o).clone(), g.value(s).clone()))
    }

    /// Binary checkpoint: magic, version, JSON header with the config and
    /// tensor shapes, little-endian `f64` payloads, CRC-32 trailer.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            tensors: self.params.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for t in self.params.values() {
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() < 20 || &buf[..4] != CHECKPOINT_MAGIC {
            return Err(Error::load("not a checkpoint file"));
        }
        let (body, trailer) = buf.split_at(buf.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
            return Err(Error::load("checkpoint checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::load(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(body.get(16..16 + hlen).ok_or_else(|| Error::load("truncated header"))?)?;
        let expected = ToyNet::new(header.config.clone())?;
        let mut pos = 16 + hlen;
        let mut params = BTreeMap::new();
        for (name, shape) in header.tensors {
            match expected.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(Error::load(format!("parameter {name} {shape:?} does not fit the config"))),
            }
            let n: usize = shape.iter().product();
            let bytes = body.get(pos..pos + 8 * n).ok_or_else(|| Error::load("truncated payload"))?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.insert(name, Tensor::from_vec(&shape, data)?);
            pos += 8 * n;
        }
        if pos != body.len() || params.len() != expected.params.len() {
            return Err(Error::load("checkpoint payload does not match its header"));
        }
        Ok(ToyNet { config: header.config, params })
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SSCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<(String, Vec<usize>)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::cross_entropy_op;
    use std::rc::Rc;

    fn small(seed: u64) -> ToyNet {
        ToyNet::new(ModelConfig { channels: 4, depth_bins: 5, n_classes: 3, encoder_width: 6, refiner_width: 5, refiner_depth: 1, seed })
            .unwrap()
    }

    fn image(h: usize, w: usize) -> Tensor {
        let data = (0..h * w * 3).map(|i| ((i * 37 % 101) as f64) / 101.0).collect();
        Tensor::from_vec(&[h, w, 3], data).unwrap()
    }

    #[test]
    fn pyramid_shapes() {
        let p = small(1).encode_2d(&image(32, 32)).unwrap();
        for (m, s) in p.maps().iter().zip(SCALES) {
            assert_eq!((m.height, m.width, m.channels), (32 / s, 32 / s, 4));
        }
        assert!(small(1).encode_2d(&image(20, 32)).is_err());
    }

    #[test]
    fn encoder_is_deterministic_and_seed_sensitive() {
        let a = small(1).encode_2d(&image(16, 16)).unwrap();
        let b = small(1).encode_2d(&image(16, 16)).unwrap();
        let c = small(2).encode_2d(&image(16, 16)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn depth_head_shape_and_finite() {
        let net = small(3);
        let p = net.encode_2d(&image(16, 24)).unwrap();
        let y = net.depth_head(&p.maps()[3]).unwrap();
        assert_eq!(y.shape(), &[2, 3, 5]);
        assert!(y.all_finite());
    }

    #[test]
    fn depth_head_gradient_reaches_encoder() {
        let net = small(4);
        let mut g = Graph::new();
        let b = net.bind(&mut g);
        let x = g.constant(image(16, 16));
        let levels = net.encode_2d_op(&mut g, &b, x).unwrap();
        let logits = net.depth_head_op(&mut g, &b, levels[3]);
        let targets = Rc::new(vec![Some(1), Some(3), Some(0), Some(4)]);
        let loss = cross_entropy_op(&mut g, logits, targets, None).unwrap();
        let mut grads = g.backward(loss);
        let grads = net.gradients(&b, &mut grads);
        for name in ["enc.0.w", "enc.3.w", "proj.8.w", "depth.0.w", "depth.1.w"] {
            assert!(grads[name].max_abs() > 0.0, "{name}");
        }
        assert_eq!(grads["proj.1.w"].max_abs(), 0.0);
    }

    #[test]
    fn refiner_shapes() {
        let net = small(5);
        let v = Tensor::full(&[4, 2, 4, 4], 0.3);
        let (f, o, s) = net.refine_3d(&v).unwrap();
        assert_eq!(f.shape(), &[4, 2, 4, 5]);
        assert_eq!(o.shape(), &[4, 2, 4, 2]);
        assert_eq!(s.shape(), &[4, 2, 4, 4]);
        // odd extents skip the coarse level but keep the contract
        let (_, o, _) = net.refine_3d(&Tensor::full(&[3, 1, 3, 4], 0.3)).unwrap();
        assert_eq!(o.shape(), &[3, 1, 3, 2]);
    }

    #[test]
    fn zero_heads_give_uniform_logits() {
        let mut net = small(6);
        net.zero_heads();
        let (_, o, s) = net.refine_3d(&Tensor::zeros(&[2, 2, 2, 4])).unwrap();
        assert!(o.data().iter().all(|&x| x == 0.0));
        assert!(s.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn class_head_reads_both_branches() {
        let net = small(7);
        let v = Tensor::from_vec(&[2, 2, 2, 4], (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let (_, _, base) = net.refine_3d(&v).unwrap();
        let r = net.config.refiner_width;
        // zero the rows of the class head that read the occupancy logits
        let mut no_occ = net.clone();
        let w = no_occ.param_mut("head.sem.w").unwrap();
        let k = w.last_dim();
        w.data_mut()[r * k..].fill(0.0);
        let (_, _, a) = no_occ.refine_3d(&v).unwrap();
        assert_ne!(a, base);
        // and those that read F_3D
        let mut no_f = net.clone();
        no_f.param_mut("head.sem.w").unwrap().data_mut()[..r * k].fill(0.0);
        let (_, o, b) = no_f.refine_3d(&v).unwrap();
        assert_ne!(b, base);
        // with F_3D rows gone, class logits are an affine map of the occupancy logits
        let wsem = no_f.params()["head.sem.w"].clone();
        for n in 0..8 {
            for c in 0..k {
                let expect = o.row(n)[0] * wsem.data()[r * k + c] + o.row(n)[1] * wsem.data()[(r + 1) * k + c];
                assert!((b.row(n)[c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let net = small(8);
        let mut bytes = Vec::new();
        net.write_checkpoint(&mut bytes).unwrap();
        assert_eq!(ToyNet::read_checkpoint(bytes.as_slice()).unwrap(), net);
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 1;
        assert!(matches!(ToyNet::read_checkpoint(bad.as_slice()), Err(Error::Load(_))));
        assert!(ToyNet::read_checkpoint(&bytes[..10]).is_err());
    }
}

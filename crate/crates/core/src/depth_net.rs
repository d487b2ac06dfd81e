//! Small encoder-decoder depth network.
//!
//! Three stride-2 encoder convolutions (8/16/32 channels), three nearest-upsample
//! decoder convolutions with skip concatenation, and a sigmoid disparity head mapped
//! onto the inverse-depth interval `[1/d_max, 1/d_min]`.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Element, ParamLayout, ParamVector, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MADN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthRange {
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for DepthRange {
    fn default() -> Self {
        Self {
            d_min: 0.1,
            d_max: 10.0,
        }
    }
}

impl DepthRange {
    /// Depth for a sigmoid activation `s` in `[0, 1]`.
    pub fn depth_of(&self, s: f64) -> f64 {
        1.0 / (1.0 / self.d_max + (1.0 / self.d_min - 1.0 / self.d_max) * s)
    }

    /// Inverse of [`DepthRange::depth_of`].
    pub fn sigma_of(&self, depth: f64) -> f64 {
        (1.0 / depth - 1.0 / self.d_max) / (1.0 / self.d_min - 1.0 / self.d_max)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arch {
    pub in_channels: usize,
    pub encoder: [usize; 3],
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            in_channels: 1,
            encoder: [8, 16, 32],
        }
    }
}

impl Arch {
    pub fn layout(&self) -> ParamLayout {
        let c = self.in_channels;
        let [e1, e2, e3] = self.encoder;
        let mut l = ParamLayout::new();
        let mut conv = |name: &str, cout: usize, cin: usize| {
            l.push(format!("{name}.weight"), [cout, cin, 3, 3]);
            l.push(format!("{name}.bias"), [cout]);
        };
        conv("enc1", e1, c);
        conv("enc2", e2, e1);
        conv("enc3", e3, e2);
        conv("dec3", e2, e3 + e2);
        conv("dec2", e1, e2 + e1);
        conv("dec1", e1, e1 + c);
        conv("head", 1, e1);
        l
    }
}

/// Nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    /// Pre-sigmoid head activations, `[1, 1, H, W]`.
    pub logits: Var,
    /// Sigmoid disparity in `[0, 1]`.
    pub sigma: Var,
    /// Metric depth, `[1, 1, H, W]`.
    pub depth: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthNet {
    pub params: ParamVector,
    pub arch: Arch,
    pub range: DepthRange,
    pub seed: u64,
    pub step: u64,
}

impl DepthNet {
    pub fn init(seed: u64) -> Self {
        Self::with_arch(Arch::default(), DepthRange::default(), seed)
    }

    /// Fan-in scaled normal weights and zero biases, except the head bias, which
    /// starts at the depth halfway through the range in log space. A zero head bias
    /// sits at 0.2 m, and the first updates toward real scene depths overshoot into
    /// the flat far end of the sigmoid, where training stalls.
    pub fn with_arch(arch: Arch, range: DepthRange, seed: u64) -> Self {
        let layout = Arc::new(arch.layout());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0f32; layout.len()];
        for seg in layout.segments() {
            if seg.shape.len() == 4 {
                let fan_in = (seg.shape[1] * seg.shape[2] * seg.shape[3]) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                for v in &mut values[seg.offset..seg.offset + seg.len()] {
                    *v = normal.sample(&mut rng) as f32;
                }
            }
        }
        let head = layout.segments().last().expect("head bias");
        let prior = range.sigma_of((range.d_min * range.d_max).sqrt());
        let logit = (prior / (1.0 - prior)).ln() as f32;
        values[head.offset..head.offset + head.len()].fill(logit);
        let params = ParamVector::new(layout, values).expect("layout sized");
        Self {
            params,
            arch,
            range,
            seed,
            step: 0,
        }
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::invalid(format!(
                "image size {h}x{w} must be a positive multiple of 8"
            )));
        }
        Ok(())
    }

    /// Records a forward pass for `image` (`[H, W]` or `[C, H, W]`) using bound parameters.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        image: &Tensor<f32>,
    ) -> Result<NetOutput> {
        let (h, w) = image.hw();
        self.check_input(h, w)?;
        let c = image.numel() / (h * w);
        if c != self.arch.in_channels {
            return Err(Error::invalid(format!(
                "network expects {} channels, image has {c}",
                self.arch.in_channels
            )));
        }
        let x = Tensor::<T>::from_fn([1, c, h, w], |i| T::of(image.data()[i] as f64 - 0.5));
        let x = tape.constant(x)?;
        let p = |i: usize| params[i];
        let conv = |tape: &mut Tape<T>, x: Var, i: usize, stride: usize| -> Result<Var> {
            let y = tape.conv2d(x, p(2 * i), Some(p(2 * i + 1)), stride, 1)?;
            tape.elu(y)
        };
        let e1 = conv(tape, x, 0, 2)?;
        let e2 = conv(tape, e1, 1, 2)?;
        let e3 = conv(tape, e2, 2, 2)?;
        let u3 = tape.upsample2x(e3)?;
        let c3 = tape.concat(&[u3, e2], 1)?;
        let d3 = conv(tape, c3, 3, 1)?;
        let u2 = tape.upsample2x(d3)?;
        let c2 = tape.concat(&[u2, e1], 1)?;
        let d2 = conv(tape, c2, 4, 1)?;
        let u1 = tape.upsample2x(d2)?;
        let c1 = tape.concat(&[u1, x], 1)?;
        let d1 = conv(tape, c1, 5, 1)?;
        let logits = tape.conv2d(d1, p(12), Some(p(13)), 1, 1)?;
        let sigma = tape.sigmoid(logits)?;
        let inv_max = 1.0 / self.range.d_max;
        let span = 1.0 / self.range.d_min - inv_max;
        let inv = tape.scale(sigma, span)?;
        let inv = tape.offset(inv, inv_max)?;
        let depth = tape.recip(inv)?;
        Ok(NetOutput {
            logits,
            sigma,
            depth,
        })
    }

    /// Dense depth in meters, `[H, W]`.
    pub fn predict(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let vars = self.params.bind(&mut tape)?;
        let out = self.forward(&mut tape, &vars, image)?;
        let (h, w) = image.hw();
        tape.tensor(out.depth).reshape([h, w])
    }

    /// Like [`DepthNet::predict`] but keeps the tape for differentiation.
    pub fn predict_recorded(
        &self,
        image: &Tensor<f32>,
    ) -> Result<(Tape<f32>, Vec<Var>, NetOutput)> {
        let mut tape = Tape::<f32>::new();
        let vars = self.params.bind(&mut tape)?;
        let out = self.forward(&mut tape, &vars, image)?;
        Ok((tape, vars, out))
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        self.write_body(&mut w)
    }

    pub(crate) fn write_body<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.arch.in_channels as u32).to_le_bytes())?;
        for c in self.arch.encoder {
            w.write_all(&(c as u32).to_le_bytes())?;
        }
        w.write_all(&self.range.d_min.to_le_bytes())?;
        w.write_all(&self.range.d_max.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for v in self.params.values() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        Self::read_body(&mut r)
    }

    pub(crate) fn read_body<R: Read>(r: &mut R) -> Result<Self> {
        let in_channels = read_u32(r)? as usize;
        let mut encoder = [0usize; 3];
        for c in &mut encoder {
            *c = read_u32(r)? as usize;
        }
        let arch = Arch {
            in_channels,
            encoder,
        };
        let range = DepthRange {
            d_min: read_f64(r)?,
            d_max: read_f64(r)?,
        };
        if !(range.d_min > 0.0 && range.d_max > range.d_min) {
            return Err(Error::Checkpoint("invalid depth range".into()));
        }
        let seed = read_u64(r)?;
        let step = read_u64(r)?;
        let n = read_u64(r)? as usize;
        let layout = Arc::new(arch.layout());
        if n != layout.len() {
            return Err(Error::Checkpoint(format!(
                "architecture needs {} parameters, checkpoint holds {n}",
                layout.len()
            )));
        }
        let values = read_f32s(r, n)?;
        Ok(Self {
            params: ParamVector::new(layout, values)?,
            arch,
            range,
            seed,
            step,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn([h, w], |i| ((i % w) as f32 / w as f32 + (i / w) as f32 * 0.01).fract())
    }

    #[test]
    fn output_stays_in_range_and_keeps_shape() {
        let net = DepthNet::init(7);
        for (h, w) in [(8, 8), (16, 24), (32, 32)] {
            let d = net.predict(&ramp(h, w)).unwrap();
            assert_eq!(d.shape(), &[h, w]);
            assert!(d.data().iter().all(|&v| (0.1..=10.0).contains(&v)));
        }
    }

    #[test]
    fn head_endpoints() {
        let r = DepthRange::default();
        assert!((r.depth_of(1.0) - 0.1).abs() < 1e-12);
        assert!((r.depth_of(0.0) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn head_bias_starts_at_log_midpoint() {
        let net = DepthNet::init(0);
        let head = net.params.layout().segments().last().unwrap();
        assert_eq!(head.name, "head.bias");
        let b = net.params.values()[head.offset] as f64;
        let d = net.range.depth_of(1.0 / (1.0 + (-b).exp()));
        assert!((d - 1.0).abs() < 1e-5, "{d}");
    }

    #[test]
    fn bad_sizes_are_rejected() {
        let net = DepthNet::init(0);
        assert!(net.predict(&ramp(12, 16)).is_err());
        assert!(net.predict(&Tensor::zeros([3, 16, 16])).is_err());
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(DepthNet::init(3).params, DepthNet::init(3).params);
        assert_ne!(DepthNet::init(3).params, DepthNet::init(4).params);
    }

    #[test]
    fn prediction_is_bit_identical_across_runs() {
        let a = DepthNet::init(42).predict(&ramp(16, 16)).unwrap();
        let b = DepthNet::init(42).predict(&ramp(16, 16)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_image_gives_constant_interior() {
        // With zero padding only border pixels see the boundary; deep interior pixels of
        // a constant input share one receptive-field pattern per 8x8 phase.
        let net = DepthNet::init(0);
        let img = Tensor::full([64, 64], 0.5f32);
        let d = net.predict(&img).unwrap();
        for y in (24..40).step_by(8) {
            for x in (24..40).step_by(8) {
                assert_eq!(d.at(y, x), d.at(24, 24));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut net = DepthNet::init(11);
        net.step = 17;
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        let back = DepthNet::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, net);
        let img = ramp(16, 16);
        assert_eq!(back.predict(&img).unwrap(), net.predict(&img).unwrap());
        buf[0] = b'X';
        assert!(DepthNet::read_checkpoint(&buf[..]).is_err());
    }
}

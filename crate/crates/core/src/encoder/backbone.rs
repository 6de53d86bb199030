use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::EncoderError;
use crate::diffcore::{ParamTree, ParamVars, Scalar, Tape, Tensor, TensorError, Var};

/// Conv-4 feature extractor: four 3×3 conv + ReLU blocks, 2×2 max pooling
/// after the first two. Once calibrated, outputs are standardized per
/// channel with frozen statistics (`bb.out.mean`, `bb.out.std`).
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    params: ParamTree,
    channels: Vec<usize>,
    pretrained: bool,
}

pub const DEFAULT_CHANNELS: [usize; 4] = [16, 32, 32, 32];
const POOLED_BLOCKS: usize = 2;
const FEATURE_BATCH: usize = 64;
const OUT_MEAN: &str = "bb.out.mean";
const OUT_STD: &str = "bb.out.std";
const STD_FLOOR: f64 = 1e-6;

fn conv_name(k: usize) -> (String, String) {
    (format!("bb.conv{k}.w"), format!("bb.conv{k}.b"))
}

impl Backbone {
    pub fn init<R: Rng>(channels: &[usize], rng: &mut R) -> Self {
        let mut params = ParamTree::new();
        let mut c_in = 3;
        for (k, &c_out) in channels.iter().enumerate() {
            let fan_in = c_in * 9;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let w = (0..c_out * fan_in).map(|_| normal.sample(rng)).collect();
            let (wn, bn) = conv_name(k);
            params.insert(wn, Tensor::new(vec![c_out, c_in, 3, 3], w).expect("conv shape"));
            params.insert(bn, Tensor::zeros(&[c_out]));
            c_in = c_out;
        }
        Self { params, channels: channels.to_vec(), pretrained: false }
    }

    /// Wrap trained parameters. The channel layout is read from the leaves.
    pub fn from_params(params: ParamTree, pretrained: bool) -> Result<Self, TensorError> {
        let mut channels = Vec::new();
        while let Some(w) = params.get(&conv_name(channels.len()).0) {
            channels.push(w.shape()[0]);
        }
        if channels.is_empty() {
            return Err(TensorError::MissingLeaf(conv_name(0).0));
        }
        Ok(Self { params, channels, pretrained })
    }

    pub fn params(&self) -> &ParamTree {
        &self.params
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("at least one block")
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn mark_pretrained(&mut self) {
        self.pretrained = true;
    }

    /// Spatial side of the feature map for a square input of side `size`.
    pub fn feature_size(&self, size: usize) -> usize {
        size >> POOLED_BLOCKS.min(self.channels.len())
    }

    /// `[n, 3, H, W] -> [n, c, H/4, W/4]` on a tape.
    pub fn forward_tape<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamVars, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for k in 0..self.channels.len() {
            let (wn, bn) = conv_name(k);
            h = tape.conv2d(h, params.get(&wn)?, params.get(&bn)?)?;
            h = tape.relu(h);
            if k < POOLED_BLOCKS {
                h = tape.max_pool2(h)?;
            }
        }
        Ok(h)
    }

    fn check(&self) -> Result<(), EncoderError> {
        if self.pretrained {
            Ok(())
        } else {
            Err(EncoderError::Unpretrained)
        }
    }

    fn run_batch(&self, images: &[&Tensor], pool: bool) -> Result<Vec<f64>, TensorError> {
        let [c, h, w] = match images[0].shape() {
            &[c, h, w] => [c, h, w],
            s => return Err(TensorError::Rank { op: "backbone", expected: 3, shape: s.to_vec() }),
        };
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if img.shape() != [c, h, w] {
                return Err(TensorError::ShapeMismatch { op: "backbone", left: vec![c, h, w], right: img.shape().to_vec() });
            }
            data.extend_from_slice(img.data());
        }
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::new(vec![images.len(), c, h, w], data)?);
        let mut out = self.forward_tape(&mut tape, &vars, x)?;
        if pool {
            out = tape.gap(out)?;
        }
        let mut data = tape.value(out).data().to_vec();
        if let (Some(mean), Some(std)) = (self.params.get(OUT_MEAN), self.params.get(OUT_STD)) {
            let c = mean.numel();
            let per = data.len() / (images.len() * c);
            for (k, x) in data.iter_mut().enumerate() {
                let ch = (k / per) % c;
                *x = (*x - mean.data()[ch]) / std.data()[ch];
            }
        }
        Ok(data)
    }

    pub fn is_calibrated(&self) -> bool {
        self.params.get(OUT_MEAN).is_some()
    }

    /// Fix the per-channel mean and standard deviation of the raw feature
    /// maps of `images` (over images and positions) as output statistics.
    pub fn calibrate(&mut self, images: &[&Tensor]) -> Result<(), EncoderError> {
        self.params.remove(OUT_MEAN);
        self.params.remove(OUT_STD);
        let maps = self.feature_maps(images)?;
        let c = self.out_channels();
        let per = maps.numel() / (images.len().max(1) * c);
        let (mut sum, mut sq) = (vec![0.0; c], vec![0.0; c]);
        for (k, &x) in maps.data().iter().enumerate() {
            let ch = (k / per) % c;
            sum[ch] += x;
            sq[ch] += x * x;
        }
        let n = (images.len() * per).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR)).collect();
        self.params.insert(OUT_MEAN, Tensor::vector(mean));
        self.params.insert(OUT_STD, Tensor::vector(std));
        Ok(())
    }

    fn batched(&self, images: &[&Tensor], pool: bool) -> Result<Vec<f64>, EncoderError> {
        self.check()?;
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let parts: Vec<Result<Vec<f64>, TensorError>> =
            images.par_chunks(FEATURE_BATCH).map(|chunk| self.run_batch(chunk, pool)).collect();
        let mut out = Vec::new();
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Feature maps `[n, c, h, w]` of a batch of `[3, H, W]` images.
    pub fn feature_maps(&self, images: &[&Tensor]) -> Result<Tensor, EncoderError> {
        let out = self.batched(images, false)?;
        let s = images.first().map_or(0, |i| self.feature_size(i.shape()[1]));
        Ok(Tensor::new(vec![images.len(), self.out_channels(), s, s], out)?)
    }

    /// Spatially pooled features `[n, c]`.
    pub fn pooled(&self, images: &[&Tensor]) -> Result<Tensor, EncoderError> {
        let out = self.batched(images, true)?;
        Ok(Tensor::new(vec![images.len(), self.out_channels()], out)?)
    }
}

/// Feature map `[c, h, w]` of one image.
pub fn backbone_forward(image: &Tensor, backbone: &Backbone) -> Result<Tensor, EncoderError> {
    let maps = backbone.feature_maps(&[image])?;
    let s = maps.shape().to_vec();
    Ok(maps.reshape(&s[1..])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ready() -> Backbone {
        let mut b = Backbone::init(&DEFAULT_CHANNELS, &mut ChaCha8Rng::seed_from_u64(1));
        b.mark_pretrained();
        b
    }

    #[test]
    fn unpretrained_backbone_is_refused() {
        let b = Backbone::init(&DEFAULT_CHANNELS, &mut ChaCha8Rng::seed_from_u64(1));
        let img = Tensor::zeros(&[3, 16, 16]);
        assert!(matches!(backbone_forward(&img, &b), Err(EncoderError::Unpretrained)));
    }

    #[test]
    fn zero_image_gives_finite_map_of_expected_shape() {
        let f = backbone_forward(&Tensor::zeros(&[3, 16, 16]), &ready()).unwrap();
        assert_eq!(f.shape(), &[32, 4, 4]);
        assert!(f.all_finite());
    }

    #[test]
    fn same_image_gives_identical_maps() {
        let b = ready();
        let img = Tensor::full(&[3, 16, 16], 0.3);
        assert_eq!(backbone_forward(&img, &b).unwrap(), backbone_forward(&img, &b).unwrap());
    }

    #[test]
    fn different_colors_change_channel_means() {
        let ds = generate_synthetic(2, 2, 10, 16, 0.0, 5).unwrap();
        let b = ready();
        let x = ds.samples().iter().find(|s| s.label.p1 == 0).unwrap();
        let y = ds.samples().iter().find(|s| s.label.p1 == 1).unwrap();
        let f = b.pooled(&[&x.image, &y.image]).unwrap();
        let c = b.out_channels();
        let differ = (0..c).filter(|&k| (f.data()[k] - f.data()[c + k]).abs() > 1e-9).count();
        assert!(differ >= 1);
    }

    #[test]
    fn pooled_is_mean_of_feature_maps() {
        let b = ready();
        let imgs: Vec<Tensor> = (0..3).map(|k| Tensor::full(&[3, 16, 16], 0.2 * k as f64)).collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let maps = b.feature_maps(&refs).unwrap();
        let pooled = b.pooled(&refs).unwrap();
        for (k, chunk) in maps.data().chunks(16).enumerate() {
            let mean = chunk.iter().sum::<f64>() / 16.0;
            assert!((mean - pooled.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_through_params() {
        let b = ready();
        let back = Backbone::from_params(b.params().clone(), true).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn calibration_standardizes_each_channel() {
        let ds = generate_synthetic(3, 3, 10, 16, 0.05, 2).unwrap();
        let imgs: Vec<&Tensor> = ds.samples().iter().map(|s| &s.image).collect();
        let mut b = ready();
        let raw = b.feature_maps(&imgs).unwrap();
        b.calibrate(&imgs).unwrap();
        assert!(b.is_calibrated());
        let maps = b.feature_maps(&imgs).unwrap();
        let c = b.out_channels();
        let per = 16;
        for ch in 0..c {
            let vals: Vec<f64> = (0..imgs.len()).flat_map(|n| maps.data()[(n * c + ch) * per..(n * c + ch + 1) * per].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9, "channel {ch} mean {mean}");
            let raw_var: f64 = {
                let r: Vec<f64> = (0..imgs.len()).flat_map(|n| raw.data()[(n * c + ch) * per..(n * c + ch + 1) * per].to_vec()).collect();
                let m = r.iter().sum::<f64>() / r.len() as f64;
                r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / r.len() as f64
            };
            if raw_var > 1e-10 {
                assert!((var - 1.0).abs() < 1e-9, "channel {ch} var {var}");
            }
        }
        let pooled = b.pooled(&imgs).unwrap();
        for ch in 0..c {
            let m = (0..imgs.len()).map(|n| pooled.data()[n * c + ch]).sum::<f64>() / imgs.len() as f64;
            assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn recalibration_on_the_same_images_is_idempotent() {
        let ds = generate_synthetic(2, 2, 10, 16, 0.05, 3).unwrap();
        let imgs: Vec<&Tensor> = ds.samples().iter().map(|s| &s.image).collect();
        let mut b = ready();
        b.calibrate(&imgs).unwrap();
        let once = b.clone();
        b.calibrate(&imgs).unwrap();
        assert_eq!(b, once);
        let back = Backbone::from_params(b.params().clone(), true).unwrap();
        assert_eq!(back.pooled(&imgs).unwrap(), b.pooled(&imgs).unwrap());
    }
}

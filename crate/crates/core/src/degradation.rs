//! Synthetic low-quality video: blur, downsampling, additive Gaussian
//! noise and a block-DCT quantisation stand-in for lossy compression,
//! plus amplitude-per-frequency-band diagnostics.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dct::{from_spectral, to_spectral, SpectralGeometry, SpectralMap};
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::resample::{bicubic_resize, frame_dims};
use crate::tensor::Tensor;

/// JPEG luminance quantisation table, row-major over `(u, v)`.
const JPEG_LUMA: [[f64; 8]; 8] = [
    [16., 11., 10., 16., 24., 40., 51., 61.],
    [12., 12., 14., 19., 26., 58., 60., 55.],
    [14., 13., 16., 24., 40., 57., 69., 56.],
    [14., 17., 22., 29., 51., 87., 80., 62.],
    [18., 22., 37., 56., 68., 109., 103., 77.],
    [24., 35., 55., 64., 81., 104., 113., 92.],
    [49., 64., 78., 87., 103., 121., 120., 101.],
    [72., 92., 95., 98., 112., 100., 103., 99.],
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BlurKernel {
    None,
    Gaussian { sigma: f64, size: usize },
}

impl BlurKernel {
    /// The conventional blur-downsampling kernel.
    pub const BD: BlurKernel = BlurKernel::Gaussian { sigma: 1.6, size: 13 };
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Compression {
    None,
    Quantize(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub kernel: BlurKernel,
    pub scale: usize,
    pub noise_sigma: f64,
    pub compression: Compression,
    /// Block size of the compression stand-in.
    pub block: usize,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        DegradationSpec {
            kernel: BlurKernel::None,
            scale: 1,
            noise_sigma: 0.0,
            compression: Compression::None,
            block: 8,
        }
    }
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_kv().render())
    }
}

impl DegradationSpec {
    /// Bicubic downsampling by `scale`.
    pub fn bi(scale: usize) -> Self {
        DegradationSpec {
            scale,
            ..Default::default()
        }
    }

    /// Gaussian blur then stride sampling by `scale`.
    pub fn bd(scale: usize) -> Self {
        DegradationSpec {
            kernel: BlurKernel::BD,
            scale,
            ..Default::default()
        }
    }

    pub fn with_noise(self, noise_sigma: f64) -> Self {
        DegradationSpec { noise_sigma, ..self }
    }

    pub fn with_quantization(self, q: f64) -> Self {
        DegradationSpec {
            compression: Compression::Quantize(q),
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::invalid("degradation scale must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!("noise sigma {} must be finite and non-negative", self.noise_sigma)));
        }
        if let Compression::Quantize(q) = self.compression {
            if !(q >= 0.0 && q.is_finite()) {
                return Err(Error::invalid(format!("quantisation scale {} must be finite and non-negative", q)));
            }
        }
        if let BlurKernel::Gaussian { sigma, size } = self.kernel {
            if !(sigma > 0.0 && sigma.is_finite()) || size == 0 || size % 2 == 0 {
                return Err(Error::invalid(format!(
                    "gaussian kernel needs sigma > 0 and an odd size, got {} / {}",
                    sigma, size
                )));
            }
        }
        if self.block == 0 {
            return Err(Error::invalid("compression block size must be positive"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        match self.kernel {
            BlurKernel::None => kv.set("kernel", "none"),
            BlurKernel::Gaussian { sigma, size } => {
                kv.set("kernel", "gaussian");
                kv.set("kernel_sigma", sigma);
                kv.set("kernel_size", size);
            }
        }
        kv.set("scale", self.scale);
        kv.set("noise_sigma", self.noise_sigma);
        match self.compression {
            Compression::None => kv.set("compression", "none"),
            Compression::Quantize(q) => {
                kv.set("compression", "quantize");
                kv.set("q", q);
            }
        }
        kv.set("compression_block", self.block);
        kv
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut spec = DegradationSpec::default();
        match kv.get("kernel").unwrap_or("none") {
            "none" => {}
            "gaussian" => {
                spec.kernel = BlurKernel::Gaussian {
                    sigma: kv.get("kernel_sigma").map(|_| kv.parse_value("kernel_sigma")).transpose()?.unwrap_or(1.6),
                    size: kv.get("kernel_size").map(|_| kv.parse_value("kernel_size")).transpose()?.unwrap_or(13),
                }
            }
            other => return Err(Error::invalid(format!("unknown kernel `{}`", other))),
        }
        if kv.get("scale").is_some() {
            spec.scale = kv.parse_value("scale")?;
        }
        if kv.get("noise_sigma").is_some() {
            spec.noise_sigma = kv.parse_value("noise_sigma")?;
        }
        match kv.get("compression").unwrap_or("none") {
            "none" => {}
            "quantize" => spec.compression = Compression::Quantize(kv.parse_value("q")?),
            other => return Err(Error::invalid(format!("unknown compression `{}`", other))),
        }
        if kv.get("compression_block").is_some() {
            spec.block = kv.parse_value("compression_block")?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Vec<f64> {
    let half = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - half;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable blur of one `H×W` plane with edge clamping.
fn blur_plane(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let half = (taps.len() / 2) as i64;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[y * w + (x as i64 + k as i64 - half).clamp(0, w as i64 - 1) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[(y as i64 + k as i64 - half).clamp(0, h as i64 - 1) as usize * w + x])
                .sum();
        }
    }
    out
}

fn map_planes(frames: &Tensor, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Tensor> {
    let [t, c, h, w] = frame_dims(frames.shape())?;
    let data = frames.data().chunks(h * w).flat_map(f).collect();
    Tensor::new(vec![t, c, h, w], data)
}

/// Gaussian blur of every plane of `T×C×H×W` frames.
pub fn blur(frames: &Tensor, sigma: f64, size: usize) -> Result<Tensor> {
    let [_, _, h, w] = frame_dims(frames.shape())?;
    let taps = gaussian_kernel(sigma, size);
    map_planes(frames, |p| blur_plane(p, h, w, &taps))
}

/// Keeps every `scale`-th pixel starting from the top-left.
pub fn stride_sample(frames: &Tensor, scale: usize) -> Result<Tensor> {
    let [t, c, h, w] = frame_dims(frames.shape())?;
    let (oh, ow) = (h.div_ceil(scale), w.div_ceil(scale));
    let src = frames.data();
    let data = (0..t * c)
        .flat_map(|p| (0..oh).flat_map(move |y| (0..ow).map(move |x| src[(p * h + y * scale) * w + x * scale])))
        .collect();
    Tensor::new(vec![t, c, oh, ow], data)
}

/// Round to nearest with ties to even, on the quantisation grid `step`.
pub fn quantize(coefficient: f64, step: f64) -> f64 {
    if step == 0.0 {
        coefficient
    } else {
        (coefficient / step).round_ties_even() * step
    }
}

/// Quantisation step for frequency `(u, v)` of a `block`-sized DCT at
/// quality scale `q`, in [0, 1] pixel units.
pub fn quant_step(q: f64, u: usize, v: usize, block: usize) -> f64 {
    let (iu, iv) = ((u * 8 / block).min(7), (v * 8 / block).min(7));
    q * JPEG_LUMA[iu][iv] / 255.0
}

/// Block-DCT quantisation of `T×C×H×W` frames. `q = 0` is the identity up
/// to transform round-off.
pub fn compress_proxy(frames: &Tensor, q: f64, block: usize) -> Result<Tensor> {
    if !(q >= 0.0) {
        return Err(Error::invalid(format!("quantisation scale {} must be non-negative", q)));
    }
    let mut map = to_spectral(frames, block)?;
    if q > 0.0 {
        let g = map.geometry.clone();
        let (rows, cols) = (g.rows(), g.cols());
        let data = map.data.data_mut();
        for t in 0..g.frames {
            for u in 0..block {
                for v in 0..block {
                    let step = quant_step(q, u, v, block);
                    let f = u * block + v;
                    for c in 0..g.channels {
                        let start = g.spectral_index(t, f, c, 0, 0);
                        for x in &mut data[start..start + rows * cols] {
                            *x = quantize(*x, step);
                        }
                    }
                }
            }
        }
    }
    from_spectral(&map)
}

/// Applies `spec` to `T×C×H×W` frames in [0, 1]. Frame `t` draws its noise
/// from a generator seeded with `seed ^ t`. Output is clipped to [0, 1].
pub fn degrade(hr: &Tensor, spec: &DegradationSpec, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let [t, _, h, w] = frame_dims(hr.shape())?;
    let mut lr = match spec.kernel {
        BlurKernel::Gaussian { sigma, size } => stride_sample(&blur(hr, sigma, size)?, spec.scale)?,
        BlurKernel::None if spec.scale > 1 => {
            if h % spec.scale != 0 || w % spec.scale != 0 {
                return Err(Error::invalid(format!(
                    "{}×{} frames are not divisible by scale {}",
                    h, w, spec.scale
                )));
            }
            bicubic_resize(hr, h / spec.scale, w / spec.scale, true)?
        }
        BlurKernel::None => hr.clone(),
    };
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let per_frame = lr.numel() / t;
        for (i, frame) in lr.data_mut().chunks_mut(per_frame).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
            frame.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
    }
    if let Compression::Quantize(q) = spec.compression {
        lr = compress_proxy(&lr, q, spec.block)?;
    }
    Ok(lr.map(|v| v.clamp(0.0, 1.0)))
}

/// Number of radial bands `u + v` of a `block`-sized DCT.
pub fn band_count(block: usize) -> usize {
    2 * block - 1
}

/// Mean absolute DCT coefficient per band `r = u + v` for `band_lo..=band_hi`,
/// averaged over every block, channel and frame.
pub fn spectral_curve(frames: &Tensor, block: usize, band_lo: usize, band_hi: usize) -> Result<Vec<f64>> {
    if band_lo > band_hi || band_hi >= band_count(block) {
        return Err(Error::invalid(format!(
            "band range {}..={} outside 0..{} for block {}",
            band_lo,
            band_hi,
            band_count(block),
            block
        )));
    }
    let map = to_spectral(frames, block)?;
    Ok(band_means(&map)[band_lo..=band_hi].to_vec())
}

fn band_means(map: &SpectralMap) -> Vec<f64> {
    let g: &SpectralGeometry = &map.geometry;
    let b = g.block;
    let mut sums = vec![0.0; band_count(b)];
    let mut counts = vec![0usize; band_count(b)];
    let plane = g.rows() * g.cols();
    let data = map.data.data();
    for t in 0..g.frames {
        for f in 0..g.freqs() {
            let band = f / b + f % b;
            for c in 0..g.channels {
                let start = g.spectral_index(t, f, c, 0, 0);
                sums[band] += data[start..start + plane].iter().map(|v| v.abs()).sum::<f64>();
                counts[band] += plane;
            }
        }
    }
    sums.iter().zip(counts).map(|(s, n)| s / n as f64).collect()
}

/// A synthetic clip of `frames` frames, `channels×height×width`, in [0, 1]:
/// drifting sinusoidal textures and a moving bright disc.
pub fn synthetic_clip(seed: u64, frames: usize, channels: usize, height: usize, width: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Wave {
        kx: f64,
        ky: f64,
        phase: f64,
        speed: f64,
        amp: [f64; 3],
    }
    let waves: Vec<Wave> = (0..4)
        .map(|_| {
            let freq = rng.random_range(0.15..0.9);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            Wave {
                kx: freq * angle.cos(),
                ky: freq * angle.sin(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                speed: rng.random_range(-0.4..0.4),
                amp: [rng.random_range(0.03..0.12), rng.random_range(0.03..0.12), rng.random_range(0.03..0.12)],
            }
        })
        .collect();
    let base = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
    let (cx, cy) = (rng.random_range(0.0..width as f64), rng.random_range(0.0..height as f64));
    let (vx, vy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let radius = rng.random_range(2.0..(height.min(width) as f64 / 4.0).max(2.5));
    let disc = rng.random_range(-0.25..0.25);
    Tensor::from_fn(&[frames, channels, height, width], |i| {
        let x = (i % width) as f64;
        let y = ((i / width) % height) as f64;
        let c = (i / (width * height)) % channels;
        let t = (i / (width * height * channels)) as f64;
        let mut v = base[c % 3];
        for wv in &waves {
            v += wv.amp[c % 3] * (wv.kx * x + wv.ky * y + wv.phase + wv.speed * t).sin();
        }
        let (dx, dy) = (x - (cx + vx * t), y - (cy + vy * t));
        if dx * dx + dy * dy <= radius * radius {
            v += disc;
        }
        v.clamp(0.0, 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn texture(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random::<f64>())
    }

    #[test]
    fn no_op_spec_is_identity() {
        let hr = texture(1, &[2, 3, 8, 8]);
        assert_eq!(degrade(&hr, &DegradationSpec::default(), 7).unwrap(), hr);
    }

    #[test]
    fn gaussian_kernel_is_normalised_and_preserves_constants() {
        for (sigma, size) in [(0.5, 3), (1.6, 13), (3.0, 7)] {
            assert!((gaussian_kernel(sigma, size).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let flat = Tensor::full(&[1, 1, 12, 12], 0.3);
        let lr = degrade(&flat, &DegradationSpec::bd(4), 0).unwrap();
        assert_eq!(lr.shape(), &[1, 1, 3, 3]);
        assert!(lr.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn bicubic_downsampling_shape_and_noise_level() {
        let hr = Tensor::full(&[1, 3, 64, 64], 0.5);
        let spec = DegradationSpec::bi(4).with_noise(15.0 / 255.0);
        let lr = degrade(&hr, &spec, 3).unwrap();
        assert_eq!(lr.shape(), &[1, 3, 16, 16]);
        let n = lr.numel() as f64;
        let var = lr.data().iter().map(|v| (v - 0.5).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 15.0 / 255.0).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn degradation_is_deterministic_per_seed() {
        let hr = texture(2, &[3, 1, 16, 16]);
        let spec = DegradationSpec::bi(2).with_noise(0.05).with_quantization(2.0);
        assert_eq!(degrade(&hr, &spec, 9).unwrap(), degrade(&hr, &spec, 9).unwrap());
        assert_ne!(degrade(&hr, &spec, 9).unwrap(), degrade(&hr, &spec, 10).unwrap());
    }

    #[test]
    fn quantisation_arithmetic() {
        assert_eq!(quantize(5.4, 2.0), 6.0);
        assert_eq!(quantize(5.0, 2.0), 4.0);
        assert_eq!(quantize(7.0, 2.0), 8.0);
        assert_eq!(quantize(1.3, 0.0), 1.3);
    }

    #[test]
    fn zero_quantisation_round_trips() {
        let x = texture(3, &[1, 3, 16, 12]);
        let y = compress_proxy(&x, 0.0, 8).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-9);
    }

    #[test]
    fn compression_error_grows_with_q() {
        for seed in 0..5 {
            let x = texture(seed, &[1, 3, 16, 16]);
            let scores: Vec<f64> = [1.0, 2.0, 4.0, 8.0]
                .iter()
                .map(|&q| psnr(&x, &compress_proxy(&x, q, 8).unwrap(), 1.0).unwrap())
                .collect();
            assert!(scores.windows(2).all(|p| p[1] <= p[0]), "{:?}", scores);
        }
    }

    #[test]
    fn spectral_curve_cases() {
        let flat = Tensor::full(&[1, 1, 16, 16], 0.6);
        let curve = spectral_curve(&flat, 4, 0, 6).unwrap();
        assert!(curve[0] > 0.0);
        assert!(curve[1..].iter().all(|v| v.abs() < 1e-12));
        for seed in 0..5 {
            let noise = texture(seed, &[1, 1, 16, 16]);
            assert!(spectral_curve(&noise, 4, 0, 6).unwrap().iter().all(|&v| v > 0.0));
        }
        let x = texture(9, &[1, 1, 32, 32]);
        let hi_before: f64 = spectral_curve(&x, 8, 8, 14).unwrap().iter().sum();
        let hi_after: f64 = spectral_curve(&compress_proxy(&x, 8.0, 8).unwrap(), 8, 8, 14).unwrap().iter().sum();
        assert!(hi_after < hi_before);
        assert!(spectral_curve(&x, 8, 5, 4).is_err());
        assert!(spectral_curve(&x, 8, 0, 15).is_err());
    }

    #[test]
    fn spec_round_trips_through_kv() {
        let spec = DegradationSpec::bd(4).with_noise(0.02).with_quantization(3.5);
        assert_eq!(DegradationSpec::from_kv(&spec.to_kv()).unwrap(), spec);
        assert_eq!(DegradationSpec::from_kv(&DegradationSpec::bi(2).to_kv()).unwrap(), DegradationSpec::bi(2));
        assert!(DegradationSpec::bi(0).validate().is_err());
    }

    #[test]
    fn synthetic_clips_are_in_range_and_seeded() {
        let a = synthetic_clip(5, 3, 3, 32, 32);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, synthetic_clip(5, 3, 3, 32, 32));
        assert_ne!(a, synthetic_clip(6, 3, 3, 32, 32));
    }
}

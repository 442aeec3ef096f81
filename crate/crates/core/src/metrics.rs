//! PSNR and SSIM, on RGB or on BT.601 luma.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::resample::frame_dims;
use crate::tensor::Tensor;

/// Reported for identical inputs.
pub const PSNR_CAP: f64 = 99.0;

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    same_shape(a, b, "psnr")?;
    if a.numel() == 0 {
        return Err(Error::invalid("psnr of empty images"));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;

fn window() -> Vec<f64> {
    let half = (WINDOW / 2) as f64;
    let g: Vec<f64> = (0..WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Valid-region separable filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let taps = window();
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let (mu_a, _, _) = filter_valid(a, h, w, &taps);
    let (mu_b, _, _) = filter_valid(b, h, w, &taps);
    let (aa, _, _) = filter_valid(&prod(&|x, _| x * x), h, w, &taps);
    let (bb, _, _) = filter_valid(&prod(&|_, y| y * y), h, w, &taps);
    let (ab, _, _) = filter_valid(&prod(&|x, y| x * y), h, w, &taps);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Mean SSIM of `C×H×W` images (11×11 Gaussian window, σ = 1.5, valid
/// region), averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let (c, h, w) = match *a.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        ref s => return Err(Error::shape("ssim", format!("expected C×H×W, got {:?}", s))),
    };
    if h < WINDOW || w < WINDOW {
        return Err(Error::invalid(format!("{}×{} image is smaller than the {}×{} window", h, w, WINDOW, WINDOW)));
    }
    let plane = h * w;
    Ok((0..c)
        .map(|i| ssim_plane(&a.data()[i * plane..(i + 1) * plane], &b.data()[i * plane..(i + 1) * plane], h, w, peak))
        .sum::<f64>()
        / c as f64)
}

/// BT.601 luma of a `3×H×W` image, returned as `1×H×W`.
pub fn to_y_channel(rgb: &Tensor) -> Result<Tensor> {
    let (h, w) = match *rgb.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::shape("to_y_channel", format!("expected 3×H×W, got {:?}", s))),
    };
    let p = h * w;
    let d = rgb.data();
    Tensor::new(
        vec![1, h, w],
        (0..p).map(|i| 0.299 * d[i] + 0.587 * d[p + i] + 0.114 * d[2 * p + i]).collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelMode {
    Rgb,
    Y,
}

impl FromStr for ChannelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(ChannelMode::Rgb),
            "y" => Ok(ChannelMode::Y),
            _ => Err(Error::invalid(format!("unknown channel mode `{}` (expected rgb or y)", s))),
        }
    }
}

impl ChannelMode {
    pub fn name(self) -> &'static str {
        match self {
            ChannelMode::Rgb => "rgb",
            ChannelMode::Y => "y",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_frame: Vec<(f64, f64)>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub channel_mode: ChannelMode,
}

impl EvalReport {
    pub fn from_frames(per_frame: Vec<(f64, f64)>, channel_mode: ChannelMode) -> Result<Self> {
        if per_frame.is_empty() {
            return Err(Error::invalid("evaluation over zero frames"));
        }
        let n = per_frame.len() as f64;
        Ok(EvalReport {
            mean_psnr_db: per_frame.iter().map(|p| p.0).sum::<f64>() / n,
            mean_ssim: per_frame.iter().map(|p| p.1).sum::<f64>() / n,
            per_frame,
            channel_mode,
        })
    }

    /// `frame_index,psnr_db,ssim` rows followed by a `mean` summary row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame_index,psnr_db,ssim\n");
        for (i, (p, q)) in self.per_frame.iter().enumerate() {
            let _ = writeln!(s, "{},{:.6},{:.6}", i, p, q);
        }
        let _ = writeln!(s, "mean,{:.6},{:.6}", self.mean_psnr_db, self.mean_ssim);
        s
    }
}

/// Per-frame scores of `T×C×H×W` frames against references, after
/// clipping the candidate to `[0, peak]`.
pub fn evaluate(sr: &Tensor, hr: &Tensor, mode: ChannelMode, peak: f64) -> Result<EvalReport> {
    same_shape(sr, hr, "evaluate")?;
    let [t, c, h, w] = frame_dims(sr.shape())?;
    let per = c * h * w;
    let mut rows = Vec::with_capacity(t);
    for i in 0..t {
        let a = Tensor::new(vec![c, h, w], sr.data()[i * per..(i + 1) * per].iter().map(|v| v.clamp(0.0, peak)).collect())?;
        let b = Tensor::new(vec![c, h, w], hr.data()[i * per..(i + 1) * per].to_vec())?;
        let (a, b) = match mode {
            ChannelMode::Rgb => (a, b),
            ChannelMode::Y => (to_y_channel(&a)?, to_y_channel(&b)?),
        };
        rows.push((psnr(&a, &b, peak)?, ssim(&a, &b, peak)?));
    }
    EvalReport::from_frames(rows, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn texture(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random::<f64>())
    }

    #[test]
    fn psnr_closed_forms() {
        let a = texture(1, &[3, 16, 16]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let zeros = Tensor::zeros(&[1, 4, 4]);
        let shifted = zeros.map(|v| v + 1.0 / 255.0);
        assert!((psnr(&zeros, &shifted, 1.0).unwrap() - 48.1308).abs() < 1e-3);
        assert!((psnr(&zeros, &Tensor::ones(&[1, 4, 4]), 1.0).unwrap()).abs() < 1e-12);
        assert!(psnr(&zeros, &Tensor::zeros(&[1, 4, 5]), 1.0).is_err());
    }

    #[test]
    fn psnr_is_symmetric_and_falls_with_noise() {
        let a = texture(2, &[1, 16, 16]);
        let b = texture(3, &[1, 16, 16]);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Tensor::from_fn(&[1, 16, 16], |_| rng.random_range(-1.0..1.0));
        let scores: Vec<f64> = [0.01, 0.02, 0.05]
            .iter()
            .map(|s| psnr(&a, &a.zip_map(&noise, "add", |x, n| x + s * n).unwrap(), 1.0).unwrap())
            .collect();
        assert!(scores[0] > scores[1] && scores[1] > scores[2]);
    }

    #[test]
    fn ssim_cases() {
        let a = texture(5, &[3, 16, 16]);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-9);
        let flat = Tensor::full(&[1, 12, 12], 0.4);
        assert!((ssim(&flat, &flat, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let inverted = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inverted, 1.0).unwrap() < 0.5);
        assert!(ssim(&Tensor::zeros(&[1, 10, 16]), &Tensor::zeros(&[1, 10, 16]), 1.0).is_err());
    }

    #[test]
    fn luma_cases() {
        let gray = Tensor::full(&[3, 2, 2], 0.7);
        assert!(to_y_channel(&gray).unwrap().data().iter().all(|v| (v - 0.7).abs() < 1e-15));
        let mut red = Tensor::zeros(&[3, 1, 1]);
        red.data_mut()[0] = 1.0;
        assert_eq!(to_y_channel(&red).unwrap().data(), &[0.299]);
        assert_eq!(to_y_channel(&Tensor::zeros(&[3, 1, 1])).unwrap().data(), &[0.0]);
        assert!(to_y_channel(&Tensor::zeros(&[1, 2, 2])).is_err());
    }

    #[test]
    fn report_means_and_csv() {
        let hr = texture(6, &[2, 3, 12, 12]);
        let report = evaluate(&hr, &hr, ChannelMode::Y, 1.0).unwrap();
        assert_eq!(report.mean_psnr_db, PSNR_CAP);
        assert!((report.mean_ssim - 1.0).abs() < 1e-9);
        let csv = report.to_csv();
        assert!(csv.starts_with("frame_index,psnr_db,ssim\n0,99.000000,"));
        assert!(csv.lines().last().unwrap().starts_with("mean,99.000000,"));
        let r = EvalReport::from_frames(vec![(30.0, 0.5), (40.0, 0.7)], ChannelMode::Rgb).unwrap();
        assert_eq!(r.mean_psnr_db, 35.0);
        assert!((r.mean_ssim - 0.6).abs() < 1e-15);
    }
}

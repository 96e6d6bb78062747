//! Image fidelity metrics: PSNR, Gaussian-window SSIM, and a pluggable
//! registry for learned perceptual metrics (LPIPS-style plugins are supplied
//! by the caller; nothing is fabricated when a plugin is absent).

use crate::error::{Error, Result};
use candle_core::Tensor;
use std::collections::BTreeMap;

pub const DEFAULT_PEAK: f64 = 255.0;

/// One evaluation's fidelity numbers. `perceptual` holds registered plugin
/// outputs by name; absent plugins simply have no entry (serialized as null).
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub perceptual: BTreeMap<String, Option<f64>>,
}

fn to_planes(t: &Tensor) -> Result<(Vec<f32>, usize, usize, usize, usize)> {
    let (b, c, h, w) = t.dims4().map_err(candle_core::Error::from)?;
    let v = t.contiguous()?.flatten_all()?.to_vec1::<f32>()?;
    Ok((v, b, c, h, w))
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean over the batch of per-image `10*log10(peak^2 / MSE)`; an exact match
/// yields the +infinity sentinel.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    let (av, bsz, c, h, w) = to_planes(a)?;
    let (bv, ..) = to_planes(b)?;
    let per = c * h * w;
    let mut acc = 0f64;
    for i in 0..bsz {
        let mut se = 0f64;
        for j in 0..per {
            let d = av[i * per + j] as f64 - bv[i * per + j] as f64;
            se += d * d;
        }
        let mse = se / per as f64;
        if mse == 0.0 {
            return Ok(f64::INFINITY);
        }
        acc += 10.0 * (peak * peak / mse).log10();
    }
    Ok(acc / bsz as f64)
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window - 1) as f64 / 2.0;
    let mut k: Vec<f64> = (0..window)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Structural similarity with the standard Gaussian window (11 taps,
/// sigma 1.5, k1 = 0.01, k2 = 0.03), valid windows only, averaged over
/// windows, channels, and batch.
pub fn ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    ssim_with(a, b, 11, 1.5, 0.01, 0.03, peak)
}

pub fn ssim_with(
    a: &Tensor,
    b: &Tensor,
    window: usize,
    sigma: f64,
    k1: f64,
    k2: f64,
    peak: f64,
) -> Result<f64> {
    check_same_shape(a, b)?;
    let (av, bsz, c, h, w) = to_planes(a)?;
    let (bv, ..) = to_planes(b)?;
    if h < window || w < window {
        return Err(Error::Metric(format!(
            "image {h}x{w} smaller than the {window}-tap SSIM window"
        )));
    }
    let kern = gaussian_kernel(window, sigma);
    let c1 = (k1 * peak) * (k1 * peak);
    let c2 = (k2 * peak) * (k2 * peak);
    let per = h * w;
    let mut total = 0f64;
    let mut count = 0usize;
    for i in 0..bsz {
        for ch in 0..c {
            let off = (i * c + ch) * per;
            let xa = &av[off..off + per];
            let xb = &bv[off..off + per];
            total += ssim_plane(xa, xb, h, w, &kern, c1, c2);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Separable Gaussian filtering of the five moment maps, then the SSIM map,
/// averaged over valid positions.
fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize, kern: &[f64], c1: f64, c2: f64) -> f64 {
    let win = kern.len();
    let wv = w - win + 1; // valid width after horizontal pass
    let hv = h - win + 1;
    // horizontal pass over rows for each of the 5 moments
    let mut rows = vec![0f64; 5 * h * wv];
    for y in 0..h {
        for x in 0..wv {
            let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0f64, 0f64, 0f64, 0f64, 0f64);
            for (t, &g) in kern.iter().enumerate() {
                let pa = a[y * w + x + t] as f64;
                let pb = b[y * w + x + t] as f64;
                ma += g * pa;
                mb += g * pb;
                maa += g * pa * pa;
                mbb += g * pb * pb;
                mab += g * pa * pb;
            }
            let o = y * wv + x;
            rows[o] = ma;
            rows[h * wv + o] = mb;
            rows[2 * h * wv + o] = maa;
            rows[3 * h * wv + o] = mbb;
            rows[4 * h * wv + o] = mab;
        }
    }
    // vertical pass and SSIM accumulation
    let mut total = 0f64;
    for y in 0..hv {
        for x in 0..wv {
            let mut m = [0f64; 5];
            for (t, &g) in kern.iter().enumerate() {
                let o = (y + t) * wv + x;
                for (j, mm) in m.iter_mut().enumerate() {
                    *mm += g * rows[j * h * wv + o];
                }
            }
            let (mu_a, mu_b, saa, sbb, sab) = (m[0], m[1], m[2], m[3], m[4]);
            let va = saa - mu_a * mu_a;
            let vb = sbb - mu_b * mu_b;
            let cov = sab - mu_a * mu_b;
            total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
        }
    }
    total / (hv * wv) as f64
}

type MetricFn = Box<dyn Fn(&Tensor, &Tensor) -> Result<f64> + Send + Sync>;

/// Registry of optional perceptual metrics keyed by name.
#[derive(Default)]
pub struct MetricRegistry {
    plugins: BTreeMap<String, MetricFn>,
}

impl MetricRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a perceptual metric; duplicate names are an error.
    pub fn register_perceptual(
        &mut self,
        name: &str,
        f: impl Fn(&Tensor, &Tensor) -> Result<f64> + Send + Sync + 'static,
    ) -> Result<()> {
        if self.plugins.contains_key(name) {
            return Err(Error::Metric(format!("metric `{name}` already registered")));
        }
        self.plugins.insert(name.to_string(), Box::new(f));
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.plugins.keys().cloned().collect()
    }

    /// PSNR and SSIM plus every registered plugin, verbatim.
    pub fn evaluate_all(&self, a: &Tensor, b: &Tensor) -> Result<MetricReport> {
        let mut perceptual = BTreeMap::new();
        for (name, f) in &self.plugins {
            perceptual.insert(name.clone(), Some(f(a, b)?));
        }
        Ok(MetricReport {
            psnr_db: psnr(a, b, DEFAULT_PEAK)?,
            ssim: ssim(a, b, DEFAULT_PEAK)?,
            perceptual,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_vec;
    use crate::rng::SeedStreams;
    use candle_core::Device;
    use proptest::prelude::*;

    fn dev() -> Device {
        Device::Cpu
    }

    fn img(data: Vec<f32>, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(data, (1, 1, h, w), &dev()).unwrap()
    }

    #[test]
    fn psnr_fixtures() {
        let a = img(vec![7f32; 32 * 32], 32, 32);
        assert!(psnr(&a, &a, 255.0).unwrap().is_infinite());

        let z = img(vec![0f32; 32 * 32], 32, 32);
        let f = img(vec![255f32; 32 * 32], 32, 32);
        assert!((psnr(&z, &f, 255.0).unwrap() - 0.0).abs() < 1e-9);

        let o = img(vec![16f32; 32 * 32], 32, 32);
        // 10*log10(255^2/16^2) = 24.04833...
        let want = 10.0 * (65025f64 / 256.0).log10();
        assert!((psnr(&z, &o, 255.0).unwrap() - want).abs() < 1e-3);
        assert!((want - 24.048).abs() < 1e-3);
    }

    #[test]
    fn psnr_monotone_in_noise_variance() {
        let streams = SeedStreams::new(41);
        let base = normal_vec(&mut streams.stream("img"), 3 * 32 * 32, 128.0, 30.0);
        let a = Tensor::from_vec(base.clone(), (1, 3, 32, 32), &dev()).unwrap();
        let mut last = f64::INFINITY;
        for (i, std) in [2.0f32, 5.0, 10.0, 20.0, 40.0].iter().enumerate() {
            let noise = normal_vec(&mut streams.substream("noise", i as u64), base.len(), 0.0, *std);
            let nb: Vec<f32> = base.iter().zip(&noise).map(|(x, n)| x + n).collect();
            let b = Tensor::from_vec(nb, (1, 3, 32, 32), &dev()).unwrap();
            let p = psnr(&a, &b, 255.0).unwrap();
            assert!(p < last, "psnr must fall as noise grows: {p} !< {last}");
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_constant_fixture() {
        let streams = SeedStreams::new(43);
        let data = normal_vec(&mut streams.stream("img"), 32 * 32, 100.0, 25.0);
        let a = img(data, 32, 32);
        assert!((ssim(&a, &a, 255.0).unwrap() - 1.0).abs() < 1e-12);

        let z = img(vec![0f32; 32 * 32], 32, 32);
        let f = img(vec![255f32; 32 * 32], 32, 32);
        let c1 = (0.01f64 * 255.0) * (0.01 * 255.0);
        let want = c1 / (255.0f64 * 255.0 + c1);
        let got = ssim(&z, &f, 255.0).unwrap();
        assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = img(vec![1f32; 64], 8, 8);
        assert!(matches!(ssim(&a, &a, 255.0), Err(Error::Metric(_))));
    }

    /// Naive windowed oracle, written directly from the definition.
    fn ssim_naive(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
        let kern = gaussian_kernel(11, 1.5);
        let c1 = (0.01f64 * 255.0).powi(2);
        let c2 = (0.03f64 * 255.0).powi(2);
        let mut total = 0f64;
        let mut n = 0usize;
        for y0 in 0..=(h - 11) {
            for x0 in 0..=(w - 11) {
                let (mut ma, mut mb) = (0f64, 0f64);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let g = kern[dy] * kern[dx];
                        ma += g * a[(y0 + dy) * w + x0 + dx] as f64;
                        mb += g * b[(y0 + dy) * w + x0 + dx] as f64;
                    }
                }
                let (mut va, mut vb, mut cov) = (0f64, 0f64, 0f64);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let g = kern[dy] * kern[dx];
                        let pa = a[(y0 + dy) * w + x0 + dx] as f64;
                        let pb = b[(y0 + dy) * w + x0 + dx] as f64;
                        va += g * (pa - ma) * (pa - ma);
                        vb += g * (pb - mb) * (pb - mb);
                        cov += g * (pa - ma) * (pb - mb);
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn ssim_matches_naive_oracle_on_fixture() {
        let streams = SeedStreams::new(47);
        let a = normal_vec(&mut streams.stream("a"), 32 * 32, 120.0, 40.0);
        let b: Vec<f32> = a
            .iter()
            .zip(normal_vec(&mut streams.stream("n"), 32 * 32, 0.0, 15.0))
            .map(|(x, n)| (x + n).clamp(0.0, 255.0))
            .collect();
        let got = ssim(&img(a.clone(), 32, 32), &img(b.clone(), 32, 32), 255.0).unwrap();
        let want = ssim_naive(&a, &b, 32, 32);
        assert!((got - want).abs() < 1e-4, "got {got}, oracle {want}");
    }

    #[test]
    fn registry_contracts() {
        let mut reg = MetricRegistry::new();
        let a = img(vec![10f32; 32 * 32], 32, 32);
        let b = img(vec![12f32; 32 * 32], 32, 32);
        let r = reg.evaluate_all(&a, &b).unwrap();
        assert!(r.perceptual.is_empty());

        reg.register_perceptual("dummy", |_, _| Ok(0.5)).unwrap();
        let r = reg.evaluate_all(&a, &b).unwrap();
        assert_eq!(r.perceptual.get("dummy"), Some(&Some(0.5)));

        assert!(reg.register_perceptual("dummy", |_, _| Ok(0.1)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn psnr_and_ssim_are_symmetric(seed in 0u64..500) {
            let streams = SeedStreams::new(seed);
            let a = normal_vec(&mut streams.stream("a"), 16 * 16, 100.0, 50.0);
            let c = normal_vec(&mut streams.stream("b"), 16 * 16, 100.0, 50.0);
            let ta = img(a, 16, 16);
            let tb = img(c, 16, 16);
            let (p1, p2) = (psnr(&ta, &tb, 255.0).unwrap(), psnr(&tb, &ta, 255.0).unwrap());
            prop_assert!((p1 - p2).abs() < 1e-9);
            let (s1, s2) = (ssim(&ta, &tb, 255.0).unwrap(), ssim(&tb, &ta, 255.0).unwrap());
            prop_assert!((s1 - s2).abs() < 1e-9);
        }
    }
}

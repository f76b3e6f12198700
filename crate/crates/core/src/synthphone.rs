//! Deterministic synthetic "phoneme" spectrograms.
//!
//! Class `k` of `K` is a pair of Gaussian frequency bands, constant over time.
//! A sample is its class template, circularly shifted in time, scaled by a
//! random gain and covered in Gaussian noise. All randomness of a sample comes
//! from its own SplitMix64 stream, so any sample can be regenerated alone.
//! Values are rounded to `f32` precision at generation so the on-disk format
//! round-trips exactly.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::diffkit::Tensor;
use crate::error::{Error, Result};
use crate::fileio::{sha256_hex, write_atomic, ByteReader};
use crate::rng::SplitMix64;

pub const DATASET_MAGIC: &[u8; 4] = b"TSPH";
pub const DATASET_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub freq_bins: usize,
    pub frames: usize,
    pub samples_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            freq_bins: 40,
            frames: 32,
            samples_per_class: 200,
            noise_std: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if self.num_classes > u16::MAX as usize + 1 {
            return bad(format!("num_classes {} does not fit a u16 label", self.num_classes));
        }
        if self.freq_bins < 8 || self.frames < 8 {
            return bad(format!(
                "spectrogram {}x{} must be at least 8x8",
                self.freq_bins, self.frames
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and >= 0", self.noise_std));
        }
        for (name, v) in [
            ("num_classes", self.num_classes),
            ("freq_bins", self.freq_bins),
            ("frames", self.frames),
            ("samples_per_class", self.samples_per_class),
        ] {
            if v > u32::MAX as usize {
                return bad(format!("{name} {v} does not fit a u32"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the serialized header fields.
    pub fn hash(&self) -> String {
        sha256_hex(&self.header_bytes())
    }

    fn header_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(33);
        out.extend_from_slice(DATASET_MAGIC);
        out.push(DATASET_VERSION);
        for v in [self.num_classes, self.freq_bins, self.frames, self.samples_per_class] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.noise_std.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[freq_bins x frames]`.
    pub spectrogram: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Train/held-out split: every fifth sample (index % 5 == 4) is held out.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|i| i % 5 != 4)
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.config.num_classes).map(|k| format!("P{k}")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = c.header_bytes();
        out.reserve(self.len() * (2 + 4 * c.freq_bins * c.frames));
        for s in &self.samples {
            out.extend_from_slice(&(s.label as u16).to_le_bytes());
            for v in s.spectrogram.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(DATASET_MAGIC)?;
        let version = r.u8("version")?;
        if version != DATASET_VERSION {
            return Err(Error::Version {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let config = SynthConfig {
            num_classes: r.u32("num_classes")? as usize,
            freq_bins: r.u32("freq_bins")? as usize,
            frames: r.u32("frames")? as usize,
            samples_per_class: r.u32("samples_per_class")? as usize,
            noise_std: r.f64("noise_std")?,
            seed: r.u64("seed")?,
        };
        if let Err(e) = config.validate() {
            return r.fail(format!("invalid header: {e}"));
        }
        let cells = config.freq_bins * config.frames;
        let count = config.num_classes * config.samples_per_class;
        let needed = count.saturating_mul(2 + 4 * cells);
        if bytes.len() - r.offset() < needed {
            return r.fail(format!(
                "truncated samples: need {needed} bytes, {} left",
                bytes.len() - r.offset()
            ));
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let label_at = r.offset();
            let label = r.u16("label")? as usize;
            if label >= config.num_classes {
                return Err(Error::Parse {
                    offset: label_at,
                    msg: format!("label {label} out of range"),
                });
            }
            let mut data = Vec::with_capacity(cells);
            for _ in 0..cells {
                let at = r.offset();
                let v = r.f32("value")?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        offset: at,
                        msg: "non-finite value".into(),
                    });
                }
                data.push(v as f64);
            }
            let spectrogram = Tensor::new(vec![config.freq_bins, config.frames], data)?;
            samples.push(Sample { spectrogram, label });
        }
        r.finish()?;
        Ok(Self { config, samples })
    }
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &dataset.to_bytes())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?)
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Frequency-band centers of class `k`.
pub fn band_centers(class_id: usize, num_classes: usize, freq_bins: usize) -> (usize, usize) {
    let f = freq_bins as f64;
    let first = (f * (class_id + 1) as f64 / (num_classes + 2) as f64).round() as usize % freq_bins;
    let second = (first + (f / 4.0).round() as usize) % freq_bins;
    (first, second)
}

/// Noise-free `[freq_bins x frames]` pattern of a class.
pub fn class_template(class_id: usize, num_classes: usize, freq_bins: usize, frames: usize) -> Tensor {
    let (c1, c2) = band_centers(class_id, num_classes, freq_bins);
    let sigma = freq_bins as f64 / 32.0;
    let bump = |f: usize, c: usize| {
        let d = f as f64 - c as f64;
        (-d * d / (2.0 * sigma * sigma)).exp()
    };
    let mut data = Vec::with_capacity(freq_bins * frames);
    for f in 0..freq_bins {
        let v = round_f32(bump(f, c1).max(bump(f, c2)));
        data.extend(std::iter::repeat_n(v, frames));
    }
    Tensor::new(vec![freq_bins, frames], data).expect("finite template")
}

/// Random draws behind one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleDraw {
    pub shift: usize,
    pub gain: f64,
}

/// Overrides for the per-sample randomness. The stream is consumed in the same
/// order regardless, so only the overridden quantity changes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perturbation {
    pub gain_range: (f64, f64),
    pub shift: Option<usize>,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            gain_range: (0.8, 1.2),
            shift: None,
        }
    }
}

pub fn sample_seed(seed: u64, class_id: usize, sample_index: usize) -> u64 {
    seed ^ (((class_id as u64) << 32).wrapping_add(sample_index as u64))
}

pub fn synth_sample(config: &SynthConfig, class_id: usize, sample_index: usize) -> Sample {
    synth_sample_with(config, class_id, sample_index, &Perturbation::default()).0
}

pub fn synth_sample_with(
    config: &SynthConfig,
    class_id: usize,
    sample_index: usize,
    perturb: &Perturbation,
) -> (Sample, SampleDraw) {
    let (f_bins, frames) = (config.freq_bins, config.frames);
    let template = class_template(class_id, config.num_classes, f_bins, frames);
    let mut rng = SplitMix64::new(sample_seed(config.seed, class_id, sample_index));

    let drawn_shift = rng.below(frames as u64) as usize;
    let (lo, hi) = perturb.gain_range;
    let gain = rng.uniform(lo, hi);
    let shift = perturb.shift.unwrap_or(drawn_shift);

    let mut data = Vec::with_capacity(f_bins * frames);
    for f in 0..f_bins {
        for t in 0..frames {
            let src = (t + frames - shift % frames) % frames;
            let noise = rng.normal() * config.noise_std;
            data.push(round_f32(gain * template.at(&[f, src]) + noise));
        }
    }
    let spectrogram = Tensor::new(vec![f_bins, frames], data).expect("finite sample");
    (
        Sample {
            spectrogram,
            label: class_id,
        },
        SampleDraw { shift, gain },
    )
}

/// Full corpus, ordered by class then sample index.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let samples = (0..config.num_classes)
        .flat_map(|k| (0..config.samples_per_class).map(move |i| (k, i)))
        .map(|(k, i)| synth_sample(config, k, i))
        .collect();
    Ok(Dataset {
        config: config.clone(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_classes: 3,
            freq_bins: 16,
            frames: 8,
            samples_per_class: 4,
            noise_std: 0.2,
            seed: 42,
        }
    }

    #[test]
    fn template_is_pure() {
        assert!(class_template(2, 8, 40, 32).bitwise_eq(&class_template(2, 8, 40, 32)));
    }

    #[test]
    fn templates_differ_between_classes() {
        let a = class_template(0, 8, 40, 32);
        let b = class_template(1, 8, 40, 32);
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn band_center_peaks_at_one() {
        for k in 0..8 {
            let t = class_template(k, 8, 40, 32);
            let (c1, c2) = band_centers(k, 8, 40);
            assert_ne!(c1, c2);
            for tt in 0..32 {
                assert_eq!(t.at(&[c1, tt]), 1.0);
                assert_eq!(t.at(&[c2, tt]), 1.0);
            }
        }
        assert_eq!(band_centers(0, 8, 40), (4, 14));
        assert_eq!(band_centers(7, 8, 40), (32, 2));
    }

    #[test]
    fn sample_is_reproducible() {
        let c = small();
        let a = synth_sample(&c, 1, 3);
        let b = synth_sample(&c, 1, 3);
        assert!(a.spectrogram.bitwise_eq(&b.spectrogram));
        assert_eq!(a.label, 1);
        assert!(!a.spectrogram.bitwise_eq(&synth_sample(&c, 1, 2).spectrogram));
    }

    #[test]
    fn degenerate_randomness_reproduces_template() {
        let c = SynthConfig {
            noise_std: 0.0,
            ..small()
        };
        let perturb = Perturbation {
            gain_range: (1.0, 1.0),
            shift: Some(0),
        };
        let (s, _) = synth_sample_with(&c, 2, 0, &perturb);
        assert!(s.spectrogram.bitwise_eq(&class_template(2, 3, 16, 8)));
    }

    #[test]
    fn noise_averages_out() {
        let c = SynthConfig {
            noise_std: 0.5,
            samples_per_class: 1000,
            ..small()
        };
        let n = 1000;
        let cells = c.freq_bins * c.frames;
        let template = class_template(0, c.num_classes, c.freq_bins, c.frames);
        let mut sums = vec![0.0; cells];
        for i in 0..n {
            let (s, draw) = synth_sample_with(&c, 0, i, &Perturbation::default());
            for f in 0..c.freq_bins {
                for t in 0..c.frames {
                    let src = (t + c.frames - draw.shift) % c.frames;
                    let resid = s.spectrogram.at(&[f, t]) - draw.gain * template.at(&[f, src]);
                    sums[f * c.frames + t] += resid;
                }
            }
        }
        let bound = 3.0 * c.noise_std / (n as f64).sqrt();
        let worst = sums.iter().map(|s| (s / n as f64).abs()).fold(0.0, f64::max);
        // 3-sigma per cell over 128 cells: allow a small slack on the worst one
        assert!(worst <= 1.5 * bound, "worst {worst} bound {bound}");
        let within = sums.iter().filter(|s| (*s / n as f64).abs() <= bound).count();
        assert!(within as f64 >= 0.97 * cells as f64);
    }

    #[test]
    fn dataset_is_balanced_and_deterministic() {
        let d = generate(&small()).unwrap();
        assert_eq!(d.len(), 12);
        for k in 0..3 {
            assert_eq!(d.samples.iter().filter(|s| s.label == k).count(), 4);
        }
        assert_eq!(d, generate(&small()).unwrap());
    }

    #[test]
    fn split_holds_out_every_fifth() {
        let d = generate(&SynthConfig {
            samples_per_class: 5,
            ..small()
        })
        .unwrap();
        let (train, held) = d.split();
        assert_eq!(held, vec![4, 9, 14]);
        assert_eq!(train.len(), 12);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate(&SynthConfig {
            num_classes: 1,
            ..small()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            freq_bins: 4,
            ..small()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            noise_std: -1.0,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn round_trip_bytes() {
        let d = generate(&small()).unwrap();
        let back = Dataset::from_bytes(&d.to_bytes()).unwrap();
        assert_eq!(back.config, d.config);
        assert!(back
            .samples
            .iter()
            .zip(&d.samples)
            .all(|(a, b)| a.label == b.label && a.spectrogram.bitwise_eq(&b.spectrogram)));
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let bytes = generate(&small()).unwrap().to_bytes();
        for cut in [0, 3, 5, 20, 33, bytes.len() - 1] {
            assert!(
                matches!(Dataset::from_bytes(&bytes[..cut]), Err(Error::Parse { .. })),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut bytes = generate(&small()).unwrap().to_bytes();
        bytes[4] = 255;
        assert!(matches!(
            Dataset::from_bytes(&bytes),
            Err(Error::Version {
                found: 255,
                expected: 1
            })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            Dataset::from_bytes(&bytes),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = generate(&small()).unwrap().to_bytes();
        bytes.push(0);
        assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::Parse { .. })));
    }

    #[test]
    fn templates_separate_noisy_samples() {
        let c = SynthConfig {
            noise_std: 0.3,
            samples_per_class: 50,
            ..SynthConfig::default()
        };
        let d = generate(&c).unwrap();
        let profiles: Vec<Vec<f64>> = (0..c.num_classes)
            .map(|k| {
                let t = class_template(k, c.num_classes, c.freq_bins, c.frames);
                (0..c.freq_bins).map(|f| t.at(&[f, 0])).collect()
            })
            .collect();
        let mut correct = 0;
        for s in &d.samples {
            let spectrum: Vec<f64> = (0..c.freq_bins)
                .map(|f| s.spectrogram.row(f).iter().sum::<f64>() / c.frames as f64)
                .collect();
            let scores: Vec<f64> = profiles
                .iter()
                .map(|p| p.iter().zip(&spectrum).map(|(a, b)| a * b).sum())
                .collect();
            let own = scores[s.label];
            if scores.iter().enumerate().all(|(k, &v)| k == s.label || v < own) {
                correct += 1;
            }
        }
        assert!(correct as f64 >= 0.95 * d.len() as f64, "{correct}/{}", d.len());
    }
}

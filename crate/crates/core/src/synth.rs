//! Synthetic activity streams: `k` Gaussian regimes over the channels with
//! Markov dwell times, recorded from several subjects whose sensors carry a
//! per-subject offset.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, Schema, SensorStream};
use crate::error::{Error, Result};

const MEAN_TRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    /// Channels whose distribution depends on the activity.
    pub channels: usize,
    /// Extra channels with the same distribution under every activity.
    pub noise_channels: usize,
    pub subjects: usize,
    /// Recording length per subject.
    pub seconds_per_subject: f64,
    pub sample_rate_hz: f64,
    /// Mean time spent in one activity before switching.
    pub mean_dwell_s: f64,
    /// Spread of class means across channels.
    pub separation: f64,
    /// Within-regime sample noise (scaled per class and channel).
    pub noise: f64,
    /// Spread of the per-subject channel offsets.
    pub subject_offset: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            channels: 3,
            noise_channels: 3,
            subjects: 4,
            seconds_per_subject: 600.0,
            sample_rate_hz: 20.0,
            mean_dwell_s: 20.0,
            separation: 1.0,
            noise: 2.0,
            subject_offset: 0.5,
            seed: 0,
        }
    }
}

/// Per-class regime: channel means and standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct Regime {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.channels == 0 || self.subjects == 0 {
            return Err(Error::Parameter(
                "synthetic data needs >= 2 classes, >= 1 channel and >= 1 subject".into(),
            ));
        }
        for (name, v) in [
            ("seconds_per_subject", self.seconds_per_subject),
            ("sample_rate_hz", self.sample_rate_hz),
            ("mean_dwell_s", self.mean_dwell_s),
            ("noise", self.noise),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.separation >= 0.0) || !(self.subject_offset >= 0.0) {
            return Err(Error::Parameter("separation and subject_offset must be >= 0".into()));
        }
        Ok(())
    }

    pub fn total_channels(&self) -> usize {
        self.channels + self.noise_channels
    }

    pub fn channel_names(&self) -> Vec<String> {
        (0..self.total_channels()).map(|c| format!("ch{c}")).collect()
    }

    /// Schema matching the files written by [`write_stream_csv`].
    pub fn schema(&self) -> Schema {
        Schema {
            sample_rate_hz: self.sample_rate_hz,
            index_column: "t".into(),
            channels: self.channel_names(),
            label_column: Some("label".into()),
            subject_id: None,
            delimiter: ",".into(),
            has_header: true,
            drop_labels: Vec::new(),
            label_merge: Default::default(),
        }
    }

    /// Class regimes; noise channels share one regime across classes.
    ///
    /// Class means are redrawn (up to a fixed number of tries) until every
    /// pair is at least `separation * sqrt(channels)` apart, so no two
    /// activities coincide by chance.
    pub fn regimes(&self) -> Vec<Regime> {
        let mut rng = self.rng(0);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..self.classes)
                .map(|_| (0..self.channels).map(|_| self.separation * unit.sample(rng)).collect())
                .collect()
        };
        let min_gap = |means: &[Vec<f64>]| {
            let mut gap = f64::INFINITY;
            for i in 0..means.len() {
                for j in i + 1..means.len() {
                    gap = gap.min(crate::neighbors::squared_distance(&means[i], &means[j]).sqrt());
                }
            }
            gap
        };
        let want = self.separation * (self.channels as f64).sqrt();
        let mut means = draw(&mut rng);
        for _ in 0..MEAN_TRIES {
            if min_gap(&means) >= want {
                break;
            }
            let next = draw(&mut rng);
            if min_gap(&next) > min_gap(&means) {
                means = next;
            }
        }
        let shared: Vec<(f64, f64)> = (0..self.noise_channels)
            .map(|_| (self.separation * unit.sample(&mut rng), self.noise * rng.random_range(0.5..1.5)))
            .collect();
        means
            .into_iter()
            .map(|mut mean| {
                let mut std: Vec<f64> =
                    (0..self.channels).map(|_| self.noise * rng.random_range(0.5..1.5)).collect();
                mean.extend(shared.iter().map(|s| s.0));
                std.extend(shared.iter().map(|s| s.1));
                Regime { mean, std }
            })
            .collect()
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// One labeled stream per subject, with class ids `0..classes`.
pub fn generate(config: &SynthConfig) -> Result<Vec<SensorStream>> {
    config.validate()?;
    let regimes = config.regimes();
    let n = (config.seconds_per_subject * config.sample_rate_hz).round() as usize;
    let dwell = Exp::new(1.0 / (config.mean_dwell_s * config.sample_rate_hz))
        .map_err(|e| Error::Parameter(e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    (0..config.subjects)
        .map(|s| {
            let mut rng = config.rng(1 + s as u64);
            let offset: Vec<f64> = (0..config.total_channels())
                .map(|_| config.subject_offset * unit.sample(&mut rng))
                .collect();
            let mut labels = Vec::with_capacity(n);
            let mut class = rng.random_range(0..config.classes);
            while labels.len() < n {
                let len = (dwell.sample(&mut rng).ceil() as usize).max(1);
                let take = len.min(n - labels.len());
                labels.extend(std::iter::repeat_n(class as ClassId, take));
                let next = rng.random_range(0..config.classes - 1);
                class = if next >= class { next + 1 } else { next };
            }
            let mut channels = vec![Vec::with_capacity(n); config.total_channels()];
            for &label in &labels {
                let r = &regimes[label as usize];
                for (c, ch) in channels.iter_mut().enumerate() {
                    ch.push(r.mean[c] + offset[c] + r.std[c] * unit.sample(&mut rng));
                }
            }
            let mut stream =
                SensorStream::new(config.channel_names(), channels, config.sample_rate_hz, Some(labels))?;
            stream.subject_id = Some(format!("subject{s}"));
            Ok(stream)
        })
        .collect()
}

/// Writes `t,ch0..,label` rows; values use shortest round-trip formatting.
pub fn write_stream_csv<W: Write>(writer: W, stream: &SensorStream) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Contract(format!("csv write failed: {e}"));
    let mut header = vec!["t".to_string()];
    header.extend(stream.channel_names.iter().cloned());
    if stream.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..stream.len() {
        let mut row = vec![i.to_string()];
        row.extend(stream.channels.iter().map(|c| format!("{:?}", c[i])));
        if let Some(l) = &stream.labels {
            row.push(l[i].to_string());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Contract(format!("csv flush failed: {e}")))?;
    Ok(())
}

/// Writes `subject<i>.csv` per stream plus `schema.toml` into `dir`.
/// Returns the stream paths in order.
pub fn write_dataset(dir: &Path, config: &SynthConfig, streams: &[SensorStream]) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let schema_path = dir.join("schema.toml");
    std::fs::write(&schema_path, config.schema().to_toml_string()).map_err(|e| Error::io(&schema_path, e))?;
    streams
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let path = dir.join(format!("subject{i}.csv"));
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_stream_csv(std::io::BufWriter::new(file), s)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::read_stream;

    fn small() -> SynthConfig {
        SynthConfig {
            classes: 3,
            noise_channels: 0,
            subjects: 2,
            seconds_per_subject: 30.0,
            sample_rate_hz: 10.0,
            mean_dwell_s: 3.0,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_shaped() {
        let c = small();
        let a = generate(&c).unwrap();
        assert_eq!(a, generate(&c).unwrap());
        assert_eq!(a.len(), 2);
        for s in &a {
            assert_eq!(s.len(), 300);
            assert_eq!(s.num_channels(), 3);
            assert!(s.labels.as_ref().unwrap().iter().all(|&l| (0..3).contains(&l)));
        }
        assert_ne!(a[0].channels, a[1].channels);
    }

    #[test]
    fn noise_channels_ignore_the_class() {
        let c = SynthConfig {
            noise_channels: 2,
            ..small()
        };
        let r = c.regimes();
        assert_eq!(r[0].mean.len(), 5);
        for k in 1..3 {
            assert_eq!(r[k].mean[3..], r[0].mean[3..]);
            assert_eq!(r[k].std[3..], r[0].std[3..]);
            assert_ne!(r[k].mean[..3], r[0].mean[..3]);
        }
        assert_eq!(generate(&c).unwrap()[0].num_channels(), 5);
    }

    #[test]
    fn dwell_produces_runs() {
        let s = &generate(&small()).unwrap()[0];
        let l = s.labels.as_ref().unwrap();
        let switches = l.windows(2).filter(|w| w[0] != w[1]).count();
        // mean dwell is 30 samples, so far fewer switches than samples
        assert!(switches > 0 && switches < 40, "{switches}");
    }

    #[test]
    fn csv_roundtrip_through_schema() {
        let c = small();
        let s = &generate(&c).unwrap()[0];
        let mut buf = Vec::new();
        write_stream_csv(&mut buf, s).unwrap();
        let (back, stats) = read_stream(&buf[..], &c.schema()).unwrap();
        assert_eq!(stats.rows_read, 300);
        assert_eq!(back.channels, s.channels);
        assert_eq!(back.labels, s.labels);
    }
}

//! Synthetic memory-decay benchmark.
//!
//! Sessions simulate a subject whose recall degrades over time: a fixed
//! linear map turns per-sample image embeddings into brain responses, while a
//! session-indexed schedule shrinks the signal gain, raises the noise floor,
//! and lowers both response accuracy and the fraction of positively activated
//! channels. Everything is derived from one seed, so a config generates the
//! same dataset bit-for-bit every time.

use std::fs;
use std::io::{self, Read, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("generator config: {0}")]
    BadConfig(String),
    #[error("dataset has no samples in session range {0}..={1}")]
    EmptyRange(u32, u32),
}

#[derive(Debug, Error)]
pub enum DatasetFileError {
    #[error("dataset i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad dataset magic {found:?}, expected \"VBCL\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported dataset version {found}")]
    UnsupportedVersion { found: u16 },
    #[error("dataset truncated: {0}")]
    Truncated(&'static str),
    #[error("dataset checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("dataset header mismatch: file has n={got_n}, d={got_d}; expected n={want_n}, d={want_d}")]
    HeaderMismatch {
        got_n: u32,
        got_d: u32,
        want_n: u32,
        want_d: u32,
    },
}

/// Shape of the decline. Defaults reproduce the reference benchmark.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GenConfig {
    pub n_sessions: u32,
    pub samples_per_session: u32,
    /// Brain-response dimensionality n.
    pub input_dim: u32,
    /// Image-embedding dimensionality d.
    pub embed_dim: u32,
    /// Response accuracy at the first session.
    pub r_max: f64,
    /// Response accuracy at the last session.
    pub r_min: f64,
    /// Signal gain at the last session, as a fraction of the first session's.
    pub gain_floor: f64,
    /// Noise std at full response accuracy (σ0).
    pub noise_base: f64,
    /// How strongly noise grows as accuracy declines (κ).
    pub noise_growth: f64,
    /// Session-to-session representational drift of the mixing map, as the
    /// fraction of a quarter turn reached by the final session. The mixing
    /// map rotates through a fixed random plane while keeping its entry
    /// distribution (and hence every decay statistic) unchanged; 0 pins one
    /// fixed map for the whole dataset.
    pub map_drift: f64,
    /// Trailing fraction of each session held out for evaluation.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_sessions: 40,
            samples_per_session: 100,
            input_dim: 64,
            embed_dim: 16,
            r_max: 0.95,
            r_min: 0.70,
            gain_floor: 0.55,
            noise_base: 0.25,
            noise_growth: 1.0,
            map_drift: 1.05,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_sessions == 0 || self.samples_per_session == 0 {
            return Err(SynthError::BadConfig("session and sample counts must be positive".into()));
        }
        if self.input_dim == 0 || self.embed_dim == 0 {
            return Err(SynthError::BadConfig("dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.r_min)
            || !(0.0..=1.0).contains(&self.r_max)
            || self.r_min > self.r_max
        {
            return Err(SynthError::BadConfig(
                "need 0 ≤ r_min ≤ r_max ≤ 1".into(),
            ));
        }
        if !(0.0 < self.gain_floor && self.gain_floor <= 1.0) {
            return Err(SynthError::BadConfig("gain_floor must be in (0, 1]".into()));
        }
        if self.noise_base < 0.0 || self.noise_growth < 0.0 {
            return Err(SynthError::BadConfig("noise parameters must be non-negative".into()));
        }
        if !(0.0..=2.0).contains(&self.map_drift) {
            return Err(SynthError::BadConfig("map_drift must be in [0, 2]".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(SynthError::BadConfig("test_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Linear response-accuracy schedule from r_max down to r_min.
    pub fn response_rate(&self, t: u32) -> f64 {
        debug_assert!(t >= 1 && t <= self.n_sessions);
        if self.n_sessions == 1 {
            return self.r_max;
        }
        let frac = (t - 1) as f64 / (self.n_sessions - 1) as f64;
        self.r_max - (self.r_max - self.r_min) * frac
    }

    /// Signal gain tied to the accuracy schedule.
    pub fn gain(&self, t: u32) -> f64 {
        self.gain_floor + (1.0 - self.gain_floor) * self.response_rate(t)
    }

    /// Noise std grows as accuracy declines.
    pub fn noise_std(&self, t: u32) -> f64 {
        self.noise_base * (1.0 + self.noise_growth * (1.0 - self.response_rate(t)))
    }

    /// Rotation angle of the mixing map at session t (radians).
    pub fn drift_angle(&self, t: u32) -> f64 {
        debug_assert!(t >= 1 && t <= self.n_sessions);
        if self.n_sessions == 1 {
            return 0.0;
        }
        let frac = (t - 1) as f64 / (self.n_sessions - 1) as f64;
        self.map_drift * std::f64::consts::FRAC_PI_2 * frac
    }

    /// Held-out samples per session.
    pub fn test_count(&self) -> u32 {
        (self.test_fraction * self.samples_per_session as f64).round() as u32
    }
}

/// Per-session ground truth and observables.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SessionMeta {
    pub session: u32,
    /// Scheduled response accuracy r(t).
    pub response_rate: f64,
    /// Recall-consistency score (tracks r(t) closely).
    pub consistency: f64,
    /// Empirical fraction of positive response channels a(t).
    pub activation: f64,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub session: u32,
    pub response_correct: bool,
    pub is_test: bool,
    /// Brain response, length = input_dim.
    pub x: Vec<f64>,
    /// True image embedding, length = embed_dim.
    pub c: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetHeader {
    pub n_sessions: u32,
    pub samples_per_session: u32,
    pub input_dim: u32,
    pub embed_dim: u32,
    pub test_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub sessions: Vec<SessionMeta>,
    pub samples: Vec<Sample>,
}

/// Centers the activation fraction: positive bias shifts responses so the
/// expected share of positive channels starts above one half and sinks with
/// the schedule (shrinking bias, growing noise).
const BASELINE_SCALE: f64 = 0.3;

pub fn generate(cfg: &GenConfig) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    let n = cfg.input_dim as usize;
    let d = cfg.embed_dim as usize;

    // Mixing map; entry std 1/√d keeps the per-channel signal scale
    // independent of the embedding width. Under drift the map at session t is
    // cos(φ(t))·W_a + sin(φ(t))·W_b — the same entry distribution for every
    // angle, so decay statistics are untouched while the mapping itself moves.
    let w_std = 1.0 / (d as f64).sqrt();
    let mut map_rng = rng::stream(cfg.seed, &[0]);
    let w_a: Vec<f64> = (0..n * d)
        .map(|_| w_std * map_rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut drift_rng = rng::stream(cfg.seed, &[4]);
    let w_b: Vec<f64> = (0..n * d)
        .map(|_| w_std * drift_rng.sample::<f64, _>(StandardNormal))
        .collect();

    let test_count = cfg.test_count();
    let mut sessions = Vec::with_capacity(cfg.n_sessions as usize);
    let mut samples = Vec::with_capacity((cfg.n_sessions * cfg.samples_per_session) as usize);
    for t in 1..=cfg.n_sessions {
        let r = cfg.response_rate(t);
        let gain = cfg.gain(t);
        let noise = cfg.noise_std(t);
        let baseline = BASELINE_SCALE * r;
        let phi = cfg.drift_angle(t);
        let (sin_phi, cos_phi) = phi.sin_cos();

        let mut embed_rng = rng::stream(cfg.seed, &[1, t as u64]);
        let mut noise_rng = rng::stream(cfg.seed, &[2, t as u64]);
        let mut response_rng = rng::stream(cfg.seed, &[3, t as u64]);

        let mut positive = 0u64;
        let session_start = samples.len();
        for s in 0..cfg.samples_per_session {
            // unit-norm image embedding
            let mut c: Vec<f64> = (0..d).map(|_| embed_rng.sample(StandardNormal)).collect();
            let c_norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if c_norm < 1e-12 {
                // astronomically unlikely; resample deterministically
                c = (0..d).map(|_| embed_rng.sample(StandardNormal)).collect();
            }
            let c_norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in c.iter_mut() {
                *v /= c_norm;
            }

            let mut x = vec![0.0; n];
            for (i, xi) in x.iter_mut().enumerate() {
                let row = i * d..(i + 1) * d;
                let signal: f64 = if phi == 0.0 {
                    // exact zero-drift path: bit-identical to a fixed map
                    w_a[row].iter().zip(&c).map(|(w, cv)| w * cv).sum()
                } else {
                    w_a[row.clone()]
                        .iter()
                        .zip(&w_b[row])
                        .zip(&c)
                        .map(|((wa, wb), cv)| (cos_phi * wa + sin_phi * wb) * cv)
                        .sum()
                };
                let eps: f64 = noise_rng.sample(StandardNormal);
                *xi = gain * signal + baseline + noise * eps;
                if *xi > 0.0 {
                    positive += 1;
                }
            }
            samples.push(Sample {
                session: t,
                response_correct: response_rng.gen_bool(r),
                is_test: s >= cfg.samples_per_session - test_count,
                x,
                c,
            });
        }
        let activation =
            positive as f64 / (cfg.samples_per_session as u64 * n as u64) as f64;
        sessions.push(SessionMeta {
            session: t,
            response_rate: r,
            consistency: (r + 0.03).clamp(0.0, 1.0),
            activation,
        });
        debug_assert_eq!(samples.len() - session_start, cfg.samples_per_session as usize);
    }

    Ok(Dataset {
        header: DatasetHeader {
            n_sessions: cfg.n_sessions,
            samples_per_session: cfg.samples_per_session,
            input_dim: cfg.input_dim,
            embed_dim: cfg.embed_dim,
            test_fraction: cfg.test_fraction,
            seed: cfg.seed,
        },
        sessions,
        samples,
    })
}

/// Observed per-session digest: scheduled rate, empirical accuracy,
/// consistency, activation fraction.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SessionStat {
    pub session: u32,
    pub response_rate: f64,
    pub observed_accuracy: f64,
    pub consistency: f64,
    pub activation: f64,
}

pub fn session_stats(dataset: &Dataset) -> Result<Vec<SessionStat>, SynthError> {
    let mut stats = Vec::with_capacity(dataset.sessions.len());
    for meta in &dataset.sessions {
        let mut correct = 0u64;
        let mut total = 0u64;
        for s in dataset.samples.iter().filter(|s| s.session == meta.session) {
            total += 1;
            if s.response_correct {
                correct += 1;
            }
        }
        if total == 0 {
            return Err(SynthError::EmptyRange(meta.session, meta.session));
        }
        stats.push(SessionStat {
            session: meta.session,
            response_rate: meta.response_rate,
            observed_accuracy: correct as f64 / total as f64,
            consistency: meta.consistency,
            activation: meta.activation,
        });
    }
    Ok(stats)
}

impl Dataset {
    /// Indices of training samples whose session lies in `range`.
    pub fn train_indices(&self, range: RangeInclusive<u32>) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_test && range.contains(&s.session))
            .map(|(i, _)| i)
            .collect()
    }

    /// Indices of held-out samples whose session lies in `range`.
    pub fn test_indices(&self, range: RangeInclusive<u32>) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_test && range.contains(&s.session))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn meta(&self, session: u32) -> &SessionMeta {
        &self.sessions[(session - 1) as usize]
    }
}

// ─── file format ─────────────────────────────────────────────────────────────
//
// "VBCL" | version u16
// | n_sessions u32 | samples_per_session u32 | input_dim u32 | embed_dim u32
// | test_fraction f64 | seed u64
// | per session: t u32, response_rate f64, consistency f64, activation f64
// | per sample: t u32, flags u8 (bit0 response_correct, bit1 is_test),
//               x input_dim×f64, c embed_dim×f64
// | crc32 u32 over every preceding byte
//
// All integers and floats little-endian.

const MAGIC: &[u8; 4] = b"VBCL";
const VERSION: u16 = 1;

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<(), DatasetFileError> {
    let h = &dataset.header;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&h.n_sessions.to_le_bytes());
    buf.extend_from_slice(&h.samples_per_session.to_le_bytes());
    buf.extend_from_slice(&h.input_dim.to_le_bytes());
    buf.extend_from_slice(&h.embed_dim.to_le_bytes());
    buf.extend_from_slice(&h.test_fraction.to_le_bytes());
    buf.extend_from_slice(&h.seed.to_le_bytes());
    for m in &dataset.sessions {
        buf.extend_from_slice(&m.session.to_le_bytes());
        buf.extend_from_slice(&m.response_rate.to_le_bytes());
        buf.extend_from_slice(&m.consistency.to_le_bytes());
        buf.extend_from_slice(&m.activation.to_le_bytes());
    }
    for s in &dataset.samples {
        buf.extend_from_slice(&s.session.to_le_bytes());
        let flags = (s.response_correct as u8) | ((s.is_test as u8) << 1);
        buf.push(flags);
        for v in &s.x {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &s.c {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetFileError> {
    read_dataset_checked(path, None)
}

/// Read a dataset, failing with [`DatasetFileError::HeaderMismatch`] before
/// any payload parsing if the header's dimensions differ from `expect`.
pub fn read_dataset_expecting(
    path: &Path,
    input_dim: u32,
    embed_dim: u32,
) -> Result<Dataset, DatasetFileError> {
    read_dataset_checked(path, Some((input_dim, embed_dim)))
}

fn read_dataset_checked(
    path: &Path,
    expect: Option<(u32, u32)>,
) -> Result<Dataset, DatasetFileError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic = cur.take::<4>("magic")?;
    if &magic != MAGIC {
        return Err(DatasetFileError::BadMagic { found: magic });
    }
    let version = u16::from_le_bytes(cur.take::<2>("version")?);
    if version != VERSION {
        return Err(DatasetFileError::UnsupportedVersion { found: version });
    }
    let header = DatasetHeader {
        n_sessions: u32::from_le_bytes(cur.take::<4>("n_sessions")?),
        samples_per_session: u32::from_le_bytes(cur.take::<4>("samples_per_session")?),
        input_dim: u32::from_le_bytes(cur.take::<4>("input_dim")?),
        embed_dim: u32::from_le_bytes(cur.take::<4>("embed_dim")?),
        test_fraction: f64::from_le_bytes(cur.take::<8>("test_fraction")?),
        seed: u64::from_le_bytes(cur.take::<8>("seed")?),
    };
    if let Some((want_n, want_d)) = expect {
        if header.input_dim != want_n || header.embed_dim != want_d {
            return Err(DatasetFileError::HeaderMismatch {
                got_n: header.input_dim,
                got_d: header.embed_dim,
                want_n,
                want_d,
            });
        }
    }

    // the header fixes the full file size; check it before trusting the
    // trailing checksum bytes to even exist (u128: the product of two
    // adversarial u32 counts can overflow usize)
    let n_sessions = header.n_sessions as u128;
    let total_samples = n_sessions * header.samples_per_session as u128;
    let per_sample = 5 + 8 * (header.input_dim as u128 + header.embed_dim as u128);
    let expected = cur.pos as u128 + n_sessions * 28 + total_samples * per_sample + 4;
    if (bytes.len() as u128) < expected {
        return Err(DatasetFileError::Truncated("file shorter than header promises"));
    }
    if (bytes.len() as u128) > expected {
        return Err(DatasetFileError::Truncated("trailing bytes after checksum"));
    }
    let payload = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(DatasetFileError::ChecksumMismatch { stored, computed });
    }

    let n = header.input_dim as usize;
    let d = header.embed_dim as usize;
    let mut sessions = Vec::with_capacity(header.n_sessions as usize);
    for _ in 0..header.n_sessions {
        sessions.push(SessionMeta {
            session: u32::from_le_bytes(cur.take::<4>("session meta")?),
            response_rate: f64::from_le_bytes(cur.take::<8>("session meta")?),
            consistency: f64::from_le_bytes(cur.take::<8>("session meta")?),
            activation: f64::from_le_bytes(cur.take::<8>("session meta")?),
        });
    }
    let total = header.n_sessions as usize * header.samples_per_session as usize;
    let mut samples = Vec::with_capacity(total);
    for _ in 0..total {
        let session = u32::from_le_bytes(cur.take::<4>("sample")?);
        let flags = cur.take::<1>("sample")?[0];
        let mut x = Vec::with_capacity(n);
        for _ in 0..n {
            x.push(f64::from_le_bytes(cur.take::<8>("sample x")?));
        }
        let mut c = Vec::with_capacity(d);
        for _ in 0..d {
            c.push(f64::from_le_bytes(cur.take::<8>("sample c")?));
        }
        samples.push(Sample {
            session,
            response_correct: flags & 1 != 0,
            is_test: flags & 2 != 0,
            x,
            c,
        });
    }
    if cur.pos != payload.len() {
        return Err(DatasetFileError::Truncated("trailing bytes before checksum"));
    }
    Ok(Dataset {
        header,
        sessions,
        samples,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], DatasetFileError> {
        // leave room for the trailing checksum
        if self.pos + N + 4 > self.bytes.len() {
            return Err(DatasetFileError::Truncated(what));
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        Ok(out)
    }
}

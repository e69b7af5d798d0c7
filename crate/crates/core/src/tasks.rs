//! Few-shot episodes: a synthetic Gaussian-cluster generator and a compact
//! binary file format for pre-embedded episodes.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ShapeError;
use crate::loss::{EmbeddedSet, Matrix};

/// One few-shot task. Features are raw inputs; with an identity backbone
/// they are the embeddings themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub train: EmbeddedSet,
    pub test: EmbeddedSet,
    pub way: usize,
    pub shot: usize,
}

impl Episode {
    pub fn new(train: EmbeddedSet, test: EmbeddedSet, way: usize, shot: usize) -> Result<Self, ShapeError> {
        if train.len() != way * shot {
            return Err(ShapeError::new(format!(
                "{} training rows for a {way}-way {shot}-shot task",
                train.len()
            )));
        }
        if train.n_classes() != way || test.n_classes() != way {
            return Err(ShapeError::new("class count differs from the way"));
        }
        if train.dim() != test.dim() {
            return Err(ShapeError::new("train and test feature widths differ"));
        }
        Ok(Episode { train, test, way, shot })
    }

    pub fn test_shots(&self) -> usize {
        self.test.len() / self.way
    }

    pub fn input_dim(&self) -> usize {
        self.train.dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskGenConfig {
    pub way: usize,
    pub shot: usize,
    pub test_shots: usize,
    pub input_dim: usize,
    pub class_spread: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        TaskGenConfig { way: 5, shot: 1, test_shots: 15, input_dim: 16, class_spread: 1.0, noise_std: 0.3, seed: 0 }
    }
}

impl TaskGenConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.way < 2 {
            return Err(format!("way must be at least 2, got {}", self.way));
        }
        if self.way > u16::MAX as usize + 1 {
            return Err("way does not fit 16-bit labels".into());
        }
        if self.shot == 0 || self.test_shots == 0 || self.input_dim == 0 {
            return Err("shot, test_shots and input_dim must be positive".into());
        }
        if !(self.class_spread > 0.0 && self.class_spread.is_finite()) {
            return Err(format!("class_spread must be positive, got {}", self.class_spread));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        Ok(())
    }
}

/// Deterministic in `(cfg.seed, index)`. Rows cycle through the classes, so
/// every class appears exactly `shot` (train) and `test_shots` (test) times.
pub fn sample_episode(cfg: &TaskGenConfig, index: u64) -> Episode {
    cfg.validate().expect("invalid task generator config");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let (n, d) = (cfg.way, cfg.input_dim);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let prototypes = Matrix::from_fn(n, d, |_, _| cfg.class_spread * unit.sample(&mut rng));
    let mut draw = |rows: usize| {
        let labels: Vec<usize> = (0..rows).map(|r| r % n).collect();
        let mut x = Matrix::zeros(rows, d);
        for (r, &c) in labels.iter().enumerate() {
            for k in 0..d {
                x[(r, k)] = prototypes[(c, k)] + cfg.noise_std * unit.sample(&mut rng);
            }
        }
        EmbeddedSet::new(x, labels, n).expect("generated set is consistent")
    };
    let train = draw(n * cfg.shot);
    let test = draw(n * cfg.test_shots);
    Episode::new(train, test, n, cfg.shot).expect("generated episode is consistent")
}

#[derive(Debug, Error)]
pub enum EpisodeFileError {
    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: u64, reason: String },
    #[error("dimension inconsistency at byte {offset}: {reason}")]
    DimensionInconsistency { offset: u64, reason: String },
    #[error("file truncated at byte {offset}: expected {expected} more bytes")]
    Truncated { offset: u64, expected: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

const MAGIC: &str = "COMLN-EP";
const VERSION: &str = "1";

/// Dimensions shared by every episode in a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeHeader {
    pub count: u64,
    pub way: usize,
    pub shot: usize,
    pub test_shots: usize,
    pub dim: usize,
}

impl EpisodeHeader {
    fn line(&self) -> String {
        format!("{MAGIC} {VERSION} {} {} {} {} {}\n", self.count, self.way, self.shot, self.test_shots, self.dim)
    }
}

fn put_f64s(out: &mut impl Write, m: &Matrix) -> io::Result<()> {
    for r in 0..m.nrows() {
        for v in m.row(r).iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn put_labels(out: &mut impl Write, labels: &[usize]) -> io::Result<()> {
    for &l in labels {
        out.write_all(&(l as u16).to_le_bytes())?;
    }
    Ok(())
}

/// Writes episodes to any sink. All episodes must share the dimensions of
/// the first; an empty list writes a header with count 0 and zero dims.
pub fn write_episodes_to(out: &mut impl Write, episodes: &[Episode]) -> Result<(), EpisodeFileError> {
    let header = match episodes.first() {
        Some(e) => EpisodeHeader {
            count: episodes.len() as u64,
            way: e.way,
            shot: e.shot,
            test_shots: e.test_shots(),
            dim: e.input_dim(),
        },
        None => EpisodeHeader { count: 0, way: 0, shot: 0, test_shots: 0, dim: 0 },
    };
    if header.way > u16::MAX as usize + 1 {
        return Err(EpisodeFileError::DimensionInconsistency { offset: 0, reason: "way exceeds 16-bit labels".into() });
    }
    let line = header.line();
    let offset = line.len() as u64;
    let episode_bytes = ((header.way * header.shot + header.way * header.test_shots) * (8 * header.dim + 2)) as u64;
    for (idx, e) in episodes.iter().enumerate() {
        let consistent = e.way == header.way
            && e.shot == header.shot
            && e.input_dim() == header.dim
            && e.train.len() == header.way * header.shot
            && e.test.len() == header.way * header.test_shots;
        if !consistent {
            return Err(EpisodeFileError::DimensionInconsistency {
                offset: offset + idx as u64 * episode_bytes,
                reason: format!("episode {idx} does not match the dimensions of episode 0"),
            });
        }
    }
    out.write_all(line.as_bytes())?;
    for e in episodes {
        put_f64s(out, e.train.features())?;
        put_labels(out, e.train.labels())?;
        put_f64s(out, e.test.features())?;
        put_labels(out, e.test.labels())?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_episodes(path: impl AsRef<Path>, episodes: &[Episode]) -> Result<(), EpisodeFileError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_episodes_to(&mut out, episodes)
}

/// Streaming reader; yields one episode at a time.
pub struct EpisodeReader<R> {
    inner: R,
    header: EpisodeHeader,
    offset: u64,
    remaining: u64,
    failed: bool,
}

impl<R: Read> EpisodeReader<R> {
    pub fn new(mut inner: R) -> Result<Self, EpisodeFileError> {
        let mut line = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            match inner.read(&mut byte)? {
                0 => {
                    return Err(EpisodeFileError::MalformedHeader {
                        offset: line.len() as u64,
                        reason: "missing end of header line".into(),
                    })
                }
                _ if byte[0] == b'\n' => break,
                _ => {
                    line.push(byte[0]);
                    if line.len() > 256 {
                        return Err(EpisodeFileError::MalformedHeader { offset: 256, reason: "header line too long".into() });
                    }
                }
            }
        }
        let header = parse_header(&line)?;
        Ok(EpisodeReader { inner, header, offset: line.len() as u64 + 1, remaining: header.count, failed: false })
    }

    pub fn header(&self) -> EpisodeHeader {
        self.header
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<(), EpisodeFileError> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    return Err(EpisodeFileError::Truncated { offset: self.offset + got as u64, expected: buf.len() - got })
                }
                Ok(k) => got += k,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_set(&mut self, rows: usize) -> Result<EmbeddedSet, EpisodeFileError> {
        let d = self.header.dim;
        let mut buf = vec![0u8; rows * d * 8];
        self.fill(&mut buf)?;
        let values: Vec<f64> =
            buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
        let features = Matrix::from_row_slice(rows, d, &values);
        let label_start = self.offset;
        let mut lbuf = vec![0u8; rows * 2];
        self.fill(&mut lbuf)?;
        let mut labels = Vec::with_capacity(rows);
        for (r, c) in lbuf.chunks_exact(2).enumerate() {
            let l = u16::from_le_bytes([c[0], c[1]]) as usize;
            if l >= self.header.way {
                return Err(EpisodeFileError::DimensionInconsistency {
                    offset: label_start + 2 * r as u64,
                    reason: format!("label {l} out of range for {} classes", self.header.way),
                });
            }
            labels.push(l);
        }
        EmbeddedSet::new(features, labels, self.header.way)
            .map_err(|e| EpisodeFileError::DimensionInconsistency { offset: label_start, reason: e.to_string() })
    }

    fn next_episode(&mut self) -> Result<Episode, EpisodeFileError> {
        let h = self.header;
        let start = self.offset;
        let train = self.read_set(h.way * h.shot)?;
        let test = self.read_set(h.way * h.test_shots)?;
        Episode::new(train, test, h.way, h.shot)
            .map_err(|e| EpisodeFileError::DimensionInconsistency { offset: start, reason: e.to_string() })
    }

    fn check_trailing(&mut self) -> Result<(), EpisodeFileError> {
        let mut byte = [0u8; 1];
        loop {
            match self.inner.read(&mut byte) {
                Ok(0) => return Ok(()),
                Ok(_) => {
                    return Err(EpisodeFileError::DimensionInconsistency {
                        offset: self.offset,
                        reason: "payload longer than the header declares".into(),
                    })
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

fn parse_header(line: &[u8]) -> Result<EpisodeHeader, EpisodeFileError> {
    let malformed = |reason: &str| EpisodeFileError::MalformedHeader { offset: 0, reason: reason.to_string() };
    let text = std::str::from_utf8(line).map_err(|_| malformed("header is not UTF-8"))?;
    let tokens: Vec<&str> = text.split_ascii_whitespace().collect();
    if tokens.len() != 7 {
        return Err(malformed(&format!("expected 7 fields, found {}", tokens.len())));
    }
    if tokens[0] != MAGIC {
        return Err(malformed("missing COMLN-EP magic"));
    }
    if tokens[1] != VERSION {
        return Err(malformed(&format!("unsupported version {}", tokens[1])));
    }
    let mut nums = [0u64; 5];
    for (slot, tok) in nums.iter_mut().zip(&tokens[2..]) {
        *slot = tok.parse().map_err(|_| malformed(&format!("field {tok:?} is not a non-negative integer")))?;
    }
    let [count, way, shot, test_shots, dim] = nums;
    let header =
        EpisodeHeader { count, way: way as usize, shot: shot as usize, test_shots: test_shots as usize, dim: dim as usize };
    if count > 0 && (way < 2 || shot == 0 || test_shots == 0 || dim == 0) {
        return Err(EpisodeFileError::DimensionInconsistency {
            offset: 0,
            reason: format!("episodes need way ≥ 2 and positive shot, test shots and width, header has {way}/{shot}/{test_shots}/{dim}"),
        });
    }
    if way > u16::MAX as u64 + 1 {
        return Err(EpisodeFileError::DimensionInconsistency { offset: 0, reason: "way exceeds 16-bit labels".into() });
    }
    Ok(header)
}

impl<R: Read> Iterator for EpisodeReader<R> {
    type Item = Result<Episode, EpisodeFileError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if self.remaining == 0 {
            self.failed = true;
            return self.check_trailing().err().map(Err);
        }
        self.remaining -= 1;
        let out = self.next_episode();
        if out.is_err() {
            self.failed = true;
        }
        Some(out)
    }
}

pub fn load_episodes(path: impl AsRef<Path>) -> Result<EpisodeReader<BufReader<File>>, EpisodeFileError> {
    EpisodeReader::new(BufReader::new(File::open(path)?))
}

/// Reads every episode, stopping at the first error.
pub fn load_all(path: impl AsRef<Path>) -> Result<Vec<Episode>, EpisodeFileError> {
    load_episodes(path)?.collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::argmax;

    fn small() -> TaskGenConfig {
        TaskGenConfig { way: 3, shot: 2, test_shots: 4, input_dim: 5, ..TaskGenConfig::default() }
    }

    fn to_bytes(episodes: &[Episode]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_episodes_to(&mut buf, episodes).unwrap();
        buf
    }

    #[test]
    fn shape_and_balance() {
        let cfg = TaskGenConfig::default();
        let e = sample_episode(&cfg, 3);
        assert_eq!(e.train.len(), 5);
        assert_eq!(e.test.len(), 75);
        for c in 0..5 {
            assert_eq!(e.train.labels().iter().filter(|&&l| l == c).count(), 1);
            assert_eq!(e.test.labels().iter().filter(|&&l| l == c).count(), 15);
        }
    }

    #[test]
    fn deterministic_per_index() {
        let cfg = small();
        assert_eq!(sample_episode(&cfg, 7), sample_episode(&cfg, 7));
        assert_ne!(sample_episode(&cfg, 7), sample_episode(&cfg, 8));
    }

    #[test]
    fn noiseless_episodes_are_nearest_prototype_separable() {
        let cfg = TaskGenConfig { noise_std: 0.0, ..small() };
        let e = sample_episode(&cfg, 0);
        for r in 0..e.test.len() {
            let x = e.test.row(r);
            let sims: Vec<f64> = (0..e.train.len()).map(|t| -(e.train.row(t) - &x).norm()).collect();
            assert_eq!(e.train.labels()[argmax(&sims)], e.test.labels()[r]);
        }
    }

    #[test]
    fn train_and_test_rows_are_disjoint() {
        let e = sample_episode(&small(), 1);
        for a in 0..e.train.len() {
            for b in 0..e.test.len() {
                assert_ne!(e.train.row(a), e.test.row(b));
            }
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = small();
        let episodes: Vec<Episode> = (0..4).map(|i| sample_episode(&cfg, i)).collect();
        let bytes = to_bytes(&episodes);
        let back: Vec<Episode> = EpisodeReader::new(&bytes[..]).unwrap().collect::<Result<_, _>>().unwrap();
        assert_eq!(back, episodes);
    }

    #[test]
    fn empty_list_is_a_valid_file() {
        let bytes = to_bytes(&[]);
        let mut reader = EpisodeReader::new(&bytes[..]).unwrap();
        assert_eq!(reader.header().count, 0);
        assert!(reader.next().is_none());
    }

    #[test]
    fn malformed_header_is_reported() {
        let err = EpisodeReader::new(&b"COMLN-XX 1 0 0 0 0 0\n"[..]).err().unwrap();
        assert!(matches!(err, EpisodeFileError::MalformedHeader { .. }));
        let err = EpisodeReader::new(&b"COMLN-EP 2 0 0 0 0 0\n"[..]).err().unwrap();
        assert!(matches!(err, EpisodeFileError::MalformedHeader { .. }));
        let err = EpisodeReader::new(&b"COMLN-EP 1 0 0"[..]).err().unwrap();
        assert!(matches!(err, EpisodeFileError::MalformedHeader { .. }));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = to_bytes(&[sample_episode(&small(), 0)]);
        let cut = bytes.len() - 3;
        let mut reader = EpisodeReader::new(&bytes[..cut]).unwrap();
        match reader.next().unwrap() {
            Err(EpisodeFileError::Truncated { offset, expected }) => {
                assert!(offset as usize <= cut);
                assert!(expected >= 3);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_dimensions_are_reported() {
        // Header claims 2 shots, but the payload only holds one.
        let cfg = small();
        let mut bytes = to_bytes(&[sample_episode(&cfg, 0)]);
        let header_len = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        let mut header = String::from_utf8(bytes[..header_len].to_vec()).unwrap();
        header = header.replace("COMLN-EP 1 1 3 2 4 5", "COMLN-EP 1 1 3 0 4 5");
        bytes.splice(..header_len, header.into_bytes());
        let err = EpisodeReader::new(&bytes[..]).err().unwrap();
        assert!(matches!(err, EpisodeFileError::DimensionInconsistency { .. }), "{err}");

        // Out-of-range labels.
        let mut bytes = to_bytes(&[sample_episode(&cfg, 0)]);
        let label_at = header_len + 6 * 5 * 8;
        bytes[label_at] = 9;
        let err = EpisodeReader::new(&bytes[..]).unwrap().next().unwrap().unwrap_err();
        match err {
            EpisodeFileError::DimensionInconsistency { offset, .. } => assert_eq!(offset as usize, label_at),
            other => panic!("unexpected {other}"),
        }

        // Trailing payload.
        let mut bytes = to_bytes(&[sample_episode(&cfg, 0)]);
        bytes.push(0);
        let results: Vec<_> = EpisodeReader::new(&bytes[..]).unwrap().collect();
        assert!(matches!(results.last().unwrap(), Err(EpisodeFileError::DimensionInconsistency { .. })));
    }

    #[test]
    fn writer_rejects_mixed_dimensions() {
        let a = sample_episode(&small(), 0);
        let b = sample_episode(&TaskGenConfig { shot: 1, ..small() }, 0);
        let mut buf = Vec::new();
        let err = write_episodes_to(&mut buf, &[a, b]).unwrap_err();
        assert!(matches!(err, EpisodeFileError::DimensionInconsistency { .. }));
        assert!(buf.is_empty());
    }
}

//! Deterministic synthetic corpora. Labels follow a seeded first-order
//! Markov chain; each label is rendered as a run of `r ∈ [r_min, r_max]`
//! frames equal to a per-label prototype plus Gaussian noise. `r_min ≥ 2`
//! guarantees `M ≥ 2N`, which keeps every CTC target feasible.
//!
//! Frame values are rounded to `f32` at generation time so that the on-disk
//! format (little-endian `f32`) round-trips exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::ctc::{Token, Transcript};
use crate::error::{contract, Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Number of labels, blank excluded; labels are `1..=vocab_size`.
    pub vocab_size: usize,
    pub d_in: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub r_min: usize,
    pub r_max: usize,
    pub noise_sigma: f64,
    /// Softmax temperature of the transition logits; lower = more predictable labels.
    pub markov_temperature: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            d_in: 16,
            train: 2000,
            dev: 200,
            test: 200,
            n_min: 4,
            n_max: 10,
            r_min: 2,
            r_max: 4,
            noise_sigma: 1.0,
            markov_temperature: 0.5,
            seed: 1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_in == 0 {
            return fail("vocab_size and d_in must be positive".into());
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return fail(format!("invalid length range [{}, {}]", self.n_min, self.n_max));
        }
        if self.r_min < 2 || self.r_min > self.r_max {
            return fail(format!(
                "frames-per-token range [{}, {}] needs r_min ≥ 2",
                self.r_min, self.r_max
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return fail(format!("noise_sigma must be ≥ 0, got {}", self.noise_sigma));
        }
        if !(self.markov_temperature > 0.0) {
            return fail("markov_temperature must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `M × d_in` frame features.
    pub frames: Tensor,
    pub transcript: Transcript,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_tokens(&self) -> usize {
        self.transcript.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn stream_id(self) -> u64 {
        self as u64 + 1
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub d_in: usize,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Label process and acoustic prototypes shared by every split.
#[derive(Clone, Debug)]
pub struct LanguageTables {
    /// Row `i` holds the transition probabilities out of label `i + 1`.
    pub transitions: Vec<Vec<f64>>,
    /// Row `i` is the prototype frame of label `i + 1`.
    pub prototypes: Vec<Vec<f64>>,
}

pub fn language_tables(cfg: &CorpusConfig) -> LanguageTables {
    let mut rng = stream(cfg.seed, &[0x7ab1e5]);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let v = cfg.vocab_size;
    let transitions = (0..v)
        .map(|_| {
            let logits: Vec<f64> = (0..v).map(|_| std.sample(&mut rng) / cfg.markov_temperature).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
        .collect();
    let prototypes = (0..v)
        .map(|_| (0..cfg.d_in).map(|_| f64::from(std.sample(&mut rng) as f32)).collect())
        .collect();
    LanguageTables { transitions, prototypes }
}

fn generate_utterance(cfg: &CorpusConfig, tables: &LanguageTables, split: Split, index: usize) -> Result<Utterance> {
    let mut rng = stream(cfg.seed, &[split.stream_id(), index as u64]);
    let n = rng.gen_range(cfg.n_min..=cfg.n_max);
    let mut tokens: Transcript = Vec::with_capacity(n);
    let mut state = rng.gen_range(0..cfg.vocab_size);
    tokens.push(state + 1);
    for _ in 1..n {
        let dist = WeightedIndex::new(&tables.transitions[state])
            .map_err(|e| Error::Internal(format!("transition row: {e}")))?;
        state = dist.sample(&mut rng);
        tokens.push(state + 1);
    }
    let noise = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Internal(e.to_string()))?)
    } else {
        None
    };
    let mut data = Vec::new();
    let mut frames = 0;
    for &tok in &tokens {
        let dur = rng.gen_range(cfg.r_min..=cfg.r_max);
        for _ in 0..dur {
            for &p in &tables.prototypes[tok - 1] {
                let x = match &noise {
                    Some(d) => p + d.sample(&mut rng),
                    None => p,
                };
                data.push(f64::from(x as f32));
            }
            frames += 1;
        }
    }
    Ok(Utterance {
        id: format!("{}-{index:05}", split.as_str()),
        frames: Tensor::new(vec![frames, cfg.d_in], data)?,
        transcript: tokens,
    })
}

pub fn generate_split(cfg: &CorpusConfig, split: Split) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let tables = language_tables(cfg);
    let count = match split {
        Split::Train => cfg.train,
        Split::Dev => cfg.dev,
        Split::Test => cfg.test,
    };
    (0..count).map(|i| generate_utterance(cfg, &tables, split, i)).collect()
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    Ok(Corpus {
        d_in: cfg.d_in,
        train: generate_split(cfg, Split::Train)?,
        dev: generate_split(cfg, Split::Dev)?,
        test: generate_split(cfg, Split::Test)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub utterances: usize,
    pub tokens: usize,
    pub frames: usize,
    /// Label length → count (integer bins).
    pub token_length_hist: BTreeMap<usize, usize>,
    pub frame_length_hist: BTreeMap<usize, usize>,
    /// Relative frequency of each label, indexed by label id (index 0 = blank, always 0).
    pub unigram: Vec<f64>,
}

pub fn corpus_stats(utts: &[Utterance], vocab_size: usize) -> Result<CorpusStats> {
    if utts.is_empty() {
        return Err(contract("corpus statistics need a non-empty corpus"));
    }
    let mut token_length_hist = BTreeMap::new();
    let mut frame_length_hist = BTreeMap::new();
    let mut counts = vec![0usize; vocab_size + 1];
    let (mut tokens, mut frames) = (0, 0);
    for u in utts {
        *token_length_hist.entry(u.num_tokens()).or_insert(0) += 1;
        *frame_length_hist.entry(u.num_frames()).or_insert(0) += 1;
        tokens += u.num_tokens();
        frames += u.num_frames();
        for &t in &u.transcript {
            if t > vocab_size {
                return Err(contract(format!("token {t} exceeds vocabulary {vocab_size}")));
            }
            counts[t] += 1;
        }
    }
    let unigram = counts.iter().map(|&c| c as f64 / tokens.max(1) as f64).collect();
    Ok(CorpusStats {
        utterances: utts.len(),
        tokens,
        frames,
        token_length_hist,
        frame_length_hist,
        unigram,
    })
}

/// Plug-in mutual information (nats) between adjacent labels.
pub fn adjacent_mutual_information(seqs: &[Transcript]) -> f64 {
    let mut joint: BTreeMap<(Token, Token), f64> = BTreeMap::new();
    let mut left: BTreeMap<Token, f64> = BTreeMap::new();
    let mut right: BTreeMap<Token, f64> = BTreeMap::new();
    let mut total = 0.0;
    for s in seqs {
        for w in s.windows(2) {
            *joint.entry((w[0], w[1])).or_default() += 1.0;
            *left.entry(w[0]).or_default() += 1.0;
            *right.entry(w[1]).or_default() += 1.0;
            total += 1.0;
        }
    }
    joint
        .iter()
        .map(|(&(a, b), &c)| {
            let p = c / total;
            p * (p / ((left[&a] / total) * (right[&b] / total))).ln()
        })
        .sum()
}

const CORPUS_MAGIC: &[u8; 4] = b"CTKC";
const CORPUS_VERSION: u32 = 1;

/// Binary split file: header (`CTKC`, version, d_in, count), then one
/// length-prefixed record per utterance holding the id, N, M, the tokens as
/// space-separated decimal text and `M·d_in` little-endian `f32` frame values.
pub fn write_split<W: Write>(mut out: W, d_in: usize, utts: &[Utterance]) -> Result<()> {
    out.write_all(CORPUS_MAGIC)?;
    out.write_all(&CORPUS_VERSION.to_le_bytes())?;
    out.write_all(&(d_in as u32).to_le_bytes())?;
    out.write_all(&(utts.len() as u32).to_le_bytes())?;
    for u in utts {
        if u.frames.shape()[1] != d_in {
            return Err(contract(format!("utterance {} has wrong feature dim", u.id)));
        }
        let tokens = u
            .transcript
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let mut rec = Vec::new();
        rec.extend_from_slice(&(u.id.len() as u32).to_le_bytes());
        rec.extend_from_slice(u.id.as_bytes());
        rec.extend_from_slice(&(u.num_tokens() as u32).to_le_bytes());
        rec.extend_from_slice(&(u.num_frames() as u32).to_le_bytes());
        rec.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
        rec.extend_from_slice(tokens.as_bytes());
        for v in u.frames.data() {
            rec.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.write_all(&(rec.len() as u32).to_le_bytes())?;
        out.write_all(&rec)?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated record at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_split<R: Read>(mut input: R) -> Result<(usize, Vec<Utterance>)> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != CORPUS_MAGIC {
        return Err(Error::Format("bad corpus magic".into()));
    }
    let version = c.u32()?;
    if version != CORPUS_VERSION {
        return Err(Error::Format(format!("unsupported corpus version {version}")));
    }
    let d_in = c.u32()? as usize;
    let count = c.u32()? as usize;
    let mut utts = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let mut r = Cursor { buf: c.take(len)?, pos: 0 };
        let id_len = r.u32()? as usize;
        let id = String::from_utf8(r.take(id_len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let n = r.u32()? as usize;
        let m = r.u32()? as usize;
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?).map_err(|e| Error::Format(e.to_string()))?;
        let transcript: Transcript = text
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format(format!("bad token {t:?} in {id}"))))
            .collect::<Result<_>>()?;
        if transcript.len() != n {
            return Err(Error::Format(format!("{id}: header says {n} tokens, found {}", transcript.len())));
        }
        let raw = r.take(m * d_in * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        if r.pos != r.buf.len() {
            return Err(Error::Format(format!("{id}: trailing bytes in record")));
        }
        utts.push(Utterance {
            id,
            frames: Tensor::new(vec![m, d_in], data)?,
            transcript,
        });
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok((d_in, utts))
}

/// Plain-text manifest: one `id N M` line per utterance.
pub fn write_manifest<W: Write>(mut out: W, split: Split, utts: &[Utterance]) -> Result<()> {
    writeln!(out, "# split={} utterances={}", split.as_str(), utts.len())?;
    for u in utts {
        writeln!(out, "{} {} {}", u.id, u.num_tokens(), u.num_frames())?;
    }
    Ok(())
}

pub fn split_path(dir: &Path, split: Split) -> std::path::PathBuf {
    dir.join(format!("{}.bin", split.as_str()))
}

pub fn manifest_path(dir: &Path, split: Split) -> std::path::PathBuf {
    dir.join(format!("{}.manifest.txt", split.as_str()))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let mut parts = Vec::new();
    let mut d_in = None;
    for split in Split::ALL {
        let f = std::fs::File::open(split_path(dir, split))?;
        let (d, utts) = read_split(std::io::BufReader::new(f))?;
        if *d_in.get_or_insert(d) != d {
            return Err(Error::Format("splits disagree on feature dimension".into()));
        }
        parts.push(utts);
    }
    let test = parts.pop().expect("three splits");
    let dev = parts.pop().expect("three splits");
    let train = parts.pop().expect("three splits");
    Ok(Corpus {
        d_in: d_in.unwrap_or(0),
        train,
        dev,
        test,
    })
}

//! Utterance features, manifests, frame stacking and the synthetic corpus.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::labelset::validate_transcript;
use crate::numerics::{uniform_fill, Matrix, Rng};

const FEATURE_MAGIC: &[u8; 4] = b"CTCF";
const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 16;

/// Time-major `T × D` acoustic features for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix(Matrix);

impl FeatureMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::usage(format!(
                "features need at least one frame and one dimension, got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(FeatureMatrix(values))
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Concatenates `factor` consecutive frames and advances by `factor`. A short
/// final group is padded by repeating the last input frame.
pub fn stack_frames(f: &FeatureMatrix, factor: usize) -> Result<FeatureMatrix> {
    if factor == 0 {
        return Err(Error::usage("stacking factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(f.clone());
    }
    let (t, d) = (f.frames(), f.dim());
    let out_t = t.div_ceil(factor);
    let mut out = Vec::with_capacity(out_t * d * factor);
    for group in 0..out_t {
        for k in 0..factor {
            let src = (group * factor + k).min(t - 1);
            out.extend_from_slice(f.frame(src));
        }
    }
    FeatureMatrix::new(Matrix::from_vec(out_t, d * factor, out)?)
}

pub fn write_feature_file(path: &Path, f: &FeatureMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * f.frames() * f.dim());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(f.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(f.dim() as u32).to_le_bytes());
    for &v in f.matrix().as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt_err = |msg: String| Error::format(path.display().to_string(), msg);
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(fmt_err(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(fmt_err("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    if t == 0 || d == 0 {
        return Err(fmt_err(format!("empty feature matrix {t}x{d}")));
    }
    let need = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fmt_err("header size overflow".into()))?;
    let payload = &bytes[FEATURE_HEADER_LEN..];
    if payload.len() != need {
        return Err(fmt_err(format!(
            "header declares {t}x{d} values ({need} bytes), payload has {}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FeatureMatrix::new(Matrix::from_vec(t, d, values)?).map_err(|e| fmt_err(e.to_string()))
}

/// One `(features, transcript)` training pair as listed in a manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub id: String,
    /// Absolute, or relative to the manifest's directory.
    pub feature_path: PathBuf,
    pub transcript: String,
}

/// Parses `path<TAB>transcript` lines. Feature paths are resolved against the
/// manifest's directory; ids are the feature file stems.
pub fn load_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: n + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields[0].is_empty() {
            return Err(parse_err(format!(
                "expected \"path<TAB>transcript\", found {} tab-separated fields",
                fields.len()
            )));
        }
        validate_transcript(fields[1]).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!(
                "{}:{}: {m}",
                path.display(),
                n + 1
            )),
            other => other,
        })?;
        let rel = PathBuf::from(fields[0]);
        let id = rel
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| fields[0].to_string());
        records.push(UtteranceRecord {
            id,
            feature_path: base.join(rel),
            transcript: fields[1].to_string(),
        });
    }
    Ok(records)
}

/// An utterance with its features loaded and stacked.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub transcript: String,
    pub features: FeatureMatrix,
}

/// Loads every record of a manifest and applies frame stacking.
pub fn load_utterances(manifest: &Path, stack_factor: usize) -> Result<Vec<Utterance>> {
    load_manifest(manifest)?
        .into_iter()
        .map(|r| {
            let raw = read_feature_file(&r.feature_path)?;
            Ok(Utterance {
                id: r.id,
                transcript: r.transcript,
                features: stack_frames(&raw, stack_factor)?,
            })
        })
        .collect()
}

/// Parameters of the synthetic corpus generator.
///
/// Every transcript character (letters, apostrophe, and the space between
/// words) owns one prototype vector; an utterance renders each character as a
/// run of noisy copies of its prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub prototype_dim: usize,
    pub prototype_range: f64,
    pub frames_per_char: (usize, usize),
    pub noise_stddev: f64,
    pub words: Vec<String>,
    pub words_per_utterance: (usize, usize),
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub seed: u64,
}

/// Character inventory of the generator: 26 letters, apostrophe, space.
pub const SYNTH_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz' ";

/// Everyday vocabulary with double letters, apostrophes and short words.
pub const DEFAULT_WORDS: &[&str] = &[
    "is", "it", "supposed", "to", "snow", "tonight", "what", "time", "the", "weather",
    "will", "be", "call", "my", "mom", "play", "some", "music", "set", "an", "alarm",
    "for", "seven", "tomorrow", "morning", "remind", "me", "buy", "coffee", "and",
    "apples", "how", "far", "good", "book", "a", "table", "at", "noon", "open", "door",
    "turn", "off", "all", "lights", "kitchen", "send", "message", "hello", "there",
    "don't", "forget", "meeting", "next", "week", "what's", "traffic", "like", "today",
    "show", "pizza", "near", "here", "i'm", "feeling", "happy", "tell", "joke",
    "jazz", "quiet", "please", "sunny", "yellow", "balloon", "zoo", "vacuum", "keep",
    "going", "running", "late", "sorry", "can't", "wait", "box", "fix", "queen",
    "grocery", "list", "add", "milk", "eggs", "butter", "cheese", "summer", "little",
    "street", "address", "office", "dinner", "speed", "yes", "no", "stop",
];

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            prototype_dim: 80,
            prototype_range: 1.0,
            frames_per_char: (4, 8),
            noise_stddev: 1.0,
            words: DEFAULT_WORDS.iter().map(|w| w.to_string()).collect(),
            words_per_utterance: (1, 4),
            train_utterances: 2000,
            dev_utterances: 200,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub const KEYS: &'static [&'static str] = &[
        "prototype_dim",
        "prototype_range",
        "frames_per_char_min",
        "frames_per_char_max",
        "noise_stddev",
        "words",
        "words_per_utterance_min",
        "words_per_utterance_max",
        "train_utterances",
        "dev_utterances",
        "seed",
    ];

    /// Applies one `key = value` assignment; `words` is comma-separated.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        use crate::keyval::value as v;
        match key {
            "prototype_dim" => self.prototype_dim = v(key, value)?,
            "prototype_range" => self.prototype_range = v(key, value)?,
            "frames_per_char_min" => self.frames_per_char.0 = v(key, value)?,
            "frames_per_char_max" => self.frames_per_char.1 = v(key, value)?,
            "noise_stddev" => self.noise_stddev = v(key, value)?,
            "words" => {
                self.words = value
                    .split(',')
                    .map(|w| w.trim().to_string())
                    .filter(|w| !w.is_empty())
                    .collect()
            }
            "words_per_utterance_min" => self.words_per_utterance.0 = v(key, value)?,
            "words_per_utterance_max" => self.words_per_utterance.1 = v(key, value)?,
            "train_utterances" => self.train_utterances = v(key, value)?,
            "dev_utterances" => self.dev_utterances = v(key, value)?,
            "seed" => self.seed = v(key, value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Defaults overridden by a config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = SynthConfig::default();
        for e in crate::keyval::read(path)? {
            cfg.set(&e.key, &e.value).map_err(|message| Error::Parse {
                path: path.display().to_string(),
                line: e.line,
                message,
            })?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.words.is_empty() {
            return Err(Error::usage("synthetic corpus needs a non-empty word list"));
        }
        let (lo, hi) = self.frames_per_char;
        if lo == 0 || hi < lo {
            return Err(Error::usage(format!("bad frames-per-character range {lo}..={hi}")));
        }
        let (wlo, whi) = self.words_per_utterance;
        if wlo == 0 || whi < wlo {
            return Err(Error::usage(format!("bad words-per-utterance range {wlo}..={whi}")));
        }
        if !(self.noise_stddev >= 0.0) || !self.noise_stddev.is_finite() {
            return Err(Error::usage("noise stddev must be a finite value >= 0"));
        }
        if self.prototype_dim == 0 || !(self.prototype_range > 0.0) {
            return Err(Error::usage("prototype dim and range must be positive"));
        }
        for w in &self.words {
            if w.contains(' ') {
                return Err(Error::usage(format!("word {w:?} contains a space")));
            }
            validate_transcript(w).map_err(|e| Error::usage(e.to_string()))?;
        }
        Ok(())
    }
}

/// Draws one prototype row per character of [`SYNTH_ALPHABET`].
pub fn synth_prototypes(cfg: &SynthConfig, rng: &mut Rng) -> Result<Matrix> {
    let r = cfg.prototype_range;
    uniform_fill(rng, SYNTH_ALPHABET.len(), cfg.prototype_dim, -r, r)
}

fn alphabet_index(c: char) -> usize {
    SYNTH_ALPHABET.find(c).expect("validated transcript character")
}

fn sample_transcript(cfg: &SynthConfig, rng: &mut Rng) -> String {
    let n = rng.range_inclusive(cfg.words_per_utterance.0, cfg.words_per_utterance.1);
    (0..n)
        .map(|_| cfg.words[rng.below(cfg.words.len())].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Renders a transcript against the prototypes.
pub fn render_utterance(
    cfg: &SynthConfig,
    prototypes: &Matrix,
    text: &str,
    rng: &mut Rng,
) -> Result<FeatureMatrix> {
    let d = prototypes.cols();
    let mut values = Vec::new();
    let mut frames = 0;
    for c in text.chars() {
        let proto = prototypes.row(alphabet_index(c));
        let run = rng.range_inclusive(cfg.frames_per_char.0, cfg.frames_per_char.1);
        for _ in 0..run {
            values.extend(proto.iter().map(|&mu| {
                if cfg.noise_stddev > 0.0 {
                    mu + cfg.noise_stddev * rng.standard_normal()
                } else {
                    mu
                }
            }));
            frames += 1;
        }
    }
    FeatureMatrix::new(Matrix::from_vec(frames, d, values)?)
}

/// Paths produced by [`synth_corpus`].
#[derive(Clone, Debug)]
pub struct SynthManifests {
    pub train: PathBuf,
    pub dev: PathBuf,
}

/// Writes `train.tsv` and `dev.tsv` plus their feature files under `out_dir`.
/// The output is a pure function of `cfg`.
pub fn synth_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthManifests> {
    cfg.validate()?;
    for w in &cfg.words {
        validate_transcript(w)?;
    }
    let feat_dir = out_dir.join("feats");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut rng = Rng::new(cfg.seed);
    let prototypes = synth_prototypes(cfg, &mut rng)?;
    let mut write_split = |name: &str, count: usize| -> Result<PathBuf> {
        let manifest = out_dir.join(format!("{name}.tsv"));
        let mut lines = String::new();
        for i in 0..count {
            let text = sample_transcript(cfg, &mut rng);
            let feats = render_utterance(cfg, &prototypes, &text, &mut rng)?;
            let rel = format!("feats/{name}-{i:05}.feat");
            write_feature_file(&out_dir.join(&rel), &feats)?;
            lines.push_str(&format!("{rel}\t{text}\n"));
        }
        let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
        f.write_all(lines.as_bytes())
            .map_err(|e| Error::io(&manifest, e))?;
        Ok(manifest)
    };
    let train = write_split("train", cfg.train_utterances)?;
    let dev = write_split("dev", cfg.dev_utterances)?;
    Ok(SynthManifests { train, dev })
}

//! Error rates, greedy decoding over a corpus, and posterior dumps.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::corpus::{load_utterances, FeatureMatrix, Utterance};
use crate::ctc::greedy_decode;
use crate::error::{Error, Result};
use crate::labelset::{postprocess, InventoryMode, LabelInventory};
use crate::model::Model;

/// Alignment counts against a reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Errors per reference token; `None` for an empty reference.
    pub fn rate(&self) -> Option<f64> {
        (self.reference > 0).then(|| self.errors() as f64 / self.reference as f64)
    }

    pub fn add(&mut self, other: &ErrorCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.reference += other.reference;
    }
}

impl fmt::Display for ErrorCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rate = match self.rate() {
            Some(r) => format!("{:.2}%", 100.0 * r),
            None => "undefined".into(),
        };
        write!(
            f,
            "{rate} (S={} D={} I={} N={})",
            self.substitutions, self.deletions, self.insertions, self.reference
        )
    }
}

/// Minimum edit alignment of `hyp` against `reference`. Among equally short
/// alignments the backtrace prefers a substitution (or match), then an
/// insertion, then a deletion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> ErrorCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = i;
    }
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let ins = cost[i * w + j - 1] + 1;
            let del = cost[(i - 1) * w + j] + 1;
            cost[i * w + j] = diag.min(ins).min(del);
        }
    }
    let mut counts = ErrorCounts {
        reference: n,
        ..ErrorCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let sub = usize::from(reference[i - 1] != hyp[j - 1]);
            if cost[(i - 1) * w + j - 1] + sub == here {
                counts.substitutions += sub;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && cost[i * w + j - 1] + 1 == here {
            counts.insertions += 1;
            j -= 1;
        } else {
            counts.deletions += 1;
            i -= 1;
        }
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unit {
    Word,
    /// Characters, spaces included.
    Char,
}

pub fn tokenize(text: &str, unit: Unit) -> Vec<String> {
    match unit {
        Unit::Word => text.split_whitespace().map(str::to_string).collect(),
        Unit::Char => text.chars().map(String::from).collect(),
    }
}

/// Forward pass, greedy decode and postprocessing of one utterance.
pub fn decode(model: &Model, inv: &LabelInventory, features: &FeatureMatrix) -> Result<String> {
    if inv.mode() != InventoryMode::Full {
        return Err(Error::usage("decoding needs a model over the full label inventory"));
    }
    if model.arch().output_dim != inv.len() {
        return Err(Error::usage("model outputs do not match the inventory"));
    }
    postprocess(inv, &greedy_decode(&model.posteriors(features)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
}

/// Aggregate word and character counts over a set of utterances.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub words: ErrorCounts,
    pub chars: ErrorCounts,
    pub utterances: Vec<Hypothesis>,
}

impl EvalReport {
    pub fn counts(&self, unit: Unit) -> &ErrorCounts {
        match unit {
            Unit::Word => &self.words,
            Unit::Char => &self.chars,
        }
    }

    pub fn wer(&self) -> Option<f64> {
        self.words.rate()
    }

    pub fn cer(&self) -> Option<f64> {
        self.chars.rate()
    }

    /// Adds one scored utterance.
    pub fn push(&mut self, id: &str, reference: &str, hypothesis: &str) {
        self.words.add(&edit_distance(
            &tokenize(reference, Unit::Word),
            &tokenize(hypothesis, Unit::Word),
        ));
        self.chars.add(&edit_distance(
            &tokenize(reference, Unit::Char),
            &tokenize(hypothesis, Unit::Char),
        ));
        self.utterances.push(Hypothesis {
            id: id.to_string(),
            reference: reference.to_string(),
            hypothesis: hypothesis.to_string(),
        });
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "utterances {}", self.utterances.len())?;
        writeln!(f, "WER {}", self.words)?;
        writeln!(f, "CER {}", self.chars)
    }
}

pub fn evaluate_utterances(model: &Model, inv: &LabelInventory, utts: &[Utterance]) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for u in utts {
        let hyp = decode(model, inv, &u.features)?;
        report.push(&u.id, &u.transcript, &hyp);
    }
    Ok(report)
}

/// Decodes and scores every utterance of a manifest.
pub fn evaluate_manifest(
    model: &Model,
    inv: &LabelInventory,
    manifest: &Path,
    stack_factor: usize,
) -> Result<EvalReport> {
    evaluate_utterances(model, inv, &load_utterances(manifest, stack_factor)?)
}

/// Writes `frame,symbol,probability` rows, one per frame and label.
pub fn dump_posteriors(model: &Model, inv: &LabelInventory, features: &FeatureMatrix, out: &Path) -> Result<()> {
    if model.arch().output_dim != inv.len() {
        return Err(Error::usage("model outputs do not match the inventory"));
    }
    let post = model.posteriors(features)?;
    let mut text = String::from("frame,symbol,probability\n");
    for t in 0..post.frames() {
        for (k, p) in post.probs().row(t).iter().enumerate() {
            text.push_str(&format!("{t},{},{p}\n", inv.symbols()[k]));
        }
    }
    let mut f = fs::File::create(out).map_err(|e| Error::io(out, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(out, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchConfig, Direction};
    use crate::numerics::{Matrix, Rng};
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identity_has_no_errors() {
        let r = words("is it supposed to snow tonight");
        let c = edit_distance(&r, &r);
        assert_eq!(c.errors(), 0);
        assert_eq!(c.reference, 6);
        assert_eq!(c.rate(), Some(0.0));
    }

    #[test]
    fn hand_alignments() {
        let c = edit_distance(&words("a b c"), &words("a c"));
        assert_eq!((c.substitutions, c.deletions, c.insertions), (0, 1, 0));
        assert!((c.rate().unwrap() - 1.0 / 3.0).abs() < 1e-15);

        let c = edit_distance(&words(""), &words("a"));
        assert_eq!((c.insertions, c.reference), (1, 0));
        assert_eq!(c.rate(), None);

        let c = edit_distance(&words("a b"), &words("x y z"));
        assert_eq!((c.substitutions, c.deletions, c.insertions), (2, 0, 1));
    }

    #[test]
    fn ties_prefer_substitution_then_insertion() {
        // "a" vs "b": one substitution beats a deletion plus an insertion.
        let c = edit_distance(&["a"], &["b"]);
        assert_eq!((c.substitutions, c.deletions, c.insertions), (1, 0, 0));
        // "a b" vs "b c": either two substitutions or a deletion and an
        // insertion; the substitution path wins.
        let c = edit_distance(&["a", "b"], &["b", "c"]);
        assert_eq!((c.substitutions, c.deletions, c.insertions), (2, 0, 0));
    }

    #[test]
    fn corpus_rates_aggregate_counts() {
        let mut r = EvalReport::default();
        r.push("1", "a b c d", "a b c d");
        r.push("2", "x", "y");
        // (0 + 1) / (4 + 1), not the mean of 0% and 100%.
        assert!((r.wer().unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(r.chars.reference, 7 + 1);
    }

    fn uniform_model(labels: usize) -> Model {
        Model::zeros(ArchConfig {
            direction: Direction::Unidirectional,
            input_dim: 3,
            layers: 1,
            cells: 2,
            projection: 2,
            output_dim: labels,
        })
        .unwrap()
    }

    #[test]
    fn uniform_model_deletes_everything() {
        let inv = LabelInventory::full();
        let m = uniform_model(inv.len());
        let feats = FeatureMatrix::new(Matrix::zeros(5, 3)).unwrap();
        assert_eq!(decode(&m, &inv, &feats).unwrap(), "");
        let utts = vec![Utterance {
            id: "u".into(),
            transcript: "hello there".into(),
            features: feats,
        }];
        let r = evaluate_utterances(&m, &inv, &utts).unwrap();
        assert_eq!(r.wer(), Some(1.0));
        assert_eq!(r.words.deletions, 2);
        assert_eq!(r.chars.deletions, 11);
    }

    #[test]
    fn posterior_dump_layout() {
        let inv = LabelInventory::reduced();
        let arch = ArchConfig {
            direction: Direction::Unidirectional,
            input_dim: 3,
            layers: 1,
            cells: 2,
            projection: 2,
            output_dim: inv.len(),
        };
        let m = crate::model::init_model(arch, &mut Rng::new(3), 0.5).unwrap();
        let feats = FeatureMatrix::new(Matrix::from_vec(2, 3, vec![0.1, -0.2, 0.3, 1.0, 0.5, -1.0]).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("post.csv");
        dump_posteriors(&m, &inv, &feats, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("frame,symbol,probability"));
        let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
        assert_eq!(rows.len(), 2 * inv.len());
        for t in 0..2 {
            let sum: f64 = rows
                .iter()
                .filter(|r| r[0] == t.to_string())
                .map(|r| r[2].parse::<f64>().unwrap())
                .sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        assert_eq!(rows[0][1], "<b>");
    }

    fn tokens() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..4, 0..8)
    }

    proptest! {
        #[test]
        fn self_distance_is_zero(a in tokens()) {
            prop_assert_eq!(edit_distance(&a, &a).errors(), 0);
        }

        #[test]
        fn swapping_exchanges_insertions_and_deletions(a in tokens(), b in tokens()) {
            let ab = edit_distance(&a, &b);
            let ba = edit_distance(&b, &a);
            prop_assert_eq!(ab.errors(), ba.errors());
            prop_assert_eq!(ab.substitutions, ba.substitutions);
            prop_assert_eq!(ab.deletions, ba.insertions);
            prop_assert_eq!(ab.insertions, ba.deletions);
            prop_assert!(ab.substitutions + ab.deletions <= ab.reference);
        }

        #[test]
        fn triangle_inequality(a in tokens(), b in tokens(), c in tokens()) {
            let d = |x: &[u8], y: &[u8]| edit_distance(x, y).errors();
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        }

        #[test]
        fn concatenated_sets_aggregate(pairs in prop::collection::vec((tokens(), tokens()), 1..5)) {
            let mut total = ErrorCounts::default();
            for (r, h) in &pairs {
                total.add(&edit_distance(r, h));
            }
            let errors: usize = pairs.iter().map(|(r, h)| edit_distance(r, h).errors()).sum();
            let refs: usize = pairs.iter().map(|(r, _)| r.len()).sum();
            prop_assert_eq!(total.errors(), errors);
            prop_assert_eq!(total.reference, refs);
        }
    }
}

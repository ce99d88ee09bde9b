//! Corpus ingestion and a synthetic marker-token task.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    /// Binary: not_hate vs implicit_hate.
    One,
    /// Six implicit-hate categories.
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn schema(self) -> LabelSchema {
        LabelSchema::for_stage(self)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" => Ok(Stage::One),
            "2" => Ok(Stage::Two),
            other => Err(Error::config(format!("stage must be 1 or 2, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub text: String,
    pub label: usize,
    pub stage: Stage,
}

const STAGE_ONE: [&str; 2] = ["not_hate", "implicit_hate"];
const STAGE_TWO: [&str; 6] = [
    "grievance",
    "incitement",
    "inferiority",
    "irony",
    "stereotypical",
    "threatening",
];
/// Stage-one rows carrying this label are skipped, not rejected.
const SKIPPED_STAGE_ONE: &str = "explicit_hate";

/// Dense class ids for a stage. Lookup is case-insensitive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSchema {
    stage: Stage,
    names: &'static [&'static str],
}

impl LabelSchema {
    pub fn for_stage(stage: Stage) -> Self {
        let names: &'static [&'static str] = match stage {
            Stage::One => &STAGE_ONE,
            Stage::Two => &STAGE_TWO,
        };
        Self { stage, names }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[&'static str] {
        self.names
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        let key = name.trim().to_ascii_lowercase();
        self.names.iter().position(|n| *n == key)
    }

    pub fn name(&self, id: usize) -> Option<&'static str> {
        self.names.get(id).copied()
    }
}

/// Header names of the text and label columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TsvColumns {
    pub text: String,
    pub label: String,
}

impl Default for TsvColumns {
    fn default() -> Self {
        Self {
            text: "text".into(),
            label: "label".into(),
        }
    }
}

/// Result of reading a TSV corpus.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadedCorpus {
    pub examples: Vec<LabeledExample>,
    /// Rows dropped because their label is outside the stage's task.
    pub skipped: usize,
    /// Data rows in the file, header excluded.
    pub rows: usize,
}

/// Reads a tab-separated corpus with one header row.
pub fn load_tsv(path: &Path, stage: Stage, columns: &TsvColumns) -> Result<LoadedCorpus> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::data(format!("{}: not valid UTF-8: {e}", path.display())))?;
    parse_tsv(&text, stage, columns)
}

/// [`load_tsv`] on in-memory text.
pub fn parse_tsv(text: &str, stage: Stage, columns: &TsvColumns) -> Result<LoadedCorpus> {
    let schema = stage.schema();
    let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)));
    let (_, header) = lines
        .next()
        .filter(|(_, h)| !h.is_empty())
        .ok_or_else(|| Error::data("line 1: missing header row"))?;
    let fields: Vec<&str> = header.split('\t').map(str::trim).collect();
    let find = |col: &str| {
        fields
            .iter()
            .position(|f| f.eq_ignore_ascii_case(col))
            .ok_or_else(|| Error::data(format!("line 1: header has no column {col:?}")))
    };
    let text_col = find(&columns.text)?;
    let label_col = find(&columns.label)?;

    let mut out = LoadedCorpus::default();
    for (line_no, line) in lines {
        if line.is_empty() {
            continue;
        }
        out.rows += 1;
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != fields.len() {
            return Err(Error::data(format!(
                "line {line_no}: expected {} fields, found {}",
                fields.len(),
                cells.len()
            )));
        }
        let raw_label = cells[label_col].trim();
        match schema.id(raw_label) {
            Some(label) => out.examples.push(LabeledExample {
                text: cells[text_col].to_string(),
                label,
                stage,
            }),
            None if stage == Stage::One && raw_label.eq_ignore_ascii_case(SKIPPED_STAGE_ONE) => {
                out.skipped += 1
            }
            None => {
                return Err(Error::data(format!(
                    "line {line_no}: unknown label {raw_label:?} for stage {stage}"
                )))
            }
        }
    }
    Ok(out)
}

/// Parameters of the synthetic classification task.
///
/// Word `w{k}` for `k < C · markers_per_class` is a marker of class
/// `k / markers_per_class`; the remaining words are neutral fillers. Each
/// position of an example of class `c` holds one of `c`'s markers with
/// probability `marker_p`. Otherwise it holds a filler, except that with
/// probability `noise_rate` it holds a marker of a different class instead.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTaskSpec {
    pub num_classes: usize,
    pub vocab_size: usize,
    pub markers_per_class: usize,
    pub marker_p: f64,
    pub noise_rate: f64,
    pub priors: Vec<f64>,
    pub min_len: usize,
    pub max_len: usize,
    pub num_examples: usize,
    pub seed: u64,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 2,
            vocab_size: 40,
            markers_per_class: 3,
            marker_p: 0.8,
            noise_rate: 0.0,
            priors: vec![0.5, 0.5],
            min_len: 4,
            max_len: 12,
            num_examples: 400,
            seed: 0,
        }
    }
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("synthetic task needs at least 2 classes"));
        }
        if self.markers_per_class == 0 {
            return Err(Error::config("synthetic task needs at least one marker per class"));
        }
        let markers = self.num_classes * self.markers_per_class;
        if self.vocab_size < markers {
            return Err(Error::config(format!(
                "vocabulary of {} words cannot hold {markers} marker words",
                self.vocab_size
            )));
        }
        if self.vocab_size == markers && self.marker_p < 1.0 && self.noise_rate < 1.0 {
            return Err(Error::config("synthetic task has no filler words"));
        }
        for (name, p) in [("marker_p", self.marker_p), ("noise_rate", self.noise_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} {p} outside [0,1]")));
            }
        }
        if self.priors.len() != self.num_classes {
            return Err(Error::config(format!(
                "{} priors for {} classes",
                self.priors.len(),
                self.num_classes
            )));
        }
        if self.priors.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::config("class priors must be positive"));
        }
        let total: f64 = self.priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("class priors sum to {total}, not 1")));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "length range [{}, {}] is invalid",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    /// Class owning word index `k`, if it is a marker.
    pub fn marker_class(&self, k: usize) -> Option<usize> {
        let c = k / self.markers_per_class;
        (c < self.num_classes).then_some(c)
    }

    pub fn word(k: usize) -> String {
        format!("w{k}")
    }
}

fn sample_class<R: Rng>(priors: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, p) in priors.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    priors.len() - 1
}

/// Generates a synthetic corpus; deterministic in `spec.seed`.
pub fn generate_synth(spec: &SynthTaskSpec) -> Result<Vec<LabeledExample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.markers_per_class;
    let markers = spec.num_classes * m;
    let fillers = spec.vocab_size - markers;
    let mut out = Vec::with_capacity(spec.num_examples);
    for _ in 0..spec.num_examples {
        let class = sample_class(&spec.priors, &mut rng);
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let words: Vec<String> = (0..len)
            .map(|_| {
                let k = if rng.random::<f64>() < spec.marker_p {
                    class * m + rng.random_range(0..m)
                } else if fillers == 0 || rng.random::<f64>() < spec.noise_rate {
                    let other = (class + rng.random_range(1..spec.num_classes)) % spec.num_classes;
                    other * m + rng.random_range(0..m)
                } else {
                    markers + rng.random_range(0..fillers)
                };
                SynthTaskSpec::word(k)
            })
            .collect();
        out.push(LabeledExample {
            text: words.join(" "),
            label: class,
            stage: Stage::One,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusStats {
    /// Examples per class id, up to the largest label seen.
    pub class_counts: Vec<usize>,
    /// Whitespace-token length → number of examples.
    pub length_histogram: BTreeMap<usize, usize>,
}

impl CorpusStats {
    pub fn total(&self) -> usize {
        self.class_counts.iter().sum()
    }
}

/// Per-class counts (padded to `num_classes`) and a token-length histogram.
pub fn corpus_stats(examples: &[LabeledExample], num_classes: usize) -> Result<CorpusStats> {
    if examples.is_empty() {
        return Err(Error::data("cannot summarize an empty corpus"));
    }
    let width = examples
        .iter()
        .map(|e| e.label + 1)
        .max()
        .unwrap_or(0)
        .max(num_classes);
    let mut class_counts = vec![0; width];
    let mut length_histogram = BTreeMap::new();
    for e in examples {
        class_counts[e.label] += 1;
        *length_histogram
            .entry(e.text.split_whitespace().count())
            .or_insert(0) += 1;
    }
    Ok(CorpusStats {
        class_counts,
        length_histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cols() -> TsvColumns {
        TsvColumns::default()
    }

    #[test]
    fn two_valid_rows() {
        let c = parse_tsv("text\tlabel\nhello there\tnot_hate\nbad stuff\timplicit_hate\n", Stage::One, &cols())
            .unwrap();
        assert_eq!(c.examples.len(), 2);
        assert_eq!(c.examples[1].label, 1);
        assert_eq!(c.skipped, 0);
    }

    #[test]
    fn explicit_rows_skipped_in_stage_one() {
        let c = parse_tsv("text\tlabel\r\na\texplicit_hate\r\nb\tnot_hate\r\n", Stage::One, &cols()).unwrap();
        assert_eq!(c.skipped, 1);
        assert_eq!(c.examples.len(), 1);
        assert_eq!(c.rows, c.skipped + c.examples.len());
    }

    #[test]
    fn stage_two_is_case_insensitive() {
        let c = parse_tsv("label\ttext\nStereotypical\tx\n", Stage::Two, &cols()).unwrap();
        assert_eq!(c.examples[0].label, 4);
        assert_eq!(c.examples[0].text, "x");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_tsv("text\tlabel\na\tnot_hate\nb\tfoo\n", Stage::One, &cols()).unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        let e = parse_tsv("text\tlabel\na\tb\tc\n", Stage::One, &cols()).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = parse_tsv("text\tlabel\na\texplicit_hate\n", Stage::Two, &cols()).unwrap_err();
        assert!(matches!(e, Error::Data(_)));
    }

    #[test]
    fn custom_columns() {
        let c = TsvColumns {
            text: "post".into(),
            label: "class".into(),
        };
        let r = parse_tsv("id\tpost\tclass\n7\thi\tirony\n", Stage::Two, &c).unwrap();
        assert_eq!(r.examples[0].label, 3);
        assert!(parse_tsv("text\tlabel\n", Stage::Two, &c).is_err());
    }

    #[test]
    fn all_marker_corpus() {
        let spec = SynthTaskSpec {
            marker_p: 1.0,
            ..SynthTaskSpec::default()
        };
        for e in generate_synth(&spec).unwrap() {
            for w in e.text.split(' ') {
                let k: usize = w[1..].parse().unwrap();
                assert_eq!(spec.marker_class(k), Some(e.label));
            }
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthTaskSpec::default();
        assert_eq!(generate_synth(&spec).unwrap(), generate_synth(&spec).unwrap());
        let other = SynthTaskSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate_synth(&spec).unwrap(), generate_synth(&other).unwrap());
    }

    #[test]
    fn bad_priors_rejected() {
        let spec = SynthTaskSpec {
            priors: vec![0.6, 0.6],
            ..SynthTaskSpec::default()
        };
        assert!(generate_synth(&spec).is_err());
    }

    #[test]
    fn stats_pad_absent_classes() {
        let ex: Vec<LabeledExample> = (0..3)
            .map(|_| LabeledExample {
                text: "a b".into(),
                label: 0,
                stage: Stage::Two,
            })
            .collect();
        let s = corpus_stats(&ex, 6).unwrap();
        assert_eq!(s.class_counts, vec![3, 0, 0, 0, 0, 0]);
        assert_eq!(s.length_histogram[&2], 3);
        assert!(corpus_stats(&[], 2).is_err());
    }
}

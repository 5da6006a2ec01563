//! Labeled topic data: loading, multi-label expansion, and
//! deterministic few-shot splits.
//!
//! The on-disk dataset format is one UTF-8 JSON record per line with
//! fields `text` (string) and `labels` (array of strings). The label
//! set lives in its own file, one label per line, order significant.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One annotated sentence, possibly carrying several topic labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub text: String,
    pub labels: Vec<String>,
}

/// One sentence paired with exactly one of its labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpandedExample {
    pub text: String,
    pub label: String,
}

/// The ordered set of topic labels a run classifies over.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<String>,
    mask_span: usize,
}

impl LabelSet {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::config("label set is empty"));
        }
        let mut seen = std::collections::HashSet::new();
        let mut mask_span = 0;
        for l in &labels {
            if l.trim().is_empty() {
                return Err(Error::config("label set contains an empty label"));
            }
            if !seen.insert(l.clone()) {
                return Err(Error::config(format!("duplicate label {l:?}")));
            }
            mask_span = mask_span.max(l.chars().count());
        }
        Ok(LabelSet { labels, mask_span })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let labels: Vec<String> =
            raw.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        LabelSet::new(labels)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of MASK tokens a prompt reserves for a label: the
    /// character length of the longest label.
    pub fn mask_span(&self) -> usize {
        self.mask_span
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel { label: label.to_string() })
    }
}

/// Reads a line-delimited dataset, preserving record order. Empty
/// lines are skipped; anything else must parse.
pub fn load_corpus(path: &Path) -> Result<Vec<LabeledSample>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: LabeledSample = serde_json::from_str(line).map_err(|e| {
            Error::MalformedRecord { path: path.to_path_buf(), line: idx + 1, reason: e.to_string() }
        })?;
        if sample.text.trim().is_empty() {
            return Err(Error::MalformedRecord {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: "empty text".into(),
            });
        }
        if sample.labels.is_empty() {
            return Err(Error::MalformedRecord {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: "empty labels array".into(),
            });
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Writes samples in the same line-delimited format `load_corpus` reads.
pub fn save_corpus(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("sample serialization cannot fail"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Turns each multi-label sample into one example per label, keeping
/// sample order and, within a sample, label order.
pub fn expand_multilabel(
    samples: &[LabeledSample],
    labels: &LabelSet,
) -> Result<Vec<ExpandedExample>> {
    let mut out = Vec::new();
    for s in samples {
        for l in &s.labels {
            if !labels.contains(l) {
                return Err(Error::UnknownLabel { label: l.clone() });
            }
            out.push(ExpandedExample { text: s.text.clone(), label: l.clone() });
        }
    }
    Ok(out)
}

/// Splits examples into `k_per_label` training examples per label and
/// the remainder as test, by a seeded shuffle within each label.
pub fn few_shot_split(
    examples: &[ExpandedExample],
    k_per_label: usize,
    seed: u64,
) -> Result<(Vec<ExpandedExample>, Vec<ExpandedExample>)> {
    assert!(k_per_label > 0, "k_per_label must be positive");
    // Bucket indices per label, labels ordered by first occurrence.
    let mut order: Vec<String> = Vec::new();
    let mut buckets: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, ex) in examples.iter().enumerate() {
        buckets.entry(ex.label.clone()).or_insert_with(|| {
            order.push(ex.label.clone());
            Vec::new()
        });
        buckets.get_mut(&ex.label).unwrap().push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label_idx, label) in order.iter().enumerate() {
        let mut idxs = buckets.remove(label).unwrap();
        if idxs.len() < k_per_label + 1 {
            return Err(Error::InsufficientExamples {
                label: label.clone(),
                have: idxs.len(),
                need: k_per_label + 1,
            });
        }
        let mut r = rng::stream(seed, "few-shot-split", label_idx as u64);
        rng::shuffle(&mut r, &mut idxs);
        for (pos, &i) in idxs.iter().enumerate() {
            if pos < k_per_label {
                train.push(examples[i].clone());
            } else {
                test.push(examples[i].clone());
            }
        }
    }
    Ok((train, test))
}

/// A small synthetic topic corpus with per-topic keyword characters
/// that never overlap across topics, plus a shared filler pool. Used
/// by the end-to-end tests and the data-generation example.
pub struct ToyCorpus {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub labels: LabelSet,
}

/// Knobs for the synthetic corpus. `keyword_ratio` sets how much of
/// each sentence comes from its topic's keyword pool versus the
/// shared fillers; lower values make topics harder to tell apart.
pub struct ToyCorpusSpec {
    pub train_per_topic: usize,
    pub test_per_topic: usize,
    pub keyword_ratio: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            train_per_topic: 50,
            test_per_topic: 25,
            keyword_ratio: 0.7,
            min_len: 8,
            max_len: 14,
            seed: 0,
        }
    }
}

pub fn generate_toy_corpus(train_per_topic: usize, test_per_topic: usize, seed: u64) -> ToyCorpus {
    generate_toy_corpus_with(&ToyCorpusSpec { train_per_topic, test_per_topic, seed, ..Default::default() })
}

pub fn generate_toy_corpus_with(spec: &ToyCorpusSpec) -> ToyCorpus {
    // Four topics with disjoint keyword characters.
    let topics: [(&str, &str); 4] = [
        ("体育", "跑跳球赛队员场胜负练拍泳"),
        ("财经", "股市价涨跌钱银资利税贸盈"),
        ("旅游", "山海岛游客路程票酒店景桥"),
        ("电影", "片导演戏幕角色镜评映剧院"),
    ];
    let fillers: Vec<char> = "的了是在有和这就也很都不".chars().collect();
    let gen = |per_topic: usize, tag: &str| -> Vec<LabeledSample> {
        let mut out = Vec::new();
        for (t_idx, (label, pool)) in topics.iter().enumerate() {
            let pool: Vec<char> = pool.chars().collect();
            let mut r = rng::stream(spec.seed, tag, t_idx as u64);
            for _ in 0..per_topic {
                let len = rand::Rng::gen_range(&mut r, spec.min_len..=spec.max_len);
                let mut text = String::new();
                for _ in 0..len {
                    let keyword = rand::Rng::gen::<f64>(&mut r) < spec.keyword_ratio;
                    let c = if keyword {
                        pool[rand::Rng::gen_range(&mut r, 0..pool.len())]
                    } else {
                        fillers[rand::Rng::gen_range(&mut r, 0..fillers.len())]
                    };
                    text.push(c);
                }
                out.push(LabeledSample { text, labels: vec![label.to_string()] });
            }
        }
        out
    };
    let train = gen(spec.train_per_topic, "toy-train");
    let test = gen(spec.test_per_topic, "toy-test");
    let labels = LabelSet::new(topics.iter().map(|(l, _)| l.to_string()).collect()).unwrap();
    ToyCorpus { train, test, labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn label_set(names: &[&str]) -> LabelSet {
        LabelSet::new(names.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_single_record() {
        let f = write_temp("{\"text\":\"这家餐厅的菜很好吃\",\"labels\":[\"餐馆\"]}\n");
        let samples = load_corpus(f.path()).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].text, "这家餐厅的菜很好吃");
        assert_eq!(samples[0].labels, vec!["餐馆".to_string()]);
    }

    #[test]
    fn load_empty_file() {
        let f = write_temp("");
        assert_eq!(load_corpus(f.path()).unwrap(), vec![]);
    }

    #[test]
    fn load_multi_label_passthrough() {
        let f = write_temp("{\"text\":\"t\",\"labels\":[\"A\",\"B\"]}\n");
        let samples = load_corpus(f.path()).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].labels.len(), 2);
    }

    #[test]
    fn load_errors_name_the_line() {
        let f = write_temp("{\"text\":\"a\",\"labels\":[\"A\"]}\nnot json\n");
        match load_corpus(f.path()) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed record, got {other:?}"),
        }
        let f = write_temp("{\"text\":\"a\",\"labels\":[]}\n");
        assert!(matches!(load_corpus(f.path()), Err(Error::MalformedRecord { line: 1, .. })));
    }

    #[test]
    fn expansion_order_and_counts() {
        let ls = label_set(&["A", "B", "C"]);
        let samples = vec![LabeledSample { text: "t1".into(), labels: vec!["A".into(), "B".into()] }];
        let out = expand_multilabel(&samples, &ls).unwrap();
        assert_eq!(
            out,
            vec![
                ExpandedExample { text: "t1".into(), label: "A".into() },
                ExpandedExample { text: "t1".into(), label: "B".into() },
            ]
        );

        let single = vec![LabeledSample { text: "t1".into(), labels: vec!["A".into()] }];
        assert_eq!(expand_multilabel(&single, &ls).unwrap().len(), 1);

        // Three samples with 1, 2, 3 labels; the count oracle is the sum.
        let samples = vec![
            LabeledSample { text: "x".into(), labels: vec!["A".into()] },
            LabeledSample { text: "y".into(), labels: vec!["A".into(), "B".into()] },
            LabeledSample { text: "z".into(), labels: vec!["A".into(), "B".into(), "C".into()] },
        ];
        let expected: usize = samples.iter().map(|s| s.labels.len()).sum();
        assert_eq!(expected, 6);
        assert_eq!(expand_multilabel(&samples, &ls).unwrap().len(), expected);
    }

    #[test]
    fn expansion_rejects_unknown_label() {
        let ls = label_set(&["A"]);
        let samples = vec![LabeledSample { text: "t".into(), labels: vec!["Z".into()] }];
        assert!(matches!(expand_multilabel(&samples, &ls), Err(Error::UnknownLabel { .. })));
    }

    fn examples_per_label(n_labels: usize, per_label: usize) -> Vec<ExpandedExample> {
        let mut out = Vec::new();
        for l in 0..n_labels {
            for i in 0..per_label {
                out.push(ExpandedExample { text: format!("text-{l}-{i}"), label: format!("L{l}") });
            }
        }
        out
    }

    #[test]
    fn split_counts_and_determinism() {
        let examples = examples_per_label(3, 10);
        let (train, test) = few_shot_split(&examples, 4, 7).unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(test.len(), 18);
        for l in 0..3 {
            let lbl = format!("L{l}");
            assert_eq!(train.iter().filter(|e| e.label == lbl).count(), 4);
            assert_eq!(test.iter().filter(|e| e.label == lbl).count(), 6);
        }
        let (train2, test2) = few_shot_split(&examples, 4, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
    }

    #[test]
    fn split_leaves_one_test_example_at_maximal_k() {
        // Exhaustive small-case check: k = available - 1 for every label.
        for per_label in 2..6 {
            let examples = examples_per_label(2, per_label);
            let (train, test) = few_shot_split(&examples, per_label - 1, 3).unwrap();
            assert_eq!(train.len(), 2 * (per_label - 1));
            assert_eq!(test.len(), 2);
        }
    }

    #[test]
    fn split_rejects_insufficient_label() {
        let examples = examples_per_label(1, 4);
        match few_shot_split(&examples, 4, 0) {
            Err(Error::InsufficientExamples { label, have, need }) => {
                assert_eq!(label, "L0");
                assert_eq!((have, need), (4, 5));
            }
            other => panic!("expected insufficient-examples error, got {other:?}"),
        }
    }

    #[test]
    fn toy_corpus_keywords_are_disjoint() {
        let toy = generate_toy_corpus(5, 2, 11);
        assert_eq!(toy.train.len(), 20);
        assert_eq!(toy.test.len(), 8);
        assert_eq!(toy.labels.len(), 4);
        assert_eq!(toy.labels.mask_span(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_samples() -> impl Strategy<Value = Vec<LabeledSample>> {
            let label = prop::sample::select(vec!["A", "B", "C"]);
            let labels = prop::collection::vec(label, 1..4)
                .prop_map(|ls| ls.iter().map(|s| s.to_string()).collect::<Vec<_>>());
            prop::collection::vec(
                ("[a-z가-힣]{1,6}", labels)
                    .prop_map(|(text, labels)| LabeledSample { text, labels }),
                0..12,
            )
        }

        proptest! {
            #[test]
            fn expansion_is_length_additive(samples in arb_samples()) {
                let ls = label_set(&["A", "B", "C"]);
                let expanded = expand_multilabel(&samples, &ls).unwrap();
                let total: usize = samples.iter().map(|s| s.labels.len()).sum();
                prop_assert_eq!(expanded.len(), total);
            }

            #[test]
            fn save_load_round_trips(samples in arb_samples()) {
                prop_assume!(samples.iter().all(|s| !s.text.trim().is_empty()));
                let f = tempfile::NamedTempFile::new().unwrap();
                save_corpus(f.path(), &samples).unwrap();
                let loaded = load_corpus(f.path()).unwrap();
                prop_assert_eq!(loaded, samples);
            }

            #[test]
            fn split_partitions_the_input(per_label in 2usize..6, k in 1usize..4, seed in 0u64..50) {
                prop_assume!(k < per_label);
                let examples = examples_per_label(3, per_label);
                let (train, test) = few_shot_split(&examples, k, seed).unwrap();
                let mut merged: Vec<_> = train.iter().chain(test.iter()).cloned().collect();
                merged.sort_by(|a, b| a.text.cmp(&b.text));
                let mut original = examples.clone();
                original.sort_by(|a, b| a.text.cmp(&b.text));
                prop_assert_eq!(merged, original);
            }
        }
    }
}

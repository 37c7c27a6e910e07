//! Caption metrics: METEOR (exact matching), ROUGE-1, ROUGE-L and
//! embedding cosine similarity, plus report tables.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderSet, TextEncoder};
use crate::error::{Error, Result};

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_BETA: f64 = 3.0;
/// Recall weight of the ROUGE-L F-measure.
pub const ROUGE_L_BETA: f64 = 1.2;

/// Upper bound on search nodes when minimizing METEOR chunks.
const ALIGN_BUDGET: usize = 200_000;

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn max_over_refs(pred: &str, refs: &[String], f: impl Fn(&[String], &[String]) -> f64) -> f64 {
    let p = tokenize(pred);
    if p.is_empty() {
        return 0.0;
    }
    refs.iter().map(|r| f(&p, &tokenize(r))).fold(0.0, f64::max)
}

/// Maximum-size unigram alignment with the fewest chunks; returns
/// (matches, chunks).
fn align(pred: &[String], reference: &[String]) -> (usize, usize) {
    let ref_counts = counts(reference);
    let pred_counts = counts(pred);
    let mut need: HashMap<&str, usize> = pred_counts
        .iter()
        .filter_map(|(w, &c)| ref_counts.get(w).map(|&r| (*w, c.min(r))))
        .collect();
    let matches: usize = need.values().sum();
    if matches == 0 {
        return (0, 0);
    }
    // Occurrences of each word in the reference, and pred occurrences left
    // at or after each position.
    let mut ref_pos: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, w) in reference.iter().enumerate() {
        ref_pos.entry(w.as_str()).or_default().push(j);
    }
    let mut left_after = vec![0usize; pred.len()];
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for i in (0..pred.len()).rev() {
        let c = seen.entry(pred[i].as_str()).or_insert(0);
        left_after[i] = *c;
        *c += 1;
    }

    struct Search<'a> {
        pred: &'a [String],
        ref_pos: HashMap<&'a str, Vec<usize>>,
        left_after: Vec<usize>,
        used: Vec<bool>,
        best: usize,
        nodes: usize,
    }

    impl<'a> Search<'a> {
        /// `last` is the reference position matched to pred[i - 1], if any.
        fn go(&mut self, i: usize, last: Option<usize>, chunks: usize, need: &mut HashMap<&'a str, usize>) {
            self.nodes += 1;
            if chunks >= self.best || self.nodes > ALIGN_BUDGET {
                return;
            }
            if i == self.pred.len() {
                self.best = chunks;
                return;
            }
            let w = self.pred[i].as_str();
            let remaining = need.get(w).copied().unwrap_or(0);
            if remaining > 0 {
                let positions = self.ref_pos[w].clone();
                // Continuing the current chunk first finds good bounds early.
                let mut order: Vec<usize> = positions.into_iter().filter(|&j| !self.used[j]).collect();
                order.sort_by_key(|&j| (Some(j) != last.map(|l| l + 1), j));
                for j in order {
                    let extends = last.is_some_and(|l| l + 1 == j);
                    self.used[j] = true;
                    *need.get_mut(w).unwrap() -= 1;
                    self.go(i + 1, Some(j), chunks + usize::from(!extends), need);
                    *need.get_mut(w).unwrap() += 1;
                    self.used[j] = false;
                }
            }
            // Leave pred[i] unmatched only if enough later copies remain.
            if remaining <= self.left_after[i] {
                self.go(i + 1, None, chunks, need);
            }
        }
    }

    let mut s = Search {
        pred,
        ref_pos,
        left_after,
        used: vec![false; reference.len()],
        best: usize::MAX,
        nodes: 0,
    };
    s.go(0, None, 0, &mut need);
    (matches, s.best)
}

fn meteor_single(pred: &[String], reference: &[String]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (m, chunks) = align(pred, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / pred.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    fmean * (1.0 - penalty)
}

/// METEOR with exact unigram matching; best over references.
pub fn meteor_score(pred: &str, refs: &[String]) -> f64 {
    max_over_refs(pred, refs, meteor_single)
}

fn rouge1_single(pred: &[String], reference: &[String]) -> f64 {
    if reference.is_empty() {
        return 0.0;
    }
    let rc = counts(reference);
    let overlap: usize = counts(pred)
        .iter()
        .map(|(w, &c)| c.min(rc.get(w).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Unigram F1 with clipped counts; best over references.
pub fn rouge_1(pred: &str, refs: &[String]) -> f64 {
    max_over_refs(pred, refs, rouge1_single)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l_single(pred: &[String], reference: &[String], beta: f64) -> f64 {
    let l = lcs_len(pred, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / pred.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// LCS F-measure with recall weight [`ROUGE_L_BETA`]; best over references.
pub fn rouge_l(pred: &str, refs: &[String]) -> f64 {
    rouge_l_with_beta(pred, refs, ROUGE_L_BETA)
}

pub fn rouge_l_with_beta(pred: &str, refs: &[String], beta: f64) -> f64 {
    max_over_refs(pred, refs, |p, r| rouge_l_single(p, r, beta))
}

/// 100 x cosine of the two texts' embeddings.
pub fn embedding_text_similarity(pred: &str, reference: &str, encoder: &dyn TextEncoder) -> Result<f64> {
    let a = encoder.encode(pred)?;
    let b = encoder.encode(reference)?;
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("embeddings of length {} and {}", a.len(), b.len())));
    }
    let norm = |v: &[f64], s: &str| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            Err(Error::Numeric(format!("embedding of {s:?} has zero or non-finite norm")))
        } else {
            Ok(n)
        }
    };
    let (na, nb) = (norm(&a, pred)?, norm(&b, reference)?);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    Ok(100.0 * dot / (na * nb))
}

/// Best similarity over references.
pub fn max_similarity(pred: &str, refs: &[String], encoder: &dyn TextEncoder) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for r in refs {
        best = best.max(embedding_text_similarity(pred, r, encoder)?);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Against the stimulus' reference captions.
    VsCoco,
    /// Against the caption generated from the true embedding.
    VsModel,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::VsCoco => "vs_coco",
            Protocol::VsModel => "vs_model",
        }
    }

    pub fn heading(self) -> &'static str {
        match self {
            Protocol::VsCoco => "fMRI vs COCO",
            Protocol::VsModel => "fMRI vs Model",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vs_coco" => Ok(Protocol::VsCoco),
            "vs_model" => Ok(Protocol::VsModel),
            other => Err(Error::Config(format!("unknown protocol {other:?}; expected vs_coco or vs_model"))),
        }
    }
}

/// One line of `captions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPair {
    pub stimulus_id: String,
    pub predicted: String,
    pub references: Vec<String>,
    pub protocol: Protocol,
}

impl EvalPair {
    pub fn validate(&self) -> Result<()> {
        if self.references.is_empty() {
            return Err(Error::Validation(format!("{} has no references", self.stimulus_id)));
        }
        if self.protocol == Protocol::VsModel && self.references.len() != 1 {
            return Err(Error::Validation(format!(
                "{}: the vs_model protocol takes exactly one reference, got {}",
                self.stimulus_id,
                self.references.len()
            )));
        }
        Ok(())
    }
}

pub fn read_pairs_jsonl(text: &str) -> Result<Vec<EvalPair>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Validation(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_pairs_jsonl(pairs: &[EvalPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p).expect("pairs serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: Protocol,
    pub meteor: f64,
    pub rouge1: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub sentence_pct: f64,
    pub clip_b_pct: f64,
    pub clip_l_pct: f64,
    pub n_pairs: usize,
}

impl MetricReport {
    /// Values in table row order.
    pub fn values(&self) -> [f64; 6] {
        [
            self.meteor,
            self.rouge1,
            self.rouge_l,
            self.sentence_pct,
            self.clip_b_pct,
            self.clip_l_pct,
        ]
    }

    /// Element-wise mean of reports sharing one protocol.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Validation("no reports to average".into()))?;
        if reports.iter().any(|r| r.protocol != first.protocol) {
            return Err(Error::Validation("cannot average reports of different protocols".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(MetricReport {
            protocol: first.protocol,
            meteor: avg(|r| r.meteor),
            rouge1: avg(|r| r.rouge1),
            rouge_l: avg(|r| r.rouge_l),
            sentence_pct: avg(|r| r.sentence_pct),
            clip_b_pct: avg(|r| r.clip_b_pct),
            clip_l_pct: avg(|r| r.clip_l_pct),
            n_pairs: reports.iter().map(|r| r.n_pairs).sum(),
        })
    }
}

pub const METRIC_ROWS: [&str; 6] = ["METEOR", "ROUGE-1", "ROUGE-L", "Sentence", "CLIP-B", "CLIP-L"];

/// Per-metric means over pairs of one protocol.
pub fn build_report(pairs: &[EvalPair], encoders: &EncoderSet) -> Result<MetricReport> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Validation("no caption pairs to evaluate".into()))?;
    let mut sums = [0.0; 6];
    for p in pairs {
        p.validate()?;
        if p.protocol != first.protocol {
            return Err(Error::Validation(format!(
                "mixed protocols: {} and {}",
                first.protocol.as_str(),
                p.protocol.as_str()
            )));
        }
        let row = [
            meteor_score(&p.predicted, &p.references),
            rouge_1(&p.predicted, &p.references),
            rouge_l(&p.predicted, &p.references),
            max_similarity(&p.predicted, &p.references, encoders.sentence.as_ref())?,
            max_similarity(&p.predicted, &p.references, encoders.clip_b.as_ref())?,
            max_similarity(&p.predicted, &p.references, encoders.clip_l.as_ref())?,
        ];
        sums.iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    let n = pairs.len() as f64;
    Ok(MetricReport {
        protocol: first.protocol,
        meteor: sums[0] / n,
        rouge1: sums[1] / n,
        rouge_l: sums[2] / n,
        sentence_pct: sums[3] / n,
        clip_b_pct: sums[4] / n,
        clip_l_pct: sums[5] / n,
        n_pairs: pairs.len(),
    })
}

/// A column group of a results table, headed by its protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct TableGroup {
    pub heading: String,
    pub columns: Vec<(String, Option<MetricReport>)>,
}

/// Plain-text table with the six metric rows; overlap metrics to three
/// decimals, similarities as percentages to one decimal, "-" for absent cells.
pub fn render_table(title: &str, groups: &[TableGroup]) -> String {
    let cell = |r: &Option<MetricReport>, row: usize| match r {
        None => "-".to_string(),
        Some(r) if row < 3 => format!("{:.3}", r.values()[row]),
        Some(r) => format!("{:.1}%", r.values()[row]),
    };
    let first_w = METRIC_ROWS.iter().map(|s| s.len()).max().unwrap().max("Metrics".len());
    let mut widths = Vec::new();
    for g in groups {
        for (name, r) in &g.columns {
            let w = (0..6).map(|i| cell(r, i).len()).max().unwrap().max(name.len());
            widths.push(w);
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let mut heading = format!("{:first_w$}", "");
    let mut names = format!("{:first_w$}", "Metrics");
    let mut k = 0;
    for (gi, g) in groups.iter().enumerate() {
        let sep = if gi == 0 { "  " } else { " | " };
        let span: usize = widths[k..k + g.columns.len()].iter().sum::<usize>() + 2 * (g.columns.len() - 1);
        let _ = write!(heading, "{sep}{:^span$}", g.heading);
        for (ci, (name, _)) in g.columns.iter().enumerate() {
            let s = if ci == 0 { sep } else { "  " };
            let _ = write!(names, "{s}{:>w$}", name, w = widths[k]);
            k += 1;
        }
    }
    let _ = writeln!(out, "{}", heading.trim_end());
    let _ = writeln!(out, "{names}");
    let _ = writeln!(out, "{}", "-".repeat(names.len()));
    for (row, label) in METRIC_ROWS.iter().enumerate() {
        let mut line = format!("{label:first_w$}");
        let mut k = 0;
        for (gi, g) in groups.iter().enumerate() {
            for (ci, (_, r)) in g.columns.iter().enumerate() {
                let s = match (gi, ci) {
                    (0, 0) | (_, 1..) => "  ",
                    _ => " | ",
                };
                let _ = write!(line, "{s}{:>w$}", cell(r, row), w = widths[k]);
                k += 1;
            }
        }
        let _ = writeln!(out, "{line}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::StubTextEncoder;
    use proptest::prelude::*;

    fn refs(r: &[&str]) -> Vec<String> {
        r.iter().map(|s| s.to_string()).collect()
    }

    /// Orthogonal one-hot vectors per distinct text.
    struct OneHot;

    impl TextEncoder for OneHot {
        fn output_dim(&self) -> usize {
            4
        }
        fn encode(&self, text: &str) -> Result<Vec<f64>> {
            let mut v = vec![0.0; 4];
            v[text.len() % 4] = 1.0;
            Ok(v)
        }
    }

    struct Zero;

    impl TextEncoder for Zero {
        fn output_dim(&self) -> usize {
            2
        }
        fn encode(&self, _: &str) -> Result<Vec<f64>> {
            Ok(vec![0.0, 0.0])
        }
    }

    #[test]
    fn tokenizer_lowercases_and_strips_punctuation() {
        assert_eq!(tokenize("A Dog, running!  Fast."), vec!["a", "dog", "running", "fast"]);
        assert!(tokenize("?!").is_empty());
    }

    #[test]
    fn meteor_exact_match_penalty() {
        let s = meteor_score("a b c d", &refs(&["a b c d"]));
        assert!((s - (1.0 - 0.5 * 0.25f64.powi(3))).abs() < 1e-12);
        assert_eq!(meteor_score("a b", &refs(&["x y"])), 0.0);
        assert_eq!(meteor_score("a b", &refs(&["x y", "a b"])), meteor_score("a b", &refs(&["a b"])));
        assert_eq!(meteor_score("", &refs(&["a"])), 0.0);
    }

    #[test]
    fn meteor_prefers_the_alignment_with_fewest_chunks() {
        // "the" can align to either occurrence; the contiguous choice gives one chunk.
        let (m, chunks) = align(&tokenize("the cat sat"), &tokenize("the dog and the cat sat"));
        assert_eq!((m, chunks), (3, 1));
        let (m, chunks) = align(&tokenize("b a"), &tokenize("a b"));
        assert_eq!((m, chunks), (2, 2));
    }

    #[test]
    fn meteor_hand_computed_fragmented_case() {
        // Three matches in three chunks: P = R = 1, penalty 0.5 * (3/3)^3.
        let s = meteor_score("b a c", &refs(&["a b c"]));
        let expected = 1.0 * (1.0 - 0.5 * 1.0f64.powi(3));
        assert!((s - expected).abs() < 1e-12);
    }

    #[test]
    fn rouge_fixtures() {
        assert!((rouge_1("a b c", &refs(&["a b d"])) - 2.0 / 3.0).abs() < 1e-9);
        assert!((rouge_1("a a a", &refs(&["a b"])) - 0.4).abs() < 1e-9);
        assert_eq!(rouge_1("x y", &refs(&["x y"])), 1.0);
        assert!((rouge_l("a b c d", &refs(&["a c b d"])) - 0.75).abs() < 1e-9);
        assert_eq!(rouge_l("a b", &refs(&["a b"])), 1.0);
        assert_eq!(rouge_l("a b", &refs(&["c d"])), 0.0);
    }

    #[test]
    fn rouge_l_weights_recall() {
        // P = 1, R = 1/2.
        let s = rouge_l("a b", &refs(&["a b c d"]));
        let b2 = ROUGE_L_BETA * ROUGE_L_BETA;
        assert!((s - (1.0 + b2) * 0.5 / (0.5 + b2)).abs() < 1e-12);
    }

    #[test]
    fn similarity_cases() {
        let stub = StubTextEncoder { dim: 32, seed: 0 };
        assert!((embedding_text_similarity("a dog", "a dog", &stub).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(embedding_text_similarity("a", "ab", &OneHot).unwrap(), 0.0);
        assert!(matches!(embedding_text_similarity("x", "y", &Zero), Err(Error::Numeric(m)) if m.contains("\"x\"")));
    }

    #[test]
    fn similarity_is_scale_invariant() {
        struct Scaled;
        impl TextEncoder for Scaled {
            fn output_dim(&self) -> usize {
                2
            }
            fn encode(&self, t: &str) -> Result<Vec<f64>> {
                Ok(if t == "v" { vec![1.0, 2.0] } else { vec![2.0, 4.0] })
            }
        }
        assert!((embedding_text_similarity("v", "2v", &Scaled).unwrap() - 100.0).abs() < 1e-12);
    }

    fn pair(pred: &str, r: &[&str]) -> EvalPair {
        EvalPair {
            stimulus_id: "s".into(),
            predicted: pred.into(),
            references: refs(r),
            protocol: Protocol::VsCoco,
        }
    }

    #[test]
    fn report_means_and_perfect_predictions() {
        let enc = EncoderSet::stubs();
        let r = build_report(&[pair("a b c", &["a b d"]), pair("x y", &["x y"])], &enc).unwrap();
        assert!((r.rouge1 - 5.0 / 6.0).abs() < 1e-12);
        let perfect = build_report(&[pair("a b c d", &["a b c d"])], &enc).unwrap();
        assert!((perfect.meteor - (1.0 - 0.5 / 64.0)).abs() < 1e-12);
        assert_eq!((perfect.rouge1, perfect.rouge_l), (1.0, 1.0));
        for v in [perfect.sentence_pct, perfect.clip_b_pct, perfect.clip_l_pct] {
            assert!((v - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn report_rejects_mixed_protocols_and_bad_pairs() {
        let enc = EncoderSet::stubs();
        let mut b = pair("a", &["a"]);
        b.protocol = Protocol::VsModel;
        assert!(build_report(&[pair("a", &["a"]), b.clone()], &enc).is_err());
        b.references.push("c".into());
        assert!(build_report(&[b], &enc).is_err());
        assert!(build_report(&[], &enc).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let pairs = vec![pair("a b", &["a", "b"]), pair("c", &["c"])];
        let text = write_pairs_jsonl(&pairs);
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"protocol\":\"vs_coco\""));
        assert_eq!(read_pairs_jsonl(&text).unwrap(), pairs);
    }

    #[test]
    fn table_layout_has_six_rows_and_all_columns() {
        let enc = EncoderSet::stubs();
        let r = build_report(&[pair("a b", &["a b"])], &enc).unwrap();
        let t = render_table(
            "Evaluation",
            &[TableGroup {
                heading: "fMRI vs COCO".into(),
                columns: vec![("Ridge".into(), Some(r.clone())), ("Wide CNN".into(), None)],
            }],
        );
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4 + 6);
        assert!(lines[2].contains("Ridge") && lines[2].contains("Wide CNN"));
        assert!(lines[4].starts_with("METEOR") && lines[4].contains(&format!("{:.3}", r.meteor)));
        assert!(lines[7].contains("100.0%") && lines[7].trim_end().ends_with('-'));
    }

    fn words() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(String::from), 1..8)
    }

    proptest! {
        #[test]
        fn rouge1_is_permutation_invariant(p in words(), r in words(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (mut p2, mut r2) = (p.clone(), r.clone());
            p2.shuffle(&mut rng);
            r2.shuffle(&mut rng);
            let a = rouge_1(&p.join(" "), &[r.join(" ")]);
            let b = rouge_1(&p2.join(" "), &[r2.join(" ")]);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn lcs_grows_by_common_suffix(p in words(), r in words(), s in words()) {
            let ps: Vec<_> = p.iter().chain(&s).cloned().collect();
            let rs: Vec<_> = r.iter().chain(&s).cloned().collect();
            prop_assert_eq!(lcs_len(&ps, &rs), lcs_len(&p, &r) + s.len());
        }

        #[test]
        fn more_references_never_lower_scores(p in words(), r in prop::collection::vec(words(), 1..4), extra in words()) {
            let pred = p.join(" ");
            let base: Vec<String> = r.iter().map(|w| w.join(" ")).collect();
            let mut more = base.clone();
            more.push(extra.join(" "));
            let enc = StubTextEncoder { dim: 16, seed: 3 };
            prop_assert!(meteor_score(&pred, &more) >= meteor_score(&pred, &base));
            prop_assert!(rouge_1(&pred, &more) >= rouge_1(&pred, &base));
            prop_assert!(rouge_l(&pred, &more) >= rouge_l(&pred, &base));
            prop_assert!(max_similarity(&pred, &more, &enc).unwrap() >= max_similarity(&pred, &base, &enc).unwrap());
        }

        #[test]
        fn disjoint_texts_score_zero(p in words()) {
            let other: Vec<String> = p.iter().map(|w| format!("{w}z")).collect();
            let r = [other.join(" ")];
            prop_assert_eq!(meteor_score(&p.join(" "), &r), 0.0);
            prop_assert_eq!(rouge_1(&p.join(" "), &r), 0.0);
            prop_assert_eq!(rouge_l(&p.join(" "), &r), 0.0);
        }

        #[test]
        fn exact_match_meteor_formula(p in words()) {
            let s = meteor_score(&p.join(" "), &[p.join(" ")]);
            let m = p.len() as f64;
            prop_assert!((s - (1.0 - 0.5 * (1.0 / m).powi(3))).abs() < 1e-12);
        }

        #[test]
        fn similarity_is_symmetric(a in "[a-e ]{1,12}", b in "[a-e ]{1,12}") {
            let enc = StubTextEncoder { dim: 24, seed: 5 };
            prop_assert_eq!(
                embedding_text_similarity(&a, &b, &enc).unwrap(),
                embedding_text_similarity(&b, &a, &enc).unwrap()
            );
        }

        #[test]
        fn meteor_search_matches_brute_force(p in words(), r in words()) {
            prop_assert_eq!(align(&p, &r), brute_align(&p, &r));
        }
    }

    /// Enumerates every maximum matching explicitly.
    fn brute_align(p: &[String], r: &[String]) -> (usize, usize) {
        fn rec(i: usize, p: &[String], r: &[String], used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
            if i == p.len() {
                let m = cur.len();
                let mut chunks = 0;
                for (k, &(pi, rj)) in cur.iter().enumerate() {
                    if k == 0 || !(cur[k - 1].0 + 1 == pi && cur[k - 1].1 + 1 == rj) {
                        chunks += 1;
                    }
                }
                if m > best.0 || (m == best.0 && chunks < best.1) {
                    *best = (m, chunks);
                }
                return;
            }
            rec(i + 1, p, r, used, cur, best);
            for j in 0..r.len() {
                if !used[j] && r[j] == p[i] {
                    used[j] = true;
                    cur.push((i, j));
                    rec(i + 1, p, r, used, cur, best);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = (0, 0);
        rec(0, p, r, &mut vec![false; r.len()], &mut Vec::new(), &mut best);
        best
    }
}

//! Corpus-level caption metrics (BLEU-1..5, CIDEr-D) and the word-type
//! attention report. All metrics operate on token strings.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::decoder::{AttentionTrace, Modality};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(hypothesis: &[&str], references: &[&[&str]]) -> Self {
        EvalPair {
            hypothesis: hypothesis.iter().map(|s| s.to_string()).collect(),
            references: references.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect(),
        }
    }

    /// Whitespace-split hypothesis against a single reference.
    pub fn from_text(hypothesis: &str, reference: &str) -> Self {
        EvalPair {
            hypothesis: hypothesis.split_whitespace().map(str::to_string).collect(),
            references: vec![reference.split_whitespace().map(str::to_string).collect()],
        }
    }
}

fn check_pairs(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Data("empty hypothesis set".into()));
    }
    if let Some(i) = pairs.iter().position(|p| p.references.is_empty()) {
        return Err(Error::Data(format!("pair {i} has no references")));
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with uniform weights over 1..=max_n, scaled to [0, 100].
pub fn bleu(pairs: &[EvalPair], max_n: usize) -> Result<f64> {
    if !(1..=5).contains(&max_n) {
        return Err(Error::Config(format!("bleu max_n must be in 1..=5, got {max_n}")));
    }
    check_pairs(pairs)?;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for pair in pairs {
        let h = pair.hypothesis.len();
        hyp_len += h;
        // closest reference length, shorter on ties
        ref_len += pair
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&r| (r.abs_diff(h), r))
            .unwrap_or(0);
        for n in 1..=max_n {
            let hc = ngram_counts(&pair.hypothesis, n);
            let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
            for r in &pair.references {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in hc {
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if matched.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

/// BLEU-1 through BLEU-5.
pub fn bleu_all(pairs: &[EvalPair]) -> Result<[f64; 5]> {
    let mut out = [0.0; 5];
    for (n, slot) in out.iter_mut().enumerate() {
        *slot = bleu(pairs, n + 1)?;
    }
    Ok(out)
}

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

struct TfIdf {
    vec: [BTreeMap<Vec<String>, f64>; CIDER_N],
    norm: [f64; CIDER_N],
    length: f64,
}

fn all_ngrams(tokens: &[String]) -> BTreeMap<Vec<String>, usize> {
    let mut counts = BTreeMap::new();
    for n in 1..=CIDER_N {
        for (g, c) in ngram_counts(tokens, n) {
            counts.insert(g.to_vec(), c);
        }
    }
    counts
}

fn tf_idf(counts: &BTreeMap<Vec<String>, usize>, df: &BTreeMap<Vec<String>, usize>, log_docs: f64) -> TfIdf {
    let mut vec: [BTreeMap<Vec<String>, f64>; CIDER_N] = Default::default();
    let mut norm = [0.0; CIDER_N];
    let mut length = 0.0;
    for (g, &tf) in counts {
        let n = g.len() - 1;
        let d = (df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        let v = tf as f64 * (log_docs - d);
        norm[n] += v * v;
        vec[n].insert(g.clone(), v);
        // the reference implementation counts bigrams here, not words
        if n == 1 {
            length += tf as f64;
        }
    }
    for x in &mut norm {
        *x = x.sqrt();
    }
    TfIdf { vec, norm, length }
}

fn cider_sim(h: &TfIdf, r: &TfIdf) -> [f64; CIDER_N] {
    let delta = h.length - r.length;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut val = [0.0; CIDER_N];
    for n in 0..CIDER_N {
        for (g, &vh) in &h.vec[n] {
            if let Some(&vr) = r.vec[n].get(g) {
                val[n] += vh.min(vr) * vr;
            }
        }
        if h.norm[n] != 0.0 && r.norm[n] != 0.0 {
            val[n] /= h.norm[n] * r.norm[n];
        }
        val[n] *= penalty;
    }
    val
}

/// Raw per-pair CIDEr-D scores (identity scores 10).
pub fn cider_d_per_pair(pairs: &[EvalPair]) -> Result<Vec<f64>> {
    check_pairs(pairs)?;
    let distinct: BTreeSet<&Vec<String>> = pairs.iter().flat_map(|p| &p.references).collect();
    if distinct.len() < 2 {
        return Err(Error::Data(
            "CIDEr-D needs at least two distinct references (document frequency is degenerate)".into(),
        ));
    }
    let ref_counts: Vec<Vec<BTreeMap<Vec<String>, usize>>> =
        pairs.iter().map(|p| p.references.iter().map(|r| all_ngrams(r)).collect()).collect();
    let mut df: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for refs in &ref_counts {
        let seen: BTreeSet<&Vec<String>> = refs.iter().flat_map(|c| c.keys()).collect();
        for g in seen {
            *df.entry(g.clone()).or_insert(0) += 1;
        }
    }
    let log_docs = (pairs.len() as f64).ln();
    Ok(pairs
        .iter()
        .zip(&ref_counts)
        .map(|(pair, refs)| {
            let h = tf_idf(&all_ngrams(&pair.hypothesis), &df, log_docs);
            let sum: f64 = refs
                .iter()
                .map(|rc| cider_sim(&h, &tf_idf(rc, &df, log_docs)).iter().sum::<f64>() / CIDER_N as f64)
                .sum();
            sum / refs.len() as f64 * 10.0
        })
        .collect())
}

/// Corpus CIDEr-D, reported ×100.
pub fn cider_d(pairs: &[EvalPair]) -> Result<f64> {
    let scores = cider_d_per_pair(pairs)?;
    Ok(100.0 * scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordType {
    Verb,
    Noun,
    Determiner,
    Preposition,
    Other,
}

impl WordType {
    pub const ALL: [WordType; 5] = [
        WordType::Verb,
        WordType::Noun,
        WordType::Determiner,
        WordType::Preposition,
        WordType::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            WordType::Verb => "verb",
            WordType::Noun => "noun",
            WordType::Determiner => "determiner",
            WordType::Preposition => "preposition",
            WordType::Other => "other",
        }
    }
}

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "another", "my", "your", "his",
    "her", "its", "our", "their", "no", "all", "both",
];
const PREPOSITIONS: &[&str] = &[
    "in", "into", "on", "onto", "from", "to", "with", "at", "of", "for", "by", "off", "out", "over", "under", "up",
    "down", "inside", "through", "across", "about", "around", "between", "toward", "towards", "using",
];
const OTHER: &[&str] = &[
    "and", "or", "but", "then", "it", "them", "they", "he", "she", "i", "you", "we", "is", "are", "be", "not", "again",
    "too", "very", "<unk>",
];

/// Tag by position (first token is the verb) then closed-class lists; any
/// remaining open-class word counts as a noun.
pub fn word_type(token: &str, position: usize) -> WordType {
    if position == 0 {
        WordType::Verb
    } else if DETERMINERS.contains(&token) {
        WordType::Determiner
    } else if PREPOSITIONS.contains(&token) {
        WordType::Preposition
    } else if OTHER.contains(&token) || !token.chars().any(char::is_alphabetic) {
        WordType::Other
    } else {
        WordType::Noun
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NounAttention {
    pub count: usize,
    /// Fraction of occurrences whose argmax modality was V, S, V+S.
    pub rates: [f64; 3],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttnReport {
    /// Argmax-modality counts per word type, indexed V, S, V+S.
    pub counts: BTreeMap<WordType, [usize; 3]>,
    pub nouns: BTreeMap<String, NounAttention>,
    /// Traces with word types filled in.
    pub tagged: Vec<AttentionTrace>,
}

impl AttnReport {
    /// Share of `wt` steps whose argmax modality is `m`; `None` without samples.
    pub fn rate(&self, wt: WordType, m: Modality) -> Option<f64> {
        let c = self.counts.get(&wt)?;
        let total: usize = c.iter().sum();
        (total > 0).then(|| c[m.index()] as f64 / total as f64)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("word-type     n       V      S      V+S\n");
        for wt in WordType::ALL {
            let Some(c) = self.counts.get(&wt) else { continue };
            let total: usize = c.iter().sum();
            let pct = |k: usize| 100.0 * c[k] as f64 / total.max(1) as f64;
            out.push_str(&format!(
                "{:<12}{:>4}  {:>5.1}% {:>5.1}% {:>5.1}%\n",
                wt.label(),
                total,
                pct(0),
                pct(1),
                pct(2)
            ));
        }
        if !self.nouns.is_empty() {
            out.push_str("\nnoun            n   rate(V)  rate(V+S)\n");
            for (noun, a) in &self.nouns {
                out.push_str(&format!("{:<14}{:>4}   {:>6.3}   {:>6.3}\n", noun, a.count, a.rates[0], a.rates[2]));
            }
        }
        out
    }
}

/// Word-type × modality table from generation traces. Each caption's words
/// align with the leading trace steps; one trailing EOS step is ignored.
pub fn attn_report(traces: &[AttentionTrace], captions: &[Vec<String>]) -> Result<AttnReport> {
    if traces.len() != captions.len() {
        return Err(Error::Data(format!(
            "{} traces but {} captions",
            traces.len(),
            captions.len()
        )));
    }
    let mut report = AttnReport::default();
    let mut noun_counts: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    for (i, (trace, words)) in traces.iter().zip(captions).enumerate() {
        let steps = trace.steps.len();
        if steps != words.len() && steps != words.len() + 1 {
            return Err(Error::Data(format!(
                "caption {i}: {} words but {steps} trace steps",
                words.len()
            )));
        }
        let mut tagged = trace.clone();
        for (pos, (step, word)) in tagged.steps.iter_mut().zip(words).enumerate() {
            let wt = word_type(word, pos);
            step.word_type = Some(wt.label().to_string());
            let k = step.modality.index();
            report.counts.entry(wt).or_insert([0; 3])[k] += 1;
            if wt == WordType::Noun {
                noun_counts.entry(word.clone()).or_insert([0; 3])[k] += 1;
            }
        }
        report.tagged.push(tagged);
    }
    report.nouns = noun_counts
        .into_iter()
        .map(|(w, c)| {
            let n: usize = c.iter().sum();
            let rates = [0, 1, 2].map(|k| c[k] as f64 / n as f64);
            (w, NounAttention { count: n, rates })
        })
        .collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::TraceStep;

    fn pair(h: &str, r: &str) -> EvalPair {
        EvalPair::from_text(h, r)
    }

    #[test]
    fn identity_scores_full_marks() {
        let pairs = vec![
            pair("take a cup from the drawer", "take a cup from the drawer"),
            pair("put the plate on the counter", "put the plate on the counter"),
            pair("stir the soup in the pan", "stir the soup in the pan"),
        ];
        for n in 1..=5 {
            assert!((bleu(&pairs, n).unwrap() - 100.0).abs() < 1e-9);
        }
        for s in cider_d_per_pair(&pairs).unwrap() {
            assert!((s - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn disjoint_scores_zero() {
        let pairs = vec![pair("x y z w", "a b c d"), pair("q r s t", "e f g h")];
        assert_eq!(bleu(&pairs, 1).unwrap(), 0.0);
        assert_eq!(cider_d(&pairs).unwrap(), 0.0);
    }

    #[test]
    fn bleu_hand_computed() {
        // p1 = 5/6 (one unmatched "dog"), hyp 6 tokens vs ref 6: BP = 1
        let pairs = vec![pair("the cat sat on the dog", "the cat sat on the mat")];
        assert!((bleu(&pairs, 1).unwrap() - 100.0 * 5.0 / 6.0).abs() < 1e-12);
        // p2 = 4/5
        let b2 = 100.0 * ((5.0f64 / 6.0) * (4.0 / 5.0)).sqrt();
        assert!((bleu(&pairs, 2).unwrap() - b2).abs() < 1e-12);
    }

    #[test]
    fn bleu_brevity_penalty() {
        let pairs = vec![pair("the cat", "the cat sat on the mat")];
        let expect = 100.0 * (1.0f64 - 6.0 / 2.0).exp();
        assert!((bleu(&pairs, 1).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn bleu_clipping() {
        let pairs = vec![pair("the the the the", "the cat")];
        // clipped precision 1/4, BP exp(1 - 2/4) = 1 since hyp longer
        assert!((bleu(&pairs, 1).unwrap() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_known_non_monotone_case() {
        let pairs = vec![pair("b b c c a c b", "a c b b c a")];
        let b1 = bleu(&pairs, 1).unwrap();
        let b2 = bleu(&pairs, 2).unwrap();
        assert!((b1 - 100.0 * 5.0 / 7.0).abs() < 1e-9);
        assert!(b2 > b1);
    }

    #[test]
    fn errors() {
        assert!(matches!(bleu(&[], 1), Err(Error::Data(_))));
        assert!(matches!(bleu(&[pair("a", "a")], 6), Err(Error::Config(_))));
        assert!(matches!(cider_d(&[pair("a b", "a b")]), Err(Error::Data(_))));
        let same = vec![pair("a b", "c d"), pair("e f", "c d")];
        assert!(matches!(cider_d(&same), Err(Error::Data(_))));
        let no_refs = EvalPair {
            hypothesis: vec!["a".into()],
            references: vec![],
        };
        assert!(matches!(bleu(&[no_refs], 1), Err(Error::Data(_))));
    }

    fn step(m: Modality) -> TraceStep {
        let mut zeta = [0.0; 3];
        zeta[m.index()] = 1.0;
        TraceStep {
            zeta,
            modality: m,
            token: 0,
            word_type: None,
        }
    }

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn all_vs_trace_gives_full_vs_rate() {
        let caps = vec![words("take a cup from the drawer"), words("open the drawer")];
        let traces: Vec<AttentionTrace> = caps
            .iter()
            .map(|c| AttentionTrace {
                steps: (0..=c.len()).map(|_| step(Modality::VS)).collect(),
            })
            .collect();
        let r = attn_report(&traces, &caps).unwrap();
        for wt in [WordType::Verb, WordType::Noun, WordType::Determiner, WordType::Preposition] {
            assert_eq!(r.rate(wt, Modality::VS), Some(1.0), "{wt:?}");
        }
        assert_eq!(r.nouns["drawer"].count, 2);
        assert_eq!(r.tagged[0].steps[0].word_type.as_deref(), Some("verb"));
        assert!(r.render().contains("verb"));
    }

    #[test]
    fn empty_report() {
        let r = attn_report(&[], &[]).unwrap();
        assert!(r.counts.is_empty());
        assert_eq!(r.rate(WordType::Verb, Modality::VS), None);
        r.render();
    }

    #[test]
    fn misaligned_trace_rejected() {
        let t = AttentionTrace {
            steps: vec![step(Modality::V)],
        };
        assert!(matches!(attn_report(std::slice::from_ref(&t), &[]), Err(Error::Data(_))));
        assert!(matches!(attn_report(&[t], &[words("a b c")]), Err(Error::Data(_))));
    }

    #[test]
    fn tagging() {
        assert_eq!(word_type("open", 0), WordType::Verb);
        assert_eq!(word_type("the", 1), WordType::Determiner);
        assert_eq!(word_type("into", 3), WordType::Preposition);
        assert_eq!(word_type("and", 3), WordType::Other);
        assert_eq!(word_type("cup", 2), WordType::Noun);
    }
}

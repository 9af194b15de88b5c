//! Independent reference implementations and fixtures shared by the
//! integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use egocap::metrics::EvalPair;

fn grams(words: &[String], n: usize) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    let mut i = 0;
    while i + n <= words.len() {
        *out.entry(words[i..i + n].join(" ")).or_insert(0) += 1;
        i += 1;
    }
    out
}

/// Corpus BLEU by direct counting: product of precisions to the 1/N power.
pub fn bleu_oracle(pairs: &[EvalPair], max_n: usize) -> f64 {
    let mut product = 1.0;
    for n in 1..=max_n {
        let (mut hit, mut all) = (0usize, 0usize);
        for p in pairs {
            for (g, c) in grams(&p.hypothesis, n) {
                let best = p.references.iter().map(|r| grams(r, n).get(&g).copied().unwrap_or(0)).max().unwrap();
                hit += c.min(best);
                all += c;
            }
        }
        if hit == 0 {
            return 0.0;
        }
        product *= hit as f64 / all as f64;
    }
    let c: usize = pairs.iter().map(|p| p.hypothesis.len()).sum();
    let mut r = 0usize;
    for p in pairs {
        let h = p.hypothesis.len() as i64;
        let mut best = p.references[0].len();
        for x in &p.references {
            let (d_new, d_old) = ((x.len() as i64 - h).abs(), (best as i64 - h).abs());
            if d_new < d_old || (d_new == d_old && x.len() < best) {
                best = x.len();
            }
        }
        r += best;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * product.powf(1.0 / max_n as f64)
}

/// Per-pair raw CIDEr-D: per n, clipped tf-idf cosine with a Gaussian
/// length penalty (sigma 6), averaged over n = 1..4, times 10.
pub fn cider_oracle(pairs: &[EvalPair]) -> Vec<f64> {
    let docs = pairs.len() as f64;
    let mut scores = Vec::new();
    for p in pairs {
        let mut per_ref = 0.0;
        for r in &p.references {
            let pen = (-((p.hypothesis.len() as f64 - r.len() as f64).powi(2)) / 72.0).exp();
            let mut total = 0.0;
            for n in 1..=4 {
                let df = |g: &str| -> f64 {
                    let k = pairs
                        .iter()
                        .filter(|q| q.references.iter().any(|rr| grams(rr, n).contains_key(g)))
                        .count();
                    docs.ln() - (k.max(1) as f64).ln()
                };
                let (gh, gr) = (grams(&p.hypothesis, n), grams(r, n));
                let norm = |m: &BTreeMap<String, usize>| -> f64 {
                    m.iter().map(|(g, &c)| (c as f64 * df(g)).powi(2)).sum::<f64>().sqrt()
                };
                let (nh, nr) = (norm(&gh), norm(&gr));
                let mut dot = 0.0;
                for (g, &ch) in &gh {
                    if let Some(&cr) = gr.get(g) {
                        let idf = df(g);
                        dot += ch.min(cr) as f64 * cr as f64 * idf * idf;
                    }
                }
                if nh > 0.0 && nr > 0.0 {
                    dot /= nh * nr;
                }
                total += dot * pen;
            }
            per_ref += total / 4.0;
        }
        scores.push(10.0 * per_ref / p.references.len() as f64);
    }
    scores
}

pub fn pair(h: &str, r: &str) -> EvalPair {
    EvalPair::from_text(h, r)
}

/// Hand-built corpus: exact matches, substitutions, repeats, short and
/// long hypotheses, and one pair with two references.
pub fn ten_pair_corpus() -> Vec<EvalPair> {
    let mut v = vec![
        pair("take a cup from the drawer", "take a cup from the drawer"),
        pair("put the plate on the counter", "put a plate on the counter"),
        pair("pour the milk into the bowl", "pour the milk into the glass"),
        pair("open the drawer", "open the cabinet"),
        pair("close the the cabinet door", "close the cabinet"),
        pair("stir the soup", "stir the soup in the pan with a spoon"),
        pair("take a knife from the drawer and a fork", "take a fork from the drawer"),
        pair("put the bowl on the counter", "put the bowl in the sink"),
        pair("crack the egg into the bowl", "crack an egg into the bowl"),
    ];
    v.push(EvalPair::new(
        &["open", "the", "oven", "door"],
        &[&["open", "the", "oven"], &["open", "the", "oven", "door", "slowly"]],
    ));
    v
}

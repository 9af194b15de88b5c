//! Caption a split and score it.

use serde::{Deserialize, Serialize};

use crate::data::tokenize;
use crate::decoder::{AttentionTrace, GenerateOptions};
use crate::error::{Error, Result};
use crate::metrics::{bleu_all, cider_d, EvalPair};
use crate::model::{CaptionModel, PreparedSegment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// BLEU-1..5, ×100.
    pub bleu: [f64; 5],
    /// CIDEr-D ×100.
    pub cider_d: f64,
    /// Share of captions whose first word matches the reference's, ×100.
    pub verb_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub hypothesis: String,
    pub reference: String,
    pub trace: AttentionTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub summary: EvalSummary,
    pub captions: Vec<CaptionRecord>,
}

pub fn caption_all(model: &CaptionModel, segments: &[PreparedSegment], references: &[String], opts: &GenerateOptions) -> Result<Vec<CaptionRecord>> {
    if segments.len() != references.len() {
        return Err(Error::Data(format!(
            "{} segments but {} references",
            segments.len(),
            references.len()
        )));
    }
    segments
        .iter()
        .zip(references)
        .map(|(seg, reference)| {
            let g = model.generate(seg, opts)?;
            Ok(CaptionRecord {
                id: seg.id.clone(),
                hypothesis: model.caption_text(&g.tokens),
                reference: reference.clone(),
                trace: g.trace,
            })
        })
        .collect()
}

pub fn score(captions: &[CaptionRecord]) -> Result<EvalSummary> {
    let pairs: Vec<EvalPair> = captions
        .iter()
        .map(|c| EvalPair {
            hypothesis: tokenize(&c.hypothesis),
            references: vec![tokenize(&c.reference)],
        })
        .collect();
    let verbs = pairs
        .iter()
        .filter(|p| !p.hypothesis.is_empty() && p.hypothesis.first() == p.references[0].first())
        .count();
    Ok(EvalSummary {
        bleu: bleu_all(&pairs)?,
        cider_d: cider_d(&pairs)?,
        verb_accuracy: 100.0 * verbs as f64 / pairs.len().max(1) as f64,
    })
}

pub fn evaluate(model: &CaptionModel, segments: &[PreparedSegment], references: &[String], opts: &GenerateOptions) -> Result<EvalResult> {
    let captions = caption_all(model, segments, references, opts)?;
    Ok(EvalResult {
        summary: score(&captions)?,
        captions,
    })
}

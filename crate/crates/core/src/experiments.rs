//! Ablation grids: each experiment is a list of model variants trained and
//! scored on the same dataset.

use serde::{Deserialize, Serialize};

use crate::data::{Segment, Split, Vocabulary};
use crate::decoder::{Attention, DmaVariant, GenerateOptions, Modality};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSummary};
use crate::fusion::FusionMode;
use crate::model::{CaptionModel, ModelConfig, PreparedSegment};
use crate::training::{EpochMetrics, TrainConfig, Trainer, ValidationSet};
use crate::util::config_hash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    FusionAblation,
    AmmtAblation,
    DmaVariant,
    TauSweep,
    CvsSweep,
}

impl std::str::FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fusion-ablation" => ExperimentId::FusionAblation,
            "ammt-ablation" => ExperimentId::AmmtAblation,
            "dma-variant" => ExperimentId::DmaVariant,
            "tau-sweep" => ExperimentId::TauSweep,
            "cvs-sweep" => ExperimentId::CvsSweep,
            other => return Err(Error::Config(format!("unknown experiment `{other}`"))),
        })
    }
}

pub const TAU_GRID: [f64; 6] = [1.0, 0.5, 0.1, 0.05, 0.01, 0.001];
pub const CVS_GRID: [f64; 5] = [1.0, 1.25, 1.5, 1.75, 2.0];

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub label: String,
    pub config: ModelConfig,
}

fn cell(label: impl Into<String>, base: &ModelConfig, edit: impl FnOnce(&mut ModelConfig)) -> Cell {
    let mut config = base.clone();
    edit(&mut config);
    Cell {
        label: label.into(),
        config,
    }
}

/// The grid for `id`, derived from `base` (which supplies dimensions and defaults).
pub fn cells(id: ExperimentId, base: &ModelConfig) -> Vec<Cell> {
    use FusionMode::*;
    let full = |c: &mut ModelConfig| {
        c.fusion = LinearOnS;
        c.attention = Attention::Dynamic;
    };
    match id {
        ExperimentId::FusionAblation => vec![
            cell("(i) vision", base, |c| {
                c.fusion = Concat;
                c.attention = Attention::Fixed(Modality::V);
            }),
            cell("(ii) vision+sensor", base, |c| {
                c.fusion = Concat;
                c.attention = Attention::Fixed(Modality::VS);
            }),
            cell("(iii) asymmetric fusion", base, |c| {
                c.fusion = LinearOnS;
                c.attention = Attention::Fixed(Modality::VS);
            }),
            cell("(iv) dynamic attention", base, |c| {
                c.fusion = Concat;
                c.attention = Attention::Dynamic;
            }),
            cell("(v) full", base, full),
        ],
        ExperimentId::AmmtAblation => [Concat, Symmetric, LinearOnV, LinearOnS]
            .into_iter()
            .map(|m| {
                cell(m.name(), base, |c| {
                    c.fusion = m;
                    c.attention = Attention::Dynamic;
                })
            })
            .collect(),
        ExperimentId::DmaVariant => [DmaVariant::Softmax, DmaVariant::StGumbel, DmaVariant::Gumbel]
            .into_iter()
            .map(|v| {
                cell(v.name(), base, |c| {
                    full(c);
                    c.dma.variant = v;
                })
            })
            .collect(),
        ExperimentId::TauSweep => TAU_GRID
            .iter()
            .map(|&tau| {
                cell(format!("tau={tau}"), base, |c| {
                    full(c);
                    c.dma.tau = tau;
                })
            })
            .collect(),
        ExperimentId::CvsSweep => CVS_GRID
            .iter()
            .map(|&cvs| {
                cell(format!("c_vs={cvs}"), base, |c| {
                    full(c);
                    c.dma.c[Modality::VS.index()] = cvs;
                })
            })
            .collect(),
    }
}

/// A dataset split into prepared train/val/test parts with references.
pub struct SplitData {
    pub train: Vec<PreparedSegment>,
    pub val: Vec<PreparedSegment>,
    pub val_refs: Vec<String>,
    pub test: Vec<PreparedSegment>,
    pub test_refs: Vec<String>,
}

pub fn build_vocab(dataset: &[Segment]) -> Result<Vocabulary> {
    let caps: Vec<&str> = dataset
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| s.caption.as_str())
        .collect();
    Vocabulary::build(&caps, 1)
}

pub fn prepare_splits(model: &CaptionModel, dataset: &[Segment]) -> Result<SplitData> {
    let mut out = SplitData {
        train: Vec::new(),
        val: Vec::new(),
        val_refs: Vec::new(),
        test: Vec::new(),
        test_refs: Vec::new(),
    };
    for seg in dataset {
        let p = model.prepare(seg)?;
        match seg.split {
            Split::Train => out.train.push(p),
            Split::Val => {
                out.val.push(p);
                out.val_refs.push(seg.caption.clone());
            }
            Split::Test => {
                out.test.push(p);
                out.test_refs.push(seg.caption.clone());
            }
        }
    }
    if out.train.is_empty() {
        return Err(Error::Data("dataset has no training segments".into()));
    }
    Ok(out)
}

/// Train one model on the train split with validation-based early stopping.
pub fn train_on(
    config: ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &[Segment],
    on_epoch: impl FnMut(&EpochMetrics, &Trainer) -> Result<()>,
) -> Result<(Trainer, SplitData)> {
    let vocab = build_vocab(dataset)?;
    let model = CaptionModel::new(config, vocab, train_cfg.seed)?;
    let splits = prepare_splits(&model, dataset)?;
    let mut trainer = Trainer::new(model, train_cfg.clone())?;
    let val = (splits.val.len() >= 2).then(|| ValidationSet {
        segments: &splits.val,
        references: &splits.val_refs,
    });
    trainer.fit(&splits.train, val.as_ref(), on_epoch)?;
    Ok((trainer, splits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub label: String,
    pub config_hash: String,
    /// Mean over seeds.
    pub mean: EvalSummary,
    pub per_seed: Vec<EvalSummary>,
}

impl ExperimentRow {
    pub fn median_verb_accuracy(&self) -> f64 {
        median(self.per_seed.iter().map(|s| s.verb_accuracy).collect())
    }

    pub fn median_cider_d(&self) -> f64 {
        median(self.per_seed.iter().map(|s| s.cider_d).collect())
    }
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub id: ExperimentId,
    pub seeds: Vec<u64>,
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentReport {
    pub fn row(&self, label_prefix: &str) -> Option<&ExperimentRow> {
        self.rows.iter().find(|r| r.label.starts_with(label_prefix))
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<26}{:>7}{:>7}{:>7}{:>7}{:>7}{:>9}{:>8}\n",
            "cell", "B-1", "B-2", "B-3", "B-4", "B-5", "CIDEr-D", "verb%"
        );
        for r in &self.rows {
            let s = &r.mean;
            out.push_str(&format!(
                "{:<26}{:>7.1}{:>7.1}{:>7.1}{:>7.1}{:>7.1}{:>9.1}{:>8.1}\n",
                r.label, s.bleu[0], s.bleu[1], s.bleu[2], s.bleu[3], s.bleu[4], s.cider_d, s.verb_accuracy
            ));
        }
        out
    }
}

fn mean_summary(xs: &[EvalSummary]) -> EvalSummary {
    let n = xs.len() as f64;
    let mut bleu = [0.0; 5];
    for (k, b) in bleu.iter_mut().enumerate() {
        *b = xs.iter().map(|s| s.bleu[k]).sum::<f64>() / n;
    }
    EvalSummary {
        bleu,
        cider_d: xs.iter().map(|s| s.cider_d).sum::<f64>() / n,
        verb_accuracy: xs.iter().map(|s| s.verb_accuracy).sum::<f64>() / n,
    }
}

/// Train every cell once per seed and score it on the test split.
pub fn run_experiment(
    id: ExperimentId,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &[Segment],
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64, &EvalSummary),
) -> Result<ExperimentReport> {
    if seeds.is_empty() {
        return Err(Error::Config("experiment needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for cell in cells(id, base) {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            let (trainer, splits) = train_on(cell.config.clone(), &cfg, dataset, |_, _| Ok(()))?;
            if splits.test.is_empty() {
                return Err(Error::Data("dataset has no test segments".into()));
            }
            let summary = evaluate(&trainer.model, &splits.test, &splits.test_refs, &GenerateOptions::default())?.summary;
            progress(&cell.label, seed, &summary);
            per_seed.push(summary);
        }
        rows.push(ExperimentRow {
            config_hash: config_hash(&(&cell.config, train_cfg)),
            label: cell.label,
            mean: mean_summary(&per_seed),
            per_seed,
        });
    }
    Ok(ExperimentReport {
        id,
        seeds: seeds.to_vec(),
        rows,
    })
}

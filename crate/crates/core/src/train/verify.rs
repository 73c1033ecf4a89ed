//! Finite-difference check of the full training objective for every loss
//! configuration.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::pipeline::{anchor_view, augmented_view, forward_loss};
use crate::error::Result;
use crate::losses::{LossConfig, Variant};
use crate::model::ModelParams;
use crate::rng;
use crate::synth::{Augmentation, Corpus, QAItem, SceneGraph, Split};
use crate::tensor::{finite_diff_check, GradCheckRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveCheck {
    pub variant: Variant,
    pub link_reg: bool,
    /// False when the configuration is rejected by validation, as the
    /// baseline with link regularization is.
    pub valid: bool,
    pub max_rel_err: f64,
    pub worst: Option<GradCheckRecord>,
    pub records: Vec<GradCheckRecord>,
}

/// The eight variant × link-regularization configurations.
pub fn objective_configs() -> Vec<LossConfig> {
    Variant::ALL.iter().flat_map(|&v| [false, true].map(|link| LossConfig { link_reg: link, ..LossConfig::variant(v) })).collect()
}

/// The first `n` training items with an anchor and a mildly jittered view.
pub fn check_batch(corpus: &Corpus, n: usize, seed: u64) -> Result<(Vec<QAItem>, Vec<SceneGraph>, Vec<SceneGraph>)> {
    let realizer = corpus.config.realizer()?;
    let augs = [Augmentation::MILD_JITTER];
    let items: Vec<QAItem> = corpus.items(Split::Train).iter().take(n).cloned().collect();
    let anchors = items.iter().map(|q| anchor_view(&realizer, corpus.scene(q.scene_id), seed, 0, q.id)).collect::<Result<_>>()?;
    let aug =
        items.iter().map(|q| augmented_view(&realizer, corpus.scene(q.scene_id), &augs, seed, 0, q.id)).collect::<Result<_>>()?;
    Ok((items, anchors, aug))
}

/// Redraws every parameter uniformly in ±`bound`. At the default init the
/// gradients reaching early layers through five attention steps sit near
/// the round-off of a central difference.
pub fn spread_params(params: &mut ModelParams, bound: f64, seed: u64) {
    let mut r = rng::stream(seed, "spread", 0);
    let ids: Vec<_> = params.store.ids().collect();
    for id in ids {
        for v in params.store.get_mut(id).data_mut() {
            *v = r.gen_range(-bound..bound);
        }
    }
}

/// Checks the total loss of every configuration on one fixed batch.
pub fn check_objectives(
    params: &ModelParams,
    items: &[QAItem],
    anchors: &[SceneGraph],
    augmented: &[SceneGraph],
    eps: f64,
) -> Result<Vec<ObjectiveCheck>> {
    let refs: Vec<&QAItem> = items.iter().collect();
    objective_configs()
        .into_iter()
        .map(|cfg| {
            if cfg.validate().is_err() {
                return Ok(ObjectiveCheck {
                    variant: cfg.variant,
                    link_reg: cfg.link_reg,
                    valid: false,
                    max_rel_err: 0.0,
                    worst: None,
                    records: Vec::new(),
                });
            }
            let report = finite_diff_check(&params.store, None, eps, |store, tape| {
                let dropout = rng::stream(0, "dropout", 0);
                Ok(forward_loss(tape, store, &params.net, &cfg, &refs, anchors, Some(augmented), dropout)?.0.total)
            })?;
            Ok(ObjectiveCheck {
                variant: cfg.variant,
                link_reg: cfg.link_reg,
                valid: true,
                max_rel_err: report.max_rel_err(),
                worst: report.worst().cloned(),
                records: report.records,
            })
        })
        .collect()
}

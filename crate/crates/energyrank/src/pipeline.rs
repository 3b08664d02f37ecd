//! End-to-end glue: featurize raw requests, encode intents through the
//! frozen autoencoder, train/evaluate the ranker, and persist the whole
//! bundle as one checkpoint.

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::dataset::RequestRecord;
use crate::error::{Error, Result};
use crate::evaluator::{bucketize, error_rate, robustness, EvalReport};
use crate::featurizer::{
    encode_info_state, encode_intent, AttrVocab, FeaturizerSalts, MultiHotTriple, NUM_ATTRIBUTES,
};
use crate::msdae::{encode_frozen, pretrain, Msdae, PretrainConfig, NUM_SOURCES};
use crate::ranker::RankerParams;
use crate::trainer::{fit, score_requests, EncodedRequest, FitReport, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// The trained artifact: featurizer configuration, frozen autoencoder, and
/// ranker parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub salts: FeaturizerSalts,
    pub vocab: AttrVocab,
    pub msdae: Msdae<f32>,
    pub ranker: RankerParams<f32>,
}

pub fn featurize_intents(records: &[RequestRecord], salts: FeaturizerSalts) -> Result<Vec<MultiHotTriple>> {
    let mut out = Vec::new();
    for r in records {
        for c in &r.intents {
            out.push(encode_intent(c, salts)?);
        }
    }
    Ok(out)
}

/// Featurize and DAE-encode a record set for ranker training/evaluation.
pub fn encode_requests(
    msdae: &Msdae<f32>,
    vocab: &AttrVocab,
    salts: FeaturizerSalts,
    records: &[RequestRecord],
) -> Result<Vec<EncodedRequest>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let triples: Vec<MultiHotTriple> = r
            .intents
            .iter()
            .map(|c| encode_intent(c, salts))
            .collect::<Result<_>>()?;
        let refs: Vec<&MultiHotTriple> = triples.iter().collect();
        let reps = encode_frozen(msdae, &refs)?;
        out.push(EncodedRequest {
            intent_reps: reps,
            state_indices: encode_info_state(&r.info_state, vocab)?,
            relevances: r.relevances(),
            gold: r.gold_index()?,
        });
    }
    Ok(out)
}

/// Pretrain the autoencoder and train the ranker from scratch on labeled
/// splits. Returns the pipeline, the pretraining loss curve, and the
/// training report.
pub fn train_pipeline(
    train: &[RequestRecord],
    valid: &[RequestRecord],
    salts: FeaturizerSalts,
    pre_cfg: &PretrainConfig,
    cfg: &TrainConfig,
) -> Result<(Pipeline, Vec<f64>, FitReport)> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::validation("train_pipeline: empty split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut msdae = Msdae::<f32>::init(&mut rng)?;
    let triples = featurize_intents(train, salts)?;
    let curve = pretrain(&mut msdae, &triples, pre_cfg)?;
    let (pipe, report) = train_ranker_stage(msdae, train, valid, salts, cfg)?;
    Ok((pipe, curve, report))
}

/// Ranker training on top of an already-pretrained (frozen) autoencoder.
pub fn train_ranker_stage(
    msdae: Msdae<f32>,
    train: &[RequestRecord],
    valid: &[RequestRecord],
    salts: FeaturizerSalts,
    cfg: &TrainConfig,
) -> Result<(Pipeline, FitReport)> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::validation("train_ranker_stage: empty split"));
    }
    let vocab = AttrVocab::build(train.iter().map(|r| &r.info_state));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_6e6b);
    let table_rows: Vec<usize> = (0..NUM_ATTRIBUTES).map(|a| vocab.table_rows(a)).collect();
    let mut ranker = RankerParams::<f32>::init(&table_rows, &mut rng)?;
    let enc_train = encode_requests(&msdae, &vocab, salts, train)?;
    let enc_valid = encode_requests(&msdae, &vocab, salts, valid)?;
    let report = fit(&mut ranker, &enc_train, &enc_valid, cfg)?;
    Ok((
        Pipeline {
            salts,
            vocab,
            msdae,
            ranker,
        },
        report,
    ))
}

impl Pipeline {
    /// Error rate of the trained pipeline on a labeled set.
    pub fn evaluate(&self, records: &[RequestRecord]) -> Result<EvalReport> {
        let enc = encode_requests(&self.msdae, &self.vocab, self.salts, records)?;
        let refs: Vec<&EncodedRequest> = enc.iter().collect();
        let scores = score_requests(&self.ranker, &refs)?;
        let preds: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
        let gold: Vec<usize> = enc.iter().map(|r| r.gold).collect();
        Ok(EvalReport {
            error_rate: error_rate(&preds, &gold)?,
            n_requests: records.len(),
        })
    }

    /// Score of the model's top predicted intent, one per request.
    pub fn top_scores(&self, records: &[RequestRecord]) -> Result<Vec<f64>> {
        let enc = encode_requests(&self.msdae, &self.vocab, self.salts, records)?;
        let refs: Vec<&EncodedRequest> = enc.iter().collect();
        let scores = score_requests(&self.ranker, &refs)?;
        Ok(scores
            .iter()
            .map(|s| s.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect())
    }

    /// Robustness M between the top-score distributions on two unlabeled
    /// sets drawn from distributions P and Q.
    pub fn robustness_run(&self, p: &[RequestRecord], q: &[RequestRecord]) -> Result<f64> {
        let pdf_p = bucketize(&self.top_scores(p)?)?;
        let pdf_q = bucketize(&self.top_scores(q)?)?;
        robustness(&pdf_p, &pdf_q)
    }

    pub fn to_checkpoint(&self, mut meta: CheckpointMeta) -> Checkpoint {
        meta.kind = "ranker".to_string();
        meta.salts = self.salts;
        meta.vocab = self.vocab.tables.clone();
        meta.bn_stats = self
            .msdae
            .bn_states
            .iter()
            .map(|bn| (bn.running_mean.clone(), bn.running_var.clone()))
            .collect();
        let mut named: Vec<(String, &crate::autodiff::Tensor<f32>)> = self.msdae.named_params();
        named.extend(self.ranker.named_params());
        Checkpoint::from_named(meta, &named)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.kind != "ranker" {
            return Err(Error::Format(format!(
                "checkpoint kind {:?}, expected \"ranker\"",
                ck.meta.kind
            )));
        }
        if ck.meta.vocab.len() != NUM_ATTRIBUTES {
            return Err(Error::Format(format!(
                "checkpoint has {} vocab tables, expected {NUM_ATTRIBUTES}",
                ck.meta.vocab.len()
            )));
        }
        let vocab = AttrVocab {
            tables: ck.meta.vocab.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut msdae = Msdae::<f32>::init(&mut rng)?;
        let table_rows: Vec<usize> = (0..NUM_ATTRIBUTES).map(|a| vocab.table_rows(a)).collect();
        let mut ranker = RankerParams::<f32>::init(&table_rows, &mut rng)?;
        let names: Vec<String> = msdae
            .named_params()
            .iter()
            .map(|(n, _)| n.clone())
            .chain(ranker.named_params().iter().map(|(n, _)| n.clone()))
            .collect();
        let mut targets = msdae.named_params_mut();
        targets.extend(ranker.named_params_mut());
        ck.restore(&names, &mut targets)?;
        if ck.meta.bn_stats.len() != NUM_SOURCES {
            return Err(Error::Format(format!(
                "checkpoint has {} batch-norm states, expected {NUM_SOURCES}",
                ck.meta.bn_stats.len()
            )));
        }
        for (s, (mean, var)) in ck.meta.bn_stats.iter().enumerate() {
            msdae.bn_states[s].running_mean = mean.clone();
            msdae.bn_states[s].running_var = var.clone();
        }
        Ok(Pipeline {
            salts: ck.meta.salts,
            vocab,
            msdae,
            ranker,
        })
    }

    /// Reject checkpoints produced under different featurizer salts.
    pub fn check_compatibility(&self, salts: FeaturizerSalts) -> Result<()> {
        if self.salts != salts {
            return Err(Error::Compatibility(format!(
                "checkpoint salts {:?} differ from configured {:?}",
                self.salts, salts
            )));
        }
        Ok(())
    }
}


/// Persist a pretrained autoencoder on its own (kind "msdae").
pub fn msdae_to_checkpoint(msdae: &Msdae<f32>, salts: FeaturizerSalts, mut meta: CheckpointMeta) -> Checkpoint {
    meta.kind = "msdae".to_string();
    meta.salts = salts;
    meta.bn_stats = msdae
        .bn_states
        .iter()
        .map(|bn| (bn.running_mean.clone(), bn.running_var.clone()))
        .collect();
    Checkpoint::from_named(meta, &msdae.named_params())
}

pub fn msdae_from_checkpoint(ck: &Checkpoint) -> Result<Msdae<f32>> {
    if ck.meta.kind != "msdae" {
        return Err(Error::Format(format!(
            "checkpoint kind {:?}, expected \"msdae\"",
            ck.meta.kind
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut msdae = Msdae::<f32>::init(&mut rng)?;
    let names: Vec<String> = msdae.named_params().iter().map(|(n, _)| n.clone()).collect();
    ck.restore(&names, &mut msdae.named_params_mut())?;
    if ck.meta.bn_stats.len() != NUM_SOURCES {
        return Err(Error::Format("missing batch-norm statistics".to_string()));
    }
    for (s, (mean, var)) in ck.meta.bn_stats.iter().enumerate() {
        msdae.bn_states[s].running_mean = mean.clone();
        msdae.bn_states[s].running_var = var.clone();
    }
    Ok(msdae)
}

pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn empty_meta() -> CheckpointMeta {
    CheckpointMeta {
        kind: String::new(),
        salts: FeaturizerSalts::default(),
        config_hash: 0,
        seed: 0,
        epoch: 0,
        metrics: BTreeMap::new(),
        vocab: Vec::new(),
        bn_stats: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_labeled, GenConfig};
    use crate::trainer::LossParadigm;

    fn tiny_splits() -> (Vec<RequestRecord>, Vec<RequestRecord>, Vec<RequestRecord>) {
        let cfg = GenConfig {
            seed: 77,
            ..Default::default()
        };
        let s = gen_labeled(&cfg, 0.004).unwrap();
        (s.train, s.validation, s.test)
    }

    fn tiny_pipeline(loss: LossParadigm) -> (Pipeline, FitReport, Vec<RequestRecord>) {
        let (train, valid, test) = tiny_splits();
        let pre = PretrainConfig {
            epochs: 2,
            seed: 1,
            ..Default::default()
        };
        let cfg = TrainConfig {
            max_epochs: 3,
            seed: 1,
            loss,
            ..Default::default()
        };
        let (p, curve, report) =
            train_pipeline(&train, &valid, FeaturizerSalts::default(), &pre, &cfg).unwrap();
        assert_eq!(curve.len(), 2);
        (p, report, test)
    }

    #[test]
    fn pipeline_trains_and_evaluates() {
        let (p, report, test) = tiny_pipeline(LossParadigm::Pairwise);
        assert!(!report.metrics.is_empty());
        let eval = p.evaluate(&test).unwrap();
        assert!(eval.error_rate >= 0.0 && eval.error_rate <= 1.0);
        assert_eq!(eval.n_requests, test.len());
    }

    #[test]
    fn listwise_path_runs() {
        let (p, report, test) = tiny_pipeline(LossParadigm::Listwise);
        assert!(report.metrics.iter().all(|m| m.train_loss.is_finite()));
        p.evaluate(&test[..10.min(test.len())].to_vec()).unwrap();
    }

    #[test]
    fn checkpoint_round_trip_preserves_pipeline() {
        let (p, _, test) = tiny_pipeline(LossParadigm::Pairwise);
        let ck = p.to_checkpoint(empty_meta());
        let mut bytes = Vec::new();
        ck.save(&mut bytes).unwrap();
        let back = Pipeline::from_checkpoint(&Checkpoint::load(bytes.as_slice()).unwrap()).unwrap();
        // restored pipeline reproduces scores bit for bit
        let a = p.top_scores(&test[..5]).unwrap();
        let b = back.top_scores(&test[..5]).unwrap();
        assert_eq!(a, b);
        // and the file round-trips byte-identically
        let mut bytes2 = Vec::new();
        back.to_checkpoint(ck.meta.clone()).save(&mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn compatibility_check_rejects_salt_mismatch() {
        let (p, _, _) = tiny_pipeline(LossParadigm::Pairwise);
        assert!(p.check_compatibility(p.salts).is_ok());
        let other = FeaturizerSalts {
            token_salt: 1,
            ..p.salts
        };
        assert!(matches!(
            p.check_compatibility(other),
            Err(Error::Compatibility(_))
        ));
    }

    #[test]
    fn constant_model_robustness_zero() {
        // zeroed ranker maps everything to the same point: all scores 0.5
        let (mut p, _, test) = tiny_pipeline(LossParadigm::Pairwise);
        for t in p.ranker.named_params_mut() {
            for x in t.data.iter_mut() {
                *x = 0.0;
            }
        }
        let m = p
            .robustness_run(&test[..30.min(test.len())], &test[..30.min(test.len())])
            .unwrap();
        assert!(m.abs() < 1e-9, "M = {m}");
    }
}

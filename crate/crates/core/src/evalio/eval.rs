use rayon::prelude::*;

use crate::corpus::{Domain, DomainSplit, Example, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::evalio::{MetricKind, MetricsRecord, Stage};
use crate::model::SlmModel;

/// Per-domain held-out sets.
#[derive(Clone, Debug)]
pub struct EvalSuite {
    pub by_domain: Vec<Vec<Example>>,
}

impl EvalSuite {
    pub fn new(heldout: &DomainSplit) -> Result<Self> {
        if heldout.by_domain.len() != Domain::ALL.len() || heldout.by_domain.iter().any(Vec::is_empty) {
            return Err(Error::Input("evaluation needs examples for every domain".into()));
        }
        Ok(Self {
            by_domain: heldout.by_domain.clone(),
        })
    }
}

/// Token-weighted metrics for each domain, in [`Domain::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: Vec<f64>,
    pub accuracy: Vec<f64>,
}

impl Evaluation {
    pub fn perplexity(&self) -> Vec<f64> {
        self.loss.iter().map(|l| l.exp()).collect()
    }

    pub fn values(&self, kind: MetricKind) -> Vec<f64> {
        match kind {
            MetricKind::Loss => self.loss.clone(),
            MetricKind::Perplexity => self.perplexity(),
            MetricKind::Accuracy => self.accuracy.clone(),
        }
    }

    pub fn average(&self, kind: MetricKind) -> f64 {
        let v = self.values(kind);
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// One record per metric kind.
    pub fn records(&self, round: usize, subject: &str, stage: Stage) -> Vec<MetricsRecord> {
        MetricKind::ALL
            .iter()
            .map(|&kind| MetricsRecord::new(round, subject, stage, kind, self.values(kind)))
            .collect()
    }
}

/// (summed negative log-likelihood, correct argmax predictions, scored tokens)
fn score_example(model: &SlmModel, e: &Example) -> Result<(f64, usize, usize)> {
    let logits = model.logits(e.inputs())?;
    let mut nll = 0.0;
    let mut correct = 0;
    let mut n = 0;
    for (pos, target) in e.targets().into_iter().enumerate() {
        let Some(t) = target else { continue };
        let row = logits.row(pos);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        nll += lse - row[t] as f64;
        // First maximum wins ties.
        let argmax = row
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
        correct += usize::from(argmax == t);
        n += 1;
    }
    Ok((nll, correct, n))
}

/// Cross-entropy and next-token accuracy over the scored tokens of every
/// held-out domain. Read-only; examples run in parallel and are reduced in
/// order, so results do not depend on the worker count.
pub fn evaluate(model: &SlmModel, suite: &EvalSuite) -> Result<Evaluation> {
    if model.config.vocab_size != VOCAB_SIZE {
        return Err(Error::Input(format!(
            "model vocabulary {} does not match the corpus encoding ({VOCAB_SIZE})",
            model.config.vocab_size
        )));
    }
    let mut loss = Vec::with_capacity(suite.by_domain.len());
    let mut accuracy = Vec::with_capacity(suite.by_domain.len());
    for examples in &suite.by_domain {
        let scored: Vec<(f64, usize, usize)> = examples
            .par_iter()
            .map(|e| score_example(model, e))
            .collect::<Result<_>>()?;
        let (nll, correct, n) = scored
            .into_iter()
            .fold((0.0, 0, 0), |(a, b, c), (x, y, z)| (a + x, b + y, c + z));
        if n == 0 {
            return Err(Error::Input("held-out domain has no scored tokens".into()));
        }
        loss.push(nll / n as f64);
        accuracy.push(correct as f64 / n as f64);
    }
    if loss.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("non-finite evaluation loss".into()));
    }
    Ok(Evaluation { loss, accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, CorpusSpec};
    use crate::math::{Matrix, Rng};
    use crate::model::{train_step, Adam, AdamConfig, ModelConfig, Trainable};

    fn suite() -> EvalSuite {
        let spec = CorpusSpec {
            pretrain_per_domain: 4,
            finetune_per_domain: 4,
            heldout_per_domain: 4,
            reference_per_domain: 4,
        };
        EvalSuite::new(&Corpus::generate(&spec, &Rng::new(0)).unwrap().heldout).unwrap()
    }

    #[test]
    fn uniform_logits_give_vocabulary_perplexity() {
        let mut m = SlmModel::new(ModelConfig::default(), &Rng::new(1)).unwrap();
        m.base.head = Matrix::zeros(64, 32);
        let ev = evaluate(&m, &suite()).unwrap();
        for p in ev.perplexity() {
            assert!((p - 64.0).abs() < 1e-3, "{p}");
        }
    }

    #[test]
    fn evaluation_is_pure_and_repeatable() {
        let m = SlmModel::new(ModelConfig::default(), &Rng::new(2)).unwrap();
        let before = m.base.digest();
        let s = suite();
        let a = evaluate(&m, &s).unwrap();
        assert_eq!(a, evaluate(&m, &s).unwrap());
        assert_eq!(m.base.digest(), before);
        let mean = a.loss.iter().sum::<f64>() / 8.0;
        assert!((a.average(MetricKind::Loss) - mean).abs() < 1e-9);
    }

    #[test]
    fn memorized_batch_is_predicted_exactly() {
        let mut m = SlmModel::new(ModelConfig::default(), &Rng::new(3)).unwrap();
        let batch = vec![Example::new(Domain::Reverse, "ab", "ba").unwrap()];
        let mut opt = Adam::new(AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        });
        for _ in 0..200 {
            train_step(&mut m, &batch, &mut opt, Trainable::Base).unwrap();
        }
        let mut by_domain = vec![batch.clone(); 8];
        by_domain[0] = batch;
        let ev = evaluate(&m, &EvalSuite { by_domain }).unwrap();
        assert!(ev.accuracy.iter().all(|&a| a == 1.0), "{:?}", ev.accuracy);
    }

    #[test]
    fn vocabulary_mismatch_is_an_input_error() {
        let cfg = ModelConfig {
            vocab_size: 65,
            ..ModelConfig::default()
        };
        let m = SlmModel::new(cfg, &Rng::new(4)).unwrap();
        assert!(matches!(evaluate(&m, &suite()), Err(Error::Input(_))));
    }
}

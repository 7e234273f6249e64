use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::math::{Matrix, Scalar, Tape, Var};
use crate::model::{AdapterMatrix, LoraTarget, ParamKey, Projection, SlmModel};

/// Which leaves receive gradients when a model is bound to a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    /// Every base parameter; adapters stay frozen.
    Base,
    /// Adapter matrices only; the base is frozen.
    Adapter,
}

impl Trainable {
    fn includes(self, key: &ParamKey) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Base => !key.is_adapter(),
            Trainable::Adapter => key.is_adapter(),
        }
    }
}

/// Tape handles for every parameter of a model.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<ParamKey, Var>,
}

impl Bound {
    pub fn bind<T: Scalar>(model: &SlmModel, tape: &mut Tape<T>, trainable: Trainable) -> Self {
        let vars = model
            .parameters()
            .into_iter()
            .map(|(k, m)| (k, tape.leaf(m.cast::<T>(), trainable.includes(&k))))
            .collect();
        Self { vars }
    }

    /// Pairs keys with vars that already live on a tape, in the same order as
    /// [`SlmModel::parameters`].
    pub fn from_parts(keys: impl IntoIterator<Item = ParamKey>, vars: &[Var]) -> Self {
        Self {
            vars: keys.into_iter().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn var(&self, key: ParamKey) -> Result<Var> {
        self.vars
            .get(&key)
            .copied()
            .ok_or_else(|| Error::Shape(format!("parameter {key} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Var)> {
        self.vars.iter()
    }
}

/// Output of one forward pass over a sequence.
pub struct ForwardPass {
    /// `seq_len x vocab`
    pub logits: Var,
    /// Input activations feeding each projection, keyed by (block, projection).
    pub proj_inputs: Vec<((usize, Projection), Var)>,
}

/// Linear projection `x·Wᵀ`, plus `scale·(x·Aᵀ)·Bᵀ` when an adapter is attached.
pub fn projection<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, lora: Option<(Var, Var)>, scale: T) -> Result<Var> {
    let y = tape.matmul_bt(x, w)?;
    match lora {
        None => Ok(y),
        Some((a, b)) => {
            let xa = tape.matmul_bt(x, a)?;
            let xab = tape.matmul_bt(xa, b)?;
            let scaled = tape.scale(xab, scale);
            tape.add(y, scaled)
        }
    }
}

impl SlmModel {
    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Builds the causal forward graph on `tape` using the bound parameters.
    pub fn forward_graph<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, tokens: &[usize]) -> Result<ForwardPass> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = tape.embedding(bound.var(ParamKey::TokenEmbedding)?, tokens)?;
        let pos = tape.embedding(bound.var(ParamKey::PositionEmbedding)?, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let scale = T::from_f64(self.adapter.scale as f64);
        let head_dim = cfg.head_dim();
        let attn_scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
        let mut proj_inputs = Vec::new();

        for (i, block) in self.base.blocks.iter().enumerate() {
            let lora_for = |p: Projection| -> Result<Option<(Var, Var)>> {
                let t = LoraTarget {
                    layer: block.source_index,
                    proj: p,
                };
                if self.adapter.get(&t).is_none() {
                    return Ok(None);
                }
                Ok(Some((
                    bound.var(ParamKey::Lora(t, AdapterMatrix::A))?,
                    bound.var(ParamKey::Lora(t, AdapterMatrix::B))?,
                )))
            };

            let h = tape.rms_norm(x, bound.var(ParamKey::AttnNorm(i))?)?;
            let mut qkv = Vec::with_capacity(3);
            for p in [Projection::Q, Projection::K, Projection::V] {
                proj_inputs.push(((i, p), h));
                qkv.push(projection(
                    tape,
                    h,
                    bound.var(ParamKey::Weight(i, p))?,
                    lora_for(p)?,
                    scale,
                )?);
            }
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let off = hd * head_dim;
                let q = tape.slice_cols(qkv[0], off, head_dim)?;
                let k = tape.slice_cols(qkv[1], off, head_dim)?;
                let v = tape.slice_cols(qkv[2], off, head_dim)?;
                let scores = tape.matmul_bt(q, k)?;
                let scores = tape.scale(scores, attn_scale);
                let probs = tape.softmax(scores, true)?;
                heads.push(tape.matmul(probs, v)?);
            }
            let attn = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)?
            };
            proj_inputs.push(((i, Projection::O), attn));
            let o = projection(
                tape,
                attn,
                bound.var(ParamKey::Weight(i, Projection::O))?,
                lora_for(Projection::O)?,
                scale,
            )?;
            x = tape.add(x, o)?;

            let h2 = tape.rms_norm(x, bound.var(ParamKey::MlpNorm(i))?)?;
            proj_inputs.push(((i, Projection::Up), h2));
            let up = projection(
                tape,
                h2,
                bound.var(ParamKey::Weight(i, Projection::Up))?,
                lora_for(Projection::Up)?,
                scale,
            )?;
            let act = tape.gelu(up);
            proj_inputs.push(((i, Projection::Down), act));
            let down = projection(
                tape,
                act,
                bound.var(ParamKey::Weight(i, Projection::Down))?,
                lora_for(Projection::Down)?,
                scale,
            )?;
            x = tape.add(x, down)?;
        }

        let hf = tape.rms_norm(x, bound.var(ParamKey::FinalNorm)?)?;
        let logits = tape.matmul_bt(hf, bound.var(ParamKey::Head)?)?;
        Ok(ForwardPass { logits, proj_inputs })
    }

    /// Next-token logits for every position, `seq_len x vocab`.
    pub fn logits(&self, tokens: &[usize]) -> Result<Matrix> {
        let mut tape = Tape::<f32>::new();
        let bound = Bound::bind(self, &mut tape, Trainable::Nothing);
        let fwd = self.forward_graph(&mut tape, &bound, tokens)?;
        Ok(tape.value(fwd.logits).clone())
    }

    fn example_grads(
        &self,
        example: &Example,
        normalizer: f64,
        trainable: Trainable,
    ) -> Result<(f64, Vec<(ParamKey, Matrix)>)> {
        let mut tape = Tape::<f32>::new();
        let bound = Bound::bind(self, &mut tape, trainable);
        let fwd = self.forward_graph(&mut tape, &bound, example.inputs())?;
        let loss = tape.cross_entropy(fwd.logits, &example.targets(), normalizer)?;
        let loss_value = tape.scalar(loss) as f64;
        let mut grads = tape.backward(loss)?;
        let out = bound
            .iter()
            .filter(|(k, _)| trainable.includes(k))
            .filter_map(|(k, v)| grads.take(*v).map(|g| (*k, g)))
            .collect();
        Ok((loss_value, out))
    }

    /// Mean cross-entropy over the scored tokens of a batch and its gradient
    /// with respect to the trainable parameters.
    ///
    /// Examples are processed independently and their gradients summed in
    /// batch order, so the result does not depend on the worker count.
    pub fn batch_gradients(
        &self,
        batch: &[Example],
        trainable: Trainable,
    ) -> Result<(f64, BTreeMap<ParamKey, Matrix>)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let total: usize = batch.iter().map(Example::scored_tokens).sum();
        if total == 0 {
            return Err(Error::Input("batch has no scored tokens".into()));
        }
        let per_example: Vec<(f64, Vec<(ParamKey, Matrix)>)> = batch
            .par_iter()
            .map(|e| self.example_grads(e, total as f64, trainable))
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        let mut grads: BTreeMap<ParamKey, Matrix> = BTreeMap::new();
        for (l, gs) in per_example {
            loss += l;
            for (k, g) in gs {
                match grads.get_mut(&k) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        grads.insert(k, g);
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite batch loss {loss}")));
        }
        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{grad_check, Rng, SparseMask};
    use crate::model::ModelConfig;

    fn small() -> SlmModel {
        let cfg = ModelConfig {
            vocab_size: 11,
            d_model: 6,
            n_heads: 2,
            n_layers: 1,
            max_seq_len: 8,
            mlp_hidden: 8,
            lora_rank: 2,
            lora_alpha: 2.0,
            lora_targets: vec![Projection::Q],
        };
        let mut m = SlmModel::new(cfg, &Rng::new(17)).unwrap();
        let mut rng = Rng::new(18);
        for p in m.adapter.pairs.values_mut() {
            p.b = Matrix::random_normal(p.b.rows(), p.b.cols(), 0.3, &mut rng);
        }
        m
    }

    #[test]
    fn hand_computed_lora_projection() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Matrix::row_vector(&[1.0, 1.0]), false);
        let w = t.leaf(Matrix::identity(2), false);
        let a = t.leaf(Matrix::row_vector(&[1.0, 0.0]), false);
        let b = t.leaf(Matrix::from_rows(&[&[0.0], &[2.0]]), false);
        let y = projection(&mut t, x, w, Some((a, b)), 1.0).unwrap();
        assert_eq!(t.value(y), &Matrix::row_vector(&[1.0, 3.0]));
    }

    #[test]
    fn zero_b_matches_base_model_exactly() {
        let m = SlmModel::new(ModelConfig::default(), &Rng::new(5)).unwrap();
        let mut plain = m.clone();
        plain.adapter.pairs.clear();
        let tokens = [3, 14, 15, 9, 2, 6];
        assert_eq!(m.logits(&tokens).unwrap(), plain.logits(&tokens).unwrap());
    }

    #[test]
    fn causal_prefix_is_independent_of_the_future() {
        let m = small();
        let a = m.logits(&[1, 2, 3, 4, 5]).unwrap();
        let b = m.logits(&[1, 9, 0, 7, 3]).unwrap();
        assert_eq!(a.row(0), b.row(0));
        let c = m.logits(&[1, 2, 3, 0, 0]).unwrap();
        for r in 0..3 {
            assert_eq!(a.row(r), c.row(r));
        }
    }

    #[test]
    fn rejects_bad_tokens() {
        let m = small();
        assert!(matches!(m.logits(&[1, 11]), Err(Error::Input(_))));
        assert!(matches!(m.logits(&[]), Err(Error::Input(_))));
        assert!(matches!(m.logits(&[0; 9]), Err(Error::Input(_))));
    }

    #[test]
    fn transformer_gradients_match_finite_differences() {
        let m = small();
        let keys: Vec<ParamKey> = m.parameters().into_iter().map(|(k, _)| k).collect();
        let params: Vec<Matrix<f64>> = m.parameters().into_iter().map(|(_, v)| v.cast()).collect();
        let tokens = [1usize, 4, 2, 8, 5, 3];
        let targets: Vec<Option<usize>> = vec![None, Some(2), Some(8), None, Some(3)];
        let err = grad_check(
            |tape, vars| {
                let bound = Bound::from_parts(keys.iter().copied(), vars);
                let fwd = m.forward_graph(tape, &bound, &tokens[..5])?;
                tape.cross_entropy(fwd.logits, &targets, 3.0)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn fine_tuning_leaves_base_gradients_empty() {
        let m = small();
        let e = Example {
            domain: crate::corpus::Domain::Copy,
            tokens: vec![1, 2, 3, 4, 5],
            response_start: 2,
        };
        let (_, grads) = m.batch_gradients(std::slice::from_ref(&e), Trainable::Adapter).unwrap();
        assert!(grads.keys().all(ParamKey::is_adapter));
        assert!(!grads.is_empty());
        let (_, grads) = m.batch_gradients(&[e], Trainable::Base).unwrap();
        assert!(grads.keys().all(|k| !k.is_adapter()));
    }

    #[test]
    fn zeroing_equals_masking() {
        let mut m = small();
        let (r, c) = m.base.blocks[0].weight(Projection::Up).shape();
        let mut rng = Rng::new(2);
        let bits = (0..r * c).map(|_| rng.bernoulli(0.5)).collect();
        let mask = SparseMask::from_bools(r, c, bits).unwrap();
        let mut by_hand = m.clone();
        for (i, v) in by_hand.base.blocks[0]
            .weight_mut(Projection::Up)
            .data_mut()
            .iter_mut()
            .enumerate()
        {
            if !mask.bits()[i] {
                *v = 0.0;
            }
        }
        m.apply_pruning([((0, Projection::Up), mask)].into_iter().collect())
            .unwrap();
        let tokens = [1, 2, 3];
        assert_eq!(m.logits(&tokens).unwrap(), by_hand.logits(&tokens).unwrap());
    }

    #[test]
    fn merged_forward_matches_adapter_forward() {
        let m = small();
        let tokens = [0, 5, 7, 1, 2, 10];
        let merged = m.merged().unwrap();
        let d = m
            .logits(&tokens)
            .unwrap()
            .max_abs_diff(&merged.logits(&tokens).unwrap());
        assert!(d < 1e-5, "{d}");
    }
}

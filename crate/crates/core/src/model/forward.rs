use std::collections::BTreeMap;

use super::{Activation, Model, ParamId, Proj};
use crate::error::{Error, Result};
use crate::neuron::{Family, NeuronId, NeuronMask, TapKey};
use crate::tape::{AttentionShape, Segment, Tape, Var};
use crate::tensor::{softmax_row, Tensor};

/// Replace one neuron's taped value at one prompt position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointOverride {
    pub neuron: NeuronId,
    pub position: usize,
    pub value: f64,
}

/// What to clamp during a forward pass: a mask (zero at every position) plus
/// optional point overrides. Point overrides only apply to single-sequence runs.
#[derive(Clone, Copy, Debug)]
pub struct Intervention<'a> {
    pub mask: &'a NeuronMask,
    pub points: &'a [PointOverride],
}

impl<'a> Intervention<'a> {
    pub fn mask(mask: &'a NeuronMask) -> Self {
        Self { mask, points: &[] }
    }
}

/// Result of one forward pass over a single sequence.
#[derive(Debug)]
pub struct ForwardRecord {
    /// Logits at the final position.
    pub logits: Tensor,
    /// The recorded graph; `None` for untraced runs.
    pub tape: Option<Tape>,
}

impl ForwardRecord {
    /// Taped `[positions × width]` values of one tap site.
    pub fn tap_values(&self, key: TapKey) -> Option<&Tensor> {
        let tape = self.tape.as_ref()?;
        tape.tap_var(key).map(|v| tape.value(v))
    }

    /// Number of taped scalars on the tape.
    pub fn taped_value_count(&self) -> usize {
        self.tape.as_ref().map_or(0, |t| {
            t.taps().map(|(_, v)| t.value(v).len()).sum()
        })
    }
}

/// A built computation graph over a batch of sequences.
pub(crate) struct Graph {
    pub tape: Tape,
    /// `[batch × vocab]` logits at each sequence's final position.
    pub logits: Var,
    pub params: BTreeMap<ParamId, Var>,
}

impl Model {
    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        if tokens.len() > cfg.max_seq_len {
            return Err(Error::Sequence {
                len: tokens.len(),
                max: cfg.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Vocabulary {
                token: t,
                vocab: cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Builds the graph for a batch. `trainable` decides which weights become
    /// differentiable variables; the rest enter the tape as constants.
    pub(crate) fn build_graph(
        &self,
        seqs: &[&[usize]],
        iv: Intervention<'_>,
        trainable: &dyn Fn(ParamId) -> bool,
    ) -> Result<Graph> {
        if seqs.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        for s in seqs {
            self.check_tokens(s)?;
        }
        if !iv.points.is_empty() && seqs.len() != 1 {
            return Err(Error::Config("point overrides need a single sequence".into()));
        }
        for n in iv.mask.iter() {
            n.validate(&self.config)?;
        }
        for p in iv.points {
            p.neuron.validate(&self.config)?;
            if p.position >= seqs[0].len() {
                return Err(Error::Sequence {
                    len: p.position + 1,
                    max: seqs[0].len(),
                });
            }
        }

        let cfg = &self.config;
        let mut tape = Tape::new();
        let mut params = BTreeMap::new();
        for (id, t) in &self.params {
            let var = if trainable(*id) {
                tape.variable(t.clone())
            } else {
                tape.constant(t.clone())
            };
            params.insert(*id, var);
        }
        let p = |id: ParamId| params[&id];

        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        let mut last_rows = Vec::with_capacity(seqs.len());
        for s in seqs {
            segments.push(Segment {
                start: ids.len(),
                len: s.len(),
            });
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
            last_rows.push(ids.len() - 1);
        }
        let rows = ids.len();

        let tok = tape.gather(p(ParamId::TokenEmbedding), &ids)?;
        let pos = tape.gather(p(ParamId::PositionEmbedding), &positions)?;
        let mut h = tape.add(tok, pos)?;

        let overrides_for = |key: TapKey| -> Vec<(usize, f64)> {
            let width = cfg.family_width(key.family);
            let cols = iv.mask.columns(key);
            let mut out = Vec::with_capacity(cols.len() * rows + iv.points.len());
            for r in 0..rows {
                out.extend(cols.iter().map(|&c| (r * width + c, 0.0)));
            }
            out.extend(
                iv.points
                    .iter()
                    .filter(|pt| pt.neuron.tap() == key)
                    .map(|pt| (pt.position * width + pt.neuron.index, pt.value)),
            );
            out
        };

        let shape = AttentionShape {
            heads: cfg.num_heads,
            kv_heads: cfg.num_kv_heads,
            head_dim: cfg.head_dim,
        };
        for layer in 0..cfg.num_layers {
            let w = |proj| p(ParamId::Layer { layer, proj });
            let key = |family| TapKey { layer, family };

            let q = tape.matmul_t(h, w(Proj::Q))?;
            let q = tape.tap(key(Family::AttnQ), q, &overrides_for(key(Family::AttnQ)))?;
            let k = tape.matmul_t(h, w(Proj::K))?;
            let k = tape.tap(key(Family::AttnK), k, &overrides_for(key(Family::AttnK)))?;
            let v = tape.matmul_t(h, w(Proj::V))?;
            let v = tape.tap(key(Family::AttnV), v, &overrides_for(key(Family::AttnV)))?;
            let o = tape.attention(q, k, v, &segments, shape.clone())?;
            let a = tape.matmul_t(o, w(Proj::O))?;
            let m = tape.add(h, a)?;

            let gate = tape.matmul_t(m, w(Proj::Gate))?;
            let gate = tape.tap(key(Family::MlpGate), gate, &overrides_for(key(Family::MlpGate)))?;
            let act = match cfg.activation {
                Activation::GeluTanh => tape.gelu(gate),
                Activation::Identity => gate,
            };
            let up = tape.matmul_t(m, w(Proj::Up))?;
            let gated = tape.mul(act, up)?;
            let f = tape.matmul_t(gated, w(Proj::Down))?;
            h = tape.add(m, f)?;
        }

        let last = tape.select_rows(h, &last_rows)?;
        let logits = tape.matmul_t(last, p(ParamId::Unembedding))?;
        if !tape.value(logits).all_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(Graph {
            tape,
            logits,
            params,
        })
    }

    /// Runs one sequence. With `trace` the tape (and with it every taped
    /// neuron value) is kept for a later reverse sweep.
    pub fn forward(&self, tokens: &[usize], mask: &NeuronMask, trace: bool) -> Result<ForwardRecord> {
        self.forward_with(tokens, Intervention::mask(mask), trace)
    }

    pub fn forward_with(
        &self,
        tokens: &[usize],
        iv: Intervention<'_>,
        trace: bool,
    ) -> Result<ForwardRecord> {
        let g = self.build_graph(&[tokens], iv, &|_| false)?;
        let logits = g.tape.value(g.logits).clone();
        let logits = Tensor::from_parts(vec![logits.cols()], logits.into_data());
        Ok(ForwardRecord {
            logits,
            tape: trace.then_some(g.tape),
        })
    }

    /// Final-position logits for each sequence of a batch.
    pub fn final_logits(&self, seqs: &[&[usize]], mask: &NeuronMask) -> Result<Vec<Vec<f64>>> {
        let g = self.build_graph(seqs, Intervention::mask(mask), &|_| false)?;
        let t = g.tape.value(g.logits);
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }

    /// `P(answer | prompt)` under a mask.
    pub fn answer_prob(&self, prompt: &[usize], answer: usize, mask: &NeuronMask) -> Result<f64> {
        self.answer_prob_with(prompt, answer, Intervention::mask(mask))
    }

    pub fn answer_prob_with(&self, prompt: &[usize], answer: usize, iv: Intervention<'_>) -> Result<f64> {
        if answer >= self.config.vocab_size {
            return Err(Error::Vocabulary {
                token: answer,
                vocab: self.config.vocab_size,
            });
        }
        let rec = self.forward_with(prompt, iv, false)?;
        Ok(softmax_row(rec.logits.data())?[answer])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::neuron::universe;
    use crate::tensor::gelu;

    fn tiny(kv: usize) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            head_dim: 3,
            num_kv_heads: kv,
            intermediate_size: 10,
            vocab_size: 12,
            max_seq_len: 6,
            activation: Activation::GeluTanh,
        }
    }

    fn big_init(cfg: ModelConfig, seed: u64) -> Model {
        Model::init_with_std(cfg, seed, 0.4).unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = Model::zeros(tiny(2)).unwrap();
        let rec = m.forward(&[1, 2, 3], &NeuronMask::empty(), false).unwrap();
        assert!(rec.logits.data().iter().all(|&v| v == 0.0));
        let p = m.answer_prob(&[1, 2, 3], 4, &NeuronMask::empty()).unwrap();
        assert!((p - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn input_validation() {
        let m = Model::zeros(tiny(2)).unwrap();
        let none = NeuronMask::empty();
        assert!(matches!(m.forward(&[12], &none, false), Err(Error::Vocabulary { .. })));
        assert!(matches!(m.forward(&[1; 7], &none, false), Err(Error::Sequence { .. })));
        assert!(m.forward(&[], &none, false).is_err());
        assert!(m.answer_prob(&[1], 12, &none).is_err());
    }

    #[test]
    fn taped_value_count_matches_layout() {
        let cfg = tiny(1);
        let m = big_init(cfg.clone(), 1);
        let rec = m.forward(&[1, 2, 3, 4], &NeuronMask::empty(), true).unwrap();
        assert_eq!(rec.taped_value_count(), 4 * cfg.layer_tap_width() * cfg.num_layers);
    }

    #[test]
    fn full_gate_mask_equals_attention_only_model() {
        let cfg = tiny(2);
        let m = big_init(cfg.clone(), 2);
        let mask = NeuronMask::whole_family(&cfg, Family::MlpGate);
        let masked = m.forward(&[3, 1, 4, 1], &mask, false).unwrap();
        let mut attn_only = m.clone();
        for layer in 0..cfg.num_layers {
            let down = attn_only.param_mut(ParamId::Layer { layer, proj: Proj::Down });
            down.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let reference = attn_only.forward(&[3, 1, 4, 1], &NeuronMask::empty(), false).unwrap();
        assert_eq!(masked.logits, reference.logits);
    }

    #[test]
    fn mask_equals_zeroed_subkey_rows() {
        let cfg = tiny(2);
        let m = big_init(cfg.clone(), 3);
        let all = universe(&cfg);
        let picks: Vec<NeuronId> = all.iter().copied().step_by(7).collect();
        let mask = NeuronMask::new(&cfg, picks.clone()).unwrap();
        let mut edited = m.clone();
        for n in &picks {
            let id = ParamId::Layer {
                layer: n.layer,
                proj: Proj::of_family(n.family),
            };
            edited.param_mut(id).row_mut(n.index).iter_mut().for_each(|v| *v = 0.0);
        }
        let a = m.forward(&[5, 6, 7], &mask, false).unwrap();
        let b = edited.forward(&[5, 6, 7], &NeuronMask::empty(), false).unwrap();
        for (x, y) in a.logits.data().iter().zip(b.logits.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn masking_a_zero_valued_neuron_changes_nothing() {
        let cfg = tiny(2);
        let mut m = big_init(cfg.clone(), 4);
        // Gate neuron 0 of layer 0 gets a zero subkey row, so its taped value is 0.
        let gate = ParamId::Layer { layer: 0, proj: Proj::Gate };
        m.param_mut(gate).row_mut(0).iter_mut().for_each(|v| *v = 0.0);
        let mask = NeuronMask::new(&cfg, [NeuronId::new(0, Family::MlpGate, 0)]).unwrap();
        let a = m.forward(&[1, 2], &mask, false).unwrap();
        let b = m.forward(&[1, 2], &NeuronMask::empty(), false).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn causal_prefix_invariance() {
        let cfg = tiny(1);
        let m = big_init(cfg, 5);
        let none = NeuronMask::empty();
        let full_a = m.forward(&[1, 2, 3, 4, 5], &none, true).unwrap();
        let full_b = m.forward(&[1, 2, 3, 9, 11], &none, true).unwrap();
        // Taped values at positions 0..3 are unaffected by later tokens.
        for layer in 0..2 {
            for family in Family::ALL {
                let key = TapKey { layer, family };
                let (a, b) = (full_a.tap_values(key).unwrap(), full_b.tap_values(key).unwrap());
                for r in 0..3 {
                    assert_eq!(a.row(r), b.row(r));
                }
            }
        }
        let prefix = m.forward(&[1, 2, 3], &none, false).unwrap();
        let prefix_b = m.forward(&[1, 2, 3], &none, false).unwrap();
        assert_eq!(prefix.logits, prefix_b.logits);
    }

    #[test]
    fn traced_and_untraced_agree_bitwise() {
        let m = big_init(tiny(2), 6);
        let a = m.forward(&[4, 4, 2], &NeuronMask::empty(), true).unwrap();
        let b = m.forward(&[4, 4, 2], &NeuronMask::empty(), false).unwrap();
        assert_eq!(a.logits, b.logits);
        assert!(b.tape.is_none());
    }

    #[test]
    fn batched_logits_match_single_runs() {
        let m = big_init(tiny(1), 7);
        let none = NeuronMask::empty();
        let seqs: [&[usize]; 3] = [&[1, 2, 3], &[4], &[5, 6, 7, 8, 9]];
        let batch = m.final_logits(&seqs, &none).unwrap();
        for (s, row) in seqs.iter().zip(batch) {
            let single = m.forward(s, &none, false).unwrap();
            for (x, y) in single.logits.data().iter().zip(row) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    /// Vanilla multi-head attention written out per head, for comparison with
    /// the grouped implementation at `num_kv_heads == num_heads`.
    fn reference_logits(m: &Model, tokens: &[usize]) -> Vec<f64> {
        let cfg = m.config();
        let d = cfg.hidden_size;
        let t = tokens.len();
        let lin = |w: &Tensor, x: &[f64]| -> Vec<f64> {
            (0..w.rows()).map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
        };
        let mut h: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(i, &tok)| {
                let e = m.param(ParamId::TokenEmbedding).row(tok);
                let p = m.param(ParamId::PositionEmbedding).row(i);
                e.iter().zip(p).map(|(a, b)| a + b).collect()
            })
            .collect();
        for layer in 0..cfg.num_layers {
            let w = |proj| m.param(ParamId::Layer { layer, proj });
            let q: Vec<Vec<f64>> = h.iter().map(|x| lin(w(Proj::Q), x)).collect();
            let k: Vec<Vec<f64>> = h.iter().map(|x| lin(w(Proj::K), x)).collect();
            let v: Vec<Vec<f64>> = h.iter().map(|x| lin(w(Proj::V), x)).collect();
            let dh = cfg.head_dim;
            let mut next = Vec::with_capacity(t);
            for i in 0..t {
                let mut o = vec![0.0; cfg.query_width()];
                for head in 0..cfg.num_heads {
                    let r = head * dh..(head + 1) * dh;
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let alpha = softmax_row(&scores).unwrap();
                    for j in 0..=i {
                        for c in r.clone() {
                            o[c] += alpha[j] * v[j][c];
                        }
                    }
                }
                let a = lin(w(Proj::O), &o);
                let mid: Vec<f64> = h[i].iter().zip(&a).map(|(x, y)| x + y).collect();
                let g = lin(w(Proj::Gate), &mid);
                let u = lin(w(Proj::Up), &mid);
                let gu: Vec<f64> = g.iter().zip(&u).map(|(g, u)| gelu(*g) * u).collect();
                let f = lin(w(Proj::Down), &gu);
                next.push(mid.iter().zip(&f).map(|(x, y)| x + y).collect::<Vec<f64>>());
            }
            h = next;
        }
        assert_eq!(h[t - 1].len(), d);
        lin(m.param(ParamId::Unembedding), &h[t - 1])
    }

    #[test]
    fn full_kv_heads_match_reference_multi_head_attention() {
        let m = big_init(tiny(2), 8);
        let tokens = [3, 7, 1, 0, 2];
        let got = m.forward(&tokens, &NeuronMask::empty(), false).unwrap();
        let want = reference_logits(&m, &tokens);
        for (x, y) in got.logits.data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
}

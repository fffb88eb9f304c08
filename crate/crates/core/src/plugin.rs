//! The plug-in network: predicts the property vector from encoded sources.
//!
//! A learned state vector repeatedly attends over the memory rows with a
//! single pooled query per head, followed by a feed-forward block. Memory
//! rows are put into a canonical (sorted) order first, so the output does not
//! depend on source order down to the last bit.

use std::cmp::Ordering;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DistanceWeights, ModelConfig, PluginConfig};
use crate::diff::{Graph, KeySpans, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::Memory;
use crate::oracle::{PropertyVector, COVERAGE, LENGTH_DEV, NUM_PROPERTIES, POV, RATING_DEV};

/// Smoothing inside the logarithms of the style term.
pub const KL_EPS: f64 = 1e-8;

pub fn manifest(cfg: &PluginConfig, d_memory: usize) -> Vec<(String, (usize, usize))> {
    let s = cfg.d_state;
    let mut m = vec![("plugin.state".to_string(), (1, s))];
    for l in 0..cfg.n_layers {
        let p = format!("plugin.layer{l}");
        for (name, shape) in [
            ("ln_att.g", (1, s)),
            ("ln_att.b", (1, s)),
            ("wq", (s, s)),
            ("bq", (1, s)),
            ("wk", (d_memory, s)),
            ("bk", (1, s)),
            ("wv", (d_memory, s)),
            ("bv", (1, s)),
            ("wo", (s, s)),
            ("bo", (1, s)),
            ("ln_ffn.g", (1, s)),
            ("ln_ffn.b", (1, s)),
            ("w1", (s, cfg.d_ffn_hidden)),
            ("b1", (1, cfg.d_ffn_hidden)),
            ("w2", (cfg.d_ffn_hidden, s)),
            ("b2", (1, s)),
        ] {
            m.push((format!("{p}.{name}"), shape));
        }
    }
    m.push(("plugin.out.w".to_string(), (s, cfg.n_properties)));
    m.push(("plugin.out.b".to_string(), (1, cfg.n_properties)));
    m
}

pub fn param_count(cfg: &PluginConfig, d_memory: usize) -> usize {
    manifest(cfg, d_memory).iter().map(|(_, (r, c))| r * c).sum()
}

/// Plug-in size relative to the main model.
pub fn plugin_ratio(model: &ModelConfig, plugin: &PluginConfig) -> f64 {
    param_count(plugin, model.d_model) as f64 / crate::model::param_count(model) as f64
}

/// Row indices sorted by row contents (lexicographic, total order on floats).
pub fn canonical_order(states: &Tensor, rows: &[usize]) -> Vec<usize> {
    let mut idx = rows.to_vec();
    idx.sort_by(|&a, &b| {
        for (x, y) in states.row(a).iter().zip(states.row(b)) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    });
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plugin {
    pub cfg: PluginConfig,
    pub d_memory: usize,
    pub params: ParamStore,
}

impl Plugin {
    pub fn init(cfg: &PluginConfig, d_memory: usize, seed: u64) -> Result<Plugin> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, (r, c)) in manifest(cfg, d_memory) {
            let t = if name.ends_with(".g") {
                Tensor::filled(r, c, 1.0)
            } else if name == "plugin.state" || r > 1 {
                Tensor::glorot(r, c, &mut rng)
            } else {
                Tensor::zeros(r, c)
            };
            params.insert(name, t);
        }
        Ok(Plugin {
            cfg: cfg.clone(),
            d_memory,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn check_shapes(&self) -> Result<()> {
        for (name, shape) in manifest(&self.cfg, self.d_memory) {
            match self.params.get(&name) {
                Some(t) if t.shape() == shape => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
            }
        }
        Ok(())
    }

    fn p(&self, g: &mut Graph, name: &str) -> Result<Var> {
        g.param(&self.params, name)
    }

    fn linear(&self, g: &mut Graph, x: Var, prefix: &str, w: &str, b: &str) -> Result<Var> {
        let wv = self.p(g, &format!("{prefix}.{w}"))?;
        let bv = self.p(g, &format!("{prefix}.{b}"))?;
        let y = g.matmul(x, wv)?;
        g.add_row(y, bv)
    }

    fn ln(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.p(g, &format!("{prefix}.g"))?;
        let bias = self.p(g, &format!("{prefix}.b"))?;
        g.layer_norm(x, gain, bias)
    }

    /// Property prediction `(1 x 9)` from memory rows `rows` of `states`.
    /// Coverage goes through a logistic map, the style block through a
    /// softmax; deviations stay raw.
    pub fn forward_graph(&self, g: &mut Graph, states: Var, rows: &[usize]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Empty("plugin_forward: empty memory".into()));
        }
        let sv = g.value(states);
        if sv.cols() != self.d_memory {
            return Err(Error::shape(
                "plugin",
                format!("memory width {} for plug-in expecting {}", sv.cols(), self.d_memory),
            ));
        }
        let order = canonical_order(sv, rows);
        let mem = g.select_rows(states, &order)?;
        let spans = Rc::new(KeySpans::full(1, order.len()));
        let mut s = self.p(g, "plugin.state")?;
        for l in 0..self.cfg.n_layers {
            let pre = format!("plugin.layer{l}");
            let a = self.ln(g, s, &format!("{pre}.ln_att"))?;
            let q = self.linear(g, a, &pre, "wq", "bq")?;
            let k = self.linear(g, mem, &pre, "wk", "bk")?;
            let v = self.linear(g, mem, &pre, "wv", "bv")?;
            let att = g.attention(q, k, v, self.cfg.n_heads, spans.clone(), self.cfg.dropout_attention)?;
            let o = self.linear(g, att, &pre, "wo", "bo")?;
            let o = g.dropout(o, self.cfg.dropout_internal);
            s = g.add(s, o)?;
            let a = self.ln(g, s, &format!("{pre}.ln_ffn"))?;
            let h = self.linear(g, a, &pre, "w1", "b1")?;
            let h = g.relu(h);
            let o = self.linear(g, h, &pre, "w2", "b2")?;
            let o = g.dropout(o, self.cfg.dropout_internal);
            s = g.add(s, o)?;
        }
        let raw = self.linear(g, s, "plugin.out", "w", "b")?;
        let cov = g.slice_cols(raw, COVERAGE.start, COVERAGE.end)?;
        let cov = g.sigmoid(cov);
        let pov = g.slice_cols(raw, POV.start, POV.end)?;
        let pov = g.softmax(pov);
        let dev = g.slice_cols(raw, RATING_DEV, NUM_PROPERTIES)?;
        g.concat_cols(&[cov, pov, dev])
    }

    /// Eval-mode prediction over all memory rows.
    pub fn forward(&self, memory: &Memory) -> Result<PropertyVector> {
        let mut g = Graph::eval();
        let states = g.constant(memory.states.clone());
        let rows: Vec<usize> = (0..memory.len()).collect();
        let out = self.forward_graph(&mut g, states, &rows)?;
        PropertyVector::from_slice(g.value(out).data())
    }
}

/// Weighted distance between a predicted `(1 x 9)` row and oracle values:
/// L1 on coverage and deviations, KL(target || prediction) on the style block.
pub fn distance_graph(g: &mut Graph, pred: Var, target: &PropertyVector, w: &DistanceWeights) -> Result<Var> {
    let t = target.to_array();
    let pv = g.value(pred);
    if pv.shape() != (1, NUM_PROPERTIES) {
        return Err(Error::shape("plugin_distance", format!("prediction {:?}", pv.shape())));
    }
    let l1 = |g: &mut Graph, range: std::ops::Range<usize>, weight: f64| -> Result<Var> {
        let p = g.slice_cols(pred, range.start, range.end)?;
        let c = g.constant(Tensor::row_vector(t[range].to_vec()));
        let d = g.sub(p, c)?;
        let d = g.abs(d);
        let s = g.sum(d);
        Ok(g.scale(s, weight))
    };
    let cov = l1(g, COVERAGE, w.w_coverage)?;
    let rat = l1(g, RATING_DEV..RATING_DEV + 1, w.w_rating_dev)?;
    let len = l1(g, LENGTH_DEV..LENGTH_DEV + 1, w.w_len_dev)?;

    let tp = &t[POV];
    let p = g.slice_cols(pred, POV.start, POV.end)?;
    let lp = g.log_eps(p, KL_EPS);
    let tc = g.constant(Tensor::row_vector(tp.to_vec()));
    let cross = g.mul(tc, lp)?;
    let cross = g.sum(cross);
    let entropy_term: f64 = tp.iter().map(|&x| x * (x + KL_EPS).ln()).sum();
    let neg = g.scale(cross, -1.0);
    let h = g.constant(Tensor::scalar(entropy_term));
    let kl = g.add(neg, h)?;
    let kl = g.scale(kl, w.w_pov);

    let a = g.add(cov, rat)?;
    let b = g.add(len, kl)?;
    g.add(a, b)
}

/// Distance value and its gradient with respect to the prediction.
pub fn plugin_distance(
    pred: &PropertyVector,
    target: &PropertyVector,
    w: &DistanceWeights,
) -> Result<(f64, [f64; NUM_PROPERTIES])> {
    let mut g = Graph::eval();
    let p = g.variable(Tensor::row_vector(pred.to_array().to_vec()));
    let d = distance_graph(&mut g, p, target, w)?;
    g.backward(d)?;
    let value = g.value(d).item();
    let mut grad = [0.0; NUM_PROPERTIES];
    if let Some(gr) = g.grad(p) {
        grad.copy_from_slice(gr.data());
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradcheck::{central_difference, relative_error};

    fn memory(seed: u64, blocks: usize, d: usize) -> Memory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lens: Vec<usize> = (0..blocks).map(|i| 2 + i % 3).collect();
        let total: usize = lens.iter().sum();
        let states = Tensor::glorot(total, d, &mut rng);
        let mut b = Vec::new();
        let mut start = 0;
        for l in lens {
            b.push(start..start + l);
            start += l;
        }
        Memory {
            states,
            blocks: b,
            source_ids: vec![vec![]; blocks],
        }
    }

    fn pv(a: [f64; 9]) -> PropertyVector {
        PropertyVector::from_slice(&a).unwrap()
    }

    #[test]
    fn paper_sizes() {
        let n = param_count(&PluginConfig::default(), 400);
        assert!((80_000..=130_000).contains(&n), "{n}");
        assert!(plugin_ratio(&ModelConfig::paper(), &PluginConfig::default()) < 0.005);
        let p = Plugin::init(&PluginConfig::default(), 16, 1).unwrap();
        assert_eq!(p.param_count(), param_count(&PluginConfig::default(), 16));
        p.check_shapes().unwrap();
    }

    #[test]
    fn output_is_valid_and_permutation_invariant() {
        let p = Plugin::init(&PluginConfig::default(), 16, 2).unwrap();
        let m = memory(3, 8, 16);
        let out = p.forward(&m).unwrap();
        out.validate().unwrap();
        let rev: Vec<usize> = (0..8).rev().collect();
        assert_eq!(p.forward(&m.permute_blocks(&rev)).unwrap(), out);
        let four = memory(4, 4, 16);
        assert_eq!(p.forward(&four).unwrap().to_array().len(), 9);
        let empty = Memory {
            states: Tensor::zeros(0, 16),
            blocks: vec![],
            source_ids: vec![],
        };
        assert!(p.forward(&empty).is_err());
    }

    #[test]
    fn distance_values() {
        let w = DistanceWeights::default();
        let t = pv([0.5, 0.2, 0.3, 0.25, 0.25, 0.25, 0.25, 1.0, -0.1]);
        let (d, _) = plugin_distance(&t, &t, &w).unwrap();
        assert!(d.abs() < 1e-6);
        let a = pv([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let b = pv([0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let (d, _) = plugin_distance(&b, &a, &w).unwrap();
        let expect = w.w_pov * ((1.0 + KL_EPS).ln() - KL_EPS.ln());
        assert!((d - expect).abs() < 1e-9, "{d} vs {expect}");
        let p = pv([0.4, 0.2, 0.3, 0.25, 0.25, 0.25, 0.25, 0.5, 0.1]);
        let (d, _) = plugin_distance(&p, &t, &w).unwrap();
        let expect = 0.5 * 0.1 + 1.0 * 0.5 + 0.1 * 0.2;
        assert!((d - expect).abs() < 1e-9, "{d} vs {expect}");
    }

    #[test]
    fn distance_gradient_matches_finite_differences() {
        let w = DistanceWeights::default();
        let plugin = Plugin::init(&PluginConfig::default(), 8, 5).unwrap();
        let m = memory(6, 3, 8);
        let target = pv([0.6, 0.3, 0.5, 0.1, 0.0, 0.7, 0.2, -1.0, 0.2]);
        let loss = |pl: &Plugin, back: bool| {
            let mut g = Graph::eval();
            let st = g.constant(m.states.clone());
            let rows: Vec<usize> = (0..m.len()).collect();
            let out = pl.forward_graph(&mut g, st, &rows).unwrap();
            let d = distance_graph(&mut g, out, &target, &w).unwrap();
            let v = g.value(d).item();
            if back {
                g.backward(d).unwrap();
                (v, Some(g.param_grads()))
            } else {
                (v, None)
            }
        };
        let (_, grads) = loss(&plugin, true);
        let grads = grads.unwrap();
        for name in ["plugin.state", "plugin.layer0.wk", "plugin.layer2.w1", "plugin.out.w", "plugin.layer1.ln_att.g"] {
            let n = plugin.params.get(name).unwrap().len();
            for idx in [0, n / 3, n - 1] {
                let fd = central_difference(
                    |x| {
                        let mut p2 = plugin.clone();
                        p2.params.get_mut(name).unwrap().data_mut()[idx] = x;
                        loss(&p2, false).0
                    },
                    plugin.params.get(name).unwrap().data()[idx],
                );
                let an = grads.get(name).unwrap().data()[idx];
                assert!(relative_error(an, fd) < 1e-4, "{name}[{idx}]: {an} vs {fd}");
            }
        }
    }
}

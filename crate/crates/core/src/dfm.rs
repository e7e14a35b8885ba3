//! Dynamic fusion module.
//!
//! Unimodal features of N inputs are stacked along a new modality axis and
//! projected by three shared 1x1 convolutions into key/query/value spaces.
//! For every channel independently, an NxN attention matrix
//! softmax(K_c Q_c^T / sqrt(N)) mixes the N modality slices of the value
//! features; averaging over the modality axis yields a fused map whose shape
//! and value range do not depend on N. The parameter set is the same for
//! every arity and every modality subset.

use rand::Rng;

use crate::nn::{Binding, ConvParams, ParamStore};
use crate::tensor::{Element, Graph, NodeId, TResult, TensorError};

#[derive(Debug, Clone, Copy)]
struct LevelParams {
    key: ConvParams,
    query: ConvParams,
    value: ConvParams,
}

/// Per-level fusion parameters (three 1x1 convolutions each).
#[derive(Debug, Clone)]
pub struct Dfm {
    /// Modality-universe size; fusing more inputs than this is rejected.
    pub k: usize,
    levels: Vec<LevelParams>,
}

impl Dfm {
    pub fn register<E: Element>(
        store: &mut ParamStore<E>,
        k: usize,
        widths: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let levels = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| LevelParams {
                key: ConvParams::register(store, &format!("dfm.level{}.key", i + 1), c, c, 1, 1, 0, rng),
                query: ConvParams::register(store, &format!("dfm.level{}.query", i + 1), c, c, 1, 1, 0, rng),
                value: ConvParams::register(store, &format!("dfm.level{}.value", i + 1), c, c, 1, 1, 0, rng),
            })
            .collect();
        Dfm { k, levels }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Fuse N same-shaped feature maps [B,C,H,W] at `level` into one.
    /// N = 1 takes the direct value-projection path; the general attention
    /// path reduces to it exactly (softmax over a 1x1 matrix is 1, the mean
    /// over a single slice is the identity).
    pub fn fuse<E: Element>(
        &self,
        g: &mut Graph<E>,
        binding: &Binding,
        level: usize,
        inputs: &[NodeId],
    ) -> TResult<NodeId> {
        self.check_arity(inputs)?;
        if inputs.len() == 1 {
            self.fuse_single(g, binding, level, inputs[0])
        } else {
            self.fuse_general(g, binding, level, inputs)
        }
    }

    /// Single-input special case: a bare 1x1 value projection.
    pub fn fuse_single<E: Element>(
        &self,
        g: &mut Graph<E>,
        binding: &Binding,
        level: usize,
        input: NodeId,
    ) -> TResult<NodeId> {
        self.levels[level].value.apply(g, binding, input)
    }

    /// General attention path, valid for any N >= 1.
    pub fn fuse_general<E: Element>(
        &self,
        g: &mut Graph<E>,
        binding: &Binding,
        level: usize,
        inputs: &[NodeId],
    ) -> TResult<NodeId> {
        self.check_arity(inputs)?;
        let n = inputs.len();
        let shape = g.value(inputs[0]).shape().to_vec();
        if shape.len() != 4 {
            return Err(TensorError::dim(
                "dfm_fuse",
                format!("inputs must be [B,C,H,W], got {:?}", shape),
            ));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let lp = &self.levels[level];

        // Stack on a new modality axis, then run the three projections over
        // the flattened [N*B, C, H, W] batch.
        let stacked = g.stack(inputs)?;
        let flat = g.reshape(stacked, vec![n * b, c, h, w])?;
        let key = lp.key.apply(g, binding, flat)?;
        let query = lp.query.apply(g, binding, flat)?;
        let value = lp.value.apply(g, binding, flat)?;

        let enhanced = channel_attention(g, key, query, value, n, b, c, h, w)?;
        // Average over the modality axis of [B,C,N,H,W].
        let fused = g.mean_axis(enhanced, 2)?;
        debug_assert_eq!(g.value(fused).shape(), &[b, c, h, w]);
        Ok(fused)
    }

    fn check_arity(&self, inputs: &[NodeId]) -> TResult<()> {
        if inputs.is_empty() {
            return Err(TensorError::contract("dfm_fuse", "at least one input required".to_string()));
        }
        if inputs.len() > self.k {
            return Err(TensorError::contract(
                "dfm_fuse",
                format!("{} inputs exceed modality universe K={}", inputs.len(), self.k),
            ));
        }
        Ok(())
    }
}

/// Channel-wise attention over the modality axis.
///
/// `key`/`query`/`value` are [N*B, C, H, W]; the result is [B, C, N, H, W]:
/// per (batch, channel), an NxN row-stochastic matrix
/// softmax(K_c Q_c^T / sqrt(N)) mixes the N modality slices of the value.
#[allow(clippy::too_many_arguments)]
pub fn channel_attention<E: Element>(
    g: &mut Graph<E>,
    key: NodeId,
    query: NodeId,
    value: NodeId,
    n: usize,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
) -> TResult<NodeId> {
    let hw = h * w;
    // [N*B,C,H,W] -> [N,B,C,HW] -> [B,C,N,HW] -> [B*C, N, HW]
    let to_rows = |g: &mut Graph<E>, x: NodeId| -> TResult<NodeId> {
        let x = g.reshape(x, vec![n, b, c, hw])?;
        let x = g.permute(x, &[1, 2, 0, 3])?;
        g.reshape(x, vec![b * c, n, hw])
    };
    let k_rows = to_rows(g, key)?;
    let q_rows = to_rows(g, query)?;
    let v_rows = to_rows(g, value)?;

    let q_t = g.permute(q_rows, &[0, 2, 1])?;
    let scores = g.matmul(k_rows, q_t)?;
    let scaled = g.affine(scores, 1.0 / (n as f64).sqrt(), 0.0)?;
    let attn = g.softmax_rows(scaled)?;
    let mixed = g.matmul(attn, v_rows)?;
    // [B*C, N, HW] -> [B, C, N, H, W]
    g.reshape(mixed, vec![b, c, n, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn setup(c: usize) -> (ParamStore<f64>, Dfm) {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let mut store = ParamStore::new();
        let dfm = Dfm::register(&mut store, 3, &[c], &mut rng);
        (store, dfm)
    }

    fn rand_map(rng: &mut ChaCha20Rng, b: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![b, c, h, w], |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct 1x1 convolution evaluated without the engine.
    fn conv1x1_oracle(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
        let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let cout = w.shape()[0];
        let mut out = Tensor::zeros(vec![b, cout, h, wd]);
        for s in 0..b {
            for o in 0..cout {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = bias.data()[o];
                        for ci in 0..c {
                            acc += w.data()[o * c + ci] * x.data()[((s * c + ci) * h + y) * wd + xx];
                        }
                        out.data_mut()[((s * cout + o) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    /// Brute-force fusion oracle: explicit per-channel NxN matrices.
    fn fuse_oracle(
        inputs: &[Tensor<f64>],
        wk: &Tensor<f64>,
        bk: &Tensor<f64>,
        wq: &Tensor<f64>,
        bq: &Tensor<f64>,
        wv: &Tensor<f64>,
        bv: &Tensor<f64>,
    ) -> Tensor<f64> {
        let n = inputs.len();
        let (b, c, h, w) = (
            inputs[0].shape()[0],
            inputs[0].shape()[1],
            inputs[0].shape()[2],
            inputs[0].shape()[3],
        );
        let hw = h * w;
        let keys: Vec<Tensor<f64>> = inputs.iter().map(|x| conv1x1_oracle(x, wk, bk)).collect();
        let queries: Vec<Tensor<f64>> = inputs.iter().map(|x| conv1x1_oracle(x, wq, bq)).collect();
        let values: Vec<Tensor<f64>> = inputs.iter().map(|x| conv1x1_oracle(x, wv, bv)).collect();
        let mut out = Tensor::zeros(vec![b, c, h, w]);
        for s in 0..b {
            for ch in 0..c {
                // K_c, Q_c, V_c as N x HW matrices.
                let grab = |set: &[Tensor<f64>], m: usize, j: usize| set[m].data()[(s * c + ch) * hw + j];
                let mut attn = vec![0.0f64; n * n];
                for i in 0..n {
                    for j in 0..n {
                        let mut dot = 0.0;
                        for p in 0..hw {
                            dot += grab(&keys, i, p) * grab(&queries, j, p);
                        }
                        attn[i * n + j] = dot / (n as f64).sqrt();
                    }
                }
                for row in attn.chunks_mut(n) {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - mx).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                for p in 0..hw {
                    let mut mean = 0.0;
                    for i in 0..n {
                        let mut enhanced = 0.0;
                        for j in 0..n {
                            enhanced += attn[i * n + j] * grab(&values, j, p);
                        }
                        mean += enhanced;
                    }
                    out.data_mut()[(s * c + ch) * hw + p] = mean / n as f64;
                }
            }
        }
        out
    }

    fn run_fuse(
        store: &ParamStore<f64>,
        dfm: &Dfm,
        inputs: &[Tensor<f64>],
        general: bool,
    ) -> Tensor<f64> {
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = if general {
            dfm.fuse_general(&mut g, &binding, 0, &ids).unwrap()
        } else {
            dfm.fuse(&mut g, &binding, 0, &ids).unwrap()
        };
        g.value(out).clone()
    }

    #[test]
    fn single_input_general_path_equals_value_projection() {
        let (store, dfm) = setup(5);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let f = rand_map(&mut rng, 2, 5, 4, 6);
        let direct = run_fuse(&store, &dfm, &[f.clone()], false);
        let general = run_fuse(&store, &dfm, &[f], true);
        assert_eq!(direct.shape(), general.shape());
        assert!(direct.max_abs_diff(&general) < 1e-12);
    }

    #[test]
    fn identical_pair_reduces_to_value_projection() {
        let (store, dfm) = setup(4);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let f = rand_map(&mut rng, 1, 4, 3, 5);
        let single = run_fuse(&store, &dfm, &[f.clone()], false);
        let pair = run_fuse(&store, &dfm, &[f.clone(), f], false);
        assert!(single.max_abs_diff(&pair) < 1e-12);
    }

    #[test]
    fn three_way_fusion_matches_brute_force_oracle() {
        let (store, dfm) = setup(3);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let inputs: Vec<Tensor<f64>> = (0..3).map(|_| rand_map(&mut rng, 2, 3, 4, 4)).collect();
        let got = run_fuse(&store, &dfm, &inputs, false);
        let expect = fuse_oracle(
            &inputs,
            store.by_name("dfm.level1.key.w").unwrap(),
            store.by_name("dfm.level1.key.b").unwrap(),
            store.by_name("dfm.level1.query.w").unwrap(),
            store.by_name("dfm.level1.query.b").unwrap(),
            store.by_name("dfm.level1.value.w").unwrap(),
            store.by_name("dfm.level1.value.b").unwrap(),
        );
        assert!(got.max_abs_diff(&expect) < 1e-6, "diff {}", got.max_abs_diff(&expect));
    }

    #[test]
    fn fusion_is_permutation_invariant() {
        let (store, dfm) = setup(6);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let a = rand_map(&mut rng, 1, 6, 4, 4);
        let b = rand_map(&mut rng, 1, 6, 4, 4);
        let c = rand_map(&mut rng, 1, 6, 4, 4);
        let base = run_fuse(&store, &dfm, &[a.clone(), b.clone(), c.clone()], false);
        let perms: [[&Tensor<f64>; 3]; 6] = [
            [&a, &b, &c],
            [&a, &c, &b],
            [&b, &a, &c],
            [&b, &c, &a],
            [&c, &a, &b],
            [&c, &b, &a],
        ];
        for p in perms {
            let out = run_fuse(&store, &dfm, &[p[0].clone(), p[1].clone(), p[2].clone()], false);
            assert!(base.max_abs_diff(&out) < 1e-5, "diff {}", base.max_abs_diff(&out));
        }
        let ab = run_fuse(&store, &dfm, &[a.clone(), b.clone()], false);
        let ba = run_fuse(&store, &dfm, &[b, a], false);
        assert!(ab.max_abs_diff(&ba) < 1e-5);
    }

    #[test]
    fn output_shape_and_scale_are_arity_invariant() {
        let (store, dfm) = setup(4);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let maps: Vec<Tensor<f64>> = (0..3).map(|_| rand_map(&mut rng, 2, 4, 8, 8)).collect();
        let rms = |t: &Tensor<f64>| {
            (t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64).sqrt()
        };
        let out1 = run_fuse(&store, &dfm, &maps[..1], false);
        let out2 = run_fuse(&store, &dfm, &maps[..2], false);
        let out3 = run_fuse(&store, &dfm, &maps[..3], false);
        assert_eq!(out1.shape(), out3.shape());
        assert_eq!(out2.shape(), out3.shape());
        let ratio = rms(&out3) / rms(&out1);
        assert!((0.3..=3.0).contains(&ratio), "rms ratio {ratio}");
    }

    #[test]
    fn arity_above_universe_is_rejected() {
        let (store, dfm) = setup(2);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let maps: Vec<Tensor<f64>> = (0..4).map(|_| rand_map(&mut rng, 1, 2, 2, 2)).collect();
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let ids: Vec<NodeId> = maps.iter().map(|t| g.constant(t.clone())).collect();
        assert!(dfm.fuse(&mut g, &binding, 0, &ids).is_err());
    }

    #[test]
    fn mismatched_input_shapes_are_rejected() {
        let (store, dfm) = setup(3);
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let a = g.constant(Tensor::<f64>::zeros(vec![1, 3, 4, 4]));
        let b = g.constant(Tensor::<f64>::zeros(vec![1, 3, 2, 2]));
        assert!(dfm.fuse(&mut g, &binding, 0, &[a, b]).is_err());
    }

    #[test]
    fn hand_sized_attention_matches_symbolic_computation() {
        // N=2, HW=2, C=1, B=1, identity-ish projections chosen by hand.
        let mut store = ParamStore::<f64>::new();
        let dfm = {
            let mut rng = ChaCha20Rng::seed_from_u64(0);
            Dfm::register(&mut store, 3, &[1], &mut rng)
        };
        // Overwrite the three projections with weight 1, bias 0 so that
        // K = Q = V = input.
        for name in ["key", "query", "value"] {
            store
                .set_by_name(&format!("dfm.level1.{name}.w"), Tensor::ones(vec![1, 1, 1, 1]))
                .unwrap();
            store
                .set_by_name(&format!("dfm.level1.{name}.b"), Tensor::zeros(vec![1]))
                .unwrap();
        }
        let f1 = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let f2 = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        // Scores: K1.Q1 = 1, K1.Q2 = 0, K2.Q1 = 0, K2.Q2 = 1, scaled by
        // 1/sqrt(2). Softmax rows: [p, 1-p] with p = e^s/(e^s + 1),
        // s = 1/sqrt(2). Enhanced rows mix V accordingly; output is the mean.
        let s = 1.0 / 2.0f64.sqrt();
        let p = s.exp() / (s.exp() + 1.0);
        let expect = [
            (p * 1.0 + (1.0 - p) * 0.0 + (1.0 - p) * 1.0 + p * 0.0) / 2.0,
            (p * 0.0 + (1.0 - p) * 1.0 + (1.0 - p) * 0.0 + p * 1.0) / 2.0,
        ];
        let out = run_fuse(&store, &dfm, &[f1, f2], false);
        assert!((out.data()[0] - expect[0]).abs() < 1e-12);
        assert!((out.data()[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let (store, dfm) = setup(3);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let maps: Vec<Tensor<f64>> = (0..3).map(|_| rand_map(&mut rng, 2, 3, 2, 3)).collect();
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let ids: Vec<NodeId> = maps.iter().map(|t| g.constant(t.clone())).collect();
        // Reproduce the internal projections to inspect the attention matrix.
        let stacked = g.stack(&ids).unwrap();
        let flat = g.reshape(stacked, vec![3 * 2, 3, 2, 3]).unwrap();
        let lp_key = store.by_name("dfm.level1.key.w").unwrap().clone();
        let lp_kb = store.by_name("dfm.level1.key.b").unwrap().clone();
        let kw = g.constant(lp_key);
        let kb = g.constant(lp_kb);
        let key = g.conv2d(flat, kw, kb, 1, 0).unwrap();
        let qw = g.constant(store.by_name("dfm.level1.query.w").unwrap().clone());
        let qb = g.constant(store.by_name("dfm.level1.query.b").unwrap().clone());
        let query = g.conv2d(flat, qw, qb, 1, 0).unwrap();
        let kr = g.reshape(key, vec![3, 2, 3, 6]).unwrap();
        let kr = g.permute(kr, &[1, 2, 0, 3]).unwrap();
        let kr = g.reshape(kr, vec![6, 3, 6]).unwrap();
        let qr = g.reshape(query, vec![3, 2, 3, 6]).unwrap();
        let qr = g.permute(qr, &[1, 2, 0, 3]).unwrap();
        let qr = g.reshape(qr, vec![6, 3, 6]).unwrap();
        let qt = g.permute(qr, &[0, 2, 1]).unwrap();
        let scores = g.matmul(kr, qt).unwrap();
        let scaled = g.affine(scores, 1.0 / 3.0f64.sqrt(), 0.0).unwrap();
        let attn = g.softmax_rows(scaled).unwrap();
        for row in g.value(attn).data().chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        let _ = dfm; // parameters shared with the store used above
    }
}

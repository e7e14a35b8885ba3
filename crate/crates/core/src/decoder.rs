//! Saliency prediction decoder.
//!
//! Coarse-to-fine: a 1x1 seed conv turns the level-5 fused features into the
//! first decoder state; each merge block upsamples the coarser state to the
//! next level's size, concatenates it with that level's fused features and
//! applies a 3x3 conv. Levels 1..4 each carry a prediction head (3x3 conv to
//! one channel + sigmoid), so every emitted map is a probability map. At
//! test time the level-1 map is the final saliency output.

use rand::Rng;

use crate::nn::{Binding, ConvParams, ParamStore};
use crate::tensor::{Element, Graph, NodeId, TResult, TensorError};

/// Decoder parameters: seed block, four merge blocks, four heads.
#[derive(Debug, Clone)]
pub struct Decoder {
    seed: ConvParams,
    /// merges[i] consumes Cat(F^{i+1}_f, UP(state)) and emits C_{i+1} channels
    /// (index 0 is level 1).
    merges: [ConvParams; 4],
    heads: [ConvParams; 4],
}

impl Decoder {
    pub fn register<E: Element>(store: &mut ParamStore<E>, widths: &[usize; 5], rng: &mut impl Rng) -> Self {
        let seed = ConvParams::register(store, "decoder.seed", widths[4], widths[4], 1, 1, 0, rng);
        let merges: [ConvParams; 4] = {
            let mut v = Vec::with_capacity(4);
            for i in 0..4 {
                let c_in = widths[i] + widths[i + 1];
                v.push(ConvParams::register(
                    store,
                    &format!("decoder.merge{}", i + 1),
                    c_in,
                    widths[i],
                    3,
                    1,
                    1,
                    rng,
                ));
            }
            v.try_into().expect("four merge blocks")
        };
        let heads: [ConvParams; 4] = {
            let mut v = Vec::with_capacity(4);
            for (i, &c) in widths.iter().take(4).enumerate() {
                v.push(ConvParams::register(
                    store,
                    &format!("decoder.head{}", i + 1),
                    c,
                    1,
                    3,
                    1,
                    1,
                    rng,
                ));
            }
            v.try_into().expect("four heads")
        };
        Decoder { seed, merges, heads }
    }

    /// Decode five fused levels into four saliency maps S^1..S^4, each in
    /// (0,1) at the spatial size of its level.
    pub fn decode<E: Element>(
        &self,
        g: &mut Graph<E>,
        binding: &Binding,
        fused: &[NodeId; 5],
    ) -> TResult<[NodeId; 4]> {
        for i in 0..4 {
            let fine = g.value(fused[i]).shape().to_vec();
            let coarse = g.value(fused[i + 1]).shape().to_vec();
            if fine.len() != 4 || coarse.len() != 4 {
                return Err(TensorError::dim("decode", "fused levels must be rank 4".to_string()));
            }
            if fine[2] < coarse[2] || fine[3] < coarse[3] {
                return Err(TensorError::dim(
                    "decode",
                    format!(
                        "pyramid inconsistency: level {} is {:?} but level {} is {:?}",
                        i + 1,
                        fine,
                        i + 2,
                        coarse
                    ),
                ));
            }
        }
        let seeded = self.seed.apply(g, binding, fused[4])?;
        let mut state = g.relu(seeded)?;
        let mut decoded = [0usize; 4];
        for i in (0..4).rev() {
            let target = g.value(fused[i]).shape().to_vec();
            let up = g.bilinear_up(state, target[2], target[3])?;
            let cat = g.concat(&[fused[i], up], 1)?;
            let merged = self.merges[i].apply(g, binding, cat)?;
            state = g.relu(merged)?;
            decoded[i] = state;
        }
        let mut maps = [0usize; 4];
        for i in 0..4 {
            let logits = self.heads[i].apply(g, binding, decoded[i])?;
            maps[i] = g.sigmoid(logits)?;
        }
        Ok(maps)
    }
}

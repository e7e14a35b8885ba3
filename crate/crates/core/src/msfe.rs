//! Modality switch feature extractor.
//!
//! A single five-stage backbone is shared by all modalities. At each level a
//! weight generator projects (context ++ GAP of the level's features) through
//! an affine layer and a sigmoid, producing per-channel gates in (0,1) that
//! switch the shared features toward the input's modality. Level 1 uses the
//! one-hot modality indicator as context; deeper levels feed the previous
//! level's gate vector forward (the `Indicator` mode instead reuses the raw
//! indicator everywhere).

use rand::Rng;

use crate::modality::Modality;
use crate::nn::{Binding, ConvParams, LinearParams, ParamStore};
use crate::tensor::{Element, Graph, NodeId, TResult, Tensor, TensorError};

pub const LEVELS: usize = 5;

/// Context fed to the per-level weight generator for levels 2..5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MiwgMode {
    /// Previous level's gate vector is the context (default).
    #[default]
    Recursive,
    /// The one-hot indicator is the context at every level.
    Indicator,
}

impl MiwgMode {
    pub fn parse(s: &str) -> Option<MiwgMode> {
        match s.to_ascii_lowercase().as_str() {
            "recursive" => Some(MiwgMode::Recursive),
            "indicator" => Some(MiwgMode::Indicator),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MiwgMode::Recursive => "recursive",
            MiwgMode::Indicator => "indicator",
        }
    }
}

/// Gating behaviour of [`Msfe::extract`]. `ForceUnit` bypasses the gates so
/// the output equals the bare backbone forward; used by tests and parameter
/// ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    #[default]
    Learned,
    ForceUnit,
}

#[derive(Debug, Clone, Copy)]
struct Stage {
    conv_down: ConvParams,
    scale: crate::nn::ParamId,
    shift: crate::nn::ParamId,
    conv_a: ConvParams,
    conv_b: ConvParams,
}

/// Parameter handles for the extractor: backbone stages, per-level weight
/// generators, and the modality classifier head.
#[derive(Debug, Clone)]
pub struct Msfe {
    pub k: usize,
    pub widths: [usize; LEVELS],
    pub miwg_mode: MiwgMode,
    stages: [Stage; LEVELS],
    miwg: [LinearParams; LEVELS],
    classifier: LinearParams,
}

/// Five levels of gated features plus the gate vectors that produced them.
#[derive(Debug, Clone)]
pub struct UnimodalFeatures {
    pub modality: Modality,
    /// Gated features F^1..F^5, level i at spatial size H/2^i x W/2^i.
    pub levels: [NodeId; LEVELS],
    /// Gate vectors w^1..w^5, each [B, C_i] in (0,1).
    pub gates: [NodeId; LEVELS],
}

impl Msfe {
    pub fn register<E: Element>(
        store: &mut ParamStore<E>,
        k: usize,
        widths: [usize; LEVELS],
        miwg_mode: MiwgMode,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            widths.windows(2).all(|w| w[0] < w[1]),
            "backbone widths must be strictly increasing, got {widths:?}"
        );
        let mut stages = Vec::with_capacity(LEVELS);
        let mut c_prev = 3usize;
        for (i, &c) in widths.iter().enumerate() {
            let name = format!("backbone.stage{}", i + 1);
            let conv_down = ConvParams::register(store, &format!("{name}.conv1"), c_prev, c, 3, 2, 1, rng);
            let scale = store.register(format!("{name}.affine.scale"), Tensor::ones(vec![c]), false);
            let shift = store.register(format!("{name}.affine.shift"), Tensor::zeros(vec![c]), false);
            let conv_a = ConvParams::register(store, &format!("{name}.conv2"), c, c, 3, 1, 1, rng);
            let conv_b = ConvParams::register(store, &format!("{name}.conv3"), c, c, 3, 1, 1, rng);
            stages.push(Stage {
                conv_down,
                scale,
                shift,
                conv_a,
                conv_b,
            });
            c_prev = c;
        }
        let mut miwg = Vec::with_capacity(LEVELS);
        for (i, &c) in widths.iter().enumerate() {
            let ctx_len = match (miwg_mode, i) {
                (_, 0) => k,
                (MiwgMode::Recursive, _) => widths[i - 1],
                (MiwgMode::Indicator, _) => k,
            };
            miwg.push(LinearParams::register(
                store,
                &format!("miwg.level{}", i + 1),
                ctx_len + c,
                c,
                true,
                rng,
            ));
        }
        let classifier = LinearParams::register(store, "classifier", widths[LEVELS - 1], k, true, rng);
        Msfe {
            k,
            widths,
            miwg_mode,
            stages: stages.try_into().expect("five stages"),
            miwg: miwg.try_into().expect("five generators"),
            classifier,
        }
    }

    fn stage_forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        binding: &Binding,
        level: usize,
        x: NodeId,
    ) -> TResult<NodeId> {
        let st = &self.stages[level];
        let y = st.conv_down.apply(g, binding, x)?;
        let y = g.channel_affine(y, binding.node(st.scale), binding.node(st.shift))?;
        let y = g.relu(y)?;
        let y = st.conv_a.apply(g, binding, y)?;
        let y = g.relu(y)?;
        let y = st.conv_b.apply(g, binding, y)?;
        g.relu(y)
    }

    /// Plain five-level backbone forward with no gating.
    pub fn backbone_forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        binding: &Binding,
        x: NodeId,
    ) -> TResult<[NodeId; LEVELS]> {
        let mut levels = [0usize; LEVELS];
        let mut cur = x;
        for (i, slot) in levels.iter_mut().enumerate() {
            cur = self.stage_forward(g, binding, i, cur)?;
            *slot = cur;
        }
        Ok(levels)
    }

    /// One weight-generator evaluation: sigmoid(Linear(Cat(context, gap))).
    pub fn miwg<E: Element>(
        &self,
        g: &mut Graph<E>,
        binding: &Binding,
        level: usize,
        context: NodeId,
        gap_feat: NodeId,
    ) -> TResult<NodeId> {
        let expected_ctx = match (self.miwg_mode, level) {
            (_, 0) => self.k,
            (MiwgMode::Recursive, _) => self.widths[level - 1],
            (MiwgMode::Indicator, _) => self.k,
        };
        let got = g.value(context).shape().to_vec();
        if got.len() != 2 || got[1] != expected_ctx {
            return Err(TensorError::contract(
                "miwg",
                format!(
                    "level {} context must be [B, {}], got {:?}",
                    level + 1,
                    expected_ctx,
                    got
                ),
            ));
        }
        let cat = g.concat(&[context, gap_feat], 1)?;
        let lin = self.miwg[level].apply(g, binding, cat)?;
        g.sigmoid(lin)
    }

    /// Extract five levels of gated unimodal features from one image batch.
    pub fn extract<E: Element>(
        &self,
        g: &mut Graph<E>,
        binding: &Binding,
        x: NodeId,
        modality: Modality,
        gate_mode: GateMode,
    ) -> TResult<UnimodalFeatures> {
        let sx = g.value(x).shape().to_vec();
        if sx.len() != 4 || sx[1] != 3 {
            return Err(TensorError::dim(
                "extract",
                format!("input must be [B,3,H,W], got {:?}", sx),
            ));
        }
        if modality.index() >= self.k {
            return Err(TensorError::contract(
                "extract",
                format!(
                    "modality {} outside configured universe K={}",
                    modality.label(),
                    self.k
                ),
            ));
        }
        let batch = sx[0];
        let indicator: Tensor<E> = modality
            .indicator::<E>(self.k)
            .map_err(|e| TensorError::contract("extract", e.to_string()))?;
        let tiled = Tensor::from_fn(vec![batch, self.k], |i| indicator.data()[i % self.k]);
        let indicator_node = g.constant(tiled);

        let mut levels = [0usize; LEVELS];
        let mut gates = [0usize; LEVELS];
        let mut cur = x;
        let mut prev_gate = indicator_node;
        for i in 0..LEVELS {
            let f_hat = self.stage_forward(g, binding, i, cur)?;
            let gap = g.gap(f_hat)?;
            let context = match (self.miwg_mode, i) {
                (_, 0) => indicator_node,
                (MiwgMode::Recursive, _) => prev_gate,
                (MiwgMode::Indicator, _) => indicator_node,
            };
            let gate = self.miwg(g, binding, i, context, gap)?;
            let feat = match gate_mode {
                GateMode::Learned => g.channel_mul(f_hat, gate)?,
                GateMode::ForceUnit => f_hat,
            };
            levels[i] = feat;
            gates[i] = gate;
            cur = feat;
            prev_gate = gate;
        }
        Ok(UnimodalFeatures {
            modality,
            levels,
            gates,
        })
    }

    /// Modality probabilities from fifth-level features:
    /// softmax(Linear(GAP(F^5))). Rows sum to 1.
    pub fn classify<E: Element>(
        &self,
        g: &mut Graph<E>,
        binding: &Binding,
        f5: NodeId,
    ) -> TResult<NodeId> {
        let gap = g.gap(f5)?;
        let logits = self.classifier.apply(g, binding, gap)?;
        g.softmax_rows(logits)
    }
}

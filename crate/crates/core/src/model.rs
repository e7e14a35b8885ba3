//! Full network: switch feature extractor -> per-level dynamic fusion ->
//! saliency decoder, with the modality classifier head alongside.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::config::ModelConfig;
use crate::decoder::Decoder;
use crate::dfm::Dfm;
use crate::error::{AmsnError, Result};
use crate::modality::Modality;
use crate::msfe::{GateMode, Msfe, UnimodalFeatures, LEVELS};
use crate::nn::{Binding, ParamStore};
use crate::tensor::{Element, Graph, NodeId, TResult, Tensor, TensorError};

/// One forward pass over a (possibly multi-modal) batch.
#[derive(Debug)]
pub struct MsnOutputs {
    /// Saliency maps S^1..S^4, level i at H/2^i x W/2^i, values in (0,1).
    pub maps: [NodeId; 4],
    /// Per-modality gated features, in canonical modality order.
    pub features: Vec<(Modality, UnimodalFeatures)>,
    /// Per-modality classifier probabilities [B, K].
    pub probs: Vec<(Modality, NodeId)>,
}

/// Parameter-count breakdown used by the structural-economy checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub backbone: usize,
    pub miwg: usize,
    pub classifier: usize,
    pub dfm: usize,
    pub decoder: usize,
}

impl ParamCounts {
    /// Extractor total: shared backbone plus gates plus classifier.
    pub fn msfe_total(&self) -> usize {
        self.backbone + self.miwg + self.classifier
    }

    pub fn total(&self) -> usize {
        self.msfe_total() + self.dfm + self.decoder
    }
}

pub struct MsnModel<E: Element> {
    pub config: ModelConfig,
    pub store: ParamStore<E>,
    pub msfe: Msfe,
    pub dfm: Dfm,
    pub decoder: Decoder,
}

impl<E: Element> MsnModel<E> {
    /// Fresh model with Kaiming-initialized parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let msfe = Msfe::register(&mut store, config.k, config.widths, config.miwg_mode, &mut rng);
        let dfm = Dfm::register(&mut store, config.k, &config.widths, &mut rng);
        let decoder = Decoder::register(&mut store, &config.widths, &mut rng);
        Ok(MsnModel {
            config,
            store,
            msfe,
            dfm,
            decoder,
        })
    }

    /// Rebuild a model around externally loaded parameters (checkpoint).
    /// Every parameter name must be present with a matching shape.
    pub fn with_parameters(
        config: ModelConfig,
        params: Vec<(String, Tensor<E>)>,
    ) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let expected = model.store.len();
        let mut seen = 0usize;
        for (name, tensor) in params {
            if name.starts_with("meta/") {
                continue;
            }
            model
                .store
                .set_by_name(&name, tensor)
                .map_err(|e| AmsnError::Data(format!("checkpoint parameter mismatch: {e}")))?;
            seen += 1;
        }
        if seen != expected {
            return Err(AmsnError::Data(format!(
                "checkpoint holds {seen} parameters, model expects {expected}"
            )));
        }
        Ok(model)
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            backbone: self.store.param_count("backbone."),
            miwg: self.store.param_count("miwg."),
            classifier: self.store.param_count("classifier"),
            dfm: self.store.param_count("dfm."),
            decoder: self.store.param_count("decoder."),
        }
    }

    /// Forward over one batch. `inputs` pairs each modality with an image
    /// batch node [B,3,H,W]; all entries must share shape. Modalities are
    /// canonicalized to RGB, D, T order first, which together with the
    /// order-invariant fusion makes results independent of argument order.
    pub fn forward(
        &self,
        g: &mut Graph<E>,
        binding: &Binding,
        inputs: &[(Modality, NodeId)],
        gate_mode: GateMode,
    ) -> TResult<MsnOutputs> {
        if inputs.is_empty() {
            return Err(TensorError::contract("forward", "at least one modality required".to_string()));
        }
        let mut ordered: Vec<(Modality, NodeId)> = inputs.to_vec();
        ordered.sort_by_key(|(m, _)| m.index());
        for w in ordered.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(TensorError::contract(
                    "forward",
                    format!("modality {} supplied twice", w[0].0.label()),
                ));
            }
        }
        let shape0 = g.value(ordered[0].1).shape().to_vec();
        for &(m, x) in &ordered {
            if g.value(x).shape() != shape0 {
                return Err(TensorError::dim(
                    "forward",
                    format!(
                        "modality {} batch {:?} differs from {:?}",
                        m.label(),
                        g.value(x).shape(),
                        shape0
                    ),
                ));
            }
        }

        let mut features = Vec::with_capacity(ordered.len());
        for &(m, x) in &ordered {
            let f = self.msfe.extract(g, binding, x, m, gate_mode)?;
            features.push((m, f));
        }

        let mut fused = [0usize; LEVELS];
        for (level, slot) in fused.iter_mut().enumerate() {
            let level_inputs: Vec<NodeId> = features.iter().map(|(_, f)| f.levels[level]).collect();
            *slot = self.dfm.fuse(g, binding, level, &level_inputs)?;
        }
        let maps = self.decoder.decode(g, binding, &fused)?;

        let mut probs = Vec::with_capacity(features.len());
        for (m, f) in &features {
            probs.push((*m, self.msfe.classify(g, binding, f.levels[LEVELS - 1])?));
        }
        Ok(MsnOutputs {
            maps,
            features,
            probs,
        })
    }

    /// Inference: returns the final saliency map S^1 as a value tensor
    /// [B,1,H/2,W/2].
    pub fn predict(&self, inputs: &[(Modality, Tensor<E>)]) -> Result<Tensor<E>> {
        let mut g = Graph::new();
        let binding = self.store.bind_const(&mut g);
        let ids: Vec<(Modality, NodeId)> = inputs
            .iter()
            .map(|(m, t)| (*m, g.constant(t.clone())))
            .collect();
        let out = self.forward(&mut g, &binding, &ids, GateMode::Learned)?;
        Ok(g.value(out.maps[0]).clone())
    }
}

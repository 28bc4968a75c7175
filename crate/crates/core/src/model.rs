use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::backbones::{Backbone, BackboneConfig, LayerStates};
use crate::data::Inputs;
use crate::error::{Error, Result};
use crate::heads::{count_parameters, Head, HeadConfig, HeadOutput};
use crate::params::{Bound, ParamStore};
use crate::rng::{SeededRng, Stream};

/// Architecture of a backbone + head pairing; everything needed to rebuild
/// a model from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

impl ModelSpec {
    pub fn new(backbone: BackboneConfig, head: HeadConfig) -> Self {
        ModelSpec { backbone, head }
    }

    pub fn build(&self, seed: u64) -> Result<Model> {
        Model::new(self.clone(), seed)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    backbone: Backbone,
    head: Head,
    /// Backbone parameters first, then head parameters.
    pub params: ParamStore,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub states: LayerStates,
    pub head: HeadOutput,
}

impl Model {
    /// Initialises all parameters from the seed's init stream.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed, Stream::Init);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(spec.backbone.clone(), &mut params, &mut rng)?;
        let dims = backbone.dims();
        let head =
            Head::new(spec.head.clone(), &dims, &mut params, &mut rng).map_err(|e| match e {
                Error::Config { field, msg } if field == "head" => {
                    Error::config("head", format!("{msg} (backbone layer dims {dims:?})"))
                }
                e => e,
            })?;
        Ok(Model {
            spec,
            backbone,
            head,
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn head_parameter_count(&self) -> usize {
        count_parameters(&self.spec.head, &self.backbone.dims())
    }

    /// Binds every parameter as trainable and runs backbone then head.
    pub fn forward(
        &self,
        g: &mut Graph,
        inputs: &Inputs,
        trainable: bool,
    ) -> Result<(Bound, ForwardPass)> {
        let p = self.params.bind(g, trainable);
        let states = self.backbone.forward(g, &p, inputs)?;
        let head = self.head.forward(g, &p, &states)?;
        Ok((p, ForwardPass { states, head }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadKind;

    #[test]
    fn frozen_model_has_only_head_parameters() {
        let spec = ModelSpec::new(
            BackboneConfig::Frozen { dims: vec![4, 6] },
            HeadConfig::new(HeadKind::Laya, 3),
        );
        let m = spec.build(1).unwrap();
        assert_eq!(m.params.num_scalars(), m.head_parameter_count());
        assert!(m.params.names().iter().all(|n| n.starts_with("head.")));
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = ModelSpec::new(BackboneConfig::mlp(), HeadConfig::new(HeadKind::Concat, 10));
        assert_eq!(spec.build(3).unwrap().params, spec.build(3).unwrap().params);
        assert_ne!(spec.build(3).unwrap().params, spec.build(4).unwrap().params);
    }
}

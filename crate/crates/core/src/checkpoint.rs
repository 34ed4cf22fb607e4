//! Versioned JSON checkpoints: an architecture descriptor plus the flat
//! parameter vector. Floats round-trip exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierParams;
use crate::error::{Error, Result};
use crate::mwnet::{MwNetParams, MwNetShape, Variant};
use crate::nn::{Activation, DenseLayer, FlatParams, Mlp};
use crate::rng::RngState;

pub const FORMAT: &str = "metaweight-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelDescriptor {
    Classifier {
        dims: Vec<usize>,
        hidden_activation: Activation,
    },
    Mwnet {
        shape: MwNetShape,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelDescriptor,
    pub params: Vec<f64>,
}

fn checked_mlp_params(dims: &[usize]) -> Option<usize> {
    dims.windows(2).try_fold(0usize, |acc, w| {
        acc.checked_add(w[0].checked_mul(w[1])?.checked_add(w[1])?)
    })
}

/// Parameter count implied by a descriptor, or `None` on overflow.
fn expected_params(model: &ModelDescriptor) -> Option<usize> {
    match model {
        ModelDescriptor::Classifier { dims, .. } => checked_mlp_params(dims),
        ModelDescriptor::Mwnet { shape } => {
            let k = shape.num_classes;
            let h = shape.hidden;
            let p = shape.psi_dim;
            match shape.variant {
                Variant::Standard => Some(0),
                Variant::LossNet => checked_mlp_params(&[1, h, 1]),
                Variant::LogitNet => k
                    .checked_mul(k)?
                    .checked_add(checked_mlp_params(&[k, h, 1])?),
                Variant::MetaInfoNet => {
                    let ib = checked_mlp_params(&[k, p])?.checked_mul(2)?;
                    let align = checked_mlp_params(&[p.checked_add(k)?, k])?;
                    k.checked_mul(k)?
                        .checked_add(ib)?
                        .checked_add(align)?
                        .checked_add(checked_mlp_params(&[k, h, 1])?)
                }
            }
        }
    }
}

impl Checkpoint {
    pub fn from_classifier(params: &ClassifierParams) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: ModelDescriptor::Classifier {
                dims: params.dims(),
                hidden_activation: params.hidden_activation(),
            },
            params: params.to_flat(),
        }
    }

    pub fn from_mwnet(params: &MwNetParams) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: ModelDescriptor::Mwnet {
                shape: params.shape(),
            },
            params: params.to_flat(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Data(format!("encoding checkpoint: {e}")))
    }

    /// Decodes and validates header, descriptor and parameter count.
    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line() as u64,
            message: e.to_string(),
        })?;
        if ck.format != FORMAT {
            return Err(Error::data(format!(
                "not a checkpoint (format '{}')",
                ck.format
            )));
        }
        if ck.version != VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        let expected = expected_params(&ck.model)
            .ok_or_else(|| Error::data("checkpoint architecture overflows"))?;
        if expected != ck.params.len() {
            return Err(Error::data(format!(
                "checkpoint holds {} parameters, architecture needs {expected}",
                ck.params.len()
            )));
        }
        if ck.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("checkpoint contains non-finite parameters"));
        }
        Ok(ck)
    }

    pub fn into_classifier(self) -> Result<ClassifierParams> {
        let ModelDescriptor::Classifier {
            dims,
            hidden_activation,
        } = &self.model
        else {
            return Err(Error::data("checkpoint does not hold a classifier"));
        };
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::data(format!("invalid classifier dims {dims:?}")));
        }
        if expected_params(&self.model) != Some(self.params.len()) {
            return Err(Error::data(
                "checkpoint parameter count does not match its architecture",
            ));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last {
                    Activation::Identity
                } else {
                    *hidden_activation
                };
                DenseLayer::zeros(w[0], w[1], act)
            })
            .collect();
        let mut params = ClassifierParams::from_mlp(Mlp::new(layers)?)?;
        params.set_flat(&self.params)?;
        Ok(params)
    }

    pub fn into_mwnet(self) -> Result<MwNetParams> {
        let ModelDescriptor::Mwnet { shape } = self.model else {
            return Err(Error::data("checkpoint does not hold a weighting network"));
        };
        if expected_params(&self.model) != Some(self.params.len()) {
            return Err(Error::data(
                "checkpoint parameter count does not match its architecture",
            ));
        }
        let mut params = MwNetParams::init(shape, &mut RngState::new(0))
            .map_err(|e| Error::data(e.to_string()))?;
        params.set_flat(&self.params)?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifier_roundtrip_is_exact() {
        let c = ClassifierParams::new(&[2, 5, 3], Activation::Relu, &mut RngState::new(4)).unwrap();
        let json = Checkpoint::from_classifier(&c).to_json().unwrap();
        let back = Checkpoint::from_json(&json)
            .unwrap()
            .into_classifier()
            .unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn mwnet_roundtrip_every_variant() {
        for variant in [
            Variant::Standard,
            Variant::LossNet,
            Variant::LogitNet,
            Variant::MetaInfoNet,
        ] {
            let shape = MwNetShape {
                variant,
                num_classes: 3,
                hidden: 4,
                psi_dim: 2,
            };
            let m = MwNetParams::init(shape, &mut RngState::new(9)).unwrap();
            let ck = Checkpoint::from_mwnet(&m);
            assert_eq!(
                expected_params(&ck.model),
                Some(m.num_params()),
                "{variant}"
            );
            let back = Checkpoint::from_json(&ck.to_json().unwrap())
                .unwrap()
                .into_mwnet()
                .unwrap();
            assert_eq!(back.to_flat(), m.to_flat());
            assert_eq!(back.variant(), variant);
        }
    }

    #[test]
    fn rejects_bad_headers_and_counts() {
        let c = ClassifierParams::new(&[2, 2], Activation::Relu, &mut RngState::new(1)).unwrap();
        let mut ck = Checkpoint::from_classifier(&c);
        ck.version = 7;
        assert!(Checkpoint::from_json(&ck.to_json().unwrap()).is_err());
        let mut ck = Checkpoint::from_classifier(&c);
        ck.params.pop();
        assert!(Checkpoint::from_json(&ck.to_json().unwrap()).is_err());
        let huge = r#"{"format":"metaweight-checkpoint","version":1,
            "model":{"kind":"classifier","dims":[18446744073709551615,3],"hidden_activation":"relu"},"params":[]}"#;
        assert!(Checkpoint::from_json(huge).is_err());
        assert!(Checkpoint::from_json("{").is_err());
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        let c = ClassifierParams::new(&[2, 2], Activation::Relu, &mut RngState::new(1)).unwrap();
        assert!(Checkpoint::from_classifier(&c).into_mwnet().is_err());
    }
}

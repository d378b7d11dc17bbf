//! JSON checkpoints holding the configuration, vocabularies and every named
//! parameter tensor. Floats round-trip exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cgcn::LabelSet;
use crate::config::ModelConfig;
use crate::corpus::Vocabulary;
use crate::dgcn::RelationSet;
use crate::error::{Error, Result};
use crate::model::HgcnModel;

pub const FORMAT: &str = "hgcn-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub labels: LabelSet,
    pub relations: RelationSet,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &HgcnModel) -> Result<Self> {
        let params = model
            .params
            .iter()
            .map(|(_, name, t)| {
                if t.data().iter().any(|x| !x.is_finite()) {
                    return Err(Error::Checkpoint(format!("parameter {name} has non-finite values")));
                }
                Ok(NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            config: model.config.clone(),
            vocab: model.vocab.clone(),
            labels: model.labels.clone(),
            relations: model.relations.clone(),
            params,
        })
    }

    /// Rebuilds the architecture from the stored configuration and copies
    /// parameters in, checking names and shapes.
    pub fn into_model(self) -> Result<HgcnModel> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let mut vocab = self.vocab;
        vocab.reindex();
        let mut labels = self.labels;
        labels.reindex();
        let mut relations = self.relations;
        relations.reindex();
        let mut model = HgcnModel::new(self.config, vocab, labels, relations, None)?;
        if self.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, the configured model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for p in self.params {
            let id = model
                .params
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {}", p.name)))?;
            let t = model.params.get_mut(id);
            if t.shape() != p.shape.as_slice() || t.len() != p.data.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    p.shape,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&p.data);
        }
        Ok(model)
    }
}

pub fn to_json(model: &HgcnModel) -> Result<String> {
    Ok(serde_json::to_string(&Checkpoint::from_model(model)?)?)
}

pub fn from_json(text: &str) -> Result<HgcnModel> {
    let ck: Checkpoint = serde_json::from_str(text)?;
    ck.into_model()
}

pub fn save(model: &HgcnModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_json(model)?).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<HgcnModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{generate, ToyOptions};
    use crate::corpus::AnnotatedSentence;
    use rand::{Rng, SeedableRng};

    fn model() -> (HgcnModel, Vec<AnnotatedSentence>) {
        let recs = generate(&ToyOptions { size: 5, ..Default::default() });
        let data: Vec<_> = recs.iter().enumerate().map(|(i, r)| AnnotatedSentence::from_record(r, i).unwrap()).collect();
        let config = ModelConfig {
            embedding_dim: 6,
            hidden_dim: 3,
            label_dim: 4,
            relation_dim: 2,
            ..Default::default()
        };
        (HgcnModel::for_corpus(config, &data, None).unwrap(), data)
    }

    #[test]
    fn parameters_round_trip_bit_exactly() {
        let (mut m, data) = model();
        // Awkward values: subnormals, long mantissas, negative zero.
        let mut rng = crate::nn::ModelRng::seed_from_u64(1);
        for id in m.params.ids().collect::<Vec<_>>() {
            for x in m.params.get_mut(id).data_mut() {
                *x = rng.random::<f64>() * 10f64.powi(rng.random_range(-300..300));
            }
        }
        let first = m.arch.classifier.weight;
        m.params.get_mut(first).data_mut()[0] = -0.0;
        m.params.get_mut(first).data_mut()[1] = 5e-324;
        let back = from_json(&to_json(&m).unwrap()).unwrap();
        for ((_, na, a), (_, nb, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            let bits = |t: &crate::tensor::Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b), "{na}");
        }
        assert_eq!(back.vocab.id("food"), m.vocab.id("food"));
        assert_eq!(back.config, m.config);
        let _ = data;
    }

    #[test]
    fn predictions_survive_reload() {
        let (m, data) = model();
        let back = from_json(&to_json(&m).unwrap()).unwrap();
        assert_eq!(m.predict(&data[0]).unwrap(), back.predict(&data[0]).unwrap());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (m, _) = model();
        let mut ck = Checkpoint::from_model(&m).unwrap();
        ck.params[3].shape = vec![1, 1];
        ck.params[3].data = vec![0.0];
        assert!(matches!(ck.into_model(), Err(Error::Checkpoint(msg)) if msg.contains("shape")));
    }

    #[test]
    fn non_finite_values_cannot_be_saved() {
        let (mut m, _) = model();
        let id = m.arch.crf.start;
        m.params.get_mut(id).data_mut()[0] = f64::NAN;
        assert!(to_json(&m).is_err());
    }
}

//! Checkpoint directory: `params/<name>.ten` per tensor, `embeddings.csv`,
//! `manifest.txt` (`name<TAB>shape<TAB>sha256`) and `state.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::semantics::parse_embeddings;
use crate::tensor::optim::SgdConfig;
use crate::tensor::{ten1, ParamStore};
use crate::util::checksum;

use super::model::{LossWeights, Model, ModelConfig, Stage};

pub const PARAMS_DIR: &str = "params";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const STATE_FILE: &str = "state.txt";

/// Where a run stands. Momentum buffers are not persisted: each stage
/// starts a fresh optimizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingState {
    pub stage: Stage,
    /// Epochs completed in `stage`.
    pub epoch: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub weights: LossWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub state: TrainingState,
}

fn shape_text(shape: &[usize]) -> String {
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn state_lines(model: &ModelConfig, s: &TrainingState) -> Vec<(&'static str, String)> {
    vec![
        ("stage", s.stage.number().to_string()),
        ("epoch", s.epoch.to_string()),
        ("seed", s.seed.to_string()),
        ("variant", model.variant.to_string()),
        ("n_categories", model.n_categories.to_string()),
        ("visual_dim", model.visual_dim.to_string()),
        ("text_dim", model.text_dim.to_string()),
        ("shared_dim", model.shared_dim.to_string()),
        ("gate", model.gate.to_string()),
        ("lr", format!("{:?}", s.sgd.lr)),
        ("momentum", format!("{:?}", s.sgd.momentum)),
        ("weight_decay", format!("{:?}", s.sgd.weight_decay)),
        ("batch_size", s.batch_size.to_string()),
        ("w_det", format!("{:?}", s.weights.det)),
        ("w_sa", format!("{:?}", s.weights.sa)),
        ("w_sc", format!("{:?}", s.weights.sc)),
    ]
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let pdir = dir.join(PARAMS_DIR);
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        let mut manifest = String::new();
        for (name, t) in self.model.params.iter() {
            let body = ten1::encode(t);
            write(&pdir.join(format!("{name}.ten")), &body)?;
            manifest.push_str(&format!(
                "{name}\t{}\t{}\n",
                shape_text(t.shape()),
                checksum(body.as_bytes())
            ));
        }
        let emb = self.model.embeddings.to_csv();
        write(&dir.join(EMBEDDINGS_FILE), &emb)?;
        manifest.push_str(&format!(
            "{EMBEDDINGS_FILE}\t{}\t{}\n",
            shape_text(self.model.embeddings.matrix().shape()),
            checksum(emb.as_bytes())
        ));
        write(&dir.join(MANIFEST_FILE), &manifest)?;
        let state: String = state_lines(&self.model.config, &self.state)
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        write(&dir.join(STATE_FILE), &state)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spath = dir.join(STATE_FILE);
        let origin = spath.display().to_string();
        let mut kv = BTreeMap::new();
        for (i, line) in read(&spath)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                path: origin.clone(),
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn field<T: std::str::FromStr>(
            kv: &BTreeMap<String, String>,
            key: &str,
            origin: &str,
        ) -> Result<T> {
            let v = kv
                .get(key)
                .ok_or_else(|| Error::Validation(format!("{origin}: missing `{key}`")))?;
            v.parse()
                .map_err(|_| Error::Validation(format!("{origin}: bad value {v:?} for `{key}`")))
        }
        let stage_num: u8 = field(&kv, "stage", &origin)?;
        let config = ModelConfig {
            variant: kv
                .get("variant")
                .ok_or_else(|| Error::Validation(format!("{origin}: missing `variant`")))?
                .parse()?,
            n_categories: field(&kv, "n_categories", &origin)?,
            visual_dim: field(&kv, "visual_dim", &origin)?,
            text_dim: field(&kv, "text_dim", &origin)?,
            shared_dim: field(&kv, "shared_dim", &origin)?,
            gate: kv
                .get("gate")
                .ok_or_else(|| Error::Validation(format!("{origin}: missing `gate`")))?
                .parse()?,
        };
        let state = TrainingState {
            stage: Stage::from_number(stage_num).map_err(|e| Error::Validation(e.to_string()))?,
            epoch: field(&kv, "epoch", &origin)?,
            seed: field(&kv, "seed", &origin)?,
            sgd: SgdConfig {
                lr: field(&kv, "lr", &origin)?,
                momentum: field(&kv, "momentum", &origin)?,
                weight_decay: field(&kv, "weight_decay", &origin)?,
            },
            batch_size: field(&kv, "batch_size", &origin)?,
            weights: LossWeights {
                det: field(&kv, "w_det", &origin)?,
                sa: field(&kv, "w_sa", &origin)?,
                sc: field(&kv, "w_sc", &origin)?,
            },
        };

        let mpath = dir.join(MANIFEST_FILE);
        let mut params = ParamStore::new();
        let mut embeddings = None;
        for (i, line) in read(&mpath)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let [name, shape, sum] = f[..] else {
                return Err(Error::Format {
                    path: mpath.display().to_string(),
                    line: i + 1,
                    msg: "expected `name<TAB>shape<TAB>checksum`".into(),
                });
            };
            let path = if name == EMBEDDINGS_FILE {
                dir.join(name)
            } else {
                dir.join(PARAMS_DIR).join(format!("{name}.ten"))
            };
            let body = read(&path)?;
            if checksum(body.as_bytes()) != sum {
                return Err(Error::Validation(format!(
                    "checksum mismatch for {}",
                    path.display()
                )));
            }
            let loaded_shape;
            if name == EMBEDDINGS_FILE {
                let e = parse_embeddings::<f32>(body.as_bytes(), &path.display().to_string())?;
                loaded_shape = e.matrix().shape().to_vec();
                embeddings = Some(e);
            } else {
                let t = ten1::decode::<f32>(&body, &path.display().to_string())?;
                loaded_shape = t.shape().to_vec();
                params.insert(name, t);
            }
            if shape_text(&loaded_shape) != shape {
                return Err(Error::Validation(format!(
                    "{}: shape {} does not match manifest {shape}",
                    path.display(),
                    shape_text(&loaded_shape)
                )));
            }
        }
        let embeddings = embeddings.ok_or_else(|| {
            Error::Validation(format!("{}: no embeddings entry", mpath.display()))
        })?;
        let expected = config.init_params::<f32>(0);
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Validation(format!(
                        "parameter {name} has shape {:?}, configuration implies {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => {
                    return Err(Error::Validation(format!(
                        "checkpoint lacks parameter {name}"
                    )))
                }
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Validation(
                "checkpoint has unexpected parameters".into(),
            ));
        }
        let mut model = Model::new(config, embeddings, 0)?;
        model.params = params;
        Ok(Self { model, state })
    }
}

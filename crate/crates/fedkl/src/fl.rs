//! Deterministic federated-learning simulator. A round dispatches the global
//! shareable parameters, lets every client train locally (keeping its own
//! key and lock), and aggregates the returned shareable updates in canonical
//! client order. Lock-private parameters never enter the shared messages —
//! the message types simply have no field for them.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::keylock::Key;
use crate::layers::one_hot;
use crate::model::{
    forward_backward, sgd_step, GradientBundle, Model, ModelSpec, ParamTag,
};
use crate::rng;
use crate::tensor::Tensor;

/// What the server holds and distributes: the architecture plus shareable
/// parameters only. There is no field for keys or lock weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub spec: ModelSpec,
    pub shareable: BTreeMap<String, Tensor>,
}

impl GlobalModel {
    pub fn from_model(model: &Model) -> Self {
        GlobalModel {
            spec: model.spec().clone(),
            shareable: model.shareable_params(),
        }
    }
}

/// One client: private model copy, private key, data shard, local step size.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub model: Model,
    pub key: Option<Key>,
    pub shard: Dataset,
    pub lr: f64,
}

/// A client's contribution to one round: shareable gradients only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub bundle: GradientBundle,
    pub weight: f64,
}

/// Everything one round produced, for persistence and replay comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub updates: Vec<ClientUpdate>,
    pub aggregate: GradientBundle,
    /// Per-client own-key accuracy on the client's shard, post local update.
    pub accuracy: Vec<f64>,
}

/// Which key (and lock weights) an evaluation borrows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeySource {
    /// The reference client's own key and trained lock.
    Own,
    /// Another client's key and lock on the same shareable parameters.
    OtherClient(usize),
    /// A fresh key and freshly initialized lock weights.
    Random(u64),
}

/// Install global shareable parameters into a client model, leaving the
/// client's lock untouched. The global set must cover the shareable registry
/// exactly.
pub fn install_shareable(model: &mut Model, global: &GlobalModel) -> Result<()> {
    let expected: Vec<String> = model
        .registry()
        .into_iter()
        .filter(|p| p.tag == ParamTag::Shareable)
        .map(|p| p.name)
        .collect();
    if expected.len() != global.shareable.len()
        || expected.iter().any(|n| !global.shareable.contains_key(n))
    {
        return Err(Error::RegistryMismatch {
            msg: format!(
                "global carries {} parameters, client expects {:?}",
                global.shareable.len(),
                expected
            ),
        });
    }
    for (name, tensor) in &global.shareable {
        let slot = model.param_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(Error::RegistryMismatch {
                msg: format!(
                    "parameter {name}: global shape {:?} vs client {:?}",
                    tensor.shape(),
                    slot.shape()
                ),
            });
        }
        *slot = tensor.clone();
    }
    Ok(())
}

/// Client-side work for one round: install the global shareable parameters,
/// run `epochs` full-batch training passes (the lock layer trains too, but
/// stays local), and return the shareable weight delta divided by the local
/// step size — gradient-equivalent, and exactly the single-batch gradient
/// when `epochs == 1`.
pub fn local_update(
    client: &mut ClientState,
    global: &GlobalModel,
    epochs: usize,
) -> Result<GradientBundle> {
    install_shareable(&mut client.model, global)?;
    let before = client.model.shareable_params();

    let all: Vec<usize> = (0..client.shard.len()).collect();
    let (images, labels) = client.shard.batch(&all)?;
    let x = client.model.prepare_input(&images)?;
    let y = one_hot(&labels, client.shard.classes)?;
    for _ in 0..epochs {
        let out = forward_backward(&client.model, &x, &y, client.key.as_ref())?;
        sgd_step(&mut client.model, &out.grads, client.lr)?;
    }

    let mut bundle = GradientBundle::new();
    for (name, old) in &before {
        let now = client.model.param(name)?;
        bundle.insert(
            name.clone(),
            old.sub(now)?.scale(1.0 / client.lr)?,
            ParamTag::Shareable,
        );
    }
    Ok(bundle)
}

/// Weighted mean of client bundles, normalized to weight 1. Reduction runs
/// in client-id order regardless of arrival order, so the fold is exactly
/// permutation invariant. Lock-tagged entries are refused outright.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<GradientBundle> {
    if updates.is_empty() {
        return Err(Error::InvalidArgument {
            op: "fedavg_aggregate",
            msg: "no client updates to aggregate".to_string(),
        });
    }
    let total: f64 = updates.iter().map(|u| u.weight).sum();
    if updates.iter().any(|u| u.weight < 0.0) || total <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "fedavg_aggregate",
            msg: "weights must be non-negative with a positive sum".to_string(),
        });
    }
    for u in updates {
        if u.bundle.iter().any(|(_, e)| e.tag == ParamTag::LockPrivate) {
            return Err(Error::Invariant {
                msg: format!("client {} update carries lock-private entries", u.client_id),
            });
        }
        if !u.bundle.same_registry(&updates[0].bundle) {
            return Err(Error::RegistryMismatch {
                msg: format!("client {} bundle registry disagrees", u.client_id),
            });
        }
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);

    let mut acc: Option<GradientBundle> = None;
    for i in order {
        let scaled = updates[i].bundle.scale(updates[i].weight / total)?;
        acc = Some(match acc {
            None => scaled,
            Some(prev) => prev.add(&scaled)?,
        });
    }
    Ok(acc.expect("non-empty updates"))
}

/// One deterministic federation: the server model, the clients, and the
/// server-side initial full model (the lock weights everyone received at
/// round zero — public knowledge, unlike the locally trained ones).
#[derive(Debug, Clone)]
pub struct Federation {
    pub global: GlobalModel,
    pub clients: Vec<ClientState>,
    pub init_model: Model,
    pub server_lr: f64,
    pub round: usize,
}

fn derived_seed(master: u64, stream: u64) -> u64 {
    rng::substream(master, stream).next_u64()
}

impl Federation {
    /// Build a federation from one master seed: model init, shard shuffle
    /// and per-client keys all come from independent sub-streams.
    pub fn new(
        spec: &ModelSpec,
        dataset: &Dataset,
        n_clients: usize,
        lr: f64,
        master_seed: u64,
    ) -> Result<Federation> {
        if n_clients == 0 {
            return Err(Error::InvalidArgument {
                op: "Federation::new",
                msg: "need at least one client".to_string(),
            });
        }
        let init_model = Model::build(spec, derived_seed(master_seed, 1))?;
        let shards = dataset.shard(n_clients, derived_seed(master_seed, 2))?;
        let clients: Vec<ClientState> = shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| -> Result<ClientState> {
                let key = if spec.has_keylock() {
                    Some(Key::generate(
                        derived_seed(master_seed, 100 + id as u64),
                        spec.key_len(),
                    )?)
                } else {
                    None
                };
                Ok(ClientState {
                    id,
                    model: init_model.clone(),
                    key,
                    shard,
                    lr,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Federation {
            global: GlobalModel::from_model(&init_model),
            clients,
            init_model,
            server_lr: lr,
            round: 0,
        })
    }

    /// One round: local updates, canonical aggregation, server step.
    /// Works identically for FedAvg (no lock) and FedKL (lock excluded by
    /// the bundle partition).
    pub fn run_round(&mut self, epochs: usize) -> Result<RoundRecord> {
        if self.clients.is_empty() {
            return Err(Error::InvalidArgument {
                op: "run_round",
                msg: "no participating clients".to_string(),
            });
        }
        let global = self.global.clone();
        let mut updates = Vec::with_capacity(self.clients.len());
        let mut accuracy = Vec::with_capacity(self.clients.len());
        for client in &mut self.clients {
            let bundle = local_update(client, &global, epochs)?;
            updates.push(ClientUpdate {
                client_id: client.id,
                bundle,
                weight: client.shard.len() as f64,
            });
            accuracy.push(model_accuracy(
                &client.model,
                client.key.as_ref(),
                &client.shard,
            )?);
        }
        let aggregate = fedavg_aggregate(&updates)?;
        debug_assert!(aggregate.iter().all(|(_, e)| e.tag == ParamTag::Shareable));
        for (name, entry) in aggregate.iter() {
            let old = self
                .global
                .shareable
                .get(name)
                .ok_or_else(|| Error::Invariant {
                    msg: format!("aggregate names unknown parameter {name}"),
                })?;
            let new = old.sub(&entry.grad.scale(self.server_lr)?)?;
            self.global.shareable.insert(name.to_string(), new);
        }
        let record = RoundRecord {
            round: self.round,
            updates,
            aggregate,
            accuracy,
        };
        self.round += 1;
        Ok(record)
    }

    /// Assemble the current global model with a chosen key/lock source and
    /// score top-1 accuracy. `reference` picks the client whose key answers
    /// [`KeySource::Own`].
    pub fn evaluate(&self, reference: usize, source: KeySource, data: &Dataset) -> Result<f64> {
        let (lock_model, key) = match source {
            KeySource::Own => {
                let c = &self.clients[reference];
                (c.model.clone(), c.key.clone())
            }
            KeySource::OtherClient(j) => {
                let c = &self.clients[j];
                (c.model.clone(), c.key.clone())
            }
            KeySource::Random(seed) => {
                let fresh = Model::build(&self.global.spec, derived_seed(seed, 3))?;
                let key = if self.global.spec.has_keylock() {
                    Some(Key::generate(
                        derived_seed(seed, 4),
                        self.global.spec.key_len(),
                    )?)
                } else {
                    None
                };
                (fresh, key)
            }
        };
        // global shareable + borrowed lock parameters
        let mut model = lock_model;
        install_shareable(&mut model, &self.global)?;
        model_accuracy(&model, key.as_ref(), data)
    }
}

/// Top-1 accuracy of a model over a dataset, evaluated in one batch.
pub fn model_accuracy(model: &Model, key: Option<&Key>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument {
            op: "model_accuracy",
            msg: "empty dataset".to_string(),
        });
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let (images, labels) = data.batch(&all)?;
    let x = model.prepare_input(&images)?;
    let logits = model.forward(&x, key)?;
    let classes = model.classes();
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let mut best = 0usize;
        for j in 1..classes {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Persist round records as line-delimited JSON.
pub fn write_round_records(path: impl AsRef<Path>, records: &[RoundRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_round_records(path: impl AsRef<Path>) -> Result<Vec<RoundRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

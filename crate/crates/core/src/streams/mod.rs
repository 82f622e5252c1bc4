//! Data pools and the per-client task streams built from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::classifier::InputShape;
use crate::error::{Error, Result};

pub mod idx;
pub mod synthetic;

pub use idx::load_idx;
pub use synthetic::{make_synthetic, SyntheticSpec};

/// Labeled images stored row-major, channel-first, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pool {
    pixels: Vec<f32>,
    labels: Vec<usize>,
    shape: InputShape,
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl Pool {
    pub fn new(pixels: Vec<f32>, labels: Vec<usize>, shape: InputShape) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Config("pool images must have at least one pixel".into()));
        }
        if pixels.len() != labels.len() * shape.len() {
            return Err(Error::Integrity(format!(
                "{} pixels do not form {} images of {} values",
                pixels.len(),
                labels.len(),
                shape.len()
            )));
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            by_class.entry(y).or_default().push(i);
        }
        Ok(Self {
            pixels,
            labels,
            shape,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> InputShape {
        self.shape
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Distinct labels in increasing order.
    pub fn classes(&self) -> Vec<usize> {
        self.by_class.keys().copied().collect()
    }

    /// One past the largest label.
    pub fn label_space(&self) -> usize {
        self.by_class.keys().next_back().map_or(0, |&c| c + 1)
    }

    pub fn indices_of(&self, class: usize) -> &[usize] {
        self.by_class.get(&class).map_or(&[], Vec::as_slice)
    }

    /// The selected images as an `n x pixels` matrix.
    pub fn rows(&self, ids: &[usize]) -> Mat {
        let n = self.shape.len();
        let mut m = Mat::zeros((ids.len(), n));
        for (r, &i) in ids.iter().enumerate() {
            for (dst, &src) in m.row_mut(r).iter_mut().zip(self.image(i)) {
                *dst = src as f64;
            }
        }
        m
    }
}

/// How task class lists are assigned to clients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    /// Each client draws its own classes from the whole pool.
    Ltp,
    /// One shared set of tasks, visited in a different order by each client.
    Shuffle,
    /// `Shuffle` with random labels on the first steps of some clients.
    Noisy,
    /// Every client sees the same tasks in the same order.
    #[serde(alias = "synthetic")]
    Iid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSpec {
    pub num_clients: usize,
    pub num_steps: usize,
    pub classes_per_task: usize,
    pub kind: StreamKind,
    /// Clients with noisy labels; `Noisy` only.
    pub noisy_clients: usize,
    /// Leading steps relabeled on noisy clients.
    pub noisy_steps: usize,
    pub per_class_cap: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for FederationSpec {
    fn default() -> Self {
        Self {
            num_clients: 4,
            num_steps: 4,
            classes_per_task: 2,
            kind: StreamKind::Ltp,
            noisy_clients: 0,
            noisy_steps: 3,
            per_class_cap: 500,
            train_fraction: 0.85,
            seed: 0,
        }
    }
}

impl FederationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.num_steps == 0 || self.classes_per_task == 0 {
            return Err(Error::Config(
                "num_clients, num_steps and classes_per_task must be positive".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if self.per_class_cap < 2 {
            return Err(Error::Config("per_class_cap must be at least 2".into()));
        }
        if self.kind == StreamKind::Noisy {
            if self.noisy_clients > self.num_clients {
                return Err(Error::Config(format!(
                    "{} noisy clients requested but only {} clients",
                    self.noisy_clients, self.num_clients
                )));
            }
            if self.noisy_steps > self.num_steps {
                return Err(Error::Config(format!(
                    "noisy_steps {} exceeds num_steps {}",
                    self.noisy_steps, self.num_steps
                )));
            }
        } else if self.noisy_clients != 0 {
            return Err(Error::Config("noisy_clients requires kind = \"noisy\"".into()));
        }
        Ok(())
    }
}

/// Sample ids of one class inside a task, split into train and test.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSamples {
    pub class: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub client: usize,
    pub step: usize,
    pub class_list: Vec<usize>,
    pub sample_ids: Vec<ClassSamples>,
    pub noisy: bool,
}

/// A task with its flattened train/test ids and the labels training sees.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train_ids: Vec<usize>,
    /// Equal to the pool labels unless the task is noisy.
    pub train_labels: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub test_labels: Vec<usize>,
}

impl TaskData {
    pub fn train_inputs(&self, pool: &Pool) -> Mat {
        pool.rows(&self.train_ids)
    }

    pub fn test_inputs(&self, pool: &Pool) -> Mat {
        pool.rows(&self.test_ids)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Federation {
    pub spec: FederationSpec,
    /// `clients[k][t]`.
    pub clients: Vec<Vec<TaskData>>,
}

/// Audit view of a federation: client, step, classes and sample ids.
#[derive(Serialize)]
struct ManifestView<'a> {
    spec: &'a FederationSpec,
    tasks: Vec<&'a TaskSpec>,
}

impl Federation {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn num_steps(&self) -> usize {
        self.spec.num_steps
    }

    pub fn task(&self, client: usize, step: usize) -> &TaskData {
        &self.clients[client][step]
    }

    /// Classes appearing in any client's tasks `0..=step`.
    pub fn seen_classes(&self, step: usize) -> BTreeSet<usize> {
        self.clients
            .iter()
            .flat_map(|c| c[..=step].iter().flat_map(|t| t.spec.class_list.iter().copied()))
            .collect()
    }

    pub fn manifest_json(&self) -> String {
        let view = ManifestView {
            spec: &self.spec,
            tasks: self.clients.iter().flatten().map(|t| &t.spec).collect(),
        };
        serde_json::to_string_pretty(&view).expect("manifest serializes")
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        fs::write(path, self.manifest_json()).map_err(|e| Error::io(path, e))
    }
}

fn class_lists(classes: &[usize], spec: &FederationSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut c = classes.to_vec();
    c.shuffle(rng);
    c.chunks(spec.classes_per_task)
        .take(spec.num_steps)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Task orders for each client; distinct across clients while enough
/// permutations exist.
fn task_orders(spec: &FederationSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let t = spec.num_steps;
    let available = (1..=t).try_fold(1usize, |acc, k| acc.checked_mul(k)).unwrap_or(usize::MAX);
    let mut seen = BTreeSet::new();
    let mut orders = Vec::with_capacity(spec.num_clients);
    for _ in 0..spec.num_clients {
        let mut order: Vec<usize> = (0..t).collect();
        loop {
            order.shuffle(rng);
            if seen.len() >= available || !seen.contains(&order) {
                break;
            }
        }
        seen.insert(order.clone());
        orders.push(order);
    }
    orders
}

/// Builds every client's task stream from `pool`.
///
/// A class used by several clients has its samples dealt into disjoint
/// shards, one per user, before the per-class cap and the stratified split.
pub fn make_federation(spec: &FederationSpec, pool: &Pool) -> Result<Federation> {
    spec.validate()?;
    let classes = pool.classes();
    let needed = spec.classes_per_task * spec.num_steps;
    if classes.len() < needed {
        return Err(Error::Capacity {
            needed,
            available: classes.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let lists: Vec<Vec<Vec<usize>>> = match spec.kind {
        StreamKind::Ltp => (0..spec.num_clients)
            .map(|_| class_lists(&classes, spec, &mut rng))
            .collect(),
        StreamKind::Iid => {
            let shared = class_lists(&classes, spec, &mut rng);
            vec![shared; spec.num_clients]
        }
        StreamKind::Shuffle | StreamKind::Noisy => {
            let shared = class_lists(&classes, spec, &mut rng);
            task_orders(spec, &mut rng)
                .into_iter()
                .map(|order| order.iter().map(|&i| shared[i].clone()).collect())
                .collect()
        }
    };

    let noisy_set: BTreeSet<usize> = if spec.kind == StreamKind::Noisy && spec.noisy_clients > 0 {
        let mut ks: Vec<usize> = (0..spec.num_clients).collect();
        ks.shuffle(&mut rng);
        ks.into_iter().take(spec.noisy_clients).collect()
    } else {
        BTreeSet::new()
    };

    let mut users: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, steps) in lists.iter().enumerate() {
        for &c in steps.iter().flatten() {
            users.entry(c).or_default().push(k);
        }
    }
    let mut shards: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (&c, ks) in &users {
        let mut ids = pool.indices_of(c).to_vec();
        ids.shuffle(&mut rng);
        let per = (ids.len() / ks.len()).min(spec.per_class_cap);
        if per < 2 {
            return Err(Error::Capacity {
                needed: 2 * ks.len(),
                available: ids.len(),
            });
        }
        for (j, &k) in ks.iter().enumerate() {
            shards.insert((k, c), ids[j * per..(j + 1) * per].to_vec());
        }
    }

    let mut clients = Vec::with_capacity(spec.num_clients);
    for (k, steps) in lists.into_iter().enumerate() {
        let mut tasks = Vec::with_capacity(spec.num_steps);
        for (t, class_list) in steps.into_iter().enumerate() {
            let noisy = noisy_set.contains(&k) && t < spec.noisy_steps;
            let mut sample_ids = Vec::with_capacity(class_list.len());
            for &c in &class_list {
                let ids = &shards[&(k, c)];
                let n_train = ((ids.len() as f64 * spec.train_fraction).round() as usize).clamp(1, ids.len() - 1);
                let mut train = ids[..n_train].to_vec();
                let mut test = ids[n_train..].to_vec();
                train.sort_unstable();
                test.sort_unstable();
                sample_ids.push(ClassSamples { class: c, train, test });
            }
            let train_ids: Vec<usize> = sample_ids.iter().flat_map(|s| s.train.iter().copied()).collect();
            let test_ids: Vec<usize> = sample_ids.iter().flat_map(|s| s.test.iter().copied()).collect();
            let train_labels = if noisy {
                train_ids
                    .iter()
                    .map(|_| class_list[rng.random_range(0..class_list.len())])
                    .collect()
            } else {
                train_ids.iter().map(|&i| pool.labels()[i]).collect()
            };
            let test_labels = test_ids.iter().map(|&i| pool.labels()[i]).collect();
            tasks.push(TaskData {
                spec: TaskSpec {
                    client: k,
                    step: t,
                    class_list,
                    sample_ids,
                    noisy,
                },
                train_ids,
                train_labels,
                test_ids,
                test_labels,
            });
        }
        clients.push(tasks);
    }
    Ok(Federation {
        spec: spec.clone(),
        clients,
    })
}

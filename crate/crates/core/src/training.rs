//! Stratified splitting, Adam, the plateau scheduler and the training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::SampleSet;
use crate::error::{contract, Error, Result};
use crate::layers::Mode;
use crate::losses::{model_loss, standard_normal_draws, TRAIN_DRAWS};
use crate::model::{Architecture, ModelKind, Network};
use crate::rng::{stream, tag};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub plateau_patience: usize,
    pub lr_decay_factor: f64,
    pub plateau_threshold: f64,
    pub split: [f64; 3],
    pub seed: u64,
    /// Logit draws per sample for the sampled losses.
    pub draws: usize,
    pub kind: ModelKind,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 150,
            batch_size: 128,
            plateau_patience: 50,
            lr_decay_factor: 0.1,
            plateau_threshold: 1e-6,
            split: [0.7, 0.1, 0.2],
            seed: 0,
            draws: TRAIN_DRAWS,
            kind: ModelKind::Plain,
            architecture: Architecture::Fc,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_fractions(&self.split)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.plateau_patience == 0 {
            return Err(Error::Config("plateau patience must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.kind != ModelKind::Plain && self.draws == 0 {
            return Err(Error::Config("sampled losses need at least one draw".into()));
        }
        Ok(())
    }
}

fn check_fractions(f: &[f64; 3]) -> Result<()> {
    if f.iter().any(|x| !(*x >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(contract(format!("split fractions {f:?} must be non-negative and sum to 1")));
    }
    Ok(())
}

type Edges = Vec<(usize, usize)>;

/// Breadth-first search from class `start` to a split with room left,
/// alternating unused (class, split) slots and used ones. Returns the slots
/// to fill, the slots to free and the split that receives the extra item.
fn augmenting_path(start: usize, extra: &[[bool; 3]], missing: &[usize; 3]) -> Option<(Edges, Edges, usize)> {
    let mut split_parent: [Option<usize>; 3] = [None; 3];
    let mut class_parent: Vec<Option<usize>> = vec![None; extra.len()];
    let mut seen = vec![false; extra.len()];
    seen[start] = true;
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(c) = queue.pop_front() {
        for s in 0..3 {
            if extra[c][s] || split_parent[s].is_some() {
                continue;
            }
            split_parent[s] = Some(c);
            if missing[s] > 0 {
                let (mut adds, mut removes) = (Vec::new(), Vec::new());
                let mut split = s;
                loop {
                    let from = split_parent[split].unwrap();
                    adds.push((from, split));
                    match class_parent[from] {
                        Some(prev) => {
                            removes.push((from, prev));
                            split = prev;
                        }
                        None => return Some((adds, removes, s)),
                    }
                }
            }
            for (next, row) in extra.iter().enumerate() {
                if row[s] && !seen[next] {
                    seen[next] = true;
                    class_parent[next] = Some(s);
                    queue.push_back(next);
                }
            }
        }
    }
    None
}

/// Index partition produced by [`split_dataset`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits `total` items by `fractions` with largest-remainder rounding.
fn allocate(total: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = total - counts.iter().sum::<usize>();
    for &s in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[s] += 1;
        left -= 1;
    }
    counts
}

/// Stratified train/validation/test partition of item indices by label.
/// Split sizes follow the fractions of the whole set exactly (largest
/// remainder); each class is spread to within one item of its share.
pub fn split_dataset(labels: &[usize], fractions: [f64; 3], seed: u64) -> Result<Split> {
    check_fractions(&fractions)?;
    if labels.is_empty() {
        return Err(contract("cannot split an empty dataset"));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let totals = allocate(labels.len(), &fractions);
    let mut counts: Vec<[usize; 3]> = Vec::with_capacity(classes);
    let mut missing = totals;
    let mut extras: Vec<(f64, usize, usize)> = Vec::new();
    for (c, m) in members.iter().enumerate() {
        let n = m.len();
        let mut base = [0usize; 3];
        for s in 0..3 {
            let exact = fractions[s] * n as f64;
            base[s] = exact.floor() as usize;
            missing[s] -= base[s];
            extras.push((exact - exact.floor(), c, s));
        }
        counts.push(base);
    }
    let floors = counts.clone();
    let mut spare: Vec<usize> = members.iter().zip(&counts).map(|(m, b)| m.len() - b.iter().sum::<usize>()).collect();
    extras.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, c, s) in &extras {
        if spare[c] > 0 && missing[s] > 0 {
            counts[c][s] += 1;
            spare[c] -= 1;
            missing[s] -= 1;
        }
    }
    // The greedy pass can strand leftovers; shift earlier choices along
    // augmenting paths so every class still gets at most one extra per split.
    while let Some(c) = spare.iter().position(|&n| n > 0) {
        let extra: Vec<[bool; 3]> = counts.iter().zip(&floors).map(|(n, f)| [0, 1, 2].map(|s| n[s] > f[s])).collect();
        let (adds, removes, s) = augmenting_path(c, &extra, &missing)
            .ok_or_else(|| contract("no stratified split exists for these fractions"))?;
        adds.iter().for_each(|&(c, s)| counts[c][s] += 1);
        removes.iter().for_each(|&(c, s)| counts[c][s] -= 1);
        spare[c] -= 1;
        missing[s] -= 1;
    }
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (c, m) in members.iter_mut().enumerate() {
        m.shuffle(&mut stream(seed, &[tag::SPLIT, c as u64]));
        let [a, b, _] = counts[c];
        split.train.extend_from_slice(&m[..a]);
        split.val.extend_from_slice(&m[a..a + b]);
        split.test.extend_from_slice(&m[a + b..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(contract("parameter, gradient and state counts differ"));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            p.expect_same_shape(g, "adam step")?;
            for (((x, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has not
/// improved by at least `threshold` for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Self {
        Self {
            lr,
            factor,
            patience: patience.max(1),
            threshold,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records one epoch's loss and returns the learning rate for the next.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.threshold {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr *= self.factor;
                self.stale = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Best-validation weights, rounded to `f32`.
    pub network: Network,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    /// Validation loss and accuracy of the returned weights.
    pub best_val_loss: f64,
    pub best_val_accuracy: f64,
}

pub fn check_compatible(kind: ModelKind, set: &SampleSet) -> Result<()> {
    match (kind, set.variance.is_some()) {
        (ModelKind::Adf, false) => Err(Error::Config(
            "ADF models train on input means and variances across at least two twins".into(),
        )),
        (ModelKind::Plain | ModelKind::Het, true) => {
            Err(Error::Config(format!("{kind} models take inputs without variances")))
        }
        _ => Ok(()),
    }
}

/// Mean loss and accuracy on `set` with dropout off. Loss draws are fixed by `seed`.
pub fn evaluate_loss(net: &Network, set: &SampleSet, draws: usize, seed: u64) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(contract("cannot evaluate an empty set"));
    }
    let mut total = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..set.len()).collect();
    for (b, chunk) in idx.chunks(EVAL_CHUNK).enumerate() {
        let batch = set.batch(chunk)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let mut rng = stream(seed, &[tag::VALIDATION, b as u64]);
        let out = net.forward(&mut tape, &bound, &batch, Mode::Eval, &mut rng, &mut Vec::new())?;
        let eps = loss_draws(net, draws, chunk.len(), &mut rng)?;
        let loss = model_loss(&mut tape, net.kind, &out, &labels, eps.as_ref())?;
        total += tape.value(loss).item() * chunk.len() as f64;
        let logits = tape.value(out.logits);
        let c = net.config.classes;
        for (r, &l) in labels.iter().enumerate() {
            if crate::uncertainty::argmax(&logits.data()[r * c..(r + 1) * c]) == l {
                correct += 1;
            }
        }
    }
    Ok((total / set.len() as f64, correct as f64 / set.len() as f64))
}

/// Rows evaluated per forward pass outside training.
pub const EVAL_CHUNK: usize = 256;

fn loss_draws(net: &Network, draws: usize, batch: usize, rng: &mut impl rand::Rng) -> Result<Option<Tensor>> {
    match net.kind {
        ModelKind::Plain => Ok(None),
        _ => standard_normal_draws(draws, batch, net.config.classes, rng).map(Some),
    }
}

/// Trains `network` on `train`, keeping the weights with the best validation
/// accuracy (ties: lower validation loss).
pub fn train(mut network: Network, train_set: &SampleSet, val_set: &SampleSet, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if network.kind != config.kind {
        return Err(Error::Config(format!(
            "network is {} but the configuration asks for {}",
            network.kind, config.kind
        )));
    }
    check_compatible(network.kind, train_set)?;
    check_compatible(network.kind, val_set)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(contract("training and validation sets must be non-empty"));
    }
    let sizes: Vec<usize> = network.params().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&sizes);
    let mut scheduler = PlateauScheduler::new(
        config.learning_rate,
        config.lr_decay_factor,
        config.plateau_patience,
        config.plateau_threshold,
    );
    let mut lr = config.learning_rate;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, f64, usize, Network)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut stream(config.seed, &[tag::SHUFFLE, epoch as u64]));
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = train_set.batch(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let mut tape = Tape::new();
            let bound = network.bind(&mut tape, true);
            let mut rng = stream(config.seed, &[tag::DROPOUT, epoch as u64, b as u64]);
            let mut stats = Vec::new();
            let out = network.forward(&mut tape, &bound, &batch, Mode::Train, &mut rng, &mut stats)?;
            let mut draw_rng = stream(config.seed, &[tag::LOSS_DRAWS, epoch as u64, b as u64]);
            let eps = loss_draws(&network, config.draws, chunk.len(), &mut draw_rng)?;
            let loss = model_loss(&mut tape, network.kind, &out, &labels, eps.as_ref())?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Contract(format!("non-finite training loss at epoch {epoch}")));
            }
            epoch_loss += value * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = bound
                .vars()
                .iter()
                .zip(network.params())
                .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            adam.step(&mut network.params_mut(), &grads, lr)?;
            network.update_running_stats(&stats);
        }
        let (val_loss, val_accuracy) = evaluate_loss(&network, val_set, config.draws, config.seed)?;
        history.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            val_loss,
            val_accuracy,
            learning_rate: lr,
        });
        let better = match &best {
            None => true,
            Some((acc, loss, _, _)) => val_accuracy > *acc || (val_accuracy == *acc && val_loss < *loss),
        };
        if better {
            best = Some((val_accuracy, val_loss, epoch, network.clone()));
        }
        lr = scheduler.step(val_loss);
    }
    let (_, _, best_epoch, mut best_net) = best.unwrap_or((0.0, 0.0, 0, network));
    best_net.round_to_f32();
    let (best_val_loss, best_val_accuracy) = evaluate_loss(&best_net, val_set, config.draws, config.seed)?;
    Ok(TrainOutcome {
        network: best_net,
        history,
        best_epoch,
        best_val_loss,
        best_val_accuracy,
    })
}

//! Measurement protocols over trained (or untrained) encoders.
//!
//! All functions here are read-only with respect to [`TrainState`]. Ties in
//! any ranking or argmax resolve to the lowest index.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoder::{self, EmbeddingBatch, EncoderArch, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, NORM_EPS};
use crate::report::MetricsReport;
use crate::rng::{mix_seeds, Stream};
use crate::trainer::{self, TrainConfig, TrainState};
use crate::world::{self, WorldSpec};

/// Composition weight for embedding arithmetic.
pub const DEFAULT_ARITHMETIC_WEIGHT: f64 = 0.5;
/// Weight on the primary modality when ensembling two views of an item.
pub const DEFAULT_ENSEMBLE_WEIGHT: f64 = 0.95;

/// One unit-norm prototype per class.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub modality: String,
    /// `C × d`.
    pub prototypes: Matrix,
}

/// Embeds `P` prompt observations per class, averages them per class and
/// renormalizes.
pub fn build_prototypes(
    world: &WorldSpec,
    modality: &str,
    encoder: &EncoderParams,
    prompts_per_class: usize,
    stream: &mut Stream,
) -> Result<PrototypeBank> {
    let prompts = world::class_prototypes(world, modality, prompts_per_class, stream)?;
    let emb = encoder::embed(encoder, &prompts.obs)?;
    let d = emb.cols();
    let mut means = Matrix::zeros(world.num_classes, d);
    for (row, &c) in emb.iter_rows().zip(&prompts.classes) {
        for (m, v) in means.row_mut(c).iter_mut().zip(row) {
            *m += v / prompts_per_class as f64;
        }
    }
    for c in 0..world.num_classes {
        if numerics::norm(means.row(c)) < 1e-9 {
            return Err(Error::NonFinite(format!(
                "class {c} prompt embeddings average to zero"
            )));
        }
    }
    Ok(PrototypeBank {
        modality: modality.into(),
        prototypes: numerics::l2_normalize_rows(&means, NORM_EPS),
    })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per query row: the most cosine-similar prototype.
pub fn zero_shot_classify(queries: &EmbeddingBatch, bank: &PrototypeBank) -> Result<Vec<usize>> {
    let sims = numerics::matmul_nt(queries, &bank.prototypes)?;
    Ok(sims.iter_rows().map(argmax).collect())
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(predicted.len(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZeroShotResult {
    pub accuracy: f64,
    /// False when the two modalities were trained together directly, or
    /// are the same modality.
    pub emergent: bool,
    pub num_queries: usize,
}

/// Classifies a fresh balanced set of `data_modality` observations against
/// prototypes built from `prompt_modality`.
pub fn emergent_zero_shot_accuracy(
    world: &WorldSpec,
    state: &TrainState,
    data_modality: &str,
    prompt_modality: &str,
    n_per_class: usize,
    prompts_per_class: usize,
    stream: &mut Stream,
) -> Result<ZeroShotResult> {
    let bank = build_prototypes(
        world,
        prompt_modality,
        state.encoder(prompt_modality)?,
        prompts_per_class,
        stream,
    )?;
    let eval = world::make_eval_set(world, data_modality, n_per_class, stream)?;
    let emb = encoder::embed(state.encoder(data_modality)?, &eval.obs)?;
    let pred = zero_shot_classify(&emb, &bank)?;
    Ok(ZeroShotResult {
        accuracy: accuracy(&pred, &eval.labels),
        emergent: data_modality != prompt_modality
            && !state.trained_together(data_modality, prompt_modality),
        num_queries: eval.labels.len(),
    })
}

/// Unit-norm item embeddings with unique ids.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    pub modality: String,
    pub embeddings: Matrix,
    pub ids: Vec<usize>,
}

impl RetrievalIndex {
    pub fn new(modality: &str, embeddings: Matrix, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != embeddings.rows() {
            return Err(Error::Shape(format!(
                "{} ids for {} embeddings",
                ids.len(),
                embeddings.rows()
            )));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("retrieval ids must be unique".into()));
        }
        if embeddings
            .iter_rows()
            .any(|r| (numerics::norm(r) - 1.0).abs() > 1e-6)
        {
            return Err(Error::InvalidArgument("index rows must be unit-norm".into()));
        }
        Ok(Self {
            modality: modality.into(),
            embeddings,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Items ordered by descending cosine, then ascending id.
    pub fn ranked(&self, query: &[f64]) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = self
            .ids
            .iter()
            .zip(self.embeddings.iter_rows())
            .map(|(&id, row)| (id, numerics::dot(row, query)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored
    }

    pub fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if k > self.len() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} exceeds index size {}",
                self.len()
            )));
        }
        let mut r = self.ranked(query);
        r.truncate(k);
        Ok(r)
    }
}

/// Fraction of queries whose ground-truth id lands in the top `K`, for
/// each `K` in `ks`.
pub fn cross_modal_recall_at_k(
    index: &RetrievalIndex,
    queries: &EmbeddingBatch,
    ground_truth: &[usize],
    ks: &[usize],
) -> Result<Vec<f64>> {
    if queries.rows() != ground_truth.len() {
        return Err(Error::Shape(format!(
            "{} queries but {} ground-truth ids",
            queries.rows(),
            ground_truth.len()
        )));
    }
    if let Some(&k) = ks.iter().find(|&&k| k > index.len() || k == 0) {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={}",
            index.len()
        )));
    }
    let position: BTreeMap<usize, usize> = index.ids.iter().enumerate().map(|(p, &id)| (id, p)).collect();
    let mut hits = vec![0usize; ks.len()];
    for (q, &target) in queries.iter_rows().zip(ground_truth) {
        let row = *position
            .get(&target)
            .ok_or_else(|| Error::InvalidArgument(format!("ground-truth id {target} not in index")))?;
        let target_sim = numerics::dot(index.embeddings.row(row), q);
        // Items ranked strictly ahead of the target.
        let ahead = index
            .ids
            .iter()
            .zip(index.embeddings.iter_rows())
            .filter(|(&id, r)| {
                let s = numerics::dot(r, q);
                s > target_sim || (s == target_sim && id < target)
            })
            .count();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if ahead < k {
                *h += 1;
            }
        }
    }
    let n = queries.rows().max(1) as f64;
    Ok(hits.into_iter().map(|h| h as f64 / n).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.1,
        }
    }
}

/// Multinomial logistic regression on frozen features, trained by
/// full-batch gradient descent from zero weights. Returns accuracy on the
/// evaluation set.
pub fn few_shot_probe(
    train: &Matrix,
    train_labels: &[usize],
    eval: &Matrix,
    eval_labels: &[usize],
    num_classes: usize,
    config: &ProbeConfig,
) -> Result<f64> {
    if train.rows() != train_labels.len() || eval.rows() != eval_labels.len() {
        return Err(Error::Shape("features and labels differ in length".into()));
    }
    if train.cols() != eval.cols() {
        return Err(Error::Shape("train and eval feature widths differ".into()));
    }
    let mut counts = vec![0usize; num_classes];
    for &l in train_labels.iter().chain(eval_labels) {
        if l >= num_classes {
            return Err(Error::InvalidArgument(format!("label {l} out of range")));
        }
    }
    train_labels.iter().for_each(|&l| counts[l] += 1);
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::MissingClass(c));
    }
    if counts.iter().any(|&n| n != counts[0]) {
        return Err(Error::InvalidArgument("shots must be balanced across classes".into()));
    }

    let n = train.rows() as f64;
    let mut w = Matrix::zeros(train.cols(), num_classes);
    let mut b = vec![0.0; num_classes];
    for _ in 0..config.iterations {
        let mut logits = numerics::matmul(train, &w)?;
        logits.add_row_vector(&b);
        let mut g = numerics::softmax_rows(&logits);
        for (i, &l) in train_labels.iter().enumerate() {
            let v = g.get(i, l) - 1.0;
            g.set(i, l, v);
        }
        let gw = numerics::matmul_tn(train, &g)?;
        let gb = g.column_sums();
        for (wv, gv) in w.data_mut().iter_mut().zip(gw.data()) {
            *wv -= config.learning_rate * gv / n;
        }
        for (bv, gv) in b.iter_mut().zip(&gb) {
            *bv -= config.learning_rate * gv / n;
        }
    }
    let mut logits = numerics::matmul(eval, &w)?;
    logits.add_row_vector(&b);
    let pred: Vec<usize> = logits.iter_rows().map(argmax).collect();
    Ok(accuracy(&pred, eval_labels))
}

/// `normalize(w·e1 + (1 − w)·e2)`.
pub fn embed_arithmetic(e1: &[f64], e2: &[f64], w: f64) -> Result<Vec<f64>> {
    if e1.len() != e2.len() {
        return Err(Error::Shape(format!("{} vs {}", e1.len(), e2.len())));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidArgument(format!("weight {w} outside [0, 1]")));
    }
    let mut out: Vec<f64> = e1.iter().zip(e2).map(|(a, b)| w * a + (1.0 - w) * b).collect();
    let n = numerics::norm(&out);
    if n < 1e-9 {
        return Err(Error::InvalidArgument(
            "weighted sum vanishes; inputs are antiparallel".into(),
        ));
    }
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// [`embed_arithmetic`] used to blend two views of the same item.
pub fn modality_ensemble(primary: &[f64], secondary: &[f64], w: f64) -> Result<Vec<f64>> {
    embed_arithmetic(primary, secondary, w)
}

/// Row-wise [`embed_arithmetic`].
pub fn combine_rows(a: &Matrix, b: &Matrix, w: f64) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut data = Vec::with_capacity(a.data().len());
    for (ra, rb) in a.iter_rows().zip(b.iter_rows()) {
        data.extend(embed_arithmetic(ra, rb, w)?);
    }
    Matrix::from_vec(a.rows(), a.cols(), data)
}

/// Outcome of composing one item from each of two modalities and
/// retrieving from a third.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositionResult {
    /// Queries whose top-k contains both source classes.
    pub both_classes: f64,
    /// Same criterion when the composed items are drawn from shuffled
    /// query pairs.
    pub permuted_baseline: f64,
    pub num_queries: usize,
}

/// Composes a class-`a` item of `first` with a class-`b` item of `second`
/// (`a ≠ b`, every ordered class pair in turn) and checks whether the
/// top-`k` neighbours in an `index` set of `index_per_class` items per class
/// contain both classes.
#[allow(clippy::too_many_arguments)]
pub fn composition_eval(
    world: &WorldSpec,
    state: &TrainState,
    first: &str,
    second: &str,
    index_modality: &str,
    num_queries: usize,
    index_per_class: usize,
    k: usize,
    weight: f64,
    stream: &mut Stream,
) -> Result<CompositionResult> {
    let c = world.num_classes;
    let per_class = num_queries.div_ceil(c).max(1);
    let items = world::make_paired_eval_set(world, &[first, second], per_class, stream)?;
    let index_set = world::make_eval_set(world, index_modality, index_per_class, stream)?;
    let index_emb = encoder::embed(state.encoder(index_modality)?, &index_set.obs)?;
    let index = RetrievalIndex::new(index_modality, index_emb, (0..index_set.labels.len()).collect())?;
    let e1 = encoder::embed(state.encoder(first)?, items.obs_for(first)?)?;
    let e2 = encoder::embed(state.encoder(second)?, items.obs_for(second)?)?;

    // Rows of class `c` in the balanced item set are c, c + C, c + 2C, ...
    let item_of = |class: usize, j: usize| class + c * (j % per_class);
    let queries: Vec<(usize, usize, usize, usize)> = (0..num_queries)
        .map(|j| {
            let a = j % c;
            let b = (a + 1 + (j / c) % (c - 1)) % c;
            (a, b, item_of(a, j / c), item_of(b, j / c + 1))
        })
        .collect();

    let hit = |row1: usize, row2: usize, a: usize, b: usize| -> Result<bool> {
        let q = embed_arithmetic(e1.row(row1), e2.row(row2), weight)?;
        let top = index.top_k(&q, k)?;
        let has = |cls| top.iter().any(|(id, _)| index_set.labels[*id] == cls);
        Ok(has(a) && has(b))
    };

    let mut perm1: Vec<usize> = (0..num_queries).collect();
    let mut perm2: Vec<usize> = (0..num_queries).collect();
    stream.shuffle(&mut perm1);
    stream.shuffle(&mut perm2);

    let (mut real, mut base) = (0usize, 0usize);
    for (j, &(a, b, r1, r2)) in queries.iter().enumerate() {
        if hit(r1, r2, a, b)? {
            real += 1;
        }
        let p1 = queries[perm1[j]].2;
        let p2 = queries[perm2[j]].3;
        if hit(p1, p2, a, b)? {
            base += 1;
        }
    }
    let n = num_queries.max(1) as f64;
    Ok(CompositionResult {
        both_classes: real as f64 / n,
        permuted_baseline: base as f64 / n,
        num_queries,
    })
}

/// Pooled emergent accuracy of `draws` independent untrained encoder pairs,
/// each scored on `n_per_class` queries per class.
///
/// A single random encoder pair tends to send most queries to one or two
/// prototypes, so its accuracy scatters far wider than a binomial count
/// would. Pooling over independent initializations gives the chance-level
/// statistic its nominal variance. Returns `(accuracy, total queries)`.
#[allow(clippy::too_many_arguments)]
pub fn untrained_zero_shot_accuracy(
    world: &WorldSpec,
    archs: &BTreeMap<String, EncoderArch>,
    data_modality: &str,
    prompt_modality: &str,
    draws: usize,
    n_per_class: usize,
    prompts_per_class: usize,
    seed: u64,
) -> Result<(f64, usize)> {
    let arch = |name: &str| {
        archs
            .get(name)
            .ok_or_else(|| Error::UnknownModality(name.into()))
    };
    let (data_arch, prompt_arch) = (arch(data_modality)?, arch(prompt_modality)?);
    let (mut hits, mut total) = (0usize, 0usize);
    for i in 0..draws {
        let mut s = Stream::new(seed, &format!("eval/untrained/{i}"));
        let prompt_enc = encoder::init_encoder(prompt_arch, s.next_u64())?;
        let data_enc = encoder::init_encoder(data_arch, s.next_u64())?;
        let bank = build_prototypes(world, prompt_modality, &prompt_enc, prompts_per_class, &mut s)?;
        let eval = world::make_eval_set(world, data_modality, n_per_class, &mut s)?;
        let pred = zero_shot_classify(&encoder::embed(&data_enc, &eval.obs)?, &bank)?;
        hits += pred.iter().zip(&eval.labels).filter(|(p, l)| p == l).count();
        total += eval.labels.len();
    }
    Ok((hits as f64 / total.max(1) as f64, total))
}

/// Half-width of the `z`-sigma binomial band around `p` for `n` trials.
pub fn binomial_band(p: f64, n: usize, z: f64) -> f64 {
    z * numerics::sqrt(p * (1.0 - p) / n as f64)
}

/// A zero-shot classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroShotTask {
    pub data: String,
    pub prompt: String,
}

/// Retrieve `index` items from `query` items of the same latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalTask {
    pub query: String,
    pub index: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotTask {
    pub modality: String,
    pub shots: Vec<usize>,
    pub eval_per_class: usize,
    #[serde(default)]
    pub probe: ProbeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArithmeticTask {
    pub first: String,
    pub second: String,
    pub index: String,
    pub queries: usize,
    pub index_per_class: usize,
    pub k: usize,
    #[serde(default = "default_arithmetic_weight")]
    pub weight: f64,
}

fn default_arithmetic_weight() -> f64 {
    DEFAULT_ARITHMETIC_WEIGHT
}

/// Retrieve from `index` with a blend of `primary` and `secondary` views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleTask {
    pub primary: String,
    pub secondary: String,
    pub index: String,
    pub weights: Vec<f64>,
}

/// Which measurements to run after training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPlan {
    #[serde(default)]
    pub zero_shot: Vec<ZeroShotTask>,
    pub n_per_class: usize,
    pub prompts_per_class: usize,
    #[serde(default)]
    pub retrieval: Vec<RetrievalTask>,
    pub retrieval_items_per_class: usize,
    #[serde(default)]
    pub ks: Vec<usize>,
    #[serde(default)]
    pub few_shot: Option<FewShotTask>,
    #[serde(default)]
    pub arithmetic: Option<ArithmeticTask>,
    #[serde(default)]
    pub ensemble: Option<EnsembleTask>,
}

fn eval_stream(world: &WorldSpec, eval_seed: u64, name: &str) -> Stream {
    Stream::new(mix_seeds(world.seed, eval_seed), &format!("eval/{name}"))
}

/// Fresh encoder with the same architecture, for untrained baselines.
pub fn untrained_like(params: &EncoderParams, seed: u64) -> Result<EncoderParams> {
    encoder::init_encoder(&params.arch, seed)
}

/// Linear-probe accuracy per shot count on frozen `modality` features.
pub fn few_shot_curve(
    world: &WorldSpec,
    encoder_params: &EncoderParams,
    task: &FewShotTask,
    eval_seed: u64,
) -> Result<Vec<f64>> {
    let mut test_stream = eval_stream(world, eval_seed, &format!("fewshot/{}/test", task.modality));
    let test = world::make_eval_set(world, &task.modality, task.eval_per_class, &mut test_stream)?;
    let test_emb = encoder::embed(encoder_params, &test.obs)?;
    let mut out = Vec::with_capacity(task.shots.len());
    for &k in &task.shots {
        let mut s = eval_stream(world, eval_seed, &format!("fewshot/{}/train/{k}", task.modality));
        let shots = world::make_eval_set(world, &task.modality, k, &mut s)?;
        let emb = encoder::embed(encoder_params, &shots.obs)?;
        out.push(few_shot_probe(
            &emb,
            &shots.labels,
            &test_emb,
            &test.labels,
            world.num_classes,
            &task.probe,
        )?);
    }
    Ok(out)
}

/// Recall@K for retrieving `task.index` items with `task.query` queries of
/// the same latents.
pub fn retrieval_recalls(
    world: &WorldSpec,
    state: &TrainState,
    task: &RetrievalTask,
    items_per_class: usize,
    ks: &[usize],
    eval_seed: u64,
) -> Result<Vec<f64>> {
    let mut s = eval_stream(world, eval_seed, &format!("retrieval/{}/{}", task.query, task.index));
    let set = world::make_paired_eval_set(world, &[&task.query, &task.index], items_per_class, &mut s)?;
    let index_emb = encoder::embed(state.encoder(&task.index)?, set.obs_for(&task.index)?)?;
    let query_emb = encoder::embed(state.encoder(&task.query)?, set.obs_for(&task.query)?)?;
    let ids: Vec<usize> = (0..set.len()).collect();
    let index = RetrievalIndex::new(&task.index, index_emb, ids.clone())?;
    cross_modal_recall_at_k(&index, &query_emb, &ids, ks)
}

/// Recall@K per ensemble weight, plus each single modality on its own.
pub fn ensemble_recalls(
    world: &WorldSpec,
    state: &TrainState,
    task: &EnsembleTask,
    items_per_class: usize,
    ks: &[usize],
    eval_seed: u64,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut s = eval_stream(world, eval_seed, &format!("ensemble/{}/{}", task.primary, task.secondary));
    let set = world::make_paired_eval_set(
        world,
        &[&task.primary, &task.secondary, &task.index],
        items_per_class,
        &mut s,
    )?;
    let index_emb = encoder::embed(state.encoder(&task.index)?, set.obs_for(&task.index)?)?;
    let ids: Vec<usize> = (0..set.len()).collect();
    let index = RetrievalIndex::new(&task.index, index_emb, ids.clone())?;
    let a = encoder::embed(state.encoder(&task.primary)?, set.obs_for(&task.primary)?)?;
    let b = encoder::embed(state.encoder(&task.secondary)?, set.obs_for(&task.secondary)?)?;
    let mut out = BTreeMap::new();
    out.insert(task.primary.clone(), cross_modal_recall_at_k(&index, &a, &ids, ks)?);
    out.insert(task.secondary.clone(), cross_modal_recall_at_k(&index, &b, &ids, ks)?);
    for &w in &task.weights {
        let q = combine_rows(&a, &b, w)?;
        out.insert(format!("w={w}"), cross_modal_recall_at_k(&index, &q, &ids, ks)?);
    }
    Ok(out)
}

/// Runs every task in `plan` and collects the numbers into one report.
pub fn run_eval_plan(
    world: &WorldSpec,
    state: &TrainState,
    plan: &EvalPlan,
    eval_seed: u64,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::new(eval_seed);
    for task in &plan.zero_shot {
        let mut s = eval_stream(world, eval_seed, &format!("zero_shot/{}/{}", task.data, task.prompt));
        let r = emergent_zero_shot_accuracy(
            world,
            state,
            &task.data,
            &task.prompt,
            plan.n_per_class,
            plan.prompts_per_class,
            &mut s,
        )?;
        let key = format!("zero_shot/{}->{}", task.data, task.prompt);
        report.insert(format!("{key}/accuracy"), r.accuracy)?;
        report.insert(format!("{key}/chance"), 1.0 / world.num_classes as f64)?;
        report.flag(format!("{key}/emergent"), r.emergent);
    }
    for task in &plan.retrieval {
        let recalls = retrieval_recalls(world, state, task, plan.retrieval_items_per_class, &plan.ks, eval_seed)?;
        let key = format!("retrieval/{}->{}", task.query, task.index);
        for (k, r) in plan.ks.iter().zip(recalls) {
            report.insert(format!("{key}/recall@{k}"), r)?;
        }
        report.flag(
            format!("{key}/emergent"),
            task.query != task.index && !state.trained_together(&task.query, &task.index),
        );
    }
    if let Some(task) = &plan.few_shot {
        let trained = state.encoder(&task.modality)?;
        let baseline_seed = Stream::new(eval_seed, "eval/untrained").next_u64();
        let untrained = untrained_like(trained, baseline_seed)?;
        let curve = few_shot_curve(world, trained, task, eval_seed)?;
        let base = few_shot_curve(world, &untrained, task, eval_seed)?;
        for ((k, a), b) in task.shots.iter().zip(curve).zip(base) {
            report.insert(format!("few_shot/{}/k={k}/accuracy", task.modality), a)?;
            report.insert(format!("few_shot/{}/k={k}/untrained_accuracy", task.modality), b)?;
        }
    }
    if let Some(task) = &plan.arithmetic {
        let mut s = eval_stream(world, eval_seed, "arithmetic");
        let r = composition_eval(
            world,
            state,
            &task.first,
            &task.second,
            &task.index,
            task.queries,
            task.index_per_class,
            task.k,
            task.weight,
            &mut s,
        )?;
        let key = format!("arithmetic/{}+{}->{}", task.first, task.second, task.index);
        report.insert(format!("{key}/both_classes"), r.both_classes)?;
        report.insert(format!("{key}/permuted_baseline"), r.permuted_baseline)?;
    }
    if let Some(task) = &plan.ensemble {
        let rows = ensemble_recalls(world, state, task, plan.retrieval_items_per_class, &plan.ks, eval_seed)?;
        for (name, recalls) in rows {
            for (k, r) in plan.ks.iter().zip(recalls) {
                report.insert(format!("ensemble/{}/{name}/recall@{k}", task.index), r)?;
            }
        }
    }
    Ok(report)
}

/// Trains only the spoke encoders against a supplied, frozen hub, then
/// runs `plan`. The result measures how good a hub the supplied encoder
/// is.
pub fn frozen_hub_eval(
    hub: &EncoderParams,
    world: &WorldSpec,
    archs: &BTreeMap<String, EncoderArch>,
    config: &TrainConfig,
    plan: &EvalPlan,
) -> Result<MetricsReport> {
    let hub_obs = world.hub_observer();
    if hub.arch.input_dim != hub_obs.obs_dim() {
        return Err(Error::Shape(format!(
            "hub encoder takes {} features, world hub emits {}",
            hub.arch.input_dim,
            hub_obs.obs_dim()
        )));
    }
    let mut frozen_config = config.clone();
    frozen_config.hub_frozen = true;
    let mut archs = archs.clone();
    archs.insert(world.hub.clone(), hub.arch.clone());
    let mut state = TrainState::initialize(world, &archs, &frozen_config)?;
    let mut frozen = hub.clone();
    frozen.frozen = true;
    state.set_encoder(&world.hub.clone(), frozen)?;
    let mut t = trainer::Trainer::resume(world, &frozen_config, state)?;
    t.run()?;
    let state = t.into_state();
    let mut report = run_eval_plan(world, &state, plan, frozen_config.seed)?;
    let train = trainer::training_report(&state, &frozen_config)?;
    report.merge_prefixed("frozen_hub", &train);
    Ok(report)
}

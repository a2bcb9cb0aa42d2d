//! Synthetic transduction tasks and token-noise augmentation.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::ParamSet;
use crate::error::{invalid, Error, Result};
use crate::losses::LossKind;
use crate::seq2seq::{sample_loss, LossEmbeddings, ModelConfig, TokenSequence, EOS, RESERVED};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Cipher,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Cipher => "cipher",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "cipher" => Ok(TaskKind::Cipher),
            _ => Err(Error::Parse(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 2000,
            dev: 200,
            test: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Number of content tokens; ids `RESERVED..RESERVED + content_vocab`.
    #[serde(default = "default_content_vocab")]
    pub content_vocab: usize,
    /// Inclusive range of content lengths, before `EOS`.
    #[serde(default = "default_len_range")]
    pub len_range: [usize; 2],
    #[serde(default)]
    pub sizes: SplitSizes,
    #[serde(default)]
    pub seed: u64,
}

fn default_content_vocab() -> usize {
    20
}
fn default_len_range() -> [usize; 2] {
    [3, 10]
}

impl TaskSpec {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        Self {
            kind,
            content_vocab: default_content_vocab(),
            len_range: default_len_range(),
            sizes: SplitSizes::default(),
            seed,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.content_vocab + RESERVED
    }

    /// Longest sequence including `EOS`.
    pub fn max_seq_len(&self) -> usize {
        self.len_range[1] + 1
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.len_range;
        if lo < 1 || lo > hi {
            return Err(invalid(format!("len_range must satisfy 1 <= min <= max, got [{lo}, {hi}]")));
        }
        if self.content_vocab < 2 {
            return Err(invalid("content_vocab must be at least 2"));
        }
        let total = self.sizes.train + self.sizes.dev + self.sizes.test;
        let capacity: f64 = (lo..=hi).map(|l| (self.content_vocab as f64).powi(l as i32)).sum();
        if (total as f64) > 0.5 * capacity {
            return Err(invalid(format!(
                "{total} distinct inputs requested but only {capacity} exist"
            )));
        }
        Ok(())
    }

    /// The cipher map over the full vocabulary; identity on reserved ids.
    pub fn cipher_permutation(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xc1f3_e500);
        let mut content: Vec<usize> = (RESERVED..self.vocab_size()).collect();
        content.shuffle(&mut rng);
        (0..RESERVED).chain(content).collect()
    }

    /// Output content for input content `x` (no `EOS`).
    pub fn transform(&self, x: &[usize], perm: &[usize]) -> Vec<usize> {
        match self.kind {
            TaskKind::Copy => x.to_vec(),
            TaskKind::Reverse => x.iter().rev().copied().collect(),
            TaskKind::Cipher => x.iter().map(|&t| perm[t]).collect(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.vocab_size())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub x: TokenSequence,
    pub y: TokenSequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub pairs: Vec<Pair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

/// Draws `train + dev + test` distinct inputs with uniform lengths and
/// uniform content tokens, in that order.
pub fn generate_task(spec: &TaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let perm = spec.cipher_permutation();
    let vocab = spec.vocab_size();
    let mut seen = HashSet::new();
    let mut draw = |n: usize, split: Split| -> Result<Dataset> {
        let mut pairs = Vec::with_capacity(n);
        while pairs.len() < n {
            let len = rng.random_range(spec.len_range[0]..=spec.len_range[1]);
            let x: Vec<usize> = (0..len).map(|_| rng.random_range(RESERVED..vocab)).collect();
            if !seen.insert(x.clone()) {
                continue;
            }
            let y = spec.transform(&x, &perm);
            pairs.push(Pair {
                x: TokenSequence::terminated(x, vocab)?,
                y: TokenSequence::terminated(y, vocab)?,
            });
        }
        Ok(Dataset { split, pairs })
    };
    Ok(TaskData {
        train: draw(spec.sizes.train, Split::Train)?,
        dev: draw(spec.sizes.dev, Split::Dev)?,
        test: draw(spec.sizes.test, Split::Test)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentSide {
    Input,
    Output,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(rename = "where", default = "default_side")]
    pub side: AugmentSide,
    #[serde(default = "default_per_original")]
    pub per_original: usize,
    #[serde(default = "default_weight")]
    pub weight_w: f64,
}

fn default_rate() -> f64 {
    0.15
}
fn default_side() -> AugmentSide {
    AugmentSide::Input
}
fn default_per_original() -> usize {
    1
}
fn default_weight() -> f64 {
    0.3
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            rate: default_rate(),
            side: default_side(),
            per_original: default_per_original(),
            weight_w: default_weight(),
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.rate) {
            return Err(invalid(format!("augmentation rate must lie in [0, 0.5], got {}", self.rate)));
        }
        if !(self.weight_w > 0.0 && self.weight_w.is_finite()) {
            return Err(invalid(format!("weight_w must be positive, got {}", self.weight_w)));
        }
        Ok(())
    }
}

/// `ceil(rate * len)`, computed so that exact products are not rounded up.
pub fn perturbed_count(rate: f64, len: usize) -> usize {
    ((rate * len as f64) - 1e-9).ceil().max(0.0) as usize
}

fn perturb(seq: &TokenSequence, rate: f64, vocab: usize, rng: &mut ChaCha8Rng) -> Result<TokenSequence> {
    let mut tokens = seq.content().to_vec();
    let editable: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] >= RESERVED).collect();
    let k = perturbed_count(rate, editable.len()).min(editable.len());
    for &i in editable.choose_multiple(rng, k) {
        let old = tokens[i];
        // Uniform over the other content tokens.
        let mut new = rng.random_range(RESERVED..vocab - 1);
        if new >= old {
            new += 1;
        }
        tokens[i] = new;
    }
    TokenSequence::new(tokens, vocab)
}

/// `per_original` perturbed copies of `pair`.
pub fn augment(pair: &Pair, spec: &AugmentSpec, vocab: usize, seed: u64) -> Result<Vec<Pair>> {
    spec.validate()?;
    if vocab <= RESERVED + 1 {
        return Err(invalid("augmentation needs at least two content tokens"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.per_original)
        .map(|_| {
            let x = match spec.side {
                AugmentSide::Input | AugmentSide::Both => perturb(&pair.x, spec.rate, vocab, &mut rng)?,
                AugmentSide::Output => pair.x.clone(),
            };
            let y = match spec.side {
                AugmentSide::Output | AugmentSide::Both => perturb(&pair.y, spec.rate, vocab, &mut rng)?,
                AugmentSide::Input => pair.y.clone(),
            };
            Ok(Pair { x, y })
        })
        .collect()
}

/// Augments every pair of `data`; pair `i` uses seed `seed + i`.
pub fn augment_dataset(data: &Dataset, spec: &AugmentSpec, vocab: usize, seed: u64) -> Result<Vec<Pair>> {
    let mut out = Vec::with_capacity(data.len() * spec.per_original);
    for (i, p) in data.pairs.iter().enumerate() {
        out.extend(augment(p, spec, vocab, seed.wrapping_add(i as u64))?);
    }
    Ok(out)
}

/// `l(f(x), y) + w * sum_k l(f(x_k), y_k)` over the augmented pairs.
pub fn augmented_loss(
    pair: &Pair,
    augmented: &[Pair],
    loss: &LossKind,
    params: &ParamSet,
    cfg: &ModelConfig,
    embeddings: &LossEmbeddings,
    weight_w: f64,
) -> Result<f64> {
    let plain = sample_loss(params, cfg, loss, embeddings, &pair.x, &pair.y)?.value;
    let mut extra = 0.0;
    for a in augmented {
        extra += sample_loss(params, cfg, loss, embeddings, &a.x, &a.y)?.value;
    }
    Ok(plain + weight_w * extra)
}

fn join(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// One pair per line, `src ids<TAB>tgt ids`, after a `#task=..;vocab=..;seed=..`
/// header.
pub fn write_dataset(path: &Path, spec: &TaskSpec, data: &Dataset) -> Result<()> {
    let mut s = String::new();
    writeln!(s, "#task={};vocab={};seed={}", spec.kind.name(), spec.vocab_size(), spec.seed).unwrap();
    for p in &data.pairs {
        writeln!(s, "{}\t{}", join(p.x.tokens()), join(p.y.tokens())).unwrap();
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub task: TaskKind,
    pub vocab: usize,
    pub seed: u64,
}

pub fn read_dataset(path: &Path, split: Split) -> Result<(DatasetHeader, Dataset)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let head = lines
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .ok_or_else(|| Error::Parse("missing dataset header".into()))?;
    let (mut task, mut vocab, mut seed) = (None, None, None);
    for kv in head.split(';') {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad header field `{kv}`")))?;
        let num = |v: &str| v.parse::<u64>().map_err(|_| Error::Parse(format!("bad {k} `{v}`")));
        match k {
            "task" => task = Some(TaskKind::parse(v)?),
            "vocab" => vocab = Some(num(v)? as usize),
            "seed" => seed = Some(num(v)?),
            _ => return Err(Error::Parse(format!("unknown header field `{k}`"))),
        }
    }
    let header = DatasetHeader {
        task: task.ok_or_else(|| Error::Parse("header lacks task".into()))?,
        vocab: vocab.ok_or_else(|| Error::Parse("header lacks vocab".into()))?,
        seed: seed.ok_or_else(|| Error::Parse("header lacks seed".into()))?,
    };
    let ids = |s: &str| -> Result<Vec<usize>> {
        s.split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad token id `{t}`"))))
            .collect()
    };
    let mut pairs = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| Error::Parse(format!("line without a tab: `{line}`")))?;
        pairs.push(Pair {
            x: TokenSequence::new(ids(src)?, header.vocab)?,
            y: TokenSequence::new(ids(tgt)?, header.vocab)?,
        });
    }
    Ok((header, Dataset { split, pairs }))
}

/// Number of positions where two equal-length token slices differ.
pub fn hamming(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Ends with `EOS`.
pub fn is_terminated(seq: &TokenSequence) -> bool {
    seq.content().last() == Some(&EOS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::init_model;

    fn small(kind: TaskKind, seed: u64) -> TaskSpec {
        TaskSpec {
            sizes: SplitSizes {
                train: 50,
                dev: 10,
                test: 20,
            },
            ..TaskSpec::new(kind, seed)
        }
    }

    fn content(s: &TokenSequence) -> &[usize] {
        let c = s.content();
        &c[..c.len() - 1]
    }

    #[test]
    fn task_examples() {
        let spec = small(TaskKind::Copy, 1);
        let perm = spec.cipher_permutation();
        assert_eq!(spec.transform(&[5, 7, 9], &perm), vec![5, 7, 9]);
        let spec = small(TaskKind::Reverse, 1);
        assert_eq!(spec.transform(&[5, 7, 9], &perm), vec![9, 7, 5]);
        let spec = small(TaskKind::Cipher, 1);
        let perm = spec.cipher_permutation();
        assert_eq!(spec.transform(&[5, 5], &perm), vec![perm[5], perm[5]]);
        assert_eq!(&perm[..RESERVED], &[0, 1, 2]);
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, (0..spec.vocab_size()).collect::<Vec<_>>());
    }

    #[test]
    fn generated_pairs_follow_the_task() {
        for kind in [TaskKind::Copy, TaskKind::Reverse, TaskKind::Cipher] {
            let spec = small(kind, 3);
            let perm = spec.cipher_permutation();
            let data = generate_task(&spec).unwrap();
            for p in data.train.pairs.iter().chain(&data.test.pairs) {
                assert!(is_terminated(&p.x) && is_terminated(&p.y));
                let x = content(&p.x);
                assert!((3..=10).contains(&x.len()));
                assert_eq!(content(&p.y), spec.transform(x, &perm).as_slice());
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        let spec = small(TaskKind::Cipher, 8);
        let a = generate_task(&spec).unwrap();
        assert_eq!(a, generate_task(&spec).unwrap());
        assert_eq!((a.train.len(), a.dev.len(), a.test.len()), (50, 10, 20));
        let mut all = HashSet::new();
        for p in a.train.pairs.iter().chain(&a.dev.pairs).chain(&a.test.pairs) {
            assert!(all.insert(p.x.clone()));
        }
        assert_ne!(a, generate_task(&small(TaskKind::Cipher, 9)).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small(TaskKind::Copy, 1);
        s.len_range = [0, 3];
        assert!(s.validate().is_err());
        s.len_range = [4, 3];
        assert!(s.validate().is_err());
        s.len_range = [1, 1];
        s.content_vocab = 5;
        assert!(s.validate().is_err());
    }

    fn pair10() -> Pair {
        let x: Vec<usize> = (3..13).collect();
        Pair {
            x: TokenSequence::terminated(x.clone(), 23).unwrap(),
            y: TokenSequence::terminated(x, 23).unwrap(),
        }
    }

    #[test]
    fn augment_examples() {
        let p = pair10();
        let zero = AugmentSpec {
            rate: 0.0,
            ..AugmentSpec::default()
        };
        assert_eq!(augment(&p, &zero, 23, 1).unwrap(), vec![p.clone()]);

        let spec = AugmentSpec::default();
        let out = augment(&p, &spec, 23, 1).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(hamming(out[0].x.tokens(), p.x.tokens()), 2);
        assert_eq!(out[0].y, p.y);
        assert_eq!(out, augment(&p, &spec, 23, 1).unwrap());
        assert_eq!(out[0].x.content().last(), Some(&EOS));
    }

    #[test]
    fn augment_sides_and_counts() {
        let p = pair10();
        for (side, dx, dy) in [
            (AugmentSide::Input, 3, 0),
            (AugmentSide::Output, 0, 3),
            (AugmentSide::Both, 3, 3),
        ] {
            let spec = AugmentSpec {
                rate: 0.3,
                side,
                per_original: 3,
                weight_w: 1.0,
            };
            let out = augment(&p, &spec, 23, 5).unwrap();
            assert_eq!(out.len(), 3);
            for a in out {
                assert_eq!(hamming(a.x.tokens(), p.x.tokens()), dx);
                assert_eq!(hamming(a.y.tokens(), p.y.tokens()), dy);
                assert!(a.x.content().iter().all(|&t| t < 23));
            }
        }
        assert_eq!(perturbed_count(0.15, 10), 2);
        assert_eq!(perturbed_count(0.2, 10), 2);
        assert_eq!(perturbed_count(0.15, 3), 1);
        assert!(AugmentSpec {
            rate: 0.6,
            ..AugmentSpec::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn augmented_loss_examples() {
        let spec = small(TaskKind::Cipher, 2);
        let data = generate_task(&spec).unwrap();
        let cfg = ModelConfig {
            embed_dim: 6,
            hidden_dim: 7,
            ..spec.model_config()
        };
        let params = init_model(&cfg, 1).unwrap();
        let emb = LossEmbeddings::random(cfg.vocab_size, 4, 0).unwrap();
        let p = &data.train.pairs[0];
        let loss = LossKind::CrossEntropy;
        let plain = sample_loss(&params, &cfg, &loss, &emb, &p.x, &p.y).unwrap().value;
        assert_eq!(augmented_loss(p, &[], &loss, &params, &cfg, &emb, 0.7).unwrap(), plain);

        let aug = augment(p, &AugmentSpec::default(), cfg.vocab_size, 3).unwrap();
        assert_eq!(augmented_loss(p, &aug, &loss, &params, &cfg, &emb, 0.0).unwrap(), plain);

        let dup = [p.clone()];
        let twice = augmented_loss(p, &dup, &loss, &params, &cfg, &emb, 1.0).unwrap();
        assert!((twice - 2.0 * plain).abs() <= 1e-12 * plain);

        let at = |w| augmented_loss(p, &aug, &loss, &params, &cfg, &emb, w).unwrap();
        let (l0, l5, l1) = (at(0.0), at(0.5), at(1.0));
        assert!((l5 - 0.5 * (l0 + l1)).abs() < 1e-12);
    }

    #[test]
    fn dataset_file_round_trip() {
        let spec = small(TaskKind::Reverse, 4);
        let data = generate_task(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dev.tsv");
        write_dataset(&path, &spec, &data.dev).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("#task=reverse;vocab=23;seed=4\n"));
        assert!(!text.contains('\r'));
        let (head, back) = read_dataset(&path, Split::Dev).unwrap();
        assert_eq!(
            head,
            DatasetHeader {
                task: TaskKind::Reverse,
                vocab: 23,
                seed: 4
            }
        );
        assert_eq!(back, data.dev);
    }
}

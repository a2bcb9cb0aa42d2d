//! A single-layer tanh recurrent encoder-decoder.
//!
//! The encoder reads `x` left to right. Its final state initializes the
//! decoder and is fed to every decoder step; the decoder reads
//! `BOS + y[..-1]` and emits one probability row per target position.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, ParamSet, RealArray, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::losses::{cross_entropy, euclidean_loss, wd_loss, LossKind, LossValue};
use crate::transport::SentenceDistribution;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const RESERVED: usize = 3;

/// A token id sequence. Trailing `PAD` ids are padding and are ignored by
/// the model and every loss.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    tokens: Vec<usize>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(invalid(format!("token {t} outside vocabulary of {vocab_size}")));
        }
        let seq = Self { tokens };
        if seq.content().is_empty() {
            return Err(invalid("sequence is empty"));
        }
        if seq.content().contains(&PAD) {
            return Err(invalid("PAD may only appear as trailing padding"));
        }
        Ok(seq)
    }

    /// `tokens` followed by `EOS`.
    pub fn terminated(mut tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        tokens.push(EOS);
        Self::new(tokens, vocab_size)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Tokens with trailing padding removed.
    pub fn content(&self) -> &[usize] {
        let end = self.tokens.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
        &self.tokens[..end]
    }

    pub fn len(&self) -> usize {
        self.content().len()
    }

    pub fn is_empty(&self) -> bool {
        self.content().is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_init_range")]
    pub init_range: f64,
}

fn default_embed() -> usize {
    32
}
fn default_hidden() -> usize {
    64
}
fn default_max_len() -> usize {
    16
}
fn default_init_range() -> f64 {
    0.1
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: default_embed(),
            hidden_dim: default_hidden(),
            max_len: default_max_len(),
            init_range: default_init_range(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= RESERVED {
            return Err(invalid(format!(
                "vocab_size must exceed the {RESERVED} reserved ids, got {}",
                self.vocab_size
            )));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.max_len == 0 {
            return Err(invalid("embed_dim, hidden_dim and max_len must be positive"));
        }
        if !(self.init_range > 0.0 && self.init_range < 1.0) {
            return Err(invalid(format!("init_range must lie in (0, 1), got {}", self.init_range)));
        }
        Ok(())
    }

    /// Name and shape of every parameter.
    pub fn layout(&self) -> Vec<(&'static str, [usize; 2])> {
        let (v, e, h) = (self.vocab_size, self.embed_dim, self.hidden_dim);
        vec![
            ("dec.b", [1, h]),
            ("dec.w_ch", [h, h]),
            ("dec.embed", [v, e]),
            ("dec.w_hh", [h, h]),
            ("dec.w_xh", [e, h]),
            ("enc.b", [1, h]),
            ("enc.embed", [v, e]),
            ("enc.w_hh", [h, h]),
            ("enc.w_xh", [e, h]),
            ("out.b", [1, v]),
            ("out.w", [h, v]),
        ]
    }

    /// `2VE + 2(EH + HH + H) + HH + HV + V`.
    pub fn param_count(&self) -> usize {
        let (v, e, h) = (self.vocab_size, self.embed_dim, self.hidden_dim);
        2 * v * e + 2 * (e * h + h * h + h) + h * h + h * v + v
    }
}

/// Every parameter i.i.d. `Uniform(-init_range, init_range)`, drawn in
/// layout order.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = cfg.init_range;
    let mut params = ParamSet::new();
    for (name, [rows, cols]) in cfg.layout() {
        let values = (0..rows * cols).map(|_| rng.random_range(-r..r)).collect();
        params.insert(name, RealArray::matrix(rows, cols, values)?)?;
    }
    Ok(params)
}

/// Fixed word vectors defining the loss space for the Euclidean and
/// transport losses. They are not trained.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEmbeddings {
    table: RealArray,
}

pub const LOSS_EMBED_DIM: usize = 8;

impl LossEmbeddings {
    /// Entries i.i.d. `Uniform(-1, 1)`.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e3be_dd00);
        let values = (0..vocab_size * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        Ok(Self {
            table: RealArray::matrix(vocab_size, dim, values)?,
        })
    }

    pub fn from_table(table: RealArray) -> Result<Self> {
        if table.shape().len() != 2 {
            return Err(Error::Shape("embedding table must be 2-D".into()));
        }
        Ok(Self { table })
    }

    pub fn table(&self) -> &RealArray {
        &self.table
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    /// Uniform distribution over the embeddings of `seq`'s content tokens.
    pub fn target_distribution(&self, seq: &TokenSequence) -> Result<SentenceDistribution> {
        let points: Vec<Vec<f64>> = seq
            .content()
            .iter()
            .map(|&t| self.table.row_slice(t).to_vec())
            .collect();
        SentenceDistribution::uniform_points(&points)
    }

    /// Mean embedding of `seq`'s content tokens.
    pub fn mean_embedding(&self, seq: &TokenSequence) -> Vec<f64> {
        let c = seq.content();
        let mut mean = vec![0.0; self.dim()];
        for &t in c {
            for (m, v) in mean.iter_mut().zip(self.table.row_slice(t)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= c.len() as f64);
        mean
    }
}

/// Teacher-forced probability rows, one per target position.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub probs: RealArray,
}

impl ModelOutput {
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.probs.rows()).map(|r| argmax(self.probs.row_slice(r))).collect()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

fn check_len(cfg: &ModelConfig, seq: &TokenSequence, what: &str) -> Result<()> {
    if seq.is_empty() {
        return Err(invalid(format!("{what} sequence is empty")));
    }
    if seq.len() > cfg.max_len {
        return Err(invalid(format!("{what} length {} exceeds max_len {}", seq.len(), cfg.max_len)));
    }
    if let Some(&t) = seq.content().iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(invalid(format!("{what} token {t} outside vocabulary")));
    }
    Ok(())
}

struct Cell {
    embed: Var,
    w_xh: Var,
    w_hh: Var,
    b: Var,
}

impl Cell {
    fn bind(b: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            embed: b.get(&format!("{prefix}.embed"))?,
            w_xh: b.get(&format!("{prefix}.w_xh"))?,
            w_hh: b.get(&format!("{prefix}.w_hh"))?,
            b: b.get(&format!("{prefix}.b"))?,
        })
    }

    /// Runs the cell over `tokens` from `h0` with the additive term `bias`;
    /// returns every hidden state.
    fn run(&self, tape: &mut Tape, tokens: &[usize], h0: Var, bias: Var) -> Result<Vec<Var>> {
        let x = tape.gather(self.embed, tokens)?;
        let proj = tape.matmul(x, self.w_xh)?;
        let mut h = h0;
        let mut states = Vec::with_capacity(tokens.len());
        for t in 0..tokens.len() {
            let xt = tape.gather(proj, &[t])?;
            let rec = tape.matmul(h, self.w_hh)?;
            let pre = tape.add(xt, rec)?;
            let pre = tape.add(pre, bias)?;
            h = tape.tanh(pre)?;
            states.push(h);
        }
        Ok(states)
    }
}

/// `dec.b + context @ dec.w_ch`: the encoder summary enters every decoder
/// step, not only the initial state.
fn context_bias(tape: &mut Tape, bound: &Bound, dec: &Cell, context: Var) -> Result<Var> {
    let c = tape.matmul(context, bound.get("dec.w_ch")?)?;
    tape.add(dec.b, c)
}

/// Records the teacher-forced forward pass; returns the `|y| x V`
/// probability rows.
pub fn record_forward(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    x: &TokenSequence,
    y: &TokenSequence,
) -> Result<Var> {
    check_len(cfg, x, "input")?;
    check_len(cfg, y, "target")?;
    let enc = Cell::bind(bound, "enc")?;
    let dec = Cell::bind(bound, "dec")?;
    let h0 = tape.constant(RealArray::zeros(&[1, cfg.hidden_dim]))?;
    let enc_states = enc.run(tape, x.content(), h0, enc.b)?;
    let context = *enc_states.last().expect("non-empty input");
    let dec_bias = context_bias(tape, bound, &dec, context)?;

    let y = y.content();
    let mut dec_in = Vec::with_capacity(y.len());
    dec_in.push(BOS);
    dec_in.extend_from_slice(&y[..y.len() - 1]);
    let states = dec.run(tape, &dec_in, context, dec_bias)?;
    let hidden = tape.concat(&states)?;
    logits_to_probs(tape, bound, hidden, y.len())
}

fn logits_to_probs(tape: &mut Tape, bound: &Bound, hidden: Var, rows: usize) -> Result<Var> {
    let logits = tape.matmul(hidden, bound.get("out.w")?)?;
    let ones = tape.constant(RealArray::filled(&[rows, 1], 1.0))?;
    let bias = tape.matmul(ones, bound.get("out.b")?)?;
    let logits = tape.add(logits, bias)?;
    tape.softmax(logits)
}

pub fn forward_teacher_forced(
    params: &ParamSet,
    cfg: &ModelConfig,
    x: &TokenSequence,
    y: &TokenSequence,
) -> Result<ModelOutput> {
    let mut tape = Tape::new();
    let bound = tape.bind(params)?;
    let probs = record_forward(&mut tape, &bound, cfg, x, y)?;
    Ok(ModelOutput {
        probs: tape.value(probs).clone(),
    })
}

/// Argmax decoding from `BOS`. Stops after `EOS`; a sequence that reaches
/// `max_len` without one has its last token replaced by `EOS`.
pub fn greedy_decode(params: &ParamSet, cfg: &ModelConfig, x: &TokenSequence) -> Result<TokenSequence> {
    check_len(cfg, x, "input")?;
    let mut tape = Tape::new();
    let bound = tape.bind(params)?;
    let enc = Cell::bind(&bound, "enc")?;
    let dec = Cell::bind(&bound, "dec")?;
    let h0 = tape.constant(RealArray::zeros(&[1, cfg.hidden_dim]))?;
    let mut h = *enc.run(&mut tape, x.content(), h0, enc.b)?.last().expect("non-empty input");
    let dec_bias = context_bias(&mut tape, &bound, &dec, h)?;
    let mut out = Vec::new();
    let mut prev = BOS;
    while out.len() < cfg.max_len {
        h = dec.run(&mut tape, &[prev], h, dec_bias)?[0];
        let probs = logits_to_probs(&mut tape, &bound, h, 1)?;
        prev = argmax(tape.value(probs).values());
        out.push(prev);
        if prev == EOS {
            break;
        }
    }
    if out.last() != Some(&EOS) {
        *out.last_mut().expect("max_len >= 1") = EOS;
    }
    // PAD is a legal argmax for an untrained model; it cannot appear inside
    // a sequence, so it is read as end of sequence.
    if let Some(p) = out.iter().position(|&t| t == PAD) {
        out.truncate(p);
        out.push(EOS);
    }
    TokenSequence::new(out, cfg.vocab_size)
}

/// Support = per-position expected embeddings `probs @ table`, weights
/// uniform over positions.
pub fn sentence_distribution(out: &ModelOutput, embeddings: &LossEmbeddings) -> Result<SentenceDistribution> {
    let mut tape = Tape::new();
    let p = tape.constant(out.probs.clone())?;
    let e = tape.constant(embeddings.table().clone())?;
    let s = tape.matmul(p, e)?;
    SentenceDistribution::uniform(tape.value(s).clone())
}

/// Records the full model-plus-loss scalar for one pair.
pub fn record_sample_loss(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    loss: &LossKind,
    embeddings: &LossEmbeddings,
    x: &TokenSequence,
    y: &TokenSequence,
) -> Result<LossValue> {
    let probs = record_forward(tape, bound, cfg, x, y)?;
    match loss {
        LossKind::CrossEntropy => cross_entropy(tape, probs, y.content()),
        LossKind::Euclidean => {
            let table = tape.constant(embeddings.table().clone())?;
            let support = tape.matmul(probs, table)?;
            let n = y.len();
            let avg = tape.constant(RealArray::filled(&[1, n], 1.0 / n as f64))?;
            let mean = tape.matmul(avg, support)?;
            let target = tape.constant(RealArray::row(embeddings.mean_embedding(y))?)?;
            euclidean_loss(tape, mean, target)
        }
        LossKind::Wd { ipot, sqrt_guard } => {
            let table = tape.constant(embeddings.table().clone())?;
            let support = tape.matmul(probs, table)?;
            let target = embeddings.target_distribution(y)?;
            wd_loss(tape, support, &target, ipot, *sqrt_guard)
        }
    }
}

/// Loss value and parameter gradients for one pair.
pub fn sample_loss_and_grad(
    params: &ParamSet,
    cfg: &ModelConfig,
    loss: &LossKind,
    embeddings: &LossEmbeddings,
    x: &TokenSequence,
    y: &TokenSequence,
) -> Result<(LossValue, ParamSet)> {
    let mut tape = Tape::new();
    let bound = tape.bind(params)?;
    let lv = record_sample_loss(&mut tape, &bound, cfg, loss, embeddings, x, y)?;
    tape.backward(lv.var)?;
    Ok((lv, tape.param_gradients()?))
}

/// Loss value only.
pub fn sample_loss(
    params: &ParamSet,
    cfg: &ModelConfig,
    loss: &LossKind,
    embeddings: &LossEmbeddings,
    x: &TokenSequence,
    y: &TokenSequence,
) -> Result<LossValue> {
    let mut tape = Tape::new();
    let bound = tape.bind(params)?;
    record_sample_loss(&mut tape, &bound, cfg, loss, embeddings, x, y)
}

const CHECKPOINT_MAGIC: &str = "augweight-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Text checkpoint. Values are written in Rust's shortest round-trip form,
/// so reading back is bit-exact.
pub fn write_checkpoint(path: &Path, cfg: &ModelConfig, params: &ParamSet) -> Result<()> {
    let mut s = String::new();
    writeln!(s, "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}").unwrap();
    writeln!(
        s,
        "config vocab_size={} embed_dim={} hidden_dim={} max_len={} init_range={}",
        cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.max_len, cfg.init_range
    )
    .unwrap();
    for (name, arr) in params.iter() {
        let shape: Vec<String> = arr.shape().iter().map(usize::to_string).collect();
        writeln!(s, "param {name} {}", shape.join(" ")).unwrap();
        let vals: Vec<String> = arr.values().iter().map(f64::to_string).collect();
        writeln!(s, "{}", vals.join(" ")).unwrap();
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(s.as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, ParamSet)> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Parse(format!("checkpoint ends before {what}")))?
            .map_err(Error::from)
    };
    let header = next("header")?;
    if header != format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}") {
        return Err(Error::Parse(format!("unsupported checkpoint header `{header}`")));
    }
    let cfg_line = next("config")?;
    let mut cfg = ModelConfig::new(0);
    let mut fields = cfg_line.split_whitespace();
    if fields.next() != Some("config") {
        return Err(Error::Parse("missing config line".into()));
    }
    for kv in fields {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad config entry `{kv}`")))?;
        let bad = |_| Error::Parse(format!("bad value for {k}: `{v}`"));
        match k {
            "vocab_size" => cfg.vocab_size = v.parse().map_err(bad)?,
            "embed_dim" => cfg.embed_dim = v.parse().map_err(bad)?,
            "hidden_dim" => cfg.hidden_dim = v.parse().map_err(bad)?,
            "max_len" => cfg.max_len = v.parse().map_err(bad)?,
            "init_range" => {
                cfg.init_range = v
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad value for {k}: `{v}`")))?
            }
            _ => return Err(Error::Parse(format!("unknown config key `{k}`"))),
        }
    }
    cfg.validate().map_err(|e| Error::Parse(e.to_string()))?;

    let mut params = ParamSet::new();
    while let Some(head) = lines.next() {
        let head = head?;
        if head.is_empty() {
            continue;
        }
        let mut parts = head.split_whitespace();
        if parts.next() != Some("param") {
            return Err(Error::Parse(format!("expected a param line, got `{head}`")));
        }
        let name = parts
            .next()
            .ok_or_else(|| Error::Parse("param line without a name".into()))?;
        let shape = parts
            .map(|d| d.parse::<usize>().map_err(|_| Error::Parse(format!("bad dimension `{d}`"))))
            .collect::<Result<Vec<_>>>()?;
        let body = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("missing values for `{name}`")))??;
        let values = body
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| Error::Parse(format!("bad value `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        params.insert(name, RealArray::new(shape, values)?)?;
    }
    let expected = cfg.layout();
    if params.len() != expected.len()
        || expected
            .iter()
            .any(|(n, s)| params.get(n).map(|a| a.shape()) != Some(&s[..]))
    {
        return Err(Error::Parse("checkpoint parameters do not match the model layout".into()));
    }
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            embed_dim: 4,
            hidden_dim: 5,
            max_len: 4,
            init_range: 0.5,
        }
    }

    fn seq(t: &[usize], v: usize) -> TokenSequence {
        TokenSequence::new(t.to_vec(), v).unwrap()
    }

    #[test]
    fn init_is_seeded_and_counted() {
        let cfg = ModelConfig::new(23);
        let a = init_model(&cfg, 4).unwrap();
        assert_eq!(a, init_model(&cfg, 4).unwrap());
        assert_ne!(a, init_model(&cfg, 5).unwrap());
        // 2*23*32 + 2*(32*64 + 64*64 + 64) + 64*64 + 64*23 + 23
        assert_eq!(cfg.param_count(), 19_479);
        assert_eq!(a.num_values(), cfg.param_count());
        assert!(a.iter().all(|(_, v)| v.values().iter().all(|x| x.abs() < 0.1)));
        let bad = ModelConfig {
            init_range: 0.0,
            ..cfg
        };
        assert!(init_model(&bad, 1).is_err());
    }

    #[test]
    fn token_sequence_validation() {
        assert!(TokenSequence::new(vec![], 6).is_err());
        assert!(TokenSequence::new(vec![0, 0], 6).is_err());
        assert!(TokenSequence::new(vec![3, 9], 6).is_err());
        assert!(TokenSequence::new(vec![3, 0, 4], 6).is_err());
        let s = TokenSequence::new(vec![3, 4, 2, 0, 0], 6).unwrap();
        assert_eq!(s.content(), &[3, 4, 2]);
        assert_eq!(TokenSequence::terminated(vec![5], 6).unwrap().tokens(), &[5, 2]);
    }

    #[test]
    fn rows_are_distributions() {
        let cfg = ModelConfig::new(23);
        let p = init_model(&cfg, 1).unwrap();
        let out = forward_teacher_forced(&p, &cfg, &seq(&[5, 7, 9, 2], 23), &seq(&[9, 7, 2], 23)).unwrap();
        assert_eq!(out.probs.shape(), &[3, 23]);
        for r in 0..3 {
            assert!((out.probs.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zeroed_output_layer_gives_uniform_rows() {
        let cfg = ModelConfig {
            vocab_size: 4,
            ..tiny()
        };
        let mut p = init_model(&cfg, 1).unwrap();
        for i in 0..p.get("out.w").unwrap().len() {
            *p.value_mut("out.w", i).unwrap() = 0.0;
        }
        for i in 0..4 {
            *p.value_mut("out.b", i).unwrap() = 0.0;
        }
        let out = forward_teacher_forced(&p, &cfg, &seq(&[3, 2], 4), &seq(&[3, 3, 2], 4)).unwrap();
        assert!(out.probs.values().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn empty_or_long_sequences_are_rejected() {
        let cfg = tiny();
        let p = init_model(&cfg, 1).unwrap();
        let long = seq(&[3, 3, 3, 3, 2], 6);
        assert!(forward_teacher_forced(&p, &cfg, &long, &seq(&[2], 6)).is_err());
        assert!(forward_teacher_forced(&p, &cfg, &seq(&[2], 6), &long).is_err());
    }

    #[test]
    fn encoder_parameters_reach_the_loss() {
        let cfg = tiny();
        let mut p = init_model(&cfg, 3).unwrap();
        let emb = LossEmbeddings::random(6, 3, 0).unwrap();
        let (x, y) = (seq(&[3, 4, 2], 6), seq(&[5, 2], 6));
        let base = sample_loss(&p, &cfg, &LossKind::CrossEntropy, &emb, &x, &y).unwrap().value;
        *p.value_mut("enc.w_xh", 0).unwrap() += 1e-3;
        let bumped = sample_loss(&p, &cfg, &LossKind::CrossEntropy, &emb, &x, &y).unwrap().value;
        assert!((bumped - base).abs() > 1e-9);
    }

    #[test]
    fn greedy_decode_is_valid_and_deterministic() {
        for seed in 0..10 {
            let cfg = ModelConfig {
                max_len: 5,
                ..ModelConfig::new(9)
            };
            let p = init_model(&cfg, seed).unwrap();
            let x = seq(&[3, 4, 5, 2], 9);
            let a = greedy_decode(&p, &cfg, &x).unwrap();
            assert_eq!(a, greedy_decode(&p, &cfg, &x).unwrap());
            assert!(a.len() <= 5 && a.content().last() == Some(&EOS));
        }
    }

    #[test]
    fn sentence_distribution_limits() {
        let emb = LossEmbeddings::random(4, 3, 1).unwrap();
        let one_hot = ModelOutput {
            probs: RealArray::matrix(2, 4, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        };
        let d = sentence_distribution(&one_hot, &emb).unwrap();
        assert_eq!(d.point(0), emb.table().row_slice(2));
        assert_eq!(d.point(1), emb.table().row_slice(3));
        assert_eq!(d.weights(), &[0.5, 0.5]);

        let uniform = ModelOutput {
            probs: RealArray::filled(&[3, 4], 0.25),
        };
        let d = sentence_distribution(&uniform, &emb).unwrap();
        let mean: Vec<f64> = (0..3)
            .map(|k| (0..4).map(|v| emb.table().get(v, k)).sum::<f64>() / 4.0)
            .collect();
        for i in 0..3 {
            for k in 0..3 {
                assert!((d.point(i)[k] - mean[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = tiny();
        let emb = LossEmbeddings::random(6, 3, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for inst in 0..3 {
            let p = init_model(&cfg, inst).unwrap();
            let mut draw = || {
                let n = rng.random_range(1..3);
                let mut t: Vec<usize> = (0..n).map(|_| rng.random_range(3..6)).collect();
                t.push(EOS);
                seq(&t, 6)
            };
            let (x, y) = (draw(), draw());
            for (loss, tol) in [(LossKind::CrossEntropy, 1e-5), (LossKind::Euclidean, 1e-5), (LossKind::wd(), 1e-2)] {
                let err = finite_diff_check(
                    &p,
                    |t, b| Ok(record_sample_loss(t, b, &cfg, &loss, &emb, &x, &y)?.var),
                    1e-5,
                )
                .unwrap();
                assert!(err < tol, "{} instance {inst}: {err}", loss.name());
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = tiny();
        let p = init_model(&cfg, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&path, &cfg, &p).unwrap();
        let (cfg2, p2) = read_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        for ((_, a), (_, b)) in p.iter().zip(p2.iter()) {
            assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, "something else\n").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Parse(_))));
    }
}

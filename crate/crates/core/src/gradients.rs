//! Finite-difference checks of every trained gradient path, in f64 on a
//! shrunken model so the whole suite runs in seconds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoders::{BoundLinear, EncoderConfig, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::losses::{itc_loss, phase1_loss, phase2_loss, triplet_loss};
use crate::numerics::{grad_check, normalized, sq_distance, Tape, Tensor, Var};
use crate::prompts::{one_hot, BoundPromptBank, PromptBank};
use crate::tpg::{frozen_bank, BoundTpg, TargetPromptGenerator, TpgConfig};

pub const TOLERANCE: f64 = 1e-5;
pub const SEEDS: [u64; 3] = [11, 22, 33];
pub const POINTS: usize = 5;
const STEP: f64 = 1e-6;
const MARGIN: f64 = 0.5;
const TAU: f64 = 0.07;
/// Hinge arguments closer than this to zero are redrawn.
const KINK_GAP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Losses,
    Tpg,
    All,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub check: &'static str,
    pub seed: u64,
    pub point: usize,
    pub error: f64,
    pub passed: bool,
}

const CLASSES: usize = 3;
const DOMAINS: usize = 2;
const PROMPT_DIM: usize = 3;
const BATCH: usize = 4;

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        tokens: 3,
        input_dim: 6,
        embed_dim: 5,
        text_dim: 4,
        context_len: 2,
        layers: 1,
        heads: 2,
        ff_hidden: 6,
        position_std: 0.1,
        image_seed: 7,
        text_seed: 8,
    }
}

fn tiny_tpg() -> TpgConfig {
    TpgConfig { hidden: 5, feature_dim: 4, key_dim: 3 }
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let (v, ok) = normalized(Tensor::<f64>::randn(&[n], 1.0, rng).data());
        if ok {
            return v;
        }
    }
}

/// Pairs whose hinge sits at least `KINK_GAP` away from its corner for
/// `anchor`.
fn pairs_away_from_kinks(anchor: &[f64], count: usize, rng: &mut ChaCha8Rng) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let (p, n) = (unit(rng, anchor.len()), unit(rng, anchor.len()));
        let arg = sq_distance(anchor, &p) - sq_distance(anchor, &n) + MARGIN;
        if arg.abs() > KINK_GAP {
            out.push((p, n));
        }
    }
    out
}

/// One labelled token grid per batch slot.
fn batch(rng: &mut ChaCha8Rng, enc: &EncoderConfig) -> Vec<(usize, usize, Tensor<f64>)> {
    (0..BATCH)
        .map(|i| (i % CLASSES, (i / 2) % DOMAINS, Tensor::randn(&[enc.tokens, enc.input_dim], 1.0, rng)))
        .collect()
}

fn text_rows(tape: &mut Tape<f64>, text: &TextEncoder<f64>, context: Option<Var>, domain: usize) -> Result<Var> {
    let mut bound = text.bind(tape)?;
    if let Some(c) = context {
        bound = bound.with_context(c);
    }
    let rows = (0..CLASSES)
        .map(|c| {
            let f = bound.encode(tape, text, c, domain)?;
            let e = tape.value(f).len();
            tape.reshape(f, vec![1, e])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&rows, 0)
}

fn flat_context(text: &TextEncoder<f64>) -> Result<Tensor<f64>> {
    let t = &text.template;
    t.domain_context.clone().reshape(vec![t.num_domains() * t.context_len(), t.prefix.shape()[1]])
}

fn check_triplet(rng: &mut ChaCha8Rng) -> Result<f64> {
    let anchor = unit(rng, 6);
    let pairs = pairs_away_from_kinks(&anchor, 2, rng);
    grad_check(|t, v| triplet_loss(t, v[0], &pairs, MARGIN), &[Tensor::vector(anchor.clone())], STEP)
}

fn check_itc(rng: &mut ChaCha8Rng) -> Result<f64> {
    let point = [Tensor::randn(&[6], 1.0, rng), Tensor::randn(&[CLASSES, 6], 1.0, rng)];
    let class = rng.random_range(0..CLASSES);
    grad_check(|t, v| itc_loss(t, v[0], v[1], class, TAU), &point, STEP)
}

/// Context vectors of the template through the frozen text encoder and ITC.
fn check_text_context(rng: &mut ChaCha8Rng) -> Result<f64> {
    let enc = tiny_encoder();
    let mut text = TextEncoder::<f64>::new(&enc, CLASSES, DOMAINS);
    text.template.domain_context = Tensor::randn(text.template.domain_context.shape(), 0.5, rng);
    let image = Tensor::vector(unit(rng, enc.embed_dim));
    let (class, domain) = (rng.random_range(0..CLASSES), rng.random_range(0..DOMAINS));
    grad_check(
        |t, v| {
            let texts = text_rows(t, &text, Some(v[0]), domain)?;
            let i = t.constant(&image);
            itc_loss(t, i, texts, class, TAU)
        },
        &[flat_context(&text)?],
        STEP,
    )
}

/// Combined phase-1 objective with respect to U, V, the projection and the
/// text context, on a small batch.
fn check_phase1(rng: &mut ChaCha8Rng) -> Result<f64> {
    let enc = tiny_encoder();
    let image = ImageEncoder::<f64>::new(&enc);
    let mut text = TextEncoder::<f64>::new(&enc, CLASSES, DOMAINS);
    text.template.domain_context = Tensor::randn(text.template.domain_context.shape(), 0.5, rng);
    let mut bank = PromptBank::<f64>::new(DOMAINS, CLASSES, PROMPT_DIM, enc.input_dim, 0.5, rng)?;
    bank.u = Tensor::randn(bank.u.shape(), 0.5, rng);
    bank.v = Tensor::randn(bank.v.shape(), 0.5, rng);
    let samples = batch(rng, &enc);

    let forward = |t: &mut Tape<f64>, v: &[Var]| -> Result<Vec<Var>> {
        let b = BoundPromptBank { u: v[0], v: v[1], projection: BoundLinear { weight: v[2], bias: v[3] } };
        let img = image.bind(t);
        samples
            .iter()
            .map(|(c, d, x)| {
                let p = b.select(t, *c, *d)?;
                let x = t.constant(x);
                img.encode(t, &image, x, Some(p))
            })
            .collect()
    };
    let point = [bank.u.clone(), bank.v.clone(), bank.projection.weight.clone(), bank.projection.bias.clone(), flat_context(&text)?];

    // queue pairs are drawn against the anchors at the base point
    let mut base = Tape::new();
    let vars: Vec<Var> = point.iter().map(|p| base.constant(p)).collect();
    let anchors: Vec<Vec<f64>> = forward(&mut base, &vars)?.into_iter().map(|f| base.value(f).to_vec()).collect();
    let pairs: Vec<_> = anchors.iter().map(|a| pairs_away_from_kinks(a, 2, rng)).collect();

    grad_check(
        |t, v| {
            let feats = forward(t, v)?;
            let mut itc = Vec::new();
            let mut tri = Vec::new();
            for (((c, d, _), &f), pairs) in samples.iter().zip(&feats).zip(&pairs) {
                let texts = text_rows(t, &text, Some(v[4]), *d)?;
                itc.push(itc_loss(t, f, texts, *c, TAU)?);
                tri.push(triplet_loss(t, f, pairs, MARGIN)?);
            }
            phase1_loss(t, &tri, &itc)
        },
        &point,
        STEP,
    )
}

/// Phase-2 objective with respect to every generator parameter, with the
/// true rows masked.
fn check_phase2(rng: &mut ChaCha8Rng) -> Result<f64> {
    let enc = tiny_encoder();
    let image = ImageEncoder::<f64>::new(&enc);
    let text = TextEncoder::<f64>::new(&enc, CLASSES, DOMAINS);
    let mut bank = PromptBank::<f64>::new(DOMAINS, CLASSES, PROMPT_DIM, enc.input_dim, 0.5, rng)?;
    bank.u = Tensor::randn(bank.u.shape(), 0.5, rng);
    bank.v = Tensor::randn(bank.v.shape(), 0.5, rng);
    let crossed = rng.random_bool(0.5);
    let tpg = TargetPromptGenerator::<f64>::new(enc.input_dim, PROMPT_DIM, &tiny_tpg(), crossed, rng)?;
    let samples = batch(rng, &enc);
    let texts: Vec<Tensor<f64>> = (0..DOMAINS)
        .map(|d| {
            let rows: Vec<f64> = (0..CLASSES).map(|c| text.encode(c, d)).collect::<Result<Vec<_>>>()?.concat();
            Tensor::matrix(CLASSES, enc.embed_dim, rows)
        })
        .collect::<Result<_>>()?;
    let point: Vec<Tensor<f64>> = tpg.tensors().into_iter().cloned().collect();

    grad_check(
        |t, v| {
            let vars: [Var; 8] = v.try_into().map_err(|_| Error::contract("grad_check", "expected 8 generator tensors"))?;
            let gen = BoundTpg::from_vars(vars, crossed);
            let fb = frozen_bank(t, &bank);
            let img = image.bind(t);
            let mut itc = Vec::new();
            for (c, d, x) in &samples {
                let x = t.constant(x);
                let g = gen.generate(t, &fb, x, &one_hot(CLASSES, *c), &one_hot(DOMAINS, *d))?;
                let f = img.encode(t, &image, x, Some(g.prompt))?;
                let tx = t.constant(&texts[*d]);
                itc.push(itc_loss(t, f, tx, *c, TAU)?);
            }
            phase2_loss(t, &itc)
        },
        &point,
        STEP,
    )
}

type Check = fn(&mut ChaCha8Rng) -> Result<f64>;

fn checks(scope: Scope) -> Vec<(&'static str, Check)> {
    let losses: [(&'static str, Check); 4] =
        [("triplet", check_triplet), ("itc", check_itc), ("phase1", check_phase1), ("text_context", check_text_context)];
    let tpg: [(&'static str, Check); 1] = [("phase2", check_phase2)];
    match scope {
        Scope::Losses => losses.to_vec(),
        Scope::Tpg => tpg.to_vec(),
        Scope::All => losses.into_iter().chain(tpg).collect(),
    }
}

/// Every check in `scope` at each seed and point.
pub fn run(scope: Scope) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (name, check) in checks(scope) {
        for seed in SEEDS {
            for point in 0..POINTS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(point as u64);
                let error = check(&mut rng)?;
                out.push(CheckOutcome { check: name, seed, point, error, passed: error < TOLERANCE });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_and_itc_pass() {
        let res = run(Scope::Losses).unwrap();
        assert_eq!(res.len(), 4 * SEEDS.len() * POINTS);
        let bad: Vec<_> = res.iter().filter(|o| !o.passed).collect();
        assert!(bad.is_empty(), "{bad:?}");
    }

    #[test]
    fn generator_path_passes() {
        let res = run(Scope::Tpg).unwrap();
        assert_eq!(res.len(), SEEDS.len() * POINTS);
        assert!(res.iter().all(|o| o.passed), "{res:?}");
    }

    #[test]
    fn kink_filter_keeps_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = unit(&mut rng, 4);
        for (p, n) in pairs_away_from_kinks(&a, 20, &mut rng) {
            assert!((sq_distance(&a, &p) - sq_distance(&a, &n) + MARGIN).abs() > KINK_GAP);
        }
    }
}

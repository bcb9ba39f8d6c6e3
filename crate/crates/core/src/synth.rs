//! Synthetic calibration-stress task.
//!
//! Two-class corpus where the label is decided by trigger tokens planted
//! among distractors: most examples carry a single trigger, the rest carry
//! a two-against-one trigger majority. A bag-of-words count of trigger
//! tokens separates the task perfectly, so any residual miscalibration
//! comes from training label noise and the harder majority examples, not
//! from an unlearnable rule. The out-of-domain split swaps the distractor
//! vocabulary wholesale.

use crate::data::Example;
use crate::error::{Error, Result};
use crate::rng::substream;
use rand::seq::IndexedRandom;
use rand::Rng;

pub const POS_TRIGGERS: [&str; 3] = ["zorp", "flim", "quat"];
pub const NEG_TRIGGERS: [&str; 3] = ["mard", "grest", "plon"];

/// Fraction of examples with a 2-vs-1 trigger majority instead of a
/// single trigger.
const MAJORITY_FRACTION: f64 = 0.3;
const MIN_DISTRACTORS: usize = 6;
const MAX_DISTRACTORS: usize = 12;
const DISTRACTOR_POOL: usize = 40;

#[derive(Debug, Clone)]
pub struct SynthSplits {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    /// Same task, distractor vocabulary swapped.
    pub od_test: Vec<Example>,
}

fn distractor(pool_prefix: &str, i: usize) -> String {
    format!("{pool_prefix}{i:02}")
}

fn gen_example(
    rng: &mut impl Rng,
    id: String,
    pool_prefix: &str,
) -> Example {
    let n_distract = rng.random_range(MIN_DISTRACTORS..=MAX_DISTRACTORS);
    let mut tokens: Vec<String> = (0..n_distract)
        .map(|_| distractor(pool_prefix, rng.random_range(0..DISTRACTOR_POOL)))
        .collect();
    let label = rng.random_range(0..2usize);
    let (own, other) = if label == 1 {
        (&POS_TRIGGERS, &NEG_TRIGGERS)
    } else {
        (&NEG_TRIGGERS, &POS_TRIGGERS)
    };
    let mut triggers: Vec<String> = Vec::new();
    if rng.random_bool(MAJORITY_FRACTION) {
        // two of the majority class, one of the minority: still decided
        // by the trigger count, but harder to read off a single token
        triggers.push(own.choose(rng).unwrap().to_string());
        triggers.push(own.choose(rng).unwrap().to_string());
        triggers.push(other.choose(rng).unwrap().to_string());
    } else {
        triggers.push(own.choose(rng).unwrap().to_string());
    }
    for t in triggers {
        let pos = rng.random_range(0..=tokens.len());
        tokens.insert(pos, t);
    }
    Example {
        id,
        text: tokens.join(" "),
        text2: None,
        label,
    }
}

fn gen_split(seed: u64, stream: &str, prefix: &str, pool_prefix: &str, n: usize) -> Vec<Example> {
    let mut rng = substream(seed, stream, 0);
    (0..n)
        .map(|i| gen_example(&mut rng, format!("{prefix}-{i:05}"), pool_prefix))
        .collect()
}

/// Generates train/dev/test (80/10/10) plus a distractor-shifted OD test
/// split. Exactly `floor(noise_rate * |train|)` training labels are
/// flipped; dev and test stay clean.
pub fn synth_task(n: usize, noise_rate: f64, seed: u64) -> Result<SynthSplits> {
    if !(0.0..0.5).contains(&noise_rate) {
        return Err(Error::Config(format!(
            "noise_rate must lie in [0, 0.5), got {noise_rate}"
        )));
    }
    if n < 10 {
        return Err(Error::Config(format!(
            "synthetic task needs at least 10 examples, got {n}"
        )));
    }
    let n_train = n * 8 / 10;
    let n_dev = n / 10;
    let n_test = n - n_train - n_dev;

    let mut train = gen_split(seed, "synth-train", "tr", "blk", n_train);
    let dev = gen_split(seed, "synth-dev", "dv", "blk", n_dev);
    let test = gen_split(seed, "synth-test", "te", "blk", n_test);
    let od_test = gen_split(seed, "synth-od", "od", "vex", n_test);

    let n_flip = (noise_rate * n_train as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut rng = substream(seed, "synth-noise", 0);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    for &i in order.iter().take(n_flip) {
        train[i].label = 1 - train[i].label;
    }

    Ok(SynthSplits {
        train,
        dev,
        test,
        od_test,
    })
}

/// Trigger-count score used by tests as an independent oracle: positive
/// means class 1.
pub fn trigger_vote(text: &str) -> i64 {
    let mut score = 0i64;
    for tok in text.split_whitespace() {
        if POS_TRIGGERS.contains(&tok) {
            score += 1;
        }
        if NEG_TRIGGERS.contains(&tok) {
            score -= 1;
        }
    }
    score
}

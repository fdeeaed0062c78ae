//! Registered finite-difference gradient checks: every differentiable
//! primitive, the scoring functions, the encoders and both composite losses.

use std::time::Instant;

use kd_autograd::{gradient_check, gradient_check_params, kl_divergence, RngState, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{generate_task, SyntheticTaskSpec};
use crate::encoder::{
    extract_cross_attention, CrossEncoder, EncodedSequence, Encoder, EncoderConfig,
};
use crate::error::{Error, Result};
use crate::interaction::{late_attention_maps, late_score_reps, Scheme, ScoreSet};
use crate::losses::{
    attention_distill, contrastive_nll, distill_kl, dual_reg, LossConfig, LossFlags, LossTerm,
};
use crate::trainer::{batch_loss, random_negatives, Step, TrainConfig, TrainingExample};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

type Check = fn() -> Result<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
    pub seconds: f64,
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = RngState::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).expect("shape matches data")
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = RngState::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| 0.5 + rng.uniform()).collect()).expect("shape matches data")
}

/// Weighted sum with fixed random weights, so every output coordinate matters.
fn project(t: &Tensor, seed: u64) -> Result<Tensor> {
    Ok(t.mul(&rand(t.shape(), seed))?.sum())
}

fn unary(f: fn(&Tensor) -> Result<Tensor>, x: Tensor) -> Result<f64> {
    gradient_check::<_, Error>(|x| project(&f(x)?, 99), &x)
}

fn binary(f: fn(&Tensor, &Tensor) -> Result<Tensor>, a: Tensor, b: Tensor) -> Result<f64> {
    let ea = gradient_check::<_, Error>(|x| project(&f(x, &b)?, 98), &a)?;
    let eb = gradient_check::<_, Error>(|y| project(&f(&a, y)?, 98), &b)?;
    Ok(ea.max(eb))
}

fn softmax_of(t: &Tensor) -> Result<Tensor> {
    Ok(t.softmax(t.ndim() - 1)?)
}

fn micro_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 40,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_len: 24,
        dropout_p: 0.1,
    }
}

/// Two queries with four candidates each (positive plus three negatives).
fn micro_examples() -> Result<Vec<TrainingExample>> {
    let task = generate_task(&SyntheticTaskSpec {
        vocab_size: 40,
        n_topics: 3,
        passages_per_topic: 4,
        n_background_words: 6,
        passage_len: (3, 6),
        query_len: (2, 3),
        n_train: 2,
        n_dev: 0,
        n_test: 0,
        seed: 5,
        ..SyntheticTaskSpec::default()
    })?;
    random_negatives(&task.corpus, &task.train, 3, 5)
}

/// Perturbs a zero-initialised cross-encoder head so trunk gradients are nonzero.
fn live_cross(seed: u64) -> Result<CrossEncoder> {
    let cross = CrossEncoder::new(micro_config(), &mut RngState::new(seed))?;
    let mut rng = RngState::new(seed + 1);
    for (name, t) in cross.named_params() {
        if name.starts_with("head_") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.5 * rng.normal());
        }
    }
    Ok(cross)
}

/// Finite differences see the whole objective, so teacher detachment is
/// switched off: it only truncates the analytic gradient.
fn composite_cfg(step: Step, flags: LossFlags) -> TrainConfig {
    TrainConfig {
        step,
        batch_queries: 2,
        n_negatives: 3,
        loss: LossConfig {
            flags: LossFlags {
                detach_teachers: false,
                ..flags
            },
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn check_id_loss() -> Result<f64> {
    let ex = micro_examples()?;
    let batch: Vec<&TrainingExample> = ex.iter().collect();
    let student = Encoder::new(micro_config(), &mut RngState::new(11))?;
    let cfg = composite_cfg(
        Step::Id,
        LossFlags {
            dual_reg: true,
            ..LossFlags::interaction()
        },
    );
    let rng = RngState::new(12);
    gradient_check_params::<_, Error>(
        || {
            Ok(batch_loss(
                Some(&student),
                None,
                &batch,
                &cfg,
                &LossTerm::INTERACTION,
                &rng,
                0,
            )?
            .0
            .total)
        },
        &student.params(),
    )
}

fn check_cd_loss() -> Result<f64> {
    let ex = micro_examples()?;
    let batch: Vec<&TrainingExample> = ex.iter().collect();
    let student = Encoder::new(micro_config(), &mut RngState::new(13))?;
    let cross = live_cross(14)?;
    let rng = RngState::new(15);
    // attention maps of the cross-encoder are always a constant target, so
    // the cross-encoder side is checked on the remaining terms
    let student_side = composite_cfg(Step::Cascade, LossFlags::cascade());
    let e_student = gradient_check_params::<_, Error>(
        || {
            Ok(batch_loss(
                Some(&student),
                Some(&cross),
                &batch,
                &student_side,
                &LossTerm::ALL,
                &rng,
                0,
            )?
            .0
            .total)
        },
        &student.params(),
    )?;
    let cross_side = composite_cfg(Step::Cascade, LossFlags::cascade().without(LossTerm::Attn));
    let e_cross = gradient_check_params::<_, Error>(
        || {
            Ok(batch_loss(
                Some(&student),
                Some(&cross),
                &batch,
                &cross_side,
                &LossTerm::ALL,
                &rng,
                0,
            )?
            .0
            .total)
        },
        &cross.params(),
    )?;
    Ok(e_student.max(e_cross))
}

fn check_encoder() -> Result<f64> {
    let ex = micro_examples()?;
    let enc = Encoder::new(micro_config(), &mut RngState::new(21))?;
    let seqs = [&ex[0].query, &ex[0].positive, &ex[1].negatives[0]];
    gradient_check_params::<_, Error>(
        || {
            let out = enc.forward(&seqs, &mut RngState::new(22), true)?;
            Ok(project(&out.hidden, 23)?.add(&project(&out.attn, 24)?)?)
        },
        &enc.params(),
    )
}

fn check_cross_encoder() -> Result<f64> {
    let ex = micro_examples()?;
    let cross = live_cross(31)?;
    let pairs = [
        (&ex[0].query, &ex[0].positive),
        (&ex[1].query, &ex[1].negatives[1]),
    ];
    gradient_check_params::<_, Error>(
        || {
            let out = cross.forward_pairs(&pairs, &mut RngState::new(32), true)?;
            Ok(project(&out.scores, 33)?.add(&project(&out.attn, 34)?)?)
        },
        &cross.params(),
    )
}

fn encoded(tokens: Tensor, cls: Tensor) -> EncodedSequence {
    let l = tokens.shape()[0] + 2;
    let d = tokens.shape()[1];
    let pad = Tensor::zeros(&[1, d]);
    EncodedSequence {
        token_reps: Tensor::concat(
            &[cls.reshape(&[1, d]).expect("cls is a vector"), tokens, pad],
            0,
        )
        .expect("matching widths"),
        cls_rep: cls,
        attn_maps: Tensor::full(&[1, l, l], 1.0 / l as f64),
    }
}

fn check_metric_score() -> Result<f64> {
    let p = encoded(rand(&[4, 6], 42), rand(&[6], 43));
    let toks = rand(&[3, 6], 44);
    gradient_check::<_, Error>(
        |c| crate::interaction::metric_score(&encoded(toks.clone(), c.clone()), &p),
        &rand(&[6], 41),
    )
}

fn check_late_score() -> Result<f64> {
    binary(late_score_reps, rand(&[3, 6], 51), rand(&[5, 6], 52))
}

fn check_late_attention_maps() -> Result<f64> {
    binary(
        |q, p| late_attention_maps(q, p, 2),
        rand(&[3, 6], 53),
        rand(&[5, 6], 54),
    )
}

fn check_extract_cross_attention() -> Result<f64> {
    unary(
        |m| extract_cross_attention(m, 2, 3),
        positive(&[2, 8, 8], 55),
    )
}

fn score_set(t: &Tensor, scheme: Scheme) -> Result<ScoreSet> {
    ScoreSet::new(7, (0..t.numel() as u64).collect(), t.clone(), scheme)
}

fn check_contrastive_nll() -> Result<f64> {
    unary(
        |s| contrastive_nll(&score_set(s, Scheme::De)?, 2),
        rand(&[5], 61),
    )
}

fn check_distill_kl() -> Result<f64> {
    binary(
        |t, s| {
            distill_kl(
                &score_set(t, Scheme::Li)?.to_distribution(1.0)?,
                &score_set(s, Scheme::De)?.to_distribution(1.0)?,
                false,
            )
        },
        rand(&[5], 62),
        rand(&[5], 63),
    )
}

fn check_attention_distill() -> Result<f64> {
    let ce = softmax_of(&rand(&[2, 3, 4], 64))?;
    gradient_check::<_, Error>(
        |li| attention_distill(&ce, &softmax_of(li)?),
        &rand(&[2, 3, 4], 65),
    )
}

fn check_dual_reg() -> Result<f64> {
    binary(
        |a, b| {
            dual_reg(
                &score_set(a, Scheme::De)?.to_distribution(1.0)?,
                &score_set(b, Scheme::De)?.to_distribution(1.0)?,
            )
        },
        rand(&[5], 66),
        rand(&[5], 67),
    )
}

/// Every registered check, in a stable order.
pub fn registry() -> Vec<(&'static str, Check)> {
    vec![
        ("add", || {
            binary(|a, b| Ok(a.add(b)?), rand(&[3, 4], 1), rand(&[3, 4], 2))
        }),
        ("sub", || {
            binary(|a, b| Ok(a.sub(b)?), rand(&[3, 4], 3), rand(&[3, 4], 4))
        }),
        ("mul", || {
            binary(|a, b| Ok(a.mul(b)?), rand(&[3, 4], 5), rand(&[3, 4], 6))
        }),
        ("scale", || unary(|a| Ok(a.scale(-1.7)), rand(&[3, 4], 7))),
        ("add_scalar", || {
            unary(|a| Ok(a.add_scalar(0.3)), rand(&[3, 4], 8))
        }),
        ("neg", || unary(|a| Ok(a.neg()), rand(&[3, 4], 9))),
        ("exp", || unary(|a| Ok(a.exp()), rand(&[3, 4], 10))),
        ("log", || unary(|a| Ok(a.log()), positive(&[3, 4], 11))),
        ("relu", || unary(|a| Ok(a.relu()), rand(&[3, 4], 12))),
        ("gelu", || unary(|a| Ok(a.gelu()), rand(&[3, 4], 13))),
        ("add_bias", || {
            binary(
                |a, b| Ok(a.add_bias(b)?),
                rand(&[2, 3, 4], 14),
                rand(&[4], 15),
            )
        }),
        ("mul_bias", || {
            binary(
                |a, b| Ok(a.mul_bias(b)?),
                rand(&[2, 3, 4], 16),
                rand(&[4], 17),
            )
        }),
        ("matmul", || {
            binary(
                |a, b| Ok(a.matmul(b)?),
                rand(&[3, 4], 18),
                rand(&[4, 5], 19),
            )
        }),
        ("matmul_nt", || {
            binary(
                |a, b| Ok(a.matmul_nt(b)?),
                rand(&[3, 4], 20),
                rand(&[5, 4], 21),
            )
        }),
        ("bmm", || {
            binary(
                |a, b| Ok(a.bmm(b)?),
                rand(&[2, 3, 4], 22),
                rand(&[2, 4, 5], 23),
            )
        }),
        ("bmm_nt", || {
            binary(
                |a, b| Ok(a.bmm_nt(b)?),
                rand(&[2, 3, 4], 24),
                rand(&[2, 5, 4], 25),
            )
        }),
        ("transpose", || {
            unary(|a| Ok(a.transpose()?), rand(&[3, 4], 26))
        }),
        ("dot", || {
            binary(|a, b| Ok(a.dot(b)?), rand(&[6], 27), rand(&[6], 28))
        }),
        ("reshape", || {
            unary(|a| Ok(a.reshape(&[4, 3])?), rand(&[3, 4], 29))
        }),
        ("permute", || {
            unary(|a| Ok(a.permute(&[2, 0, 1])?), rand(&[2, 3, 4], 30))
        }),
        ("slice", || {
            unary(|a| Ok(a.slice(1, 1..3)?), rand(&[2, 4, 3], 31))
        }),
        ("concat", || {
            binary(
                |a, b| Ok(Tensor::concat(&[a.clone(), b.clone()], 1)?),
                rand(&[2, 3], 32),
                rand(&[2, 2], 33),
            )
        }),
        ("index_select", || {
            unary(|a| Ok(a.index_select(&[2, 0, 2])?), rand(&[3, 4], 34))
        }),
        ("gather", || {
            unary(
                |a| Ok(a.gather(&[5, 0, 11, 5], &[2, 2])?),
                rand(&[3, 4], 35),
            )
        }),
        ("sum", || unary(|a| Ok(a.sum()), rand(&[3, 4], 36))),
        ("mean", || unary(|a| Ok(a.mean()), rand(&[3, 4], 37))),
        ("sum_axis", || {
            unary(|a| Ok(a.sum_axis(1)?), rand(&[2, 3, 4], 38))
        }),
        ("mean_axis", || {
            unary(|a| Ok(a.mean_axis(0)?), rand(&[2, 3, 4], 39))
        }),
        ("max_axis", || {
            unary(|a| Ok(a.max_axis(2)?), rand(&[2, 3, 4], 40))
        }),
        ("softmax", || {
            unary(|a| Ok(a.softmax(1)?), rand(&[3, 4], 41))
        }),
        ("log_softmax", || {
            unary(|a| Ok(a.log_softmax(0)?), rand(&[3, 4], 42))
        }),
        ("layer_norm", || {
            let (g, b) = (rand(&[4], 44), rand(&[4], 45));
            let ex = unary(
                |a| Ok(a.layer_norm(&rand(&[4], 44), &rand(&[4], 45), 1e-5)?),
                rand(&[3, 4], 43),
            )?;
            let x = rand(&[3, 4], 43);
            let eg = gradient_check::<_, Error>(|g| project(&x.layer_norm(g, &b, 1e-5)?, 46), &g)?;
            let eb = gradient_check::<_, Error>(|b| project(&x.layer_norm(&g, b, 1e-5)?, 47), &b)?;
            Ok(ex.max(eg).max(eb))
        }),
        ("renormalize_last", || {
            unary(|a| Ok(a.renormalize_last()?), positive(&[3, 4], 48))
        }),
        ("l2_normalize_last", || {
            unary(|a| Ok(a.l2_normalize_last()?), rand(&[3, 4], 49))
        }),
        ("dropout", || {
            unary(
                |a| Ok(a.dropout(0.3, &mut RngState::new(50))?),
                rand(&[3, 4], 51),
            )
        }),
        ("kl_divergence", || {
            binary(
                |p, q| Ok(kl_divergence(&softmax_of(p)?, &softmax_of(q)?)?),
                rand(&[5], 52),
                rand(&[5], 53),
            )
        }),
        ("metric_score", check_metric_score),
        ("late_score", check_late_score),
        ("late_attention_maps", check_late_attention_maps),
        ("extract_cross_attention", check_extract_cross_attention),
        ("contrastive_nll", check_contrastive_nll),
        ("distill_kl", check_distill_kl),
        ("attention_distill", check_attention_distill),
        ("dual_reg", check_dual_reg),
        ("encoder", check_encoder),
        ("cross_encoder", check_cross_encoder),
        ("interaction_distill_loss", check_id_loss),
        ("cascade_loss", check_cd_loss),
    ]
}

/// Runs every registered check against `tolerance`.
pub fn run_all(tolerance: f64) -> Result<Vec<GradCheckResult>> {
    registry()
        .into_iter()
        .map(|(name, check)| {
            let start = Instant::now();
            let err = check()?;
            Ok(GradCheckResult {
                name: name.to_string(),
                max_rel_error: err,
                passed: err < tolerance,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_checks_pass() {
        for (name, check) in registry() {
            if matches!(
                name,
                "encoder" | "cross_encoder" | "interaction_distill_loss" | "cascade_loss"
            ) {
                continue;
            }
            let err = check().unwrap();
            assert!(err < DEFAULT_TOLERANCE, "{name}: {err}");
        }
    }
}

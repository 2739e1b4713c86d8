//! Reverse-mode gradients of the click loss for one example group: a shared
//! user prefix scored against several target videos.

use crate::fusion::{user_query_scale, FusionTrace, ModalityFeatures};
use crate::interest::{
    combine_backward, combine_forward, mean_pool, ProfileIndex, SequenceEncoding,
};
use crate::model::{Model, ModelParams};
use crate::numerics::{axpy, dot, sigmoid};

use super::bce;

const P_MIN: f64 = 1e-12;

/// d loss / d logit for the clamped cross-entropy. Zero where the clamp is
/// active, since the loss is flat there.
fn bce_logit_grad(p: f64, y: f64) -> f64 {
    if p < P_MIN || p > 1.0 - P_MIN {
        0.0
    } else {
        p - y
    }
}

/// Summed loss over `targets`; gradients of `scale * loss` are added to
/// `grads`. Features must already be masked for the model's variant.
pub(crate) fn accumulate_group(
    model: &Model,
    history: &[&ModalityFeatures],
    profile: ProfileIndex,
    targets: &[(&ModalityFeatures, f64)],
    scale: f64,
    grads: &mut ModelParams,
) -> f64 {
    let p = model.params();
    let cfg = model.config();
    let variant = cfg.variant;
    let d = cfg.d;
    let u = p.fusion.query.as_slice();
    let hist = &history[history.len().saturating_sub(cfg.encoder.max_len)..];

    let traces: Vec<FusionTrace> = hist
        .iter()
        .map(|f| FusionTrace::forward(f, &p.fusion, u))
        .collect();
    let fused: Vec<&[f64]> = traces.iter().map(|t| t.f.as_slice()).collect();
    let (h, encoding) = if variant.uses_sequence_encoder() {
        let enc = SequenceEncoding::forward(
            &fused,
            &p.block,
            &p.interest,
            model.positions(),
            cfg.encoder.pooling,
        );
        (enc.h.clone(), Some(enc))
    } else {
        (mean_pool(&fused, &p.interest), None)
    };
    let s = if variant.uses_profile() {
        p.interest.profile_vector(profile)
    } else {
        vec![0.0; d]
    };
    let (z, pre, concat) = combine_forward(&h, &s, &p.interest);
    let q = model.ranking_query(&z);
    let q_scale = user_query_scale(d);

    let mut loss = 0.0;
    let mut dz = vec![0.0; d];
    let mut du = vec![0.0; d];
    for &(feats, y) in targets {
        let tr = FusionTrace::forward(feats, &p.fusion, &q);
        let prob = sigmoid(dot(&z, &tr.f));
        loss += bce(prob, y);
        let g = scale * bce_logit_grad(prob, y);
        if g == 0.0 {
            continue;
        }
        axpy(g, &tr.f, &mut dz);
        let df: Vec<f64> = z.iter().map(|v| g * v).collect();
        let dq = tr.backward(feats, &q, &df, &mut grads.fusion);
        axpy(q_scale, &dq, &mut dz);
        axpy(1.0, &dq, &mut du);
    }

    let (dh, ds) = combine_backward(&dz, &pre, &concat, &p.interest, &mut grads.interest);
    if variant.uses_profile() {
        p.interest
            .profile_backward(profile, &ds, &mut grads.interest);
    }

    let dfused: Vec<f64> = match &encoding {
        Some(enc) => enc.backward(&dh, &p.block, &mut grads.block, &mut grads.interest),
        None if hist.is_empty() => {
            axpy(1.0, &dh, grads.interest.empty_history.as_mut_slice());
            Vec::new()
        }
        None => {
            let inv = 1.0 / hist.len() as f64;
            let mut out = Vec::with_capacity(hist.len() * d);
            for _ in 0..hist.len() {
                out.extend(dh.iter().map(|v| v * inv));
            }
            out
        }
    };
    for (i, (tr, feats)) in traces.iter().zip(hist).enumerate() {
        let df = &dfused[i * d..(i + 1) * d];
        let dq = tr.backward(feats, u, df, &mut grads.fusion);
        axpy(1.0, &dq, &mut du);
    }
    axpy(1.0, &du, grads.fusion.query.as_mut_slice());
    loss
}

/// Summed loss over `targets` and its gradient with respect to every model
/// parameter. Features are masked for the model's variant here.
pub fn loss_and_gradient(
    model: &Model,
    history: &[&ModalityFeatures],
    profile: ProfileIndex,
    targets: &[(&ModalityFeatures, f64)],
) -> (f64, ModelParams) {
    let hist: Vec<ModalityFeatures> = history.iter().map(|f| model.mask(f).into_owned()).collect();
    let tgts: Vec<ModalityFeatures> = targets
        .iter()
        .map(|(f, _)| model.mask(f).into_owned())
        .collect();
    let hist_refs: Vec<&ModalityFeatures> = hist.iter().collect();
    let tgt_refs: Vec<(&ModalityFeatures, f64)> =
        tgts.iter().zip(targets.iter().map(|t| t.1)).collect();
    let mut grads = ModelParams::zeros(model.config());
    let loss = accumulate_group(model, &hist_refs, profile, &tgt_refs, 1.0, &mut grads);
    (loss, grads)
}

/// Forward-only summed loss through the public inference path.
pub fn group_loss(
    model: &Model,
    history: &[&ModalityFeatures],
    profile: ProfileIndex,
    targets: &[(&ModalityFeatures, f64)],
) -> f64 {
    let state = model.user_state(history, profile, false);
    targets
        .iter()
        .map(|&(feats, y)| bce(sigmoid(model.score(&state.representation, feats).score), y))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interest::Pooling;
    use crate::model::{AblationVariant, ModelConfig};
    use crate::numerics::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feats(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> ModalityFeatures {
        let mut v = |n: usize| {
            (0..n)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        let (a, b, c) = (v(dims[0]), v(dims[1]), v(dims[2]));
        let keep_audio = rng.random::<f64>() < 0.7;
        ModalityFeatures::new(Some(a), Some(b), keep_audio.then_some(c), dims).unwrap()
    }

    /// Full composed loss: fusion, encoder, profile, combination and BCE.
    pub(crate) fn check_gradients(seed: u64, variant: AblationVariant, pooling: Pooling) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [6, 5, 4];
        let mut cfg = ModelConfig {
            d: 8,
            dims,
            heads: 2,
            ff_width: 16,
            variant,
            ..ModelConfig::default()
        };
        cfg.encoder.pooling = pooling;
        cfg.encoder.max_len = 6;
        let mut model = Model::new(cfg.clone(), seed).unwrap();
        // move biases and gains off their initial values
        for (_, t) in model.params_mut().tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let n_hist = rng.random_range(0..9);
        let hist: Vec<ModalityFeatures> = (0..n_hist).map(|_| feats(&mut rng, dims)).collect();
        let tgts: Vec<ModalityFeatures> = (0..5).map(|_| feats(&mut rng, dims)).collect();
        let labels: Vec<f64> = (0..5).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        let hist_m: Vec<ModalityFeatures> =
            hist.iter().map(|f| model.mask(f).into_owned()).collect();
        let tgts_m: Vec<ModalityFeatures> =
            tgts.iter().map(|f| model.mask(f).into_owned()).collect();
        let hist_refs: Vec<&ModalityFeatures> = hist_m.iter().collect();
        let targets: Vec<(&ModalityFeatures, f64)> =
            tgts_m.iter().zip(labels.iter().copied()).collect();
        let profile = ProfileIndex([1, 3, 2]);

        let mut grads = crate::model::ModelParams::zeros(&cfg);
        accumulate_group(&model, &hist_refs, profile, &targets, 1.0, &mut grads);
        let theta = model.params().flatten();
        let analytic = grads.flatten();
        let raw_hist: Vec<&ModalityFeatures> = hist.iter().collect();
        let raw_targets: Vec<(&ModalityFeatures, f64)> =
            tgts.iter().zip(labels.iter().copied()).collect();
        let loss = |flat: &[f64]| {
            let mut m = model.clone();
            m.params_mut().assign_flat(flat).unwrap();
            group_loss(&m, &raw_hist, profile, &raw_targets)
        };
        let report = gradient_check(loss, &theta, &analytic, 1e-5).unwrap();
        report.max_relative_error
    }

    #[test]
    fn composed_loss_gradients_match_finite_differences() {
        for seed in 0..4 {
            let err = check_gradients(seed, AblationVariant::Full, Pooling::Mean);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn variant_gradients_match_finite_differences() {
        for (i, v) in AblationVariant::ALL.into_iter().enumerate() {
            let err = check_gradients(100 + i as u64, v, Pooling::Mean);
            assert!(err < 1e-4, "{v}: {err}");
        }
        let err = check_gradients(200, AblationVariant::Full, Pooling::Last);
        assert!(err < 1e-4, "last pooling: {err}");
    }

    #[test]
    fn clamped_region_has_zero_gradient() {
        assert_eq!(bce_logit_grad(1e-13, 1.0), 0.0);
        assert_eq!(bce_logit_grad(0.3, 1.0), 0.3 - 1.0);
    }

    #[test]
    fn unused_components_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = [4, 4, 4];
        for variant in [
            AblationVariant::NoSeq,
            AblationVariant::NoStatic,
            AblationVariant::TextOnly,
        ] {
            let cfg = ModelConfig {
                d: 8,
                dims,
                ff_width: 16,
                variant,
                ..ModelConfig::default()
            };
            let model = Model::new(cfg.clone(), 1).unwrap();
            let h: Vec<ModalityFeatures> = (0..4)
                .map(|_| model.mask(&feats(&mut rng, dims)).into_owned())
                .collect();
            let t = model.mask(&feats(&mut rng, dims)).into_owned();
            let hr: Vec<&ModalityFeatures> = h.iter().collect();
            let mut g = ModelParams::zeros(&cfg);
            accumulate_group(
                &model,
                &hr,
                ProfileIndex([1, 1, 1]),
                &[(&t, 1.0)],
                1.0,
                &mut g,
            );
            let zero = |s: &[f64]| s.iter().all(|&v| v == 0.0);
            match variant {
                AblationVariant::NoSeq => assert!(g.block.tensors().iter().all(|(_, t)| zero(t))),
                AblationVariant::NoStatic => {
                    assert!(zero(g.interest.gender_table.as_slice()));
                    assert!(zero(g.interest.region_table.as_slice()));
                }
                AblationVariant::TextOnly => {
                    assert!(zero(g.fusion.w_visual.as_slice()));
                    assert!(zero(g.fusion.w_audio.as_slice()));
                    assert!(!zero(g.fusion.w_text.as_slice()));
                }
                _ => unreachable!(),
            }
        }
    }
}

use super::*;
use crate::encoders::EncoderConfig;
use crate::numerics::{grad_check, RngStream, Tape};
use crate::params::{digest, digest_hex, param_count};
use crate::rope::{assign_positions, Modality};
use crate::scenegen::{
    make_caption, render, sample_scene, CaptionRecord, SceneConstraints, Vocab,
};

/// Tiny configuration for fast unit tests: 16px images, 2x2 patch grid.
fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 16,
            patch_size: 8,
            d_v: 16,
            n_layers: 1,
            n_heads: 2,
            rope_base: 10000.0,
            mlp_hidden: 32,
            embed_dim: 16,
        },
        d_lm: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq: 64,
        rope_base: 10000.0,
    }
}

fn tiny_model<T: crate::numerics::Scalar>(seed: u64, pe: PeScheme) -> FusionModel<T> {
    let cfg = tiny_model_config();
    let mut rng = RngStream::new(seed, 0);
    let trunk = crate::encoders::EncoderTrunk::init(cfg.encoder, &mut rng).unwrap();
    let vocab = Vocab::for_grid(8, 8);
    FusionModel::init(cfg, pe, vocab.len(), trunk, &mut rng).unwrap()
}

fn tiny_scene() -> crate::scenegen::SceneSpec {
    let mut rng = RngStream::new(9, 9);
    sample_scene(&mut rng, (8, 8), &SceneConstraints::default()).unwrap()
}

#[test]
fn project_with_identity_is_passthrough() {
    let mut rng = RngStream::new(70, 0);
    let features: Tensor<f64> = Tensor::randn(vec![4, 6], 1.0, &mut rng);
    let mut eye = vec![0.0; 36];
    for i in 0..6 {
        eye[i * 6 + i] = 1.0;
    }
    let w = Tensor::from_vec(vec![6, 6], eye).unwrap();
    let h_v = project(&features, &w).unwrap();
    assert_eq!(h_v.data(), features.data());
}

#[test]
fn project_output_shape_matches_lm_width() {
    let model: FusionModel<f32> = tiny_model(1, PeScheme::Rope1D);
    let image = render::<f32>(&tiny_scene(), 16).unwrap();
    let h_v = image_tokens(&model, &image).unwrap();
    assert_eq!(h_v.shape(), &[4, 16]);
}

#[test]
fn project_gradients_match_finite_differences() {
    let mut rng = RngStream::new(71, 0);
    let features: Tensor<f64> = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    let c: Tensor<f64> = Tensor::randn(vec![3, 5], 1.0, &mut rng);
    let f = move |_: &Tape<f64>, w: &Tensor<f64>| {
        let h = project(&features, &w.reshape(vec![4, 5])?)
            .map_err(|_| crate::numerics::NumericsError::NonFinite { op: "project" })?;
        Ok(crate::numerics::ops::sum_all(&crate::numerics::ops::mul(
            &h, &c,
        )?))
    };
    let w0 = Tensor::randn(vec![20], 1.0, &mut rng);
    let report = grad_check(&f, &w0, 1e-5, 1e-6).unwrap();
    assert!(report.pass, "{report}");
}

#[test]
fn build_sequence_layout_and_mask_shape() {
    let model: FusionModel<f64> = tiny_model(2, PeScheme::Rope1D);
    let h_v: Tensor<f64> = Tensor::zeros(vec![4, 16]);
    let question = [5u32, 6, 7];
    let seq = build_sequence(&h_v, &model.lm, &question, None, (2, 2)).unwrap();
    assert_eq!(seq.len(), 7, "P + |q| with no answer");
    assert_eq!(seq.img_len, 4);
    assert_eq!(seq.question_len, 3);
    assert_eq!(seq.answer_len, 0);
    assert_eq!(&seq.token_ids[..4], &[IMG; 4]);
    assert_eq!(&seq.token_ids[4..], &[5, 6, 7]);

    let mask: Tensor<f64> = causal_mask(seq.len());
    for i in 0..7 {
        for j in 0..7 {
            let v = mask.data()[i * 7 + j];
            if j <= i {
                assert_eq!(v, 0.0);
            } else {
                assert_eq!(v, -1e9);
            }
        }
    }
}

#[test]
fn rope1d_positions_are_the_assigned_sequence() {
    let model: FusionModel<f64> = tiny_model(3, PeScheme::Rope1D);
    let h_v: Tensor<f64> = Tensor::zeros(vec![4, 16]);
    let seq = build_sequence(&h_v, &model.lm, &[5, 6, 7], None, (2, 2)).unwrap();
    // Image tokens carry positions 3..6 (offset by text length), the
    // question carries 0..2; together the values cover 0..=6.
    let img_xs: Vec<usize> = seq.positions[..4].iter().map(|p| p.x).collect();
    assert_eq!(img_xs, vec![3, 4, 5, 6]);
    let q_xs: Vec<usize> = seq.positions[4..].iter().map(|p| p.x).collect();
    assert_eq!(q_xs, vec![0, 1, 2]);
    assert!(seq.positions.iter().all(|p| p.x == p.y));
}

#[test]
fn rope2d_patch_positions_match_the_rope_module_rule() {
    let model: FusionModel<f64> = tiny_model(4, PeScheme::Rope2D);
    let h_v: Tensor<f64> = Tensor::zeros(vec![4, 16]);
    let question = [5u32, 6, 7];
    let seq = build_sequence(&h_v, &model.lm, &question, Some(&[8]), (2, 2)).unwrap();

    let assigned = assign_positions(question.len(), (2, 2), PeScheme::Rope2D);
    for (i, expected) in assigned[3..].iter().enumerate() {
        assert_eq!(seq.positions[i], *expected, "patch {i}");
        assert_eq!(seq.positions[i].modality, Modality::Image);
    }
    for (i, expected) in assigned[..3].iter().enumerate() {
        assert_eq!(seq.positions[4 + i], *expected, "question token {i}");
    }
    // Answer and EOS continue the diagonal after the image box:
    // text_len 3 + max(2,2) = 5, so positions (5,5) and (6,6).
    assert_eq!(seq.positions[7], PosIndex::text(5));
    assert_eq!(seq.positions[8], PosIndex::text(6));
    assert_eq!(seq.len(), 9, "P + |q| + |answer with EOS|");
    assert_eq!(seq.answer_len, 2);
}

#[test]
fn build_sequence_rejects_empty_question_and_overlong() {
    let model: FusionModel<f64> = tiny_model(5, PeScheme::Rope1D);
    let h_v: Tensor<f64> = Tensor::zeros(vec![4, 16]);
    assert!(matches!(
        build_sequence(&h_v, &model.lm, &[], None, (2, 2)),
        Err(FusionError::Config(_))
    ));
    let long_q: Vec<u32> = vec![5; 80];
    assert!(matches!(
        build_sequence(&h_v, &model.lm, &long_q, None, (2, 2)),
        Err(FusionError::Overlong { .. })
    ));
}

#[test]
fn initial_loss_is_near_log_vocab() {
    let model: FusionModel<f32> = tiny_model(6, PeScheme::Rope2D);
    let vocab = Vocab::for_grid(8, 8);
    let image = render::<f32>(&tiny_scene(), 16).unwrap();
    let h_v = image_tokens(&model, &image).unwrap();
    let question = vocab.encode("where is the red square ?").unwrap();
    let answer = vocab.encode("r3 c4").unwrap();
    let seq = build_sequence(&h_v, &model.lm, &question, Some(&answer), (2, 2)).unwrap();
    let loss = forward_loss(&model, &seq).unwrap().item().unwrap() as f64;
    let expected = (vocab.len() as f64).ln();
    assert!(
        (loss - expected).abs() / expected < 0.10,
        "init loss {loss} vs ln|V| {expected}"
    );
}

#[test]
fn loss_requires_answer_tokens() {
    let model: FusionModel<f64> = tiny_model(7, PeScheme::Rope1D);
    let h_v: Tensor<f64> = Tensor::zeros(vec![4, 16]);
    let seq = build_sequence(&h_v, &model.lm, &[5, 6], None, (2, 2)).unwrap();
    assert!(matches!(
        forward_loss(&model, &seq),
        Err(FusionError::Config(_))
    ));
}

#[test]
fn loss_is_masked_to_answer_positions() {
    // Gradient w.r.t. the logits of image/question predictor positions
    // must be exactly zero: only answer predictors carry loss.
    let model: FusionModel<f64> = tiny_model(8, PeScheme::Rope1D);
    let vocab = Vocab::for_grid(8, 8);
    let image = render::<f64>(&tiny_scene(), 16).unwrap();
    let h_v = image_tokens(&model, &image).unwrap();
    let question = vocab.encode("how many circle ?").unwrap();
    let answer = vocab.encode("2").unwrap();
    let seq = build_sequence(&h_v, &model.lm, &question, Some(&answer), (2, 2)).unwrap();

    let targets = answer_targets(&seq).unwrap();
    let answer_start = seq.img_len + seq.question_len;
    for (i, t) in targets.iter().enumerate() {
        if (answer_start - 1..seq.len() - 1).contains(&i) {
            assert!(t.is_some(), "predictor {i} must be scored");
        } else {
            assert!(t.is_none(), "predictor {i} must be masked");
        }
    }

    let tape = Tape::new();
    let hidden = forward_hidden(&model.lm, &seq, None).unwrap();
    let watched = tape.watch(&hidden);
    let lg = logits(&model.lm, &watched).unwrap();
    let loss = crate::numerics::ops::cross_entropy_masked(&lg, &targets).unwrap();
    let grads = tape.backward(&loss).unwrap();
    let g = grads.get(&watched).unwrap();
    let d = model.lm.cfg.d_lm;
    for i in 0..answer_start - 1 {
        assert!(
            g[i * d..(i + 1) * d].iter().all(|&v| v == 0.0),
            "masked position {i} leaked gradient"
        );
    }
    assert!(g[(answer_start - 1) * d..answer_start * d]
        .iter()
        .any(|&v| v != 0.0));
}

#[test]
fn full_pipeline_gradients_match_finite_differences() {
    // End-to-end check at f64: loss as a function of every parameter,
    // packed into one flat vector and scattered back into the model.
    let vocab = Vocab::for_grid(8, 8);
    let scene = tiny_scene();
    let image = render::<f64>(&scene, 16).unwrap();
    let question = vocab.encode("where is the red square ?").unwrap();
    let answer = vocab.encode("r3 c4").unwrap();

    let template: FusionModel<f64> = tiny_model(10, PeScheme::Rope2D);
    let n_params = param_count(&template, &|_| true);
    let mut packed = Vec::with_capacity(n_params);
    template.visit(&mut |_, t| packed.extend_from_slice(t.data()));
    let x0 = Tensor::from_vec(vec![n_params], packed).unwrap();

    let f = {
        let template = template.clone();
        let image = image.clone();
        move |_: &Tape<f64>, x: &Tensor<f64>| {
            let mut model = template.clone();
            let flat = x.reshape(vec![x.len(), 1])?;
            let mut offset = 0usize;
            let mut failed = None;
            model.visit_mut(&mut |_, t| {
                if failed.is_some() {
                    return;
                }
                let n = t.len();
                match crate::numerics::ops::slice_rows(&flat, offset, offset + n)
                    .and_then(|s| s.reshape(t.shape().to_vec()))
                {
                    Ok(part) => *t = part,
                    Err(e) => failed = Some(e),
                }
                offset += n;
            });
            if let Some(e) = failed {
                return Err(e);
            }
            let h_v = image_tokens(&model, &image)
                .map_err(|_| crate::numerics::NumericsError::NonFinite { op: "pipeline" })?;
            let seq = build_sequence(&h_v, &model.lm, &question, Some(&answer), (2, 2))
                .map_err(|_| crate::numerics::NumericsError::NonFinite { op: "pipeline" })?;
            forward_loss(&model, &seq)
                .map_err(|_| crate::numerics::NumericsError::NonFinite { op: "pipeline" })
        }
    };
    let report = grad_check(&f, &x0, 1e-5, 1e-4).unwrap();
    assert!(report.pass, "{report}");
}

#[test]
fn generation_terminates_untrained() {
    let model: FusionModel<f32> = tiny_model(11, PeScheme::Rope1D);
    let vocab = Vocab::for_grid(8, 8);
    let image = render::<f32>(&tiny_scene(), 16).unwrap();
    let question = vocab.encode("how many square ?").unwrap();
    let out = generate_answer(&model, &image, &question).unwrap();
    assert!(out.len() <= MAX_ANSWER_TOKENS);
}

#[test]
fn generation_is_deterministic() {
    let model: FusionModel<f32> = tiny_model(12, PeScheme::Rope2D);
    let vocab = Vocab::for_grid(8, 8);
    let image = render::<f32>(&tiny_scene(), 16).unwrap();
    let question = vocab.encode("where is the blue circle ?").unwrap();
    let a = generate_answer(&model, &image, &question).unwrap();
    let b = generate_answer(&model, &image, &question).unwrap();
    assert_eq!(a, b);
}

#[test]
fn suffix_perturbation_leaves_prefix_logits_unchanged() {
    let model: FusionModel<f64> = tiny_model(13, PeScheme::Rope1D);
    let vocab = Vocab::for_grid(8, 8);
    let image = render::<f64>(&tiny_scene(), 16).unwrap();
    let h_v = image_tokens(&model, &image).unwrap();
    let question = vocab.encode("how many circle ?").unwrap();
    let a1 = vocab.encode("2").unwrap();
    let a2 = vocab.encode("7").unwrap();
    let s1 = build_sequence(&h_v, &model.lm, &question, Some(&a1), (2, 2)).unwrap();
    let s2 = build_sequence(&h_v, &model.lm, &question, Some(&a2), (2, 2)).unwrap();
    let l1 = logits(&model.lm, &forward_hidden(&model.lm, &s1, None).unwrap()).unwrap();
    let l2 = logits(&model.lm, &forward_hidden(&model.lm, &s2, None).unwrap()).unwrap();
    let v = model.lm.vocab_size();
    let prefix = s1.img_len + s1.question_len; // answer token differs after this
    for i in 0..prefix * v {
        assert_eq!(l1.data()[i].to_bits(), l2.data()[i].to_bits());
    }
}

fn tiny_captions(n: usize) -> Vec<CaptionRecord> {
    let mut rng = RngStream::new(40, 0);
    let constraints = SceneConstraints {
        max_objects: 3,
        ..Default::default()
    };
    (0..n)
        .map(|_| {
            let scene = sample_scene(&mut rng, (8, 8), &constraints).unwrap();
            let caption = make_caption(&scene);
            CaptionRecord { scene, caption }
        })
        .collect()
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        warmup_lm_steps: 5,
        stage1_steps: 8,
        stage2_steps: 10,
        batch_size: 2,
        lr_ramp_steps: 2,
        ..Default::default()
    }
}

#[test]
fn stage1_updates_only_the_projection() {
    let mut model: FusionModel<f32> = tiny_model(14, PeScheme::Rope2D);
    let vocab = Vocab::for_grid(8, 8);
    let captions = tiny_captions(12);
    let cfg = tiny_train_config();
    let proj_before = model.proj.data().to_vec();
    let report = train_stage1(&mut model, &captions, &vocab, &cfg, &mut RngStream::new(1, 1))
        .expect("stage 1 must hold the freezing contract");
    assert!(report.freezing_held());
    assert_eq!(report.frozen_digest_before, report.frozen_digest_after);
    assert_ne!(
        proj_before,
        model.proj.data(),
        "projection must train in stage 1"
    );
    assert_eq!(report.logs.len(), cfg.stage1_steps);
}

#[test]
fn stage2_updates_every_parameter_group() {
    let mut model: FusionModel<f32> = tiny_model(15, PeScheme::Rope1D);
    let vocab = Vocab::for_grid(8, 8);
    let mut rng = RngStream::new(41, 0);
    let constraints = SceneConstraints::default();
    let mut records = Vec::new();
    while records.len() < 12 {
        let scene = sample_scene(&mut rng, (8, 8), &constraints).unwrap();
        if let Some(q) = crate::scenegen::make_count_q(&scene, &mut rng) {
            records.push(q);
        }
    }
    let data = tokenize_qa(&records, &vocab).unwrap();
    let cfg = tiny_train_config();

    let enc_before = digest_hex(&digest(&model, &|n: &str| n.starts_with("enc.")));
    let proj_before = digest_hex(&digest(&model, &|n: &str| n == "proj.w"));
    let lm_before = digest_hex(&digest(&model, &|n: &str| n.starts_with("lm.")));
    train_stage2(&mut model, &data, &cfg, &mut RngStream::new(2, 2), None).unwrap();
    assert_ne!(enc_before, digest_hex(&digest(&model, &|n: &str| n.starts_with("enc."))));
    assert_ne!(proj_before, digest_hex(&digest(&model, &|n: &str| n == "proj.w")));
    assert_ne!(lm_before, digest_hex(&digest(&model, &|n: &str| n.starts_with("lm."))));
}

#[test]
fn training_is_deterministic_given_the_config() {
    let vocab = Vocab::for_grid(8, 8);
    let captions = tiny_captions(10);
    let run = || {
        let mut model: FusionModel<f32> = tiny_model(16, PeScheme::Rope2D);
        let cfg = tiny_train_config();
        lm_warmup(&mut model, &captions, &vocab, &cfg, &mut RngStream::new(3, 3)).unwrap();
        train_stage1(&mut model, &captions, &vocab, &cfg, &mut RngStream::new(3, 4)).unwrap();
        digest_hex(&digest(&model, &|_: &str| true))
    };
    assert_eq!(run(), run(), "two identical runs must agree bit-exactly");
}

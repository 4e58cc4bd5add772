mod common;

use anchor_edit::attention::AttentionMode;
use anchor_edit::edit::{derive_mask_set, make_manipulated_image};
use anchor_edit::mask::ResamplePolicy;
use anchor_edit::sampler::{run_edit_observed, StepEvent};
use anchor_edit::schedule::fdp;
use anchor_edit::{
    run_edit, Denoiser, EditRequest, EditTransform, LatentGrid, NoiseSchedule, SamplerConfig,
    ScheduleConfig,
};
use common::{scene, toy, toy_mixed, Recorder};

fn guidance_off(steps: usize) -> SamplerConfig {
    let mut cfg = SamplerConfig::with_steps(steps);
    cfg.guidance.enabled = false;
    cfg
}

#[test]
fn anchors_stay_fixed_and_noise_is_shared() {
    let (img, object) = scene();
    let backend = toy_mixed(0.3);
    let req = EditRequest::new(img, object, EditTransform::translate(16, 8));
    let mut first: Option<(LatentGrid, LatentGrid)> = None;
    let mut steps_seen = 0;
    let sched = NoiseSchedule::build(&ScheduleConfig::with_steps(8)).unwrap();
    run_edit_observed(
        &req,
        &SamplerConfig::with_steps(8),
        &backend,
        &mut |ev: &StepEvent<'_>| {
            steps_seen += 1;
            let (src, man) = first.get_or_insert_with(|| (ev.z0_src.clone(), ev.z0_man.clone()));
            assert!(src.bitwise_eq(ev.z0_src));
            assert!(man.bitwise_eq(ev.z0_man));
            // the same ε reproduces both noisy anchors
            let man_t = fdp(ev.z0_man, ev.eps, ev.t, &sched).unwrap();
            let src_t = fdp(ev.z0_src, ev.eps, ev.t, &sched).unwrap();
            assert!(man_t.bitwise_eq(ev.z_t_man));
            assert!(src_t.bitwise_eq(ev.z_t_src.unwrap()));
        },
    )
    .unwrap();
    assert_eq!(steps_seen, 8);
}

#[test]
fn background_outside_objects_matches_anchor() {
    let (img, object) = scene();
    let backend = toy();
    let transform = EditTransform::translate(16, 8);
    let req = EditRequest::new(img, object.clone(), transform.clone());
    let masks = derive_mask_set(&object, &transform, None).unwrap();
    let report = run_edit(&req, &guidance_off(16), &backend).unwrap();
    let z = &report.output_latent;
    let objects = masks
        .object_union()
        .resample(z.height(), z.width(), ResamplePolicy::AnyOverlap);
    let man_img = make_manipulated_image(&req.source, &object, &transform).unwrap();
    let z_man = backend.encode(&man_img).unwrap();
    for c in 0..z.channels() {
        for y in 0..z.height() {
            for x in 0..z.width() {
                if !objects.get(y, x) {
                    assert_eq!(
                        z.get(c, y, x).to_bits(),
                        z_man.get(c, y, x).to_bits(),
                        "({c},{y},{x})"
                    );
                }
            }
        }
    }
}

#[test]
fn leak_mask_is_attached_to_the_target_branch_only() {
    let (img, object) = scene();
    let backend = Recorder::new(toy());
    let req = EditRequest::new(img, object, EditTransform::translate(16, 0));
    let report = run_edit(&req, &guidance_off(8), &backend).unwrap();
    let calls = backend.calls();
    assert_eq!(calls.len(), report.nfe);
    for step in calls.chunks(3) {
        assert_eq!(step[0].mode, AttentionMode::Plain);
        assert!(step[0].leak.is_none());
        assert_eq!(step[1].mode, AttentionMode::Capture);
        assert!(step[1].leak.is_none());
        assert_eq!(step[2].mode, AttentionMode::Inject);
        assert!(step[2].injected);
        assert!(step[2].leak.as_ref().is_some_and(|m| !m.is_empty()));
    }
    assert_eq!(calls.first().unwrap().t, 8);
    assert_eq!(calls.last().unwrap().t, 1);
}

#[test]
fn ablations_change_forward_counts() {
    let (img, object) = scene();
    let backend = toy();
    let req = EditRequest::new(img, object, EditTransform::translate(16, 0));
    let mut cfg = SamplerConfig::with_steps(16);
    cfg.kv_injection = false;
    assert_eq!(run_edit(&req, &cfg, &backend).unwrap().nfe, 48);
    assert_eq!(run_edit(&req, &guidance_off(16), &backend).unwrap().nfe, 48);
    assert_eq!(
        run_edit(&req, &SamplerConfig::with_steps(16), &backend)
            .unwrap()
            .nfe,
        64
    );
}

#[test]
fn zero_weights_match_disabled_guidance_bitwise() {
    let (img, object) = scene();
    let backend = toy_mixed(0.5);
    let req = EditRequest::new(img, object, EditTransform::translate(8, 8));
    let mut zero = SamplerConfig::with_steps(8);
    zero.guidance.k_edit = 0.0;
    zero.guidance.k_content = 0.0;
    zero.guidance.k_contrast = 0.0;
    zero.guidance.k_inpaint = 0.0;
    let a = run_edit(&req, &zero, &backend).unwrap();
    let b = run_edit(&req, &guidance_off(8), &backend).unwrap();
    assert!(a.output_latent.bitwise_eq(&b.output_latent));
    assert_eq!(a.output, b.output);
}

#[test]
fn guidance_changes_the_result_when_active() {
    let (img, object) = scene();
    let backend = toy_mixed(0.5);
    let req = EditRequest::new(img, object, EditTransform::translate(8, 8));
    let a = run_edit(&req, &SamplerConfig::with_steps(8), &backend).unwrap();
    let b = run_edit(&req, &guidance_off(8), &backend).unwrap();
    assert!(!a.output_latent.bitwise_eq(&b.output_latent));
    assert!(a.steps.iter().any(|s| !s.energies.is_empty()));
}

#[test]
fn previews_arrive_every_k_steps() {
    let (img, object) = scene();
    let backend = toy();
    let req = EditRequest::new(img, object, EditTransform::translate(8, 0));
    let mut previews = Vec::new();
    run_edit_observed(&req, &guidance_off(16), &backend, &mut |ev: &StepEvent<
        '_,
    >| {
        if ev.preview.is_some() {
            previews.push(ev.done);
        }
    })
    .unwrap();
    assert_eq!(previews, vec![4, 8, 12]);
}

#[test]
fn paste_and_resize_edits_run() {
    let (img, object) = scene();
    let backend = toy();
    let resize = EditRequest::new(
        img.clone(),
        object.clone(),
        EditTransform::resize(8, 8, 1.5),
    );
    let r = run_edit(&resize, &SamplerConfig::with_steps(8), &backend).unwrap();
    assert_eq!(r.nfe, 28);
    let reference = common::blocky_image(64, 64, 5);
    let paste = EditRequest::new(img, object, EditTransform::paste(reference, 16, 16, 1.0));
    let p = run_edit(&paste, &SamplerConfig::with_steps(8), &backend).unwrap();
    assert!(p.masks.unwrap().m_old.is_empty());
}

#[test]
fn debug_dump_writes_each_step() {
    let (img, object) = scene();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = guidance_off(8);
    cfg.debug_dump = Some(dir.path().to_path_buf());
    let req = EditRequest::new(img, object, EditTransform::translate(8, 0));
    let report = run_edit(&req, &cfg, &toy()).unwrap();
    let last = anchor_edit::dump::read_latent(dir.path(), "step_001_z0_out").unwrap();
    for (a, b) in last.as_slice().iter().zip(report.output_latent.as_slice()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    assert!(dir.path().join("step_008_z_t_tgt.bin").exists());
}

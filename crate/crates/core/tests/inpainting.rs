//! Priors against analytic object-free geometry, the directory provider, and
//! the degenerate configuration that reduces to a plain reconstruction fit.

use mvinpaint::inpaint::{
    directory_provider, harmonic_provider, inpaint_depths, inpaint_images, inpaint_scene, InpaintInputs,
    InpaintOptions, InpaintProvider,
};
use mvinpaint::optim::LossWeights;
use mvinpaint::renderer::{render_view, SampleMode};
use mvinpaint::segmentation::{dilate, fit_geometry, grid_schedule};
use mvinpaint::synthetic::{SyntheticConfig, SyntheticScene};
use mvinpaint::{Error, Image, Mask, RadianceGrid, ScalarMap, Scene};

fn occluder(size: u32, n_train: usize) -> SyntheticScene {
    SyntheticScene::occluder(SyntheticConfig {
        width: size,
        height: size,
        n_train,
        n_test: 2,
        with_prop: false,
    })
    .unwrap()
}

#[test]
fn depth_priors_follow_the_hidden_wall() {
    let syn = occluder(64, 4);
    let with = syn.train_views(true);
    let without = syn.train_views(false);
    let depths: Vec<ScalarMap> = with.iter().map(|v| v.depth.clone()).collect();
    let masks: Vec<Mask> = with.iter().map(|v| dilate(&v.object_mask, 5, 2)).collect();
    let priors = inpaint_depths(&depths, &masks, &harmonic_provider()).unwrap();
    let (mut err, mut raw, mut n) = (0.0, 0.0, 0usize);
    for v in 0..with.len() {
        for i in 0..masks[v].data.len() {
            let truth = without[v].depth.data[i];
            if masks[v].data[i] {
                err += (priors[v].data[i] - truth).abs() / truth;
                raw += (depths[v].data[i] - truth).abs() / truth;
                n += 1;
            } else {
                assert_eq!(priors[v].data[i], depths[v].data[i]);
            }
        }
    }
    assert!(n > 0);
    let (mean, before) = (err / n as f64, raw / n as f64);
    assert!(mean < 0.03, "mean relative depth error {mean}");
    assert!(mean < 0.25 * before, "{mean} vs occluded {before}");
}

#[test]
fn color_priors_leave_unmasked_pixels_alone() {
    let syn = occluder(32, 3);
    let with = syn.train_views(true);
    let images: Vec<Image> = with.iter().map(|v| v.image.clone()).collect();
    let masks: Vec<Mask> = with.iter().map(|v| v.object_mask.clone()).collect();
    let priors = inpaint_images(&images, &masks, &harmonic_provider()).unwrap();
    for v in 0..images.len() {
        for i in 0..masks[v].data.len() {
            if !masks[v].data[i] {
                assert_eq!(priors[v].data[i], images[v].data[i]);
            } else {
                assert!(priors[v].data[i].iter().all(|c| c.is_finite()));
            }
        }
    }
}

#[test]
fn directory_provider_reads_per_view_files() {
    let tmp = tempfile::tempdir().unwrap();
    let stems: Vec<String> = ["000", "001"].iter().map(|s| s.to_string()).collect();
    let err = directory_provider(tmp.path(), &stems).unwrap_err();
    match err {
        Error::MissingFiles(f) => assert_eq!(f.len(), 2),
        other => panic!("{other:?}"),
    }
    let fill = |k: usize| Image::filled(8, 6, [0.1 * k as f64, 0.5, 0.9]);
    for (k, s) in stems.iter().enumerate() {
        fill(k).save_png(&tmp.path().join(format!("{s}.png"))).unwrap();
    }
    let p = directory_provider(tmp.path(), &stems).unwrap();
    assert_eq!(p.id(), "directory");
    let images = vec![Image::filled(8, 6, [1.0, 0.0, 0.0]); 2];
    let masks = vec![Mask::from_fn(8, 6, |x, _| x < 4); 2];
    let priors = inpaint_images(&images, &masks, &p).unwrap();
    for k in 0..2 {
        let stored = fill(k).quantized();
        assert_eq!(priors[k].get(1, 1), stored.get(1, 1));
        assert_eq!(priors[k].get(6, 1), [1.0, 0.0, 0.0]);
    }
    let depths = vec![ScalarMap::from_fn(8, 6, |x, _| 2.0 + x as f64); 2];
    let hole = vec![Mask::from_fn(8, 6, |x, y| (2..5).contains(&x) && (1..4).contains(&y)); 2];
    let d = inpaint_depths(&depths, &hole, &p).unwrap();
    assert!((d[0].get(3, 2) - 5.0).abs() < 1e-4, "falls back to harmonic depth: {}", d[0].get(3, 2));
    Image::new(8, 6).save_png(&tmp.path().join("extra.png")).unwrap();
    assert!(matches!(directory_provider(tmp.path(), &stems), Err(Error::Shape(_))));
}

fn psnr(grid: &RadianceGrid, scene: &Scene, truth: &[Image]) -> f64 {
    let opts = scene.render_options(48, SampleMode::Midpoint, 0);
    let (mut se, mut n) = (0.0, 0usize);
    for (p, t) in scene.poses.iter().zip(truth) {
        let r = render_view(grid, &scene.intrinsics, p, &opts).unwrap();
        for (a, b) in r.image.data.iter().zip(&t.data) {
            se += (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
            n += 3;
        }
    }
    -10.0 * (se / n as f64).log10()
}

#[test]
fn no_masks_and_no_prior_weights_is_a_plain_fit() {
    let syn = occluder(24, 6);
    let scene = syn.scene();
    let mut opts = InpaintOptions {
        weights: LossWeights {
            lambda_lpips: 0.0,
            lambda_depth: 0.0,
            ..LossWeights::default()
        },
        warm_start: false,
        refine: false,
        ..InpaintOptions::default()
    };
    opts.grid.resolution = [12; 3];
    opts.original_schedule = grid_schedule(120, 0);
    opts.schedule = grid_schedule(300, 9);
    let masks = vec![Mask::new(24, 24); 6];
    let original = fit_geometry(&scene, &opts.grid, &opts.original_schedule, None).unwrap().0;
    let out = inpaint_scene(
        &InpaintInputs {
            scene: &scene,
            masks: &masks,
            provider: &harmonic_provider(),
            original: Some(&original),
            extractor: None,
            stage_dir: None,
        },
        &opts,
        None,
    )
    .unwrap();
    let (plain, _) = fit_geometry(&scene, &opts.grid, &opts.schedule, None).unwrap();
    let held_out = Scene {
        poses: syn.test_poses.clone(),
        images: syn.test_views(true).into_iter().map(|v| v.image).collect(),
        names: vec!["a.png".into(), "b.png".into()],
        ..scene.clone()
    };
    let (a, b) = (psnr(&out.grid, &held_out, &held_out.images), psnr(&plain, &held_out, &held_out.images));
    assert!((a - b).abs() < 0.1, "inpaint fit {a:.3} dB vs plain {b:.3} dB");
}

#[test]
fn stage_artifacts_are_written() {
    let syn = occluder(24, 4);
    let scene = syn.scene();
    let tmp = tempfile::tempdir().unwrap();
    let mut opts = InpaintOptions::default();
    opts.grid.resolution = [10; 3];
    opts.original_schedule = grid_schedule(60, 0);
    opts.schedule = grid_schedule(40, 1);
    opts.dilation.iterations = 1;
    opts.patch.downscale_factor = 2;
    opts.refine_config.n_samples = 32;
    inpaint_scene(
        &InpaintInputs {
            scene: &scene,
            masks: &syn.object_masks(),
            provider: &harmonic_provider(),
            original: None,
            extractor: None,
            stage_dir: Some(tmp.path()),
        },
        &opts,
        None,
    )
    .unwrap();
    for name in ["dilated_masks", "priors_rgb", "priors_depth", "refined", "inpainted_grid.spgr", "report.json"] {
        assert!(tmp.path().join(name).exists(), "{name}");
    }
    assert!(tmp.path().join("priors_depth/000.pfm").is_file());
}

use proptest::prelude::*;
use themeforge::geometry::{Aabb, CameraDefaults, VoxelRadianceField};
use themeforge::math::Vec3;
use themeforge::metrics::*;
use themeforge::pipeline::PatchFeatures;
use themeforge::render::RenderSettings;
use themeforge::rng::{normal, seeded};
use themeforge::{Image, Result};

fn textured(w: usize) -> Image {
    Image::from_fn(w, w, 3, |x, y, c| {
        let f = (x as f64 * 0.7 + c as f64).sin() * (y as f64 * 0.45).cos();
        0.5 + 0.35 * f
    })
}

fn perturbed(img: &Image, scale: f64, seed: u64) -> Image {
    let mut r = seeded(seed);
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v += scale * normal(&mut r));
    out
}

fn sphere(res: usize, c: Vec3, r: f64) -> VoxelRadianceField {
    VoxelRadianceField::solid_sphere(res, Aabb::unit(), c, r, 40.0, [0.8, 0.4, 0.2]).unwrap()
}

#[test]
fn contextual_distance_is_minimal_at_identity_and_grows_with_noise() {
    let fx = PatchFeatures::default();
    let x = textured(24);
    let d0 = contextual_distance(&x, std::slice::from_ref(&x), &fx).unwrap();
    let ds: Vec<f64> = [0.02, 0.08, 0.2]
        .iter()
        .map(|&s| contextual_distance(&x, &[perturbed(&x, s, 9)], &fx).unwrap())
        .collect();
    assert!(d0 <= ds[0] && ds[0] < ds[1] && ds[1] < ds[2], "{d0} {ds:?}");
}

#[test]
fn contextual_distance_is_directional() {
    let fx = PatchFeatures::default();
    let a = textured(24);
    let b = Image::from_fn(24, 24, 3, |x, _, _| if x < 12 { 0.2 } else { 0.9 });
    let ab = contextual_distance(&a, std::slice::from_ref(&b), &fx).unwrap();
    let ba = contextual_distance(&b, std::slice::from_ref(&a), &fx).unwrap();
    eprintln!("cx(a <- b) {ab:.4}  cx(b <- a) {ba:.4}");
    assert_ne!(ab, ba);
}

struct Axis;

impl Embedder for Axis {
    fn name(&self) -> String {
        "axis".into()
    }
    fn embed(&self, img: &Image) -> Result<Vec<f64>> {
        Ok(if img.get(0, 0, 0) > 0.5 { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
    }
}

#[test]
fn clip_score_of_orthogonal_embeddings_is_zero() {
    let (a, b) = (Image::filled(4, 4, 3, 1.0), Image::filled(4, 4, 3, 0.0));
    assert_eq!(clip_score(&a, &[b], &Axis).unwrap(), 0.0);
    assert_eq!(clip_score(&a, std::slice::from_ref(&a), &Axis).unwrap(), 1.0);
}

#[test]
fn geometry_diversity_vanishes_for_identical_models_and_is_stable_in_camera_count() {
    let d = CameraDefaults { width: 24, height: 24, ..Default::default() };
    let s = RenderSettings { samples_per_ray: 32, ..Default::default() };
    let m = PatchStatsMetric::default();
    let a = sphere(16, Vec3::ZERO, 0.5);
    let b = VoxelRadianceField::from_fn(16, Aabb::unit(), |p| {
        let inside = p.x.abs() < 0.45 && p.y.abs() < 0.3 && p.z.abs() < 0.35;
        (if inside { 40.0 } else { 0.0 }, [0.5; 3])
    })
    .unwrap();
    let cams8 = evaluation_cameras(8, 20.0, &d).unwrap();
    assert_eq!(geometry_diversity(&[a.clone(), a.clone()], &cams8, &s, &m).unwrap(), 0.0);

    let per8 = geometry_diversity_per_camera(&[a.clone(), b.clone()], &cams8, &s, &m).unwrap();
    let mean = per8.iter().sum::<f64>() / 8.0;
    let sd = (per8.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0).sqrt();
    let cams16 = evaluation_cameras(16, 20.0, &d).unwrap();
    let g16 = geometry_diversity(&[a, b], &cams16, &s, &m).unwrap();
    eprintln!("8 cams {mean:.5} (sd {sd:.5}), 16 cams {g16:.5}");
    assert!((g16 - mean).abs() < sd, "{g16} vs {mean} +- {sd}");
}

#[test]
fn one_minus_iou_is_resolution_consistent() {
    let a = sphere(32, Vec3::new(-0.15, 0.0, 0.0), 0.55);
    let b = sphere(32, Vec3::new(0.2, 0.1, 0.0), 0.5);
    let iso = 20.0;
    let coarse = visual_diversity(&[a.clone(), b.clone()], iso).unwrap();
    let fine = visual_diversity(&[a.resample(64, Aabb::unit()).unwrap(), b.resample(64, Aabb::unit()).unwrap()], iso).unwrap();
    eprintln!("1-IoU at 32^3 {coarse:.4}, upsampled 64^3 {fine:.4}");
    assert!((coarse - fine).abs() < 0.02);
    assert!((0.0..=1.0).contains(&coarse));
}

#[test]
fn fields_on_different_grids_are_resampled() {
    let a = sphere(16, Vec3::ZERO, 0.5);
    let b = sphere(24, Vec3::ZERO, 0.5);
    let v = visual_diversity(&[a, b], 20.0).unwrap();
    assert!(v < 0.1, "{v}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn diversity_metrics_are_permutation_invariant(
        seeds in proptest::collection::vec(0u64..1000, 3..6),
        rot in 0usize..6,
    ) {
        let imgs: Vec<Image> = seeds.iter().map(|&s| perturbed(&textured(12), 0.1, s)).collect();
        let mut shuffled = imgs.clone();
        shuffled.rotate_left(rot % imgs.len());
        shuffled.swap(0, imgs.len() - 1);
        let m = PatchStatsMetric::default();
        prop_assert_eq!(concept_diversity(&imgs, &m).unwrap(), concept_diversity(&shuffled, &m).unwrap());

        let fields: Vec<VoxelRadianceField> =
            seeds.iter().map(|&s| sphere(8, Vec3::new((s % 7) as f64 * 0.1 - 0.3, 0.0, 0.0), 0.4)).collect();
        let mut fs = fields.clone();
        fs.rotate_left(rot % fields.len());
        let v = visual_diversity(&fields, 20.0).unwrap();
        prop_assert_eq!(v, visual_diversity(&fs, 20.0).unwrap());
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn clip_score_stays_in_range(a in 0u64..500, b in 0u64..500) {
        let e = RandomProjectionEmbedder::default();
        let s = clip_score(&perturbed(&textured(16), 0.3, a), &[perturbed(&textured(16), 0.3, b)], &e).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}

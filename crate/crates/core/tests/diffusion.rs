use themeforge::diffusion::*;
use themeforge::rng::seeded;
use themeforge::Image;

use rand::Rng;

fn squares(n: usize, rng: &mut impl Rng) -> Vec<(Image, Condition)> {
    (0..n)
        .map(|_| {
            let col = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let img = Image::from_fn(8, 8, 3, |x, y, c| if (2..6).contains(&x) && (2..6).contains(&y) { col[c] } else { 1.0 });
            (img, Condition::new(SUBJECT_GENERIC, STYLE_NONE, Modality::Color))
        })
        .collect()
}

fn smoothed(curve: &[(usize, f64)], range: std::ops::Range<usize>) -> f64 {
    let s = &curve[range];
    s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64
}

#[test]
fn toy_training_halves_the_loss_on_constant_color_squares() {
    let mut rng = seeded(11);
    let data = squares(200, &mut rng);
    let sched = ScheduleConfig::default().build().unwrap();
    let b = train_toy_denoiser(&data, &sched, ToyConfig::default(), 2000, 1e-2, &mut rng).unwrap();
    let DenoiserBackend::Toy(t) = &b else { panic!("toy backend expected") };
    assert_eq!(t.loss_curve.len(), 2000);
    let first = smoothed(&t.loss_curve, 0..100);
    let last = smoothed(&t.loss_curve, 1900..2000);
    eprintln!("initial {first:.4} final {last:.4}");
    assert!(last < 0.5 * first, "initial {first} final {last}");
}

mod tuned {
    use super::*;
    use themeforge::corpus::{creature, pretraining_corpus};
    use themeforge::geometry::{sample_camera, CameraDefaults, CameraMode};
    use themeforge::image::hue_distance;
    use themeforge::render::rasterize;

    #[test]
    fn theme_tuning_pulls_sample_hue_towards_the_exemplars() {
        let cams = CameraDefaults { width: 16, height: 16, ..Default::default() };
        let mut rng = seeded(5);
        let corpus = pretraining_corpus(24, 6, &cams, &mut rng).unwrap();
        let sched = ScheduleConfig::default().build().unwrap();
        let t0 = std::time::Instant::now();
        let base = train_toy_denoiser(&corpus, &sched, ToyConfig::default(), 1500, 1e-2, &mut rng).unwrap();
        eprintln!("pretrain {:?}", t0.elapsed());
        let mesh = creature([[0.85, 0.1, 0.1], [0.9, 0.3, 0.2]], "red");
        let views: Vec<_> = (0..20)
            .map(|_| {
                let cam = sample_camera(CameraMode::Exemplar, &mut rng, 0.0, &cams).unwrap();
                rasterize(&mesh, &cam, [1.0; 3]).unwrap()
            })
            .collect();
        let target = {
            let mut acc = Image::zeros(16, 16, 3);
            for v in &views { acc.add_scaled(&v.color, 1.0 / 20.0).unwrap(); }
            acc.mean_hue()
        };
        let prompt = Condition::new(SUBJECT_GENERIC, STYLE_THEME, Modality::Color);
        let p = TuneParams { iters: 200, batch: 8, lr: 2e-6, lr_multiplier: 100.0 };
        let tuned = finetune_theme(&base, &views, prompt, &p, &mut rng).unwrap();
        let base_h = PriorHandle::new(base, PriorRole::Theme, vec![prompt]);
        let hue = |h: &PriorHandle| {
            let mut r = seeded(99);
            let mut acc = Image::zeros(16, 16, 3);
            for _ in 0..64 {
                let cam = sample_camera(CameraMode::Exemplar, &mut r, 0.0, &cams).unwrap();
                let s = sample_image(h, &prompt.with_camera(&cam), 7.5, 50, &mut r).unwrap();
                acc.add_scaled(&s, 1.0 / 64.0).unwrap();
            }
            acc.mean_hue()
        };
        let (hb, ht) = (hue(&base_h), hue(&tuned));
        eprintln!("target {target:.1} base {hb:.1} tuned {ht:.1}");
        assert!(hue_distance(ht, target) < hue_distance(hb, target));
    }
}

// Scratch calibration harness; not part of the deliverable surface.
use genproj::generator::{GeneratorModel, LatentState};
use genproj::loss::FeatureExtractor;
use genproj::project::{expected_forward_calls, ProjectionConfig, Projector, VariantSpec};
use genproj::rng::SeedRng;
use genproj::{make_box_mask, BoxRegion};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("inrange");
    let model = GeneratorModel::new_seeded(7);
    let features = FeatureExtractor::new_seeded(11);

    match mode {
        "inrange" => {
            let trials: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
            for variant in ["basincma", "adam", "cma_adam", "cma"] {
                let spec = VariantSpec::parse(variant).unwrap();
                let mut wins = 0;
                let mut losses = Vec::new();
                let t0 = Instant::now();
                for trial in 0..trials {
                    let rng = SeedRng::new(1000 + trial as u64);
                    let mut trng = rng.substream(999);
                    let mut z: Vec<f32> =
                        trng.normal_vec(16).iter().map(|&v| v as f32).collect();
                    genproj::generator::clamp_latent_slice(&mut z);
                    let class = trng.index(10);
                    let target = model
                        .forward(&LatentState::new(z, model.embed_class(class).unwrap()))
                        .unwrap();
                    let mask =
                        make_box_mask(32, 32, BoxRegion::new(4, 4, 24, 24), 1.0, 0.3).unwrap();
                    let cfg = ProjectionConfig::default();
                    let proj = Projector::new(&model, &features, cfg.clone()).unwrap();
                    let res = proj.project(&target, &mask, &rng, spec).unwrap();
                    let expected =
                        expected_forward_calls(&cfg, spec, 10, false);
                    losses.push(res.final_report.total);
                    if res.final_report.total < 1e-3 {
                        wins += 1;
                    }
                    println!(
                        "  {variant} trial {trial}: loss {:.3e} class {:?} (true {class}) calls {} (expect {expected})",
                        res.final_report.total, res.class_index, res.budget.total
                    );
                }
                let per = t0.elapsed().as_secs_f64() / trials as f64;
                losses.sort_by(|a, b| a.partial_cmp(b).unwrap());
                println!(
                    "{variant}: {wins}/{trials} below 1e-3, median {:.3e}, {per:.1}s/trial",
                    losses[trials / 2]
                );
            }
        }
        "speed" => {
            // One forward+loss+backward step timing.
            let rng = SeedRng::new(5);
            let mask = make_box_mask(32, 32, BoxRegion::new(4, 4, 24, 24), 1.0, 0.3).unwrap();
            let target = model
                .forward(&LatentState::new(vec![0.2; 16], model.embed_class(1).unwrap()))
                .unwrap();
            let ctx = genproj::loss::LossContext::new(&features, &target, &mask, 10.0).unwrap();
            let mut z: Vec<f32> = SeedRng::new(9).normal_vec(16).iter().map(|&v| v as f32).collect();
            genproj::generator::clamp_latent_slice(&mut z);
            let c = model.embed_class(0).unwrap();
            let t0 = Instant::now();
            let steps = 2000;
            for _ in 0..steps {
                let state = LatentState::new(z.clone(), c.clone());
                let (img, cache) = model.forward_cached(&state).unwrap();
                let (_, dimg) = ctx.loss_and_grad(&features, &img).unwrap();
                let b = model.backward(&cache, &dimg, false).unwrap();
                z[0] += 1e-6 * b.d_z[0];
            }
            let dt = t0.elapsed().as_secs_f64();
            println!("{steps} steps in {dt:.2}s = {:.2} ms/step", 1e3 * dt / steps as f64);
            let _ = rng;
        }
        other => eprintln!("unknown mode {other}"),
    }
}

use artlab::ddpo::*;
use artlab::diffusion::*;
use artlab::reward::RewardPipeline;
use artlab::scenes::{SceneConfig, SceneMixture};
use artlab::taxonomy::Taxonomy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let topo = Topology::default();
    let schedule = NoiseSchedule::linear_with(50, 1e-4, 0.2, ReverseVariance::Posterior).unwrap();
    let scene_cfg = SceneConfig::default();
    let mut conds = |r: &mut ChaCha8Rng| Condition(r.random_range(0..topo.n_classes));

    let mixture = SceneMixture::with_clean_fraction(0.6).unwrap();
    let mut data = mixture_data_sampler(&mixture, &scene_cfg, topo.n_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfg = PretrainConfig { steps: 12000, batch_size: 64, learning_rate: 1e-3 };
    let (model, _) = train_denoiser(&mut data, &cfg, topo, &schedule, &mut rng).unwrap();
    let mut eval = ChaCha8Rng::seed_from_u64(777);
    let before = measure_artifact_rate(&model, &schedule, &scene_cfg, 512, &mut conds, &mut eval).unwrap();
    println!("before: {:.3} ({:?})", before, t0.elapsed());

    let pipeline = RewardPipeline::oracle(scene_cfg.clone(), Taxonomy::builtin()).unwrap();
    let ddpo_cfg = DdpoConfig { trajectories_per_batch: 24, learning_rate: 3e-4, total_batches: 300, ..DdpoConfig::default() };
    let t1 = Instant::now();
    let (tuned, history) = train_loop(model, &pipeline, &scene_cfg, &mut conds, &ddpo_cfg, &schedule, &mut rng, None).unwrap();
    let k = history.len() / 10;
    let first: f64 = history.mean_reward[..k].iter().sum::<f64>() / k as f64;
    let last: f64 = history.mean_reward[history.len()-k..].iter().sum::<f64>() / k as f64;
    println!("ddpo {:?}: reward deciles {:.4} -> {:.4}", t1.elapsed(), first, last);
    let mut eval2 = ChaCha8Rng::seed_from_u64(779);
    let after = measure_artifact_rate(&tuned, &schedule, &scene_cfg, 512, &mut conds, &mut eval2).unwrap();
    println!("after: {:.3}; rate curve tail {:?}", after, &history.artifact_rate[history.len()-6..]);
    println!("total {:?}", t0.elapsed());
}

// temporary timing probe
use cusgs_core::config::Config;
use cusgs_core::pipeline::{build_scene_bank, Engine, SceneData};
use cusgs_core::trainer::{train, Adam};
use std::time::Instant;

fn main() {
    let mut cfg = Config::default();
    cfg.train.iterations = 20;
    cfg.train.log_every = 5;
    cfg.train.eval_every = 0;
    cfg.lifecycle.enabled = false;
    if std::env::var("NOFEAT").is_ok() { cfg.train.weights.feature = 0.0; }
    if std::env::var("NOSSIM").is_ok() { cfg.train.weights.ssim = 0.0; }
    let t0 = Instant::now();
    let (_, scene) = SceneData::generate(&cfg, 0).unwrap();
    println!("scene gen: {:?}", t0.elapsed());
    let t0 = Instant::now();
    let bank = build_scene_bank(&scene, &cfg).unwrap();
    for b in &bank.banks {
        println!("bank {}: K={}", b.tag, b.len());
    }
    println!("bank build: {:?}", t0.elapsed());
    let t0 = Instant::now();
    let mut engine = Engine::<f32>::initialize(cfg, &scene, bank).unwrap();
    println!("init: {:?} anchors={}", t0.elapsed(), engine.scaffold.len());
    let mut opt = Adam::new(&engine.store);
    // Phase timing: forward graph build, backward, optimizer.
    use cusgs_core::diffcore::Tape;
    let mut t_fwd = std::time::Duration::ZERO;
    let mut t_bwd = std::time::Duration::ZERO;
    let mut t_opt = std::time::Duration::ZERO;
    for _ in 0..10 {
        engine.store.zero_grad();
        let t = Instant::now();
        let mut tape = Tape::new();
        let g = engine.view_loss(&mut tape, &scene, 0).unwrap();
        t_fwd += t.elapsed();
        let t = Instant::now();
        tape.backward_into(g.total, &mut engine.store).unwrap();
        t_bwd += t.elapsed();
        let t = Instant::now();
        let rates = cusgs_core::trainer::group_rates::<f32>(&engine.config, 1);
        opt.step(&mut engine.store, &rates);
        t_opt += t.elapsed();
    }
    println!("fwd {:?}/iter bwd {:?}/iter opt {:?}/iter", t_fwd / 10, t_bwd / 10, t_opt / 10);
    let t0 = Instant::now();
    let run = train(&mut engine, &mut opt, &scene, None).unwrap();
    let dt = t0.elapsed();
    println!("20 iters: {:?}  ({:?}/iter)", dt, dt / 20);
    println!("{}", run.metrics_csv);
}

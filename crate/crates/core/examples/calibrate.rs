//! Grid: interference strength x eviction sharpness x delta.
use metastream_core::config::{Method, RunConfig};
use metastream_core::harness::{run, RunReport};

fn main() {
    let cells: Vec<(usize, usize, f64, f64, f64, usize)> = vec![
        // (d, e, scale, delta, beta, capacity)
        (32, 8, 0.7, 1.64, 10.0, 60),
        (32, 8, 0.7, 1.64, 25.0, 60),
        (32, 8, 0.7, 2.2, 25.0, 60),
        (32, 4, 0.8, 1.64, 25.0, 60),
        (16, 4, 1.0, 1.64, 25.0, 60),
        (32, 8, 0.7, 1.64, 25.0, 100),
    ];
    for (d, e, scale, delta, beta, capacity) in cells {
        let mut ours_wins = 0;
        let mut both_beat = 0;
        let mut gaps = Vec::new();
        for seed in 1..=3u64 {
            let mk = |method: Method| {
                let mut cfg = RunConfig::default();
                cfg.model.input_dim = d;
                cfg.model.embed_dim = e;
                cfg.schedule.class_mean_scale = scale;
                cfg.detector.delta = delta;
                cfg.memory.eviction_beta = beta;
                cfg.memory.capacity = capacity;
                cfg.method = method;
                cfg.seed = seed;
                cfg.eval.episodes_per_domain = 250;
                cfg
            };
            let ours = run(&mk(Method::Ours)).unwrap();
            let ur = run(&mk(Method::UniformReplay)).unwrap();
            let seq = run(&mk(Method::Sequential)).unwrap();
            let early = |r: &RunReport| (r.per_domain[0].accuracy + r.per_domain[1].accuracy) / 2.0;
            if ours.average_accuracy >= ur.average_accuracy { ours_wins += 1; }
            if early(&ours) > early(&seq) && early(&ur) > early(&seq) { both_beat += 1; }
            gaps.push(early(&ur) - early(&seq));
            if seed == 1 {
                println!(
                    "d{d}e{e} s{scale} δ{delta} β{beta} cap{capacity}: ours {:.3}/{:.3} mem{:?} | ur {:.3}/{:.3} | seq {:.3}/{:.3}",
                    ours.average_accuracy, early(&ours), ours.memory.truth_counts,
                    ur.average_accuracy, early(&ur), seq.average_accuracy, early(&seq)
                );
            }
        }
        println!(
            "  => ours>=ur {ours_wins}/3 both>seq {both_beat}/3 replay-gap {:?}",
            gaps.iter().map(|g| (g * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
}

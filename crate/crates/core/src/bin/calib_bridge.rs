use std::path::PathBuf;
use std::time::Instant;

use e2timt::backbones::Probes;
use e2timt::bridge::{AdapterVariant, Placement};
use e2timt::data::load_corpus;
use e2timt::harness::eval::{evaluate, EvalOptions, System, SystemKind, SystemModel};
use e2timt::harness::train::BridgeTrainer;
use e2timt::harness::{Preset, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let root = PathBuf::from(args.get(1).expect("root dir"));
    let placement = match args.get(2).map(String::as_str) {
        Some("seq") => Placement::Seq,
        _ => Placement::Emb,
    };
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let lambda: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.4);
    let timt = load_corpus(&root.join("timt")).unwrap();
    let eval_c = load_corpus(&root.join("eval")).unwrap();
    let mut cfg = TrainConfig::new(Preset::Desk);
    cfg.seed = 1;
    cfg.lambda_cmc = lambda;
    let mut t = BridgeTrainer::new(
        cfg,
        &root.join("ocr.ckpt"),
        &root.join("mt.ckpt"),
        placement,
        AdapterVariant::SelfAttention,
    )
    .unwrap();
    let t0 = Instant::now();
    let chunk = 300;
    for i in 1..=(steps / chunk) {
        t.run(&timt, chunk).unwrap();
        let mut hits = 0;
        for ex in eval_c.examples.iter().take(200) {
            let out = t
                .model
                .greedy_decode(&t.arena, &ex.image, 16, &mut Probes::default())
                .unwrap();
            if out.ids == ex.target.ids {
                hits += 1;
            }
        }
        let r = t.log.last().unwrap().1;
        println!(
            "[{:.0}s] bridge {placement:?} l={lambda} step {}: timt {:.4} cmc {:.2} held-em {}/200",
            t0.elapsed().as_secs_f64(),
            i * chunk,
            r.l_timt,
            r.l_cmc,
            hits
        );
        if hits >= 192 {
            break;
        }
    }
    let kind = match placement {
        Placement::Emb => SystemKind::BridgedEmb,
        Placement::Seq => SystemKind::BridgedSeq,
    };
    let system = System {
        kind,
        arena: t.arena,
        model: SystemModel::Bridged(t.model),
    };
    let report = evaluate(&system, &eval_c, &EvalOptions::default()).unwrap();
    println!(
        "final {placement:?}: BLEU {:.2} EM {:.3} char {:.3}",
        report.bleu, report.exact_match, report.char_accuracy
    );
}

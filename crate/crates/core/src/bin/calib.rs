use std::time::Instant;

use e2timt::backbones::Probes;
use e2timt::data::{synthesize_corpora, SynthSizes};
use e2timt::harness::train::{MtTrainer, OcrTrainer};
use e2timt::harness::{Preset, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("mt");
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2400);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(5e-4);
    let dropout: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let dir = std::env::temp_dir().join(format!("e2timt-calib-{which}-{n}-{dropout}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let sizes = SynthSizes {
        ocr_n: if which == "ocr" { n } else { 16 },
        mt_n: if which == "mt" { n } else { 16 },
        timt_n: 16,
        eval_n: 400,
    };
    let corpora = synthesize_corpora(sizes, 42, 0.0, &dir).unwrap();
    let eval_c = &corpora[3];
    let mut cfg = TrainConfig::new(Preset::Desk);
    cfg.seed = 1;
    cfg.lr = lr;
    cfg.dropout = dropout;
    let t0 = Instant::now();
    let chunk = 300;
    if which == "mt" {
        let c = &corpora[1];
        let mut t = MtTrainer::new(cfg).unwrap();
        for i in 1..=(steps / chunk) {
            t.run(c, chunk).unwrap();
            let mut train_hits = 0;
            for ex in c.examples.iter().take(200) {
                let out = t
                    .model
                    .translate(&t.arena, &ex.source, 16, &mut Probes::default())
                    .unwrap();
                if out.ids == ex.target.ids {
                    train_hits += 1;
                }
            }
            let mut held = 0;
            for ex in eval_c.examples.iter().take(200) {
                let out = t
                    .model
                    .translate(&t.arena, &ex.source, 16, &mut Probes::default())
                    .unwrap();
                if out.ids == ex.target.ids {
                    held += 1;
                }
            }
            println!(
                "[{:.0}s] mt n={n} do={dropout} step {}: loss {:.4} train {}/200 held {}/200",
                t0.elapsed().as_secs_f64(),
                i * chunk,
                t.log.last().unwrap().1,
                train_hits,
                held
            );
            if train_hits >= 199 && held >= 191 {
                break;
            }
        }
    } else {
        let c = &corpora[0];
        let mut t = OcrTrainer::new(cfg).unwrap();
        for i in 1..=(steps / chunk) {
            t.run(c, chunk).unwrap();
            let mut train_hits = 0;
            for ex in c.examples.iter().take(200) {
                let out = t
                    .model
                    .recognize(&t.arena, &ex.image, 16, &mut Probes::default())
                    .unwrap();
                if out.ids == ex.source.ids {
                    train_hits += 1;
                }
            }
            let mut held = 0;
            for ex in eval_c.examples.iter().take(200) {
                let out = t
                    .model
                    .recognize(&t.arena, &ex.image, 16, &mut Probes::default())
                    .unwrap();
                if out.ids == ex.source.ids {
                    held += 1;
                }
            }
            println!(
                "[{:.0}s] ocr n={n} do={dropout} step {}: loss {:.4} train {}/200 held {}/200",
                t0.elapsed().as_secs_f64(),
                i * chunk,
                t.log.last().unwrap().1,
                train_hits,
                held
            );
            if train_hits >= 199 && held >= 191 {
                break;
            }
        }
    }
}

//! Command-line front end: synthesize data, pretrain backbones, train the
//! bridge and baselines, evaluate, benchmark, sweep, and compare.
//!
//! Exit codes: 0 success, 2 validation error, 3 numeric failure (NaN loss).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use e2timt::bridge::{AdapterVariant, Placement};
use e2timt::data::{load_corpus, synthesize_corpora, Corpus, SynthSizes};
use e2timt::error::{Error, Result};
use e2timt::harness::bench::benchmark_latency;
use e2timt::harness::compare::run_comparison;
use e2timt::harness::eval::{evaluate, load_system, write_report, EvalOptions, SystemKind};
use e2timt::harness::sweep::{run_sweep, SweepParam};
use e2timt::harness::train::{
    BridgeTrainer, EndToEndInit, EndToEndTrainer, MtTrainer, OcrTrainer, VanillaTrainer,
};
use e2timt::harness::{Preset, TrainConfig};

/// Default backbone-pretraining learning rate; the adapter-phase default of
/// 2e-3 is too hot for the conv + post-norm stacks trained from scratch.
const BACKBONE_LR: f64 = 5e-4;

#[derive(Parser)]
#[command(name = "e2timt", about = "Desk-scale text image translation sandbox")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonTrain {
    #[arg(long, value_parser = parse_preset, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Progress lines every N steps (0 = silent).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

impl CommonTrain {
    fn config(&self, default_lr: f64) -> TrainConfig {
        let mut cfg = TrainConfig::new(self.preset);
        cfg.steps = self.steps;
        cfg.seed = self.seed;
        cfg.lr = self.lr.unwrap_or(default_lr);
        if let Some(batch) = self.batch {
            cfg.batch = batch;
        }
        if let Some(dropout) = self.dropout {
            cfg.dropout = dropout;
        }
        cfg
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the four corpora (ocr, mt, timt, eval) under --out.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        ocr_n: usize,
        #[arg(long, default_value_t = 2000)]
        mt_n: usize,
        #[arg(long, default_value_t = 5000)]
        timt_n: usize,
        #[arg(long, default_value_t = 500)]
        eval_n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Pretrain the OCR backbone on DATA/ocr.
    TrainOcr {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        train: CommonTrain,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the MT backbone on DATA/mt.
    TrainMt {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        train: CommonTrain,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a modal adapter between frozen backbones on DATA/timt.
    TrainBridge {
        #[arg(long)]
        ocr_ckpt: PathBuf,
        #[arg(long)]
        mt_ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_placement)]
        placement: Placement,
        #[arg(long, value_parser = parse_variant, default_value = "attn")]
        variant: AdapterVariant,
        #[arg(long, default_value_t = 0.4)]
        lambda_cmc: f64,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        #[arg(long, default_value_t = 2)]
        adapter_layers: usize,
        #[arg(long, default_value_t = 64)]
        bottleneck_r: usize,
        #[command(flatten)]
        train: CommonTrain,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a baseline system (finetune, scratch, or vanilla-adapter).
    TrainBaseline {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ocr_ckpt: Option<PathBuf>,
        #[arg(long)]
        mt_ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        bottleneck_r: usize,
        #[command(flatten)]
        train: CommonTrain,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a system on DATA/eval and write a JSON report.
    Eval {
        #[arg(long)]
        system: String,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        ocr_ckpt: Option<PathBuf>,
        #[arg(long)]
        mt_ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 16)]
        max_len: usize,
    },
    /// Measure decode latency over DATA/eval.
    Bench {
        #[arg(long)]
        system: String,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        ocr_ckpt: Option<PathBuf>,
        #[arg(long)]
        mt_ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 256)]
        limit: usize,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 16)]
        max_len: usize,
    },
    /// Sweep lambda-cmc or timt-n over bridge training.
    Sweep {
        #[arg(long)]
        param: String,
        /// Comma-separated grid; defaults to the mirrored paper grid.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        ocr_ckpt: PathBuf,
        #[arg(long)]
        mt_ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_placement, default_value = "emb")]
        placement: Placement,
        #[command(flatten)]
        train: CommonTrain,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate every system under one equal budget.
    Compare {
        #[arg(long)]
        ocr_ckpt: PathBuf,
        #[arg(long)]
        mt_ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated seeds, one training round each.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[command(flatten)]
        train: CommonTrain,
        #[arg(long)]
        report: PathBuf,
    },
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    match s {
        "desk" => Ok(Preset::Desk),
        "paper" => Ok(Preset::Paper),
        other => Err(format!("unknown preset {other:?} (expected desk|paper)")),
    }
}

fn parse_placement(s: &str) -> std::result::Result<Placement, String> {
    match s {
        "emb" => Ok(Placement::Emb),
        "seq" => Ok(Placement::Seq),
        other => Err(format!("unknown placement {other:?} (expected emb|seq)")),
    }
}

fn parse_variant(s: &str) -> std::result::Result<AdapterVariant, String> {
    match s {
        "attn" => Ok(AdapterVariant::SelfAttention),
        "bottleneck" => Ok(AdapterVariant::Bottleneck),
        other => Err(format!("unknown variant {other:?} (expected attn|bottleneck)")),
    }
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad grid value {v:?}")))
        })
        .collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed {v:?}")))
        })
        .collect()
}

fn load_split(data: &std::path::Path, split: &str) -> Result<Corpus> {
    load_corpus(&data.join(split))
}

/// Run a trainer in chunks so progress is visible.
fn run_chunked<F>(total: usize, log_every: usize, mut chunk: F) -> Result<()>
where
    F: FnMut(usize) -> Result<String>,
{
    let stride = if log_every == 0 { total } else { log_every.min(total) };
    let mut done = 0;
    while done < total {
        let n = stride.min(total - done);
        let line = chunk(n)?;
        done += n;
        if log_every > 0 {
            println!("step {done}/{total}: {line}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            ocr_n,
            mt_n,
            timt_n,
            eval_n,
            seed,
            noise,
        } => {
            let sizes = SynthSizes {
                ocr_n,
                mt_n,
                timt_n,
                eval_n,
            };
            let corpora = synthesize_corpora(sizes, seed, noise, &out)?;
            for c in &corpora {
                println!("{}: {} records -> {}", c.split, c.len(), out.join(&c.split).display());
            }
            Ok(())
        }
        Command::TrainOcr { data, train, out } => {
            let corpus = load_split(&data, "ocr")?;
            let mut trainer = OcrTrainer::new(train.config(BACKBONE_LR))?;
            run_chunked(train.steps, train.log_every, |n| {
                trainer.run(&corpus, n)?;
                Ok(format!("loss {:.4}", trainer.log.last().map(|l| l.1).unwrap_or(f64::NAN)))
            })?;
            trainer.save(&out)?;
            println!("checkpoint -> {}", out.display());
            Ok(())
        }
        Command::TrainMt { data, train, out } => {
            let corpus = load_split(&data, "mt")?;
            let mut trainer = MtTrainer::new(train.config(BACKBONE_LR))?;
            run_chunked(train.steps, train.log_every, |n| {
                trainer.run(&corpus, n)?;
                Ok(format!("loss {:.4}", trainer.log.last().map(|l| l.1).unwrap_or(f64::NAN)))
            })?;
            trainer.save(&out)?;
            println!("checkpoint -> {}", out.display());
            Ok(())
        }
        Command::TrainBridge {
            ocr_ckpt,
            mt_ckpt,
            data,
            placement,
            variant,
            lambda_cmc,
            tau,
            adapter_layers,
            bottleneck_r,
            train,
            out,
        } => {
            let corpus = load_split(&data, "timt")?;
            let mut cfg = train.config(2e-3);
            cfg.lambda_cmc = lambda_cmc;
            cfg.tau = tau;
            cfg.adapter_layers = adapter_layers;
            cfg.bottleneck_r = bottleneck_r;
            let mut trainer = BridgeTrainer::new(cfg, &ocr_ckpt, &mt_ckpt, placement, variant)?;
            run_chunked(train.steps, train.log_every, |n| {
                trainer.run(&corpus, n)?;
                let r = trainer.log.last().map(|l| l.1);
                Ok(match r {
                    Some(r) => format!(
                        "timt {:.4} cmc {:.4} all {:.4}",
                        r.l_timt, r.l_cmc, r.l_all
                    ),
                    None => String::new(),
                })
            })?;
            trainer.save(&out)?;
            println!("checkpoint -> {}", out.display());
            Ok(())
        }
        Command::TrainBaseline {
            kind,
            data,
            ocr_ckpt,
            mt_ckpt,
            bottleneck_r,
            train,
            out,
        } => {
            let corpus = load_split(&data, "timt")?;
            match kind.as_str() {
                "finetune" | "scratch" => {
                    let init = if kind == "finetune" {
                        EndToEndInit::Finetune
                    } else {
                        EndToEndInit::Scratch
                    };
                    let backbones = match (&ocr_ckpt, &mt_ckpt) {
                        (Some(o), Some(m)) => Some((o.as_path(), m.as_path())),
                        _ => None,
                    };
                    let mut trainer = EndToEndTrainer::new(train.config(2e-3), init, backbones)?;
                    run_chunked(train.steps, train.log_every, |n| {
                        trainer.run(&corpus, n)?;
                        Ok(format!(
                            "loss {:.4}",
                            trainer.log.last().map(|l| l.1).unwrap_or(f64::NAN)
                        ))
                    })?;
                    trainer.save(&out)?;
                }
                "vanilla-adapter" => {
                    let ocr = ocr_ckpt.ok_or_else(|| {
                        Error::Config("vanilla-adapter requires --ocr-ckpt".into())
                    })?;
                    let mt = mt_ckpt
                        .ok_or_else(|| Error::Config("vanilla-adapter requires --mt-ckpt".into()))?;
                    let mut cfg = train.config(2e-3);
                    cfg.bottleneck_r = bottleneck_r;
                    let mut trainer = VanillaTrainer::new(cfg, &ocr, &mt)?;
                    run_chunked(train.steps, train.log_every, |n| {
                        trainer.run(&corpus, n)?;
                        Ok(format!(
                            "loss {:.4}",
                            trainer.log.last().map(|l| l.1).unwrap_or(f64::NAN)
                        ))
                    })?;
                    trainer.save(&out)?;
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown baseline {other:?} (expected finetune|scratch|vanilla-adapter)"
                    )))
                }
            }
            println!("checkpoint -> {}", out.display());
            Ok(())
        }
        Command::Eval {
            system,
            ckpt,
            ocr_ckpt,
            mt_ckpt,
            data,
            report,
            noise,
            max_len,
        } => {
            let kind = SystemKind::parse(&system)?;
            let sys = load_system(kind, ckpt.as_deref(), ocr_ckpt.as_deref(), mt_ckpt.as_deref())?;
            let corpus = load_split(&data, "eval")?;
            let opts = EvalOptions {
                max_len,
                noise,
                ..EvalOptions::default()
            };
            let r = evaluate(&sys, &corpus, &opts)?;
            write_report(&report, &r)?;
            println!(
                "{}: BLEU {:.2}  exact-match {:.3}  char-acc {:.3}  params {}  -> {}",
                kind.name(),
                r.bleu,
                r.exact_match,
                r.char_accuracy,
                r.total_params,
                report.display()
            );
            Ok(())
        }
        Command::Bench {
            system,
            ckpt,
            ocr_ckpt,
            mt_ckpt,
            data,
            reps,
            limit,
            report,
            max_len,
        } => {
            let kind = SystemKind::parse(&system)?;
            let sys = load_system(kind, ckpt.as_deref(), ocr_ckpt.as_deref(), mt_ckpt.as_deref())?;
            let corpus = load_split(&data, "eval")?;
            let images: Vec<_> = corpus
                .examples
                .iter()
                .take(limit)
                .map(|e| e.image.clone())
                .collect();
            let stats = benchmark_latency(&sys, &images, max_len, reps)?;
            write_report(&report, &stats)?;
            println!(
                "{}: {:.3} ms/sentence (sigma {:.3}, {} reps x {} sentences, {:.2} decode loops/sentence)",
                kind.name(),
                stats.mean_ms,
                stats.sigma_ms,
                stats.reps,
                stats.sentences,
                stats.decode_loops_per_sentence
            );
            Ok(())
        }
        Command::Sweep {
            param,
            grid,
            ocr_ckpt,
            mt_ckpt,
            data,
            placement,
            train,
            report,
        } => {
            let param = SweepParam::parse(&param)?;
            let grid = match grid {
                Some(g) => parse_grid(&g)?,
                None => param.default_grid(),
            };
            let timt = load_split(&data, "timt")?;
            let eval_c = load_split(&data, "eval")?;
            let cfg = train.config(2e-3);
            let r = run_sweep(param, &grid, &cfg, &ocr_ckpt, &mt_ckpt, &timt, &eval_c, placement)?;
            for entry in &r.entries {
                println!(
                    "{} = {}: BLEU {:.2} exact-match {:.3}",
                    r.param, entry.value, entry.report.bleu, entry.report.exact_match
                );
            }
            write_report(&report, &r)?;
            println!("report -> {}", report.display());
            Ok(())
        }
        Command::Compare {
            ocr_ckpt,
            mt_ckpt,
            data,
            seeds,
            train,
            report,
        } => {
            let seeds = parse_seeds(&seeds)?;
            let timt = load_split(&data, "timt")?;
            let eval_c = load_split(&data, "eval")?;
            let cfg = train.config(2e-3);
            let r = run_comparison(&cfg, &ocr_ckpt, &mt_ckpt, &timt, &eval_c, &seeds)?;
            for entry in &r.entries {
                println!(
                    "{} (seed {}): BLEU {:.2} exact-match {:.3} params {}",
                    entry.system.name(),
                    entry.seed,
                    entry.report.bleu,
                    entry.report.exact_match,
                    entry.report.total_params
                );
            }
            write_report(&report, &r)?;
            println!("report -> {}", report.display());
            Ok(())
        }
    }
}

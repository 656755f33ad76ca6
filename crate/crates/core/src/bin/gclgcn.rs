use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gclgcn::centrality::{composite_centrality, parse_measures};
use gclgcn::checkpoint::{load_pretrained, save_pretrained, save_state};
use gclgcn::cluster::{MetricRow, NmiNormalization};
use gclgcn::config::{parse_config_with, ExperimentConfig};
use gclgcn::graph::{labels_to_text, read_edges, read_features, read_labels, save_graph, Graph};
use gclgcn::harness::{self, ResultTable, FUSION_VALUES, LOSS_WEIGHT_VALUES};
use gclgcn::training::{pretrain, train_from, TrainOptions};
use gclgcn::{Error, Result};

#[derive(Parser)]
#[command(name = "gclgcn", version, about = "Attributed-graph clustering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    set: Vec<(String, String)>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a stochastic block model graph from the `sbm.*` keys.
    GenSbm(Common),
    /// Write the centrality matrix of a graph as CSV.
    Centrality {
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value = "degree,betweenness,closeness")]
        measures: String,
        /// Output directory; prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the autoencoder and contrastive encoder.
    Pretrain(Common),
    /// Pretrain (unless given artifacts) and run the joint loop.
    Train {
        #[command(flatten)]
        common: Common,
        /// Artifacts written by `pretrain`.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Full model and the three module ablations.
    Ablate(Common),
    /// Encoder depths 4 down to 1.
    Layers(Common),
    /// Centrality and spatial-encoding variants.
    Encodings(Common),
    /// Parameter grid sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: SweepKind,
        /// Axis values (λ and θ for fusion, α and β for loss).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Score predicted labels against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum, default_value = "geometric")]
        nmi: NmiArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Fusion,
    Loss,
}

#[derive(Clone, Copy, ValueEnum)]
enum NmiArg {
    Geometric,
    Arithmetic,
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, Graph)> {
        let cfg = match &self.config {
            Some(path) => parse_config_with(path, &self.set)?,
            None => {
                let mut cfg = ExperimentConfig::default();
                for (k, v) in &self.set {
                    cfg.set(k, v)?;
                }
                cfg.validate()?;
                cfg
            }
        };
        let g = cfg.load_graph()?;
        Ok((cfg, g))
    }

    fn out_dir(&self) -> Result<Option<&Path>> {
        if let Some(dir) = &self.out {
            fs::create_dir_all(dir)?;
        }
        Ok(self.out.as_deref())
    }
}

fn emit(text: &str, dir: Option<&Path>, name: &str) -> Result<()> {
    match dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), text)?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn emit_table(table: &ResultTable, common: &Common) -> Result<()> {
    for note in &table.notes {
        eprintln!("{note}");
    }
    emit(&table.to_csv(), common.out_dir()?, "results.csv")
}

fn metrics_line(m: &MetricRow) -> String {
    format!(
        "acc={:.4} nmi={:.4} ari={:.4} f1={:.4} composite={:.4}",
        m.acc,
        m.nmi,
        m.ari,
        m.f1,
        m.composite()
    )
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSbm(common) => {
            let (_, g) = common.load()?;
            let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let files = save_graph(&g, &dir)?;
            eprintln!(
                "wrote {} nodes, {} edges to {}",
                g.num_nodes(),
                g.edges().len(),
                files.features.parent().unwrap_or(&dir).display()
            );
        }
        Command::Centrality {
            edges,
            features,
            measures,
            out,
        } => {
            let x = read_features(&features)?;
            let e = read_edges(&edges, x.nrows())?;
            let g = Graph::new(x, e, None)?;
            let c = composite_centrality(&g, &parse_measures(&measures)?)?;
            emit(&c.to_csv(), out.as_deref(), "centrality.csv")?;
        }
        Command::Pretrain(common) => {
            let (cfg, g) = common.load()?;
            let pre = pretrain(&g, &cfg)?;
            let dir = common.out_dir()?.unwrap_or(Path::new("."));
            save_pretrained(&pre, &dir.join("pretrain.gclc"))?;
            let mut csv = String::from("epoch,ae_loss,contrastive_loss\n");
            for i in 0..pre.ae_losses.len().max(pre.contrastive_losses.len()) {
                let cell = |v: Option<&f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
                csv.push_str(&format!(
                    "{i},{},{}\n",
                    cell(pre.ae_losses.get(i)),
                    cell(pre.contrastive_losses.get(i))
                ));
            }
            fs::write(dir.join("pretrain_history.csv"), csv)?;
        }
        Command::Train { common, pretrained } => {
            let (cfg, g) = common.load()?;
            let pre = match &pretrained {
                Some(path) => load_pretrained(&g, &cfg, path)?,
                None => pretrain(&g, &cfg)?,
            };
            let dir = common.out_dir()?.unwrap_or(Path::new("."));
            let checkpoint = dir.join("model.gclc");
            let opts = TrainOptions {
                failure_checkpoint: Some(checkpoint.clone()),
                ..TrainOptions::default()
            };
            let out = train_from(&g, &cfg, pre, opts)?;
            fs::write(dir.join("history.csv"), out.history.to_csv())?;
            fs::write(dir.join("labels.txt"), labels_to_text(&out.labels))?;
            save_state(&out.state, &checkpoint)?;
            if let Some(m) = &out.metrics {
                println!("{}", metrics_line(m));
            }
        }
        Command::Ablate(common) => {
            let (cfg, g) = common.load()?;
            emit_table(&harness::ablation_study(&g, &cfg)?, &common)?;
        }
        Command::Layers(common) => {
            let (cfg, g) = common.load()?;
            emit_table(&harness::layer_study(&g, &cfg, &[4, 3, 2, 1])?, &common)?;
        }
        Command::Encodings(common) => {
            let (cfg, g) = common.load()?;
            emit_table(&harness::encoding_study(&g, &cfg)?, &common)?;
        }
        Command::Sweep { common, kind, values } => {
            let (cfg, g) = common.load()?;
            let table = match kind {
                SweepKind::Fusion => {
                    let v = values.unwrap_or_else(|| FUSION_VALUES.to_vec());
                    harness::sweep_fusion(&g, &cfg, &v, &v)?
                }
                SweepKind::Loss => {
                    let v = values.unwrap_or_else(|| LOSS_WEIGHT_VALUES.to_vec());
                    harness::sweep_loss_weights(&g, &cfg, &v, &v)?
                }
            };
            if let Some(best) = table.best_by_f1() {
                eprintln!("best: {} f1={:.4}", best.variant, best.metrics.f1);
            }
            emit_table(&table, &common)?;
        }
        Command::Eval { pred, truth, nmi } => {
            let norm = match nmi {
                NmiArg::Geometric => NmiNormalization::Geometric,
                NmiArg::Arithmetic => NmiNormalization::Arithmetic,
            };
            let m = MetricRow::evaluate_with(&read_labels(&pred)?, &read_labels(&truth)?, norm)?;
            println!("{}", metrics_line(&m));
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

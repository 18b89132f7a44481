mod config;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dsrlab::autograd::Graph;
use dsrlab::dmm::dump_matches;
use dsrlab::evalkit::{bicubic_baseline, evaluate_dataset, model_stats, Provenance, REFERENCE_LR};
use dsrlab::model::{Dsrnet, ModelConfig, SampleVars};
use dsrlab::nn::ParamStore;
use dsrlab::synthgen::{dataset_read, dataset_write, generate, write_png, SynthConfig};
use dsrlab::trainer::ablation::{run_ablation, write_rows, AblationTable, ROWS};
use dsrlab::trainer::{load_generator, train_student_distill, train_teacher, Mode, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "dsrlab", version, about = "Depth-guided reference super-resolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Full-size networks.
    Paper,
    /// Small networks and 64x64 data for CPU runs.
    Toy,
}

#[derive(clap::Args, Clone, Debug)]
struct ConfigArgs {
    /// JSON file layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set weights.rec=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, value_enum, default_value = "paper")]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed: Some(seed),
            ..self.clone()
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic pipe dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a teacher network.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distil a trained teacher into a student.
    Distill {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against the bicubic baseline.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only the samples the checkpoint's config held out of training.
        #[arg(long)]
        holdout_only: bool,
    },
    /// Write SR images and match maps for samples.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sample id; all samples when omitted.
        #[arg(long)]
        sample: Option<String>,
    },
    /// Parameter and FLOP counts of the teacher and student networks.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also time one forward pass per network on this dataset's first sample.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Depth and distillation ablation grids.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of seeds, counting up from `--seed`.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, value_enum, default_value = "all")]
        table: TableArg,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TableArg {
    Depth,
    Distill,
    All,
}

#[derive(Serialize)]
struct Echo<'a, T: Serialize> {
    command: &'a str,
    config: &'a T,
    provenance: Provenance,
}

fn echo<T: Serialize>(out: &Path, command: &str, config: &T, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let e = Echo {
        command,
        config,
        provenance: Provenance::current(seed),
    };
    let path = out.join("resolved_config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&e)?).with_context(|| format!("writing {}", path.display()))
}

fn train_config(args: &ConfigArgs, mode: Mode) -> Result<TrainConfig> {
    let seed = args.seed.unwrap_or(0);
    let base = match args.preset {
        Preset::Toy => TrainConfig::toy(mode, seed),
        Preset::Paper => TrainConfig {
            mode,
            seed,
            model: if mode.is_student() { ModelConfig::student() } else { ModelConfig::teacher() },
            ..TrainConfig::default()
        },
    };
    let mut cfg = config::resolve(&base, args.config.as_deref(), &args.sets)?;
    cfg.mode = mode;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_mode(s: Option<&str>, default: Mode) -> Result<Mode> {
    Ok(match s {
        Some(s) => Mode::parse(s)?,
        None => default,
    })
}

fn model_presets(preset: Preset) -> [(&'static str, ModelConfig); 2] {
    match preset {
        Preset::Paper => [("teacher", ModelConfig::teacher()), ("student", ModelConfig::student())],
        Preset::Toy => [("teacher", ModelConfig::toy_teacher()), ("student", ModelConfig::toy_student())],
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { cfg, n, out } => {
            let base = match cfg.preset {
                Preset::Paper => SynthConfig::default(),
                Preset::Toy => SynthConfig::toy(),
            };
            let mut sc: SynthConfig = config::resolve(&base, cfg.config.as_deref(), &cfg.sets)?;
            if let Some(n) = n {
                sc.n = n;
            }
            if let Some(s) = cfg.seed {
                sc.seed = s;
            }
            let records = generate(&sc)?;
            dataset_write(&records, &out)?;
            echo(&out, "synth", &sc, sc.seed)?;
            println!("wrote {} samples to {}", records.len(), out.display());
        }
        Command::Train { cfg, mode, data, out } => {
            let mode = parse_mode(mode.as_deref(), Mode::TeacherFull)?;
            if mode.is_student() {
                bail!("{} is a student mode; use `distill`", mode.name());
            }
            let tc = train_config(&cfg, mode)?;
            echo(&out, "train", &tc, tc.seed)?;
            let samples = dataset_read(&data)?;
            let o = train_teacher(&tc, &samples, &out)?;
            println!("trained {} steps, checkpoint in {}", o.meta.step, o.checkpoint.display());
        }
        Command::Distill {
            cfg,
            mode,
            data,
            teacher_ckpt,
            out,
        } => {
            let mode = parse_mode(mode.as_deref(), Mode::StudentDistill)?;
            if !mode.is_student() {
                bail!("{} is a teacher mode; use `train`", mode.name());
            }
            let tc = train_config(&cfg, mode)?;
            echo(&out, "distill", &tc, tc.seed)?;
            let samples = dataset_read(&data)?;
            let o = train_student_distill(&tc, &teacher_ckpt, &samples, &out)?;
            println!("trained {} steps, checkpoint in {}", o.meta.step, o.checkpoint.display());
        }
        Command::Eval {
            ckpt,
            data,
            out,
            holdout_only,
        } => {
            let (net, store, tc) = load_generator(&ckpt)?;
            let samples = dataset_read(&data)?;
            let subset = if holdout_only { tc.split(&samples)?.1 } else { &samples[..] };
            let cfg_json = serde_json::to_value(&tc)?;
            echo(&out, "eval", &cfg_json, tc.seed)?;
            let r = evaluate_dataset(&tc.mode.name(), &net, &store, tc.mode.depth_source(), subset, cfg_json, tc.seed)?;
            r.write(&out)?;
            print!("{}", r.to_csv());
        }
        Command::Infer { ckpt, data, out, sample } => {
            let (net, store, tc) = load_generator(&ckpt)?;
            echo(&out, "infer", &tc, tc.seed)?;
            let samples = dataset_read(&data)?;
            let chosen: Vec<_> = samples
                .iter()
                .filter(|s| sample.as_ref().is_none_or(|id| &s.sample_id == id))
                .collect();
            if chosen.is_empty() {
                bail!("no sample matches {:?}", sample);
            }
            for s in chosen {
                let mut g = Graph::<f32>::new();
                let p = store.bind(&mut g, false);
                let x = SampleVars::new(&mut g, s);
                let o = net.forward(&mut g, &p, &x, tc.mode.depth_source(), None)?;
                let dir = out.join(&s.sample_id);
                std::fs::create_dir_all(&dir)?;
                write_png(&g.value(o.sr).clamp(0.0, 1.0), &dir.join("sr.png"))?;
                write_png(&bicubic_baseline(s)?, &dir.join("bicubic.png"))?;
                dump_matches(&o.dmm.blocks, &dir.join("matches"))?;
            }
            println!("wrote results to {}", out.display());
        }
        Command::Bench { cfg, out, data } => {
            let models = model_presets(cfg.preset);
            let mut resolved = Vec::new();
            for (name, m) in &models {
                resolved.push((*name, config::resolve(m, cfg.config.as_deref(), &cfg.sets)?));
            }
            echo(&out, "bench", &resolved, cfg.seed.unwrap_or(0))?;
            let sample = match &data {
                Some(d) => dataset_read(d)?.into_iter().next(),
                None => None,
            };
            let mut csv = String::from("network,params,macs,FLOPs(G),Params(M),forward_ms\n");
            let mut rows = Vec::new();
            for (name, m) in &resolved {
                let mut store = ParamStore::<f32>::new();
                let net = Dsrnet::new(&mut store, m, cfg.seed.unwrap_or(0))?;
                let st = model_stats(&net, store.count(), REFERENCE_LR)?;
                let ms = match &sample {
                    Some(s) => {
                        let t = Instant::now();
                        dsrlab::model::infer(&net, &store, s, dsrlab::model::DepthSource::Predicted)?;
                        Some(t.elapsed().as_secs_f64() * 1e3)
                    }
                    None => None,
                };
                csv.push_str(&format!(
                    "{name},{},{},{:.2},{:.2},{}\n",
                    st.params,
                    st.macs,
                    st.flops_g(),
                    st.params_m(),
                    ms.map(|v| format!("{v:.1}")).unwrap_or_default()
                ));
                rows.push(serde_json::json!({"network": name, "stats": st, "forward_ms": ms}));
            }
            std::fs::write(out.join("bench.json"), serde_json::to_vec_pretty(&rows)?)?;
            std::fs::write(out.join("bench.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Ablate {
            cfg,
            data,
            out,
            seeds,
            table,
        } => {
            let want = |t: AblationTable| match table {
                TableArg::All => true,
                TableArg::Depth => t == AblationTable::Depth,
                TableArg::Distill => t == AblationTable::Distill,
            };
            let modes: Vec<Mode> = ROWS.iter().filter(|r| want(r.1)).map(|r| r.2).collect();
            let first = cfg.seed.unwrap_or(0);
            let seed_list: Vec<u64> = (first..first + seeds).collect();
            let mut templates = HashMap::new();
            for &m in modes.iter().chain([Mode::TeacherRecDep].iter()) {
                for &s in &seed_list {
                    templates.insert((m, s), train_config(&cfg.with_seed(s), m)?);
                }
            }
            let mut echoed: Vec<_> = templates.values().collect();
            echoed.sort_by_key(|c| (ROWS.iter().position(|r| r.2 == c.mode), c.seed));
            echo(&out, "ablate", &echoed, first)?;
            let samples = dataset_read(&data)?;
            let lookup = |m: Mode, s: u64| templates[&(m, s)].clone();
            let rows = run_ablation(lookup, &modes, &seed_list, &samples, &out)?;
            write_rows(&rows, &out)?;
            print!("{}", dsrlab::trainer::ablation::rows_to_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

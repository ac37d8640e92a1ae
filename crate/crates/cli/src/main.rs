use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use segadapt_core::pipeline::{
    cmd_evaluate, cmd_pipeline, cmd_sa, cmd_sp_train, cmd_synth_gen, cmd_uda, CommandOptions, EvalMode, RunConfig,
    SaStage, StageRun,
};
use segadapt_core::Error;

/// Source preparation, unsupervised adaptation and supervised alignment
/// for semantic segmentation.
///
/// Any config key can be overridden as `--a.b.c=value`, e.g.
/// `--sp.scheme=blur` or `--sa.subset_sizes=[20,50]`.
#[derive(Parser, Debug)]
#[command(name = "segadapt", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sets every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (for synth-gen: dataset root).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Recompute stages whose config hash already completed; synth-gen
    /// overwrites existing splits.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the seeded synthetic source and target splits.
    SynthGen,
    /// Train the source model with the configured SP scheme.
    SpTrain,
    /// Adapt a source checkpoint to the target domain.
    Uda {
        /// Defaults to the SP checkpoint of the configured scheme.
        #[arg(long)]
        start: Option<PathBuf>,
    },
    /// Finetune on labeled target subsets; several starts are compared on
    /// shared subsets.
    Sa {
        #[arg(long)]
        start: Vec<PathBuf>,
    },
    /// Score checkpoints on target val.
    Evaluate {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Run the corruption battery instead of the clean grid.
        #[arg(long)]
        robustness: bool,
    },
    /// Run every stage and render the stage-contribution grid.
    Pipeline,
}

/// Pulls `--a.b=v` and `--a.b v` overrides out of the argument list.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match value {
            Some(v) => v,
            None => it.next().ok_or_else(|| format!("override --{key} needs a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn load_config(common: &Common, command: &Command, user: Vec<(String, String)>) -> segadapt_core::Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(seed) = common.seed {
        for k in ["data", "sp", "uda", "sa", "eval"] {
            overrides.push((format!("seeds.{k}"), seed.to_string()));
        }
    }
    if let Some(out) = &common.out {
        let key = if matches!(command, Command::SynthGen) { "data.root" } else { "out" };
        overrides.push((key.to_string(), toml_quote(&out.to_string_lossy())));
    }
    overrides.extend(user);
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn toml_quote(s: &str) -> String {
    let mut q = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => q.push_str("\\\""),
            '\\' => q.push_str("\\\\"),
            _ => q.push(c),
        }
    }
    q.push('"');
    q
}

fn print_stage(run: &StageRun, split: &str) {
    println!(
        "{} [{}] {:?}: {} ({split} mIoU {:.2})",
        run.stage,
        run.arm,
        run.status,
        run.checkpoint_path.display(),
        run.report.miou_points()
    );
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> segadapt_core::Result<()> {
    let cfg = load_config(&cli.common, &cli.command, overrides)?;
    let opts = CommandOptions {
        force: cli.common.force,
    };
    match &cli.command {
        Command::SynthGen => {
            for split in cmd_synth_gen(&cfg, &cfg.data.root, opts.force)? {
                let labels = if split.labeled { "labeled" } else { "unlabeled" };
                println!("{}: {} images, {labels}", split.path.display(), split.images);
            }
        }
        Command::SpTrain => print_stage(&cmd_sp_train(&cfg, &opts)?, "source val"),
        Command::Uda { start } => print_stage(&cmd_uda(&cfg, start.as_deref(), &opts)?, "target val"),
        Command::Sa { start } => match cmd_sa(&cfg, start, &opts)? {
            SaStage::Skipped { reason } => println!("sa skipped: {reason}"),
            SaStage::Ran { grid, reports, .. } => {
                print!("{grid}");
                for r in reports {
                    println!("wrote {}", r.display());
                }
            }
        },
        Command::Evaluate { checkpoint, robustness } => {
            let mode = if *robustness { EvalMode::Robustness } else { EvalMode::Clean };
            let out = cmd_evaluate(&cfg, checkpoint, mode)?;
            print!("{}", out.grid);
            for r in out.report_paths {
                println!("wrote {}", r.display());
            }
        }
        Command::Pipeline => {
            let sum = cmd_pipeline(&cfg, &opts)?;
            print!("{}", sum.contribution_grid);
            if let Some(g) = &sum.robustness_grid {
                println!();
                print!("{g}");
            }
            if let SaStage::Skipped { reason } = &sum.sa {
                println!("sa skipped: {reason}");
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NotFound(_) => 3,
        Error::Refused(_) => 4,
        Error::Capacity { .. } => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("{}", serde_json::json!({ "error": "config", "message": msg }));
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.category(), "message": e.to_string() }));
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_from_flags() {
        let (rest, ov) = split_overrides(strings(&[
            "segadapt",
            "--config",
            "run.toml",
            "--sp.scheme=blur",
            "pipeline",
            "--sa.subset_sizes",
            "[20,50]",
            "--force",
        ]))
        .unwrap();
        assert_eq!(rest, strings(&["segadapt", "--config", "run.toml", "pipeline", "--force"]));
        assert_eq!(
            ov,
            vec![
                ("sp.scheme".to_string(), "blur".to_string()),
                ("sa.subset_sizes".to_string(), "[20,50]".to_string())
            ]
        );
        assert!(split_overrides(strings(&["segadapt", "--sp.scheme"])).is_err());
    }

    #[test]
    fn seed_and_out_become_overrides() {
        let cli = Cli::parse_from(["segadapt", "--seed", "4", "--out", "r/x", "sp-train"]);
        let cfg = load_config(&cli.common, &cli.command, vec![("seeds.sa".into(), "9".into())]).unwrap();
        assert_eq!((cfg.seeds.data, cfg.seeds.uda, cfg.seeds.sa), (4, 4, 9));
        assert_eq!(cfg.out, PathBuf::from("r/x"));
        let cli = Cli::parse_from(["segadapt", "--out", "d", "synth-gen"]);
        let cfg = load_config(&cli.common, &cli.command, vec![]).unwrap();
        assert_eq!(cfg.data.root, PathBuf::from("d"));
    }

    #[test]
    fn quoting_survives_toml() {
        let q = toml_quote("a\"b\\c");
        let t: toml::Table = toml::from_str(&format!("v = {q}")).unwrap();
        assert_eq!(t["v"].as_str(), Some("a\"b\\c"));
    }

    #[test]
    fn exit_codes_by_category() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::NotFound("p".into())), 3);
        assert_eq!(exit_code(&Error::Refused("x".into())), 4);
    }
}

//! Command-line front end.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use clap::{Args, Parser, Subcommand};

use crate::data::synth::{generate_synthetic_corpus, SynthFigureSpec};
use crate::data::{load_image, preprocess, save_image, tensor_to_images, CorpusManifest, Crop, Loader, LoaderMode, Split};
use crate::metrics::{default_eval_dir, evaluate, EvalOptions};
use crate::model::Tokenizer;
use crate::perceptual::{build_lpips, build_ocr_backbone, OcrPerceptualLoss};
use crate::tokenfile::TokenFile;
use crate::trainer::{fit_with, load_tokenizer, TrainConfig, Trainer};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "ocr-vqgan", version, about = "Image tokenizer for text-rich figures")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config mirroring the TrainConfig fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in profile used when no --config is given: `paper` or `desk`.
    #[arg(long, global = true, default_value = "paper")]
    pub profile: String,
    /// `key=value` config override; dotted keys reach nested tables. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path; its meaning depends on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a tokenizer.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score reconstructions of a test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest of the evaluation split.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 224)]
        fid_input_size: usize,
        /// Pairs drawn into grid.png; 0 disables the grid.
        #[arg(long, default_value_t = 8)]
        grid: usize,
    },
    /// Write the reconstruction of each image next to it (or into --out).
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Image to token file.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        image: PathBuf,
    },
    /// Token file to image.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        tokens: PathBuf,
    },
    /// Build a synthetic figure corpus with train and test manifests.
    MakeSynthetic {
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 100)]
        test_count: usize,
        /// TOML figure spec; defaults to the built-in one.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// TrueType font request; only the built-in bitmap font is rendered.
        #[arg(long)]
        font: Option<PathBuf>,
    },
}

fn check_device(device: &str) -> Result<Device> {
    match device {
        "cpu" => Ok(Device::Cpu),
        other => Err(Error::Config(format!("device `{other}` is not available; use `cpu`"))),
    }
}

/// Resolved training config: file or profile, then overrides, then --seed and --out.
pub fn resolve_config(g: &GlobalArgs) -> Result<TrainConfig> {
    let base = match &g.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::profile(&g.profile)?,
    };
    let mut cfg = base.with_overrides(&g.overrides)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.paths.output = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn image_tensor(path: &Path, size: usize) -> Result<Tensor> {
    let img = load_image(path)?;
    let data = preprocess(&img, size as u32, Crop::Center)?;
    Ok(Tensor::from_vec(data, (1, 3, size, size), &Device::Cpu)?)
}

fn write_single(t: &Tensor, path: &Path) -> Result<()> {
    let img = tensor_to_images(t)?.pop().expect("one image");
    save_image(&img, path)
}

fn reconstruction_path(image: &Path, out: Option<&Path>) -> PathBuf {
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    let name = format!("{stem}.recon.png");
    match out {
        Some(dir) => dir.join(name),
        None => image.with_file_name(name),
    }
}

fn encode_image(tok: &Tokenizer, cfg: &TrainConfig, sha: &str, image: &Path) -> Result<TokenFile> {
    let grid = tok.encode(&image_tensor(image, cfg.image_size)?)?;
    TokenFile::from_grid(&grid, cfg.codebook_size, cfg.codec.latent_dim, sha)
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    check_device(&g.device)?;
    match &cli.command {
        Command::Train { resume } => {
            let cfg = resolve_config(g)?;
            log::info!("training into {}", cfg.paths.output.display());
            let out = fit_with(Trainer::new(&cfg)?, resume.as_deref())?;
            println!("{} sha256={}", out.final_checkpoint.display(), out.checkpoint_sha256);
        }
        Command::Evaluate {
            checkpoint,
            corpus,
            batch_size,
            fid_input_size,
            grid,
        } => {
            let (tok, cfg, sha) = load_tokenizer(checkpoint)?;
            let dir = cfg.weights_dir();
            let lpips = build_lpips(&cfg.backbones.vgg, dir.as_deref(), DType::F32)?;
            let ocr = OcrPerceptualLoss::new(build_ocr_backbone(&cfg.backbones.ocr, dir.as_deref(), DType::F32)?);
            let manifest = CorpusManifest::load(corpus)?;
            let loader = Loader::new(manifest, *batch_size, cfg.image_size, 0, LoaderMode::Eval)?;
            let options = EvalOptions {
                fid_input_size: *fid_input_size,
                grid_pairs: *grid,
            };
            let out = g.out.clone().unwrap_or_else(|| default_eval_dir(checkpoint));
            let report = evaluate(&tok, &loader, &lpips, &ocr, &sha, &options, Some(&out))?;
            print!("{}", report.to_markdown());
        }
        Command::Reconstruct { checkpoint, images } => {
            let (tok, cfg, _) = load_tokenizer(checkpoint)?;
            if let Some(dir) = &g.out {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            for image in images {
                let xr = tok.reconstruct(&image_tensor(image, cfg.image_size)?)?;
                let path = reconstruction_path(image, g.out.as_deref());
                write_single(&xr, &path)?;
                println!("{}", path.display());
            }
        }
        Command::Encode { checkpoint, image } => {
            let (tok, cfg, sha) = load_tokenizer(checkpoint)?;
            let tf = encode_image(&tok, &cfg, &sha, image)?;
            let path = g.out.clone().unwrap_or_else(|| image.with_extension("ovqt"));
            tf.write(&path)?;
            println!("{} tokens={} grid={}x{}", path.display(), tf.indices.len(), tf.height, tf.width);
        }
        Command::Decode { checkpoint, tokens } => {
            let (tok, cfg, sha) = load_tokenizer(checkpoint)?;
            let tf = TokenFile::read(tokens)?;
            if tf.checkpoint_hex() != sha {
                return Err(Error::Data(format!(
                    "{} was encoded with checkpoint {}, not {sha}",
                    tokens.display(),
                    tf.checkpoint_hex()
                )));
            }
            if tf.codebook_size as usize != cfg.codebook_size || tf.latent_dim as usize != cfg.codec.latent_dim {
                return Err(Error::Data("token file header does not match the checkpoint".into()));
            }
            let path = g.out.clone().unwrap_or_else(|| tokens.with_extension("decoded.png"));
            write_single(&tok.decode(&tf.grid()?)?, &path)?;
            println!("{}", path.display());
        }
        Command::MakeSynthetic {
            count,
            test_count,
            spec,
            font,
        } => {
            let mut s = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    toml::from_str::<SynthFigureSpec>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SynthFigureSpec::default(),
            };
            if let Some(seed) = g.seed {
                s.seed = seed;
            }
            if font.is_some() {
                s.font = font.clone();
            }
            let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("corpus"));
            let train = generate_synthetic_corpus(&s, *count, Split::Train, &dir)?;
            println!("{}", train.display());
            if *test_count > 0 {
                println!("{}", generate_synthetic_corpus(&s, *test_count, Split::Test, &dir)?.display());
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("ocr-vqgan").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn overrides_reach_the_config() {
        let cli = parse(&["train", "--profile", "desk", "--override", "w_vgg=0.2", "--override", "w_ocr=0", "--seed", "4", "--out", "r"]);
        let c = resolve_config(&cli.global).unwrap();
        assert_eq!((c.w_vgg, c.w_ocr, c.seed), (0.2, 0.0, 4));
        assert_eq!(c.paths.output, PathBuf::from("r"));
        let cli = parse(&["train", "--override", "bogus=1"]);
        assert_eq!(resolve_config(&cli.global).unwrap_err().exit_code(), 2);
        let cli = parse(&["train", "--profile", "huge"]);
        assert!(resolve_config(&cli.global).is_err());
    }

    #[test]
    fn device_must_be_cpu() {
        assert!(check_device("cpu").is_ok());
        assert_eq!(check_device("cuda:0").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn reconstruction_lands_beside_input() {
        assert_eq!(reconstruction_path(Path::new("a/b.png"), None), PathBuf::from("a/b.recon.png"));
        assert_eq!(reconstruction_path(Path::new("a/b.png"), Some(Path::new("o"))), PathBuf::from("o/b.recon.png"));
    }
}

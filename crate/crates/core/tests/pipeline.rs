use std::path::{Path, PathBuf};
use std::process::Command;

use candle_core::DType;
use ocr_vqgan::data::synth::{generate_synthetic_corpus, SynthFigureSpec};
use ocr_vqgan::data::{CorpusManifest, Loader, LoaderMode, Split};
use ocr_vqgan::metrics::{evaluate, EvalOptions};
use ocr_vqgan::perceptual::{build_lpips, build_ocr_backbone, BackboneSource, OcrPerceptualLoss};
use ocr_vqgan::trainer::{fit, fit_with, load_tokenizer, TrainConfig, Trainer};

fn small_run(dir: &Path) -> (TrainConfig, PathBuf) {
    let spec = SynthFigureSpec::default();
    let train = generate_synthetic_corpus(&spec, 6, Split::Train, dir).unwrap();
    let test = generate_synthetic_corpus(&spec, 3, Split::Test, dir).unwrap();
    let mut c = TrainConfig::desk();
    c.image_size = 32;
    c.batch_size = 2;
    c.max_steps = Some(8);
    c.disc_start_step = 3;
    c.checkpoint_every = 4;
    c.backbones.vgg = BackboneSource::Random {
        seed: 1,
        width_divisor: 16,
    };
    c.backbones.ocr = BackboneSource::Random {
        seed: 2,
        width_divisor: 16,
    };
    c.paths.corpus = train;
    c.paths.output = dir.join("run");
    (c, test)
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = small_run(dir.path());
    let full = fit(&cfg).unwrap();
    let midpoint = cfg.paths.output.join("step_00000004.safetensors");
    assert!(midpoint.exists());
    assert!(cfg.paths.output.join("steps.jsonl").exists());
    assert!(cfg.paths.output.join("run.json").exists());

    let resumed = fit_with(Trainer::new(&cfg).unwrap(), Some(&midpoint)).unwrap();
    assert_eq!(resumed.reports, full.reports[4..]);
    assert_eq!(resumed.checkpoint_sha256, full.checkpoint_sha256);
    let log = std::fs::read_to_string(cfg.paths.output.join("steps.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8 + 4);
}

#[test]
fn evaluation_writes_report_and_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, test) = small_run(dir.path());
    let run = fit(&cfg).unwrap();
    let (tok, cfg, sha) = load_tokenizer(&run.final_checkpoint).unwrap();
    assert_eq!(sha, run.checkpoint_sha256);
    let lpips = build_lpips(&cfg.backbones.vgg, None, DType::F32).unwrap();
    let ocr = OcrPerceptualLoss::new(build_ocr_backbone(&cfg.backbones.ocr, None, DType::F32).unwrap());
    let loader = Loader::new(CorpusManifest::load(&test).unwrap(), 2, cfg.image_size, 0, LoaderMode::Eval).unwrap();
    let out = dir.path().join("eval");
    let options = EvalOptions {
        fid_input_size: 32,
        grid_pairs: 2,
    };
    let report = evaluate(&tok, &loader, &lpips, &ocr, &sha, &options, Some(&out)).unwrap();
    assert_eq!(report.n_samples, 3);
    assert!(report.lpips >= 0.0 && report.ocr_sim >= 0.0 && report.fid > -1e-6);
    for f in ["metrics.json", "metrics.md", "grid.png"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

fn exit_code(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_ocr-vqgan")).args(args).output().unwrap().status.code().unwrap()
}

#[test]
fn cli_exit_codes_follow_error_category() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.safetensors");
    let missing = missing.to_str().unwrap();
    assert_eq!(exit_code(&["train", "--override", "no_such_field=1"]), 2);
    assert_eq!(exit_code(&["train", "--device", "cuda"]), 2);
    assert_eq!(exit_code(&["encode", "--checkpoint", missing, "x.png"]), 5);

    let (cfg, _) = small_run(dir.path());
    let run = fit(&cfg).unwrap();
    let image = dir.path().join("images").join("test_00000.png");
    let tokens = dir.path().join("t.ovqt");
    let ckpt = run.final_checkpoint.to_str().unwrap();
    let args = ["encode", "--checkpoint", ckpt, image.to_str().unwrap(), "--out", tokens.to_str().unwrap()];
    assert_eq!(exit_code(&args), 0);
    // token files are bound to the checkpoint they were encoded with
    let mut bytes = std::fs::read(&tokens).unwrap();
    bytes[24] ^= 0xff;
    std::fs::write(&tokens, &bytes).unwrap();
    assert_eq!(exit_code(&["decode", "--checkpoint", ckpt, tokens.to_str().unwrap()]), 3);
}

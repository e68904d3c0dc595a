use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use textrec_augment::dataset::MANIFEST_NAME;
use textrec_augment::{build_dataset, build_ladder, AugmentOptions, BuildReport, Mode};
use textrec_core::ablation::{default_grid, grid_to_text, parse_grid, report_csv, run_grid};
use textrec_core::io::{Checkpoint, GrayImage, Manifest, ManifestEntry};
use textrec_core::recognizer::Recognizer;
use textrec_core::synth::{synth_corpus, SynthSpec};
use textrec_core::training::{evaluate, normalize, train as train_loop, LrSchedule};
use textrec_core::{Error, Result};

use crate::data::{load_config, load_image, load_labeled, load_model};
use crate::{AblateArgs, AugmentArgs, TrainArgs};

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), &a.overrides)?;
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    if let Some(seed) = a.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    let corpus = if a.synthetic {
        let spec = SynthSpec::new(&cfg.model.charset, cfg.model.img_h, cfg.model.img_w, &cfg.synth)?;
        synth_corpus(&spec)?
    } else {
        load_labeled(a.data.as_deref().expect("clap requires --data without --synthetic"))?
    };
    if !a.finetune {
        cfg.train.finetune_steps = 0;
    } else if cfg.train.finetune_steps == 0 {
        cfg.train.finetune_steps = 2 * corpus.len().div_ceil(cfg.train.batch.max(1));
    }
    let model = Recognizer::<f32>::new(&cfg.model)?;
    let data = corpus
        .iter()
        .map(|(img, label)| {
            let ids = model
                .vocab()
                .encode(&normalize(label))
                .map_err(|e| Error::Config(format!("label {label:?}: {e}")))?;
            Ok((img.clone(), ids))
        })
        .collect::<Result<Vec<_>>>()?;

    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let report = train_loop(&model, &data, &cfg.train, &mut log)?;
    let acc = evaluate(&model, &corpus, 1)?.accuracy;
    let total = cfg.train.steps + cfg.train.finetune_steps;
    let last_lr = if cfg.train.finetune_steps > 0 {
        cfg.train.finetune_lr
    } else {
        LrSchedule {
            d_model: if cfg.train.d_model == 0 { cfg.model.e_dim } else { cfg.train.d_model },
            warm_n: cfg.train.warmup,
            scale: cfg.train.lr_scale,
        }
        .at(total.max(1))?
    };
    writeln!(log, "{total},{last_lr:.6e},{:.6},{acc:.4}", report.final_loss).map_err(|e| Error::io(&log_path, e))?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    Checkpoint::from_model(&cfg.to_text(), &model).write(&a.out)?;
    println!("final_loss={:.6} train_accuracy={acc:.4}", report.final_loss);
    Ok(())
}

pub fn recognize(ckpt: &Path, image: &Path, beam: usize) -> Result<()> {
    let (_, model) = load_model(ckpt)?;
    let img = load_image(image)?;
    println!("{}", model.recognize(&img, beam)?);
    Ok(())
}

fn print_report(name: &str, report: &BuildReport) {
    for e in &report.errors {
        eprintln!("skipped {}: {}", e.rel, e.message);
    }
    println!(
        "{name}: {} images -> {}",
        report.manifest.entries.len(),
        report.manifest_path.display()
    );
}

pub fn augment(a: &AugmentArgs) -> Result<()> {
    let manifest = Manifest::read(&a.input)?;
    if a.ladder {
        for (name, report) in build_ladder(&manifest, &a.out, a.n_fiducial, a.seed)? {
            print_report(&name, &report);
        }
        return Ok(());
    }
    let mode: Mode = a.mode.as_deref().expect("clap requires --mode").parse()?;
    let opts = AugmentOptions {
        mode,
        intensity: a.intensity.expect("clap requires --intensity"),
        n: a.n_fiducial,
        seed: a.seed,
    };
    let report = build_dataset(&manifest, &a.out, &opts)?;
    print_report(&format!("{mode}{}", opts.intensity), &report);
    Ok(())
}

pub fn export_attention(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let (cfg, model) = load_model(ckpt)?;
    let img = load_image(image)?;
    let decoded = model.decode_greedy(&img)?;
    let (gh, gw) = (cfg.model.img_h / 8, cfg.model.img_w / 8);
    create_dir(out)?;
    let mut raw = String::new();
    for (k, step) in decoded.attention.iter().enumerate() {
        if step.visual.len() != gh * gw {
            return Err(Error::Config(
                "this model has no position-to-visual branch to visualise".into(),
            ));
        }
        let max = step.visual.iter().copied().fold(0.0f64, f64::max);
        let px = step
            .visual
            .iter()
            .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
            .collect();
        GrayImage::new(gw, gh, px)?.write(&out.join(format!("step_{:02}.pgm", k + 1)))?;
        let row: Vec<String> = step.visual.iter().map(|v| format!("{v:.8}")).collect();
        let _ = writeln!(raw, "{}", row.join(","));
    }
    write_file(&out.join("visual.csv"), raw)?;
    if let Some(last) = decoded.attention.last().filter(|s| !s.semantic.is_empty()) {
        let t = last.steps;
        let mut csv = String::new();
        for r in last.semantic.chunks(t) {
            let row: Vec<String> = r.iter().map(|v| format!("{v:.8}")).collect();
            let _ = writeln!(csv, "{}", row.join(","));
        }
        write_file(&out.join("affinity.csv"), csv)?;
    }
    println!("{}", decoded.text);
    Ok(())
}

pub fn eval(ckpt: &Path, data: &Path, beam: usize, verbose: bool) -> Result<()> {
    let (_, model) = load_model(ckpt)?;
    let samples = load_labeled(data)?;
    let report = evaluate(&model, &samples, beam)?;
    if verbose {
        for s in report.samples.iter().filter(|s| !s.correct) {
            eprintln!("{}\t{}", s.expected, s.predicted);
        }
    }
    println!("{:.4}", report.accuracy);
    Ok(())
}

pub fn sweep(ckpt: &Path, raw: &Path, ladder: &Path, beam: usize) -> Result<()> {
    let (_, model) = load_model(ckpt)?;
    let mut names = vec!["raw".to_string()];
    let mut paths = vec![raw.to_path_buf()];
    for mode in [Mode::Ha, Mode::Ca] {
        for s in 1..=6 {
            let name = format!("{mode}{s}");
            paths.push(ladder.join(&name).join(MANIFEST_NAME));
            names.push(name);
        }
    }
    let mut cells = Vec::with_capacity(paths.len());
    for p in &paths {
        cells.push(format!("{:.4}", evaluate(&model, &load_labeled(p)?, beam)?.accuracy));
    }
    println!("{}", names.join(","));
    println!("{}", cells.join(","));
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    if a.write_grid {
        return write_file(&a.out, grid_to_text(&default_grid()));
    }
    let mut base = load_config(a.config.as_deref(), &[])?;
    if let Some(steps) = a.steps {
        base.train.steps = steps;
    }
    let rows = match &a.grid {
        Some(p) => parse_grid(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => default_grid(),
    };
    let results = run_grid(&base, &rows, &mut std::io::stderr())?;
    write_file(&a.out, report_csv(&results))
}

pub fn synth(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config, &[])?;
    let spec = SynthSpec::new(&cfg.model.charset, cfg.model.img_h, cfg.model.img_w, &cfg.synth)?;
    create_dir(out)?;
    let mut manifest = Manifest {
        root: out.to_path_buf(),
        entries: Vec::new(),
    };
    for (i, (img, label)) in synth_corpus(&spec)?.iter().enumerate() {
        let rel = format!("{i:05}.pgm");
        GrayImage::from_text_image(img).write(&out.join(&rel))?;
        manifest.entries.push(ManifestEntry {
            rel,
            label: label.clone(),
        });
    }
    manifest.write(&out.join(MANIFEST_NAME))?;
    println!("{} samples -> {}", manifest.entries.len(), out.join(MANIFEST_NAME).display());
    Ok(())
}

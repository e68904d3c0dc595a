//! Trains the desk configuration on the synthetic corpus and reports accuracy.

use std::time::Instant;

use textrec_core::config::Config;
use textrec_core::recognizer::Recognizer;
use textrec_core::synth::{synth_corpus, SynthSpec};
use textrec_core::training::{evaluate, train};

fn main() -> textrec_core::Result<()> {
    let mut cfg = Config::default();
    for arg in std::env::args().skip(1) {
        if let Some((k, v)) = arg.split_once('=') {
            cfg.set(k, v)?;
        }
    }
    let spec = SynthSpec::new(&cfg.model.charset, cfg.model.img_h, cfg.model.img_w, &cfg.synth)?;
    let corpus = synth_corpus(&spec)?;
    let model = Recognizer::<f32>::new(&cfg.model)?;
    let data: Vec<_> = corpus
        .iter()
        .map(|(img, label)| Ok((img.clone(), model.vocab().encode(label)?)))
        .collect::<textrec_core::Result<_>>()?;
    let start = Instant::now();
    let report = train(&model, &data, &cfg.train, &mut std::io::stdout())?;
    println!("trained in {:.1?}, final loss {:.5}", start.elapsed(), report.final_loss);
    let greedy = evaluate(&model, &corpus, 1)?;
    println!("greedy accuracy {:.4}", greedy.accuracy);
    for s in greedy.samples.iter().filter(|s| !s.correct) {
        println!("  {} -> {}", s.expected, s.predicted);
    }
    let beam = evaluate(&model, &corpus, cfg.train.beam)?;
    println!("beam accuracy {:.4} ({:.1?} total)", beam.accuracy, start.elapsed());
    Ok(())
}

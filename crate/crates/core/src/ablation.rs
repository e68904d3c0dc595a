//! Decoder-variant sweeps on the synthetic corpus.
//!
//! A grid is plain text, one variant per line:
//!
//! ```text
//! # group name key=value ...
//! variants line01 model.sae=none model.cbi=p_v,p_s model.fusion=dsf
//! ```
//!
//! Every key is an ordinary config key applied on top of a shared base.

use std::fmt::Write as _;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::recognizer::Recognizer;
use crate::synth::{synth_corpus, SynthSpec};
use crate::training::{evaluate, train};

/// Written into every report row; these runs are far too small to compare
/// with published benchmark numbers.
pub const NOT_COMPARABLE: &str = "desk-scale, not comparable";

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub group: String,
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl GridRow {
    fn new(group: &str, name: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            group: group.into(),
            name: name.into(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn apply(&self, base: &Config) -> Result<Config> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("grid row {}: {e}", self.name)))?;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }
}

/// SAE placement, cross-branch wiring and fusion variants (14 rows), then
/// decoder depths 1 to 4.
pub fn default_grid() -> Vec<GridRow> {
    let both = "p_s,p_v";
    let t1: [(&str, &str, &str); 14] = [
        ("none", both, "dsf"),
        ("sem", both, "dsf"),
        ("vis", both, "dsf"),
        ("sem,vis", both, "dsf"),
        ("sem,vis,pos", both, "dsf"),
        ("pos", "p_v", "dsf"),
        ("pos", "s_v", "dsf"),
        ("pos", "s_v,p_s", "dsf"),
        ("pos", "s_v,p_v", "dsf"),
        ("pos", "p_v,s_p", "dsf"),
        ("pos", both, "add"),
        ("pos", both, "dot"),
        ("pos", both, "dsf_unshared"),
        ("pos", both, "dsf"),
    ];
    let mut rows: Vec<GridRow> = t1
        .iter()
        .enumerate()
        .map(|(i, (sae, cbi, fusion))| {
            GridRow::new(
                "variants",
                &format!("line{:02}", i + 1),
                &[("model.sae", sae), ("model.cbi", cbi), ("model.fusion", fusion)],
            )
        })
        .collect();
    for layers in 1..=4 {
        let l = layers.to_string();
        rows.push(GridRow::new(
            "depth",
            &format!("layers{layers}"),
            &[("model.mdcdp_layers", l.as_str())],
        ));
    }
    rows
}

pub fn parse_grid(text: &str) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(group), Some(name)) = (parts.next(), parts.next()) else {
            return Err(Error::Config(format!("grid line {}: expected `group name key=value...`", i + 1)));
        };
        let overrides = parts
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Config(format!("grid line {}: bad toggle {kv:?}", i + 1)))
            })
            .collect::<Result<_>>()?;
        rows.push(GridRow {
            group: group.into(),
            name: name.into(),
            overrides,
        });
    }
    if rows.is_empty() {
        return Err(Error::Config("grid has no rows".into()));
    }
    Ok(rows)
}

pub fn grid_to_text(rows: &[GridRow]) -> String {
    let mut out = String::from("# group name key=value ...\n");
    for r in rows {
        let _ = write!(out, "{} {}", r.group, r.name);
        for (k, v) in &r.overrides {
            let _ = write!(out, " {k}={v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub group: String,
    pub name: String,
    pub sae: String,
    pub cbi: String,
    pub fusion: String,
    pub layers: usize,
    pub params: usize,
    pub final_loss: f64,
    pub accuracy: f64,
}

/// Trains and evaluates every row with the base seeds and step budget.
/// Rows are validated up front so a bad toggle fails before any training.
pub fn run_grid(base: &Config, rows: &[GridRow], progress: &mut dyn std::io::Write) -> Result<Vec<AblationResult>> {
    let configs = rows.iter().map(|r| r.apply(base)).collect::<Result<Vec<_>>>()?;
    let spec = SynthSpec::new(&base.model.charset, base.model.img_h, base.model.img_w, &base.synth)?;
    let corpus = synth_corpus(&spec)?;
    let mut results = Vec::with_capacity(rows.len());
    for (row, cfg) in rows.iter().zip(configs) {
        let model = Recognizer::<f32>::new(&cfg.model)?;
        let data = corpus
            .iter()
            .map(|(img, label)| Ok((img.clone(), model.vocab().encode(label)?)))
            .collect::<Result<Vec<_>>>()?;
        let report = train(&model, &data, &cfg.train, &mut std::io::sink())?;
        let eval = evaluate(&model, &corpus, 1)?;
        let v = &cfg.model.variant;
        let result = AblationResult {
            group: row.group.clone(),
            name: row.name.clone(),
            sae: v.sae_list(),
            cbi: v.branches.iter().map(|b| b.name()).collect::<Vec<_>>().join("+"),
            fusion: v.fusion.name().into(),
            layers: cfg.model.mdcdp_layers,
            params: model.params().num_scalars(),
            final_loss: report.final_loss,
            accuracy: eval.accuracy,
        };
        writeln!(
            progress,
            "{} {}: loss {:.4}, accuracy {:.4}",
            result.group, result.name, result.final_loss, result.accuracy
        )
        .map_err(|e| Error::io("progress", e))?;
        results.push(result);
    }
    Ok(results)
}

pub fn report_csv(results: &[AblationResult]) -> String {
    let mut out = format!("# {NOT_COMPARABLE}: synthetic corpus, tiny model, short budget\n");
    out.push_str("group,name,sae,cbi,fusion,layers,params,final_loss,accuracy,note\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6},{:.4},\"{}\"",
            r.group,
            r.name,
            r.sae.replace(',', "+"),
            r.cbi,
            r.fusion,
            r.layers,
            r.params,
            r.final_loss,
            r.accuracy,
            NOT_COMPARABLE
        );
    }
    out
}

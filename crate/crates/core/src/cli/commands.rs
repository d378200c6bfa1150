use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{RunConfig, Split};
use super::report_io;
use crate::analysis::spectrum::default_bins;
use crate::analysis::{cka_heatmap, layerwise_spectra_pooled, CkaMatrix};
use crate::error::{Error, Result};
use crate::io::{load_checkpoint, read_pyramid, read_tensor, save_checkpoint, Dataset, SceneSample};
use crate::pyramid::FeaturePyramid;
use crate::tensor::Tensor;
use crate::train::{self, data_dims, eval_miou, restore, substitution_test, DecoderInput};

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn required(p: &Option<String>, flag: &str) -> Result<PathBuf> {
    let p = p
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{flag} is required")))?;
    let path = PathBuf::from(p);
    if !path.exists() {
        return Err(Error::Validation(format!("{flag} {} does not exist", path.display())));
    }
    Ok(path)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = PathBuf::from(cfg.paths.out.as_ref().ok_or_else(|| Error::Config("--out is required".into()))?);
    fs::create_dir_all(&out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    Ok(out)
}

fn write_run_config(out: &Path, cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    write_file(&out.join("run_config.json"), &cfg.to_json()?)?;
    writeln!(stdout, "config fingerprint {}", cfg.fingerprint).map_err(report_io)
}

fn pretty<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn split_of<'a>(data: &'a Dataset, split: &Split) -> &'a [SceneSample] {
    match split {
        Split::Train => &data.train,
        Split::Eval => &data.eval,
    }
}

/// Entries `Dataset::save` writes, plus the echoed config.
const DATASET_ENTRIES: [&str; 5] = ["manifest.json", "text_bank.stns", "train", "eval", "run_config.json"];

pub fn gen(cfg: RunConfig, force: bool, stdout: &mut dyn Write) -> Result<()> {
    let out = PathBuf::from(cfg.paths.out.clone().unwrap_or_default());
    let non_empty = fs::read_dir(&out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !force {
            return Err(Error::Validation(format!(
                "{} is not empty; pass --force to replace its dataset",
                out.display()
            )));
        }
        for name in DATASET_ENTRIES {
            let p = out.join(name);
            let removed = if p.is_dir() { fs::remove_dir_all(&p) } else if p.exists() { fs::remove_file(&p) } else { Ok(()) };
            removed.map_err(|e| Error::io(format!("removing {}", p.display()), e))?;
        }
    }
    let data = Dataset::generate(&cfg.synthetic, cfg.gen.scenes, cfg.gen.eval_scenes)?;
    let out = out_dir(&cfg)?;
    data.save(&out)?;
    write_run_config(&out, &cfg, stdout)?;
    writeln!(
        stdout,
        "wrote {} train and {} eval scenes to {}",
        data.train.len(),
        data.eval.len(),
        out.display()
    )
    .map_err(report_io)
}

#[derive(Serialize)]
struct TrainSummary {
    fingerprint: String,
    steps: usize,
    train_miou: f64,
    eval_miou: Option<f64>,
    final_loss: f64,
}

pub fn train(mut cfg: RunConfig, threads: usize, stdout: &mut dyn Write) -> Result<()> {
    let data_path = required(&cfg.paths.data, "--data")?;
    if threads == 0 {
        return Err(Error::Validation("--threads must be >= 1".into()));
    }
    cfg.train.threads = threads;
    cfg.train.validate()?;
    let data = Dataset::load(&data_path)?;
    let out = out_dir(&cfg)?;
    write_run_config(&out, &cfg, stdout)?;

    let trained = train::train(&cfg.train, &data, Some(&out))?;
    save_checkpoint(out.join("checkpoint"), &trained.checkpoint)?;
    write_file(&out.join("metrics.jsonl"), &trained.report.to_jsonl()?)?;
    let mut epochs = String::new();
    for e in &trained.report.epochs {
        epochs.push_str(&serde_json::to_string(e)?);
        epochs.push('\n');
    }
    write_file(&out.join("epochs.jsonl"), &epochs)?;

    let train_miou = eval_miou(&data.train, &trained.model, &data.bank, &cfg.train, DecoderInput::Encoded)?.miou;
    let summary = TrainSummary {
        fingerprint: cfg.fingerprint.clone(),
        steps: trained.report.steps.len(),
        train_miou,
        eval_miou: trained.report.epochs.last().and_then(|e| e.eval_miou),
        final_loss: trained.report.epochs.last().map_or(f64::NAN, |e| e.total),
    };
    write_file(&out.join("summary.json"), &pretty(&summary)?)?;
    writeln!(stdout, "train mIoU {:.4}", summary.train_miou).map_err(report_io)?;
    if let Some(m) = summary.eval_miou {
        writeln!(stdout, "eval mIoU {m:.4}").map_err(report_io)?;
    }
    Ok(())
}

pub fn eval(mut cfg: RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let ckpt_path = required(&cfg.paths.checkpoint, "--checkpoint")?;
    let data_path = required(&cfg.paths.data, "--data")?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let (train_cfg, model_cfg, model) = restore(&ckpt)?;
    let data = Dataset::load(&data_path)?;
    let samples = split_of(&data, &cfg.eval.split);
    let first = samples
        .first()
        .ok_or_else(|| Error::Validation(format!("the {:?} split is empty", cfg.eval.split)))?;
    let dims = data_dims(first, &data.bank)?;
    let expected = (model_cfg.channels, model_cfg.teacher_channels, model_cfg.embed_dim);
    if dims != expected {
        return Err(Error::Config(format!(
            "checkpoint expects (channels, teacher channels, embedding dim) = {expected:?}, data has {dims:?}"
        )));
    }
    // The model is scored with the settings it was trained under.
    cfg.train = train_cfg;
    cfg.fingerprint = cfg.compute_fingerprint()?;
    let out = out_dir(&cfg)?;
    write_run_config(&out, &cfg, stdout)?;

    let report = eval_miou(samples, &model, &data.bank, &cfg.train, DecoderInput::Encoded)?;
    write_file(&out.join("miou.csv"), &report.to_csv(data.bank.names()))?;
    writeln!(stdout, "mIoU {:.4}", report.miou).map_err(report_io)?;
    if cfg.eval.substitution {
        let sub = substitution_test(samples, &model, &data.bank, &cfg.train)?;
        write_file(&out.join("substitution.json"), &pretty(&sub)?)?;
        writeln!(
            stdout,
            "substitution: encoded {:.4}, teacher {:.4}, delta {:.4}",
            sub.miou_encoded, sub.miou_teacher, sub.delta
        )
        .map_err(report_io)?;
    }
    Ok(())
}

/// Places `[C, H, W]` maps side by side along the width.
fn concat_width(maps: &[&Tensor]) -> Result<Tensor> {
    let (c, h, _) = maps[0].chw("concat_width")?;
    let mut widths = Vec::with_capacity(maps.len());
    for m in maps {
        let (mc, mh, mw) = m.chw("concat_width")?;
        if (mc, mh) != (c, h) {
            return Err(Error::Dimension {
                op: "concat_width",
                axis: "channels x height",
                expected: c * h,
                got: mc * mh,
            });
        }
        widths.push(mw);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(c * h * total);
    for ch in 0..c {
        for y in 0..h {
            for (m, &w) in maps.iter().zip(&widths) {
                let start = (ch * h + y) * w;
                data.extend_from_slice(&m.data()[start..start + w]);
            }
        }
    }
    Tensor::new(&[c, h, total], data)
}

fn layer_name(l: usize) -> String {
    format!("layer_{l:02}")
}

pub fn analyze(cfg: RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let (pyramids, teachers): (Vec<FeaturePyramid>, Vec<Tensor>) = match (&cfg.paths.data, &cfg.paths.features) {
        (Some(_), _) => {
            let data = Dataset::load(required(&cfg.paths.data, "--data")?)?;
            let samples = split_of(&data, &cfg.analyze.split);
            if samples.is_empty() {
                return Err(Error::Validation(format!("the {:?} split is empty", cfg.analyze.split)));
            }
            samples.iter().map(|s| (s.pyramid.clone(), s.teacher.clone())).unzip()
        }
        (None, Some(_)) => {
            let dir = required(&cfg.paths.features, "--features")?;
            let pyramid = read_pyramid(&dir)?;
            let teacher_path = dir.join("teacher.stns");
            let teachers = if teacher_path.exists() { vec![read_tensor(&teacher_path)?] } else { vec![] };
            (vec![pyramid], teachers)
        }
        (None, None) => return Err(Error::Config("analyze needs --data or --features".into())),
    };
    let (_, h, w) = pyramids[0].dims()?;
    let bins = cfg.analyze.bins.unwrap_or_else(|| default_bins(h, w));
    let out = out_dir(&cfg)?;
    write_run_config(&out, &cfg, stdout)?;

    let spectra = layerwise_spectra_pooled(&pyramids, bins, cfg.analyze.r_c)?;
    write_file(&out.join("spectra.json"), &(spectra.to_json()? + "\n"))?;
    write_file(&out.join("spectra.csv"), &spectra.to_csv())?;

    let layers = pyramids[0].layer_ids();
    let mut pooled = Vec::with_capacity(layers.len());
    for &l in &layers {
        let maps = pyramids.iter().map(|p| p.get(l)).collect::<Result<Vec<_>>>()?;
        pooled.push(concat_width(&maps)?);
    }
    let names: Vec<String> = layers.iter().map(|&l| layer_name(l)).collect();
    let mut cols = names.clone();
    let mut targets = pooled.clone();
    if !teachers.is_empty() {
        cols.push("teacher".into());
        targets.push(concat_width(&teachers.iter().collect::<Vec<_>>())?);
    }
    let cka = CkaMatrix {
        rows: names,
        cols,
        matrix: cka_heatmap(&pooled, &targets)?,
    };
    write_file(&out.join("cka.json"), &(cka.to_json()? + "\n"))?;
    write_file(&out.join("cka.csv"), &cka.to_csv())?;

    for (l, r) in spectra.ratios() {
        writeln!(stdout, "{} ratio {r:.6}", layer_name(l)).map_err(report_io)?;
    }
    writeln!(stdout, "monotone {}", spectra.monotone).map_err(report_io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_width_interleaves_rows() {
        let a = Tensor::new(&[1, 2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[1, 2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = concat_width(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[1, 2, 3]);
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }
}

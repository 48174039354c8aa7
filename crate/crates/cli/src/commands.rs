use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, Luma, Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use microattn::data::{derive_seed, image_to_tensor, load_manifest, synth_dataset, Manifest, SynthConfig};
use microattn::experiment::{run_experiment, ExperimentConfig, Pretraining, Protocol};
use microattn::model::{param_grad_check, LoadMode};
use microattn::tensor::{GradCheck, OpKind, DEFAULT_EPS};
use microattn::training::{transfer_pipeline, Stage, StageInit, StagePreset};
use microattn::{InputShape, Model, NetworkSpec, Tensor};

use crate::config::{invalid, RunConfig};

/// Worst relative error a parameter may show in `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

struct NetworkDefaults {
    size: usize,
    stem_pool: usize,
    depth: usize,
    width: usize,
}

const DESK: NetworkDefaults = NetworkDefaults { size: 8, stem_pool: 1, depth: 2, width: 4 };
const TRAIN: NetworkDefaults = NetworkDefaults { size: 32, stem_pool: 1, depth: microattn::model::DEFAULT_DEPTH, width: 8 };

fn network_spec(cfg: &RunConfig, d: NetworkDefaults, classes: usize, attention: bool) -> Result<NetworkSpec> {
    let size = cfg.get_or("size", d.size)?;
    let input = InputShape { channels: 3, height: size, width: size };
    let mut spec = NetworkSpec::uniform(input, cfg.get_or("stem_pool", d.stem_pool)?, cfg.get_or("depth", d.depth)?, cfg.get_or("width", d.width)?, classes);
    spec.attention = attention;
    spec.validate()?;
    Ok(spec)
}

fn image_size(spec: &NetworkSpec) -> u32 {
    spec.input.height as u32
}

/// Named preset with the flag/config overrides under `prefix`.
fn preset(cfg: &RunConfig, name: &str, prefix: &str, size: u32) -> Result<StagePreset> {
    let mut p = StagePreset::by_name(name)?.for_input(size);
    let key = |k: &str| format!("{prefix}{k}");
    if let Some(v) = cfg.get(&key("epochs"))? {
        p.epochs = v;
    }
    if let Some(v) = cfg.get(&key("lr"))? {
        p.lr0 = v;
    }
    if let Some(v) = cfg.get(&key("batch"))? {
        p.batch_size = v;
    }
    if let Some(v) = cfg.get(&key("weight_decay"))? {
        p.weight_decay = v;
    }
    if let Some(v) = cfg.get(&key("grad_clip"))? {
        p.grad_clip = Some(v);
    }
    if prefix.is_empty() {
        if let Some(v) = cfg.get("momentum")? {
            p.momentum = v;
        }
        if let Some(v) = cfg.get("step")? {
            p.step_epochs = v;
        }
    }
    p.validate()?;
    Ok(p)
}

fn load(path: &Path) -> Result<Manifest> {
    load_manifest(path).with_context(|| format!("manifest {}", path.display()))
}

/// Re-indexes `m` onto `names`, which must hold the same classes.
fn align_classes(m: &mut Manifest, names: &[String]) -> Result<()> {
    let mut a = m.class_names.clone();
    let mut b = names.to_vec();
    a.sort();
    b.sort();
    if a != b {
        return Err(invalid(format!("class sets differ: {:?} vs {:?}", m.class_names, names)));
    }
    m.class_names = names.to_vec();
    Ok(())
}

fn write_classes(dir: &Path, names: &[String]) -> Result<()> {
    fs::write(dir.join("classes.txt"), names.join("\n") + "\n")?;
    Ok(())
}

pub fn format_gradcheck(table: &[(String, GradCheck)]) -> String {
    let mut out = String::from("parameter\tmax_rel_error\tanalytic\tnumeric\n");
    for (name, c) in table {
        out.push_str(&format!("{name}\t{:.3e}\t{:.6e}\t{:.6e}\n", c.max_rel_error, c.analytic, c.numeric));
    }
    out
}

/// Fails naming the worst parameter when any error reaches the tolerance.
/// An empty table passes.
pub fn gradcheck_verdict(table: &[(String, GradCheck)]) -> Result<()> {
    let worst = table.iter().max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error));
    match worst {
        Some((name, c)) if c.max_rel_error >= GRADCHECK_TOLERANCE || c.max_rel_error.is_nan() => bail!(
            "gradient check failed: worst parameter `{name}` has relative error {:.3e} (analytic {:.6e}, numeric {:.6e}) at element {:?}",
            c.max_rel_error,
            c.analytic,
            c.numeric,
            c.worst_index
        ),
        _ => Ok(()),
    }
}

pub fn gradcheck(cfg: &RunConfig, fault: Option<&str>) -> Result<()> {
    let fault = fault
        .map(|name| OpKind::from_name(name).ok_or_else(|| invalid(format!("unknown op `{name}`"))))
        .transpose()?;
    let spec = network_spec(cfg, DESK, cfg.get_or("classes", 5)?, cfg.get_or("attention", true)?)?;
    let seed = cfg.seed()?;
    let mut model = Model::build(&spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 1]));
    model.randomize_attention(0.5, &mut rng)?;
    let InputShape { channels, height, width } = spec.input;
    let x = Tensor::uniform(&[2, channels, height, width], -1.0, 1.0, &mut rng)?;
    let labels: Vec<usize> = (0..2).map(|i| i % spec.num_classes).collect();

    let table = param_grad_check(&model, &x, &labels, DEFAULT_EPS, fault)?;
    let text = format_gradcheck(&table);
    print!("{text}");
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    fs::write(out.join("gradcheck.tsv"), &text)?;
    gradcheck_verdict(&table)
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let size: u32 = cfg.get_or("size", 32)?;
    let sc = SynthConfig {
        database: cfg.raw("synth.database").unwrap_or("synth").to_string(),
        ..SynthConfig::new(
            cfg.get_or("synth.classes", 5)?,
            cfg.get_or("synth.subjects", 6)?,
            cfg.get_or("synth.per_subject", 4)?,
            size,
            cfg.seed()?,
        )
    };
    let manifest = synth_dataset(&sc)?;
    let out = cfg.out_dir();
    fs::create_dir_all(out.join("images"))?;
    let mut names = Vec::with_capacity(manifest.len());
    for (i, img) in manifest.load_images()?.iter().enumerate() {
        let name = format!("images/{i:05}.png");
        img.save(out.join(&name)).with_context(|| format!("writing {name}"))?;
        names.push(name);
    }
    let path = out.join("manifest.csv");
    manifest.write_csv(&path, &names)?;
    println!(
        "wrote {} samples ({} subjects, {} classes) to {}",
        manifest.len(),
        manifest.subjects().len(),
        manifest.class_names.len(),
        path.display()
    );
    Ok(())
}

fn init_from(path: PathBuf, spec: &NetworkSpec) -> Result<StageInit> {
    let stored = Model::from_bytes(&fs::read(&path).with_context(|| format!("checkpoint {}", path.display()))?)?;
    let mode = if spec.attention && !stored.spec().attention { LoadMode::Upgrade } else { LoadMode::Exact };
    Ok(StageInit::Checkpoint(path, mode))
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let manifest_path = cfg.existing_path("manifest")?.ok_or_else(|| invalid("`manifest` is required"))?;
    let manifest = load(&manifest_path)?;
    let val = cfg.existing_path("val_manifest")?.map(|p| load(&p)).transpose()?;
    let val = match val {
        Some(mut v) => {
            align_classes(&mut v, &manifest.class_names)?;
            Some(v)
        }
        None => None,
    };
    let name = cfg.raw("preset").unwrap_or("pretrain").to_string();
    let attention = cfg.get_or("attention", name != "pretrain")?;
    let spec = network_spec(cfg, TRAIN, manifest.class_names.len(), attention)?;
    let preset = preset(cfg, &name, "", image_size(&spec))?;
    let init = match cfg.existing_path("init")? {
        Some(p) => init_from(p, &spec)?,
        None => StageInit::Fresh,
    };
    let out = cfg.out_dir();
    let stage = Stage { name, init, spec, train: &manifest, val: val.as_ref(), preset, seed: cfg.seed()? };
    let result = transfer_pipeline(&[stage], &out)?;
    write_classes(&out, &manifest.class_names)?;
    let log = &result.logs[0];
    println!("final train loss: {}", log.final_loss().map_or("-".into(), |l| l.to_string()));
    if let Some(acc) = log.epochs.last().and_then(|r| r.val_accuracy) {
        println!("final val accuracy: {acc}");
    }
    for p in &result.checkpoints {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

fn protocol(cfg: &RunConfig, manifest: &Manifest) -> Result<Protocol> {
    match cfg.raw("protocol") {
        None => Err(invalid("`protocol` is required (hde, cde or loso)")),
        Some("cde") => Ok(Protocol::Cde),
        Some("loso") => Ok(Protocol::Loso),
        Some("hde") => {
            let mut dbs: Vec<String> = Vec::new();
            for s in &manifest.samples {
                if !dbs.contains(&s.database) {
                    dbs.push(s.database.clone());
                }
            }
            let pick = |key: &str, i: usize| -> Result<String> {
                match cfg.raw(key) {
                    Some(v) => Ok(v.to_string()),
                    None => dbs.get(i).cloned().ok_or_else(|| {
                        invalid(format!("hde needs two databases but the manifest only has {dbs:?}; set `db_a` and `db_b`"))
                    }),
                }
            };
            Ok(Protocol::Hde { db_a: pick("db_a", 0)?, db_b: pick("db_b", 1)? })
        }
        Some(other) => Err(invalid(format!("unknown protocol `{other}`, expected hde, cde or loso"))),
    }
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let paths = cfg.existing_paths("manifest")?;
    if paths.is_empty() {
        return Err(invalid("`manifest` is required"));
    }
    let mut parts = paths.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let names = parts[0].class_names.clone();
    for m in &mut parts {
        align_classes(m, &names)?;
    }
    let manifest = Manifest::pool(&parts)?;
    let protocol = protocol(cfg, &manifest)?;
    let spec = network_spec(cfg, TRAIN, names.len(), true)?;
    let size = image_size(&spec);
    let finetune = preset(cfg, protocol.name(), "", size)?;

    let pre_manifest = match cfg.existing_path("pretrain_manifest")? {
        Some(p) => {
            let mut m = load(&p)?;
            align_classes(&mut m, &names)?;
            Some(m)
        }
        None => None,
    };
    let pretrain = match &pre_manifest {
        Some(m) => Some(Pretraining { train: m, preset: preset(cfg, "pretrain", "pretrain_", size)? }),
        None => None,
    };
    let ecfg = ExperimentConfig { spec, pretrain, init_checkpoint: cfg.existing_path("init")?, finetune, seed: cfg.seed()? };
    let out = cfg.out_dir();
    let result = run_experiment(&protocol, &manifest, &ecfg, &out)?;
    write_classes(&out, &names)?;
    let m = &result.report.metrics;
    println!("protocol: {}", result.report.protocol);
    println!("folds: {}", result.report.folds.len());
    println!("war: {:.4}  uar: {:.4}  macro_f1: {:.4}", m.war, m.uar, m.macro_f1);
    for n in &result.report.notes {
        println!("note: {n}");
    }
    println!("report: {}", out.join("report.txt").display());
    Ok(())
}

/// Min-max normalisation to `0..=255`; a constant map becomes all zeros.
pub fn normalize_map(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![0; values.len()];
    }
    values.iter().map(|&v| (255.0 * (v - lo) / (hi - lo)).round() as u8).collect()
}

/// Blends a `mw`×`mh` gray map, upsampled by nearest neighbour, onto `img`
/// at 50% opacity.
pub fn overlay(img: &RgbImage, map: &[u8], mw: usize, mh: usize) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let (mx, my) = (x as usize * mw / w, y as usize * mh / h);
        let g = map[my * mw + mx] as u16;
        let p = img.get_pixel(x, y).0;
        Rgb(p.map(|c| (c as u16 + g).div_ceil(2) as u8))
    })
}

/// Binary P5 or P6 file.
fn write_pnm(path: &Path, raw: &[u8], w: u32, h: u32, subtype: PnmSubtype) -> Result<()> {
    let color = match subtype {
        PnmSubtype::Graymap(_) => ExtendedColorType::L8,
        _ => ExtendedColorType::Rgb8,
    };
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf).with_subtype(subtype).write_image(raw, w, h, color)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

pub fn visualize(cfg: &RunConfig) -> Result<()> {
    let ckpt = cfg.existing_path("checkpoint")?.ok_or_else(|| invalid("`checkpoint` is required"))?;
    let image_path = cfg.existing_path("image")?.ok_or_else(|| invalid("`image` is required"))?;
    let model = Model::from_bytes(&fs::read(&ckpt)?)?;
    let img = image::open(&image_path)
        .map_err(|e| microattn::Error::Image { path: image_path.clone(), message: e.to_string() })?
        .to_rgb8();
    let readout = model.readout(&image_to_tensor(&img))?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;

    let mut last = (vec![0u8], 1, 1);
    for (i, map) in readout.maps.iter().enumerate() {
        let [_, _, h, w] = map.dims4()?;
        let gray = normalize_map(map.data());
        let path = out.join(format!("map_block{:02}.pgm", i + 1));
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([gray[y as usize * w + x as usize]]));
        write_pnm(&path, img.as_raw(), img.width(), img.height(), PnmSubtype::Graymap(SampleEncoding::Binary))?;
        last = (gray, w, h);
    }
    let (gray, mw, mh) = last;
    let blend = overlay(&img, &gray, mw, mh);
    write_pnm(&out.join("overlay.ppm"), blend.as_raw(), blend.width(), blend.height(), PnmSubtype::Pixmap(SampleEncoding::Binary))?;

    let class = readout.logits.argmax_rows()?[0];
    // nearest classes.txt at or above the checkpoint; eval runs keep one at the run root
    let names = ckpt.ancestors().skip(1).find_map(|d| fs::read_to_string(d.join("classes.txt")).ok());
    match names.as_deref().and_then(|n| n.lines().nth(class)) {
        Some(name) => println!("predicted class: {class} ({name})"),
        None => println!("predicted class: {class}"),
    }
    println!("wrote {} attention maps and overlay.ppm to {}", readout.maps.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalisation_conventions() {
        assert_eq!(normalize_map(&[0.0, 0.0, 0.0]), [0, 0, 0]);
        assert_eq!(normalize_map(&[2.5; 4]), [0; 4]);
        assert_eq!(normalize_map(&[-1.0, 0.0, 1.0]), [0, 128, 255]);
    }

    #[test]
    fn overlay_upsamples_and_blends() {
        let img = RgbImage::from_pixel(4, 4, Rgb([100, 0, 255]));
        let o = overlay(&img, &[0, 255, 10, 20], 2, 2);
        assert_eq!(o.get_pixel(0, 0).0, [50, 0, 128]);
        assert_eq!(o.get_pixel(3, 1).0, [178, 128, 255]);
        assert_eq!(o.get_pixel(1, 3).0, [55, 5, 133]);
    }

    #[test]
    fn empty_table_passes_and_worst_is_named() {
        assert!(gradcheck_verdict(&[]).is_ok());
        let ok = GradCheck { max_rel_error: 1e-7, worst_index: Some(0), analytic: 1.0, numeric: 1.0 };
        let bad = GradCheck { max_rel_error: 2.0, worst_index: Some(3), analytic: 1.0, numeric: -1.0 };
        assert!(gradcheck_verdict(&[("a".into(), ok)]).is_ok());
        let err = gradcheck_verdict(&[("a".into(), ok), ("block2.conv1_w".into(), bad)]).unwrap_err();
        assert!(err.to_string().contains("block2.conv1_w"));
        let nan = GradCheck { max_rel_error: f64::NAN, ..ok };
        assert!(gradcheck_verdict(&[("n".into(), nan)]).is_err());
    }
}

//! The processing stages. Each reads the products of the stage before it,
//! refuses to run when they are missing or stale, and records its own
//! products in a provenance file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use photovol::eval::{
    dice_label_volumes, hard_volumes, resample_labels_nearest, structure_volumes, LabelVolume,
};
use photovol::image::{Image, Mask};
use photovol::preprocess::{
    build_stack, calibrate_photo, extract_mask, CalibratedPhoto, LandmarkFit, SeedClick,
    SliceStack, StackDirection,
};
use photovol::reconstruct::{
    optimize_reconstruction, render_reconstruction, ReferenceMode, ReferenceVolume, StageReport,
    TransformSet,
};
use photovol::segment::{
    segment_volume, AtlasPrior, GmmParams, LabelInfo, TraceEntry, DEFAULT_CONTROL_SPACING,
};
use photovol::Volume;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case::{to_json, Case, StageName};
use crate::config::Config;
use crate::error::{self, PipelineError, Result};
use crate::imageio::{read_mask, read_photo, write_mask, write_rgb16};
use crate::nifti::{read_volume, write_volume, Nifti};

pub const CALIBRATION: &str = "calibration.json";
pub const STACK_META: &str = "stack.json";
pub const TRANSFORMS: &str = "transforms.json";
pub const PARAMS: &str = "params.json";
pub const ATLAS_LABELS: &str = "labels.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    /// Calibrated image, relative to `calibrated/`.
    pub file: String,
    pub fit: LandmarkFit,
    pub origin_mm: [f64; 2],
    pub pixel_size_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackMeta {
    /// Photo names in stored (anatomical) order.
    pub photos: Vec<String>,
    pub thickness_mm: f64,
    pub pixel_size_mm: f64,
    pub direction: StackDirection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformsFile {
    pub photos: Vec<String>,
    pub reference: ReferenceMode,
    pub transforms: TransformSet,
    pub stages: Vec<StageReport>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegParams {
    pub labels: Vec<LabelInfo>,
    pub gmm: GmmParams,
    pub field: photovol::segment::BrightnessModel,
    pub deformation: photovol::segment::DeformationState,
    pub trace: Vec<TraceEntry>,
    pub warnings: Vec<String>,
    pub zero_mass: usize,
}

/// Files written by one stage, relative to nothing in particular.
#[derive(Debug, Clone, Default)]
pub struct StageOutput {
    pub products: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn stem(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string())
}

fn section<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("configuration serialises to JSON")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&error::read(path)?)
        .map_err(|e| PipelineError::format(path, e.to_string()))
}

/// Resolve a configured path against the case directory.
pub fn case_relative(case: &Case, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        case.root.join(p)
    }
}

fn require_file(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PipelineError::missing(
            format!("{what} ({})", path.display()),
            hint,
        ))
    }
}

pub fn calibrate(case: &Case, cfg: &Config) -> Result<StageOutput> {
    let photos = case.photos()?;
    if photos.is_empty() {
        return Err(PipelineError::missing(
            "photos",
            "put photographs in photos/",
        ));
    }
    let mut stems: Vec<String> = photos.iter().map(|p| stem(p)).collect();
    stems.dedup();
    if stems.len() != photos.len() {
        return Err(PipelineError::Annotation(
            "two photos share a file stem".into(),
        ));
    }
    let landmarks = case.landmarks()?;
    let out_dir = case.stage_dir(StageName::Calibrate);
    let ps = cfg.calibrate.archive_pixel_mm;
    let records: Vec<(String, CalibrationRecord, PathBuf)> = photos
        .par_iter()
        .map(|name| {
            let lm = landmarks.get(name).ok_or_else(|| {
                PipelineError::missing(
                    format!("landmarks for {name}"),
                    format!("add them to {}", crate::case::LANDMARKS),
                )
            })?;
            let raw = read_photo(&case.photo_path(name)?)?;
            let cal = calibrate_photo(&raw, lm, ps)?;
            let file = format!("{}.png", stem(name));
            let path = out_dir.join(&file);
            write_rgb16(&path, &cal.image)?;
            Ok((
                name.clone(),
                CalibrationRecord {
                    file,
                    fit: cal.fit,
                    origin_mm: cal.origin_mm,
                    pixel_size_mm: ps,
                },
                path,
            ))
        })
        .collect::<Result<_>>()?;
    let mut table = BTreeMap::new();
    let mut products = Vec::new();
    for (name, rec, path) in records {
        table.insert(name, rec);
        products.push(path);
    }
    let meta = out_dir.join(CALIBRATION);
    error::write(&meta, &to_json(&table))?;
    products.push(meta);
    let mut inputs: Vec<PathBuf> = photos
        .iter()
        .map(|n| case.photo_path(n))
        .collect::<Result<_>>()?;
    inputs.push(case.path(crate::case::LANDMARKS));
    case.write_provenance(
        StageName::Calibrate,
        section(&cfg.calibrate),
        &inputs,
        &products,
    )?;
    Ok(StageOutput {
        products,
        warnings: Vec::new(),
    })
}

fn calibration_table(case: &Case) -> Result<BTreeMap<String, CalibrationRecord>> {
    read_json(&case.stage_dir(StageName::Calibrate).join(CALIBRATION))
}

fn load_calibrated(case: &Case, rec: &CalibrationRecord) -> Result<Image<f64>> {
    Ok(
        read_photo(&case.stage_dir(StageName::Calibrate).join(&rec.file))?
            .with_pixel_size(rec.pixel_size_mm)?,
    )
}

/// Extract the tissue mask of one calibrated photo from a raw-pixel seed.
pub fn mask_photo(
    image: Image<f64>,
    rec: &CalibrationRecord,
    seed: [f64; 2],
    cfg: &Config,
) -> Result<Mask<f64>> {
    let cal = CalibratedPhoto {
        image,
        fit: rec.fit,
        origin_mm: rec.origin_mm,
    };
    let [x, y] = cal.map_raw_pixel(seed);
    Ok(extract_mask(&cal.image, SeedClick { x, y }, &cfg.mask)?)
}

pub fn mask(case: &Case, cfg: &Config) -> Result<StageOutput> {
    case.require(StageName::Calibrate)?;
    let table = calibration_table(case)?;
    let seeds = case.seeds()?;
    let out_dir = case.stage_dir(StageName::Mask);
    let products: Vec<PathBuf> = table
        .par_iter()
        .map(|(name, rec)| {
            let seed = seeds.get(name).ok_or_else(|| {
                PipelineError::missing(
                    format!("seed for {name}"),
                    format!("add it to {}", crate::case::SEEDS),
                )
            })?;
            let m =
                mask_photo(load_calibrated(case, rec)?, rec, *seed, cfg).map_err(|e| match e {
                    PipelineError::Core(photovol::Error::AmbiguousSeed(msg)) => {
                        PipelineError::Core(photovol::Error::AmbiguousSeed(format!(
                            "{name}: {msg}"
                        )))
                    }
                    other => other,
                })?;
            let path = out_dir.join(format!("{}.png", stem(name)));
            write_mask(&path, &m)?;
            Ok(path)
        })
        .collect::<Result<_>>()?;
    let cal_dir = case.stage_dir(StageName::Calibrate);
    let mut inputs: Vec<PathBuf> = table.values().map(|r| cal_dir.join(&r.file)).collect();
    inputs.push(cal_dir.join(CALIBRATION));
    inputs.push(case.path(crate::case::SEEDS));
    case.write_provenance(StageName::Mask, section(&cfg.mask), &inputs, &products)?;
    Ok(StageOutput {
        products,
        warnings: Vec::new(),
    })
}

pub fn stack(case: &Case, cfg: &Config) -> Result<StageOutput> {
    case.require(StageName::Calibrate)?;
    case.require(StageName::Mask)?;
    let table = calibration_table(case)?;
    let order_names = case.order()?.ok_or_else(|| {
        PipelineError::missing(
            crate::case::ORDER,
            "record the anatomical order of the photos",
        )
    })?;
    case.check_order(&order_names)?;
    let names: Vec<&String> = table.keys().collect();
    let mask_dir = case.stage_dir(StageName::Mask);
    let (slices, masks): (Vec<Image<f64>>, Vec<Mask<f64>>) = table
        .par_iter()
        .map(|(name, rec)| {
            let img = load_calibrated(case, rec)?;
            let m = read_mask(
                &mask_dir.join(format!("{}.png", stem(name))),
                rec.pixel_size_mm,
            )?;
            Ok((img, m))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let order: Vec<usize> = order_names
        .iter()
        .map(|n| {
            names
                .iter()
                .position(|m| *m == n)
                .expect("checked permutation")
        })
        .collect();
    let mut st = build_stack(
        &slices,
        &masks,
        &order,
        cfg.stack.thickness_mm,
        cfg.stack.recon_resolution_mm,
    )?;
    st.direction = cfg.stack.direction;

    let dir = case.stage_dir(StageName::Stack);
    let image = dir.join("image.nii");
    let mask = dir.join("mask.nii");
    let meta = dir.join(STACK_META);
    write_volume(&image, &st.image_volume()?)?;
    write_volume(&mask, &st.mask_volume()?)?;
    let m = StackMeta {
        photos: order_names,
        thickness_mm: st.thickness,
        pixel_size_mm: st.pixel_size(),
        direction: st.direction,
    };
    error::write(&meta, &to_json(&m))?;
    let products = vec![image, mask, meta];
    let cal_dir = case.stage_dir(StageName::Calibrate);
    let mut inputs: Vec<PathBuf> = table
        .iter()
        .flat_map(|(n, r)| {
            [
                cal_dir.join(&r.file),
                mask_dir.join(format!("{}.png", stem(n))),
            ]
        })
        .collect();
    inputs.push(case.path(crate::case::ORDER));
    case.write_provenance(StageName::Stack, section(&cfg.stack), &inputs, &products)?;
    Ok(StageOutput {
        products,
        warnings: Vec::new(),
    })
}

/// Read the stored stack back into memory.
pub fn load_stack(case: &Case) -> Result<(SliceStack<f64>, StackMeta)> {
    let dir = case.stage_dir(StageName::Stack);
    let meta: StackMeta = read_json(&dir.join(STACK_META))?;
    let image: Volume<f64> = read_volume(&dir.join("image.nii"))?;
    let mask: Volume<f64> = read_volume(&dir.join("mask.nii"))?;
    let n = image.dims()[2];
    if mask.dims() != image.dims() || mask.channels() != 1 || meta.photos.len() != n {
        return Err(PipelineError::format(
            &dir,
            "stack image, mask and metadata disagree",
        ));
    }
    let slices = (0..n)
        .map(|k| image.slice(k).with_pixel_size(meta.pixel_size_mm))
        .collect::<photovol::Result<Vec<_>>>()?;
    let masks = (0..n)
        .map(|k| Mask::from_image(mask.slice(k).with_pixel_size(meta.pixel_size_mm)?))
        .collect::<photovol::Result<Vec<_>>>()?;
    let mut st = SliceStack::new(slices, masks, meta.thickness_mm)?;
    st.direction = meta.direction;
    Ok((st, meta))
}

pub fn reconstruct(
    case: &Case,
    cfg: &Config,
    progress: &mut dyn FnMut(&StageReport),
) -> Result<StageOutput> {
    case.require(StageName::Stack)?;
    let ref_path = case_relative(case, &cfg.reconstruct.reference_volume);
    require_file(
        &ref_path,
        "reference volume",
        "set reconstruct.reference_volume or pass --reference-volume",
    )?;
    let (st, meta) = load_stack(case)?;
    let refvol: Volume<f64> = read_volume(&ref_path)?;
    let reference = ReferenceVolume::new(cfg.reconstruct.reference, &refvol)?;
    let rc = cfg.reconstruct.recon_config();
    let res = optimize_reconstruction(&st, &reference, &rc, |s| {
        log::info!(
            "stage {} ({:?}, 1/{}): {:.6} -> {:.6} in {} iterations",
            s.stage,
            s.level,
            s.factor,
            s.initial,
            s.final_value,
            s.iterations
        );
        progress(s)
    })?;
    for w in &res.warnings {
        log::warn!("{w}");
    }
    let out = render_reconstruction(&st, &res.transforms)?;

    let dir = case.stage_dir(StageName::Reconstruct);
    let image = dir.join("image.nii");
    let mask = dir.join("mask.nii");
    let tf = dir.join(TRANSFORMS);
    write_volume(&image, &out.image)?;
    write_volume(&mask, &out.mask)?;
    let file = TransformsFile {
        photos: meta.photos,
        reference: cfg.reconstruct.reference,
        transforms: res.transforms,
        stages: res.stages,
        warnings: res.warnings.clone(),
    };
    error::write(&tf, &to_json(&file))?;
    let products = vec![image, mask, tf];
    let sdir = case.stage_dir(StageName::Stack);
    let inputs = vec![
        sdir.join("image.nii"),
        sdir.join("mask.nii"),
        sdir.join(STACK_META),
        ref_path,
    ];
    let mut conf = section(&cfg.reconstruct);
    conf["weights"] = section(&rc.weights);
    case.write_provenance(StageName::Reconstruct, conf, &inputs, &products)?;
    Ok(StageOutput {
        products,
        warnings: res.warnings,
    })
}

pub fn parse_labels_tsv(text: &str, path: &Path) -> Result<Vec<LabelInfo>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .unwrap_or("")
        .split('\t')
        .map(str::trim)
        .collect();
    if header != ["id", "name", "gmm_group"] {
        return Err(PipelineError::format(
            path,
            "header must be: id, name, gmm_group (tab separated)",
        ));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').map(str::trim).collect();
            let bad = || {
                PipelineError::format(
                    path,
                    format!("row {}: expected an integer id, a name and a group", i + 1),
                )
            };
            if f.len() != 3 || f[1].is_empty() || f[2].is_empty() {
                return Err(bad());
            }
            Ok(LabelInfo {
                id: f[0].parse().map_err(|_| bad())?,
                name: f[1].to_string(),
                gmm_group: f[2].to_string(),
            })
        })
        .collect()
}

pub fn labels_tsv(labels: &[LabelInfo]) -> String {
    let mut s = String::from("id\tname\tgmm_group\n");
    for l in labels {
        s.push_str(&format!("{}\t{}\t{}\n", l.id, l.name, l.gmm_group));
    }
    s
}

/// Atlas probabilities plus the `labels.tsv` next to them.
pub fn load_atlas(path: &Path) -> Result<(AtlasPrior, PathBuf)> {
    require_file(path, "atlas", "pass --atlas or set segment.atlas")?;
    let tsv = path.with_file_name(ATLAS_LABELS);
    require_file(
        &tsv,
        "atlas label table",
        "put labels.tsv next to the atlas",
    )?;
    let labels = parse_labels_tsv(&String::from_utf8_lossy(&error::read(&tsv)?), &tsv)?;
    let prob: Volume<f32> = read_volume(path)?;
    Ok((AtlasPrior::new(prob, labels, DEFAULT_CONTROL_SPACING)?, tsv))
}

pub fn write_atlas(dir: &Path, atlas: &AtlasPrior) -> Result<PathBuf> {
    let p = dir.join("atlas.nii");
    write_volume(&p, &atlas.prob)?;
    error::write(
        &dir.join(ATLAS_LABELS),
        labels_tsv(&atlas.labels).as_bytes(),
    )?;
    Ok(p)
}

pub fn segment(case: &Case, cfg: &Config) -> Result<StageOutput> {
    case.require(StageName::Reconstruct)?;
    let atlas_path = cfg
        .segment
        .atlas
        .as_deref()
        .map(|a| case_relative(case, a))
        .ok_or_else(|| {
            PipelineError::missing(
                "atlas",
                "pass --atlas or set segment.atlas in the configuration",
            )
        })?;
    let (atlas, tsv) = load_atlas(&atlas_path)?;
    let rdir = case.stage_dir(StageName::Reconstruct);
    let volume: Volume<f64> = read_volume(&rdir.join("image.nii"))?;
    let mask: Volume<f64> = read_volume(&rdir.join("mask.nii"))?;
    let r = segment_volume(&volume, &mask, &atlas, &cfg.segment.model)?;
    for w in &r.warnings {
        log::warn!("{w}");
    }

    let dir = case.stage_dir(StageName::Segment);
    let seg = dir.join("seg.nii");
    Nifti::from_labels(&r.segmentation.hard_labels())?.write(&seg)?;
    let mut products = vec![seg];
    if cfg.segment.write_posterior {
        let p = dir.join("posterior.nii");
        write_volume(&p, &r.segmentation.posterior.convert::<f32>())?;
        products.push(p);
    }
    let field = dir.join("brightness_field.nii");
    write_volume(&field, &r.field.render(*volume.grid())?.convert::<f32>())?;
    products.push(field);
    let params = dir.join(PARAMS);
    let sp = SegParams {
        labels: r.segmentation.labels.clone(),
        gmm: r.gmm,
        field: r.field,
        deformation: r.deformation,
        trace: r.trace,
        warnings: r.warnings.clone(),
        zero_mass: r.zero_mass,
    };
    error::write(&params, &to_json(&sp))?;
    products.push(params);
    let inputs = vec![
        rdir.join("image.nii"),
        rdir.join("mask.nii"),
        atlas_path,
        tsv,
    ];
    case.write_provenance(
        StageName::Segment,
        section(&cfg.segment),
        &inputs,
        &products,
    )?;
    Ok(StageOutput {
        products,
        warnings: r.warnings,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub label: u16,
    pub name: String,
    pub hard_mm3: f64,
    pub soft_mm3: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub label: u16,
    pub name: String,
    pub dice: Option<f64>,
    pub pred_voxels: usize,
    pub truth_voxels: usize,
}

pub fn evaluate(case: &Case, cfg: &Config) -> Result<StageOutput> {
    case.require(StageName::Segment)?;
    let sdir = case.stage_dir(StageName::Segment);
    let params: SegParams = read_json(&sdir.join(PARAMS))?;
    let seg = Nifti::read(&sdir.join("seg.nii"))?.to_labels()?;
    let ids: Vec<u16> = params.labels.iter().map(|l| l.id).collect();
    let name_of = |id: u16| {
        params
            .labels
            .iter()
            .find(|l| l.id == id)
            .map(|l| l.name.clone())
            .unwrap_or_default()
    };
    let post_path = sdir.join("posterior.nii");
    let mut inputs = vec![sdir.join("seg.nii"), sdir.join(PARAMS)];
    let volumes: Vec<VolumeReport> = if post_path.is_file() {
        inputs.push(post_path.clone());
        let post: Volume<f32> = read_volume(&post_path)?;
        structure_volumes(&post, &seg, &ids)?
            .into_iter()
            .map(|r| VolumeReport {
                label: r.label,
                name: name_of(r.label),
                hard_mm3: r.hard_mm3,
                soft_mm3: Some(r.soft_mm3),
            })
            .collect()
    } else {
        hard_volumes(&seg, &ids)
            .into_iter()
            .map(|(l, v)| VolumeReport {
                label: l,
                name: name_of(l),
                hard_mm3: v,
                soft_mm3: None,
            })
            .collect()
    };
    let dir = case.stage_dir(StageName::Evaluate);
    let mut tsv = String::from("label\tname\thard_mm3\tsoft_mm3\n");
    for v in &volumes {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            v.label,
            v.name,
            v.hard_mm3,
            fmt_opt(v.soft_mm3)
        ));
    }
    let mut products = vec![dir.join("volumes.tsv"), dir.join("volumes.json")];
    error::write(&products[0], tsv.as_bytes())?;
    error::write(&products[1], &to_json(&volumes))?;

    if let Some(truth) = &cfg.evaluate.truth {
        let tp = case_relative(case, truth);
        require_file(&tp, "truth label map", "set evaluate.truth or pass --truth")?;
        let t = resample_labels_nearest(&Nifti::read(&tp)?.to_labels()?, &seg.grid);
        let structures: Vec<u16> = ids.iter().copied().filter(|&i| i != 0).collect();
        let rows: Vec<DiceReport> = dice_label_volumes(&seg, &t, &structures)?
            .into_iter()
            .map(|r| DiceReport {
                label: r.label,
                name: name_of(r.label),
                dice: r.dice,
                pred_voxels: r.pred_voxels,
                truth_voxels: r.truth_voxels,
            })
            .collect();
        let mut tsv = String::from("label\tname\tdice\tpred_voxels\ttruth_voxels\n");
        for r in &rows {
            tsv.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.label,
                r.name,
                fmt_opt(r.dice),
                r.pred_voxels,
                r.truth_voxels
            ));
        }
        error::write(&dir.join("dice.tsv"), tsv.as_bytes())?;
        error::write(&dir.join("dice.json"), &to_json(&rows))?;
        products.push(dir.join("dice.tsv"));
        products.push(dir.join("dice.json"));
        inputs.push(tp);
    }
    case.write_provenance(
        StageName::Evaluate,
        section(&cfg.evaluate),
        &inputs,
        &products,
    )?;
    Ok(StageOutput {
        products,
        warnings: Vec::new(),
    })
}

/// Hard segmentation read back from a finished case.
pub fn load_segmentation(case: &Case) -> Result<LabelVolume> {
    Nifti::read(&case.stage_dir(StageName::Segment).join("seg.nii"))?.to_labels()
}

/// Calibrate, mask and stack whatever is not already current.
pub fn prepare(case: &Case, cfg: &Config) -> Result<()> {
    if !case.is_current(StageName::Calibrate) {
        calibrate(case, cfg)?;
    }
    if !case.is_current(StageName::Mask) {
        mask(case, cfg)?;
    }
    if !case.is_current(StageName::Stack) {
        stack(case, cfg)?;
    }
    Ok(())
}

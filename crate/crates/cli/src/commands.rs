use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use markprompt::config::RunConfig;
use markprompt::data::{
    load_bias_dataset, load_categories, load_image, load_keypoint_dataset, load_mask, load_masks,
    load_rec_dataset, write_report, DatasetEntry, TaskReport,
};
use markprompt::imgcore::encode_png;
use markprompt::markers::{
    apply_outside_effect, draw_marker, marker_for_bbox, CircleRegion, OutsideEffect, Region,
};
use markprompt::scoring::Signature;
use markprompt::tasks::{
    bias_probe, iou, localize_keypoints, name_keypoints, rec_accuracy, rec_select,
    render_keypoint_prompt, BiasCategories, GridSpec, KeypointInstance, LocalizeOptions,
    NamingOptions, PckTarget, RecOptions,
};
use markprompt::{BBox, MarkerSpec, PointF, Shape};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::backends::Backends;
use crate::settings::{self, output_dir, parse_bbox, parse_color, parse_point, split_list};
use crate::{usage, Command, RunArgs};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::NameKeypoints { data, run } => {
            let config = setup(&run)?;
            name_keypoints_cmd(&data, config)
        }
        Command::Localize { data, masks, run } => {
            let config = setup(&run)?;
            localize_cmd(&data, masks.as_deref(), config)
        }
        Command::Rec { data, run } => {
            let config = setup(&run)?;
            rec_cmd(&data, config)
        }
        Command::Bias {
            data,
            categories,
            run,
        } => {
            let config = setup(&run)?;
            bias_cmd(&data, categories.as_deref(), config)
        }
        Command::Annotate {
            image,
            at,
            bbox,
            effects,
            run,
        } => {
            let config = setup(&run)?;
            annotate_cmd(&image, at.as_deref(), bbox.as_deref(), &effects, config)
        }
        Command::SweepMarkers {
            data,
            shapes,
            colors,
            sizes,
            run,
        } => {
            let config = setup(&run)?;
            sweep_cmd(&data, &shapes, &colors, &sizes, config)
        }
    }
}

fn setup(run: &RunArgs) -> Result<RunConfig> {
    let config = settings::resolve(run)?;
    if let Some(jobs) = run.jobs {
        if jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        // fails only if a pool already exists, which keeps that pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    Ok(config)
}

fn finish_report(
    config: RunConfig,
    task: &str,
    per_instance: Vec<Value>,
    aggregate: BTreeMap<String, f64>,
) -> Result<PathBuf> {
    let dir = output_dir(&config)?;
    let path = dir.join(format!("{task}.json"));
    let report = TaskReport {
        task: task.to_string(),
        config,
        per_instance,
        aggregate,
    };
    write_report(&report, &path)?;
    Ok(path)
}

fn with_entry<T>(entry: &DatasetEntry<T>, value: impl serde::Serialize) -> Value {
    let mut v = serde_json::to_value(value).expect("task results serialize");
    if let Value::Object(map) = &mut v {
        map.insert("index".into(), json!(entry.index));
        map.insert("image_path".into(), json!(entry.image_path));
    }
    v
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn naming_planted(
    inst: &KeypointInstance,
    config: &RunConfig,
    marker: &MarkerSpec,
) -> Result<Vec<(String, Signature)>> {
    inst.names
        .iter()
        .zip(&inst.locations)
        .map(|(name, &loc)| {
            let text = render_keypoint_prompt(&config.template, name, &inst.class_name)?;
            Ok((
                text,
                Signature::Circle {
                    center: loc,
                    spec: *marker,
                },
            ))
        })
        .collect()
}

fn naming_accuracies(
    data: &[DatasetEntry<KeypointInstance>],
    backends: &Backends,
    config: &RunConfig,
    marker: MarkerSpec,
) -> Result<Vec<Value>> {
    let opts = naming_options(config, marker);
    data.par_iter()
        .map(|e| {
            let scorer = backends.scorer(&naming_planted(&e.instance, config, &marker)?)?;
            let r = name_keypoints(&e.instance, &scorer, &opts)
                .with_context(|| format!("entry {} ({})", e.index, e.image_path))?;
            let mut v = with_entry(e, r.summary());
            v["names"] = json!(e.instance.names);
            Ok(v)
        })
        .collect()
}

fn naming_options(config: &RunConfig, marker: MarkerSpec) -> NamingOptions {
    NamingOptions {
        template: config.template.clone(),
        marker,
        tau: config.tau,
        sinkhorn: config.sinkhorn,
        decode: config.decode,
    }
}

fn accuracy_means(per_instance: &[Value]) -> (f64, f64) {
    let field = |k: &str| mean(per_instance.iter().map(|v| v[k].as_f64().unwrap_or(0.0)));
    (field("t2i_accuracy"), field("i2t_accuracy"))
}

fn name_keypoints_cmd(data: &Path, config: RunConfig) -> Result<()> {
    let data = load_keypoint_dataset(data)?;
    let backends = Backends::new(&config)?;
    let per_instance = naming_accuracies(&data, &backends, &config, config.marker)?;
    let (t2i, i2t) = accuracy_means(&per_instance);
    let aggregate = BTreeMap::from([
        ("t2i_accuracy".to_string(), t2i),
        ("i2t_accuracy".to_string(), i2t),
        ("instances".to_string(), data.len() as f64),
    ]);
    let path = finish_report(config, "name-keypoints", per_instance, aggregate)?;
    println!("t2i accuracy: {t2i:.3}");
    println!("i2t accuracy: {i2t:.3}");
    println!("report: {}", path.display());
    Ok(())
}

/// The grid cell containing `p`.
fn grid_cell(p: PointF, width: u32, height: u32, m: usize) -> Result<BBox> {
    let (w, h, mf) = (width as f64, height as f64, m as f64);
    let j = ((p.x * mf / w).floor() as usize).min(m - 1);
    let i = ((p.y * mf / h).floor() as usize).min(m - 1);
    Ok(BBox::new(
        j as f64 * w / mf,
        i as f64 * h / mf,
        w / mf,
        h / mf,
    )?)
}

fn localize_cmd(data: &Path, masks: Option<&Path>, config: RunConfig) -> Result<()> {
    let data = load_keypoint_dataset(data)?;
    let mask_paths = masks.map(load_masks).transpose()?.unwrap_or_default();
    let backends = Backends::new(&config)?;
    let opts = LocalizeOptions {
        template: config.template.clone(),
        marker: config.marker,
        grid: GridSpec::new(config.grid)?,
    };
    let results = data
        .par_iter()
        .map(|e| {
            let mask = match mask_paths.get(&e.image_path) {
                Some(p) => Some(load_mask(p)?),
                None => {
                    if masks.is_some() {
                        log::warn!("no mask for {}; using every grid location", e.image_path);
                    }
                    None
                }
            };
            let inst = &e.instance;
            let planted = inst
                .names
                .iter()
                .zip(&inst.locations)
                .map(|(name, &loc)| {
                    let text = render_keypoint_prompt(&config.template, name, &inst.class_name)?;
                    let region =
                        grid_cell(loc, inst.image.width(), inst.image.height(), config.grid)?;
                    Ok((
                        text,
                        Signature::CircleIn {
                            region,
                            spec: config.marker,
                        },
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let scorer = backends.scorer(&planted)?;
            let target = PckTarget {
                points: &inst.locations,
                bbox: inst.bbox,
                alpha: config.alpha,
            };
            let r = localize_keypoints(
                &inst.image,
                &inst.names,
                &inst.class_name,
                &scorer,
                &opts,
                mask.as_ref(),
                Some(target),
            )
            .with_context(|| format!("entry {} ({})", e.index, e.image_path))?;
            let mut v = with_entry(e, &r);
            v["names"] = json!(inst.names);
            Ok((r, v))
        })
        .collect::<Result<Vec<_>>>()?;
    let flags: Vec<bool> = results
        .iter()
        .flat_map(|(r, _)| r.correct.clone().unwrap_or_default())
        .collect();
    let pck = mean(flags.iter().map(|&f| f as u8 as f64));
    let aggregate = BTreeMap::from([
        ("pck".to_string(), pck),
        ("alpha".to_string(), config.alpha),
        ("keypoints".to_string(), flags.len() as f64),
        ("instances".to_string(), data.len() as f64),
    ]);
    let alpha = config.alpha;
    let per_instance = results.into_iter().map(|(_, v)| v).collect();
    let path = finish_report(config, "localize", per_instance, aggregate)?;
    println!("PCK@{alpha}: {pck:.3}");
    println!("report: {}", path.display());
    Ok(())
}

fn rec_cmd(data: &Path, config: RunConfig) -> Result<()> {
    let data = load_rec_dataset(data)?;
    let backends = Backends::new(&config)?;
    let opts = RecOptions {
        marker: config.marker,
        prefix: config.rec_prefix.clone(),
        distractors: config.distractors,
        mean_subtract: config.mean_subtract,
        ensemble: config.rec_ensemble,
        seed: config.seed,
    };
    let results = data
        .par_iter()
        .map(|e| {
            let inst = &e.instance;
            let text = format!("{}{}", config.rec_prefix, inst.expression);
            let scorer = backends.scorer(&[(
                text,
                Signature::Ellipse {
                    bbox: inst.gt_box,
                    spec: config.marker,
                },
            )])?;
            let sel = rec_select(inst, &scorer, &opts, e.index as u64)
                .with_context(|| format!("entry {} ({})", e.index, e.image_path))?;
            let chosen = inst.proposals[sel.index];
            let overlap = iou(&chosen, &inst.gt_box);
            let mut v = with_entry(e, &sel);
            v["selected_index"] = json!(sel.index);
            v["expression"] = json!(inst.expression);
            v["selected_box"] = json!(chosen);
            v["iou"] = json!(overlap);
            v["correct"] = json!(overlap > 0.5);
            Ok((chosen, inst.gt_box, v))
        })
        .collect::<Result<Vec<_>>>()?;
    let chosen: Vec<BBox> = results.iter().map(|r| r.0).collect();
    let gts: Vec<BBox> = results.iter().map(|r| r.1).collect();
    let accuracy = rec_accuracy(&chosen, &gts)?;
    let aggregate = BTreeMap::from([
        ("accuracy".to_string(), accuracy),
        ("instances".to_string(), data.len() as f64),
    ]);
    let per_instance = results.into_iter().map(|r| r.2).collect();
    let path = finish_report(config, "rec", per_instance, aggregate)?;
    println!("accuracy: {accuracy:.3}");
    println!("report: {}", path.display());
    Ok(())
}

fn bias_cmd(data: &Path, categories: Option<&Path>, config: RunConfig) -> Result<()> {
    let categories = match categories {
        Some(p) => load_categories(p).map_err(|e| match e {
            markprompt::Error::Io { .. } | markprompt::Error::Parse { .. } => {
                usage(format!("categories: {e}"))
            }
            other => other.into(),
        })?,
        None => BiasCategories::default(),
    };
    let data = load_bias_dataset(data)?;
    let scorer = Backends::new(&config)?.scorer(&[])?;
    let images: Vec<_> = data.iter().map(|e| e.instance.image.clone()).collect();
    let subjects: Vec<_> = data.iter().map(|e| e.instance.subject).collect();
    let report = bias_probe(
        &images,
        &subjects,
        &categories,
        &scorer,
        &config.marker,
        &config.bias_prefix,
    )?;
    let per_instance = data
        .iter()
        .zip(&report.per_image)
        .map(|(e, r)| with_entry(e, r))
        .collect();
    let aggregate = BTreeMap::from([
        ("rate_original".to_string(), report.rate_original),
        ("rate_marked".to_string(), report.rate_marked),
        ("n_images".to_string(), report.n_images as f64),
    ]);
    let path = finish_report(config, "bias", per_instance, aggregate)?;
    println!("criminal rate, original: {:.3}", report.rate_original);
    println!("criminal rate, marked:   {:.3}", report.rate_marked);
    println!("report: {}", path.display());
    Ok(())
}

fn parse_effects(s: &str) -> Result<Vec<OutsideEffect>> {
    match s {
        "all" => Ok(vec![OutsideEffect::Blur, OutsideEffect::Grayscale]),
        "none" => Ok(Vec::new()),
        _ => split_list(s)
            .into_iter()
            .map(|e| match e {
                "blur" => Ok(OutsideEffect::Blur),
                "gray" | "grey" | "grayscale" => Ok(OutsideEffect::Grayscale),
                other => Err(usage(format!(
                    "unknown effect {other:?}; use blur, gray, all or none"
                ))),
            })
            .collect(),
    }
}

fn annotate_cmd(
    image: &Path,
    at: Option<&str>,
    bbox: Option<&str>,
    effects: &str,
    config: RunConfig,
) -> Result<()> {
    let effects = parse_effects(effects)?;
    let img = load_image(image)?;
    let marker = config.marker;
    let (marked, region, base): (_, Region, &str) = match (at, bbox) {
        (Some(at), None) => {
            let center = parse_point(at)?;
            let marked = draw_marker(&img, &marker, center)?;
            let (r, t) = marker.pixel_size(img.shorter_side());
            (
                marked,
                CircleRegion::new(center, r + t / 2.0)?.into(),
                marker.shape.name(),
            )
        }
        (None, Some(b)) => {
            let (marked, region) = marker_for_bbox(&img, &parse_bbox(b)?, &marker)?;
            (marked, region.into(), "ellipse")
        }
        _ => return Err(usage("give exactly one of --at or --bbox")),
    };
    let dir = output_dir(&config)?;
    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image");
    let mut outputs = vec![(base.to_string(), marked.clone())];
    for effect in effects {
        outputs.push((
            format!("{base}_{}", effect.label()),
            apply_outside_effect(&marked, &region, effect),
        ));
    }
    for (label, img) in outputs {
        let path = dir.join(format!("{stem}_{label}.png"));
        std::fs::write(&path, encode_png(&img))
            .with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn sweep_cmd(
    data: &Path,
    shapes: &str,
    colors: &str,
    sizes: &str,
    config: RunConfig,
) -> Result<()> {
    let shapes = split_list(shapes)
        .into_iter()
        .map(|s| s.parse::<Shape>().map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let colors = split_list(colors)
        .into_iter()
        .map(|c| Ok((c.to_string(), parse_color(c)?)))
        .collect::<Result<Vec<_>>>()?;
    let sizes = split_list(sizes)
        .into_iter()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| usage(format!("bad size {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if shapes.is_empty() || colors.is_empty() || sizes.is_empty() {
        return Err(usage(
            "--shapes, --colors and --sizes each need at least one value",
        ));
    }
    let data = load_keypoint_dataset(data)?;
    let backends = Backends::new(&config)?;

    let dir = output_dir(&config)?;
    let path = dir.join("sweep-markers.csv");
    let mut out =
        csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    out.write_record([
        "shape",
        "color",
        "rgb",
        "radius_frac",
        "thickness_frac",
        "marker",
        "t2i_accuracy",
        "i2t_accuracy",
        "instances",
    ])?;
    for &shape in &shapes {
        for (color_name, color) in &colors {
            for &size in &sizes {
                let marker = MarkerSpec::new(shape, *color, size, config.marker.thickness_frac)
                    .map_err(|e| usage(e.to_string()))?;
                let per_instance = naming_accuracies(&data, &backends, &config, marker)?;
                let (t2i, i2t) = accuracy_means(&per_instance);
                let rgb = color.to_array().map(|c| c.to_string()).join(" ");
                out.write_record([
                    shape.name().to_string(),
                    color_name.clone(),
                    rgb,
                    size.to_string(),
                    marker.thickness_frac.to_string(),
                    serde_json::to_string(&marker)?,
                    format!("{t2i}"),
                    format!("{i2t}"),
                    data.len().to_string(),
                ])?;
                println!(
                    "{} {} {}: t2i {t2i:.3} i2t {i2t:.3}",
                    shape.name(),
                    color_name,
                    size
                );
            }
        }
    }
    out.flush()?;
    println!("csv: {}", path.display());
    Ok(())
}
